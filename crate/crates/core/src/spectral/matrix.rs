use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grid::UlamGrid;
use crate::dynamics::{AbsorbedSystem, Purpose, Substream};
use crate::{Error, Result};

/// Row sums may exceed 1 by at most this much.
pub const ROW_SUM_SLACK: f64 = 1e-12;

/// A square nonnegative matrix with row sums ≤ 1, in compressed-row form.
/// One application advances time by `horizon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstochasticMatrix {
    n: usize,
    horizon: f64,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    /// Monte-Carlo samples behind each row, if estimated.
    samples_per_row: Option<usize>,
}

impl SubstochasticMatrix {
    /// Builds from per-row `(column, value)` lists; zeros are dropped.
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>, horizon: f64) -> Result<Self> {
        Self::from_rows_with_slack(rows, horizon, ROW_SUM_SLACK)
    }

    /// As [`Self::from_rows`], allowing row sums up to `1 + slack`.
    pub(crate) fn from_rows_with_slack(
        rows: Vec<Vec<(usize, f64)>>,
        horizon: f64,
        slack: f64,
    ) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "operator horizon must be positive, got {horizon}"
            )));
        }
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for (i, mut row) in rows.into_iter().enumerate() {
            row.sort_by_key(|&(c, _)| c);
            let mut sum = 0.0;
            for (c, v) in row {
                if c >= n {
                    return Err(Error::IndexOutOfRange { index: c, size: n });
                }
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(Error::NotSubstochastic(format!(
                        "entry ({i}, {c}) = {v}"
                    )));
                }
                if v == 0.0 {
                    continue;
                }
                if cols.len() > row_ptr[i] && *cols.last().unwrap() == c {
                    *vals.last_mut().unwrap() += v;
                } else {
                    cols.push(c);
                    vals.push(v);
                }
                sum += v;
            }
            if sum > 1.0 + slack {
                return Err(Error::NotSubstochastic(format!("row {i} sums to {sum}")));
            }
            row_ptr.push(cols.len());
        }
        Ok(Self {
            n,
            horizon,
            row_ptr,
            cols,
            vals,
            samples_per_row: None,
        })
    }

    pub fn from_dense(m: &DMatrix<f64>, horizon: f64) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::InvalidArgument("matrix must be square".into()));
        }
        let rows = (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| (j, m[(i, j)])).collect())
            .collect();
        Self::from_rows(rows, horizon)
    }

    /// Builds from `(row, col, value)` triplets.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)], horizon: f64) -> Result<Self> {
        let mut rows = vec![Vec::new(); n];
        for &(i, j, v) in triplets {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, size: n });
            }
            rows[i].push((j, v));
        }
        Self::from_rows(rows, horizon)
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        (0..self.n)
            .flat_map(|i| self.row(i).map(move |(j, v)| (i, j, v)))
            .collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                m[(i, j)] = v;
            }
        }
        m
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn samples_per_row(&self) -> Option<usize> {
        self.samples_per_row
    }

    pub fn with_samples_per_row(mut self, samples: Option<usize>) -> Self {
        self.samples_per_row = samples;
        self
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[r.clone()].binary_search(&j) {
            Ok(k) => self.vals[r.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).map(|(_, v)| v).sum()).collect()
    }

    /// `P v`.
    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.row(i).map(|(j, p)| p * v[j]).sum();
        }
    }

    /// `µ P`.
    pub fn apply_left(&self, mu: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (i, &m) in mu.iter().enumerate() {
            if m != 0.0 {
                for (j, p) in self.row(i) {
                    out[j] += m * p;
                }
            }
        }
    }

    /// `self · other` (composition of horizons).
    pub fn compose(&self, other: &Self) -> Result<Self> {
        // Rounding can push a full row a few ulps above 1.
        let rows = self
            .product_rows(other)?
            .into_iter()
            .map(|r| {
                let s: f64 = r.iter().map(|e| e.1).sum();
                if s > 1.0 {
                    r.into_iter().map(|(j, v)| (j, v / s)).collect()
                } else {
                    r
                }
            })
            .collect();
        Self::from_rows(rows, self.horizon + other.horizon)
    }

    /// `max_{ij} |self_ij − other_ij|`.
    pub fn max_abs_difference(&self, other: &Self) -> Result<f64> {
        if self.n != other.n {
            return Err(Error::InvalidArgument("matrix sizes differ".into()));
        }
        let mut worst: f64 = 0.0;
        let mut row = vec![0.0; self.n];
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                row[j] += v;
            }
            for (j, v) in other.row(i) {
                row[j] -= v;
            }
            for v in row.iter_mut() {
                worst = worst.max(v.abs());
                *v = 0.0;
            }
        }
        Ok(worst)
    }

    /// Sparse rows of `self · other`, unnormalised.
    pub(crate) fn product_rows(&self, other: &Self) -> Result<Vec<Vec<(usize, f64)>>> {
        if self.n != other.n {
            return Err(Error::InvalidArgument("matrix sizes differ".into()));
        }
        let mut acc = vec![0.0; self.n];
        let mut seen = vec![false; self.n];
        let mut rows = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let mut touched = Vec::new();
            for (k, a) in self.row(i) {
                for (j, b) in other.row(k) {
                    if !seen[j] {
                        seen[j] = true;
                        touched.push(j);
                    }
                    acc[j] += a * b;
                }
            }
            rows.push(
                touched
                    .into_iter()
                    .map(|j| {
                        seen[j] = false;
                        (j, std::mem::take(&mut acc[j]))
                    })
                    .collect(),
            );
        }
        Ok(rows)
    }
}

/// Monte-Carlo Ulam matrix: entry `(c, c')` is the fraction of
/// `samples_per_cell` points, started uniformly in cell `c`, found in cell
/// `c'` after `horizon` time units without having been absorbed.
pub fn build_ulam_operator(
    sys: &AbsorbedSystem,
    grid: &UlamGrid,
    samples_per_cell: usize,
    horizon: f64,
    seed: Substream,
) -> Result<SubstochasticMatrix> {
    if samples_per_cell == 0 {
        return Err(Error::InvalidArgument("samples_per_cell must be at least 1".into()));
    }
    if grid.dim() != sys.dim() {
        return Err(Error::GridMismatch(format!(
            "grid dimension {} differs from system dimension {}",
            grid.dim(),
            sys.dim()
        )));
    }
    let steps = sys.steps_for(horizon);
    if steps == 0 || (steps as f64 * sys.time_step() - horizon).abs() > 1e-9 * horizon.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "operator horizon {horizon} is not a positive multiple of the time step {}",
            sys.time_step()
        )));
    }
    let rows: Result<Vec<Vec<(usize, f64)>>> = (0..grid.len())
        .into_par_iter()
        .map(|c| ulam_row(sys, grid, c, samples_per_cell, steps, seed))
        .collect();
    Ok(SubstochasticMatrix::from_rows(rows?, steps as f64 * sys.time_step())?
        .with_samples_per_row(Some(samples_per_cell)))
}

const START_ATTEMPTS: usize = 10_000;

fn ulam_row(
    sys: &AbsorbedSystem,
    grid: &UlamGrid,
    c: usize,
    samples: usize,
    steps: usize,
    seed: Substream,
) -> Result<Vec<(usize, f64)>> {
    let cell = seed.fork(c as u64);
    let mut start_rng = cell.with_purpose(Purpose::Start).rng();
    let lo = grid.cell_lower(c);
    let w = grid.widths();
    let mut x = lo.clone();
    let mut hits: Vec<usize> = Vec::new();
    for s in 0..samples {
        let mut found = false;
        for _ in 0..START_ATTEMPTS {
            for j in 0..x.len() {
                x[j] = lo[j] + start_rng.random::<f64>() * w[j];
            }
            if grid.locate(&x) == Some(c) {
                found = true;
                break;
            }
        }
        if !found {
            return Err(Error::EmptyCell(c));
        }
        let mut stepper = sys.stepper(&x, cell.with_purpose(Purpose::Path).fork(s as u64))?;
        if (0..steps).all(|_| stepper.advance()) {
            if let Some(to) = grid.locate(stepper.state()) {
                hits.push(to);
            }
        }
    }
    hits.sort_unstable();
    let inv = 1.0 / samples as f64;
    let mut row = Vec::new();
    for to in hits {
        match row.last_mut() {
            Some((j, n)) if *j == to => *n += 1,
            _ => row.push((to, 1usize)),
        }
    }
    Ok(row.into_iter().map(|(j, n)| (j, n as f64 * inv)).collect())
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::dynamics::builtin;
    use crate::dynamics::{AffineMap, DiscreteSystem, Domain, FiniteChain};

    fn seed() -> Substream {
        Substream::new(11, 0, Purpose::Ulam)
    }

    #[test]
    fn csr_round_trip_and_products() {
        let d = DMatrix::from_row_slice(3, 3, &[0.5, 0.2, 0.0, 0.0, 0.0, 0.9, 0.1, 0.1, 0.1]);
        let m = SubstochasticMatrix::from_dense(&d, 1.0).unwrap();
        assert_eq!(m.nnz(), 6);
        assert_eq!(m.to_dense(), d);
        assert_eq!(m.get(1, 2), 0.9);
        assert_eq!(m.get(1, 1), 0.0);
        let v = [1.0, 2.0, 3.0];
        let mut out = [0.0; 3];
        m.apply(&v, &mut out);
        assert_eq!(out.to_vec(), (&d * nalgebra::DVector::from_row_slice(&v)).as_slice());
        m.apply_left(&v, &mut out);
        let left = nalgebra::RowDVector::from_row_slice(&v) * &d;
        assert_eq!(out.to_vec(), left.as_slice());
        let sq = m.compose(&m).unwrap();
        assert!((sq.to_dense() - &d * &d).abs().max() < 1e-15);
        assert_eq!(sq.horizon(), 2.0);
        let back = SubstochasticMatrix::from_triplets(3, &m.triplets(), 1.0).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_excess_mass_and_negative_entries() {
        let bad = DMatrix::from_row_slice(2, 2, &[0.7, 0.4, 0.0, 0.0]);
        assert!(matches!(
            SubstochasticMatrix::from_dense(&bad, 1.0),
            Err(Error::NotSubstochastic(_))
        ));
        let neg = DMatrix::from_row_slice(2, 2, &[0.7, -0.1, 0.0, 0.0]);
        assert!(SubstochasticMatrix::from_dense(&neg, 1.0).is_err());
    }

    #[test]
    fn identity_map_gives_identity_matrix() {
        let dom = Domain::boxed(vec![0.0], vec![1.0]).unwrap();
        let sys = AbsorbedSystem::Discrete(
            DiscreteSystem::new(dom.clone(), Arc::new(AffineMap::identity(1))).unwrap(),
        );
        let grid = UlamGrid::uniform(dom, 10).unwrap();
        let m = build_ulam_operator(&sys, &grid, 50, 1.0, seed()).unwrap();
        assert_eq!(m.to_dense(), DMatrix::identity(10, 10));
    }

    #[test]
    fn instant_exit_gives_zero_matrix() {
        let dom = Domain::boxed(vec![0.0], vec![1.0]).unwrap();
        let sys = AbsorbedSystem::Discrete(
            DiscreteSystem::new(dom.clone(), Arc::new(AffineMap::shift(vec![1.0]))).unwrap(),
        );
        let grid = UlamGrid::uniform(dom, 10).unwrap();
        let m = build_ulam_operator(&sys, &grid, 50, 1.0, seed()).unwrap();
        assert_eq!(m.nnz(), 0);
        assert!(m.row_sums().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn horizon_must_match_time_step() {
        let sys = AbsorbedSystem::sde(builtin::double_well(&[0.5], 1.5).unwrap(), 0.01).unwrap();
        let grid = UlamGrid::uniform(sys.domain().clone(), 4).unwrap();
        assert!(build_ulam_operator(&sys, &grid, 10, 0.015, seed()).is_err());
        assert!(build_ulam_operator(&sys, &grid, 0, 0.1, seed()).is_err());
    }

    fn chain_system() -> (AbsorbedSystem, UlamGrid, DMatrix<f64>) {
        let p = DMatrix::from_row_slice(3, 3, &[0.5, 0.3, 0.1, 0.2, 0.2, 0.4, 0.0, 0.6, 0.3]);
        let rows: Vec<Vec<f64>> = (0..3).map(|i| p.row(i).iter().copied().collect()).collect();
        let chain = FiniteChain::new(&rows).unwrap();
        let dom = chain.domain();
        let sys = AbsorbedSystem::Discrete(DiscreteSystem::new(dom.clone(), Arc::new(chain)).unwrap());
        (sys, UlamGrid::uniform(dom, 3).unwrap(), p)
    }

    fn within_binomial(est: &DMatrix<f64>, exact: &DMatrix<f64>, n: usize) -> bool {
        est.iter().zip(exact.iter()).all(|(&e, &p)| {
            let sd = (p * (1.0 - p) / n as f64).sqrt();
            (e - p).abs() <= 3.0 * sd + 1e-12
        })
    }

    #[test]
    fn chain_entries_within_binomial_error() {
        let (sys, grid, p) = chain_system();
        let m = build_ulam_operator(&sys, &grid, 20_000, 1.0, seed()).unwrap();
        assert!(within_binomial(&m.to_dense(), &p, 20_000));
    }

    #[test]
    fn two_step_operator_matches_square() {
        let (sys, grid, p) = chain_system();
        let n = 20_000;
        let m2 = build_ulam_operator(&sys, &grid, n, 2.0, seed()).unwrap();
        let m = build_ulam_operator(&sys, &grid, n, 1.0, seed().fork(1)).unwrap();
        let sq = m.compose(&m).unwrap().to_dense();
        // Both are estimates; compare against each other with the summed variance.
        let exact = &p * &p;
        for ((&a, &b), &q) in m2.to_dense().iter().zip(sq.iter()).zip(exact.iter()) {
            let sd = (2.0 * q * (1.0 - q) / n as f64).sqrt();
            assert!((a - b).abs() <= 3.0 * sd + 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn double_well_rows_reproducible_at_higher_sampling() {
        let sys = AbsorbedSystem::sde(builtin::double_well(&[0.5], 1.5).unwrap(), 1e-3).unwrap();
        let grid = UlamGrid::uniform(sys.domain().clone(), 40).unwrap();
        let lo = build_ulam_operator(&sys, &grid, 1_000, 0.1, seed()).unwrap().to_dense();
        let hi = build_ulam_operator(&sys, &grid, 10_000, 0.1, seed().fork(9))
            .unwrap()
            .to_dense();
        // Two-sample binomial test per entry with the pooled proportion.
        let (n1, n2) = (1_000.0, 10_000.0);
        let z: Vec<f64> = lo
            .iter()
            .zip(hi.iter())
            .filter(|(&a, &b)| a + b > 0.0)
            .map(|(&a, &b)| {
                let pooled = (a * n1 + b * n2) / (n1 + n2);
                let sd = (pooled * (1.0 - pooled) * (1.0 / n1 + 1.0 / n2)).sqrt();
                (a - b).abs() / sd
            })
            .collect();
        let beyond = z.iter().filter(|&&v| v > 3.0).count();
        assert!(
            (beyond as f64) <= 0.01 * z.len() as f64,
            "{beyond} of {} entries beyond 3σ",
            z.len()
        );
    }
}
