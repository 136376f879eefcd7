use nalgebra::DMatrix;
use serde::Serialize;

use crate::dynamics::{QrAccumulator, Stepper};
use crate::linalg::max_principal_angle;
use crate::{Error, Result};

/// Default gap (per unit time) separating distinct exponents.
pub const DEFAULT_GAP: f64 = 0.05;

/// Flag subspaces must nest to this principal angle.
pub const NESTING_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct OseledetsOptions {
    pub gap: f64,
    pub period: usize,
}

impl Default for OseledetsOptions {
    fn default() -> Self {
        Self {
            gap: DEFAULT_GAP,
            period: 1,
        }
    }
}

/// Singular-value rates of `Φ_t` at one grid time.
#[derive(Debug, Clone, Serialize)]
pub struct RateSnapshot {
    pub t: f64,
    pub rates: Vec<f64>,
}

/// Finite-time picture of the Oseledets structure at the largest grid time.
#[derive(Debug, Clone, Serialize)]
pub struct OseledetsEstimate {
    pub t: f64,
    /// `(Φ_tᵀ Φ_t)^{1/2t}`.
    #[serde(skip)]
    pub matrix: DMatrix<f64>,
    /// Eigenvalues of `matrix`, largest first.
    pub eigenvalues: Vec<f64>,
    /// Matching eigenvectors as columns.
    #[serde(skip)]
    pub eigenvectors: DMatrix<f64>,
    /// `log` of the eigenvalues.
    pub rates: Vec<f64>,
    /// Distinct exponents `λ_1 > … > λ_p` (cluster means).
    pub exponents: Vec<f64>,
    pub multiplicities: Vec<usize>,
    /// Some gap lies within a factor two of the threshold.
    pub ambiguous: bool,
    /// `U_1 ⊃ U_2 ⊃ … ⊃ U_p`, where `U_i` is spanned by the eigenvectors
    /// of clusters `i..p`.
    #[serde(skip)]
    pub flags: Vec<DMatrix<f64>>,
    /// Largest principal angle of `U_{i+1}` against `U_i`.
    pub nesting_defect: f64,
    /// For each `U_i`, its principal angle to the same subspace at the
    /// previous grid time (`None` for a single grid time).
    pub flag_drift: Vec<Option<f64>>,
    pub history: Vec<RateSnapshot>,
}

impl OseledetsEstimate {
    /// Distinct exponents with their multiplicities.
    pub fn spectrum(&self) -> Vec<(f64, usize)> {
        self.exponents.iter().copied().zip(self.multiplicities.iter().copied()).collect()
    }

    /// Largest principal angle between `U_i` (1-based) and `span(basis)`.
    pub fn flag_angle(&self, i: usize, basis: &DMatrix<f64>) -> Result<f64> {
        let u = self.flags.get(i.wrapping_sub(1)).ok_or(Error::IndexOutOfRange {
            index: i,
            size: self.flags.len(),
        })?;
        if u.ncols() != basis.ncols() {
            return Err(Error::InvalidArgument(format!(
                "U_{i} has dimension {}, the basis {}",
                u.ncols(),
                basis.ncols()
            )));
        }
        Ok(max_principal_angle(u, basis))
    }
}

/// Groups sorted rates into clusters separated by gaps of at least `gap`.
/// Returns the cluster sizes and whether any gap lies in `[gap/2, 2·gap)`.
pub fn cluster_rates(rates: &[f64], gap: f64) -> (Vec<usize>, bool) {
    let mut sizes = Vec::new();
    let mut ambiguous = false;
    let mut current = 0;
    for (j, _) in rates.iter().enumerate() {
        current += 1;
        if let Some(next) = rates.get(j + 1) {
            let g = rates[j] - next;
            ambiguous |= g >= 0.5 * gap && g < 2.0 * gap;
            if g >= gap {
                sizes.push(current);
                current = 0;
            }
        }
    }
    if current > 0 {
        sizes.push(current);
    }
    (sizes, ambiguous)
}

fn flags_of(vectors: &DMatrix<f64>, sizes: &[usize]) -> Vec<DMatrix<f64>> {
    let d = vectors.ncols();
    let mut start = 0;
    sizes
        .iter()
        .map(|s| {
            let u = vectors.columns(start, d - start).into_owned();
            start += s;
            u
        })
        .collect()
}

/// Propagates a full frame along `stepper` and reads the singular-value
/// rates and right singular vectors of `Φ_t` at each time of `t_grid`.
pub fn oseledets_estimate(
    stepper: &mut dyn Stepper,
    t_grid: &[f64],
    opts: &OseledetsOptions,
) -> Result<OseledetsEstimate> {
    if t_grid.is_empty() || t_grid[0] <= 0.0 || t_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("t grid must be positive and increasing".into()));
    }
    if !(opts.gap > 0.0) {
        return Err(Error::InvalidArgument(format!("gap must be positive, got {}", opts.gap)));
    }
    let d = stepper.dim();
    let dt = stepper.dt();
    let mut qr = QrAccumulator::standard(d, d, opts.period, true)?;
    let mut jac = DMatrix::zeros(d, d);
    let mut history = Vec::with_capacity(t_grid.len());
    let mut vectors = Vec::with_capacity(2);
    let mut step = 0usize;
    for &t in t_grid {
        let mark = (t / dt).round() as usize;
        while step < mark {
            if !stepper.advance_tangent(&mut jac) {
                return Err(Error::Leakage {
                    step: stepper.steps_taken(),
                });
            }
            qr.push(&jac)?;
            step += 1;
        }
        qr.flush()?;
        let time = mark as f64 * dt;
        let p = qr.product().expect("tracked product");
        history.push(RateSnapshot {
            t: time,
            rates: p.log_singular_values().iter().map(|l| l / time).collect(),
        });
        if vectors.len() == 2 {
            vectors.remove(0);
        }
        vectors.push(p.right_singular_vectors());
    }
    let last = history.last().expect("non-empty grid");
    let rates = last.rates.clone();
    let v = vectors.last().expect("non-empty grid").clone();
    let eigenvalues: Vec<f64> = rates.iter().map(|r| r.exp()).collect();
    let matrix = &v * DMatrix::from_diagonal(&eigenvalues.clone().into()) * v.transpose();
    let (sizes, ambiguous) = cluster_rates(&rates, opts.gap);
    let mut exponents = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for s in &sizes {
        exponents.push(rates[start..start + s].iter().sum::<f64>() / *s as f64);
        start += s;
    }
    let flags = flags_of(&v, &sizes);
    let nesting_defect = flags
        .windows(2)
        .map(|w| max_principal_angle(&w[1], &w[0]))
        .fold(0.0, f64::max);
    let flag_drift = if vectors.len() == 2 {
        flags_of(&vectors[0], &sizes)
            .iter()
            .zip(&flags)
            .map(|(a, b)| Some(max_principal_angle(a, b)))
            .collect()
    } else {
        vec![None; flags.len()]
    };
    Ok(OseledetsEstimate {
        t: last.t,
        matrix,
        eigenvalues,
        eigenvectors: v,
        rates,
        exponents,
        multiplicities: sizes,
        ambiguous,
        flags,
        nesting_defect,
        flag_drift,
        history,
    })
}
