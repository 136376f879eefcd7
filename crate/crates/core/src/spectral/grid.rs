use serde::{Deserialize, Serialize};

use crate::dynamics::Domain;
use crate::{Error, Result};

/// A regular box partition of the domain's bounding box into half-open
/// cells `[a, b)`. Cells that contain no domain point (judged on a probe
/// lattice) are dropped from the index.
#[derive(Debug, Clone)]
pub struct UlamGrid {
    domain: Domain,
    counts: Vec<usize>,
    widths: Vec<f64>,
    /// Flat (row-major, last axis fastest) index of each retained cell.
    retained: Vec<usize>,
    /// Inverse of `retained`; `usize::MAX` for dropped cells.
    lookup: Vec<usize>,
}

/// Plain-data description of a grid, enough to rebuild it on a box domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub counts: Vec<usize>,
    pub retained: Vec<usize>,
}

const PROBES_PER_AXIS: usize = 5;

impl UlamGrid {
    pub fn new(domain: Domain, counts: Vec<usize>) -> Result<Self> {
        if domain.is_whole() {
            return Err(Error::InvalidArgument(
                "an Ulam grid needs a bounded domain".into(),
            ));
        }
        if counts.len() != domain.dim() || counts.iter().any(|&c| c == 0) {
            return Err(Error::InvalidArgument(format!(
                "cell counts {counts:?} do not match dimension {}",
                domain.dim()
            )));
        }
        let widths: Vec<f64> = (0..counts.len())
            .map(|j| (domain.upper()[j] - domain.lower()[j]) / counts[j] as f64)
            .collect();
        let total: usize = counts.iter().product();
        let mut grid = Self {
            domain,
            counts,
            widths,
            retained: Vec::new(),
            lookup: vec![usize::MAX; total],
        };
        let mut kept = Vec::new();
        for flat in 0..total {
            if grid.domain.is_box() || grid.probe_hits_domain(flat) {
                kept.push(flat);
            }
        }
        grid.set_retained(kept);
        Ok(grid)
    }

    /// `n` cells per axis.
    pub fn uniform(domain: Domain, n: usize) -> Result<Self> {
        let d = domain.dim();
        Self::new(domain, vec![n; d])
    }

    /// Rebuilds a grid on the box described by `spec`.
    pub fn from_spec(spec: &GridSpec) -> Result<Self> {
        let domain = Domain::boxed(spec.lower.clone(), spec.upper.clone())?;
        let mut grid = Self::new(domain, spec.counts.clone())?;
        let total = grid.lookup.len();
        if spec.retained.iter().any(|&f| f >= total)
            || spec.retained.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::GridMismatch(
                "retained cell list is not an increasing list of cell indices".into(),
            ));
        }
        grid.lookup.fill(usize::MAX);
        grid.set_retained(spec.retained.clone());
        Ok(grid)
    }

    pub fn spec(&self) -> GridSpec {
        GridSpec {
            lower: self.domain.lower().to_vec(),
            upper: self.domain.upper().to_vec(),
            counts: self.counts.clone(),
            retained: self.retained.clone(),
        }
    }

    fn set_retained(&mut self, retained: Vec<usize>) {
        for (i, &flat) in retained.iter().enumerate() {
            self.lookup[flat] = i;
        }
        self.retained = retained;
    }

    fn probe_hits_domain(&self, flat: usize) -> bool {
        let lo = self.flat_lower(flat);
        let d = self.dim();
        let probes = PROBES_PER_AXIS.pow(d as u32);
        let mut x = vec![0.0; d];
        (0..probes).any(|p| {
            let mut rest = p;
            for j in 0..d {
                let k = rest % PROBES_PER_AXIS;
                rest /= PROBES_PER_AXIS;
                x[j] = lo[j] + (k as f64 + 0.5) / PROBES_PER_AXIS as f64 * self.widths[j];
            }
            self.domain.contains(&x)
        })
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }

    /// Number of retained cells.
    pub fn len(&self) -> usize {
        self.retained.len()
    }

    pub fn is_empty(&self) -> bool {
        self.retained.is_empty()
    }

    pub fn cell_volume(&self) -> f64 {
        self.widths.iter().product()
    }

    /// Flat index of retained cell `c`.
    pub fn flat_index(&self, c: usize) -> usize {
        self.retained[c]
    }

    /// Retained index of the cell with the given flat index.
    pub fn retained_index(&self, flat: usize) -> Option<usize> {
        self.lookup.get(flat).copied().filter(|&i| i != usize::MAX)
    }

    /// Per-axis integer coordinates of a flat index.
    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for j in (0..self.dim()).rev() {
            idx[j] = flat % self.counts[j];
            flat /= self.counts[j];
        }
        idx
    }

    pub fn flat_of(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.counts)
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    fn flat_lower(&self, flat: usize) -> Vec<f64> {
        self.multi_index(flat)
            .iter()
            .enumerate()
            .map(|(j, &i)| self.domain.lower()[j] + i as f64 * self.widths[j])
            .collect()
    }

    /// Lower corner of retained cell `c`.
    pub fn cell_lower(&self, c: usize) -> Vec<f64> {
        self.flat_lower(self.retained[c])
    }

    pub fn cell_center(&self, c: usize) -> Vec<f64> {
        let mut x = self.cell_lower(c);
        for (v, w) in x.iter_mut().zip(&self.widths) {
            *v += 0.5 * w;
        }
        x
    }

    /// Flat index of the bounding-box cell containing `x`, if inside the box.
    pub fn locate_flat(&self, x: &[f64]) -> Option<usize> {
        let mut flat = 0;
        for j in 0..self.dim() {
            let lo = self.domain.lower()[j];
            let hi = self.domain.upper()[j];
            if !(x[j] >= lo && x[j] < hi) {
                return None;
            }
            let w = self.widths[j];
            let mut i = (((x[j] - lo) / w) as usize).min(self.counts[j] - 1);
            // Agree with `cell_lower` when the division rounds across a face.
            if i > 0 && x[j] < lo + i as f64 * w {
                i -= 1;
            } else if i + 1 < self.counts[j] && x[j] >= lo + (i + 1) as f64 * w {
                i += 1;
            }
            flat = flat * self.counts[j] + i;
        }
        Some(flat)
    }

    /// Retained cell containing `x`; `None` outside the domain.
    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        if !self.domain.contains(x) {
            return None;
        }
        self.locate_flat(x).and_then(|f| self.retained_index(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cells_partition_the_box() {
        let grid = UlamGrid::new(Domain::boxed(vec![0.0, -1.0], vec![1.0, 1.0]).unwrap(), vec![4, 8])
            .unwrap();
        assert_eq!(grid.len(), 32);
        for c in 0..grid.len() {
            assert_eq!(grid.locate(&grid.cell_center(c)), Some(c));
            assert_eq!(grid.locate(&grid.cell_lower(c)), Some(c));
        }
        // Shared faces belong to the upper cell.
        assert_eq!(grid.locate(&[0.25, -1.0]), Some(8));
        assert_eq!(grid.locate(&[1.0, 0.0]), None);
        assert_eq!(grid.locate(&[0.5, 1.0]), None);
        assert_eq!(grid.multi_index(grid.flat_of(&[3, 5])), vec![3, 5]);
    }

    #[test]
    fn cells_outside_predicate_are_dropped() {
        let disc = Domain::with_predicate(vec![-1.0, -1.0], vec![1.0, 1.0], |x| {
            x[0] * x[0] + x[1] * x[1] < 1.0
        })
        .unwrap();
        let grid = UlamGrid::uniform(disc, 10).unwrap();
        assert!(grid.len() < 100 && grid.len() > 60);
        assert_eq!(grid.locate(&[0.99, 0.99]), None);
        let c = grid.locate(&[0.05, 0.05]).unwrap();
        assert!(grid.cell_lower(c).iter().all(|&v| v.abs() < 0.2 + 1e-12));
    }

    #[test]
    fn spec_round_trip() {
        let grid = UlamGrid::uniform(Domain::cube(1, 1.5).unwrap(), 7).unwrap();
        let back = UlamGrid::from_spec(&grid.spec()).unwrap();
        assert_eq!(back.spec(), grid.spec());
        let mut bad = grid.spec();
        bad.retained = vec![3, 2];
        assert!(UlamGrid::from_spec(&bad).is_err());
    }
}
