use super::grid::UlamGrid;
use super::solve::SpectralData;
use crate::dynamics::EtaField;
use crate::{Error, Result};

/// How the interpolant behaves between the outermost cell centres and the
/// edge of the box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EtaBoundary {
    /// Falls linearly to zero at the box edge (killing at the boundary).
    Vanishing,
    /// Holds the outermost cell value.
    Clamped,
}

/// How `∇ log η` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientRule {
    /// The exact gradient of the multilinear interpolant.
    Exact,
    /// Central differences of the interpolant with a one-cell step.
    CentralDifference,
}

/// Multilinear interpolation of per-cell η values placed at cell centres,
/// extended to the box edges by [`EtaBoundary`].
#[derive(Debug, Clone)]
pub struct GridEta {
    lower: Vec<f64>,
    upper: Vec<f64>,
    counts: Vec<usize>,
    widths: Vec<f64>,
    /// Node values on the `(n_j + 2)`-per-axis lattice, last axis fastest.
    nodes: Vec<f64>,
    gradient: GradientRule,
}

impl GridEta {
    pub fn new(grid: &UlamGrid, values: &[f64], boundary: EtaBoundary) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} eta values for {} cells",
                values.len(),
                grid.len()
            )));
        }
        let d = grid.dim();
        if d > 8 {
            return Err(Error::InvalidArgument(format!(
                "interpolation supports up to 8 dimensions, got {d}"
            )));
        }
        let counts = grid.counts().to_vec();
        let ext: Vec<usize> = counts.iter().map(|n| n + 2).collect();
        let total: usize = ext.iter().product();
        let mut nodes = vec![0.0; total];
        let mut idx = vec![0usize; d];
        let mut inner = vec![0usize; d];
        for (k, node) in nodes.iter_mut().enumerate() {
            let mut rest = k;
            for j in (0..d).rev() {
                idx[j] = rest % ext[j];
                rest /= ext[j];
            }
            let on_edge = idx.iter().zip(&ext).any(|(&i, &e)| i == 0 || i == e - 1);
            if on_edge && boundary == EtaBoundary::Vanishing {
                continue;
            }
            for j in 0..d {
                inner[j] = idx[j].clamp(1, counts[j]) - 1;
            }
            if let Some(c) = grid.retained_index(grid.flat_of(&inner)) {
                *node = values[c].max(0.0);
            }
        }
        Ok(Self {
            lower: grid.domain().lower().to_vec(),
            upper: grid.domain().upper().to_vec(),
            counts,
            widths: grid.widths().to_vec(),
            nodes,
            gradient: GradientRule::Exact,
        })
    }

    /// The right eigenvector of `sd`, vanishing at the box edge.
    pub fn from_spectral(sd: &SpectralData) -> Result<Self> {
        Self::new(sd.grid()?, &sd.eta, EtaBoundary::Vanishing)
    }

    pub fn with_gradient(mut self, rule: GradientRule) -> Self {
        self.gradient = rule;
        self
    }

    pub fn max_value(&self) -> f64 {
        self.nodes.iter().fold(0.0, |a, &b| a.max(b))
    }

    /// Per axis: lower node index, local coordinate in [0, 1), node spacing.
    fn bracket(&self, j: usize, x: f64) -> (usize, f64, f64) {
        let n = self.counts[j];
        let w = self.widths[j];
        let t = (x - self.lower[j]) / w - 0.5;
        if t < 0.0 {
            (0, (x - self.lower[j]) / (0.5 * w), 0.5 * w)
        } else if t >= (n - 1) as f64 {
            let last = self.lower[j] + (n as f64 - 0.5) * w;
            (n, ((x - last) / (0.5 * w)).min(1.0), 0.5 * w)
        } else {
            let f = t.floor();
            (f as usize + 1, t - f, w)
        }
    }

    fn inside(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(j, &v)| v >= self.lower[j] && v < self.upper[j])
    }

    /// Value and (optionally) exact gradient of the interpolant.
    fn eval(&self, x: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let d = self.counts.len();
        if !self.inside(x) {
            if let Some(g) = grad {
                g.fill(0.0);
            }
            return 0.0;
        }
        let mut base = [0usize; 8];
        let mut s = [0.0f64; 8];
        let mut h = [0.0f64; 8];
        for j in 0..d {
            (base[j], s[j], h[j]) = self.bracket(j, x[j]);
        }
        let mut value = 0.0;
        let mut g = [0.0f64; 8];
        for corner in 0..(1usize << d) {
            let mut flat = 0;
            let mut weight = 1.0;
            for j in 0..d {
                let bit = (corner >> j) & 1;
                flat = flat * (self.counts[j] + 2) + base[j] + bit;
                weight *= if bit == 1 { s[j] } else { 1.0 - s[j] };
            }
            let v = self.nodes[flat];
            if v == 0.0 {
                continue;
            }
            value += weight * v;
            for j in 0..d {
                let bit = (corner >> j) & 1;
                let mut partial = if bit == 1 { 1.0 } else { -1.0 } / h[j];
                for i in (0..d).filter(|&i| i != j) {
                    let b = (corner >> i) & 1;
                    partial *= if b == 1 { s[i] } else { 1.0 - s[i] };
                }
                g[j] += partial * v;
            }
        }
        if let Some(out) = grad {
            out.copy_from_slice(&g[..d]);
        }
        value
    }
}

impl EtaField for GridEta {
    fn dim(&self) -> usize {
        self.counts.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.eval(x, None)
    }

    fn grad_log(&self, x: &[f64], out: &mut [f64]) -> bool {
        match self.gradient {
            GradientRule::Exact => {
                let v = self.eval(x, Some(out));
                if !(v > 0.0) {
                    return false;
                }
                out.iter_mut().for_each(|g| *g /= v);
                true
            }
            GradientRule::CentralDifference => {
                let v = self.eval(x, None);
                if !(v > 0.0) {
                    return false;
                }
                let mut p = x.to_vec();
                for j in 0..x.len() {
                    let step = self.widths[j];
                    p[j] = x[j] + step;
                    let plus = self.eval(&p, None);
                    p[j] = x[j] - step;
                    let minus = self.eval(&p, None);
                    p[j] = x[j];
                    out[j] = (plus - minus) / (2.0 * step * v);
                }
                true
            }
        }
    }
}

/// Piecewise-constant η: the value of the cell containing the point,
/// zero outside the retained cells.
#[derive(Debug, Clone)]
pub struct CellEta {
    grid: UlamGrid,
    values: Vec<f64>,
}

impl CellEta {
    pub fn new(grid: UlamGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} eta values for {} cells",
                values.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn from_spectral(sd: &SpectralData) -> Result<Self> {
        Self::new(sd.grid()?.clone(), sd.eta.clone())
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().fold(0.0, |a, &b| a.max(b))
    }
}

impl EtaField for CellEta {
    fn dim(&self) -> usize {
        self.grid.dim()
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.grid.locate(x).map_or(0.0, |c| self.values[c])
    }

    fn grad_log(&self, x: &[f64], out: &mut [f64]) -> bool {
        out.fill(0.0);
        self.value(x) > 0.0
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::dynamics::Domain;

    fn grid1(n: usize) -> UlamGrid {
        UlamGrid::uniform(Domain::boxed(vec![0.0], vec![1.0]).unwrap(), n).unwrap()
    }

    #[test]
    fn reproduces_cell_values_at_centres() {
        let grid = UlamGrid::new(Domain::boxed(vec![0.0, 0.0], vec![1.0, 2.0]).unwrap(), vec![4, 5])
            .unwrap();
        let vals: Vec<f64> = (0..grid.len()).map(|c| 1.0 + c as f64).collect();
        let eta = GridEta::new(&grid, &vals, EtaBoundary::Vanishing).unwrap();
        for c in 0..grid.len() {
            assert!((eta.value(&grid.cell_center(c)) - vals[c]).abs() < 1e-12);
        }
        assert_eq!(eta.value(&[0.0, 1.0]), 0.0);
        assert_eq!(eta.value(&[1.0, 1.0]), 0.0);
    }

    #[test]
    fn linear_data_is_reproduced_between_centres() {
        let grid = grid1(10);
        let vals: Vec<f64> = (0..10).map(|c| 2.0 + 3.0 * grid.cell_center(c)[0]).collect();
        let eta = GridEta::new(&grid, &vals, EtaBoundary::Clamped).unwrap();
        for x in [0.05, 0.3, 0.51, 0.9499] {
            assert!((eta.value(&[x]) - (2.0 + 3.0 * x)).abs() < 1e-12);
            let mut g = [0.0];
            assert!(eta.grad_log(&[x], &mut g));
            assert!((g[0] - 3.0 / (2.0 + 3.0 * x)).abs() < 1e-10);
        }
        // Clamped ends are flat.
        assert!((eta.value(&[0.01]) - vals[0]).abs() < 1e-12);
    }

    #[test]
    fn vanishing_boundary_repels() {
        let eta = GridEta::new(&grid1(10), &[1.0; 10], EtaBoundary::Vanishing).unwrap();
        let mut g = [0.0];
        assert!(eta.grad_log(&[0.01], &mut g));
        assert!((g[0] - 1.0 / 0.01).abs() < 1e-8);
        assert!(eta.grad_log(&[0.99], &mut g));
        assert!((g[0] + 1.0 / 0.01).abs() < 1e-8);
        assert!(!eta.grad_log(&[1.0], &mut g));
    }

    #[test]
    fn exact_gradient_matches_finite_differences() {
        let grid = UlamGrid::uniform(Domain::cube(2, 1.0).unwrap(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vals: Vec<f64> = (0..grid.len()).map(|_| rng.random_range(0.5..2.0)).collect();
        let eta = GridEta::new(&grid, &vals, EtaBoundary::Vanishing).unwrap();
        let h = 1e-7;
        for _ in 0..200 {
            let x = [rng.random_range(-0.95..0.95), rng.random_range(-0.95..0.95)];
            let mut g = [0.0; 2];
            assert!(eta.grad_log(&x, &mut g));
            for j in 0..2 {
                let mut p = x;
                p[j] += h;
                let plus = eta.value(&p).ln();
                p[j] -= 2.0 * h;
                let minus = eta.value(&p).ln();
                // Skip points straddling a kink of the piecewise interpolant.
                let fd = (plus - minus) / (2.0 * h);
                let one_sided = (plus - eta.value(&x).ln()) / h;
                if (fd - one_sided).abs() < 1e-5 {
                    assert!((g[j] - fd).abs() < 1e-5 * fd.abs().max(1.0), "{} vs {fd}", g[j]);
                }
            }
        }
    }

    #[test]
    fn central_difference_rule_agrees_on_linear_data() {
        let grid = grid1(20);
        let vals: Vec<f64> = (0..20).map(|c| 1.0 + grid.cell_center(c)[0]).collect();
        let eta = GridEta::new(&grid, &vals, EtaBoundary::Clamped)
            .unwrap()
            .with_gradient(GradientRule::CentralDifference);
        let mut g = [0.0];
        assert!(eta.grad_log(&[0.5], &mut g));
        assert!((g[0] - 1.0 / 1.5).abs() < 1e-12);
    }

    #[test]
    fn cell_eta_is_piecewise_constant() {
        let grid = grid1(4);
        let eta = CellEta::new(grid, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(eta.value(&[0.3]), 2.0);
        assert_eq!(eta.value(&[1.3]), 0.0);
        assert_eq!(eta.max_value(), 4.0);
        assert!(CellEta::new(grid1(4), vec![1.0]).is_err());
    }
}
