use nalgebra::{DMatrix, DVector};

use super::grid::UlamGrid;
use super::matrix::SubstochasticMatrix;
use crate::{Error, Result};

/// The discretised quasi-stationary objects of a substochastic matrix.
///
/// `µ` is the left Perron vector (a probability vector), `η` the right one
/// scaled so that `Σ η_c µ_c = 1`, and `ν = η ∘ µ` the quasi-ergodic law.
#[derive(Debug, Clone)]
pub struct SpectralData {
    pub grid: Option<UlamGrid>,
    pub matrix: SubstochasticMatrix,
    pub rho: f64,
    pub beta: f64,
    pub mu: Vec<f64>,
    pub eta: Vec<f64>,
    pub nu: Vec<f64>,
    /// Modulus of the subdominant eigenvalue (exact below the dense limit,
    /// a deflated power estimate above it).
    pub second_modulus: f64,
    pub left_residual: f64,
    pub right_residual: f64,
}

impl SpectralData {
    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        self.matrix.horizon()
    }

    /// Attaches the grid the matrix was built on.
    pub fn with_grid(mut self, grid: UlamGrid) -> Result<Self> {
        if grid.len() != self.len() {
            return Err(Error::GridMismatch(format!(
                "grid has {} cells, spectral data {}",
                grid.len(),
                self.len()
            )));
        }
        self.grid = Some(grid);
        Ok(self)
    }

    pub fn grid(&self) -> Result<&UlamGrid> {
        self.grid
            .as_ref()
            .ok_or_else(|| Error::MissingSpectralData("spectral data carries no grid".into()))
    }

    /// `|λ₂| / ρ`, the per-application contraction of conditioned laws.
    pub fn spectral_ratio(&self) -> f64 {
        self.second_modulus / self.rho
    }

    /// `Σ f(center_c) ν_c` over the grid cells.
    pub fn nu_expectation(&self, f: impl Fn(&[f64]) -> f64) -> Result<f64> {
        let grid = self.grid()?;
        Ok((0..self.len())
            .map(|c| self.nu[c] * f(&grid.cell_center(c)))
            .sum())
    }

    /// `Σ f(center_c) µ_c` over the grid cells.
    pub fn mu_expectation(&self, f: impl Fn(&[f64]) -> f64) -> Result<f64> {
        let grid = self.grid()?;
        Ok((0..self.len())
            .map(|c| self.mu[c] * f(&grid.cell_center(c)))
            .sum())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Largest size refined by dense inverse iteration.
    pub dense_limit: usize,
    /// Largest size whose full spectrum is computed for the uniqueness check.
    pub schur_limit: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 20_000,
            dense_limit: 2000,
            schur_limit: 400,
        }
    }
}

/// Dominant eigen-triple of `p` by power iteration, refined by dense
/// inverse iteration on small grids.
pub fn solve_qsd(p: &SubstochasticMatrix, tol: f64) -> Result<SpectralData> {
    solve_qsd_with(
        p,
        &SolverOptions {
            tol,
            ..SolverOptions::default()
        },
    )
}

pub fn solve_qsd_with(p: &SubstochasticMatrix, opts: &SolverOptions) -> Result<SpectralData> {
    let n = p.size();
    let tol = opts.tol;
    if n == 0 {
        return Err(Error::InvalidArgument("empty matrix".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }

    let mut second = None;
    let mut shift_hint = None;
    if n <= opts.schur_limit {
        let (l1, l2) = leading_moduli(&p.to_dense());
        if l1 <= tol {
            return Err(Error::NoSurvival { rho: l1 });
        }
        if l1 - l2 <= tol {
            return Err(Error::NonUniqueQsd {
                lambda1: l1,
                lambda2: l2,
            });
        }
        second = Some(l2);
        shift_hint = Some(l1);
    }

    let mut it = PowerIteration::new(p);
    let mut converged = false;
    for k in 0..opts.max_iter {
        it.step()?;
        if k % 16 == 15 || k + 1 == opts.max_iter {
            let (l, r) = it.residuals();
            if l <= tol && r <= tol {
                converged = true;
                break;
            }
        }
    }
    if !converged && n <= opts.dense_limit {
        let rho = shift_hint.unwrap_or_else(|| it.rho());
        converged = it.inverse_refine(rho, tol)?;
    }
    let (left, right) = it.residuals();
    if !converged {
        return Err(Error::NotConverged { tol, left, right });
    }
    let rho = it.rho();
    if rho <= tol {
        return Err(Error::NoSurvival { rho });
    }
    let second_modulus = match second {
        Some(l2) => l2,
        None => {
            let l2 = deflated_second_modulus(p, rho, &it.mu, &it.eta);
            if rho - l2 <= tol {
                return Err(Error::NonUniqueQsd {
                    lambda1: rho,
                    lambda2: l2,
                });
            }
            l2
        }
    };
    let nu: Vec<f64> = it.eta.iter().zip(&it.mu).map(|(e, m)| e * m).collect();
    Ok(SpectralData {
        grid: None,
        beta: -rho.ln() / p.horizon(),
        rho,
        mu: it.mu,
        eta: it.eta,
        nu,
        second_modulus,
        left_residual: left,
        right_residual: right,
        matrix: p.clone(),
    })
}

/// `ν_c = η_c µ_c / Σ η µ`.
pub fn quasi_ergodic(sd: &SpectralData) -> Vec<f64> {
    let z: f64 = sd.eta.iter().zip(&sd.mu).map(|(e, m)| e * m).sum();
    sd.eta.iter().zip(&sd.mu).map(|(e, m)| e * m / z).collect()
}

/// The two largest eigenvalue moduli.
fn leading_moduli(m: &DMatrix<f64>) -> (f64, f64) {
    let eig = m.clone().complex_eigenvalues();
    let mut mods: Vec<f64> = eig.iter().map(|z| z.norm()).collect();
    mods.sort_by(|a, b| b.total_cmp(a));
    (mods[0], mods.get(1).copied().unwrap_or(0.0))
}

struct PowerIteration<'a> {
    p: &'a SubstochasticMatrix,
    mu: Vec<f64>,
    eta: Vec<f64>,
    work: Vec<f64>,
}

impl<'a> PowerIteration<'a> {
    fn new(p: &'a SubstochasticMatrix) -> Self {
        let n = p.size();
        Self {
            p,
            mu: vec![1.0 / n as f64; n],
            eta: vec![1.0; n],
            work: vec![0.0; n],
        }
    }

    fn step(&mut self) -> Result<()> {
        self.p.apply_left(&self.mu, &mut self.work);
        let s: f64 = self.work.iter().sum();
        if !(s > 0.0) {
            return Err(Error::NoSurvival { rho: 0.0 });
        }
        for (m, w) in self.mu.iter_mut().zip(&self.work) {
            *m = w / s;
        }
        self.p.apply(&self.eta, &mut self.work);
        let top = self.work.iter().fold(0.0f64, |a, &b| a.max(b));
        if !(top > 0.0) {
            return Err(Error::NoSurvival { rho: 0.0 });
        }
        for (e, w) in self.eta.iter_mut().zip(&self.work) {
            *e = w / top;
        }
        self.normalize();
        Ok(())
    }

    /// Sum of µ to 1 and `Σ η µ` to 1.
    fn normalize(&mut self) {
        let s: f64 = self.mu.iter().sum();
        self.mu.iter_mut().for_each(|m| *m /= s);
        let z: f64 = self.eta.iter().zip(&self.mu).map(|(e, m)| e * m).sum();
        if z > 0.0 {
            self.eta.iter_mut().for_each(|e| *e /= z);
        }
    }

    /// `µ P η / µ η`.
    fn rho(&mut self) -> f64 {
        self.p.apply(&self.eta, &mut self.work);
        let num: f64 = self.mu.iter().zip(&self.work).map(|(m, w)| m * w).sum();
        let den: f64 = self.mu.iter().zip(&self.eta).map(|(m, e)| m * e).sum();
        num / den
    }

    fn residuals(&mut self) -> (f64, f64) {
        let rho = self.rho();
        self.p.apply(&self.eta, &mut self.work);
        let right = self
            .work
            .iter()
            .zip(&self.eta)
            .map(|(w, e)| (w - rho * e).abs())
            .sum();
        self.p.apply_left(&self.mu, &mut self.work);
        let left = self
            .work
            .iter()
            .zip(&self.mu)
            .map(|(w, m)| (w - rho * m).abs())
            .sum();
        (left, right)
    }

    /// Shifted inverse iteration with a shift just above `rho`.
    fn inverse_refine(&mut self, rho: f64, tol: f64) -> Result<bool> {
        let n = self.p.size();
        let sigma = rho * (1.0 + 1e-9) + 1e-14;
        let shifted = self.p.to_dense() - DMatrix::identity(n, n) * sigma;
        let lu_right = shifted.clone().lu();
        let lu_left = shifted.transpose().lu();
        for _ in 0..30 {
            let eta = lu_right
                .solve(&DVector::from_column_slice(&self.eta))
                .ok_or(Error::NotConverged {
                    tol,
                    left: f64::NAN,
                    right: f64::NAN,
                })?;
            let mu = lu_left
                .solve(&DVector::from_column_slice(&self.mu))
                .ok_or(Error::NotConverged {
                    tol,
                    left: f64::NAN,
                    right: f64::NAN,
                })?;
            positive_part(eta.as_slice(), &mut self.eta);
            positive_part(mu.as_slice(), &mut self.mu);
            self.normalize();
            let (l, r) = self.residuals();
            if l <= tol && r <= tol {
                return Ok(true);
            }
        }
        Ok(false)
    }
}

/// Copies `v` with its dominant sign made positive and rounding-level
/// negatives clipped to zero.
fn positive_part(v: &[f64], out: &mut [f64]) {
    let s: f64 = v.iter().sum();
    let sign = if s < 0.0 { -1.0 } else { 1.0 };
    for (o, &x) in out.iter_mut().zip(v) {
        *o = (sign * x).max(0.0);
    }
}

/// `|λ₂|` from power iteration on `P (I − η µᵀ)`.
fn deflated_second_modulus(p: &SubstochasticMatrix, rho: f64, mu: &[f64], eta: &[f64]) -> f64 {
    let n = p.size();
    let mut w: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * 0.618_033_988_75).fract() - 0.5).collect();
    let mut next = vec![0.0; n];
    let (burn, measure) = (400, 200);
    let mut log_growth = 0.0;
    for k in 0..burn + measure {
        let proj: f64 = mu.iter().zip(&w).map(|(m, x)| m * x).sum();
        p.apply(&w, &mut next);
        for (x, e) in next.iter_mut().zip(eta) {
            *x -= rho * proj * e;
        }
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return 0.0;
        }
        if k >= burn {
            log_growth += norm.ln();
        }
        for (x, y) in w.iter_mut().zip(&next) {
            *x = y / norm;
        }
    }
    (log_growth / measure as f64).exp()
}
