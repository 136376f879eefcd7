//! Propagation of the linearised cocycle `Φ_t` in QR-factored form.

use nalgebra::DMatrix;

use super::{AbsorbedPath, AbsorbedSystem, Stepper};
use crate::linalg::{orthonormality_defect, thin_qr_in_place, ScaledTriangular};
use crate::{Error, Result};

/// Running QR factorisation of `Φ_n · frame₀ = Q_n R_n ⋯ R_1`.
///
/// The frame is pushed through each one-step propagator and
/// re-orthonormalised every `period` steps; `log|diag R|` is summed per
/// column. Optionally the triangular product is kept in row-scaled form so
/// that singular values of `Φ_n · frame₀` can be recovered.
#[derive(Debug, Clone)]
pub struct QrAccumulator {
    frame: DMatrix<f64>,
    initial: DMatrix<f64>,
    work: DMatrix<f64>,
    r: DMatrix<f64>,
    log_sums: Vec<f64>,
    period: usize,
    pending: usize,
    steps: usize,
    product: Option<ScaledTriangular>,
}

impl QrAccumulator {
    pub fn new(frame: DMatrix<f64>, period: usize, track_product: bool) -> Result<Self> {
        let k = frame.ncols();
        if k == 0 || k > frame.nrows() {
            return Err(Error::InvalidArgument(format!(
                "frame width {k} must lie in 1..={}",
                frame.nrows()
            )));
        }
        if orthonormality_defect(&frame) > 1e-10 {
            return Err(Error::InvalidArgument("initial frame is not orthonormal".into()));
        }
        Ok(Self {
            work: frame.clone(),
            initial: frame.clone(),
            frame,
            r: DMatrix::zeros(k, k),
            log_sums: vec![0.0; k],
            period: period.max(1),
            pending: 0,
            steps: 0,
            product: track_product.then(|| ScaledTriangular::identity(k)),
        })
    }

    /// The first `k` standard basis vectors of `R^d`.
    pub fn standard(d: usize, k: usize, period: usize, track_product: bool) -> Result<Self> {
        Self::new(DMatrix::identity(d, k), period, track_product)
    }

    pub fn push(&mut self, jac: &DMatrix<f64>) -> Result<()> {
        self.work.gemm(1.0, jac, &self.frame, 0.0);
        std::mem::swap(&mut self.frame, &mut self.work);
        self.steps += 1;
        self.pending += 1;
        if self.pending >= self.period {
            self.reorthonormalize()?;
        }
        Ok(())
    }

    /// Folds any steps since the last reorthonormalisation into the sums.
    pub fn flush(&mut self) -> Result<()> {
        if self.pending > 0 {
            self.reorthonormalize()?;
        }
        Ok(())
    }

    fn reorthonormalize(&mut self) -> Result<()> {
        if !thin_qr_in_place(&mut self.frame, &mut self.r) {
            return Err(Error::RankCollapse { step: self.steps });
        }
        for (j, s) in self.log_sums.iter_mut().enumerate() {
            *s += self.r[(j, j)].ln();
        }
        if let Some(p) = &mut self.product {
            p.left_mul(&self.r);
        }
        self.pending = 0;
        Ok(())
    }

    pub fn frame(&self) -> &DMatrix<f64> {
        &self.frame
    }

    pub fn initial_frame(&self) -> &DMatrix<f64> {
        &self.initial
    }

    pub fn width(&self) -> usize {
        self.log_sums.len()
    }

    pub fn dim(&self) -> usize {
        self.frame.nrows()
    }

    /// Accumulated `log|R_jj|` per column, as of the last reorthonormalisation.
    pub fn log_sums(&self) -> &[f64] {
        &self.log_sums
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn period(&self) -> usize {
        self.period
    }

    /// `true` if no steps are waiting for reorthonormalisation.
    pub fn is_flushed(&self) -> bool {
        self.pending == 0
    }

    pub fn product(&self) -> Option<&ScaledTriangular> {
        self.product.as_ref()
    }

    /// `Φ_n · frame₀` rebuilt as `Q_n R`; overflows on long horizons.
    pub fn reconstruct(&self) -> Option<DMatrix<f64>> {
        let p = self.product.as_ref()?;
        if !self.is_flushed() {
            return None;
        }
        Some(&self.frame * p.to_matrix())
    }
}

/// A base path with its tangent cocycle in QR-factored form.
#[derive(Debug, Clone)]
pub struct CocycleSample {
    pub path: AbsorbedPath,
    pub window: usize,
    pub qr: QrAccumulator,
}

/// Replays `path` from its seed with the same noise increments and
/// propagates a `k`-frame over the first `window` steps (default: the whole
/// recorded horizon). The replayed states are checked against the recorded
/// ones.
pub fn integrate_tangent(
    sys: &AbsorbedSystem,
    path: &AbsorbedPath,
    k: usize,
    period: Option<usize>,
    window: Option<usize>,
    track_product: bool,
) -> Result<CocycleSample> {
    let window = window.unwrap_or(path.horizon_steps);
    if window > path.horizon_steps {
        return Err(Error::InvalidArgument(format!(
            "window {window} exceeds the path horizon {}",
            path.horizon_steps
        )));
    }
    if let Some(tau) = path.tau() {
        if window >= tau {
            return Err(Error::WindowExceedsAbsorption {
                requested: window,
                tau,
            });
        }
    }
    let d = sys.dim();
    let period = period.unwrap_or_else(|| sys.default_reorth_period());
    let mut qr = QrAccumulator::standard(d, k, period, track_product)?;
    let mut stepper = sys.stepper(path.initial(), path.seed)?;
    let mut jac = DMatrix::zeros(d, d);
    for n in 1..=window {
        if !stepper.advance_tangent(&mut jac) {
            return Err(Error::ReplayMismatch { step: n });
        }
        if let Some(recorded) = path.at_step(n) {
            if recorded != stepper.state() {
                return Err(Error::ReplayMismatch { step: n });
            }
        }
        qr.push(&jac)?;
    }
    qr.flush()?;
    Ok(CocycleSample {
        path: path.clone(),
        window,
        qr,
    })
}

/// The same propagator at every step: `Φ_n = J^n`.
#[derive(Debug, Clone)]
pub struct FrozenCocycle {
    step: DMatrix<f64>,
    dt: f64,
    state: Vec<f64>,
    steps: usize,
}

impl FrozenCocycle {
    pub fn new(step: DMatrix<f64>, dt: f64) -> Self {
        let d = step.nrows();
        Self {
            step,
            dt,
            state: vec![0.0; d],
            steps: 0,
        }
    }

    /// `J = exp(A·dt)` for diagonal `A`.
    pub fn diagonal_flow(rates: &[f64], dt: f64) -> Self {
        let d = rates.len();
        let mut j = DMatrix::zeros(d, d);
        for (i, a) in rates.iter().enumerate() {
            j[(i, i)] = (a * dt).exp();
        }
        Self::new(j, dt)
    }
}

impl Stepper for FrozenCocycle {
    fn dim(&self) -> usize {
        self.step.nrows()
    }
    fn dt(&self) -> f64 {
        self.dt
    }
    fn state(&self) -> &[f64] {
        &self.state
    }
    fn steps_taken(&self) -> usize {
        self.steps
    }
    fn advance(&mut self) -> bool {
        self.steps += 1;
        true
    }
    fn advance_tangent(&mut self, jac: &mut DMatrix<f64>) -> bool {
        jac.copy_from(&self.step);
        self.steps += 1;
        true
    }
}

/// An explicit finite list of one-step propagators; exhausted afterwards.
#[derive(Debug, Clone)]
pub struct MatrixSequence {
    mats: Vec<DMatrix<f64>>,
    dt: f64,
    state: Vec<f64>,
    pos: usize,
}

impl MatrixSequence {
    pub fn new(mats: Vec<DMatrix<f64>>, dt: f64) -> Self {
        let d = mats.first().map_or(0, |m| m.nrows());
        Self {
            mats,
            dt,
            state: vec![0.0; d],
            pos: 0,
        }
    }

    /// `J_n ⋯ J_1`, formed directly.
    pub fn product(&self) -> DMatrix<f64> {
        let d = self.state.len();
        self.mats
            .iter()
            .fold(DMatrix::identity(d, d), |acc, m| m * acc)
    }
}

impl Stepper for MatrixSequence {
    fn dim(&self) -> usize {
        self.state.len()
    }
    fn dt(&self) -> f64 {
        self.dt
    }
    fn state(&self) -> &[f64] {
        &self.state
    }
    fn steps_taken(&self) -> usize {
        self.pos
    }
    fn advance(&mut self) -> bool {
        if self.pos < self.mats.len() {
            self.pos += 1;
            true
        } else {
            false
        }
    }
    fn advance_tangent(&mut self, jac: &mut DMatrix<f64>) -> bool {
        match self.mats.get(self.pos) {
            Some(m) => {
                jac.copy_from(m);
                self.pos += 1;
                true
            }
            None => false,
        }
    }
}
