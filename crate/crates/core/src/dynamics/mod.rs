//! Absorbed random dynamical systems: sample paths, absorption times and the
//! linearised (tangent) cocycle.

pub mod builtin;
mod discrete;
mod domain;
mod noise;
mod sde;
mod tangent;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use discrete::{
    AffineMap, DiscreteMap, DiscreteStepper, DiscreteSystem, FiniteChain, HTransform,
    NoisyLogistic,
};
pub use domain::Domain;
pub use noise::{NoiseRng, Purpose, Substream};
pub use sde::{
    doob_drift, ConstantEta, EtaField, ExponentialEta, ProductEta, SdeFields, SdeStepper,
    SdeSystem,
};
pub use tangent::{integrate_tangent, CocycleSample, FrozenCocycle, MatrixSequence, QrAccumulator};

use crate::{Error, Result};

/// One trajectory advanced step by step. Every source of tangent
/// propagators (SDE, random map, fixed matrices) implements this.
pub trait Stepper: Send {
    fn dim(&self) -> usize;
    /// Time per step; 1 for discrete systems.
    fn dt(&self) -> f64;
    fn state(&self) -> &[f64];
    fn steps_taken(&self) -> usize;
    /// Advances one step. Returns `false` once the trajectory has left the
    /// domain (or the source is exhausted); the state is then meaningless.
    fn advance(&mut self) -> bool;
    /// As [`Stepper::advance`], also writing the one-step propagator `J`
    /// with `Φ_{n+1} = J Φ_n`.
    fn advance_tangent(&mut self, jac: &mut DMatrix<f64>) -> bool;
    /// Steps whose noise was redrawn to avoid leaving the domain.
    fn leak_events(&self) -> usize {
        0
    }
}

/// A system together with the time step used to simulate it.
#[derive(Debug, Clone)]
pub enum AbsorbedSystem {
    Discrete(DiscreteSystem),
    Sde { system: SdeSystem, dt: f64 },
}

impl AbsorbedSystem {
    pub fn sde(system: SdeSystem, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
        }
        Ok(Self::Sde { system, dt })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Discrete(s) => s.dim(),
            Self::Sde { system, .. } => system.dim(),
        }
    }

    pub fn domain(&self) -> &Domain {
        match self {
            Self::Discrete(s) => s.domain(),
            Self::Sde { system, .. } => system.domain(),
        }
    }

    pub fn time_step(&self) -> f64 {
        match self {
            Self::Discrete(_) => 1.0,
            Self::Sde { dt, .. } => *dt,
        }
    }

    /// Number of steps covering `horizon` time units.
    pub fn steps_for(&self, horizon: f64) -> usize {
        (horizon / self.time_step()).round().max(0.0) as usize
    }

    /// Default reorthonormalisation period for tangent frames.
    pub fn default_reorth_period(&self) -> usize {
        match self {
            Self::Discrete(_) => 5,
            Self::Sde { .. } => 1,
        }
    }

    pub fn stepper(&self, x0: &[f64], stream: Substream) -> Result<Box<dyn Stepper>> {
        Ok(match self {
            Self::Discrete(s) => Box::new(s.stepper(x0, stream)?),
            Self::Sde { system, dt } => Box::new(system.stepper(x0, *dt, stream)?),
        })
    }

    /// Samples a path of `steps` steps recording every `stride`-th state.
    pub fn sample_path(
        &self,
        x0: &[f64],
        steps: usize,
        stride: usize,
        stream: Substream,
    ) -> Result<AbsorbedPath> {
        let mut stepper = self.stepper(x0, stream)?;
        Ok(record_path(stepper.as_mut(), steps, stride, stream))
    }
}

/// Where a path stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Absorption {
    /// Still inside the domain at the end of the horizon.
    Survived,
    /// The state at this step index was the first outside the domain.
    At(usize),
}

/// A sampled trajectory up to its absorption time or horizon.
///
/// States are stored flat, `dim` values per recorded step, and only
/// for steps strictly before absorption.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AbsorbedPath {
    pub dim: usize,
    pub dt: f64,
    pub stride: usize,
    pub horizon_steps: usize,
    pub states: Vec<f64>,
    pub absorption: Absorption,
    pub seed: Substream,
}

impl AbsorbedPath {
    pub fn records(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn record(&self, j: usize) -> &[f64] {
        &self.states[j * self.dim..(j + 1) * self.dim]
    }

    pub fn initial(&self) -> &[f64] {
        self.record(0)
    }

    pub fn last(&self) -> &[f64] {
        self.record(self.records() - 1)
    }

    /// Step index of record `j`.
    pub fn step_of(&self, j: usize) -> usize {
        j * self.stride
    }

    /// State at step `step`, if it was recorded and the path was alive.
    pub fn at_step(&self, step: usize) -> Option<&[f64]> {
        if step % self.stride != 0 || !self.alive_at(step) {
            return None;
        }
        let j = step / self.stride;
        (j < self.records()).then(|| self.record(j))
    }

    pub fn tau(&self) -> Option<usize> {
        match self.absorption {
            Absorption::Survived => None,
            Absorption::At(n) => Some(n),
        }
    }

    /// Absorption time in time units (`None` if it survived the horizon).
    pub fn tau_time(&self) -> Option<f64> {
        self.tau().map(|n| n as f64 * self.dt)
    }

    pub fn survived(&self) -> bool {
        self.absorption == Absorption::Survived
    }

    /// `τ > step`, i.e. the state at `step` lies in the domain.
    pub fn alive_at(&self, step: usize) -> bool {
        step <= self.horizon_steps && self.tau().is_none_or(|t| t > step)
    }
}

fn record_path(
    stepper: &mut dyn Stepper,
    steps: usize,
    stride: usize,
    seed: Substream,
) -> AbsorbedPath {
    let stride = stride.max(1);
    let d = stepper.dim();
    let mut states = Vec::with_capacity(d * (steps / stride + 1));
    states.extend_from_slice(stepper.state());
    let mut absorption = Absorption::Survived;
    for n in 1..=steps {
        if !stepper.advance() {
            absorption = Absorption::At(n);
            break;
        }
        if n % stride == 0 {
            states.extend_from_slice(stepper.state());
        }
    }
    AbsorbedPath {
        dim: d,
        dt: stepper.dt(),
        stride,
        horizon_steps: steps,
        states,
        absorption,
        seed,
    }
}

/// Iterates a random map for `n` steps from `x0`.
pub fn sample_discrete_path(
    sys: &DiscreteSystem,
    x0: &[f64],
    n: usize,
    seed: Substream,
) -> Result<AbsorbedPath> {
    let mut stepper = sys.stepper(x0, seed)?;
    Ok(record_path(&mut stepper, n, 1, seed))
}

/// Integrates an SDE up to `horizon` with Stratonovich–Heun steps of size
/// `dt`, stopping at the first grid time outside the domain.
pub fn integrate_sde(
    sys: &SdeSystem,
    x0: &[f64],
    horizon: f64,
    dt: f64,
    seed: Substream,
) -> Result<AbsorbedPath> {
    if !(horizon >= 0.0) {
        return Err(Error::InvalidArgument(format!("horizon must be non-negative, got {horizon}")));
    }
    let mut stepper = sys.stepper(x0, dt, seed)?;
    let steps = (horizon / dt).round() as usize;
    Ok(record_path(&mut stepper, steps, 1, seed))
}

fn matrix_rel_error(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> f64 {
    (analytic - numeric).norm() / numeric.norm().max(1.0)
}

/// Largest relative Frobenius error between the analytic Jacobians of all
/// fields and central differences over `points`.
pub fn check_sde_jacobians(fields: &dyn SdeFields, points: &[Vec<f64>]) -> f64 {
    let d = fields.dim();
    let mut worst: f64 = 0.0;
    let mut analytic = DMatrix::zeros(d, d);
    for x in points {
        let numeric = finite_difference(x, |p, out| fields.drift(p, out));
        fields.drift_jacobian(x, &mut analytic);
        worst = worst.max(matrix_rel_error(&analytic, &numeric));
        for i in 0..fields.noise_dim() {
            let numeric = finite_difference(x, |p, out| fields.diffusion(i, p, out));
            fields.diffusion_jacobian(i, x, &mut analytic);
            worst = worst.max(matrix_rel_error(&analytic, &numeric));
        }
    }
    worst
}

/// Same check for a random map at fixed noise values.
pub fn check_map_jacobian(map: &dyn DiscreteMap, noise: &[f64], points: &[Vec<f64>]) -> f64 {
    let d = map.dim();
    let mut analytic = DMatrix::zeros(d, d);
    points
        .iter()
        .map(|x| {
            let numeric = finite_difference(x, |p, out| map.apply(noise, p, out));
            map.jacobian(noise, x, &mut analytic);
            matrix_rel_error(&analytic, &numeric)
        })
        .fold(0.0, f64::max)
}

fn finite_difference(x: &[f64], f: impl Fn(&[f64], &mut [f64])) -> DMatrix<f64> {
    let d = x.len();
    let mut out = DMatrix::zeros(d, d);
    let mut p = x.to_vec();
    let mut plus = vec![0.0; d];
    let mut minus = vec![0.0; d];
    for c in 0..d {
        let h = 1e-6 * x[c].abs().max(1.0);
        p[c] = x[c] + h;
        f(&p, &mut plus);
        p[c] = x[c] - h;
        f(&p, &mut minus);
        p[c] = x[c];
        for r in 0..d {
            out[(r, c)] = (plus[r] - minus[r]) / (2.0 * h);
        }
    }
    out
}

#[cfg(test)]
mod tests;
