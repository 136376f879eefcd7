//! Random maps `x ↦ f(ω, x)` with i.i.d. noise, killed on leaving the domain.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;

use super::domain::Domain;
use super::noise::{NoiseRng, Substream};
use super::sde::EtaField;
use super::Stepper;
use crate::{Error, Result};

/// A noise-indexed family of `C¹` maps on `R^d`.
pub trait DiscreteMap: Send + Sync {
    fn dim(&self) -> usize;
    /// Number of reals drawn per step.
    fn noise_len(&self) -> usize;
    fn sample_noise(&self, rng: &mut NoiseRng, out: &mut [f64]);
    fn apply(&self, noise: &[f64], x: &[f64], out: &mut [f64]);
    fn jacobian(&self, noise: &[f64], x: &[f64], out: &mut DMatrix<f64>);
}

/// h-transform of a random map: steps are drawn from
/// `Q(x, dy) ∝ η(y) P(x, dy)` by rejection against `eta_max ≥ sup η`.
#[derive(Clone)]
pub struct HTransform {
    pub eta: Arc<dyn EtaField>,
    pub eta_max: f64,
    pub max_attempts: usize,
}

#[derive(Clone)]
pub struct DiscreteSystem {
    domain: Domain,
    map: Arc<dyn DiscreteMap>,
    h: Option<HTransform>,
}

impl fmt::Debug for DiscreteSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiscreteSystem")
            .field("domain", &self.domain)
            .field("h_transformed", &self.h.is_some())
            .finish()
    }
}

impl DiscreteSystem {
    pub fn new(domain: Domain, map: Arc<dyn DiscreteMap>) -> Result<Self> {
        if domain.dim() != map.dim() {
            return Err(Error::InvalidArgument(format!(
                "domain dimension {} differs from map dimension {}",
                domain.dim(),
                map.dim()
            )));
        }
        Ok(Self {
            domain,
            map,
            h: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.map.dim()
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn map(&self) -> &Arc<dyn DiscreteMap> {
        &self.map
    }

    pub fn is_h_transformed(&self) -> bool {
        self.h.is_some()
    }

    pub fn with_h_transform(&self, eta: Arc<dyn EtaField>, eta_max: f64) -> Result<Self> {
        if !(eta_max > 0.0 && eta_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "eta bound must be positive, got {eta_max}"
            )));
        }
        Ok(Self {
            h: Some(HTransform {
                eta,
                eta_max,
                max_attempts: 1_000_000,
            }),
            ..self.clone()
        })
    }

    pub fn stepper(&self, x0: &[f64], stream: Substream) -> Result<DiscreteStepper> {
        if x0.len() != self.dim() || !self.domain.contains(x0) {
            return Err(Error::OutsideDomain(x0.to_vec()));
        }
        let d = self.dim();
        Ok(DiscreteStepper {
            rng: stream.rng(),
            x: x0.to_vec(),
            y: vec![0.0; d],
            noise: vec![0.0; self.map.noise_len()],
            steps: 0,
            alive: true,
            sys: self.clone(),
        })
    }
}

pub struct DiscreteStepper {
    sys: DiscreteSystem,
    rng: NoiseRng,
    x: Vec<f64>,
    y: Vec<f64>,
    noise: Vec<f64>,
    steps: usize,
    alive: bool,
}

impl DiscreteStepper {
    fn step(&mut self, jac: Option<&mut DMatrix<f64>>) -> bool {
        if !self.alive {
            return false;
        }
        let map = &self.sys.map;
        match &self.sys.h {
            None => {
                map.sample_noise(&mut self.rng, &mut self.noise);
                map.apply(&self.noise, &self.x, &mut self.y);
            }
            Some(h) => {
                let mut accepted = false;
                for _ in 0..h.max_attempts {
                    map.sample_noise(&mut self.rng, &mut self.noise);
                    map.apply(&self.noise, &self.x, &mut self.y);
                    if !self.sys.domain.contains(&self.y) {
                        continue;
                    }
                    let u: f64 = self.rng.random();
                    if u * h.eta_max < h.eta.value(&self.y) {
                        accepted = true;
                        break;
                    }
                }
                if !accepted {
                    self.alive = false;
                    self.steps += 1;
                    return false;
                }
            }
        }
        if let Some(jac) = jac {
            map.jacobian(&self.noise, &self.x, jac);
        }
        std::mem::swap(&mut self.x, &mut self.y);
        self.steps += 1;
        self.alive = self.sys.domain.contains(&self.x);
        self.alive
    }
}

impl Stepper for DiscreteStepper {
    fn dim(&self) -> usize {
        self.sys.dim()
    }
    fn dt(&self) -> f64 {
        1.0
    }
    fn state(&self) -> &[f64] {
        &self.x
    }
    fn steps_taken(&self) -> usize {
        self.steps
    }
    fn advance(&mut self) -> bool {
        self.step(None)
    }
    fn advance_tangent(&mut self, jac: &mut DMatrix<f64>) -> bool {
        self.step(Some(jac))
    }
}

/// `f(ω, x) = r·x(1 − x) + ω` with `ω ~ U(−a, a)`, killed outside `[0, 1)`.
#[derive(Debug, Clone)]
pub struct NoisyLogistic {
    pub r: f64,
    pub noise_half_width: f64,
}

impl DiscreteMap for NoisyLogistic {
    fn dim(&self) -> usize {
        1
    }
    fn noise_len(&self) -> usize {
        1
    }
    fn sample_noise(&self, rng: &mut NoiseRng, out: &mut [f64]) {
        let a = self.noise_half_width;
        out[0] = if a > 0.0 { rng.random_range(-a..a) } else { 0.0 };
    }
    fn apply(&self, noise: &[f64], x: &[f64], out: &mut [f64]) {
        out[0] = self.r * x[0] * (1.0 - x[0]) + noise[0];
    }
    fn jacobian(&self, _noise: &[f64], x: &[f64], out: &mut DMatrix<f64>) {
        out[(0, 0)] = self.r * (1.0 - 2.0 * x[0]);
    }
}

/// Deterministic affine map `x ↦ A x + b`.
#[derive(Debug, Clone)]
pub struct AffineMap {
    pub matrix: DMatrix<f64>,
    pub offset: Vec<f64>,
}

impl AffineMap {
    pub fn identity(d: usize) -> Self {
        Self {
            matrix: DMatrix::identity(d, d),
            offset: vec![0.0; d],
        }
    }

    pub fn shift(offset: Vec<f64>) -> Self {
        let d = offset.len();
        Self {
            matrix: DMatrix::identity(d, d),
            offset,
        }
    }
}

impl DiscreteMap for AffineMap {
    fn dim(&self) -> usize {
        self.offset.len()
    }
    fn noise_len(&self) -> usize {
        0
    }
    fn sample_noise(&self, _rng: &mut NoiseRng, _out: &mut [f64]) {}
    fn apply(&self, _noise: &[f64], x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o = self.offset[r] + (0..x.len()).map(|c| self.matrix[(r, c)] * x[c]).sum::<f64>();
        }
    }
    fn jacobian(&self, _noise: &[f64], _x: &[f64], out: &mut DMatrix<f64>) {
        out.copy_from(&self.matrix);
    }
}

/// A killed Markov chain on states `0..n`, embedded in `[0, n)` with state
/// `j` sitting at `j + ½`. The missing row mass is the killing probability,
/// realised by jumping to `n + ½` (outside the domain).
#[derive(Debug, Clone)]
pub struct FiniteChain {
    cumulative: Vec<Vec<f64>>,
}

impl FiniteChain {
    pub fn new(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut cumulative = Vec::with_capacity(n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::InvalidArgument(format!("row {i} has length {}", row.len())));
            }
            let mut acc = 0.0;
            let mut c = Vec::with_capacity(n);
            for &p in row {
                if !(p >= 0.0) {
                    return Err(Error::NotSubstochastic(format!("negative entry in row {i}")));
                }
                acc += p;
                c.push(acc);
            }
            if acc > 1.0 + 1e-12 {
                return Err(Error::NotSubstochastic(format!("row {i} sums to {acc}")));
            }
            cumulative.push(c);
        }
        Ok(Self { cumulative })
    }

    pub fn states(&self) -> usize {
        self.cumulative.len()
    }

    pub fn domain(&self) -> Domain {
        Domain::boxed(vec![0.0], vec![self.states() as f64]).expect("non-empty chain")
    }
}

impl DiscreteMap for FiniteChain {
    fn dim(&self) -> usize {
        1
    }
    fn noise_len(&self) -> usize {
        1
    }
    fn sample_noise(&self, rng: &mut NoiseRng, out: &mut [f64]) {
        out[0] = rng.random();
    }
    fn apply(&self, noise: &[f64], x: &[f64], out: &mut [f64]) {
        let n = self.states();
        let i = (x[0].floor().max(0.0) as usize).min(n - 1);
        let row = &self.cumulative[i];
        let j = row.partition_point(|&c| c <= noise[0]);
        out[0] = j as f64 + 0.5;
    }
    fn jacobian(&self, _noise: &[f64], _x: &[f64], out: &mut DMatrix<f64>) {
        out.fill(0.0);
    }
}
