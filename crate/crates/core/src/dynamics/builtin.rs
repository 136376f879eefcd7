//! Built-in test systems.

use std::sync::Arc;

use nalgebra::DMatrix;

use super::discrete::{DiscreteSystem, NoisyLogistic};
use super::domain::Domain;
use super::sde::{SdeFields, SdeSystem};
use crate::Result;

/// Uncoupled double wells `dX_j = (X_j − X_j³)dt + σ_j dW^j`.
#[derive(Debug, Clone)]
pub struct DoubleWell {
    pub sigmas: Vec<f64>,
}

impl SdeFields for DoubleWell {
    fn dim(&self) -> usize {
        self.sigmas.len()
    }
    fn noise_dim(&self) -> usize {
        self.sigmas.len()
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(x) {
            *o = v - v * v * v;
        }
    }
    fn drift_jacobian(&self, x: &[f64], out: &mut DMatrix<f64>) {
        out.fill(0.0);
        for (j, v) in x.iter().enumerate() {
            out[(j, j)] = 1.0 - 3.0 * v * v;
        }
    }
    fn diffusion(&self, i: usize, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        out[i] = self.sigmas[i];
    }
    fn diffusion_jacobian(&self, _i: usize, _x: &[f64], out: &mut DMatrix<f64>) {
        out.fill(0.0);
    }
    fn is_additive(&self) -> bool {
        true
    }
}

/// Two double wells with diffusive coupling,
/// `V_0(x, y) = (x − x³ + κ(y − x), y − y³ + κ(x − y))`, additive noise `σ`.
#[derive(Debug, Clone)]
pub struct CoupledDoubleWell {
    pub sigma: f64,
    pub coupling: f64,
}

impl SdeFields for CoupledDoubleWell {
    fn dim(&self) -> usize {
        2
    }
    fn noise_dim(&self) -> usize {
        2
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        let k = self.coupling;
        out[0] = x[0] - x[0].powi(3) + k * (x[1] - x[0]);
        out[1] = x[1] - x[1].powi(3) + k * (x[0] - x[1]);
    }
    fn drift_jacobian(&self, x: &[f64], out: &mut DMatrix<f64>) {
        let k = self.coupling;
        out[(0, 0)] = 1.0 - 3.0 * x[0] * x[0] - k;
        out[(0, 1)] = k;
        out[(1, 0)] = k;
        out[(1, 1)] = 1.0 - 3.0 * x[1] * x[1] - k;
    }
    fn diffusion(&self, i: usize, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        out[i] = self.sigma;
    }
    fn diffusion_jacobian(&self, _i: usize, _x: &[f64], out: &mut DMatrix<f64>) {
        out.fill(0.0);
    }
    fn is_additive(&self) -> bool {
        true
    }
}

/// Linear SDE `dX = A X dt + Σ B_i X ∘ dW^i + Σ c_i ∘ dW^i`.
#[derive(Debug, Clone)]
pub struct LinearSde {
    pub a: DMatrix<f64>,
    pub multiplicative: Vec<DMatrix<f64>>,
    pub additive: Vec<Vec<f64>>,
}

impl LinearSde {
    pub fn deterministic(a: DMatrix<f64>) -> Self {
        Self {
            a,
            multiplicative: Vec::new(),
            additive: Vec::new(),
        }
    }
}

impl SdeFields for LinearSde {
    fn dim(&self) -> usize {
        self.a.nrows()
    }
    fn noise_dim(&self) -> usize {
        self.multiplicative.len() + self.additive.len()
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o = (0..x.len()).map(|c| self.a[(r, c)] * x[c]).sum();
        }
    }
    fn drift_jacobian(&self, _x: &[f64], out: &mut DMatrix<f64>) {
        out.copy_from(&self.a);
    }
    fn diffusion(&self, i: usize, x: &[f64], out: &mut [f64]) {
        if let Some(b) = self.multiplicative.get(i) {
            for (r, o) in out.iter_mut().enumerate() {
                *o = (0..x.len()).map(|c| b[(r, c)] * x[c]).sum();
            }
        } else {
            out.copy_from_slice(&self.additive[i - self.multiplicative.len()]);
        }
    }
    fn diffusion_jacobian(&self, i: usize, _x: &[f64], out: &mut DMatrix<f64>) {
        match self.multiplicative.get(i) {
            Some(b) => out.copy_from(b),
            None => out.fill(0.0),
        }
    }
    fn is_additive(&self) -> bool {
        self.multiplicative.is_empty()
    }
    fn diffusion_second_order(&self, i: usize, _x: &[f64], out: &mut DMatrix<f64>) {
        match self.multiplicative.get(i) {
            Some(b) => out.copy_from(&(b * b)),
            None => out.fill(0.0),
        }
    }
}

/// Double wells on the absorbing cube `[−h, h)^d`, one noise per axis.
pub fn double_well(sigmas: &[f64], half_width: f64) -> Result<SdeSystem> {
    SdeSystem::new(
        Domain::cube(sigmas.len(), half_width)?,
        Arc::new(DoubleWell {
            sigmas: sigmas.to_vec(),
        }),
    )
}

pub fn coupled_double_well(sigma: f64, coupling: f64, half_width: f64) -> Result<SdeSystem> {
    SdeSystem::new(
        Domain::cube(2, half_width)?,
        Arc::new(CoupledDoubleWell { sigma, coupling }),
    )
}

/// Noisy logistic map killed outside `[0, 1)`.
pub fn noisy_logistic(r: f64, noise_half_width: f64) -> Result<DiscreteSystem> {
    DiscreteSystem::new(
        Domain::boxed(vec![0.0], vec![1.0])?,
        Arc::new(NoisyLogistic {
            r,
            noise_half_width,
        }),
    )
}
