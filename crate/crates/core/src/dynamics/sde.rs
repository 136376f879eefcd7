//! Stratonovich SDEs `dX = V_0(X)dt + Σ V_i(X) ∘ dW^i` with absorption and
//! their Doob h-transforms.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

use super::domain::Domain;
use super::noise::{NoiseRng, Substream};
use super::Stepper;
use crate::{Error, Result};

/// Drift and diffusion vector fields together with their Jacobians.
///
/// Noise channels are indexed from 0, so channel `i` is the field that
/// multiplies `dW^{i+1}`.
pub trait SdeFields: Send + Sync {
    fn dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn drift(&self, x: &[f64], out: &mut [f64]);
    fn drift_jacobian(&self, x: &[f64], out: &mut DMatrix<f64>);
    fn diffusion(&self, i: usize, x: &[f64], out: &mut [f64]);
    fn diffusion_jacobian(&self, i: usize, x: &[f64], out: &mut DMatrix<f64>);

    /// True when every diffusion field is constant.
    fn is_additive(&self) -> bool {
        false
    }

    /// `D(DV_i·V_i)(x)`, the Jacobian of the Stratonovich correction field.
    /// The default differentiates `x ↦ DV_i(x)V_i(x)` by central differences.
    fn diffusion_second_order(&self, i: usize, x: &[f64], out: &mut DMatrix<f64>) {
        let d = self.dim();
        if self.is_additive() {
            out.fill(0.0);
            return;
        }
        let mut xp = x.to_vec();
        let mut jac = DMatrix::zeros(d, d);
        let mut v = vec![0.0; d];
        let mut eval = |p: &[f64], res: &mut Vec<f64>| {
            self.diffusion_jacobian(i, p, &mut jac);
            self.diffusion(i, p, &mut v);
            for r in 0..d {
                res[r] = (0..d).map(|c| jac[(r, c)] * v[c]).sum();
            }
        };
        let mut plus = vec![0.0; d];
        let mut minus = vec![0.0; d];
        for c in 0..d {
            let h = 1e-5 * x[c].abs().max(1.0);
            xp[c] = x[c] + h;
            eval(&xp, &mut plus);
            xp[c] = x[c] - h;
            eval(&xp, &mut minus);
            xp[c] = x[c];
            for r in 0..d {
                out[(r, c)] = (plus[r] - minus[r]) / (2.0 * h);
            }
        }
    }
}

/// A positive function used as the h in a Doob h-transform.
pub trait EtaField: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    /// Writes `∇ log η(x)`; returns `false` where `η(x) ≤ 0`.
    fn grad_log(&self, x: &[f64], out: &mut [f64]) -> bool;
}

#[derive(Debug, Clone)]
pub struct ConstantEta {
    pub dim: usize,
    pub value: f64,
}

impl EtaField for ConstantEta {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, _x: &[f64]) -> f64 {
        self.value
    }
    fn grad_log(&self, _x: &[f64], out: &mut [f64]) -> bool {
        out.fill(0.0);
        self.value > 0.0
    }
}

/// `η(x) = exp(c·x)`.
#[derive(Debug, Clone)]
pub struct ExponentialEta {
    pub coeffs: Vec<f64>,
}

impl EtaField for ExponentialEta {
    fn dim(&self) -> usize {
        self.coeffs.len()
    }
    fn value(&self, x: &[f64]) -> f64 {
        self.coeffs.iter().zip(x).map(|(c, v)| c * v).sum::<f64>().exp()
    }
    fn grad_log(&self, _x: &[f64], out: &mut [f64]) -> bool {
        out.copy_from_slice(&self.coeffs);
        true
    }
}

/// `η(x) = Π_j η_j(x_j)` for one-dimensional factors, the eigenfunction of
/// an uncoupled system.
#[derive(Clone)]
pub struct ProductEta {
    factors: Vec<Arc<dyn EtaField>>,
}

impl ProductEta {
    pub fn new(factors: Vec<Arc<dyn EtaField>>) -> Result<Self> {
        if factors.iter().any(|f| f.dim() != 1) {
            return Err(Error::InvalidArgument(
                "product eta needs one-dimensional factors".into(),
            ));
        }
        Ok(Self { factors })
    }
}

impl EtaField for ProductEta {
    fn dim(&self) -> usize {
        self.factors.len()
    }
    fn value(&self, x: &[f64]) -> f64 {
        self.factors
            .iter()
            .zip(x)
            .map(|(f, v)| f.value(std::slice::from_ref(v)))
            .product()
    }
    fn grad_log(&self, x: &[f64], out: &mut [f64]) -> bool {
        let mut g = [0.0];
        for (j, f) in self.factors.iter().enumerate() {
            if !f.grad_log(&x[j..j + 1], &mut g) {
                return false;
            }
            out[j] = g[0];
        }
        true
    }
}

/// An SDE on a domain, optionally h-transformed by a positive `η`.
///
/// The h-transform only changes the drift of the base trajectory. The
/// linearisation is always that of the untransformed fields, driven by the
/// Brownian increments `dW = dB + (V_i·∇log η)dt` seen under the
/// transformed law, so tangent cocycles along h-transformed paths are the
/// cocycle of the original system.
#[derive(Clone)]
pub struct SdeSystem {
    domain: Domain,
    fields: Arc<dyn SdeFields>,
    doob: Option<Arc<dyn EtaField>>,
}

impl fmt::Debug for SdeSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdeSystem")
            .field("domain", &self.domain)
            .field("noise_dim", &self.fields.noise_dim())
            .field("additive", &self.fields.is_additive())
            .field("h_transformed", &self.doob.is_some())
            .finish()
    }
}

impl SdeSystem {
    pub fn new(domain: Domain, fields: Arc<dyn SdeFields>) -> Result<Self> {
        if domain.dim() != fields.dim() {
            return Err(Error::InvalidArgument(format!(
                "domain dimension {} differs from field dimension {}",
                domain.dim(),
                fields.dim()
            )));
        }
        Ok(Self {
            domain,
            fields,
            doob: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.fields.dim()
    }

    pub fn noise_dim(&self) -> usize {
        self.fields.noise_dim()
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn fields(&self) -> &Arc<dyn SdeFields> {
        &self.fields
    }

    pub fn is_additive(&self) -> bool {
        self.fields.is_additive()
    }

    pub fn eta(&self) -> Option<&Arc<dyn EtaField>> {
        self.doob.as_ref()
    }

    pub fn is_h_transformed(&self) -> bool {
        self.doob.is_some()
    }

    /// The untransformed system.
    pub fn base(&self) -> SdeSystem {
        Self {
            doob: None,
            ..self.clone()
        }
    }

    /// `g_i(x) = V_i(x)·∇log η(x)` for each channel; `false` where `η ≤ 0`.
    /// Zero when not h-transformed.
    pub fn girsanov_shift(&self, x: &[f64], out: &mut [f64]) -> bool {
        let Some(eta) = &self.doob else {
            out.fill(0.0);
            return true;
        };
        let d = self.dim();
        let mut grad = vec![0.0; d];
        if !eta.grad_log(x, &mut grad) {
            return false;
        }
        let mut v = vec![0.0; d];
        for (i, g) in out.iter_mut().enumerate() {
            self.fields.diffusion(i, x, &mut v);
            *g = v.iter().zip(&grad).map(|(a, b)| a * b).sum();
        }
        true
    }

    /// Total drift `V_0 + Σ_i V_i g_i` of the (possibly transformed) path.
    pub fn drift_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        let mut out = vec![0.0; d];
        self.fields.drift(x, &mut out);
        if let Some(eta) = &self.doob {
            let mut g = vec![0.0; self.noise_dim()];
            if !self.girsanov_shift(x, &mut g) {
                return Err(Error::NonPositiveEta {
                    value: eta.value(x),
                    point: x.to_vec(),
                });
            }
            let mut v = vec![0.0; d];
            for (i, gi) in g.iter().enumerate() {
                self.fields.diffusion(i, x, &mut v);
                for r in 0..d {
                    out[r] += v[r] * gi;
                }
            }
        }
        Ok(out)
    }

    pub fn stepper(&self, x0: &[f64], dt: f64, stream: Substream) -> Result<SdeStepper> {
        self.stepper_on_channels(x0, dt, stream, 0)
    }

    /// Like [`SdeSystem::stepper`], but noise channel `i` reads the random
    /// numbers of channel `i + offset` of `stream`. Lets a lower-dimensional
    /// system replay one component of a higher-dimensional run.
    pub fn stepper_on_channels(
        &self,
        x0: &[f64],
        dt: f64,
        stream: Substream,
        offset: usize,
    ) -> Result<SdeStepper> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
        }
        if x0.len() != self.dim() || !self.domain.contains(x0) {
            return Err(Error::OutsideDomain(x0.to_vec()));
        }
        Ok(SdeStepper::new(self.clone(), x0, dt, stream, offset))
    }
}

/// Doob h-transform of `sys` by `eta`: adds `Σ_i V_i (V_i·∇log η)` to the
/// drift and keeps the diffusion fields.
///
/// `eta` is probed on an interior lattice of the bounding box; any
/// non-positive value there is an error. Later evaluations at points where
/// `η ≤ 0` end the path (reported as leakage by the Q-process samplers).
pub fn doob_drift(sys: &SdeSystem, eta: Arc<dyn EtaField>) -> Result<SdeSystem> {
    if eta.dim() != sys.dim() {
        return Err(Error::InvalidArgument(format!(
            "eta dimension {} differs from system dimension {}",
            eta.dim(),
            sys.dim()
        )));
    }
    let d = sys.dim();
    let lo = sys.domain().lower();
    let hi = sys.domain().upper();
    if lo.iter().chain(hi).all(|v| v.is_finite()) {
        let per_axis = match d {
            1 => 64,
            2 => 16,
            3 => 8,
            _ => 4,
        };
        let mut idx = vec![0usize; d];
        let mut p = vec![0.0; d];
        loop {
            for j in 0..d {
                let frac = (idx[j] as f64 + 0.5) / per_axis as f64;
                p[j] = lo[j] + frac * (hi[j] - lo[j]);
            }
            if sys.domain().contains(&p) {
                let v = eta.value(&p);
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::NonPositiveEta {
                        value: v,
                        point: p.clone(),
                    });
                }
            }
            let mut j = 0;
            while j < d {
                idx[j] += 1;
                if idx[j] < per_axis {
                    break;
                }
                idx[j] = 0;
                j += 1;
            }
            if j == d {
                break;
            }
        }
    }
    Ok(SdeSystem {
        doob: Some(eta),
        ..sys.base()
    })
}

/// Stratonovich–Heun predictor–corrector stepper.
///
/// The tangent propagator of a step is the Heun step of the joint system
/// `(x, Φ)`, so `Φ_{n+1} = J_n Φ_n` with
/// `J_n = I + ½(M_n + M*(I + M_n))`, where `M = DV_0 dt + Σ DV_i ΔW_i`
/// evaluated at the current point and at the predictor.
pub struct SdeStepper {
    sys: SdeSystem,
    dt: f64,
    sqrt_dt: f64,
    rngs: Vec<NoiseRng>,
    x: Vec<f64>,
    steps: usize,
    alive: bool,
    dw: Vec<f64>,
    f0: Vec<f64>,
    f1: Vec<f64>,
    g0: Vec<f64>,
    g1: Vec<f64>,
    grad: Vec<f64>,
    v0: Vec<f64>,
    v1: Vec<f64>,
    xp: Vec<f64>,
    xn: Vec<f64>,
    m0: DMatrix<f64>,
    m1: DMatrix<f64>,
    tmp: DMatrix<f64>,
    leak_retries: usize,
    leak_events: usize,
}

impl SdeStepper {
    fn new(sys: SdeSystem, x0: &[f64], dt: f64, stream: Substream, offset: usize) -> Self {
        let d = sys.dim();
        let m = sys.noise_dim();
        Self {
            dt,
            sqrt_dt: dt.sqrt(),
            rngs: (0..m).map(|i| stream.channel_rng(offset + i)).collect(),
            x: x0.to_vec(),
            steps: 0,
            alive: true,
            dw: vec![0.0; m],
            f0: vec![0.0; d],
            f1: vec![0.0; d],
            g0: vec![0.0; m],
            g1: vec![0.0; m],
            grad: vec![0.0; d],
            v0: vec![0.0; d * m],
            v1: vec![0.0; d * m],
            xp: vec![0.0; d],
            xn: vec![0.0; d],
            m0: DMatrix::zeros(d, d),
            m1: DMatrix::zeros(d, d),
            tmp: DMatrix::zeros(d, d),
            leak_retries: 0,
            leak_events: 0,
            sys,
        }
    }

    /// Redraws the noise of a step, up to `retries` times, when the step
    /// would leave the support of η or the domain. Only h-transformed
    /// systems accept this: for them such a step is a discretisation
    /// artefact (the exact Q-process is never absorbed), while for the
    /// plain system it would silently condition on survival.
    pub fn with_leak_resampling(mut self, retries: usize) -> Result<Self> {
        if retries > 0 && !self.sys.is_h_transformed() {
            return Err(Error::InvalidArgument(
                "leak resampling is only defined for h-transformed systems".into(),
            ));
        }
        self.leak_retries = retries;
        Ok(self)
    }


    /// Drift, per-channel diffusion values and Girsanov shifts at `x`.
    fn eval(
        sys: &SdeSystem,
        x: &[f64],
        f: &mut [f64],
        v: &mut [f64],
        g: &mut [f64],
        grad: &mut [f64],
    ) -> bool {
        let d = sys.dim();
        sys.fields.drift(x, f);
        for i in 0..sys.noise_dim() {
            sys.fields.diffusion(i, x, &mut v[i * d..(i + 1) * d]);
        }
        if let Some(eta) = &sys.doob {
            if !eta.grad_log(x, grad) {
                return false;
            }
            for i in 0..sys.noise_dim() {
                let vi = &v[i * d..(i + 1) * d];
                let gi: f64 = vi.iter().zip(grad.iter()).map(|(a, b)| a * b).sum();
                g[i] = gi;
                for r in 0..d {
                    f[r] += vi[r] * gi;
                }
            }
        }
        true
    }

    fn linear_part(&mut self, at_predictor: bool) {
        let d = self.sys.dim();
        let (x, out) = if at_predictor {
            (&self.xp, &mut self.m1)
        } else {
            (&self.x, &mut self.m0)
        };
        self.sys.fields.drift_jacobian(x, out);
        *out *= self.dt;
        if self.sys.is_additive() {
            return;
        }
        for i in 0..self.sys.noise_dim() {
            let w = if self.sys.doob.is_some() {
                self.dw[i] + 0.5 * (self.g0[i] + self.g1[i]) * self.dt
            } else {
                self.dw[i]
            };
            self.sys.fields.diffusion_jacobian(i, x, &mut self.tmp);
            for c in 0..d {
                for r in 0..d {
                    out[(r, c)] += w * self.tmp[(r, c)];
                }
            }
        }
    }

    fn step(&mut self, jac: Option<&mut DMatrix<f64>>) -> bool {
        if !self.alive {
            return false;
        }
        let d = self.sys.dim();
        let m = self.sys.noise_dim();
        if !Self::eval(
            &self.sys,
            &self.x,
            &mut self.f0,
            &mut self.v0,
            &mut self.g0,
            &mut self.grad,
        ) {
            self.alive = false;
            return false;
        }
        let mut attempt = 0;
        loop {
            for (w, rng) in self.dw.iter_mut().zip(self.rngs.iter_mut()) {
                let z: f64 = StandardNormal.sample(rng);
                *w = self.sqrt_dt * z;
            }
            for r in 0..d {
                let mut noise = 0.0;
                for i in 0..m {
                    noise += self.v0[i * d + r] * self.dw[i];
                }
                self.xp[r] = self.x[r] + self.f0[r] * self.dt + noise;
            }
            let ok = Self::eval(
                &self.sys,
                &self.xp,
                &mut self.f1,
                &mut self.v1,
                &mut self.g1,
                &mut self.grad,
            ) && {
                for r in 0..d {
                    let mut noise = 0.0;
                    for i in 0..m {
                        noise += (self.v0[i * d + r] + self.v1[i * d + r]) * self.dw[i];
                    }
                    self.xn[r] = self.x[r] + 0.5 * (self.f0[r] + self.f1[r]) * self.dt + 0.5 * noise;
                }
                self.sys.domain.contains(&self.xn)
            };
            if ok {
                break;
            }
            if attempt >= self.leak_retries {
                self.alive = false;
                self.steps += 1;
                return false;
            }
            if attempt == 0 {
                self.leak_events += 1;
            }
            attempt += 1;
        }
        if let Some(jac) = jac {
            self.linear_part(false);
            self.linear_part(true);
            jac.copy_from(&self.m0);
            *jac += &self.m1;
            jac.gemm(0.5, &self.m1, &self.m0, 0.5);
            for r in 0..d {
                jac[(r, r)] += 1.0;
            }
        }
        std::mem::swap(&mut self.x, &mut self.xn);
        self.steps += 1;
        true
    }
}

impl Stepper for SdeStepper {
    fn dim(&self) -> usize {
        self.sys.dim()
    }
    fn dt(&self) -> f64 {
        self.dt
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
    /// Steps whose first noise draw would have leaked.
    fn leak_events(&self) -> usize {
        self.leak_events
    }
}
