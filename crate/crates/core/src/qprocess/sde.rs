use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{
    doob_drift, integrate_sde, AbsorbedPath, Purpose, SdeSystem, Stepper, Substream,
};
use crate::spectral::{GridEta, SpectralData, StartLaw, UlamGrid};
use crate::{Error, Result};

/// `sys` h-transformed by the multilinear interpolant of the Ulam `η̂`.
pub fn q_process_system(sys: &SdeSystem, sd: &SpectralData) -> Result<SdeSystem> {
    doob_drift(&sys.base(), Arc::new(GridEta::from_spectral(sd)?))
}

fn require_transformed(sys: &SdeSystem) -> Result<()> {
    if sys.is_h_transformed() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(
            "Q-process sampling needs a system drifted by doob_drift".into(),
        ))
    }
}

/// One Q-process path. Under the exact Q-process it is never absorbed; an
/// absorbed result is discretisation leakage and is left in the path's
/// [`AbsorbedPath::absorption`] for the caller to count.
pub fn sample_q_sde(
    sys: &SdeSystem,
    x0: &[f64],
    horizon: f64,
    dt: f64,
    seed: Substream,
) -> Result<AbsorbedPath> {
    require_transformed(sys)?;
    integrate_sde(sys, x0, horizon, dt, seed)
}

/// Leakage of an ensemble of Q-process paths.
#[derive(Debug, Clone, Serialize)]
pub struct LeakageReport {
    pub launched: usize,
    pub horizon: f64,
    pub dt: f64,
    /// Paths with at least one leaking step: the paths plain stepping
    /// would have absorbed.
    pub leaked: usize,
    /// Leaking steps over all paths (each resampled).
    pub events: usize,
    /// Paths absorbed because resampling gave up.
    pub absorbed: usize,
    /// Time of the first leak of each leaked path, in launch order.
    pub leak_times: Vec<f64>,
}

impl LeakageReport {
    /// Fraction of paths that plain stepping absorbs within the horizon.
    pub fn fraction(&self) -> f64 {
        self.leaked as f64 / self.launched as f64
    }
}

/// Runs `n` Q-process paths over `[0, horizon]` with up to `retries`
/// resampled draws per leaking step. Until its first leak a path consumes
/// exactly the noise of plain stepping, so `leaked` is also the absorption
/// count without resampling. Member `i` uses the same substreams as
/// ensemble member `i` elsewhere.
pub fn q_leakage(
    sys: &SdeSystem,
    start: &StartLaw,
    horizon: f64,
    dt: f64,
    n: usize,
    retries: usize,
    seed: Substream,
) -> Result<LeakageReport> {
    require_transformed(sys)?;
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one path".into()));
    }
    let steps = (horizon / dt).round() as usize;
    let runs = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let member = seed.fork(i);
            let x0 = start.sample(&mut member.with_purpose(Purpose::Start).rng())?;
            let mut st = sys
                .stepper(&x0, dt, member.with_purpose(Purpose::Path))?
                .with_leak_resampling(retries)?;
            let mut first = None;
            let mut absorbed = false;
            for k in 1..=steps {
                let before = st.leak_events();
                if !st.advance() {
                    first.get_or_insert(k);
                    absorbed = true;
                    break;
                }
                if st.leak_events() > before {
                    first.get_or_insert(k);
                }
            }
            Ok((first, st.leak_events().max(usize::from(absorbed)), absorbed))
        })
        .collect::<Result<Vec<_>>>()?;
    let leak_times: Vec<f64> = runs.iter().filter_map(|r| r.0).map(|k| k as f64 * dt).collect();
    Ok(LeakageReport {
        launched: n,
        horizon,
        dt,
        leaked: leak_times.len(),
        events: runs.iter().map(|r| r.1).sum(),
        absorbed: runs.iter().filter(|r| r.2).count(),
        leak_times,
    })
}

/// Fraction of time one long Q-process path spends in each grid cell
/// after `burn_in` time units, resampling leaking steps up to `retries`
/// times. Points outside the retained cells are not counted.
pub fn q_occupation(
    sys: &SdeSystem,
    grid: &UlamGrid,
    x0: &[f64],
    burn_in: f64,
    horizon: f64,
    dt: f64,
    retries: usize,
    seed: Substream,
) -> Result<Vec<f64>> {
    require_transformed(sys)?;
    if grid.dim() != sys.dim() {
        return Err(Error::GridMismatch("grid and system dimensions differ".into()));
    }
    let mut st = sys.stepper(x0, dt, seed)?.with_leak_resampling(retries)?;
    let skip = (burn_in / dt).round() as usize;
    let steps = (horizon / dt).round() as usize;
    let mut hist = vec![0.0; grid.len()];
    let mut counted = 0usize;
    for k in 1..=skip + steps {
        if !st.advance() {
            return Err(Error::Leakage { step: k });
        }
        if k > skip {
            if let Some(c) = grid.locate(st.state()) {
                hist[c] += 1.0;
                counted += 1;
            }
        }
    }
    let total = counted.max(1) as f64;
    hist.iter_mut().for_each(|v| *v /= total);
    Ok(hist)
}
