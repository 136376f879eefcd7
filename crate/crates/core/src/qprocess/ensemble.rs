use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{AbsorbedPath, AbsorbedSystem, EtaField, Purpose, Substream};
use crate::spectral::{CellEta, SpectralData, StartLaw, MIN_SURVIVORS};
use crate::stats::Estimate;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct EnsembleOptions {
    /// Record every `stride`-th state.
    pub stride: usize,
    pub min_survivors: usize,
}

impl Default for EnsembleOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            min_survivors: MIN_SURVIVORS,
        }
    }
}

/// Paths conditioned on `τ > t`: the survivors of `launched` independent
/// launches from one starting law.
#[derive(Debug, Clone)]
pub struct SurvivorEnsemble {
    pub horizon: f64,
    pub horizon_steps: usize,
    pub launched: usize,
    pub start: String,
    pub paths: Vec<AbsorbedPath>,
}

impl SurvivorEnsemble {
    pub fn survivors(&self) -> usize {
        self.paths.len()
    }

    /// Estimate of `P(τ > t)`.
    pub fn survivor_fraction(&self) -> f64 {
        self.paths.len() as f64 / self.launched as f64
    }

    /// One row per retained path per recorded time:
    /// `path,step,time,x0,…,x{d-1}`. The first line carries the config hash.
    pub fn write_csv<W: Write>(&self, mut w: W, config_hash: Option<&str>) -> Result<()> {
        writeln!(w, "# config_hash={}", config_hash.unwrap_or("none"))?;
        let d = self.paths.first().map_or(0, |p| p.dim);
        write!(w, "path,step,time")?;
        for j in 0..d {
            write!(w, ",x{j}")?;
        }
        writeln!(w)?;
        for p in &self.paths {
            for r in 0..p.records() {
                let step = p.step_of(r);
                if step > self.horizon_steps {
                    break;
                }
                write!(w, "{},{},{}", p.seed.index, step, step as f64 * p.dt)?;
                for v in p.record(r) {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

fn describe(start: &StartLaw) -> String {
    match start {
        StartLaw::Point(x) => format!("point {x:?}"),
        StartLaw::Cells { grid, .. } => format!("cell law on {} cells", grid.len()),
    }
}

/// Launches `n` paths of `steps` steps; member `i` draws its start from
/// `seed.fork(i)` with purpose `Start` and its noise with purpose `Path`.
pub(crate) fn launch(
    sys: &AbsorbedSystem,
    start: &StartLaw,
    steps: usize,
    stride: usize,
    n: usize,
    seed: Substream,
) -> Result<Vec<AbsorbedPath>> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let member = seed.fork(i);
            let x0 = start.sample(&mut member.with_purpose(Purpose::Start).rng())?;
            sys.sample_path(&x0, steps, stride, member.with_purpose(Purpose::Path))
        })
        .collect()
}

pub fn conditioned_ensemble(
    sys: &AbsorbedSystem,
    start: &StartLaw,
    t: f64,
    n: usize,
    seed: Substream,
) -> Result<SurvivorEnsemble> {
    conditioned_ensemble_with(sys, start, t, n, seed, &EnsembleOptions::default())
}

pub fn conditioned_ensemble_with(
    sys: &AbsorbedSystem,
    start: &StartLaw,
    t: f64,
    n: usize,
    seed: Substream,
    opts: &EnsembleOptions,
) -> Result<SurvivorEnsemble> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one path".into()));
    }
    let steps = sys.steps_for(t);
    let mut paths = launch(sys, start, steps, opts.stride, n, seed)?;
    paths.retain(AbsorbedPath::survived);
    if paths.len() < opts.min_survivors {
        return Err(Error::InsufficientSurvivors {
            survivors: paths.len(),
            required: opts.min_survivors,
            t,
        });
    }
    Ok(SurvivorEnsemble {
        horizon: t,
        horizon_steps: steps,
        launched: n,
        start: describe(start),
        paths,
    })
}

/// Estimates `E^Q_x[F]` for `F` measurable up to time `s` through
/// `e^{βs} η̂(φ_s)/η̂(x) · F` averaged over all launched paths; absorbed
/// paths contribute zero. `η̂` is the cell-wise Ulam vector.
pub fn q_expectation_reweighted<F>(
    sys: &AbsorbedSystem,
    sd: &SpectralData,
    x0: &[f64],
    s: f64,
    functional: F,
    n: usize,
    seed: Substream,
) -> Result<Estimate>
where
    F: Fn(&AbsorbedPath) -> f64 + Sync,
{
    if n < 2 {
        return Err(Error::InvalidArgument("need at least two paths".into()));
    }
    let eta = CellEta::from_spectral(sd)?;
    let e0 = eta.value(x0);
    if !(e0 > 0.0) {
        return Err(Error::NonPositiveEta {
            value: e0,
            point: x0.to_vec(),
        });
    }
    let steps = sys.steps_for(s);
    let weight = (sd.beta * steps as f64 * sys.time_step()).exp() / e0;
    let values = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let path = sys.sample_path(x0, steps, 1, seed.fork(i).with_purpose(Purpose::Path))?;
            Ok(if path.survived() {
                weight * eta.value(path.last()) * functional(&path)
            } else {
                0.0
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(Estimate::from_samples(&values))
}

/// One row of a [`TransferTable`].
#[derive(Debug, Clone, Serialize)]
pub struct TransferRow {
    pub t: f64,
    pub survivors: usize,
    pub exceedances: usize,
    /// `P(|Γ_t − Γ*| > ε | τ > t)`.
    pub probability: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TransferTable {
    pub gamma_star: f64,
    pub epsilon: f64,
    pub launched: usize,
    pub rows: Vec<TransferRow>,
}

/// Conditional exceedance probabilities of a path statistic `Γ_t` around
/// a caller-supplied limit. `gamma(path, step)` must only read the path up
/// to `step`. All horizons share one set of launched paths; the survivors
/// at `t` are those with `τ > t`.
#[allow(clippy::too_many_arguments)]
pub fn transfer_check<G>(
    gamma: G,
    gamma_star: f64,
    sys: &AbsorbedSystem,
    start: &StartLaw,
    t_grid: &[f64],
    epsilon: f64,
    n: usize,
    seed: Substream,
    opts: &EnsembleOptions,
) -> Result<TransferTable>
where
    G: Fn(&AbsorbedPath, usize) -> Result<f64> + Sync,
{
    if t_grid.is_empty() || t_grid.windows(2).any(|w| w[0] >= w[1]) || t_grid[0] <= 0.0 {
        return Err(Error::InvalidArgument("t grid must be positive and increasing".into()));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    let steps: Vec<usize> = t_grid.iter().map(|&t| sys.steps_for(t)).collect();
    let stride = opts.stride.max(1);
    if steps.iter().any(|k| k % stride != 0) {
        return Err(Error::InvalidArgument("every horizon must be a multiple of the stride".into()));
    }
    let paths = launch(sys, start, *steps.last().unwrap(), stride, n, seed)?;
    let mut rows = Vec::with_capacity(t_grid.len());
    for (&t, &k) in t_grid.iter().zip(&steps) {
        let alive: Vec<&AbsorbedPath> = paths.iter().filter(|p| p.alive_at(k)).collect();
        if alive.len() < opts.min_survivors {
            return Err(Error::InsufficientSurvivors {
                survivors: alive.len(),
                required: opts.min_survivors,
                t,
            });
        }
        let exceed = alive
            .par_iter()
            .map(|p| Ok(((gamma(p, k)? - gamma_star).abs() > epsilon) as usize))
            .collect::<Result<Vec<usize>>>()?
            .into_iter()
            .sum::<usize>();
        let m = alive.len() as f64;
        let prob = exceed as f64 / m;
        rows.push(TransferRow {
            t,
            survivors: alive.len(),
            exceedances: exceed,
            probability: prob,
            std_error: (prob * (1.0 - prob) / m).sqrt(),
        });
    }
    Ok(TransferTable {
        gamma_star,
        epsilon,
        launched: n,
        rows,
    })
}

/// `Γ_t = (1/t)∫₀ᵗ f(φ_s) ds` from the recorded states of a path
/// (left-point rule on the record grid).
pub fn running_average(f: impl Fn(&[f64]) -> f64) -> impl Fn(&AbsorbedPath, usize) -> Result<f64> {
    move |p, step| {
        let records = step / p.stride;
        if records == 0 || records > p.records() {
            return Err(Error::IndexOutOfRange {
                index: step,
                size: p.horizon_steps,
            });
        }
        Ok((0..records).map(|r| f(p.record(r))).sum::<f64>() / records as f64)
    }
}
