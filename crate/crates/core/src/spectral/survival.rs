use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::grid::UlamGrid;
use super::matrix::SubstochasticMatrix;
use super::solve::SpectralData;
use crate::dynamics::{AbsorbedSystem, NoiseRng, Purpose, Substream};
use crate::{Error, Result};

/// Where ensemble paths start.
#[derive(Debug, Clone)]
pub enum StartLaw {
    Point(Vec<f64>),
    /// A cell chosen by weight, then a uniform point inside it.
    Cells { grid: UlamGrid, weights: Vec<f64> },
}

impl StartLaw {
    /// Cell-level law `weights` on `grid` (e.g. µ̂ or ν̂).
    pub fn cells(grid: &UlamGrid, weights: &[f64]) -> Result<Self> {
        if weights.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} weights for {} cells",
                weights.len(),
                grid.len()
            )));
        }
        WeightedIndex::new(weights)
            .map_err(|e| Error::InvalidArgument(format!("start weights: {e}")))?;
        Ok(Self::Cells {
            grid: grid.clone(),
            weights: weights.to_vec(),
        })
    }

    pub fn sample(&self, rng: &mut NoiseRng) -> Result<Vec<f64>> {
        match self {
            Self::Point(x) => Ok(x.clone()),
            Self::Cells { grid, weights } => {
                let dist = WeightedIndex::new(weights)
                    .map_err(|e| Error::InvalidArgument(format!("start weights: {e}")))?;
                let c = dist.sample(rng);
                uniform_in_cell(grid, c, rng)
            }
        }
    }
}

/// Uniform point of cell `c` that lies in the domain.
pub fn uniform_in_cell(grid: &UlamGrid, c: usize, rng: &mut NoiseRng) -> Result<Vec<f64>> {
    let lo = grid.cell_lower(c);
    let mut x = lo.clone();
    for _ in 0..10_000 {
        for (j, v) in x.iter_mut().enumerate() {
            *v = lo[j] + rng.random::<f64>() * grid.widths()[j];
        }
        if grid.locate(&x) == Some(c) {
            return Ok(x);
        }
    }
    Err(Error::EmptyCell(c))
}

/// Absorption step of ensemble member `i`, simulated for at most `steps`.
pub(crate) fn absorption_step(
    sys: &AbsorbedSystem,
    start: &StartLaw,
    steps: usize,
    member: Substream,
) -> Result<Option<usize>> {
    let x0 = start.sample(&mut member.with_purpose(Purpose::Start).rng())?;
    let mut stepper = sys.stepper(&x0, member.with_purpose(Purpose::Path))?;
    Ok((1..=steps).find(|_| !stepper.advance()))
}

/// Least-squares fit `log P(τ > t) ≈ log η − β t` with bootstrap errors.
#[derive(Debug, Clone, Serialize)]
pub struct SurvivalFit {
    pub times: Vec<f64>,
    pub survivors: Vec<usize>,
    pub launched: usize,
    pub beta: f64,
    pub beta_se: f64,
    /// Intercept `log η`.
    pub log_eta: f64,
    pub log_eta_se: f64,
    pub eta: f64,
    pub eta_se: f64,
}

pub const MIN_SURVIVORS: usize = 50;
const BOOTSTRAP_REPLICATES: usize = 200;

/// Monte-Carlo survival rate: `n` paths from `start`, survivor counts on the
/// time grid `times` (all used in the fit; pass only the tail).
pub fn estimate_survival_rate(
    sys: &AbsorbedSystem,
    start: &StartLaw,
    times: &[f64],
    n: usize,
    seed: Substream,
) -> Result<SurvivalFit> {
    if n < 100 {
        return Err(Error::InvalidArgument(format!("ensemble size {n} is below 100")));
    }
    if times.len() < 2 || times.windows(2).any(|w| !(w[0] < w[1])) || !(times[0] >= 0.0) {
        return Err(Error::InvalidArgument(
            "time grid needs at least two increasing non-negative times".into(),
        ));
    }
    let steps: Vec<usize> = times.iter().map(|&t| sys.steps_for(t)).collect();
    let last = *steps.last().unwrap();
    let taus: Result<Vec<Option<usize>>> = (0..n)
        .into_par_iter()
        .map(|i| absorption_step(sys, start, last, seed.fork(i as u64)))
        .collect();
    // Number of grid times each path survived past.
    let reached: Vec<usize> = taus?
        .iter()
        .map(|tau| match tau {
            None => steps.len(),
            Some(t) => steps.partition_point(|&s| s < *t),
        })
        .collect();
    let survivors = survivor_counts(reached.iter().copied(), steps.len());
    let final_count = *survivors.last().unwrap();
    if final_count < MIN_SURVIVORS {
        return Err(Error::InsufficientSurvivors {
            survivors: final_count,
            required: MIN_SURVIVORS,
            t: *times.last().unwrap(),
        });
    }
    let (slope, intercept) = fit_log_survival(times, &survivors, n).expect("survivors checked");

    let mut rng = seed.with_purpose(Purpose::Bootstrap).rng();
    let mut betas = Vec::with_capacity(BOOTSTRAP_REPLICATES);
    let mut intercepts = Vec::with_capacity(BOOTSTRAP_REPLICATES);
    for _ in 0..BOOTSTRAP_REPLICATES {
        let counts = survivor_counts((0..n).map(|_| reached[rng.random_range(0..n)]), steps.len());
        if let Some((s, c)) = fit_log_survival(times, &counts, n) {
            betas.push(-s);
            intercepts.push(c);
        }
    }
    let beta_se = std_dev(&betas);
    let log_eta_se = std_dev(&intercepts);
    Ok(SurvivalFit {
        times: times.to_vec(),
        survivors,
        launched: n,
        beta: -slope,
        beta_se,
        log_eta: intercept,
        log_eta_se,
        eta: intercept.exp(),
        eta_se: intercept.exp() * log_eta_se,
    })
}

fn survivor_counts(reached: impl Iterator<Item = usize>, k: usize) -> Vec<usize> {
    let mut hist = vec![0usize; k + 1];
    for r in reached {
        hist[r] += 1;
    }
    let mut out = vec![0usize; k];
    let mut acc = 0;
    for j in (0..k).rev() {
        acc += hist[j + 1];
        out[j] = acc;
    }
    out
}

fn fit_log_survival(times: &[f64], survivors: &[usize], n: usize) -> Option<(f64, f64)> {
    if survivors.contains(&0) {
        return None;
    }
    let y: Vec<f64> = survivors.iter().map(|&s| (s as f64 / n as f64).ln()).collect();
    Some(linear_fit(times, &y))
}

/// Ordinary least squares `y ≈ a x + b`, returning `(a, b)`.
pub(crate) fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

pub(crate) fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Total-variation decay of the conditioned cell law towards µ̂.
#[derive(Debug, Clone, Serialize)]
pub struct TvDecay {
    pub steps: Vec<usize>,
    pub times: Vec<f64>,
    pub tv: Vec<f64>,
    /// Fitted rate `α` of `tv ≈ C e^{−α t}`.
    pub alpha: Option<f64>,
    /// Fitted prefactor `C`.
    pub prefactor: Option<f64>,
}

/// Point mass on cell `c` of `n`.
pub fn point_mass(n: usize, c: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[c] = 1.0;
    v
}

/// `½‖a − b‖₁`.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// TV distance between `start·P̂ⁿ / (start·P̂ⁿ·1)` and `µ̂` for each `n` in
/// `steps`, with an exponential fit over the entries above rounding level.
pub fn tv_decay_diagnostic(
    p: &SubstochasticMatrix,
    sd: &SpectralData,
    start: &[f64],
    steps: &[usize],
) -> Result<TvDecay> {
    tv_decay_towards(p, start, &sd.mu, steps)
}

/// As [`tv_decay_diagnostic`] with an explicit target law and no
/// conditioning beyond renormalisation (also used for stochastic kernels).
pub(crate) fn tv_decay_towards(
    p: &SubstochasticMatrix,
    start: &[f64],
    target: &[f64],
    steps: &[usize],
) -> Result<TvDecay> {
    let n = p.size();
    if start.len() != n || target.len() != n {
        return Err(Error::GridMismatch(format!(
            "start law has {} entries, target {}, matrix {n}",
            start.len(),
            target.len()
        )));
    }
    if steps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("step grid must be increasing".into()));
    }
    let mut v = start.to_vec();
    let mut next = vec![0.0; n];
    let mut done = 0;
    let mut tv = Vec::with_capacity(steps.len());
    for &target_step in steps {
        while done < target_step {
            p.apply_left(&v, &mut next);
            std::mem::swap(&mut v, &mut next);
            let s: f64 = v.iter().sum();
            if s > 0.0 {
                v.iter_mut().for_each(|x| *x /= s);
            }
            done += 1;
        }
        let s: f64 = v.iter().sum();
        tv.push(if s > 0.0 {
            0.5 * v.iter().zip(target).map(|(x, m)| (x / s - m).abs()).sum::<f64>()
        } else {
            f64::NAN
        });
    }
    let times: Vec<f64> = steps.iter().map(|&k| k as f64 * p.horizon()).collect();
    let (fx, fy): (Vec<f64>, Vec<f64>) = times
        .iter()
        .zip(&tv)
        .filter(|(_, &d)| d.is_finite() && d > 1e-13)
        .map(|(&t, &d)| (t, d.ln()))
        .unzip();
    let (alpha, prefactor) = if fx.len() >= 2 {
        let (a, b) = linear_fit(&fx, &fy);
        (Some(-a), Some(b.exp()))
    } else {
        (None, None)
    };
    Ok(TvDecay {
        steps: steps.to_vec(),
        times,
        tv,
        alpha,
        prefactor,
    })
}
