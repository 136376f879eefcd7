use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use super::{haar_grassmann_sample, GrassmannPoint};
use crate::dynamics::{AbsorbedSystem, Purpose, QrAccumulator, Substream};
use crate::spectral::{StartLaw, MIN_SURVIVORS};
use crate::stats::Estimate;
use crate::{Error, Result};

/// `(1/t) log σ_i(Φ_t · frame₀)` for `i` counted from 1, read from the
/// accumulator's scaled triangular factor (which it must track).
pub fn singular_value_ftle(qr: &QrAccumulator, t: f64, i: usize) -> Result<f64> {
    let rates = singular_value_ftles(qr, t)?;
    if i == 0 || i > rates.len() {
        return Err(Error::IndexOutOfRange {
            index: i,
            size: rates.len(),
        });
    }
    Ok(rates[i - 1])
}

/// All singular-value rates, largest first.
pub fn singular_value_ftles(qr: &QrAccumulator, t: f64) -> Result<Vec<f64>> {
    if !(t > 0.0) {
        return Err(Error::InvalidArgument(format!("time must be positive, got {t}")));
    }
    if !qr.is_flushed() {
        return Err(Error::InvalidArgument("accumulator has unflushed steps".into()));
    }
    let p = qr
        .product()
        .ok_or_else(|| Error::InvalidArgument("accumulator does not track its product".into()))?;
    Ok(p.log_singular_values().into_iter().map(|l| l / t).collect())
}

/// How each ensemble member chooses its plane `v`.
#[derive(Debug, Clone)]
pub enum FrameChoice {
    Fixed(GrassmannPoint),
    /// Haar-distributed, drawn from the member's `Haar` substream.
    Haar { k: usize },
}

impl FrameChoice {
    fn rank(&self) -> usize {
        match self {
            FrameChoice::Fixed(v) => v.rank(),
            FrameChoice::Haar { k } => *k,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FtleRow {
    pub t: f64,
    pub survivors: usize,
    pub mean: f64,
    pub variance: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExceedanceRow {
    pub t: f64,
    pub survivors: usize,
    /// `P(|λ − FTLE_t| > ε | τ > t)`.
    pub probability: f64,
    pub std_error: f64,
}

/// Samples of `(1/t) log‖∧^k Φ_t v‖` over the survivors at each `t`.
#[derive(Debug, Clone, Serialize)]
pub struct FtleDistribution {
    pub k: usize,
    pub launched: usize,
    pub rows: Vec<FtleRow>,
    pub samples: Vec<Vec<f64>>,
}

impl FtleDistribution {
    pub fn exceedance(&self, lambda: f64, epsilon: f64) -> Result<Vec<ExceedanceRow>> {
        if !(epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(self
            .rows
            .iter()
            .zip(&self.samples)
            .map(|(row, s)| {
                let m = s.len() as f64;
                let hits = s.iter().filter(|v| (lambda - *v).abs() > epsilon).count();
                let p = hits as f64 / m;
                ExceedanceRow {
                    t: row.t,
                    survivors: s.len(),
                    probability: p,
                    std_error: (p * (1.0 - p) / m).sqrt(),
                }
            })
            .collect())
    }

    /// `t,survivors,mean,variance,std_error`.
    pub fn write_summary_csv<W: Write>(&self, mut w: W, config_hash: Option<&str>) -> Result<()> {
        writeln!(w, "# k={} config_hash={}", self.k, config_hash.unwrap_or("none"))?;
        writeln!(w, "t,survivors,mean,variance,std_error")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{}", r.t, r.survivors, r.mean, r.variance, r.std_error)?;
        }
        Ok(())
    }

    /// Per-`t` histograms on a common range: `t,bin_lower,bin_upper,count`.
    pub fn write_histogram_csv<W: Write>(
        &self,
        mut w: W,
        bins: usize,
        config_hash: Option<&str>,
    ) -> Result<()> {
        if bins == 0 {
            return Err(Error::InvalidArgument("need at least one bin".into()));
        }
        let all = self.samples.iter().flatten();
        let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
        let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        writeln!(w, "# k={} config_hash={}", self.k, config_hash.unwrap_or("none"))?;
        writeln!(w, "t,bin_lower,bin_upper,count")?;
        for (row, s) in self.rows.iter().zip(&self.samples) {
            let mut counts = vec![0usize; bins];
            for v in s {
                counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
            }
            for (b, c) in counts.iter().enumerate() {
                let a = lo + b as f64 * width;
                writeln!(w, "{},{},{},{}", row.t, a, a + width, c)?;
            }
        }
        Ok(())
    }
}

/// Runs `n` members from `start` and propagates a `k`-frame along each,
/// recording the finite-time rate at every grid time the member is still
/// alive. Member `i` uses the `Start`, `Path` and `Haar` substreams of
/// `seed.fork(i)`.
pub fn conditioned_ftle_distribution(
    sys: &AbsorbedSystem,
    start: &StartLaw,
    t_grid: &[f64],
    n: usize,
    frame: &FrameChoice,
    seed: Substream,
    min_survivors: Option<usize>,
) -> Result<FtleDistribution> {
    if t_grid.is_empty() || t_grid[0] <= 0.0 || t_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("t grid must be positive and increasing".into()));
    }
    let d = sys.dim();
    let k = frame.rank();
    if k == 0 || k > d {
        return Err(Error::InvalidArgument(format!("plane rank {k} must lie in 1..={d}")));
    }
    if let FrameChoice::Fixed(v) = frame {
        if v.dim() != d {
            return Err(Error::InvalidArgument("plane and system dimensions differ".into()));
        }
    }
    let marks: Vec<usize> = t_grid.iter().map(|&t| sys.steps_for(t)).collect();
    let period = sys.default_reorth_period();
    let per_member = (0..n as u64)
        .into_par_iter()
        .map(|i| -> Result<Vec<Option<f64>>> {
            let member = seed.fork(i);
            let x0 = start.sample(&mut member.with_purpose(Purpose::Start).rng())?;
            let v = match frame {
                FrameChoice::Fixed(v) => v.frame().clone(),
                FrameChoice::Haar { k } => haar_grassmann_sample(d, *k, member)?.into_frame(),
            };
            let mut st = sys.stepper(&x0, member.with_purpose(Purpose::Path))?;
            let mut qr = QrAccumulator::new(v, period, false)?;
            let mut jac = DMatrix::zeros(d, d);
            let mut out = vec![None; marks.len()];
            let mut step = 0;
            for (slot, &mark) in out.iter_mut().zip(&marks) {
                while step < mark {
                    if !st.advance_tangent(&mut jac) {
                        return Ok(out);
                    }
                    qr.push(&jac)?;
                    step += 1;
                }
                qr.flush()?;
                *slot = Some(qr.log_sums().iter().sum::<f64>() / (mark as f64 * st.dt()));
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let required = min_survivors.unwrap_or(MIN_SURVIVORS);
    let mut rows = Vec::with_capacity(t_grid.len());
    let mut samples = Vec::with_capacity(t_grid.len());
    for (j, &t) in t_grid.iter().enumerate() {
        let s: Vec<f64> = per_member.iter().filter_map(|m| m[j]).collect();
        if s.len() < required {
            return Err(Error::InsufficientSurvivors {
                survivors: s.len(),
                required,
                t,
            });
        }
        let e = Estimate::from_samples(&s);
        let variance = if s.len() > 1 {
            s.iter().map(|v| (v - e.mean).powi(2)).sum::<f64>() / (s.len() - 1) as f64
        } else {
            0.0
        };
        rows.push(FtleRow {
            t,
            survivors: s.len(),
            mean: e.mean,
            variance,
            std_error: if s.len() > 1 { e.std_error } else { 0.0 },
        });
        samples.push(s);
    }
    Ok(FtleDistribution {
        k,
        launched: n,
        rows,
        samples,
    })
}
