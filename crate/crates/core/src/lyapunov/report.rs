use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::stats::Estimate;
use crate::{Error, Result};

/// Estimators of the spectrum need at least this many batches.
pub const MIN_BATCHES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Qr,
    Wedge,
    Fk,
    Ftle,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Qr => "qr",
            Method::Wedge => "wedge",
            Method::Fk => "fk",
            Method::Ftle => "ftle",
        }
    }
}

/// Lyapunov exponents `Λ_1 ≥ … ≥ Λ_k` with their partial sums
/// `λ^{(j)} = Λ_1 + … + Λ_j`, all per unit time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LyapunovReport {
    pub method: Method,
    pub dim: usize,
    pub exponents: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub partial_sums: Vec<f64>,
    pub partial_std_errors: Vec<f64>,
    /// Averaging window, excluding burn-in.
    pub horizon: f64,
    pub dt: f64,
    pub batches: usize,
    pub paths: usize,
    /// Resampled leaking steps of the Q-process path(s).
    pub leak_events: usize,
    /// Steps left out of an ergodic average (η below its floor).
    pub excluded_steps: usize,
    pub config_hash: Option<String>,
}

impl LyapunovReport {
    /// Builds a report from per-batch exponent estimates (one row per
    /// batch, one column per exponent). Exponents are sorted by their
    /// batch mean; errors follow the same permutation, and each partial
    /// sum's error comes from the batch series of that partial sum.
    pub fn from_batches(
        method: Method,
        dim: usize,
        batches: &[Vec<f64>],
        horizon: f64,
        dt: f64,
    ) -> Result<Self> {
        if batches.len() < 2 {
            return Err(Error::InvalidArgument("need at least two batches".into()));
        }
        let k = batches[0].len();
        if k == 0 || batches.iter().any(|b| b.len() != k) {
            return Err(Error::InvalidArgument("batches must have equal, non-zero width".into()));
        }
        let column = |j: usize| -> Vec<f64> { batches.iter().map(|b| b[j]).collect() };
        let per_exponent: Vec<Estimate> = (0..k).map(|j| Estimate::from_samples(&column(j))).collect();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| per_exponent[b].mean.total_cmp(&per_exponent[a].mean));
        let exponents: Vec<f64> = order.iter().map(|&j| per_exponent[j].mean).collect();
        let std_errors = order.iter().map(|&j| per_exponent[j].std_error).collect();
        let mut partial_sums = Vec::with_capacity(k);
        let mut acc = 0.0;
        for e in &exponents {
            acc += e;
            partial_sums.push(acc);
        }
        let partial_std_errors = (1..=k)
            .map(|p| {
                let sums: Vec<f64> = batches
                    .iter()
                    .map(|b| order[..p].iter().map(|&j| b[j]).sum())
                    .collect();
                Estimate::from_samples(&sums).std_error
            })
            .collect();
        Ok(Self {
            method,
            dim,
            exponents,
            std_errors,
            partial_sums,
            partial_std_errors,
            horizon,
            dt,
            batches: batches.len(),
            paths: 1,
            leak_events: 0,
            excluded_steps: 0,
            config_hash: None,
        })
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    /// `Λ_i` (1-based) with its standard error.
    pub fn exponent(&self, i: usize) -> Result<Estimate> {
        self.check_index(i)?;
        Ok(Estimate {
            mean: self.exponents[i - 1],
            std_error: self.std_errors[i - 1],
            samples: self.batches,
        })
    }

    /// `λ^{(k)}` with its standard error.
    pub fn partial_sum(&self, k: usize) -> Result<Estimate> {
        self.check_index(k)?;
        Ok(Estimate {
            mean: self.partial_sums[k - 1],
            std_error: self.partial_std_errors[k - 1],
            samples: self.batches,
        })
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i == 0 || i > self.len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                size: self.len(),
            });
        }
        Ok(())
    }

    /// Sorted exponents and partial sums that add up within `1e-12`.
    pub fn check_invariants(&self) -> Result<()> {
        if self.exponents.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::Integrity("exponents are not sorted".into()));
        }
        let mut acc = 0.0;
        for (e, s) in self.exponents.iter().zip(&self.partial_sums) {
            acc += e;
            if (acc - s).abs() > 1e-12 {
                return Err(Error::Integrity("partial sums do not match the exponents".into()));
            }
        }
        Ok(())
    }

    pub fn with_config_hash(mut self, hash: Option<&str>) -> Self {
        self.config_hash = hash.map(str::to_owned);
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        r.check_invariants()?;
        Ok(r)
    }

    /// `i,exponent,std_error,partial_sum,partial_std_error`, preceded by a
    /// comment line with the method and config hash.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "# method={} config_hash={}",
            self.method.name(),
            self.config_hash.as_deref().unwrap_or("none")
        )?;
        writeln!(w, "i,exponent,std_error,partial_sum,partial_std_error")?;
        for i in 0..self.len() {
            writeln!(
                w,
                "{},{},{},{},{}",
                i + 1,
                self.exponents[i],
                self.std_errors[i],
                self.partial_sums[i],
                self.partial_std_errors[i]
            )?;
        }
        Ok(())
    }
}

/// Splits `steps` into `batches` equal blocks, dropping the remainder.
pub(crate) fn batch_length(steps: usize, batches: usize) -> Result<usize> {
    if batches < MIN_BATCHES {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_BATCHES} batches, got {batches}"
        )));
    }
    let len = steps / batches;
    if len == 0 {
        return Err(Error::InvalidArgument(format!(
            "{steps} steps cannot fill {batches} batches"
        )));
    }
    Ok(len)
}
