use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A Monte-Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl Estimate {
    /// Sample mean and `s/√n` of i.i.d. values.
    pub fn from_samples(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std_error: f64::NAN,
                samples: 0,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std_error = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            f64::NAN
        };
        Self {
            mean,
            std_error,
            samples: n,
        }
    }

    /// `|a − b| ≤ z·√(se_a² + se_b²)`.
    pub fn agrees_with(&self, other: &Estimate, z: f64) -> bool {
        (self.mean - other.mean).abs() <= z * self.std_error.hypot(other.std_error)
    }

    /// `|a − value| ≤ z·se_a`.
    pub fn covers(&self, value: f64, z: f64) -> bool {
        (self.mean - value).abs() <= z * self.std_error
    }
}

/// Batch means of a time series: the mean of `batches` equal blocks
/// (trailing remainder dropped) and the standard error across blocks.
pub fn batch_means(series: &[f64], batches: usize) -> Result<Estimate> {
    if batches < 2 || series.len() < batches {
        return Err(Error::InvalidArgument(format!(
            "batch means need at least 2 batches and one value per batch ({} values, {batches} batches)",
            series.len()
        )));
    }
    let len = series.len() / batches;
    let means: Vec<f64> = series
        .chunks_exact(len)
        .take(batches)
        .map(|b| b.iter().sum::<f64>() / len as f64)
        .collect();
    Ok(Estimate::from_samples(&means))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_estimate() {
        let e = Estimate::from_samples(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(e.mean, 2.5);
        assert!((e.std_error - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert!(e.covers(2.0, 1.0));
        assert!(!e.covers(0.0, 2.0));
    }

    #[test]
    fn batch_means_of_blocks() {
        let series: Vec<f64> = (0..21).map(|i| (i / 10) as f64).collect();
        let e = batch_means(&series, 2).unwrap();
        assert_eq!(e.mean, 0.5);
        assert_eq!(e.samples, 2);
        assert!(batch_means(&series, 1).is_err());
        assert!(batch_means(&series[..3], 5).is_err());
    }
}
