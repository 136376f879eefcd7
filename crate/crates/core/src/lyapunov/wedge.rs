use nalgebra::DMatrix;
use serde::Serialize;

use super::report::{batch_length, LyapunovReport, Method};
use super::{GrassmannPoint, QrOptions};
use crate::dynamics::{QrAccumulator, Stepper};
use crate::linalg::{binomial, combinations, half_log_gram_det};
use crate::{Error, Result};

/// `log‖∧^k Φ_t v‖` for the plane `v` after `steps` steps of `stepper`:
/// the frame is pushed through the one-step propagators, re-orthonormalised
/// every `period` steps, and the logs of the diagonal of `R` are summed.
pub fn wedge_log_norm(
    stepper: &mut dyn Stepper,
    v: &GrassmannPoint,
    steps: usize,
    period: usize,
) -> Result<f64> {
    if v.dim() != stepper.dim() {
        return Err(Error::InvalidArgument(format!(
            "plane in R^{} for a {}-dimensional cocycle",
            v.dim(),
            stepper.dim()
        )));
    }
    let d = stepper.dim();
    let mut qr = QrAccumulator::new(v.frame().clone(), period, false)?;
    let mut jac = DMatrix::zeros(d, d);
    for _ in 0..steps {
        if !stepper.advance_tangent(&mut jac) {
            return Err(Error::Leakage {
                step: stepper.steps_taken(),
            });
        }
        qr.push(&jac)?;
    }
    qr.flush()?;
    Ok(qr.log_sums().iter().sum())
}

/// Exponents from the growth of `j`-volumes, `j = 1..k`, each carried by
/// its own frame (the first `j` columns of the initial frame) along one
/// path. Batch increments of the log-volumes give per-batch partial sums,
/// whose differences are the exponents.
pub fn wedge_spectrum(stepper: &mut dyn Stepper, steps: usize, opts: &QrOptions) -> Result<LyapunovReport> {
    let d = stepper.dim();
    let k = opts.k.unwrap_or(d);
    let base = match &opts.frame {
        Some(f) if f.dim() != d => {
            return Err(Error::InvalidArgument(format!(
                "frame in R^{} for a {d}-dimensional cocycle",
                f.dim()
            )))
        }
        Some(f) => f.frame().clone(),
        None => GrassmannPoint::standard(d, k)?.into_frame(),
    };
    if base.ncols() < k {
        return Err(Error::InvalidArgument(format!("frame has {} columns, need {k}", base.ncols())));
    }
    let len = batch_length(steps, opts.batches)?;
    let dt = stepper.dt();
    let mut accs = (1..=k)
        .map(|j| QrAccumulator::new(base.columns(0, j).into_owned(), opts.period, false))
        .collect::<Result<Vec<_>>>()?;
    let mut jac = DMatrix::zeros(d, d);
    let mut advance = |stepper: &mut dyn Stepper, accs: &mut [QrAccumulator]| -> Result<()> {
        if !stepper.advance_tangent(&mut jac) {
            return Err(Error::Leakage {
                step: stepper.steps_taken(),
            });
        }
        accs.iter_mut().try_for_each(|a| a.push(&jac))
    };
    for _ in 0..(opts.burn_in / dt).round() as usize {
        advance(stepper, &mut accs)?;
    }
    let volumes = |accs: &mut [QrAccumulator]| -> Result<Vec<f64>> {
        accs.iter_mut()
            .map(|a| a.flush().map(|_| a.log_sums().iter().sum()))
            .collect()
    };
    let span = len as f64 * dt;
    let mut prev = volumes(&mut accs)?;
    let mut rows = Vec::with_capacity(opts.batches);
    for _ in 0..opts.batches {
        for _ in 0..len {
            advance(stepper, &mut accs)?;
        }
        let now = volumes(&mut accs)?;
        let partial: Vec<f64> = now.iter().zip(&prev).map(|(a, b)| (a - b) / span).collect();
        rows.push(
            (0..k)
                .map(|j| partial[j] - if j == 0 { 0.0 } else { partial[j - 1] })
                .collect::<Vec<f64>>(),
        );
        prev = now;
    }
    let mut report = LyapunovReport::from_batches(Method::Wedge, d, &rows, span * opts.batches as f64, dt)?;
    report.leak_events = stepper.leak_events();
    Ok(report)
}

/// `½ log det(BᵀB)`, the log-volume spanned by the columns of `b`,
/// through a Cholesky factorisation of the Gram matrix.
pub fn gram_log_volume(b: &DMatrix<f64>) -> Result<f64> {
    half_log_gram_det(b)
        .map(|(v, _)| v)
        .ok_or_else(|| Error::InvalidArgument("columns are numerically dependent".into()))
}

/// The three sides of `vol_k(A e_{1..k}) ≤ ‖∧^k A‖ ≤ C(d,k) · max_I vol_k(A e_I)`,
/// all as logarithms.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct WedgeBracket {
    pub lower: f64,
    pub norm: f64,
    pub upper: f64,
}

impl WedgeBracket {
    pub fn holds(&self, tol: f64) -> bool {
        self.lower <= self.norm + tol && self.norm <= self.upper + tol
    }
}

/// Evaluates both bounds on `‖∧^k A‖ = σ_1⋯σ_k` for a square `a`.
pub fn wedge_bracket(a: &DMatrix<f64>, k: usize) -> Result<WedgeBracket> {
    let d = a.nrows();
    if a.ncols() != d || k == 0 || k > d {
        return Err(Error::InvalidArgument(format!("need a square matrix and 1 ≤ k ≤ {d}")));
    }
    let mut sv: Vec<f64> = a.singular_values().iter().copied().collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    let norm = sv[..k].iter().map(|s| s.ln()).sum();
    let volume = |cols: &[usize]| {
        let sub = DMatrix::from_fn(d, k, |r, c| a[(r, cols[c])]);
        half_log_gram_det(&sub).map_or(f64::NEG_INFINITY, |(v, _)| v)
    };
    let first: Vec<usize> = (0..k).collect();
    let top = combinations(d, k)
        .iter()
        .map(|c| volume(c))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(WedgeBracket {
        lower: volume(&first),
        norm,
        upper: (binomial(d, k) as f64).ln() + top,
    })
}
