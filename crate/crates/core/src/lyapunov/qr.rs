use nalgebra::DMatrix;
use serde::Serialize;

use super::report::{batch_length, LyapunovReport, Method};
use super::GrassmannPoint;
use crate::dynamics::{QrAccumulator, SdeSystem, Stepper, Substream};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct QrOptions {
    /// Number of exponents; defaults to the dimension.
    pub k: Option<usize>,
    /// Steps between re-orthonormalisations.
    pub period: usize,
    pub batches: usize,
    /// Time discarded before averaging; the frame still evolves.
    pub burn_in: f64,
    /// Initial frame; defaults to the first `k` standard basis vectors.
    pub frame: Option<GrassmannPoint>,
}

impl Default for QrOptions {
    fn default() -> Self {
        Self {
            k: None,
            period: 1,
            batches: 20,
            burn_in: 0.0,
            frame: None,
        }
    }
}

fn step_or_leak(stepper: &mut dyn Stepper, jac: &mut DMatrix<f64>) -> Result<()> {
    if stepper.advance_tangent(jac) {
        Ok(())
    } else {
        Err(Error::Leakage {
            step: stepper.steps_taken(),
        })
    }
}

/// Lyapunov exponents from `log|diag R|` of the QR-propagated frame over
/// `steps` steps after burn-in. Each batch of equal length gives one
/// estimate per exponent; the report averages them.
pub fn qr_spectrum(stepper: &mut dyn Stepper, steps: usize, opts: &QrOptions) -> Result<LyapunovReport> {
    let d = stepper.dim();
    let frame = match &opts.frame {
        Some(f) => {
            if f.dim() != d {
                return Err(Error::InvalidArgument(format!(
                    "frame in R^{} for a {d}-dimensional cocycle",
                    f.dim()
                )));
            }
            f.frame().clone()
        }
        None => GrassmannPoint::standard(d, opts.k.unwrap_or(d))?.into_frame(),
    };
    let len = batch_length(steps, opts.batches)?;
    let dt = stepper.dt();
    let mut qr = QrAccumulator::new(frame, opts.period, false)?;
    let mut jac = DMatrix::zeros(d, d);
    for _ in 0..(opts.burn_in / dt).round() as usize {
        step_or_leak(stepper, &mut jac)?;
        qr.push(&jac)?;
    }
    qr.flush()?;
    let span = len as f64 * dt;
    let mut prev = qr.log_sums().to_vec();
    let mut rows = Vec::with_capacity(opts.batches);
    for _ in 0..opts.batches {
        for _ in 0..len {
            step_or_leak(stepper, &mut jac)?;
            qr.push(&jac)?;
        }
        qr.flush()?;
        rows.push(qr.log_sums().iter().zip(&prev).map(|(a, b)| (a - b) / span).collect());
        prev.copy_from_slice(qr.log_sums());
    }
    let mut report =
        LyapunovReport::from_batches(Method::Qr, d, &rows, span * opts.batches as f64, dt)?;
    report.leak_events = stepper.leak_events();
    Ok(report)
}

/// [`qr_spectrum`] along one Q-process path of the h-transformed `sys`,
/// resampling leaking steps up to `retries` times.
pub fn q_process_spectrum(
    sys: &SdeSystem,
    x0: &[f64],
    dt: f64,
    horizon: f64,
    retries: usize,
    opts: &QrOptions,
    seed: Substream,
) -> Result<LyapunovReport> {
    if !sys.is_h_transformed() {
        return Err(Error::MissingSpectralData(
            "the Q-process spectrum needs a system drifted by an eta field".into(),
        ));
    }
    let mut st = sys.stepper(x0, dt, seed)?.with_leak_resampling(retries)?;
    qr_spectrum(&mut st, (horizon / dt).round() as usize, opts)
}

/// Liouville's formula along one path: the sum of all `d` QR exponents
/// against the accumulated `log|det J_n|`, both per unit time.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LiouvilleCheck {
    pub horizon: f64,
    pub qr_sum: f64,
    pub log_det: f64,
    pub discrepancy: f64,
}

pub fn liouville_check(stepper: &mut dyn Stepper, steps: usize, period: usize) -> Result<LiouvilleCheck> {
    let d = stepper.dim();
    let mut qr = QrAccumulator::standard(d, d, period, false)?;
    let mut jac = DMatrix::zeros(d, d);
    let mut log_det = 0.0;
    for _ in 0..steps {
        step_or_leak(stepper, &mut jac)?;
        log_det += jac.determinant().abs().ln();
        qr.push(&jac)?;
    }
    qr.flush()?;
    let t = steps as f64 * stepper.dt();
    let qr_sum = qr.log_sums().iter().sum::<f64>() / t;
    let log_det = log_det / t;
    Ok(LiouvilleCheck {
        horizon: t,
        qr_sum,
        log_det,
        discrepancy: (qr_sum - log_det).abs(),
    })
}

/// Three routes to the same growth rates along one path.
#[derive(Debug, Clone, Serialize)]
pub struct ExactnessReport {
    pub horizon: f64,
    /// `λ^{(k)}` from the partial sums of one full-width QR frame.
    pub qr_partial: Vec<f64>,
    /// `(1/t) log‖∧^k Φ_t (e_1 ∧ … ∧ e_k)‖` from separate `k`-frames.
    pub wedge: Vec<f64>,
    /// `(1/t) Σ log|det J_n|`.
    pub log_det: f64,
    pub max_discrepancy: f64,
}

/// Feeds every propagator of one path to a `d`-frame QR (period
/// `qr_period`), to `k`-frame wedge accumulators for `k = 1..d` (period
/// `wedge_period`) and to a log-determinant sum.
pub fn exactness_chain(
    stepper: &mut dyn Stepper,
    steps: usize,
    qr_period: usize,
    wedge_period: usize,
) -> Result<ExactnessReport> {
    let d = stepper.dim();
    let mut full = QrAccumulator::standard(d, d, qr_period, false)?;
    let mut wedges = (1..=d)
        .map(|k| QrAccumulator::standard(d, k, wedge_period, false))
        .collect::<Result<Vec<_>>>()?;
    let mut jac = DMatrix::zeros(d, d);
    let mut det_sum = 0.0;
    for _ in 0..steps {
        step_or_leak(stepper, &mut jac)?;
        det_sum += jac.determinant().abs().ln();
        full.push(&jac)?;
        for w in &mut wedges {
            w.push(&jac)?;
        }
    }
    full.flush()?;
    let t = steps as f64 * stepper.dt();
    let mut qr_partial = Vec::with_capacity(d);
    let mut acc = 0.0;
    for s in full.log_sums() {
        acc += s;
        qr_partial.push(acc / t);
    }
    let mut wedge = Vec::with_capacity(d);
    for w in &mut wedges {
        w.flush()?;
        wedge.push(w.log_sums().iter().sum::<f64>() / t);
    }
    let log_det = det_sum / t;
    let max_discrepancy = qr_partial
        .iter()
        .zip(&wedge)
        .map(|(a, b)| (a - b).abs())
        .chain(std::iter::once((qr_partial[d - 1] - log_det).abs()))
        .fold(0.0, f64::max);
    Ok(ExactnessReport {
        horizon: t,
        qr_partial,
        wedge,
        log_det,
        max_discrepancy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use crate::dynamics::{builtin, FrozenCocycle, MatrixSequence, Purpose};

    #[test]
    fn identity_cocycle_has_zero_spectrum() {
        let mut id = FrozenCocycle::new(DMatrix::identity(3, 3), 0.01);
        let r = qr_spectrum(&mut id, 1000, &QrOptions::default()).unwrap();
        assert_eq!(r.exponents, vec![0.0; 3]);
        assert_eq!(r.batches, 20);
        r.check_invariants().unwrap();
    }

    #[test]
    fn diagonal_flow_rates() {
        let rates = [0.7, -0.2, -1.5];
        let mut flow = FrozenCocycle::diagonal_flow(&rates, 0.01);
        let opts = QrOptions {
            period: 7,
            burn_in: 1.0,
            ..QrOptions::default()
        };
        let r = qr_spectrum(&mut flow, 5000, &opts).unwrap();
        for (got, want) in r.exponents.iter().zip(rates) {
            assert!((got - want).abs() < 1e-8);
        }
        assert!((r.horizon - 50.0).abs() < 1e-12);
        // Unsorted rates come back sorted.
        let mut flow = FrozenCocycle::diagonal_flow(&[-1.0, 2.0], 0.1);
        let r = qr_spectrum(&mut flow, 100, &QrOptions { batches: 10, ..QrOptions::default() }).unwrap();
        assert!((r.exponents[0] - 2.0).abs() < 1e-8 && (r.exponents[1] + 1.0).abs() < 1e-8);
    }

    #[test]
    fn too_few_batches_or_steps() {
        let mut id = FrozenCocycle::new(DMatrix::identity(2, 2), 1.0);
        assert!(qr_spectrum(&mut id, 100, &QrOptions { batches: 5, ..QrOptions::default() }).is_err());
        assert!(qr_spectrum(&mut id, 10, &QrOptions::default()).is_err());
        let mut short = MatrixSequence::new(vec![DMatrix::identity(2, 2); 15], 1.0);
        let err = qr_spectrum(&mut short, 40, &QrOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Leakage { .. }));
    }

    #[test]
    fn plain_system_is_not_a_q_process() {
        let sys = builtin::double_well(&[0.5], 1.5).unwrap();
        let err = q_process_spectrum(
            &sys,
            &[0.0],
            1e-2,
            10.0,
            0,
            &QrOptions::default(),
            Substream::new(1, 0, Purpose::Path),
        )
        .unwrap_err();
        assert!(matches!(err, Error::MissingSpectralData(_)));
    }

    #[test]
    fn liouville_identity_and_diagonal() {
        let mut id = FrozenCocycle::new(DMatrix::identity(2, 2), 1.0);
        let c = liouville_check(&mut id, 10, 1).unwrap();
        assert_eq!((c.qr_sum, c.log_det), (0.0, 0.0));
        let mut m = FrozenCocycle::new(DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.5])), 1.0);
        let c = liouville_check(&mut m, 40, 3).unwrap();
        assert!(c.qr_sum.abs() < 1e-14 && c.log_det.abs() < 1e-14);
    }

    #[test]
    fn three_routes_on_a_double_well_path() {
        let sys = builtin::double_well(&[0.5, 0.4], 10.0).unwrap();
        let mut st = sys.stepper(&[0.3, -0.8], 1e-2, Substream::new(2, 0, Purpose::Path)).unwrap();
        let r = exactness_chain(&mut st, 10_000, 1, 4).unwrap();
        assert!(r.max_discrepancy < 1e-8, "{r:?}");
        let mut st = sys.stepper(&[0.3, -0.8], 1e-2, Substream::new(2, 0, Purpose::Path)).unwrap();
        let c = liouville_check(&mut st, 10_000, 1).unwrap();
        assert!(c.discrepancy < 1e-8);
        assert!((c.qr_sum - r.log_det).abs() < 1e-12);
    }
}
