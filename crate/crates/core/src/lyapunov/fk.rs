//! Furstenberg–Khasminskii averages: `λ^{(k)}` as the ergodic mean of the
//! drift `ψ^k` of `log‖∧^k Φ_t v‖` plus the Girsanov correction
//! `Σ_i φ_i^k (V_i·∇log η)` along a Q-process path.

use nalgebra::{DMatrix, DMatrixView};
use serde::{Deserialize, Serialize};

use super::report::{batch_length, LyapunovReport, Method};
use super::GrassmannPoint;
use crate::dynamics::{QrAccumulator, SdeFields, SdeSystem, Stepper, Substream};
use crate::{Error, Result};

/// Which coefficients multiply the noise terms of `ψ^k`.
///
/// With `A_i = DV_i(x)`, `C_i = D(DV_i·V_i)(x)` and `P` the projection onto
/// the plane, the drift of `log‖∧^k Φ_t v‖` for Stratonovich noise driven by
/// standard Brownian motions is
/// `tr(DV_0 P) + ½ Σ_i [tr(C_i P) − tr((A_i P)²) + tr(A_iᵀ(I−P)A_i P)]`.
/// `AsPrinted` drops the ½ and squares the trace, `tr(A_i P)²`; the two
/// agree for additive noise, and for `k = 1` differ exactly by the factor
/// on the noise terms (the printed form corresponds to Brownian motions
/// with quadratic variation `2t`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsiForm {
    #[default]
    Stratonovich,
    AsPrinted,
}

/// Scratch space for repeated evaluations.
struct Work {
    jac: DMatrix<f64>,
    second: DMatrix<f64>,
}

impl Work {
    fn new(d: usize) -> Self {
        Self {
            jac: DMatrix::zeros(d, d),
            second: DMatrix::zeros(d, d),
        }
    }
}

/// `ψ` for the plane spanned by the orthonormal columns of `f`; the
/// traces `φ_i = tr(A_i P)` go to `phi`.
fn psi_on_frame(
    fields: &dyn SdeFields,
    x: &[f64],
    f: DMatrixView<f64>,
    form: PsiForm,
    work: &mut Work,
    phi: &mut [f64],
) -> f64 {
    fields.drift_jacobian(x, &mut work.jac);
    let mut psi = (f.transpose() * &work.jac * f).trace();
    if fields.is_additive() {
        phi.fill(0.0);
        return psi;
    }
    for (i, p) in phi.iter_mut().enumerate() {
        fields.diffusion_jacobian(i, x, &mut work.jac);
        fields.diffusion_second_order(i, x, &mut work.second);
        let af = &work.jac * f;
        let g = f.transpose() * &af;
        let tr_g = g.trace();
        *p = tr_g;
        let curvature = (f.transpose() * &work.second * f).trace();
        let normal = af.norm_squared() - g.norm_squared();
        psi += match form {
            PsiForm::Stratonovich => 0.5 * (curvature - (&g * &g).trace() + normal),
            PsiForm::AsPrinted => curvature - tr_g * tr_g + normal,
        };
    }
    psi
}

fn check_point(sys: &SdeSystem, x: &[f64], s: &GrassmannPoint) -> Result<()> {
    if x.len() != sys.dim() || s.dim() != sys.dim() {
        return Err(Error::InvalidArgument(format!(
            "point of length {} and plane in R^{} for a {}-dimensional system",
            x.len(),
            s.dim(),
            sys.dim()
        )));
    }
    Ok(())
}

/// The drift `ψ^k(x, s)` of `log‖∧^k Φ_t v‖`, `k` being the rank of `s`.
pub fn fk_psi(sys: &SdeSystem, x: &[f64], s: &GrassmannPoint, form: PsiForm) -> Result<f64> {
    check_point(sys, x, s)?;
    let mut phi = vec![0.0; sys.noise_dim()];
    Ok(psi_on_frame(
        sys.fields().as_ref(),
        x,
        s.frame().as_view(),
        form,
        &mut Work::new(sys.dim()),
        &mut phi,
    ))
}

/// `φ_i^k(x, s) = tr(DV_i(x) P_s)` for noise channel `i` (from 0).
pub fn fk_phi(sys: &SdeSystem, x: &[f64], s: &GrassmannPoint, i: usize) -> Result<f64> {
    check_point(sys, x, s)?;
    if i >= sys.noise_dim() {
        return Err(Error::IndexOutOfRange {
            index: i,
            size: sys.noise_dim(),
        });
    }
    let mut jac = DMatrix::zeros(sys.dim(), sys.dim());
    sys.fields().diffusion_jacobian(i, x, &mut jac);
    let f = s.frame();
    Ok((f.transpose() * jac * f).trace())
}

#[derive(Debug, Clone)]
pub struct FkOptions {
    pub batches: usize,
    /// Redraws allowed per leaking step.
    pub retries: usize,
    pub form: PsiForm,
    /// Points with `η` at or below this value are left out of the average.
    pub eta_floor: f64,
}

impl Default for FkOptions {
    fn default() -> Self {
        Self {
            batches: 20,
            retries: 100,
            form: PsiForm::default(),
            eta_floor: 0.0,
        }
    }
}

/// `λ^{(1)}, …, λ^{(k)}` as Birkhoff averages along one path of the
/// h-transformed `sys` after `burn_in`. The planes `s^j` are spanned by the
/// first `j` columns of one QR-propagated `k`-frame. The report's
/// exponents are the successive differences `λ^{(j)} − λ^{(j−1)}`.
#[allow(clippy::too_many_arguments)]
pub fn fk_lambda(
    sys: &SdeSystem,
    x0: &[f64],
    k: usize,
    dt: f64,
    burn_in: f64,
    horizon: f64,
    opts: &FkOptions,
    seed: Substream,
) -> Result<LyapunovReport> {
    let Some(eta) = sys.eta().cloned() else {
        return Err(Error::MissingSpectralData(
            "the FK average needs a system drifted by an eta field".into(),
        ));
    };
    let d = sys.dim();
    let m = sys.noise_dim();
    let steps = (horizon / dt).round() as usize;
    let len = batch_length(steps, opts.batches)?;
    let mut st = sys.stepper(x0, dt, seed)?.with_leak_resampling(opts.retries)?;
    let mut qr = QrAccumulator::standard(d, k, 1, false)?;
    let mut jac = DMatrix::zeros(d, d);
    let mut advance = |st: &mut crate::dynamics::SdeStepper, qr: &mut QrAccumulator| -> Result<()> {
        if !st.advance_tangent(&mut jac) {
            return Err(Error::Leakage {
                step: st.steps_taken(),
            });
        }
        qr.push(&jac)
    };
    for _ in 0..(burn_in / dt).round() as usize {
        advance(&mut st, &mut qr)?;
    }
    let fields = sys.fields().clone();
    let mut work = Work::new(d);
    let mut phi = vec![0.0; m];
    let mut shift = vec![0.0; m];
    let mut excluded = 0usize;
    let mut rows = Vec::with_capacity(opts.batches);
    for _ in 0..opts.batches {
        let mut sums = vec![0.0; k];
        let mut counted = 0usize;
        for _ in 0..len {
            advance(&mut st, &mut qr)?;
            let x = st.state();
            if !(eta.value(x) > opts.eta_floor) || !sys.girsanov_shift(x, &mut shift) {
                excluded += 1;
                continue;
            }
            counted += 1;
            for (j, s) in sums.iter_mut().enumerate() {
                let f = qr.frame().columns(0, j + 1);
                let psi = psi_on_frame(fields.as_ref(), x, f, opts.form, &mut work, &mut phi);
                *s += psi + phi.iter().zip(&shift).map(|(p, g)| p * g).sum::<f64>();
            }
        }
        if counted == 0 {
            return Err(Error::EtaFloor { cells: Vec::new() });
        }
        let partial: Vec<f64> = sums.iter().map(|s| s / counted as f64).collect();
        let mut row = Vec::with_capacity(k);
        let mut prev = 0.0;
        for p in partial {
            row.push(p - prev);
            prev = p;
        }
        rows.push(row);
    }
    let mut report =
        LyapunovReport::from_batches(Method::Fk, d, &rows, (len * opts.batches) as f64 * dt, dt)?;
    report.leak_events = st.leak_events();
    report.excluded_steps = excluded;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{builtin, builtin::LinearSde, doob_drift, ConstantEta, Domain, Purpose};
    use nalgebra::SymmetricEigen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn linear(a: DMatrix<f64>, b: Vec<DMatrix<f64>>) -> SdeSystem {
        SdeSystem::new(
            Domain::whole(a.nrows()),
            Arc::new(LinearSde {
                a,
                multiplicative: b,
                additive: Vec::new(),
            }),
        )
        .unwrap()
    }

    /// Nodes and weights of Gauss–Hermite quadrature for `N(0, 1)`.
    fn gauss_hermite(n: usize) -> Vec<(f64, f64)> {
        let jacobi = DMatrix::from_fn(n, n, |i, j| {
            if i + 1 == j || j + 1 == i {
                (i.max(j) as f64).sqrt()
            } else {
                0.0
            }
        });
        let eig = SymmetricEigen::new(jacobi);
        (0..n)
            .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
            .collect()
    }

    /// `E[log‖∧^k J v‖]/dt` for one Stratonovich step `J = I + M + ½M²`,
    /// `M = A dt + B ΔW`, by quadrature over `ΔW`.
    fn micro_step(a: &DMatrix<f64>, b: &DMatrix<f64>, f: &DMatrix<f64>, dt: f64) -> f64 {
        let d = a.nrows();
        gauss_hermite(60)
            .iter()
            .map(|&(z, w)| {
                let m = a * dt + b * (z * dt.sqrt());
                let j = DMatrix::identity(d, d) + &m + &m * &m * 0.5;
                let (v, _) = crate::linalg::half_log_gram_det(&(j * f)).unwrap();
                w * v
            })
            .sum::<f64>()
            / dt
    }

    #[test]
    fn double_well_integrand() {
        let sys = builtin::double_well(&[0.5], 1.5).unwrap();
        for x in [-1.2, -0.3, 0.0, 0.8] {
            for sign in [1.0, -1.0] {
                let s = GrassmannPoint::new(DMatrix::from_element(1, 1, sign)).unwrap();
                let psi = fk_psi(&sys, &[x], &s, PsiForm::Stratonovich).unwrap();
                assert!((psi - (1.0 - 3.0 * x * x)).abs() < 1e-14);
                assert_eq!(psi, fk_psi(&sys, &[x], &s, PsiForm::AsPrinted).unwrap());
                assert_eq!(fk_phi(&sys, &[x], &s, 0).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn identity_drift_gives_rank() {
        let sys = linear(DMatrix::identity(4, 4), Vec::new());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in 1..=4 {
            let s = GrassmannPoint::new(DMatrix::from_fn(4, k, |_, _| rng.random_range(-1.0..1.0))).unwrap();
            let psi = fk_psi(&sys, &[0.1, 0.2, 0.3, 0.4], &s, PsiForm::Stratonovich).unwrap();
            assert!((psi - k as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn phi_is_a_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rand = |r, c| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
        let b: Vec<DMatrix<f64>> = (0..2).map(|_| rand(3, 3)).collect();
        let sys = linear(rand(3, 3), b.clone());
        for k in 1..=3 {
            let s = GrassmannPoint::new(rand(3, k)).unwrap();
            for (i, bi) in b.iter().enumerate() {
                let brute = (bi * s.projection()).trace();
                assert!((fk_phi(&sys, &[0.0; 3], &s, i).unwrap() - brute).abs() < 1e-12);
            }
        }
        let identity = linear(DMatrix::zeros(2, 2), vec![DMatrix::identity(2, 2)]);
        let s = GrassmannPoint::standard(2, 2).unwrap();
        assert!((fk_phi(&identity, &[1.0, 1.0], &s, 0).unwrap() - 2.0).abs() < 1e-15);
        assert!(fk_phi(&identity, &[1.0, 1.0], &s, 1).is_err());
    }

    #[test]
    fn scalar_multiplicative_noise_matches_micro_step() {
        // dX = aX dt + σX ∘ dW: log X has drift a under both forms.
        let (a, sigma) = (-0.4, 0.9);
        let sys = linear(DMatrix::from_element(1, 1, a), vec![DMatrix::from_element(1, 1, sigma)]);
        let s = GrassmannPoint::standard(1, 1).unwrap();
        let oracle = micro_step(
            &DMatrix::from_element(1, 1, a),
            &DMatrix::from_element(1, 1, sigma),
            s.frame(),
            1e-5,
        );
        for form in [PsiForm::Stratonovich, PsiForm::AsPrinted] {
            let psi = fk_psi(&sys, &[0.7], &s, form).unwrap();
            assert!((psi - a).abs() < 1e-12);
            assert!((psi - oracle).abs() < 1e-3, "{psi} vs {oracle}");
        }
    }

    #[test]
    fn micro_step_oracle_selects_the_form() {
        // A non-normal matrix noise separates the two readings.
        let a = DMatrix::from_row_slice(2, 2, &[0.3, 1.0, -0.2, -0.5]);
        let b = DMatrix::from_row_slice(2, 2, &[0.2, 0.8, 0.0, -0.4]);
        let sys = linear(a.clone(), vec![b.clone()]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut printed_gap: f64 = 0.0;
        for k in 1..=2 {
            for _ in 0..5 {
                let s = GrassmannPoint::new(DMatrix::from_fn(2, k, |_, _| rng.random_range(-1.0..1.0)))
                    .unwrap();
                let oracle = micro_step(&a, &b, s.frame(), 1e-5);
                let strat = fk_psi(&sys, &[0.0, 0.0], &s, PsiForm::Stratonovich).unwrap();
                let printed = fk_psi(&sys, &[0.0, 0.0], &s, PsiForm::AsPrinted).unwrap();
                assert!((strat - oracle).abs() < 1e-3, "k={k}: {strat} vs {oracle}");
                printed_gap = printed_gap.max((printed - oracle).abs());
            }
        }
        assert!(printed_gap > 0.05, "{printed_gap}");
    }

    #[test]
    fn frozen_linear_flow_gives_partial_sums() {
        let rates = [0.5, -0.3, -1.1];
        let base = linear(DMatrix::from_diagonal(&rates.to_vec().into()), Vec::new());
        let sys = doob_drift(&base, Arc::new(ConstantEta { dim: 3, value: 1.0 })).unwrap();
        let r = fk_lambda(
            &sys,
            &[1.0, 1.0, 1.0],
            3,
            0.01,
            0.0,
            2.0,
            &FkOptions::default(),
            Substream::new(1, 0, Purpose::Path),
        )
        .unwrap();
        for (j, want) in [0.5, 0.2, -0.9].iter().enumerate() {
            assert!((r.partial_sums[j] - want).abs() < 1e-12);
        }
        assert_eq!(r.method, Method::Fk);
        assert!(fk_lambda(
            &base,
            &[1.0, 1.0, 1.0],
            1,
            0.01,
            0.0,
            2.0,
            &FkOptions::default(),
            Substream::new(1, 0, Purpose::Path)
        )
        .is_err());
    }
}
