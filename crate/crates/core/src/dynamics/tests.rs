use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::builtin::{self, CoupledDoubleWell, DoubleWell, LinearSde};
use super::*;

fn stream(index: u64) -> Substream {
    Substream::new(2024, index, Purpose::Path)
}

fn linear_1d(a: f64, additive: Option<f64>) -> SdeSystem {
    let mut f = LinearSde::deterministic(DMatrix::from_element(1, 1, a));
    if let Some(s) = additive {
        f.additive.push(vec![s]);
    }
    SdeSystem::new(Domain::whole(1), Arc::new(f)).unwrap()
}

#[test]
fn identity_map_keeps_point() {
    let sys = DiscreteSystem::new(
        Domain::boxed(vec![0.0], vec![1.0]).unwrap(),
        Arc::new(AffineMap::identity(1)),
    )
    .unwrap();
    let path = sample_discrete_path(&sys, &[0.3], 10, stream(0)).unwrap();
    assert!(path.survived());
    assert_eq!(path.records(), 11);
    assert!(path.states.iter().all(|&v| v == 0.3));
}

#[test]
fn shift_map_exits_at_three() {
    let sys = DiscreteSystem::new(
        Domain::boxed(vec![0.0], vec![3.0]).unwrap(),
        Arc::new(AffineMap::shift(vec![1.0])),
    )
    .unwrap();
    let path = sample_discrete_path(&sys, &[0.0], 10, stream(0)).unwrap();
    assert_eq!(path.absorption, Absorption::At(3));
    assert_eq!(path.states, vec![0.0, 1.0, 2.0]);
    assert!(path.alive_at(2) && !path.alive_at(3));
}

#[test]
fn start_outside_domain_is_rejected() {
    let sys = builtin::noisy_logistic(3.9, 0.1).unwrap();
    assert!(matches!(
        sample_discrete_path(&sys, &[1.5], 3, stream(0)),
        Err(crate::Error::OutsideDomain(_))
    ));
}

/// Independent brute force: the logistic recursion written out directly.
fn logistic_survival_oracle(r: f64, a: f64, x0: f64, n: usize, samples: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut alive = 0usize;
    for _ in 0..samples {
        let mut x = x0;
        let mut ok = true;
        for _ in 0..n {
            x = r * x * (1.0 - x) + rng.random_range(-a..a);
            if !(0.0..1.0).contains(&x) {
                ok = false;
                break;
            }
        }
        alive += ok as usize;
    }
    alive as f64 / samples as f64
}

#[test]
fn noisy_logistic_survival_matches_brute_force() {
    let (r, a, x0, n) = (3.9, 0.1, 0.3, 50);
    let oracle = logistic_survival_oracle(r, a, x0, n, 1_000_000);
    let sys = AbsorbedSystem::Discrete(builtin::noisy_logistic(r, a).unwrap());
    let runs = 100_000;
    let alive = (0..runs)
        .filter(|&i| sys.sample_path(&[x0], n, n, stream(i)).unwrap().survived())
        .count();
    let p = alive as f64 / runs as f64;
    let se = (p * (1.0 - p) / runs as f64 + oracle * (1.0 - oracle) / 1e6).sqrt();
    assert!(p > 0.01 && p < 0.99, "survival {p} is degenerate");
    assert!((p - oracle).abs() <= 3.0 * se, "{p} vs {oracle} (se {se})");
}

#[test]
fn zero_fields_leave_point_fixed() {
    let f = LinearSde {
        a: DMatrix::zeros(2, 2),
        multiplicative: vec![DMatrix::zeros(2, 2)],
        additive: vec![vec![0.0, 0.0]],
    };
    let sys = SdeSystem::new(Domain::whole(2), Arc::new(f)).unwrap();
    let path = integrate_sde(&sys, &[0.4, -0.2], 1.0, 0.01, stream(1)).unwrap();
    assert!(path.survived());
    for j in 0..path.records() {
        assert_eq!(path.record(j), &[0.4, -0.2]);
    }
}

#[test]
fn deterministic_decay_matches_exponential() {
    let f = LinearSde {
        a: DMatrix::from_element(1, 1, -1.0),
        multiplicative: vec![],
        additive: vec![vec![0.0]],
    };
    let sys = SdeSystem::new(Domain::cube(1, 2.0).unwrap(), Arc::new(f)).unwrap();
    for dt in [0.01, 0.001] {
        let path = integrate_sde(&sys, &[1.0], 1.0, dt, stream(1)).unwrap();
        assert!((path.last()[0] - (-1f64).exp()).abs() < dt);
    }
}

#[test]
fn invalid_step_and_start_rejected() {
    let sys = builtin::double_well(&[0.5], 1.5).unwrap();
    assert!(integrate_sde(&sys, &[0.0], 1.0, 0.0, stream(0)).is_err());
    assert!(integrate_sde(&sys, &[0.0], 1.0, -0.1, stream(0)).is_err());
    assert!(matches!(
        integrate_sde(&sys, &[2.0], 1.0, 0.1, stream(0)),
        Err(crate::Error::OutsideDomain(_))
    ));
}

/// Euler–Maruyama for the additive double well on substeps of `dt / sub`,
/// checking the domain only at multiples of `dt`.
fn double_well_survival_oracle(sigma: f64, t: f64, dt: f64, sub: usize, samples: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let steps = (t / dt).round() as usize;
    let h = dt / sub as f64;
    let sq = h.sqrt();
    let mut alive = 0usize;
    for _ in 0..samples {
        let mut x: f64 = 0.0;
        let mut ok = true;
        for _ in 0..steps {
            for _ in 0..sub {
                let z: f64 = StandardNormal.sample(&mut rng);
                x += (x - x * x * x) * h + sigma * sq * z;
            }
            if !(-1.5..1.5).contains(&x) {
                ok = false;
                break;
            }
        }
        alive += ok as usize;
    }
    alive as f64 / samples as f64
}

#[test]
fn double_well_survival_matches_brute_force() {
    let (sigma, t, dt) = (0.5, 2.0, 0.01);
    let oracle = double_well_survival_oracle(sigma, t, dt, 2, 1_000_000);
    let sys = AbsorbedSystem::sde(builtin::double_well(&[sigma], 1.5).unwrap(), dt).unwrap();
    let runs = 100_000;
    let steps = sys.steps_for(t);
    let alive = (0..runs)
        .filter(|&i| sys.sample_path(&[0.0], steps, steps, stream(i)).unwrap().survived())
        .count();
    let p = alive as f64 / runs as f64;
    let se = (p * (1.0 - p) / runs as f64 + oracle * (1.0 - oracle) / 1e6).sqrt();
    assert!((p - oracle).abs() <= 3.0 * se, "{p} vs {oracle} (se {se})");
}

#[test]
fn paths_are_seed_deterministic() {
    let sys = AbsorbedSystem::sde(builtin::double_well(&[0.5, 0.3], 1.5).unwrap(), 0.01).unwrap();
    let a = sys.sample_path(&[0.1, -0.2], 500, 1, stream(7)).unwrap();
    let b = sys.sample_path(&[0.1, -0.2], 500, 1, stream(7)).unwrap();
    let c = sys.sample_path(&[0.1, -0.2], 500, 1, stream(8)).unwrap();
    assert_eq!(a.states, b.states);
    assert_eq!(a.absorption, b.absorption);
    assert_ne!(a.states, c.states);
}

#[test]
fn absorbed_paths_hold_no_state_past_tau() {
    let sys = AbsorbedSystem::sde(builtin::double_well(&[1.5], 1.5).unwrap(), 0.01).unwrap();
    let mut seen = 0;
    for i in 0..50 {
        let p = sys.sample_path(&[1.2], 2000, 1, stream(i)).unwrap();
        if let Some(tau) = p.tau() {
            seen += 1;
            assert_eq!(p.records(), tau);
            for j in 0..p.records() {
                assert!(sys.domain().contains(p.record(j)));
            }
        }
    }
    assert!(seen > 0);
}

#[test]
fn builtin_jacobians_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pts: Vec<Vec<f64>> = (0..100)
        .map(|_| vec![rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)])
        .collect();
    let dw = DoubleWell {
        sigmas: vec![0.7, 0.3],
    };
    let cw = CoupledDoubleWell {
        sigma: 0.5,
        coupling: 0.3,
    };
    assert!(check_sde_jacobians(&dw, &pts) <= 1e-5);
    assert!(check_sde_jacobians(&cw, &pts) <= 1e-5);
    let lin = LinearSde {
        a: DMatrix::from_row_slice(2, 2, &[0.1, 2.0, -1.0, 0.3]),
        multiplicative: vec![DMatrix::from_row_slice(2, 2, &[0.2, 0.5, 0.0, -0.4])],
        additive: vec![vec![1.0, 0.0]],
    };
    assert!(check_sde_jacobians(&lin, &pts) <= 1e-5);
    assert!(!lin.is_additive() && dw.is_additive());

    let logistic = NoisyLogistic {
        r: 3.9,
        noise_half_width: 0.1,
    };
    let pts1: Vec<Vec<f64>> = (0..100).map(|_| vec![rng.random_range(0.0..1.0)]).collect();
    assert!(check_map_jacobian(&logistic, &[0.05], &pts1) <= 1e-5);
}

#[test]
fn default_second_order_term_matches_linear_closed_form() {
    struct Wrapped(LinearSde);
    impl SdeFields for Wrapped {
        fn dim(&self) -> usize {
            self.0.dim()
        }
        fn noise_dim(&self) -> usize {
            self.0.noise_dim()
        }
        fn drift(&self, x: &[f64], out: &mut [f64]) {
            self.0.drift(x, out)
        }
        fn drift_jacobian(&self, x: &[f64], out: &mut DMatrix<f64>) {
            self.0.drift_jacobian(x, out)
        }
        fn diffusion(&self, i: usize, x: &[f64], out: &mut [f64]) {
            self.0.diffusion(i, x, out)
        }
        fn diffusion_jacobian(&self, i: usize, x: &[f64], out: &mut DMatrix<f64>) {
            self.0.diffusion_jacobian(i, x, out)
        }
    }
    let b = DMatrix::from_row_slice(2, 2, &[0.2, 0.5, -0.3, -0.4]);
    let lin = LinearSde {
        a: DMatrix::zeros(2, 2),
        multiplicative: vec![b.clone()],
        additive: vec![],
    };
    let mut fd = DMatrix::zeros(2, 2);
    Wrapped(lin).diffusion_second_order(0, &[0.3, -0.7], &mut fd);
    assert!((fd - &b * &b).norm() < 1e-8);
}

#[test]
fn identity_cocycle_for_zero_drift_jacobian() {
    let sys = AbsorbedSystem::sde(linear_1d(0.0, Some(0.8)), 0.01).unwrap();
    let path = sys.sample_path(&[0.0], 300, 1, stream(2)).unwrap();
    let cs = integrate_tangent(&sys, &path, 1, None, None, true).unwrap();
    assert_eq!(cs.qr.log_sums(), &[0.0]);
    assert_eq!(cs.qr.reconstruct().unwrap()[(0, 0)], 1.0);
}

#[test]
fn scalar_linear_cocycle_grows_exponentially() {
    let a = 0.7;
    for dt in [0.01, 0.001] {
        let sys = AbsorbedSystem::sde(linear_1d(a, None), dt).unwrap();
        let steps = sys.steps_for(2.0);
        let path = sys.sample_path(&[1.0], steps, 1, stream(0)).unwrap();
        let cs = integrate_tangent(&sys, &path, 1, None, None, false).unwrap();
        assert!((cs.qr.log_sums()[0] - a * 2.0).abs() < dt);
    }
}

#[test]
fn uncoupled_tangent_factorises_into_one_dimensional_runs() {
    let dt = 0.01;
    let x0 = [0.2, -0.9];
    let sys2 = builtin::double_well(&[0.7, 0.3], 10.0).unwrap();
    let mut s2 = sys2.stepper(&x0, dt, stream(5)).unwrap();
    let mut one_d: Vec<SdeStepper> = (0..2)
        .map(|c| {
            builtin::double_well(&[[0.7, 0.3][c]], 10.0)
                .unwrap()
                .stepper_on_channels(&[x0[c]], dt, stream(5), c)
                .unwrap()
        })
        .collect();
    let mut j2 = DMatrix::zeros(2, 2);
    let mut j1 = DMatrix::zeros(1, 1);
    let mut prod2 = DMatrix::<f64>::identity(2, 2);
    let mut prod1 = [1.0f64, 1.0];
    for _ in 0..400 {
        assert!(s2.advance_tangent(&mut j2));
        prod2 = &j2 * prod2;
        for c in 0..2 {
            assert!(one_d[c].advance_tangent(&mut j1));
            prod1[c] *= j1[(0, 0)];
            assert_eq!(one_d[c].state()[0], s2.state()[c]);
        }
    }
    for c in 0..2 {
        assert!((prod2[(c, c)] - prod1[c]).abs() <= 1e-10 * prod1[c].abs());
    }
    assert!(prod2[(0, 1)].abs() < 1e-300 && prod2[(1, 0)].abs() < 1e-300);
}

#[test]
fn tangent_window_beyond_absorption_fails() {
    let sys = AbsorbedSystem::Discrete(
        DiscreteSystem::new(
            Domain::boxed(vec![0.0], vec![3.0]).unwrap(),
            Arc::new(AffineMap::shift(vec![1.0])),
        )
        .unwrap(),
    );
    let path = sys.sample_path(&[0.0], 10, 1, stream(0)).unwrap();
    assert!(integrate_tangent(&sys, &path, 1, Some(1), Some(2), false).is_ok());
    assert!(matches!(
        integrate_tangent(&sys, &path, 1, Some(1), Some(3), false),
        Err(crate::Error::WindowExceedsAbsorption { requested: 3, tau: 3 })
    ));
}

#[test]
fn joint_and_separate_tangent_runs_agree() {
    let sys = AbsorbedSystem::sde(
        builtin::coupled_double_well(0.5, 0.3, 100.0).unwrap(),
        0.01,
    )
    .unwrap();
    let path = sys.sample_path(&[0.1, 0.2], 200, 1, stream(11)).unwrap();
    let cs = integrate_tangent(&sys, &path, 2, None, None, true).unwrap();
    let mut joint = sys.stepper(&[0.1, 0.2], stream(11)).unwrap();
    let mut jac = DMatrix::zeros(2, 2);
    let mut direct = DMatrix::<f64>::identity(2, 2);
    for n in 1..=200 {
        assert!(joint.advance_tangent(&mut jac));
        assert_eq!(joint.state(), path.at_step(n).unwrap());
        direct = &jac * direct;
    }
    let rebuilt = cs.qr.reconstruct().unwrap();
    assert!((&rebuilt - &direct).norm() <= 1e-8 * direct.norm());
}

#[test]
fn cocycle_law_holds_on_sampled_path() {
    let sys = AbsorbedSystem::sde(
        builtin::coupled_double_well(0.6, 0.4, 100.0).unwrap(),
        0.01,
    )
    .unwrap();
    let (s, t) = (120usize, 300usize);
    let mut stepper = sys.stepper(&[-0.3, 0.5], stream(21)).unwrap();
    let mut jac = DMatrix::zeros(2, 2);
    let mut first = DMatrix::<f64>::identity(2, 2);
    let mut second = DMatrix::<f64>::identity(2, 2);
    let mut acc = QrAccumulator::standard(2, 2, 1, true).unwrap();
    for n in 0..t {
        assert!(stepper.advance_tangent(&mut jac));
        acc.push(&jac).unwrap();
        if n < s {
            first = &jac * first;
        } else {
            second = &jac * second;
        }
    }
    let composed = &second * &first;
    let rebuilt = acc.reconstruct().unwrap();
    assert!((&rebuilt - &composed).norm() <= 1e-8 * composed.norm());
    assert!(crate::linalg::orthonormality_defect(acc.frame()) < 1e-10);
}

#[test]
fn frame_stays_orthonormal_with_longer_period() {
    let sys = AbsorbedSystem::Discrete(builtin::noisy_logistic(3.9, 0.0).unwrap());
    let mut stepper = sys.stepper(&[0.3], stream(0)).unwrap();
    let mut acc = QrAccumulator::standard(1, 1, 5, false).unwrap();
    let mut jac = DMatrix::zeros(1, 1);
    let mut direct_log = 0.0;
    for _ in 0..40 {
        if !stepper.advance_tangent(&mut jac) {
            break;
        }
        direct_log += jac[(0, 0)].abs().ln();
        acc.push(&jac).unwrap();
    }
    acc.flush().unwrap();
    assert!((acc.log_sums()[0] - direct_log).abs() < 1e-9);
}

#[test]
fn constant_eta_leaves_drift_unchanged() {
    let sys = builtin::double_well(&[0.5, 0.2], 1.5).unwrap();
    let q = doob_drift(&sys, Arc::new(ConstantEta { dim: 2, value: 3.0 })).unwrap();
    for x in [[0.0, 0.1], [1.2, -0.7], [-1.4, 1.4]] {
        let mut base = vec![0.0; 2];
        sys.fields().drift(&x, &mut base);
        assert_eq!(q.drift_at(&x).unwrap(), base);
    }
}

#[test]
fn exponential_eta_adds_constant_drift() {
    let (sigma, c) = (0.6, 1.7);
    let sys = SdeSystem::new(
        Domain::cube(1, 5.0).unwrap(),
        Arc::new(LinearSde {
            a: DMatrix::zeros(1, 1),
            multiplicative: vec![],
            additive: vec![vec![sigma]],
        }),
    )
    .unwrap();
    let q = doob_drift(&sys, Arc::new(ExponentialEta { coeffs: vec![c] })).unwrap();
    for x in [-3.0, 0.0, 2.5] {
        let v = q.drift_at(&[x]).unwrap()[0];
        assert!((v - sigma * sigma * c).abs() < 1e-14);
    }
}

#[test]
fn doob_drift_rejects_non_positive_eta() {
    let sys = builtin::double_well(&[0.5], 1.5).unwrap();
    assert!(matches!(
        doob_drift(&sys, Arc::new(ConstantEta { dim: 1, value: 0.0 })),
        Err(crate::Error::NonPositiveEta { .. })
    ));
}

#[test]
fn constant_eta_q_paths_equal_plain_paths() {
    let sys = builtin::double_well(&[0.5], 1.5).unwrap();
    let q = doob_drift(&sys, Arc::new(ConstantEta { dim: 1, value: 1.0 })).unwrap();
    let a = integrate_sde(&sys, &[0.3], 5.0, 0.01, stream(3)).unwrap();
    let b = integrate_sde(&q, &[0.3], 5.0, 0.01, stream(3)).unwrap();
    assert_eq!(a.states, b.states);
}
