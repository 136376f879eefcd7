use std::io::Write;

use serde::Serialize;

use super::config::{ExperimentConfig, FrameKind, SystemKind};
use super::experiment::{
    absorbed_system, compute_spectral, load_spectral, mu_start, nu_start, product_law,
    q_sde_system, q_stepper, reorth_period, spectral_path, stream, time_step, total_beta,
};
use super::manifest::RunManifest;
use crate::dynamics::{Purpose, Substream};
use crate::lyapunov::{
    conditioned_ftle_distribution, fk_lambda, oseledets_estimate, qr_spectrum, wedge_spectrum,
    ExceedanceRow, FkOptions, FrameChoice, FtleRow, GrassmannPoint, LyapunovReport, Method,
    OseledetsEstimate, OseledetsOptions, QrOptions,
};
use crate::qprocess::{
    build_q_kernel, check_q_stationarity, occupation_distance, q_leakage, q_occupation,
    sample_q_chain, LeakageReport,
};
use crate::spectral::{
    estimate_survival_rate, point_mass, total_variation, tv_decay_diagnostic, SpectralData,
    SurvivalFit,
};
use crate::stats::Estimate;
use crate::{Error, Result};

/// Text printed by `describe`: every default, as a loadable config.
pub fn describe() -> String {
    format!(
        "# Default experiment configuration (config version {}).\n\
         # Every key is optional; omitted keys take these values.\n\
         # system.kind: double_well | coupled_double_well | noisy_logistic | chain | linear\n\
         # lyapunov.psi_form: stratonovich | as_printed; lyapunov.frame: haar | standard\n\n{}",
        super::config::CONFIG_VERSION,
        ExperimentConfig::default().to_toml()
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct FactorSummary {
    pub cells: usize,
    pub rho: f64,
    pub beta: f64,
    pub second_modulus: f64,
    pub spectral_ratio: f64,
    pub left_residual: f64,
    pub right_residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SurvivalCheck {
    pub monte_carlo: SurvivalFit,
    /// `|β_MC − β̂| / β_MC`.
    pub relative_difference: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct QsdSummary {
    pub factors: Vec<FactorSummary>,
    /// Total escape rate (the factor rates add up).
    pub beta: f64,
    pub survival: Option<SurvivalCheck>,
}

fn factor_summary(sd: &SpectralData) -> FactorSummary {
    FactorSummary {
        cells: sd.len(),
        rho: sd.rho,
        beta: sd.beta,
        second_modulus: sd.second_modulus,
        spectral_ratio: sd.spectral_ratio(),
        left_residual: sd.left_residual,
        right_residual: sd.right_residual,
    }
}

/// Ulam matrices, their quasi-stationary objects, the TV decay towards µ̂
/// and a Monte-Carlo survival-rate cross-check.
pub fn cmd_qsd(cfg: &ExperimentConfig) -> Result<(QsdSummary, RunManifest)> {
    let mut m = RunManifest::new("qsd", cfg);
    let factors = m.stage("ulam", || compute_spectral(cfg))?;
    for (j, sd) in factors.iter().enumerate() {
        let path = spectral_path(cfg, j);
        std::fs::create_dir_all(&cfg.output)?;
        sd.save(&path, Some(m.hash()))?;
        m.record(&path);
        let decay = tv_decay_diagnostic(&sd.matrix, sd, &point_mass(sd.len(), 0), &cfg.survival.tv_steps)?;
        let hash = m.hash().to_owned();
        let mut w = m.create(&format!("tv_decay_{j}.csv"))?;
        writeln!(w, "# config_hash={hash}")?;
        writeln!(w, "n,t,tv")?;
        for ((n, t), tv) in decay.steps.iter().zip(&decay.times).zip(&decay.tv) {
            writeln!(w, "{n},{t},{tv}")?;
        }
        w.flush()?;
    }
    let beta = total_beta(&factors);
    let survival = if cfg.survival.paths > 0 {
        let fit = m.stage("survival", || {
            estimate_survival_rate(
                &absorbed_system(cfg)?,
                &mu_start(cfg, &factors)?,
                &cfg.survival.fit_times,
                cfg.survival.paths,
                Substream::new(cfg.seed, stream::SURVIVAL, Purpose::Path),
            )
        })?;
        let hash = m.hash().to_owned();
        let mut w = m.create("survival_fit.csv")?;
        writeln!(w, "# config_hash={hash} beta={} beta_se={}", fit.beta, fit.beta_se)?;
        writeln!(w, "t,survivors,fraction")?;
        for (t, s) in fit.times.iter().zip(&fit.survivors) {
            writeln!(w, "{t},{s},{}", *s as f64 / fit.launched as f64)?;
        }
        w.flush()?;
        Some(SurvivalCheck {
            relative_difference: (fit.beta - beta).abs() / fit.beta.abs(),
            monte_carlo: fit,
        })
    } else {
        None
    };
    let summary = QsdSummary {
        factors: factors.iter().map(factor_summary).collect(),
        beta,
        survival,
    };
    m.write_json("qsd_summary.json", &summary)?;
    Ok((summary, m.finish()?))
}

#[derive(Debug, Clone, Serialize)]
pub struct KernelSummary {
    pub rho: f64,
    pub dropped: Vec<usize>,
    pub max_row_deviation: f64,
    /// `‖ν̂Q̂ − ν̂‖₁`.
    pub stationarity_residual: f64,
    pub start_cell: usize,
    pub final_tv: f64,
    pub max_tv_increase: f64,
    /// TV between the occupation of a sampled Q̂ chain and ν̂.
    pub chain_occupation_tv: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct QProcessSummary {
    pub kernels: Vec<KernelSummary>,
    pub leakage: Option<LeakageReport>,
    /// TV between the occupation of one long Q-process path and ν̂.
    pub occupation_tv: Option<f64>,
}

/// Discrete Q-kernels, their stationarity and mixing, and for diffusions
/// the leakage and occupation of Doob-drifted paths.
pub fn cmd_qprocess(cfg: &ExperimentConfig) -> Result<(QProcessSummary, RunManifest)> {
    let mut m = RunManifest::new("qprocess", cfg);
    let factors = load_spectral(cfg)?;
    let mut kernels = Vec::with_capacity(factors.len());
    for (j, sd) in factors.iter().enumerate() {
        let qk = build_q_kernel(sd)?;
        let start = (0..qk.size()).find(|&c| qk.is_retained(c)).expect("some cell is retained");
        let report = check_q_stationarity(&qk, &sd.nu, start, &cfg.survival.tv_steps)?;
        let chain = sample_q_chain(
            &qk,
            start,
            cfg.qprocess.chain_steps,
            Substream::new(cfg.seed, stream::CHAIN + j as u64, Purpose::Chain),
        )?;
        let text = qk.to_json(Some(m.hash()))?;
        m.create(&format!("q_kernel_{j}.json"))?.write_all(text.as_bytes())?;
        let hash = m.hash().to_owned();
        let mut w = m.create(&format!("q_tv_decay_{j}.csv"))?;
        writeln!(w, "# config_hash={hash} start_cell={start}")?;
        writeln!(w, "n,t,tv")?;
        for ((n, t), tv) in report.decay.steps.iter().zip(&report.decay.times).zip(&report.decay.tv) {
            writeln!(w, "{n},{t},{tv}")?;
        }
        w.flush()?;
        kernels.push(KernelSummary {
            rho: qk.rho(),
            dropped: qk.dropped().to_vec(),
            max_row_deviation: qk.max_row_deviation(),
            stationarity_residual: report.residual,
            start_cell: start,
            final_tv: report.decay.tv.last().copied().unwrap_or(f64::NAN),
            max_tv_increase: report.max_increase,
            chain_occupation_tv: occupation_distance(&chain, &sd.nu),
        });
    }
    let (mut leakage, mut occupation_tv) = (None, None);
    if cfg.system.kind.is_sde() {
        let q = q_sde_system(cfg, &factors)?;
        let dt = cfg.system.dt;
        let nu = nu_start(cfg, &factors)?;
        leakage = Some(m.stage("leakage", || {
            q_leakage(
                &q,
                &nu,
                cfg.qprocess.leakage_horizon,
                dt,
                cfg.qprocess.leakage_paths,
                cfg.qprocess.retries,
                Substream::new(cfg.seed, stream::LEAKAGE, Purpose::Path),
            )
        })?);
        let (grid, weights) = product_law(cfg, &factors, |f| &f.nu)?;
        let seed = Substream::new(cfg.seed, stream::OCCUPATION, Purpose::Path);
        let x0 = nu.sample(&mut seed.with_purpose(Purpose::Start).rng())?;
        let occ = m.stage("occupation", || {
            q_occupation(
                &q,
                &grid,
                &x0,
                cfg.qprocess.burn_in,
                cfg.qprocess.occupation_horizon,
                dt,
                cfg.qprocess.retries,
                seed,
            )
        })?;
        let hash = m.hash().to_owned();
        let mut w = m.create("occupation.csv")?;
        writeln!(w, "# config_hash={hash}")?;
        writeln!(w, "cell,occupation,nu")?;
        for (c, (o, n)) in occ.iter().zip(&weights).enumerate() {
            writeln!(w, "{c},{o},{n}")?;
        }
        w.flush()?;
        occupation_tv = Some(total_variation(&occ, &weights));
    }
    let summary = QProcessSummary {
        kernels,
        leakage,
        occupation_tv,
    };
    m.write_json("qprocess_summary.json", &summary)?;
    Ok((summary, m.finish()?))
}

fn spectral_for_lyapunov(cfg: &ExperimentConfig) -> Result<Vec<SpectralData>> {
    match cfg.system.kind {
        SystemKind::Linear => Ok(Vec::new()),
        SystemKind::Chain => Err(Error::InvalidArgument(
            "a finite chain has no tangent cocycle".into(),
        )),
        _ => load_spectral(cfg),
    }
}

/// One spectrum estimate along a Q-process path (or the frozen flow).
fn spectrum(cfg: &ExperimentConfig, factors: &[SpectralData], method: Method) -> Result<LyapunovReport> {
    let l = &cfg.lyapunov;
    let dt = time_step(cfg);
    let steps = (l.horizon / dt).round() as usize;
    let opts = QrOptions {
        k: l.k,
        period: reorth_period(cfg),
        batches: l.batches,
        burn_in: l.burn_in,
        frame: None,
    };
    match method {
        Method::Qr => qr_spectrum(q_stepper(cfg, factors, stream::QR)?.as_mut(), steps, &opts),
        Method::Wedge => wedge_spectrum(q_stepper(cfg, factors, stream::QR)?.as_mut(), steps, &opts),
        Method::Fk => {
            if !cfg.system.kind.is_sde() {
                return Err(Error::InvalidArgument(
                    "the FK average needs an h-transformed diffusion".into(),
                ));
            }
            let q = q_sde_system(cfg, factors)?;
            let seed = Substream::new(cfg.seed, stream::FK, Purpose::Path);
            let x0 = nu_start(cfg, factors)?.sample(&mut seed.with_purpose(Purpose::Start).rng())?;
            fk_lambda(
                &q,
                &x0,
                l.k.unwrap_or(cfg.dim()),
                dt,
                l.burn_in,
                l.horizon,
                &FkOptions {
                    batches: l.batches,
                    retries: cfg.qprocess.retries,
                    form: l.psi_form,
                    eta_floor: l.eta_floor,
                },
                seed,
            )
        }
        Method::Ftle => Err(Error::InvalidArgument(
            "finite-time exponents are a distribution; use the ftle command".into(),
        )),
    }
}

fn write_report(m: &mut RunManifest, report: &LyapunovReport) -> Result<()> {
    let name = report.method.name();
    let text = report.to_json()?;
    m.create(&format!("lyapunov_{name}.json"))?.write_all(text.as_bytes())?;
    let mut w = m.create(&format!("lyapunov_{name}.csv"))?;
    report.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Spectrum by QR, wedge growth or the FK average. The FTLE method
/// delegates to [`cmd_ftle`] and returns no report.
pub fn cmd_lyapunov(cfg: &ExperimentConfig, method: Method) -> Result<(Option<LyapunovReport>, RunManifest)> {
    if method == Method::Ftle {
        let (_, m) = cmd_ftle(cfg)?;
        return Ok((None, m));
    }
    let mut m = RunManifest::new(&format!("lyapunov_{}", method.name()), cfg);
    let factors = spectral_for_lyapunov(cfg)?;
    let report = m
        .stage(method.name(), || spectrum(cfg, &factors, method))?
        .with_config_hash(Some(m.hash()));
    report.check_invariants()?;
    write_report(&mut m, &report)?;
    Ok((Some(report), m.finish()?))
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonRow {
    pub k: usize,
    pub qr: Estimate,
    pub fk: Estimate,
    pub difference: f64,
    pub combined_std_error: f64,
    /// `|difference| ≤ 2 · combined_std_error`.
    pub agree: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FkComparison {
    pub rows: Vec<ComparisonRow>,
    pub agree: bool,
}

/// Agreement of two partial-sum estimates within `z` combined errors.
pub fn compare_partial_sums(qr: &LyapunovReport, fk: &LyapunovReport, z: f64) -> Result<FkComparison> {
    let k = qr.partial_sums.len().min(fk.partial_sums.len());
    let rows = (1..=k)
        .map(|j| {
            let (a, b) = (qr.partial_sum(j)?, fk.partial_sum(j)?);
            let combined = a.std_error.hypot(b.std_error);
            Ok(ComparisonRow {
                k: j,
                qr: a,
                fk: b,
                difference: b.mean - a.mean,
                combined_std_error: combined,
                agree: (b.mean - a.mean).abs() <= z * combined,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FkComparison {
        agree: rows.iter().all(|r| r.agree),
        rows,
    })
}

/// The FK average next to QR along independent Q-process paths, with
/// the agreement recorded in `comparison.json`.
pub fn cmd_fk(cfg: &ExperimentConfig) -> Result<(FkComparison, RunManifest)> {
    let mut m = RunManifest::new("fk", cfg);
    let factors = spectral_for_lyapunov(cfg)?;
    let hash = m.hash().to_owned();
    let qr = m.stage("qr", || spectrum(cfg, &factors, Method::Qr))?.with_config_hash(Some(&hash));
    let fk = m.stage("fk", || spectrum(cfg, &factors, Method::Fk))?.with_config_hash(Some(&hash));
    write_report(&mut m, &qr)?;
    write_report(&mut m, &fk)?;
    let cmp = compare_partial_sums(&qr, &fk, 2.0)?;
    m.write_json("comparison.json", &cmp)?;
    Ok((cmp, m.finish()?))
}

#[derive(Debug, Clone, Serialize)]
pub struct FtleSummary {
    pub k: usize,
    /// `λ^{(k)}` from QR along a Q-process path.
    pub reference: Estimate,
    pub epsilon: f64,
    pub launched: usize,
    pub rows: Vec<FtleRow>,
    pub exceedance: Vec<ExceedanceRow>,
}

/// Finite-time exponents of `k`-planes over survivors started from
/// `x ~ ν̂` with Haar (or standard) planes, and the exceedance of
/// `|λ^{(k)} − FTLE_t| > ε` against a QR reference.
pub fn cmd_ftle(cfg: &ExperimentConfig) -> Result<(FtleSummary, RunManifest)> {
    let mut m = RunManifest::new("ftle", cfg);
    if cfg.system.kind == SystemKind::Linear {
        return Err(Error::InvalidArgument("a frozen linear flow has no survivors to condition on".into()));
    }
    let factors = spectral_for_lyapunov(cfg)?;
    let l = &cfg.lyapunov;
    let k = l.k.unwrap_or(cfg.dim());
    let reference = m.stage("reference", || spectrum(cfg, &factors, Method::Qr))?.partial_sum(k)?;
    let frame = match l.frame {
        FrameKind::Haar => FrameChoice::Haar { k },
        FrameKind::Standard => FrameChoice::Fixed(GrassmannPoint::standard(cfg.dim(), k)?),
    };
    let dist = m.stage("ensemble", || {
        conditioned_ftle_distribution(
            &absorbed_system(cfg)?,
            &nu_start(cfg, &factors)?,
            &l.t_grid,
            l.ftle_paths,
            &frame,
            Substream::new(cfg.seed, stream::FTLE, Purpose::Path),
            Some(l.min_survivors),
        )
    })?;
    let exceedance = dist.exceedance(reference.mean, l.epsilon)?;
    let hash = m.hash().to_owned();
    let mut w = m.create("ftle_summary.csv")?;
    dist.write_summary_csv(&mut w, Some(&hash))?;
    w.flush()?;
    let mut w = m.create("ftle_histogram.csv")?;
    dist.write_histogram_csv(&mut w, l.histogram_bins, Some(&hash))?;
    w.flush()?;
    let mut w = m.create("ftle_exceedance.csv")?;
    writeln!(w, "# config_hash={hash} reference={} epsilon={}", reference.mean, l.epsilon)?;
    writeln!(w, "t,survivors,probability,std_error")?;
    for r in &exceedance {
        writeln!(w, "{},{},{},{}", r.t, r.survivors, r.probability, r.std_error)?;
    }
    w.flush()?;
    let summary = FtleSummary {
        k,
        reference,
        epsilon: l.epsilon,
        launched: dist.launched,
        rows: dist.rows,
        exceedance,
    };
    m.write_json("ftle.json", &summary)?;
    Ok((summary, m.finish()?))
}

/// Oseledets structure from the singular vectors of the tangent flow at
/// half the horizon and the full horizon.
pub fn cmd_oseledets(cfg: &ExperimentConfig) -> Result<(OseledetsEstimate, RunManifest)> {
    let mut m = RunManifest::new("oseledets", cfg);
    let factors = spectral_for_lyapunov(cfg)?;
    let l = &cfg.lyapunov;
    let est = m.stage("oseledets", || {
        oseledets_estimate(
            q_stepper(cfg, &factors, stream::OSELEDETS)?.as_mut(),
            &[0.5 * l.horizon, l.horizon],
            &OseledetsOptions {
                gap: l.gap,
                period: reorth_period(cfg),
            },
        )
    })?;
    let hash = m.hash().to_owned();
    let mut w = m.create("oseledets_rates.csv")?;
    writeln!(w, "# config_hash={hash}")?;
    writeln!(w, "t,i,rate")?;
    for snap in &est.history {
        for (i, r) in snap.rates.iter().enumerate() {
            writeln!(w, "{},{},{r}", snap.t, i + 1)?;
        }
    }
    w.flush()?;
    m.write_json("oseledets.json", &est)?;
    Ok((est, m.finish()?))
}
