use std::path::PathBuf;
use std::sync::Arc;

use nalgebra::DMatrix;

use super::config::{ExperimentConfig, SystemKind};
use crate::dynamics::{
    builtin, AbsorbedSystem, DiscreteSystem, EtaField, FiniteChain, FrozenCocycle,
    ProductEta, Purpose, SdeSystem, Stepper, Substream,
};
use crate::qprocess::q_process_system;
use crate::spectral::{
    build_ulam_operator, solve_qsd_with, EtaBoundary, GridEta, SolverOptions, SpectralData,
    StartLaw, SubstochasticMatrix, UlamGrid,
};
use crate::{Error, Result};

/// Sub-stream indices of the experiment stages under one seed root.
pub(crate) mod stream {
    pub const ULAM: u64 = 0;
    pub const SURVIVAL: u64 = 100;
    pub const LEAKAGE: u64 = 200;
    pub const OCCUPATION: u64 = 300;
    pub const CHAIN: u64 = 400;
    pub const QR: u64 = 500;
    pub const FK: u64 = 600;
    pub const FTLE: u64 = 700;
    pub const OSELEDETS: u64 = 800;
}

pub fn sde_system(cfg: &ExperimentConfig) -> Result<SdeSystem> {
    let s = &cfg.system;
    match s.kind {
        SystemKind::DoubleWell => builtin::double_well(&s.sigmas, s.half_width),
        SystemKind::CoupledDoubleWell => {
            builtin::coupled_double_well(s.sigmas[0], s.coupling, s.half_width)
        }
        _ => Err(Error::InvalidArgument(format!("{:?} is not a diffusion", s.kind))),
    }
}

fn chain(cfg: &ExperimentConfig) -> Result<FiniteChain> {
    FiniteChain::new(&cfg.system.matrix)
}

/// The absorbed system of the config with its time step.
pub fn absorbed_system(cfg: &ExperimentConfig) -> Result<AbsorbedSystem> {
    let s = &cfg.system;
    match s.kind {
        SystemKind::DoubleWell | SystemKind::CoupledDoubleWell => {
            AbsorbedSystem::sde(sde_system(cfg)?, s.dt)
        }
        SystemKind::NoisyLogistic => Ok(AbsorbedSystem::Discrete(builtin::noisy_logistic(
            s.r,
            s.noise_half_width,
        )?)),
        SystemKind::Chain => {
            let c = chain(cfg)?;
            Ok(AbsorbedSystem::Discrete(DiscreteSystem::new(c.domain(), Arc::new(c))?))
        }
        SystemKind::Linear => Err(Error::InvalidArgument(
            "a frozen linear flow has no absorbing domain".into(),
        )),
    }
}

/// `exp(A dt)` repeated: its exponents are the real parts of the
/// eigenvalues of `A`.
pub fn linear_cocycle(cfg: &ExperimentConfig) -> Result<FrozenCocycle> {
    let m = &cfg.system.matrix;
    let d = m.len();
    let a = DMatrix::from_fn(d, d, |r, c| m[r][c]);
    Ok(FrozenCocycle::new((a * cfg.system.dt).exp(), cfg.system.dt))
}

/// Location of spectral factor `j` in the output directory.
pub fn spectral_path(cfg: &ExperimentConfig, j: usize) -> PathBuf {
    cfg.output.join(format!("spectral_{j}.json"))
}

pub fn factor_count(cfg: &ExperimentConfig) -> usize {
    if cfg.factorised() {
        cfg.dim()
    } else {
        1
    }
}

/// The system whose Ulam matrix is factor `j`.
fn factor_system(cfg: &ExperimentConfig, j: usize) -> Result<AbsorbedSystem> {
    if cfg.factorised() {
        let s = &cfg.system;
        AbsorbedSystem::sde(builtin::double_well(&[s.sigmas[j]], s.half_width)?, s.dt)
    } else {
        absorbed_system(cfg)
    }
}

fn solver(cfg: &ExperimentConfig) -> SolverOptions {
    SolverOptions {
        tol: cfg.grid.solver_tolerance,
        ..SolverOptions::default()
    }
}

/// Ulam matrices and their quasi-stationary objects: one factor per axis
/// for uncoupled double wells, a single one otherwise. Chains use their
/// matrix as given, one cell per state.
pub fn compute_spectral(cfg: &ExperimentConfig) -> Result<Vec<SpectralData>> {
    if cfg.system.kind == SystemKind::Chain {
        let m = &cfg.system.matrix;
        let n = m.len();
        let p = SubstochasticMatrix::from_dense(&DMatrix::from_fn(n, n, |r, c| m[r][c]), 1.0)?;
        let grid = UlamGrid::uniform(chain(cfg)?.domain(), n)?;
        return Ok(vec![solve_qsd_with(&p, &solver(cfg))?.with_grid(grid)?]);
    }
    (0..factor_count(cfg))
        .map(|j| {
            let sys = factor_system(cfg, j)?;
            let grid = UlamGrid::uniform(sys.domain().clone(), cfg.grid.cells)?;
            let p = build_ulam_operator(
                &sys,
                &grid,
                cfg.grid.samples_per_cell,
                cfg.grid.operator_horizon,
                Substream::new(cfg.seed, stream::ULAM + j as u64, Purpose::Ulam),
            )?;
            solve_qsd_with(&p, &solver(cfg))?.with_grid(grid)
        })
        .collect()
}

/// Spectral factors written by `qsd`, checked against the config grid.
pub fn load_spectral(cfg: &ExperimentConfig) -> Result<Vec<SpectralData>> {
    (0..factor_count(cfg))
        .map(|j| {
            let path = spectral_path(cfg, j);
            if !path.exists() {
                return Err(Error::MissingSpectralData(format!(
                    "{} not found; run the qsd command first",
                    path.display()
                )));
            }
            let (sd, _) = SpectralData::load(&path)?;
            let want = match cfg.system.kind {
                SystemKind::Chain => cfg.system.matrix.len(),
                _ if cfg.factorised() => cfg.grid.cells,
                _ => cfg.grid.cells.pow(cfg.dim() as u32),
            };
            let cells = sd.grid()?.counts().iter().product::<usize>();
            if cells != want {
                return Err(Error::GridMismatch(format!(
                    "{} has {cells} cells, the config asks for {want}",
                    path.display()
                )));
            }
            Ok(sd)
        })
        .collect()
}

/// Total escape rate: factors of an uncoupled system add up.
pub fn total_beta(factors: &[SpectralData]) -> f64 {
    factors.iter().map(|f| f.beta).sum()
}

/// The full grid and a cell law on it built from per-factor laws.
pub fn product_law(
    cfg: &ExperimentConfig,
    factors: &[SpectralData],
    law: impl Fn(&SpectralData) -> &[f64],
) -> Result<(UlamGrid, Vec<f64>)> {
    if factors.len() == 1 {
        return Ok((factors[0].grid()?.clone(), law(&factors[0]).to_vec()));
    }
    let domain = absorbed_system(cfg)?.domain().clone();
    let grid = UlamGrid::uniform(domain, cfg.grid.cells)?;
    let weights = (0..grid.len())
        .map(|c| {
            grid.multi_index(grid.flat_index(c))
                .iter()
                .zip(factors)
                .map(|(&i, f)| law(f)[i])
                .product()
        })
        .collect();
    Ok((grid, weights))
}

pub fn nu_start(cfg: &ExperimentConfig, factors: &[SpectralData]) -> Result<StartLaw> {
    let (grid, w) = product_law(cfg, factors, |f| &f.nu)?;
    StartLaw::cells(&grid, &w)
}

pub fn mu_start(cfg: &ExperimentConfig, factors: &[SpectralData]) -> Result<StartLaw> {
    let (grid, w) = product_law(cfg, factors, |f| &f.mu)?;
    StartLaw::cells(&grid, &w)
}

/// The diffusion h-transformed by the interpolated η̂ (a product of the
/// factor eigenfunctions when factorised).
pub fn q_sde_system(cfg: &ExperimentConfig, factors: &[SpectralData]) -> Result<SdeSystem> {
    let base = sde_system(cfg)?;
    if factors.len() == 1 {
        return q_process_system(&base, &factors[0]);
    }
    let etas = factors
        .iter()
        .map(|f| Ok(Arc::new(GridEta::from_spectral(f)?) as Arc<dyn EtaField>))
        .collect::<Result<Vec<_>>>()?;
    crate::dynamics::doob_drift(&base, Arc::new(ProductEta::new(etas)?))
}

/// A random map h-transformed by the interpolated η̂, held at its edge
/// values up to the domain boundary.
pub fn q_discrete_system(cfg: &ExperimentConfig, sd: &SpectralData) -> Result<DiscreteSystem> {
    let AbsorbedSystem::Discrete(sys) = absorbed_system(cfg)? else {
        return Err(Error::InvalidArgument("not a random map".into()));
    };
    let eta = GridEta::new(sd.grid()?, &sd.eta, EtaBoundary::Clamped)?;
    let max = eta.max_value();
    sys.with_h_transform(Arc::new(eta), max)
}

/// A Q-process path started from ν̂ that resamples leaking steps, or the
/// frozen flow for linear configs.
pub fn q_stepper(
    cfg: &ExperimentConfig,
    factors: &[SpectralData],
    index: u64,
) -> Result<Box<dyn Stepper>> {
    if cfg.system.kind == SystemKind::Linear {
        return Ok(Box::new(linear_cocycle(cfg)?));
    }
    let seed = Substream::new(cfg.seed, index, Purpose::Path);
    let x0 = nu_start(cfg, factors)?.sample(&mut seed.with_purpose(Purpose::Start).rng())?;
    match cfg.system.kind {
        SystemKind::DoubleWell | SystemKind::CoupledDoubleWell => Ok(Box::new(
            q_sde_system(cfg, factors)?
                .stepper(&x0, cfg.system.dt, seed)?
                .with_leak_resampling(cfg.qprocess.retries)?,
        )),
        SystemKind::NoisyLogistic => Ok(Box::new(q_discrete_system(cfg, &factors[0])?.stepper(&x0, seed)?)),
        SystemKind::Chain | SystemKind::Linear => Err(Error::InvalidArgument(
            "a finite chain has no tangent cocycle".into(),
        )),
    }
}

/// Default re-orthonormalisation period of the config's system.
pub fn reorth_period(cfg: &ExperimentConfig) -> usize {
    cfg.lyapunov.period.unwrap_or(match cfg.system.kind {
        SystemKind::NoisyLogistic | SystemKind::Chain => 5,
        _ => 1,
    })
}

/// Time step of the config's stepper.
pub fn time_step(cfg: &ExperimentConfig) -> f64 {
    match cfg.system.kind {
        SystemKind::NoisyLogistic | SystemKind::Chain => 1.0,
        _ => cfg.system.dt,
    }
}
