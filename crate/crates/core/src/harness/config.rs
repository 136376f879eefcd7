use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::lyapunov::{PsiForm, DEFAULT_GAP};
use crate::qprocess::DEFAULT_TV_STEPS;
use crate::spectral::sha256_hex;
use crate::{Error, Result};

/// Config format version understood by this build.
pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    /// Uncoupled double wells, one per entry of `sigmas`.
    DoubleWell,
    /// Two diffusively coupled double wells with noise `sigmas[0]`.
    CoupledDoubleWell,
    NoisyLogistic,
    /// A killed finite chain with sub-stochastic `matrix`.
    Chain,
    /// The frozen flow `exp(A t)` of `matrix`; no absorption.
    Linear,
}

impl SystemKind {
    pub fn is_sde(self) -> bool {
        matches!(self, Self::DoubleWell | Self::CoupledDoubleWell)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameKind {
    Haar,
    Standard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemConfig {
    pub kind: SystemKind,
    pub sigmas: Vec<f64>,
    pub half_width: f64,
    pub coupling: f64,
    pub r: f64,
    pub noise_half_width: f64,
    pub matrix: Vec<Vec<f64>>,
    /// SDE time step (ignored by discrete systems).
    pub dt: f64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            kind: SystemKind::DoubleWell,
            sigmas: vec![0.5],
            half_width: 1.5,
            coupling: 0.3,
            r: 3.8,
            noise_half_width: 0.05,
            matrix: Vec::new(),
            dt: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// Cells per axis.
    pub cells: usize,
    pub samples_per_cell: usize,
    /// Time `Δ_op` covered by one application of the Ulam matrix.
    pub operator_horizon: f64,
    pub solver_tolerance: f64,
    /// Build one-dimensional factors for uncoupled double wells.
    pub factorise: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            cells: 79,
            samples_per_cell: 500,
            operator_horizon: 0.5,
            solver_tolerance: 1e-10,
            factorise: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurvivalConfig {
    /// Monte-Carlo paths for the survival-rate cross-check (0 skips it).
    pub paths: usize,
    /// Times used in the `log P(τ > t)` fit.
    pub fit_times: Vec<f64>,
    /// Ulam steps at which the TV decay towards µ̂ is recorded.
    pub tv_steps: Vec<usize>,
}

impl Default for SurvivalConfig {
    fn default() -> Self {
        Self {
            paths: 20_000,
            fit_times: vec![2.0, 4.0, 6.0, 8.0, 10.0],
            tv_steps: DEFAULT_TV_STEPS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QProcessConfig {
    /// Redraws allowed for a step that would leave η's support.
    pub retries: usize,
    pub leakage_paths: usize,
    pub leakage_horizon: f64,
    pub occupation_horizon: f64,
    pub burn_in: f64,
    pub chain_steps: usize,
}

impl Default for QProcessConfig {
    fn default() -> Self {
        Self {
            retries: 100,
            leakage_paths: 1000,
            leakage_horizon: 10.0,
            occupation_horizon: 1000.0,
            burn_in: 10.0,
            chain_steps: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LyapunovConfig {
    pub horizon: f64,
    pub burn_in: f64,
    pub batches: usize,
    /// Number of exponents; defaults to the dimension.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    /// Steps between re-orthonormalisations; defaults per system.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub period: Option<usize>,
    pub gap: f64,
    pub psi_form: PsiForm,
    pub eta_floor: f64,
    /// Horizons of the finite-time distributions.
    pub t_grid: Vec<f64>,
    pub ftle_paths: usize,
    pub min_survivors: usize,
    pub epsilon: f64,
    pub frame: FrameKind,
    pub histogram_bins: usize,
}

impl Default for LyapunovConfig {
    fn default() -> Self {
        Self {
            horizon: 1e4,
            burn_in: 10.0,
            batches: 20,
            k: None,
            period: None,
            gap: DEFAULT_GAP,
            psi_form: PsiForm::Stratonovich,
            eta_floor: 0.0,
            t_grid: vec![2.0, 5.0, 10.0, 20.0],
            ftle_paths: 3000,
            min_survivors: 500,
            epsilon: 0.1,
            frame: FrameKind::Haar,
            histogram_bins: 40,
        }
    }
}

/// One experiment: the system, its discretisation, ensemble sizes,
/// horizons, the seed root and the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub output: PathBuf,
    pub system: SystemConfig,
    pub grid: GridConfig,
    pub survival: SurvivalConfig,
    pub qprocess: QProcessConfig,
    pub lyapunov: LyapunovConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 1,
            output: PathBuf::from("out"),
            system: SystemConfig::default(),
            grid: GridConfig::default(),
            survival: SurvivalConfig::default(),
            qprocess: QProcessConfig::default(),
            lyapunov: LyapunovConfig::default(),
        }
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be positive and finite, got {v}")))
    }
}

fn non_negative(field: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be non-negative and finite, got {v}")))
    }
}

fn at_least(field: &str, v: usize, min: usize) -> Result<()> {
    if v >= min {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be at least {min}, got {v}")))
    }
}

fn increasing(field: &str, v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::config(field, "must not be empty"));
    }
    for (j, &t) in v.iter().enumerate() {
        positive(&format!("{field}[{j}]"), t)?;
    }
    if v.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config(field, "must be strictly increasing"));
    }
    Ok(())
}

fn square(field: &str, m: &[Vec<f64>]) -> Result<()> {
    if m.is_empty() {
        return Err(Error::config(field, "must be a non-empty square matrix"));
    }
    for (i, row) in m.iter().enumerate() {
        if row.len() != m.len() {
            return Err(Error::config(
                format!("{field}[{i}]"),
                format!("has {} entries, expected {}", row.len(), m.len()),
            ));
        }
        if let Some(v) = row.iter().find(|v| !v.is_finite()) {
            return Err(Error::config(format!("{field}[{i}]"), format!("contains {v}")));
        }
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let field = e
                .message()
                .split('`')
                .nth(1)
                .map(str::to_owned)
                .unwrap_or_else(|| "document".into());
            Error::config(field, e.message().trim().to_owned())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    /// SHA-256 of the canonical JSON form, output directory excluded;
    /// embedded in every output.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output = PathBuf::new();
        sha256_hex(&serde_json::to_vec(&canonical).expect("config serialises"))
    }

    /// Number of state variables.
    pub fn dim(&self) -> usize {
        match self.system.kind {
            SystemKind::DoubleWell => self.system.sigmas.len(),
            SystemKind::CoupledDoubleWell => 2,
            SystemKind::NoisyLogistic | SystemKind::Chain => 1,
            SystemKind::Linear => self.system.matrix.len(),
        }
    }

    /// The Ulam problem splits into one-dimensional factors.
    pub fn factorised(&self) -> bool {
        self.system.kind == SystemKind::DoubleWell && self.grid.factorise && self.dim() > 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(
                "version",
                format!("unsupported version {}, expected {CONFIG_VERSION}", self.version),
            ));
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::config("seed", "must fit a TOML integer (at most 2^63 - 1)"));
        }
        let s = &self.system;
        match s.kind {
            SystemKind::DoubleWell | SystemKind::CoupledDoubleWell => {
                if s.sigmas.is_empty() {
                    return Err(Error::config("system.sigmas", "must not be empty"));
                }
                for (j, &v) in s.sigmas.iter().enumerate() {
                    positive(&format!("system.sigmas[{j}]"), v)?;
                }
                positive("system.half_width", s.half_width)?;
                positive("system.dt", s.dt)?;
                if s.kind == SystemKind::CoupledDoubleWell {
                    non_negative("system.coupling", s.coupling)?;
                }
            }
            SystemKind::NoisyLogistic => {
                positive("system.r", s.r)?;
                positive("system.noise_half_width", s.noise_half_width)?;
            }
            SystemKind::Chain => {
                square("system.matrix", &s.matrix)?;
                for (i, row) in s.matrix.iter().enumerate() {
                    if row.iter().any(|&v| v < 0.0) || row.iter().sum::<f64>() > 1.0 + 1e-12 {
                        return Err(Error::config(
                            format!("system.matrix[{i}]"),
                            "rows must be non-negative with sum at most 1",
                        ));
                    }
                }
            }
            SystemKind::Linear => {
                square("system.matrix", &s.matrix)?;
                positive("system.dt", s.dt)?;
            }
        }
        let g = &self.grid;
        at_least("grid.cells", g.cells, 2)?;
        at_least("grid.samples_per_cell", g.samples_per_cell, 1)?;
        positive("grid.operator_horizon", g.operator_horizon)?;
        positive("grid.solver_tolerance", g.solver_tolerance)?;
        if s.kind.is_sde() {
            let ratio = g.operator_horizon / s.dt;
            if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
                return Err(Error::config(
                    "grid.operator_horizon",
                    format!("must be a multiple of system.dt = {}", s.dt),
                ));
            }
        }
        let sv = &self.survival;
        if sv.paths != 0 {
            at_least("survival.paths", sv.paths, 100)?;
        }
        increasing("survival.fit_times", &sv.fit_times)?;
        if sv.fit_times.len() < 2 {
            return Err(Error::config("survival.fit_times", "needs at least two times"));
        }
        if sv.tv_steps.is_empty() || sv.tv_steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("survival.tv_steps", "must be non-empty and strictly increasing"));
        }
        let q = &self.qprocess;
        at_least("qprocess.leakage_paths", q.leakage_paths, 1)?;
        positive("qprocess.leakage_horizon", q.leakage_horizon)?;
        positive("qprocess.occupation_horizon", q.occupation_horizon)?;
        non_negative("qprocess.burn_in", q.burn_in)?;
        at_least("qprocess.chain_steps", q.chain_steps, 1)?;
        let l = &self.lyapunov;
        positive("lyapunov.horizon", l.horizon)?;
        non_negative("lyapunov.burn_in", l.burn_in)?;
        at_least("lyapunov.batches", l.batches, crate::lyapunov::MIN_BATCHES)?;
        if let Some(k) = l.k {
            if k == 0 || k > self.dim() {
                return Err(Error::config("lyapunov.k", format!("must lie in 1..={}", self.dim())));
            }
        }
        if let Some(p) = l.period {
            at_least("lyapunov.period", p, 1)?;
        }
        positive("lyapunov.gap", l.gap)?;
        non_negative("lyapunov.eta_floor", l.eta_floor)?;
        increasing("lyapunov.t_grid", &l.t_grid)?;
        at_least("lyapunov.ftle_paths", l.ftle_paths, 1)?;
        at_least("lyapunov.min_survivors", l.min_survivors, 1)?;
        positive("lyapunov.epsilon", l.epsilon)?;
        at_least("lyapunov.histogram_bins", l.histogram_bins, 1)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
        let mut moved = cfg.clone();
        moved.output = PathBuf::from("elsewhere");
        assert_eq!(moved.hash(), cfg.hash());
    }

    #[test]
    fn partial_documents_take_defaults() {
        let cfg = ExperimentConfig::from_toml("version = 1\n[system]\nsigmas = [0.7, 0.3]\n").unwrap();
        assert_eq!(cfg.dim(), 2);
        assert!(cfg.factorised());
        assert_eq!(cfg.grid, GridConfig::default());
    }

    #[test]
    fn negative_sigma_names_the_field() {
        let err = ExperimentConfig::from_toml("[system]\nsigmas = [0.5, -0.1]\n").unwrap_err();
        match err {
            Error::Config { field, .. } => assert_eq!(field, "system.sigmas[1]"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("[grid]\ncels = 40\n").unwrap_err();
        match err {
            Error::Config { field, .. } => assert_eq!(field, "cels"),
            e => panic!("{e}"),
        }
        assert!(ExperimentConfig::from_toml("versio = 1\n").is_err());
    }

    #[test]
    fn ordering_and_version_checks() {
        let bad = [
            "version = 2\n",
            "[lyapunov]\nt_grid = [5.0, 2.0]\n",
            "[grid]\noperator_horizon = 0.0005\n",
            "[system]\nkind = \"chain\"\nmatrix = [[0.5, 0.6], [0.1, 0.1]]\n",
            "[system]\nkind = \"linear\"\nmatrix = [[1.0, 0.0]]\n",
            "[lyapunov]\nbatches = 3\n",
        ];
        for doc in bad {
            assert!(matches!(ExperimentConfig::from_toml(doc), Err(Error::Config { .. })), "{doc}");
        }
        let chain = "[system]\nkind = \"chain\"\nmatrix = [[0.5, 0.25], [0.25, 0.5]]\n";
        assert_eq!(ExperimentConfig::from_toml(chain).unwrap().dim(), 1);
    }
}
