//! Configuration, experiment wiring, CLI commands and the validation suite.

mod commands;
mod config;
pub mod criteria;
mod experiment;
mod manifest;

pub use commands::{
    cmd_fk, cmd_ftle, cmd_lyapunov, cmd_oseledets, cmd_qprocess, cmd_qsd, compare_partial_sums,
    describe, ComparisonRow, FactorSummary, FkComparison, FtleSummary, KernelSummary,
    QProcessSummary, QsdSummary, SurvivalCheck,
};
pub use config::{
    ExperimentConfig, FrameKind, GridConfig, LyapunovConfig, QProcessConfig, SurvivalConfig,
    SystemConfig, SystemKind, CONFIG_VERSION,
};
pub use criteria::{run_suite, Context, CriterionResult, Suite};
pub use experiment::{
    absorbed_system, compute_spectral, linear_cocycle, load_spectral, q_sde_system, sde_system,
    spectral_path,
};
pub use manifest::{RunManifest, StageTiming};

use crate::Error;

/// Process exit code for a validation failure.
pub const EXIT_VALIDATION: i32 = 2;

/// Process exit code for `err`: 3 for config errors, 4 for too few
/// survivors, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } => 3,
        Error::InsufficientSurvivors { .. } => 4,
        _ => 1,
    }
}
