//! Ulam discretisation of the killed transfer operator and its
//! quasi-stationary objects: survival rate β, quasi-stationary law µ,
//! eigenfunction η and quasi-ergodic law ν = ηµ.

mod eta;
mod grid;
mod io;
mod matrix;
mod solve;
mod survival;

pub use eta::{CellEta, EtaBoundary, GradientRule, GridEta};
pub use grid::{GridSpec, UlamGrid};
pub use io::{sha256_hex, SPECTRAL_FORMAT_VERSION};
pub use matrix::{build_ulam_operator, SubstochasticMatrix, ROW_SUM_SLACK};
pub use solve::{quasi_ergodic, solve_qsd, solve_qsd_with, SolverOptions, SpectralData};
pub use survival::{
    estimate_survival_rate, point_mass, total_variation, tv_decay_diagnostic, uniform_in_cell,
    StartLaw, SurvivalFit, TvDecay, MIN_SURVIVORS,
};
pub(crate) use survival::tv_decay_towards;
