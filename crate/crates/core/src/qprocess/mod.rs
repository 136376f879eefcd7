//! The Q-process (the process conditioned never to be absorbed): the
//! discrete h-transform of an Ulam matrix, Doob-drifted SDE paths,
//! survivor ensembles and the transfer between conditioned and Q-laws.

mod ensemble;
mod kernel;
mod sde;

pub use ensemble::{
    conditioned_ensemble, conditioned_ensemble_with, q_expectation_reweighted, running_average,
    transfer_check, EnsembleOptions, SurvivorEnsemble, TransferRow, TransferTable,
};
pub use kernel::{
    build_q_kernel, build_q_kernel_with, check_q_stationarity, h_transform, occupation,
    occupation_distance, sample_q_chain, EtaFloorPolicy, QKernel, StationarityReport,
    DEFAULT_TV_STEPS, ETA_FLOOR, MIXING_TV,
};
pub use sde::{q_leakage, q_occupation, q_process_system, sample_q_sde, LeakageReport};

#[cfg(test)]
mod tests;
