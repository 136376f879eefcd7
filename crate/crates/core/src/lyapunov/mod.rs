//! Conditioned Lyapunov spectra: QR propagation along Q-process paths,
//! wedge-norm growth, finite-time exponents over survivor ensembles,
//! Oseledets structure and Furstenberg–Khasminskii averages.

mod fk;
mod ftle;
mod grassmann;
mod oseledets;
mod qr;
mod report;
mod wedge;

pub use fk::{fk_lambda, fk_phi, fk_psi, FkOptions, PsiForm};
pub use ftle::{
    conditioned_ftle_distribution, singular_value_ftle, singular_value_ftles, ExceedanceRow,
    FrameChoice, FtleDistribution, FtleRow,
};
pub use grassmann::{haar_grassmann_sample, GrassmannPoint, FRAME_TOLERANCE};
pub use oseledets::{
    cluster_rates, oseledets_estimate, OseledetsEstimate, OseledetsOptions, RateSnapshot,
    DEFAULT_GAP, NESTING_TOLERANCE,
};
pub use qr::{
    exactness_chain, liouville_check, q_process_spectrum, qr_spectrum, ExactnessReport,
    LiouvilleCheck, QrOptions,
};
pub use report::{LyapunovReport, Method, MIN_BATCHES};
pub use wedge::{gram_log_volume, wedge_bracket, wedge_log_norm, wedge_spectrum, WedgeBracket};
