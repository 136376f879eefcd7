//! Numerical toolkit for absorbed random dynamical systems.
//!
//! The crate estimates quasi-stationary and quasi-ergodic measures of killed
//! diffusions and iterated maps on a grid, builds the process conditioned on
//! never being absorbed (the Q-process, a Doob h-transform), and computes the
//! conditioned Lyapunov spectrum along Q-process paths by several independent
//! routes: QR propagation of the tangent cocycle, wedge-norm growth, and
//! Furstenberg–Khasminskii ergodic averages.
//!
//! Modules are layered bottom-up:
//!
//! * [`dynamics`]: systems, sample paths with absorption, tangent cocycles.
//! * [`spectral`]: Ulam discretisation and the survival rate, QSD, η, QED.
//! * [`qprocess`]: h-transformed kernels, Doob-drifted SDEs, survivor ensembles.
//! * [`lyapunov`]: spectra, finite-time exponents, Oseledets structure.
//! * [`harness`]: configuration, CLI commands and the validation suite.

pub mod dynamics;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod lyapunov;
pub mod qprocess;
pub mod spectral;
pub mod stats;

pub use error::{Error, Result};
