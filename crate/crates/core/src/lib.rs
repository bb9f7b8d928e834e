//! Interacting particle approximations of doubly mean-reflected BSDEs.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`]: problem instances (grid, obstacles, loss, driver, terminal).
//! * [`paths`]: reproducible Brownian particle ensembles.
//! * [`meanshift`]: monotone root equations for all shift quantities.
//! * [`condexp`]: conditional-expectation estimators.
//! * [`drbsde`]: discrete doubly reflected backward recursions.
//! * [`particle`]: the particle solvers (linear and nonlinear reflection).
//! * [`reference`]: exact coupled limit solutions for the affine class.
//! * [`poc`]: propagation-of-chaos error metrics and rate fitting.
//! * [`cli`]: configuration and command drivers behind the `mrbsde` binary.

pub mod cli;
pub mod condexp;
pub mod drbsde;
mod error;
pub mod meanshift;
pub mod model;
pub mod particle;
pub mod paths;
pub mod poc;
pub mod reference;

pub use error::{Error, Result};

/// Artifact version stamped into every output header.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
