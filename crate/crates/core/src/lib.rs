//! Collaborative road profile estimation.
//!
//! Heterogeneous simulated vehicles estimate the road elevation under their
//! wheels with an augmented Kalman filter. A cloud component aggregates the
//! smoothed estimates from every vehicle that has driven the segment into a
//! Gaussian process (optionally the noisy-input variant, which accounts for
//! GPS error in the training positions) and hands the regression back to the
//! next vehicle as an extra "pseudo-measurement" of the road state.
//!
//! Module map:
//!
//! * [`vehicle`] quarter-car dynamics, road model, augmentation and discretization
//! * [`road`] ground-truth road synthesis and sensor corruption
//! * [`estimation`] Kalman filter, RTS and fixed-lag smoothers
//! * [`gp`] exact GP / NIGP regression
//! * [`cloud`] the crowdsourcing loop state
//! * [`evaluation`] metrics, baselines and the MMSE oracle
//! * [`simulation`] scenarios and the end-to-end loop
//! * [`cli`] configuration and command implementations behind the binary

pub mod cli;
pub mod cloud;
pub mod error;
pub mod estimation;
pub mod evaluation;
pub mod gp;
pub mod io;
pub mod linalg;
pub mod rng;
pub mod road;
pub mod simulation;
pub mod vehicle;

pub use error::{Error, Result};

/// Version string recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
