//! Kalman-filter state estimation with χ² bad-data detection, and diagnosis
//! of whether an alarm comes from manipulated measurements or from a wrong
//! system model.
//!
//! The pipeline is `model → scenario → estimator → detector → diagnosis`,
//! driven end to end by [`harness`].

mod csvutil;
pub mod decomposition;
pub mod detector;
pub mod diagnosis;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod scenario;
pub mod textfmt;

pub use error::{Error, Result};
