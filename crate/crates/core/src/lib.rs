//! Secure state estimation for discrete-time nonlinear plants whose sensors
//! may be attacked.
//!
//! A bank of observers is built over sensor subsets, one for every subset
//! `J` of `p - q` sensors and every subset `S` of `p - 2q` sensors. At each
//! step the estimator picks the `J` whose estimate agrees best with the
//! estimates of the subsets it contains. Thresholds on that disagreement,
//! voted over windows, isolate the attacked sensors.

pub mod combinatorics;
pub mod config;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod isolation;
pub mod model;
pub mod observers;

pub use error::{Error, Result};

/// Directory holding the bundled example scenarios.
pub fn scenario_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}
