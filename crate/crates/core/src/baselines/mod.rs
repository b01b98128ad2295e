//! Comparison estimators.
//!
//! The no-cooperation scheme is the localizer with communication disabled, see
//! [`crate::mlcl::MlclModel`].

pub mod ekf;
pub mod gcn;
pub mod mle;

pub use ekf::{ekf_predict, ekf_run, ekf_update, EkfState};
pub use gcn::{gcn_forward, GcnModel, GcnParams};
pub use mle::{mle_window, MleOptions, MleProblem, MleSolution};

use crate::geometry::Point2;
use crate::sensing::Episode;

/// Each vehicle's own internal fix, `[t][vehicle]`.
pub fn naive_estimate(episode: &Episode) -> Vec<Vec<Point2>> {
    episode.steps.iter().map(|s| s.internal.clone()).collect()
}
