//! Learned cooperative localization for vehicular networks.
//!
//! The crate is organised bottom-up:
//!
//! - [`world`]: grid road networks, synthetic mobility traces and the trace CSV format.
//! - [`sensing`]: internal (GNSS-like) and external (range/bearing) measurements,
//!   measurement/communication graphs and training episodes.
//! - [`tensorcore`]: a small dense-network kernel with a reverse-mode tape and Adam.
//! - [`mlcl`]: the four-unit recurrent message-passing localizer and its training loop.
//! - [`baselines`]: naive, centralized EKF, windowed maximum likelihood and GCN estimators.
//! - [`harness`]: configuration, dataset generation, experiments and result tables.

pub mod baselines;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod mlcl;
pub mod rng;
pub mod sensing;
pub mod tensorcore;
pub mod world;

pub use error::{Error, Result};
pub use geometry::Point2;
pub use mlcl::{MlclDims, MlclModel, MlclParams, RolloutRecord, TrainConfig};
pub use harness::{ExperimentConfig, ResultRow, ResultTable, Scheme};
pub use sensing::{DomainGraphs, Episode, ExternalMeasurement, InternalMeasurement, NoiseConfig};
pub use tensorcore::Tensor;
pub use world::{RoadNetwork, TraceSet};

// Rollouts allocate and free many large row buffers per step; the system
// allocator returns them to the OS each time.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;
