//! Deterministic simulator for asynchronous federated learning with biased
//! gradient compression and error feedback.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: synthetic non-IID datasets and differentiable objectives
//! - [`compress`]: Top-k, sign, QSGD and composed compressors with exact bit costs
//! - [`ef`]: per-client error-feedback accumulators
//! - [`sched`]: timing-driven participation traces and delay statistics
//! - [`engine`]: the unified AsynFL / AsynFLC / AsynFLC-EF training loop
//! - [`metrics`]: per-round measurements, cost accounting and result files
//! - [`cli`]: the `asyncfl` command-line front end
//!
//! Every source of randomness is derived from one master seed through
//! [`rng::substream`], so a run is a pure function of its configuration.

pub mod cli;
pub mod compress;
pub mod config;
pub mod ef;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod sched;

pub use error::{Error, Result};
pub use params::ParamVector;
