//! Synthetic non-IID data and the objectives `f(x) = (1/n) Σ f_i(x)` trained on it.

mod dataset;
mod objective;

pub use dataset::{make_synthetic_dataset, Dataset, DatasetSpec, Partition, Shard};
pub use objective::{measure_heterogeneity, Objective, ObjectiveKind};
