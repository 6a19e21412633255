//! Deterministic federated-learning simulator and the Holistic Evaluation
//! Metric (HEM) toolkit.
//!
//! Typical flow: [`config::ExperimentConfig`] describes the dataset, the
//! client partition and the algorithm set; [`pipeline::run_suite`] simulates
//! every algorithm under every seed; [`report::ReportFile`] holds the raw
//! measurements, the component indices and the HEM scores.

pub mod algorithms;
pub mod config;
pub mod data;
mod error;
pub mod fedsim;
pub mod hem;
pub mod metrics;
pub mod model;
pub mod personalization;
pub mod pipeline;
pub mod report;
pub mod seed;

pub use algorithms::StrategyConfig;
pub use config::ExperimentConfig;
pub use data::{ClientShard, LabeledDataset, PartitionSpec};
pub use error::{Error, Result};
pub use fedsim::{run_experiment, ExperimentLog, RoundRecord, RunConfig, Simulation};
pub use hem::{compose_hem, Band, ImportanceLevel, ImportanceVector, UseCase};
pub use metrics::{ComponentIndices, EntropyVariant, MetricConfig, TtaClock};
pub use model::{ModelKind, ModelParams, ModelSpec, SgdConfig};
pub use personalization::{MamlMode, PersonalizerConfig};
pub use report::ReportFile;
