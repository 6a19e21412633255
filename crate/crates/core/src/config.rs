//! Declarative experiment configuration (TOML). Unknown keys are errors.
//!
//! ```toml
//! seeds = [1, 2, 3]
//!
//! [dataset]
//! source = "synthetic"
//! num_classes = 10
//! n_features = 16
//! samples_per_class = 200
//! class_separation = 4.0
//!
//! [partition]
//! num_clients = 20
//! classes_per_client = 5
//!
//! [model]
//! kind = "linear"
//!
//! [training]
//! rounds = 200
//!
//! [hem]
//! use_case = "institution"
//!
//! [[algorithms]]
//! name = "FedAvg"
//! strategy = { kind = "fedavg" }
//!
//! [[algorithms]]
//! name = "FedAvg_Proto"
//! strategy = { kind = "fedavg" }
//! personalizer = { kind = "proto" }
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::algorithms::StrategyConfig;
use crate::data::{
    generate_synthetic, load_cifar10_files, partition, train_test_split, ClientShard,
    LabeledDataset, PartitionSpec,
};
use crate::error::{Error, Result};
use crate::fedsim::{fingerprint_json, RunConfig};
use crate::hem::{ImportanceVector, UseCase};
use crate::metrics::{EntropyVariant, MetricConfig, TtaClock};
use crate::model::{ModelKind, ModelSpec, SgdConfig};
use crate::personalization::PersonalizerConfig;
use crate::seed;

fn default_test_fraction() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        num_classes: usize,
        n_features: usize,
        samples_per_class: usize,
        class_separation: f64,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    Cifar10 {
        train_files: Vec<PathBuf>,
        test_files: Vec<PathBuf>,
    },
}

impl DatasetConfig {
    pub fn num_classes(&self) -> usize {
        match self {
            DatasetConfig::Synthetic { num_classes, .. } => *num_classes,
            DatasetConfig::Cifar10 { .. } => crate::data::CIFAR10_CLASSES,
        }
    }

    pub fn n_features(&self) -> usize {
        match self {
            DatasetConfig::Synthetic { n_features, .. } => *n_features,
            DatasetConfig::Cifar10 { .. } => crate::data::CIFAR10_PIXELS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub num_clients: usize,
    pub classes_per_client: usize,
}

fn default_init_scale() -> f64 {
    0.01
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(default)]
    pub hidden_units: Option<usize>,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

fn d_lr() -> f64 {
    SgdConfig::default().learning_rate
}
fn d_batch() -> usize {
    SgdConfig::default().batch_size
}
fn d_epochs() -> usize {
    SgdConfig::default().local_epochs
}
fn d_one() -> f64 {
    1.0
}
fn d_stride() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub rounds: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub local_epochs: usize,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "d_one")]
    pub participation: f64,
    #[serde(default = "d_stride")]
    pub eval_every: usize,
    #[serde(default)]
    pub early_stop_accuracy: Option<f64>,
}

impl TrainingConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            local_epochs: self.local_epochs,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmConfig {
    pub name: String,
    pub strategy: StrategyConfig,
    #[serde(default)]
    pub personalizer: PersonalizerConfig,
    /// Non-personalized algorithm that MPI is measured against. Defaults to
    /// the unique plain algorithm with the same strategy settings.
    #[serde(default)]
    pub base: Option<String>,
}

fn d_target() -> f64 {
    0.8
}
fn d_window() -> usize {
    10
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    #[serde(default = "d_target")]
    pub target_accuracy: f64,
    #[serde(default = "d_window")]
    pub accuracy_window: usize,
    #[serde(default)]
    pub tta_clock: TtaClock,
    #[serde(default)]
    pub entropy: EntropyVariant,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            target_accuracy: d_target(),
            accuracy_window: d_window(),
            tta_clock: TtaClock::default(),
            entropy: EntropyVariant::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HemConfig {
    #[serde(default)]
    pub use_case: Option<UseCase>,
    #[serde(default)]
    pub importance: Option<ImportanceVector>,
}

impl HemConfig {
    /// Custom importance wins over a preset; with neither, the institution
    /// preset is used.
    pub fn importance(&self) -> ImportanceVector {
        match (&self.importance, self.use_case) {
            (Some(v), _) => v.clone(),
            (None, Some(u)) => u.importance(),
            (None, None) => UseCase::Institution.importance(),
        }
    }
}

fn d_out() -> PathBuf {
    PathBuf::from("hem-out")
}
fn d_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "d_out")]
    pub dir: PathBuf,
    /// Also write per-run JSON logs and per-round CSVs.
    #[serde(default = "d_true")]
    pub round_logs: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: d_out(),
            round_logs: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub algorithms: Vec<AlgorithmConfig>,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub hem: HemConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file. Relative paths inside it are resolved against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DatasetConfig::Cifar10 {
            train_files,
            test_files,
        } = &mut cfg.dataset
        {
            train_files.iter_mut().chain(test_files.iter_mut()).for_each(resolve);
        }
        resolve(&mut cfg.output.dir);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hash of everything that affects results; the output section is left out.
    pub fn fingerprint(&self) -> String {
        let mut cfg = self.clone();
        cfg.output = OutputConfig::default();
        fingerprint_json(&cfg)
    }

    pub fn metric_config(&self) -> MetricConfig {
        MetricConfig {
            target_accuracy: self.metrics.target_accuracy,
            round_budget: self.training.rounds,
            accuracy_window: self.metrics.accuracy_window,
            tta_clock: self.metrics.tta_clock,
            entropy: self.metrics.entropy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.algorithms.is_empty() {
            return bad("at least one algorithm is required".into());
        }
        if self.training.rounds == 0 {
            return bad("training.rounds must be at least 1".into());
        }
        let mut names = BTreeSet::new();
        for a in &self.algorithms {
            if a.name.trim().is_empty() {
                return bad("algorithm names must be non-empty".into());
            }
            if !names.insert(a.name.as_str()) {
                return bad(format!("duplicate algorithm name '{}'", a.name));
            }
        }
        match &self.dataset {
            DatasetConfig::Synthetic {
                num_classes,
                n_features,
                samples_per_class,
                class_separation,
                test_fraction,
            } => {
                if *num_classes == 0 || *n_features == 0 || *samples_per_class == 0 {
                    return bad("synthetic dataset dimensions must be positive".into());
                }
                if !(*class_separation > 0.0) {
                    return bad("class_separation must be positive".into());
                }
                if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                    return bad("test_fraction must lie in (0, 1)".into());
                }
            }
            DatasetConfig::Cifar10 {
                train_files,
                test_files,
            } => {
                if train_files.is_empty() || test_files.is_empty() {
                    return bad("cifar10 needs train_files and test_files".into());
                }
                if let Some(missing) = train_files.iter().chain(test_files).find(|p| !p.exists()) {
                    return bad(format!("dataset file {} does not exist", missing.display()));
                }
            }
        }
        if self.partition.num_clients == 0 {
            return bad("partition.num_clients must be at least 1".into());
        }
        let c = self.dataset.num_classes();
        if self.partition.classes_per_client == 0 || self.partition.classes_per_client > c {
            return bad(format!("partition.classes_per_client must lie in 1..={c}"));
        }
        self.metric_config().validate()?;
        self.model_spec(0).validate()?;
        self.hem.importance().validate()?;
        for a in &self.algorithms {
            self.run_config(a, 0).validate()?;
            self.base_of(a)?;
        }
        Ok(())
    }

    pub fn algorithm(&self, name: &str) -> Option<&AlgorithmConfig> {
        self.algorithms.iter().find(|a| a.name == name)
    }

    /// The base algorithm a personalized entry is compared against.
    pub fn base_of(&self, alg: &AlgorithmConfig) -> Result<Option<&AlgorithmConfig>> {
        if !alg.personalizer.is_personalized() {
            if alg.base.is_some() {
                return Err(Error::Config(format!(
                    "'{}' is not personalized and cannot declare a base",
                    alg.name
                )));
            }
            return Ok(None);
        }
        let base = match &alg.base {
            Some(name) => self.algorithm(name).ok_or_else(|| {
                Error::Config(format!("'{}' names unknown base '{name}'", alg.name))
            })?,
            None => {
                let mut candidates = self
                    .algorithms
                    .iter()
                    .filter(|b| !b.personalizer.is_personalized() && b.strategy == alg.strategy);
                match (candidates.next(), candidates.next()) {
                    (Some(b), None) => b,
                    (None, _) => {
                        return Err(Error::Config(format!(
                            "'{}' has no non-personalized algorithm with the same strategy",
                            alg.name
                        )))
                    }
                    (Some(_), Some(_)) => {
                        return Err(Error::Config(format!(
                            "'{}' matches several base algorithms; set `base`",
                            alg.name
                        )))
                    }
                }
            }
        };
        if base.personalizer.is_personalized() {
            return Err(Error::Config(format!(
                "base '{}' of '{}' is itself personalized",
                base.name, alg.name
            )));
        }
        Ok(Some(base))
    }

    pub fn model_spec(&self, run_seed: u64) -> ModelSpec {
        ModelSpec {
            kind: self.model.kind,
            n_features: self.dataset.n_features(),
            num_classes: self.dataset.num_classes(),
            hidden_units: self.model.hidden_units,
            init_seed: seed::derive_seed(run_seed, &[seed::STREAM_INIT]),
            init_scale: self.model.init_scale,
        }
    }

    pub fn partition_spec(&self, run_seed: u64) -> PartitionSpec {
        PartitionSpec {
            num_clients: self.partition.num_clients,
            classes_per_client: self.partition.classes_per_client,
            seed: seed::derive_seed(run_seed, &[seed::STREAM_PARTITION]),
        }
    }

    pub fn run_config(&self, alg: &AlgorithmConfig, run_seed: u64) -> RunConfig {
        RunConfig {
            algorithm_name: alg.name.clone(),
            model: self.model_spec(run_seed),
            training: self.training.sgd(),
            strategy: alg.strategy,
            personalizer: alg.personalizer,
            rounds: self.training.rounds,
            participation: self.training.participation,
            eval_every: self.training.eval_every,
            early_stop_accuracy: self.training.early_stop_accuracy,
            seed: run_seed,
        }
    }
}

/// Train/test datasets, loaded once and reused across seeds where possible.
pub enum DataSource {
    Synthetic(DatasetConfig),
    Fixed {
        train: LabeledDataset,
        test: LabeledDataset,
    },
}

impl DataSource {
    pub fn load(cfg: &DatasetConfig) -> Result<Self> {
        match cfg {
            DatasetConfig::Synthetic { .. } => Ok(DataSource::Synthetic(cfg.clone())),
            DatasetConfig::Cifar10 {
                train_files,
                test_files,
            } => Ok(DataSource::Fixed {
                train: load_cifar10_files(train_files)?,
                test: load_cifar10_files(test_files)?,
            }),
        }
    }

    /// Train and test sets for one run seed.
    pub fn datasets(&self, run_seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        match self {
            DataSource::Synthetic(DatasetConfig::Synthetic {
                num_classes,
                n_features,
                samples_per_class,
                class_separation,
                test_fraction,
            }) => {
                let data_seed = seed::derive_seed(run_seed, &[seed::STREAM_DATA]);
                let ds = generate_synthetic(
                    *num_classes,
                    *n_features,
                    *samples_per_class,
                    *class_separation,
                    data_seed,
                )?;
                train_test_split(&ds, *test_fraction, seed::derive_seed(data_seed, &[1]))
            }
            DataSource::Synthetic(_) => unreachable!("constructed from a synthetic config"),
            DataSource::Fixed { train, test } => Ok((train.clone(), test.clone())),
        }
    }

    pub fn shards(&self, cfg: &ExperimentConfig, run_seed: u64) -> Result<Vec<ClientShard>> {
        let (train, test) = self.datasets(run_seed)?;
        partition(&train, &test, &cfg.partition_spec(run_seed))
    }
}
