//! Personalization adapters layered on top of any base strategy: first-order
//! MAML adaptation and prototype heads. Also the MPI statistic comparing a
//! personalized algorithm against its base.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{ClientShard, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{
    argmax, cross_entropy_rows, embed, loss_and_grad, local_sgd, BatchGradient, LocalRun,
    ModelParams, ModelSpec, SgdConfig,
};
use crate::seed;

/// Clients whose base accuracy is below this are left out of the MPI median.
pub const MPI_MIN_BASE_ACCURACY: f64 = 0.01;

fn default_support_fraction() -> f64 {
    0.5
}

/// When MAML participates: inside the federated client update as well as at
/// evaluation time, or only at evaluation time on top of plain training.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MamlMode {
    #[default]
    Training,
    EvalOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PersonalizerConfig {
    None {},
    Maml {
        inner_lr: f64,
        inner_steps: usize,
        #[serde(default = "default_support_fraction")]
        support_fraction: f64,
        #[serde(default)]
        mode: MamlMode,
    },
    Proto {
        #[serde(default = "default_support_fraction")]
        support_fraction: f64,
    },
}

impl Default for PersonalizerConfig {
    fn default() -> Self {
        PersonalizerConfig::None {}
    }
}

impl PersonalizerConfig {
    pub fn is_personalized(&self) -> bool {
        !matches!(self, PersonalizerConfig::None {})
    }

    pub fn name(&self) -> &'static str {
        match self {
            PersonalizerConfig::None {} => "none",
            PersonalizerConfig::Maml { .. } => "maml",
            PersonalizerConfig::Proto { .. } => "proto",
        }
    }

    pub fn support_fraction(&self) -> Option<f64> {
        match *self {
            PersonalizerConfig::None {} => None,
            PersonalizerConfig::Maml {
                support_fraction, ..
            }
            | PersonalizerConfig::Proto { support_fraction } => Some(support_fraction),
        }
    }

    /// Inner learning rate when MAML shapes the client update.
    pub fn training_inner_lr(&self) -> Option<f64> {
        match *self {
            PersonalizerConfig::Maml {
                inner_lr,
                mode: MamlMode::Training,
                ..
            } => Some(inner_lr),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(f) = self.support_fraction() {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::arg("support_fraction must lie in (0, 1)"));
            }
        }
        if let PersonalizerConfig::Maml { inner_lr, .. } = *self {
            if !(inner_lr >= 0.0 && inner_lr.is_finite()) {
                return Err(Error::arg("inner_lr must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// Disjoint support and query sets drawn from one client's training shard.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportQuerySplit {
    pub support: LabeledDataset,
    pub query: LabeledDataset,
}

/// Stratified split of the client's training rows. Every class in the
/// client's class list lands at least once in the support set; a class with
/// two or more rows also keeps at least one row in the query set.
pub fn support_query_split(
    shard: &ClientShard,
    support_fraction: f64,
    seed: u64,
) -> Result<SupportQuerySplit> {
    if !(support_fraction > 0.0 && support_fraction < 1.0) {
        return Err(Error::arg("support_fraction must lie in (0, 1)"));
    }
    let by_class = shard.train.indices_by_class();
    let mut support = Vec::new();
    let mut query = Vec::new();
    for &c in &shard.class_list {
        let mut rows = by_class[c].clone();
        if rows.is_empty() {
            return Err(Error::Precondition(format!(
                "client {} holds no training rows of class {c}",
                shard.client_id
            )));
        }
        let mut rng = seed::rng(seed::derive_seed(seed, &[shard.client_id as u64, c as u64]));
        rows.shuffle(&mut rng);
        let n = rows.len();
        let n_support = ((support_fraction * n as f64).round() as usize).clamp(1, (n - 1).max(1));
        support.extend_from_slice(&rows[..n_support]);
        query.extend_from_slice(&rows[n_support..]);
    }
    support.sort_unstable();
    query.sort_unstable();
    Ok(SupportQuerySplit {
        support: shard.train.subset(&support),
        query: shard.train.subset(&query),
    })
}

/// First-order adaptation: `steps` full-batch gradient steps on the support loss.
pub fn maml_adapt(
    global: &ModelParams,
    spec: &ModelSpec,
    support: &LabeledDataset,
    inner_lr: f64,
    steps: usize,
) -> Result<ModelParams> {
    if support.is_empty() {
        return Err(Error::arg("adaptation on an empty support set"));
    }
    let mut params = global.clone();
    for _ in 0..steps {
        let (_, grad) = loss_and_grad(&params, spec, support)?;
        params
            .values
            .iter_mut()
            .zip(&grad)
            .for_each(|(p, g)| *p -= inner_lr * g);
    }
    if !params.is_finite() {
        return Err(Error::Numeric("adaptation produced non-finite parameters".into()));
    }
    Ok(params)
}

/// First-order MAML data gradient: the mini-batch gradient evaluated at the
/// point reached by one inner step on the support set,
/// `grad L_batch(theta - inner_lr * grad L_support(theta))`.
pub struct MamlGradient<'a> {
    pub spec: &'a ModelSpec,
    pub data: &'a LabeledDataset,
    pub support: &'a LabeledDataset,
    pub inner_lr: f64,
    pub weight_decay: f64,
    pub(crate) all_support: Vec<usize>,
    pub(crate) adapted: Vec<f64>,
}

impl<'a> MamlGradient<'a> {
    pub fn new(
        spec: &'a ModelSpec,
        data: &'a LabeledDataset,
        support: &'a LabeledDataset,
        inner_lr: f64,
        weight_decay: f64,
    ) -> Self {
        Self {
            spec,
            data,
            support,
            inner_lr,
            weight_decay,
            all_support: (0..support.len()).collect(),
            adapted: vec![0.0; spec.param_len()],
        }
    }
}

impl BatchGradient for MamlGradient<'_> {
    fn eval(&mut self, theta: &[f64], rows: &[usize], grad: &mut [f64]) -> Result<(f64, f64)> {
        let mut cost = rows.len() as f64;
        self.adapted.copy_from_slice(theta);
        if self.inner_lr != 0.0 {
            cross_entropy_rows(theta, self.spec, self.support, &self.all_support, grad);
            self.adapted
                .iter_mut()
                .zip(grad.iter())
                .for_each(|(a, g)| *a -= self.inner_lr * g);
            cost += self.support.len() as f64;
        }
        let mut loss = cross_entropy_rows(&self.adapted, self.spec, self.data, rows, grad);
        if self.weight_decay > 0.0 {
            let sq: f64 = self.adapted.iter().map(|v| v * v).sum();
            loss += 0.5 * self.weight_decay * sq;
            grad.iter_mut()
                .zip(&self.adapted)
                .for_each(|(g, a)| *g += self.weight_decay * a);
        }
        Ok((loss, cost))
    }
}

/// Meta-training client update: SGD over the training shard where each step
/// uses the [`MamlGradient`].
pub fn maml_client_update(
    global: &ModelParams,
    spec: &ModelSpec,
    train: &LabeledDataset,
    support: &LabeledDataset,
    inner_lr: f64,
    cfg: &SgdConfig,
    seed: u64,
) -> Result<LocalRun> {
    if support.is_empty() {
        return Err(Error::Precondition("MAML needs a non-empty support set".into()));
    }
    let mut oracle = MamlGradient::new(spec, train, support, inner_lr, cfg.weight_decay);
    local_sgd(&global.values, train.len(), cfg, seed, &mut oracle)
}

/// Nearest-prototype classifier over the model's penultimate representation,
/// restricted to one client's classes.
#[derive(Debug, Clone)]
pub struct PrototypeClassifier {
    classes: Vec<usize>,
    prototypes: Vec<Vec<f64>>,
    params: Vec<f64>,
    spec: ModelSpec,
}

impl PrototypeClassifier {
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn prototypes(&self) -> &[Vec<f64>] {
        &self.prototypes
    }

    /// Class of the closest prototype (squared Euclidean); ties go to the
    /// lowest class id.
    pub fn predict(&self, x: &[f64]) -> usize {
        let e = embed(&self.params, &self.spec, x);
        let dist: Vec<f64> = self
            .prototypes
            .iter()
            .map(|p| -p.iter().zip(&e).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .collect();
        // `classes` is ascending, so argmax's lowest-index tie-break is the
        // lowest class id.
        self.classes[argmax(&dist)]
    }

    pub fn accuracy(&self, test: &LabeledDataset) -> Result<f64> {
        if test.is_empty() {
            return Err(Error::arg("evaluation on an empty test set"));
        }
        let correct = (0..test.len())
            .filter(|&i| self.predict(test.row(i)) == test.labels()[i])
            .count();
        Ok(correct as f64 / test.len() as f64)
    }
}

/// Builds per-class mean embeddings of the support set for every class in
/// `class_list`.
pub fn proto_adapt(
    global: &ModelParams,
    spec: &ModelSpec,
    support: &LabeledDataset,
    class_list: &[usize],
) -> Result<PrototypeClassifier> {
    let mut classes = class_list.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let dim = spec.embed_dim();
    let mut sums = vec![vec![0.0; dim]; classes.len()];
    let mut counts = vec![0usize; classes.len()];
    for i in 0..support.len() {
        let Ok(slot) = classes.binary_search(&support.labels()[i]) else {
            continue;
        };
        let e = embed(&global.values, spec, support.row(i));
        sums[slot].iter_mut().zip(&e).for_each(|(s, v)| *s += v);
        counts[slot] += 1;
    }
    if let Some(pos) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Precondition(format!(
            "support set has no example of class {}",
            classes[pos]
        )));
    }
    let prototypes = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| s.into_iter().map(|v| v / n as f64).collect())
        .collect();
    Ok(PrototypeClassifier {
        classes,
        prototypes,
        params: global.values.clone(),
        spec: spec.clone(),
    })
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Median over clients of the percentage accuracy gain of the personalized
/// algorithm over its base. Clients with base accuracy below
/// [`MPI_MIN_BASE_ACCURACY`] are excluded.
pub fn compute_mpi(pfl_accuracies: &[f64], base_accuracies: &[f64]) -> Result<f64> {
    if pfl_accuracies.len() != base_accuracies.len() {
        return Err(Error::arg("accuracy lists differ in length"));
    }
    let in_range = |a: &f64| (0.0..=1.0).contains(a);
    if !pfl_accuracies.iter().all(in_range) || !base_accuracies.iter().all(in_range) {
        return Err(Error::arg("accuracies must lie in [0, 1]"));
    }
    let mut gains: Vec<f64> = pfl_accuracies
        .iter()
        .zip(base_accuracies)
        .filter(|(_, &b)| b >= MPI_MIN_BASE_ACCURACY)
        .map(|(&p, &b)| 100.0 * (p - b) / b)
        .collect();
    if gains.is_empty() {
        return Err(Error::UndefinedMpi);
    }
    gains.sort_by(f64::total_cmp);
    Ok(median(&gains))
}
