//! Labeled datasets, the synthetic blob generator, CIFAR-10 binary ingestion
//! and the class-cyclic non-IID partitioner.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Size of one CIFAR-10 binary record: one label byte plus a 32x32x3 image.
pub const CIFAR10_RECORD_LEN: usize = 1 + CIFAR10_PIXELS;
pub const CIFAR10_PIXELS: usize = 3 * 32 * 32;
pub const CIFAR10_CLASSES: usize = 10;

/// A dense row-major feature matrix with one integer class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    n_features: usize,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        n_features: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if n_features == 0 || num_classes == 0 {
            return Err(Error::arg("n_features and num_classes must be positive"));
        }
        if features.len() != labels.len() * n_features {
            return Err(Error::arg(format!(
                "feature buffer holds {} values, expected {} rows x {} features",
                features.len(),
                labels.len(),
                n_features
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::arg(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            n_features,
            num_classes,
        })
    }

    /// Builds a dataset from individual rows.
    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let n_features = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_features) {
            return Err(Error::arg("rows have differing feature counts"));
        }
        if rows.len() != labels.len() {
            return Err(Error::arg("row count differs from label count"));
        }
        Self::new(rows.concat(), labels, n_features, num_classes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    /// Copies the given rows, in the given order, into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.n_features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Self {
            features,
            labels,
            n_features: self.n_features,
            num_classes: self.num_classes,
        }
    }

    /// Row indices grouped by class, ascending within each class.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }

    /// Concatenates datasets that share feature and class dimensions.
    pub fn concat(parts: &[LabeledDataset]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::arg("cannot concatenate zero datasets"))?;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.n_features != first.n_features || p.num_classes != first.num_classes {
                return Err(Error::arg("datasets disagree on dimensions"));
            }
            features.extend_from_slice(&p.features);
            labels.extend_from_slice(&p.labels);
        }
        Self::new(features, labels, first.n_features, first.num_classes)
    }
}

/// Gaussian blobs, one unit-covariance cluster per class.
///
/// Class means are drawn from `seed`. When `n_features >= num_classes` they
/// are orthogonal and every pair of means is exactly `class_separation` apart;
/// otherwise they are random directions of norm `class_separation / sqrt(2)`.
/// Rows are interleaved by class: labels run `0, 1, .., C-1, 0, 1, ..`.
pub fn generate_synthetic(
    num_classes: usize,
    n_features: usize,
    samples_per_class: usize,
    class_separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if num_classes == 0 || n_features == 0 || samples_per_class == 0 {
        return Err(Error::arg(
            "num_classes, n_features and samples_per_class must be positive",
        ));
    }
    if !(class_separation > 0.0 && class_separation.is_finite()) {
        return Err(Error::arg("class_separation must be positive and finite"));
    }
    let mut rng = seed::rng(seed);
    let radius = class_separation / std::f64::consts::SQRT_2;

    let mut means: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    while means.len() < num_classes {
        let mut v: Vec<f64> = (0..n_features)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        if n_features >= num_classes {
            // Gram-Schmidt against the means placed so far.
            for m in &means {
                let proj = dot(&v, m) / (radius * radius);
                v.iter_mut().zip(m).for_each(|(a, b)| *a -= proj * b);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm < 1e-8 {
            continue;
        }
        means.push(v.into_iter().map(|x| x * radius / norm).collect());
    }

    let n = num_classes * samples_per_class;
    let mut features = Vec::with_capacity(n * n_features);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..samples_per_class {
        for (c, mean) in means.iter().enumerate() {
            for &mu in mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                features.push(mu + z);
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(features, labels, n_features, num_classes)
}

/// Stratified split: each class contributes `round(test_fraction * n_c)` rows
/// to the test set. Both outputs keep the source row order.
pub fn train_test_split(
    dataset: &LabeledDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::arg("test_fraction must lie in (0, 1)"));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, mut idx) in dataset.indices_by_class().into_iter().enumerate() {
        let mut rng = seed::rng(seed::derive_seed(seed, &[c as u64]));
        idx.shuffle(&mut rng);
        let n_test = (test_fraction * idx.len() as f64).round() as usize;
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

/// Decodes CIFAR-10 binary records (label byte, then 3072 channel-major
/// pixel bytes). Pixels are scaled by 1/255 into [0, 1].
pub fn parse_cifar10_binary(bytes: &[u8]) -> Result<LabeledDataset> {
    if bytes.len() % CIFAR10_RECORD_LEN != 0 {
        return Err(Error::Format(format!(
            "{} bytes is not a whole number of {CIFAR10_RECORD_LEN}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR10_RECORD_LEN;
    let mut features = Vec::with_capacity(n * CIFAR10_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (r, record) in bytes.chunks_exact(CIFAR10_RECORD_LEN).enumerate() {
        let label = record[0] as usize;
        if label >= CIFAR10_CLASSES {
            return Err(Error::Format(format!("record {r} has label byte {label}")));
        }
        labels.push(label);
        features.extend(record[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    if n == 0 {
        return Err(Error::Format("no records".into()));
    }
    LabeledDataset::new(features, labels, CIFAR10_PIXELS, CIFAR10_CLASSES)
}

/// Reads and concatenates CIFAR-10 batch files.
pub fn load_cifar10_files<P: AsRef<Path>>(paths: &[P]) -> Result<LabeledDataset> {
    let parts = paths
        .iter()
        .map(|p| {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            parse_cifar10_binary(&bytes)
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::concat(&parts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub classes_per_client: usize,
    pub seed: u64,
}

/// One client's local data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    pub class_list: Vec<usize>,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

/// Classes held by client `i`: `(i + n) mod C` for `n` in `0..k`.
pub fn class_list(client_id: usize, num_classes: usize, classes_per_client: usize) -> Vec<usize> {
    (0..classes_per_client)
        .map(|n| (client_id + n) % num_classes)
        .collect()
}

/// Clients (ascending id) whose class list contains `class`.
pub fn class_holders(class: usize, num_classes: usize, spec: &PartitionSpec) -> Vec<usize> {
    (0..spec.num_clients)
        .filter(|&i| class_list(i, num_classes, spec.classes_per_client).contains(&class))
        .collect()
}

/// Cyclic label-skew partition. Each class's rows are shuffled from the seed
/// and dealt round-robin among the clients holding that class. Classes that
/// no client holds (possible when `num_clients * k < C`) are left unassigned.
pub fn partition(
    train: &LabeledDataset,
    test: &LabeledDataset,
    spec: &PartitionSpec,
) -> Result<Vec<ClientShard>> {
    let num_classes = train.num_classes();
    if test.num_classes() != num_classes || test.n_features() != train.n_features() {
        return Err(Error::arg("train and test datasets disagree on dimensions"));
    }
    if spec.num_clients == 0 {
        return Err(Error::arg("num_clients must be at least 1"));
    }
    if spec.classes_per_client == 0 || spec.classes_per_client > num_classes {
        return Err(Error::arg(format!(
            "classes_per_client {} must lie in 1..={num_classes}",
            spec.classes_per_client
        )));
    }

    let holders: Vec<Vec<usize>> = (0..num_classes)
        .map(|c| class_holders(c, num_classes, spec))
        .collect();

    let deal = |data: &LabeledDataset, split_tag: u64| -> Vec<Vec<usize>> {
        let mut per_client = vec![Vec::new(); spec.num_clients];
        for (c, mut idx) in data.indices_by_class().into_iter().enumerate() {
            let owners = &holders[c];
            if owners.is_empty() {
                continue;
            }
            let mut rng = seed::rng(seed::derive_seed(spec.seed, &[split_tag, c as u64]));
            idx.shuffle(&mut rng);
            for (j, row) in idx.into_iter().enumerate() {
                per_client[owners[j % owners.len()]].push(row);
            }
        }
        per_client.iter_mut().for_each(|v| v.sort_unstable());
        per_client
    };

    let train_idx = deal(train, 0);
    let test_idx = deal(test, 1);
    Ok((0..spec.num_clients)
        .map(|i| ClientShard {
            client_id: i,
            class_list: class_list(i, num_classes, spec.classes_per_client),
            train: train.subset(&train_idx[i]),
            test: test.subset(&test_idx[i]),
        })
        .collect())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
