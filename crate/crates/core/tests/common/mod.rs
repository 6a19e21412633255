#![allow(dead_code)]

use std::collections::BTreeMap;

use hemfl_core::data::{generate_synthetic, partition, train_test_split};
use hemfl_core::metrics::ComponentIndices;
use hemfl_core::model::{LayerShape, ModelKind, ModelParams, ModelSpec, SgdConfig};
use hemfl_core::{ClientShard, LabeledDataset, PartitionSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn linear_spec(d: usize, c: usize) -> ModelSpec {
    ModelSpec {
        kind: ModelKind::Linear,
        n_features: d,
        num_classes: c,
        hidden_units: None,
        init_seed: 3,
        init_scale: 0.1,
    }
}

pub fn mlp_spec(d: usize, c: usize, h: usize) -> ModelSpec {
    ModelSpec {
        kind: ModelKind::Mlp,
        hidden_units: Some(h),
        ..linear_spec(d, c)
    }
}

pub fn random_params(spec: &ModelSpec, scale: f64, r: &mut ChaCha8Rng) -> ModelParams {
    let values = (0..spec.param_len())
        .map(|_| (2.0 * r.random::<f64>() - 1.0) * scale)
        .collect();
    ModelParams::from_values(spec, values).unwrap()
}

pub fn random_batch(d: usize, c: usize, n: usize, r: &mut ChaCha8Rng) -> LabeledDataset {
    let features = (0..n * d).map(|_| 2.0 * r.random::<f64>() - 1.0).collect();
    let labels = (0..n).map(|_| r.random_range(0..c)).collect();
    LabeledDataset::new(features, labels, d, c).unwrap()
}

pub fn shape_of(spec: &ModelSpec) -> Vec<LayerShape> {
    spec.shape()
}

/// Central finite differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest elementwise relative error. Coordinates where both values are
/// below `1e-7` in magnitude are compared absolutely (to `1e-8`) instead.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let scale = a.abs().max(n.abs());
            if scale < 1e-7 {
                if (a - n).abs() < 1e-8 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                (a - n).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

pub fn shards(
    num_classes: usize,
    n_features: usize,
    samples_per_class: usize,
    num_clients: usize,
    classes_per_client: usize,
    seed: u64,
) -> Vec<ClientShard> {
    let ds = generate_synthetic(num_classes, n_features, samples_per_class, 4.0, seed).unwrap();
    let (train, test) = train_test_split(&ds, 0.3, seed + 1).unwrap();
    partition(
        &train,
        &test,
        &PartitionSpec {
            num_clients,
            classes_per_client,
            seed: seed + 2,
        },
    )
    .unwrap()
}

/// `n` clients that all hold the same data.
pub fn identical_shards(n: usize, seed: u64) -> Vec<ClientShard> {
    let one = shards(4, 5, 30, 1, 4, seed).remove(0);
    (0..n)
        .map(|i| ClientShard {
            client_id: i,
            ..one.clone()
        })
        .collect()
}

pub fn sgd(lr: f64, batch: usize, epochs: usize) -> SgdConfig {
    SgdConfig {
        learning_rate: lr,
        batch_size: batch,
        local_epochs: epochs,
        weight_decay: 0.0,
    }
}

/// Component indices of the nine-algorithm comparison table (accuracy,
/// convergence, computational efficiency, fairness).
pub const TABLE: [(&str, [f64; 4]); 9] = [
    ("FedAvg", [0.84, 0.67, 0.12, 1.00]),
    ("FedAvg_MAML", [0.88, 0.90, 0.00, 0.55]),
    ("FedAvg_Proto", [0.88, 0.85, 0.78, 0.36]),
    ("FedDyn", [0.85, 0.69, 0.21, 0.41]),
    ("FedDyn_MAML", [0.89, 0.94, 0.56, 0.00]),
    ("FedDyn_Proto", [0.89, 0.92, 0.89, 0.27]),
    ("SCAFFOLD", [0.86, 0.86, 0.44, 0.59]),
    ("SCAFFOLD_MAML", [0.87, 0.86, 0.67, 0.23]),
    ("SCAFFOLD_Proto", [0.89, 0.91, 0.87, 0.05]),
];

pub fn table_indices() -> BTreeMap<String, ComponentIndices> {
    TABLE
        .iter()
        .map(|(name, [a, c, e, f])| {
            (
                name.to_string(),
                ComponentIndices {
                    accuracy: *a,
                    convergence: *c,
                    comp_efficiency: *e,
                    fairness: *f,
                    personalization: None,
                },
            )
        })
        .collect()
}

/// Independent normalized weighted mean over the four table components.
pub fn reference_hem(x: [f64; 4], w: [f64; 4]) -> f64 {
    let num: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
    num / w.iter().sum::<f64>()
}
