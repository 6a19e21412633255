//! Fixtures shared by the benchmarks.

use std::collections::BTreeMap;

use hemfl_core::data::{generate_synthetic, partition, train_test_split};
use hemfl_core::{
    ClientShard, ComponentIndices, ModelKind, ModelSpec, PartitionSpec, PersonalizerConfig,
    RunConfig, SgdConfig, StrategyConfig,
};

pub fn linear_spec(n_features: usize, num_classes: usize) -> ModelSpec {
    ModelSpec {
        kind: ModelKind::Linear,
        n_features,
        num_classes,
        hidden_units: None,
        init_seed: 1,
        init_scale: 0.01,
    }
}

pub fn mlp_spec(n_features: usize, num_classes: usize, hidden: usize) -> ModelSpec {
    ModelSpec {
        kind: ModelKind::Mlp,
        hidden_units: Some(hidden),
        ..linear_spec(n_features, num_classes)
    }
}

/// Synthetic blobs split over `num_clients` clients holding 5 classes each.
pub fn shards(num_classes: usize, n_features: usize, num_clients: usize) -> Vec<ClientShard> {
    let ds = generate_synthetic(num_classes, n_features, 200, 4.0, 11).expect("valid fixture");
    let (train, test) = train_test_split(&ds, 0.3, 12).expect("valid fixture");
    let spec = PartitionSpec {
        num_clients,
        classes_per_client: 5.min(num_classes),
        seed: 13,
    };
    partition(&train, &test, &spec).expect("valid fixture")
}

pub fn run_config(
    model: ModelSpec,
    strategy: StrategyConfig,
    personalizer: PersonalizerConfig,
    rounds: usize,
) -> RunConfig {
    RunConfig {
        algorithm_name: "bench".into(),
        model,
        training: SgdConfig {
            learning_rate: 0.01,
            batch_size: 16,
            local_epochs: 1,
            weight_decay: 0.0,
        },
        strategy,
        personalizer,
        rounds,
        participation: 1.0,
        eval_every: 1,
        early_stop_accuracy: None,
        seed: 5,
    }
}

/// `n` algorithms with spread-out component indices.
pub fn indices(n: usize) -> BTreeMap<String, ComponentIndices> {
    (0..n)
        .map(|i| {
            let t = i as f64 / n.max(1) as f64;
            (
                format!("alg{i}"),
                ComponentIndices {
                    accuracy: 0.8 + 0.1 * t,
                    convergence: t,
                    comp_efficiency: 1.0 - t,
                    fairness: (0.5 + t) % 1.0,
                    personalization: (i % 2 == 1).then_some(t),
                },
            )
        })
        .collect()
}
