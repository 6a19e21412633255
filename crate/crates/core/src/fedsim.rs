//! Synchronous round-based federated simulation: broadcast, local update,
//! aggregate, then evaluate every client and append a [`RoundRecord`].
//!
//! Client updates within a round run on the rayon pool; their results are
//! always reduced in client id order, so the log does not depend on the
//! schedule. Every random stream is derived from the run seed.

use std::io::Write;
use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::algorithms::{
    fedavg_aggregate, feddyn_client_update_with, feddyn_server_update,
    scaffold_client_update_with, scaffold_server_update, FedDynUpdate, ScaffoldUpdate,
    StrategyConfig,
};
use crate::data::{ClientShard, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{
    evaluate, init_params, local_sgd, BatchGradient, ModelParams, ModelSpec, PlainGradient,
    SgdConfig,
};
use crate::personalization::{
    maml_adapt, proto_adapt, support_query_split, MamlGradient, PersonalizerConfig,
    SupportQuerySplit,
};
use crate::seed;

/// Cost units charged once per round for the server reduction.
pub const AGGREGATION_COST_UNITS: f64 = 1.0;

fn default_participation() -> f64 {
    1.0
}

fn default_eval_every() -> usize {
    1
}

/// Everything needed to simulate one algorithm under one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub algorithm_name: String,
    pub model: ModelSpec,
    pub training: SgdConfig,
    pub strategy: StrategyConfig,
    #[serde(default)]
    pub personalizer: PersonalizerConfig,
    pub rounds: usize,
    #[serde(default = "default_participation")]
    pub participation: f64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub early_stop_accuracy: Option<f64>,
    pub seed: u64,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.validate()?;
        self.strategy.validate()?;
        self.personalizer.validate()?;
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::Config("participation must lie in (0, 1]".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if let Some(a) = self.early_stop_accuracy {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config("early_stop_accuracy must lie in [0, 1]".into()));
            }
        }
        if matches!(self.strategy, StrategyConfig::Scaffold { .. })
            && self.training.learning_rate <= 0.0
        {
            return Err(Error::Config(
                "SCAFFOLD needs a positive local learning rate".into(),
            ));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        fingerprint_json(self)
    }
}

pub(crate) fn fingerprint_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config types serialize infallibly");
    hex::encode(Sha256::digest(&bytes))
}

/// Seed of the local-training stream in `round`. Shared by every client so
/// that relabeling clients does not change their updates.
pub fn round_seed(run_seed: u64, round: usize) -> u64 {
    seed::derive_seed(run_seed, &[seed::STREAM_TRAIN, round as u64])
}

#[derive(Debug, Clone, PartialEq)]
pub enum ServerAlgoState {
    FedAvg,
    Scaffold { c: Vec<f64> },
    FedDyn { h: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub round: usize,
    pub global: ModelParams,
    pub algo: ServerAlgoState,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClientAlgoState {
    None,
    Scaffold { c_i: Vec<f64> },
    FedDyn { g_i: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub client_id: usize,
    pub shard: ClientShard,
    pub algo: ClientAlgoState,
    pub split: Option<SupportQuerySplit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// One entry per client, ordered by client id.
    pub client_accuracies: Vec<f64>,
    pub mean_client_accuracy: f64,
    pub wall_clock_seconds: f64,
    pub cost_units: f64,
    /// False when the accuracies were carried over from the last evaluated
    /// round (`eval_every > 1`).
    pub evaluated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentLog {
    pub algorithm_name: String,
    pub config_fingerprint: String,
    pub records: Vec<RoundRecord>,
    pub completed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ExperimentLog {
    pub fn num_clients(&self) -> Option<usize> {
        self.records.first().map(|r| r.client_accuracies.len())
    }

    /// Writes `round,client_id,accuracy,cost_units,wall_clock` rows.
    pub fn write_round_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let csv_err = |e: csv::Error| Error::Report(e.to_string());
        w.write_record(["round", "client_id", "accuracy", "cost_units", "wall_clock"])
            .map_err(csv_err)?;
        for r in &self.records {
            for (client, acc) in r.client_accuracies.iter().enumerate() {
                w.write_record([
                    r.round.to_string(),
                    client.to_string(),
                    acc.to_string(),
                    r.cost_units.to_string(),
                    r.wall_clock_seconds.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| Error::io("round csv", e))?;
        Ok(())
    }
}

/// Arithmetic mean in shifted form, so a constant list maps back to its
/// value exactly.
pub(crate) fn mean(values: &[f64]) -> f64 {
    let Some(&v0) = values.first() else {
        return f64::NAN;
    };
    v0 + values.iter().map(|v| v - v0).sum::<f64>() / values.len() as f64
}

/// Data-gradient selection for a client update.
enum DataGradient<'a> {
    Plain(PlainGradient<'a>),
    Maml(MamlGradient<'a>),
}

impl BatchGradient for DataGradient<'_> {
    fn eval(&mut self, theta: &[f64], rows: &[usize], grad: &mut [f64]) -> Result<(f64, f64)> {
        match self {
            DataGradient::Plain(g) => g.eval(theta, rows, grad),
            DataGradient::Maml(g) => g.eval(theta, rows, grad),
        }
    }
}

enum ClientResult {
    FedAvg { theta: Vec<f64>, n: usize, cost: f64 },
    Scaffold(ScaffoldUpdate),
    FedDyn(FedDynUpdate),
}

impl ClientResult {
    fn cost(&self) -> f64 {
        match self {
            ClientResult::FedAvg { cost, .. } => *cost,
            ClientResult::Scaffold(u) => u.cost_units,
            ClientResult::FedDyn(u) => u.cost_units,
        }
    }
}

/// Accuracy of the model the client would deploy: the global model, or its
/// personalized adaptation when a personalizer is configured.
pub fn client_accuracy(
    global: &ModelParams,
    spec: &ModelSpec,
    client: &ClientState,
    personalizer: Option<&PersonalizerConfig>,
) -> Result<f64> {
    let test = &client.shard.test;
    let support = || {
        client
            .split
            .as_ref()
            .map(|s| &s.support)
            .ok_or_else(|| Error::Precondition("personalizer without a support split".into()))
    };
    match personalizer {
        None | Some(PersonalizerConfig::None {}) => evaluate(global, spec, test),
        Some(&PersonalizerConfig::Maml {
            inner_lr,
            inner_steps,
            ..
        }) => {
            let adapted = maml_adapt(global, spec, support()?, inner_lr, inner_steps)?;
            evaluate(&adapted, spec, test)
        }
        Some(PersonalizerConfig::Proto { .. }) => {
            proto_adapt(global, spec, support()?, &client.shard.class_list)?.accuracy(test)
        }
    }
}

/// Evaluates every client, ordered by client id.
pub fn client_eval_pass(
    server: &ServerState,
    clients: &[ClientState],
    spec: &ModelSpec,
    personalizer: Option<&PersonalizerConfig>,
) -> Result<Vec<f64>> {
    if clients.is_empty() {
        return Err(Error::arg("evaluation pass over zero clients"));
    }
    clients
        .par_iter()
        .map(|c| client_accuracy(&server.global, spec, c, personalizer))
        .collect()
}

/// Stepwise simulator; [`run_experiment`] drives it to completion.
pub struct Simulation {
    cfg: RunConfig,
    server: ServerState,
    clients: Vec<ClientState>,
    last_accuracies: Option<Vec<f64>>,
}

impl Simulation {
    pub fn new(cfg: RunConfig, shards: Vec<ClientShard>) -> Result<Self> {
        cfg.validate()?;
        if shards.is_empty() {
            return Err(Error::Config("simulation needs at least one client".into()));
        }
        for (i, s) in shards.iter().enumerate() {
            if s.client_id != i {
                return Err(Error::Config("shards must be ordered by client id from 0".into()));
            }
            if s.train.is_empty() || s.test.is_empty() {
                return Err(Error::Config(format!(
                    "client {i} has an empty train or test set"
                )));
            }
            if s.train.n_features() != cfg.model.n_features
                || s.train.num_classes() != cfg.model.num_classes
            {
                return Err(Error::Config(format!(
                    "client {i} data does not match the model dimensions"
                )));
            }
        }
        let global = init_params(&cfg.model)?;
        let p = global.len();
        let algo = match cfg.strategy {
            StrategyConfig::FedAvg {} => ServerAlgoState::FedAvg,
            StrategyConfig::Scaffold { .. } => ServerAlgoState::Scaffold { c: vec![0.0; p] },
            StrategyConfig::FedDyn { .. } => ServerAlgoState::FedDyn { h: vec![0.0; p] },
        };
        let split_seed = seed::derive_seed(cfg.seed, &[seed::STREAM_SPLIT]);
        let clients = shards
            .into_iter()
            .map(|shard| {
                let split = cfg
                    .personalizer
                    .support_fraction()
                    .map(|f| support_query_split(&shard, f, split_seed))
                    .transpose()?;
                let algo = match cfg.strategy {
                    StrategyConfig::FedAvg {} => ClientAlgoState::None,
                    StrategyConfig::Scaffold { .. } => {
                        ClientAlgoState::Scaffold { c_i: vec![0.0; p] }
                    }
                    StrategyConfig::FedDyn { .. } => ClientAlgoState::FedDyn { g_i: vec![0.0; p] },
                };
                Ok(ClientState {
                    client_id: shard.client_id,
                    shard,
                    algo,
                    split,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            server: ServerState {
                round: 0,
                global,
                algo,
                rng_seed: cfg.seed,
            },
            cfg,
            clients,
            last_accuracies: None,
        })
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    fn participants(&self, round: usize) -> Vec<usize> {
        let n = self.clients.len();
        if self.cfg.participation >= 1.0 {
            return (0..n).collect();
        }
        let m = ((self.cfg.participation * n as f64).round() as usize).clamp(1, n);
        let mut rng = seed::rng(seed::derive_seed(
            self.cfg.seed,
            &[seed::STREAM_PARTICIPATION, round as u64],
        ));
        let mut chosen = index::sample(&mut rng, n, m).into_vec();
        chosen.sort_unstable();
        chosen
    }

    fn data_gradient<'a>(&'a self, client: &'a ClientState) -> DataGradient<'a> {
        let spec = &self.cfg.model;
        let data: &LabeledDataset = &client.shard.train;
        let weight_decay = self.cfg.training.weight_decay;
        match (self.cfg.personalizer.training_inner_lr(), &client.split) {
            (Some(inner_lr), Some(split)) => DataGradient::Maml(MamlGradient::new(
                spec,
                data,
                &split.support,
                inner_lr,
                weight_decay,
            )),
            _ => DataGradient::Plain(PlainGradient {
                spec,
                data,
                weight_decay,
            }),
        }
    }

    fn client_update(&self, client: &ClientState, seed: u64) -> Result<ClientResult> {
        let global = &self.server.global.values;
        let cfg: &SgdConfig = &self.cfg.training;
        let n = client.shard.train.len();
        let oracle = self.data_gradient(client);
        match (&self.cfg.strategy, &self.server.algo, &client.algo) {
            (StrategyConfig::FedAvg {}, _, _) => {
                let mut oracle = oracle;
                let run = local_sgd(global, n, cfg, seed, &mut oracle)?;
                Ok(ClientResult::FedAvg {
                    theta: run.values,
                    n,
                    cost: run.cost_units,
                })
            }
            (
                StrategyConfig::Scaffold { .. },
                ServerAlgoState::Scaffold { c },
                ClientAlgoState::Scaffold { c_i },
            ) => scaffold_client_update_with(global, c_i, c, n, cfg, seed, oracle)
                .map(ClientResult::Scaffold),
            (
                &StrategyConfig::FedDyn { feddyn_alpha },
                ServerAlgoState::FedDyn { .. },
                ClientAlgoState::FedDyn { g_i },
            ) => feddyn_client_update_with(global, g_i, feddyn_alpha, n, cfg, seed, oracle)
                .map(ClientResult::FedDyn),
            _ => unreachable!("algorithm state always matches the configured strategy"),
        }
    }

    fn aggregate(&mut self, participants: &[usize], results: Vec<ClientResult>) -> Result<()> {
        let n_total = self.clients.len();
        match &self.cfg.strategy {
            StrategyConfig::FedAvg {} => {
                let updates: Vec<(&[f64], usize)> = results
                    .iter()
                    .map(|r| match r {
                        ClientResult::FedAvg { theta, n, .. } => (theta.as_slice(), *n),
                        _ => unreachable!(),
                    })
                    .collect();
                self.server.global.values = fedavg_aggregate(&updates)?;
            }
            &StrategyConfig::Scaffold { server_lr } => {
                let updates: Vec<ScaffoldUpdate> = results
                    .into_iter()
                    .map(|r| match r {
                        ClientResult::Scaffold(u) => u,
                        _ => unreachable!(),
                    })
                    .collect();
                for (&i, u) in participants.iter().zip(&updates) {
                    self.clients[i].algo = ClientAlgoState::Scaffold {
                        c_i: u.new_c_i.clone(),
                    };
                }
                let ys: Vec<&[f64]> = updates.iter().map(|u| u.y.as_slice()).collect();
                let variates: Vec<&[f64]> = self
                    .clients
                    .iter()
                    .map(|cl| match &cl.algo {
                        ClientAlgoState::Scaffold { c_i } => c_i.as_slice(),
                        _ => unreachable!(),
                    })
                    .collect();
                let (x, c_next) =
                    scaffold_server_update(&self.server.global.values, &ys, &variates, server_lr)?;
                self.server.global.values = x;
                let ServerAlgoState::Scaffold { c } = &mut self.server.algo else {
                    unreachable!()
                };
                *c = c_next;
            }
            &StrategyConfig::FedDyn { feddyn_alpha } => {
                let updates: Vec<FedDynUpdate> = results
                    .into_iter()
                    .map(|r| match r {
                        ClientResult::FedDyn(u) => u,
                        _ => unreachable!(),
                    })
                    .collect();
                let thetas: Vec<&[f64]> = updates.iter().map(|u| u.theta.as_slice()).collect();
                let ServerAlgoState::FedDyn { h } = &mut self.server.algo else {
                    unreachable!()
                };
                let (w, h_next) = feddyn_server_update(
                    h,
                    &thetas,
                    &self.server.global.values,
                    feddyn_alpha,
                    n_total,
                )?;
                self.server.global.values = w;
                *h = h_next;
                for (&i, u) in participants.iter().zip(updates) {
                    self.clients[i].algo = ClientAlgoState::FedDyn { g_i: u.new_g_i };
                }
            }
        }
        if !self.server.global.is_finite() {
            return Err(Error::Numeric("global model became non-finite".into()));
        }
        Ok(())
    }

    /// Runs one full round and returns its record.
    pub fn step(&mut self) -> Result<RoundRecord> {
        let start = Instant::now();
        let round = self.server.round + 1;
        let participants = self.participants(round);
        let seed = round_seed(self.cfg.seed, round);
        let results = participants
            .par_iter()
            .map(|&i| self.client_update(&self.clients[i], seed))
            .collect::<Result<Vec<_>>>()?;
        let cost_units =
            results.iter().map(ClientResult::cost).sum::<f64>() + AGGREGATION_COST_UNITS;
        self.aggregate(&participants, results)?;
        self.server.round = round;

        let due = (round - 1) % self.cfg.eval_every == 0 || round == self.cfg.rounds;
        let (client_accuracies, evaluated) = match (&self.last_accuracies, due) {
            (Some(prev), false) => (prev.clone(), false),
            _ => {
                let acc = client_eval_pass(
                    &self.server,
                    &self.clients,
                    &self.cfg.model,
                    Some(&self.cfg.personalizer),
                )?;
                self.last_accuracies = Some(acc.clone());
                (acc, true)
            }
        };
        Ok(RoundRecord {
            round,
            mean_client_accuracy: mean(&client_accuracies),
            client_accuracies,
            wall_clock_seconds: start.elapsed().as_secs_f64(),
            cost_units,
            evaluated,
        })
    }
}

/// Simulates `cfg.rounds` rounds (or until the optional early-stop accuracy
/// is reached). Invalid configurations are rejected up front; a failure
/// during training yields a log with `completed = false` and the error text.
pub fn run_experiment(cfg: &RunConfig, shards: Vec<ClientShard>) -> Result<ExperimentLog> {
    let mut sim = Simulation::new(cfg.clone(), shards)?;
    let mut log = ExperimentLog {
        algorithm_name: cfg.algorithm_name.clone(),
        config_fingerprint: cfg.fingerprint(),
        records: Vec::with_capacity(cfg.rounds),
        completed: true,
        error: None,
    };
    for _ in 0..cfg.rounds {
        match sim.step() {
            Ok(record) => {
                let stop = record.evaluated
                    && cfg
                        .early_stop_accuracy
                        .is_some_and(|t| record.mean_client_accuracy >= t);
                log.records.push(record);
                if stop {
                    break;
                }
            }
            Err(e) => {
                log::warn!("{}: round {} failed: {e}", cfg.algorithm_name, sim.server.round + 1);
                log.completed = false;
                log.error = Some(e.to_string());
                break;
            }
        }
    }
    Ok(log)
}
