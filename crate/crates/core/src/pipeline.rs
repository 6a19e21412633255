//! End-to-end driver: config in, logs and report out.

use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::{DataSource, ExperimentConfig};
use crate::error::{Error, Result};
use crate::fedsim::{run_experiment, ExperimentLog};
use crate::report::{write_atomic, AlgorithmReport, ReportFile, SeedMeasurement};

pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone)]
pub struct RunLog {
    pub algorithm: String,
    pub seed: u64,
    pub log: ExperimentLog,
}

/// Runs every algorithm under every seed and builds the report.
pub fn run_suite(cfg: &ExperimentConfig) -> Result<(ReportFile, Vec<RunLog>)> {
    cfg.validate()?;
    let source = DataSource::load(&cfg.dataset)?;
    let shards = cfg
        .seeds
        .par_iter()
        .map(|&s| source.shards(cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..cfg.algorithms.len())
        .flat_map(|a| (0..cfg.seeds.len()).map(move |s| (a, s)))
        .collect();
    let logs = jobs
        .par_iter()
        .map(|&(a, s)| {
            let alg = &cfg.algorithms[a];
            let seed = cfg.seeds[s];
            log::info!("running {} with seed {seed}", alg.name);
            let log = run_experiment(&cfg.run_config(alg, seed), shards[s].clone())?;
            Ok(RunLog {
                algorithm: alg.name.clone(),
                seed,
                log,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let metric_cfg = cfg.metric_config();
    let mut algorithms = Vec::with_capacity(cfg.algorithms.len());
    for alg in &cfg.algorithms {
        let seeds = logs
            .iter()
            .filter(|l| l.algorithm == alg.name)
            .map(|l| SeedMeasurement::from_log(l.seed, &l.log, &metric_cfg))
            .collect::<Result<Vec<_>>>()?;
        algorithms.push(AlgorithmReport {
            name: alg.name.clone(),
            strategy: alg.strategy.name().to_string(),
            personalizer: alg.personalizer.name().to_string(),
            base: cfg.base_of(alg)?.map(|b| b.name.clone()),
            seeds,
            averages: None,
            components: None,
            hem_score: None,
            band: None,
        });
    }
    let report = ReportFile::build(
        cfg.fingerprint(),
        metric_cfg,
        cfg.hem.importance(),
        algorithms,
    )?;
    Ok((report, logs))
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
    pub verify: bool,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub report: ReportFile,
    pub report_path: PathBuf,
    /// `name (seed s): error` for each run that did not complete.
    pub failed_runs: Vec<String>,
    /// Mismatches found by re-verification; empty when not requested or clean.
    pub verify_problems: Vec<String>,
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Loads a config, runs it and writes `report.json` plus per-run logs into
/// the output directory.
pub fn cmd_run(config_path: &Path, opts: &RunOptions) -> Result<RunOutcome> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(seeds) = &opts.seeds {
        cfg.seeds = seeds.clone();
    }
    if let Some(dir) = &opts.out_dir {
        cfg.output.dir = dir.clone();
    }
    cfg.validate()?;
    let (report, logs) = run_suite(&cfg)?;
    let out = &cfg.output.dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    if cfg.output.round_logs {
        let dir = out.join("logs");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for l in &logs {
            let stem = format!("{}_seed{}", file_stem(&l.algorithm), l.seed);
            let json = serde_json::to_vec_pretty(&l.log).map_err(|e| Error::Report(e.to_string()))?;
            write_atomic(&dir.join(format!("{stem}.json")), &json)?;
            let mut csv = Vec::new();
            l.log.write_round_csv(&mut csv)?;
            write_atomic(&dir.join(format!("{stem}.csv")), &csv)?;
        }
    }
    let report_path = out.join(REPORT_FILE);
    report.write_atomic(&report_path)?;
    let failed_runs = logs
        .iter()
        .filter(|l| !l.log.completed)
        .map(|l| {
            format!(
                "{} (seed {}): {}",
                l.algorithm,
                l.seed,
                l.log.error.as_deref().unwrap_or("did not complete")
            )
        })
        .collect();
    let verify_problems = if opts.verify {
        ReportFile::load(&report_path)?.verify()?
    } else {
        Vec::new()
    };
    Ok(RunOutcome {
        report,
        report_path,
        failed_runs,
        verify_problems,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionRow {
    pub client_id: usize,
    pub classes: Vec<usize>,
    pub train_samples: usize,
    pub test_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionTable {
    pub seed: u64,
    pub rows: Vec<PartitionRow>,
}

impl fmt::Display for PartitionTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seed {}", self.seed)?;
        writeln!(f, "{:>6}  {:>6}  {:>6}  classes", "client", "train", "test")?;
        for r in &self.rows {
            let classes: Vec<String> = r.classes.iter().map(|c| c.to_string()).collect();
            writeln!(
                f,
                "{:>6}  {:>6}  {:>6}  {}",
                r.client_id,
                r.train_samples,
                r.test_samples,
                classes.join(",")
            )?;
        }
        Ok(())
    }
}

/// Client class assignments and shard sizes for one seed.
pub fn partition_inspect(cfg: &ExperimentConfig, seed: u64) -> Result<PartitionTable> {
    let shards = DataSource::load(&cfg.dataset)?.shards(cfg, seed)?;
    Ok(PartitionTable {
        seed,
        rows: shards
            .iter()
            .map(|s| PartitionRow {
                client_id: s.client_id,
                classes: s.class_list.clone(),
                train_samples: s.train.len(),
                test_samples: s.test.len(),
            })
            .collect(),
    })
}
