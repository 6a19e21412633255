use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use hemfl_core::config::ExperimentConfig;
use hemfl_core::pipeline::{cmd_run, partition_inspect, RunOptions};
use hemfl_core::{ReportFile, UseCase};

/// Federated-learning simulator and HEM evaluation toolkit.
#[derive(Debug, Parser)]
#[command(name = "hemfl", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate every algorithm in a config and write report.json plus logs.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `[output] dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seeds; overrides `seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Reload the written report and recompute every derived field.
        #[arg(long)]
        verify: bool,
    },
    /// Rescore an existing report under another importance profile.
    Hem {
        #[arg(long)]
        report: PathBuf,
        /// iot, smartphone or institution.
        #[arg(long)]
        use_case: Option<UseCase>,
        /// Overrides as `component=level,...`, applied on top of the use case
        /// (or the report's own profile).
        #[arg(long)]
        importance: Option<String>,
        /// Write the rescored report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Show the client class assignment and shard sizes.
    PartitionInspect {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the first seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Recompute every derived field of a report and compare.
    Verify {
        #[arg(long)]
        report: PathBuf,
    },
}

fn print_scores(report: &ReportFile) {
    println!("importance profile: {}", report.importance.use_case_name);
    println!("{:<4} {:<20} {:>7}  band", "rank", "algorithm", "hem");
    for (i, name) in report.ranking.iter().enumerate() {
        let alg = report.algorithms.iter().find(|a| &a.name == name);
        if let Some(a) = alg {
            let hem = a.hem_score.map_or("-".to_string(), |h| format!("{h:.4}"));
            let band = a.band.map_or("-".to_string(), |b| b.to_string());
            println!("{:<4} {:<20} {:>7}  {}", i + 1, a.name, hem, band);
        }
    }
    for a in report.algorithms.iter().filter(|a| a.hem_score.is_none()) {
        println!("{:<4} {:<20} {:>7}  not scored (incomplete runs)", "-", a.name, "-");
    }
    for t in &report.trade_offs {
        println!("  {t}");
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run {
            config,
            out,
            seeds,
            verify,
        } => {
            let outcome = cmd_run(
                &config,
                &RunOptions {
                    out_dir: out,
                    seeds,
                    verify,
                },
            )
            .with_context(|| format!("running {}", config.display()))?;
            print_scores(&outcome.report);
            println!("report written to {}", outcome.report_path.display());
            for f in &outcome.failed_runs {
                eprintln!("run failed: {f}");
            }
            for p in &outcome.verify_problems {
                eprintln!("verify: {p}");
            }
            Ok(outcome.failed_runs.is_empty() && outcome.verify_problems.is_empty())
        }
        Command::Hem {
            report,
            use_case,
            importance,
            out,
        } => {
            let loaded = ReportFile::load(&report)
                .with_context(|| format!("loading {}", report.display()))?;
            let mut profile = use_case.map_or_else(|| loaded.importance.clone(), |u| u.importance());
            if let Some(spec) = importance {
                profile = profile.with_overrides(&spec)?;
            }
            let rescored = loaded.rescore(profile)?;
            if let Some(path) = &out {
                rescored
                    .write_atomic(path)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            print_scores(&rescored);
            if let Some(path) = out {
                println!("report written to {}", path.display());
            }
            Ok(true)
        }
        Command::PartitionInspect { config, seed } => {
            let cfg = ExperimentConfig::load(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            let seed = match seed.or_else(|| cfg.seeds.first().copied()) {
                Some(s) => s,
                None => bail!("config has no seeds; pass --seed"),
            };
            print!("{}", partition_inspect(&cfg, seed)?);
            Ok(true)
        }
        Command::Verify { report } => {
            let loaded = ReportFile::load(&report)
                .with_context(|| format!("loading {}", report.display()))?;
            let problems = loaded.verify()?;
            if problems.is_empty() {
                println!("ok: every derived field matches");
            }
            for p in &problems {
                println!("mismatch: {p}");
            }
            Ok(problems.is_empty())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
