//! Acceptance suite: one PASS/FAIL line per criterion at pinned tolerances.
//! Exits non-zero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use common::*;
use hemfl_core::algorithms::feddyn_server_update;
use hemfl_core::data::{parse_cifar10_binary, CIFAR10_PIXELS, CIFAR10_RECORD_LEN};
use hemfl_core::fedsim::round_seed;
use hemfl_core::hem::{band, compose_hem, Band};
use hemfl_core::metrics::{
    comp_efficiency_indices, entropy, fairness_entropy, fairness_indices, EntropyVariant,
};
use hemfl_core::model::{init_params, loss_and_grad, sgd_train, ModelParams, ModelSpec};
use hemfl_core::pipeline::{cmd_run, run_suite, RunOptions, REPORT_FILE};
use hemfl_core::report::ReportFile;
use hemfl_core::{
    ClientShard, Error, ExperimentConfig, LabeledDataset, PersonalizerConfig, RunConfig,
    Simulation, StrategyConfig, UseCase,
};
use rand::seq::SliceRandom;
use rand::Rng;

type Outcome = Result<String, String>;

struct Suite {
    passed: usize,
    failed: Vec<String>,
}

impl Suite {
    fn check(&mut self, name: &str, f: impl FnOnce() -> Outcome) {
        match f() {
            Ok(detail) => {
                self.passed += 1;
                println!("PASS  {name}: {detail}");
            }
            Err(detail) => {
                self.failed.push(name.to_string());
                println!("FAIL  {name}: {detail}");
            }
        }
    }
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn hem_reproduction() -> Outcome {
    let t = table_indices();
    let hem = |name: &str, u: UseCase| compose_hem(&t[name], &u.importance()).map_err(|e| e.to_string());
    let cases = [
        ("FedAvg", UseCase::Institution, 0.78875, 0.79, 0.005),
        ("FedDyn_MAML", UseCase::Institution, 0.52125, 0.52, 0.005),
        ("FedDyn_Proto", UseCase::Iot, 0.707, 0.70, 0.01),
        ("FedAvg_MAML", UseCase::Iot, 0.519, 0.50, 0.03),
    ];
    let mut parts = Vec::new();
    for (name, u, exact, reported, tol) in cases {
        let h = hem(name, u)?;
        ensure(
            (h - exact).abs() < 1e-12,
            format!("{name} {}: {h} != {exact}", u.name()),
        )?;
        ensure(
            (h - reported).abs() <= tol + 1e-12,
            format!("{name} {}: {h} not within {tol} of {reported}", u.name()),
        )?;
        parts.push(format!("{name}/{}={h:.5}", u.name()));
    }
    ensure(
        band(hem("FedAvg", UseCase::Institution)?).map_err(|e| e.to_string())? == Band::Good,
        "FedAvg institution is not banded Good",
    )?;
    Ok(parts.join(", "))
}

/// Formula outputs for reference values that do not recompute from the
/// table; printed, never asserted.
fn discrepancy_notes() -> Vec<String> {
    let t = table_indices();
    let mut out = Vec::new();
    let h = compose_hem(&t["FedAvg_Proto"], &UseCase::Iot.importance()).unwrap();
    out.push(format!("FedAvg_Proto/iot formula {h:.4} (reference 0.76)"));
    for name in ["FedAvg_Proto", "FedDyn_Proto", "SCAFFOLD_Proto"] {
        let h = compose_hem(&t[name], &UseCase::Smartphone.importance()).unwrap();
        out.push(format!("{name}/smartphone formula {h:.4} (reference >0.80)"));
    }
    let h = compose_hem(&t["SCAFFOLD"], &UseCase::Institution.importance()).unwrap();
    out.push(format!("SCAFFOLD/institution formula {h:.4} (reference 0.52)"));
    out
}

fn entropy_criterion() -> Outcome {
    let ones = fairness_entropy(&[1.0; 20]).map_err(|e| e.to_string())?;
    ensure(ones == 0.0 && ones.is_sign_positive(), format!("all-ones entropy {ones}"))?;
    let half = fairness_entropy(&[0.5, 0.5]).map_err(|e| e.to_string())?;
    ensure(
        (half - std::f64::consts::LN_2).abs() < 1e-12,
        format!("[0.5, 0.5] entropy {half}"),
    )?;
    let mut r = rng(2024);
    for i in 0..100 {
        let n = r.random_range(1..40);
        let list: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        let mut perm = list.clone();
        perm.shuffle(&mut r);
        let (a, b) = (fairness_entropy(&list).unwrap(), fairness_entropy(&perm).unwrap());
        ensure((a - b).abs() < 1e-12, format!("list {i}: {a} vs {b}"))?;
    }
    Ok(format!("H(ones)=0, H([.5,.5])={half:.12}, 100 permutations invariant"))
}

fn comparative_extremes() -> Outcome {
    // raw measurements that the table's indices are min-max images of:
    // entropy = 1 + 10 (1 - fairness), tta = 5 + 100 (1 - comp_efficiency)
    let entropies: BTreeMap<String, f64> = TABLE
        .iter()
        .map(|(n, x)| (n.to_string(), 1.0 + 10.0 * (1.0 - x[3])))
        .collect();
    let ttas: BTreeMap<String, f64> = TABLE
        .iter()
        .map(|(n, x)| (n.to_string(), 5.0 + 100.0 * (1.0 - x[2])))
        .collect();
    let fair = fairness_indices(&entropies).map_err(|e| e.to_string())?;
    let comp = comp_efficiency_indices(&ttas).map_err(|e| e.to_string())?;
    let argmin = |m: &BTreeMap<String, f64>| {
        m.iter().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0.clone()
    };
    let argmax = |m: &BTreeMap<String, f64>| {
        m.iter().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0.clone()
    };
    let (lo_h, hi_h, hi_t) = (argmin(&entropies), argmax(&entropies), argmax(&ttas));
    ensure(fair[&lo_h] == 1.0, format!("min-entropy {lo_h} fairness {}", fair[&lo_h]))?;
    ensure(fair[&hi_h] == 0.0, format!("max-entropy {hi_h} fairness {}", fair[&hi_h]))?;
    ensure(comp[&hi_t] == 0.0, format!("max-TTA {hi_t} comp_efficiency {}", comp[&hi_t]))?;
    // independent min-max image of each table column; the fairness column
    // already spans [0, 1], the comp-efficiency column tops out below 1
    let rescaled = |col: usize, v: f64| {
        let lo = TABLE.iter().map(|(_, x)| x[col]).fold(f64::INFINITY, f64::min);
        let hi = TABLE.iter().map(|(_, x)| x[col]).fold(f64::NEG_INFINITY, f64::max);
        (v - lo) / (hi - lo)
    };
    for (name, x) in TABLE {
        ensure((fair[name] - x[3]).abs() < 1e-12, format!("{name} fairness {}", fair[name]))?;
        let want = rescaled(2, x[2]);
        ensure(
            (comp[name] - want).abs() < 1e-12,
            format!("{name} comp {} vs {want}", comp[name]),
        )?;
    }
    Ok(format!(
        "fairness {lo_h}=1.00 {hi_h}=0.00; comp_efficiency {hi_t}=0.00; fairness column recovered, comp column recovered up to min-max rescaling"
    ))
}

fn near_kink(spec: &ModelSpec, values: &[f64], batch: &LabeledDataset) -> bool {
    let (d, h) = (spec.n_features, spec.hidden_units.unwrap_or(0));
    if h == 0 {
        return false;
    }
    (0..batch.len()).any(|r| {
        let x = batch.row(r);
        (0..h).any(|j| {
            let z: f64 = values[h * d + j] + (0..d).map(|k| values[j * d + k] * x[k]).sum::<f64>();
            z.abs() < 1e-3
        })
    })
}

fn gradient_criterion() -> Outcome {
    const DRAWS: usize = 50;
    let mut r = rng(7);
    let mut worst = [0.0f64; 3];
    for (slot, kind) in ["linear", "mlp", "feddyn"].iter().enumerate() {
        let mut done = 0;
        let mut tries = 0;
        while done < DRAWS {
            tries += 1;
            if tries > 50 * DRAWS {
                return Err(format!("{kind}: too many draws rejected at the ReLU kink"));
            }
            let spec = match *kind {
                "linear" => linear_spec(r.random_range(1..6), r.random_range(2..6)),
                "mlp" => mlp_spec(r.random_range(1..5), r.random_range(2..5), r.random_range(1..6)),
                _ if done % 2 == 0 => linear_spec(3, 3),
                _ => mlp_spec(3, 3, 4),
            };
            let p = random_params(&spec, 1.0, &mut r);
            let batch = random_batch(spec.n_features, spec.num_classes, r.random_range(1..8), &mut r);
            if near_kink(&spec, &p.values, &batch) {
                continue;
            }
            let (analytic, numeric) = if *kind == "feddyn" {
                let global = random_params(&spec, 1.0, &mut r).values;
                let g_i = random_params(&spec, 0.5, &mut r).values;
                let alpha = 0.01 + r.random::<f64>();
                let f = |v: &[f64]| {
                    hemfl_core::algorithms::feddyn_objective(v, &spec, &batch, &global, &g_i, alpha)
                        .unwrap()
                };
                (f(&p.values).1, numeric_grad(&p.values, 1e-5, |v| f(v).0))
            } else {
                let loss = |v: &[f64]| {
                    let q = ModelParams::from_values(&spec, v.to_vec()).unwrap();
                    loss_and_grad(&q, &spec, &batch).unwrap()
                };
                (loss(&p.values).1, numeric_grad(&p.values, 1e-5, |v| loss(v).0))
            };
            let e = max_rel_err(&analytic, &numeric);
            worst[slot] = worst[slot].max(e);
            if e >= 1e-4 {
                return Err(format!("{kind} draw {done}: relative error {e:e}"));
            }
            done += 1;
        }
    }
    Ok(format!(
        "50 draws each, max relative error linear {:.1e}, mlp {:.1e}, feddyn {:.1e}",
        worst[0], worst[1], worst[2]
    ))
}

fn run_cfg(strategy: StrategyConfig, rounds: usize) -> RunConfig {
    RunConfig {
        algorithm_name: strategy.name().into(),
        model: linear_spec(5, 4),
        training: sgd(0.1, 8, 2),
        strategy,
        personalizer: PersonalizerConfig::default(),
        rounds,
        participation: 1.0,
        eval_every: 1,
        early_stop_accuracy: None,
        seed: 42,
    }
}

fn trajectory(cfg: &RunConfig, shards: Vec<ClientShard>) -> Result<Vec<Vec<f64>>, Error> {
    let mut sim = Simulation::new(cfg.clone(), shards)?;
    (0..cfg.rounds)
        .map(|_| {
            sim.step()?;
            Ok(sim.server().global.values.clone())
        })
        .collect()
}

fn oracle_equivalences() -> Outcome {
    let e = |x: Error| x.to_string();
    // one-client FedAvg round vs centralized SGD
    let cfg = run_cfg(StrategyConfig::fedavg(), 1);
    let one = identical_shards(1, 17);
    let fed = trajectory(&cfg, one.clone()).map_err(e)?;
    let p0 = init_params(&cfg.model).map_err(e)?;
    let central = sgd_train(&p0, &cfg.model, &one[0].train, &cfg.training, round_seed(cfg.seed, 1))
        .map_err(e)?
        .0;
    ensure(fed[0] == central.values, "one-client FedAvg differs from centralized SGD")?;

    // SCAFFOLD with zero control variates on identical clients, 10 rounds
    let clients = identical_shards(4, 18);
    let a = trajectory(&run_cfg(StrategyConfig::fedavg(), 10), clients.clone()).map_err(e)?;
    let b = trajectory(&run_cfg(StrategyConfig::Scaffold { server_lr: 1.0 }, 10), clients)
        .map_err(e)?;
    if let Some(r) = a.iter().zip(&b).position(|(x, y)| x != y) {
        return Err(format!("SCAFFOLD departs from FedAvg at round {}", r + 1));
    }

    // FedDyn server fixed point
    let w = [0.3, -1.25, 2.0, 1e-4, -7.5];
    let (w_next, h_next) = feddyn_server_update(&[0.0; 5], &[&w, &w, &w], &w, 0.1, 3).map_err(e)?;
    ensure(w_next == w.to_vec(), "FedDyn fixed point moved w")?;
    ensure(h_next.iter().all(|v| *v == 0.0), "FedDyn fixed point moved h")?;
    Ok("one-client FedAvg == SGD, SCAFFOLD == FedAvg for 10 rounds, FedDyn fixed point, all bitwise".into())
}

struct DeskResults {
    report: ReportFile,
}

fn desk_run() -> Result<DeskResults, String> {
    let cfg = ExperimentConfig::load(workspace_root().join("configs/desk.toml"))
        .map_err(|e| e.to_string())?;
    let (report, _) = run_suite(&cfg).map_err(|e| e.to_string())?;
    Ok(DeskResults { report })
}

fn desk_accuracy(d: &DeskResults) -> Outcome {
    let mut parts = Vec::new();
    for name in ["FedAvg", "FedDyn", "SCAFFOLD"] {
        let alg = d.report.algorithms.iter().find(|a| a.name == name).ok_or("missing")?;
        let accs: Vec<f64> = alg.seeds.iter().map(|s| s.accuracy.unwrap_or(f64::NAN)).collect();
        let lo = accs.iter().cloned().fold(f64::INFINITY, f64::min);
        ensure(lo >= 0.75, format!("{name} accuracy per seed {accs:.3?}"))?;
        parts.push(format!("{name} min {lo:.3}"));
    }
    Ok(parts.join(", "))
}

const PAIRS: [(&str, &str); 4] = [
    ("FedAvg_MAML", "FedAvg"),
    ("FedAvg_Proto", "FedAvg"),
    ("SCAFFOLD_MAML", "SCAFFOLD"),
    ("SCAFFOLD_Proto", "SCAFFOLD"),
];

fn desk_mpi(d: &DeskResults) -> Outcome {
    let mut parts = Vec::new();
    for (pfl, base) in PAIRS {
        let alg = d.report.algorithms.iter().find(|a| a.name == pfl).ok_or("missing")?;
        ensure(alg.base.as_deref() == Some(base), format!("{pfl} base is {:?}", alg.base))?;
        let mpis: Option<Vec<f64>> = alg.seeds.iter().map(|s| s.mpi).collect();
        let mpis = mpis.ok_or(format!("{pfl} has an undefined MPI"))?;
        let m = median(mpis);
        ensure(m > 0.0, format!("{pfl} median MPI {m}"))?;
        parts.push(format!("{pfl} {m:.2}%"));
    }
    Ok(parts.join(", "))
}

/// Per-seed fairness indices over the whole algorithm set.
fn fairness_by_seed(d: &DeskResults, variant: EntropyVariant) -> Vec<BTreeMap<String, f64>> {
    let n_seeds = d.report.algorithms[0].seeds.len();
    (0..n_seeds)
        .map(|s| {
            let ent: BTreeMap<String, f64> = d
                .report
                .algorithms
                .iter()
                .map(|a| {
                    let acc = &a.seeds[s].final_client_accuracies;
                    (a.name.clone(), entropy(acc, variant).unwrap())
                })
                .collect();
            fairness_indices(&ent).unwrap()
        })
        .collect()
}

fn fairness_comparison(d: &DeskResults, variant: EntropyVariant) -> (bool, String) {
    let per_seed = fairness_by_seed(d, variant);
    let mut ok = true;
    let mut parts = Vec::new();
    for (pfl, base) in PAIRS {
        let p = median(per_seed.iter().map(|m| m[pfl]).collect());
        let b = median(per_seed.iter().map(|m| m[base]).collect());
        ok &= p <= b;
        parts.push(format!("{pfl} {p:.3} vs {base} {b:.3}"));
    }
    (ok, parts.join(", "))
}

fn desk_fairness(d: &DeskResults) -> Outcome {
    let (ok, detail) = fairness_comparison(d, EntropyVariant::Raw);
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn strip_wall_clock(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, x) in map.iter_mut() {
                if k == "wall_clock_seconds" {
                    *x = serde_json::Value::Null;
                } else {
                    strip_wall_clock(x);
                }
            }
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_wall_clock),
        _ => {}
    }
}

fn normalized_json(path: &Path) -> Result<String, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut v: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    strip_wall_clock(&mut v);
    serde_json::to_string_pretty(&v).map_err(|e| e.to_string())
}

fn normalized_csv(path: &Path) -> Result<String, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(text
        .lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n"))
}

fn determinism(d: &DeskResults) -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = workspace_root().join("configs/quick.toml");
    let mut outs = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let outcome = cmd_run(
            &config,
            &RunOptions {
                out_dir: Some(out.clone()),
                seeds: None,
                verify: true,
            },
        )
        .map_err(|e| e.to_string())?;
        ensure(
            outcome.verify_problems.is_empty(),
            format!("verify on run {run}: {:?}", outcome.verify_problems),
        )?;
        ensure(outcome.failed_runs.is_empty(), format!("failed runs {:?}", outcome.failed_runs))?;
        outs.push(out);
    }
    let a = normalized_json(&outs[0].join(REPORT_FILE))?;
    let b = normalized_json(&outs[1].join(REPORT_FILE))?;
    ensure(a == b, "reports differ beyond wall-clock fields")?;
    let mut files = 0;
    for entry in std::fs::read_dir(outs[0].join("logs")).map_err(|e| e.to_string())? {
        let p = entry.map_err(|e| e.to_string())?.path();
        let other = outs[1].join("logs").join(p.file_name().unwrap());
        let same = if p.extension().is_some_and(|x| x == "csv") {
            normalized_csv(&p)? == normalized_csv(&other)?
        } else {
            normalized_json(&p)? == normalized_json(&other)?
        };
        ensure(same, format!("{} differs between runs", p.display()))?;
        files += 1;
    }
    // the desk report verifies too, before and after a JSON round trip
    let problems = d.report.verify().map_err(|e| e.to_string())?;
    ensure(problems.is_empty(), format!("desk report: {problems:?}"))?;
    let back = ReportFile::from_json(&d.report.to_json().map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let problems = back.verify().map_err(|e| e.to_string())?;
    ensure(problems.is_empty(), format!("desk report after round trip: {problems:?}"))?;
    Ok(format!("report + {files} log files identical modulo wall clock; verify clean on 3 reports"))
}

fn cifar_criterion() -> Outcome {
    let mut r = rng(99);
    let n = 5;
    let mut bytes = Vec::with_capacity(n * CIFAR10_RECORD_LEN);
    for _ in 0..n {
        bytes.push(r.random_range(0..10u8));
        bytes.extend((0..CIFAR10_PIXELS).map(|_| r.random::<u8>()));
    }
    let ds = parse_cifar10_binary(&bytes).map_err(|e| e.to_string())?;
    let mut again = Vec::with_capacity(bytes.len());
    for i in 0..ds.len() {
        again.push(ds.labels()[i] as u8);
        again.extend(ds.row(i).iter().map(|v| (v * 255.0).round() as u8));
    }
    ensure(again == bytes, "round trip changed the bytes")?;
    ensure(
        matches!(parse_cifar10_binary(&bytes[..bytes.len() - 7]), Err(Error::Format(_))),
        "truncated input accepted",
    )?;
    let mut bad = bytes.clone();
    bad[2 * CIFAR10_RECORD_LEN] = 200;
    ensure(
        matches!(parse_cifar10_binary(&bad), Err(Error::Format(_))),
        "bad label accepted",
    )?;
    Ok(format!("{n} records round-trip; truncated and bad-label inputs rejected"))
}

fn main() {
    let start = std::time::Instant::now();
    let mut suite = Suite {
        passed: 0,
        failed: Vec::new(),
    };
    suite.check("HEM reproduction", hem_reproduction);
    for note in discrepancy_notes() {
        println!("NOTE  {note}");
    }
    suite.check("fairness entropy", entropy_criterion);
    suite.check("comparative index extremes", comparative_extremes);
    suite.check("gradient correctness", gradient_criterion);
    suite.check("oracle equivalences", oracle_equivalences);

    match desk_run() {
        Ok(desk) => {
            suite.check("desk-scale: strategies reach 0.75 accuracy", || desk_accuracy(&desk));
            suite.check("desk-scale: median MPI > 0", || desk_mpi(&desk));
            suite.check("desk-scale: PFL fairness index <= base", || desk_fairness(&desk));
            let (ok, detail) = fairness_comparison(&desk, EntropyVariant::Normalized);
            println!(
                "NOTE  normalized-entropy variant would {}: {detail}",
                if ok { "pass" } else { "fail" }
            );
            suite.check("determinism and self-verification", || determinism(&desk));
        }
        Err(e) => {
            for name in [
                "desk-scale: strategies reach 0.75 accuracy",
                "desk-scale: median MPI > 0",
                "desk-scale: PFL fairness index <= base",
                "determinism and self-verification",
            ] {
                suite.check(name, || Err(format!("desk run failed: {e}")));
            }
        }
    }
    suite.check("CIFAR-10 parser", cifar_criterion);

    println!(
        "\nacceptance: {} passed, {} failed in {:.1}s",
        suite.passed,
        suite.failed.len(),
        start.elapsed().as_secs_f64()
    );
    if !suite.failed.is_empty() {
        println!("failed: {}", suite.failed.join("; "));
        std::process::exit(1);
    }
}
