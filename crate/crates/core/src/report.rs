//! The JSON report written by `run` and consumed by `hem`, `verify` and the
//! explorer UI.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedsim::{mean, ExperimentLog};
use crate::hem::{band, compose_hem, rank, Band, ImportanceVector};
use crate::metrics::{
    accuracy_index, comp_efficiency_indices, convergence_from_round, entropy,
    fairness_indices, final_client_accuracies, first_crossing_round, personalization_indices,
    tta, ComponentIndices, MetricConfig,
};
use crate::personalization::compute_mpi;

pub const SCHEMA_VERSION: u32 = 1;

/// Raw measurements of one algorithm under one seed. Fields are absent when
/// the run produced no rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMeasurement {
    pub seed: u64,
    pub completed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub rounds_run: usize,
    pub r_star: Option<usize>,
    pub accuracy: Option<f64>,
    pub tta: Option<f64>,
    pub entropy: Option<f64>,
    /// Only for personalized algorithms whose base run also completed.
    pub mpi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mpi_error: Option<String>,
    pub final_client_accuracies: Vec<f64>,
    pub wall_clock_seconds: f64,
}

impl SeedMeasurement {
    /// Everything except MPI, which needs the base run.
    pub fn from_log(seed: u64, log: &ExperimentLog, cfg: &MetricConfig) -> Result<Self> {
        let wall_clock_seconds = log.records.iter().map(|r| r.wall_clock_seconds).sum();
        if log.records.is_empty() {
            return Ok(Self {
                seed,
                completed: log.completed,
                error: log.error.clone(),
                rounds_run: 0,
                r_star: None,
                accuracy: None,
                tta: None,
                entropy: None,
                mpi: None,
                mpi_error: None,
                final_client_accuracies: Vec::new(),
                wall_clock_seconds,
            });
        }
        let finals = final_client_accuracies(log, cfg)?;
        // a diverged run can carry NaN accuracies; its entropy stays absent
        let entropy = entropy(&finals, cfg.entropy).ok();
        Ok(Self {
            seed,
            completed: log.completed,
            error: log.error.clone(),
            rounds_run: log.records.len(),
            r_star: Some(first_crossing_round(log, cfg)),
            accuracy: Some(accuracy_index(log, cfg)?).filter(|a| a.is_finite()),
            tta: Some(tta(log, cfg)?),
            entropy,
            mpi: None,
            mpi_error: None,
            final_client_accuracies: finals,
            wall_clock_seconds,
        })
    }

    fn usable(&self) -> bool {
        self.completed && self.accuracy.is_some() && self.entropy.is_some()
    }
}

/// Seed-averaged raw measurements; absent unless every seed completed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedAverages {
    pub accuracy: f64,
    pub convergence: f64,
    pub tta: f64,
    pub entropy: f64,
    pub mpi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmReport {
    pub name: String,
    pub strategy: String,
    pub personalizer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<String>,
    pub seeds: Vec<SeedMeasurement>,
    pub averages: Option<SeedAverages>,
    pub components: Option<ComponentIndices>,
    pub hem_score: Option<f64>,
    pub band: Option<Band>,
}

impl AlgorithmReport {
    pub fn completed(&self) -> bool {
        !self.seeds.is_empty() && self.seeds.iter().all(SeedMeasurement::usable)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub schema_version: u32,
    pub config_fingerprint: String,
    pub metric_config: MetricConfig,
    pub importance: ImportanceVector,
    pub algorithms: Vec<AlgorithmReport>,
    /// Scored algorithms by descending HEM.
    pub ranking: Vec<String>,
    /// Per-component differences between personalized algorithms and their base.
    pub trade_offs: Vec<String>,
}

/// Fills `mpi` for each personalized algorithm from its base's final client
/// accuracies under the same seed.
pub fn attach_mpi(algorithms: &mut [AlgorithmReport]) {
    let finals: BTreeMap<(String, u64), (bool, Vec<f64>)> = algorithms
        .iter()
        .flat_map(|a| {
            a.seeds.iter().map(move |s| {
                (
                    (a.name.clone(), s.seed),
                    (s.usable(), s.final_client_accuracies.clone()),
                )
            })
        })
        .collect();
    for alg in algorithms.iter_mut() {
        let Some(base) = alg.base.clone() else { continue };
        for s in alg.seeds.iter_mut() {
            s.mpi = None;
            s.mpi_error = None;
            if !s.usable() {
                continue;
            }
            match finals.get(&(base.clone(), s.seed)) {
                Some((true, base_acc)) => match compute_mpi(&s.final_client_accuracies, base_acc) {
                    Ok(m) => s.mpi = Some(m),
                    Err(e) => s.mpi_error = Some(e.to_string()),
                },
                _ => s.mpi_error = Some(format!("base '{base}' did not complete")),
            }
        }
    }
}

fn averages(alg: &AlgorithmReport, cfg: &MetricConfig) -> Option<SeedAverages> {
    if !alg.completed() {
        return None;
    }
    let pick = |f: &dyn Fn(&SeedMeasurement) -> Option<f64>| -> Option<f64> {
        let v: Option<Vec<f64>> = alg.seeds.iter().map(f).collect();
        v.map(|v| mean(&v))
    };
    Some(SeedAverages {
        accuracy: pick(&|s| s.accuracy)?,
        convergence: pick(&|s| {
            s.r_star
                .map(|r| convergence_from_round(r, cfg.round_budget))
        })?,
        tta: pick(&|s| s.tta)?,
        entropy: pick(&|s| s.entropy)?,
        mpi: alg.base.as_ref().and_then(|_| pick(&|s| s.mpi)),
    })
}

/// Recomputes seed averages and comparative component indices. Algorithms
/// with any incomplete seed are left out of every comparative set.
pub fn derive_components(algorithms: &mut [AlgorithmReport], cfg: &MetricConfig) -> Result<()> {
    for alg in algorithms.iter_mut() {
        alg.averages = averages(alg, cfg);
        alg.components = None;
    }
    let collect = |f: &dyn Fn(&SeedAverages) -> Option<f64>| -> BTreeMap<String, f64> {
        algorithms
            .iter()
            .filter_map(|a| a.averages.as_ref().and_then(f).map(|v| (a.name.clone(), v)))
            .collect()
    };
    let ttas = collect(&|a| Some(a.tta));
    if ttas.is_empty() {
        return Ok(());
    }
    let comp = comp_efficiency_indices(&ttas)?;
    let fair = fairness_indices(&collect(&|a| Some(a.entropy)))?;
    let mpis = collect(&|a| a.mpi);
    let pers = if mpis.is_empty() {
        BTreeMap::new()
    } else {
        personalization_indices(&mpis)?
    };
    for alg in algorithms.iter_mut() {
        let Some(avg) = alg.averages else { continue };
        alg.components = Some(ComponentIndices {
            accuracy: avg.accuracy,
            convergence: avg.convergence,
            comp_efficiency: comp[&alg.name],
            fairness: fair[&alg.name],
            personalization: pers.get(&alg.name).copied(),
        });
    }
    Ok(())
}

/// Scores, bands and ranks every algorithm that has component indices.
pub fn score(algorithms: &mut [AlgorithmReport], importance: &ImportanceVector) -> Result<Vec<String>> {
    importance.validate()?;
    let mut scores = BTreeMap::new();
    for alg in algorithms.iter_mut() {
        alg.hem_score = None;
        alg.band = None;
        if let Some(idx) = &alg.components {
            let h = compose_hem(idx, importance)?;
            alg.hem_score = Some(h);
            alg.band = Some(band(h)?);
            scores.insert(alg.name.clone(), h);
        }
    }
    Ok(rank(&scores))
}

pub fn trade_offs(algorithms: &[AlgorithmReport]) -> Vec<String> {
    let by_name: BTreeMap<&str, &AlgorithmReport> =
        algorithms.iter().map(|a| (a.name.as_str(), a)).collect();
    let mut out = Vec::new();
    for alg in algorithms {
        let (Some(base), Some(c)) = (alg.base.as_deref(), alg.components) else {
            continue;
        };
        let Some(b) = by_name.get(base).and_then(|b| b.components) else {
            continue;
        };
        let mut parts = vec![
            format!("accuracy {:+.3}", c.accuracy - b.accuracy),
            format!("convergence {:+.3}", c.convergence - b.convergence),
            format!("comp_efficiency {:+.3}", c.comp_efficiency - b.comp_efficiency),
            format!("fairness {:+.3}", c.fairness - b.fairness),
        ];
        if let Some(p) = c.personalization {
            parts.push(format!("personalization index {p:.3}"));
        }
        out.push(format!("{} vs {}: {}", alg.name, base, parts.join(", ")));
    }
    out
}

impl ReportFile {
    /// Builds a fully derived report from raw per-seed measurements.
    pub fn build(
        config_fingerprint: String,
        metric_config: MetricConfig,
        importance: ImportanceVector,
        mut algorithms: Vec<AlgorithmReport>,
    ) -> Result<Self> {
        attach_mpi(&mut algorithms);
        derive_components(&mut algorithms, &metric_config)?;
        let ranking = score(&mut algorithms, &importance)?;
        let trade_offs = trade_offs(&algorithms);
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            config_fingerprint,
            metric_config,
            importance,
            algorithms,
            ranking,
            trade_offs,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text).map_err(|e| Error::Report(e.to_string()))?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::Report(format!(
                "unsupported schema version {} (expected {SCHEMA_VERSION})",
                r.schema_version
            )));
        }
        Ok(r)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Report(e.to_string()))
    }

    /// Writes the report through a temporary file in the same directory so
    /// readers never observe a partial file.
    pub fn write_atomic(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_json()?.as_bytes())
    }

    /// Same measurements and indices scored under another importance vector.
    pub fn rescore(&self, importance: ImportanceVector) -> Result<Self> {
        let mut out = self.clone();
        out.ranking = score(&mut out.algorithms, &importance)?;
        out.importance = importance;
        Ok(out)
    }

    /// Recomputes every derived field from the raw measurements and checks
    /// that it matches exactly. Returns the list of mismatches.
    pub fn verify(&self) -> Result<Vec<String>> {
        let rebuilt = ReportFile::build(
            self.config_fingerprint.clone(),
            self.metric_config,
            self.importance.clone(),
            self.algorithms.clone(),
        )?;
        let mut problems = Vec::new();
        for s in self.algorithms.iter().flat_map(|a| a.seeds.iter().map(move |s| (a, s))) {
            let (alg, m) = s;
            if let Some(e) = m.entropy {
                let again = entropy(&m.final_client_accuracies, self.metric_config.entropy)?;
                if again != e {
                    problems.push(format!("{} seed {}: entropy {e} != {again}", alg.name, m.seed));
                }
            }
        }
        for (a, b) in self.algorithms.iter().zip(&rebuilt.algorithms) {
            for (sa, sb) in a.seeds.iter().zip(&b.seeds) {
                if sa.mpi != sb.mpi {
                    problems.push(format!(
                        "{} seed {}: mpi {:?} != {:?}",
                        a.name, sa.seed, sa.mpi, sb.mpi
                    ));
                }
            }
            if a.averages != b.averages {
                problems.push(format!("{}: seed averages differ", a.name));
            }
            if a.components != b.components {
                problems.push(format!(
                    "{}: components {:?} != {:?}",
                    a.name, a.components, b.components
                ));
            }
            if a.hem_score != b.hem_score || a.band != b.band {
                problems.push(format!(
                    "{}: HEM {:?}/{:?} != {:?}/{:?}",
                    a.name, a.hem_score, a.band, b.hem_score, b.band
                ));
            }
        }
        if self.algorithms.len() != rebuilt.algorithms.len() {
            problems.push("algorithm count differs".into());
        }
        if self.ranking != rebuilt.ranking {
            problems.push(format!("ranking {:?} != {:?}", self.ranking, rebuilt.ranking));
        }
        Ok(problems)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
