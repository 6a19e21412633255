//! Importance vectors, use-case presets, the holistic score, banding and ranking.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ComponentIndices;

/// Non-negative importance weight. The named levels are Low = 1,
/// Moderate = 2 and High = 3.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize)]
#[serde(transparent)]
pub struct ImportanceLevel(f64);

impl ImportanceLevel {
    pub const LOW: Self = Self(1.0);
    pub const MODERATE: Self = Self(2.0);
    pub const HIGH: Self = Self(3.0);

    pub fn new(value: f64) -> Result<Self> {
        if value >= 0.0 && value.is_finite() {
            Ok(Self(value))
        } else {
            Err(Error::arg(format!("importance {value} must be finite and non-negative")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl FromStr for ImportanceLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "low" => Ok(Self::LOW),
            "moderate" => Ok(Self::MODERATE),
            "high" => Ok(Self::HIGH),
            other => other
                .parse::<f64>()
                .map_err(|_| Error::arg(format!("unknown importance level '{s}'")))
                .and_then(Self::new),
        }
    }
}

impl<'de> Deserialize<'de> for ImportanceLevel {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Name(String),
        }
        let parsed = match Raw::deserialize(de)? {
            Raw::Num(v) => Self::new(v),
            Raw::Name(s) => s.parse(),
        };
        parsed.map_err(serde::de::Error::custom)
    }
}

/// Per-component importance for one use case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImportanceVector {
    #[serde(default = "custom_name")]
    pub use_case_name: String,
    pub accuracy: ImportanceLevel,
    pub convergence: ImportanceLevel,
    pub comp_efficiency: ImportanceLevel,
    pub fairness: ImportanceLevel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub personalization: Option<ImportanceLevel>,
}

fn custom_name() -> String {
    "custom".to_string()
}

impl ImportanceVector {
    pub fn validate(&self) -> Result<()> {
        let any_positive = [
            self.accuracy,
            self.convergence,
            self.comp_efficiency,
            self.fairness,
        ]
        .into_iter()
        .chain(self.personalization)
        .any(|l| l.value() > 0.0);
        if any_positive {
            Ok(())
        } else {
            Err(Error::arg("importance vector has no positive level"))
        }
    }

    /// Applies `key=value` pairs separated by commas, e.g.
    /// `accuracy=3,fairness=high`. Keys not mentioned keep their value.
    pub fn with_overrides(mut self, spec: &str) -> Result<Self> {
        for pair in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| Error::arg(format!("expected key=value, got '{pair}'")))?;
            let level: ImportanceLevel = value.parse()?;
            match key.trim() {
                "accuracy" => self.accuracy = level,
                "convergence" => self.convergence = level,
                "comp_efficiency" => self.comp_efficiency = level,
                "fairness" => self.fairness = level,
                "personalization" => self.personalization = Some(level),
                other => return Err(Error::arg(format!("unknown component '{other}'"))),
            }
        }
        self.use_case_name = custom_name();
        self.validate()?;
        Ok(self)
    }

    /// Every level multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let s = |l: ImportanceLevel| ImportanceLevel::new(l.value() * factor);
        Ok(Self {
            use_case_name: self.use_case_name.clone(),
            accuracy: s(self.accuracy)?,
            convergence: s(self.convergence)?,
            comp_efficiency: s(self.comp_efficiency)?,
            fairness: s(self.fairness)?,
            personalization: self.personalization.map(s).transpose()?,
        })
    }
}

/// The three documented deployment profiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UseCase {
    Iot,
    Smartphone,
    Institution,
}

impl UseCase {
    pub const ALL: [UseCase; 3] = [UseCase::Iot, UseCase::Smartphone, UseCase::Institution];

    pub fn name(self) -> &'static str {
        match self {
            UseCase::Iot => "iot",
            UseCase::Smartphone => "smartphone",
            UseCase::Institution => "institution",
        }
    }

    /// Importance levels for (accuracy, convergence, comp_efficiency,
    /// fairness). Personalization defaults to Moderate.
    pub fn importance(self) -> ImportanceVector {
        use ImportanceLevel as L;
        let (accuracy, convergence, comp_efficiency, fairness) = match self {
            UseCase::Iot => (L::HIGH, L::LOW, L::HIGH, L::HIGH),
            UseCase::Smartphone => (L::MODERATE, L::HIGH, L::HIGH, L::MODERATE),
            UseCase::Institution => (L::HIGH, L::LOW, L::LOW, L::HIGH),
        };
        ImportanceVector {
            use_case_name: self.name().to_string(),
            accuracy,
            convergence,
            comp_efficiency,
            fairness,
            personalization: Some(L::MODERATE),
        }
    }
}

impl FromStr for UseCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "iot" => Ok(UseCase::Iot),
            "smartphone" | "smart_devices" => Ok(UseCase::Smartphone),
            "institution" => Ok(UseCase::Institution),
            other => Err(Error::arg(format!("unknown use case '{other}'"))),
        }
    }
}

/// Importance-weighted mean of the component indices. Weights are the levels
/// normalized over the applicable components; the personalization weight only
/// applies when the algorithm has a personalization index.
pub fn compose_hem(indices: &ComponentIndices, importance: &ImportanceVector) -> Result<f64> {
    indices.validate()?;
    let mut terms = vec![
        (indices.accuracy, importance.accuracy.value()),
        (indices.convergence, importance.convergence.value()),
        (indices.comp_efficiency, importance.comp_efficiency.value()),
        (indices.fairness, importance.fairness.value()),
    ];
    if let (Some(p), Some(level)) = (indices.personalization, importance.personalization) {
        terms.push((p, level.value()));
    }
    let total: f64 = terms.iter().map(|&(_, w)| w).sum();
    if !(total > 0.0) {
        return Err(Error::arg("all applicable importance levels are zero"));
    }
    let score = terms.iter().map(|&(i, w)| i * w).sum::<f64>() / total;
    Ok(score.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Band {
    Excellent,
    Good,
    Acceptable,
    Low,
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Band::Excellent => "Excellent",
            Band::Good => "Good",
            Band::Acceptable => "Acceptable",
            Band::Low => "Low",
        };
        f.write_str(s)
    }
}

/// Excellent `(0.8, 1]`, Good `[0.7, 0.8]`, Acceptable `[0.5, 0.7)`, Low `[0, 0.5)`.
pub fn band(hem: f64) -> Result<Band> {
    if !(0.0..=1.0).contains(&hem) {
        return Err(Error::arg(format!("HEM score {hem} is outside [0, 1]")));
    }
    // Snap to 12 decimals so that a score landing an ulp off a boundary
    // (e.g. 0.7000000000000001) is banded as the boundary value.
    let h = (hem * 1e12).round() / 1e12;
    Ok(if h > 0.8 {
        Band::Excellent
    } else if h >= 0.7 {
        Band::Good
    } else if h >= 0.5 {
        Band::Acceptable
    } else {
        Band::Low
    })
}

/// Names sorted by descending score, ties broken by name.
pub fn rank(scores: &BTreeMap<String, f64>) -> Vec<String> {
    let mut entries: Vec<(&String, f64)> = scores.iter().map(|(k, &v)| (k, v)).collect();
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    entries.into_iter().map(|(k, _)| k.clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HemEntry {
    pub name: String,
    pub indices: ComponentIndices,
    pub hem_score: f64,
    pub band: Band,
}

/// Scores, bands and ranking of an algorithm set under one importance vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HemReport {
    pub importance: ImportanceVector,
    pub entries: Vec<HemEntry>,
    pub ranking: Vec<String>,
}

pub fn score_all(
    indices: &BTreeMap<String, ComponentIndices>,
    importance: &ImportanceVector,
) -> Result<HemReport> {
    if indices.is_empty() {
        return Err(Error::arg("nothing to score"));
    }
    importance.validate()?;
    let entries = indices
        .iter()
        .map(|(name, idx)| {
            let hem_score = compose_hem(idx, importance)?;
            Ok(HemEntry {
                name: name.clone(),
                indices: *idx,
                hem_score,
                band: band(hem_score)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let scores = entries
        .iter()
        .map(|e| (e.name.clone(), e.hem_score))
        .collect();
    Ok(HemReport {
        importance: importance.clone(),
        ranking: rank(&scores),
        entries,
    })
}
