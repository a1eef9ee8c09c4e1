//! Accuracy-cost trade-off scoring: accuracy retention and compression per
//! mode against a peak-performance baseline, mixed per mode and averaged.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::trace::Mode;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ActError {
    #[error("invalid baseline: {0}")]
    InvalidBaseline(String),
    #[error("invalid measurement for {benchmark}/{mode}: {reason}")]
    InvalidMeasurement { benchmark: String, mode: Mode, reason: String },
    #[error("benchmark {benchmark}: {reason}")]
    IncompleteBenchmark { benchmark: String, reason: String },
    #[error("no baseline for benchmark {0}")]
    MissingBaseline(String),
    #[error("accuracy units are inconsistent: {0}")]
    UnitMismatch(String),
    #[error("problem {problem} has {got} outcomes, expected {expected}")]
    RaggedOutcomes { problem: usize, got: usize, expected: usize },
    #[error("outcome {value} of problem {problem} is not 0 or 1")]
    InvalidOutcome { problem: usize, value: u8 },
    #[error("no outcomes to aggregate")]
    NoOutcomes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeMeasurement {
    pub benchmark: String,
    pub mode: Mode,
    pub accuracy: f64,
    /// Mean total tokens per response.
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineMeasurement {
    /// `None` applies the baseline to every benchmark without its own.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<String>,
    pub accuracy: f64,
    pub cost: f64,
}

impl BaselineMeasurement {
    pub fn validate(&self) -> Result<(), ActError> {
        if !(self.accuracy > 0.0 && self.accuracy.is_finite()) {
            return Err(ActError::InvalidBaseline(format!("accuracy must be positive, got {}", self.accuracy)));
        }
        if !(self.cost > 0.0 && self.cost.is_finite()) {
            return Err(ActError::InvalidBaseline(format!("cost must be positive, got {}", self.cost)));
        }
        Ok(())
    }
}

/// A baseline file holds one record or a list of per-benchmark records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BaselineFile {
    One(BaselineMeasurement),
    Many(Vec<BaselineMeasurement>),
}

impl BaselineFile {
    pub fn into_vec(self) -> Vec<BaselineMeasurement> {
        match self {
            BaselineFile::One(b) => vec![b],
            BaselineFile::Many(v) => v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AccuracyUnit {
    /// Fraction when the baseline accuracy is at most 1, percent otherwise.
    #[default]
    Auto,
    Fraction,
    Percent,
}

impl AccuracyUnit {
    fn resolve(self, baseline_accuracy: f64) -> AccuracyUnit {
        match self {
            AccuracyUnit::Auto if baseline_accuracy > 1.0 => AccuracyUnit::Percent,
            AccuracyUnit::Auto => AccuracyUnit::Fraction,
            unit => unit,
        }
    }

    fn upper(self) -> f64 {
        if self == AccuracyUnit::Percent {
            100.0
        } else {
            1.0
        }
    }
}

/// Accuracy retention `Acc_m / Acc_base` and compression `1 - Cost_m / Cost_base`.
/// Retention is not capped at 1 and compression goes negative when the mode
/// costs more than the baseline.
pub fn retention_and_compression(m: &ModeMeasurement, base: &BaselineMeasurement) -> Result<(f64, f64), ActError> {
    base.validate()?;
    Ok((m.accuracy / base.accuracy, 1.0 - m.cost / base.cost))
}

/// Retention weight: High only counts accuracy, the others split evenly.
pub fn beta(mode: Mode) -> f64 {
    match mode {
        Mode::High => 1.0,
        Mode::Medium | Mode::Low => 0.5,
    }
}

pub fn mode_score(retention: f64, compression: f64, mode: Mode) -> f64 {
    let b = beta(mode);
    if b == 1.0 {
        // keeps the score exactly independent of compression, even for inf/NaN
        return retention;
    }
    b * retention + (1.0 - b) * compression
}

pub fn act_score(scores: [f64; 3]) -> f64 {
    scores.iter().sum::<f64>() / 3.0
}

/// Mean over problems of the per-problem mean over `repeats` 0/1 outcomes.
pub fn aggregate_accuracy(outcomes: &[Vec<u8>], repeats: usize) -> Result<f64, ActError> {
    if outcomes.is_empty() || repeats == 0 {
        return Err(ActError::NoOutcomes);
    }
    let mut total = 0.0;
    for (problem, row) in outcomes.iter().enumerate() {
        if row.len() != repeats {
            return Err(ActError::RaggedOutcomes { problem, got: row.len(), expected: repeats });
        }
        if let Some(&value) = row.iter().find(|&&v| v > 1) {
            return Err(ActError::InvalidOutcome { problem, value });
        }
        total += row.iter().map(|&v| v as f64).sum::<f64>() / repeats as f64;
    }
    Ok(total / outcomes.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeScore {
    pub accuracy: f64,
    pub cost: f64,
    pub retention: f64,
    pub compression: f64,
    pub beta: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActReport {
    pub benchmark: String,
    pub unit: AccuracyUnit,
    pub baseline: BaselineMeasurement,
    pub low: ModeScore,
    pub medium: ModeScore,
    pub high: ModeScore,
    pub act_score: f64,
}

impl ActReport {
    pub fn mode(&self, mode: Mode) -> &ModeScore {
        match mode {
            Mode::Low => &self.low,
            Mode::Medium => &self.medium,
            Mode::High => &self.high,
        }
    }

    /// Percent-scaled scores rounded to one decimal: (L, M, H, Avg).
    pub fn display_row(&self) -> [String; 4] {
        [self.low.score, self.medium.score, self.high.score, self.act_score].map(|v| format!("{:.1}", v * 100.0))
    }
}

impl fmt::Display for ActReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [l, m, h, avg] = self.display_row();
        write!(f, "{}: L {l} M {m} H {h} Avg {avg}", self.benchmark)
    }
}

/// Scores one benchmark. Needs exactly one measurement per mode, all in the
/// same unit as the baseline.
pub fn benchmark_report(
    benchmark: &str,
    measurements: &[&ModeMeasurement],
    baseline: &BaselineMeasurement,
    unit: AccuracyUnit,
) -> Result<ActReport, ActError> {
    baseline.validate()?;
    let unit = unit.resolve(baseline.accuracy);
    if baseline.accuracy > unit.upper() {
        return Err(ActError::UnitMismatch(format!(
            "baseline accuracy {} exceeds {} for unit {unit:?}",
            baseline.accuracy,
            unit.upper()
        )));
    }
    let mut by_mode: [Option<ModeScore>; 3] = [None, None, None];
    for m in measurements {
        let invalid = |reason: String| ActError::InvalidMeasurement {
            benchmark: benchmark.to_string(),
            mode: m.mode,
            reason,
        };
        if !(m.cost > 0.0 && m.cost.is_finite()) {
            return Err(invalid(format!("cost must be positive, got {}", m.cost)));
        }
        if !m.accuracy.is_finite() || m.accuracy < 0.0 {
            return Err(invalid(format!("accuracy must be finite and >= 0, got {}", m.accuracy)));
        }
        if m.accuracy > unit.upper() {
            return Err(ActError::UnitMismatch(format!(
                "{benchmark}/{} accuracy {} exceeds {} for unit {unit:?}",
                m.mode,
                m.accuracy,
                unit.upper()
            )));
        }
        let slot = &mut by_mode[m.mode.index()];
        if slot.is_some() {
            return Err(ActError::IncompleteBenchmark {
                benchmark: benchmark.to_string(),
                reason: format!("duplicate {} measurement", m.mode),
            });
        }
        let (retention, compression) = retention_and_compression(m, baseline)?;
        *slot = Some(ModeScore {
            accuracy: m.accuracy,
            cost: m.cost,
            retention,
            compression,
            beta: beta(m.mode),
            score: mode_score(retention, compression, m.mode),
        });
    }
    let take = |mode: Mode, slot: Option<ModeScore>| {
        slot.ok_or_else(|| ActError::IncompleteBenchmark {
            benchmark: benchmark.to_string(),
            reason: format!("missing {mode} measurement"),
        })
    };
    let [low, medium, high] = by_mode;
    let (low, medium, high) = (take(Mode::Low, low)?, take(Mode::Medium, medium)?, take(Mode::High, high)?);
    let act_score = act_score([low.score, medium.score, high.score]);
    Ok(ActReport {
        benchmark: benchmark.to_string(),
        unit,
        baseline: baseline.clone(),
        low,
        medium,
        high,
        act_score,
    })
}

/// Scores every benchmark in `measurements`, sorted by benchmark id. A
/// baseline without a benchmark id covers benchmarks lacking their own.
pub fn build_reports(
    measurements: &[ModeMeasurement],
    baselines: &[BaselineMeasurement],
    unit: AccuracyUnit,
) -> Result<Vec<ActReport>, ActError> {
    let mut groups: BTreeMap<&str, Vec<&ModeMeasurement>> = BTreeMap::new();
    for m in measurements {
        groups.entry(m.benchmark.as_str()).or_default().push(m);
    }
    let fallback = baselines.iter().find(|b| b.benchmark.is_none());
    groups
        .into_iter()
        .map(|(name, ms)| {
            let base = baselines
                .iter()
                .find(|b| b.benchmark.as_deref() == Some(name))
                .or(fallback)
                .ok_or_else(|| ActError::MissingBaseline(name.to_string()))?;
            benchmark_report(name, &ms, base, unit)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub benchmark: String,
    pub mode: Mode,
    pub accuracy: f64,
    pub cost: f64,
    pub retention: f64,
    pub compression: f64,
    pub score: f64,
}

/// One row per (benchmark, mode), High first, for accuracy-vs-cost plots.
pub fn scatter_rows(reports: &[ActReport]) -> Vec<ScatterRow> {
    reports
        .iter()
        .flat_map(|r| {
            [Mode::High, Mode::Medium, Mode::Low].map(|mode| {
                let s = r.mode(mode);
                ScatterRow {
                    benchmark: r.benchmark.clone(),
                    mode,
                    accuracy: s.accuracy,
                    cost: s.cost,
                    retention: s.retention,
                    compression: s.compression,
                    score: s.score,
                }
            })
        })
        .collect()
}
