//! Budget-aware rewards: exact-match task reward, group-normalized length
//! reward and the answer-section leak penalty, combined per mode.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::trace::{Mode, ReasoningTrace};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RewardError {
    #[error("length {len} outside group range [{min}, {max}]")]
    OutOfGroupRange { len: usize, min: usize, max: usize },
    #[error("invalid reward config: {0}")]
    InvalidConfig(String),
}

pub const DEFAULT_LEAK_KEYWORDS: [&str; 7] = [
    "Wait",
    "Let me think",
    "Actually",
    "Alternatively",
    "However",
    "Hold on",
    "Let me reconsider",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModeRewardConfig {
    pub alpha_high: f64,
    pub alpha_med: f64,
    pub alpha_low: f64,
    pub leak_keywords: Vec<String>,
    pub leak_reward: f64,
    pub leak_penalty: f64,
    /// When false every rollout receives `leak_reward`, which removes the
    /// leak term from group advantages.
    pub leak_enabled: bool,
}

impl Default for ModeRewardConfig {
    fn default() -> Self {
        Self {
            alpha_high: 0.0,
            alpha_med: 0.5,
            alpha_low: 1.0,
            leak_keywords: DEFAULT_LEAK_KEYWORDS.iter().map(|s| s.to_string()).collect(),
            leak_reward: 0.5,
            leak_penalty: -0.5,
            leak_enabled: true,
        }
    }
}

impl ModeRewardConfig {
    pub fn alpha(&self, mode: Mode) -> f64 {
        match mode {
            Mode::High => self.alpha_high,
            Mode::Medium => self.alpha_med,
            Mode::Low => self.alpha_low,
        }
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        for (name, a) in [
            ("alpha_high", self.alpha_high),
            ("alpha_med", self.alpha_med),
            ("alpha_low", self.alpha_low),
        ] {
            if !(a.is_finite() && a >= 0.0) {
                return Err(RewardError::InvalidConfig(format!("{name} must be >= 0, got {a}")));
            }
        }
        if self.leak_keywords.iter().all(|k| k.split_whitespace().next().is_none()) {
            return Err(RewardError::InvalidConfig("leak_keywords must be nonempty".into()));
        }
        Ok(())
    }

    /// Reads keywords from a text file, one per line, `#` starts a comment.
    pub fn load_keywords(path: &Path) -> std::io::Result<Vec<String>> {
        Ok(parse_keyword_list(&std::fs::read_to_string(path)?))
    }
}

pub fn parse_keyword_list(text: &str) -> Vec<String> {
    text.lines()
        .map(|line| line.split('#').next().unwrap_or("").trim())
        .filter(|line| !line.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub task: f64,
    pub lambda: f64,
    pub length: f64,
    pub leak: f64,
    pub total: f64,
}

/// Contents of the last `\boxed{...}` in `text`, braces balanced.
pub fn extract_boxed(text: &str) -> Option<&str> {
    const TAG: &str = "\\boxed{";
    let start = text.rfind(TAG)? + TAG.len();
    let mut depth = 1usize;
    for (i, c) in text[start..].char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Trims whitespace and strips `$...$` and `\boxed{...}` wrappers.
pub fn normalize_answer(text: &str) -> String {
    let mut s = text.trim();
    loop {
        let before = s;
        if let Some(inner) = s.strip_prefix('$').and_then(|r| r.strip_suffix('$')) {
            s = inner.trim();
        }
        if let Some(inner) = s.strip_prefix("\\boxed{").and_then(|r| r.strip_suffix('}')) {
            s = inner.trim();
        }
        if s == before {
            return s.to_string();
        }
    }
}

/// Final answer of an answer section: the last boxed expression, normalized.
pub fn extract_final_answer(answer: &str) -> Option<String> {
    extract_boxed(answer).map(normalize_answer).filter(|a| !a.is_empty())
}

pub fn answers_match(answer_section: &str, reference: &str) -> bool {
    let reference = normalize_answer(reference);
    !reference.is_empty() && extract_final_answer(answer_section).is_some_and(|a| a == reference)
}

pub fn task_reward(trace: &ReasoningTrace, reference: &str) -> f64 {
    if answers_match(&trace.answer, reference) {
        1.0
    } else {
        0.0
    }
}

/// Normalized length penalty in [-0.5, 0.5]; 0 for a degenerate group.
pub fn length_lambda(len: usize, len_min: usize, len_max: usize) -> Result<f64, RewardError> {
    if len < len_min || len > len_max {
        return Err(RewardError::OutOfGroupRange {
            len,
            min: len_min,
            max: len_max,
        });
    }
    if len_max == len_min {
        return Ok(0.0);
    }
    Ok(0.5 - (len - len_min) as f64 / (len_max - len_min) as f64)
}

pub fn length_reward(lambda: f64, task: f64) -> f64 {
    if task >= 1.0 {
        lambda
    } else {
        lambda.min(0.0)
    }
}

fn words_lower(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '\'')
        .map(|w| w.trim_matches('\''))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Precompiled keyword matcher: case-insensitive, whole words, multi-word
/// keywords as contiguous word runs.
#[derive(Debug, Clone)]
pub struct LeakDetector {
    keywords: Vec<Vec<String>>,
}

impl LeakDetector {
    pub fn new<S: AsRef<str>>(keywords: &[S]) -> Self {
        Self {
            keywords: keywords
                .iter()
                .map(|k| words_lower(k.as_ref()))
                .filter(|k| !k.is_empty())
                .collect(),
        }
    }

    pub fn detect(&self, answer: &str) -> bool {
        let words = words_lower(answer);
        self.keywords.iter().any(|kw| {
            words.len() >= kw.len() && words.windows(kw.len()).any(|w| w == kw.as_slice())
        })
    }
}

pub fn detect_leak(answer: &str, cfg: &ModeRewardConfig) -> bool {
    LeakDetector::new(&cfg.leak_keywords).detect(answer)
}

pub fn leak_reward(answer: &str, cfg: &ModeRewardConfig) -> f64 {
    leak_reward_with(&LeakDetector::new(&cfg.leak_keywords), answer, cfg)
}

fn leak_reward_with(detector: &LeakDetector, answer: &str, cfg: &ModeRewardConfig) -> f64 {
    if cfg.leak_enabled && detector.detect(answer) {
        cfg.leak_penalty
    } else {
        cfg.leak_reward
    }
}

/// Assembles a breakdown from precomputed task reward and λ.
pub fn combine(task: f64, lambda: f64, leak: f64, mode: Mode, cfg: &ModeRewardConfig) -> RewardBreakdown {
    let length = length_reward(lambda, task);
    RewardBreakdown {
        task,
        lambda,
        length,
        leak,
        total: task + cfg.alpha(mode) * length + leak,
    }
}

pub fn composite_reward(
    trace: &ReasoningTrace,
    reference: &str,
    group_lens: (usize, usize),
    cfg: &ModeRewardConfig,
) -> Result<RewardBreakdown, RewardError> {
    RewardScorer::new(cfg).score(trace, reference, group_lens)
}

/// Composite scorer holding a compiled leak detector.
#[derive(Debug, Clone)]
pub struct RewardScorer<'a> {
    cfg: &'a ModeRewardConfig,
    detector: LeakDetector,
}

impl<'a> RewardScorer<'a> {
    pub fn new(cfg: &'a ModeRewardConfig) -> Self {
        Self {
            cfg,
            detector: LeakDetector::new(&cfg.leak_keywords),
        }
    }

    pub fn detector(&self) -> &LeakDetector {
        &self.detector
    }

    pub fn score(
        &self,
        trace: &ReasoningTrace,
        reference: &str,
        (len_min, len_max): (usize, usize),
    ) -> Result<RewardBreakdown, RewardError> {
        let lambda = length_lambda(trace.total_tokens, len_min, len_max)?;
        let task = task_reward(trace, reference);
        let leak = leak_reward_with(&self.detector, &trace.answer, self.cfg);
        Ok(combine(task, lambda, leak, trace.mode, self.cfg))
    }

    /// Scores a whole group, using its own min/max lengths.
    pub fn score_group(
        &self,
        traces: &[&ReasoningTrace],
        reference: &str,
    ) -> Result<Vec<RewardBreakdown>, RewardError> {
        let lens = group_length_range(traces.iter().map(|t| t.total_tokens));
        traces.iter().map(|t| self.score(t, reference, lens)).collect()
    }
}

pub fn group_length_range(lens: impl IntoIterator<Item = usize>) -> (usize, usize) {
    lens.into_iter()
        .fold(None, |acc: Option<(usize, usize)>, l| match acc {
            None => Some((l, l)),
            Some((lo, hi)) => Some((lo.min(l), hi.max(l))),
        })
        .unwrap_or((0, 0))
}
