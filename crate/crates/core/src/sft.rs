//! Budget-mode SFT data: full reasoning chains become High samples, and
//! truncated copies with a closing connective sentence become Medium and Low
//! samples. Answers of truncated samples are regenerated and every sample
//! is filtered on answer correctness and answer-section leaks.

use std::collections::BTreeMap;

use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::policy::{target_tokens, PolicyError, SequencePolicy};
use crate::reward::{answers_match, extract_boxed, LeakDetector, DEFAULT_LEAK_KEYWORDS};
use crate::seed::SeedStream;
use crate::trace::{Mode, ReasoningTrace, TraceFormat, Tokenizer};

pub const CONNECTIVE_MEDIUM: &str =
    "I should balance depth of reasoning with efficiency, so now I'll stop thinking and deliver a well-considered response.";
pub const CONNECTIVE_LOW: &str =
    "I need to prioritize speed, so I should stop thinking now and provide the most direct answer possible.";

pub const PROMPT_LOW: &str = "You have extremely limited time to think and respond to the users query. Every additional second of processing and reasoning incurs a significant resource cost, which could affect efficiency and effectiveness. Your task is to prioritize speed without sacrificing essential clarity or accuracy. Provide the most direct and concise answer possible. Avoid unnecessary steps, reflections, verification, or refinements UNLESS ABSOLUTELY NECESSARY. Your primary goal is to deliver a quick, clear and correct response.";
pub const PROMPT_MEDIUM: &str = "You have sufficient time to think and respond to the user's query, allowing for a more thoughtful and in-depth answer. However, be aware that the longer you take to reason and process, the greater the associated resource costs and potential consequences. While you should not rush, aim to balance the depth of your reasoning with efficiency. Prioritize providing a well-thought-out response, but do not overextend your thinking if the answer can be provided with a reasonable level of analysis. Use your reasoning time wisely, focusing on what is essential for delivering an accurate response without unnecessary delays and overthinking.";
pub const PROMPT_HIGH: &str = "You have unlimited time to think and respond to the user's question. There is no need to worry about reasoning time or associated costs. Your only goal is to arrive at a reliable, correct final answer. Feel free to explore the problem from multiple angles, and try various methods in your reasoning. This includes reflecting on reasoning by trying different approaches, verifying steps from different aspects, and rethinking your conclusions as needed. You are encouraged to take the time to analyze the problem thoroughly, reflect on your reasoning promptly and test all possible solutions. Only after a deep, comprehensive thought process should you provide the final answer, ensuring it is correct and well-supported by your reasoning.";

/// Separator between the retained thinking prefix and the connective.
const CONNECTIVE_SEPARATOR: &str = "\n\n";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SftError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("answer generator failed: {0}")]
    GeneratorFailure(String),
    #[error("unknown token {0:?} in a target sequence")]
    UnknownToken(String),
    #[error("invalid SFT config: {0}")]
    InvalidConfig(String),
}

impl From<PolicyError> for SftError {
    fn from(e: PolicyError) -> Self {
        match e {
            PolicyError::UnknownToken { token } | PolicyError::IllegalToken { token } => SftError::UnknownToken(token),
            other => SftError::InvalidConfig(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TruncationConfig {
    pub r_high: f64,
    pub r_med: f64,
    pub r_low: f64,
    pub connective_med: String,
    pub connective_low: String,
}

impl Default for TruncationConfig {
    fn default() -> Self {
        Self {
            r_high: 1.0,
            r_med: 0.5,
            r_low: 0.25,
            connective_med: CONNECTIVE_MEDIUM.to_string(),
            connective_low: CONNECTIVE_LOW.to_string(),
        }
    }
}

impl TruncationConfig {
    pub fn validate(&self) -> Result<(), SftError> {
        if self.r_high != 1.0 {
            return Err(SftError::InvalidConfig(format!("r_high must be 1.0, got {}", self.r_high)));
        }
        if !(0.0 <= self.r_low && self.r_low < self.r_med && self.r_med <= self.r_high) {
            return Err(SftError::InvalidConfig(format!(
                "need 0 <= r_low < r_med <= r_high, got r_low={} r_med={}",
                self.r_low, self.r_med
            )));
        }
        Ok(())
    }

    pub fn ratio(&self, mode: Mode) -> f64 {
        match mode {
            Mode::High => self.r_high,
            Mode::Medium => self.r_med,
            Mode::Low => self.r_low,
        }
    }

    pub fn connective(&self, mode: Mode) -> Option<&str> {
        match mode {
            Mode::High => None,
            Mode::Medium => Some(&self.connective_med),
            Mode::Low => Some(&self.connective_low),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModePrompts {
    pub low: String,
    pub medium: String,
    pub high: String,
}

impl Default for ModePrompts {
    fn default() -> Self {
        Self {
            low: PROMPT_LOW.to_string(),
            medium: PROMPT_MEDIUM.to_string(),
            high: PROMPT_HIGH.to_string(),
        }
    }
}

impl ModePrompts {
    pub fn get(&self, mode: Mode) -> &str {
        match mode {
            Mode::Low => &self.low,
            Mode::Medium => &self.medium,
            Mode::High => &self.high,
        }
    }
}

/// Number of thinking tokens kept for `mode`: `floor(r * n)`.
pub fn retained_count(thinking_tokens: usize, mode: Mode, cfg: &TruncationConfig) -> usize {
    (cfg.ratio(mode) * thinking_tokens as f64).floor() as usize
}

/// Keeps the first `floor(r * n)` thinking tokens and appends the mode's
/// connective. High traces come back unchanged; the others get an empty
/// answer section awaiting regeneration.
pub fn truncate_thinking(
    trace: &ReasoningTrace,
    mode: Mode,
    cfg: &TruncationConfig,
    format: &TraceFormat,
    tok: &Tokenizer,
) -> ReasoningTrace {
    let Some(connective) = cfg.connective(mode) else {
        return ReasoningTrace { mode, ..trace.clone() };
    };
    let keep = retained_count(trace.thinking_tokens, mode, cfg);
    let prefix = tok.prefix(&trace.thinking, keep);
    let thinking = if prefix.is_empty() {
        connective.to_string()
    } else {
        format!("{prefix}{CONNECTIVE_SEPARATOR}{connective}")
    };
    ReasoningTrace::from_parts(thinking, "", mode, format, tok)
}

/// Tokens of `truncated` that came from the source thinking section.
pub fn retained_tokens(truncated: &ReasoningTrace, cfg: &TruncationConfig, tok: &Tokenizer) -> usize {
    let connective = cfg.connective(truncated.mode).map_or(0, |c| tok.count(c));
    truncated.thinking_tokens - connective
}

pub struct GenerationRequest<'a> {
    pub query: &'a str,
    pub truncated: &'a ReasoningTrace,
    pub original: &'a ReasoningTrace,
}

/// Writes the answer section for a truncated thinking section.
pub trait AnswerGenerator: Sync {
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<String, SftError>;
}

/// Copies the original final answer: its last boxed expression verbatim,
/// or the whole trimmed answer when nothing is boxed.
#[derive(Debug, Clone, Copy, Default)]
pub struct CopyFinalAnswer;

impl AnswerGenerator for CopyFinalAnswer {
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<String, SftError> {
        let answer = &request.original.answer;
        Ok(match extract_boxed(answer) {
            Some(inner) => format!("\\boxed{{{inner}}}"),
            None => answer.trim().to_string(),
        })
    }
}

pub fn regenerate_answer(
    truncated: &ReasoningTrace,
    original: &ReasoningTrace,
    query: &str,
    generator: &dyn AnswerGenerator,
    format: &TraceFormat,
    tok: &Tokenizer,
) -> Result<ReasoningTrace, SftError> {
    let answer = generator.generate(&GenerationRequest {
        query,
        truncated,
        original,
    })?;
    Ok(truncated.with_answer(answer, format, tok))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftSample {
    pub id: String,
    pub query: String,
    pub mode: Mode,
    pub system_prompt: String,
    pub target: ReasoningTrace,
    pub retained: bool,
}

/// Output line of a per-mode SFT file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub id: String,
    pub mode: Mode,
    pub system_prompt: String,
    pub query: String,
    pub target_raw_text: String,
}

impl SftSample {
    pub fn record(&self, format: &TraceFormat) -> SftRecord {
        SftRecord {
            id: self.id.clone(),
            mode: self.mode,
            system_prompt: self.system_prompt.clone(),
            query: self.query.clone(),
            target_raw_text: self.target.serialize(format),
        }
    }
}

/// Kept iff the final answer matches the reference and the answer section
/// has no transition keywords.
pub fn filter_sample(sample: &SftSample, reference_answer: &str, detector: &LeakDetector) -> bool {
    answers_match(&sample.target.answer, reference_answer) && !detector.detect(&sample.target.answer)
}

/// A source reasoning chain with its query and reference answer.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceTrace {
    pub id: String,
    pub query: String,
    pub trace: ReasoningTrace,
    pub reference: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PerMode<T> {
    pub low: T,
    pub medium: T,
    pub high: T,
}

impl<T> PerMode<T> {
    pub fn get(&self, mode: Mode) -> &T {
        match mode {
            Mode::Low => &self.low,
            Mode::Medium => &self.medium,
            Mode::High => &self.high,
        }
    }

    pub fn get_mut(&mut self, mode: Mode) -> &mut T {
        match mode {
            Mode::Low => &mut self.low,
            Mode::Medium => &mut self.medium,
            Mode::High => &mut self.high,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub sources: usize,
    pub counts: PerMode<usize>,
    pub rejected: PerMode<usize>,
    pub downsampled: PerMode<usize>,
    pub mean_thinking_tokens: PerMode<f64>,
    /// Counts as (high, medium, low), divided by the smallest.
    pub balance_ratio: [f64; 3],
    pub balance_tolerance: f64,
    pub balanced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub truncation: TruncationConfig,
    pub prompts: ModePrompts,
    pub leak_keywords: Vec<String>,
    pub balance_tolerance: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            truncation: TruncationConfig::default(),
            prompts: ModePrompts::default(),
            leak_keywords: DEFAULT_LEAK_KEYWORDS.iter().map(|s| s.to_string()).collect(),
            balance_tolerance: 1.05,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), SftError> {
        self.truncation.validate()?;
        if !(self.balance_tolerance >= 1.0) {
            return Err(SftError::InvalidConfig("balance_tolerance must be >= 1".into()));
        }
        Ok(())
    }
}

fn expand_source(
    source: &SourceTrace,
    cfg: &DatasetConfig,
    generator: &dyn AnswerGenerator,
    detector: &LeakDetector,
    format: &TraceFormat,
    tok: &Tokenizer,
) -> Result<Vec<SftSample>, SftError> {
    // full chains fan out to every mode, anything else stays in its own mode
    let modes: &[Mode] = if source.trace.mode == Mode::High {
        &[Mode::High, Mode::Medium, Mode::Low]
    } else {
        std::slice::from_ref(&source.trace.mode)
    };
    modes
        .iter()
        .map(|&mode| {
            let target = if mode == source.trace.mode {
                source.trace.clone()
            } else {
                let truncated = truncate_thinking(&source.trace, mode, &cfg.truncation, format, tok);
                regenerate_answer(&truncated, &source.trace, &source.query, generator, format, tok)?
            };
            let mut sample = SftSample {
                id: source.id.clone(),
                query: source.query.clone(),
                mode,
                system_prompt: cfg.prompts.get(mode).to_string(),
                target,
                retained: false,
            };
            sample.retained = filter_sample(&sample, &source.reference, detector);
            Ok(sample)
        })
        .collect()
}

/// Builds the balanced budget-mode dataset. Output order is by source id,
/// then High, Medium, Low, independent of input order and thread count.
pub fn build_dataset(
    sources: &[SourceTrace],
    cfg: &DatasetConfig,
    generator: &dyn AnswerGenerator,
    format: &TraceFormat,
    tok: &Tokenizer,
    seeds: &SeedStream,
) -> Result<(Vec<SftSample>, DatasetManifest), SftError> {
    cfg.validate()?;
    if sources.is_empty() {
        return Err(SftError::EmptyCorpus);
    }
    let detector = LeakDetector::new(&cfg.leak_keywords);
    let mut ordered: Vec<&SourceTrace> = sources.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));
    let expanded: Vec<Vec<SftSample>> = ordered
        .par_iter()
        .map(|s| expand_source(s, cfg, generator, &detector, format, tok))
        .collect::<Result<_, _>>()?;

    let mut rejected = PerMode::<usize>::default();
    let mut by_mode: BTreeMap<Mode, Vec<SftSample>> = BTreeMap::new();
    for sample in expanded.into_iter().flatten() {
        if sample.retained {
            by_mode.entry(sample.mode).or_default().push(sample);
        } else {
            *rejected.get_mut(sample.mode) += 1;
        }
    }

    let min = Mode::ALL
        .iter()
        .map(|m| by_mode.get(m).map_or(0, Vec::len))
        .min()
        .unwrap_or(0);
    let cap = (min as f64 * cfg.balance_tolerance).floor() as usize;
    let mut downsampled = PerMode::<usize>::default();
    let balance_stream = seeds.child("balance");
    if min > 0 {
        for (mode, samples) in by_mode.iter_mut() {
            if samples.len() > cap {
                let mut rng = balance_stream.rng(&[mode.index() as u64]);
                let mut keep = sample_indices(&mut rng, samples.len(), cap).into_vec();
                keep.sort_unstable();
                *downsampled.get_mut(*mode) = samples.len() - cap;
                let taken = std::mem::take(samples);
                let mut keep = keep.into_iter().peekable();
                *samples = taken
                    .into_iter()
                    .enumerate()
                    .filter(|(i, _)| keep.next_if_eq(i).is_some())
                    .map(|(_, s)| s)
                    .collect();
            }
        }
    }

    let mut counts = PerMode::<usize>::default();
    let mut mean_thinking_tokens = PerMode::<f64>::default();
    for mode in Mode::ALL {
        let samples = by_mode.get(&mode).map(Vec::as_slice).unwrap_or(&[]);
        *counts.get_mut(mode) = samples.len();
        if !samples.is_empty() {
            *mean_thinking_tokens.get_mut(mode) =
                samples.iter().map(|s| s.target.thinking_tokens as f64).sum::<f64>() / samples.len() as f64;
        }
    }
    let smallest = counts.low.min(counts.medium).min(counts.high);
    let largest = counts.low.max(counts.medium).max(counts.high);
    let balance_ratio = if smallest == 0 {
        [f64::NAN; 3]
    } else {
        [counts.high, counts.medium, counts.low].map(|c| c as f64 / smallest as f64)
    };
    let manifest = DatasetManifest {
        sources: sources.len(),
        counts,
        rejected,
        downsampled,
        mean_thinking_tokens,
        balance_ratio,
        balance_tolerance: cfg.balance_tolerance,
        balanced: smallest > 0 && largest as f64 <= smallest as f64 * cfg.balance_tolerance,
    };

    let mut samples: Vec<SftSample> = by_mode.into_values().flatten().collect();
    let mode_rank = |m: Mode| 2 - m.index();
    samples.sort_by(|a, b| a.id.cmp(&b.id).then(mode_rank(a.mode).cmp(&mode_rank(b.mode))));
    Ok((samples, manifest))
}

/// Mean over samples of the summed per-token negative log-likelihood.
pub fn sft_loss<P: SequencePolicy + ?Sized>(
    samples: &[SftSample],
    policy: &P,
    format: &TraceFormat,
    tok: &Tokenizer,
) -> Result<f64, SftError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut total = NeumaierSum::default();
    for sample in samples {
        let tokens = target_tokens(&sample.target, format, tok);
        for lp in policy.token_log_probs(sample.mode, &tokens)? {
            total.add(-lp);
        }
    }
    Ok(total.value() / samples.len() as f64)
}

/// Compensated summation; long targets add thousands of similar terms.
#[derive(Debug, Default)]
struct NeumaierSum {
    sum: f64,
    compensation: f64,
}

impl NeumaierSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}
