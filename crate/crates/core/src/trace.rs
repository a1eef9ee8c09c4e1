//! Reasoning traces: a thinking section wrapped in think markers followed by
//! an answer section, plus the token counters used to measure them.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use unicode_segmentation::UnicodeSegmentation;

/// Reasoning-effort setting attached to every trace, sample and reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Low,
    Medium,
    High,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Low, Mode::Medium, Mode::High];

    pub fn index(self) -> usize {
        match self {
            Mode::Low => 0,
            Mode::Medium => 1,
            Mode::High => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Low => "low",
            Mode::Medium => "medium",
            Mode::High => "high",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = TraceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "low" => Ok(Mode::Low),
            "medium" | "med" => Ok(Mode::Medium),
            "high" => Ok(Mode::High),
            other => Err(TraceError::UnknownMode(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TraceError {
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
    #[error("unknown mode {0:?}")]
    UnknownMode(String),
}

/// Open/close strings delimiting the thinking section.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceFormat {
    pub open: String,
    pub close: String,
}

impl Default for TraceFormat {
    fn default() -> Self {
        Self {
            open: "<think>".to_string(),
            close: "</think>".to_string(),
        }
    }
}

/// Supplies token spans for an external tokenizer.
pub trait TokenSplitter: Send + Sync + fmt::Debug {
    /// Byte ranges of each token in `text`, in order and non-overlapping.
    fn spans(&self, text: &str) -> Vec<(usize, usize)>;
}

#[derive(Debug, Clone, Default)]
pub enum Tokenizer {
    /// Maximal runs of non-whitespace; consecutive separators collapse.
    #[default]
    Whitespace,
    /// Unicode word segmentation (UAX #29 words).
    UnicodeWord,
    External(Arc<dyn TokenSplitter>),
}

impl Tokenizer {
    pub fn spans(&self, text: &str) -> Vec<(usize, usize)> {
        match self {
            Tokenizer::Whitespace => whitespace_spans(text),
            Tokenizer::UnicodeWord => text
                .unicode_word_indices()
                .map(|(start, word)| (start, start + word.len()))
                .collect(),
            Tokenizer::External(splitter) => splitter.spans(text),
        }
    }

    pub fn tokens<'a>(&self, text: &'a str) -> Vec<&'a str> {
        self.spans(text).into_iter().map(|(s, e)| &text[s..e]).collect()
    }

    pub fn count(&self, text: &str) -> usize {
        match self {
            Tokenizer::Whitespace => text.split_whitespace().count(),
            Tokenizer::UnicodeWord => text.unicode_words().count(),
            Tokenizer::External(splitter) => splitter.spans(text).len(),
        }
    }

    /// Prefix of `text` ending right after its `n`-th token.
    pub fn prefix<'a>(&self, text: &'a str, n: usize) -> &'a str {
        if n == 0 {
            return "";
        }
        match self.spans(text).get(n - 1) {
            Some(&(_, end)) => &text[..end],
            None => text,
        }
    }
}

fn whitespace_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

pub fn count_tokens(text: &str, tok: &Tokenizer) -> usize {
    tok.count(text)
}

/// A model response split into its thinking and answer sections.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub raw_text: String,
    pub thinking: String,
    pub answer: String,
    pub mode: Mode,
    /// Whether the raw text carried a think block; traces without one are
    /// all-answer.
    pub has_think_block: bool,
    pub thinking_tokens: usize,
    pub answer_tokens: usize,
    pub total_tokens: usize,
}

impl ReasoningTrace {
    /// Builds a trace with a think block from its two sections.
    pub fn from_parts(
        thinking: impl Into<String>,
        answer: impl Into<String>,
        mode: Mode,
        format: &TraceFormat,
        tok: &Tokenizer,
    ) -> Self {
        let thinking = thinking.into();
        let answer = answer.into();
        let raw_text = format!("{}{}{}{}", format.open, thinking, format.close, answer);
        Self::assemble(raw_text, thinking, answer, mode, true, tok)
    }

    fn assemble(
        raw_text: String,
        thinking: String,
        answer: String,
        mode: Mode,
        has_think_block: bool,
        tok: &Tokenizer,
    ) -> Self {
        let thinking_tokens = tok.count(&thinking);
        let answer_tokens = tok.count(&answer);
        Self {
            raw_text,
            thinking,
            answer,
            mode,
            has_think_block,
            thinking_tokens,
            answer_tokens,
            total_tokens: thinking_tokens + answer_tokens,
        }
    }

    /// Rebuilds the raw text from the sections.
    pub fn serialize(&self, format: &TraceFormat) -> String {
        if self.has_think_block {
            format!("{}{}{}{}", format.open, self.thinking, format.close, self.answer)
        } else {
            self.answer.clone()
        }
    }

    pub fn with_answer(&self, answer: impl Into<String>, format: &TraceFormat, tok: &Tokenizer) -> Self {
        let answer = answer.into();
        if self.has_think_block {
            Self::from_parts(self.thinking.clone(), answer, self.mode, format, tok)
        } else {
            Self::assemble(answer.clone(), String::new(), answer, self.mode, false, tok)
        }
    }
}

/// Splits `raw` at the think markers.
///
/// The open marker, when present, must start the text and be followed by
/// exactly one close marker. Text without any marker is all answer.
pub fn parse_trace(
    raw: &str,
    mode: Mode,
    format: &TraceFormat,
    tok: &Tokenizer,
) -> Result<ReasoningTrace, TraceError> {
    let opens = raw.matches(format.open.as_str()).count();
    let closes = raw.matches(format.close.as_str()).count();
    match (opens, closes) {
        (0, 0) => Ok(ReasoningTrace::assemble(
            raw.to_string(),
            String::new(),
            raw.to_string(),
            mode,
            false,
            tok,
        )),
        (1, 1) => {
            let rest = raw.strip_prefix(format.open.as_str()).ok_or_else(|| {
                TraceError::MalformedTrace("text precedes the think-open marker".into())
            })?;
            let close_at = rest.find(format.close.as_str()).ok_or_else(|| {
                TraceError::MalformedTrace("think-close precedes think-open".into())
            })?;
            let thinking = &rest[..close_at];
            let answer = &rest[close_at + format.close.len()..];
            Ok(ReasoningTrace::assemble(
                raw.to_string(),
                thinking.to_string(),
                answer.to_string(),
                mode,
                true,
                tok,
            ))
        }
        (o, c) if o > 1 => Err(TraceError::MalformedTrace(format!(
            "{o} think-open markers (nested or repeated), {c} think-close"
        ))),
        (o, c) => Err(TraceError::MalformedTrace(format!(
            "unbalanced markers: {o} open, {c} close"
        ))),
    }
}

/// One line of a trace JSONL file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: String,
    pub mode: Mode,
    pub raw_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_id: Option<String>,
}
