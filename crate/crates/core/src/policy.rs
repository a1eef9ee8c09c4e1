//! Tiny autoregressive softmax policy over reasoning actions.
//!
//! A response is a run of `Continue` actions (thinking), one `StopThink`,
//! a run of `Note`/`Wait` actions (answer body) and a closing `Finish`
//! that emits the boxed final answer. Each decision point is a state
//! `(mode, phase, length bucket)` with its own logits; only the actions
//! legal in a phase are in its softmax.

use serde::{Deserialize, Serialize};

use crate::trace::{Mode, ReasoningTrace, TraceFormat, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Continue,
    StopThink,
    Note,
    Wait,
    Finish,
}

pub const THINK_ACTIONS: [Action; 2] = [Action::Continue, Action::StopThink];
pub const ANSWER_ACTIONS: [Action; 3] = [Action::Note, Action::Wait, Action::Finish];

impl Action {
    fn slot(self) -> usize {
        match self {
            Action::Continue | Action::Note => 0,
            Action::StopThink | Action::Wait => 1,
            Action::Finish => 2,
        }
    }

    /// Surface word of the action in a rendered trace. `StopThink` is the
    /// close marker and `Finish` is the boxed answer, both rendered elsewhere.
    pub fn word(self) -> Option<&'static str> {
        match self {
            Action::Continue => Some(CONTINUE_WORD),
            Action::Note => Some(NOTE_WORD),
            Action::Wait => Some(WAIT_WORD),
            Action::StopThink | Action::Finish => None,
        }
    }
}

pub const CONTINUE_WORD: &str = "step";
pub const NOTE_WORD: &str = "so";
pub const WAIT_WORD: &str = "Wait";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("token {token:?} is not in the policy vocabulary")]
    UnknownToken { token: String },
    #[error("token {token:?} cannot follow the preceding tokens")]
    IllegalToken { token: String },
    #[error("parameter vector has length {got}, expected {expected}")]
    ShapeMismatch { got: usize, expected: usize },
    #[error("invalid policy config: {0}")]
    InvalidConfig(String),
}

/// Autoregressive policy that can score token strings, used by the SFT loss.
pub trait SequencePolicy {
    /// Per-token log-probabilities of `tokens` given the mode.
    fn token_log_probs(&self, mode: Mode, tokens: &[&str]) -> Result<Vec<f64>, PolicyError>;
}

/// Token sequence a policy is trained to emit for a target trace: thinking
/// tokens, the close marker, then answer tokens.
pub fn target_tokens<'a>(trace: &'a ReasoningTrace, format: &'a TraceFormat, tok: &Tokenizer) -> Vec<&'a str> {
    let mut tokens = tok.tokens(&trace.thinking);
    if trace.has_think_block {
        tokens.push(format.close.as_str());
    }
    tokens.extend(tok.tokens(&trace.answer));
    tokens
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyShape {
    pub bucket_size: usize,
    pub think_buckets: usize,
    pub answer_buckets: usize,
    /// Thinking length at which `StopThink` is forced.
    pub max_thinking: usize,
    /// Answer-body length at which `Finish` is forced.
    pub max_answer: usize,
}

impl Default for PolicyShape {
    fn default() -> Self {
        Self {
            bucket_size: 4,
            think_buckets: 16,
            answer_buckets: 4,
            max_thinking: 96,
            max_answer: 16,
        }
    }
}

/// Starting point of the toy policy: shape plus the initial per-step
/// probabilities, identical for every mode and bucket.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub shape: PolicyShape,
    pub stop_prob: f64,
    pub note_prob: f64,
    pub wait_prob: f64,
    pub finish_prob: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            shape: PolicyShape::default(),
            stop_prob: 0.1,
            note_prob: 0.15,
            wait_prob: 0.15,
            finish_prob: 0.7,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let s = &self.shape;
        if s.bucket_size == 0 || s.think_buckets == 0 || s.answer_buckets == 0 {
            return Err(PolicyError::InvalidConfig("bucket sizes and counts must be positive".into()));
        }
        let open = |p: f64| p > 0.0 && p < 1.0;
        if !open(self.stop_prob) {
            return Err(PolicyError::InvalidConfig("stop_prob must be in (0, 1)".into()));
        }
        let probs = [self.note_prob, self.wait_prob, self.finish_prob];
        if !probs.iter().all(|&p| open(p)) || ((probs.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(PolicyError::InvalidConfig(
                "note_prob, wait_prob and finish_prob must be in (0, 1) and sum to 1".into(),
            ));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<ToyPolicy, PolicyError> {
        self.validate()?;
        Ok(ToyPolicy::initial(
            self.shape,
            self.stop_prob,
            [self.note_prob, self.wait_prob, self.finish_prob],
        ))
    }
}

impl PolicyShape {
    pub fn num_parameters(&self) -> usize {
        3 * (self.think_buckets * THINK_ACTIONS.len() + self.answer_buckets * ANSWER_ACTIONS.len())
    }

    /// Longest possible response in actions.
    pub fn max_actions(&self) -> usize {
        self.max_thinking + 1 + self.max_answer + 1
    }
}

/// Where a decision is taken. `offset` indexes the first logit of the state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecisionState {
    pub offset: usize,
    pub width: usize,
    /// The only legal action when the length cap forces it.
    pub forced: Option<Action>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    shape: PolicyShape,
    params: Vec<f64>,
}

impl ToyPolicy {
    pub fn zeros(shape: PolicyShape) -> Self {
        Self {
            params: vec![0.0; shape.num_parameters()],
            shape,
        }
    }

    /// Mode-symmetric start: per-step stop probability `stop_prob` while
    /// thinking, and the given (note, wait, finish) probabilities while
    /// answering.
    pub fn initial(shape: PolicyShape, stop_prob: f64, answer_probs: [f64; 3]) -> Self {
        let mut policy = Self::zeros(shape);
        let stop_logit = (stop_prob / (1.0 - stop_prob)).ln();
        for mode in Mode::ALL {
            for b in 0..shape.think_buckets {
                let off = policy.think_offset(mode, b);
                policy.params[off + Action::StopThink.slot()] = stop_logit;
            }
            for b in 0..shape.answer_buckets {
                let off = policy.answer_offset(mode, b);
                for (slot, p) in answer_probs.iter().enumerate() {
                    policy.params[off + slot] = p.ln();
                }
            }
        }
        policy
    }

    pub fn from_parameters(shape: PolicyShape, params: Vec<f64>) -> Result<Self, PolicyError> {
        if params.len() != shape.num_parameters() {
            return Err(PolicyError::ShapeMismatch {
                got: params.len(),
                expected: shape.num_parameters(),
            });
        }
        Ok(Self { shape, params })
    }

    pub fn shape(&self) -> &PolicyShape {
        &self.shape
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.len()
    }

    fn think_offset(&self, mode: Mode, bucket: usize) -> usize {
        (mode.index() * self.shape.think_buckets + bucket) * THINK_ACTIONS.len()
    }

    fn answer_offset(&self, mode: Mode, bucket: usize) -> usize {
        3 * self.shape.think_buckets * THINK_ACTIONS.len()
            + (mode.index() * self.shape.answer_buckets + bucket) * ANSWER_ACTIONS.len()
    }

    fn bucket(&self, len: usize, buckets: usize) -> usize {
        (len / self.shape.bucket_size).min(buckets - 1)
    }

    /// Decision state after `thinking` thinking actions, while still thinking.
    pub fn think_state(&self, mode: Mode, thinking: usize) -> DecisionState {
        DecisionState {
            offset: self.think_offset(mode, self.bucket(thinking, self.shape.think_buckets)),
            width: THINK_ACTIONS.len(),
            forced: (thinking >= self.shape.max_thinking).then_some(Action::StopThink),
        }
    }

    /// Decision state after `body` answer-body actions.
    pub fn answer_state(&self, mode: Mode, body: usize) -> DecisionState {
        DecisionState {
            offset: self.answer_offset(mode, self.bucket(body, self.shape.answer_buckets)),
            width: ANSWER_ACTIONS.len(),
            forced: (body >= self.shape.max_answer).then_some(Action::Finish),
        }
    }

    /// Action probabilities at a state, in phase order.
    pub fn probabilities(&self, state: &DecisionState) -> Vec<f64> {
        let actions: &[Action] = if state.width == THINK_ACTIONS.len() {
            &THINK_ACTIONS
        } else {
            &ANSWER_ACTIONS
        };
        if let Some(forced) = state.forced {
            return actions.iter().map(|&a| if a == forced { 1.0 } else { 0.0 }).collect();
        }
        softmax(&self.params[state.offset..state.offset + state.width])
    }

    pub fn log_prob(&self, state: &DecisionState, action: Action) -> f64 {
        if let Some(forced) = state.forced {
            return if forced == action { 0.0 } else { f64::NEG_INFINITY };
        }
        let logits = &self.params[state.offset..state.offset + state.width];
        logits[action.slot()] - log_sum_exp(logits)
    }

    /// Replays `actions` and returns the decision state of each one.
    /// Errors with the index of the first action that breaks the phase grammar.
    pub fn states(&self, mode: Mode, actions: &[Action]) -> Result<Vec<DecisionState>, usize> {
        let mut states = Vec::with_capacity(actions.len());
        let mut thinking = 0usize;
        let mut body = 0usize;
        let mut in_answer = false;
        let mut finished = false;
        for (i, &a) in actions.iter().enumerate() {
            if finished {
                return Err(i);
            }
            let state = if in_answer {
                self.answer_state(mode, body)
            } else {
                self.think_state(mode, thinking)
            };
            let legal = match (in_answer, a) {
                (false, Action::Continue | Action::StopThink) => true,
                (true, Action::Note | Action::Wait | Action::Finish) => true,
                _ => false,
            };
            if !legal || state.forced.is_some_and(|f| f != a) {
                return Err(i);
            }
            states.push(state);
            match a {
                Action::Continue => thinking += 1,
                Action::StopThink => in_answer = true,
                Action::Note | Action::Wait => body += 1,
                Action::Finish => finished = true,
            }
        }
        Ok(states)
    }

    pub fn action_log_probs(&self, mode: Mode, actions: &[Action]) -> Vec<f64> {
        match self.states(mode, actions) {
            Ok(states) => states
                .iter()
                .zip(actions)
                .map(|(s, &a)| self.log_prob(s, a))
                .collect(),
            Err(_) => vec![f64::NEG_INFINITY; actions.len()],
        }
    }

    /// Adds `Σ_t weight_t · ∇ log π(a_t | s_t)` into `grad`.
    ///
    /// Forced actions have a constant log-prob and contribute nothing.
    pub fn accumulate_score(&self, mode: Mode, actions: &[Action], weights: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(actions.len(), weights.len());
        debug_assert_eq!(grad.len(), self.params.len());
        let Ok(states) = self.states(mode, actions) else {
            return;
        };
        for ((state, &a), &w) in states.iter().zip(actions).zip(weights) {
            if w == 0.0 || state.forced.is_some() {
                continue;
            }
            let probs = softmax(&self.params[state.offset..state.offset + state.width]);
            for (slot, p) in probs.iter().enumerate() {
                let indicator = if slot == a.slot() { 1.0 } else { 0.0 };
                grad[state.offset + slot] += w * (indicator - p);
            }
        }
    }

    /// Maps a token string onto an action. The close marker stops thinking
    /// and any boxed expression is the finishing answer token.
    pub fn action_for(&self, token: &str, format: &TraceFormat) -> Option<Action> {
        match token {
            t if t == format.close => Some(Action::StopThink),
            CONTINUE_WORD => Some(Action::Continue),
            NOTE_WORD => Some(Action::Note),
            WAIT_WORD => Some(Action::Wait),
            t if t.starts_with("\\boxed{") && t.ends_with('}') => Some(Action::Finish),
            _ => None,
        }
    }
}

impl SequencePolicy for ToyPolicy {
    fn token_log_probs(&self, mode: Mode, tokens: &[&str]) -> Result<Vec<f64>, PolicyError> {
        let format = TraceFormat::default();
        let actions = tokens
            .iter()
            .map(|t| {
                self.action_for(t, &format).ok_or_else(|| PolicyError::UnknownToken {
                    token: t.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        if let Err(idx) = self.states(mode, &actions) {
            return Err(PolicyError::IllegalToken {
                token: tokens[idx].to_string(),
            });
        }
        Ok(self.action_log_probs(mode, &actions))
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}
