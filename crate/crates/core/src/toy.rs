//! Synthetic reasoning environment.
//!
//! Each task has a difficulty `d`; a rollout's chance of ending with the
//! right boxed answer grows with the amount of reasoning it did, counted as
//! thinking tokens plus (weighted) `Wait` tokens that leaked into the answer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::policy::{Action, ToyPolicy, NOTE_WORD, WAIT_WORD};
use crate::reward::task_reward;
use crate::seed::SeedStream;
use crate::trace::{Mode, ReasoningTrace, TraceFormat, Tokenizer};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ToyError {
    #[error("rollout exceeded the hard cap of {cap} tokens")]
    RolloutOverflow { cap: usize },
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTask {
    pub query_id: String,
    pub difficulty: f64,
    pub reference_answer: String,
}

/// Success probability as a function of reasoning length and difficulty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorrectnessCurve {
    /// `1 - exp(-len / d)`.
    Exponential,
    /// Always correct.
    Certain,
    /// `above` once `len >= threshold * d`, `below` before.
    Step { threshold: f64, below: f64, above: f64 },
}

impl CorrectnessCurve {
    pub fn success(&self, reasoning_len: f64, difficulty: f64) -> f64 {
        match *self {
            CorrectnessCurve::Exponential => 1.0 - (-reasoning_len / difficulty).exp(),
            CorrectnessCurve::Certain => 1.0,
            CorrectnessCurve::Step { threshold, below, above } => {
                if reasoning_len >= threshold * difficulty {
                    above
                } else {
                    below
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub task_count: usize,
    /// Cycled over the tasks.
    pub difficulties: Vec<f64>,
    pub curve: CorrectnessCurve,
    /// Reasoning credit of one `Wait` token in the answer section.
    pub answer_reasoning_weight: f64,
    pub hard_cap: usize,
    /// Set from the run's root seed rather than the config file.
    #[serde(skip)]
    pub task_seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            task_count: 64,
            difficulties: vec![2.0, 3.0, 4.0, 6.0, 8.0, 10.0, 12.0, 16.0],
            curve: CorrectnessCurve::Exponential,
            answer_reasoning_weight: 3.0,
            hard_cap: 256,
            task_seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), ToyError> {
        if self.difficulties.is_empty() || self.task_count == 0 {
            return Err(ToyError::InvalidConfig("need at least one task and one difficulty".into()));
        }
        if let Some(d) = self.difficulties.iter().find(|&&d| !(d >= 1.0 && d.is_finite())) {
            return Err(ToyError::InvalidConfig(format!("difficulty must be >= 1, got {d}")));
        }
        if let CorrectnessCurve::Step { below, above, .. } = self.curve {
            if !(0.0..=1.0).contains(&below) || !(0.0..=1.0).contains(&above) || below > above {
                return Err(ToyError::InvalidConfig("step curve needs 0 <= below <= above <= 1".into()));
            }
        }
        if !(self.answer_reasoning_weight >= 0.0) {
            return Err(ToyError::InvalidConfig("answer_reasoning_weight must be >= 0".into()));
        }
        if self.hard_cap == 0 {
            return Err(ToyError::InvalidConfig("hard_cap must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyEnvironment {
    pub tasks: Vec<ToyTask>,
    pub curve: CorrectnessCurve,
    pub answer_reasoning_weight: f64,
    pub hard_cap: usize,
}

impl ToyEnvironment {
    pub fn new(cfg: &EnvConfig) -> Result<Self, ToyError> {
        cfg.validate()?;
        let stream = SeedStream::new(cfg.task_seed).child("tasks");
        let tasks = (0..cfg.task_count)
            .map(|i| {
                let difficulty = cfg.difficulties[i % cfg.difficulties.len()];
                let answer: u32 = stream.rng(&[i as u64]).gen_range(10..1000);
                ToyTask {
                    query_id: format!("toy-{i:03}"),
                    difficulty,
                    reference_answer: answer.to_string(),
                }
            })
            .collect();
        Ok(Self {
            tasks,
            curve: cfg.curve,
            answer_reasoning_weight: cfg.answer_reasoning_weight,
            hard_cap: cfg.hard_cap,
        })
    }

    pub fn success_probability(&self, thinking: usize, waits: usize, difficulty: f64) -> f64 {
        let len = thinking as f64 + self.answer_reasoning_weight * waits as f64;
        self.curve.success(len, difficulty).clamp(0.0, 1.0)
    }
}

/// A sampled response with the behaviour log-probs recorded at sampling time.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub trace: ReasoningTrace,
    pub actions: Vec<Action>,
    pub log_probs: Vec<f64>,
}

fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

pub fn rollout<R: Rng>(
    policy: &ToyPolicy,
    env: &ToyEnvironment,
    task: &ToyTask,
    mode: Mode,
    rng: &mut R,
) -> Result<Rollout, ToyError> {
    let mut actions = Vec::new();
    let mut log_probs = Vec::new();
    let mut thinking = 0usize;
    let mut body: Vec<&str> = Vec::new();
    let mut waits = 0usize;
    let mut push = |actions: &mut Vec<Action>, a: Action, lp: f64| -> Result<(), ToyError> {
        if actions.len() >= env.hard_cap {
            return Err(ToyError::RolloutOverflow { cap: env.hard_cap });
        }
        actions.push(a);
        log_probs.push(lp);
        Ok(())
    };

    loop {
        let state = policy.think_state(mode, thinking);
        let probs = policy.probabilities(&state);
        let a = crate::policy::THINK_ACTIONS[sample_index(&probs, rng)];
        push(&mut actions, a, policy.log_prob(&state, a))?;
        if a == Action::StopThink {
            break;
        }
        thinking += 1;
    }
    loop {
        let state = policy.answer_state(mode, body.len());
        let probs = policy.probabilities(&state);
        let a = crate::policy::ANSWER_ACTIONS[sample_index(&probs, rng)];
        push(&mut actions, a, policy.log_prob(&state, a))?;
        match a {
            Action::Note => body.push(NOTE_WORD),
            Action::Wait => {
                waits += 1;
                body.push(WAIT_WORD);
            }
            _ => break,
        }
    }

    let p = env.success_probability(thinking, waits, task.difficulty);
    let correct = rng.gen::<f64>() < p;
    let final_answer = if correct {
        task.reference_answer.clone()
    } else {
        corrupt(&task.reference_answer)
    };
    let boxed = format!("\\boxed{{{final_answer}}}");
    body.push(&boxed);
    let answer = body.join(" ");
    let thinking_text = vec![crate::policy::CONTINUE_WORD; thinking].join(" ");
    let trace = ReasoningTrace::from_parts(
        thinking_text,
        answer,
        mode,
        &TraceFormat::default(),
        &Tokenizer::Whitespace,
    );
    Ok(Rollout {
        trace,
        actions,
        log_probs,
    })
}

fn corrupt(reference: &str) -> String {
    match reference.parse::<i64>() {
        Ok(v) => (v + 1).to_string(),
        Err(_) => format!("{reference}'"),
    }
}

/// Accuracy and mean token counts for one mode.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalStats {
    pub accuracy: f64,
    pub thinking_tokens: f64,
    pub answer_tokens: f64,
    pub total_tokens: f64,
}

/// Monte-Carlo estimate over `n_samples` rollouts per task. Rollout `j` of
/// task `i` always uses the generator `seeds.rng([i, j])`.
pub fn evaluate(
    policy: &ToyPolicy,
    env: &ToyEnvironment,
    mode: Mode,
    n_samples: usize,
    seeds: &SeedStream,
) -> Result<EvalStats, ToyError> {
    assert!(n_samples >= 1, "n_samples must be at least 1");
    let mut sums = EvalStats::default();
    for (i, task) in env.tasks.iter().enumerate() {
        for j in 0..n_samples {
            let r = rollout(policy, env, task, mode, &mut seeds.rng(&[i as u64, j as u64]))?;
            sums.accuracy += task_reward(&r.trace, &task.reference_answer);
            sums.thinking_tokens += r.trace.thinking_tokens as f64;
            sums.answer_tokens += r.trace.answer_tokens as f64;
            sums.total_tokens += r.trace.total_tokens as f64;
        }
    }
    let n = (env.tasks.len() * n_samples) as f64;
    Ok(EvalStats {
        accuracy: sums.accuracy / n,
        thinking_tokens: sums.thinking_tokens / n,
        answer_tokens: sums.answer_tokens / n,
        total_tokens: sums.total_tokens / n,
    })
}

/// Exact distribution of thinking length: `out[l] = P(thinking == l)`.
pub fn thinking_length_distribution(policy: &ToyPolicy, mode: Mode) -> Vec<f64> {
    let max = policy.shape().max_thinking;
    let mut dist = vec![0.0; max + 1];
    let mut reach = 1.0;
    for (len, slot) in dist.iter_mut().enumerate() {
        let stop = policy.probabilities(&policy.think_state(mode, len))[1];
        *slot = reach * stop;
        reach *= 1.0 - stop;
    }
    dist
}

/// Exact joint distribution of answer-body length and `Wait` count:
/// `out[k][w] = P(body == k, waits == w)`.
pub fn answer_distribution(policy: &ToyPolicy, mode: Mode) -> Vec<Vec<f64>> {
    let max = policy.shape().max_answer;
    let mut out = vec![vec![0.0; max + 1]; max + 1];
    // reach[w]: probability of being at the current body length with w waits
    let mut reach = vec![0.0; max + 1];
    reach[0] = 1.0;
    for k in 0..=max {
        let probs = policy.probabilities(&policy.answer_state(mode, k));
        let mut next = vec![0.0; max + 1];
        for w in 0..=k {
            let r = reach[w];
            if r == 0.0 {
                continue;
            }
            out[k][w] = r * probs[2];
            if k < max {
                next[w] += r * probs[0];
                next[w + 1] += r * probs[1];
            }
        }
        reach = next;
    }
    out
}

/// Closed-form expectation of [`evaluate`]'s statistics.
pub fn expected_stats(policy: &ToyPolicy, env: &ToyEnvironment, mode: Mode) -> EvalStats {
    let think = thinking_length_distribution(policy, mode);
    let answer = answer_distribution(policy, mode);
    let mean_think: f64 = think.iter().enumerate().map(|(l, p)| l as f64 * p).sum();
    let mean_body: f64 = answer
        .iter()
        .enumerate()
        .map(|(k, row)| k as f64 * row.iter().sum::<f64>())
        .sum();
    let mut accuracy = 0.0;
    for task in &env.tasks {
        for (l, pl) in think.iter().enumerate() {
            if *pl == 0.0 {
                continue;
            }
            for row in &answer {
                for (w, pkw) in row.iter().enumerate() {
                    if *pkw != 0.0 {
                        accuracy += pl * pkw * env.success_probability(l, w, task.difficulty);
                    }
                }
            }
        }
    }
    accuracy /= env.tasks.len() as f64;
    let answer_tokens = mean_body + 1.0;
    EvalStats {
        accuracy,
        thinking_tokens: mean_think,
        answer_tokens,
        total_tokens: mean_think + answer_tokens,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyShape;
    use crate::reward::{detect_leak, ModeRewardConfig};
    use crate::trace::parse_trace;

    fn env_with(curve: CorrectnessCurve) -> ToyEnvironment {
        ToyEnvironment::new(&EnvConfig {
            curve,
            ..Default::default()
        })
        .unwrap()
    }

    fn default_policy() -> ToyPolicy {
        ToyPolicy::initial(PolicyShape::default(), 0.1, [0.3, 0.3, 0.4])
    }

    #[test]
    fn immediate_stop_gives_empty_thinking() {
        let mut p = ToyPolicy::zeros(PolicyShape::default());
        for mode in Mode::ALL {
            let off = p.think_state(mode, 0).offset;
            p.parameters_mut()[off] = -1e3;
        }
        let env = env_with(CorrectnessCurve::Exponential);
        let r = rollout(&p, &env, &env.tasks[0], Mode::Low, &mut SeedStream::new(1).rng(&[])).unwrap();
        assert_eq!(r.trace.thinking, "");
        assert_eq!(r.actions[0], Action::StopThink);
        assert!(r.trace.raw_text.starts_with("<think></think>"));
    }

    #[test]
    fn certain_curve_is_always_correct() {
        let env = env_with(CorrectnessCurve::Certain);
        let p = default_policy();
        let seeds = SeedStream::new(3);
        for i in 0..50u64 {
            let task = &env.tasks[(i as usize) % env.tasks.len()];
            let r = rollout(&p, &env, task, Mode::Medium, &mut seeds.rng(&[i])).unwrap();
            assert_eq!(task_reward(&r.trace, &task.reference_answer), 1.0);
        }
        let stats = evaluate(&p, &env, Mode::Low, 5, &seeds).unwrap();
        assert_eq!(stats.accuracy, 1.0);
    }

    #[test]
    fn rollouts_are_deterministic() {
        let env = env_with(CorrectnessCurve::Exponential);
        let p = default_policy();
        let seeds = SeedStream::new(11);
        let a = rollout(&p, &env, &env.tasks[2], Mode::High, &mut seeds.rng(&[4])).unwrap();
        let b = rollout(&p, &env, &env.tasks[2], Mode::High, &mut seeds.rng(&[4])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn evaluate_prefix_property() {
        let mut env = env_with(CorrectnessCurve::Exponential);
        env.tasks.truncate(1);
        let p = default_policy();
        let seeds = SeedStream::new(5);
        let one = evaluate(&p, &env, Mode::High, 1, &seeds).unwrap();
        let first = rollout(&p, &env, &env.tasks[0], Mode::High, &mut seeds.rng(&[0, 0])).unwrap();
        assert_eq!(one.thinking_tokens, first.trace.thinking_tokens as f64);
        let two = evaluate(&p, &env, Mode::High, 2, &seeds).unwrap();
        let second = rollout(&p, &env, &env.tasks[0], Mode::High, &mut seeds.rng(&[0, 1])).unwrap();
        assert_eq!(
            two.thinking_tokens,
            (first.trace.thinking_tokens + second.trace.thinking_tokens) as f64 / 2.0
        );
    }

    #[test]
    fn overflow_past_hard_cap() {
        let mut env = env_with(CorrectnessCurve::Exponential);
        env.hard_cap = 3;
        let mut p = ToyPolicy::zeros(PolicyShape::default());
        for mode in Mode::ALL {
            for len in 0..8 {
                let off = p.think_state(mode, len * 4).offset;
                p.parameters_mut()[off] = 50.0;
            }
        }
        let err = rollout(&p, &env, &env.tasks[0], Mode::Low, &mut SeedStream::new(0).rng(&[])).unwrap_err();
        assert_eq!(err, ToyError::RolloutOverflow { cap: 3 });
    }

    #[test]
    fn rollouts_parse_and_log_probs_are_consistent() {
        let env = env_with(CorrectnessCurve::Exponential);
        let p = default_policy();
        let seeds = SeedStream::new(9);
        let cfg = ModeRewardConfig::default();
        for i in 0..200u64 {
            let mode = Mode::ALL[(i % 3) as usize];
            let r = rollout(&p, &env, &env.tasks[(i % 8) as usize], mode, &mut seeds.rng(&[i])).unwrap();
            let parsed = parse_trace(&r.trace.raw_text, mode, &TraceFormat::default(), &Tokenizer::Whitespace).unwrap();
            assert_eq!(parsed, r.trace);
            let recomputed = p.action_log_probs(mode, &r.actions);
            for (a, b) in recomputed.iter().zip(&r.log_probs) {
                assert!((a - b).abs() <= 1e-12);
                assert!(a.is_finite());
            }
            let waits = r.actions.iter().filter(|&&a| a == Action::Wait).count();
            assert_eq!(detect_leak(&r.trace.answer, &cfg), waits > 0);
            assert_eq!(r.trace.answer_tokens, r.actions.len() - r.trace.thinking_tokens - 1);
        }
    }

    #[test]
    fn success_is_monotone_in_length() {
        let env = env_with(CorrectnessCurve::Exponential);
        for d in [1.0, 3.0, 16.0] {
            let ps: Vec<f64> = (0..100).map(|l| env.success_probability(l, 0, d)).collect();
            assert!(ps.windows(2).all(|w| w[0] <= w[1]));
            assert!(ps.iter().all(|p| (0.0..=1.0).contains(p)));
        }
        assert_eq!(env.success_probability(0, 0, 4.0), 0.0);
    }

    #[test]
    fn distributions_sum_to_one() {
        let p = default_policy();
        let think: f64 = thinking_length_distribution(&p, Mode::Low).iter().sum();
        let ans: f64 = answer_distribution(&p, Mode::Low).iter().flatten().sum();
        assert!((think - 1.0).abs() < 1e-12);
        assert!((ans - 1.0).abs() < 1e-12);
    }

    #[test]
    fn step_curve_with_known_lengths() {
        // Policy always thinks exactly 8 tokens then finishes immediately.
        let shape = PolicyShape { max_thinking: 8, ..Default::default() };
        let mut p = ToyPolicy::zeros(shape);
        for mode in Mode::ALL {
            for len in 0..8 {
                let off = p.think_state(mode, len).offset;
                p.parameters_mut()[off] = 60.0;
            }
            let off = p.answer_state(mode, 0).offset;
            p.parameters_mut()[off + 2] = 60.0;
        }
        let curve = CorrectnessCurve::Step { threshold: 1.0, below: 0.2, above: 0.9 };
        let env = ToyEnvironment::new(&EnvConfig {
            task_count: 2,
            difficulties: vec![4.0, 16.0],
            curve,
            ..Default::default()
        })
        .unwrap();
        // closed form: task d=4 reaches the step (0.9), d=16 does not (0.2)
        let expected = (0.9 + 0.2) / 2.0;
        let exact = expected_stats(&p, &env, Mode::Medium);
        assert!((exact.accuracy - expected).abs() < 1e-12);
        assert!((exact.thinking_tokens - 8.0).abs() < 1e-12);
        let mc = evaluate(&p, &env, Mode::Medium, 4000, &SeedStream::new(2)).unwrap();
        assert!((mc.accuracy - expected).abs() < 0.02, "mc accuracy {}", mc.accuracy);
        assert_eq!(mc.thinking_tokens, 8.0);
        assert_eq!(mc.answer_tokens, 1.0);
    }

    #[test]
    fn exact_stats_agree_with_monte_carlo() {
        let env = env_with(CorrectnessCurve::Exponential);
        let p = default_policy();
        let exact = expected_stats(&p, &env, Mode::High);
        let mc = evaluate(&p, &env, Mode::High, 2000, &SeedStream::new(21)).unwrap();
        assert!((exact.accuracy - mc.accuracy).abs() < 0.015, "{exact:?} vs {mc:?}");
        assert!((exact.thinking_tokens - mc.thinking_tokens).abs() / exact.thinking_tokens < 0.03);
        assert!((exact.answer_tokens - mc.answer_tokens).abs() / exact.answer_tokens < 0.03);
    }

    #[test]
    fn config_validation() {
        assert!(EnvConfig::default().validate().is_ok());
        let bad = EnvConfig { difficulties: vec![0.5], ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = EnvConfig { difficulties: vec![], ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
