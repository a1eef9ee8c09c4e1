//! Group-sampled clipped-surrogate policy optimization with decoupled clip
//! bounds, dynamic sampling and a two-phase (warm-up, then budget-aware)
//! schedule on the toy policy.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::policy::{Action, ToyPolicy};
use crate::reward::{task_reward, ModeRewardConfig, RewardBreakdown, RewardError, RewardScorer};
use crate::seed::SeedStream;
use crate::toy::{expected_stats, rollout, EvalStats, ToyEnvironment, ToyError};
use crate::trace::Mode;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DapoError {
    #[error("length mismatch: {new} new log-probs vs {old} old log-probs")]
    LengthMismatch { new: usize, old: usize },
    #[error("invalid DAPO config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Toy(#[from] ToyError),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DapoConfig {
    pub group_size: usize,
    pub eps_low: f64,
    pub eps_high: f64,
    /// Step size of plain gradient ascent on the toy policy.
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub budget_steps: usize,
    pub dynamic_sampling_warmup: bool,
    pub dynamic_sampling_budget: bool,
    pub advantage_std_floor: f64,
    /// Set from the run's root seed rather than the config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for DapoConfig {
    fn default() -> Self {
        Self {
            group_size: 16,
            eps_low: 0.2,
            eps_high: 0.28,
            learning_rate: 60.0,
            warmup_steps: 95,
            budget_steps: 40,
            dynamic_sampling_warmup: true,
            dynamic_sampling_budget: false,
            advantage_std_floor: 1e-8,
            seed: 0,
        }
    }
}

impl DapoConfig {
    pub fn validate(&self) -> Result<(), DapoError> {
        if self.group_size < 2 {
            return Err(DapoError::InvalidConfig(format!("group_size must be >= 2, got {}", self.group_size)));
        }
        if !(0.0 < self.eps_low && self.eps_low <= self.eps_high && self.eps_high < 1.0) {
            return Err(DapoError::InvalidConfig(format!(
                "need 0 < eps_low <= eps_high < 1, got ({}, {})",
                self.eps_low, self.eps_high
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(DapoError::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(self.advantage_std_floor > 0.0) {
            return Err(DapoError::InvalidConfig("advantage_std_floor must be positive".into()));
        }
        Ok(())
    }

    pub fn dynamic_sampling(&self, phase: Phase) -> bool {
        match phase {
            Phase::Warmup => self.dynamic_sampling_warmup,
            Phase::Budget => self.dynamic_sampling_budget,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Task reward only, no compression pressure.
    Warmup,
    /// Mode-scaled length reward and leak penalty added.
    Budget,
}

impl Phase {
    pub fn number(self) -> u8 {
        match self {
            Phase::Warmup => 1,
            Phase::Budget => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredRollout {
    pub actions: Vec<Action>,
    pub old_log_probs: Vec<f64>,
    pub reward: RewardBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub query_id: String,
    pub mode: Mode,
    pub rollouts: Vec<ScoredRollout>,
    /// One advantage per rollout, shared by all its tokens.
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn new(query_id: impl Into<String>, mode: Mode, rollouts: Vec<ScoredRollout>, std_floor: f64) -> Self {
        let rewards: Vec<f64> = rollouts.iter().map(|r| r.reward.total).collect();
        Self {
            query_id: query_id.into(),
            mode,
            advantages: group_advantages(&rewards, std_floor),
            rollouts,
        }
    }

    pub fn token_count(&self) -> usize {
        self.rollouts.iter().map(|r| r.actions.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyStep {
    pub objective_value: f64,
    pub gradient: Vec<f64>,
    pub tokens_processed: usize,
}

/// `(R_i - mean) / max(std, floor)` with the population standard deviation.
pub fn group_advantages(rewards: &[f64], std_floor: f64) -> Vec<f64> {
    // the rounded mean of equal values can differ from them by an ulp
    if rewards.windows(2).all(|w| w[0] == w[1]) {
        return vec![0.0; rewards.len()];
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(std_floor);
    rewards.iter().map(|r| (r - mean) / std).collect()
}

pub fn importance_ratios(new_logp: &[f64], old_logp: &[f64]) -> Result<Vec<f64>, DapoError> {
    if new_logp.len() != old_logp.len() {
        return Err(DapoError::LengthMismatch {
            new: new_logp.len(),
            old: old_logp.len(),
        });
    }
    Ok(new_logp.iter().zip(old_logp).map(|(n, o)| (n - o).exp()).collect())
}

/// Per-token surrogate `min(r·A, clip(r, 1-eps_low, 1+eps_high)·A)` and
/// whether the unclipped branch was taken (ties count as unclipped).
pub fn clipped_term(ratio: f64, advantage: f64, eps_low: f64, eps_high: f64) -> (f64, bool) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - eps_low, 1.0 + eps_high) * advantage;
    if unclipped <= clipped {
        (unclipped, true)
    } else {
        (clipped, false)
    }
}

/// Token-normalized surrogate per group, averaged uniformly over groups.
///
/// `ratios[g][i][t]` is the ratio of token `t` of rollout `i` in group `g`.
pub fn clipped_surrogate(groups: &[RolloutGroup], ratios: &[Vec<Vec<f64>>], cfg: &DapoConfig) -> f64 {
    if groups.is_empty() {
        return 0.0;
    }
    let total: f64 = groups
        .iter()
        .zip(ratios)
        .map(|(group, group_ratios)| {
            let tokens = group.token_count();
            if tokens == 0 {
                return 0.0;
            }
            let sum: f64 = group
                .advantages
                .iter()
                .zip(group_ratios)
                .flat_map(|(&adv, rs)| rs.iter().map(move |&r| clipped_term(r, adv, cfg.eps_low, cfg.eps_high).0))
                .sum();
            sum / tokens as f64
        })
        .sum();
    total / groups.len() as f64
}

pub fn group_ratios(groups: &[RolloutGroup], policy: &ToyPolicy) -> Vec<Vec<Vec<f64>>> {
    groups
        .iter()
        .map(|g| {
            g.rollouts
                .iter()
                .map(|r| {
                    let new = policy.action_log_probs(g.mode, &r.actions);
                    importance_ratios(&new, &r.old_log_probs).expect("log-prob lengths agree")
                })
                .collect()
        })
        .collect()
}

pub fn surrogate_objective(groups: &[RolloutGroup], policy: &ToyPolicy, cfg: &DapoConfig) -> f64 {
    clipped_surrogate(groups, &group_ratios(groups, policy), cfg)
}

/// Objective value and its gradient with respect to the policy parameters.
///
/// Tokens whose min picks the clipped (constant) branch contribute nothing.
pub fn surrogate_gradient(groups: &[RolloutGroup], policy: &ToyPolicy, cfg: &DapoConfig) -> PolicyStep {
    let mut gradient = vec![0.0; policy.num_parameters()];
    let ratios = group_ratios(groups, policy);
    let tokens_processed = groups.iter().map(RolloutGroup::token_count).sum();
    if groups.is_empty() {
        return PolicyStep {
            objective_value: 0.0,
            gradient,
            tokens_processed,
        };
    }
    let group_scale = 1.0 / groups.len() as f64;
    let partials: Vec<Vec<f64>> = groups
        .par_iter()
        .zip(ratios.par_iter())
        .map(|(group, group_ratios)| {
            let mut g = vec![0.0; policy.num_parameters()];
            let tokens = group.token_count();
            if tokens == 0 {
                return g;
            }
            let scale = group_scale / tokens as f64;
            for ((rollout, &adv), rs) in group.rollouts.iter().zip(&group.advantages).zip(group_ratios) {
                let weights: Vec<f64> = rs
                    .iter()
                    .map(|&r| match clipped_term(r, adv, cfg.eps_low, cfg.eps_high) {
                        (_, true) => scale * adv * r,
                        (_, false) => 0.0,
                    })
                    .collect();
                policy.accumulate_score(group.mode, &rollout.actions, &weights, &mut g);
            }
            g
        })
        .collect();
    for partial in &partials {
        for (acc, v) in gradient.iter_mut().zip(partial) {
            *acc += v;
        }
    }
    PolicyStep {
        objective_value: clipped_surrogate(groups, &ratios, cfg),
        gradient,
        tokens_processed,
    }
}

/// Drops groups whose task rewards are all equal when dynamic sampling is on
/// for `phase`.
pub fn dynamic_sampling_filter(groups: Vec<RolloutGroup>, phase: Phase, cfg: &DapoConfig) -> Vec<RolloutGroup> {
    if !cfg.dynamic_sampling(phase) {
        return groups;
    }
    groups
        .into_iter()
        .filter(|g| {
            let first = g.rollouts.first().map(|r| r.reward.task);
            g.rollouts.iter().any(|r| Some(r.reward.task) != first)
        })
        .collect()
}

/// Per-mode evaluation, indexed by [`Mode::index`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ModeStats {
    pub low: EvalStats,
    pub medium: EvalStats,
    pub high: EvalStats,
}

impl ModeStats {
    pub fn get(&self, mode: Mode) -> &EvalStats {
        match mode {
            Mode::Low => &self.low,
            Mode::Medium => &self.medium,
            Mode::High => &self.high,
        }
    }

    fn evaluate(policy: &ToyPolicy, env: &ToyEnvironment) -> Self {
        Self {
            low: expected_stats(policy, env, Mode::Low),
            medium: expected_stats(policy, env, Mode::Medium),
            high: expected_stats(policy, env, Mode::High),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// 0 for the initial evaluation, then 1 (warm-up) or 2 (budget-aware).
    pub phase: u8,
    pub objective: f64,
    pub mean_reward: f64,
    pub groups_total: usize,
    pub groups_kept: usize,
    pub tokens: usize,
    pub eval: ModeStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogMetadata {
    pub seed: u64,
    pub group_size: usize,
    pub eps_low: f64,
    pub eps_high: f64,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub budget_steps: usize,
    /// Last step of the warm-up phase.
    pub phase_boundary: usize,
    pub group_averaging: String,
    pub epochs_per_batch: usize,
    pub evaluation: String,
    pub num_parameters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub metadata: LogMetadata,
    pub records: Vec<StepRecord>,
    pub final_parameters: Vec<f64>,
}

impl TrainingLog {
    /// Best High-mode accuracy seen up to the end of warm-up.
    pub fn warmup_peak_accuracy(&self, mode: Mode) -> f64 {
        self.records
            .iter()
            .filter(|r| r.phase <= 1)
            .map(|r| r.eval.get(mode).accuracy)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn last(&self) -> &StepRecord {
        self.records.last().expect("log always holds the initial evaluation")
    }
}

fn sample_groups(
    policy: &ToyPolicy,
    env: &ToyEnvironment,
    cfg: &DapoConfig,
    reward_cfg: &ModeRewardConfig,
    phase: Phase,
    step: usize,
    seeds: &SeedStream,
) -> Result<Vec<RolloutGroup>, DapoError> {
    let jobs: Vec<(usize, Mode)> = (0..env.tasks.len())
        .flat_map(|t| Mode::ALL.into_iter().map(move |m| (t, m)))
        .collect();
    let scorer = RewardScorer::new(reward_cfg);
    jobs.par_iter()
        .map(|&(t, mode)| {
            let task = &env.tasks[t];
            let rollouts = (0..cfg.group_size)
                .map(|i| {
                    let mut rng = seeds.rng(&[step as u64, t as u64, mode.index() as u64, i as u64]);
                    rollout(policy, env, task, mode, &mut rng)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let rewards = match phase {
                Phase::Warmup => rollouts
                    .iter()
                    .map(|r| {
                        let task_r = task_reward(&r.trace, &task.reference_answer);
                        RewardBreakdown {
                            task: task_r,
                            lambda: 0.0,
                            length: 0.0,
                            leak: 0.0,
                            total: task_r,
                        }
                    })
                    .collect(),
                Phase::Budget => {
                    let traces: Vec<_> = rollouts.iter().map(|r| &r.trace).collect();
                    scorer.score_group(&traces, &task.reference_answer)?
                }
            };
            let scored = rollouts
                .into_iter()
                .zip(rewards)
                .map(|(r, reward)| ScoredRollout {
                    actions: r.actions,
                    old_log_probs: r.log_probs,
                    reward,
                })
                .collect();
            Ok(RolloutGroup::new(task.query_id.clone(), mode, scored, cfg.advantage_std_floor))
        })
        .collect()
}

/// Warm-up on task reward alone, then budget-aware training with the
/// composite reward. Every mode is trained in both phases; one old-policy
/// snapshot and one gradient step per batch.
pub fn run_two_phase(
    env: &ToyEnvironment,
    policy: &ToyPolicy,
    cfg: &DapoConfig,
    reward_cfg: &ModeRewardConfig,
) -> Result<TrainingLog, DapoError> {
    cfg.validate()?;
    reward_cfg.validate()?;
    let mut policy = policy.clone();
    let seeds = SeedStream::new(cfg.seed).child("rollouts");
    let mut records = vec![StepRecord {
        step: 0,
        phase: 0,
        objective: 0.0,
        mean_reward: 0.0,
        groups_total: 0,
        groups_kept: 0,
        tokens: 0,
        eval: ModeStats::evaluate(&policy, env),
    }];

    for step in 1..=cfg.warmup_steps + cfg.budget_steps {
        let phase = if step <= cfg.warmup_steps {
            Phase::Warmup
        } else {
            Phase::Budget
        };
        let groups = sample_groups(&policy, env, cfg, reward_cfg, phase, step, &seeds)?;
        let groups_total = groups.len();
        let n_rollouts: usize = groups.iter().map(|g| g.rollouts.len()).sum();
        let mean_reward = groups
            .iter()
            .flat_map(|g| g.rollouts.iter().map(|r| r.reward.total))
            .sum::<f64>()
            / n_rollouts.max(1) as f64;
        let kept = dynamic_sampling_filter(groups, phase, cfg);
        let update = surrogate_gradient(&kept, &policy, cfg);
        for (p, g) in policy.parameters_mut().iter_mut().zip(&update.gradient) {
            *p += cfg.learning_rate * g;
        }
        records.push(StepRecord {
            step,
            phase: phase.number(),
            objective: update.objective_value,
            mean_reward,
            groups_total,
            groups_kept: kept.len(),
            tokens: update.tokens_processed,
            eval: ModeStats::evaluate(&policy, env),
        });
    }

    Ok(TrainingLog {
        metadata: LogMetadata {
            seed: cfg.seed,
            group_size: cfg.group_size,
            eps_low: cfg.eps_low,
            eps_high: cfg.eps_high,
            learning_rate: cfg.learning_rate,
            warmup_steps: cfg.warmup_steps,
            budget_steps: cfg.budget_steps,
            phase_boundary: cfg.warmup_steps,
            group_averaging: "uniform".into(),
            epochs_per_batch: 1,
            evaluation: "exact expectation over the toy policy".into(),
            num_parameters: policy.num_parameters(),
        },
        records,
        final_parameters: policy.parameters().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyShape;
    use crate::toy::EnvConfig;
    use proptest::prelude::*;

    fn reward(total: f64, task: f64) -> RewardBreakdown {
        RewardBreakdown { task, lambda: 0.0, length: 0.0, leak: 0.0, total }
    }

    fn group_of(seqs: &[(Vec<Action>, f64)], mode: Mode, policy: &ToyPolicy) -> RolloutGroup {
        let rollouts = seqs
            .iter()
            .map(|(actions, total)| ScoredRollout {
                old_log_probs: policy.action_log_probs(mode, actions),
                actions: actions.clone(),
                reward: reward(*total, if *total > 0.5 { 1.0 } else { 0.0 }),
            })
            .collect();
        RolloutGroup::new("q", mode, rollouts, 1e-8)
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(group_advantages(&[1.0, 0.0], 1e-8), vec![1.0, -1.0]);
        assert_eq!(group_advantages(&[0.3; 16], 1e-8), vec![0.0; 16]);
        let a = group_advantages(&[2.0, 0.0, 0.0, 0.0], 1e-8);
        // mean 0.5, population std sqrt(0.75)
        let std = 0.75f64.sqrt();
        let expected = [1.5 / std, -0.5 / std, -0.5 / std, -0.5 / std];
        for (x, y) in a.iter().zip(expected) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!((a[0] - 1.7320508075688772).abs() < 1e-12);
        assert!((a[1] + 0.5773502691896258).abs() < 1e-12);
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(importance_ratios(&[-1.0, -2.0], &[-1.0, -2.0]).unwrap(), vec![1.0, 1.0]);
        let r = importance_ratios(&[2f64.ln() - 1.0], &[-1.0]).unwrap();
        assert!((r[0] - 2.0).abs() < 1e-15);
        let r = importance_ratios(&[-(4f64.ln()), 4f64.ln()], &[0.0, 0.0]).unwrap();
        assert!((r[0] - 0.25).abs() < 1e-15 && (r[1] - 4.0).abs() < 1e-14);
        assert_eq!(
            importance_ratios(&[0.0], &[0.0, 1.0]),
            Err(DapoError::LengthMismatch { new: 1, old: 2 })
        );
    }

    #[test]
    fn clip_terms() {
        assert_eq!(clipped_term(1.5, 1.0, 0.2, 0.28), (1.28, false));
        // clip(0.7) = 0.8 and min(-0.7, -0.8) = -0.8
        let (v, unclipped) = clipped_term(0.7, -1.0, 0.2, 0.28);
        assert!((v + 0.8).abs() < 1e-15 && !unclipped);
        // favourable side of the bound stays unclipped
        assert_eq!(clipped_term(0.7, 1.0, 0.2, 0.28), (0.7, true));
        assert_eq!(clipped_term(1.5, -1.0, 0.2, 0.28), (-1.5, true));
        assert_eq!(clipped_term(1.1, 2.0, 0.2, 0.28), (2.2, true));
    }

    #[test]
    fn single_token_surrogates() {
        let cfg = DapoConfig::default();
        let mk = |adv: f64| RolloutGroup {
            query_id: "q".into(),
            mode: Mode::Low,
            rollouts: vec![ScoredRollout {
                actions: vec![Action::StopThink],
                old_log_probs: vec![0.0],
                reward: reward(0.0, 0.0),
            }],
            advantages: vec![adv],
        };
        assert!((clipped_surrogate(&[mk(1.0)], &[vec![vec![1.5]]], &cfg) - 1.28).abs() < 1e-15);
        assert!((clipped_surrogate(&[mk(-1.0)], &[vec![vec![0.7]]], &cfg) + 0.8).abs() < 1e-15);
        assert_eq!(clipped_surrogate(&[], &[], &cfg), 0.0);
    }

    #[test]
    fn unit_ratios_give_token_weighted_advantage() {
        let policy = ToyPolicy::zeros(PolicyShape::default());
        let c = Action::Continue;
        let s = Action::StopThink;
        let f = Action::Finish;
        let g1 = group_of(&[(vec![c, c, s, f], 1.0), (vec![s, f], 0.0)], Mode::Low, &policy);
        let g2 = group_of(&[(vec![s, f], 2.0), (vec![c, s, f], 1.0), (vec![s, f], 0.0)], Mode::High, &policy);
        let groups = vec![g1, g2];
        let expected: f64 = groups
            .iter()
            .map(|g| {
                let weighted: f64 = g.rollouts.iter().zip(&g.advantages).map(|(r, a)| r.actions.len() as f64 * a).sum();
                weighted / g.token_count() as f64
            })
            .sum::<f64>()
            / 2.0;
        let value = surrogate_objective(&groups, &policy, &DapoConfig::default());
        assert!((value - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_advantages_give_zero_gradient() {
        let policy = ToyPolicy::initial(PolicyShape::default(), 0.2, [0.3, 0.3, 0.4]);
        let c = Action::Continue;
        let g = group_of(
            &[(vec![c, Action::StopThink, Action::Finish], 1.0), (vec![Action::StopThink, Action::Wait, Action::Finish], 1.0)],
            Mode::Medium,
            &policy,
        );
        let step = surrogate_gradient(&[g], &policy, &DapoConfig::default());
        assert!(step.gradient.iter().all(|&x| x == 0.0));
        assert_eq!(step.gradient.len(), policy.num_parameters());
        assert_eq!(step.tokens_processed, 6);
    }

    #[test]
    fn clipped_tokens_do_not_contribute() {
        let mut policy = ToyPolicy::zeros(PolicyShape::default());
        let actions = vec![Action::StopThink, Action::Finish];
        let old = policy.action_log_probs(Mode::Low, &actions);
        // make both tokens far more likely under the new policy
        let s0 = policy.think_state(Mode::Low, 0);
        policy.parameters_mut()[s0.offset + 1] = 3.0;
        let s1 = policy.answer_state(Mode::Low, 0);
        policy.parameters_mut()[s1.offset + 2] = 3.0;
        let group = RolloutGroup {
            query_id: "q".into(),
            mode: Mode::Low,
            rollouts: vec![ScoredRollout { actions, old_log_probs: old, reward: reward(1.0, 1.0) }],
            advantages: vec![1.0],
        };
        let step = surrogate_gradient(&[group], &policy, &DapoConfig::default());
        assert!(step.gradient.iter().all(|&x| x == 0.0));
        assert!((step.objective_value - 1.28).abs() < 1e-12);
    }

    #[test]
    fn dynamic_sampling_rules() {
        let policy = ToyPolicy::zeros(PolicyShape::default());
        let seq = vec![Action::StopThink, Action::Finish];
        let all_right = group_of(&vec![(seq.clone(), 1.0); 16], Mode::High, &policy);
        let all_wrong = group_of(&vec![(seq.clone(), 0.0); 16], Mode::High, &policy);
        let mut mixed_seqs = vec![(seq.clone(), 0.0); 16];
        mixed_seqs[0].1 = 1.0;
        let mixed = group_of(&mixed_seqs, Mode::High, &policy);
        let cfg = DapoConfig::default();
        let kept = dynamic_sampling_filter(vec![all_right.clone(), mixed.clone(), all_wrong.clone()], Phase::Warmup, &cfg);
        assert_eq!(kept, vec![mixed.clone()]);
        let kept = dynamic_sampling_filter(vec![all_right.clone(), mixed, all_wrong], Phase::Budget, &cfg);
        assert_eq!(kept.len(), 3);
    }

    #[test]
    fn filtered_groups_carry_no_gradient_in_warmup() {
        let policy = ToyPolicy::initial(PolicyShape::default(), 0.2, [0.3, 0.3, 0.4]);
        let c = Action::Continue;
        let s = Action::StopThink;
        let f = Action::Finish;
        let uniform = group_of(&[(vec![c, s, f], 1.0), (vec![s, f], 1.0)], Mode::Low, &policy);
        let mixed = group_of(&[(vec![c, c, s, f], 1.0), (vec![s, f], 0.0)], Mode::Low, &policy);
        let cfg = DapoConfig::default();
        let with = surrogate_gradient(&[uniform.clone(), mixed.clone()], &policy, &cfg);
        let without = surrogate_gradient(&dynamic_sampling_filter(vec![uniform, mixed], Phase::Warmup, &cfg), &policy, &cfg);
        // same direction, only the group averaging changes
        for (a, b) in with.gradient.iter().zip(&without.gradient) {
            assert!((2.0 * a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn config_validation() {
        assert!(DapoConfig::default().validate().is_ok());
        assert!(DapoConfig { group_size: 1, ..Default::default() }.validate().is_err());
        assert!(DapoConfig { eps_low: 0.3, eps_high: 0.2, ..Default::default() }.validate().is_err());
        assert!(DapoConfig { eps_high: 1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn zero_steps_logs_initial_evaluation() {
        let env = ToyEnvironment::new(&EnvConfig::default()).unwrap();
        let policy = ToyPolicy::initial(PolicyShape::default(), 0.1, [0.3, 0.3, 0.4]);
        let cfg = DapoConfig { warmup_steps: 0, budget_steps: 0, ..Default::default() };
        let log = run_two_phase(&env, &policy, &cfg, &ModeRewardConfig::default()).unwrap();
        assert_eq!(log.records.len(), 1);
        assert_eq!(log.records[0].phase, 0);
        assert_eq!(log.final_parameters, policy.parameters());
    }

    #[test]
    fn short_runs_are_deterministic() {
        let env = ToyEnvironment::new(&EnvConfig::default()).unwrap();
        let policy = ToyPolicy::initial(PolicyShape::default(), 0.1, [0.3, 0.3, 0.4]);
        let cfg = DapoConfig { warmup_steps: 3, budget_steps: 3, seed: 9, ..Default::default() };
        let a = run_two_phase(&env, &policy, &cfg, &ModeRewardConfig::default()).unwrap();
        let b = run_two_phase(&env, &policy, &cfg, &ModeRewardConfig::default()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.records.len(), 7);
        assert_eq!(a.records[3].phase, 1);
        assert_eq!(a.records[4].phase, 2);
    }

    proptest! {
        #[test]
        fn advantages_standardized(rewards in proptest::collection::vec(-3.0f64..3.0, 2..32)) {
            let a = group_advantages(&rewards, 1e-8);
            let n = a.len() as f64;
            let mean = a.iter().sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9);
            let spread = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - rewards.iter().cloned().fold(f64::INFINITY, f64::min);
            if spread > 1e-6 {
                let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
                prop_assert!((std - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn shrinking_inside_band_keeps_branch(r in 0.8f64..1.28, t in 0.0f64..1.0, adv in -2.0f64..2.0) {
            let shrunk = 1.0 + (r - 1.0) * t;
            let (_, a) = clipped_term(r, adv, 0.2, 0.28);
            let (_, b) = clipped_term(shrunk, adv, 0.2, 0.28);
            prop_assert!(a && b);
        }
    }
}
