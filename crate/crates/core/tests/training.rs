use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use effort_dial::dapo::{
    clipped_term, dynamic_sampling_filter, run_two_phase, surrogate_gradient, surrogate_objective, DapoConfig, Phase,
    RolloutGroup, ScoredRollout,
};
use effort_dial::policy::{PolicyConfig, PolicyShape, ToyPolicy};
use effort_dial::reward::{ModeRewardConfig, RewardBreakdown};
use effort_dial::toy::{rollout, EnvConfig, ToyEnvironment};
use effort_dial::trace::Mode;

fn breakdown(task: f64, total: f64) -> RewardBreakdown {
    RewardBreakdown { task, lambda: 0.0, length: 0.0, leak: 0.0, total }
}

fn sampled_groups(policy: &ToyPolicy, env: &ToyEnvironment, seed: u64, task_only: bool) -> Vec<RolloutGroup> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..6)
        .map(|g| {
            let mode = Mode::ALL[g % 3];
            let task = &env.tasks[g % env.tasks.len()];
            let rollouts = (0..8)
                .map(|_| {
                    let ro = rollout(policy, env, task, mode, &mut r).unwrap();
                    let task_reward = if r.gen_bool(0.5) { 1.0 } else { 0.0 };
                    let total = if task_only { task_reward } else { task_reward + r.gen_range(-0.5..0.5) };
                    ScoredRollout {
                        actions: ro.actions,
                        old_log_probs: ro.log_probs,
                        reward: breakdown(task_reward, total),
                    }
                })
                .collect();
            RolloutGroup::new(format!("q{g}"), mode, rollouts, 1e-8)
        })
        .collect()
}

#[test]
fn objective_at_old_policy_is_token_weighted_advantage() {
    let env = ToyEnvironment::new(&EnvConfig::default()).unwrap();
    let policy = PolicyConfig::default().build().unwrap();
    let cfg = DapoConfig::default();
    let groups = sampled_groups(&policy, &env, 3, false);
    let step = surrogate_gradient(&groups, &policy, &cfg);

    let expected = groups
        .iter()
        .map(|g| {
            let tokens: usize = g.rollouts.iter().map(|r| r.actions.len()).sum();
            g.rollouts.iter().zip(&g.advantages).map(|(r, a)| r.actions.len() as f64 * a).sum::<f64>() / tokens as f64
        })
        .sum::<f64>()
        / groups.len() as f64;
    assert!((step.objective_value - expected).abs() < 1e-12);
    assert_eq!(step.gradient.len(), policy.num_parameters());
    assert_eq!(step.tokens_processed, groups.iter().map(RolloutGroup::token_count).sum::<usize>());

    // no token is clipped at ratio 1, so the gradient is the plain score-function estimate
    let h = 1e-6;
    let mut worst = 0.0f64;
    let norm = step.gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
    let mut diff2 = 0.0;
    for k in 0..policy.num_parameters() {
        let mut plus = policy.clone();
        plus.parameters_mut()[k] += h;
        let mut minus = policy.clone();
        minus.parameters_mut()[k] -= h;
        let fd = (surrogate_objective(&groups, &plus, &cfg) - surrogate_objective(&groups, &minus, &cfg)) / (2.0 * h);
        diff2 += (fd - step.gradient[k]).powi(2);
        worst = worst.max((fd - step.gradient[k]).abs());
    }
    assert!(norm > 0.0);
    assert!(diff2.sqrt() / norm <= 1e-4, "relative error {}", diff2.sqrt() / norm);
}

#[test]
fn filtered_warmup_groups_have_zero_advantage() {
    let env = ToyEnvironment::new(&EnvConfig::default()).unwrap();
    let policy = PolicyConfig::default().build().unwrap();
    let cfg = DapoConfig::default();
    let mut groups = sampled_groups(&policy, &env, 5, true);
    // force two groups to uniform task reward
    for g in groups.iter_mut().take(2) {
        for r in g.rollouts.iter_mut() {
            r.reward = breakdown(1.0, 1.0);
        }
        *g = RolloutGroup::new(g.query_id.clone(), g.mode, g.rollouts.clone(), 1e-8);
    }
    let kept = dynamic_sampling_filter(groups.clone(), Phase::Warmup, &cfg);
    assert_eq!(kept.len(), groups.len() - 2);
    for dropped in groups.iter().filter(|g| !kept.iter().any(|k| k.query_id == g.query_id)) {
        assert!(dropped.advantages.iter().all(|&a| a == 0.0));
    }
    // the dropped groups only changed the averaging denominator
    let all = surrogate_gradient(&groups, &policy, &cfg);
    let filtered = surrogate_gradient(&kept, &policy, &cfg);
    let scale = groups.len() as f64 / kept.len() as f64;
    for (a, f) in all.gradient.iter().zip(&filtered.gradient) {
        assert!((a * scale - f).abs() <= 1e-12 * f.abs().max(1.0));
    }
    assert_eq!(dynamic_sampling_filter(groups.clone(), Phase::Budget, &cfg).len(), groups.len());
}

fn welch_t(a: &[f64], b: &[f64]) -> f64 {
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let var = |x: &[f64], m: f64| x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64;
    let (ma, mb) = (mean(a), mean(b));
    (ma - mb) / (var(a, ma) / a.len() as f64 + var(b, mb) / b.len() as f64).sqrt()
}

#[test]
fn warmup_alone_leaves_modes_indistinguishable() {
    let env = ToyEnvironment::new(&EnvConfig::default()).unwrap();
    let initial = PolicyConfig::default().build().unwrap();
    let cfg = DapoConfig { budget_steps: 0, ..Default::default() };
    let log = run_two_phase(&env, &initial, &cfg, &ModeRewardConfig::default()).unwrap();
    let policy = ToyPolicy::from_parameters(*initial.shape(), log.final_parameters.clone()).unwrap();
    // warm-up really changed the policy
    let first = log.records[0].eval.high.thinking_tokens;
    assert!(log.last().eval.high.thinking_tokens > first + 5.0);

    let mut r = ChaCha8Rng::seed_from_u64(99);
    let lengths: Vec<Vec<f64>> = Mode::ALL
        .iter()
        .map(|&mode| {
            (0..3_000)
                .map(|i| {
                    let task = &env.tasks[i % env.tasks.len()];
                    rollout(&policy, &env, task, mode, &mut r).unwrap().trace.thinking_tokens as f64
                })
                .collect()
        })
        .collect();
    for (a, b) in [(0, 1), (0, 2), (1, 2)] {
        let t = welch_t(&lengths[a], &lengths[b]);
        assert!(t.abs() < 4.0, "modes {a} and {b} differ: t = {t}");
    }
}

#[test]
fn budget_phase_separates_modes() {
    let env = ToyEnvironment::new(&EnvConfig::default()).unwrap();
    let initial = PolicyConfig::default().build().unwrap();
    let log = run_two_phase(&env, &initial, &DapoConfig::default(), &ModeRewardConfig::default()).unwrap();
    let warm = &log.records[log.metadata.phase_boundary].eval;
    let end = &log.last().eval;
    assert!(end.low.thinking_tokens < 0.5 * warm.low.thinking_tokens);
    assert!(end.high.thinking_tokens > end.medium.thinking_tokens);
    assert_eq!(log.records.len(), 1 + 95 + 40);
    assert!(log.records[1..=95].iter().all(|r| r.phase == 1));
    assert!(log.records[96..].iter().all(|r| r.phase == 2 && r.groups_kept == r.groups_total));
    assert_eq!(log.metadata.group_averaging, "uniform");
    assert_eq!(log.metadata.epochs_per_batch, 1);
}

#[test]
fn equal_seeds_give_bitwise_equal_logs() {
    let env = ToyEnvironment::new(&EnvConfig { task_count: 8, ..Default::default() }).unwrap();
    let policy = ToyPolicy::initial(PolicyShape::default(), 0.2, [0.2, 0.2, 0.6]);
    let cfg = DapoConfig { warmup_steps: 4, budget_steps: 4, seed: 3, ..Default::default() };
    let a = run_two_phase(&env, &policy, &cfg, &ModeRewardConfig::default()).unwrap();
    let b = run_two_phase(&env, &policy, &cfg, &ModeRewardConfig::default()).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let c = run_two_phase(&env, &policy, &DapoConfig { seed: 4, ..cfg }, &ModeRewardConfig::default()).unwrap();
    assert_ne!(a.final_parameters, c.final_parameters);
}

proptest! {
    #[test]
    fn shrinking_inside_ratios_keeps_the_branch(
        ratio in 0.8f64..=1.28,
        shrink in 0.0f64..=1.0,
        adv in -3.0f64..3.0,
    ) {
        let shrunk = 1.0 + (ratio - 1.0) * shrink;
        let (v1, b1) = clipped_term(ratio, adv, 0.2, 0.28);
        let (v2, b2) = clipped_term(shrunk, adv, 0.2, 0.28);
        prop_assert!(b1 && b2);
        prop_assert_eq!(v1, ratio * adv);
        prop_assert_eq!(v2, shrunk * adv);
    }

    #[test]
    fn clipped_branch_only_beyond_bounds(ratio in 0.0f64..3.0, adv in -3.0f64..3.0) {
        let (value, unclipped) = clipped_term(ratio, adv, 0.2, 0.28);
        prop_assert!(value <= ratio * adv);
        if !unclipped {
            prop_assert!((adv > 0.0 && ratio > 1.28) || (adv < 0.0 && ratio < 0.8));
        }
    }
}
