//! Invariant batteries behind the `check` subcommand.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use relab_core::algorithms::{
    asymre_grad, clip_mask_one_side, clip_mask_ring, clip_mask_two_side, grpo_advantages, multi_step_reinforce_grad,
    multi_step_surrogate_loss, opmd_grad, opmd_loss, pairwise_weighted_grad, rec_grad, red_weight_grad,
    red_weight_weights, reinforce_grad, surrogate_loss, surrogate_prefactor, Sign, WeightMatrix,
};
use relab_core::oracle::{
    consistency_residuals, exact_policy_gradient, expected_group_relative_direction, finite_diff_grad,
    iterated_tilting, mc_vs_exact_direction, optimal_kl_regularized_policy, rel_err, spread, tilt_iteration_bound,
    ExactDistribution, FD_STEP,
};
use relab_core::rng::RandomStream;
use relab_core::scheduler::{off_policyness, ScheduleState};
use relab_core::{
    AdvantageKind, AlgorithmConfig, AlgorithmKind, BanditTask, ClipConfig, GradientVector, LossNorm, MultiStepTask,
    PolicyShape, RewardRule, RolloutGroup, ScheduleConfig, SequenceTask, TabularPolicy, Task, TokenSeq,
    TrajectoryReward,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Gradients,
    Masks,
    Identities,
    Scheduler,
    OracleConsistency,
    All,
}

impl Suite {
    pub const EACH: [Suite; 5] = [
        Suite::Gradients,
        Suite::Masks,
        Suite::Identities,
        Suite::Scheduler,
        Suite::OracleConsistency,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Gradients => "gradients",
            Suite::Masks => "masks",
            Suite::Identities => "identities",
            Suite::Scheduler => "scheduler",
            Suite::OracleConsistency => "oracle-consistency",
            Suite::All => "all",
        }
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Suite::EACH
            .into_iter()
            .chain([Suite::All])
            .find(|x| x.name() == s)
            .ok_or_else(|| {
                format!(
                    "unknown suite {s:?}; expected gradients, masks, identities, scheduler, oracle-consistency or all"
                )
            })
    }
}

/// One measured quantity and the bound it must stay below.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: &'static str,
    pub measured: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.measured <= self.tolerance
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}/{}: measured {:.3e}, tolerance {:.1e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.measured,
            self.tolerance
        )
    }
}

pub fn run_suite(suite: Suite) -> relab_core::Result<Vec<CheckResult>> {
    match suite {
        Suite::Gradients => gradients(),
        Suite::Masks => Ok(masks()),
        Suite::Identities => identities(),
        Suite::Scheduler => scheduler(),
        Suite::OracleConsistency => oracle_consistency(),
        Suite::All => {
            let mut all = Vec::new();
            for s in Suite::EACH {
                all.extend(run_suite(s)?);
            }
            Ok(all)
        }
    }
}

/// Tab-separated report, one row per check.
pub fn report(results: &[CheckResult]) -> String {
    let mut s = String::from("suite\tcheck\tmeasured\ttolerance\tstatus\n");
    for r in results {
        s.push_str(&format!(
            "{}\t{}\t{:e}\t{:e}\t{}\n",
            r.suite,
            r.name,
            r.measured,
            r.tolerance,
            if r.passed() { "pass" } else { "fail" }
        ));
    }
    s
}

fn result(suite: &'static str, name: &'static str, measured: f64, tolerance: f64) -> CheckResult {
    CheckResult {
        suite,
        name,
        measured,
        tolerance,
    }
}

fn sequence_task(rng: &mut RandomStream) -> Task {
    let v = rng.gen_range(2..=4);
    let l = rng.gen_range(2..=3);
    let p = rng.gen_range(1..=2);
    let prompts: Vec<TokenSeq> = (0..p).map(|i| TokenSeq::from_ids(&[i])).collect();
    let rule = if rng.gen_bool(0.5) {
        RewardRule::Parity
    } else {
        let targets = (0..p)
            .map(|_| {
                let n = rng.gen_range(0..l);
                let mut ids: Vec<usize> = (0..n).map(|_| rng.gen_range(0..v - 1)).collect();
                ids.push(v - 1);
                TokenSeq::from_ids(&ids)
            })
            .collect();
        RewardRule::TargetMatch { targets }
    };
    Task::Sequence(SequenceTask::new(v, l, prompts, None, rule).expect("generated tasks are valid"))
}

fn multi_step_task(rng: &mut RandomStream) -> MultiStepTask {
    let states = rng.gen_range(2..=4);
    let actions = rng.gen_range(2..=3);
    let horizon = rng.gen_range(2..=3);
    let transitions = (0..states * actions).map(|_| rng.gen_range(0..states)).collect();
    let values = (0..states).map(|_| rng.gen::<f64>()).collect();
    MultiStepTask::new(
        states,
        actions,
        horizon,
        transitions,
        vec![0],
        TrajectoryReward::StateValues { values },
    )
    .expect("generated tasks are valid")
}

/// A sampled group at the first prompt, with distinct random rewards.
fn group(task: &Task, policy: &TabularPolicy, k: usize, rng: &mut RandomStream) -> relab_core::Result<RolloutGroup> {
    let prompt = task.prompts()[0].clone();
    let mut g = task.generate_group(policy, &prompt, k, 0, rng)?;
    for r in g.rewards.iter_mut() {
        *r = rng.gen::<f64>();
    }
    Ok(g)
}

struct Instance {
    task: Task,
    anchor: TabularPolicy,
    other: TabularPolicy,
    group: RolloutGroup,
    tau: f64,
}

fn instances(seed: u64, n: u64) -> relab_core::Result<Vec<Instance>> {
    (0..n)
        .map(|i| {
            let mut rng = RandomStream::derive(seed, &[i]);
            let task = sequence_task(&mut rng);
            let anchor = TabularPolicy::random(task.shape(), 1.0, &mut rng);
            let other = TabularPolicy::random(task.shape(), 1.0, &mut rng);
            let k = rng.gen_range(2..=8);
            let group = group(&task, &anchor, k, &mut rng)?;
            let tau = rng.gen_range(0.1..10.0);
            Ok(Instance {
                task,
                anchor,
                other,
                group,
                tau,
            })
        })
        .collect()
}

fn max_rel(a: &GradientVector, b: &GradientVector) -> f64 {
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| rel_err(*x, *y))
        .fold(0.0, f64::max)
}

fn gradients() -> relab_core::Result<Vec<CheckResult>> {
    const S: &str = "gradients";
    let mut score = 0.0f64;
    let mut surrogate = 0.0f64;
    let mut opmd = 0.0f64;
    let mut multi_surrogate = 0.0f64;
    for inst in instances(11, 30)? {
        let prompt = inst.task.prompts()[0].clone();
        let exact = exact_policy_gradient(&inst.task, &inst.other, &prompt)?;
        let fd = finite_diff_grad(
            |p| Ok(ExactDistribution::of_policy(&inst.task, p, &prompt)?.expected_reward()),
            &inst.other,
            FD_STEP,
        )?;
        score = score.max(fd.max_abs_diff(&exact)?);

        let fd = finite_diff_grad(
            |p| surrogate_loss(&inst.group, p, &inst.anchor, inst.tau),
            &inst.anchor,
            FD_STEP,
        )?;
        let expected =
            reinforce_grad(&inst.group, &inst.anchor, LossNorm::PerGroupK)?.scaled(-surrogate_prefactor(inst.tau));
        surrogate = surrogate.max(fd.max_abs_diff(&expected)?);

        let fd = finite_diff_grad(
            |p| opmd_loss(&inst.group, p, &inst.anchor, inst.tau),
            &inst.other,
            FD_STEP,
        )?;
        let g = opmd_grad(&inst.group, &inst.other, &inst.anchor, inst.tau)?;
        opmd = opmd.max(max_rel(&fd.scaled(-1.0), &g));
    }
    for i in 0..20u64 {
        let mut rng = RandomStream::derive(12, &[i]);
        let task = Task::MultiStep(multi_step_task(&mut rng));
        let anchor = TabularPolicy::random(task.shape(), 1.0, &mut rng);
        let g = group(&task, &anchor, 4, &mut rng)?;
        let tau = rng.gen_range(0.1..10.0);
        let fd = finite_diff_grad(|p| multi_step_surrogate_loss(&g, p, &anchor, tau), &anchor, FD_STEP)?;
        let expected = multi_step_reinforce_grad(&g, &anchor)?.scaled(-surrogate_prefactor(tau));
        multi_surrogate = multi_surrogate.max(fd.max_abs_diff(&expected)?);
    }
    Ok(vec![
        result(S, "exact_score_function_vs_fd", score, 1e-7),
        result(S, "surrogate_at_anchor_vs_fd", surrogate, 1e-6),
        result(S, "opmd_loss_vs_fd_rel", opmd, 1e-4),
        result(S, "multi_step_surrogate_vs_fd", multi_surrogate, 1e-6),
    ])
}

fn masks() -> Vec<CheckResult> {
    const S: &str = "masks";
    let configs = [(0.2, 0.2, 0.6, 2.0), (0.1, 0.3, 0.5, 1.0), (0.6, 2.0, 0.9, 4.0)];
    let mut table = [0usize; 3];
    let mut limits = [0usize; 2];
    let mut dominance = 0usize;
    let ind = |b: bool| -> u8 { u8::from(b) };
    for (lo, hi, lo2, hi2) in configs {
        let c = ClipConfig::with_outer(lo, hi, lo2, hi2).expect("valid clip");
        let same = ClipConfig::new(lo, hi).expect("valid clip");
        let far = ClipConfig::with_outer(lo, hi, 1e9, 1e9).expect("valid clip");
        for i in 0..5000 {
            let ratio = 0.01 + 4.99 * i as f64 / 4999.0;
            for sign in [Sign::Positive, Sign::Negative] {
                let (pos, neg) = (ind(sign == Sign::Positive), ind(sign == Sign::Negative));
                let one = pos * ind(ratio <= 1.0 + hi) + neg * ind(ratio >= 1.0 - lo);
                let two = ind(ratio >= 1.0 - lo) * ind(ratio <= 1.0 + hi);
                let ring = (two + pos * ind(ratio <= 1.0 - lo2) + neg * ind(ratio >= 1.0 + hi2)).min(1);
                table[0] += usize::from(ind(clip_mask_one_side(ratio, sign, &c)) != one);
                table[1] += usize::from(ind(clip_mask_two_side(ratio, &c)) != two);
                table[2] += usize::from(ind(clip_mask_ring(ratio, sign, &c)) != ring);
                limits[0] += usize::from(clip_mask_ring(ratio, sign, &same) != clip_mask_one_side(ratio, sign, &same));
                limits[1] += usize::from(clip_mask_ring(ratio, sign, &far) != clip_mask_two_side(ratio, &far));
                let two_on = clip_mask_two_side(ratio, &c);
                dominance +=
                    usize::from(two_on && !(clip_mask_one_side(ratio, sign, &c) && clip_mask_ring(ratio, sign, &c)));
            }
        }
    }
    vec![
        result(S, "one_side_truth_table_mismatches", table[0] as f64, 0.0),
        result(S, "two_side_truth_table_mismatches", table[1] as f64, 0.0),
        result(S, "ring_truth_table_mismatches", table[2] as f64, 0.0),
        result(S, "ring_inner_equals_outer_is_one_side", limits[0] as f64, 0.0),
        result(S, "ring_far_outer_is_two_side", limits[1] as f64, 0.0),
        result(S, "two_side_dominated_by_one_side_and_ring", dominance as f64, 0.0),
    ]
}

fn identities() -> relab_core::Result<Vec<CheckResult>> {
    const S: &str = "identities";
    let mut worst = [0.0f64; 8];
    for inst in instances(21, 40)? {
        let (g, anchor, tau) = (&inst.group, &inst.anchor, inst.tau);
        let k = g.k();
        let r = reinforce_grad(g, anchor, LossNorm::PerGroupK)?;
        let scores: Vec<GradientVector> = g
            .responses
            .iter()
            .map(|y| anchor.grad_log_prob(&g.prompt, y))
            .collect::<relab_core::Result<_>>()?;

        worst[0] = worst[0].max(opmd_grad(g, anchor, anchor, tau)?.max_abs_diff(&r)?);

        let mut asym = r.clone();
        for s in &scores {
            asym.add_scaled(s, tau / k as f64)?;
        }
        worst[1] = worst[1].max(asymre_grad(g, anchor, tau)?.max_abs_diff(&asym)?);

        worst[2] =
            worst[2].max(pairwise_weighted_grad(g, anchor, &WeightMatrix::unit(k))?.max_abs_diff(&r.scaled(k as f64))?);

        let v: Vec<f64> = (0..k).map(|i| 0.5 + i as f64 / k as f64).collect();
        let rank_one = pairwise_weighted_grad(g, anchor, &WeightMatrix::RankOne(v.clone()))?;
        worst[3] =
            worst[3].max(rank_one.max_abs_diff(&pairwise_weighted_grad(g, anchor, &WeightMatrix::outer(&v))?)?);

        let w = red_weight_weights(&g.rewards, tau, AdvantageKind::Normalized)?;
        let wsum: f64 = w.iter().sum();
        let rw = w.iter().zip(&g.rewards).map(|(a, b)| a * b).sum::<f64>() / wsum;
        let rbar = g.rewards.iter().sum::<f64>() / k as f64;
        let mut decomposed = GradientVector::zeros_like(anchor);
        for i in 0..k {
            decomposed.add_scaled(&scores[i], w[i] * (g.rewards[i] - rw) + w[i] * (rw - rbar))?;
        }
        worst[4] = worst[4].max(red_weight_grad(g, anchor, tau, AdvantageKind::Normalized)?.max_abs_diff(&decomposed)?);

        let adv = grpo_advantages(&g.rewards)?;
        let mut normalized = GradientVector::zeros_like(anchor);
        for (s, a) in scores.iter().zip(&adv) {
            normalized.add_scaled(s, a / k as f64)?;
        }
        let grpo = rec_grad(
            g,
            anchor,
            &AlgorithmConfig::new(AlgorithmKind::Grpo).with_clip(ClipConfig::new(0.2, 0.2)?),
        )?;
        worst[5] = worst[5].max(grpo.max_abs_diff(&normalized)?);

        let rec = rec_grad(
            g,
            anchor,
            &AlgorithmConfig::new(AlgorithmKind::RecOneSideNoIs).with_clip(ClipConfig::new(0.2, 0.2)?),
        )?;
        worst[6] = worst[6].max(rec.max_abs_diff(&r)?);
    }
    for i in 0..20u64 {
        let mut rng = RandomStream::derive(22, &[i]);
        let m = multi_step_task(&mut rng);
        let task = Task::MultiStep(m.clone());
        let pol = TabularPolicy::random(task.shape(), 1.0, &mut rng);
        let g = group(&task, &pol, 4, &mut rng)?;
        let base = multi_step_reinforce_grad(&g, &pol)?;
        let rewired: Vec<usize> = m.transitions.iter().map(|_| rng.gen_range(0..m.num_states)).collect();
        let other = MultiStepTask::new(
            m.num_states,
            m.num_actions,
            m.horizon,
            rewired,
            m.start_states.clone(),
            m.reward.clone(),
        )?;
        let mut regrouped = g.clone();
        regrouped.states = Some(g.responses.iter().map(|a| other.rollout_states(&g.prompt, a)).collect());
        worst[7] = worst[7].max(multi_step_reinforce_grad(&regrouped, &pol)?.max_abs_diff(&base)?);
    }
    let names = [
        "opmd_at_anchor_equals_reinforce",
        "asymre_decomposition",
        "pairwise_unit_equals_k_reinforce",
        "pairwise_rank_one_equals_outer",
        "red_weight_two_term_decomposition",
        "grpo_on_policy_equals_normalized_reinforce",
        "rec_on_policy_equals_reinforce",
        "multi_step_transition_independence",
    ];
    Ok(names.iter().zip(worst).map(|(n, w)| result(S, n, w, 1e-10)).collect())
}

fn scheduler() -> relab_core::Result<Vec<CheckResult>> {
    const S: &str = "scheduler";
    let shape = PolicyShape::bandit(2)?;
    let mut mismatches = 0usize;
    for m in 1..=5u64 {
        for n in 0..=5u64 {
            let mut trainer = TabularPolicy::zeros(shape);
            let mut state = ScheduleState::new(ScheduleConfig::new(m, n)?, &trainer)?;
            for l in 0..15 * m {
                let b = state.step(&trainer, |_, _| Ok(Vec::new()))?.batch;
                mismatches += usize::from(b.staleness(l) != off_policyness(l, m, n) as i64);
                mismatches += usize::from(b.generator_version != (m * (l / m)).saturating_sub(n));
                trainer = trainer.with_version(l + 1);
            }
        }
    }
    let pattern = |m, n, expected: &[u64]| -> f64 {
        (0..expected.len() as u64)
            .zip(expected)
            .filter(|(l, e)| off_policyness(*l, m, n) != **e)
            .count() as f64
    };
    let mut offline = 0usize;
    let mut trainer = TabularPolicy::zeros(shape);
    let mut state = ScheduleState::new(ScheduleConfig::offline(), &trainer)?;
    for l in 0..50u64 {
        let b = state.step(&trainer, |_, _| Ok(Vec::new()))?.batch;
        offline += usize::from(b.generator_version != 0 || b.staleness(l) != l as i64);
        trainer = trainer.with_version(l + 1);
    }
    Ok(vec![
        result(S, "staleness_grid_mismatches", mismatches as f64, 0.0),
        result(
            S,
            "pattern_4_0_mismatches",
            pattern(4, 0, &[0, 1, 2, 3, 0, 1, 2, 3]),
            0.0,
        ),
        result(S, "pattern_1_4_mismatches", pattern(1, 4, &[4; 8]), 0.0),
        result(S, "offline_version_zero_mismatches", offline as f64, 0.0),
    ])
}

fn oracle_consistency() -> relab_core::Result<Vec<CheckResult>> {
    const S: &str = "oracle-consistency";
    let bandit = BanditTask::new(vec![0.0, 0.8, 1.0])?;
    let behavior = [0.3, 0.6, 0.1];
    let d = expected_group_relative_direction(&bandit, &behavior)?;
    let centered_err = d
        .centered
        .iter()
        .zip([-0.58, 0.22, 0.42])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let mc = mc_vs_exact_direction(&bandit, &behavior, 1024, 400, &mut RandomStream::from_seed(5))?;

    let mut residual_spread = 0.0f64;
    let mut mass = 0.0f64;
    for i in 0..20u64 {
        let mut rng = RandomStream::derive(31, &[i]);
        let task = if i % 2 == 0 {
            sequence_task(&mut rng)
        } else {
            Task::MultiStep(multi_step_task(&mut rng))
        };
        let anchor = TabularPolicy::random(task.shape(), 2.0, &mut rng);
        let tau = rng.gen_range(0.1..10.0);
        let prompt = task.prompts()[0].clone();
        let opt = optimal_kl_regularized_policy(&task, &anchor, tau, &prompt)?;
        let realized = opt.to_policy(&anchor)?;
        residual_spread = residual_spread.max(spread(&consistency_residuals(&task, &realized, &anchor, tau, &prompt)?));
        mass = mass.max((opt.total_mass() - 1.0).abs());
    }

    let tilt_task = Task::Bandit(bandit.clone());
    let start = TabularPolicy::zeros(tilt_task.shape()).with_root_probs(&behavior)?;
    let (tau, eps) = (0.5, 1e-6);
    let bound = tilt_iteration_bound(0.1, 0.2, tau, eps);
    let trace = iterated_tilting(&tilt_task, &start, tau, &tilt_task.prompts()[0], bound as usize)?;
    let tilt_shortfall = (1.0 - eps) - trace.last().copied().unwrap_or(0.0);

    Ok(vec![
        result(S, "pitfall_mean_reward_error", (d.mean_reward - 0.58).abs(), 1e-12),
        result(S, "pitfall_centered_rewards_error", centered_err, 1e-12),
        result(S, "pitfall_g3_minus_g2", d.direction[2] - d.direction[1], 0.0),
        result(S, "pitfall_monte_carlo_vs_expected", mc, 5e-3),
        result(S, "optimal_policy_residual_spread", residual_spread, 1e-10),
        result(S, "optimal_policy_normalization", mass, 1e-10),
        result(S, "iterated_tilting_within_bound", tilt_shortfall, 0.0),
    ])
}
