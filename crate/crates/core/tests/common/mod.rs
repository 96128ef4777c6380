#![allow(dead_code)]

use rand::Rng;
use relab_core::rng::RandomStream;
use relab_core::{
    MultiStepTask, Prompt, RewardRule, RolloutGroup, SequenceTask, TabularPolicy, Task, TokenSeq, TrajectoryReward,
};

/// A random sequence task with at most a few hundred responses per prompt.
pub fn random_sequence_task(rng: &mut RandomStream) -> Task {
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
    Task::Sequence(SequenceTask::new(v, l, prompts, None, rule).unwrap())
}

pub fn random_multi_step_task(rng: &mut RandomStream) -> Task {
    let states = rng.gen_range(2..=4);
    let actions = rng.gen_range(2..=3);
    let horizon = rng.gen_range(2..=3);
    let transitions = (0..states * actions).map(|_| rng.gen_range(0..states)).collect();
    let values = (0..states).map(|_| rng.gen::<f64>()).collect();
    Task::MultiStep(
        MultiStepTask::new(
            states,
            actions,
            horizon,
            transitions,
            vec![0],
            TrajectoryReward::StateValues { values },
        )
        .unwrap(),
    )
}

/// `k` responses sampled from `policy` at the first prompt, with distinct
/// uniform rewards and behavior data recorded from `policy`.
pub fn random_group(task: &Task, policy: &TabularPolicy, k: usize, rng: &mut RandomStream) -> RolloutGroup {
    let prompt: Prompt = task.prompts()[0].clone();
    let mut group = task.generate_group(policy, &prompt, k, 0, rng).unwrap();
    for r in group.rewards.iter_mut() {
        *r = rng.gen::<f64>();
    }
    group
}

/// Largest relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}
