//! Reward environments and group rollout generation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{PolicyShape, Prompt, TabularPolicy, TokenSeq};
use crate::rng::RandomStream;

/// Floor applied to the group reward standard deviation before it is used
/// as a divisor.
pub const STD_FLOOR: f64 = 1e-6;

/// Fixed-reward multi-armed bandit: one context, length-1 responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditTask {
    pub arm_rewards: Vec<f64>,
}

impl BanditTask {
    pub fn new(arm_rewards: Vec<f64>) -> Result<Self> {
        if arm_rewards.len() < 2 {
            return Err(Error::Config("a bandit needs at least two arms".into()));
        }
        if arm_rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::Config("arm rewards must be finite".into()));
        }
        Ok(Self { arm_rewards })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RewardRule {
    /// Fraction of positions at which the response agrees with the prompt's
    /// target response, over the longer of the two lengths.
    TargetMatch { targets: Vec<TokenSeq> },
    /// 1 if the sum of content-token ids is even, else 0.
    Parity,
}

/// Deterministic-reward sequence task over a weighted prompt set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceTask {
    pub shape: PolicyShape,
    pub prompts: Vec<Prompt>,
    pub weights: Vec<f64>,
    pub rule: RewardRule,
}

impl SequenceTask {
    pub fn new(
        vocab_size: usize,
        max_len: usize,
        prompts: Vec<TokenSeq>,
        weights: Option<Vec<f64>>,
        rule: RewardRule,
    ) -> Result<Self> {
        let shape = PolicyShape::new(vocab_size, max_len, prompts.len().max(1), true)?;
        if prompts.is_empty() {
            return Err(Error::Config("a sequence task needs at least one prompt".into()));
        }
        let n = prompts.len();
        let weights = weights.unwrap_or_else(|| vec![1.0 / n as f64; n]);
        if weights.len() != n {
            return Err(Error::Config(format!(
                "{} prompt weights given for {n} prompts",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("prompt weights must be non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("prompt weights sum to {total}, not 1")));
        }
        if let RewardRule::TargetMatch { targets } = &rule {
            if targets.len() != n {
                return Err(Error::Config(format!(
                    "{} targets given for {n} prompts",
                    targets.len()
                )));
            }
            for t in targets {
                shape.validate_response(t)?;
                if !shape.is_complete(t) {
                    return Err(Error::Config(format!(
                        "target {:?} does not end with end-of-sequence",
                        t.ids()
                    )));
                }
            }
        }
        let prompts = prompts
            .into_iter()
            .enumerate()
            .map(|(id, tokens)| Prompt::new(id, tokens))
            .collect();
        Ok(Self {
            shape,
            prompts,
            weights,
            rule,
        })
    }

    fn reward(&self, prompt: &Prompt, response: &TokenSeq) -> f64 {
        match &self.rule {
            RewardRule::TargetMatch { targets } => {
                let target = targets[prompt.id].tokens();
                let resp = response.tokens();
                let len = target.len().max(resp.len());
                let hits = target.iter().zip(resp).filter(|(a, b)| a == b).count();
                hits as f64 / len as f64
            }
            RewardRule::Parity => {
                let eos = self.shape.eos_token();
                let sum: usize = response.tokens().iter().filter(|t| Some(**t) != eos).map(|t| t.0).sum();
                if sum.is_multiple_of(2) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TrajectoryReward {
    /// 1 if the final state equals `goal`.
    ReachGoal { goal: usize },
    /// Mean of `values[s]` over the states entered after each action.
    StateValues { values: Vec<f64> },
}

/// Deterministic finite-state environment with one action per turn and a
/// trajectory-level reward. Each prompt is a start state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiStepTask {
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    /// Row-major `[state][action] -> next state`.
    pub transitions: Vec<usize>,
    pub start_states: Vec<usize>,
    pub reward: TrajectoryReward,
}

/// Upper bound on the horizon of multi-step tasks.
pub const MAX_HORIZON: usize = 16;

impl MultiStepTask {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        transitions: Vec<usize>,
        start_states: Vec<usize>,
        reward: TrajectoryReward,
    ) -> Result<Self> {
        if num_states == 0 {
            return Err(Error::Config("num_states must be positive".into()));
        }
        if !(2..=MAX_HORIZON).contains(&horizon) {
            return Err(Error::Config(format!(
                "horizon must be in [2, {MAX_HORIZON}], got {horizon}"
            )));
        }
        if transitions.len() != num_states * num_actions {
            return Err(Error::Config(format!(
                "transition table has {} entries, expected {}",
                transitions.len(),
                num_states * num_actions
            )));
        }
        if transitions.iter().any(|&s| s >= num_states) {
            return Err(Error::Config("transition target out of range".into()));
        }
        if start_states.is_empty() || start_states.iter().any(|&s| s >= num_states) {
            return Err(Error::Config("start states must be non-empty and in range".into()));
        }
        match &reward {
            TrajectoryReward::ReachGoal { goal } if *goal >= num_states => {
                return Err(Error::Config("goal state out of range".into()))
            }
            TrajectoryReward::StateValues { values } if values.len() != num_states => {
                return Err(Error::Config("state values must cover every state".into()))
            }
            _ => {}
        }
        // Validates the action vocabulary and table size.
        PolicyShape::new(num_actions, horizon, start_states.len(), false)?;
        Ok(Self {
            num_states,
            num_actions,
            horizon,
            transitions,
            start_states,
            reward,
        })
    }

    pub fn shape(&self) -> PolicyShape {
        PolicyShape::new(self.num_actions, self.horizon, self.start_states.len(), false)
            .expect("validated at construction")
    }

    pub fn next_state(&self, state: usize, action: usize) -> usize {
        self.transitions[state * self.num_actions + action]
    }

    /// States `s^(1), ..., s^(|T|+1)` visited by the action sequence.
    pub fn rollout_states(&self, prompt: &Prompt, actions: &TokenSeq) -> Vec<usize> {
        let mut state = self.start_states[prompt.id];
        let mut states = Vec::with_capacity(actions.len() + 1);
        states.push(state);
        for a in actions.tokens() {
            state = self.next_state(state, a.0);
            states.push(state);
        }
        states
    }

    pub fn trajectory_reward(&self, states: &[usize]) -> f64 {
        match &self.reward {
            TrajectoryReward::ReachGoal { goal } => {
                if states.last() == Some(goal) {
                    1.0
                } else {
                    0.0
                }
            }
            TrajectoryReward::StateValues { values } => {
                let visited = &states[1..];
                visited.iter().map(|&s| values[s]).sum::<f64>() / visited.len() as f64
            }
        }
    }
}

/// Any of the built-in reward environments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Task {
    Bandit(BanditTask),
    Sequence(SequenceTask),
    MultiStep(MultiStepTask),
}

impl Task {
    pub fn shape(&self) -> PolicyShape {
        match self {
            Task::Bandit(b) => PolicyShape::bandit(b.arm_rewards.len()).expect("validated bandit"),
            Task::Sequence(s) => s.shape,
            Task::MultiStep(m) => m.shape(),
        }
    }

    pub fn prompts(&self) -> Vec<Prompt> {
        match self {
            Task::Bandit(_) => vec![Prompt::new(0, TokenSeq::new())],
            Task::Sequence(s) => s.prompts.clone(),
            Task::MultiStep(m) => (0..m.start_states.len())
                .map(|i| Prompt::new(i, TokenSeq::from_ids(&[m.start_states[i]])))
                .collect(),
        }
    }

    /// The prompt distribution `D`.
    pub fn prompt_weights(&self) -> Vec<f64> {
        match self {
            Task::Bandit(_) => vec![1.0],
            Task::Sequence(s) => s.weights.clone(),
            Task::MultiStep(m) => {
                let n = m.start_states.len();
                vec![1.0 / n as f64; n]
            }
        }
    }

    pub fn is_multi_step(&self) -> bool {
        matches!(self, Task::MultiStep(_))
    }

    /// `r(x, y)`. Pure: the same arguments always give the same value.
    pub fn reward(&self, prompt: &Prompt, response: &TokenSeq) -> f64 {
        match self {
            Task::Bandit(b) => b.arm_rewards[response.tokens()[0].0],
            Task::Sequence(s) => s.reward(prompt, response),
            Task::MultiStep(m) => m.trajectory_reward(&m.rollout_states(prompt, response)),
        }
    }

    /// Visited states for multi-step tasks, `None` otherwise.
    pub fn states(&self, prompt: &Prompt, response: &TokenSeq) -> Option<Vec<usize>> {
        match self {
            Task::MultiStep(m) => Some(m.rollout_states(prompt, response)),
            _ => None,
        }
    }

    /// Every complete response for `prompt` with its reward.
    pub fn enumerate_responses(&self, prompt: &Prompt) -> Result<Vec<(TokenSeq, f64)>> {
        Ok(self
            .shape()
            .enumerate_responses()?
            .into_iter()
            .map(|r| {
                let reward = self.reward(prompt, &r);
                (r, reward)
            })
            .collect())
    }

    /// `K` independent responses from `policy` at `prompt`, scored and
    /// tagged with the sampling snapshot.
    pub fn generate_group(
        &self,
        policy: &TabularPolicy,
        prompt: &Prompt,
        k: usize,
        generation_step: u64,
        rng: &mut RandomStream,
    ) -> Result<RolloutGroup> {
        if k < 2 {
            return Err(Error::Config(format!("group size K must be at least 2, got {k}")));
        }
        if policy.shape() != &self.shape() {
            return Err(Error::Dimension("policy shape does not match task".into()));
        }
        let mut responses = Vec::with_capacity(k);
        let mut rewards = Vec::with_capacity(k);
        let mut logps = Vec::with_capacity(k);
        let mut states = self.is_multi_step().then(|| Vec::with_capacity(k));
        for _ in 0..k {
            let (resp, lp) = policy.sample_response(prompt, rng)?;
            rewards.push(self.reward(prompt, &resp));
            if let (Some(all), Some(s)) = (states.as_mut(), self.states(prompt, &resp)) {
                all.push(s);
            }
            responses.push(resp);
            logps.push(lp);
        }
        Ok(RolloutGroup {
            prompt: prompt.clone(),
            responses,
            rewards,
            behavior_logprobs: Some(logps),
            behavior_version: policy.version(),
            generation_step,
            states,
        })
    }
}

/// One prompt with `K` scored responses (or trajectories).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub prompt: Prompt,
    pub responses: Vec<TokenSeq>,
    pub rewards: Vec<f64>,
    /// Per-token log-probabilities under the generating snapshot.
    pub behavior_logprobs: Option<Vec<Vec<f64>>>,
    pub behavior_version: u64,
    pub generation_step: u64,
    /// Visited states per trajectory (multi-step tasks only).
    pub states: Option<Vec<Vec<usize>>>,
}

impl RolloutGroup {
    /// A group built from explicit data without behavior information.
    pub fn from_parts(prompt: Prompt, responses: Vec<TokenSeq>, rewards: Vec<f64>) -> Self {
        Self {
            prompt,
            responses,
            rewards,
            behavior_logprobs: None,
            behavior_version: 0,
            generation_step: 0,
            states: None,
        }
    }

    /// Records `policy`'s per-token log-probabilities as behavior data.
    pub fn with_behavior(mut self, policy: &TabularPolicy) -> Result<Self> {
        let logps = self
            .responses
            .iter()
            .map(|r| policy.token_log_probs(&self.prompt, r))
            .collect::<Result<Vec<_>>>()?;
        self.behavior_logprobs = Some(logps);
        self.behavior_version = policy.version();
        Ok(self)
    }

    pub fn k(&self) -> usize {
        self.responses.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.responses.iter().map(TokenSeq::len).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k() < 2 {
            return Err(Error::Data(format!(
                "group has {} responses, need at least 2",
                self.k()
            )));
        }
        if self.rewards.len() != self.k() {
            return Err(Error::Data(format!(
                "{} rewards for {} responses",
                self.rewards.len(),
                self.k()
            )));
        }
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::Data("non-finite reward".into()));
        }
        if let Some(lps) = &self.behavior_logprobs {
            if lps.len() != self.k() || lps.iter().zip(&self.responses).any(|(l, r)| l.len() != r.len()) {
                return Err(Error::Data(
                    "behavior log-probabilities are not shaped like the responses".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn stats(&self) -> Result<GroupStats> {
        group_stats(&self.rewards, None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub mean: f64,
    /// Population standard deviation (divide by K).
    pub std: f64,
    pub weighted_mean: Option<f64>,
}

impl GroupStats {
    /// `σ_r` with the zero-variance floor applied.
    pub fn floored_std(&self) -> f64 {
        self.std.max(STD_FLOOR)
    }
}

/// Mean, population standard deviation, and optional weighted mean
/// `Σ w_j r_j / Σ w_j`.
pub fn group_stats(rewards: &[f64], weights: Option<&[f64]>) -> Result<GroupStats> {
    if rewards.len() < 2 {
        return Err(Error::Data(format!(
            "group statistics need at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let k = rewards.len() as f64;
    // A constant group has exactly zero centered rewards.
    let mean = if rewards.iter().all(|&r| r == rewards[0]) {
        rewards[0]
    } else {
        rewards.iter().sum::<f64>() / k
    };
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / k;
    let weighted_mean = match weights {
        None => None,
        Some(w) => {
            if w.len() != rewards.len() {
                return Err(Error::Data(format!(
                    "{} weights for {} rewards",
                    w.len(),
                    rewards.len()
                )));
            }
            if w.iter().any(|x| !(*x >= 0.0)) {
                return Err(Error::DegenerateWeights("weights must be non-negative".into()));
            }
            let total: f64 = w.iter().sum();
            if !(total > 0.0) {
                return Err(Error::DegenerateWeights("weights sum to zero".into()));
            }
            Some(w.iter().zip(rewards).map(|(a, b)| a * b).sum::<f64>() / total)
        }
    };
    Ok(GroupStats {
        mean,
        std: var.sqrt(),
        weighted_mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bandit() -> Task {
        Task::Bandit(BanditTask::new(vec![0.0, 0.8, 1.0]).unwrap())
    }

    #[test]
    fn stats_basic() {
        let s = group_stats(&[1.0, 0.0, 0.0, 1.0], None).unwrap();
        assert_eq!(s.mean, 0.5);
        assert_eq!(s.std, 0.5);
    }

    #[test]
    fn weighted_mean_pitfall_numbers() {
        let r = [0.0, 0.8, 1.0];
        let s = group_stats(&r, Some(&[0.3, 0.6, 0.1])).unwrap();
        let mu = s.weighted_mean.unwrap();
        assert!((mu - 0.58).abs() < 1e-12);
        let centered: Vec<f64> = r.iter().map(|x| x - mu).collect();
        for (c, e) in centered.iter().zip([-0.58, 0.22, 0.42]) {
            assert!((c - e).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_weights_give_plain_mean() {
        let r = [0.3, 0.9, 0.1, 0.7];
        let s = group_stats(&r, Some(&[1.0; 4])).unwrap();
        assert_eq!(s.weighted_mean.unwrap(), s.mean);
    }

    #[test]
    fn zero_weights_rejected() {
        assert!(matches!(
            group_stats(&[1.0, 0.0], Some(&[0.0, 0.0])),
            Err(Error::DegenerateWeights(_))
        ));
    }

    #[test]
    fn degenerate_bandit_group() {
        let task = Task::Bandit(BanditTask::new(vec![0.0, 1.0, 1.0]).unwrap());
        let pol = TabularPolicy::zeros(task.shape())
            .with_root_probs(&[1.0, 1e-300, 1e-300])
            .unwrap();
        let mut rng = RandomStream::from_seed(0);
        let g = task.generate_group(&pol, &task.prompts()[0], 16, 0, &mut rng).unwrap();
        assert!(g.rewards.iter().all(|&r| r == 0.0));
        assert_eq!(g.stats().unwrap().std, 0.0);
    }

    #[test]
    fn perfect_policy_scores_one() {
        let target = TokenSeq::from_ids(&[1, 0, 3]);
        let task = Task::Sequence(
            SequenceTask::new(
                4,
                4,
                vec![TokenSeq::from_ids(&[0])],
                None,
                RewardRule::TargetMatch {
                    targets: vec![target.clone()],
                },
            )
            .unwrap(),
        );
        let shape = task.shape();
        let mut logits = vec![0.0; shape.num_contexts() * shape.vocab_size];
        for t in 0..target.len() {
            let ctx = shape.context_index(0, &target.tokens()[..t]).unwrap();
            logits[ctx * 4 + target.tokens()[t].0] = 60.0;
        }
        let pol = TabularPolicy::from_logits(shape, logits).unwrap();
        let mut rng = RandomStream::from_seed(1);
        let g = task.generate_group(&pol, &task.prompts()[0], 8, 0, &mut rng).unwrap();
        assert!(g.rewards.iter().all(|&r| r == 1.0));
    }

    #[test]
    fn generation_is_deterministic() {
        let task = bandit();
        let pol = TabularPolicy::zeros(task.shape());
        let run = || {
            let mut rng = RandomStream::from_seed(42);
            task.generate_group(&pol, &task.prompts()[0], 32, 3, &mut rng).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn group_size_must_be_two() {
        let task = bandit();
        let pol = TabularPolicy::zeros(task.shape());
        let mut rng = RandomStream::from_seed(0);
        assert!(task.generate_group(&pol, &task.prompts()[0], 1, 0, &mut rng).is_err());
    }

    #[test]
    fn enumeration_sizes() {
        assert_eq!(
            bandit()
                .enumerate_responses(&Prompt::new(0, TokenSeq::new()))
                .unwrap()
                .len(),
            3
        );
        let task = Task::Sequence(SequenceTask::new(2, 3, vec![TokenSeq::new()], None, RewardRule::Parity).unwrap());
        let all = task.enumerate_responses(&task.prompts()[0]).unwrap();
        assert_eq!(all.len(), 3);
    }

    #[test]
    fn target_match_fraction() {
        let task = SequenceTask::new(
            4,
            4,
            vec![TokenSeq::new()],
            None,
            RewardRule::TargetMatch {
                targets: vec![TokenSeq::from_ids(&[1, 2, 3])],
            },
        )
        .unwrap();
        let p = &task.prompts[0];
        assert_eq!(task.reward(p, &TokenSeq::from_ids(&[1, 2, 3])), 1.0);
        assert_eq!(task.reward(p, &TokenSeq::from_ids(&[1, 3])), 1.0 / 3.0);
        assert_eq!(task.reward(p, &TokenSeq::from_ids(&[1, 2, 0, 3])), 0.5);
        assert_eq!(task.reward(p, &TokenSeq::from_ids(&[3])), 0.0);
    }

    #[test]
    fn multi_step_states_and_reward() {
        // Chain of 3 states; action 1 moves right, action 0 stays.
        let task = MultiStepTask::new(
            3,
            2,
            2,
            vec![0, 1, 1, 2, 2, 2],
            vec![0],
            TrajectoryReward::ReachGoal { goal: 2 },
        )
        .unwrap();
        let p = Prompt::new(0, TokenSeq::from_ids(&[0]));
        assert_eq!(task.rollout_states(&p, &TokenSeq::from_ids(&[1, 1])), vec![0, 1, 2]);
        let t = Task::MultiStep(task);
        assert_eq!(t.reward(&p, &TokenSeq::from_ids(&[1, 1])), 1.0);
        assert_eq!(t.reward(&p, &TokenSeq::from_ids(&[0, 1])), 0.0);
        assert_eq!(t.enumerate_responses(&p).unwrap().len(), 4);
    }

    proptest! {
        #[test]
        fn stats_match_two_pass_reference(rewards in prop::collection::vec(-5.0f64..5.0, 2..40)) {
            let s = group_stats(&rewards, None).unwrap();
            let k = rewards.len() as f64;
            let mut total = 0.0;
            for r in &rewards { total += r; }
            let mean = total / k;
            let mut ss = 0.0;
            for r in &rewards { ss += (r - mean).powi(2); }
            prop_assert!((s.mean - mean).abs() < 1e-12);
            prop_assert!((s.std - (ss / k).sqrt()).abs() < 1e-12);
            let lo = rewards.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(s.mean >= lo - 1e-12 && s.mean <= hi + 1e-12);
        }

        #[test]
        fn stored_rewards_are_reproducible(seed in any::<u64>()) {
            let task = Task::Sequence(SequenceTask::new(
                4, 4,
                vec![TokenSeq::new(), TokenSeq::from_ids(&[1])],
                None,
                RewardRule::TargetMatch { targets: vec![TokenSeq::from_ids(&[0, 3]), TokenSeq::from_ids(&[2, 1, 3])] },
            ).unwrap());
            let mut rng = RandomStream::from_seed(seed);
            let pol = TabularPolicy::random(task.shape(), 1.0, &mut rng);
            for prompt in task.prompts() {
                let g = task.generate_group(&pol, &prompt, 8, 0, &mut rng).unwrap();
                for (r, y) in g.rewards.iter().zip(&g.responses) {
                    prop_assert_eq!(*r, task.reward(&prompt, y));
                }
            }
        }
    }
}
