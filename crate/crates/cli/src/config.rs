//! Experiment configuration files.
//!
//! A config is a sectioned TOML document with the sections `task`, `policy`,
//! `algorithm`, `schedule`, `optimizer` and `output`. Parsing reports every
//! missing, mistyped or unknown key at once.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use relab_core::rng::RandomStream;
use relab_core::trainer::OptimizerConfig;
use relab_core::{
    AdvantageKind, AlgorithmConfig, AlgorithmKind, BanditTask, ClipConfig, LossNorm, MultiStepTask, PairwiseWeights,
    RewardRule, ScheduleConfig, SequenceTask, TabularPolicy, Task, TokenSeq, TrajectoryReward,
};
use toml::{Table, Value};

pub const SECTIONS: [&str; 6] = ["task", "policy", "algorithm", "schedule", "optimizer", "output"];

pub const DEFAULT_OUTPUT_DIR: &str = "runs/run";

/// Every problem found while reading a config.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub Vec<String>);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "invalid configuration ({} problem{}):",
            self.0.len(),
            if self.0.len() == 1 { "" } else { "s" }
        )?;
        for p in &self.0 {
            writeln!(f, "  - {p}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskSpec {
    Bandit {
        arm_rewards: Vec<f64>,
    },
    Sequence {
        vocab_size: usize,
        max_len: usize,
        prompts: Vec<Vec<usize>>,
        prompt_weights: Option<Vec<f64>>,
        reward: SequenceReward,
    },
    MultiStep {
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        transitions: Vec<usize>,
        start_states: Vec<usize>,
        reward: TrajectoryReward,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum SequenceReward {
    TargetMatch { targets: Vec<Vec<usize>> },
    Parity,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyInit {
    Zeros,
    Random {
        scale: f64,
        seed: u64,
    },
    RootProbs(Vec<f64>),
    /// Every logit, row-major over contexts.
    Logits(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub policy: PolicyInit,
    pub algorithm: AlgorithmConfig,
    pub schedule: ScheduleConfig,
    pub optimizer: OptimizerConfig,
    pub output_dir: PathBuf,
}

/// The concrete objects a run needs.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub task: Task,
    pub init: TabularPolicy,
    pub algorithm: AlgorithmConfig,
    pub schedule: ScheduleConfig,
    pub optimizer: OptimizerConfig,
}

struct Section<'a> {
    name: &'static str,
    table: Option<&'a Table>,
    used: RefCell<BTreeSet<String>>,
}

struct Reader {
    errors: Vec<String>,
}

impl<'a> Section<'a> {
    fn new(root: &'a Table, name: &'static str, errors: &mut Vec<String>) -> Self {
        let table = match root.get(name) {
            None => None,
            Some(Value::Table(t)) => Some(t),
            Some(_) => {
                errors.push(format!("`{name}` must be a table"));
                None
            }
        };
        Self {
            name,
            table,
            used: RefCell::new(BTreeSet::new()),
        }
    }

    fn get(&self, key: &str) -> Option<&'a Value> {
        self.used.borrow_mut().insert(key.to_string());
        self.table.and_then(|t| t.get(key))
    }

    fn path(&self, key: &str) -> String {
        format!("{}.{key}", self.name)
    }

    fn unknown_keys(&self) -> Vec<String> {
        let used = self.used.borrow();
        self.table
            .map(|t| t.keys().filter(|k| !used.contains(*k)).map(|k| self.path(k)).collect())
            .unwrap_or_default()
    }
}

fn as_f64(v: &Value) -> Option<f64> {
    match v {
        Value::Float(x) => Some(*x),
        Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

fn as_u64(v: &Value) -> Option<u64> {
    match v {
        Value::Integer(i) if *i >= 0 => Some(*i as u64),
        _ => None,
    }
}

fn as_list<T>(v: &Value, item: impl Fn(&Value) -> Option<T>) -> Option<Vec<T>> {
    v.as_array()?.iter().map(item).collect()
}

fn as_usize_list(v: &Value) -> Option<Vec<usize>> {
    as_list(v, |x| as_u64(x).map(|u| u as usize))
}

fn as_f64_list(v: &Value) -> Option<Vec<f64>> {
    as_list(v, as_f64)
}

fn as_nested_usize(v: &Value) -> Option<Vec<Vec<usize>>> {
    as_list(v, as_usize_list)
}

impl Reader {
    fn typed<T>(&mut self, s: &Section, key: &str, what: &str, conv: impl Fn(&Value) -> Option<T>) -> Option<T> {
        let v = s.get(key)?;
        match conv(v) {
            Some(x) => Some(x),
            None => {
                self.errors.push(format!("`{}` must be {what}, got {v}", s.path(key)));
                None
            }
        }
    }

    fn required<T>(&mut self, s: &Section, key: &str, what: &str, conv: impl Fn(&Value) -> Option<T>) -> Option<T> {
        if s.get(key).is_none() {
            self.errors.push(format!("missing required key `{}`", s.path(key)));
            return None;
        }
        self.typed(s, key, what, conv)
    }

    fn f64_or(&mut self, s: &Section, key: &str, default: f64) -> f64 {
        self.typed(s, key, "a number", as_f64).unwrap_or(default)
    }

    fn u64_or(&mut self, s: &Section, key: &str, default: u64) -> u64 {
        self.typed(s, key, "a non-negative integer", as_u64).unwrap_or(default)
    }

    fn str_req(&mut self, s: &Section, key: &str) -> Option<String> {
        self.required(s, key, "a string", |v| v.as_str().map(str::to_string))
    }

    fn str_or(&mut self, s: &Section, key: &str, default: &str) -> String {
        self.typed(s, key, "a string", |v| v.as_str().map(str::to_string))
            .unwrap_or_else(|| default.to_string())
    }

    fn parsed<T: std::str::FromStr>(&mut self, s: &Section, key: &str, text: Option<String>) -> Option<T>
    where
        T::Err: fmt::Display,
    {
        match text?.parse() {
            Ok(x) => Some(x),
            Err(e) => {
                self.errors.push(format!("`{}`: {e}", s.path(key)));
                None
            }
        }
    }

    fn task(&mut self, s: &Section) -> Option<TaskSpec> {
        let kind = self.str_req(s, "kind")?;
        match kind.as_str() {
            "bandit" => {
                let arm_rewards = self.required(s, "arm_rewards", "a list of numbers", as_f64_list)?;
                Some(TaskSpec::Bandit { arm_rewards })
            }
            "sequence" => {
                let vocab_size = self.required(s, "vocab_size", "a positive integer", as_u64);
                let max_len = self.required(s, "max_len", "a positive integer", as_u64);
                let prompts = self.required(s, "prompts", "a list of token-id lists", as_nested_usize);
                let prompt_weights = self.typed(s, "prompt_weights", "a list of numbers", as_f64_list);
                let reward = match self.str_req(s, "reward").as_deref() {
                    Some("target_match") => self
                        .required(s, "targets", "a list of token-id lists", as_nested_usize)
                        .map(|targets| SequenceReward::TargetMatch { targets }),
                    Some("parity") => Some(SequenceReward::Parity),
                    Some(other) => {
                        self.errors.push(format!(
                            "`task.reward` must be target_match or parity for sequence tasks, got {other:?}"
                        ));
                        None
                    }
                    None => None,
                };
                Some(TaskSpec::Sequence {
                    vocab_size: vocab_size? as usize,
                    max_len: max_len? as usize,
                    prompts: prompts?,
                    prompt_weights,
                    reward: reward?,
                })
            }
            "multi_step" => {
                let num_states = self.required(s, "num_states", "a positive integer", as_u64);
                let num_actions = self.required(s, "num_actions", "a positive integer", as_u64);
                let horizon = self.required(s, "horizon", "a positive integer", as_u64);
                let transitions = self.required(s, "transitions", "a list of state ids", as_usize_list);
                let start_states = self.required(s, "start_states", "a list of state ids", as_usize_list);
                let reward = match self.str_req(s, "reward").as_deref() {
                    Some("reach_goal") => self
                        .required(s, "goal", "a state id", as_u64)
                        .map(|g| TrajectoryReward::ReachGoal { goal: g as usize }),
                    Some("state_values") => self
                        .required(s, "state_values", "a list of numbers", as_f64_list)
                        .map(|values| TrajectoryReward::StateValues { values }),
                    Some(other) => {
                        self.errors.push(format!(
                            "`task.reward` must be reach_goal or state_values for multi-step tasks, got {other:?}"
                        ));
                        None
                    }
                    None => None,
                };
                Some(TaskSpec::MultiStep {
                    num_states: num_states? as usize,
                    num_actions: num_actions? as usize,
                    horizon: horizon? as usize,
                    transitions: transitions?,
                    start_states: start_states?,
                    reward: reward?,
                })
            }
            other => {
                self.errors.push(format!(
                    "`task.kind` must be bandit, sequence or multi_step, got {other:?}"
                ));
                None
            }
        }
    }

    fn policy(&mut self, s: &Section) -> Option<PolicyInit> {
        match self.str_or(s, "init", "zeros").as_str() {
            "zeros" => Some(PolicyInit::Zeros),
            "random" => {
                let scale = self.f64_or(s, "scale", 1.0);
                let seed = self.u64_or(s, "init_seed", 0);
                Some(PolicyInit::Random { scale, seed })
            }
            "root_probs" => self
                .required(s, "root_probs", "a list of probabilities", as_f64_list)
                .map(PolicyInit::RootProbs),
            "logits" => self
                .required(s, "logits", "a list of numbers", as_f64_list)
                .map(PolicyInit::Logits),
            other => {
                self.errors.push(format!(
                    "`policy.init` must be zeros, random, root_probs or logits, got {other:?}"
                ));
                None
            }
        }
    }

    fn algorithm(&mut self, s: &Section) -> Option<AlgorithmConfig> {
        let kind_text = self.str_req(s, "kind");
        let kind: AlgorithmKind = self.parsed(s, "kind", kind_text)?;
        let mut cfg = AlgorithmConfig::new(kind);
        if kind.uses_tau() {
            cfg.tau = self.f64_or(s, "tau", cfg.tau);
        }
        if kind.uses_clip() {
            let lo = self.required(s, "eps_low", "a number", as_f64);
            let hi = self.required(s, "eps_high", "a number", as_f64);
            let (lo2, hi2) = if kind.mask() == Some(relab_core::algorithms::MaskKind::Ring) {
                (
                    self.required(s, "eps_low_outer", "a number", as_f64),
                    self.required(s, "eps_high_outer", "a number", as_f64),
                )
            } else {
                (lo, hi)
            };
            let (lo, hi, lo2, hi2) = (lo?, hi?, lo2?, hi2?);
            match ClipConfig::with_outer(lo, hi, lo2, hi2) {
                Ok(c) => cfg.clip = Some(c),
                Err(e) => self.errors.push(format!("algorithm clip parameters: {e}")),
            }
        }
        if kind.uses_loss_norm() {
            let text = self.str_or(s, "loss_norm", LossNorm::default().name());
            cfg.loss_norm = self.parsed(s, "loss_norm", Some(text))?;
        }
        if kind == AlgorithmKind::PairwiseWeighted {
            let text = self.str_or(s, "pairwise_weights", PairwiseWeights::default().name());
            cfg.pairwise_weights = self.parsed(s, "pairwise_weights", Some(text))?;
        }
        if kind == AlgorithmKind::RedWeight {
            let text = self.str_or(s, "advantage", AdvantageKind::default().name());
            cfg.red_weight_advantage = self.parsed(s, "advantage", Some(text))?;
        }
        Some(cfg)
    }

    fn schedule(&mut self, s: &Section) -> ScheduleConfig {
        let offline = self.typed(s, "offline", "a boolean", Value::as_bool).unwrap_or(false);
        if offline {
            return ScheduleConfig::offline();
        }
        ScheduleConfig {
            sync_interval: self.u64_or(s, "sync_interval", 1),
            sync_offset: self.u64_or(s, "sync_offset", 0),
            offline,
        }
    }

    fn optimizer(&mut self, s: &Section) -> Option<OptimizerConfig> {
        let eta = self.required(s, "eta", "a number", as_f64);
        let steps = self.required(s, "steps", "a non-negative integer", as_u64);
        let k = self.required(s, "k", "an integer >= 2", as_u64);
        let batch_prompts = self.u64_or(s, "batch_prompts", 1);
        let seed = self.u64_or(s, "seed", 0);
        let grad_clip_norm = self.typed(s, "grad_clip_norm", "a number", as_f64);
        Some(OptimizerConfig {
            eta: eta?,
            grad_clip_norm,
            steps: steps?,
            batch_prompts: batch_prompts as usize,
            k: k? as usize,
            seed,
        })
    }
}

impl ExperimentConfig {
    pub fn from_table(root: &Table) -> Result<Self, ConfigError> {
        let mut r = Reader { errors: Vec::new() };
        for key in root.keys() {
            if !SECTIONS.contains(&key.as_str()) {
                r.errors.push(format!("unknown section `{key}`"));
            }
        }
        let sections: Vec<Section> = SECTIONS.iter().map(|n| Section::new(root, n, &mut r.errors)).collect();
        let [task_s, policy_s, algo_s, sched_s, opt_s, out_s] = &sections[..] else {
            unreachable!()
        };
        for (s, required) in [(task_s, true), (algo_s, true), (opt_s, true)] {
            if required && s.table.is_none() && root.get(s.name).is_none() {
                r.errors.push(format!("missing required section `[{}]`", s.name));
            }
        }
        let task = r.task(task_s);
        let policy = r.policy(policy_s);
        let algorithm = r.algorithm(algo_s);
        let schedule = r.schedule(sched_s);
        let optimizer = r.optimizer(opt_s);
        let output_dir = PathBuf::from(r.str_or(out_s, "dir", DEFAULT_OUTPUT_DIR));
        // Keys of a section whose kind could not be read are not judged.
        let judged = [task.is_some(), policy.is_some(), algorithm.is_some(), true, true, true];
        for (s, _) in sections.iter().zip(judged).filter(|(_, j)| *j) {
            for k in s.unknown_keys() {
                r.errors.push(format!("unknown key `{k}`"));
            }
        }
        let (Some(task), Some(policy), Some(algorithm), Some(optimizer)) = (task, policy, algorithm, optimizer) else {
            return Err(ConfigError(r.errors));
        };
        if !r.errors.is_empty() {
            return Err(ConfigError(r.errors));
        }
        let cfg = Self {
            task,
            policy,
            algorithm,
            schedule,
            optimizer,
            output_dir,
        };
        cfg.build()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let table: Table = text
            .parse()
            .map_err(|e| ConfigError(vec![format!("TOML syntax: {e}")]))?;
        Self::from_table(&table)
    }

    /// Constructs and validates the task, initial policy and settings.
    pub fn build(&self) -> Result<Experiment, ConfigError> {
        let mut errors = Vec::new();
        let task = match self.build_task() {
            Ok(t) => Some(t),
            Err(e) => {
                errors.push(format!("task: {e}"));
                None
            }
        };
        let init = task.as_ref().and_then(|t| match self.build_policy(t) {
            Ok(p) => Some(p),
            Err(e) => {
                errors.push(format!("policy: {e}"));
                None
            }
        });
        if let Err(e) = self.algorithm.validate() {
            errors.push(format!("algorithm: {e}"));
        }
        if let Err(e) = self.schedule.validate() {
            errors.push(format!("schedule: {e}"));
        }
        if let Err(e) = self.optimizer.validate() {
            errors.push(format!("optimizer: {e}"));
        }
        if let Some(t) = &task {
            if self.algorithm.kind == AlgorithmKind::MultiStepReinforce && !t.is_multi_step() {
                errors.push("algorithm: MultiStepREINFORCE needs a multi_step task".into());
            }
            if let Err(e) = t.shape().check_capacity() {
                errors.push(format!("task: {e}"));
            }
        }
        match (task, init) {
            (Some(task), Some(init)) if errors.is_empty() => Ok(Experiment {
                task,
                init,
                algorithm: self.algorithm.clone(),
                schedule: self.schedule,
                optimizer: self.optimizer,
            }),
            _ => Err(ConfigError(errors)),
        }
    }

    fn build_task(&self) -> relab_core::Result<Task> {
        Ok(match &self.task {
            TaskSpec::Bandit { arm_rewards } => Task::Bandit(BanditTask::new(arm_rewards.clone())?),
            TaskSpec::Sequence {
                vocab_size,
                max_len,
                prompts,
                prompt_weights,
                reward,
            } => {
                let rule = match reward {
                    SequenceReward::TargetMatch { targets } => RewardRule::TargetMatch {
                        targets: targets.iter().map(|t| TokenSeq::from_ids(t)).collect(),
                    },
                    SequenceReward::Parity => RewardRule::Parity,
                };
                Task::Sequence(SequenceTask::new(
                    *vocab_size,
                    *max_len,
                    prompts.iter().map(|p| TokenSeq::from_ids(p)).collect(),
                    prompt_weights.clone(),
                    rule,
                )?)
            }
            TaskSpec::MultiStep {
                num_states,
                num_actions,
                horizon,
                transitions,
                start_states,
                reward,
            } => Task::MultiStep(MultiStepTask::new(
                *num_states,
                *num_actions,
                *horizon,
                transitions.clone(),
                start_states.clone(),
                reward.clone(),
            )?),
        })
    }

    fn build_policy(&self, task: &Task) -> relab_core::Result<TabularPolicy> {
        let shape = task.shape();
        match &self.policy {
            PolicyInit::Zeros => Ok(TabularPolicy::zeros(shape)),
            PolicyInit::Random { scale, seed } => {
                if !(*scale >= 0.0 && scale.is_finite()) {
                    return Err(relab_core::Error::Config(format!("scale must be >= 0, got {scale}")));
                }
                Ok(TabularPolicy::random(
                    shape,
                    *scale,
                    &mut RandomStream::from_seed(*seed),
                ))
            }
            PolicyInit::RootProbs(p) => TabularPolicy::zeros(shape).with_root_probs(p),
            PolicyInit::Logits(l) => TabularPolicy::from_logits(shape, l.clone()),
        }
    }

    /// Every setting written out explicitly, defaults included.
    pub fn to_table(&self) -> Table {
        let mut root = Table::new();
        let mut task = Table::new();
        let ints = |xs: &[usize]| Value::Array(xs.iter().map(|&x| Value::Integer(x as i64)).collect());
        let floats = |xs: &[f64]| Value::Array(xs.iter().map(|&x| Value::Float(x)).collect());
        let nested = |xs: &[Vec<usize>]| Value::Array(xs.iter().map(|x| ints(x)).collect());
        match &self.task {
            TaskSpec::Bandit { arm_rewards } => {
                task.insert("kind".into(), "bandit".into());
                task.insert("arm_rewards".into(), floats(arm_rewards));
            }
            TaskSpec::Sequence {
                vocab_size,
                max_len,
                prompts,
                prompt_weights,
                reward,
            } => {
                task.insert("kind".into(), "sequence".into());
                task.insert("vocab_size".into(), Value::Integer(*vocab_size as i64));
                task.insert("max_len".into(), Value::Integer(*max_len as i64));
                task.insert("prompts".into(), nested(prompts));
                if let Some(w) = prompt_weights {
                    task.insert("prompt_weights".into(), floats(w));
                }
                match reward {
                    SequenceReward::TargetMatch { targets } => {
                        task.insert("reward".into(), "target_match".into());
                        task.insert("targets".into(), nested(targets));
                    }
                    SequenceReward::Parity => {
                        task.insert("reward".into(), "parity".into());
                    }
                }
            }
            TaskSpec::MultiStep {
                num_states,
                num_actions,
                horizon,
                transitions,
                start_states,
                reward,
            } => {
                task.insert("kind".into(), "multi_step".into());
                task.insert("num_states".into(), Value::Integer(*num_states as i64));
                task.insert("num_actions".into(), Value::Integer(*num_actions as i64));
                task.insert("horizon".into(), Value::Integer(*horizon as i64));
                task.insert("transitions".into(), ints(transitions));
                task.insert("start_states".into(), ints(start_states));
                match reward {
                    TrajectoryReward::ReachGoal { goal } => {
                        task.insert("reward".into(), "reach_goal".into());
                        task.insert("goal".into(), Value::Integer(*goal as i64));
                    }
                    TrajectoryReward::StateValues { values } => {
                        task.insert("reward".into(), "state_values".into());
                        task.insert("state_values".into(), floats(values));
                    }
                }
            }
        }
        root.insert("task".into(), Value::Table(task));

        let mut policy = Table::new();
        match &self.policy {
            PolicyInit::Zeros => {
                policy.insert("init".into(), "zeros".into());
            }
            PolicyInit::Random { scale, seed } => {
                policy.insert("init".into(), "random".into());
                policy.insert("scale".into(), Value::Float(*scale));
                policy.insert("init_seed".into(), Value::Integer(*seed as i64));
            }
            PolicyInit::RootProbs(p) => {
                policy.insert("init".into(), "root_probs".into());
                policy.insert("root_probs".into(), floats(p));
            }
            PolicyInit::Logits(l) => {
                policy.insert("init".into(), "logits".into());
                policy.insert("logits".into(), floats(l));
            }
        }
        root.insert("policy".into(), Value::Table(policy));

        let a = &self.algorithm;
        let mut algo = Table::new();
        algo.insert("kind".into(), a.kind.name().into());
        if a.kind.uses_tau() {
            algo.insert("tau".into(), Value::Float(a.tau));
        }
        if let Some(c) = a.clip.filter(|_| a.kind.uses_clip()) {
            algo.insert("eps_low".into(), Value::Float(c.eps_low));
            algo.insert("eps_high".into(), Value::Float(c.eps_high));
            if a.kind.mask() == Some(relab_core::algorithms::MaskKind::Ring) {
                algo.insert("eps_low_outer".into(), Value::Float(c.eps_low_outer));
                algo.insert("eps_high_outer".into(), Value::Float(c.eps_high_outer));
            }
        }
        if a.kind.uses_loss_norm() {
            algo.insert("loss_norm".into(), a.loss_norm.name().into());
        }
        if a.kind == AlgorithmKind::PairwiseWeighted {
            algo.insert("pairwise_weights".into(), a.pairwise_weights.name().into());
        }
        if a.kind == AlgorithmKind::RedWeight {
            algo.insert("advantage".into(), a.red_weight_advantage.name().into());
        }
        root.insert("algorithm".into(), Value::Table(algo));

        let mut sched = Table::new();
        sched.insert("offline".into(), Value::Boolean(self.schedule.offline));
        if !self.schedule.offline {
            sched.insert(
                "sync_interval".into(),
                Value::Integer(self.schedule.sync_interval as i64),
            );
            sched.insert("sync_offset".into(), Value::Integer(self.schedule.sync_offset as i64));
        }
        root.insert("schedule".into(), Value::Table(sched));

        let o = &self.optimizer;
        let mut opt = Table::new();
        opt.insert("eta".into(), Value::Float(o.eta));
        opt.insert("steps".into(), Value::Integer(o.steps as i64));
        opt.insert("k".into(), Value::Integer(o.k as i64));
        opt.insert("batch_prompts".into(), Value::Integer(o.batch_prompts as i64));
        opt.insert("seed".into(), Value::Integer(o.seed as i64));
        if let Some(c) = o.grad_clip_norm {
            opt.insert("grad_clip_norm".into(), Value::Float(c));
        }
        root.insert("optimizer".into(), Value::Table(opt));

        let mut out = Table::new();
        out.insert("dir".into(), self.output_dir.display().to_string().into());
        root.insert("output".into(), Value::Table(out));
        root
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&self.to_table()).expect("config tables always serialize")
    }
}

/// Parses the right-hand side of `section.key=value`. Text that is not a
/// TOML value is taken as a bare string.
pub fn parse_value(text: &str) -> Value {
    let wrapped = format!("v = {text}");
    match wrapped.parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key was just written"),
        Err(_) => Value::String(text.to_string()),
    }
}

fn split_path(path: &str) -> Result<(&str, &str), ConfigError> {
    match path.split_once('.') {
        Some((s, k)) if !s.is_empty() && !k.is_empty() && !k.contains('.') => {
            if SECTIONS.contains(&s) {
                Ok((s, k))
            } else {
                Err(ConfigError(vec![format!("unknown section `{s}` in `{path}`")]))
            }
        }
        _ => Err(ConfigError(vec![format!("expected section.key, got `{path}`")])),
    }
}

/// Sets `section.key` in a raw config table.
pub fn set_path(root: &mut Table, path: &str, value: Value) -> Result<(), ConfigError> {
    let (section, key) = split_path(path)?;
    let entry = root
        .entry(section.to_string())
        .or_insert_with(|| Value::Table(Table::new()));
    match entry {
        Value::Table(t) => {
            t.insert(key.to_string(), value);
            Ok(())
        }
        _ => Err(ConfigError(vec![format!("`{section}` must be a table")])),
    }
}

/// Applies `section.key=value` overrides in order.
pub fn apply_overrides(root: &mut Table, overrides: &[String]) -> Result<(), ConfigError> {
    let mut errors = Vec::new();
    for o in overrides {
        match o.split_once('=') {
            Some((path, value)) => {
                if let Err(ConfigError(e)) = set_path(root, path.trim(), parse_value(value.trim())) {
                    errors.extend(e);
                }
            }
            None => errors.push(format!("override `{o}` is not of the form section.key=value")),
        }
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(ConfigError(errors))
    }
}

pub fn read_table(path: &Path) -> anyhow::Result<Table> {
    let text =
        std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
    text.parse::<Table>()
        .map_err(|e| ConfigError(vec![format!("{}: TOML syntax: {e}", path.display())]).into())
}

/// Resolves a run directory against the output root, if one is set.
pub fn resolve_output(dir: &Path, root: Option<&Path>) -> PathBuf {
    match root {
        Some(r) if dir.is_relative() => r.join(dir),
        _ => dir.to_path_buf(),
    }
}
