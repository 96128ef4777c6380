//! The optimization loop, metrics and checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algorithms::{group_update, AlgorithmConfig, AlgorithmKind, GroupUpdate, LossNorm};
use crate::error::{Error, Result};
use crate::policy::{GradientVector, PolicyShape, Prompt, TabularPolicy, TokenStep};
use crate::rng::{Purpose, RandomStream};
use crate::scheduler::{ScheduleConfig, ScheduleState};
use crate::tasks::{RolloutGroup, Task};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub eta: f64,
    pub grad_clip_norm: Option<f64>,
    pub steps: u64,
    pub batch_prompts: usize,
    pub k: usize,
    pub seed: u64,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            problems.push(format!("eta must be > 0, got {}", self.eta));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                problems.push(format!("grad_clip_norm must be > 0, got {c}"));
            }
        }
        if self.batch_prompts < 1 {
            problems.push("batch_prompts must be >= 1".to_string());
        }
        if self.k < 2 {
            problems.push(format!("K must be >= 2, got {}", self.k));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// One line of the metrics stream. Expectations are exact, computed by
/// enumeration under the policy after the step's update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub mean_reward: f64,
    pub kl_to_init: f64,
    pub entropy_root: f64,
    pub clip_fraction: f64,
    pub mean_response_length: f64,
    pub grad_norm: f64,
    pub generator_version: u64,
    pub off_policyness: u64,
}

/// Fraction of eligible tokens whose mask was 0; 0 when nothing was eligible.
pub fn clip_fraction(masked_tokens: usize, eligible_tokens: usize) -> f64 {
    if eligible_tokens == 0 {
        0.0
    } else {
        masked_tokens as f64 / eligible_tokens as f64
    }
}

/// Exact expectations over every prompt's enumerated responses.
#[derive(Debug, Clone)]
pub struct ExactEvaluator {
    weights: Vec<f64>,
    root_contexts: Vec<usize>,
    items: Vec<Vec<(Vec<TokenStep>, f64, usize)>>,
}

/// Exact metrics of one policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactMetrics {
    pub mean_reward: f64,
    pub kl_to_init: f64,
    pub entropy_root: f64,
    pub mean_response_length: f64,
}

impl ExactEvaluator {
    pub fn new(task: &Task) -> Result<Self> {
        let shape = task.shape();
        let prompts = task.prompts();
        let mut items = Vec::with_capacity(prompts.len());
        let mut root_contexts = Vec::with_capacity(prompts.len());
        for p in &prompts {
            root_contexts.push(shape.context_index(p.id, &[])?);
            let mut rows = Vec::new();
            for (resp, reward) in task.enumerate_responses(p)? {
                let steps = shape.steps(p.id, &resp)?;
                rows.push((steps, reward, resp.len()));
            }
            items.push(rows);
        }
        Ok(Self {
            weights: task.prompt_weights(),
            root_contexts,
            items,
        })
    }

    pub fn evaluate(&self, policy: &TabularPolicy, init: &TabularPolicy) -> ExactMetrics {
        let mut mean_reward = 0.0;
        let mut kl = 0.0;
        let mut length = 0.0;
        let mut entropy = 0.0;
        for ((rows, &w), &root) in self.items.iter().zip(&self.weights).zip(&self.root_contexts) {
            let mut r = 0.0;
            let mut k = 0.0;
            let mut len = 0.0;
            for (steps, reward, n) in rows {
                let lp: f64 = policy.step_log_probs(steps).iter().sum();
                let l0: f64 = init.step_log_probs(steps).iter().sum();
                let p = lp.exp();
                if p == 0.0 {
                    continue;
                }
                r += p * reward;
                k += p * (lp - l0);
                len += p * *n as f64;
            }
            mean_reward += w * r;
            kl += w * k;
            length += w * len;
            let h: f64 = policy
                .log_probs_row(root)
                .iter()
                .filter(|lp| lp.exp() > 0.0)
                .map(|&lp| -lp.exp() * lp)
                .sum();
            entropy += h.max(0.0);
        }
        ExactMetrics {
            mean_reward,
            kl_to_init: kl,
            entropy_root: entropy / self.items.len() as f64,
            mean_response_length: length,
        }
    }
}

/// Final state of a run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Vec<MetricsRecord>,
    pub policy: TabularPolicy,
}

fn choose_prompts(prompts: &[Prompt], weights: &[f64], count: usize, seed: u64, batch: u64) -> Result<Vec<Prompt>> {
    if count == prompts.len() {
        return Ok(prompts.to_vec());
    }
    let dist = WeightedIndex::new(weights).map_err(|e| Error::Config(format!("prompt weights: {e}")))?;
    let mut rng = RandomStream::for_purpose(seed, Purpose::PromptChoice, &[batch]);
    Ok((0..count).map(|_| prompts[dist.sample(&mut rng)].clone()).collect())
}

fn generate_batch(
    task: &Task,
    prompts: &[Prompt],
    weights: &[f64],
    policy: &TabularPolicy,
    opt: &OptimizerConfig,
    batch: u64,
) -> Result<Vec<RolloutGroup>> {
    let chosen = choose_prompts(prompts, weights, opt.batch_prompts, opt.seed, batch)?;
    chosen
        .par_iter()
        .enumerate()
        .map(|(slot, p)| {
            let mut rng = RandomStream::for_purpose(opt.seed, Purpose::Generate, &[batch, slot as u64]);
            task.generate_group(policy, p, opt.k, batch, &mut rng)
        })
        .collect()
}

fn validate_run(task: &Task, policy: &TabularPolicy, algo: &AlgorithmConfig, opt: &OptimizerConfig) -> Result<()> {
    opt.validate()?;
    algo.validate()?;
    if policy.shape() != &task.shape() {
        return Err(Error::Dimension(format!(
            "policy shape {:?} does not match task shape {:?}",
            policy.shape(),
            task.shape()
        )));
    }
    if algo.kind == AlgorithmKind::MultiStepReinforce && !task.is_multi_step() {
        return Err(Error::Config("MultiStepREINFORCE needs a multi-step task".into()));
    }
    task.shape().check_capacity()
}

/// Runs `opt.steps` gradient steps; see [`run_with`].
pub fn run(
    task: &Task,
    policy_init: &TabularPolicy,
    algo: &AlgorithmConfig,
    sched: &ScheduleConfig,
    opt: &OptimizerConfig,
) -> Result<RunOutput> {
    run_with(task, policy_init, algo, sched, opt, |_| Ok(()))
}

/// Runs `opt.steps` gradient steps, handing each record to `on_record` as
/// soon as it is produced. A non-finite gradient or update aborts with
/// [`Error::Aborted`].
pub fn run_with<F>(
    task: &Task,
    policy_init: &TabularPolicy,
    algo: &AlgorithmConfig,
    sched: &ScheduleConfig,
    opt: &OptimizerConfig,
    mut on_record: F,
) -> Result<RunOutput>
where
    F: FnMut(&MetricsRecord) -> Result<()>,
{
    validate_run(task, policy_init, algo, opt)?;
    let prompts = task.prompts();
    let weights = task.prompt_weights();
    let evaluator = ExactEvaluator::new(task)?;
    let init = policy_init.clone();
    let mut current = policy_init.clone();
    let mut schedule = ScheduleState::new(*sched, &init)?;
    let token_mean = algo.kind.uses_loss_norm() && algo.loss_norm == LossNorm::BatchTokenMean;
    let mut metrics = Vec::with_capacity(opt.steps as usize);

    for l in 0..opt.steps {
        let scheduled = schedule.step(&current, |pol, b| generate_batch(task, &prompts, &weights, pol, opt, b))?;
        let batch = scheduled.batch;
        let updates: Vec<GroupUpdate> = batch
            .groups
            .par_iter()
            .enumerate()
            .map(|(slot, g)| {
                let mut rng = RandomStream::for_purpose(opt.seed, Purpose::Drop, &[l, slot as u64]);
                group_update(algo, g, &current, &mut rng)
            })
            .collect::<Result<_>>()?;

        let mut grad = GradientVector::zeros_like(&current);
        let mut masked = 0;
        let mut eligible = 0;
        let total_weight: f64 = if token_mean {
            batch.groups.iter().map(|g| g.num_tokens() as f64).sum()
        } else {
            batch.groups.len() as f64
        };
        for (u, g) in updates.iter().zip(&batch.groups) {
            let w = if token_mean { g.num_tokens() as f64 } else { 1.0 };
            grad.add_scaled(&u.grad, w / total_weight)?;
            masked += u.masked_tokens;
            eligible += u.eligible_tokens;
        }
        let grad_norm = grad.norm();
        if let Some(c) = opt.grad_clip_norm {
            if grad_norm > c {
                grad.scale(c / grad_norm);
            }
        }

        let record = |pol: &TabularPolicy| {
            let m = evaluator.evaluate(pol, &init);
            MetricsRecord {
                step: l,
                mean_reward: m.mean_reward,
                kl_to_init: m.kl_to_init,
                entropy_root: m.entropy_root,
                clip_fraction: clip_fraction(masked, eligible),
                mean_response_length: m.mean_response_length,
                grad_norm,
                generator_version: batch.generator_version,
                off_policyness: batch.staleness(l).max(0) as u64,
            }
        };
        if !grad.is_finite() {
            return Err(Error::Aborted {
                step: l,
                reason: "non-finite gradient".into(),
                record: Box::new(record(&current)),
            });
        }
        current = match current.apply_update(&grad, opt.eta) {
            Ok(p) => p,
            Err(e) => {
                return Err(Error::Aborted {
                    step: l,
                    reason: e.to_string(),
                    record: Box::new(record(&current)),
                })
            }
        };
        let rec = record(&current);
        on_record(&rec)?;
        metrics.push(rec);
    }
    Ok(RunOutput {
        metrics,
        policy: current,
    })
}

/// One JSON object per line.
pub fn metrics_line(record: &MetricsRecord) -> String {
    serde_json::to_string(record).expect("metrics records always serialize")
}

pub fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        writeln!(w, "{}", metrics_line(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Data(format!("bad metrics line: {e}"))))
        .collect()
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RLABCKP1";
pub const CHECKPOINT_FORMAT_VERSION: u64 = 1;

/// Policy weights plus the counters needed to resume the random streams.
///
/// Layout, all integers `u64` little-endian and all floats `f64`
/// little-endian:
///
/// ```text
/// magic "RLABCKP1" | format version | V | L | P | eos (0/1)
/// | policy version | seed | steps completed | n_logits | logits...
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub policy: TabularPolicy,
    pub seed: u64,
    pub step: u64,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let s = self.policy.shape();
        w.write_all(CHECKPOINT_MAGIC)?;
        for v in [
            CHECKPOINT_FORMAT_VERSION,
            s.vocab_size as u64,
            s.max_len as u64,
            s.num_prompts as u64,
            s.eos as u64,
            self.policy.version(),
            self.seed,
            self.step,
            self.policy.logits().len() as u64,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for x in self.policy.logits() {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic header".into()));
        }
        let mut next = || -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        };
        let format = next()?;
        if format != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {format}")));
        }
        let (v, l, p, eos) = (next()?, next()?, next()?, next()?);
        let (version, seed, step, n) = (next()?, next()?, next()?, next()?);
        if eos > 1 {
            return Err(Error::Checkpoint(format!("eos flag {eos} is not 0 or 1")));
        }
        let shape = PolicyShape::new(v as usize, l as usize, p as usize, eos == 1)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        if n as usize != shape.num_contexts() * shape.vocab_size {
            return Err(Error::Checkpoint(format!("{n} logits do not match the shape")));
        }
        let mut logits = Vec::with_capacity(n as usize);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            logits.push(f64::from_le_bytes(b));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        let policy = TabularPolicy::from_logits(shape, logits)
            .map_err(|e| Error::Checkpoint(e.to_string()))?
            .with_version(version);
        Ok(Self { policy, seed, step })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}
