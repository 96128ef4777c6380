//! Rollout buffering and weight synchronization.
//!
//! The timeline is logical. Before training step `l` the buffer is topped up
//! to batch `l + n`, then batch `l` is consumed. Whenever a batch index that
//! is a multiple of `m` is about to be generated, the rollout side first
//! copies the trainer's current weights. A consumed batch `l` was therefore
//! generated by weights synchronized when batch `m⌊l/m⌋` was produced, at
//! trainer step `m⌊l/m⌋ - n`, which makes its staleness `(l mod m) + n`.
//!
//! The first `n` batches are generated before any training step. Their
//! snapshot clock is negative but the weights are the initial ones.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::TabularPolicy;
use crate::tasks::RolloutGroup;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub sync_interval: u64,
    pub sync_offset: u64,
    pub offline: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self::on_policy()
    }
}

impl ScheduleConfig {
    pub fn new(sync_interval: u64, sync_offset: u64) -> Result<Self> {
        let c = Self {
            sync_interval,
            sync_offset,
            offline: false,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn on_policy() -> Self {
        Self {
            sync_interval: 1,
            sync_offset: 0,
            offline: false,
        }
    }

    /// Every batch comes from the version-0 policy.
    pub fn offline() -> Self {
        Self {
            sync_interval: 1,
            sync_offset: 0,
            offline: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sync_interval < 1 {
            return Err(Error::Config("sync_interval must be >= 1".into()));
        }
        Ok(())
    }

    /// Staleness of the batch consumed at step `l` under this schedule.
    pub fn off_policyness(&self, l: u64) -> u64 {
        if self.offline {
            l
        } else {
            off_policyness(l, self.sync_interval, self.sync_offset)
        }
    }
}

/// `(l mod m) + n`.
pub fn off_policyness(l: u64, m: u64, n: u64) -> u64 {
    l % m + n
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchRecord {
    pub batch_index: u64,
    pub groups: Vec<RolloutGroup>,
    /// Version of the weights that generated every group in the batch.
    pub generator_version: u64,
    /// Trainer step count at the synchronization that produced the
    /// generating weights; negative for warm-up batches.
    pub snapshot_step: i64,
}

impl BatchRecord {
    /// Trainer step at consumption minus the generator snapshot's step.
    pub fn staleness(&self, consumed_at: u64) -> i64 {
        consumed_at as i64 - self.snapshot_step
    }
}

/// What one call to [`ScheduleState::step`] produced.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduledBatch {
    pub batch: BatchRecord,
    /// Whether the rollout weights were refreshed during this step.
    pub synced: bool,
}

#[derive(Debug, Clone)]
pub struct ScheduleState {
    config: ScheduleConfig,
    rollout: TabularPolicy,
    rollout_clock: i64,
    buffer: VecDeque<BatchRecord>,
    next_generate: u64,
    next_consume: u64,
}

impl ScheduleState {
    pub fn new(config: ScheduleConfig, initial: &TabularPolicy) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            rollout: initial.clone(),
            rollout_clock: 0,
            buffer: VecDeque::new(),
            next_generate: 0,
            next_consume: 0,
        })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn rollout_policy(&self) -> &TabularPolicy {
        &self.rollout
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    /// Advances one training step. `trainer` holds the trainer's current
    /// weights; `generate(policy, batch_index)` produces a batch's groups
    /// from the rollout weights.
    pub fn step<F>(&mut self, trainer: &TabularPolicy, mut generate: F) -> Result<ScheduledBatch>
    where
        F: FnMut(&TabularPolicy, u64) -> Result<Vec<RolloutGroup>>,
    {
        let l = self.next_consume;
        let horizon = l + self.config.sync_offset;
        let mut synced = false;
        while self.next_generate <= horizon {
            let b = self.next_generate;
            if !self.config.offline && b.is_multiple_of(self.config.sync_interval) {
                self.rollout = trainer.clone();
                self.rollout_clock = b as i64 - self.config.sync_offset as i64;
                synced = true;
            }
            let groups = generate(&self.rollout, b)?;
            if let Some(g) = groups.iter().find(|g| g.behavior_version != self.rollout.version()) {
                return Err(Error::Scheduling(format!(
                    "batch {b} has a group tagged with version {} but was generated by version {}",
                    g.behavior_version,
                    self.rollout.version()
                )));
            }
            self.buffer.push_back(BatchRecord {
                batch_index: b,
                groups,
                generator_version: self.rollout.version(),
                snapshot_step: self.rollout_clock,
            });
            self.next_generate += 1;
        }
        let batch = self
            .buffer
            .pop_front()
            .ok_or_else(|| Error::Scheduling(format!("buffer underrun at step {l}")))?;
        if batch.batch_index != l {
            return Err(Error::Scheduling(format!(
                "expected batch {l}, buffer served batch {}",
                batch.batch_index
            )));
        }
        self.next_consume += 1;
        Ok(ScheduledBatch { batch, synced })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyShape;

    /// Runs `steps` steps where the trainer's version advances by one per
    /// step. Returns (generator_version, staleness, synced) per step.
    fn simulate(cfg: ScheduleConfig, steps: u64) -> Vec<(u64, i64, bool)> {
        let shape = PolicyShape::bandit(2).unwrap();
        let mut trainer = TabularPolicy::zeros(shape);
        let mut state = ScheduleState::new(cfg, &trainer).unwrap();
        let mut out = Vec::new();
        for l in 0..steps {
            assert_eq!(trainer.version(), l);
            let s = state.step(&trainer, |_, _| Ok(Vec::new())).unwrap();
            assert_eq!(s.batch.batch_index, l);
            out.push((s.batch.generator_version, s.batch.staleness(l), s.synced));
            trainer = trainer.with_version(l + 1);
        }
        out
    }

    #[test]
    fn documented_staleness_patterns() {
        let seq: Vec<u64> = (0..8).map(|l| off_policyness(l, 4, 0)).collect();
        assert_eq!(seq, vec![0, 1, 2, 3, 0, 1, 2, 3]);
        assert!((0..20).all(|l| off_policyness(l, 1, 4) == 4));
        assert!((0..20).all(|l| off_policyness(l, 1, 0) == 0));
    }

    #[test]
    fn on_policy_uses_current_version() {
        for (l, (v, s, synced)) in simulate(ScheduleConfig::on_policy(), 10).into_iter().enumerate() {
            assert_eq!(v, l as u64);
            assert_eq!(s, 0);
            assert!(synced);
        }
    }

    #[test]
    fn interval_four_shares_snapshot() {
        let out = simulate(ScheduleConfig::new(4, 0).unwrap(), 8);
        let versions: Vec<u64> = out.iter().map(|x| x.0).collect();
        assert_eq!(versions, vec![0, 0, 0, 0, 4, 4, 4, 4]);
    }

    #[test]
    fn staleness_audit_grid() {
        for m in 1..=5 {
            for n in 0..=5 {
                let cfg = ScheduleConfig::new(m, n).unwrap();
                for (l, (v, s, _)) in simulate(cfg, 15 * m).into_iter().enumerate() {
                    let l = l as u64;
                    assert_eq!(s, off_policyness(l, m, n) as i64, "m={m} n={n} l={l}");
                    let expected_version = (m * (l / m)).saturating_sub(n);
                    assert_eq!(v, expected_version, "m={m} n={n} l={l}");
                }
            }
        }
    }

    #[test]
    fn offline_never_syncs() {
        for (l, (v, s, synced)) in simulate(ScheduleConfig::offline(), 100).into_iter().enumerate() {
            assert_eq!(v, 0);
            assert_eq!(s, l as i64);
            assert!(!synced);
        }
    }

    #[test]
    fn warm_up_generates_offset_batches_first() {
        let shape = PolicyShape::bandit(2).unwrap();
        let trainer = TabularPolicy::zeros(shape);
        let mut state = ScheduleState::new(ScheduleConfig::new(2, 3).unwrap(), &trainer).unwrap();
        let mut generated = Vec::new();
        state
            .step(&trainer, |_, b| {
                generated.push(b);
                Ok(Vec::new())
            })
            .unwrap();
        assert_eq!(generated, vec![0, 1, 2, 3]);
        assert_eq!(state.buffered(), 3);
    }

    #[test]
    fn rejects_zero_interval() {
        assert!(ScheduleConfig::new(0, 1).is_err());
    }
}
