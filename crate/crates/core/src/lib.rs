//! Group-relative policy-gradient algorithms on tabular tasks whose
//! expectations can be computed exactly.
//!
//! The crate is organized bottom-up: [`policy`] holds tabular softmax
//! policies, [`tasks`] the reward environments and rollout groups,
//! [`algorithms`] the update rules, [`scheduler`] the off-policy rollout
//! buffer, [`trainer`] the optimization loop and [`oracle`] brute-force
//! reference computations.

// `!(x >= 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod algorithms;
pub mod error;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod scheduler;
pub mod tasks;
pub mod trainer;

pub use algorithms::{AdvantageKind, AlgorithmConfig, AlgorithmKind, ClipConfig, LossNorm, PairwiseWeights};
pub use error::{Error, Result};
pub use policy::{Context, GradientVector, PolicyShape, Prompt, TabularPolicy, Token, TokenSeq};
pub use rng::{Purpose, RandomStream};
pub use scheduler::{BatchRecord, ScheduleConfig, ScheduleState};
pub use tasks::{BanditTask, MultiStepTask, RewardRule, RolloutGroup, SequenceTask, Task, TrajectoryReward};
pub use trainer::{Checkpoint, MetricsRecord, OptimizerConfig, RunOutput};
