//! Group-relative update rules.
//!
//! Every function here is a pure map from a [`RolloutGroup`] and the current
//! policy to an update direction `g` (ascent direction, applied as
//! `θ + η g`) or to a scalar loss whose negative gradient is such a
//! direction.
//!
//! | kind                 | per-response weight                                  | token factor     |
//! |----------------------|------------------------------------------------------|------------------|
//! | REINFORCE            | `r_i - r̄`                                            | 1                |
//! | GRPO                 | `(r_i - r̄) / σ_r`                                    | `ρ · M` (one-side) |
//! | REC_OneSide_IS/NoIS  | `r_i - r̄`                                            | `ρ · M` / `M`    |
//! | REC_TwoSide_IS/NoIS  | `r_i - r̄`                                            | `ρ · M̃` / `M̃`   |
//! | REC_Ring_NoIS        | `r_i - r̄`                                            | `M̂`              |
//! | OPMD                 | `r_i - r̄ - τ (log π - log π_old)`                    | 1                |
//! | AsymRE               | `r_i - r̄ + τ`                                        | 1                |
//! | PairwiseWeighted     | `Σ_j w_ij (r_i - r̄_i)`                               | 1                |
//! | RED_Drop             | `r_i - r̄_S` on a balanced subset `S`                 | 1                |
//! | RED_Weight           | `exp(A_i/τ) (r_i - r̄)`                               | 1                |
//! | MultiStepREINFORCE   | `r(T_i) - r̄`, summed over the actions of `T_i`       | 1                |

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{GradientVector, TabularPolicy, TokenStep};
use crate::rng::RandomStream;
use crate::tasks::{group_stats, RolloutGroup};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AlgorithmKind {
    Reinforce,
    Grpo,
    RecOneSideIs,
    RecOneSideNoIs,
    RecTwoSideIs,
    RecTwoSideNoIs,
    RecRingNoIs,
    Opmd,
    AsymRe,
    PairwiseWeighted,
    RedDrop,
    RedWeight,
    MultiStepReinforce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    OneSide,
    TwoSide,
    Ring,
}

impl AlgorithmKind {
    pub const ALL: [AlgorithmKind; 13] = [
        AlgorithmKind::Reinforce,
        AlgorithmKind::Grpo,
        AlgorithmKind::RecOneSideIs,
        AlgorithmKind::RecOneSideNoIs,
        AlgorithmKind::RecTwoSideIs,
        AlgorithmKind::RecTwoSideNoIs,
        AlgorithmKind::RecRingNoIs,
        AlgorithmKind::Opmd,
        AlgorithmKind::AsymRe,
        AlgorithmKind::PairwiseWeighted,
        AlgorithmKind::RedDrop,
        AlgorithmKind::RedWeight,
        AlgorithmKind::MultiStepReinforce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AlgorithmKind::Reinforce => "REINFORCE",
            AlgorithmKind::Grpo => "GRPO",
            AlgorithmKind::RecOneSideIs => "REC_OneSide_IS",
            AlgorithmKind::RecOneSideNoIs => "REC_OneSide_NoIS",
            AlgorithmKind::RecTwoSideIs => "REC_TwoSide_IS",
            AlgorithmKind::RecTwoSideNoIs => "REC_TwoSide_NoIS",
            AlgorithmKind::RecRingNoIs => "REC_Ring_NoIS",
            AlgorithmKind::Opmd => "OPMD",
            AlgorithmKind::AsymRe => "AsymRE",
            AlgorithmKind::PairwiseWeighted => "PairwiseWeighted",
            AlgorithmKind::RedDrop => "RED_Drop",
            AlgorithmKind::RedWeight => "RED_Weight",
            AlgorithmKind::MultiStepReinforce => "MultiStepREINFORCE",
        }
    }

    pub fn mask(self) -> Option<MaskKind> {
        match self {
            AlgorithmKind::Grpo | AlgorithmKind::RecOneSideIs | AlgorithmKind::RecOneSideNoIs => {
                Some(MaskKind::OneSide)
            }
            AlgorithmKind::RecTwoSideIs | AlgorithmKind::RecTwoSideNoIs => Some(MaskKind::TwoSide),
            AlgorithmKind::RecRingNoIs => Some(MaskKind::Ring),
            _ => None,
        }
    }

    pub fn uses_clip(self) -> bool {
        self.mask().is_some()
    }

    pub fn uses_importance_sampling(self) -> bool {
        matches!(
            self,
            AlgorithmKind::Grpo | AlgorithmKind::RecOneSideIs | AlgorithmKind::RecTwoSideIs
        )
    }

    pub fn uses_tau(self) -> bool {
        matches!(
            self,
            AlgorithmKind::Opmd | AlgorithmKind::AsymRe | AlgorithmKind::RedWeight
        )
    }

    /// Kinds whose normalization is selected by [`LossNorm`]; the others
    /// follow their own displayed normalization.
    pub fn uses_loss_norm(self) -> bool {
        matches!(self, AlgorithmKind::Reinforce) || self.uses_clip()
    }
}

impl fmt::Display for AlgorithmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AlgorithmKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let wanted = s.trim().replace('-', "_").to_ascii_lowercase();
        AlgorithmKind::ALL
            .into_iter()
            .find(|k| k.name().to_ascii_lowercase() == wanted)
            .ok_or_else(|| {
                let names: Vec<&str> = AlgorithmKind::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!(
                    "unknown algorithm kind {s:?}; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum LossNorm {
    /// `1/K` per group.
    #[default]
    PerGroupK,
    /// Divide by the number of response tokens.
    BatchTokenMean,
}

impl LossNorm {
    pub fn name(self) -> &'static str {
        match self {
            LossNorm::PerGroupK => "per_group_k",
            LossNorm::BatchTokenMean => "batch_token_mean",
        }
    }

    fn denominator(self, group: &RolloutGroup) -> f64 {
        match self {
            LossNorm::PerGroupK => group.k() as f64,
            LossNorm::BatchTokenMean => group.num_tokens() as f64,
        }
    }
}

impl FromStr for LossNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "per_group_k" => Ok(LossNorm::PerGroupK),
            "batch_token_mean" => Ok(LossNorm::BatchTokenMean),
            _ => Err(Error::Config(format!(
                "unknown loss_norm {s:?}; expected per_group_k or batch_token_mean"
            ))),
        }
    }
}

/// Per-sample weights used by `PairwiseWeighted` during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum PairwiseWeights {
    #[default]
    Unit,
    /// Rank-one `w_i = 1 / π_b(y_i)` from recorded behavior log-probs.
    InverseBehavior,
}

impl PairwiseWeights {
    pub fn name(self) -> &'static str {
        match self {
            PairwiseWeights::Unit => "unit",
            PairwiseWeights::InverseBehavior => "inverse_behavior",
        }
    }
}

impl FromStr for PairwiseWeights {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "unit" => Ok(PairwiseWeights::Unit),
            "inverse_behavior" => Ok(PairwiseWeights::InverseBehavior),
            _ => Err(Error::Config(format!(
                "unknown pairwise_weights {s:?}; expected unit or inverse_behavior"
            ))),
        }
    }
}

/// Advantage used inside RED-Weight's `exp(A_i/τ)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum AdvantageKind {
    /// `(r_i - r̄) / σ_r`.
    #[default]
    Normalized,
    /// `r_i - r̄`.
    Centered,
}

impl AdvantageKind {
    pub fn name(self) -> &'static str {
        match self {
            AdvantageKind::Normalized => "normalized",
            AdvantageKind::Centered => "centered",
        }
    }
}

impl FromStr for AdvantageKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normalized" => Ok(AdvantageKind::Normalized),
            "centered" => Ok(AdvantageKind::Centered),
            _ => Err(Error::Config(format!(
                "unknown advantage kind {s:?}; expected normalized or centered"
            ))),
        }
    }
}

/// Inner band `[1 - eps_low, 1 + eps_high]` and outer margins for the ring
/// mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub eps_low: f64,
    pub eps_high: f64,
    pub eps_low_outer: f64,
    pub eps_high_outer: f64,
}

impl ClipConfig {
    /// Outer margins equal to the inner ones.
    pub fn new(eps_low: f64, eps_high: f64) -> Result<Self> {
        Self::with_outer(eps_low, eps_high, eps_low, eps_high)
    }

    pub fn with_outer(eps_low: f64, eps_high: f64, eps_low_outer: f64, eps_high_outer: f64) -> Result<Self> {
        let c = Self {
            eps_low,
            eps_high,
            eps_low_outer,
            eps_high_outer,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.eps_low >= 0.0 && self.eps_low <= 1.0) {
            problems.push(format!("eps_low must be in [0, 1], got {}", self.eps_low));
        }
        if !(self.eps_high >= 0.0) || !self.eps_high.is_finite() {
            problems.push(format!("eps_high must be >= 0, got {}", self.eps_high));
        }
        if !(self.eps_low_outer >= self.eps_low) {
            problems.push(format!(
                "eps_low_outer {} must be >= eps_low {}",
                self.eps_low_outer, self.eps_low
            ));
        }
        if !(self.eps_high_outer >= self.eps_high) {
            problems.push(format!(
                "eps_high_outer {} must be >= eps_high {}",
                self.eps_high_outer, self.eps_high
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmConfig {
    pub kind: AlgorithmKind,
    pub tau: f64,
    pub clip: Option<ClipConfig>,
    pub loss_norm: LossNorm,
    pub pairwise_weights: PairwiseWeights,
    pub red_weight_advantage: AdvantageKind,
}

impl AlgorithmConfig {
    pub fn new(kind: AlgorithmKind) -> Self {
        Self {
            kind,
            tau: 1.0,
            clip: None,
            loss_norm: LossNorm::PerGroupK,
            pairwise_weights: PairwiseWeights::Unit,
            red_weight_advantage: AdvantageKind::Normalized,
        }
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn with_clip(mut self, clip: ClipConfig) -> Self {
        self.clip = Some(clip);
        self
    }

    pub fn with_loss_norm(mut self, norm: LossNorm) -> Self {
        self.loss_norm = norm;
        self
    }

    pub fn with_pairwise_weights(mut self, w: PairwiseWeights) -> Self {
        self.pairwise_weights = w;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.uses_tau() && !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!(
                "{} requires tau > 0, got {}",
                self.kind, self.tau
            )));
        }
        match (&self.clip, self.kind.uses_clip()) {
            (Some(c), true) => c.validate(),
            (None, true) => Err(Error::Config(format!("{} requires clip parameters", self.kind))),
            (Some(_), false) => Err(Error::Config(format!("{} does not use clip parameters", self.kind))),
            (None, false) => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sign {
    Positive,
    Negative,
    Zero,
}

impl Sign {
    pub fn of(x: f64) -> Self {
        if x > 0.0 {
            Sign::Positive
        } else if x < 0.0 {
            Sign::Negative
        } else {
            Sign::Zero
        }
    }
}

/// One-side mask: keeps positive-advantage tokens with ratio `<= 1 + ε_high`
/// and negative-advantage tokens with ratio `>= 1 - ε_low`.
pub fn clip_mask_one_side(ratio: f64, sign: Sign, clip: &ClipConfig) -> bool {
    match sign {
        Sign::Positive => ratio <= 1.0 + clip.eps_high,
        Sign::Negative => ratio >= 1.0 - clip.eps_low,
        Sign::Zero => false,
    }
}

pub fn clip_mask_two_side(ratio: f64, clip: &ClipConfig) -> bool {
    1.0 - clip.eps_low <= ratio && ratio <= 1.0 + clip.eps_high
}

/// Inner band, plus reactivation beyond the outer margins on the side where
/// the update pulls the ratio back toward 1.
pub fn clip_mask_ring(ratio: f64, sign: Sign, clip: &ClipConfig) -> bool {
    clip_mask_two_side(ratio, clip)
        || (sign == Sign::Positive && ratio <= 1.0 - clip.eps_low_outer)
        || (sign == Sign::Negative && ratio >= 1.0 + clip.eps_high_outer)
}

pub fn apply_mask(kind: MaskKind, ratio: f64, sign: Sign, clip: &ClipConfig) -> bool {
    match kind {
        MaskKind::OneSide => clip_mask_one_side(ratio, sign, clip),
        MaskKind::TwoSide => clip_mask_two_side(ratio, clip),
        MaskKind::Ring => clip_mask_ring(ratio, sign, clip),
    }
}

/// `r_i - r̄`.
pub fn centered_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    let s = group_stats(rewards, None)?;
    Ok(rewards.iter().map(|r| r - s.mean).collect())
}

/// `(r_i - r̄) / max(σ_r, 1e-6)`.
pub fn grpo_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    let s = group_stats(rewards, None)?;
    let sigma = s.floored_std();
    Ok(rewards.iter().map(|r| (r - s.mean) / sigma).collect())
}

fn group_steps(group: &RolloutGroup, policy: &TabularPolicy) -> Result<Vec<Vec<TokenStep>>> {
    group.validate()?;
    group
        .responses
        .iter()
        .map(|r| policy.shape().steps(group.prompt.id, r))
        .collect()
}

fn seq_log_probs(policy: &TabularPolicy, steps: &[Vec<TokenStep>]) -> Vec<f64> {
    steps
        .iter()
        .map(|s| {
            let mut total = 0.0;
            for lp in policy.step_log_probs(s) {
                total += lp;
            }
            total
        })
        .collect()
}

/// `Σ_i coefs[i] ∇ log π(y_i | x)`.
fn weighted_scores(policy: &TabularPolicy, steps: &[Vec<TokenStep>], coefs: &[f64]) -> GradientVector {
    let mut grad = GradientVector::zeros_like(policy);
    for (s, &c) in steps.iter().zip(coefs) {
        if c != 0.0 {
            policy.accumulate_score(&mut grad, s, c);
        }
    }
    grad
}

/// Group-relative REINFORCE:
/// `(1/K) Σ_i (r_i - r̄) Σ_t ∇ log π(y_i^t | x, y_i^{<t})`, or divided by the
/// group's token count under [`LossNorm::BatchTokenMean`].
pub fn reinforce_grad(group: &RolloutGroup, policy: &TabularPolicy, norm: LossNorm) -> Result<GradientVector> {
    let steps = group_steps(group, policy)?;
    let denom = norm.denominator(group);
    let coefs: Vec<f64> = centered_advantages(&group.rewards)?
        .into_iter()
        .map(|a| a / denom)
        .collect();
    Ok(weighted_scores(policy, &steps, &coefs))
}

/// Update direction plus clipping statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedGrad {
    pub grad: GradientVector,
    /// Tokens with nonzero advantage whose mask was 0.
    pub masked_tokens: usize,
    /// Tokens with nonzero advantage.
    pub eligible_tokens: usize,
}

/// Token-wise clipped update for GRPO and the REC family. Forced
/// end-of-sequence tokens carry no gradient and are not counted.
pub fn rec_grad_with_stats(group: &RolloutGroup, policy: &TabularPolicy, cfg: &AlgorithmConfig) -> Result<MaskedGrad> {
    let mask_kind = cfg
        .kind
        .mask()
        .ok_or_else(|| Error::Config(format!("{} is not a clipped algorithm", cfg.kind)))?;
    let clip = cfg
        .clip
        .ok_or_else(|| Error::Config(format!("{} requires clip parameters", cfg.kind)))?;
    let behavior = group
        .behavior_logprobs
        .as_ref()
        .ok_or_else(|| Error::Data("group has no behavior log-probabilities".into()))?;
    let steps = group_steps(group, policy)?;
    let advantages = if cfg.kind == AlgorithmKind::Grpo {
        grpo_advantages(&group.rewards)?
    } else {
        centered_advantages(&group.rewards)?
    };
    let denom = cfg.loss_norm.denominator(group);
    let with_is = cfg.kind.uses_importance_sampling();

    let mut grad = GradientVector::zeros_like(policy);
    let mut masked_tokens = 0;
    let mut eligible_tokens = 0;
    for ((s, old), &adv) in steps.iter().zip(behavior).zip(&advantages) {
        let sign = Sign::of(adv);
        if sign == Sign::Zero {
            continue;
        }
        let current = policy.step_log_probs(s);
        for ((step, cur), old_lp) in s.iter().zip(&current).zip(old) {
            if step.forced {
                continue;
            }
            eligible_tokens += 1;
            let ratio = (cur - old_lp).exp();
            if !apply_mask(mask_kind, ratio, sign, &clip) {
                masked_tokens += 1;
                continue;
            }
            let weight = if with_is { adv * ratio } else { adv };
            policy.accumulate_score(&mut grad, std::slice::from_ref(step), weight / denom);
        }
    }
    Ok(MaskedGrad {
        grad,
        masked_tokens,
        eligible_tokens,
    })
}

pub fn rec_grad(group: &RolloutGroup, policy: &TabularPolicy, cfg: &AlgorithmConfig) -> Result<GradientVector> {
    Ok(rec_grad_with_stats(group, policy, cfg)?.grad)
}

/// Residuals `a_i = r_i - τ (log π(y_i) - log π_anchor(y_i))`.
pub fn consistency_residuals(
    group: &RolloutGroup,
    policy: &TabularPolicy,
    anchor: &TabularPolicy,
    tau: f64,
) -> Result<Vec<f64>> {
    let steps = group_steps(group, policy)?;
    let lp = seq_log_probs(policy, &steps);
    let la = seq_log_probs(anchor, &steps);
    Ok(group
        .rewards
        .iter()
        .zip(lp.iter().zip(&la))
        .map(|(r, (p, a))| r - tau * (p - a))
        .collect())
}

/// Pairwise mean-squared surrogate
/// `(1/K²) Σ_{i<j} (a_i - a_j)² / (1+τ)²`.
pub fn surrogate_loss(group: &RolloutGroup, policy: &TabularPolicy, anchor: &TabularPolicy, tau: f64) -> Result<f64> {
    let a = consistency_residuals(group, policy, anchor, tau)?;
    let k = a.len() as f64;
    let mut total = 0.0;
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            total += (a[i] - a[j]).powi(2);
        }
    }
    Ok(total / ((1.0 + tau).powi(2) * k * k))
}

/// `2τ / (1+τ)²`.
pub fn surrogate_prefactor(tau: f64) -> f64 {
    2.0 * tau / (1.0 + tau).powi(2)
}

/// Negative gradient of [`surrogate_loss`] evaluated at `θ = θ_anchor`:
/// `(2τ/(1+τ)²) (1/K) Σ_i (r_i - r̄) ∇ log π_anchor(y_i | x)`.
pub fn surrogate_grad_at_anchor(group: &RolloutGroup, anchor: &TabularPolicy, tau: f64) -> Result<GradientVector> {
    let mut g = reinforce_grad(group, anchor, LossNorm::PerGroupK)?;
    g.scale(surrogate_prefactor(tau));
    Ok(g)
}

/// OPMD loss
/// `-(1/K) Σ (r_i - r̄) log π(y_i) + (τ/2K) Σ (log π(y_i) - log π_old(y_i))²`.
pub fn opmd_loss(group: &RolloutGroup, policy: &TabularPolicy, anchor: &TabularPolicy, tau: f64) -> Result<f64> {
    let steps = group_steps(group, policy)?;
    let lp = seq_log_probs(policy, &steps);
    let lo = seq_log_probs(anchor, &steps);
    let adv = centered_advantages(&group.rewards)?;
    let k = group.k() as f64;
    let mut pg = 0.0;
    let mut reg = 0.0;
    for i in 0..group.k() {
        pg += adv[i] * lp[i];
        reg += (lp[i] - lo[i]).powi(2);
    }
    Ok(-pg / k + tau / (2.0 * k) * reg)
}

fn opmd_grad_with_old(
    group: &RolloutGroup,
    policy: &TabularPolicy,
    steps: &[Vec<TokenStep>],
    old_seq_logps: &[f64],
    tau: f64,
) -> Result<GradientVector> {
    let lp = seq_log_probs(policy, steps);
    let adv = centered_advantages(&group.rewards)?;
    let k = group.k() as f64;
    let coefs: Vec<f64> = (0..group.k())
        .map(|i| (adv[i] - tau * (lp[i] - old_seq_logps[i])) / k)
        .collect();
    Ok(weighted_scores(policy, steps, &coefs))
}

/// `-∇ opmd_loss`.
pub fn opmd_grad(
    group: &RolloutGroup,
    policy: &TabularPolicy,
    anchor: &TabularPolicy,
    tau: f64,
) -> Result<GradientVector> {
    let steps = group_steps(group, policy)?;
    let lo = seq_log_probs(anchor, &steps);
    opmd_grad_with_old(group, policy, &steps, &lo, tau)
}

/// Finite-sample estimate of `τ log Z`: `τ log((1/K) Σ_i e^{r_i/τ})`.
pub fn partition_estimate(rewards: &[f64], tau: f64) -> f64 {
    let scaled: Vec<f64> = rewards.iter().map(|r| r / tau).collect();
    let max = scaled.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let lse = max + scaled.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    tau * (lse - (rewards.len() as f64).ln())
}

/// Stand-in for `τ log Z(x, π_θt)` in the unapproximated OPMD loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartitionBaseline {
    /// Known value of `τ log Z`, e.g. from exact enumeration.
    Exact(f64),
    /// [`partition_estimate`] over the group's rewards.
    SampleEstimate,
    /// The group mean reward `r̄`.
    MeanReward,
}

/// `(1/K) Σ_i (r_i - b - τ (log π(y_i) - log π_anchor(y_i)))²` with `b`
/// chosen by `baseline`.
pub fn opmd_consistency_loss(
    group: &RolloutGroup,
    policy: &TabularPolicy,
    anchor: &TabularPolicy,
    tau: f64,
    baseline: PartitionBaseline,
) -> Result<f64> {
    let a = consistency_residuals(group, policy, anchor, tau)?;
    let b = match baseline {
        PartitionBaseline::Exact(v) => v,
        PartitionBaseline::SampleEstimate => partition_estimate(&group.rewards, tau),
        PartitionBaseline::MeanReward => group_stats(&group.rewards, None)?.mean,
    };
    Ok(a.iter().map(|x| (x - b).powi(2)).sum::<f64>() / a.len() as f64)
}

/// AsymRE: `(1/K) Σ_i (r_i - (r̄ - τ)) ∇ log π(y_i | x)`.
pub fn asymre_grad(group: &RolloutGroup, policy: &TabularPolicy, tau: f64) -> Result<GradientVector> {
    let steps = group_steps(group, policy)?;
    let mean = group_stats(&group.rewards, None)?.mean;
    let k = group.k() as f64;
    let coefs: Vec<f64> = group.rewards.iter().map(|r| (r - (mean - tau)) / k).collect();
    Ok(weighted_scores(policy, &steps, &coefs))
}

/// Symmetric non-negative pair weights.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightMatrix {
    /// Row-major `K x K`.
    Full { k: usize, w: Vec<f64> },
    /// `w_ij = w_i w_j`.
    RankOne(Vec<f64>),
}

impl WeightMatrix {
    pub fn unit(k: usize) -> Self {
        WeightMatrix::Full { k, w: vec![1.0; k * k] }
    }

    /// Expands the rank-one form `v vᵀ`.
    pub fn outer(v: &[f64]) -> Self {
        let k = v.len();
        let mut w = Vec::with_capacity(k * k);
        for a in v {
            for b in v {
                w.push(a * b);
            }
        }
        WeightMatrix::Full { k, w }
    }

    pub fn size(&self) -> usize {
        match self {
            WeightMatrix::Full { k, .. } => *k,
            WeightMatrix::RankOne(v) => v.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            WeightMatrix::Full { k, w } => {
                if w.len() != k * k {
                    return Err(Error::Data(format!("weight matrix needs {} entries", k * k)));
                }
                for i in 0..*k {
                    for j in 0..*k {
                        let x = w[i * k + j];
                        if !(x >= 0.0) || !x.is_finite() {
                            return Err(Error::Data(format!("weight ({i},{j}) = {x} is invalid")));
                        }
                        if x != w[j * k + i] {
                            return Err(Error::Data(format!("weights ({i},{j}) and ({j},{i}) differ")));
                        }
                    }
                }
            }
            WeightMatrix::RankOne(v) => {
                if v.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
                    return Err(Error::Data("rank-one weights must be finite and non-negative".into()));
                }
            }
        }
        Ok(())
    }

    fn row_sums(&self) -> Vec<f64> {
        match self {
            WeightMatrix::Full { k, w } => (0..*k).map(|i| w[i * k..(i + 1) * k].iter().sum()).collect(),
            WeightMatrix::RankOne(v) => {
                let total: f64 = v.iter().sum();
                v.iter().map(|x| x * total).collect()
            }
        }
    }

    /// Samples whose weight row sums to zero; they contribute nothing.
    pub fn zero_rows(&self) -> usize {
        self.row_sums().iter().filter(|&&s| s == 0.0).count()
    }
}

/// Pairwise-weighted REINFORCE
/// `(1/K) Σ_i (Σ_j w_ij) (r_i - Σ_j w_ij r_j / Σ_j w_ij) ∇ log π(y_i | x)`.
/// The rank-one form is evaluated as
/// `(Σ_j w_j) (1/K) Σ_i w_i (r_i - r̄_w) ∇ log π(y_i | x)`.
pub fn pairwise_weighted_grad(
    group: &RolloutGroup,
    policy: &TabularPolicy,
    w: &WeightMatrix,
) -> Result<GradientVector> {
    let steps = group_steps(group, policy)?;
    let k = group.k();
    if w.size() != k {
        return Err(Error::Data(format!(
            "weights sized for {} samples, group has {k}",
            w.size()
        )));
    }
    w.validate()?;
    if w.zero_rows() == k {
        return Err(Error::DegenerateWeights("every weight row sums to zero".into()));
    }
    let r = &group.rewards;
    let kf = k as f64;
    let coefs: Vec<f64> = match w {
        WeightMatrix::Full { w, .. } => (0..k)
            .map(|i| {
                let row = &w[i * k..(i + 1) * k];
                let s: f64 = row.iter().sum();
                if s == 0.0 {
                    return 0.0;
                }
                let local = row.iter().zip(r).map(|(a, b)| a * b).sum::<f64>() / s;
                s * (r[i] - local) / kf
            })
            .collect(),
        WeightMatrix::RankOne(v) => {
            let total: f64 = v.iter().sum();
            let rw = v.iter().zip(r).map(|(a, b)| a * b).sum::<f64>() / total;
            (0..k).map(|i| total * v[i] * (r[i] - rw) / kf).collect()
        }
    };
    Ok(weighted_scores(policy, &steps, &coefs))
}

/// Balanced subset for RED-Drop. Positives have `r_i > r̄`, negatives
/// `r_i < r̄`; ties are always kept. When negatives outnumber positives and
/// there is at least one positive, a uniformly random subset of negatives
/// of the same size as the positives is kept. Indices are returned sorted.
pub fn red_drop_select(rewards: &[f64], rng: &mut RandomStream) -> Result<Vec<usize>> {
    let mean = group_stats(rewards, None)?.mean;
    let positives = rewards.iter().filter(|&&r| r > mean).count();
    let negatives: Vec<usize> = (0..rewards.len()).filter(|&i| rewards[i] < mean).collect();
    if positives == 0 || negatives.len() <= positives {
        return Ok((0..rewards.len()).collect());
    }
    let keep = sample(rng, negatives.len(), positives);
    let mut kept_neg = vec![false; rewards.len()];
    for j in keep.iter() {
        kept_neg[negatives[j]] = true;
    }
    Ok((0..rewards.len())
        .filter(|&i| rewards[i] >= mean || kept_neg[i])
        .collect())
}

/// RED-Drop: `(1/|S|) Σ_{i∈S} (r_i - r̄_S) ∇ log π(y_i | x)`.
pub fn red_drop_grad(group: &RolloutGroup, policy: &TabularPolicy, rng: &mut RandomStream) -> Result<GradientVector> {
    let steps = group_steps(group, policy)?;
    let subset = red_drop_select(&group.rewards, rng)?;
    let n = subset.len() as f64;
    let kept: Vec<f64> = subset.iter().map(|&i| group.rewards[i]).collect();
    let mean_s = group_stats(&kept, None)?.mean;
    let mut coefs = vec![0.0; group.k()];
    for &i in &subset {
        coefs[i] = (group.rewards[i] - mean_s) / n;
    }
    Ok(weighted_scores(policy, &steps, &coefs))
}

/// `w_i = exp(A_i / τ)`.
pub fn red_weight_weights(rewards: &[f64], tau: f64, advantage: AdvantageKind) -> Result<Vec<f64>> {
    let adv = match advantage {
        AdvantageKind::Normalized => grpo_advantages(rewards)?,
        AdvantageKind::Centered => centered_advantages(rewards)?,
    };
    Ok(adv.into_iter().map(|a| (a / tau).exp()).collect())
}

/// RED-Weight: `Σ_i w_i (r_i - r̄) ∇ log π(y_i | x)`, `w_i = exp(A_i/τ)`.
pub fn red_weight_grad(
    group: &RolloutGroup,
    policy: &TabularPolicy,
    tau: f64,
    advantage: AdvantageKind,
) -> Result<GradientVector> {
    let steps = group_steps(group, policy)?;
    let w = red_weight_weights(&group.rewards, tau, advantage)?;
    let centered = centered_advantages(&group.rewards)?;
    let coefs: Vec<f64> = w.iter().zip(&centered).map(|(a, b)| a * b).collect();
    Ok(weighted_scores(policy, &steps, &coefs))
}

fn check_trajectories(group: &RolloutGroup) -> Result<()> {
    let states = group
        .states
        .as_ref()
        .ok_or_else(|| Error::Data("group carries no trajectory states".into()))?;
    if states.len() != group.k() {
        return Err(Error::Data(format!(
            "{} state sequences for {} trajectories",
            states.len(),
            group.k()
        )));
    }
    for (i, (s, a)) in states.iter().zip(&group.responses).enumerate() {
        if s.len() != a.len() + 1 {
            return Err(Error::Data(format!(
                "trajectory {i} has {} actions but {} states",
                a.len(),
                s.len()
            )));
        }
    }
    Ok(())
}

/// Multi-step group-relative REINFORCE
/// `(1/K) Σ_i (r(x, T_i) - r̄(x)) Σ_ℓ ∇ log π(a_i^ℓ | c_i^ℓ)`.
/// Transition probabilities never enter; only the actions are scored.
pub fn multi_step_reinforce_grad(group: &RolloutGroup, policy: &TabularPolicy) -> Result<GradientVector> {
    check_trajectories(group)?;
    reinforce_grad(group, policy, LossNorm::PerGroupK)
}

/// Trajectory-level pairwise surrogate with
/// `a_i = r(x, T_i) - τ (Σ_ℓ log π(a_i^ℓ|c_i^ℓ) - Σ_ℓ log π_anchor(a_i^ℓ|c_i^ℓ))`.
pub fn multi_step_surrogate_loss(
    group: &RolloutGroup,
    policy: &TabularPolicy,
    anchor: &TabularPolicy,
    tau: f64,
) -> Result<f64> {
    check_trajectories(group)?;
    surrogate_loss(group, policy, anchor, tau)
}

/// Output of [`group_update`].
#[derive(Debug, Clone, PartialEq)]
pub struct GroupUpdate {
    pub grad: GradientVector,
    pub masked_tokens: usize,
    pub eligible_tokens: usize,
    pub zero_weight_rows: usize,
}

impl GroupUpdate {
    fn plain(grad: GradientVector) -> Self {
        Self {
            grad,
            masked_tokens: 0,
            eligible_tokens: 0,
            zero_weight_rows: 0,
        }
    }
}

fn behavior_seq_logps(group: &RolloutGroup) -> Result<Vec<f64>> {
    let lps = group
        .behavior_logprobs
        .as_ref()
        .ok_or_else(|| Error::Data("group has no behavior log-probabilities".into()))?;
    Ok(lps
        .iter()
        .map(|l| {
            let mut total = 0.0;
            for x in l {
                total += x;
            }
            total
        })
        .collect())
}

/// Update direction for one group under `cfg`. OPMD anchors at the
/// recorded behavior log-probabilities; `rng` is consumed only by RED-Drop.
pub fn group_update(
    cfg: &AlgorithmConfig,
    group: &RolloutGroup,
    policy: &TabularPolicy,
    rng: &mut RandomStream,
) -> Result<GroupUpdate> {
    match cfg.kind {
        AlgorithmKind::Reinforce => Ok(GroupUpdate::plain(reinforce_grad(group, policy, cfg.loss_norm)?)),
        AlgorithmKind::Grpo
        | AlgorithmKind::RecOneSideIs
        | AlgorithmKind::RecOneSideNoIs
        | AlgorithmKind::RecTwoSideIs
        | AlgorithmKind::RecTwoSideNoIs
        | AlgorithmKind::RecRingNoIs => {
            let m = rec_grad_with_stats(group, policy, cfg)?;
            Ok(GroupUpdate {
                grad: m.grad,
                masked_tokens: m.masked_tokens,
                eligible_tokens: m.eligible_tokens,
                zero_weight_rows: 0,
            })
        }
        AlgorithmKind::Opmd => {
            let steps = group_steps(group, policy)?;
            let old = behavior_seq_logps(group)?;
            Ok(GroupUpdate::plain(opmd_grad_with_old(
                group, policy, &steps, &old, cfg.tau,
            )?))
        }
        AlgorithmKind::AsymRe => Ok(GroupUpdate::plain(asymre_grad(group, policy, cfg.tau)?)),
        AlgorithmKind::PairwiseWeighted => {
            let w = match cfg.pairwise_weights {
                PairwiseWeights::Unit => WeightMatrix::RankOne(vec![1.0; group.k()]),
                PairwiseWeights::InverseBehavior => {
                    WeightMatrix::RankOne(behavior_seq_logps(group)?.into_iter().map(|lp| (-lp).exp()).collect())
                }
            };
            let zero_weight_rows = w.zero_rows();
            Ok(GroupUpdate {
                grad: pairwise_weighted_grad(group, policy, &w)?,
                masked_tokens: 0,
                eligible_tokens: 0,
                zero_weight_rows,
            })
        }
        AlgorithmKind::RedDrop => Ok(GroupUpdate::plain(red_drop_grad(group, policy, rng)?)),
        AlgorithmKind::RedWeight => Ok(GroupUpdate::plain(red_weight_grad(
            group,
            policy,
            cfg.tau,
            cfg.red_weight_advantage,
        )?)),
        AlgorithmKind::MultiStepReinforce => Ok(GroupUpdate::plain(multi_step_reinforce_grad(group, policy)?)),
    }
}
