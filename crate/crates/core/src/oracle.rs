//! Brute-force reference computations: exact expectations by enumeration,
//! closed-form optima and central finite differences.

use rand::distributions::{Distribution, WeightedIndex};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::policy::{GradientVector, Prompt, TabularPolicy, TokenSeq};
use crate::rng::RandomStream;
use crate::tasks::{group_stats, BanditTask, Task};

/// Finite-difference step used throughout the test batteries.
pub const FD_STEP: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Largest [`rel_err`] over matching coordinates.
pub fn max_rel_err(a: &GradientVector, b: &GradientVector) -> Result<f64> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::Dimension("gradient shapes differ".into()));
    }
    Ok(a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| rel_err(*x, *y))
        .fold(0.0, f64::max))
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `Σ_y π(y|x) (r(x,y) - b) ∇ log π(y|x)` by enumeration.
pub fn exact_policy_gradient_with_baseline(
    task: &Task,
    policy: &TabularPolicy,
    prompt: &Prompt,
    baseline: f64,
) -> Result<GradientVector> {
    let shape = policy.shape();
    let mut grad = GradientVector::zeros_like(policy);
    for (resp, reward) in task.enumerate_responses(prompt)? {
        let steps = shape.steps(prompt.id, &resp)?;
        let lp: f64 = policy.step_log_probs(&steps).iter().sum();
        policy.accumulate_score(&mut grad, &steps, lp.exp() * (reward - baseline));
    }
    Ok(grad)
}

/// `∇ E_{y~π}[r(x,y)] = Σ_y π(y|x) r(x,y) ∇ log π(y|x)`.
pub fn exact_policy_gradient(task: &Task, policy: &TabularPolicy, prompt: &Prompt) -> Result<GradientVector> {
    exact_policy_gradient_with_baseline(task, policy, prompt, 0.0)
}

/// Large-`K` limit of the group-relative update on a bandit whose samples
/// come from a fixed behavior distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedDirection {
    /// `μ_r = Σ_j π_b(a_j) r(a_j)`.
    pub mean_reward: f64,
    /// `r(a_j) - μ_r`.
    pub centered: Vec<f64>,
    /// `g_j = π_b(a_j) (r(a_j) - μ_r)`.
    pub direction: Vec<f64>,
}

pub fn expected_group_relative_direction(bandit: &BanditTask, behavior: &[f64]) -> Result<ExpectedDirection> {
    let r = &bandit.arm_rewards;
    if behavior.len() != r.len() {
        return Err(Error::Dimension(format!(
            "behavior has {} entries for {} arms",
            behavior.len(),
            r.len()
        )));
    }
    if behavior.iter().any(|p| !(*p >= 0.0)) || (behavior.iter().sum::<f64>() - 1.0).abs() > 1e-10 {
        return Err(Error::Data("behavior is not a probability vector".into()));
    }
    let mean_reward: f64 = behavior.iter().zip(r).map(|(p, x)| p * x).sum();
    let centered: Vec<f64> = r.iter().map(|x| x - mean_reward).collect();
    let direction = behavior.iter().zip(&centered).map(|(p, c)| p * c).collect();
    Ok(ExpectedDirection {
        mean_reward,
        centered,
        direction,
    })
}

/// Averages the finite-`K` bandit update
/// `(1/K) Σ_i (r_i - r̄) e_{a_i}` over `trials` groups drawn from
/// `behavior` and returns the largest componentwise deviation from the
/// expected direction.
pub fn mc_vs_exact_direction(
    bandit: &BanditTask,
    behavior: &[f64],
    k: usize,
    trials: usize,
    rng: &mut RandomStream,
) -> Result<f64> {
    let expected = expected_group_relative_direction(bandit, behavior)?;
    let dist = WeightedIndex::new(behavior).map_err(|e| Error::Data(e.to_string()))?;
    let v = behavior.len();
    let mut avg = vec![0.0; v];
    let mut arms = vec![0usize; k];
    for _ in 0..trials {
        for a in arms.iter_mut() {
            *a = dist.sample(rng);
        }
        let rewards: Vec<f64> = arms.iter().map(|&a| bandit.arm_rewards[a]).collect();
        let mean = group_stats(&rewards, None)?.mean;
        let mut g = vec![0.0; v];
        for (&a, r) in arms.iter().zip(&rewards) {
            g[a] += r - mean;
        }
        for (x, gi) in avg.iter_mut().zip(g) {
            *x += gi / (k * trials) as f64;
        }
    }
    Ok(avg
        .iter()
        .zip(&expected.direction)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportPoint {
    pub response: TokenSeq,
    pub prob: f64,
    pub log_prob: f64,
    pub reward: f64,
}

/// A fully enumerated response distribution at one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactDistribution {
    pub prompt: Prompt,
    pub support: Vec<SupportPoint>,
    /// `log Z` for tilted distributions, 0 otherwise.
    pub log_partition: f64,
}

impl ExactDistribution {
    /// `π(·|x)` itself.
    pub fn of_policy(task: &Task, policy: &TabularPolicy, prompt: &Prompt) -> Result<Self> {
        let support = task
            .enumerate_responses(prompt)?
            .into_iter()
            .map(|(response, reward)| {
                let log_prob = policy.log_prob_seq(prompt, &response)?;
                Ok(SupportPoint {
                    response,
                    prob: log_prob.exp(),
                    log_prob,
                    reward,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            prompt: prompt.clone(),
            support,
            log_partition: 0.0,
        })
    }

    pub fn total_mass(&self) -> f64 {
        self.support.iter().map(|s| s.prob).sum()
    }

    pub fn expected_reward(&self) -> f64 {
        self.support.iter().map(|s| s.prob * s.reward).sum()
    }

    /// Probability of the responses attaining the maximum reward.
    pub fn best_mass(&self) -> f64 {
        let best = self.support.iter().map(|s| s.reward).fold(f64::NEG_INFINITY, f64::max);
        self.support.iter().filter(|s| s.reward == best).map(|s| s.prob).sum()
    }

    /// Tabular policy whose sequence distribution at this prompt equals
    /// `self`. Each visited context's logits are the log-masses of its
    /// continuations; rows of other prompts are copied from `base`.
    pub fn to_policy(&self, base: &TabularPolicy) -> Result<TabularPolicy> {
        let shape = *base.shape();
        let v = shape.vocab_size;
        let mut masses: Vec<Vec<f64>> = Vec::new();
        let mut index = std::collections::BTreeMap::new();
        for s in &self.support {
            for step in shape.steps(self.prompt.id, &s.response)? {
                if step.forced {
                    continue;
                }
                let slot = *index.entry(step.ctx).or_insert_with(|| {
                    masses.push(vec![f64::NEG_INFINITY; v]);
                    masses.len() - 1
                });
                let m = &mut masses[slot][step.token.0];
                *m = log_sum_exp(&[*m, s.log_prob]);
            }
        }
        let mut logits = base.logits().to_vec();
        for (&ctx, &slot) in &index {
            let row = &masses[slot];
            // Floor unreachable tokens far below the rest of the row.
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            for (j, &m) in row.iter().enumerate() {
                logits[ctx * v + j] = if m.is_finite() { m } else { max - 800.0 };
            }
        }
        Ok(TabularPolicy::from_logits(shape, logits)?.with_version(base.version()))
    }
}

/// `π*(y|x) = π_anchor(y|x) exp(r(x,y)/τ) / Z`, with `Z` by enumeration.
pub fn optimal_kl_regularized_policy(
    task: &Task,
    anchor: &TabularPolicy,
    tau: f64,
    prompt: &Prompt,
) -> Result<ExactDistribution> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("tau must be > 0, got {tau}")));
    }
    let base = ExactDistribution::of_policy(task, anchor, prompt)?;
    let tilted: Vec<f64> = base.support.iter().map(|s| s.log_prob + s.reward / tau).collect();
    let log_z = log_sum_exp(&tilted);
    let support = base
        .support
        .into_iter()
        .zip(tilted)
        .map(|(s, t)| SupportPoint {
            prob: (t - log_z).exp(),
            log_prob: t - log_z,
            ..s
        })
        .collect();
    Ok(ExactDistribution {
        prompt: prompt.clone(),
        support,
        log_partition: log_z,
    })
}

/// Residuals `a(y) = r(x,y) - τ (log π(y|x) - log π_anchor(y|x))` over every
/// enumerable response.
pub fn consistency_residuals(
    task: &Task,
    policy: &TabularPolicy,
    anchor: &TabularPolicy,
    tau: f64,
    prompt: &Prompt,
) -> Result<Vec<f64>> {
    task.enumerate_responses(prompt)?
        .into_iter()
        .map(|(resp, reward)| {
            let lp = policy.log_prob_seq(prompt, &resp)?;
            let la = anchor.log_prob_seq(prompt, &resp)?;
            Ok(reward - tau * (lp - la))
        })
        .collect()
}

/// `max a - min a`.
pub fn spread(values: &[f64]) -> f64 {
    let max = values.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let min = values.iter().fold(f64::INFINITY, |m, &x| m.min(x));
    max - min
}

/// Smallest number of exact tilting iterations after which the best
/// response's mass exceeds `1 - eps`, starting from a distribution whose
/// best mass is `p0`, with reward gap `gap` to the runner-up and step `τ`.
/// After `t` tilts the non-best mass is at most
/// `(1 - p0) e^{-t gap/τ} / p0`.
pub fn tilt_iteration_bound(p0: f64, gap: f64, tau: f64, eps: f64) -> u64 {
    let t = tau / gap * ((1.0 - p0) / (p0 * eps)).ln();
    t.max(0.0).ceil() as u64
}

/// Repeatedly replaces the anchor by the exact optimum of the
/// KL-regularized surrogate. Returns the best-response mass after each
/// iteration (index 0 is the starting policy).
pub fn iterated_tilting(
    task: &Task,
    anchor: &TabularPolicy,
    tau: f64,
    prompt: &Prompt,
    iterations: usize,
) -> Result<Vec<f64>> {
    let mut current = anchor.clone();
    let mut trace = vec![ExactDistribution::of_policy(task, &current, prompt)?.best_mass()];
    for _ in 0..iterations {
        let next = optimal_kl_regularized_policy(task, &current, tau, prompt)?;
        trace.push(next.best_mass());
        current = next.to_policy(&current)?;
    }
    Ok(trace)
}

/// Central differences `(L(θ + h e_i) - L(θ - h e_i)) / 2h` over every logit.
pub fn finite_diff_grad<F>(loss: F, policy: &TabularPolicy, h: f64) -> Result<GradientVector>
where
    F: Fn(&TabularPolicy) -> Result<f64> + Sync,
{
    let n = policy.logits().len();
    let values: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let up = loss(&policy.perturbed(i, h))?;
            let down = loss(&policy.perturbed(i, -h))?;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Numerical(format!("loss not finite around logit {i}")));
            }
            Ok((up - down) / (2.0 * h))
        })
        .collect::<Result<_>>()?;
    GradientVector::from_values(policy.shape().num_contexts(), policy.shape().vocab_size, values)
}

/// [`finite_diff_grad`] restricted to the given coordinates; the others are 0.
pub fn finite_diff_grad_at<F>(loss: F, policy: &TabularPolicy, h: f64, coords: &[usize]) -> Result<GradientVector>
where
    F: Fn(&TabularPolicy) -> Result<f64> + Sync,
{
    let partials: Vec<(usize, f64)> = coords
        .par_iter()
        .map(|&i| {
            let up = loss(&policy.perturbed(i, h))?;
            let down = loss(&policy.perturbed(i, -h))?;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Numerical(format!("loss not finite around logit {i}")));
            }
            Ok((i, (up - down) / (2.0 * h)))
        })
        .collect::<Result<_>>()?;
    let mut g = GradientVector::zeros_like(policy);
    for (i, d) in partials {
        g.values_mut()[i] = d;
    }
    Ok(g)
}
