//! Tabular softmax policies.
//!
//! A policy holds one logit row per context. Contexts are the nodes of a
//! prefix tree: for each prompt, every partial response of length `< L`
//! over the full vocabulary gets a row, indexed by
//! `prompt * C + (V^len - 1)/(V - 1) + digits(partial)` where
//! `C = (V^L - 1)/(V - 1)`. Rows for partial responses containing the
//! end-of-sequence token exist but are never reached.
//!
//! Two termination modes are supported:
//!
//! * `eos = true`: token `V - 1` ends a response. At the last position the
//!   end-of-sequence token is forced (probability one, no dependence on
//!   the logits), so every response has length at most `L`.
//! * `eos = false`: every response has exactly `L` tokens. A bandit is the
//!   special case `L = 1`; a multi-step task uses one action per step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RandomStream;

/// Maximum number of enumerable responses per prompt accepted by the
/// exact-enumeration routines.
pub const MAX_ENUMERABLE_RESPONSES: u128 = 1_000_000;

/// Maximum number of logits in one table.
pub const MAX_TABLE_ENTRIES: usize = 1 << 26;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub usize);

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(pub Vec<Token>);

impl TokenSeq {
    pub fn new() -> Self {
        Self(Vec::new())
    }

    pub fn from_ids(ids: &[usize]) -> Self {
        Self(ids.iter().copied().map(Token).collect())
    }

    pub fn ids(&self) -> Vec<usize> {
        self.0.iter().map(|t| t.0).collect()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn push(&mut self, tok: Token) {
        self.0.push(tok);
    }

    pub fn last(&self) -> Option<Token> {
        self.0.last().copied()
    }
}

impl From<Vec<usize>> for TokenSeq {
    fn from(ids: Vec<usize>) -> Self {
        Self(ids.into_iter().map(Token).collect())
    }
}

/// A prompt `x`. The policy conditions on `id`; `tokens` is carried for
/// reporting and reward rules.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub id: usize,
    pub tokens: TokenSeq,
}

impl Prompt {
    pub fn new(id: usize, tokens: TokenSeq) -> Self {
        Self { id, tokens }
    }
}

/// Conditioning `(x, y^{<t})` of a single token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Context {
    pub prompt_id: usize,
    pub partial_response: TokenSeq,
}

impl Context {
    pub fn root(prompt_id: usize) -> Self {
        Self {
            prompt_id,
            partial_response: TokenSeq::new(),
        }
    }

    pub fn new(prompt_id: usize, partial_response: TokenSeq) -> Self {
        Self {
            prompt_id,
            partial_response,
        }
    }
}

/// Dimensions of a tabular policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub vocab_size: usize,
    pub max_len: usize,
    pub num_prompts: usize,
    pub eos: bool,
}

/// One sampled or scored token together with the row it was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenStep {
    pub ctx: usize,
    pub token: Token,
    /// End-of-sequence forced at the last position; carries no gradient.
    pub forced: bool,
}

impl PolicyShape {
    pub fn new(vocab_size: usize, max_len: usize, num_prompts: usize, eos: bool) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::Dimension(format!(
                "vocab_size must be at least 2, got {vocab_size}"
            )));
        }
        if max_len < 1 {
            return Err(Error::Dimension("max_len must be at least 1".into()));
        }
        if num_prompts < 1 {
            return Err(Error::Dimension("num_prompts must be at least 1".into()));
        }
        let shape = Self {
            vocab_size,
            max_len,
            num_prompts,
            eos,
        };
        let per_prompt = shape
            .checked_contexts_per_prompt()
            .ok_or_else(|| Error::Dimension("context table too large".into()))?;
        let entries = per_prompt
            .checked_mul(num_prompts)
            .and_then(|c| c.checked_mul(vocab_size));
        match entries {
            Some(n) if n <= MAX_TABLE_ENTRIES => Ok(shape),
            _ => Err(Error::Dimension(format!(
                "logit table for V={vocab_size}, L={max_len}, P={num_prompts} exceeds {MAX_TABLE_ENTRIES} entries"
            ))),
        }
    }

    /// Single-context policy with `arms` actions and length-1 responses.
    pub fn bandit(arms: usize) -> Result<Self> {
        Self::new(arms, 1, 1, false)
    }

    pub fn eos_token(&self) -> Option<Token> {
        self.eos.then_some(Token(self.vocab_size - 1))
    }

    fn checked_contexts_per_prompt(&self) -> Option<usize> {
        let mut total: usize = 0;
        let mut level: usize = 1;
        for _ in 0..self.max_len {
            total = total.checked_add(level)?;
            level = level.checked_mul(self.vocab_size)?;
        }
        Some(total)
    }

    pub fn contexts_per_prompt(&self) -> usize {
        self.checked_contexts_per_prompt().expect("validated at construction")
    }

    pub fn num_contexts(&self) -> usize {
        self.contexts_per_prompt() * self.num_prompts
    }

    fn level_offset(&self, len: usize) -> usize {
        let mut total = 0;
        let mut level = 1;
        for _ in 0..len {
            total += level;
            level *= self.vocab_size;
        }
        total
    }

    pub fn context_index(&self, prompt_id: usize, partial: &[Token]) -> Result<usize> {
        if prompt_id >= self.num_prompts {
            return Err(Error::Dimension(format!(
                "prompt id {prompt_id} out of range [0, {})",
                self.num_prompts
            )));
        }
        if partial.len() >= self.max_len {
            return Err(Error::Dimension(format!(
                "partial response length {} must be < max_len {}",
                partial.len(),
                self.max_len
            )));
        }
        let mut digits = 0;
        for tok in partial {
            self.check_token(*tok)?;
            digits = digits * self.vocab_size + tok.0;
        }
        Ok(prompt_id * self.contexts_per_prompt() + self.level_offset(partial.len()) + digits)
    }

    pub fn check_token(&self, tok: Token) -> Result<()> {
        if tok.0 >= self.vocab_size {
            return Err(Error::Dimension(format!(
                "token {} out of range [0, {})",
                tok.0, self.vocab_size
            )));
        }
        Ok(())
    }

    /// Whether the token at `position` is forced to end-of-sequence.
    pub fn is_forced(&self, position: usize) -> bool {
        self.eos && position + 1 == self.max_len
    }

    /// Number of distinct complete responses per prompt (saturating).
    pub fn responses_per_prompt(&self) -> u128 {
        let v = self.vocab_size as u128;
        if self.eos {
            // Σ_{k<L} (V-1)^k: k content tokens then EOS.
            let mut total: u128 = 0;
            let mut level: u128 = 1;
            for _ in 0..self.max_len {
                total = total.saturating_add(level);
                level = level.saturating_mul(v - 1);
            }
            total
        } else {
            let mut total: u128 = 1;
            for _ in 0..self.max_len {
                total = total.saturating_mul(v);
            }
            total
        }
    }

    pub fn check_capacity(&self) -> Result<()> {
        let count = self.responses_per_prompt();
        if count > MAX_ENUMERABLE_RESPONSES {
            return Err(Error::Capacity {
                count,
                limit: MAX_ENUMERABLE_RESPONSES,
            });
        }
        Ok(())
    }

    /// All complete responses for one prompt, in lexicographic order.
    pub fn enumerate_responses(&self) -> Result<Vec<TokenSeq>> {
        self.check_capacity()?;
        let mut out = Vec::with_capacity(self.responses_per_prompt() as usize);
        let mut prefix = Vec::with_capacity(self.max_len);
        self.enumerate_into(&mut prefix, &mut out);
        Ok(out)
    }

    fn enumerate_into(&self, prefix: &mut Vec<Token>, out: &mut Vec<TokenSeq>) {
        let pos = prefix.len();
        if !self.eos && pos == self.max_len {
            out.push(TokenSeq(prefix.clone()));
            return;
        }
        if self.is_forced(pos) {
            prefix.push(Token(self.vocab_size - 1));
            out.push(TokenSeq(prefix.clone()));
            prefix.pop();
            return;
        }
        for id in 0..self.vocab_size {
            prefix.push(Token(id));
            if self.eos && id == self.vocab_size - 1 {
                out.push(TokenSeq(prefix.clone()));
            } else {
                self.enumerate_into(prefix, out);
            }
            prefix.pop();
        }
    }

    /// Checks token ranges, length, and end-of-sequence placement. Partial
    /// responses are accepted.
    pub fn validate_response(&self, response: &TokenSeq) -> Result<()> {
        let n = response.len();
        if n == 0 {
            return Err(Error::Dimension("response must contain at least one token".into()));
        }
        if n > self.max_len {
            return Err(Error::Dimension(format!(
                "response length {n} exceeds max_len {}",
                self.max_len
            )));
        }
        for (t, tok) in response.tokens().iter().enumerate() {
            self.check_token(*tok)?;
            if let Some(eos) = self.eos_token() {
                if *tok == eos && t + 1 != n {
                    return Err(Error::Dimension(format!(
                        "end-of-sequence token at position {t} is not final"
                    )));
                }
                if self.is_forced(t) && *tok != eos {
                    return Err(Error::Dimension(format!(
                        "position {t} must be end-of-sequence at max_len {}",
                        self.max_len
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn is_complete(&self, response: &TokenSeq) -> bool {
        match self.eos_token() {
            Some(eos) => response.last() == Some(eos),
            None => response.len() == self.max_len,
        }
    }

    /// Contexts visited by `response`, left to right.
    pub fn steps(&self, prompt_id: usize, response: &TokenSeq) -> Result<Vec<TokenStep>> {
        if prompt_id >= self.num_prompts {
            return Err(Error::Dimension(format!(
                "prompt id {prompt_id} out of range [0, {})",
                self.num_prompts
            )));
        }
        self.validate_response(response)?;
        let base = prompt_id * self.contexts_per_prompt();
        let mut level_offset = 0;
        let mut level = 1;
        let mut digits = 0;
        let mut steps = Vec::with_capacity(response.len());
        for (t, tok) in response.tokens().iter().enumerate() {
            steps.push(TokenStep {
                ctx: base + level_offset + digits,
                token: *tok,
                forced: self.is_forced(t),
            });
            level_offset += level;
            level *= self.vocab_size;
            digits = digits * self.vocab_size + tok.0;
        }
        Ok(steps)
    }
}

/// Dense parameter-shaped accumulator, one row per context.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl GradientVector {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn zeros_like(policy: &TabularPolicy) -> Self {
        Self::zeros(policy.shape.num_contexts(), policy.shape.vocab_size)
    }

    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "expected {} values for a {rows}x{cols} gradient, got {}",
                rows * cols,
                values.len()
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.cols..(i + 1) * self.cols]
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "gradient shapes differ: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.scale(factor);
        out
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Largest coordinate-wise relative error, with denominators
    /// `max(|a|, |b|, floor)`.
    pub fn max_rel_diff(&self, other: &Self, floor: f64) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs() / a.abs().max(b.abs()).max(floor))))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Softmax logit table over `(context, token)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    shape: PolicyShape,
    logits: Vec<f64>,
    version: u64,
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let log_total = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|&x| (x - max) - log_total).collect()
}

impl TabularPolicy {
    pub fn zeros(shape: PolicyShape) -> Self {
        Self {
            shape,
            logits: vec![0.0; shape.num_contexts() * shape.vocab_size],
            version: 0,
        }
    }

    pub fn from_logits(shape: PolicyShape, logits: Vec<f64>) -> Result<Self> {
        let expected = shape.num_contexts() * shape.vocab_size;
        if logits.len() != expected {
            return Err(Error::Dimension(format!(
                "expected {expected} logits, got {}",
                logits.len()
            )));
        }
        if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("logit {i} is not finite")));
        }
        Ok(Self {
            shape,
            logits,
            version: 0,
        })
    }

    /// Logits drawn uniformly from `[-scale, scale]`.
    pub fn random(shape: PolicyShape, scale: f64, rng: &mut RandomStream) -> Self {
        let n = shape.num_contexts() * shape.vocab_size;
        let logits = (0..n).map(|_| scale * (2.0 * rng.uniform() - 1.0)).collect();
        Self {
            shape,
            logits,
            version: 0,
        }
    }

    /// Sets every prompt's root row to `ln probs`, leaving other rows alone.
    pub fn with_root_probs(mut self, probs: &[f64]) -> Result<Self> {
        if probs.len() != self.shape.vocab_size {
            return Err(Error::Dimension(format!(
                "expected {} root probabilities, got {}",
                self.shape.vocab_size,
                probs.len()
            )));
        }
        if probs.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
            return Err(Error::Numerical(
                "root probabilities must be positive and finite".into(),
            ));
        }
        for prompt in 0..self.shape.num_prompts {
            let ctx = self.shape.context_index(prompt, &[])?;
            let v = self.shape.vocab_size;
            for (dst, p) in self.logits[ctx * v..(ctx + 1) * v].iter_mut().zip(probs) {
                *dst = p.ln();
            }
        }
        Ok(self)
    }

    pub fn with_version(mut self, version: u64) -> Self {
        self.version = version;
        self
    }

    pub fn shape(&self) -> &PolicyShape {
        &self.shape
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn row(&self, ctx: usize) -> &[f64] {
        let v = self.shape.vocab_size;
        &self.logits[ctx * v..(ctx + 1) * v]
    }

    pub fn log_probs_row(&self, ctx: usize) -> Vec<f64> {
        log_softmax(self.row(ctx))
    }

    pub fn probs_row(&self, ctx: usize) -> Vec<f64> {
        self.log_probs_row(ctx).into_iter().map(f64::exp).collect()
    }

    pub fn log_prob_token(&self, ctx: &Context, tok: Token) -> Result<f64> {
        let idx = self.shape.context_index(ctx.prompt_id, ctx.partial_response.tokens())?;
        self.shape.check_token(tok)?;
        Ok(self.log_probs_row(idx)[tok.0])
    }

    /// Per-token log-probabilities of `response`; forced tokens contribute 0.
    pub fn token_log_probs(&self, prompt: &Prompt, response: &TokenSeq) -> Result<Vec<f64>> {
        let steps = self.shape.steps(prompt.id, response)?;
        Ok(self.step_log_probs(&steps))
    }

    pub fn step_log_probs(&self, steps: &[TokenStep]) -> Vec<f64> {
        steps
            .iter()
            .map(|s| {
                if s.forced {
                    0.0
                } else {
                    self.log_probs_row(s.ctx)[s.token.0]
                }
            })
            .collect()
    }

    pub fn log_prob_seq(&self, prompt: &Prompt, response: &TokenSeq) -> Result<f64> {
        let mut total = 0.0;
        for lp in self.token_log_probs(prompt, response)? {
            total += lp;
        }
        Ok(total)
    }

    /// Ancestral sampling until end-of-sequence or `max_len`. Returns the
    /// response and the sampling policy's per-token log-probabilities.
    pub fn sample_response(&self, prompt: &Prompt, rng: &mut RandomStream) -> Result<(TokenSeq, Vec<f64>)> {
        let shape = &self.shape;
        let mut partial: Vec<Token> = Vec::with_capacity(shape.max_len);
        let mut logps = Vec::with_capacity(shape.max_len);
        let base = shape.context_index(prompt.id, &[])?;
        let mut level_offset = 0;
        let mut level = 1;
        let mut digits = 0;
        for pos in 0..shape.max_len {
            let ctx = base + level_offset + digits;
            if shape.is_forced(pos) {
                partial.push(Token(shape.vocab_size - 1));
                logps.push(0.0);
                break;
            }
            let row = self.log_probs_row(ctx);
            let u = rng.uniform();
            let mut cum = 0.0;
            let mut choice = None;
            for (j, lp) in row.iter().enumerate() {
                let p = lp.exp();
                if p > 0.0 {
                    choice = Some(j);
                }
                cum += p;
                if u < cum && p > 0.0 {
                    break;
                }
            }
            let j = choice.expect("softmax row has positive mass");
            partial.push(Token(j));
            logps.push(row[j]);
            if shape.eos && j == shape.vocab_size - 1 {
                break;
            }
            level_offset += level;
            level *= shape.vocab_size;
            digits = digits * shape.vocab_size + j;
        }
        Ok((TokenSeq(partial), logps))
    }

    /// Adds `coef * (e_tok - softmax(row))` into each visited row.
    pub fn accumulate_score(&self, grad: &mut GradientVector, steps: &[TokenStep], coef: f64) {
        for s in steps.iter().filter(|s| !s.forced) {
            let probs = self.probs_row(s.ctx);
            let row = grad.row_mut(s.ctx);
            for (j, (g, p)) in row.iter_mut().zip(&probs).enumerate() {
                let indicator = if j == s.token.0 { 1.0 } else { 0.0 };
                *g += coef * (indicator - p);
            }
        }
    }

    /// Score function `∇_θ log π(response | prompt)`.
    pub fn grad_log_prob(&self, prompt: &Prompt, response: &TokenSeq) -> Result<GradientVector> {
        let steps = self.shape.steps(prompt.id, response)?;
        let mut grad = GradientVector::zeros_like(self);
        self.accumulate_score(&mut grad, &steps, 1.0);
        Ok(grad)
    }

    /// Shannon entropy (nats) of the next-token distribution at `ctx`.
    pub fn entropy(&self, ctx: &Context) -> Result<f64> {
        let idx = self.shape.context_index(ctx.prompt_id, ctx.partial_response.tokens())?;
        let h: f64 = self
            .log_probs_row(idx)
            .iter()
            .filter(|lp| lp.exp() > 0.0)
            .map(|&lp| -lp.exp() * lp)
            .sum();
        Ok(h.max(0.0))
    }

    /// Sequence-level `KL(self || other)` at `prompt`, by full enumeration.
    pub fn kl_exact(&self, other: &TabularPolicy, prompt: &Prompt) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Dimension("KL between policies of different shapes".into()));
        }
        let mut kl = 0.0;
        for response in self.shape.enumerate_responses()? {
            let steps = self.shape.steps(prompt.id, &response)?;
            let lp: f64 = self.step_log_probs(&steps).iter().sum();
            let lq: f64 = other.step_log_probs(&steps).iter().sum();
            if lp.exp() > 0.0 {
                kl += lp.exp() * (lp - lq);
            }
        }
        Ok(kl)
    }

    /// `θ' = θ + η g` as a new snapshot with the version incremented.
    pub fn apply_update(&self, g: &GradientVector, eta: f64) -> Result<TabularPolicy> {
        if g.rows() != self.shape.num_contexts() || g.cols() != self.shape.vocab_size {
            return Err(Error::Dimension(format!(
                "gradient {}x{} does not match policy {}x{}",
                g.rows(),
                g.cols(),
                self.shape.num_contexts(),
                self.shape.vocab_size
            )));
        }
        if !eta.is_finite() {
            return Err(Error::Numerical(format!("learning rate {eta} is not finite")));
        }
        let logits: Vec<f64> = self.logits.iter().zip(g.values()).map(|(t, d)| t + eta * d).collect();
        if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("logit {i} became non-finite after update")));
        }
        Ok(Self {
            shape: self.shape,
            logits,
            version: self.version + 1,
        })
    }

    /// Copy with one logit shifted; used by finite differences.
    pub fn perturbed(&self, index: usize, delta: f64) -> TabularPolicy {
        let mut out = self.clone();
        out.logits[index] += delta;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq_shape(v: usize, l: usize) -> PolicyShape {
        PolicyShape::new(v, l, 1, true).unwrap()
    }

    fn p0() -> Prompt {
        Prompt::new(0, TokenSeq::new())
    }

    #[test]
    fn uniform_log_prob_token() {
        let pol = TabularPolicy::zeros(seq_shape(4, 3));
        for t in 0..4 {
            let lp = pol.log_prob_token(&Context::root(0), Token(t)).unwrap();
            assert!((lp - (0.25f64).ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn log_prob_token_known_row() {
        let shape = PolicyShape::bandit(3).unwrap();
        let pol = TabularPolicy::from_logits(shape, vec![1.0, 0.0, 0.0]).unwrap();
        let lp = pol.log_prob_token(&Context::root(0), Token(0)).unwrap();
        let expected = (std::f64::consts::E / (std::f64::consts::E + 2.0)).ln();
        assert!((lp - expected).abs() < 1e-15);
        assert!((lp - (-0.55144)).abs() < 1e-5);
    }

    #[test]
    fn saturated_row_log_prob() {
        let shape = PolicyShape::bandit(3).unwrap();
        let pol = TabularPolicy::from_logits(shape, vec![0.0, 0.0, 50.0]).unwrap();
        let lp = pol.log_prob_token(&Context::root(0), Token(2)).unwrap();
        assert!(lp.abs() < 1e-9);
    }

    #[test]
    fn out_of_range_token_and_context() {
        let pol = TabularPolicy::zeros(seq_shape(3, 2));
        assert!(matches!(
            pol.log_prob_token(&Context::root(0), Token(3)),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            pol.log_prob_token(&Context::root(1), Token(0)),
            Err(Error::Dimension(_))
        ));
        let long = Context::new(0, TokenSeq::from_ids(&[0, 0]));
        assert!(matches!(pol.log_prob_token(&long, Token(0)), Err(Error::Dimension(_))));
    }

    #[test]
    fn uniform_seq_log_prob() {
        let pol = TabularPolicy::zeros(PolicyShape::new(4, 3, 1, false).unwrap());
        let lp = pol.log_prob_seq(&p0(), &TokenSeq::from_ids(&[0, 2, 3])).unwrap();
        assert!((lp - 3.0 * (0.25f64).ln()).abs() < 1e-14);
    }

    #[test]
    fn single_token_seq_matches_token() {
        let mut rng = RandomStream::from_seed(3);
        let pol = TabularPolicy::random(seq_shape(4, 3), 1.0, &mut rng);
        let a = pol.log_prob_seq(&p0(), &TokenSeq::from_ids(&[3])).unwrap();
        let b = pol.log_prob_token(&Context::root(0), Token(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn response_exceeding_max_len_rejected() {
        let pol = TabularPolicy::zeros(PolicyShape::new(3, 2, 1, false).unwrap());
        assert!(matches!(
            pol.log_prob_seq(&p0(), &TokenSeq::from_ids(&[0, 1, 2])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn eos_must_be_final_and_forced() {
        let shape = seq_shape(3, 3);
        assert!(shape.validate_response(&TokenSeq::from_ids(&[2, 0])).is_err());
        assert!(shape.validate_response(&TokenSeq::from_ids(&[0, 1, 0])).is_err());
        assert!(shape.validate_response(&TokenSeq::from_ids(&[0, 1, 2])).is_ok());
        assert!(shape.validate_response(&TokenSeq::from_ids(&[0, 1])).is_ok());
    }

    #[test]
    fn context_indices_are_a_bijection() {
        let shape = PolicyShape::new(3, 3, 2, true).unwrap();
        assert_eq!(shape.contexts_per_prompt(), 1 + 3 + 9);
        let mut seen = vec![false; shape.num_contexts()];
        for p in 0..2 {
            let mut stack: Vec<Vec<Token>> = vec![vec![]];
            while let Some(prefix) = stack.pop() {
                let idx = shape.context_index(p, &prefix).unwrap();
                assert!(!seen[idx], "duplicate index {idx}");
                seen[idx] = true;
                if prefix.len() + 1 < shape.max_len {
                    for t in 0..3 {
                        let mut next = prefix.clone();
                        next.push(Token(t));
                        stack.push(next);
                    }
                }
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn steps_match_context_index() {
        let shape = PolicyShape::new(4, 4, 3, true).unwrap();
        let resp = TokenSeq::from_ids(&[1, 0, 2, 3]);
        let steps = shape.steps(2, &resp).unwrap();
        for (t, s) in steps.iter().enumerate() {
            assert_eq!(s.ctx, shape.context_index(2, &resp.tokens()[..t]).unwrap());
        }
        assert!(steps[3].forced);
        assert!(!steps[2].forced);
    }

    #[test]
    fn forced_eos_termination() {
        let shape = PolicyShape::new(3, 2, 1, true).unwrap();
        // Probability one on EOS at the root.
        let pol = TabularPolicy::zeros(shape)
            .with_root_probs(&[1e-300, 1e-300, 1.0])
            .unwrap();
        let mut rng = RandomStream::from_seed(1);
        for _ in 0..20 {
            let (resp, _) = pol.sample_response(&p0(), &mut rng).unwrap();
            assert_eq!(resp.ids(), vec![2]);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let mut init = RandomStream::from_seed(9);
        let pol = TabularPolicy::random(seq_shape(4, 4), 1.5, &mut init);
        let mut a = RandomStream::from_seed(11);
        let mut b = RandomStream::from_seed(11);
        for _ in 0..50 {
            assert_eq!(
                pol.sample_response(&p0(), &mut a).unwrap(),
                pol.sample_response(&p0(), &mut b).unwrap()
            );
        }
    }

    #[test]
    fn sampled_log_probs_match_policy() {
        let mut init = RandomStream::from_seed(5);
        let pol = TabularPolicy::random(seq_shape(4, 4), 2.0, &mut init);
        let mut rng = RandomStream::from_seed(6);
        for _ in 0..100 {
            let (resp, lps) = pol.sample_response(&p0(), &mut rng).unwrap();
            assert!(pol.shape().is_complete(&resp));
            assert_eq!(lps, pol.token_log_probs(&p0(), &resp).unwrap());
        }
    }

    #[test]
    fn uniform_first_token_frequencies() {
        let pol = TabularPolicy::zeros(seq_shape(4, 3));
        let mut rng = RandomStream::from_seed(2024);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let (resp, _) = pol.sample_response(&p0(), &mut rng).unwrap();
            counts[resp.tokens()[0].0] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn bandit_gradient_row() {
        let pol = TabularPolicy::zeros(PolicyShape::bandit(3).unwrap());
        let g = pol.grad_log_prob(&p0(), &TokenSeq::from_ids(&[1])).unwrap();
        let expected = [-1.0 / 3.0, 2.0 / 3.0, -1.0 / 3.0];
        for (a, b) in g.row(0).iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn gradient_touches_each_row_once() {
        let mut init = RandomStream::from_seed(1);
        let pol = TabularPolicy::random(PolicyShape::new(3, 4, 1, false).unwrap(), 1.0, &mut init);
        let resp = TokenSeq::from_ids(&[0, 0, 0, 0]);
        let steps = pol.shape().steps(0, &resp).unwrap();
        let mut ctxs: Vec<usize> = steps.iter().map(|s| s.ctx).collect();
        ctxs.sort_unstable();
        ctxs.dedup();
        assert_eq!(ctxs.len(), steps.len());
        let g = pol.grad_log_prob(&p0(), &resp).unwrap();
        let touched = (0..g.rows()).filter(|&r| g.row(r).iter().any(|&v| v != 0.0)).count();
        assert_eq!(touched, 4);
    }

    #[test]
    fn entropy_limits() {
        let pol = TabularPolicy::zeros(seq_shape(4, 2));
        let h = pol.entropy(&Context::root(0)).unwrap();
        assert!((h - 4f64.ln()).abs() < 1e-15);
        let sat = TabularPolicy::from_logits(PolicyShape::bandit(3).unwrap(), vec![0.0, 50.0, 0.0]).unwrap();
        assert!(sat.entropy(&Context::root(0)).unwrap() < 1e-9);
    }

    #[test]
    fn zero_mass_tokens_contribute_nothing() {
        let pol = TabularPolicy::from_logits(PolicyShape::bandit(3).unwrap(), vec![1e308, -1e308, 0.0]).unwrap();
        assert_eq!(pol.entropy(&Context::root(0)).unwrap(), 0.0);
        let prompt = Prompt::new(0, TokenSeq::new());
        assert_eq!(pol.kl_exact(&pol, &prompt).unwrap(), 0.0);
    }

    #[test]
    fn entropy_two_ways() {
        let pol = TabularPolicy::from_logits(PolicyShape::bandit(3).unwrap(), vec![1.0, 0.0, 0.0]).unwrap();
        let h = pol.entropy(&Context::root(0)).unwrap();
        // H = lse(θ) - Σ p θ
        let e = std::f64::consts::E;
        let z = e + 2.0;
        let direct = -((e / z) * (e / z).ln() + 2.0 * (1.0 / z) * (1.0 / z).ln());
        let via_lse = z.ln() - (e / z) * 1.0;
        assert!((h - direct).abs() < 1e-12);
        assert!((h - via_lse).abs() < 1e-12);
    }

    #[test]
    fn kl_closed_form_bandit() {
        let shape = PolicyShape::bandit(2).unwrap();
        let p = TabularPolicy::zeros(shape).with_root_probs(&[0.5, 0.5]).unwrap();
        let q = TabularPolicy::zeros(shape).with_root_probs(&[0.9, 0.1]).unwrap();
        let kl = p.kl_exact(&q, &p0()).unwrap();
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((kl - expected).abs() < 1e-14);
        assert!((kl - 0.5108).abs() < 1e-4);
    }

    #[test]
    fn kl_self_is_zero() {
        let mut rng = RandomStream::from_seed(4);
        let p = TabularPolicy::random(seq_shape(4, 4), 2.0, &mut rng);
        assert_eq!(p.kl_exact(&p, &p0()).unwrap(), 0.0);
    }

    #[test]
    fn kl_capacity_guard() {
        let shape = PolicyShape::new(11, 7, 1, false).unwrap();
        let p = TabularPolicy::zeros(shape);
        assert!(matches!(p.kl_exact(&p, &p0()), Err(Error::Capacity { .. })));
    }

    #[test]
    fn apply_update_basics() {
        let mut rng = RandomStream::from_seed(8);
        let p = TabularPolicy::random(seq_shape(3, 3), 1.0, &mut rng);
        let zero = GradientVector::zeros_like(&p);
        let q = p.apply_update(&zero, 0.7).unwrap();
        assert_eq!(q.logits(), p.logits());
        assert_eq!(q.version(), p.version() + 1);

        let mut g = GradientVector::zeros_like(&p);
        for (i, v) in g.values_mut().iter_mut().enumerate() {
            *v = (i as f64).sin();
        }
        let r = p.apply_update(&g, 0.0).unwrap();
        assert_eq!(r.logits(), p.logits());
        let back = p
            .apply_update(&g, 0.3)
            .unwrap()
            .apply_update(&g.scaled(-1.0), 0.3)
            .unwrap();
        for (a, b) in back.logits().iter().zip(p.logits()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn apply_update_rejects_non_finite() {
        let p = TabularPolicy::zeros(PolicyShape::bandit(2).unwrap());
        let g = GradientVector::from_values(1, 2, vec![f64::MAX, 0.0]).unwrap();
        assert!(matches!(p.apply_update(&g, 10.0), Err(Error::Numerical(_))));
        let wrong = GradientVector::zeros(2, 2);
        assert!(matches!(p.apply_update(&wrong, 1.0), Err(Error::Dimension(_))));
    }

    #[test]
    fn enumeration_counts() {
        assert_eq!(PolicyShape::bandit(3).unwrap().enumerate_responses().unwrap().len(), 3);
        let two = seq_shape(2, 3).enumerate_responses().unwrap();
        let ids: Vec<Vec<usize>> = two.iter().map(|r| r.ids()).collect();
        assert_eq!(ids, vec![vec![0, 0, 1], vec![0, 1], vec![1]]);
    }

    fn arb_policy() -> impl Strategy<Value = (usize, usize, bool, u64)> {
        (2usize..5, 1usize..5, any::<bool>(), any::<u64>())
    }

    proptest! {
        #[test]
        fn rows_normalize_and_scores_sum_to_zero((v, l, eos, seed) in arb_policy()) {
            let shape = PolicyShape::new(v, l, 1, eos).unwrap();
            let mut rng = RandomStream::from_seed(seed);
            let pol = TabularPolicy::random(shape, 3.0, &mut rng);
            for ctx in 0..shape.num_contexts() {
                let s: f64 = pol.probs_row(ctx).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
            let (resp, _) = pol.sample_response(&p0(), &mut rng).unwrap();
            let g = pol.grad_log_prob(&p0(), &resp).unwrap();
            for r in 0..g.rows() {
                let s: f64 = g.row(r).iter().sum();
                prop_assert!(s.abs() < 1e-12);
            }
        }

        #[test]
        fn seq_log_prob_is_token_sum((v, l, eos, seed) in arb_policy()) {
            let shape = PolicyShape::new(v, l, 1, eos).unwrap();
            let mut rng = RandomStream::from_seed(seed);
            let pol = TabularPolicy::random(shape, 2.0, &mut rng);
            let (resp, _) = pol.sample_response(&p0(), &mut rng).unwrap();
            let mut acc = 0.0;
            for t in 0..resp.len() {
                if shape.is_forced(t) {
                    continue;
                }
                let ctx = Context::new(0, TokenSeq(resp.tokens()[..t].to_vec()));
                acc += pol.log_prob_token(&ctx, resp.tokens()[t]).unwrap();
            }
            prop_assert_eq!(pol.log_prob_seq(&p0(), &resp).unwrap(), acc);
        }

        #[test]
        fn kl_non_negative(seed in any::<u64>()) {
            let shape = PolicyShape::new(3, 3, 1, true).unwrap();
            let mut rng = RandomStream::from_seed(seed);
            let p = TabularPolicy::random(shape, 2.0, &mut rng);
            let q = TabularPolicy::random(shape, 2.0, &mut rng);
            prop_assert!(p.kl_exact(&q, &p0()).unwrap() >= -1e-12);
        }

        #[test]
        fn enumeration_is_a_partition((v, l, eos, seed) in arb_policy()) {
            let shape = PolicyShape::new(v, l, 1, eos).unwrap();
            let mut rng = RandomStream::from_seed(seed);
            let pol = TabularPolicy::random(shape, 2.0, &mut rng);
            let all = shape.enumerate_responses().unwrap();
            prop_assert_eq!(all.len() as u128, shape.responses_per_prompt());
            let total: f64 = all.iter().map(|r| pol.log_prob_seq(&p0(), r).unwrap().exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-10);
        }
    }
}
