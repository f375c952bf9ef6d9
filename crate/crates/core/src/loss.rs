//! Weighted prompt/response language-modelling objective.
//!
//! For a batch of examples with per-token log-probabilities split into a
//! prompt part `P_i` and a response part `R_i`:
//!
//! ```text
//! loss = -Σ_i (λp·Σ log p(P_i) + λr·Σ log p(R_i))
//!        / Σ_i (1[λp≠0]·|P_i| + 1[λr≠0]·|R_i|)
//! ```
//!
//! Both sums run over the whole batch. `(0, 1)` is response-only
//! instruction tuning; `(1, 1)` is plain next-token prediction.

use serde::{Deserialize, Serialize};

use crate::data::{WeightConfig, WeightMask};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedLossOutput {
    pub loss: f64,
    /// Weighted log-probability sum before negation.
    pub weighted_logprob_sum: f64,
    pub norm_count: usize,
    /// `(Σ prompt log-probs, Σ response log-probs)` per example.
    pub per_example: Vec<(f64, f64)>,
}

fn check_alignment(batch_logprobs: &[Vec<f64>], masks: &[WeightMask]) -> Result<()> {
    if batch_logprobs.len() != masks.len() {
        return Err(Error::Shape(format!(
            "{} log-prob sequences for {} masks",
            batch_logprobs.len(),
            masks.len()
        )));
    }
    if masks.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    for (i, (lp, m)) in batch_logprobs.iter().zip(masks).enumerate() {
        if lp.len() != m.weights.len() {
            return Err(Error::Shape(format!(
                "example {i}: {} log-probs for a mask of length {}",
                lp.len(),
                m.weights.len()
            )));
        }
    }
    Ok(())
}

pub fn wit_loss(
    batch_logprobs: &[Vec<f64>],
    masks: &[WeightMask],
    cfg: &WeightConfig,
) -> Result<WeightedLossOutput> {
    check_alignment(batch_logprobs, masks)?;
    let mut numerator = 0.0;
    let mut norm_count = 0;
    let mut per_example = Vec::with_capacity(masks.len());
    for (i, (lp, m)) in batch_logprobs.iter().zip(masks).enumerate() {
        let p = m.prompt_len;
        let r = m.response_len();
        let expected = cfg.norm_count(p, r);
        if m.norm_count != expected {
            return Err(Error::Config(format!(
                "example {i}: mask was not built for weights ({}, {})",
                cfg.lambda_p(),
                cfg.lambda_r()
            )));
        }
        let prompt_sum: f64 = lp[..p].iter().sum();
        let response_sum: f64 = lp[p..].iter().sum();
        numerator += cfg.lambda_p() * prompt_sum + cfg.lambda_r() * response_sum;
        norm_count += expected;
        per_example.push((prompt_sum, response_sum));
    }
    if norm_count == 0 {
        return Err(Error::Config("no token carries a nonzero weight".into()));
    }
    Ok(WeightedLossOutput {
        loss: -numerator / norm_count as f64,
        weighted_logprob_sum: numerator,
        norm_count,
        per_example,
    })
}

/// Response-only mean negative log-likelihood. Deliberately shares no code
/// with [`wit_loss`] so each can check the other.
pub fn conventional_it_loss(batch_logprobs: &[Vec<f64>], masks: &[WeightMask]) -> Result<f64> {
    check_alignment(batch_logprobs, masks)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (lp, m) in batch_logprobs.iter().zip(masks) {
        for &v in &lp[m.prompt_len..] {
            total += v;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Invalid("batch has no response tokens".into()));
    }
    Ok(-total / count as f64)
}

/// Differentiable form: `token_logprobs[i]` is the `[T_i]` vector of
/// target log-probs for example `i`.
pub fn wit_objective(g: &mut Graph, token_logprobs: &[Var], masks: &[WeightMask]) -> Result<Var> {
    if token_logprobs.len() != masks.len() || masks.is_empty() {
        return Err(Error::Shape(format!(
            "{} log-prob vectors for {} masks",
            token_logprobs.len(),
            masks.len()
        )));
    }
    let mut parts = Vec::with_capacity(masks.len());
    let mut norm_count = 0;
    for (i, (&lp, m)) in token_logprobs.iter().zip(masks).enumerate() {
        if g.value(lp).numel() != m.weights.len() {
            return Err(Error::Shape(format!(
                "example {i}: {} log-probs for a mask of length {}",
                g.value(lp).numel(),
                m.weights.len()
            )));
        }
        parts.push(g.weighted_sum(lp, &m.weights));
        norm_count += m.norm_count;
    }
    if norm_count == 0 {
        return Err(Error::Config("no token carries a nonzero weight".into()));
    }
    let total = g.add_n(&parts);
    Ok(g.scale(total, -1.0 / norm_count as f64))
}
