use serde::{Deserialize, Serialize};

use super::TokenizedExample;
use crate::error::{Error, Result};

/// Prompt-token and response-token loss weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawWeights")]
pub struct WeightConfig {
    lambda_p: f64,
    lambda_r: f64,
}

#[derive(Deserialize)]
struct RawWeights {
    lambda_p: f64,
    lambda_r: f64,
}

impl TryFrom<RawWeights> for WeightConfig {
    type Error = Error;

    fn try_from(raw: RawWeights) -> Result<Self> {
        WeightConfig::new(raw.lambda_p, raw.lambda_r)
    }
}

impl WeightConfig {
    /// Response-only weighting of standard instruction tuning.
    pub const CONVENTIONAL: WeightConfig = WeightConfig {
        lambda_p: 0.0,
        lambda_r: 1.0,
    };

    /// Uniform weighting over all tokens (continual pretraining).
    pub const UNIFORM: WeightConfig = WeightConfig {
        lambda_p: 1.0,
        lambda_r: 1.0,
    };

    pub fn new(lambda_p: f64, lambda_r: f64) -> Result<Self> {
        for (name, v) in [("lambda_p", lambda_p), ("lambda_r", lambda_r)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if lambda_p == 0.0 && lambda_r == 0.0 {
            return Err(Error::Config(
                "lambda_p and lambda_r cannot both be zero".into(),
            ));
        }
        Ok(Self { lambda_p, lambda_r })
    }

    pub fn lambda_p(&self) -> f64 {
        self.lambda_p
    }

    pub fn lambda_r(&self) -> f64 {
        self.lambda_r
    }

    /// Number of tokens an example contributes to the normaliser.
    pub fn norm_count(&self, prompt_len: usize, response_len: usize) -> usize {
        let p = if self.lambda_p != 0.0 { prompt_len } else { 0 };
        let r = if self.lambda_r != 0.0 { response_len } else { 0 };
        p + r
    }
}

/// Per-position loss weights over the prompt-then-response targets of one
/// example.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMask {
    pub weights: Vec<f64>,
    pub prompt_len: usize,
    pub norm_count: usize,
}

impl WeightMask {
    pub fn response_len(&self) -> usize {
        self.weights.len() - self.prompt_len
    }
}

pub fn build_weight_mask(example: &TokenizedExample, cfg: &WeightConfig) -> Result<WeightMask> {
    let p = example.prompt_ids.len();
    let r = example.response_ids.len();
    let norm_count = cfg.norm_count(p, r);
    if norm_count == 0 {
        return Err(Error::Config(format!(
            "weights ({}, {}) select no tokens of an example with |P|={p}, |R|={r}",
            cfg.lambda_p, cfg.lambda_r
        )));
    }
    let mut weights = vec![cfg.lambda_p; p];
    weights.resize(p + r, cfg.lambda_r);
    Ok(WeightMask {
        weights,
        prompt_len: p,
        norm_count,
    })
}
