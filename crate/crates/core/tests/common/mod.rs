#![allow(dead_code)]

use wit_core::data::{build_weight_mask, ByteTokenizer, TokenizedExample, WeightConfig, WeightMask};
use wit_core::model::{ModelConfig, ModelParams};
use wit_core::numerics::Gradients;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Smallest gradient magnitude treated as relative; below it the error is
/// measured against this floor.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

/// Central finite differences over every element of every parameter
/// tensor. Entries are probed in parallel, each worker on its own copy.
pub fn finite_difference_check(
    params: &ModelParams,
    analytic: &Gradients,
    eps: f64,
    loss: impl Fn(&ModelParams) -> f64 + Sync,
) -> GradCheck {
    let entries: Vec<(usize, usize)> = params
        .tensors()
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..t.numel()).map(move |j| (ti, j)))
        .collect();
    let errs: Vec<(f64, f64, f64)> = entries
        .par_iter()
        .map_init(
            || params.clone(),
            |probe, &(ti, j)| {
                let orig = params.tensors()[ti].data()[j];
                probe.tensors_mut()[ti].data_mut()[j] = orig + eps;
                let up = loss(probe);
                probe.tensors_mut()[ti].data_mut()[j] = orig - eps;
                let down = loss(probe);
                probe.tensors_mut()[ti].data_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let an = analytic.get(ti).expect("gradient for every tensor").data()[j];
                let rel = (an - numeric).abs() / an.abs().max(numeric.abs()).max(REL_FLOOR);
                (rel, an, numeric)
            },
        )
        .collect();
    let (k, &(rel, an, numeric)) = errs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .0.total_cmp(&b.1 .0))
        .expect("at least one parameter");
    let (ti, j) = entries[k];
    GradCheck {
        max_rel_err: rel,
        worst: format!("{}[{j}]: analytic {an:e} numeric {numeric:e}", params.names()[ti]),
        checked: entries.len(),
    }
}

pub fn random_examples(seed: u64, n: usize, vocab: u32, max_total: usize) -> Vec<TokenizedExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let total = rng.random_range(2..=max_total);
            let p = rng.random_range(1..total);
            let prompt = (0..p).map(|_| rng.random_range(0..vocab)).collect();
            let response = (0..total - p).map(|_| rng.random_range(0..vocab)).collect();
            TokenizedExample::new(prompt, response).unwrap()
        })
        .collect()
}

pub fn masks(examples: &[TokenizedExample], cfg: &WeightConfig) -> Vec<WeightMask> {
    examples.iter().map(|e| build_weight_mask(e, cfg).unwrap()).collect()
}

pub fn tiny_byte_model(d_model: usize, n_layers: usize, context_len: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: ByteTokenizer::VOCAB_SIZE,
        context_len,
        d_model,
        n_heads: 4,
        n_layers,
        d_ff: 4 * d_model,
        seed,
    }
}
