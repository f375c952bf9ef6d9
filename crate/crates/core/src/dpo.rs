//! Preference alignment with the sigmoid DPO objective on top of a
//! fine-tuned checkpoint.

use std::fs;
use std::path::PathBuf;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{RawPreference, TokenizedExample, Tokenizer};
use crate::error::{Error, Result};
use crate::model::{forward_graph, param_vars, save_checkpoint, target_logprobs, ModelParams};
use crate::numerics::{kernels, Gradients, Graph, Tensor, Var};
use crate::trainer::{clip_grad_norm, AdamW, Schedule, StepRecord, TrainHistory};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceExample {
    pub prompt_ids: Vec<u32>,
    pub chosen_ids: Vec<u32>,
    pub rejected_ids: Vec<u32>,
}

impl PreferenceExample {
    pub fn new(prompt_ids: Vec<u32>, chosen_ids: Vec<u32>, rejected_ids: Vec<u32>) -> Result<Self> {
        if chosen_ids.is_empty() || rejected_ids.is_empty() {
            return Err(Error::Invalid("preference responses must be non-empty".into()));
        }
        if chosen_ids == rejected_ids {
            return Err(Error::Invalid("chosen and rejected responses are identical".into()));
        }
        Ok(Self {
            prompt_ids,
            chosen_ids,
            rejected_ids,
        })
    }

    fn pair(&self, response: &[u32]) -> TokenizedExample {
        TokenizedExample {
            prompt_ids: self.prompt_ids.clone(),
            response_ids: response.to_vec(),
        }
    }

    pub fn chosen(&self) -> TokenizedExample {
        self.pair(&self.chosen_ids)
    }

    pub fn rejected(&self) -> TokenizedExample {
        self.pair(&self.rejected_ids)
    }

    /// Packed length of the longer of the two sequences.
    pub fn packed_len(&self) -> usize {
        1 + self.prompt_ids.len() + self.chosen_ids.len().max(self.rejected_ids.len()) - 1
    }

    /// `(log π(chosen | prompt), log π(rejected | prompt))`.
    pub fn logprobs(&self, params: &ModelParams, bos: u32) -> Result<(f64, f64)> {
        Ok((
            sequence_logprob(params, &self.prompt_ids, &self.chosen_ids, bos)?,
            sequence_logprob(params, &self.prompt_ids, &self.rejected_ids, bos)?,
        ))
    }
}

pub fn tokenize_preference(
    raw: &RawPreference,
    tokenizer: &dyn Tokenizer,
    context_len: usize,
    index: usize,
) -> Result<PreferenceExample> {
    let with_eos = |s: &str| {
        let mut ids = tokenizer.encode(s);
        ids.push(tokenizer.eos());
        ids
    };
    let ex = PreferenceExample::new(tokenizer.encode(&raw.prompt), with_eos(&raw.chosen), with_eos(&raw.rejected))
        .map_err(|e| Error::Example {
            index,
            reason: e.to_string(),
        })?;
    if ex.packed_len() > context_len {
        return Err(Error::Example {
            index,
            reason: format!("packed length {} exceeds context length {context_len}", ex.packed_len()),
        });
    }
    Ok(ex)
}

pub fn tokenize_preferences(
    raws: &[RawPreference],
    tokenizer: &dyn Tokenizer,
    context_len: usize,
) -> Result<Vec<PreferenceExample>> {
    if raws.is_empty() {
        return Err(Error::EmptyDataset);
    }
    raws.iter()
        .enumerate()
        .map(|(i, r)| tokenize_preference(r, tokenizer, context_len, i))
        .collect()
}

/// `Σ_j log P(r_j | prompt, r_<j)`, summed rather than length-normalised.
pub fn sequence_logprob(params: &ModelParams, prompt_ids: &[u32], response_ids: &[u32], bos: u32) -> Result<f64> {
    let ex = TokenizedExample::new(prompt_ids.to_vec(), response_ids.to_vec())?;
    let (inputs, targets) = ex.packed(bos);
    let lps = target_logprobs(params, &inputs, &targets)?;
    Ok(lps[prompt_ids.len()..].iter().sum())
}

/// `-log σ(β·[(πc − rc) − (πr − rr)])`.
pub fn dpo_loss(policy_chosen: f64, policy_rejected: f64, ref_chosen: f64, ref_rejected: f64, beta: f64) -> f64 {
    -kernels::log_sigmoid(beta * ((policy_chosen - ref_chosen) - (policy_rejected - ref_rejected)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpoConfig {
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            lr: 5e-7,
            batch_size: 32,
            epochs: 2,
            warmup_frac: 0.1,
            weight_decay: 0.0,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("dpo.beta must be positive, got {}", self.beta)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("dpo.lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("dpo.batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!("dpo.warmup_frac must lie in [0, 1), got {}", self.warmup_frac)));
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return Err(Error::Config("dpo.weight_decay and dpo.grad_clip must be non-negative".into()));
        }
        Ok(())
    }
}

/// Reference log-probs `(chosen, rejected)` for every triple. Scored in
/// parallel; results keep input order.
pub fn reference_logprobs(reference: &ModelParams, prefs: &[PreferenceExample], bos: u32) -> Result<Vec<(f64, f64)>> {
    prefs.par_iter().map(|p| p.logprobs(reference, bos)).collect()
}

/// Fraction of triples whose implicit reward margin is strictly positive.
pub fn preference_accuracy(
    policy: &ModelParams,
    prefs: &[PreferenceExample],
    refs: &[(f64, f64)],
    bos: u32,
) -> Result<f64> {
    let pol = reference_logprobs(policy, prefs, bos)?;
    let wins = pol
        .iter()
        .zip(refs)
        .filter(|((pc, pr), (rc, rr))| (pc - rc) - (pr - rr) > 0.0)
        .count();
    Ok(wins as f64 / prefs.len() as f64)
}

fn response_logprob(g: &mut Graph, params: &ModelParams, vars: &[Var], ex: &TokenizedExample, bos: u32) -> Result<Var> {
    let (inputs, targets) = ex.packed(bos);
    let logp = forward_graph(g, params.config(), vars, &inputs)?;
    let picked = g.gather(logp, &targets);
    let mut w = vec![0.0; targets.len()];
    w[ex.prompt_len()..].fill(1.0);
    Ok(g.weighted_sum(picked, &w))
}

/// Mean DPO loss over a batch and its gradient. Each entry pairs a triple
/// with its frozen reference log-probs.
pub fn dpo_batch_gradients(
    params: &ModelParams,
    batch: &[(&PreferenceExample, (f64, f64))],
    beta: f64,
    bos: u32,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let mut g = Graph::new();
    let vars = param_vars(&mut g, params);
    let mut terms = Vec::with_capacity(batch.len());
    for (ex, (rc, rr)) in batch {
        let c = response_logprob(&mut g, params, &vars, &ex.chosen(), bos)?;
        let r = response_logprob(&mut g, params, &vars, &ex.rejected(), bos)?;
        let gap = g.sub(c, r);
        let gap = g.scale(gap, beta);
        let offset = g.constant(Tensor::scalar(-beta * (rc - rr)));
        let margin = g.add(gap, offset);
        terms.push(g.log_sigmoid(margin));
    }
    let total = g.add_n(&terms);
    let loss = g.scale(total, -1.0 / batch.len() as f64);
    let value = g.value(loss).item();
    Ok((value, g.backward(loss)?))
}

#[derive(Clone, Debug, Default)]
pub struct DpoOptions {
    pub bos: u32,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DpoOutcome {
    pub params: ModelParams,
    pub history: TrainHistory,
    /// Preference accuracy before training, then after each epoch.
    pub accuracy: Vec<f64>,
    pub checkpoint: Option<PathBuf>,
}

/// Trains a policy initialised from `sft_params` against a frozen copy of it.
pub fn align(
    sft_params: &ModelParams,
    prefs: &[PreferenceExample],
    cfg: &DpoConfig,
    opts: &DpoOptions,
) -> Result<DpoOutcome> {
    cfg.validate()?;
    if prefs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let reference = sft_params;
    let refs = reference_logprobs(reference, prefs, opts.bos)?;
    let mut params = sft_params.clone();
    let total_steps = cfg.epochs * prefs.len().div_ceil(cfg.batch_size);
    let schedule = Schedule {
        peak: cfg.lr,
        warmup_frac: cfg.warmup_frac,
    };
    let mut opt = AdamW::new(params.tensors(), cfg.weight_decay, AdamW::default_decay_mask(params.tensors()));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..prefs.len()).collect();
    let mut history = TrainHistory::default();
    let mut accuracy = vec![preference_accuracy(&params, prefs, &refs, opts.bos)?];
    let mut step = 0;
    info!("dpo on {} triples for {total_steps} steps, beta {}", prefs.len(), cfg.beta);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| (&prefs[i], refs[i])).collect();
            let (loss, mut grads) = dpo_batch_gradients(&params, &batch, cfg.beta, opts.bos)?;
            if !loss.is_finite() {
                if let Some(dir) = &opts.out_dir {
                    save_checkpoint(&params, &dir.join(format!("ckpt_{step}.json")))?;
                }
                return Err(Error::Diverged {
                    step,
                    loss,
                    last_good: Box::new(params),
                });
            }
            let lr = schedule.lr_at(step, total_steps)?;
            clip_grad_norm(&mut grads, cfg.grad_clip);
            opt.step(params.tensors_mut(), &grads, lr);
            history.steps.push(StepRecord { step, lr, loss });
            debug!("dpo step {step} lr {lr:.3e} loss {loss:.6}");
            step += 1;
        }
        let acc = preference_accuracy(&params, prefs, &refs, opts.bos)?;
        info!("dpo epoch {epoch}: preference accuracy {acc:.3}");
        accuracy.push(acc);
    }

    let checkpoint = match &opts.out_dir {
        Some(dir) => {
            let path = dir.join(format!("ckpt_{step}.json"));
            save_checkpoint(&params, &path)?;
            history.write(dir)?;
            let acc = serde_json::to_string_pretty(&accuracy)?;
            let acc_path = dir.join("preference_accuracy.json");
            fs::write(&acc_path, acc).map_err(|e| Error::io(acc_path, e))?;
            Some(path)
        }
        None => None,
    };
    Ok(DpoOutcome {
        params,
        history,
        accuracy,
        checkpoint,
    })
}
