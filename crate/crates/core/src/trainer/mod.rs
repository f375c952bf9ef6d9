//! Deterministic fine-tuning loop.

mod optim;
mod schedule;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{clip_grad_norm, AdamW};
pub use schedule::Schedule;

use crate::data::{build_weight_mask, ByteTokenizer, Dataset, TokenizedExample, WeightConfig, WeightMask};
use crate::error::{Error, Result};
use crate::loss::{wit_loss, wit_objective};
use crate::model::{example_logprobs, forward_graph, param_vars, save_checkpoint, ModelParams};
use crate::numerics::{Gradients, Graph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub weights: WeightConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_peak: 3e-4,
            batch_size: 16,
            epochs: 2,
            weight_decay: 0.1,
            warmup_frac: 0.01,
            grad_clip: 1.0,
            seed: 0,
            weights: WeightConfig::CONVENTIONAL,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return Err(Error::Config(format!("train.lr_peak must be positive, got {}", self.lr_peak)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!(
                "train.warmup_frac must lie in [0, 1), got {}",
                self.warmup_frac
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("train.weight_decay must be non-negative".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("train.grad_clip must be non-negative (0 disables)".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            peak: self.lr_peak,
            warmup_frac: self.warmup_frac,
        }
    }

    pub fn total_steps(&self, n_examples: usize) -> usize {
        self.epochs * n_examples.div_ceil(self.batch_size)
    }
}

/// Epoch counts used for the three reference instruction datasets: small
/// curated (5), mid-sized synthetic (2) and large mixture (1).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Lima,
    Alpaca,
    Tulu,
}

impl Preset {
    pub fn epochs(self) -> usize {
        match self {
            Preset::Lima => 5,
            Preset::Alpaca => 2,
            Preset::Tulu => 1,
        }
    }
}

pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    cfg.schedule().lr_at(step, total_steps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Whole-dataset statistics after an epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSnapshot {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    /// Mean per-token prompt NLL; absent when every prompt is empty.
    pub prompt_nll: Option<f64>,
    pub response_nll: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSnapshot>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,loss\n");
        for r in &self.steps {
            let _ = writeln!(out, "{},{},{}", r.step, r.lr, r.loss);
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("history.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("eval_snapshots.json");
        fs::write(&json, serde_json::to_string_pretty(&self.epochs)?).map_err(|e| Error::io(&json, e))
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub bos: u32,
    /// Where to write the final checkpoint and history. Nothing is written
    /// when unset.
    pub out_dir: Option<PathBuf>,
    pub snapshot_each_epoch: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            bos: ByteTokenizer::BOS,
            out_dir: None,
            snapshot_each_epoch: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: TrainHistory,
    /// Checkpoint written at the end of training, if any.
    pub checkpoint: Option<PathBuf>,
}

pub fn build_masks(dataset: &Dataset, weights: &WeightConfig) -> Result<Vec<WeightMask>> {
    dataset
        .examples()
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            build_weight_mask(ex, weights).map_err(|e| Error::Example {
                index: i,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Weighted loss of a batch and its gradient with respect to every
/// parameter (ids follow [`ModelParams`] storage order).
pub fn batch_gradients(
    params: &ModelParams,
    batch: &[(&TokenizedExample, &WeightMask)],
    bos: u32,
) -> Result<(f64, Gradients)> {
    let mut g = Graph::new();
    let vars = param_vars(&mut g, params);
    let mut token_lps = Vec::with_capacity(batch.len());
    let mut masks = Vec::with_capacity(batch.len());
    for (ex, mask) in batch {
        let (inputs, targets) = ex.packed(bos);
        let logp = forward_graph(&mut g, params.config(), &vars, &inputs)?;
        token_lps.push(g.gather(logp, &targets));
        masks.push((*mask).clone());
    }
    let loss = wit_objective(&mut g, &token_lps, &masks)?;
    let value = g.value(loss).item();
    Ok((value, g.backward(loss)?))
}

/// Full-dataset weighted loss and per-token prompt/response NLL.
pub fn evaluate_dataset(
    params: &ModelParams,
    dataset: &Dataset,
    weights: &WeightConfig,
    bos: u32,
) -> Result<(f64, Option<f64>, f64)> {
    let masks = build_masks(dataset, weights)?;
    let lps = dataset
        .examples()
        .iter()
        .map(|ex| example_logprobs(params, ex, bos))
        .collect::<Result<Vec<_>>>()?;
    let out = wit_loss(&lps, &masks, weights)?;
    let (mut p_sum, mut r_sum, mut p_n, mut r_n) = (0.0, 0.0, 0usize, 0usize);
    for ((ps, rs), ex) in out.per_example.iter().zip(dataset.examples()) {
        p_sum += ps;
        r_sum += rs;
        p_n += ex.prompt_len();
        r_n += ex.response_len();
    }
    let prompt_nll = (p_n > 0).then(|| -p_sum / p_n as f64);
    Ok((out.loss, prompt_nll, -r_sum / r_n as f64))
}

/// Trains `params` on `dataset` with the weighted objective.
///
/// Each epoch visits the examples in a fresh permutation drawn from a
/// generator seeded once with `cfg.seed`; the last partial batch is kept.
/// Step `k` (0-based) uses `lr_at(k, total_steps)`.
pub fn train(
    dataset: &Dataset,
    mut params: ModelParams,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let masks = build_masks(dataset, &cfg.weights)?;
    let total_steps = cfg.total_steps(dataset.len());
    let schedule = cfg.schedule();
    let decay_mask = AdamW::default_decay_mask(params.tensors());
    let mut opt = AdamW::new(params.tensors(), cfg.weight_decay, decay_mask);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = TrainHistory::default();
    let mut step = 0;

    info!(
        "training {} params on {} examples for {} steps, weights ({}, {})",
        params.num_params(),
        dataset.len(),
        total_steps,
        cfg.weights.lambda_p(),
        cfg.weights.lambda_r()
    );

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk
                .iter()
                .map(|&i| (&dataset.examples()[i], &masks[i]))
                .collect();
            let (loss, mut grads) = batch_gradients(&params, &batch, opts.bos)?;
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
            debug!("step {step} lr {lr:.3e} loss {loss:.6}");
            step += 1;
        }
        if opts.snapshot_each_epoch {
            let (loss, prompt_nll, response_nll) = evaluate_dataset(&params, dataset, &cfg.weights, opts.bos)?;
            info!("epoch {epoch}: loss {loss:.5} response nll {response_nll:.5}");
            history.epochs.push(EpochSnapshot {
                epoch,
                step,
                loss,
                prompt_nll,
                response_nll,
            });
        }
    }

    let checkpoint = match &opts.out_dir {
        Some(dir) => {
            let path = dir.join(format!("ckpt_{step}.json"));
            save_checkpoint(&params, &path)?;
            history.write(dir)?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainOutcome {
        params,
        history,
        checkpoint,
    })
}
