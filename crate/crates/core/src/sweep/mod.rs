//! The (λp, λr) grid experiment and the analyses run on its results.

mod analysis;
mod heatmap;

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use analysis::{
    dataset_characteristics, rank_correlation, summarize_optima, CorrelationMethod, DatasetCharacteristics,
    OptimaSummary, OptimumEntry,
};
pub use heatmap::{emit_heatmap, heatmap_csv, heatmap_svg, metric_matrix, parse_heatmap_csv, HeatmapMatrix};

use crate::data::{ByteTokenizer, Dataset, RawExample, TaskChecker, Tokenizer, WeightConfig};
use crate::error::{Error, Result};
use crate::eval::{exact_match_accuracy, logprob_profile, sensitivity_index, VariantSet};
use crate::model::ModelParams;
use crate::trainer::{evaluate_dataset, train, TrainConfig, TrainOptions};

/// Weight values of the reference grid.
pub const GRID_VALUES: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

/// Every `(λp, λr)` pair over `values` except `(0, 0)`, sorted.
pub fn grid_cells(values: &[f64]) -> Result<Vec<(f64, f64)>> {
    let mut v = values.to_vec();
    if v.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(Error::Config("sweep grid values must lie in [0, 1]".into()));
    }
    v.sort_by(f64::total_cmp);
    v.dedup();
    let mut cells = Vec::new();
    for &p in &v {
        for &r in &v {
            if p != 0.0 || r != 0.0 {
                cells.push((p, r));
            }
        }
    }
    if cells.is_empty() {
        return Err(Error::Config("sweep grid has no valid cell".into()));
    }
    Ok(cells)
}

/// Grid values print with one decimal when that is exact (`0.2`, `1.0`).
pub fn fmt_weight(v: f64) -> String {
    let short = format!("{v:.1}");
    if short.parse::<f64>() == Ok(v) {
        short
    } else {
        v.to_string()
    }
}

pub fn cell_name(lambda_p: f64, lambda_r: f64) -> String {
    format!("cell_{}_{}", fmt_weight(lambda_p), fmt_weight(lambda_r))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    /// Training objective on the full training set after the last step.
    pub final_loss: Option<f64>,
    pub train_response_nll: f64,
    pub eval_prompt_logprob: Option<f64>,
    pub eval_response_logprob: f64,
    /// Relative to the sweep output directory.
    pub checkpoint: Option<String>,
}

pub const METRIC_KEYS: [&str; 6] = [
    "accuracy",
    "sensitivity",
    "final_loss",
    "train_response_nll",
    "eval_prompt_logprob",
    "eval_response_logprob",
];

impl CellMetrics {
    /// Value of a named metric; `Ok(None)` when it is undefined for this cell.
    pub fn get(&self, key: &str) -> Result<Option<f64>> {
        Ok(match key {
            "accuracy" => Some(self.accuracy),
            "sensitivity" => self.sensitivity,
            "final_loss" => self.final_loss,
            "train_response_nll" => Some(self.train_response_nll),
            "eval_prompt_logprob" => self.eval_prompt_logprob,
            "eval_response_logprob" => Some(self.eval_response_logprob),
            other => return Err(Error::UnknownMetric(other.to_string())),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub lambda_p: f64,
    pub lambda_r: f64,
    pub status: CellStatus,
    pub metrics: Option<CellMetrics>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepMeta {
    pub seed: u64,
    pub config_hash: String,
    pub dataset_fingerprint: String,
    pub grid_values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// Sorted by `(λp, λr)`.
    pub cells: Vec<CellRecord>,
    pub base_metrics: CellMetrics,
    pub meta: SweepMeta,
}

impl SweepResult {
    pub fn cell(&self, lambda_p: f64, lambda_r: f64) -> Option<&CellRecord> {
        self.cells.iter().find(|c| c.lambda_p == lambda_p && c.lambda_r == lambda_r)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Everything a grid run needs besides the weights themselves.
pub struct SweepInputs<'a> {
    pub init: &'a ModelParams,
    pub train_cfg: &'a TrainConfig,
    pub dataset: &'a Dataset,
    pub eval_set: &'a [RawExample],
    pub checker: &'a TaskChecker,
    /// Prompt variant sets for the sensitivity metric; may be empty.
    pub variant_sets: &'a [VariantSet],
    pub grid_values: &'a [f64],
    /// Upper bound on concurrently trained cells.
    pub jobs: usize,
    pub out_dir: Option<&'a Path>,
}

fn config_hash(inputs: &SweepInputs) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(inputs.init.config())?);
    h.update(serde_json::to_vec(inputs.train_cfg)?);
    h.update(serde_json::to_vec(inputs.grid_values)?);
    h.update(serde_json::to_vec(inputs.eval_set)?);
    h.update(serde_json::to_vec(inputs.variant_sets)?);
    Ok(hex::encode(h.finalize()))
}

fn evaluate(
    params: &ModelParams,
    inputs: &SweepInputs,
    eval_data: &Dataset,
    weights: &WeightConfig,
) -> Result<CellMetrics> {
    let tok = ByteTokenizer;
    let accuracy = exact_match_accuracy(params, inputs.eval_set, inputs.checker, &tok)?;
    let sensitivity = if inputs.variant_sets.is_empty() {
        None
    } else {
        Some(sensitivity_index(params, inputs.variant_sets, tok.bos())?.aggregate)
    };
    let (loss, _, train_response_nll) = evaluate_dataset(params, inputs.dataset, weights, tok.bos())?;
    let profile = logprob_profile(params, eval_data, tok.bos())?;
    Ok(CellMetrics {
        accuracy,
        sensitivity,
        final_loss: Some(loss),
        train_response_nll,
        eval_prompt_logprob: profile.mean_prompt(),
        eval_response_logprob: profile.mean_response(),
        checkpoint: None,
    })
}

fn run_cell(inputs: &SweepInputs, eval_data: &Dataset, lambda_p: f64, lambda_r: f64) -> Result<CellMetrics> {
    let weights = WeightConfig::new(lambda_p, lambda_r)?;
    let cfg = TrainConfig {
        weights,
        ..inputs.train_cfg.clone()
    };
    let name = cell_name(lambda_p, lambda_r);
    let opts = TrainOptions {
        bos: ByteTokenizer::BOS,
        out_dir: inputs.out_dir.map(|d| d.join(&name)),
        snapshot_each_epoch: false,
    };
    let out = train(inputs.dataset, inputs.init.clone(), &cfg, &opts)?;
    let mut metrics = evaluate(&out.params, inputs, eval_data, &weights)?;
    metrics.checkpoint = out
        .checkpoint
        .and_then(|p| p.file_name().map(|f| format!("{name}/{}", f.to_string_lossy())));
    Ok(metrics)
}

/// Trains one model per grid cell from the same initial parameters and
/// shuffle seed, evaluates each, and aggregates in canonical cell order.
///
/// A failing cell is recorded and the sweep goes on; it is an error only if
/// every cell fails.
pub fn run_grid(inputs: &SweepInputs) -> Result<SweepResult> {
    let cells = grid_cells(inputs.grid_values)?;
    if inputs.eval_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let tok = ByteTokenizer;
    let eval_data = crate::data::tokenize_all(
        inputs.eval_set,
        &tok,
        inputs.init.config().context_len,
        crate::data::TokenizeMode::Instruction,
    )?;
    if let Some(dir) = inputs.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(inputs.jobs.max(1))
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    info!("sweeping {} cells with {} worker(s)", cells.len(), inputs.jobs.max(1));

    let records: Vec<CellRecord> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(p, r)| match run_cell(inputs, &eval_data, p, r) {
                Ok(m) => CellRecord {
                    lambda_p: p,
                    lambda_r: r,
                    status: CellStatus::Ok,
                    metrics: Some(m),
                    error: None,
                },
                Err(e) => {
                    warn!("cell ({p}, {r}) failed: {e}");
                    CellRecord {
                        lambda_p: p,
                        lambda_r: r,
                        status: CellStatus::Failed,
                        metrics: None,
                        error: Some(e.to_string()),
                    }
                }
            })
            .collect()
    });
    if records.iter().all(|c| c.status == CellStatus::Failed) {
        return Err(Error::Invalid(format!(
            "all {} sweep cells failed; first error: {}",
            records.len(),
            records[0].error.as_deref().unwrap_or("unknown")
        )));
    }

    // the untrained model scored with the conventional objective
    let mut base_metrics = pool.install(|| evaluate(inputs.init, inputs, &eval_data, &WeightConfig::CONVENTIONAL))?;
    base_metrics.final_loss = None;

    let result = SweepResult {
        cells: records,
        base_metrics,
        meta: SweepMeta {
            seed: inputs.train_cfg.seed,
            config_hash: config_hash(inputs)?,
            dataset_fingerprint: inputs.dataset.fingerprint(),
            grid_values: {
                let mut v = inputs.grid_values.to_vec();
                v.sort_by(f64::total_cmp);
                v.dedup();
                v
            },
        },
    };
    if let Some(dir) = inputs.out_dir {
        for c in &result.cells {
            write_json(&dir.join(format!("{}.json", cell_name(c.lambda_p, c.lambda_r))), c)?;
        }
        result.write(&dir.join("sweep.json"))?;
    }
    Ok(result)
}

/// Best cell by `metric_key`. Ties go to the smaller λp, then the larger λr.
pub fn find_optimal(result: &SweepResult, metric_key: &str) -> Result<(f64, f64)> {
    let mut best: Option<(f64, f64, f64)> = None;
    for c in &result.cells {
        let Some(m) = &c.metrics else { continue };
        let Some(v) = m.get(metric_key)? else { continue };
        if v.is_nan() {
            continue;
        }
        let better = match best {
            None => true,
            Some((bv, bp, br)) => {
                v > bv || (v == bv && (c.lambda_p < bp || (c.lambda_p == bp && c.lambda_r > br)))
            }
        };
        if better {
            best = Some((v, c.lambda_p, c.lambda_r));
        }
    }
    best.map(|(_, p, r)| (p, r))
        .ok_or_else(|| Error::Invalid(format!("no successful cell reports `{metric_key}`")))
}

/// Writes `heatmap_{metric}.csv` and `.svg` for every key into `dir` and
/// returns the file paths.
pub fn emit_all_heatmaps(result: &SweepResult, keys: &[&str], dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for k in keys {
        let (csv, svg) = emit_heatmap(result, k, dir)?;
        out.push(csv);
        out.push(svg);
    }
    Ok(out)
}
