use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use log::{info, warn};
use serde::Serialize;

use wit_core::data::{
    gen_preference_tasks, gen_synthetic_tasks, load_corpus, load_jsonl, load_preference_jsonl, tokenize_all,
    write_jsonl, ByteTokenizer, Dataset, RawExample, TaskChecker, TaskMix, TokenizeMode, Tokenizer, WeightConfig,
};
use wit_core::dpo::{align, tokenize_preferences, DpoOptions};
use wit_core::eval::{
    accuracy_csv, exact_match_accuracy, logprob_profile, make_variant_sets, relative_gain, sensitivity_index,
    EvalReport,
};
use wit_core::model::{init_params, load_checkpoint, ModelParams};
use wit_core::sweep::{emit_heatmap, find_optimal, run_grid, SweepInputs, SweepResult, METRIC_KEYS};
use wit_core::trainer::{train, TrainConfig, TrainOptions};

use crate::config::{read_file, resolve, FileConfig, RunConfig};
use crate::{Cli, Command};

pub enum Failure {
    /// Bad flags, config or inputs; nothing was run.
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

type Res<T> = Result<T, Failure>;

trait Classify<T> {
    fn invalid(self) -> Res<T>;
    fn runtime(self) -> Res<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn invalid(self) -> Res<T> {
        self.map_err(|e| Failure::Invalid(e.into()))
    }

    fn runtime(self) -> Res<T> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

pub fn dispatch(cli: Cli) -> Res<()> {
    let init = match &cli.command {
        Command::Finetune { init } | Command::Dpo { init } => init.clone(),
        _ => None,
    };
    let file = match &cli.common.config {
        Some(p) => read_file(p).invalid()?,
        None => FileConfig::default(),
    };
    let cfg = resolve(file, &cli.common.overrides(init)).invalid()?;
    let name = match &cli.command {
        Command::Pretrain => "pretrain",
        Command::Finetune { .. } => "finetune",
        Command::Dpo { .. } => "dpo",
        Command::Eval { .. } => "eval",
        Command::Sweep => "sweep",
        Command::Analyze { .. } => "analyze",
        Command::GenData => "gen-data",
    };
    info!("{name}: config {}", cfg.hash());
    match &cli.command {
        Command::Pretrain => pretrain(&cfg),
        Command::Finetune { .. } => finetune(&cfg),
        Command::Dpo { .. } => dpo(&cfg),
        Command::Eval { checkpoint } => eval(&cfg, checkpoint),
        Command::Sweep => sweep(&cfg),
        Command::Analyze { sweep } => analyze(&cfg, sweep),
        Command::GenData => gen_data(&cfg),
    }?;
    write_manifest(&cfg, name).runtime()?;
    Ok(())
}

fn mix(cfg: &RunConfig) -> anyhow::Result<TaskMix> {
    Ok(TaskMix::parse(&cfg.data.tasks)?)
}

fn train_pairs(cfg: &RunConfig) -> anyhow::Result<Vec<RawExample>> {
    Ok(match &cfg.data.train {
        Some(p) => load_jsonl(p)?,
        None => gen_synthetic_tasks(cfg.data.seed, cfg.data.n_train, &mix(cfg)?)?.0,
    })
}

fn eval_pairs(cfg: &RunConfig) -> anyhow::Result<Vec<RawExample>> {
    Ok(match &cfg.data.eval {
        Some(p) => load_jsonl(p)?,
        None => gen_synthetic_tasks(cfg.data.seed.wrapping_add(1), cfg.data.n_eval, &mix(cfg)?)?.0,
    })
}

fn initial_params(cfg: &RunConfig) -> anyhow::Result<ModelParams> {
    match &cfg.data.init {
        Some(p) => {
            let params = load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?;
            if params.config() != &cfg.model {
                warn!("using the architecture stored in {} rather than the [model] section", p.display());
            }
            Ok(params)
        }
        None => Ok(init_params(&cfg.model)?),
    }
}

fn out_dir(cfg: &RunConfig) -> Res<&Path> {
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))
        .runtime()?;
    Ok(&cfg.out_dir)
}

fn run_training(cfg: &RunConfig, ds: &Dataset, params: ModelParams, train_cfg: &TrainConfig) -> Res<()> {
    let dir = out_dir(cfg)?;
    let opts = TrainOptions {
        bos: ByteTokenizer::BOS,
        out_dir: Some(dir.to_path_buf()),
        snapshot_each_epoch: true,
    };
    let out = train(ds, params, train_cfg, &opts).runtime()?;
    info!(
        "finished after {} steps, final batch loss {:?}",
        out.history.steps.len(),
        out.history.final_loss()
    );
    Ok(())
}

fn pretrain(cfg: &RunConfig) -> Res<()> {
    let corpus = cfg
        .data
        .corpus
        .as_ref()
        .ok_or_else(|| anyhow!("pretrain needs data.corpus"))
        .invalid()?;
    let params = initial_params(cfg).invalid()?;
    let ds = load_corpus(corpus, &ByteTokenizer, params.config().context_len).invalid()?;
    let train_cfg = TrainConfig {
        weights: WeightConfig::UNIFORM,
        ..cfg.train.clone()
    };
    run_training(cfg, &ds, params, &train_cfg)
}

fn finetune(cfg: &RunConfig) -> Res<()> {
    let params = initial_params(cfg).invalid()?;
    let raws = train_pairs(cfg).invalid()?;
    let ds = tokenize_all(&raws, &ByteTokenizer, params.config().context_len, TokenizeMode::Instruction).invalid()?;
    run_training(cfg, &ds, params, &cfg.train)
}

fn dpo(cfg: &RunConfig) -> Res<()> {
    if cfg.data.init.is_none() {
        return Err(Failure::Invalid(anyhow!("dpo needs a fine-tuned checkpoint (--init or data.init)")));
    }
    let sft = initial_params(cfg).invalid()?;
    let raws = match &cfg.data.preferences {
        Some(p) => load_preference_jsonl(p),
        None => gen_preference_tasks(cfg.data.seed.wrapping_add(2), cfg.data.n_preferences, &mix(cfg).invalid()?),
    }
    .invalid()?;
    let prefs = tokenize_preferences(&raws, &ByteTokenizer, sft.config().context_len).invalid()?;
    let dir = out_dir(cfg)?;
    let opts = DpoOptions {
        bos: ByteTokenizer::BOS,
        out_dir: Some(dir.to_path_buf()),
    };
    let out = align(&sft, &prefs, &cfg.dpo, &opts).runtime()?;
    info!("preference accuracy by epoch: {:?}", out.accuracy);
    Ok(())
}

fn eval(cfg: &RunConfig, checkpoint: &Path) -> Res<()> {
    let params = load_checkpoint(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))
        .invalid()?;
    let raws = eval_pairs(cfg).invalid()?;
    let ctx = params.config().context_len;
    let ds = tokenize_all(&raws, &ByteTokenizer, ctx, TokenizeMode::Instruction).invalid()?;
    let dir = out_dir(cfg)?;
    let accuracy = exact_match_accuracy(&params, &raws, &TaskChecker, &ByteTokenizer).runtime()?;
    let profile = logprob_profile(&params, &ds, ByteTokenizer::BOS).runtime()?;
    let sets = make_variant_sets(&raws, cfg.data.n_variants, cfg.data.seed, &ByteTokenizer).runtime()?;
    let sensitivity = sensitivity_index(&params, &sets, ByteTokenizer::BOS).runtime()?;
    let report = EvalReport {
        accuracy: Some(accuracy),
        mean_prompt_logprob: profile.mean_prompt(),
        mean_response_logprob: profile.mean_response(),
        sensitivity: Some(sensitivity),
        profile,
    };
    report.write_json(&dir.join("eval_report.json")).runtime()?;
    let label = checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let csv = dir.join("accuracy.csv");
    fs::write(&csv, accuracy_csv(&[(label, accuracy)]))
        .with_context(|| format!("writing {}", csv.display()))
        .runtime()?;
    println!("exact match {accuracy:.4}");
    Ok(())
}

fn sweep(cfg: &RunConfig) -> Res<()> {
    let init = initial_params(cfg).invalid()?;
    let ctx = init.config().context_len;
    let ds = tokenize_all(&train_pairs(cfg).invalid()?, &ByteTokenizer, ctx, TokenizeMode::Instruction).invalid()?;
    let eval_raws = eval_pairs(cfg).invalid()?;
    tokenize_all(&eval_raws, &ByteTokenizer, ctx, TokenizeMode::Instruction).invalid()?;
    let variants = make_variant_sets(&eval_raws, cfg.data.n_variants, cfg.data.seed, &ByteTokenizer).invalid()?;
    let dir = out_dir(cfg)?;
    let inputs = SweepInputs {
        init: &init,
        train_cfg: &cfg.train,
        dataset: &ds,
        eval_set: &eval_raws,
        checker: &TaskChecker,
        variant_sets: &variants,
        grid_values: &cfg.sweep.grid,
        jobs: cfg.sweep.jobs,
        out_dir: Some(dir),
    };
    let result = run_grid(&inputs).runtime()?;
    let failed = result.cells.iter().filter(|c| c.metrics.is_none()).count();
    println!("{} cells, {failed} failed; results in {}", result.cells.len(), dir.join("sweep.json").display());
    Ok(())
}

/// Metrics where a larger value is better and an argmax is meaningful.
const MAXIMISED: [&str; 3] = ["accuracy", "eval_prompt_logprob", "eval_response_logprob"];

#[derive(Serialize)]
struct Optimum {
    lambda_p: f64,
    lambda_r: f64,
    value: f64,
    conventional: Option<f64>,
    /// Percent change over the (0, 1) cell, when that value is positive.
    relative_gain: Option<f64>,
}

fn analyze(cfg: &RunConfig, sweep_path: &Path) -> Res<()> {
    let result = SweepResult::load(sweep_path)
        .with_context(|| format!("loading {}", sweep_path.display()))
        .invalid()?;
    let dir = out_dir(cfg)?;
    for key in METRIC_KEYS {
        let present = result
            .cells
            .iter()
            .filter_map(|c| c.metrics.as_ref())
            .any(|m| matches!(m.get(key), Ok(Some(_))));
        if present {
            emit_heatmap(&result, key, dir).runtime()?;
        }
    }
    let mut optima = BTreeMap::new();
    for key in MAXIMISED {
        let Ok((p, r)) = find_optimal(&result, key) else { continue };
        let value_at = |p: f64, r: f64| {
            result
                .cell(p, r)
                .and_then(|c| c.metrics.as_ref())
                .and_then(|m| m.get(key).ok().flatten())
        };
        let value = value_at(p, r).expect("optimal cell has a value");
        let conventional = value_at(0.0, 1.0);
        let gain = conventional.and_then(|c| relative_gain(c, value).ok());
        println!("{key}: best at lambda_p={p} lambda_r={r} ({value})");
        optima.insert(
            key,
            Optimum {
                lambda_p: p,
                lambda_r: r,
                value,
                conventional,
                relative_gain: gain,
            },
        );
    }
    write_json(&dir.join("optima.json"), &optima).runtime()
}

fn gen_data(cfg: &RunConfig) -> Res<()> {
    let m = mix(cfg).invalid()?;
    let (train, _) = gen_synthetic_tasks(cfg.data.seed, cfg.data.n_train, &m).runtime()?;
    let (eval, _) = gen_synthetic_tasks(cfg.data.seed.wrapping_add(1), cfg.data.n_eval, &m).runtime()?;
    let prefs = gen_preference_tasks(cfg.data.seed.wrapping_add(2), cfg.data.n_preferences, &m).runtime()?;
    let dir = out_dir(cfg)?;
    write_jsonl(&dir.join("train.jsonl"), &train).runtime()?;
    write_jsonl(&dir.join("eval.jsonl"), &eval).runtime()?;
    write_jsonl(&dir.join("preferences.jsonl"), &prefs).runtime()?;
    let corpus: String = train.iter().map(|e| format!("{} {}\n", e.prompt, e.response)).collect();
    let tok = ByteTokenizer;
    info!("corpus of {} tokens", tok.encode(&corpus).len());
    fs::write(dir.join("corpus.txt"), corpus).context("writing corpus.txt").runtime()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> anyhow::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            list_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root)?.to_string_lossy().replace('\\', "/");
            if rel != "manifest.json" {
                out.push(rel);
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_hash: String,
    seed: u64,
    files: Vec<String>,
    effective_config: &'a RunConfig,
}

fn write_manifest(cfg: &RunConfig, command: &str) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(&cfg.out_dir)?;
    let mut files = Vec::new();
    list_files(&cfg.out_dir, &cfg.out_dir, &mut files)?;
    files.sort();
    let manifest = Manifest {
        command,
        config_hash: cfg.hash(),
        seed: cfg.train.seed,
        files,
        effective_config: cfg,
    };
    let path = cfg.out_dir.join("manifest.json");
    write_json(&path, &manifest)?;
    Ok(path)
}
