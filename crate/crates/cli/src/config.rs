//! Run configuration: built-in defaults, overlaid by a config file, overlaid
//! by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use wit_core::data::{ByteTokenizer, WeightConfig};
use wit_core::dpo::DpoConfig;
use wit_core::model::ModelConfig;
use wit_core::sweep::GRID_VALUES;
use wit_core::trainer::{Preset, TrainConfig};

pub const CONFIG_KEYS: &str = "\
Config file keys (TOML sections, or the same nesting in JSON):
  out_dir                       output directory
  [model]  context_len d_model n_heads n_layers d_ff seed
  [train]  lr_peak batch_size epochs weight_decay warmup_frac grad_clip seed
           lambda_p lambda_r preset (lima|alpaca|tulu)
  [dpo]    beta lr batch_size epochs warmup_frac weight_decay grad_clip seed
  [data]   train eval preferences corpus   (paths; JSONL except corpus)
           init                            checkpoint to start from
           seed n_train n_eval n_preferences tasks n_variants
  [sweep]  grid (list of weights in [0,1]) jobs
Precedence: flags > config file > defaults.";

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub out_dir: Option<PathBuf>,
    pub model: ModelFile,
    pub train: TrainFile,
    pub dpo: DpoFile,
    pub data: DataFile,
    pub sweep: SweepFile,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelFile {
    pub vocab_size: Option<usize>,
    pub context_len: Option<usize>,
    pub d_model: Option<usize>,
    pub n_heads: Option<usize>,
    pub n_layers: Option<usize>,
    pub d_ff: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub lr_peak: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub weight_decay: Option<f64>,
    pub warmup_frac: Option<f64>,
    pub grad_clip: Option<f64>,
    pub seed: Option<u64>,
    pub lambda_p: Option<f64>,
    pub lambda_r: Option<f64>,
    pub preset: Option<Preset>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpoFile {
    pub beta: Option<f64>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub warmup_frac: Option<f64>,
    pub weight_decay: Option<f64>,
    pub grad_clip: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataFile {
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    pub preferences: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub seed: Option<u64>,
    pub n_train: Option<usize>,
    pub n_eval: Option<usize>,
    pub n_preferences: Option<usize>,
    pub tasks: Option<String>,
    pub n_variants: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepFile {
    pub grid: Option<Vec<f64>>,
    pub jobs: Option<usize>,
}

/// Values given on the command line.
#[derive(Debug, Default)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub lambda_p: Option<f64>,
    pub lambda_r: Option<f64>,
    pub preset: Option<Preset>,
    pub init: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    pub preferences: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    pub n_preferences: usize,
    pub tasks: String,
    pub n_variants: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepConfig {
    pub grid: Vec<f64>,
    pub jobs: usize,
}

/// Fully resolved configuration; echoed into every manifest.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dpo: DpoConfig,
    pub data: DataConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(bytes))
    }
}

pub fn read_file(path: &Path) -> Result<FileConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(anyhow::Error::from)
    } else {
        toml::from_str(&text).map_err(anyhow::Error::from)
    };
    parsed.with_context(|| format!("invalid config {}", path.display()))
}

macro_rules! pick {
    ($($src:expr),+ ; $default:expr) => {{
        let v = None;
        $(let v = v.or($src);)+
        v.unwrap_or($default)
    }};
}

pub fn resolve(file: FileConfig, flags: &Overrides) -> Result<RunConfig> {
    let md = ModelConfig {
        vocab_size: ByteTokenizer::VOCAB_SIZE,
        ..ModelConfig::default()
    };
    let m = &file.model;
    if let Some(v) = m.vocab_size {
        if v != ByteTokenizer::VOCAB_SIZE {
            bail!("model.vocab_size is fixed by the byte tokenizer at {}", ByteTokenizer::VOCAB_SIZE);
        }
    }
    let model = ModelConfig {
        vocab_size: md.vocab_size,
        context_len: pick!(m.context_len; md.context_len),
        d_model: pick!(m.d_model; md.d_model),
        n_heads: pick!(m.n_heads; md.n_heads),
        n_layers: pick!(m.n_layers; md.n_layers),
        d_ff: pick!(m.d_ff; md.d_ff),
        seed: pick!(flags.seed, m.seed; md.seed),
    };
    model.validate()?;

    let t = &file.train;
    let td = TrainConfig::default();
    if t.preset.is_some() && t.epochs.is_some() {
        bail!("train.preset and train.epochs are mutually exclusive");
    }
    let epochs = match flags.preset.or(t.preset) {
        Some(p) => p.epochs(),
        None => pick!(t.epochs; td.epochs),
    };
    let weights = WeightConfig::new(
        pick!(flags.lambda_p, t.lambda_p; td.weights.lambda_p()),
        pick!(flags.lambda_r, t.lambda_r; td.weights.lambda_r()),
    )?;
    let train = TrainConfig {
        lr_peak: pick!(t.lr_peak; td.lr_peak),
        batch_size: pick!(t.batch_size; td.batch_size),
        epochs,
        weight_decay: pick!(t.weight_decay; td.weight_decay),
        warmup_frac: pick!(t.warmup_frac; td.warmup_frac),
        grad_clip: pick!(t.grad_clip; td.grad_clip),
        seed: pick!(flags.seed, t.seed; td.seed),
        weights,
    };
    train.validate()?;

    let d = &file.dpo;
    let dd = DpoConfig::default();
    let dpo = DpoConfig {
        beta: pick!(d.beta; dd.beta),
        lr: pick!(d.lr; dd.lr),
        batch_size: pick!(d.batch_size; dd.batch_size),
        epochs: pick!(d.epochs; dd.epochs),
        warmup_frac: pick!(d.warmup_frac; dd.warmup_frac),
        weight_decay: pick!(d.weight_decay; dd.weight_decay),
        grad_clip: pick!(d.grad_clip; dd.grad_clip),
        seed: pick!(flags.seed, d.seed; dd.seed),
    };
    dpo.validate()?;

    let f = file.data;
    let data = DataConfig {
        train: f.train,
        eval: f.eval,
        preferences: f.preferences,
        corpus: f.corpus,
        init: flags.init.clone().or(f.init),
        seed: pick!(flags.seed, f.seed; 0),
        n_train: pick!(f.n_train; 64),
        n_eval: pick!(f.n_eval; 16),
        n_preferences: pick!(f.n_preferences; 64),
        tasks: f.tasks.unwrap_or_else(|| "reverse,count,repeat,uppercase,arithmetic".into()),
        n_variants: pick!(f.n_variants; 3),
    };
    wit_core::data::TaskMix::parse(&data.tasks)?;
    if data.n_train == 0 || data.n_eval == 0 || data.n_preferences == 0 {
        bail!("data.n_train, data.n_eval and data.n_preferences must be positive");
    }
    if data.n_variants < 2 {
        bail!("data.n_variants must be at least 2");
    }
    for p in [&data.train, &data.eval, &data.preferences, &data.corpus, &data.init]
        .into_iter()
        .flatten()
    {
        if !p.exists() {
            bail!("referenced path {} does not exist", p.display());
        }
    }

    let sweep = SweepConfig {
        grid: file.sweep.grid.unwrap_or_else(|| GRID_VALUES.to_vec()),
        jobs: pick!(flags.jobs, file.sweep.jobs; 1),
    };
    wit_core::sweep::grid_cells(&sweep.grid)?;
    if sweep.jobs == 0 {
        bail!("sweep.jobs must be at least 1");
    }

    Ok(RunConfig {
        out_dir: pick!(flags.out_dir.clone(), file.out_dir; PathBuf::from("out")),
        model,
        train,
        dpo,
        data,
        sweep,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> FileConfig {
        toml::from_str(text).unwrap()
    }

    #[test]
    fn precedence_is_flag_then_file_then_default() {
        let file = parse("[train]\nlambda_p = 0.4\nlambda_r = 0.6\nlr_peak = 0.01\n");
        let cfg = resolve(file, &Overrides::default()).unwrap();
        assert_eq!(cfg.train.weights, WeightConfig::new(0.4, 0.6).unwrap());
        assert_eq!(cfg.train.lr_peak, 0.01);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);

        let file = parse("[train]\nlambda_p = 0.4\nlambda_r = 0.6\n");
        let flags = Overrides {
            lambda_p: Some(0.2),
            seed: Some(9),
            ..Overrides::default()
        };
        let cfg = resolve(file, &flags).unwrap();
        assert_eq!(cfg.train.weights, WeightConfig::new(0.2, 0.6).unwrap());
        assert_eq!((cfg.train.seed, cfg.model.seed, cfg.dpo.seed), (9, 9, 9));
    }

    #[test]
    fn presets_set_epochs() {
        let flags = Overrides {
            preset: Some(Preset::Lima),
            ..Overrides::default()
        };
        assert_eq!(resolve(parse("[train]\nepochs = 3\n"), &flags).unwrap().train.epochs, 5);
        assert_eq!(resolve(parse("[train]\npreset = \"tulu\"\n"), &Overrides::default()).unwrap().train.epochs, 1);
        assert!(resolve(parse("[train]\npreset = \"tulu\"\nepochs = 3\n"), &Overrides::default()).is_err());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(toml::from_str::<FileConfig>("[train]\nbogus = 1\n").is_err());
        let both_zero = Overrides {
            lambda_p: Some(0.0),
            lambda_r: Some(0.0),
            ..Overrides::default()
        };
        let err = resolve(FileConfig::default(), &both_zero).unwrap_err().to_string();
        assert!(err.contains("both be zero"), "{err}");
        assert!(resolve(parse("[model]\nd_model = 30\nn_heads = 4\n"), &Overrides::default()).is_err());
        assert!(resolve(parse("[data]\ntrain = \"/no/such/file.jsonl\"\n"), &Overrides::default()).is_err());
        assert!(resolve(parse("[sweep]\ngrid = [0.0, 1.5]\n"), &Overrides::default()).is_err());
    }
}
