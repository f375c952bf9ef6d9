//! JSON checkpoint container: model config plus named tensors. Floats are
//! written in shortest round-trip form, so save → load is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const FORMAT: &str = "wit-checkpoint/1";

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    config: ModelConfig,
    tensors: Vec<NamedTensor>,
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        format: FORMAT.to_string(),
        config: params.config().clone(),
        tensors: params
            .names()
            .iter()
            .zip(params.tensors())
            .map(|(name, t)| NamedTensor {
                name: name.clone(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect(),
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string(&file)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    if file.format != FORMAT {
        return Err(Error::Invalid(format!(
            "{}: unsupported checkpoint format `{}`",
            path.display(),
            file.format
        )));
    }
    let tensors = file
        .tensors
        .into_iter()
        .map(|nt| Ok((nt.name, Tensor::new(nt.shape, nt.data)?)))
        .collect::<Result<Vec<_>>>()?;
    ModelParams::from_tensors(file.config, tensors)
}
