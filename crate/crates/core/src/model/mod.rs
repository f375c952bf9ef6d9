//! Small pre-norm decoder-only transformer.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint};

use crate::data::TokenizedExample;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

const INIT_STD: f64 = 0.02;
const PER_LAYER: usize = 13;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 259,
            context_len: 48,
            d_model: 32,
            n_heads: 4,
            n_layers: 2,
            d_ff: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("model.vocab_size must be at least 2".into()));
        }
        if self.context_len < 2 {
            return Err(Error::Config("model.context_len must be at least 2".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (v, c, d, f) = (self.vocab_size, self.context_len, self.d_model, self.d_ff);
        let mut out = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![c, d]),
        ];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.extend([
                (p("ln1.gamma"), vec![d]),
                (p("ln1.beta"), vec![d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.wo"), vec![d, d]),
                (p("attn.bo"), vec![d]),
                (p("ln2.gamma"), vec![d]),
                (p("ln2.beta"), vec![d]),
                (p("mlp.w1"), vec![d, f]),
                (p("mlp.b1"), vec![f]),
                (p("mlp.w2"), vec![f, d]),
                (p("mlp.b2"), vec![d]),
            ]);
        }
        out.extend([
            ("ln_f.gamma".to_string(), vec![d]),
            ("ln_f.beta".to_string(), vec![d]),
            ("w_out".to_string(), vec![d, v]),
        ]);
        out
    }
}

/// All learnable tensors of the model, in the order given by
/// [`ModelConfig::param_shapes`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn from_tensors(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let layout = config.param_shapes();
        if layout.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), (got_name, t)) in layout.iter().zip(&tensors) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::Shape(format!(
                    "expected {name} {shape:?}, got {got_name} {:?}",
                    t.shape()
                )));
            }
            t.ensure_finite("checkpoint")?;
        }
        let (names, tensors) = tensors.into_iter().unzip();
        Ok(Self {
            config,
            names,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Deterministic N(0, 0.02²) initialisation; residual output projections
/// are further scaled by `1/sqrt(2·n_layers)`, layer-norm gains start at 1
/// and biases at 0.
pub fn init_params(cfg: &ModelConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let residual_std = INIT_STD / (2.0 * cfg.n_layers as f64).sqrt();
    let tensors = cfg
        .param_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let t = if name.ends_with("gamma") {
                Tensor::full(&shape, 1.0)
            } else if name.ends_with("beta") || is_bias(&name) {
                Tensor::zeros(&shape)
            } else {
                let std = if name.ends_with("attn.wo") || name.ends_with("mlp.w2") {
                    residual_std
                } else {
                    INIT_STD
                };
                let normal = Normal::new(0.0, std).expect("positive std");
                let n = shape.iter().product();
                let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
                Tensor::new(shape.clone(), data).unwrap()
            };
            (name, t)
        })
        .collect();
    ModelParams::from_tensors(cfg.clone(), tensors)
}

fn is_bias(name: &str) -> bool {
    [".bo", ".b1", ".b2"].iter().any(|s| name.ends_with(s))
}

fn check_ids(cfg: &ModelConfig, ids: &[usize]) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::Invalid("empty input sequence".into()));
    }
    if ids.len() > cfg.context_len {
        return Err(Error::Invalid(format!(
            "sequence of length {} exceeds context length {}",
            ids.len(),
            cfg.context_len
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Invalid(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

/// Registers all parameters on `g`, in storage order.
pub fn param_vars(g: &mut Graph, params: &ModelParams) -> Vec<Var> {
    params
        .tensors
        .iter()
        .enumerate()
        .map(|(i, t)| g.param(i, t))
        .collect()
}

/// Records a forward pass on `g`, returning `[T×V]` next-token log-probs.
pub fn forward_graph(g: &mut Graph, cfg: &ModelConfig, vars: &[Var], ids: &[usize]) -> Result<Var> {
    check_ids(cfg, ids)?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let tok = g.embedding(vars[0], ids);
    let pos = g.embedding(vars[1], &positions);
    let mut x = g.add(tok, pos);
    for l in 0..cfg.n_layers {
        let p = &vars[2 + l * PER_LAYER..2 + (l + 1) * PER_LAYER];
        let h = g.layer_norm(x, p[0], p[1]);
        let q = g.matmul(h, p[2]);
        let k = g.matmul(h, p[3]);
        let v = g.matmul(h, p[4]);
        let a = g.causal_attention(q, k, v, cfg.n_heads);
        let o = g.matmul(a, p[5]);
        let o = g.add_row_bias(o, p[6]);
        x = g.add(x, o);

        let h = g.layer_norm(x, p[7], p[8]);
        let f = g.matmul(h, p[9]);
        let f = g.add_row_bias(f, p[10]);
        let f = g.gelu(f);
        let f = g.matmul(f, p[11]);
        let f = g.add_row_bias(f, p[12]);
        x = g.add(x, f);
    }
    let tail = 2 + cfg.n_layers * PER_LAYER;
    let h = g.layer_norm(x, vars[tail], vars[tail + 1]);
    let logits = g.matmul(h, vars[tail + 2]);
    Ok(g.log_softmax(logits))
}

/// Next-token log-probabilities: row `t` is the distribution over the token
/// following `ids[..=t]`.
pub fn forward(params: &ModelParams, ids: &[usize]) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = param_vars(&mut g, params);
    let out = forward_graph(&mut g, &params.config, &vars, ids)?;
    g.fault()?;
    Ok(g.value(out).clone())
}

/// `log P(targets[t] | inputs[..=t])` for every position.
pub fn target_logprobs(params: &ModelParams, inputs: &[usize], targets: &[usize]) -> Result<Vec<f64>> {
    if inputs.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} inputs vs {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    let logp = forward(params, inputs)?;
    targets
        .iter()
        .enumerate()
        .map(|(t, &y)| {
            if y >= params.config.vocab_size {
                Err(Error::Invalid(format!("target id {y} outside vocabulary")))
            } else {
                Ok(logp.get2(t, y))
            }
        })
        .collect()
}

/// Per-target log-probs of a packed example, prompt positions first.
pub fn example_logprobs(params: &ModelParams, example: &TokenizedExample, bos: u32) -> Result<Vec<f64>> {
    let (inputs, targets) = example.packed(bos);
    target_logprobs(params, &inputs, &targets)
}

/// Argmax decoding from `prefix` (which should start with BOS). Stops after
/// `max_new` tokens, at `eos`, or when the context is full. The returned
/// continuation excludes the EOS.
pub fn generate_greedy(params: &ModelParams, prefix: &[u32], max_new: usize, eos: u32) -> Result<Vec<u32>> {
    let mut seq: Vec<usize> = prefix.iter().map(|&t| t as usize).collect();
    check_ids(&params.config, &seq)?;
    let mut out = Vec::new();
    while out.len() < max_new && seq.len() < params.config.context_len {
        let logp = forward(params, &seq)?;
        let last = logp.row(seq.len() - 1);
        let mut best = 0;
        for (i, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = i;
            }
        }
        if best as u32 == eos {
            break;
        }
        out.push(best as u32);
        seq.push(best);
    }
    Ok(out)
}
