//! Prompt/response data: ingestion, tokenisation, loss-weight masks and
//! synthetic verifiable tasks.

mod synthetic;
mod tokenizer;
mod weights;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub use synthetic::{gen_preference_tasks, gen_synthetic_tasks, TaskChecker, TaskFamily, TaskMix};
pub use tokenizer::{ByteTokenizer, Tokenizer};
pub use weights::{build_weight_mask, WeightConfig, WeightMask};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawExample {
    pub prompt: String,
    pub response: String,
}

impl RawExample {
    pub fn new(prompt: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            response: response.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawPreference {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
}

/// Whether empty prompts are acceptable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenizeMode {
    Instruction,
    Pretraining,
}

/// Token ids of one prompt/response pair. The response includes the
/// trailing EOS; BOS is added only when the pair is packed.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenizedExample {
    pub prompt_ids: Vec<u32>,
    pub response_ids: Vec<u32>,
}

impl TokenizedExample {
    pub fn new(prompt_ids: Vec<u32>, response_ids: Vec<u32>) -> Result<Self> {
        if response_ids.is_empty() {
            return Err(Error::Invalid("response must contain at least one token".into()));
        }
        Ok(Self {
            prompt_ids,
            response_ids,
        })
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_ids.len()
    }

    pub fn response_len(&self) -> usize {
        self.response_ids.len()
    }

    /// Number of predicted positions, `|P| + |R|`.
    pub fn target_len(&self) -> usize {
        self.prompt_ids.len() + self.response_ids.len()
    }

    /// Model inputs `[BOS, P.., R[..-1]]` and next-token targets `[P.., R..]`.
    pub fn packed(&self, bos: u32) -> (Vec<usize>, Vec<usize>) {
        let targets: Vec<usize> = self
            .prompt_ids
            .iter()
            .chain(&self.response_ids)
            .map(|&t| t as usize)
            .collect();
        let mut inputs = Vec::with_capacity(targets.len());
        inputs.push(bos as usize);
        inputs.extend_from_slice(&targets[..targets.len() - 1]);
        (inputs, targets)
    }
}

/// Ordered, non-empty list of tokenised examples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    examples: Vec<TokenizedExample>,
}

impl Dataset {
    pub fn new(examples: Vec<TokenizedExample>) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self { examples })
    }

    pub fn examples(&self) -> &[TokenizedExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&TokenizedExample> {
        self.examples.get(i)
    }

    /// Longest `|P| + |R| + 1` over the dataset.
    pub fn max_packed_len(&self) -> usize {
        self.examples.iter().map(|e| e.target_len() + 1).max().unwrap_or(0)
    }

    /// Hex SHA-256 over all token ids, prompt/response boundaries included.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for ex in &self.examples {
            h.update((ex.prompt_ids.len() as u64).to_le_bytes());
            for t in &ex.prompt_ids {
                h.update(t.to_le_bytes());
            }
            h.update((ex.response_ids.len() as u64).to_le_bytes());
            for t in &ex.response_ids {
                h.update(t.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Tokenises one pair. `index` is only used to label errors.
pub fn tokenize_pair(
    raw: &RawExample,
    tokenizer: &dyn Tokenizer,
    context_len: usize,
    mode: TokenizeMode,
    index: usize,
) -> Result<TokenizedExample> {
    if raw.response.is_empty() {
        return Err(Error::Example {
            index,
            reason: "empty response".into(),
        });
    }
    if raw.prompt.is_empty() && mode == TokenizeMode::Instruction {
        return Err(Error::Example {
            index,
            reason: "empty prompt in instruction data".into(),
        });
    }
    let prompt_ids = tokenizer.encode(&raw.prompt);
    let mut response_ids = tokenizer.encode(&raw.response);
    response_ids.push(tokenizer.eos());
    let packed = prompt_ids.len() + response_ids.len() + 1;
    if packed > context_len {
        return Err(Error::Example {
            index,
            reason: format!("packed length {packed} exceeds context length {context_len}"),
        });
    }
    Ok(TokenizedExample {
        prompt_ids,
        response_ids,
    })
}

pub fn tokenize_all(
    raws: &[RawExample],
    tokenizer: &dyn Tokenizer,
    context_len: usize,
    mode: TokenizeMode,
) -> Result<Dataset> {
    let examples = raws
        .iter()
        .enumerate()
        .map(|(i, r)| tokenize_pair(r, tokenizer, context_len, mode, i))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(examples)
}

fn read_jsonl(path: &Path, fields: &[&str]) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            reason: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            reason: "expected a JSON object".into(),
        })?;
        let mut row = Vec::with_capacity(fields.len());
        for &field in fields {
            match obj.get(field) {
                Some(Value::String(s)) => row.push(s.clone()),
                Some(_) => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: line_no,
                        reason: format!("field `{field}` must be a string"),
                    })
                }
                None => {
                    return Err(Error::MissingField {
                        path: path.to_path_buf(),
                        line: line_no,
                        field: field.to_string(),
                    })
                }
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(rows)
}

/// Reads `{"prompt": .., "response": ..}` objects, one per line.
pub fn load_jsonl(path: &Path) -> Result<Vec<RawExample>> {
    Ok(read_jsonl(path, &["prompt", "response"])?
        .into_iter()
        .map(|mut row| {
            let response = row.pop().unwrap();
            let prompt = row.pop().unwrap();
            RawExample { prompt, response }
        })
        .collect())
}

/// Reads `{"prompt": .., "chosen": .., "rejected": ..}` objects.
pub fn load_preference_jsonl(path: &Path) -> Result<Vec<RawPreference>> {
    Ok(read_jsonl(path, &["prompt", "chosen", "rejected"])?
        .into_iter()
        .map(|mut row| {
            let rejected = row.pop().unwrap();
            let chosen = row.pop().unwrap();
            let prompt = row.pop().unwrap();
            RawPreference {
                prompt,
                chosen,
                rejected,
            }
        })
        .collect())
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Splits a token stream into prompt-less examples of at most
/// `context_len - 1` tokens each.
pub fn chunk_corpus(text: &str, tokenizer: &dyn Tokenizer, context_len: usize) -> Result<Dataset> {
    if context_len < 2 {
        return Err(Error::Config("context length must be at least 2".into()));
    }
    let ids = tokenizer.encode(text);
    let examples = ids
        .chunks(context_len - 1)
        .map(|c| TokenizedExample::new(Vec::new(), c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(examples)
}

pub fn load_corpus(path: &Path, tokenizer: &dyn Tokenizer, context_len: usize) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    chunk_corpus(&text, tokenizer, context_len)
}
