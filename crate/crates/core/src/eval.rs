//! Evaluation metrics: exact match on verifiable tasks, length-normalised
//! log-prob profiles, prompt sensitivity and relative gains.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, RawExample, TaskChecker, TokenizedExample, Tokenizer};
use crate::error::{Error, Result};
use crate::model::{example_logprobs, generate_greedy, ModelParams};

/// Greedy-decodes every prompt and counts checker passes.
pub fn exact_match_accuracy(
    params: &ModelParams,
    eval_set: &[RawExample],
    checker: &TaskChecker,
    tokenizer: &(dyn Tokenizer + Sync),
) -> Result<f64> {
    if eval_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let ctx = params.config().context_len;
    let passed = eval_set
        .par_iter()
        .map(|ex| {
            let mut prefix = vec![tokenizer.bos()];
            prefix.extend(tokenizer.encode(&ex.prompt));
            if prefix.len() >= ctx {
                return Err(Error::Invalid(format!(
                    "prompt of {} tokens leaves no room to generate",
                    prefix.len()
                )));
            }
            let out = generate_greedy(params, &prefix, ctx - prefix.len(), tokenizer.eos())?;
            Ok(checker.check(&ex.prompt, &tokenizer.decode(&out)))
        })
        .collect::<Result<Vec<bool>>>()?
        .into_iter()
        .filter(|&ok| ok)
        .count();
    Ok(passed as f64 / eval_set.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileEntry {
    /// Absent when the prompt is empty.
    pub avg_prompt_logprob: Option<f64>,
    pub avg_response_logprob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogProbProfile {
    pub examples: Vec<ProfileEntry>,
}

impl LogProbProfile {
    /// Mean of the per-example prompt averages that are defined.
    pub fn mean_prompt(&self) -> Option<f64> {
        let v: Vec<f64> = self.examples.iter().filter_map(|e| e.avg_prompt_logprob).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mean_response(&self) -> f64 {
        self.examples.iter().map(|e| e.avg_response_logprob).sum::<f64>() / self.examples.len() as f64
    }
}

/// Splits per-target log-probs into the two length-normalised averages.
pub fn profile_entry(logprobs: &[f64], prompt_len: usize) -> ProfileEntry {
    let (p, r) = logprobs.split_at(prompt_len);
    ProfileEntry {
        avg_prompt_logprob: (!p.is_empty()).then(|| p.iter().sum::<f64>() / p.len() as f64),
        avg_response_logprob: r.iter().sum::<f64>() / r.len() as f64,
    }
}

pub fn example_profile(params: &ModelParams, ex: &TokenizedExample, bos: u32) -> Result<ProfileEntry> {
    Ok(profile_entry(&example_logprobs(params, ex, bos)?, ex.prompt_len()))
}

pub fn logprob_profile(params: &ModelParams, dataset: &Dataset, bos: u32) -> Result<LogProbProfile> {
    let examples = dataset
        .examples()
        .par_iter()
        .map(|ex| example_profile(params, ex, bos))
        .collect::<Result<Vec<_>>>()?;
    Ok(LogProbProfile { examples })
}

/// Prompt rewordings that should not change the answer, sharing one target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSet {
    pub prompts: Vec<Vec<u32>>,
    pub response: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub set_scores: Vec<f64>,
    pub aggregate: f64,
}

/// Mean absolute pairwise difference within each set of response averages,
/// then the mean over sets.
pub fn sensitivity_from_scores(sets: &[Vec<f64>]) -> Result<SensitivityReport> {
    if sets.is_empty() {
        return Err(Error::Invalid("no variant sets".into()));
    }
    let mut set_scores = Vec::with_capacity(sets.len());
    for (i, s) in sets.iter().enumerate() {
        if s.len() < 2 {
            return Err(Error::Invalid(format!("variant set {i} has {} prompt(s), need at least 2", s.len())));
        }
        let mut total = 0.0;
        for a in 0..s.len() {
            for b in a + 1..s.len() {
                total += (s[a] - s[b]).abs();
            }
        }
        let pairs = s.len() * (s.len() - 1) / 2;
        set_scores.push(total / pairs as f64);
    }
    let aggregate = set_scores.iter().sum::<f64>() / set_scores.len() as f64;
    Ok(SensitivityReport { set_scores, aggregate })
}

pub fn sensitivity_index(params: &ModelParams, sets: &[VariantSet], bos: u32) -> Result<SensitivityReport> {
    let scores = sets
        .iter()
        .map(|set| {
            set.prompts
                .par_iter()
                .map(|p| {
                    let ex = TokenizedExample::new(p.clone(), set.response.clone())?;
                    Ok(example_profile(params, &ex, bos)?.avg_response_logprob)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    sensitivity_from_scores(&scores)
}

const FILLERS: [&str; 4] = ["please", "kindly", "now", "just"];

/// One intent-preserving perturbation of `prompt`: an adjacent character
/// swap or a case flip inside the leading instruction word, or a filler word
/// in front of it. Quoted characters, counts and the payload after the final
/// `": "` are never touched.
pub fn perturb_prompt(prompt: &str, rng: &mut impl Rng) -> String {
    let word_end = prompt
        .find([' ', ':'])
        .unwrap_or(prompt.len());
    let (word, rest) = prompt.split_at(word_end);
    let mut chars: Vec<char> = word.chars().collect();
    let choice = if chars.len() < 2 { 2 } else { rng.random_range(0..3) };
    match choice {
        0 => {
            // swap two distinct neighbours so the text actually changes
            let spots: Vec<usize> = (0..chars.len() - 1).filter(|&i| chars[i] != chars[i + 1]).collect();
            if spots.is_empty() {
                return format!("{} {prompt}", FILLERS[rng.random_range(0..FILLERS.len())]);
            }
            let i = spots[rng.random_range(0..spots.len())];
            chars.swap(i, i + 1);
        }
        1 => {
            let i = rng.random_range(0..chars.len());
            let c = chars[i];
            chars[i] = if c.is_ascii_uppercase() {
                c.to_ascii_lowercase()
            } else if c.is_ascii_lowercase() {
                c.to_ascii_uppercase()
            } else {
                return format!("{} {prompt}", FILLERS[rng.random_range(0..FILLERS.len())]);
            };
        }
        _ => return format!("{} {prompt}", FILLERS[rng.random_range(0..FILLERS.len())]),
    }
    chars.into_iter().collect::<String>() + rest
}

/// Builds one set per example: the original prompt plus `n_variants - 1`
/// seeded perturbations, all sharing the example's response (with EOS).
pub fn make_variant_sets(
    examples: &[RawExample],
    n_variants: usize,
    seed: u64,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<VariantSet>> {
    if n_variants < 2 {
        return Err(Error::Invalid("need at least 2 variants per set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(examples
        .iter()
        .map(|ex| {
            let mut prompts = vec![tokenizer.encode(&ex.prompt)];
            for _ in 1..n_variants {
                prompts.push(tokenizer.encode(&perturb_prompt(&ex.prompt, &mut rng)));
            }
            let mut response = tokenizer.encode(&ex.response);
            response.push(tokenizer.eos());
            VariantSet { prompts, response }
        })
        .collect())
}

/// Percentage change from `baseline` to `candidate`.
pub fn relative_gain(baseline: f64, candidate: f64) -> Result<f64> {
    if !(baseline > 0.0) {
        return Err(Error::Invalid(format!("relative gain needs a positive baseline, got {baseline}")));
    }
    Ok(100.0 * (candidate - baseline) / baseline)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: Option<f64>,
    pub mean_prompt_logprob: Option<f64>,
    pub mean_response_logprob: f64,
    pub sensitivity: Option<SensitivityReport>,
    pub profile: LogProbProfile,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// `label,accuracy` rows.
pub fn accuracy_csv(rows: &[(String, f64)]) -> String {
    let mut out = String::from("label,accuracy\n");
    for (label, acc) in rows {
        writeln!(out, "{label},{acc}").unwrap();
    }
    out
}
