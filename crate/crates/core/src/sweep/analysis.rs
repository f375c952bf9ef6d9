use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetCharacteristics {
    pub avg_prompt_len: f64,
    pub avg_generation_ratio: f64,
    pub ngram_diversity: f64,
}

/// Prompt length, response/prompt ratio and prompt n-gram diversity.
///
/// Diversity pools every prompt's n-grams, takes distinct/total for each
/// `n` in `1..=n_max` that has at least one n-gram, and averages those.
pub fn dataset_characteristics(dataset: &Dataset, n_max: usize) -> Result<DatasetCharacteristics> {
    if n_max == 0 {
        return Err(Error::Invalid("n_max must be at least 1".into()));
    }
    let ex = dataset.examples();
    let avg_prompt_len = ex.iter().map(|e| e.prompt_len() as f64).sum::<f64>() / ex.len() as f64;
    let ratios: Vec<f64> = ex
        .iter()
        .filter(|e| e.prompt_len() > 0)
        .map(|e| e.response_len() as f64 / e.prompt_len() as f64)
        .collect();
    if ratios.is_empty() {
        return Err(Error::Invalid("every prompt is empty; generation ratio is undefined".into()));
    }
    let avg_generation_ratio = ratios.iter().sum::<f64>() / ratios.len() as f64;

    let mut per_n = Vec::new();
    for n in 1..=n_max {
        let mut seen = HashSet::new();
        let mut total = 0usize;
        for e in ex {
            for w in e.prompt_ids.windows(n) {
                seen.insert(w);
                total += 1;
            }
        }
        if total > 0 {
            per_n.push(seen.len() as f64 / total as f64);
        }
    }
    let ngram_diversity = per_n.iter().sum::<f64>() / per_n.len() as f64;
    Ok(DatasetCharacteristics {
        avg_prompt_len,
        avg_generation_ratio,
        ngram_diversity,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationMethod {
    Spearman,
    Kendall,
}

impl std::str::FromStr for CorrelationMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spearman" => Ok(Self::Spearman),
            "kendall" => Ok(Self::Kendall),
            other => Err(Error::Invalid(format!("unknown correlation method `{other}`"))),
        }
    }
}

/// Spearman's ρ (Pearson on average ranks) or Kendall's τ-b. `Ok(None)`
/// when either input is constant.
pub fn rank_correlation(x: &[f64], y: &[f64], method: CorrelationMethod) -> Result<Option<f64>> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("{} vs {} observations", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::Invalid("rank correlation needs at least 2 observations".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Invalid("rank correlation inputs must be finite".into()));
    }
    Ok(match method {
        CorrelationMethod::Spearman => pearson(&average_ranks(x), &average_ranks(y)),
        CorrelationMethod::Kendall => kendall_tau_b(x, y),
    })
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Knight's O(n log n) τ-b: sort by (x, y), count ties, then count the
/// discordant pairs as the swaps of a merge sort on y.
fn kendall_tau_b(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(y[a].total_cmp(&y[b])));
    let pairs = |k: u64| k * k.saturating_sub(1) / 2;

    let (mut ties_x, mut ties_xy) = (0u64, 0u64);
    let (mut run_x, mut run_xy) = (1u64, 1u64);
    for w in idx.windows(2) {
        let (a, b) = (w[0], w[1]);
        if x[a] == x[b] {
            run_x += 1;
            if y[a] == y[b] {
                run_xy += 1;
            } else {
                ties_xy += pairs(run_xy);
                run_xy = 1;
            }
        } else {
            ties_x += pairs(run_x);
            ties_xy += pairs(run_xy);
            run_x = 1;
            run_xy = 1;
        }
    }
    ties_x += pairs(run_x);
    ties_xy += pairs(run_xy);

    let mut ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    let swaps = merge_count(&mut ys);

    let mut ties_y = 0u64;
    let mut run_y = 1u64;
    for w in ys.windows(2) {
        if w[0] == w[1] {
            run_y += 1;
        } else {
            ties_y += pairs(run_y);
            run_y = 1;
        }
    }
    ties_y += pairs(run_y);

    let n0 = pairs(n as u64);
    if n0 == ties_x || n0 == ties_y {
        return None;
    }
    let num = n0 as i128 - ties_x as i128 - ties_y as i128 + ties_xy as i128 - 2 * swaps as i128;
    let den = ((n0 - ties_x) as f64 * (n0 - ties_y) as f64).sqrt();
    Some((num as f64 / den).clamp(-1.0, 1.0))
}

/// Sorts `v` ascending and returns the number of strictly inverted pairs.
fn merge_count(v: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid]) + merge_count(&mut v[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            swaps += (mid - i) as u64;
            merged.push(v[j]);
            j += 1;
        } else {
            merged.push(v[i]);
            i += 1;
        }
    }
    merged.extend_from_slice(&v[i..mid]);
    merged.extend_from_slice(&v[j..]);
    v.copy_from_slice(&merged);
    swaps
}

/// Optimal weights found for one context, labelled by tags such as
/// `dataset`, `benchmark` or `model`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimumEntry {
    pub tags: BTreeMap<String, String>,
    pub lambda_p: f64,
    pub lambda_r: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimaSummary {
    pub mean_lambda_p: f64,
    pub mean_lambda_r: f64,
    pub count: usize,
}

/// Mean optimal weights per value of tag `group_by`. Entries without that
/// tag are left out; an empty group simply does not appear.
pub fn summarize_optima(entries: &[OptimumEntry], group_by: &str) -> Result<BTreeMap<String, OptimaSummary>> {
    if entries.is_empty() {
        return Err(Error::Invalid("no optima to summarise".into()));
    }
    let mut acc: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    for e in entries {
        if let Some(tag) = e.tags.get(group_by) {
            let a = acc.entry(tag.clone()).or_default();
            a.0 += e.lambda_p;
            a.1 += e.lambda_r;
            a.2 += 1;
        }
    }
    Ok(acc
        .into_iter()
        .map(|(k, (p, r, n))| {
            (
                k,
                OptimaSummary {
                    mean_lambda_p: p / n as f64,
                    mean_lambda_r: r / n as f64,
                    count: n,
                },
            )
        })
        .collect())
}
