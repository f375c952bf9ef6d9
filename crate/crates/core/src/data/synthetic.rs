//! Templated tasks whose answers can be checked programmatically.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{RawExample, RawPreference};
use crate::error::{Error, Result};

const ALPHABET: &[u8] = b"abcdefgh";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskFamily {
    Reverse,
    Count,
    Repeat,
    Uppercase,
    Arithmetic,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 5] = [
        TaskFamily::Reverse,
        TaskFamily::Count,
        TaskFamily::Repeat,
        TaskFamily::Uppercase,
        TaskFamily::Arithmetic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::Reverse => "reverse",
            TaskFamily::Count => "count",
            TaskFamily::Repeat => "repeat",
            TaskFamily::Uppercase => "uppercase",
            TaskFamily::Arithmetic => "arithmetic",
        }
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskFamily::ALL
            .into_iter()
            .find(|t| t.name() == s.trim())
            .ok_or_else(|| Error::UnknownTask(s.trim().to_string()))
    }
}

/// Families sampled uniformly when generating tasks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskMix(Vec<TaskFamily>);

impl TaskMix {
    pub fn new(families: Vec<TaskFamily>) -> Result<Self> {
        if families.is_empty() {
            return Err(Error::Config("task mix must name at least one family".into()));
        }
        Ok(Self(families))
    }

    pub fn all() -> Self {
        Self(TaskFamily::ALL.to_vec())
    }

    pub fn only(family: TaskFamily) -> Self {
        Self(vec![family])
    }

    /// Parses a comma-separated list such as `"reverse,count"`.
    pub fn parse(list: &str) -> Result<Self> {
        let families = list
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<_>>>()?;
        Self::new(families)
    }

    pub fn families(&self) -> &[TaskFamily] {
        &self.0
    }
}

fn random_word(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(3..=5);
    (0..n)
        .map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())] as char)
        .collect()
}

fn sample(rng: &mut ChaCha8Rng, family: TaskFamily) -> RawExample {
    match family {
        TaskFamily::Reverse => {
            let w = random_word(rng);
            RawExample::new(format!("Reverse: {w}"), w.chars().rev().collect::<String>())
        }
        TaskFamily::Count => {
            let w = random_word(rng);
            let c = w.as_bytes()[rng.random_range(0..w.len())] as char;
            let n = w.chars().filter(|&x| x == c).count();
            RawExample::new(format!("Count '{c}' in: {w}"), n.to_string())
        }
        TaskFamily::Repeat => {
            let w = random_word(rng);
            let k = rng.random_range(2..=3);
            RawExample::new(format!("Repeat {k}x: {w}"), w.repeat(k))
        }
        TaskFamily::Uppercase => {
            let w = random_word(rng);
            RawExample::new(format!("Uppercase: {w}"), w.to_ascii_uppercase())
        }
        TaskFamily::Arithmetic => {
            let a: u32 = rng.random_range(0..50);
            let b: u32 = rng.random_range(0..50);
            RawExample::new(format!("Add: {a}+{b}"), (a + b).to_string())
        }
    }
}

/// Generates `n` task pairs. The same seed always yields the same pairs.
pub fn gen_synthetic_tasks(seed: u64, n: usize, mix: &TaskMix) -> Result<(Vec<RawExample>, TaskChecker)> {
    if n == 0 {
        return Err(Error::Config("need at least one synthetic task".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..n)
        .map(|_| {
            let family = mix.0[rng.random_range(0..mix.0.len())];
            sample(&mut rng, family)
        })
        .collect();
    Ok((examples, TaskChecker))
}

/// Preference triples: the correct answer is chosen, a near miss rejected.
pub fn gen_preference_tasks(seed: u64, n: usize, mix: &TaskMix) -> Result<Vec<RawPreference>> {
    let (tasks, _) = gen_synthetic_tasks(seed, n, mix)?;
    Ok(tasks
        .into_iter()
        .map(|t| {
            let mut rejected = near_miss(&t.prompt, &t.response);
            if rejected == t.response {
                rejected.push('x');
            }
            RawPreference {
                prompt: t.prompt,
                chosen: t.response,
                rejected,
            }
        })
        .collect())
}

fn near_miss(prompt: &str, answer: &str) -> String {
    let (_, payload) = split_prompt(prompt).unwrap_or(("", answer));
    match identify(prompt) {
        Some(TaskFamily::Reverse) | Some(TaskFamily::Uppercase) => payload.to_string(),
        Some(TaskFamily::Repeat) => payload.to_string(),
        Some(TaskFamily::Count) | Some(TaskFamily::Arithmetic) => {
            let n: u64 = answer.parse().unwrap_or(0);
            (n + 1).to_string()
        }
        None => format!("{answer}x"),
    }
}

fn split_prompt(prompt: &str) -> Option<(&str, &str)> {
    prompt.rsplit_once(": ")
}

fn identify(prompt: &str) -> Option<TaskFamily> {
    let (instruction, _) = split_prompt(prompt)?;
    let lower = instruction.to_ascii_lowercase();
    [
        ("reverse", TaskFamily::Reverse),
        ("count", TaskFamily::Count),
        ("repeat", TaskFamily::Repeat),
        ("upper", TaskFamily::Uppercase),
        ("add", TaskFamily::Arithmetic),
    ]
    .into_iter()
    .find(|(kw, _)| lower.contains(kw))
    .map(|(_, f)| f)
}

/// Recomputes the answer of a generated prompt and compares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TaskChecker;

impl TaskChecker {
    /// Ground-truth answer for a prompt, if it parses as a known task.
    pub fn expected(&self, prompt: &str) -> Option<String> {
        let family = identify(prompt)?;
        let (instruction, payload) = split_prompt(prompt)?;
        match family {
            TaskFamily::Reverse => Some(payload.chars().rev().collect()),
            TaskFamily::Uppercase => Some(payload.to_ascii_uppercase()),
            TaskFamily::Count => {
                let c = instruction.split('\'').nth(1)?.chars().next()?;
                Some(payload.chars().filter(|&x| x == c).count().to_string())
            }
            TaskFamily::Repeat => {
                let digits: String = instruction.chars().filter(char::is_ascii_digit).collect();
                let k: usize = digits.parse().ok()?;
                Some(payload.repeat(k))
            }
            TaskFamily::Arithmetic => {
                let (a, b) = payload.split_once('+')?;
                let a: u64 = a.trim().parse().ok()?;
                let b: u64 = b.trim().parse().ok()?;
                Some((a + b).to_string())
            }
        }
    }

    /// Pass iff the candidate, ignoring surrounding whitespace, equals the
    /// recomputed answer.
    pub fn check(&self, prompt: &str, candidate: &str) -> bool {
        self.expected(prompt)
            .is_some_and(|want| want == candidate.trim())
    }
}
