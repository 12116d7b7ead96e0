//! Task schemas, labeled examples and balanced few-shot dev splits.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::SplitMix64;
use crate::template::is_identifier;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("line {line}: field `{field}` does not match the task schema")]
    SchemaMismatch { line: usize, field: String },
    #[error("example `{id}` has a gold label outside its choice range")]
    BadLabel { id: String },
    #[error("example id `{id}` appears more than once")]
    DuplicateId { id: String },
    #[error("invalid task spec: {0}")]
    InvalidTask(String),
    #[error("class {class} needs {needed} examples but the pool only has {available}")]
    InsufficientClassData {
        class: usize,
        needed: usize,
        available: usize,
    },
    #[error("split size must be positive")]
    EmptySplit,
}

/// Schema of one task: which fields a prompt may reference and how answers
/// are verbalized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    /// Field name to human-readable description.
    pub input_fields: BTreeMap<String, String>,
    /// Fields only consulted by conditionals, such as `question` in COPA.
    #[serde(default)]
    pub control_fields: BTreeSet<String>,
    /// Static verbalizers shared by every example.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_choices: Option<Vec<String>>,
    /// Set when every example carries its own choice list.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choice_field: Option<String>,
    pub num_classes: usize,
    #[serde(default)]
    pub required_placeholders: BTreeSet<String>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let invalid = |msg: String| Err(DataError::InvalidTask(msg));
        for name in self.input_fields.keys().chain(&self.control_fields) {
            if !is_identifier(name) {
                return invalid(format!("`{name}` is not an identifier"));
            }
        }
        for name in &self.required_placeholders {
            if !self.is_field(name) {
                return invalid(format!("required placeholder `{name}` is not a field"));
            }
        }
        match (&self.answer_choices, &self.choice_field) {
            (Some(choices), None) => {
                if self.num_classes < 2 || choices.len() != self.num_classes {
                    return invalid(format!(
                        "{} static answer choices for {} classes",
                        choices.len(),
                        self.num_classes
                    ));
                }
            }
            (None, Some(_)) => {
                if self.num_classes == 0 {
                    return invalid("num_classes must be positive".into());
                }
            }
            _ => return invalid("exactly one of answer_choices or choice_field must be set".into()),
        }
        Ok(())
    }

    pub fn is_field(&self, name: &str) -> bool {
        self.input_fields.contains_key(name) || self.control_fields.contains(name)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = read(path)?;
        let spec: TaskSpec = serde_json::from_str(&text).map_err(|e| DataError::ParseError {
            line: e.line(),
            message: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub values: BTreeMap<String, String>,
    pub gold: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
}

impl Example {
    /// Per-example choices when present, otherwise the task's static list.
    pub fn effective_choices<'a>(&'a self, spec: &'a TaskSpec) -> &'a [String] {
        match (&self.choices, &spec.answer_choices) {
            (Some(own), _) => own,
            (None, Some(shared)) => shared,
            (None, None) => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSplit {
    pub dev: Vec<Example>,
    pub seed: u64,
    pub size: usize,
}

impl DataSplit {
    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for ex in &self.dev {
            if let Some(slot) = counts.get_mut(ex.gold) {
                *slot += 1;
            }
        }
        counts
    }
}

fn read(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Load a JSONL file of examples, validating each line against `spec`.
/// Blank lines are skipped; line numbers in errors are 1-based.
pub fn load_dataset(path: &Path, spec: &TaskSpec) -> Result<Vec<Example>, DataError> {
    parse_dataset(&read(path)?, spec)
}

pub fn parse_dataset(text: &str, spec: &TaskSpec) -> Result<Vec<Example>, DataError> {
    let mut examples = Vec::new();
    let mut ids = HashSet::new();
    for (index, line) in text.lines().enumerate() {
        let line_no = index + 1;
        if line.trim().is_empty() {
            continue;
        }
        let example: Example = serde_json::from_str(line).map_err(|e| DataError::ParseError {
            line: line_no,
            message: e.to_string(),
        })?;
        check_example(&example, spec, line_no)?;
        if !ids.insert(example.id.clone()) {
            return Err(DataError::DuplicateId { id: example.id });
        }
        examples.push(example);
    }
    Ok(examples)
}

fn check_example(example: &Example, spec: &TaskSpec, line: usize) -> Result<(), DataError> {
    let mismatch = |field: &str| DataError::SchemaMismatch {
        line,
        field: field.to_string(),
    };
    for field in spec.input_fields.keys().chain(&spec.control_fields) {
        if !example.values.contains_key(field) {
            return Err(mismatch(field));
        }
    }
    match (&example.choices, &spec.choice_field) {
        (Some(choices), Some(_)) if choices.len() != spec.num_classes => {
            return Err(mismatch("choices"));
        }
        (Some(_), None) | (None, Some(_)) => return Err(mismatch("choices")),
        _ => {}
    }
    if example.gold >= example.effective_choices(spec).len() {
        return Err(DataError::BadLabel { id: example.id.clone() });
    }
    Ok(())
}

/// Number of dev examples drawn per class: an even share, with the
/// remainder going to the lowest class indices.
pub fn per_class_quota(total: usize, num_classes: usize) -> Vec<usize> {
    let base = total / num_classes;
    let extra = total % num_classes;
    (0..num_classes).map(|c| base + usize::from(c < extra)).collect()
}

/// Draw a class-balanced dev split.
///
/// Classes are processed in index order with one SplitMix64 stream seeded by
/// `seed`. Within a class the pool is sorted by id, shuffled with
/// Fisher–Yates, and the first `quota` items are kept in draw order.
pub fn sample_balanced_dev(
    pool: &[Example],
    num_classes: usize,
    total: usize,
    seed: u64,
) -> Result<DataSplit, DataError> {
    if total == 0 || num_classes == 0 {
        return Err(DataError::EmptySplit);
    }
    let mut rng = SplitMix64::new(seed);
    let mut dev = Vec::with_capacity(total);
    for (class, needed) in per_class_quota(total, num_classes).into_iter().enumerate() {
        let mut members: Vec<&Example> = pool.iter().filter(|ex| ex.gold == class).collect();
        if members.len() < needed {
            return Err(DataError::InsufficientClassData {
                class,
                needed,
                available: members.len(),
            });
        }
        members.sort_by(|a, b| a.id.cmp(&b.id));
        rng.shuffle(&mut members);
        dev.extend(members.into_iter().take(needed).cloned());
    }
    Ok(DataSplit { dev, seed, size: total })
}

/// `n_splits` balanced splits seeded `base_seed`, `base_seed + 1`, ...
pub fn make_splits(
    pool: &[Example],
    num_classes: usize,
    total: usize,
    n_splits: usize,
    base_seed: u64,
) -> Result<Vec<DataSplit>, DataError> {
    (0..n_splits as u64)
        .map(|i| sample_balanced_dev(pool, num_classes, total, base_seed.wrapping_add(i)))
        .collect()
}
