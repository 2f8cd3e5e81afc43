//! Dataset ingestion: the canonical JSONL schema, preprocessing and subset
//! selection.
//!
//! One record per line:
//!
//! ```json
//! {"example_id":"sst2-0","fields":{"review":"a gorgeous film"},"gold":"Positive"}
//! ```
//!
//! `gold` is optional; it is a string for discrete tasks and a JSON integer
//! for GSM8K.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use indexmap::IndexMap;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::task::{Label, LabelSpace, TaskId, TaskSpec};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {source}")]
    Malformed {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: missing or empty field `{field}`")]
    MissingField { line: usize, field: String },
    #[error("line {line}: gold label `{label}` is outside the label space")]
    LabelOutOfSpace { line: usize, label: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub example_id: String,
    pub fields: IndexMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<Label>,
}

impl Example {
    pub fn field(&self, name: &str) -> Option<&str> {
        self.fields.get(name).map(String::as_str)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("example serializes")
    }
}

/// Parses JSONL text. Blank lines are skipped; line numbers are 1-based.
pub fn parse_jsonl(text: &str, task: &TaskSpec) -> Result<Vec<Example>, IngestError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let ex: Example =
            serde_json::from_str(raw).map_err(|source| IngestError::Malformed { line, source })?;
        validate(&ex, task, line)?;
        out.push(ex);
    }
    Ok(out)
}

pub fn load_jsonl(path: impl AsRef<Path>, task: &TaskSpec) -> Result<Vec<Example>, IngestError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_jsonl(&text, task)
}

fn validate(ex: &Example, task: &TaskSpec, line: usize) -> Result<(), IngestError> {
    if ex.example_id.trim().is_empty() {
        return Err(IngestError::MissingField { line, field: "example_id".into() });
    }
    for name in &task.field_names {
        match ex.fields.get(name) {
            Some(v) if !v.trim().is_empty() => {}
            _ => return Err(IngestError::MissingField { line, field: name.clone() }),
        }
    }
    if let Some(gold) = &ex.gold {
        if !task.label_space.contains(gold) {
            return Err(IngestError::LabelOutOfSpace { line, label: gold.to_string() });
        }
    }
    Ok(())
}

/// First `per_class` examples of each gold class (discrete spaces) or the
/// first `per_class` overall (integer spaces), keeping dataset order.
/// Examples without a gold label form their own bucket.
pub fn select_subset(examples: &[Example], label_space: &LabelSpace, per_class: usize) -> Vec<Example> {
    assert!(per_class >= 1, "per_class must be at least 1");
    match label_space {
        LabelSpace::PositiveInteger => examples.iter().take(per_class).cloned().collect(),
        LabelSpace::Discrete { .. } => {
            let mut seen: HashMap<Option<&Label>, usize> = HashMap::new();
            examples
                .iter()
                .filter(|ex| {
                    let n = seen.entry(ex.gold.as_ref()).or_insert(0);
                    *n += 1;
                    *n <= per_class
                })
                .cloned()
                .collect()
        }
    }
}

static URL_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)https?://\S*").unwrap());

/// Removes http/https URLs (scheme up to the next whitespace) and collapses
/// the remaining whitespace runs to single spaces.
pub fn strip_urls(text: &str) -> String {
    let removed = URL_RE.replace_all(text, " ");
    removed.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Placeholder {
    Gender,
    Race,
    Age,
}

impl Placeholder {
    pub const ALL: [Placeholder; 3] = [Placeholder::Age, Placeholder::Race, Placeholder::Gender];

    pub fn token(self) -> &'static str {
        match self {
            Placeholder::Gender => "[GENDER]",
            Placeholder::Race => "[RACE]",
            Placeholder::Age => "[AGE]",
        }
    }

    pub fn fixed_value(self) -> &'static str {
        match self {
            Placeholder::Gender => "female",
            Placeholder::Race => "white",
            Placeholder::Age => "20",
        }
    }
}

/// Result of demographic substitution: rewritten fields plus, per field,
/// which placeholders did not occur in it.
#[derive(Debug, Clone, PartialEq)]
pub struct Demographics {
    pub fields: IndexMap<String, String>,
    pub missing: BTreeMap<String, Vec<Placeholder>>,
}

/// Replaces every `[AGE]`, `[RACE]` and `[GENDER]` with 20 / white / female.
pub fn substitute_demographics(fields: &IndexMap<String, String>) -> Demographics {
    let mut out = IndexMap::with_capacity(fields.len());
    let mut missing = BTreeMap::new();
    for (name, text) in fields {
        let mut value = text.clone();
        let mut absent = Vec::new();
        for p in Placeholder::ALL {
            if value.contains(p.token()) {
                value = value.replace(p.token(), p.fixed_value());
            } else {
                absent.push(p);
            }
        }
        if !absent.is_empty() {
            missing.insert(name.clone(), absent);
        }
        out.insert(name.clone(), value);
    }
    Demographics { fields: out, missing }
}

/// Task-specific preprocessing: URL stripping for Twitter, fixed
/// demographics for DiscrimEval, identity elsewhere.
pub fn preprocess(task: &TaskSpec, examples: Vec<Example>) -> Vec<Example> {
    match task.task_id {
        TaskId::Twitter => examples
            .into_iter()
            .map(|mut ex| {
                for v in ex.fields.values_mut() {
                    *v = strip_urls(v);
                }
                ex
            })
            .collect(),
        TaskId::DiscrimEval => examples
            .into_iter()
            .map(|mut ex| {
                let subst = substitute_demographics(&ex.fields);
                if !subst.missing.is_empty() {
                    log::debug!("{}: placeholders absent: {:?}", ex.example_id, subst.missing);
                }
                ex.fields = subst.fields;
                ex
            })
            .collect(),
        _ => examples,
    }
}
