//! Task definitions: the six supported datasets, their label spaces, prompt
//! fields, SCE extraction cues and short-generation thresholds.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Version tag of the embedded cue/threshold table. Bump when any entry changes.
pub const RULES_VERSION: &str = "1";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TaskError {
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),
    #[error("label space must be non-empty")]
    EmptyLabelSpace,
    #[error("duplicate label `{0}` in label space")]
    DuplicateLabel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskId {
    DiscrimEval,
    FolkTexts,
    Twitter,
    Sst2,
    Gsm8k,
    Mgnli,
}

impl TaskId {
    pub const ALL: [TaskId; 6] = [
        TaskId::DiscrimEval,
        TaskId::FolkTexts,
        TaskId::Twitter,
        TaskId::Sst2,
        TaskId::Gsm8k,
        TaskId::Mgnli,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::DiscrimEval => "discrimeval",
            TaskId::FolkTexts => "folktexts",
            TaskId::Twitter => "twitter",
            TaskId::Sst2 => "sst2",
            TaskId::Gsm8k => "gsm8k",
            TaskId::Mgnli => "mgnli",
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskId {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| TaskError::UnknownTask(s.to_string()))
    }
}

/// SCE elicitation strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Unconstrained,
    RationaleBased,
    Cot,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Unconstrained, Strategy::RationaleBased, Strategy::Cot];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Unconstrained => "unconstrained",
            Strategy::RationaleBased => "rationale_based",
            Strategy::Cot => "cot",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| TaskError::UnknownStrategy(s.to_string()))
    }
}

/// Output domain of a task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelSpace {
    Discrete { labels: Vec<String> },
    PositiveInteger,
}

impl LabelSpace {
    pub fn discrete<I, S>(labels: I) -> Result<Self, TaskError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(TaskError::EmptyLabelSpace);
        }
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return Err(TaskError::DuplicateLabel(l.clone()));
            }
        }
        Ok(LabelSpace::Discrete { labels })
    }

    pub fn contains(&self, label: &Label) -> bool {
        match (self, label) {
            (LabelSpace::Discrete { labels }, Label::Text(t)) => labels.contains(t),
            (LabelSpace::PositiveInteger, Label::Integer(n)) => *n >= 1,
            _ => false,
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, LabelSpace::Discrete { .. })
    }
}

/// A value in some label space.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Integer(i64),
    Text(String),
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Integer(n) => write!(f, "{n}"),
            Label::Text(t) => f.write_str(t),
        }
    }
}

impl From<&str> for Label {
    fn from(s: &str) -> Self {
        Label::Text(s.to_string())
    }
}

impl From<i64> for Label {
    fn from(n: i64) -> Self {
        Label::Integer(n)
    }
}

/// Everything the harness needs to know about one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: TaskId,
    pub label_space: LabelSpace,
    /// Input fields in prompt order.
    pub field_names: Vec<String>,
    /// The field an SCE rewrites; edit distance is measured against it.
    pub edited_field: String,
    pub min_words_filter: usize,
    pub strategy_cues: BTreeMap<Strategy, String>,
}

impl TaskSpec {
    pub fn builtin(task_id: TaskId) -> TaskSpec {
        let (labels, fields, edited): (Option<&[&str]>, &[&str], &str) = match task_id {
            TaskId::DiscrimEval => (Some(&["Yes", "No"]), &["scenario", "question"], "scenario"),
            TaskId::FolkTexts => (Some(&["A", "B"]), &["description", "question", "choices"], "description"),
            TaskId::Twitter => (Some(&["Bearish", "Bullish", "Neutral"]), &["post"], "post"),
            TaskId::Sst2 => (Some(&["Positive", "Negative"]), &["review"], "review"),
            TaskId::Gsm8k => (None, &["problem"], "problem"),
            TaskId::Mgnli => (Some(&["Entail", "Contradict", "Neutral"]), &["premise", "hypothesis"], "hypothesis"),
        };
        let label_space = match labels {
            Some(l) => LabelSpace::Discrete { labels: l.iter().map(|s| s.to_string()).collect() },
            None => LabelSpace::PositiveInteger,
        };
        let strategy_cues = Strategy::ALL
            .into_iter()
            .map(|s| (s, sce_cue(task_id, s).to_string()))
            .collect();
        TaskSpec {
            task_id,
            label_space,
            field_names: fields.iter().map(|s| s.to_string()).collect(),
            edited_field: edited.to_string(),
            min_words_filter: min_words(task_id),
            strategy_cues,
        }
    }

    /// Builtin spec with a replacement discrete label set (e.g. FolkTexts
    /// choice letters that differ from `A`/`B`).
    pub fn with_labels(mut self, labels: Vec<String>) -> Result<TaskSpec, TaskError> {
        self.label_space = LabelSpace::discrete(labels)?;
        Ok(self)
    }

    pub fn cue(&self, strategy: Strategy) -> &str {
        &self.strategy_cues[&strategy]
    }
}

/// Short-generation threshold in words. For GSM8K the threshold only applies
/// to generations without digits or math symbols.
pub fn min_words(task: TaskId) -> usize {
    match task {
        TaskId::DiscrimEval => 15,
        TaskId::Twitter => 3,
        TaskId::FolkTexts => 60,
        TaskId::Mgnli => 2,
        TaskId::Sst2 => 1,
        TaskId::Gsm8k => 5,
    }
}

/// Cue that introduces the SCE in a Step-2 reply. CoT shares the
/// unconstrained cue.
pub fn sce_cue(task: TaskId, strategy: Strategy) -> &'static str {
    let altered = strategy == Strategy::RationaleBased;
    match (task, altered) {
        (TaskId::DiscrimEval, false) => "REVISED SCENARIO:",
        (TaskId::DiscrimEval, true) => "ALTERED SCENARIO:",
        (TaskId::FolkTexts, false) => "REVISED DATA:",
        (TaskId::FolkTexts, true) => "ALTERED DATA:",
        (TaskId::Gsm8k, false) => "REVISED PROBLEM:",
        (TaskId::Gsm8k, true) => "ALTERED PROBLEM:",
        (TaskId::Sst2, false) => "REVISED REVIEW:",
        (TaskId::Sst2, true) => "ALTERED REVIEW:",
        (TaskId::Twitter, false) => "REVISED POST:",
        (TaskId::Twitter, true) => "ALTERED TWITTER POST:",
        (TaskId::Mgnli, false) => "REVISED HYPOTHESIS:",
        (TaskId::Mgnli, true) => "ALTERED HYPOTHESIS:",
    }
}

pub const ANSWER_CUE: &str = "ANSWER:";
pub const RATIONALES_CUE: &str = "RATIONALES:";

/// Auditable dump of the extraction rules.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RuleTable {
    pub version: String,
    pub answer_cue: String,
    pub rationales_cue: String,
    pub normalize_strip_chars: Vec<String>,
    pub tasks: Vec<TaskRules>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TaskRules {
    pub task: TaskId,
    pub min_words: usize,
    pub digits_exempt: bool,
    pub cues: BTreeMap<Strategy, String>,
}

pub fn rule_table() -> RuleTable {
    RuleTable {
        version: RULES_VERSION.to_string(),
        answer_cue: ANSWER_CUE.to_string(),
        rationales_cue: RATIONALES_CUE.to_string(),
        normalize_strip_chars: crate::extraction::STRIP_CHARS.iter().map(|c| c.to_string()).collect(),
        tasks: TaskId::ALL
            .into_iter()
            .map(|t| TaskRules {
                task: t,
                min_words: min_words(t),
                digits_exempt: t == TaskId::Gsm8k,
                cues: Strategy::ALL.into_iter().map(|s| (s, sce_cue(t, s).to_string())).collect(),
            })
            .collect(),
    }
}
