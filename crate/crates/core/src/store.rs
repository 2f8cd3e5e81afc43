//! Append-only JSONL run store: one header line with the run configuration
//! and its hash, then one [`RunRecord`] per line.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::FinishReason;
use crate::extraction::{FilterOutcome, ParsedAnswer};
use crate::pipeline::RunConfig;
use crate::prompts::{Conversation, TargetLabel};
use crate::task::Label;

pub const STORE_FORMAT: &str = "sce-run-store/1";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: missing header line")]
    MissingHeader { path: PathBuf },
    #[error("{path}: line {line}: {source}")]
    Malformed { path: PathBuf, line: usize, source: serde_json::Error },
    #[error("{path}: unsupported store format `{found}`")]
    Format { path: PathBuf, found: String },
    #[error("{path} already exists")]
    Exists { path: PathBuf },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreHeader {
    pub format: String,
    pub config_hash: String,
    pub config: RunConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    /// All steps ran, including both re-predictions.
    Complete,
    /// Step-1 answer could not be mapped to the label space.
    Step1Unparseable,
    /// Rationale-based run whose rationale reply had no usable list.
    NoRationale,
    /// Step-2 reply did not survive extraction and filtering.
    Filtered,
    /// A backend call failed after client-level retries.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step1 {
    pub conversation: Conversation,
    pub raw: String,
    pub parsed: ParsedAnswer,
    pub finish_reason: FinishReason,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationaleStep {
    pub conversation: Conversation,
    pub raw: String,
    pub lines: Option<Vec<String>>,
    pub finish_reason: FinishReason,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step2 {
    pub conversation: Conversation,
    pub raw: String,
    pub sce: Option<String>,
    pub filter: FilterOutcome,
    pub finish_reason: FinishReason,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step3 {
    pub conversation: Conversation,
    pub raw: String,
    pub parsed: ParsedAnswer,
    pub finish_reason: FinishReason,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timestamps {
    /// Seconds since the Unix epoch.
    pub started: f64,
    pub finished: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub example_id: String,
    pub example_index: usize,
    pub trial: u32,
    pub status: RecordStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Text of the edited field before revision.
    pub original: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<Label>,
    pub step1: Option<Step1>,
    pub target: Option<TargetLabel>,
    pub rationale: Option<RationaleStep>,
    pub step2: Option<Step2>,
    pub step3_with: Option<Step3>,
    pub step3_without: Option<Step3>,
    pub timestamps: Timestamps,
}

impl RunRecord {
    pub fn key(&self) -> (usize, u32) {
        (self.example_index, self.trial)
    }

    pub fn kept(&self) -> bool {
        self.step2.as_ref().is_some_and(|s| s.filter.kept)
    }

    pub fn step3(&self, with_context: bool) -> Option<&Step3> {
        if with_context {
            self.step3_with.as_ref()
        } else {
            self.step3_without.as_ref()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunStore {
    pub header: StoreHeader,
    pub records: Vec<RunRecord>,
}

impl RunStore {
    /// Reads a store. A trailing partial line (interrupted append) is ignored.
    pub fn load(path: impl AsRef<Path>) -> Result<RunStore, StoreError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let (store, _) = parse_store(path, &text)?;
        Ok(store)
    }
}

/// Parses store text, returning the byte length of the well-formed prefix.
fn parse_store(path: &Path, text: &str) -> Result<(RunStore, usize), StoreError> {
    let mut complete = 0usize;
    let mut header: Option<StoreHeader> = None;
    let mut records = Vec::new();
    for (i, line) in text.split_inclusive('\n').enumerate() {
        if !line.ends_with('\n') {
            log::warn!("{}: ignoring partial final line", path.display());
            break;
        }
        let body = line.trim_end();
        if body.is_empty() {
            complete += line.len();
            continue;
        }
        let malformed = |source| StoreError::Malformed { path: path.to_path_buf(), line: i + 1, source };
        match &header {
            None => {
                let h: StoreHeader = serde_json::from_str(body).map_err(malformed)?;
                if h.format != STORE_FORMAT {
                    return Err(StoreError::Format { path: path.to_path_buf(), found: h.format });
                }
                header = Some(h);
            }
            Some(_) => records.push(serde_json::from_str(body).map_err(malformed)?),
        }
        complete += line.len();
    }
    let header = header.ok_or_else(|| StoreError::MissingHeader { path: path.to_path_buf() })?;
    Ok((RunStore { header, records }, complete))
}

/// Durable appender. Each record is flushed and synced before `append` returns.
pub struct StoreWriter {
    path: PathBuf,
    file: File,
}

impl StoreWriter {
    /// Creates a new store; refuses to overwrite.
    pub fn create(path: impl AsRef<Path>, header: &StoreHeader) -> Result<StoreWriter, StoreError> {
        let path = path.as_ref();
        let file = OpenOptions::new().write(true).create_new(true).open(path).map_err(|e| {
            if e.kind() == io::ErrorKind::AlreadyExists {
                StoreError::Exists { path: path.to_path_buf() }
            } else {
                StoreError::Io { path: path.to_path_buf(), source: e }
            }
        })?;
        let mut w = StoreWriter { path: path.to_path_buf(), file };
        w.write_line(&serde_json::to_string(header).expect("header serializes"))?;
        Ok(w)
    }

    /// Opens an existing store for appending after cutting any partial final
    /// line. Returns the writer and the records already present.
    pub fn reopen(path: impl AsRef<Path>) -> Result<(StoreWriter, RunStore), StoreError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let (store, good_len) = parse_store(path, &text)?;
        let file = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
        if good_len < text.len() {
            file.set_len(good_len as u64).map_err(io_err(path))?;
        }
        let file = OpenOptions::new().append(true).open(path).map_err(io_err(path))?;
        Ok((StoreWriter { path: path.to_path_buf(), file }, store))
    }

    pub fn append(&mut self, record: &RunRecord) -> Result<(), StoreError> {
        self.write_line(&serde_json::to_string(record).expect("record serializes"))
    }

    fn write_line(&mut self, line: &str) -> Result<(), StoreError> {
        let path = self.path.clone();
        let mut buf = String::with_capacity(line.len() + 1);
        buf.push_str(line);
        buf.push('\n');
        self.file.write_all(buf.as_bytes()).map_err(io_err(&path))?;
        self.file.flush().map_err(io_err(&path))?;
        self.file.sync_data().map_err(io_err(&path))
    }
}
