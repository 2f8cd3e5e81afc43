//! Runs Steps 1 to 3 over a dataset for one (model, strategy, temperature)
//! configuration and persists one record per (example, trial).

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::client::{BackendConfig, ClientError, CompletionResult, GenConfig, LlmClient, DEFAULT_INPUT_CHAR_BUDGET};
use crate::dataset::{self, Example, IngestError};
use crate::extraction::{extract_rationales, parse_reply, screen_sce, ParsedAnswer};
use crate::prompts::{
    pick_target, render_rationale_request, render_repredict, render_sce_request, render_step1, target_rng,
    Conversation, PromptError,
};
use crate::store::{
    RationaleStep, RecordStatus, RunRecord, RunStore, Step1, Step2, Step3, StoreError, StoreHeader, StoreWriter,
    Timestamps, STORE_FORMAT,
};
use crate::task::{Strategy, TaskError, TaskId, TaskSpec};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("store was written by a different configuration (stored hash {stored}, current {current})")]
    ConfigMismatch { stored: String, current: String },
    #[error("store holds record for example {example_id} at index {index}, which does not match the dataset")]
    ExampleMismatch { example_id: String, index: usize },
}

/// Generation limits shared by every call of a run. Temperature lives on
/// [`RunConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenOptions {
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: u32,
    #[serde(default = "default_budget")]
    pub input_char_budget: Option<usize>,
}

fn default_max_new_tokens() -> u32 {
    500
}
fn default_budget() -> Option<usize> {
    Some(DEFAULT_INPUT_CHAR_BUDGET)
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions { max_new_tokens: default_max_new_tokens(), input_char_budget: default_budget() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task_id: TaskId,
    pub strategy: Strategy,
    pub temperature: f64,
    /// Defaults to 1 at temperature 0, otherwise 5 (3 for CoT).
    #[serde(default)]
    pub trials: Option<u32>,
    #[serde(default)]
    pub seed: u64,
    pub backend: BackendConfig,
    #[serde(default)]
    pub gen: GenOptions,
    /// Examples kept per gold class; `None` keeps the whole dataset.
    #[serde(default)]
    pub subset_per_class: Option<usize>,
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    /// Replacement label set for the task.
    #[serde(default)]
    pub labels: Option<Vec<String>>,
}

/// Fields that determine record contents. Transport tuning is left out so a
/// run can be resumed with different timeouts or concurrency.
#[derive(Serialize)]
struct HashedFields<'a> {
    task_id: TaskId,
    strategy: Strategy,
    temperature: f64,
    trials: u32,
    seed: u64,
    base_url: &'a str,
    model_name: &'a str,
    zero_temperature_substitute: Option<f64>,
    gen: &'a GenOptions,
    subset_per_class: Option<usize>,
    dataset: Option<&'a Path>,
    labels: Option<&'a [String]>,
}

impl RunConfig {
    pub fn new(task_id: TaskId, strategy: Strategy, temperature: f64, backend: BackendConfig) -> Self {
        RunConfig {
            task_id,
            strategy,
            temperature,
            trials: None,
            seed: 0,
            backend,
            gen: GenOptions::default(),
            subset_per_class: None,
            dataset: None,
            labels: None,
        }
    }

    pub fn effective_trials(&self) -> u32 {
        self.trials.unwrap_or(if self.temperature == 0.0 {
            1
        } else if self.strategy == Strategy::Cot {
            3
        } else {
            5
        })
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(PipelineError::Config(format!("temperature must be finite and >= 0, got {}", self.temperature)));
        }
        if self.effective_trials() == 0 {
            return Err(PipelineError::Config("trials must be at least 1".into()));
        }
        if self.subset_per_class == Some(0) {
            return Err(PipelineError::Config("subset_per_class must be at least 1".into()));
        }
        self.backend.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.task_spec()?;
        Ok(())
    }

    pub fn task_spec(&self) -> Result<TaskSpec, TaskError> {
        let spec = TaskSpec::builtin(self.task_id);
        match &self.labels {
            Some(labels) => spec.with_labels(labels.clone()),
            None => Ok(spec),
        }
    }

    pub fn config_hash(&self) -> String {
        let fields = HashedFields {
            task_id: self.task_id,
            strategy: self.strategy,
            temperature: self.temperature,
            trials: self.effective_trials(),
            seed: self.seed,
            base_url: &self.backend.base_url,
            model_name: &self.backend.model_name,
            zero_temperature_substitute: self.backend.zero_temperature_substitute,
            gen: &self.gen,
            subset_per_class: self.subset_per_class,
            dataset: self.dataset.as_deref(),
            labels: self.labels.as_deref(),
        };
        let bytes = serde_json::to_vec(&fields).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn header(&self) -> StoreHeader {
        StoreHeader { format: STORE_FORMAT.to_string(), config_hash: self.config_hash(), config: self.clone() }
    }

    /// Sampling seed for one (example, trial).
    pub fn trial_seed(&self, example_id: &str, trial: u32) -> u64 {
        let mut h = Sha256::new();
        h.update(b"sce-trial\0");
        h.update(self.seed.to_le_bytes());
        h.update(example_id.as_bytes());
        h.update([0u8]);
        h.update(trial.to_le_bytes());
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }

    fn gen_config(&self, example_id: &str, trial: u32) -> GenConfig {
        GenConfig {
            temperature: self.temperature,
            max_new_tokens: self.gen.max_new_tokens,
            input_char_budget: self.gen.input_char_budget,
            seed: Some(self.trial_seed(example_id, trial)),
        }
    }
}

/// Loads, preprocesses and subsets the dataset named in the config.
pub fn prepare_examples(config: &RunConfig) -> Result<Vec<Example>, PipelineError> {
    let task = config.task_spec()?;
    let path = config
        .dataset
        .as_ref()
        .ok_or_else(|| PipelineError::Config("no dataset path configured".into()))?;
    let examples = dataset::preprocess(&task, dataset::load_jsonl(path, &task)?);
    Ok(match config.subset_per_class {
        Some(k) => dataset::select_subset(&examples, &task.label_space, k),
        None => examples,
    })
}

/// Timestamp source; tests inject a fixed clock for byte-stable stores.
pub trait Clock: Send + Sync {
    fn now(&self) -> f64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> f64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
    }
}

pub struct FixedClock(pub f64);

impl Clock for FixedClock {
    fn now(&self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RunSummary {
    pub written: usize,
    pub skipped: usize,
    pub complete: usize,
    pub step1_unparseable: usize,
    pub no_rationale: usize,
    pub filtered: usize,
    pub failed: usize,
}

impl RunSummary {
    fn count(&mut self, status: RecordStatus) {
        self.written += 1;
        match status {
            RecordStatus::Complete => self.complete += 1,
            RecordStatus::Step1Unparseable => self.step1_unparseable += 1,
            RecordStatus::NoRationale => self.no_rationale += 1,
            RecordStatus::Filtered => self.filtered += 1,
            RecordStatus::Failed => self.failed += 1,
        }
    }
}

pub struct Pipeline<'a> {
    config: &'a RunConfig,
    task: TaskSpec,
    client: &'a LlmClient,
    clock: &'a dyn Clock,
}

enum Halt {
    Backend(ClientError),
    Prompt(PromptError),
}

impl From<ClientError> for Halt {
    fn from(e: ClientError) -> Self {
        Halt::Backend(e)
    }
}

impl From<PromptError> for Halt {
    fn from(e: PromptError) -> Self {
        Halt::Prompt(e)
    }
}

impl<'a> Pipeline<'a> {
    pub fn new(config: &'a RunConfig, client: &'a LlmClient, clock: &'a dyn Clock) -> Result<Self, PipelineError> {
        config.validate()?;
        Ok(Pipeline { config, task: config.task_spec()?, client, clock })
    }

    /// Full run into a new store at `out`.
    pub fn run(&self, examples: &[Example], out: impl AsRef<Path>) -> Result<RunSummary, PipelineError> {
        let mut writer = StoreWriter::create(out, &self.config.header())?;
        self.execute(examples, &HashSet::new(), &mut writer)
    }

    /// Continues an interrupted run, skipping (example, trial) pairs already stored.
    pub fn resume(&self, examples: &[Example], store: impl AsRef<Path>) -> Result<RunSummary, PipelineError> {
        let (mut writer, existing) = StoreWriter::reopen(store)?;
        let current = self.config.config_hash();
        if existing.header.config_hash != current {
            return Err(PipelineError::ConfigMismatch { stored: existing.header.config_hash, current });
        }
        let mut done = HashSet::new();
        for r in &existing.records {
            if examples.get(r.example_index).map(|e| e.example_id.as_str()) != Some(r.example_id.as_str()) {
                return Err(PipelineError::ExampleMismatch { example_id: r.example_id.clone(), index: r.example_index });
            }
            done.insert(r.key());
        }
        let mut summary = self.execute(examples, &done, &mut writer)?;
        summary.skipped = done.len();
        Ok(summary)
    }

    fn execute(
        &self,
        examples: &[Example],
        done: &HashSet<(usize, u32)>,
        writer: &mut StoreWriter,
    ) -> Result<RunSummary, PipelineError> {
        let trials = self.config.effective_trials();
        let jobs: Vec<(usize, u32)> = (0..examples.len())
            .flat_map(|i| (0..trials).map(move |t| (i, t)))
            .filter(|k| !done.contains(k))
            .collect();
        let mut summary = RunSummary::default();
        if jobs.is_empty() {
            return Ok(summary);
        }
        let workers = self.client.config().max_in_flight.min(jobs.len()).max(1);
        let next = AtomicUsize::new(0);
        let (tx, rx) = mpsc::channel::<(usize, RunRecord)>();
        std::thread::scope(|s| -> Result<(), PipelineError> {
            for _ in 0..workers {
                let tx = tx.clone();
                let (jobs, next) = (&jobs, &next);
                s.spawn(move || loop {
                    let j = next.fetch_add(1, Ordering::SeqCst);
                    let Some(&(idx, trial)) = jobs.get(j) else { break };
                    let record = self.process(idx, &examples[idx], trial);
                    if tx.send((j, record)).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            // Records are written in job order regardless of completion order.
            let mut pending: BTreeMap<usize, RunRecord> = BTreeMap::new();
            let mut next_write = 0;
            for (j, record) in rx {
                pending.insert(j, record);
                while let Some(record) = pending.remove(&next_write) {
                    writer.append(&record)?;
                    summary.count(record.status);
                    next_write += 1;
                }
            }
            Ok(())
        })?;
        Ok(summary)
    }

    fn call(&self, conv: &Conversation, gen: &GenConfig) -> Result<CompletionResult, ClientError> {
        self.client.complete(conv, gen)
    }

    /// Executes all steps for one (example, trial).
    pub fn process(&self, index: usize, example: &Example, trial: u32) -> RunRecord {
        let started = self.clock.now();
        let mut record = RunRecord {
            example_id: example.example_id.clone(),
            example_index: index,
            trial,
            status: RecordStatus::Failed,
            error: None,
            original: example.field(&self.task.edited_field).unwrap_or_default().to_string(),
            gold: example.gold.clone(),
            step1: None,
            target: None,
            rationale: None,
            step2: None,
            step3_with: None,
            step3_without: None,
            timestamps: Timestamps { started, finished: started },
        };
        match self.steps(example, trial, &mut record) {
            Ok(status) => record.status = status,
            Err(Halt::Backend(e)) => {
                record.status = RecordStatus::Failed;
                record.error = Some(e.to_string());
            }
            Err(Halt::Prompt(e)) => {
                record.status = RecordStatus::Failed;
                record.error = Some(format!("prompt error: {e}"));
            }
        }
        record.timestamps.finished = self.clock.now();
        record
    }

    fn steps(&self, example: &Example, trial: u32, record: &mut RunRecord) -> Result<RecordStatus, Halt> {
        let task = &self.task;
        let strategy = self.config.strategy;
        let gen = self.config.gen_config(&example.example_id, trial);

        let conv1 = render_step1(task, example, strategy)?;
        let r1 = self.call(&conv1, &gen)?;
        let parsed = parse_reply(&r1.text, &task.label_space);
        let prediction = parsed.label().cloned();
        record.step1 = Some(Step1 {
            conversation: conv1.clone(),
            raw: r1.text.clone(),
            parsed,
            finish_reason: r1.finish_reason,
            truncated: r1.truncated,
        });
        let Some(prediction) = prediction else {
            return Ok(RecordStatus::Step1Unparseable);
        };

        // Target is fixed per example: the draw ignores the trial index.
        let target = pick_target(&task.label_space, &prediction, &mut target_rng(self.config.seed, &example.example_id))?;
        record.target = Some(target.clone());

        let mut history = conv1;
        history.push_assistant(r1.text)?;
        if strategy == Strategy::RationaleBased {
            history.push_user(render_rationale_request(task, &prediction))?;
            let rr = self.call(&history, &gen)?;
            let lines = extract_rationales(&rr.text);
            record.rationale = Some(RationaleStep {
                conversation: history.clone(),
                raw: rr.text.clone(),
                lines: lines.clone(),
                finish_reason: rr.finish_reason,
                truncated: rr.truncated,
            });
            if lines.is_none() {
                return Ok(RecordStatus::NoRationale);
            }
            history.push_assistant(rr.text)?;
        }

        let conv2 = render_sce_request(task, strategy, &target, &history)?;
        let r2 = self.call(&conv2, &gen)?;
        let (sce, filter) = screen_sce(&r2.text, task, strategy);
        record.step2 = Some(Step2 {
            conversation: conv2.clone(),
            raw: r2.text.clone(),
            sce: sce.clone(),
            filter,
            finish_reason: r2.finish_reason,
            truncated: r2.truncated,
        });
        let (Some(sce), true) = (sce, filter.kept) else {
            return Ok(RecordStatus::Filtered);
        };

        let mut full = conv2;
        full.push_assistant(r2.text)?;
        let conv_with = render_repredict(task, strategy, example, &sce, Some(&full))?;
        let r_with = self.call(&conv_with, &gen)?;
        record.step3_with = Some(step3(conv_with, r_with, task));
        let conv_without = render_repredict(task, strategy, example, &sce, None)?;
        let r_without = self.call(&conv_without, &gen)?;
        record.step3_without = Some(step3(conv_without, r_without, task));
        Ok(RecordStatus::Complete)
    }
}

fn step3(conversation: Conversation, r: CompletionResult, task: &TaskSpec) -> Step3 {
    let parsed: ParsedAnswer = parse_reply(&r.text, &task.label_space);
    Step3 { conversation, raw: r.text, parsed, finish_reason: r.finish_reason, truncated: r.truncated }
}

/// Loads a store and checks that it was written by `config`.
pub fn load_checked(path: impl AsRef<Path>, config: &RunConfig) -> Result<RunStore, PipelineError> {
    let store = RunStore::load(path)?;
    let current = config.config_hash();
    if store.header.config_hash != current {
        return Err(PipelineError::ConfigMismatch { stored: store.header.config_hash, current });
    }
    Ok(store)
}
