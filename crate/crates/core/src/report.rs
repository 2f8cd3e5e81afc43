//! Table rendering for metric rows and their significance tests.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{self, Estimate, MetricRow, MetricTable};
use crate::stats::{self, TestResult};
use crate::store::RunStore;
use crate::task::{Strategy, TaskId};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("report needs at least one input store")]
    NoInputs,
    #[error("significance alpha must lie in (0, 1), got {0}")]
    BadAlpha(f64),
    #[error("no test results for row {0}")]
    MissingTests(String),
    #[error("test results for unknown row {0}")]
    UnknownRow(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Markdown,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSpec {
    pub inputs: Vec<PathBuf>,
    pub format: OutputFormat,
    #[serde(default = "yes")]
    pub bold_significant: bool,
    #[serde(default = "default_alpha")]
    pub significance_alpha: f64,
}

fn yes() -> bool {
    true
}

pub const DEFAULT_ALPHA: f64 = 0.05;

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

impl ReportSpec {
    pub fn new(inputs: Vec<PathBuf>, format: OutputFormat) -> Self {
        ReportSpec { inputs, format, bold_significant: true, significance_alpha: DEFAULT_ALPHA }
    }

    pub fn validate(&self) -> Result<(), ReportError> {
        if self.inputs.is_empty() {
            return Err(ReportError::NoInputs);
        }
        if !(self.significance_alpha > 0.0 && self.significance_alpha < 1.0) {
            return Err(ReportError::BadAlpha(self.significance_alpha));
        }
        Ok(())
    }
}

/// Identifies one table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowKey {
    pub model: String,
    pub task: TaskId,
    pub strategy: Strategy,
    pub temperature: f64,
}

impl RowKey {
    pub fn of(row: &MetricRow) -> RowKey {
        RowKey { model: row.model.clone(), task: row.task, strategy: row.strategy, temperature: row.temperature }
    }
}

impl std::fmt::Display for RowKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}/T={}", self.model, self.task, self.strategy, self.temperature)
    }
}

/// Context-condition tests for one row: Val vs Val_C and ED vs ED_C.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowTests {
    pub key: RowKey,
    pub val: Option<TestResult>,
    pub ed: Option<TestResult>,
}

/// Runs both context tests on one store. Validity is paired per example;
/// edit distances are compared as two groups because each condition keeps
/// a different subset of SCEs.
pub fn test_store(store: &RunStore, resamples: usize, seed: u64) -> RowTests {
    let records = &store.records;
    let without = metrics::val_series(records, false);
    let with = metrics::val_series(records, true);
    let (a, b): (Vec<f64>, Vec<f64>) =
        without.iter().filter_map(|(k, v)| with.get(k).map(|w| (*v, *w))).unzip();
    let val = stats::paired_permutation_test(&a, &b, resamples, seed).ok();
    let ed_without = metrics::ed_series(records, false).into_values().collect::<Vec<_>>();
    let ed_with = metrics::ed_series(records, true).into_values().collect::<Vec<_>>();
    let ed = stats::two_sample_permutation_test(&ed_without, &ed_with, resamples, seed).ok();
    RowTests { key: RowKey::of(&metrics::score_store(store)), val, ed }
}

fn find_tests<'a>(row: &MetricRow, tests: &'a [RowTests]) -> Result<&'a RowTests, ReportError> {
    let key = RowKey::of(row);
    tests.iter().find(|t| t.key == key).ok_or_else(|| ReportError::MissingTests(key.to_string()))
}

fn check_keys(table: &MetricTable, tests: &[RowTests]) -> Result<(), ReportError> {
    for t in tests {
        if !table.rows.iter().any(|r| RowKey::of(r) == t.key) {
            return Err(ReportError::UnknownRow(t.key.to_string()));
        }
    }
    Ok(())
}

fn cell(e: Option<Estimate>, bold: bool) -> String {
    let Some(e) = e else { return "n/a".to_string() };
    let text = match e.ci_half_width {
        Some(h) => format!("{:.0} ({:.0})", e.mean, h),
        None => format!("{:.0}", e.mean),
    };
    if bold {
        format!("**{text}**")
    } else {
        text
    }
}

pub fn render_table(table: &MetricTable, tests: &[RowTests], spec: &ReportSpec) -> Result<String, ReportError> {
    spec.validate()?;
    check_keys(table, tests)?;
    match spec.format {
        OutputFormat::Markdown => render_markdown(table, tests, spec),
        OutputFormat::Csv => render_csv(table, tests),
    }
}

fn significant(t: Option<&TestResult>, spec: &ReportSpec) -> bool {
    spec.bold_significant && t.is_some_and(|t| t.p_value < spec.significance_alpha)
}

fn render_markdown(table: &MetricTable, tests: &[RowTests], spec: &ReportSpec) -> Result<String, ReportError> {
    let mut out = String::from("| Model | Task | Strategy | T | Gen | Val | Val_C | ED | ED_C |\n");
    out.push_str("|---|---|---|---|---|---|---|---|---|\n");
    for row in &table.rows {
        let t = find_tests(row, tests)?;
        let val_bold = significant(t.val.as_ref(), spec);
        let ed_bold = significant(t.ed.as_ref(), spec);
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} |\n",
            row.model,
            row.task,
            row.strategy,
            row.temperature,
            cell(row.gen, false),
            cell(row.val, val_bold),
            cell(row.valc, val_bold),
            cell(row.ed, ed_bold),
            cell(row.edc, ed_bold),
        ));
    }
    Ok(out)
}

fn num(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn render_csv(table: &MetricTable, tests: &[RowTests]) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "model", "task", "strategy", "temperature", "trials", "examples", "gen", "gen_ci", "val", "val_ci", "valc",
        "valc_ci", "ed", "ed_ci", "edc", "edc_ci", "accuracy", "accuracy_ci", "val_effect", "val_p", "ed_effect", "ed_p",
    ])?;
    for row in &table.rows {
        let t = find_tests(row, tests)?;
        let mut rec = vec![
            row.model.clone(),
            row.task.to_string(),
            row.strategy.to_string(),
            row.temperature.to_string(),
            row.trials.to_string(),
            row.examples.to_string(),
        ];
        for e in [row.gen, row.val, row.valc, row.ed, row.edc, row.accuracy] {
            rec.push(num(e.map(|e| e.mean)));
            rec.push(num(e.and_then(|e| e.ci_half_width)));
        }
        for test in [&t.val, &t.ed] {
            rec.push(num(test.map(|t| t.effect)));
            rec.push(num(test.map(|t| t.p_value)));
        }
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
