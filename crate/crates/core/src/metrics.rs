//! Gen, Val, Val_C, ED, ED_C and accuracy over run records.
//!
//! Percentages are computed per trial and then averaged. Records whose
//! backend calls failed, and rationale-based records without rationales,
//! are left out of every denominator.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats;
use crate::store::{RecordStatus, RunRecord, RunStore};
use crate::task::{Strategy, TaskId};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("no records")]
    Empty,
    #[error("no record has a parseable Step-1 answer")]
    NoParseable,
    #[error("no SCE survived filtering")]
    NoKept,
    #[error("no valid SCE under the chosen condition")]
    NoValid,
    #[error("no gold labels")]
    NoGold,
    #[error("both length groups must be non-empty")]
    EmptyGroup,
}

/// Character-level Levenshtein distance over Unicode scalar values.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Levenshtein distance divided by the longer length, times 100.
pub fn edit_distance_norm(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 0.0;
    }
    edit_distance(a, b) as f64 * 100.0 / longest as f64
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean over values summed in sorted order, so input order cannot change
/// the result.
fn sorted_mean(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    mean(&xs)
}

/// `|L_val - L_inval| / max(L_val, L_inval) * 100` over mean lengths.
pub fn norm_len_diff(valid_lengths: &[f64], invalid_lengths: &[f64]) -> Result<f64, MetricError> {
    if valid_lengths.is_empty() || invalid_lengths.is_empty() {
        return Err(MetricError::EmptyGroup);
    }
    Ok(norm_len_diff_of_means(mean(valid_lengths), mean(invalid_lengths)))
}

pub(crate) fn norm_len_diff_of_means(lv: f64, li: f64) -> f64 {
    let m = lv.max(li);
    if m == 0.0 {
        0.0
    } else {
        (lv - li).abs() / m * 100.0
    }
}

fn counted(r: &RunRecord) -> bool {
    !matches!(r.status, RecordStatus::Failed | RecordStatus::NoRationale)
}

fn step1_parsed(r: &RunRecord) -> bool {
    r.step1.as_ref().is_some_and(|s| s.parsed.is_parsed())
}

/// Whether a kept SCE yields its target under the chosen condition.
/// `None` when the record has no kept SCE.
pub fn is_valid(r: &RunRecord, with_context: bool) -> Option<bool> {
    if !r.kept() {
        return None;
    }
    let target = r.target.as_ref()?;
    let step3 = r.step3(with_context)?;
    Some(step3.parsed.label() == Some(&target.value))
}

/// Edit distance of the record's SCE to the original field.
pub fn record_ed(r: &RunRecord) -> Option<f64> {
    let sce = r.step2.as_ref()?.sce.as_ref()?;
    Some(edit_distance_norm(&r.original, sce))
}

/// Groups records by trial, applies `f` to each group and averages the
/// defined results.
fn per_trial<F>(records: &[RunRecord], err: MetricError, f: F) -> Result<f64, MetricError>
where
    F: Fn(&[&RunRecord]) -> Option<f64>,
{
    if records.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut by_trial: BTreeMap<u32, Vec<&RunRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| counted(r)) {
        by_trial.entry(r.trial).or_default().push(r);
    }
    let vals: Vec<f64> = by_trial.values().filter_map(|g| f(g)).collect();
    if vals.is_empty() {
        Err(err)
    } else {
        Ok(sorted_mean(vals))
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 * 100.0 / den as f64)
}

/// Kept SCEs over records with a parseable Step-1 answer.
pub fn gen_pct(records: &[RunRecord]) -> Result<f64, MetricError> {
    per_trial(records, MetricError::NoParseable, |g| {
        let den = g.iter().filter(|r| step1_parsed(r)).count();
        let num = g.iter().filter(|r| r.kept()).count();
        ratio(num, den)
    })
}

/// Share of kept SCEs whose re-prediction equals the target.
pub fn val_pct(records: &[RunRecord], with_context: bool) -> Result<f64, MetricError> {
    per_trial(records, MetricError::NoKept, |g| {
        let flags: Vec<bool> = g.iter().filter_map(|r| is_valid(r, with_context)).collect();
        ratio(flags.iter().filter(|v| **v).count(), flags.len())
    })
}

/// Mean normalized edit distance over valid SCEs only.
pub fn ed_over_valid(records: &[RunRecord], with_context: bool) -> Result<f64, MetricError> {
    per_trial(records, MetricError::NoValid, |g| {
        let eds: Vec<f64> = g
            .iter()
            .filter(|r| is_valid(r, with_context) == Some(true))
            .filter_map(|r| record_ed(r))
            .collect();
        (!eds.is_empty()).then(|| sorted_mean(eds))
    })
}

/// Step-1 accuracy against gold; unparseable answers count as incorrect.
pub fn accuracy_pct(records: &[RunRecord]) -> Result<f64, MetricError> {
    per_trial(records, MetricError::NoGold, |g| {
        let with_gold: Vec<_> = g.iter().filter(|r| r.gold.is_some() && r.step1.is_some()).collect();
        let correct = with_gold
            .iter()
            .filter(|r| r.step1.as_ref().and_then(|s| s.parsed.label()) == r.gold.as_ref())
            .count();
        ratio(correct, with_gold.len())
    })
}

/// Per-example values, each averaged over that example's trials. Examples
/// for which `f` yields nothing are skipped.
pub fn per_example<F>(records: &[RunRecord], f: F) -> BTreeMap<usize, f64>
where
    F: Fn(&RunRecord) -> Option<f64>,
{
    let mut acc: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| counted(r)) {
        if let Some(v) = f(r) {
            acc.entry(r.example_index).or_default().push(v);
        }
    }
    acc.into_iter().map(|(k, vs)| (k, sorted_mean(vs))).collect()
}

fn pct(b: bool) -> f64 {
    if b {
        100.0
    } else {
        0.0
    }
}

/// Per-example series underlying each metric.
pub fn gen_series(records: &[RunRecord]) -> BTreeMap<usize, f64> {
    per_example(records, |r| step1_parsed(r).then(|| pct(r.kept())))
}

pub fn val_series(records: &[RunRecord], with_context: bool) -> BTreeMap<usize, f64> {
    per_example(records, |r| is_valid(r, with_context).map(pct))
}

pub fn ed_series(records: &[RunRecord], with_context: bool) -> BTreeMap<usize, f64> {
    per_example(records, |r| if is_valid(r, with_context) == Some(true) { record_ed(r) } else { None })
}

pub fn accuracy_series(records: &[RunRecord]) -> BTreeMap<usize, f64> {
    per_example(records, |r| {
        let s = r.step1.as_ref()?;
        let gold = r.gold.as_ref()?;
        Some(pct(s.parsed.label() == Some(gold)))
    })
}

/// Mean with a 95% half-width; the half-width is absent with fewer than two
/// examples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub ci_half_width: Option<f64>,
}

fn estimate(value: Result<f64, MetricError>, series: &BTreeMap<usize, f64>) -> Option<Estimate> {
    let mean = value.ok()?;
    let xs: Vec<f64> = series.values().copied().collect();
    let ci_half_width = stats::sem_ci(&xs).ok().map(|ci| ci.hi - ci.point);
    Some(Estimate { mean, ci_half_width })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub task: TaskId,
    pub strategy: Strategy,
    pub temperature: f64,
    pub trials: u32,
    pub examples: usize,
    pub gen: Option<Estimate>,
    pub val: Option<Estimate>,
    pub valc: Option<Estimate>,
    pub ed: Option<Estimate>,
    pub edc: Option<Estimate>,
    pub accuracy: Option<Estimate>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
}

pub fn score_records(model: &str, task: TaskId, strategy: Strategy, temperature: f64, trials: u32, records: &[RunRecord]) -> MetricRow {
    let examples = records.iter().map(|r| r.example_index).collect::<std::collections::BTreeSet<_>>().len();
    MetricRow {
        model: model.to_string(),
        task,
        strategy,
        temperature,
        trials,
        examples,
        gen: estimate(gen_pct(records), &gen_series(records)),
        val: estimate(val_pct(records, false), &val_series(records, false)),
        valc: estimate(val_pct(records, true), &val_series(records, true)),
        ed: estimate(ed_over_valid(records, false), &ed_series(records, false)),
        edc: estimate(ed_over_valid(records, true), &ed_series(records, true)),
        accuracy: estimate(accuracy_pct(records), &accuracy_series(records)),
    }
}

pub fn score_store(store: &RunStore) -> MetricRow {
    let c = &store.header.config;
    score_records(&c.backend.model_name, c.task_id, c.strategy, c.temperature, c.effective_trials(), &store.records)
}

/// Character lengths of kept SCEs split by validity.
pub fn sce_lengths(records: &[RunRecord], with_context: bool) -> (Vec<f64>, Vec<f64>) {
    let mut valid = Vec::new();
    let mut invalid = Vec::new();
    for r in records.iter().filter(|r| counted(r)) {
        if let (Some(v), Some(sce)) = (is_valid(r, with_context), r.step2.as_ref().and_then(|s| s.sce.as_ref())) {
            let len = sce.chars().count() as f64;
            if v {
                valid.push(len)
            } else {
                invalid.push(len)
            }
        }
    }
    (valid, invalid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance_norm("abc", "abc"), 0.0);
        assert!((edit_distance_norm("kitten", "sitting") - 300.0 / 7.0).abs() < 1e-9);
        assert_eq!(edit_distance_norm("", "ab"), 100.0);
        assert_eq!(edit_distance_norm("", ""), 0.0);
        assert_eq!(edit_distance("héllo", "hello"), 1);
    }

    #[test]
    fn norm_len_diff_examples() {
        assert_eq!(norm_len_diff(&[10.0, 30.0], &[20.0]).unwrap(), 0.0);
        assert_eq!(norm_len_diff(&[0.0], &[12.0]).unwrap(), 100.0);
        assert_eq!(norm_len_diff(&[25.0], &[50.0]).unwrap(), 50.0);
        assert_eq!(norm_len_diff(&[], &[1.0]), Err(MetricError::EmptyGroup));
    }

    proptest! {
        #[test]
        fn edit_distance_is_a_bounded_symmetric_score(a in "[a-d]{0,10}", b in "[a-d]{0,10}") {
            let d = edit_distance_norm(&a, &b);
            prop_assert_eq!(d, edit_distance_norm(&b, &a));
            prop_assert!((0.0..=100.0).contains(&d));
            prop_assert_eq!(d == 0.0, a == b);
        }

        #[test]
        fn norm_len_diff_is_swap_invariant(
            v in prop::collection::vec(0.0f64..500.0, 1..8),
            i in prop::collection::vec(0.0f64..500.0, 1..8),
        ) {
            let x = norm_len_diff(&v, &i).unwrap();
            prop_assert_eq!(x, norm_len_diff(&i, &v).unwrap());
            prop_assert!((0.0..=100.0).contains(&x));
        }
    }
}
