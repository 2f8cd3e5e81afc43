//! Failure-case analysis: readability, embedding drift, z-scoring, 2-means
//! clustering under four distance variants, and cluster separation scores.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("text has no words")]
    EmptyText,
    #[error("vector dimensions differ ({0} vs {1})")]
    DimMismatch(usize, usize),
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("need at least {need} rows, got {got}")]
    TooFewRows { need: usize, got: usize },
    #[error("all rows are identical; two clusters are undefined")]
    IdenticalRows,
    #[error("lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("empty list")]
    EmptyList,
    #[error("non-finite value")]
    NonFinite,
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
    #[error("{path}: {message}")]
    VectorFile { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Readability {
    pub sentences: usize,
    pub words: usize,
    pub syllables: usize,
    pub reading_ease: f64,
    pub grade_level: f64,
}

/// Vowel-group syllable estimate with a silent-e adjustment.
pub fn syllables(word: &str) -> usize {
    let w: Vec<char> = word.chars().filter(|c| c.is_alphabetic()).flat_map(char::to_lowercase).collect();
    if w.is_empty() {
        return 1;
    }
    let vowel = |c: char| "aeiouy".contains(c);
    let mut groups = 0;
    let mut prev = false;
    for &c in &w {
        let v = vowel(c);
        if v && !prev {
            groups += 1;
        }
        prev = v;
    }
    let n = w.len();
    // Final "e" is silent except in consonant + "le" endings.
    if groups > 1 && w[n - 1] == 'e' && !(n >= 3 && w[n - 2] == 'l' && !vowel(w[n - 3])) && !vowel(w[n - 2]) {
        groups -= 1;
    }
    groups.max(1)
}

fn words(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace().filter(|t| t.chars().any(char::is_alphanumeric))
}

pub fn readability(text: &str) -> Result<Readability, AnalysisError> {
    let word_count = words(text).count();
    if word_count == 0 {
        return Err(AnalysisError::EmptyText);
    }
    let sentences = text
        .split(['.', '!', '?'])
        .filter(|s| s.chars().any(char::is_alphanumeric))
        .count()
        .max(1);
    let syl: usize = words(text).map(syllables).sum();
    let wps = word_count as f64 / sentences as f64;
    let spw = syl as f64 / word_count as f64;
    Ok(Readability {
        sentences,
        words: word_count,
        syllables: syl,
        reading_ease: 206.835 - 1.015 * wps - 84.6 * spw,
        grade_level: 0.39 * wps + 11.8 * spw - 15.59,
    })
}

/// Flesch reading ease.
pub fn flesch_reading_ease(text: &str) -> Result<f64, AnalysisError> {
    readability(text).map(|r| r.reading_ease)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine distance `1 - cos(e1, e2)`, in [0, 2].
pub fn drift(e1: &[f64], e2: &[f64]) -> Result<f64, AnalysisError> {
    if e1.len() != e2.len() {
        return Err(AnalysisError::DimMismatch(e1.len(), e2.len()));
    }
    if e1.iter().chain(e2).any(|x| !x.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    let ss1: f64 = e1.iter().map(|x| x * x).sum();
    let ss2: f64 = e2.iter().map(|x| x * x).sum();
    if ss1 == 0.0 || ss2 == 0.0 {
        return Err(AnalysisError::ZeroVector);
    }
    let dot: f64 = e1.iter().zip(e2).map(|(a, b)| a * b).sum();
    let cos = if e1 == e2 { 1.0 } else { dot / (ss1 * ss2).sqrt() };
    Ok(1.0 - cos.clamp(-1.0, 1.0))
}

pub type Matrix = Vec<Vec<f64>>;

fn check_matrix(m: &[Vec<f64>], min_rows: usize) -> Result<usize, AnalysisError> {
    if m.len() < min_rows {
        return Err(AnalysisError::TooFewRows { need: min_rows, got: m.len() });
    }
    let d = m[0].len();
    for row in m {
        if row.len() != d {
            return Err(AnalysisError::DimMismatch(d, row.len()));
        }
        if row.iter().any(|x| !x.is_finite()) {
            return Err(AnalysisError::NonFinite);
        }
    }
    Ok(d)
}

/// Per-column standardization with the population sd. Constant columns map
/// to zeros.
pub fn zscore_normalize(m: &[Vec<f64>]) -> Result<Matrix, AnalysisError> {
    let d = check_matrix(m, 2)?;
    let n = m.len() as f64;
    let mut out = m.to_vec();
    for j in 0..d {
        let mean = m.iter().map(|r| r[j]).sum::<f64>() / n;
        let sd = (m.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n).sqrt();
        for (o, r) in out.iter_mut().zip(m) {
            o[j] = if sd > 0.0 { (r[j] - mean) / sd } else { 0.0 };
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMetric {
    EuclidRaw,
    EuclidNorm,
    CosineRaw,
    CosineNorm,
}

impl ClusterMetric {
    pub const ALL: [ClusterMetric; 4] =
        [ClusterMetric::EuclidRaw, ClusterMetric::EuclidNorm, ClusterMetric::CosineRaw, ClusterMetric::CosineNorm];

    pub fn as_str(self) -> &'static str {
        match self {
            ClusterMetric::EuclidRaw => "euclid_raw",
            ClusterMetric::EuclidNorm => "euclid_norm",
            ClusterMetric::CosineRaw => "cosine_raw",
            ClusterMetric::CosineNorm => "cosine_norm",
        }
    }

    fn standardize(self) -> bool {
        matches!(self, ClusterMetric::EuclidNorm | ClusterMetric::CosineNorm)
    }

    fn unit_rows(self) -> bool {
        matches!(self, ClusterMetric::CosineRaw | ClusterMetric::CosineNorm)
    }
}

impl fmt::Display for ClusterMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClusterMetric {
    type Err = AnalysisError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ClusterMetric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| AnalysisError::UnknownMetric(s.to_string()))
    }
}

pub const MAX_ITERATIONS: usize = 100;
pub const SHIFT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    /// Cluster per row; row 0 is always in cluster 0.
    pub assignments: Vec<u8>,
    /// Within-cluster sum of squares after each assignment step.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Rows as they are clustered under `metric`.
pub fn prepare_rows(m: &[Vec<f64>], metric: ClusterMetric) -> Result<Matrix, AnalysisError> {
    check_matrix(m, 2)?;
    let mut rows = if metric.standardize() { zscore_normalize(m)? } else { m.to_vec() };
    if metric.unit_rows() {
        for r in rows.iter_mut() {
            let n = norm(r);
            if n > 0.0 {
                r.iter_mut().for_each(|x| *x /= n);
            }
        }
    }
    Ok(rows)
}

/// 2-means with seeded k-means++ initialization and Lloyd iterations.
/// Cosine variants run on unit-normalized rows; `_norm` variants z-score first.
pub fn kmeans2(m: &[Vec<f64>], metric: ClusterMetric, seed: u64) -> Result<KMeansResult, AnalysisError> {
    let rows = prepare_rows(m, metric)?;
    let n = rows.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let first = rng.gen_range(0..n);
    let d2: Vec<f64> = rows.iter().map(|r| sq_dist(r, &rows[first])).collect();
    let total: f64 = d2.iter().sum();
    if total == 0.0 {
        return Err(AnalysisError::IdenticalRows);
    }
    let mut pick = rng.gen::<f64>() * total;
    let mut second = n - 1;
    for (i, w) in d2.iter().enumerate() {
        if *w > 0.0 && pick < *w {
            second = i;
            break;
        }
        pick -= w;
    }
    if d2[second] == 0.0 {
        second = d2.iter().rposition(|w| *w > 0.0).expect("total > 0");
    }
    let mut centroids = [rows[first].clone(), rows[second].clone()];

    let mut assignments = vec![0u8; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut objective = 0.0;
        for (a, r) in assignments.iter_mut().zip(&rows) {
            let (d0, d1) = (sq_dist(r, &centroids[0]), sq_dist(r, &centroids[1]));
            *a = u8::from(d1 < d0);
            objective += d0.min(d1);
        }
        trace.push(objective);
        let mut shift: f64 = 0.0;
        for k in 0..2u8 {
            let members: Vec<&Vec<f64>> = rows.iter().zip(&assignments).filter(|(_, a)| **a == k).map(|(r, _)| r).collect();
            if members.is_empty() {
                continue;
            }
            let mut c = vec![0.0; rows[0].len()];
            for r in &members {
                for (cj, x) in c.iter_mut().zip(r.iter()) {
                    *cj += x;
                }
            }
            c.iter_mut().for_each(|x| *x /= members.len() as f64);
            shift = shift.max(sq_dist(&c, &centroids[k as usize]).sqrt());
            centroids[k as usize] = c;
        }
        if shift < SHIFT_TOLERANCE {
            break;
        }
    }
    if assignments[0] == 1 {
        assignments.iter_mut().for_each(|a| *a = 1 - *a);
    }
    Ok(KMeansResult { assignments, objective_trace: trace, iterations })
}

/// Per-cluster `|#valid - #invalid|`.
pub fn cluster_deltas(assignments: &[u8], valid: &[bool]) -> Result<(usize, usize), AnalysisError> {
    if assignments.len() != valid.len() {
        return Err(AnalysisError::LengthMismatch(assignments.len(), valid.len()));
    }
    let mut counts = [[0usize; 2]; 2];
    for (a, v) in assignments.iter().zip(valid) {
        counts[usize::from(*a != 0)][usize::from(*v)] += 1;
    }
    Ok((counts[0][1].abs_diff(counts[0][0]), counts[1][1].abs_diff(counts[1][0])))
}

/// Mean of `Δ₀ + Δ₁` over a list of (model, dataset) pairs.
pub fn sep_score(deltas: &[(usize, usize)]) -> Result<f64, AnalysisError> {
    if deltas.is_empty() {
        return Err(AnalysisError::EmptyList);
    }
    Ok(deltas.iter().map(|(a, b)| (a + b) as f64).sum::<f64>() / deltas.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    FirstGeneratedToken,
    LastGeneratedToken,
    LastInputToken,
    SentenceEmbedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VectorSource {
    EmbeddingEndpoint,
    ImportedFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationSet {
    pub vectors: Matrix,
    pub source: VectorSource,
    pub labels: Vec<bool>,
    pub variant: Variant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorHeader {
    pub dim: usize,
    pub variant: Variant,
}

/// Reads a vector file: a JSON header `{dim, variant}` then one
/// whitespace-separated row per example.
pub fn load_vectors(path: impl AsRef<Path>, valid: &[bool]) -> Result<RepresentationSet, AnalysisError> {
    let path = path.as_ref();
    let fail = |message: String| AnalysisError::VectorFile { path: path.to_path_buf(), message };
    let text = fs::read_to_string(path).map_err(|e| fail(e.to_string()))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| fail("missing header".into()))?;
    let header: VectorHeader = serde_json::from_str(header).map_err(|e| fail(format!("header: {e}")))?;
    let mut vectors = Vec::new();
    for (i, line) in lines {
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| fail(format!("line {}: {e}", i + 1))))
            .collect::<Result<_, _>>()?;
        if row.len() != header.dim {
            return Err(fail(format!("line {}: expected {} values, found {}", i + 1, header.dim, row.len())));
        }
        if row.iter().any(|x| !x.is_finite()) {
            return Err(fail(format!("line {}: non-finite value", i + 1)));
        }
        vectors.push(row);
    }
    if vectors.len() != valid.len() {
        return Err(fail(format!("{} rows but {} validity flags", vectors.len(), valid.len())));
    }
    Ok(RepresentationSet { vectors, source: VectorSource::ImportedFile, labels: valid.to_vec(), variant: header.variant })
}
