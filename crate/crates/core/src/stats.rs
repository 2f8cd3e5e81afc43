//! Confidence intervals, permutation tests, bootstrap intervals and
//! correlations.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::metrics::norm_len_diff_of_means;

pub const DEFAULT_RESAMPLES: usize = 10_000;
const Z95: f64 = 1.96;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("need at least {need} values, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("exact enumeration supports at most {max} pairs, got {got}")]
    TooMany { max: usize, got: usize },
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("series is constant; correlation undefined")]
    Constant,
    #[error("resample count must be positive")]
    NoResamples,
    #[error("non-finite input value")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalMethod {
    Sem95,
    BootstrapPercentile,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalEstimate {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    pub method: IntervalMethod,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    /// Mean of `a - b`.
    pub effect: f64,
    pub p_value: f64,
    pub resamples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub coefficient: f64,
    pub p_value: f64,
    pub n: usize,
}

fn check_finite(xs: &[f64]) -> Result<(), StatsError> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(StatsError::NonFinite)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator).
pub fn sample_sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)).sqrt()
}

/// `mean ± 1.96 · sd / √n`.
pub fn sem_ci(values: &[f64]) -> Result<IntervalEstimate, StatsError> {
    if values.len() < 2 {
        return Err(StatsError::TooFew { need: 2, got: values.len() });
    }
    check_finite(values)?;
    let m = mean(values);
    let half = Z95 * sample_sd(values) / (values.len() as f64).sqrt();
    Ok(IntervalEstimate { point: m, lo: m - half, hi: m + half, method: IntervalMethod::Sem95 })
}

/// Tolerance for "at least as extreme" comparisons, absorbing summation
/// order noise.
fn extreme(stat: f64, observed: f64) -> bool {
    stat.abs() >= observed.abs() - 1e-12 * observed.abs().max(1.0)
}

fn paired_diffs(a: &[f64], b: &[f64]) -> Result<Vec<f64>, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(StatsError::TooFew { need: 1, got: 0 });
    }
    check_finite(a)?;
    check_finite(b)?;
    Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
}

/// Two-sided paired sign-flip permutation test with +1 smoothing:
/// `p = (1 + #{|resampled mean| >= |observed mean|}) / (1 + resamples)`.
pub fn paired_permutation_test(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> Result<TestResult, StatsError> {
    if resamples == 0 {
        return Err(StatsError::NoResamples);
    }
    let d = paired_diffs(a, b)?;
    let n = d.len() as f64;
    let observed = d.iter().sum::<f64>() / n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..resamples {
        let s: f64 = d.iter().map(|x| if rng.gen::<bool>() { *x } else { -*x }).sum();
        if extreme(s / n, observed) {
            hits += 1;
        }
    }
    Ok(TestResult { effect: observed, p_value: (hits + 1) as f64 / (resamples + 1) as f64, resamples, seed })
}

/// Exact two-sided sign-flip p-value by enumerating all `2^n` patterns.
pub fn exact_sign_flip_p(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    let d = paired_diffs(a, b)?;
    if d.len() > 24 {
        return Err(StatsError::TooMany { max: 24, got: d.len() });
    }
    let n = d.len() as f64;
    let observed = d.iter().sum::<f64>() / n;
    let total = 1u64 << d.len();
    let hits = (0..total)
        .filter(|mask| {
            let s: f64 = d.iter().enumerate().map(|(i, x)| if mask >> i & 1 == 1 { -*x } else { *x }).sum();
            extreme(s / n, observed)
        })
        .count();
    Ok(hits as f64 / total as f64)
}

/// Two-sided two-sample permutation test on the difference of means
/// (`mean(x) - mean(y)`), for unpaired groups.
pub fn two_sample_permutation_test(x: &[f64], y: &[f64], resamples: usize, seed: u64) -> Result<TestResult, StatsError> {
    if resamples == 0 {
        return Err(StatsError::NoResamples);
    }
    if x.is_empty() || y.is_empty() {
        return Err(StatsError::TooFew { need: 1, got: 0 });
    }
    check_finite(x)?;
    check_finite(y)?;
    let observed = mean(x) - mean(y);
    let mut pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let total: f64 = pooled.iter().sum();
    let (nx, ny) = (x.len() as f64, y.len() as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..resamples {
        pooled.shuffle(&mut rng);
        let sx: f64 = pooled[..x.len()].iter().sum();
        if extreme(sx / nx - (total - sx) / ny, observed) {
            hits += 1;
        }
    }
    Ok(TestResult { effect: observed, p_value: (hits + 1) as f64 / (resamples + 1) as f64, resamples, seed })
}

/// Linear-interpolation percentile of sorted data, `q` in [0, 100].
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Bootstrap of the normalized length difference: both groups resampled
/// with replacement; reports the bootstrap mean and 2.5/97.5 percentiles.
pub fn bootstrap_norm_len_diff(
    valid_lengths: &[f64],
    invalid_lengths: &[f64],
    resamples: usize,
    seed: u64,
) -> Result<IntervalEstimate, StatsError> {
    if resamples == 0 {
        return Err(StatsError::NoResamples);
    }
    if valid_lengths.is_empty() || invalid_lengths.is_empty() {
        return Err(StatsError::TooFew { need: 1, got: 0 });
    }
    check_finite(valid_lengths)?;
    check_finite(invalid_lengths)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw_mean = |xs: &[f64], rng: &mut ChaCha8Rng| {
        (0..xs.len()).map(|_| xs[rng.gen_range(0..xs.len())]).sum::<f64>() / xs.len() as f64
    };
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| {
            let lv = draw_mean(valid_lengths, &mut rng);
            let li = draw_mean(invalid_lengths, &mut rng);
            norm_len_diff_of_means(lv, li)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    Ok(IntervalEstimate {
        point: mean(&stats),
        lo: percentile_sorted(&stats, 2.5),
        hi: percentile_sorted(&stats, 97.5),
        method: IntervalMethod::BootstrapPercentile,
    })
}

fn check_pair(xs: &[f64], ys: &[f64]) -> Result<(), StatsError> {
    if xs.len() != ys.len() {
        return Err(StatsError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 3 {
        return Err(StatsError::TooFew { need: 3, got: xs.len() });
    }
    check_finite(xs)?;
    check_finite(ys)
}

fn product_moment(xs: &[f64], ys: &[f64]) -> Result<f64, StatsError> {
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::Constant);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Two-tailed p for a correlation via `t = r √((n-2)/(1-r²))`.
pub fn correlation_p(r: f64, n: usize) -> f64 {
    if r.abs() >= 1.0 {
        return 0.0;
    }
    let df = (n - 2) as f64;
    let t = r * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<Correlation, StatsError> {
    check_pair(xs, ys)?;
    let r = product_moment(xs, ys)?;
    Ok(Correlation { coefficient: r, p_value: correlation_p(r, xs.len()), n: xs.len() })
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson on average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<Correlation, StatsError> {
    check_pair(xs, ys)?;
    let r = product_moment(&average_ranks(xs), &average_ranks(ys))?;
    Ok(Correlation { coefficient: r, p_value: correlation_p(r, xs.len()), n: xs.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn sem_examples() {
        let ci = sem_ci(&[5.0, 5.0, 5.0]).unwrap();
        assert_eq!((ci.point, ci.lo, ci.hi), (5.0, 5.0, 5.0));
        assert!(sem_ci(&[1.0]).is_err());
    }

    #[test]
    fn permutation_constant_shift() {
        let a: Vec<f64> = (0..10).map(f64::from).collect();
        let b: Vec<f64> = a.iter().map(|x| x + 100.0).collect();
        assert_abs_diff_eq!(exact_sign_flip_p(&a, &b).unwrap(), 2.0 / 1024.0);
        let t = paired_permutation_test(&a, &b, DEFAULT_RESAMPLES, 7).unwrap();
        assert_eq!(t.effect, -100.0);
        assert!((t.p_value - 2.0 / 1024.0).abs() < 0.002, "p = {}", t.p_value);
        assert_eq!(t, paired_permutation_test(&a, &b, DEFAULT_RESAMPLES, 7).unwrap());
        assert!(paired_permutation_test(&a, &b[..3], 10, 0).is_err());
        assert!(paired_permutation_test(&[], &[], 10, 0).is_err());
    }

    #[test]
    fn two_sample_identical_groups() {
        let t = two_sample_permutation_test(&[3.0, 3.0], &[3.0, 3.0, 3.0], 500, 1).unwrap();
        assert_eq!(t.effect, 0.0);
        assert_eq!(t.p_value, 1.0);
        let far = two_sample_permutation_test(&[0.0; 8], &[50.0; 8], 2000, 1).unwrap();
        assert!(far.p_value < 0.01);
    }

    #[test]
    fn bootstrap_degenerate_groups() {
        let ci = bootstrap_norm_len_diff(&[25.0, 25.0], &[50.0, 50.0, 50.0], 1000, 3).unwrap();
        assert_eq!((ci.point, ci.lo, ci.hi), (50.0, 50.0, 50.0));
        assert!(bootstrap_norm_len_diff(&[], &[1.0], 10, 0).is_err());
    }

    #[test]
    fn correlation_examples() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x).collect();
        assert_abs_diff_eq!(pearson(&xs, &ys).unwrap().coefficient, 1.0, epsilon = 1e-12);
        let rev = [9.0, 7.0, 4.0, 2.0, 1.0];
        assert_abs_diff_eq!(spearman(&xs, &rev).unwrap().coefficient, -1.0, epsilon = 1e-12);
        assert_eq!(pearson(&xs, &[1.0; 5]), Err(StatsError::Constant));
        assert!(pearson(&xs[..2], &ys[..2]).is_err());
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    // Reference values from scipy.stats (spearmanr, pearsonr, t.sf).
    #[test]
    fn correlation_reference_values() {
        assert_abs_diff_eq!(correlation_p(0.76, 7), 0.047394903623728515, epsilon = 1e-9);
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        let s = spearman(&xs, &[2.0, 1.0, 4.0, 3.0, 7.0, 5.0, 6.0]).unwrap();
        assert_abs_diff_eq!(s.coefficient, 0.8214285714285715, epsilon = 1e-12);
        assert_abs_diff_eq!(s.p_value, 0.023448808345691505, epsilon = 1e-9);
        let (tx, ty) = ([1.0, 2.0, 2.0, 3.0, 5.0, 8.0, 8.0], [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0]);
        let s = spearman(&tx, &ty).unwrap();
        assert_abs_diff_eq!(s.coefficient, 0.3394638275806279, epsilon = 1e-12);
        assert_abs_diff_eq!(s.p_value, 0.4563308866752069, epsilon = 1e-9);
        let p = pearson(&tx, &ty).unwrap();
        assert_abs_diff_eq!(p.coefficient, 0.5162044806743386, epsilon = 1e-12);
        assert_abs_diff_eq!(p.p_value, 0.23559359667049912, epsilon = 1e-9);
    }

    proptest! {
        #[test]
        fn correlations_survive_positive_affine_maps(
            pts in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 4..20),
            scale in 0.1f64..10.0,
            shift in -50.0f64..50.0,
        ) {
            let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
            let xt: Vec<f64> = xs.iter().map(|x| scale * x + shift).collect();
            if let (Ok(a), Ok(b)) = (pearson(&xs, &ys), pearson(&xt, &ys)) {
                prop_assert!((a.coefficient - b.coefficient).abs() < 1e-9);
            }
            if let (Ok(a), Ok(b)) = (spearman(&xs, &ys), spearman(&xt, &ys)) {
                prop_assert!((a.coefficient - b.coefficient).abs() < 1e-9);
            }
        }

        #[test]
        fn permutation_is_antisymmetric_in_arguments(
            pairs in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0), 1..10),
            seed in any::<u64>(),
        ) {
            let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let ab = paired_permutation_test(&a, &b, 500, seed).unwrap();
            let ba = paired_permutation_test(&b, &a, 500, seed).unwrap();
            prop_assert!((ab.effect + ba.effect).abs() < 1e-9);
            prop_assert!((ab.p_value - ba.p_value).abs() < 1e-12);
            prop_assert!(ab.p_value > 0.0 && ab.p_value <= 1.0);
        }

        #[test]
        fn bootstrap_interval_is_ordered_and_bounded(
            v in prop::collection::vec(1.0f64..300.0, 1..10),
            i in prop::collection::vec(1.0f64..300.0, 1..10),
            seed in any::<u64>(),
        ) {
            let ci = bootstrap_norm_len_diff(&v, &i, 200, seed).unwrap();
            prop_assert!(ci.lo <= ci.hi);
            prop_assert!(ci.lo >= 0.0 && ci.hi <= 100.0);
        }
    }
}
