//! Deterministic statistical primitives shared by every other module.
//!
//! All functions are pure over borrowed slices. Missing observations in time
//! series are represented as `None`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("cross-section has {0} members, need at least 2")]
    DegenerateCrossSection(usize),
    #[error("non-finite value at index {0}")]
    InvalidValue(usize),
    #[error("correlation undefined (constant input or fewer than 3 points)")]
    UndefinedCorrelation,
    #[error("AUROC undefined: labels contain a single class")]
    UndefinedAuroc,
    #[error("design matrix is rank deficient")]
    SingularDesign,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
}

pub type Result<T> = std::result::Result<T, StatsError>;

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(StatsError::InvalidValue(i)),
        None => Ok(()),
    }
}

/// Average ranks (1-based) with ties sharing the mean of their positions.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j (0-based) share rank mean((i+1)..=(j+1))
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Cross-sectional percentile rank in `[0, 1]`.
///
/// Ties receive the average rank, which is then mapped through
/// `(avg_rank - 1) / (N - 1)` so the extremes land exactly on 0 and 1.
pub fn percentile_rank(values: &[f64]) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(StatsError::DegenerateCrossSection(values.len()));
    }
    check_finite(values)?;
    let denom = (values.len() - 1) as f64;
    Ok(average_ranks(values)
        .into_iter()
        .map(|r| (r - 1.0) / denom)
        .collect())
}

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Sample standard deviation (n - 1 denominator).
pub fn std_dev(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let m = mean(values)?;
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    Some((ss / (values.len() - 1) as f64).sqrt())
}

pub fn median(values: &[f64]) -> Option<f64> {
    quantile(values, 0.5).ok()
}

/// Pearson correlation; `UndefinedCorrelation` when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(StatsError::UndefinedCorrelation);
    }
    let mx = mean(x).unwrap();
    let my = mean(y).unwrap();
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(StatsError::UndefinedCorrelation);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation: Pearson correlation of percentile ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(StatsError::UndefinedCorrelation);
    }
    let rx = percentile_rank(x)?;
    let ry = percentile_rank(y)?;
    pearson(&rx, &ry)
}

/// Area under the ROC curve via the rank-sum (Mann-Whitney) identity.
///
/// Equals `P(score_pos > score_neg) + 0.5 * P(tie)`.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(StatsError::LengthMismatch(scores.len(), labels.len()));
    }
    check_finite(scores)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(StatsError::UndefinedAuroc);
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(r, _)| r)
        .sum();
    let n_pos_f = n_pos as f64;
    let u = rank_sum - n_pos_f * (n_pos_f + 1.0) / 2.0;
    Ok(u / (n_pos_f * n_neg as f64))
}

/// Exponentially weighted moving average with bias-corrected weights.
///
/// Decay `alpha = 1 - exp(-ln 2 / halflife)`; an observation `k` observed
/// steps old carries weight `(1 - alpha)^k`. Missing inputs are skipped
/// without resetting the state and do not age earlier observations. The
/// output is `None` until `min_periods` observations have been seen; at a
/// missing input past warm-up the last value is carried.
pub fn ewma(series: &[Option<f64>], halflife: f64, min_periods: usize) -> Vec<Option<f64>> {
    assert!(halflife > 0.0, "halflife must be positive");
    let alpha = 1.0 - (-std::f64::consts::LN_2 / halflife).exp();
    let decay = 1.0 - alpha;
    let (mut num, mut den) = (0.0, 0.0);
    let mut seen = 0usize;
    let mut last = None;
    series
        .iter()
        .map(|x| {
            if let Some(v) = x.filter(|v| v.is_finite()) {
                num = num * decay + v;
                den = den * decay + 1.0;
                seen += 1;
                if seen >= min_periods.max(1) {
                    last = Some(num / den);
                }
            }
            last
        })
        .collect()
}

/// Expanding z-score `(x_t - mean_{1..t}) / max(std_{1..t}, std_floor)`.
///
/// Statistics use the observed values up to and including `t` (sample
/// standard deviation). Undefined before `min_periods` observations or where
/// the input itself is missing.
pub fn expanding_zscore(
    series: &[Option<f64>],
    min_periods: usize,
    std_floor: f64,
) -> Vec<Option<f64>> {
    let min_periods = min_periods.max(2);
    // Welford accumulator
    let (mut n, mut m, mut m2) = (0usize, 0.0f64, 0.0f64);
    series
        .iter()
        .map(|x| {
            let v = x.filter(|v| v.is_finite())?;
            n += 1;
            let delta = v - m;
            m += delta / n as f64;
            m2 += delta * (v - m);
            if n < min_periods {
                return None;
            }
            let sd = (m2 / (n - 1) as f64).max(0.0).sqrt();
            Some((v - m) / sd.max(std_floor))
        })
        .collect()
}

/// Two-sample Kolmogorov-Smirnov statistic `sup |F_a - F_b|`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::Empty);
    }
    check_finite(a)?;
    check_finite(b)?;
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let t = a[i].min(b[j]);
        while i < a.len() && a[i] <= t {
            i += 1;
        }
        while j < b.len() && b[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

/// OLS residuals of `y` on the columns of `regressors` plus an intercept.
///
/// Solved by Householder QR; a diagonal entry of R below `1e-10` times the
/// largest one is treated as rank deficiency.
pub fn ols_residualize(y: &[f64], regressors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = y.len();
    let p = regressors.len() + 1;
    for col in regressors {
        if col.len() != n {
            return Err(StatsError::LengthMismatch(col.len(), n));
        }
        check_finite(col)?;
    }
    check_finite(y)?;
    if n < p + 1 {
        return Err(StatsError::SingularDesign);
    }
    let x = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { regressors[j - 1][i] });
    let yv = DVector::from_column_slice(y);
    let qr = x.clone().qr();
    let r = qr.r();
    let diag_max = (0..p).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if diag_max == 0.0 || (0..p).any(|i| r[(i, i)].abs() <= 1e-10 * diag_max) {
        return Err(StatsError::SingularDesign);
    }
    let qty = qr.q().transpose() * &yv;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or(StatsError::SingularDesign)?;
    let fitted = x * beta;
    Ok(y.iter().zip(fitted.iter()).map(|(a, b)| a - b).collect())
}

/// Linear-interpolation (type 7) quantile.
pub fn quantile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(StatsError::Empty);
    }
    check_finite(values)?;
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&v, p))
}

/// Type-7 quantile of an already sorted, non-empty slice.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let p = p.clamp(0.0, 1.0);
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute-force average rank: count strictly-smaller and equal elements.
    fn brute_percentile(v: &[f64]) -> Vec<f64> {
        let n = v.len() as f64;
        v.iter()
            .map(|x| {
                let less = v.iter().filter(|y| *y < x).count() as f64;
                let eq = v.iter().filter(|y| *y == x).count() as f64;
                let avg_rank = less + (eq + 1.0) / 2.0;
                (avg_rank - 1.0) / (n - 1.0)
            })
            .collect()
    }

    /// Direct Pearson-of-ranks oracle using O(N^2) rank counting.
    fn spearman_oracle(x: &[f64], y: &[f64]) -> f64 {
        let rx = brute_percentile(x);
        let ry = brute_percentile(y);
        let n = x.len() as f64;
        let mx = rx.iter().sum::<f64>() / n;
        let my = ry.iter().sum::<f64>() / n;
        let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    fn auroc_oracle(s: &[f64], l: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if l[i] && !l[j] {
                    den += 1.0;
                    if s[i] > s[j] {
                        num += 1.0;
                    } else if s[i] == s[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn percentile_rank_examples() {
        assert_eq!(percentile_rank(&[3.0, 1.0, 2.0]).unwrap(), vec![1.0, 0.0, 0.5]);
        assert_eq!(percentile_rank(&[5.0, 5.0]).unwrap(), vec![0.5, 0.5]);
        let v = [0.3, -1.0, 2.5, 0.3, 7.0, 1.1];
        assert_eq!(percentile_rank(&v).unwrap(), brute_percentile(&v));
        assert_eq!(
            percentile_rank(&[1.0]),
            Err(StatsError::DegenerateCrossSection(1))
        );
        assert_eq!(
            percentile_rank(&[1.0, f64::NAN]),
            Err(StatsError::InvalidValue(1))
        );
    }

    #[test]
    fn spearman_examples() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((spearman(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let rev: Vec<f64> = x.iter().rev().copied().collect();
        assert!((spearman(&x, &rev).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(
            spearman(&x, &[1.0; 5]),
            Err(StatsError::UndefinedCorrelation)
        );
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let a: Vec<f64> = (0..8).map(|_| rng.gen_range(0..5) as f64).collect();
            let b: Vec<f64> = (0..8).map(|_| rng.gen::<f64>()).collect();
            match spearman(&a, &b) {
                Ok(r) => assert!((r - spearman_oracle(&a, &b)).abs() < 1e-12),
                Err(e) => assert_eq!(e, StatsError::UndefinedCorrelation),
            }
        }
    }

    #[test]
    fn auroc_examples() {
        let s = [0.1, 0.2, 0.8, 0.9];
        let l = [false, false, true, true];
        assert_eq!(auroc(&s, &l).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 4], &l).unwrap(), 0.5);
        assert_eq!(auroc(&s, &[true; 4]), Err(StatsError::UndefinedAuroc));
        let s10 = [0.5, 0.1, 0.5, 0.7, 0.2, 0.9, 0.5, 0.3, 0.8, 0.2];
        let l10 = [true, false, false, true, true, true, false, false, true, false];
        assert_eq!(auroc(&s10, &l10).unwrap(), auroc_oracle(&s10, &l10));
    }

    #[test]
    fn auroc_exhaustive_up_to_50() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 2..=50 {
            for _ in 0..5 {
                let s: Vec<f64> = (0..n).map(|_| rng.gen_range(0..10) as f64 / 10.0).collect();
                let mut l: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
                l[0] = true;
                l[1] = false;
                assert_eq!(auroc(&s, &l).unwrap(), auroc_oracle(&s, &l));
            }
        }
    }

    fn ewma_oracle(series: &[f64], halflife: f64, t: usize) -> f64 {
        let decay = (-std::f64::consts::LN_2 / halflife).exp();
        let (mut num, mut den) = (0.0, 0.0);
        for (k, x) in series[..=t].iter().rev().enumerate() {
            let w = decay.powi(k as i32);
            num += w * x;
            den += w;
        }
        num / den
    }

    #[test]
    fn ewma_examples() {
        let c: Vec<Option<f64>> = vec![Some(2.5); 30];
        let out = ewma(&c, 30.0, 20);
        assert!(out[..19].iter().all(Option::is_none));
        assert!(out[19..].iter().all(|v| (v.unwrap() - 2.5).abs() < 1e-14));

        // halflife definition: weight of an observation h steps old is half
        let alpha = 1.0 - (-std::f64::consts::LN_2 / 30.0).exp();
        assert!(((1.0 - alpha).powi(30) - 0.5).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<f64> = (0..40).map(|_| rng.gen::<f64>() - 0.5).collect();
        let out = ewma(&xs.iter().copied().map(Some).collect::<Vec<_>>(), 7.0, 3);
        for t in 2..40 {
            assert!((out[t].unwrap() - ewma_oracle(&xs, 7.0, t)).abs() < 1e-12);
        }
        assert!(out[1].is_none());
    }

    #[test]
    fn ewma_skips_missing() {
        let s = vec![Some(1.0), None, Some(3.0), None];
        let out = ewma(&s, 1.0, 1);
        assert_eq!(out[1], out[0]);
        let expected = ewma_oracle(&[1.0, 3.0], 1.0, 1);
        assert!((out[2].unwrap() - expected).abs() < 1e-15);
        assert_eq!(out[3], out[2]);
    }

    #[test]
    fn expanding_zscore_examples() {
        let c = vec![Some(1.0); 10];
        let z = expanding_zscore(&c, 2, 1e-9);
        assert!(z[0].is_none());
        assert!(z[1..].iter().all(|v| v.unwrap() == 0.0));

        let z = expanding_zscore(&[Some(0.0), Some(1.0)], 2, 1e-9);
        let sd = std_dev(&[0.0, 1.0]).unwrap();
        assert!((z[1].unwrap() - 0.5 / sd).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xs: Vec<f64> = (0..30).map(|_| rng.gen::<f64>() * 4.0).collect();
        let z = expanding_zscore(&xs.iter().copied().map(Some).collect::<Vec<_>>(), 3, 1e-9);
        for t in 2..30 {
            let w = &xs[..=t];
            let expect = (xs[t] - mean(w).unwrap()) / std_dev(w).unwrap();
            assert!((z[t].unwrap() - expect).abs() < 1e-12);
        }
    }

    fn ks_oracle(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .chain(b)
            .map(|t| {
                let fa = a.iter().filter(|x| *x <= t).count() as f64 / a.len() as f64;
                let fb = b.iter().filter(|x| *x <= t).count() as f64 / b.len() as f64;
                (fa - fb).abs()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn ks_examples() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(ks_two_sample(&a, &a).unwrap(), 0.0);
        assert_eq!(ks_two_sample(&a, &[10.0, 11.0]).unwrap(), 1.0);
        let b = [0.5, 2.0, 2.0, 4.0, 3.0];
        assert!((ks_two_sample(&a, &b).unwrap() - ks_oracle(&a, &b)).abs() < 1e-15);
    }

    /// Normal-equations oracle: solve (X'X) beta = X'y with Gaussian elimination.
    fn ols_oracle(y: &[f64], cols: &[Vec<f64>]) -> Vec<f64> {
        let n = y.len();
        let p = cols.len() + 1;
        let xij = |i: usize, j: usize| if j == 0 { 1.0 } else { cols[j - 1][i] };
        let mut a = vec![vec![0.0; p + 1]; p];
        for r in 0..p {
            for c in 0..p {
                a[r][c] = (0..n).map(|i| xij(i, r) * xij(i, c)).sum();
            }
            a[r][p] = (0..n).map(|i| xij(i, r) * y[i]).sum();
        }
        for k in 0..p {
            let piv = (k..p).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
            a.swap(k, piv);
            for r in 0..p {
                if r != k {
                    let f = a[r][k] / a[k][k];
                    for c in k..=p {
                        a[r][c] -= f * a[k][c];
                    }
                }
            }
        }
        let beta: Vec<f64> = (0..p).map(|k| a[k][p] / a[k][k]).collect();
        (0..n)
            .map(|i| y[i] - (0..p).map(|j| beta[j] * xij(i, j)).sum::<f64>())
            .collect()
    }

    #[test]
    fn ols_examples() {
        // y orthogonal to centered x -> residual = y - mean(y)
        let x = vec![vec![-1.0, 1.0, -1.0, 1.0]];
        let y = [1.0, 1.0, 3.0, 3.0];
        let r = ols_residualize(&y, &x).unwrap();
        for (ri, yi) in r.iter().zip(y) {
            assert!((ri - (yi - 2.0)).abs() < 1e-12);
        }
        let x = vec![vec![0.0, 1.0, 2.0, 3.0, 4.0]];
        let y: Vec<f64> = x[0].iter().map(|v| 2.0 * v - 1.0).collect();
        assert!(ols_residualize(&y, &x).unwrap().iter().all(|r| r.abs() < 1e-10));
        let collinear = vec![vec![1.0, 2.0, 3.0, 4.0], vec![2.0, 4.0, 6.0, 8.0]];
        assert_eq!(
            ols_residualize(&[1.0, 0.0, 2.0, 5.0], &collinear),
            Err(StatsError::SingularDesign)
        );

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cols: Vec<Vec<f64>> = (0..3).map(|_| (0..20).map(|_| rng.gen::<f64>()).collect()).collect();
        let y: Vec<f64> = (0..20).map(|_| rng.gen::<f64>() * 3.0).collect();
        let r = ols_residualize(&y, &cols).unwrap();
        let o = ols_oracle(&y, &cols);
        for (a, b) in r.iter().zip(&o) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn quantile_examples() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.0).unwrap(), 1.0);
        assert_eq!(quantile(&v, 1.0).unwrap(), 5.0);
        assert_eq!(quantile(&v, 0.5).unwrap(), 3.0);
        // (n-1)p = 0.1 -> 0 + 0.1 * 10
        assert!((quantile(&[0.0, 10.0], 0.1).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(quantile(&[], 0.5), Err(StatsError::Empty));
    }

    proptest! {
        #[test]
        fn percentile_rank_invariant_under_monotone_map(v in proptest::collection::vec(-50i32..50, 2..30)) {
            let x: Vec<f64> = v.iter().map(|&a| a as f64).collect();
            let fx: Vec<f64> = x.iter().map(|a| (a / 10.0).exp() * 3.0 + 1.0).collect();
            let r = percentile_rank(&x).unwrap();
            prop_assert_eq!(&r, &percentile_rank(&fx).unwrap());
            prop_assert!(r.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }

        #[test]
        fn spearman_invariant_under_increasing_maps(
            v in proptest::collection::vec((-20i32..20, -20i32..20), 3..25)
        ) {
            let x: Vec<f64> = v.iter().map(|p| p.0 as f64).collect();
            let y: Vec<f64> = v.iter().map(|p| p.1 as f64).collect();
            let fx: Vec<f64> = x.iter().map(|a| a.powi(3)).collect();
            let gy: Vec<f64> = y.iter().map(|b| (b / 5.0).exp()).collect();
            match (spearman(&x, &y), spearman(&fx, &gy)) {
                (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-12),
                (Err(a), Err(b)) => prop_assert_eq!(a, b),
                _ => prop_assert!(false),
            }
        }

        #[test]
        fn quantile_monotone_in_p(v in proptest::collection::vec(-1e3f64..1e3, 1..40), p in 0.0f64..1.0, q in 0.0f64..1.0) {
            let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
            prop_assert!(quantile(&v, lo).unwrap() <= quantile(&v, hi).unwrap());
        }

        #[test]
        fn ols_residuals_orthogonal(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cols: Vec<Vec<f64>> = (0..2).map(|_| (0..15).map(|_| rng.gen::<f64>()).collect()).collect();
            let y: Vec<f64> = (0..15).map(|_| rng.gen::<f64>() * 5.0).collect();
            let r = ols_residualize(&y, &cols).unwrap();
            let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(r.iter().sum::<f64>().abs() <= 1e-8 * norm);
            for c in &cols {
                let ip: f64 = c.iter().zip(&r).map(|(a, b)| a * b).sum();
                prop_assert!(ip.abs() <= 1e-8 * norm);
            }
        }

        #[test]
        fn ewma_constant_fixed_point(c in -100.0f64..100.0, hl in 0.5f64..50.0, n in 1usize..60) {
            let s = vec![Some(c); n];
            for v in ewma(&s, hl, 1).into_iter().flatten() {
                prop_assert!((v - c).abs() <= 1e-12 * c.abs().max(1.0));
            }
        }
    }
}
