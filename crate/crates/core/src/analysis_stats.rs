//! Distribution comparisons and the cross-validated linear model for SRT
//! differences.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

use crate::{Error, Result};

/// Default significance level.
pub const ALPHA: f64 = 0.05;
/// Design matrices above this condition number are rejected as collinear.
pub const MAX_CONDITION: f64 = 1e10;

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Shared area of the two normalised histograms, in [0, 1].
///
/// Bins of width `bin_width` start at the pooled minimum.
pub fn overlapping_index(x: &[f64], y: &[f64], bin_width: f64) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptySample);
    }
    if !(bin_width > 0.0) {
        return Err(Error::Config(format!("bin width must be positive, got {bin_width}")));
    }
    let origin = x.iter().chain(y).copied().fold(f64::INFINITY, f64::min);
    let histogram = |s: &[f64]| {
        let mut h: BTreeMap<i64, u128> = BTreeMap::new();
        for v in s {
            *h.entry(((v - origin) / bin_width).floor() as i64).or_default() += 1;
        }
        h
    };
    let (hx, hy) = (histogram(x), histogram(y));
    let (nx, ny) = (x.len() as u128, y.len() as u128);
    // counts cross-multiplied so that identical samples give exactly 1
    let shared: u128 = hx.iter().filter_map(|(k, cx)| hy.get(k).map(|cy| (cx * ny).min(cy * nx))).sum();
    Ok(shared as f64 / (nx * ny) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    /// two-tailed
    pub p: f64,
}

pub fn welch_test(x: &[f64], y: &[f64]) -> Result<WelchResult> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::InsufficientData("Welch test needs at least two values per sample".into()));
    }
    let (vx, vy) = (sample_variance(x) / x.len() as f64, sample_variance(y) / y.len() as f64);
    if vx + vy <= 0.0 {
        return Err(Error::ZeroVariance);
    }
    let t = (mean(x) - mean(y)) / (vx + vy).sqrt();
    let df = (vx + vy).powi(2) / (vx * vx / (x.len() as f64 - 1.0) + vy * vy / (y.len() as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::InsufficientData(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0);
    Ok(WelchResult { t, df, p })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub d: f64,
    pub p: f64,
}

/// Kolmogorov survival function Q(λ) = P(K > λ).
fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        // small-λ form of the theta series
        let k = (2.0 * std::f64::consts::PI).sqrt() / lambda;
        let e = -std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda);
        let s: f64 = (1..=5).map(|j| ((2 * j - 1) as f64).powi(2) * e).map(f64::exp).sum();
        (1.0 - k * s).clamp(0.0, 1.0)
    } else {
        let s: f64 = (1..=100)
            .map(|j| {
                let sign = if j % 2 == 1 { 1.0 } else { -1.0 };
                sign * (-2.0 * (j * j) as f64 * lambda * lambda).exp()
            })
            .sum();
        (2.0 * s).clamp(0.0, 1.0)
    }
}

/// Two-sample Kolmogorov-Smirnov test with the asymptotic p-value.
pub fn ks_test(x: &[f64], y: &[f64]) -> Result<KsResult> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut a = x.to_vec();
    let mut b = y.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let ne = n * m / (n + m);
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    Ok(KsResult { d, p: kolmogorov_sf(lambda) })
}

/// p-value of a χ² goodness-of-fit test of `values` in [0, 1] against the
/// uniform distribution on `bins` equal bins.
pub fn chi_square_uniformity(values: &[f64], bins: usize) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptySample);
    }
    if bins < 2 {
        return Err(Error::Config("uniformity test needs at least two bins".into()));
    }
    let mut counts = vec![0usize; bins];
    for &v in values {
        let k = ((v * bins as f64).floor() as usize).min(bins - 1);
        counts[k] += 1;
    }
    let expected = values.len() as f64 / bins as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let dist = ChiSquared::new((bins - 1) as f64).map_err(|e| Error::Config(e.to_string()))?;
    Ok(dist.sf(stat))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistComparison {
    pub overlapping_index: f64,
    pub welch_p: f64,
    pub ks_p: f64,
    pub n_x: usize,
    pub n_y: usize,
}

pub fn compare_distributions(x: &[f64], y: &[f64], bin_width: f64) -> Result<DistComparison> {
    Ok(DistComparison {
        overlapping_index: overlapping_index(x, y, bin_width)?,
        welch_p: welch_test(x, y)?.p,
        ks_p: ks_test(x, y)?.p,
        n_x: x.len(),
        n_y: y.len(),
    })
}

/// One observation of `srt_diff ~ b0 + b1 * s_h + b2 * (wrs - 50)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlmRow {
    /// dB
    pub srt_diff: f64,
    /// %/dB
    pub s_h: f64,
    /// %
    pub wrs_minus_50: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coef {
    pub estimate: f64,
    pub se: f64,
    pub t: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldFit {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// b0, b1, b2
    pub coefs: [Coef; 3],
    /// Held-out mean squared error, dB².
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmFit {
    pub folds: Vec<FoldFit>,
    /// Mean of the per-fold rows.
    pub mean: [Coef; 3],
    /// Square root of the mean per-fold MSE, dB.
    pub rmse_cv: f64,
    /// Out-of-fold predictions against observations.
    pub pearson_r: f64,
    pub rmse: f64,
    /// Mean of prediction minus observation, dB.
    pub bias: f64,
}

fn design(rows: &[&GlmRow]) -> (DMatrix<f64>, DVector<f64>) {
    let x = DMatrix::from_fn(rows.len(), 3, |i, j| match j {
        0 => 1.0,
        1 => rows[i].s_h,
        _ => rows[i].wrs_minus_50,
    });
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.srt_diff));
    (x, y)
}

/// Ordinary least squares with coefficient standard errors.
pub fn ols(rows: &[GlmRow]) -> Result<[Coef; 3]> {
    ols_refs(&rows.iter().collect::<Vec<_>>())
}

fn ols_refs(rows: &[&GlmRow]) -> Result<[Coef; 3]> {
    if rows.len() < 4 {
        return Err(Error::InsufficientData(format!("least squares needs at least 4 rows, got {}", rows.len())));
    }
    let (x, y) = design(rows);
    let svd = x.clone().svd(true, true);
    let sv = &svd.singular_values;
    let (max, min) = (sv.max(), sv.min());
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::Collinear { condition });
    }
    let (u, v_t) = (svd.u.as_ref().expect("u computed"), svd.v_t.as_ref().expect("v computed"));
    let uty = u.transpose() * &y;
    let scaled = DVector::from_fn(3, |i, _| uty[i] / sv[i]);
    let beta = v_t.transpose() * scaled;

    let resid = &y - &x * &beta;
    let df = rows.len() as f64 - 3.0;
    let sigma2 = resid.norm_squared() / df;
    let inv_s2 = DMatrix::from_diagonal(&sv.map(|s| 1.0 / (s * s)));
    let cov = v_t.transpose() * inv_s2 * v_t * sigma2;
    let t_dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::InsufficientData(e.to_string()))?;
    Ok(std::array::from_fn(|i| {
        let estimate = beta[i];
        let se = cov[(i, i)].max(0.0).sqrt();
        let t = if se > 0.0 {
            estimate / se
        } else if estimate == 0.0 {
            0.0
        } else {
            estimate.signum() * f64::INFINITY
        };
        let p = if t.is_finite() { (2.0 * t_dist.sf(t.abs())).clamp(0.0, 1.0) } else { 0.0 };
        Coef { estimate, se, t, p }
    }))
}

fn predict(c: &[Coef; 3], r: &GlmRow) -> f64 {
    c[0].estimate + c[1].estimate * r.s_h + c[2].estimate * r.wrs_minus_50
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// K-fold cross-validated least squares.
///
/// Rows are put in a canonical order before the seeded shuffle, so the folds
/// depend only on the row values and the seed. Fold sizes differ by at most
/// one row.
pub fn glm_cv(rows: &[GlmRow], folds: usize, seed: u64) -> Result<GlmFit> {
    if folds < 2 || rows.len() < folds {
        return Err(Error::InsufficientData(format!("{} rows cannot fill {folds} folds", rows.len())));
    }
    let mut sorted: Vec<&GlmRow> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        a.srt_diff.total_cmp(&b.srt_diff).then(a.s_h.total_cmp(&b.s_h)).then(a.wrs_minus_50.total_cmp(&b.wrs_minus_50))
    });
    sorted.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let (base, extra) = (sorted.len() / folds, sorted.len() % folds);
    let mut fits = Vec::with_capacity(folds);
    let (mut predicted, mut observed) = (Vec::new(), Vec::new());
    let mut start = 0;
    for k in 0..folds {
        let size = base + usize::from(k < extra);
        let test = &sorted[start..start + size];
        let train: Vec<&GlmRow> = sorted[..start].iter().chain(&sorted[start + size..]).copied().collect();
        start += size;
        let coefs = ols_refs(&train)?;
        let mut sse = 0.0;
        for r in test {
            let p = predict(&coefs, r);
            sse += (p - r.srt_diff).powi(2);
            predicted.push(p);
            observed.push(r.srt_diff);
        }
        fits.push(FoldFit { fold: k + 1, n_train: train.len(), n_test: size, coefs, mse: sse / size as f64 });
    }

    let nf = folds as f64;
    let mean_coefs: [Coef; 3] = std::array::from_fn(|i| Coef {
        estimate: fits.iter().map(|f| f.coefs[i].estimate).sum::<f64>() / nf,
        se: fits.iter().map(|f| f.coefs[i].se).sum::<f64>() / nf,
        t: fits.iter().map(|f| f.coefs[i].t).sum::<f64>() / nf,
        p: fits.iter().map(|f| f.coefs[i].p).sum::<f64>() / nf,
    });
    let rmse_cv = (fits.iter().map(|f| f.mse).sum::<f64>() / nf).sqrt();
    let n = predicted.len() as f64;
    let rmse = (predicted.iter().zip(&observed).map(|(p, o)| (p - o).powi(2)).sum::<f64>() / n).sqrt();
    let bias = predicted.iter().zip(&observed).map(|(p, o)| p - o).sum::<f64>() / n;
    Ok(GlmFit { pearson_r: pearson(&predicted, &observed), folds: fits, mean: mean_coefs, rmse_cv, rmse, bias })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal, Uniform};

    #[test]
    fn overlap_trivial_cases() {
        let x: Vec<f64> = (0..50).map(f64::from).collect();
        assert_abs_diff_eq!(overlapping_index(&x, &x, 5.0).unwrap(), 1.0, epsilon = 1e-12);
        let y: Vec<f64> = x.iter().map(|v| v + 100.0).collect();
        assert_eq!(overlapping_index(&x, &y, 5.0).unwrap(), 0.0);
        assert!(overlapping_index(&[], &x, 1.0).is_err());
    }

    #[test]
    fn overlap_of_shifted_uniforms_is_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let u = Uniform::new(0.0, 10.0).unwrap();
        let x: Vec<f64> = (0..10_000).map(|_| u.sample(&mut rng)).collect();
        let y: Vec<f64> = (0..10_000).map(|_| u.sample(&mut rng) + 5.0).collect();
        assert_abs_diff_eq!(overlapping_index(&x, &y, 1.0).unwrap(), 0.5, epsilon = 0.05);
    }

    #[test]
    fn welch_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [4.0, 3.0, 1.0, 2.0, 2.5];
        let r = welch_test(&x, &y).unwrap();
        assert_eq!(r.t, 0.0);
        assert_eq!(r.p, 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = Normal::new(0.0, 1.0).unwrap();
        let a: Vec<f64> = (0..100).map(|_| n.sample(&mut rng)).collect();
        let b: Vec<f64> = a.iter().map(|v| v + 10.0).collect();
        assert!(welch_test(&a, &b).unwrap().p < 1e-6);
        assert!(matches!(welch_test(&[1.0, 1.0], &[2.0, 2.0]), Err(Error::ZeroVariance)));
    }

    #[test]
    fn welch_matches_hand_computation() {
        // means 2 and 5, variances 1 and 4, n 3 and 3
        let r = welch_test(&[1.0, 2.0, 3.0], &[3.0, 5.0, 7.0]).unwrap();
        let se = (1.0f64 / 3.0 + 4.0 / 3.0).sqrt();
        assert_abs_diff_eq!(r.t, -3.0 / se, epsilon = 1e-12);
        let df = (5.0f64 / 3.0).powi(2) / ((1.0f64 / 3.0).powi(2) / 2.0 + (4.0f64 / 3.0).powi(2) / 2.0);
        assert_abs_diff_eq!(r.df, df, epsilon = 1e-12);
    }

    #[test]
    fn ks_examples() {
        let x = [1.0, 2.0, 3.0];
        let r = ks_test(&x, &x).unwrap();
        assert_eq!(r.d, 0.0);
        assert_eq!(r.p, 1.0);
        assert_eq!(ks_test(&x, &[10.0, 11.0]).unwrap().d, 1.0);
        assert_eq!(ks_test(&[1.0, 2.0, 3.0, 4.0], &[3.0, 4.0, 5.0, 6.0]).unwrap().d, 0.5);
    }

    #[test]
    fn kolmogorov_series_agree_at_the_switch() {
        // both forms of the series describe the same function
        let small = |l: f64| {
            let k = (2.0 * std::f64::consts::PI).sqrt() / l;
            1.0 - k
                * (1..=20)
                    .map(|j| (-((2 * j - 1) as f64).powi(2) * std::f64::consts::PI.powi(2) / (8.0 * l * l)).exp())
                    .sum::<f64>()
        };
        for l in [0.5, 0.9, 1.18, 1.5] {
            let big: f64 = 2.0
                * (1..=100)
                    .map(|j| if j % 2 == 1 { 1.0 } else { -1.0 } * (-2.0 * (j * j) as f64 * l * l).exp())
                    .sum::<f64>();
            assert_abs_diff_eq!(small(l), big, epsilon = 1e-10);
            assert_abs_diff_eq!(kolmogorov_sf(l), big, epsilon = 1e-10);
        }
        assert_abs_diff_eq!(kolmogorov_sf(1.358), 0.05, epsilon = 5e-4);
    }

    #[test]
    fn chi_square_uniformity_examples() {
        let even: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        assert!(chi_square_uniformity(&even, 10).unwrap() > 0.99);
        let skewed: Vec<f64> = even.iter().map(|v| v * v).collect();
        assert!(chi_square_uniformity(&skewed, 10).unwrap() < 1e-6);
    }

    fn planted(n: usize, sigma: f64, seed: u64) -> Vec<GlmRow> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma).unwrap();
        (0..n)
            .map(|_| {
                let s_h: f64 = rng.random_range(0.5..4.5);
                let w: f64 = rng.random_range(-35.0..35.0);
                let e = if sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                GlmRow { srt_diff: 3.0 - 2.5 * s_h - 0.146 * w + e, s_h, wrs_minus_50: w }
            })
            .collect()
    }

    #[test]
    fn glm_recovers_noiseless_coefficients() {
        let fit = glm_cv(&planted(200, 0.0, 3), 10, 42).unwrap();
        assert_eq!(fit.folds.len(), 10);
        for f in &fit.folds {
            assert_abs_diff_eq!(f.coefs[0].estimate, 3.0, epsilon = 1e-9);
            assert_abs_diff_eq!(f.coefs[1].estimate, -2.5, epsilon = 1e-9);
            assert_abs_diff_eq!(f.coefs[2].estimate, -0.146, epsilon = 1e-9);
        }
        assert!(fit.rmse_cv < 1e-9);
        assert_abs_diff_eq!(fit.pearson_r, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn glm_noise_floor() {
        let fit = glm_cv(&planted(1000, 3.0, 5), 10, 42).unwrap();
        assert_abs_diff_eq!(fit.rmse_cv, 3.0, epsilon = 0.3);
        assert_eq!(fit.folds.iter().map(|f| f.n_test).sum::<usize>(), 1000);
        for c in fit.mean.iter().chain(fit.folds.iter().flat_map(|f| f.coefs.iter())) {
            assert!((0.0..=1.0).contains(&c.p));
        }
        let mean_b1 = fit.folds.iter().map(|f| f.coefs[1].estimate).sum::<f64>() / 10.0;
        assert_abs_diff_eq!(fit.mean[1].estimate, mean_b1, epsilon = 1e-12);
    }

    #[test]
    fn glm_is_permutation_invariant() {
        let rows = planted(123, 2.0, 9);
        let mut reversed = rows.clone();
        reversed.reverse();
        assert_eq!(glm_cv(&rows, 10, 17).unwrap(), glm_cv(&reversed, 10, 17).unwrap());
        assert_ne!(glm_cv(&rows, 10, 17).unwrap(), glm_cv(&rows, 10, 18).unwrap());
    }

    #[test]
    fn glm_rejects_collinear_design() {
        let rows: Vec<GlmRow> =
            (0..50).map(|i| GlmRow { srt_diff: i as f64, s_h: 2.0, wrs_minus_50: i as f64 }).collect();
        assert!(matches!(glm_cv(&rows, 10, 1), Err(Error::Collinear { .. })));
        assert!(glm_cv(&rows[..5], 10, 1).is_err());
    }

    proptest! {
        #[test]
        fn overlap_is_symmetric(
            x in proptest::collection::vec(-50.0f64..50.0, 1..40),
            y in proptest::collection::vec(-50.0f64..50.0, 1..40),
            w in 0.5f64..10.0,
        ) {
            let a = overlapping_index(&x, &y, w).unwrap();
            prop_assert!((a - overlapping_index(&y, &x, w).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn tests_are_affine_invariant(
            x in proptest::collection::vec(-50.0f64..50.0, 3..30),
            y in proptest::collection::vec(-50.0f64..50.0, 3..30),
            scale in 0.1f64..10.0, offset in -100.0f64..100.0,
        ) {
            let f = |v: &Vec<f64>| v.iter().map(|a| a * scale + offset).collect::<Vec<_>>();
            if let (Ok(a), Ok(b)) = (welch_test(&x, &y), welch_test(&f(&x), &f(&y))) {
                prop_assert!((a.t - b.t).abs() < 1e-6 * (1.0 + a.t.abs()));
            }
            let (a, b) = (ks_test(&x, &y).unwrap(), ks_test(&f(&x), &f(&y)).unwrap());
            prop_assert!((a.d - b.d).abs() < 1e-12);
        }

        #[test]
        fn glm_scaling_equivariance(c in 0.2f64..5.0, seed in 0u64..50) {
            let rows = planted(60, 1.0, seed);
            let scaled: Vec<GlmRow> = rows.iter().map(|r| GlmRow { s_h: r.s_h * c, ..*r }).collect();
            let (a, b) = (glm_cv(&rows, 10, 3).unwrap(), glm_cv(&scaled, 10, 3).unwrap());
            for (fa, fb) in a.folds.iter().zip(&b.folds) {
                prop_assert!((fa.coefs[1].estimate / c - fb.coefs[1].estimate).abs() < 1e-8);
                prop_assert!((fa.mse - fb.mse).abs() < 1e-8 * (1.0 + fa.mse));
            }
        }
    }
}
