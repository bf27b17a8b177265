//! Logistic psychometric function and the linear fits used by the estimators.

use serde::{Deserialize, Serialize};

use crate::clinical_data::SpeechPoint;
use crate::{Error, Result};

/// Scores at the saturation values are moved half a list step inward before
/// the single-point inversion.
pub const WRS_CLAMP_LOW: f64 = 2.5;
pub const WRS_CLAMP_HIGH: f64 = 97.5;

/// Logistic psychometric function.
///
/// `wrs(L) = wrs_max / (1 + exp(4 * slope/100 * (srt - L)))`. The slope is
/// expressed on the 100 % scale, so the derivative at the SRT is
/// `slope * wrs_max / 100` percent per dB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsychometricFunction {
    /// dB SPL
    pub srt: f64,
    /// %/dB
    pub slope: f64,
    /// %
    pub wrs_max: f64,
}

impl PsychometricFunction {
    pub fn new(srt: f64, slope: f64, wrs_max: f64) -> Result<Self> {
        if !(slope > 0.0) {
            return Err(Error::NonPositiveSlope);
        }
        if !(wrs_max > 0.0 && wrs_max <= 100.0) {
            return Err(Error::Config(format!("wrs_max {wrs_max} outside (0, 100]")));
        }
        Ok(Self { srt, slope, wrs_max })
    }

    fn rate(&self) -> f64 {
        4.0 * self.slope / 100.0
    }

    pub fn evaluate(&self, level: f64) -> f64 {
        self.wrs_max / (1.0 + (self.rate() * (self.srt - level)).exp())
    }

    /// d wrs / d level in %/dB.
    pub fn derivative(&self, level: f64) -> f64 {
        let e = (self.rate() * (self.srt - level)).exp();
        self.wrs_max * self.rate() * e / (1.0 + e).powi(2)
    }

    /// Level where the function reaches `wrs` percent, if it ever does.
    pub fn level_at(&self, wrs: f64) -> Option<f64> {
        if !(wrs > 0.0 && wrs < self.wrs_max) {
            return None;
        }
        Some(self.srt - (self.wrs_max / wrs - 1.0).ln() / self.rate())
    }
}

pub fn evaluate(f: &PsychometricFunction, level: f64) -> f64 {
    f.evaluate(level)
}

/// Straight line through (level, WRS) points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSegment {
    /// %/dB
    pub slope: f64,
    /// % at 0 dB
    pub intercept: f64,
    pub fit_points: Vec<SpeechPoint>,
}

impl LinearSegment {
    pub fn value_at(&self, level: f64) -> f64 {
        self.intercept + self.slope * level
    }
}

/// Exact line for two points, ordinary least squares for more.
pub fn fit_line(points: &[SpeechPoint]) -> Result<LinearSegment> {
    if points.len() < 2 {
        return Err(Error::InsufficientData("a line needs at least two points".into()));
    }
    let mut levels: Vec<f64> = points.iter().map(|p| p.level).collect();
    levels.sort_by(f64::total_cmp);
    if levels.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::DegenerateAbscissae);
    }
    let slope = if points.len() == 2 {
        (points[1].wrs - points[0].wrs) / (points[1].level - points[0].level)
    } else {
        let n = points.len() as f64;
        let ml = points.iter().map(|p| p.level).sum::<f64>() / n;
        let mw = points.iter().map(|p| p.wrs).sum::<f64>() / n;
        let sxy: f64 = points.iter().map(|p| (p.level - ml) * (p.wrs - mw)).sum();
        let sxx: f64 = points.iter().map(|p| (p.level - ml).powi(2)).sum();
        sxy / sxx
    };
    let (ml, mw) = centroid(points);
    Ok(LinearSegment { slope, intercept: mw - slope * ml, fit_points: points.to_vec() })
}

fn centroid(points: &[SpeechPoint]) -> (f64, f64) {
    let n = points.len() as f64;
    (points.iter().map(|p| p.level).sum::<f64>() / n, points.iter().map(|p| p.wrs).sum::<f64>() / n)
}

/// Level where a point-slope line reaches 50 %.
pub fn srt_from_point(level: f64, wrs: f64, slope: f64) -> Result<f64> {
    if !(slope > 0.0) {
        return Err(Error::NonPositiveSlope);
    }
    Ok(level - (wrs - 50.0) / slope)
}

/// Level where the fitted line crosses 50 %.
///
/// Evaluated through the centroid of the fit points, which lies on the line
/// for both the two-point and the least-squares fit.
pub fn line_to_srt(seg: &LinearSegment) -> Result<f64> {
    let (ml, mw) = centroid(&seg.fit_points);
    srt_from_point(ml, mw, seg.slope)
}

/// SRT of a logistic with fixed slope and `wrs_max = 100 %` through one point.
///
/// `nh_slope` is in %/dB. Scores are clamped to [2.5, 97.5] % first.
pub fn invert_nh_logistic(level: f64, wrs: f64, nh_slope: f64) -> f64 {
    let w = wrs.clamp(WRS_CLAMP_LOW, WRS_CLAMP_HIGH);
    level + (100.0 / w - 1.0).ln() / (4.0 * nh_slope / 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn p(l: f64, w: f64) -> SpeechPoint {
        SpeechPoint::new(l, w)
    }

    #[test]
    fn evaluate_examples() {
        let f = PsychometricFunction::new(60.0, 4.5, 100.0).unwrap();
        assert_eq!(f.evaluate(60.0), 50.0);
        assert_abs_diff_eq!(f.evaluate(1e4), 100.0);
        let expected = 100.0 / (1.0 + (-1.8f64).exp());
        assert_abs_diff_eq!(f.evaluate(70.0), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(f.evaluate(70.0), 85.814_893_509_951_25, epsilon = 1e-9);
    }

    #[test]
    fn midpoint_is_half_of_wrs_max() {
        let f = PsychometricFunction::new(42.0, 2.0, 70.0).unwrap();
        assert_eq!(f.evaluate(42.0), 35.0);
        assert_abs_diff_eq!(f.derivative(42.0), 2.0 * 0.7, epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(PsychometricFunction::new(60.0, 0.0, 100.0).is_err());
        assert!(PsychometricFunction::new(60.0, 4.5, 0.0).is_err());
        assert!(PsychometricFunction::new(60.0, 4.5, 101.0).is_err());
    }

    #[test]
    fn fit_line_examples() {
        let seg = fit_line(&[p(60.0, 30.0), p(80.0, 70.0)]).unwrap();
        assert_eq!(seg.slope, 2.0);
        assert_eq!(seg.intercept, -90.0);
        assert_eq!(fit_line(&[p(60.0, 50.0), p(80.0, 90.0)]).unwrap().slope, 2.0);
        assert!(matches!(fit_line(&[p(60.0, 30.0), p(60.0, 70.0)]), Err(Error::DegenerateAbscissae)));
    }

    #[test]
    fn least_squares_for_three_points() {
        // collinear points reproduce the line, noisy points give the OLS slope
        let seg = fit_line(&[p(60.0, 20.0), p(80.0, 60.0), p(100.0, 100.0)]).unwrap();
        assert_abs_diff_eq!(seg.slope, 2.0, epsilon = 1e-12);
        let seg = fit_line(&[p(60.0, 20.0), p(80.0, 70.0), p(100.0, 90.0)]).unwrap();
        assert_abs_diff_eq!(seg.slope, 70.0 / 40.0, epsilon = 1e-12);
        assert_abs_diff_eq!(seg.value_at(80.0), 60.0, epsilon = 1e-12);
    }

    #[test]
    fn line_to_srt_examples() {
        let seg = fit_line(&[p(60.0, 30.0), p(80.0, 70.0)]).unwrap();
        assert_eq!(line_to_srt(&seg).unwrap(), 70.0);
        assert_eq!(srt_from_point(60.0, 50.0, 2.0).unwrap(), 60.0);
        assert_abs_diff_eq!(srt_from_point(80.0, 70.0, 4.5).unwrap(), 80.0 - 20.0 / 4.5, epsilon = 1e-12);
        assert_abs_diff_eq!(srt_from_point(80.0, 70.0, 4.5).unwrap(), 75.56, epsilon = 0.005);
        let flat = fit_line(&[p(60.0, 30.0), p(80.0, 30.0)]).unwrap();
        assert!(matches!(line_to_srt(&flat), Err(Error::NonPositiveSlope)));
    }

    #[test]
    fn nh_inversion_examples() {
        assert_eq!(invert_nh_logistic(60.0, 50.0, 4.5), 60.0);
        let f = PsychometricFunction::new(50.0, 4.5, 100.0).unwrap();
        assert_abs_diff_eq!(invert_nh_logistic(60.0, f.evaluate(60.0), 4.5), 50.0, epsilon = 1e-9);
        assert_abs_diff_eq!(invert_nh_logistic(60.0, 85.8, 4.5), 50.0, epsilon = 0.01);
    }

    #[test]
    fn nh_inversion_of_saturated_score_matches_numeric_fit() {
        // Oracle: bisection for the SRT whose NH logistic gives 97.5 % at 60 dB.
        let target = 97.5;
        let (mut lo, mut hi) = (0.0f64, 60.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let w = 100.0 / (1.0 + (0.18 * (mid - 60.0)).exp());
            if w > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let oracle = 0.5 * (lo + hi);
        let srt = invert_nh_logistic(60.0, 100.0, 4.5);
        assert_abs_diff_eq!(srt, oracle, epsilon = 1e-9);
        assert_abs_diff_eq!(srt, 39.6, epsilon = 0.05);
        assert_eq!(invert_nh_logistic(60.0, 0.0, 4.5), invert_nh_logistic(60.0, 2.5, 4.5));
    }

    proptest! {
        #[test]
        fn nh_round_trip(srt in 0.0f64..120.0, level in 0.0f64..120.0) {
            let f = PsychometricFunction::new(srt, 4.5, 100.0).unwrap();
            let w = f.evaluate(level);
            prop_assume!(w > WRS_CLAMP_LOW && w < WRS_CLAMP_HIGH);
            prop_assert!((invert_nh_logistic(level, w, 4.5) - srt).abs() < 1e-9);
        }

        #[test]
        fn line_srt_symmetric_in_point_order(l1 in 40.0f64..80.0, dl in 1.0f64..40.0, w1 in 0.0f64..50.0, dw in 1.0f64..50.0) {
            let a = p(l1, w1);
            let b = p(l1 + dl, w1 + dw);
            let s1 = line_to_srt(&fit_line(&[a, b]).unwrap()).unwrap();
            let s2 = line_to_srt(&fit_line(&[b, a]).unwrap()).unwrap();
            prop_assert_eq!(s1, s2);
        }

        #[test]
        fn level_shift_translates_srt(l1 in 40.0f64..80.0, dl in 1.0f64..40.0, w1 in 0.0f64..50.0, dw in 1.0f64..50.0, shift in -20.0f64..20.0) {
            let s = line_to_srt(&fit_line(&[p(l1, w1), p(l1 + dl, w1 + dw)]).unwrap()).unwrap();
            let t = line_to_srt(&fit_line(&[p(l1 + shift, w1), p(l1 + dl + shift, w1 + dw)]).unwrap()).unwrap();
            prop_assert!((t - s - shift).abs() < 1e-9);
            let n = invert_nh_logistic(l1 + shift, w1, 4.5) - invert_nh_logistic(l1, w1, 4.5);
            prop_assert!((n - shift).abs() < 1e-9);
        }

        #[test]
        fn evaluate_is_monotone_and_matches_finite_differences(
            srt in 20.0f64..100.0, slope in 0.5f64..8.0, wrs_max in 10.0f64..100.0, level in 0.0f64..130.0,
        ) {
            let f = PsychometricFunction::new(srt, slope, wrs_max).unwrap();
            prop_assert!(f.evaluate(level + 0.5) > f.evaluate(level) || f.evaluate(level) >= wrs_max - 1e-9);
            let h = 1e-3;
            let fd = (f.evaluate(level + h) - f.evaluate(level - h)) / (2.0 * h);
            prop_assert!((fd - f.derivative(level)).abs() < 1e-6);
        }
    }
}
