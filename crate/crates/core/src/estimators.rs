//! The three SRT estimation procedures, anchor selection, the consistency
//! filter and the Plomp A/D decomposition.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::clinical_data::{Categorization, SlopeCategory, SpeechPoint};
use crate::psychometrics::{fit_line, invert_nh_logistic, line_to_srt, srt_from_point};
use crate::uncertainty::{self, WrsConfidenceTable};
use crate::{Error, Result};

/// SRT of normal-hearing listeners, dB SPL.
pub const SRT_NH: f64 = 29.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Procedure {
    Empirical,
    SiiSlope,
    NhSlope,
    /// Placeholder row for measurements that allow no estimate.
    None,
}

impl Procedure {
    pub const ESTIMATING: [Procedure; 3] = [Procedure::Empirical, Procedure::SiiSlope, Procedure::NhSlope];

    pub fn as_str(&self) -> &'static str {
        match self {
            Procedure::Empirical => "empirical",
            Procedure::SiiSlope => "sii_slope",
            Procedure::NhSlope => "nh_slope",
            Procedure::None => "none",
        }
    }
}

impl fmt::Display for Procedure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    /// SRT below PTA_SPL minus the audibility margin.
    Inconsistent,
    NonPositiveEmpiricalSlope,
    DegenerateSiiSlope,
    /// WRS_max below the estimation floor.
    NoEstimation,
}

impl ExclusionReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExclusionReason::Inconsistent => "SRT < PTA - 10",
            ExclusionReason::NonPositiveEmpiricalSlope => "non-positive empirical slope",
            ExclusionReason::DegenerateSiiSlope => "degenerate SII slope",
            ExclusionReason::NoEstimation => "WRS_max below estimation floor",
        }
    }
}

impl fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which point wins when two candidates are equally close to 50 %.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorTieBreak {
    #[default]
    LowerLevel,
    HigherLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    /// dB SPL
    pub srt_nh: f64,
    /// %/dB
    pub s_wrs_nh: f64,
    /// dB
    pub delta_pta: f64,
    /// Points below PTA_SPL minus this margin count as inaudible, dB.
    pub audibility_margin: f64,
    pub anchor_tie_break: AnchorTieBreak,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            srt_nh: SRT_NH,
            s_wrs_nh: crate::sii_model::S_WRS_NH,
            delta_pta: uncertainty::DELTA_PTA,
            audibility_margin: 10.0,
            anchor_tie_break: AnchorTieBreak::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub point: SpeechPoint,
    /// Set when no candidate was audible and the choice ignored audibility.
    pub inaudible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrtEstimate {
    pub procedure: Procedure,
    pub category: SlopeCategory,
    /// dB SPL
    pub srt: Option<f64>,
    /// %/dB
    pub slope_used: Option<f64>,
    /// %/dB
    pub delta_slope: Option<f64>,
    pub anchor: Option<Anchor>,
    pub fit_points: Vec<SpeechPoint>,
    /// dB
    pub delta_srt: Option<f64>,
    /// Lower SRT bound of the NH-slope procedure, dB SPL.
    pub srt_min: Option<f64>,
    /// Sorted, without duplicates.
    pub exclusions: Vec<ExclusionReason>,
    pub plomp_a: Option<f64>,
    pub plomp_d: Option<f64>,
    pub delta_d: Option<f64>,
}

impl SrtEstimate {
    fn new(procedure: Procedure, category: SlopeCategory) -> Self {
        Self {
            procedure,
            category,
            srt: None,
            slope_used: None,
            delta_slope: None,
            anchor: None,
            fit_points: Vec::new(),
            delta_srt: None,
            srt_min: None,
            exclusions: Vec::new(),
            plomp_a: None,
            plomp_d: None,
            delta_d: None,
        }
    }

    pub fn excluded(&self) -> bool {
        !self.exclusions.is_empty()
    }

    pub fn exclude(&mut self, reason: ExclusionReason) {
        if let Err(pos) = self.exclusions.binary_search(&reason) {
            self.exclusions.insert(pos, reason);
        }
    }

    /// Row for a measurement that allows no estimate.
    pub fn no_estimation(category: SlopeCategory) -> Self {
        let mut e = Self::new(Procedure::None, category);
        e.exclude(ExclusionReason::NoEstimation);
        e
    }
}

/// Excludes the estimate when its SRT lies below `pta_spl - margin`.
pub fn apply_consistency_filter(e: &mut SrtEstimate, pta_spl: f64, margin: f64) {
    if e.srt.is_some_and(|srt| srt < pta_spl - margin) {
        e.exclude(ExclusionReason::Inconsistent);
    }
}

/// Returns (A, D) in dB.
pub fn plomp_components(srt: f64, pta_spl: f64, srt_nh: f64) -> (f64, f64) {
    ((pta_spl - srt_nh).max(0.0), srt - pta_spl)
}

/// Consistency filter plus Plomp components for included estimates.
fn finish(mut e: SrtEstimate, pta_spl: f64, cfg: &EstimatorConfig) -> SrtEstimate {
    apply_consistency_filter(&mut e, pta_spl, cfg.audibility_margin);
    if let (false, Some(srt)) = (e.excluded(), e.srt) {
        let (a, d) = plomp_components(srt, pta_spl, cfg.srt_nh);
        e.plomp_a = Some(a);
        e.plomp_d = Some(d);
        e.delta_d = e.delta_srt.map(|ds| uncertainty::delta_d(ds, cfg.delta_pta));
    }
    e
}

fn closest_to_half(points: &[SpeechPoint], tie: AnchorTieBreak) -> Option<SpeechPoint> {
    let mut best: Option<SpeechPoint> = None;
    for &p in points {
        best = match best {
            None => Some(p),
            Some(b) => {
                let (dp, db) = ((p.wrs - 50.0).abs(), (b.wrs - 50.0).abs());
                let prefer_p = dp < db
                    || (dp == db
                        && match tie {
                            AnchorTieBreak::LowerLevel => p.level < b.level,
                            AnchorTieBreak::HigherLevel => p.level > b.level,
                        });
                Some(if prefer_p { p } else { b })
            }
        };
    }
    best
}

/// Picks the slope-area point used with a fixed slope.
///
/// A half-determined measurement uses its single point; audibility is only
/// recorded. Fully determined ones prefer audible points closest to 50 %.
pub fn select_anchor(cat: &Categorization, pta_spl: f64, cfg: &EstimatorConfig) -> Option<Anchor> {
    let floor = pta_spl - cfg.audibility_margin;
    match cat.category {
        SlopeCategory::HalfDetermined => {
            let point = *cat.slope_area.first()?;
            Some(Anchor { point, inaudible: point.level < floor })
        }
        SlopeCategory::FullyDetermined => {
            let audible: Vec<SpeechPoint> = cat.slope_area.iter().copied().filter(|p| p.level >= floor).collect();
            match closest_to_half(&audible, cfg.anchor_tie_break) {
                Some(point) => Some(Anchor { point, inaudible: false }),
                None => closest_to_half(&cat.slope_area, cfg.anchor_tie_break)
                    .map(|point| Anchor { point, inaudible: true }),
            }
        }
        SlopeCategory::Undetermined | SlopeCategory::NoEstimation => None,
    }
}

/// Line through the slope-area points of a fully determined measurement.
pub fn estimate_empirical(
    cat: &Categorization,
    pta_spl: f64,
    table: &WrsConfidenceTable,
    cfg: &EstimatorConfig,
) -> Result<SrtEstimate> {
    if cat.category != SlopeCategory::FullyDetermined {
        return Err(Error::InsufficientData(format!(
            "empirical fit needs a fully determined measurement, got {}",
            cat.category
        )));
    }
    let mut e = SrtEstimate::new(Procedure::Empirical, cat.category);
    let seg = fit_line(&cat.slope_area)?;
    e.fit_points = seg.fit_points.clone();
    e.slope_used = Some(seg.slope);
    e.anchor = select_anchor(cat, pta_spl, cfg);
    if !(seg.slope > 0.0) {
        e.exclude(ExclusionReason::NonPositiveEmpiricalSlope);
        return Ok(e);
    }
    e.srt = Some(line_to_srt(&seg)?);

    let (lower, upper) = (cat.slope_area[0], cat.slope_area[cat.slope_area.len() - 1]);
    let ds = uncertainty::delta_slope_empirical(
        table.interval(upper.wrs)?.delta(),
        table.interval(lower.wrs)?.delta(),
        upper.level,
        lower.level,
    )?;
    e.delta_slope = Some(ds);
    if let Some(a) = e.anchor {
        let dw = table.interval(a.point.wrs)?.delta();
        e.delta_srt = Some(uncertainty::delta_srt(a.point.wrs, dw, seg.slope, ds)?);
    }
    Ok(finish(e, pta_spl, cfg))
}

/// Fixed SII-derived slope `s_h` (%/dB) through the anchor.
pub fn estimate_sii_slope(
    cat: &Categorization,
    pta_spl: f64,
    s_h: f64,
    delta_s_h: f64,
    table: &WrsConfidenceTable,
    cfg: &EstimatorConfig,
) -> Result<SrtEstimate> {
    let anchor = select_anchor(cat, pta_spl, cfg).ok_or_else(|| {
        Error::InsufficientData(format!("SII-slope estimate needs a slope-area point, got {}", cat.category))
    })?;
    let mut e = SrtEstimate::new(Procedure::SiiSlope, cat.category);
    e.anchor = Some(anchor);
    e.fit_points = vec![anchor.point];
    e.slope_used = Some(s_h);
    e.delta_slope = Some(delta_s_h);
    if !(s_h > 0.0) || !s_h.is_finite() {
        e.exclude(ExclusionReason::DegenerateSiiSlope);
        return Ok(e);
    }
    e.srt = Some(srt_from_point(anchor.point.level, anchor.point.wrs, s_h)?);
    let dw = table.interval(anchor.point.wrs)?.delta();
    e.delta_srt = Some(uncertainty::delta_srt(anchor.point.wrs, dw, s_h, delta_s_h)?);
    Ok(finish(e, pta_spl, cfg))
}

/// Normal-hearing logistic through the WRS_max point.
///
/// The returned `delta_srt` is the distance to the lowest plausible SRT,
/// `max(SRT_NH, PTA_SPL - margin)`.
pub fn estimate_nh_slope(cat: &Categorization, pta_spl: f64, cfg: &EstimatorConfig) -> SrtEstimate {
    let mut e = SrtEstimate::new(Procedure::NhSlope, cat.category);
    let p = cat.wrs_max_point;
    let srt = invert_nh_logistic(p.level, p.wrs, cfg.s_wrs_nh);
    let srt_min = cfg.srt_nh.max(pta_spl - cfg.audibility_margin);
    e.anchor = Some(Anchor { point: p, inaudible: p.level < pta_spl - cfg.audibility_margin });
    e.fit_points = vec![p];
    e.slope_used = Some(cfg.s_wrs_nh);
    e.srt = Some(srt);
    e.srt_min = Some(srt_min);
    e.delta_srt = Some(srt - srt_min);
    finish(e, pta_spl, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clinical_data::{categorize, SpeechMeasurement};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn pt(l: f64, w: f64) -> SpeechPoint {
        SpeechPoint::new(l, w)
    }

    fn cat(points: &[(f64, f64)]) -> Categorization {
        let m = SpeechMeasurement::new(points.iter().map(|&(l, w)| pt(l, w)).collect()).unwrap();
        categorize(&m, 10.0)
    }

    fn manual(category: SlopeCategory, slope_area: Vec<SpeechPoint>, wrs_max_point: SpeechPoint) -> Categorization {
        Categorization { category, slope_area, wrs_max_point }
    }

    fn cfg() -> EstimatorConfig {
        EstimatorConfig::default()
    }

    #[test]
    fn empirical_examples() {
        let t = WrsConfidenceTable::default();
        let c = cat(&[(60.0, 30.0), (80.0, 70.0), (100.0, 100.0)]);
        let e = estimate_empirical(&c, 55.0, &t, &cfg()).unwrap();
        assert_eq!(e.srt, Some(70.0));
        assert_eq!(e.slope_used, Some(2.0));
        assert!(!e.excluded());

        let c = manual(SlopeCategory::FullyDetermined, vec![pt(60.0, 70.0), pt(80.0, 30.0)], pt(100.0, 90.0));
        let e = estimate_empirical(&c, 55.0, &t, &cfg()).unwrap();
        assert_eq!(e.exclusions, vec![ExclusionReason::NonPositiveEmpiricalSlope]);
        assert_eq!(e.srt, None);

        // line through (40, 30) and (44, 70) crosses 50 % at 42
        let c = manual(SlopeCategory::FullyDetermined, vec![pt(40.0, 30.0), pt(44.0, 70.0)], pt(60.0, 100.0));
        let e = estimate_empirical(&c, 60.0, &t, &cfg()).unwrap();
        assert_eq!(e.srt, Some(42.0));
        assert_eq!(e.exclusions, vec![ExclusionReason::Inconsistent]);
        assert_eq!(ExclusionReason::Inconsistent.as_str(), "SRT < PTA - 10");
        assert_eq!(e.plomp_d, None);

        let half = cat(&[(60.0, 60.0), (80.0, 95.0)]);
        assert!(estimate_empirical(&half, 55.0, &t, &cfg()).is_err());
    }

    #[test]
    fn empirical_error_uses_anchor_and_outer_points() {
        let t = WrsConfidenceTable::default();
        let c = cat(&[(60.0, 30.0), (80.0, 70.0), (100.0, 100.0)]);
        let e = estimate_empirical(&c, 50.0, &t, &cfg()).unwrap();
        let d30 = t.interval(30.0).unwrap().delta();
        let d70 = t.interval(70.0).unwrap().delta();
        let ds = (d30 + d70) / 20.0;
        assert_abs_diff_eq!(e.delta_slope.unwrap(), ds, epsilon = 1e-12);
        assert_eq!(e.anchor.unwrap().point, pt(60.0, 30.0));
        assert_abs_diff_eq!(e.delta_srt.unwrap(), d30 / 2.0 + 20.0 * ds / 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(e.delta_d.unwrap(), e.delta_srt.unwrap() - 5.0, epsilon = 1e-12);
    }

    #[test]
    fn anchor_selection_examples() {
        let c = cfg();
        let tie = manual(SlopeCategory::FullyDetermined, vec![pt(60.0, 30.0), pt(80.0, 70.0)], pt(100.0, 90.0));
        assert_eq!(select_anchor(&tie, 50.0, &c).unwrap().point, pt(60.0, 30.0));
        let high = EstimatorConfig { anchor_tie_break: AnchorTieBreak::HigherLevel, ..cfg() };
        assert_eq!(select_anchor(&tie, 50.0, &high).unwrap().point, pt(80.0, 70.0));

        let closer = manual(SlopeCategory::FullyDetermined, vec![pt(60.0, 20.0), pt(80.0, 60.0)], pt(100.0, 90.0));
        assert_eq!(select_anchor(&closer, 50.0, &c).unwrap().point, pt(80.0, 60.0));

        // the 60 dB point is inaudible at PTA 75, so the farther 80 dB point wins
        let a = select_anchor(&closer, 75.0, &c).unwrap();
        assert_eq!(a.point, pt(80.0, 60.0));
        let audible_only =
            manual(SlopeCategory::FullyDetermined, vec![pt(60.0, 50.0), pt(80.0, 80.0)], pt(100.0, 90.0));
        assert_eq!(select_anchor(&audible_only, 75.0, &c).unwrap().point, pt(80.0, 80.0));

        let fallback = manual(SlopeCategory::FullyDetermined, vec![pt(60.0, 20.0), pt(80.0, 60.0)], pt(100.0, 90.0));
        let a = select_anchor(&fallback, 100.0, &c).unwrap();
        assert_eq!(a, Anchor { point: pt(80.0, 60.0), inaudible: true });

        let single = manual(SlopeCategory::HalfDetermined, vec![pt(60.0, 40.0)], pt(80.0, 90.0));
        assert_eq!(select_anchor(&single, 90.0, &c).unwrap(), Anchor { point: pt(60.0, 40.0), inaudible: true });
        assert!(select_anchor(&cat(&[(60.0, 90.0)]), 30.0, &c).is_none());
    }

    #[test]
    fn sii_slope_examples() {
        let t = WrsConfidenceTable::default();
        let c = cfg();
        let at = |l: f64, w: f64| manual(SlopeCategory::HalfDetermined, vec![pt(l, w)], pt(110.0, 100.0));
        assert_eq!(estimate_sii_slope(&at(70.0, 60.0), 40.0, 2.0, 0.0012, &t, &c).unwrap().srt, Some(65.0));
        for s in [0.3, 1.0, 4.5, 9.0] {
            assert_eq!(estimate_sii_slope(&at(60.0, 50.0), 40.0, s, 0.0012, &t, &c).unwrap().srt, Some(60.0));
        }
        let e = estimate_sii_slope(&at(80.0, 70.0), 40.0, 4.5, 0.0012, &t, &c).unwrap();
        assert_abs_diff_eq!(e.srt.unwrap(), 75.56, epsilon = 0.005);
        let e = estimate_sii_slope(&at(80.0, 70.0), 40.0, 0.0, 0.0012, &t, &c).unwrap();
        assert_eq!(e.exclusions, vec![ExclusionReason::DegenerateSiiSlope]);
        assert!(estimate_sii_slope(&cat(&[(60.0, 90.0)]), 40.0, 2.0, 0.0, &t, &c).is_err());
    }

    #[test]
    fn nh_slope_examples() {
        let c = cfg();
        let e = estimate_nh_slope(&cat(&[(60.0, 50.0)]), 20.0, &c);
        assert_eq!(e.srt, Some(60.0));
        assert_eq!(e.srt_min, Some(29.3));
        assert_abs_diff_eq!(e.delta_srt.unwrap(), 30.7, epsilon = 1e-12);

        let e = estimate_nh_slope(&cat(&[(60.0, 100.0)]), 20.0, &c);
        assert_abs_diff_eq!(e.srt.unwrap(), 39.6, epsilon = 0.05);
        assert_abs_diff_eq!(e.delta_srt.unwrap(), 10.3, epsilon = 0.05);

        assert_eq!(estimate_nh_slope(&cat(&[(60.0, 50.0)]), 60.0, &c).srt_min, Some(50.0));
        assert_eq!(estimate_nh_slope(&cat(&[(60.0, 50.0)]), 39.3, &c).srt_min, Some(29.3));
    }

    #[test]
    fn plomp_examples() {
        assert_eq!(plomp_components(50.0, 29.3, SRT_NH).0, 0.0);
        assert_abs_diff_eq!(plomp_components(80.0, 59.3, SRT_NH).0, 30.0, epsilon = 1e-12);
        assert_eq!(plomp_components(70.0, 50.0, SRT_NH).1, 20.0);
        assert_eq!(plomp_components(50.0, 10.0, SRT_NH), (0.0, 40.0));
    }

    #[test]
    fn consistency_filter_is_idempotent_and_order_independent() {
        let mut a = SrtEstimate::new(Procedure::SiiSlope, SlopeCategory::HalfDetermined);
        a.srt = Some(30.0);
        let mut b = a.clone();
        apply_consistency_filter(&mut a, 60.0, 10.0);
        a.exclude(ExclusionReason::DegenerateSiiSlope);
        b.exclude(ExclusionReason::DegenerateSiiSlope);
        apply_consistency_filter(&mut b, 60.0, 10.0);
        apply_consistency_filter(&mut b, 60.0, 10.0);
        assert_eq!(a, b);
        assert_eq!(a.exclusions.len(), 2);
    }

    proptest! {
        #[test]
        fn sii_slope_reproduces_empirical_line(
            l1 in 40.0f64..90.0, dl in 5.0f64..30.0, w1 in 15.0f64..50.0, dw in 5.0f64..40.0, pick in proptest::bool::ANY,
        ) {
            let (p1, p2) = (pt(l1, w1), pt(l1 + dl, w1 + dw));
            let seg = fit_line(&[p1, p2]).unwrap();
            let srt_f = line_to_srt(&seg).unwrap();
            let anchor = if pick { p1 } else { p2 };
            let srt_h = srt_from_point(anchor.level, anchor.wrs, seg.slope).unwrap();
            prop_assert!((srt_h - srt_f).abs() < 1e-9);
        }

        #[test]
        fn nh_slope_bound_flips_at_half(level in 60.0f64..110.0, k in 1u32..20, s in 0.2f64..4.5) {
            // a shallower logistic with the same ceiling through the same point has a lower SRT
            let w = 5.0 * f64::from(k);
            let steep = invert_nh_logistic(level, w, 4.5);
            let shallow = invert_nh_logistic(level, w, s);
            if w <= 50.0 {
                prop_assert!(shallow >= steep - 1e-9);
            } else {
                prop_assert!(shallow <= steep + 1e-9);
            }
        }

        #[test]
        fn level_shift_equivariance(
            shift in -20.0f64..20.0, w1 in 3u32..10, w2 in 11u32..17, pta in 20.0f64..70.0,
        ) {
            let t = WrsConfidenceTable::default();
            let c = cfg();
            let (a, b) = (5.0 * f64::from(w1), 5.0 * f64::from(w2));
            let base = manual(SlopeCategory::FullyDetermined, vec![pt(60.0, a), pt(80.0, b)], pt(100.0, 100.0));
            let moved = manual(
                SlopeCategory::FullyDetermined,
                vec![pt(60.0 + shift, a), pt(80.0 + shift, b)],
                pt(100.0 + shift, 100.0),
            );
            let e0 = estimate_empirical(&base, pta, &t, &c).unwrap();
            let e1 = estimate_empirical(&moved, pta + shift, &t, &c).unwrap();
            prop_assert_eq!(e0.excluded(), e1.excluded());
            prop_assert!((e1.srt.unwrap() - e0.srt.unwrap() - shift).abs() < 1e-9);
            if !e0.excluded() {
                prop_assert!((e1.plomp_d.unwrap() - e0.plomp_d.unwrap()).abs() < 1e-9);
            }
            let n0 = estimate_nh_slope(&base, pta, &c);
            let n1 = estimate_nh_slope(&moved, pta + shift, &c);
            prop_assert!((n1.srt.unwrap() - n0.srt.unwrap() - shift).abs() < 1e-9);
        }
    }
}
