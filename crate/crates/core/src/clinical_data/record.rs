use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::audiogram::{compute_pta, Audiogram, HlToSpl};
use crate::{Error, Result};

/// Presentation levels of the fixed-level word test, dB SPL.
pub const SPEECH_LEVELS: [f64; 4] = [60.0, 80.0, 100.0, 110.0];

/// Granularity of word recognition scores: one word of a 20-word list.
pub const WRS_STEP: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ear {
    Left,
    Right,
}

impl fmt::Display for Ear {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ear::Left => "left",
            Ear::Right => "right",
        })
    }
}

impl FromStr for Ear {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "left" | "l" => Ok(Ear::Left),
            "right" | "r" => Ok(Ear::Right),
            other => Err(Error::InvalidSpeech(format!("unknown ear '{other}'"))),
        }
    }
}

/// One measured (level, word recognition score) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeechPoint {
    /// dB SPL
    pub level: f64,
    /// percent correct
    pub wrs: f64,
}

impl SpeechPoint {
    pub fn new(level: f64, wrs: f64) -> Self {
        Self { level, wrs }
    }
}

pub fn is_valid_wrs(wrs: f64) -> bool {
    (0.0..=100.0).contains(&wrs) && (wrs / WRS_STEP).fract() == 0.0
}

/// Word-test results at up to four fixed levels, sorted by level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeechMeasurement {
    points: Vec<SpeechPoint>,
}

impl SpeechMeasurement {
    pub fn new(mut points: Vec<SpeechPoint>) -> Result<Self> {
        if points.is_empty() || points.len() > SPEECH_LEVELS.len() {
            return Err(Error::InvalidSpeech(format!("expected 1-4 points, got {}", points.len())));
        }
        for p in &points {
            if !SPEECH_LEVELS.contains(&p.level) {
                return Err(Error::InvalidSpeech(format!("level {} dB SPL not in protocol", p.level)));
            }
            if !is_valid_wrs(p.wrs) {
                return Err(Error::InvalidSpeech(format!("WRS {} is not a multiple of 5 in [0, 100]", p.wrs)));
            }
        }
        points.sort_by(|a, b| a.level.total_cmp(&b.level));
        if points.windows(2).any(|w| w[0].level == w[1].level) {
            return Err(Error::InvalidSpeech("duplicate level".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[SpeechPoint] {
        &self.points
    }

    /// Maximum WRS; ties resolve to the highest level.
    pub fn wrs_max_point(&self) -> SpeechPoint {
        let mut best = self.points[0];
        for p in &self.points[1..] {
            if p.wrs >= best.wrs {
                best = *p;
            }
        }
        best
    }

    pub fn wrs_max(&self) -> f64 {
        self.wrs_max_point().wrs
    }
}

/// One ear of one patient after preprocessing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    pub ear: Ear,
    pub gender: Option<String>,
    pub age_years: Option<f64>,
    pub test_date: Option<String>,
    pub audiogram: Audiogram,
    pub speech: SpeechMeasurement,
    pub pta_hl: f64,
    pub pta_spl: f64,
}

impl PatientRecord {
    pub fn new(
        id: impl Into<String>,
        ear: Ear,
        audiogram: Audiogram,
        speech: SpeechMeasurement,
        offsets: &HlToSpl,
    ) -> Self {
        let (pta_hl, pta_spl) = compute_pta(&audiogram, offsets);
        Self { id: id.into(), ear, gender: None, age_years: None, test_date: None, audiogram, speech, pta_hl, pta_spl }
    }
}

/// Which ear wins when both have the same PTA.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TieBreak {
    Left,
    #[default]
    Right,
}

/// Keeps the ear with the lower PTA in dB SPL. Returns `None` only when both are absent.
pub fn select_better_ear(
    left: Option<PatientRecord>,
    right: Option<PatientRecord>,
    tie: TieBreak,
) -> Option<PatientRecord> {
    match (left, right) {
        (Some(l), Some(r)) => {
            if l.pta_spl < r.pta_spl {
                Some(l)
            } else if r.pta_spl < l.pta_spl {
                Some(r)
            } else {
                match tie {
                    TieBreak::Left => Some(l),
                    TieBreak::Right => Some(r),
                }
            }
        }
        (l, r) => l.or(r),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(ear: Ear, pta: f64) -> PatientRecord {
        let speech = SpeechMeasurement::new(vec![SpeechPoint::new(60.0, 50.0)]).unwrap();
        let mut r =
            PatientRecord::new("p", ear, Audiogram::from_thresholds([pta; 9]), speech, &HlToSpl { offsets: [0.0; 9] });
        r.pta_spl = pta;
        r
    }

    #[test]
    fn better_ear_has_lower_pta() {
        let s = select_better_ear(Some(record(Ear::Left, 40.0)), Some(record(Ear::Right, 50.0)), TieBreak::Right);
        assert_eq!(s.unwrap().ear, Ear::Left);
    }

    #[test]
    fn better_ear_tie_goes_to_configured_side() {
        let s = select_better_ear(Some(record(Ear::Left, 40.0)), Some(record(Ear::Right, 40.0)), TieBreak::Right);
        assert_eq!(s.unwrap().ear, Ear::Right);
        let s = select_better_ear(Some(record(Ear::Left, 40.0)), Some(record(Ear::Right, 40.0)), TieBreak::Left);
        assert_eq!(s.unwrap().ear, Ear::Left);
    }

    #[test]
    fn single_ear_is_kept() {
        let s = select_better_ear(None, Some(record(Ear::Right, 70.0)), TieBreak::Left);
        assert_eq!(s.unwrap().ear, Ear::Right);
        assert!(select_better_ear(None, None, TieBreak::Right).is_none());
    }

    #[test]
    fn speech_measurement_validation() {
        assert!(SpeechMeasurement::new(vec![SpeechPoint::new(60.0, 37.0)]).is_err());
        assert!(SpeechMeasurement::new(vec![SpeechPoint::new(70.0, 35.0)]).is_err());
        assert!(SpeechMeasurement::new(vec![]).is_err());
        assert!(SpeechMeasurement::new(vec![SpeechPoint::new(60.0, 35.0), SpeechPoint::new(60.0, 40.0)]).is_err());
        let m = SpeechMeasurement::new(vec![SpeechPoint::new(80.0, 90.0), SpeechPoint::new(60.0, 40.0)]).unwrap();
        assert_eq!(m.points()[0].level, 60.0);
    }

    #[test]
    fn wrs_max_ties_resolve_to_higher_level() {
        let m = SpeechMeasurement::new(vec![SpeechPoint::new(80.0, 40.0), SpeechPoint::new(100.0, 40.0)]).unwrap();
        assert_eq!(m.wrs_max_point(), SpeechPoint::new(100.0, 40.0));
    }
}
