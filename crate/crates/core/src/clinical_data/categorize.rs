use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::audiogram::Audiogram;
use super::record::{PatientRecord, SpeechMeasurement, SpeechPoint};

/// Default WRS_max floor (percent) below which no SRT can be estimated.
pub const DEFAULT_NO_ESTIMATION_FLOOR: f64 = 10.0;

/// Slope-area window relative to WRS_max, in percent of WRS_max.
const SLOPE_AREA_LOW_PCT: f64 = 15.0;
const SLOPE_AREA_HIGH_PCT: f64 = 85.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlopeCategory {
    FullyDetermined,
    HalfDetermined,
    Undetermined,
    NoEstimation,
}

impl SlopeCategory {
    pub const ALL: [SlopeCategory; 4] = [
        SlopeCategory::FullyDetermined,
        SlopeCategory::HalfDetermined,
        SlopeCategory::Undetermined,
        SlopeCategory::NoEstimation,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SlopeCategory::FullyDetermined => "fully_determined",
            SlopeCategory::HalfDetermined => "half_determined",
            SlopeCategory::Undetermined => "undetermined",
            SlopeCategory::NoEstimation => "no_estimation",
        }
    }
}

impl fmt::Display for SlopeCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Categorization {
    pub category: SlopeCategory,
    /// Points (excluding the WRS_max point) inside [0.15, 0.85] * WRS_max, sorted by level.
    pub slope_area: Vec<SpeechPoint>,
    pub wrs_max_point: SpeechPoint,
}

/// Classifies a measurement by the number of points in the slope area.
pub fn categorize(speech: &SpeechMeasurement, no_estimation_floor: f64) -> Categorization {
    let wrs_max_point = speech.wrs_max_point();
    let wrs_max = wrs_max_point.wrs;
    // Integer-valued scores keep these products exact.
    let slope_area: Vec<SpeechPoint> = speech
        .points()
        .iter()
        .filter(|p| p.level != wrs_max_point.level)
        .filter(|p| 100.0 * p.wrs >= SLOPE_AREA_LOW_PCT * wrs_max && 100.0 * p.wrs <= SLOPE_AREA_HIGH_PCT * wrs_max)
        .copied()
        .collect();

    let category = if wrs_max < no_estimation_floor {
        SlopeCategory::NoEstimation
    } else {
        match slope_area.len() {
            0 => SlopeCategory::Undetermined,
            1 => SlopeCategory::HalfDetermined,
            _ => SlopeCategory::FullyDetermined,
        }
    };
    Categorization {
        category,
        slope_area: if category == SlopeCategory::NoEstimation { Vec::new() } else { slope_area },
        wrs_max_point,
    }
}

/// Collapses records with identical threshold values.
///
/// Returns the unique audiograms in first-seen order and, for every input
/// record, the index of its audiogram in that list.
pub fn dedup_audiograms<'a, I>(audiograms: I) -> (Vec<Audiogram>, Vec<usize>)
where
    I: IntoIterator<Item = &'a Audiogram>,
{
    let mut index: HashMap<[u64; 9], usize> = HashMap::new();
    let mut unique = Vec::new();
    let mut map = Vec::new();
    for a in audiograms {
        let slot = *index.entry(a.value_key()).or_insert_with(|| {
            unique.push(a.clone());
            unique.len() - 1
        });
        map.push(slot);
    }
    (unique, map)
}

/// Convenience wrapper over [`dedup_audiograms`] for patient records.
pub fn dedup_records(records: &[PatientRecord]) -> (Vec<Audiogram>, Vec<usize>) {
    dedup_audiograms(records.iter().map(|r| &r.audiogram))
}
