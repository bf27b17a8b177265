//! Propagation of word-score and SII uncertainty into SRT errors.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

use crate::clinical_data::WRS_STEP;
use crate::{Error, Result};

/// Words per test list.
pub const LIST_LENGTH: u64 = 20;
/// Default uncertainty of the pure-tone average, dB.
pub const DELTA_PTA: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TableSource {
    BuiltinBinomial,
    External,
}

/// Confidence interval of a measured WRS, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WrsInterval {
    pub wrs: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl WrsInterval {
    pub fn delta_low(&self) -> f64 {
        self.wrs - self.ci_low
    }

    pub fn delta_high(&self) -> f64 {
        self.ci_high - self.wrs
    }

    /// The larger half-width.
    pub fn delta(&self) -> f64 {
        self.delta_low().max(self.delta_high())
    }

    pub fn width(&self) -> f64 {
        self.ci_high - self.ci_low
    }
}

/// Maps every scorable WRS (0, 5, ..., 100 %) to its confidence interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WrsConfidenceTable {
    pub source: TableSource,
    /// Indexed by `wrs / 5`.
    rows: Vec<Option<WrsInterval>>,
}

impl Default for WrsConfidenceTable {
    fn default() -> Self {
        Self::binomial(LIST_LENGTH, 0.95)
    }
}

fn slot(wrs: f64) -> Option<usize> {
    let k = wrs / WRS_STEP;
    (k.fract() == 0.0 && (0.0..=100.0 / WRS_STEP).contains(&k)).then_some(k as usize)
}

impl WrsConfidenceTable {
    /// Exact (Clopper-Pearson) intervals for `trials` Bernoulli trials.
    pub fn binomial(trials: u64, confidence: f64) -> Self {
        let alpha = 1.0 - confidence;
        let n = trials as f64;
        let rows = (0..=20)
            .map(|k| {
                let wrs = k as f64 * WRS_STEP;
                let x = (wrs / 100.0 * n).round();
                let low = if x == 0.0 {
                    0.0
                } else {
                    Beta::new(x, n - x + 1.0).expect("valid shape").inverse_cdf(alpha / 2.0)
                };
                let high = if x == n {
                    1.0
                } else {
                    Beta::new(x + 1.0, n - x).expect("valid shape").inverse_cdf(1.0 - alpha / 2.0)
                };
                Some(WrsInterval { wrs, ci_low: 100.0 * low, ci_high: 100.0 * high })
            })
            .collect();
        Self { source: TableSource::BuiltinBinomial, rows }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_reader(std::fs::File::open(path)?)
    }

    /// Reads rows `wrs,ci_low,ci_high` (percent). A header row is optional.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut csv =
            csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).comment(Some(b'#')).from_reader(reader);
        let mut rows = vec![None; 21];
        for (i, rec) in csv.records().enumerate() {
            let rec = rec?;
            let line = i + 1;
            let values: Vec<f64> = match rec.iter().map(str::parse::<f64>).collect() {
                Ok(v) => v,
                Err(_) if i == 0 => continue,
                Err(e) => return Err(Error::Row { line, message: e.to_string() }),
            };
            let [wrs, ci_low, ci_high] = values[..] else {
                return Err(Error::Row { line, message: "expected wrs,ci_low,ci_high".into() });
            };
            let k =
                slot(wrs).ok_or_else(|| Error::Row { line, message: format!("WRS {wrs} is not on the 5 % grid") })?;
            if !(ci_low <= wrs && wrs <= ci_high) {
                return Err(Error::Row { line, message: format!("interval [{ci_low}, {ci_high}] excludes {wrs}") });
            }
            rows[k] = Some(WrsInterval { wrs, ci_low, ci_high });
        }
        Ok(Self { source: TableSource::External, rows })
    }

    pub fn interval(&self, wrs: f64) -> Result<WrsInterval> {
        slot(wrs).and_then(|k| self.rows[k]).ok_or(Error::MissingConfidence(wrs))
    }

    pub fn intervals(&self) -> impl Iterator<Item = &WrsInterval> {
        self.rows.iter().flatten()
    }
}

/// Returns (Δwrs_low, Δwrs_high, Δwrs) for a measured score.
pub fn wrs_ci(wrs: f64, table: &WrsConfidenceTable) -> Result<(f64, f64, f64)> {
    let ci = table.interval(wrs)?;
    Ok((ci.delta_low(), ci.delta_high(), ci.delta()))
}

/// Uncertainty of a two-point slope, %/dB.
pub fn delta_slope_empirical(delta_wrs_u: f64, delta_wrs_l: f64, level_u: f64, level_l: f64) -> Result<f64> {
    if level_u == level_l {
        return Err(Error::ZeroLevelSpan);
    }
    Ok((delta_wrs_u + delta_wrs_l) / (level_u - level_l).abs())
}

/// Uncertainty of the SII slope from two SII values with error `delta_sii` each.
pub fn delta_slope_sii(delta_sii: f64) -> f64 {
    (2.0 * delta_sii * delta_sii).sqrt()
}

/// Variant that divides by the level span of the slope estimate and converts
/// to %/dB.
pub fn delta_slope_sii_corrected(delta_sii: f64, level_span: f64, s_wrs_nh: f64, s_sii_nh: f64) -> Result<f64> {
    if !(level_span > 0.0) {
        return Err(Error::ZeroLevelSpan);
    }
    Ok(delta_slope_sii(delta_sii) / level_span * s_wrs_nh / s_sii_nh)
}

/// SRT error of a point-slope estimate, dB.
pub fn delta_srt(wrs: f64, delta_wrs: f64, slope: f64, delta_slope: f64) -> Result<f64> {
    if !(slope > 0.0) {
        return Err(Error::NonPositiveSlope);
    }
    Ok(delta_wrs / slope + (wrs - 50.0).abs() * delta_slope / (slope * slope))
}

pub fn delta_d(delta_srt: f64, delta_pta: f64) -> f64 {
    delta_srt - delta_pta
}
