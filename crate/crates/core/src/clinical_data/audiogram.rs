use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Audiometric test frequencies in Hz.
pub const FREQUENCIES: [f64; 9] = [250.0, 500.0, 1000.0, 1500.0, 2000.0, 3000.0, 4000.0, 6000.0, 8000.0];

/// Indices into [`FREQUENCIES`] for the pure-tone average (500/1000/2000/4000 Hz).
pub const PTA_INDICES: [usize; 4] = [1, 2, 4, 6];

pub const MIN_THRESHOLD_HL: f64 = -10.0;
pub const MAX_THRESHOLD_HL: f64 = 120.0;

/// Audiogram as read from a record: `None` marks a frequency that was not measured.
pub type PartialAudiogram = [Option<f64>; 9];

/// Complete audiogram in dB HL at [`FREQUENCIES`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Audiogram {
    thresholds: [f64; 9],
    imputed: [bool; 9],
}

impl Audiogram {
    /// Builds a fully measured audiogram. Values are clamped to the plausible range.
    pub fn from_thresholds(thresholds: [f64; 9]) -> Self {
        let mut t = thresholds;
        for v in &mut t {
            *v = v.clamp(MIN_THRESHOLD_HL, MAX_THRESHOLD_HL);
        }
        Self { thresholds: t, imputed: [false; 9] }
    }

    pub fn thresholds(&self) -> &[f64; 9] {
        &self.thresholds
    }

    pub fn imputed(&self) -> &[bool; 9] {
        &self.imputed
    }

    pub fn threshold_at(&self, frequency: f64) -> Option<f64> {
        FREQUENCIES.iter().position(|&f| f == frequency).map(|i| self.thresholds[i])
    }

    /// Measured values only; imputed frequencies become `None`.
    pub fn measured(&self) -> PartialAudiogram {
        std::array::from_fn(|i| (!self.imputed[i]).then_some(self.thresholds[i]))
    }

    /// Threshold at an arbitrary frequency: linear on log-frequency between
    /// audiogram frequencies, nearest value outside the audiogram range.
    pub fn interpolate(&self, frequency: f64) -> f64 {
        if frequency <= FREQUENCIES[0] {
            return self.thresholds[0];
        }
        if frequency >= FREQUENCIES[8] {
            return self.thresholds[8];
        }
        let hi = FREQUENCIES.iter().position(|&f| f >= frequency).unwrap();
        if FREQUENCIES[hi] == frequency {
            return self.thresholds[hi];
        }
        let lo = hi - 1;
        let w = (frequency / FREQUENCIES[lo]).ln() / (FREQUENCIES[hi] / FREQUENCIES[lo]).ln();
        self.thresholds[lo] + w * (self.thresholds[hi] - self.thresholds[lo])
    }

    /// Bit-level key for exact-value deduplication (imputation flags ignored).
    pub(crate) fn value_key(&self) -> [u64; 9] {
        let mut key = [0u64; 9];
        for (k, v) in key.iter_mut().zip(self.thresholds.iter()) {
            // -0.0 and 0.0 are the same threshold
            *k = (v + 0.0).to_bits();
        }
        key
    }
}

/// Fills missing thresholds and clamps everything to [-10, 120] dB HL.
///
/// Interior gaps are interpolated linearly on log-frequency between the nearest
/// measured neighbours; gaps below the lowest or above the highest measured
/// frequency take the nearest measured value.
pub fn impute_audiogram(partial: &PartialAudiogram) -> Result<Audiogram> {
    let measured: Vec<(usize, f64)> = partial
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|x| (i, x.clamp(MIN_THRESHOLD_HL, MAX_THRESHOLD_HL))))
        .collect();
    if measured.is_empty() {
        return Err(Error::EmptyAudiogram);
    }

    let mut thresholds = [0.0; 9];
    let mut imputed = [false; 9];
    for i in 0..9 {
        if let Some(v) = partial[i] {
            thresholds[i] = v.clamp(MIN_THRESHOLD_HL, MAX_THRESHOLD_HL);
            continue;
        }
        imputed[i] = true;
        let below = measured.iter().rev().find(|(j, _)| *j < i);
        let above = measured.iter().find(|(j, _)| *j > i);
        thresholds[i] = match (below, above) {
            (Some(&(j, a)), Some(&(k, b))) => {
                let w = (FREQUENCIES[i] / FREQUENCIES[j]).ln() / (FREQUENCIES[k] / FREQUENCIES[j]).ln();
                a + w * (b - a)
            }
            (Some(&(_, a)), None) => a,
            (None, Some(&(_, b))) => b,
            (None, None) => unreachable!("at least one measured value"),
        };
        thresholds[i] = thresholds[i].clamp(MIN_THRESHOLD_HL, MAX_THRESHOLD_HL);
    }
    Ok(Audiogram { thresholds, imputed })
}

/// Per-frequency offsets converting dB HL to dB SPL.
///
/// The default is the reference equivalent threshold SPL for circumaural
/// HDA 200 headphones (ISO 389-8), the transducer used for the clinical data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HlToSpl {
    pub offsets: [f64; 9],
}

impl Default for HlToSpl {
    fn default() -> Self {
        Self { offsets: [18.0, 11.0, 5.5, 5.5, 4.5, 2.5, 9.5, 17.0, 17.5] }
    }
}

impl HlToSpl {
    /// Mean offset over the four PTA frequencies.
    pub fn pta_offset(&self) -> f64 {
        PTA_INDICES.iter().map(|&i| self.offsets[i]).sum::<f64>() / 4.0
    }
}

/// Pure-tone average in dB HL and its dB SPL transform.
pub fn compute_pta(audiogram: &Audiogram, offsets: &HlToSpl) -> (f64, f64) {
    let t = audiogram.thresholds();
    let pta_hl = PTA_INDICES.iter().map(|&i| t[i]).sum::<f64>() / 4.0;
    (pta_hl, pta_hl + offsets.pta_offset())
}
