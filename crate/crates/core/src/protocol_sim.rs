//! Synthetic cohorts with known psychometric functions, replayed through the
//! fixed-level word test.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clinical_data::{
    compute_pta, impute_audiogram, write_csv, Audiogram, Ear, HlToSpl, PartialAudiogram, PatientRecord, RawRow,
    SlopeCategory, SpeechMeasurement, SpeechPoint, SPEECH_LEVELS, WRS_STEP,
};
use crate::estimators::{Procedure, SrtEstimate};
use crate::psychometrics::PsychometricFunction;
use crate::uncertainty::LIST_LENGTH;
use crate::{Error, Result};

/// Standard audiograms of Bisgaard et al. (2010), 250 to 6000 Hz.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BisgaardClass {
    N1,
    N2,
    N3,
    N4,
    N5,
    N6,
    N7,
    S1,
    S2,
    S3,
}

impl BisgaardClass {
    pub const ALL: [BisgaardClass; 10] = [
        BisgaardClass::N1,
        BisgaardClass::N2,
        BisgaardClass::N3,
        BisgaardClass::N4,
        BisgaardClass::N5,
        BisgaardClass::N6,
        BisgaardClass::N7,
        BisgaardClass::S1,
        BisgaardClass::S2,
        BisgaardClass::S3,
    ];

    /// dB HL at 250, 500, 1000, 1500, 2000, 3000, 4000, 6000 Hz.
    pub fn thresholds(&self) -> [f64; 8] {
        match self {
            BisgaardClass::N1 => [10.0, 10.0, 10.0, 10.0, 15.0, 20.0, 30.0, 40.0],
            BisgaardClass::N2 => [20.0, 20.0, 25.0, 30.0, 35.0, 40.0, 45.0, 50.0],
            BisgaardClass::N3 => [35.0, 35.0, 40.0, 45.0, 50.0, 55.0, 60.0, 65.0],
            BisgaardClass::N4 => [55.0, 55.0, 55.0, 60.0, 65.0, 70.0, 75.0, 80.0],
            BisgaardClass::N5 => [65.0, 70.0, 75.0, 80.0, 80.0, 80.0, 80.0, 80.0],
            BisgaardClass::N6 => [75.0, 80.0, 85.0, 90.0, 90.0, 95.0, 100.0, 100.0],
            BisgaardClass::N7 => [90.0, 95.0, 105.0, 105.0, 105.0, 105.0, 105.0, 105.0],
            BisgaardClass::S1 => [10.0, 10.0, 10.0, 10.0, 15.0, 30.0, 55.0, 70.0],
            BisgaardClass::S2 => [20.0, 20.0, 25.0, 35.0, 55.0, 75.0, 95.0, 95.0],
            BisgaardClass::S3 => [30.0, 35.0, 60.0, 70.0, 75.0, 80.0, 80.0, 85.0],
        }
    }

    /// Measured thresholds with 8000 Hz missing.
    pub fn partial(&self) -> PartialAudiogram {
        let t = self.thresholds();
        std::array::from_fn(|i| t.get(i).copied())
    }

    pub fn audiogram(&self) -> Audiogram {
        impute_audiogram(&self.partial()).expect("class thresholds are complete")
    }
}

impl fmt::Display for BisgaardClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseModel {
    None,
    #[default]
    Binomial,
}

impl FromStr for NoiseModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "binomial" => Ok(Self::Binomial),
            other => Err(Error::Config(format!("unknown noise model '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoppingRule {
    /// Stop at 100 %, at 110 dB, or when the score gains at most one word
    /// over a non-zero previous score.
    #[default]
    Plateau,
    /// Stop only at 100 % or 110 dB.
    CeilingOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    /// Truth SRT minus PTA_SPL, dB.
    pub srt_offset: (f64, f64),
    /// %/dB
    pub slope: (f64, f64),
    /// %
    pub wrs_max_choices: Vec<f64>,
    /// Maximum per-frequency jitter, dB. Jitter is drawn on a 5 dB grid.
    pub jitter_db: f64,
    pub classes: Vec<BisgaardClass>,
    pub noise: NoiseModel,
    pub stopping: StoppingRule,
    pub offsets: HlToSpl,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            srt_offset: (-5.0, 25.0),
            slope: (1.0, 6.0),
            wrs_max_choices: (10..=20).map(|k| 5.0 * f64::from(k)).collect(),
            jitter_db: 5.0,
            classes: BisgaardClass::ALL.to_vec(),
            noise: NoiseModel::Binomial,
            stopping: StoppingRule::Plateau,
            offsets: HlToSpl::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, (lo, hi): (f64, f64)| {
            if lo.is_finite() && hi.is_finite() && lo <= hi {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} range [{lo}, {hi}] is invalid")))
            }
        };
        range("srt_offset", self.srt_offset)?;
        range("slope", self.slope)?;
        if self.srt_offset.0 < -10.0 {
            return Err(Error::Config("srt_offset below -10 dB would produce inconsistent truths".into()));
        }
        if !(self.slope.0 > 0.0) {
            return Err(Error::Config("slopes must be positive".into()));
        }
        if self.wrs_max_choices.is_empty() || self.wrs_max_choices.iter().any(|&w| !(w > 0.0 && w <= 100.0)) {
            return Err(Error::Config("wrs_max choices must lie in (0, 100]".into()));
        }
        if !(self.jitter_db >= 0.0) {
            return Err(Error::Config("jitter must be non-negative".into()));
        }
        if self.classes.is_empty() {
            return Err(Error::Config("at least one audiogram class is required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedPatient {
    pub index: u64,
    pub id: String,
    pub class: BisgaardClass,
    pub truth: PsychometricFunction,
    pub audiogram: Audiogram,
    pub pta_hl: f64,
    pub pta_spl: f64,
    pub measurements: SpeechMeasurement,
    /// Cohort seed; with `index` it fixes every random draw.
    pub seed: u64,
}

impl SimulatedPatient {
    /// Level where the true function reaches 50 % WRS, or its midpoint when it
    /// never does.
    pub fn reference_srt(&self) -> f64 {
        self.truth.level_at(50.0).unwrap_or(self.truth.srt)
    }

    pub fn to_record(&self, offsets: &HlToSpl) -> PatientRecord {
        PatientRecord::new(self.id.clone(), Ear::Right, self.audiogram.clone(), self.measurements.clone(), offsets)
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Replays the ascending fixed-level protocol against `truth`.
pub fn simulate_protocol<R: Rng + ?Sized>(
    truth: &PsychometricFunction,
    noise: NoiseModel,
    stopping: StoppingRule,
    rng: &mut R,
) -> SpeechMeasurement {
    let mut points: Vec<SpeechPoint> = Vec::with_capacity(SPEECH_LEVELS.len());
    for &level in &SPEECH_LEVELS {
        let p = (truth.evaluate(level) / 100.0).clamp(0.0, 1.0);
        let wrs = match noise {
            NoiseModel::None => WRS_STEP * (100.0 * p / WRS_STEP).round(),
            NoiseModel::Binomial => {
                let words = Binomial::new(LIST_LENGTH, p).expect("probability in [0, 1]").sample(rng);
                100.0 * words as f64 / LIST_LENGTH as f64
            }
        };
        let previous = points.last().map(|q| q.wrs);
        points.push(SpeechPoint::new(level, wrs));
        if wrs >= 100.0 {
            break;
        }
        if let (StoppingRule::Plateau, Some(prev)) = (stopping, previous) {
            if prev > 0.0 && wrs - prev <= WRS_STEP {
                break;
            }
        }
    }
    SpeechMeasurement::new(points).expect("protocol produces valid measurements")
}

fn generate_one(index: u64, cfg: &GeneratorConfig, seed: u64) -> Result<SimulatedPatient> {
    let mut rng = rng_for(seed, 2 * index);
    let class = cfg.classes[rng.random_range(0..cfg.classes.len())];
    let mut partial = class.partial();
    for t in partial.iter_mut().flatten() {
        let j = uniform(&mut rng, (-cfg.jitter_db, cfg.jitter_db));
        *t = (*t + WRS_STEP * (j / WRS_STEP).round()).clamp(-10.0, 120.0);
    }
    let audiogram = impute_audiogram(&partial)?;
    let (pta_hl, pta_spl) = compute_pta(&audiogram, &cfg.offsets);
    let truth = PsychometricFunction::new(
        pta_spl + uniform(&mut rng, cfg.srt_offset),
        uniform(&mut rng, cfg.slope),
        cfg.wrs_max_choices[rng.random_range(0..cfg.wrs_max_choices.len())],
    )?;
    let mut noise_rng = rng_for(seed, 2 * index + 1);
    let measurements = simulate_protocol(&truth, cfg.noise, cfg.stopping, &mut noise_rng);
    Ok(SimulatedPatient {
        index,
        id: format!("sim{:06}", index + 1),
        class,
        truth,
        audiogram,
        pta_hl,
        pta_spl,
        measurements,
        seed,
    })
}

/// Draws `n` patients. Each patient uses its own random streams, so the
/// cohort does not depend on the number of worker threads.
pub fn generate_cohort(n: usize, cfg: &GeneratorConfig, seed: u64) -> Result<Vec<SimulatedPatient>> {
    if n == 0 {
        return Err(Error::Config("cohort size must be at least 1".into()));
    }
    cfg.validate()?;
    (0..n as u64).into_par_iter().map(|i| generate_one(i, cfg, seed)).collect()
}

/// Writes the cohort in the clinical input schema.
pub fn write_cohort_csv<W: Write>(cohort: &[SimulatedPatient], offsets: &HlToSpl, writer: W) -> Result<()> {
    let rows: Vec<RawRow> = cohort.iter().map(|p| RawRow::from_record(&p.to_record(offsets))).collect();
    write_csv(&rows, writer)
}

pub const TRUTH_HEADER: [&str; 8] = ["id", "class", "srt", "slope", "wrs_max", "reference_srt", "pta_hl", "pta_spl"];

/// Writes the true psychometric parameters, one row per patient.
pub fn write_truth_csv<W: Write>(cohort: &[SimulatedPatient], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(TRUTH_HEADER)?;
    for p in cohort {
        w.write_record([
            p.id.clone(),
            p.class.to_string(),
            p.truth.srt.to_string(),
            p.truth.slope.to_string(),
            p.truth.wrs_max.to_string(),
            p.reference_srt().to_string(),
            p.pta_hl.to_string(),
            p.pta_spl.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Accuracy of one procedure against the simulated truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcedureValidation {
    pub procedure: Procedure,
    pub n: usize,
    pub n_excluded: usize,
    /// Mean of estimate minus reference SRT, dB.
    pub bias: f64,
    pub rmse: f64,
    /// Share of estimates whose ±ΔSRT interval contains the reference.
    pub coverage: f64,
    pub median_delta_srt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub n_patients: usize,
    pub categories: BTreeMap<SlopeCategory, usize>,
    pub procedures: Vec<ProcedureValidation>,
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Compares estimates with the truth. `estimates` pairs each estimate with the
/// index of its patient in `cohort`.
pub fn validate(cohort: &[SimulatedPatient], estimates: &[(usize, SrtEstimate)]) -> ValidationReport {
    let mut categories: BTreeMap<SlopeCategory, usize> = SlopeCategory::ALL.iter().map(|&c| (c, 0)).collect();
    let mut seen = vec![false; cohort.len()];
    for (i, e) in estimates {
        if !std::mem::replace(&mut seen[*i], true) {
            *categories.entry(e.category).or_default() += 1;
        }
    }
    let procedures = Procedure::ESTIMATING
        .iter()
        .map(|&procedure| {
            let rows: Vec<&(usize, SrtEstimate)> = estimates.iter().filter(|(_, e)| e.procedure == procedure).collect();
            let included: Vec<(f64, f64, f64)> = rows
                .iter()
                .filter(|(_, e)| !e.excluded())
                .filter_map(|(i, e)| Some((e.srt?, cohort[*i].reference_srt(), e.delta_srt.unwrap_or(f64::NAN))))
                .collect();
            let n = included.len() as f64;
            let bias = included.iter().map(|(s, r, _)| s - r).sum::<f64>() / n;
            let rmse = (included.iter().map(|(s, r, _)| (s - r).powi(2)).sum::<f64>() / n).sqrt();
            let covered = included.iter().filter(|(s, r, d)| (s - r).abs() <= *d).count();
            let mut deltas: Vec<f64> = included.iter().map(|t| t.2).filter(|d| d.is_finite()).collect();
            ProcedureValidation {
                procedure,
                n: included.len(),
                n_excluded: rows.len() - included.len(),
                bias,
                rmse,
                coverage: covered as f64 / n,
                median_delta_srt: median(&mut deltas),
            }
        })
        .collect();
    ValidationReport { n_patients: cohort.len(), categories, procedures }
}
