//! Individualised Speech Intelligibility Index (critical-band procedure) as a
//! function of presentation level, and the SII-based psychometric slope.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::clinical_data::Audiogram;
use crate::{Error, Result};

pub const BANDS: usize = 21;

/// Normal-hearing reference slope of the word test, %/dB.
pub const S_WRS_NH: f64 = 4.5;
/// SII slope of a zero-threshold audiogram, 1/dB.
pub const S_SII_NH: f64 = 0.0307;
/// Maximum repeatability error of the SII.
pub const DELTA_SII: f64 = 0.00084;

const BUILTIN_TABLE: &str = include_str!("../data/sii_bands_v1.txt");

/// Raw band tables as read from a data file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandTable {
    pub version: u32,
    pub center: [f64; BANDS],
    pub lower: [f64; BANDS],
    pub upper: [f64; BANDS],
    pub importance_spin: [f64; BANDS],
    pub speech_db: [f64; BANDS],
    pub internal_noise_db: [f64; BANDS],
}

impl BandTable {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_TABLE).expect("builtin band table is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Parses the whitespace-separated table format (see `data/sii_bands_v1.txt`).
    pub fn parse(text: &str) -> Result<Self> {
        let mut version = None;
        let mut rows: Vec<[f64; 6]> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix("# sii-bands v") {
                version = rest.trim().parse::<u32>().ok();
                continue;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<f64> = line
                .split_whitespace()
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::BandTable(format!("line {}: {e}", n + 1)))?;
            let row: [f64; 6] =
                fields.try_into().map_err(|_| Error::BandTable(format!("line {}: expected 6 columns", n + 1)))?;
            rows.push(row);
        }
        let version = version.ok_or_else(|| Error::BandTable("missing '# sii-bands v<N>' header".into()))?;
        if version != 1 {
            return Err(Error::BandTable(format!("unsupported table version {version}")));
        }
        if rows.len() != BANDS {
            return Err(Error::BandTable(format!("expected {BANDS} bands, got {}", rows.len())));
        }
        let col = |c: usize| -> [f64; BANDS] { std::array::from_fn(|i| rows[i][c]) };
        let table = BandTable {
            version,
            center: col(0),
            lower: col(1),
            upper: col(2),
            importance_spin: col(3),
            speech_db: col(4),
            internal_noise_db: col(5),
        };
        for i in 0..BANDS {
            if !(table.lower[i] < table.center[i] && table.center[i] < table.upper[i]) {
                return Err(Error::BandTable(format!("band {} edges do not bracket its centre", i + 1)));
            }
            if i > 0 && table.center[i] <= table.center[i - 1] {
                return Err(Error::BandTable("band centres must ascend".into()));
            }
            if table.importance_spin[i] < 0.0 {
                return Err(Error::BandTable(format!("negative importance in band {}", i + 1)));
            }
        }
        Ok(table)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImportanceFunction {
    #[default]
    Spin,
    Flat,
}

impl FromStr for ImportanceFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "spin" => Ok(Self::Spin),
            "flat" => Ok(Self::Flat),
            other => Err(Error::Config(format!("unknown importance function '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiiParameters {
    pub band_centers: [f64; BANDS],
    pub band_upper: [f64; BANDS],
    pub bandwidth: [f64; BANDS],
    /// Non-negative, unit sum.
    pub band_importance: [f64; BANDS],
    /// Speech spectrum level at `reference_level`, dB SPL/Hz.
    pub speech_spectrum: [f64; BANDS],
    pub internal_noise: [f64; BANDS],
    /// Overall level of `speech_spectrum`, dB SPL.
    pub reference_level: f64,
    /// Overall level of the speech-shaped background noise, dB SPL.
    pub noise_level_overall: f64,
    pub level_distortion_enabled: bool,
}

impl Default for SiiParameters {
    fn default() -> Self {
        Self::new(&BandTable::builtin(), ImportanceFunction::Spin).expect("builtin parameters are valid")
    }
}

impl SiiParameters {
    pub fn new(table: &BandTable, importance: ImportanceFunction) -> Result<Self> {
        let raw = match importance {
            ImportanceFunction::Spin => table.importance_spin,
            ImportanceFunction::Flat => [1.0; BANDS],
        };
        let total: f64 = raw.iter().sum();
        if !(total > 0.0) {
            return Err(Error::BandTable("band importance sums to zero".into()));
        }
        let bandwidth: [f64; BANDS] = std::array::from_fn(|i| table.upper[i] - table.lower[i]);
        let mut p = Self {
            band_centers: table.center,
            band_upper: table.upper,
            bandwidth,
            band_importance: raw.map(|w| w / total),
            speech_spectrum: table.speech_db,
            internal_noise: table.internal_noise_db,
            reference_level: 0.0,
            noise_level_overall: -50.0,
            level_distortion_enabled: true,
        };
        p.reference_level = p.overall_level();
        Ok(p)
    }

    fn overall_level(&self) -> f64 {
        let power: f64 =
            (0..BANDS).map(|i| 10f64.powf((self.speech_spectrum[i] + 10.0 * self.bandwidth[i].log10()) / 10.0)).sum();
        10.0 * power.log10()
    }

    /// Tilts the speech spectrum by `db_per_octave` around 1 kHz.
    pub fn with_spectral_tilt(&self, db_per_octave: f64) -> Self {
        let mut p = self.clone();
        for i in 0..BANDS {
            p.speech_spectrum[i] += db_per_octave * (self.band_centers[i] / 1000.0).log2();
        }
        p.reference_level = p.overall_level();
        p
    }
}

/// SII evaluator for one audiogram.
#[derive(Debug, Clone)]
pub struct SiiModel<'a> {
    params: &'a SiiParameters,
    /// Equivalent internal noise spectrum level per band.
    internal: [f64; BANDS],
}

impl<'a> SiiModel<'a> {
    pub fn new(audiogram: &Audiogram, params: &'a SiiParameters) -> Self {
        let internal =
            std::array::from_fn(|i| params.internal_noise[i] + audiogram.interpolate(params.band_centers[i]));
        Self { params, internal }
    }

    pub fn sii(&self, speech_level: f64) -> f64 {
        let p = self.params;
        let shift = speech_level - p.reference_level;
        let noise_shift = p.noise_level_overall - p.reference_level;
        let mut speech = [0.0; BANDS];
        let mut noise = [0.0; BANDS];
        let mut masker = [0.0; BANDS];
        let mut spread = [0.0; BANDS];
        for i in 0..BANDS {
            speech[i] = p.speech_spectrum[i] + shift;
            noise[i] = p.speech_spectrum[i] + noise_shift;
            // self-speech masking
            masker[i] = noise[i].max(speech[i] - 24.0);
            spread[i] = -80.0 + 0.6 * (masker[i] + 10.0 * p.bandwidth[i].log10());
        }
        let mut total = 0.0;
        for i in 0..BANDS {
            let masking = if i == 0 {
                masker[0]
            } else {
                let mut power = 10f64.powf(0.1 * noise[i]);
                for k in 0..i {
                    let octaves = 3.32 * (0.89 * p.band_centers[i] / p.band_upper[k]).log10();
                    power += 10f64.powf(0.1 * (masker[k] + spread[k] * octaves));
                }
                10.0 * power.log10()
            };
            let disturbance = masking.max(self.internal[i]);
            let distortion = if p.level_distortion_enabled {
                (1.0 - (speech[i] - p.speech_spectrum[i] - 10.0) / 160.0).clamp(0.0, 1.0)
            } else {
                1.0
            };
            let audibility = ((speech[i] - disturbance + 15.0) / 30.0).clamp(0.0, 1.0);
            total += p.band_importance[i] * distortion * audibility;
        }
        total.clamp(0.0, 1.0)
    }
}

pub fn compute_sii(audiogram: &Audiogram, speech_level: f64, params: &SiiParameters) -> f64 {
    SiiModel::new(audiogram, params).sii(speech_level)
}

/// Squared Pearson correlation; zero when either coordinate is constant.
pub fn pearson_r_squared(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in points {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    (sxy * sxy / (sxx * syy)).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearRangeOptions {
    pub coarse_levels: Vec<f64>,
    /// Tried in order while the curve is still highest at its top sample.
    pub extension_levels: Vec<f64>,
    pub refined_levels: usize,
    pub r_squared_target: f64,
    /// A proposed level closer than this to an existing one counts as a duplicate.
    pub resolution_db: f64,
    pub max_iterations: usize,
}

impl Default for LinearRangeOptions {
    fn default() -> Self {
        Self {
            coarse_levels: vec![10.0, 40.0, 70.0, 100.0],
            extension_levels: vec![110.0, 120.0],
            refined_levels: 4,
            r_squared_target: 0.99,
            resolution_db: 0.5,
            max_iterations: 200,
        }
    }
}

/// Sampled SII-level curve with its most linear triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiiCurve {
    /// (level dB SPL, SII), sorted by level.
    pub samples: Vec<(f64, f64)>,
    pub best_triple: [(f64, f64); 3],
    pub r_squared: f64,
    /// 1/dB, from the outer points of the best triple.
    pub s_sii: f64,
    pub converged: bool,
}

struct Sampler<'a> {
    model: SiiModel<'a>,
    samples: Vec<(f64, f64)>,
    resolution: f64,
}

impl Sampler<'_> {
    fn add(&mut self, level: f64) -> bool {
        if self.samples.iter().any(|&(l, _)| (l - level).abs() < self.resolution) {
            return false;
        }
        let v = self.model.sii(level);
        let pos = self.samples.partition_point(|&(l, _)| l < level);
        self.samples.insert(pos, (level, v));
        true
    }

    /// Index of the first point of the best rising triple and its R².
    fn best_triple(&self) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64, f64)> = None;
        for i in 0..self.samples.len().saturating_sub(2) {
            let t = &self.samples[i..i + 3];
            if t[2].1 <= t[0].1 {
                continue;
            }
            let r2 = pearson_r_squared(t);
            let slope = (t[2].1 - t[0].1) / (t[2].0 - t[0].0);
            let better = match best {
                None => true,
                Some((_, br2, bslope)) => r2 > br2 || (r2 == br2 && slope > bslope),
            };
            if better {
                best = Some((i, r2, slope));
            }
        }
        best.map(|(i, r2, _)| (i, r2))
    }
}

/// Level where the piecewise-linear curve first reaches `threshold`.
fn first_crossing(samples: &[(f64, f64)], threshold: f64) -> f64 {
    if samples[0].1 >= threshold {
        return samples[0].0;
    }
    for w in samples.windows(2) {
        let ((l0, v0), (l1, v1)) = (w[0], w[1]);
        if v1 >= threshold && v0 < threshold {
            return l0 + (threshold - v0) / (v1 - v0) * (l1 - l0);
        }
    }
    samples[samples.len() - 1].0
}

/// Samples the SII-level curve, locates its rising range and refines until a
/// triple of consecutive samples is linear (R² at least the target).
pub fn find_linear_range(audiogram: &Audiogram, params: &SiiParameters) -> Result<SiiCurve> {
    find_linear_range_with(audiogram, params, &LinearRangeOptions::default())
}

pub fn find_linear_range_with(
    audiogram: &Audiogram,
    params: &SiiParameters,
    opts: &LinearRangeOptions,
) -> Result<SiiCurve> {
    let mut s =
        Sampler { model: SiiModel::new(audiogram, params), samples: Vec::new(), resolution: opts.resolution_db };
    for &l in &opts.coarse_levels {
        s.add(l);
    }
    // extend upward while the curve still peaks at the highest sample
    let mut extension = opts.extension_levels.iter();
    loop {
        let top = s.samples[s.samples.len() - 1].1;
        if s.samples.iter().any(|&(_, v)| v > top) {
            break;
        }
        match extension.next() {
            Some(&l) => {
                s.add(l);
            }
            None => break,
        }
    }
    if s.samples.iter().all(|&(_, v)| v <= 0.0) {
        return Err(Error::NoPositiveSlope);
    }

    let peak = s.samples.iter().map(|&(_, v)| v).fold(0.0, f64::max);
    let lo = first_crossing(&s.samples, 0.1 * peak);
    let mut hi = first_crossing(&s.samples, 0.9 * peak);
    if hi <= lo {
        // the whole rise happens between two samples
        let pos = s.samples.partition_point(|&(l, _)| l <= lo);
        hi = s.samples.get(pos).map_or(lo, |&(l, _)| l);
    }
    let n = opts.refined_levels.max(2);
    for k in 0..n {
        s.add(lo + (hi - lo) * k as f64 / (n - 1) as f64);
    }

    let mut converged = false;
    let mut best = s.best_triple().ok_or(Error::NoPositiveSlope)?;
    for _ in 0..opts.max_iterations {
        if best.1 >= opts.r_squared_target {
            converged = true;
            break;
        }
        let t = &s.samples[best.0..best.0 + 3];
        let gaps = [(t[1].0 - t[0].0, t[0].0, t[1].0), (t[2].0 - t[1].0, t[1].0, t[2].0)];
        let order = if gaps[1].0 > gaps[0].0 { [1, 0] } else { [0, 1] };
        let inserted = order.iter().any(|&g| s.add(0.5 * (gaps[g].1 + gaps[g].2)));
        if !inserted {
            break;
        }
        best = s.best_triple().ok_or(Error::NoPositiveSlope)?;
    }

    let t = &s.samples[best.0..best.0 + 3];
    let best_triple = [t[0], t[1], t[2]];
    let s_sii = (t[2].1 - t[0].1) / (t[2].0 - t[0].0);
    Ok(SiiCurve { r_squared: best.1, best_triple, s_sii, converged, samples: s.samples })
}

/// Converts an SII slope (1/dB) into a word-score slope (%/dB).
pub fn convert_slope(s_sii: f64, s_wrs_nh: f64, s_sii_nh: f64) -> f64 {
    (s_sii / s_sii_nh) * s_wrs_nh
}

/// Result of spectrum calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub params: SiiParameters,
    /// dB per octave around 1 kHz.
    pub tilt: f64,
    pub achieved_slope: f64,
}

const TILT_STEP: f64 = 0.1;
const TILT_LIMIT: f64 = 12.0;

/// Tilts the speech spectrum so that the zero-threshold audiogram has SII
/// slope `target` (1/dB) within `tolerance`.
///
/// The measured slope is only piecewise continuous in the tilt because the
/// selected triple can change abruptly. Tilts are scanned outward from zero
/// and every bracket is bisected; brackets that straddle a jump are skipped.
pub fn calibrate_spectrum(params: &SiiParameters, target: f64, tolerance: f64) -> Result<Calibration> {
    let zero = Audiogram::from_thresholds([0.0; 9]);
    let slope_at = |t: f64| -> Result<f64> { Ok(find_linear_range(&zero, &params.with_spectral_tilt(t))?.s_sii) };
    let at_zero = slope_at(0.0)?;
    if (at_zero - target).abs() <= tolerance {
        return Ok(Calibration { params: params.clone(), tilt: 0.0, achieved_slope: at_zero });
    }
    let steps = (TILT_LIMIT / TILT_STEP).round() as usize;
    let mut prev = [(0.0, at_zero), (0.0, at_zero)];
    for k in 1..=steps {
        for (side, sign) in [1.0, -1.0].into_iter().enumerate() {
            let t = sign * k as f64 * TILT_STEP;
            let s = slope_at(t)?;
            let (t0, s0) = prev[side];
            prev[side] = (t, s);
            if (s0 - target) * (s - target) > 0.0 {
                continue;
            }
            let (mut a, mut sa, mut b) = (t0, s0, t);
            let mut best = if (s - target).abs() < (s0 - target).abs() { (t, s) } else { (t0, s0) };
            for _ in 0..100 {
                let mid = 0.5 * (a + b);
                let sm = slope_at(mid)?;
                if (sm - target).abs() < (best.1 - target).abs() {
                    best = (mid, sm);
                }
                if (sm - target).abs() <= 0.01 * tolerance {
                    break;
                }
                if (sa - target) * (sm - target) <= 0.0 {
                    b = mid;
                } else {
                    (a, sa) = (mid, sm);
                }
            }
            if (best.1 - target).abs() <= tolerance {
                return Ok(Calibration {
                    params: params.with_spectral_tilt(best.0),
                    tilt: best.0,
                    achieved_slope: best.1,
                });
            }
        }
    }
    Err(Error::Config(format!(
        "no spectral tilt within +/-{TILT_LIMIT} dB/octave gives a zero-audiogram slope of {target}"
    )))
}
