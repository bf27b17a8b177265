//! End-to-end analysis: ingest, categorise, SII slopes, estimates, statistics
//! and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis_stats::{compare_distributions, glm_cv, DistComparison, GlmFit, GlmRow, ALPHA};
use crate::clinical_data::{
    categorize, dedup_audiograms, ingest, select_better_ears, Categorization, HlToSpl, IngestReport, InputFormat,
    PatientRecord, SlopeCategory, TieBreak,
};
use crate::estimators::{
    estimate_empirical, estimate_nh_slope, estimate_sii_slope, AnchorTieBreak, EstimatorConfig, Procedure, SrtEstimate,
};
use crate::protocol_sim::SimulatedPatient;
use crate::sii_model::{
    self, calibrate_spectrum, find_linear_range, BandTable, ImportanceFunction, SiiCurve, SiiParameters,
};
use crate::uncertainty::{self, WrsConfidenceTable};
use crate::{Error, Result};

pub const PERCENTILES: [f64; 5] = [10.0, 30.0, 50.0, 70.0, 90.0];

type PatientValue<'a> = dyn Fn(&PatientResult) -> f64 + 'a;
type EstimatePoint<'a> = dyn Fn(&PatientResult, &SrtEstimate) -> Option<(f64, f64)> + 'a;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub input: Option<PathBuf>,
    /// Inferred from the input extension when absent.
    pub format: Option<InputFormat>,
    pub output_dir: PathBuf,
    pub band_table: Option<PathBuf>,
    pub ci_table: Option<PathBuf>,
    pub importance: ImportanceFunction,
    /// dB SPL
    pub srt_nh: f64,
    /// %/dB
    pub s_wrs_nh: f64,
    /// 1/dB
    pub s_sii_nh: f64,
    pub delta_sii: f64,
    /// dB
    pub delta_pta: f64,
    /// Tilt the speech spectrum so the zero audiogram reproduces `s_sii_nh`.
    pub calibrate: bool,
    pub corrected_delta_slope_h: bool,
    pub level_distortion: bool,
    /// WRS_max below this (percent) allows no estimate.
    pub no_estimation_floor: f64,
    pub audibility_margin: f64,
    pub ear_tie_break: TieBreak,
    pub anchor_tie_break: AnchorTieBreak,
    pub hl_to_spl: HlToSpl,
    pub folds: usize,
    /// Worker threads; 0 uses every core. Never changes the reports.
    pub workers: usize,
    pub seed: u64,
    /// dB
    pub pta_bin: f64,
    /// %
    pub wrs_bin: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input: None,
            format: None,
            output_dir: PathBuf::from("out"),
            band_table: None,
            ci_table: None,
            importance: ImportanceFunction::Spin,
            srt_nh: crate::estimators::SRT_NH,
            s_wrs_nh: sii_model::S_WRS_NH,
            s_sii_nh: sii_model::S_SII_NH,
            delta_sii: sii_model::DELTA_SII,
            delta_pta: uncertainty::DELTA_PTA,
            calibrate: false,
            corrected_delta_slope_h: false,
            level_distortion: true,
            no_estimation_floor: crate::clinical_data::categorize::DEFAULT_NO_ESTIMATION_FLOOR,
            audibility_margin: 10.0,
            ear_tie_break: TieBreak::Right,
            anchor_tie_break: AnchorTieBreak::LowerLevel,
            hl_to_spl: HlToSpl::default(),
            folds: 10,
            workers: 0,
            seed: 20240601,
            pta_bin: 5.0,
            wrs_bin: 5.0,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("srt_nh", self.srt_nh),
            ("s_wrs_nh", self.s_wrs_nh),
            ("s_sii_nh", self.s_sii_nh),
            ("delta_sii", self.delta_sii),
            ("delta_pta", self.delta_pta),
            ("pta_bin", self.pta_bin),
            ("wrs_bin", self.wrs_bin),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.no_estimation_floor >= 0.0 && self.audibility_margin >= 0.0) {
            return Err(Error::Config("floor and audibility margin must be non-negative".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("at least two folds are required".into()));
        }
        Ok(())
    }

    fn estimator_config(&self) -> EstimatorConfig {
        EstimatorConfig {
            srt_nh: self.srt_nh,
            s_wrs_nh: self.s_wrs_nh,
            delta_pta: self.delta_pta,
            audibility_margin: self.audibility_margin,
            anchor_tie_break: self.anchor_tie_break,
        }
    }

    /// SHA-256 over the settings that can change the reports.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.workers = 0;
        c.output_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Patient counts at every stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Flow {
    pub rows_read: usize,
    pub rows_rejected: usize,
    pub rows_without_audiogram: usize,
    pub rows_without_speech: usize,
    pub rows_superseded: usize,
    pub rows_merged: usize,
    pub ear_records: usize,
    pub other_ear_dropped: usize,
    pub patients: usize,
    pub categories: BTreeMap<SlopeCategory, usize>,
    pub unique_audiograms: usize,
    pub sii_failures: usize,
    pub estimate_rows: usize,
    pub excluded_estimates: usize,
}

impl Flow {
    fn from_ingest(report: &IngestReport) -> Self {
        Flow {
            rows_read: report.rows_read,
            rows_rejected: report.rejected.len(),
            rows_without_audiogram: report.excluded_no_audiogram,
            rows_without_speech: report.excluded_no_speech,
            rows_superseded: report.superseded_sessions,
            rows_merged: report.merged_rows,
            ear_records: report.records.len(),
            ..Default::default()
        }
    }

    /// Every stage accounts for all of its input.
    pub fn check(&self) -> Result<()> {
        let rows = self.rows_rejected
            + self.rows_without_audiogram
            + self.rows_without_speech
            + self.rows_superseded
            + self.rows_merged
            + self.ear_records;
        let ok = rows == self.rows_read
            && self.patients + self.other_ear_dropped == self.ear_records
            && self.categories.values().sum::<usize>() == self.patients;
        if ok {
            Ok(())
        } else {
            Err(Error::InsufficientData(format!("patient counts do not reconcile: {self:?}")))
        }
    }
}

/// One patient after categorisation and SII analysis.
#[derive(Debug, Clone)]
pub struct PatientResult {
    pub record: PatientRecord,
    pub categorization: Categorization,
    pub sii: Option<SiiCurve>,
    /// %/dB
    pub s_h: Option<f64>,
    pub estimates: Vec<SrtEstimate>,
}

/// In-memory reports, keyed by path relative to the output directory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Reports {
    pub files: BTreeMap<String, String>,
}

impl Reports {
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (name, content) in &self.files {
            let path = dir.join(name);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(path, content)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub flow: Flow,
    pub patients: Vec<PatientResult>,
    pub comparisons: Vec<(String, SlopeCategory, SlopeCategory, DistComparison)>,
    pub glm: Option<GlmFit>,
    pub calibration_tilt: Option<f64>,
    pub warnings: Vec<String>,
    pub reports: Reports,
}

/// Runs the whole analysis on the configured input and writes the reports.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let input = cfg.input.as_ref().ok_or_else(|| Error::Config("no input file given".into()))?;
    let format = match cfg.format {
        Some(f) => f,
        None => InputFormat::from_path(input)
            .ok_or_else(|| Error::Config(format!("cannot infer the format of {}", input.display())))?,
    };
    let report = ingest(input, format, &cfg.hl_to_spl).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("{}: {io}", input.display())),
        other => other,
    })?;
    info!("read {} rows: {} rejected, {} ear records", report.rows_read, report.rejected.len(), report.records.len());
    let out = run_on_ingested(report, cfg)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    out.reports.write(&cfg.output_dir)?;
    Ok(out)
}

/// Runs the analysis on already ingested data without touching the disk.
pub fn run_on_ingested(report: IngestReport, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| analyse(report, cfg))
}

/// Runs the analysis on a simulated cohort and pairs every estimate with the
/// index of its patient in `cohort`.
pub fn run_on_cohort(
    cohort: &[SimulatedPatient],
    cfg: &PipelineConfig,
) -> Result<(PipelineOutput, Vec<(usize, SrtEstimate)>)> {
    let records: Vec<PatientRecord> = cohort.iter().map(|p| p.to_record(&cfg.hl_to_spl)).collect();
    let report = IngestReport { rows_read: records.len(), records, ..Default::default() };
    let out = run_on_ingested(report, cfg)?;
    let index: BTreeMap<&str, usize> = cohort.iter().enumerate().map(|(i, p)| (p.id.as_str(), i)).collect();
    let mut pairs = Vec::with_capacity(out.flow.estimate_rows);
    for p in &out.patients {
        let i = *index
            .get(p.record.id.as_str())
            .ok_or_else(|| Error::InsufficientData(format!("unknown id {}", p.record.id)))?;
        pairs.extend(p.estimates.iter().map(|e| (i, e.clone())));
    }
    Ok((out, pairs))
}

/// Categorises and estimates one record with the same routing as the full run.
pub fn estimate_record(
    record: &PatientRecord,
    cfg: &PipelineConfig,
) -> Result<(Categorization, Option<SiiCurve>, Vec<SrtEstimate>)> {
    cfg.validate()?;
    let cat = categorize(&record.speech, cfg.no_estimation_floor);
    let sii = match cat.category {
        SlopeCategory::FullyDetermined | SlopeCategory::HalfDetermined => {
            let (params, _) = sii_parameters(cfg)?;
            find_linear_range(&record.audiogram, &params).ok()
        }
        _ => None,
    };
    let s_h = sii.as_ref().map(|c| sii_model::convert_slope(c.s_sii, cfg.s_wrs_nh, cfg.s_sii_nh));
    let estimates = estimate_patient(record, &cat, sii.as_ref(), s_h, &ci_table(cfg)?, &cfg.estimator_config(), cfg)?;
    Ok((cat, sii, estimates))
}

fn sii_parameters(cfg: &PipelineConfig) -> Result<(SiiParameters, Option<f64>)> {
    let table = match &cfg.band_table {
        Some(p) => BandTable::load(p).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("{}: {io}", p.display())),
            other => other,
        })?,
        None => BandTable::builtin(),
    };
    let mut params = SiiParameters::new(&table, cfg.importance)?;
    params.level_distortion_enabled = cfg.level_distortion;
    if cfg.calibrate {
        let cal = calibrate_spectrum(&params, cfg.s_sii_nh, 1e-6)?;
        info!("calibrated spectrum tilt {:.4} dB/octave, slope {:.7}", cal.tilt, cal.achieved_slope);
        return Ok((cal.params, Some(cal.tilt)));
    }
    Ok((params, None))
}

fn ci_table(cfg: &PipelineConfig) -> Result<WrsConfidenceTable> {
    match &cfg.ci_table {
        Some(p) => WrsConfidenceTable::load(p).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("{}: {io}", p.display())),
            other => other,
        }),
        None => Ok(WrsConfidenceTable::default()),
    }
}

fn analyse(report: IngestReport, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let (params, calibration_tilt) = sii_parameters(cfg)?;
    let table = ci_table(cfg)?;
    let est_cfg = cfg.estimator_config();
    let mut flow = Flow::from_ingest(&report);
    let mut warnings: Vec<String> = report.warnings.clone();
    warnings.extend(report.rejected.iter().map(|r| format!("rejected line {}: {}", r.line, r.message)));

    let records = select_better_ears(report.records, cfg.ear_tie_break);
    flow.patients = records.len();
    flow.other_ear_dropped = flow.ear_records - flow.patients;

    let categorized: Vec<(PatientRecord, Categorization)> = records
        .into_par_iter()
        .map(|r| {
            let c = categorize(&r.speech, cfg.no_estimation_floor);
            (r, c)
        })
        .collect();
    for c in SlopeCategory::ALL {
        flow.categories.insert(c, 0);
    }
    for (_, c) in &categorized {
        *flow.categories.get_mut(&c.category).expect("all categories present") += 1;
    }

    // SII slopes are only needed where a slope-area point exists
    let needs_sii: Vec<usize> = (0..categorized.len())
        .filter(|&i| {
            matches!(categorized[i].1.category, SlopeCategory::FullyDetermined | SlopeCategory::HalfDetermined)
        })
        .collect();
    let (unique, map) = dedup_audiograms(needs_sii.iter().map(|&i| &categorized[i].0.audiogram));
    flow.unique_audiograms = unique.len();
    let curves: Vec<Result<SiiCurve>> = unique.par_iter().map(|a| find_linear_range(a, &params)).collect();
    let mut curve_of: Vec<Option<usize>> = vec![None; categorized.len()];
    for (k, &i) in needs_sii.iter().enumerate() {
        curve_of[i] = Some(map[k]);
    }
    for (a, c) in unique.iter().zip(&curves) {
        match c {
            Err(e) => warnings.push(format!("SII slope unavailable for audiogram {:?}: {e}", a.thresholds())),
            Ok(c) if !c.converged => warnings.push(format!(
                "SII refinement stopped at R^2 {:.4} for audiogram {:?}",
                c.r_squared,
                a.thresholds()
            )),
            Ok(_) => {}
        }
    }

    let patients: Vec<PatientResult> = categorized
        .into_par_iter()
        .zip(curve_of)
        .map(|((record, categorization), curve_idx)| {
            let sii = curve_idx.and_then(|k| curves[k].as_ref().ok().cloned());
            let s_h = sii.as_ref().map(|c| sii_model::convert_slope(c.s_sii, cfg.s_wrs_nh, cfg.s_sii_nh));
            let estimates = estimate_patient(&record, &categorization, sii.as_ref(), s_h, &table, &est_cfg, cfg)?;
            Ok(PatientResult { record, categorization, sii, s_h, estimates })
        })
        .collect::<Result<_>>()?;

    flow.sii_failures = patients.iter().filter(|p| curve_is_missing(p)).count();
    flow.estimate_rows = patients.iter().map(|p| p.estimates.len()).sum();
    flow.excluded_estimates = patients.iter().flat_map(|p| &p.estimates).filter(|e| e.excluded()).count();
    flow.check()?;
    info!("{} patients, {} estimate rows", flow.patients, flow.estimate_rows);

    let comparisons = comparisons(&patients, cfg, &mut warnings);
    let glm_rows = glm_rows(&patients);
    let glm = match glm_cv(&glm_rows, cfg.folds, cfg.seed) {
        Ok(fit) => Some(fit),
        Err(e) => {
            warn!("GLM skipped: {e}");
            warnings.push(format!("GLM skipped: {e}"));
            None
        }
    };

    let mut out =
        PipelineOutput { flow, patients, comparisons, glm, calibration_tilt, warnings, reports: Reports::default() };
    out.reports = render(&out, cfg)?;
    Ok(out)
}

fn curve_is_missing(p: &PatientResult) -> bool {
    matches!(p.categorization.category, SlopeCategory::FullyDetermined | SlopeCategory::HalfDetermined)
        && p.sii.is_none()
}

fn estimate_patient(
    record: &PatientRecord,
    cat: &Categorization,
    sii: Option<&SiiCurve>,
    s_h: Option<f64>,
    table: &WrsConfidenceTable,
    est_cfg: &EstimatorConfig,
    cfg: &PipelineConfig,
) -> Result<Vec<SrtEstimate>> {
    let pta = record.pta_spl;
    let sii_estimate = || -> Result<SrtEstimate> {
        let delta_s_h = match (cfg.corrected_delta_slope_h, sii) {
            (true, Some(c)) => uncertainty::delta_slope_sii_corrected(
                cfg.delta_sii,
                c.best_triple[2].0 - c.best_triple[0].0,
                cfg.s_wrs_nh,
                cfg.s_sii_nh,
            )?,
            _ => uncertainty::delta_slope_sii(cfg.delta_sii),
        };
        estimate_sii_slope(cat, pta, s_h.unwrap_or(0.0), delta_s_h, table, est_cfg)
    };
    Ok(match cat.category {
        SlopeCategory::FullyDetermined => vec![estimate_empirical(cat, pta, table, est_cfg)?, sii_estimate()?],
        SlopeCategory::HalfDetermined => vec![sii_estimate()?],
        SlopeCategory::Undetermined => vec![estimate_nh_slope(cat, pta, est_cfg)],
        SlopeCategory::NoEstimation => vec![SrtEstimate::no_estimation(cat.category)],
    })
}

fn comparisons(
    patients: &[PatientResult],
    cfg: &PipelineConfig,
    warnings: &mut Vec<String>,
) -> Vec<(String, SlopeCategory, SlopeCategory, DistComparison)> {
    use SlopeCategory::*;
    let values = |cat: SlopeCategory, f: &dyn Fn(&PatientResult) -> f64| -> Vec<f64> {
        patients.iter().filter(|p| p.categorization.category == cat).map(f).collect()
    };
    let mut out = Vec::new();
    let variables: [(&str, f64, &PatientValue<'_>); 2] = [
        ("pta_spl", cfg.pta_bin, &|p: &PatientResult| p.record.pta_spl),
        ("wrs_max", cfg.wrs_bin, &|p: &PatientResult| p.categorization.wrs_max_point.wrs),
    ];
    for (name, bin, f) in variables {
        for (a, b) in
            [(FullyDetermined, HalfDetermined), (FullyDetermined, Undetermined), (HalfDetermined, Undetermined)]
        {
            match compare_distributions(&values(a, f), &values(b, f), bin) {
                Ok(c) => out.push((name.to_string(), a, b, c)),
                Err(e) => warnings.push(format!("comparison of {name} between {a} and {b} skipped: {e}")),
            }
        }
    }
    out
}

/// SRT_f minus SRT_h for fully determined patients where both are included.
fn glm_rows(patients: &[PatientResult]) -> Vec<GlmRow> {
    patients
        .iter()
        .filter_map(|p| {
            let find = |proc| p.estimates.iter().find(|e| e.procedure == proc && !e.excluded());
            let (f, h) = (find(Procedure::Empirical)?, find(Procedure::SiiSlope)?);
            Some(GlmRow { srt_diff: f.srt? - h.srt?, s_h: h.slope_used?, wrs_minus_50: h.anchor?.point.wrs - 50.0 })
        })
        .collect()
}

/// Percentiles with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileRow {
    /// Lower edge of the bin.
    pub bin: f64,
    pub n: usize,
    pub values: Vec<f64>,
}

/// Per-bin percentiles of `(x, value)` pairs; empty bins are omitted.
pub fn percentile_series(points: &[(f64, f64)], bin_width: f64, percentiles: &[f64]) -> Vec<PercentileRow> {
    let mut bins: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for &(x, v) in points {
        bins.entry((x / bin_width).floor() as i64).or_default().push(v);
    }
    bins.into_iter()
        .map(|(k, mut vals)| {
            vals.sort_by(f64::total_cmp);
            PercentileRow {
                bin: k as f64 * bin_width,
                n: vals.len(),
                values: percentiles.iter().map(|&p| percentile(&vals, p)).collect(),
            }
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn bin_of(x: f64, w: f64) -> f64 {
    (x / w).floor() * w
}

pub const ESTIMATES_HEADER: &str = "id,ear,category,procedure,srt,slope,delta_slope,delta_srt,srt_min,anchor_level,anchor_wrs,anchor_inaudible,pta_hl,pta_spl,wrs_max,s_sii,sii_r2,sii_converged,plomp_a,plomp_d,delta_d,excluded,reason";
pub const POPULATION_HEADER: &str = "kind,category,wrs_max,pta_bin,count";
pub const STATS_HEADER: &str =
    "variable,group_x,group_y,n_x,n_y,overlapping_index,welch_p,ks_p,mean_differs,distribution_differs";
pub const GLM_HEADER: &str = "fold,term,estimate,se,t_stat,p_value,n_train,n_test,mse";
pub const PERCENTILE_HEADER: &str = "procedure,bin,n,p10,p30,p50,p70,p90";
pub const COMPARISON_HEADER: &str = "id,category,pta_spl,wrs_max,srt_empirical,srt_sii_slope,srt_nh_slope";

fn render(out: &PipelineOutput, cfg: &PipelineConfig) -> Result<Reports> {
    let mut files = BTreeMap::new();

    let mut s = String::from(ESTIMATES_HEADER);
    s.push('\n');
    for p in &out.patients {
        let r = &p.record;
        for e in &p.estimates {
            let reason: Vec<&str> = e.exclusions.iter().map(|x| x.as_str()).collect();
            let (s_sii, r2, conv) = match (&p.sii, e.procedure) {
                (Some(c), Procedure::SiiSlope) => (Some(c.s_sii), Some(c.r_squared), c.converged.to_string()),
                _ => (None, None, String::new()),
            };
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.id,
                r.ear,
                e.category,
                e.procedure,
                opt(e.srt),
                opt(e.slope_used),
                opt(e.delta_slope),
                opt(e.delta_srt),
                opt(e.srt_min),
                opt(e.anchor.map(|a| a.point.level)),
                opt(e.anchor.map(|a| a.point.wrs)),
                e.anchor.map(|a| a.inaudible.to_string()).unwrap_or_default(),
                r.pta_hl,
                r.pta_spl,
                p.categorization.wrs_max_point.wrs,
                opt(s_sii),
                opt(r2),
                conv,
                opt(e.plomp_a),
                opt(e.plomp_d),
                opt(e.delta_d),
                e.excluded(),
                reason.join(";"),
            )
            .expect("write to string");
        }
    }
    files.insert("estimates.csv".to_string(), s);

    let mut s = String::from(POPULATION_HEADER);
    s.push('\n');
    for (c, n) in &out.flow.categories {
        writeln!(s, "category,{c},,,{n}").expect("write to string");
    }
    let mut grid: BTreeMap<(SlopeCategory, i64, i64), usize> = BTreeMap::new();
    for p in &out.patients {
        let w = (p.categorization.wrs_max_point.wrs / cfg.wrs_bin).floor() as i64;
        let b = (p.record.pta_spl / cfg.pta_bin).floor() as i64;
        *grid.entry((p.categorization.category, w, b)).or_default() += 1;
    }
    for ((c, w, b), n) in grid {
        writeln!(s, "grid,{c},{},{},{n}", w as f64 * cfg.wrs_bin, b as f64 * cfg.pta_bin).expect("write to string");
    }
    files.insert("population.csv".to_string(), s);

    let mut s = String::from(STATS_HEADER);
    s.push('\n');
    for (var, a, b, c) in &out.comparisons {
        writeln!(
            s,
            "{var},{a},{b},{},{},{},{},{},{},{}",
            c.n_x,
            c.n_y,
            c.overlapping_index,
            c.welch_p,
            c.ks_p,
            c.welch_p < ALPHA,
            c.ks_p < ALPHA
        )
        .expect("write to string");
    }
    files.insert("stats.csv".to_string(), s);

    let mut s = String::from(GLM_HEADER);
    s.push('\n');
    const TERMS: [&str; 3] = ["intercept", "s_h", "wrs_minus_50"];
    if let Some(g) = &out.glm {
        for f in &g.folds {
            for (t, c) in TERMS.iter().zip(&f.coefs) {
                writeln!(
                    s,
                    "{},{t},{},{},{},{},{},{},{}",
                    f.fold, c.estimate, c.se, c.t, c.p, f.n_train, f.n_test, f.mse
                )
                .expect("write to string");
            }
        }
        for (t, c) in TERMS.iter().zip(&g.mean) {
            writeln!(s, "mean,{t},{},{},{},{},,,{}", c.estimate, c.se, c.t, c.p, g.rmse_cv * g.rmse_cv)
                .expect("write to string");
        }
    }
    files.insert("glm.csv".to_string(), s);

    let included = |proc: Procedure| {
        out.patients.iter().flat_map(move |p| {
            p.estimates.iter().filter(move |e| e.procedure == proc && !e.excluded()).map(move |e| (p, e))
        })
    };
    let series = |f: &EstimatePoint<'_>, bin: f64| {
        let mut s = String::from(PERCENTILE_HEADER);
        s.push('\n');
        for proc in Procedure::ESTIMATING {
            let points: Vec<(f64, f64)> = included(proc).filter_map(|(p, e)| f(p, e)).collect();
            for row in percentile_series(&points, bin, &PERCENTILES) {
                let vals: Vec<String> = row.values.iter().map(f64::to_string).collect();
                writeln!(s, "{proc},{},{},{}", row.bin, row.n, vals.join(",")).expect("write to string");
            }
        }
        s
    };
    // SRT loss relative to normal hearing, over PTA
    let srt_nh = cfg.srt_nh;
    files.insert(
        "plotdata/srt_loss_by_pta.csv".to_string(),
        series(&|p, e| Some((p.record.pta_spl, e.srt? - srt_nh)), cfg.pta_bin),
    );
    // D over discrimination loss
    files.insert(
        "plotdata/plomp_d_by_discrimination_loss.csv".to_string(),
        series(&|p, e| Some((100.0 - p.categorization.wrs_max_point.wrs, e.plomp_d?)), cfg.wrs_bin),
    );

    let mut s = String::from(COMPARISON_HEADER);
    s.push('\n');
    for p in &out.patients {
        let srt = |proc| opt(p.estimates.iter().find(|e| e.procedure == proc && !e.excluded()).and_then(|e| e.srt));
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            p.record.id,
            p.categorization.category,
            p.record.pta_spl,
            p.categorization.wrs_max_point.wrs,
            srt(Procedure::Empirical),
            srt(Procedure::SiiSlope),
            srt(Procedure::NhSlope)
        )
        .expect("write to string");
    }
    files.insert("plotdata/procedure_comparison.csv".to_string(), s);

    let pta_bins: BTreeMap<String, usize> = out.patients.iter().fold(BTreeMap::new(), |mut m, p| {
        *m.entry(bin_of(p.record.pta_spl, cfg.pta_bin).to_string()).or_default() += 1;
        m
    });
    let manifest = serde_json::json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "constants": {
            "srt_nh": cfg.srt_nh,
            "s_wrs_nh": cfg.s_wrs_nh,
            "s_sii_nh": cfg.s_sii_nh,
            "delta_sii": cfg.delta_sii,
            "delta_pta": cfg.delta_pta,
        },
        "calibration_tilt_db_per_octave": out.calibration_tilt,
        "flow": out.flow,
        "patients_per_pta_bin": pta_bins,
        "glm": out.glm.as_ref().map(|g| serde_json::json!({
            "rows": g.folds.iter().map(|f| f.n_test).sum::<usize>(),
            "rmse_cv": g.rmse_cv,
            "pearson_r": g.pearson_r,
            "rmse": g.rmse,
            "bias": g.bias,
        })),
        "warnings": out.warnings,
        "files": files.keys().collect::<Vec<_>>(),
    });
    files.insert("manifest.json".to_string(), serde_json::to_string_pretty(&manifest)? + "\n");
    Ok(Reports { files })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_examples() {
        let one = percentile_series(&[(3.0, 7.0)], 5.0, &PERCENTILES);
        assert_eq!(one.len(), 1);
        assert!(one[0].values.iter().all(|&v| v == 7.0));
        let decile: Vec<(f64, f64)> = (0..=10).map(|k| (1.0, 10.0 * f64::from(k))).collect();
        let rows = percentile_series(&decile, 5.0, &PERCENTILES);
        assert_eq!(rows[0].values[2], 50.0);
        assert_eq!(rows[0].values[0], 10.0);
        let spread: Vec<(f64, f64)> = (0..=1000).map(|k| (0.0, f64::from(k) / 10.0)).collect();
        assert!((percentile_series(&spread, 5.0, &[50.0])[0].values[0] - 50.0).abs() < 1e-9);
    }

    #[test]
    fn empty_bins_are_omitted() {
        let rows = percentile_series(&[(1.0, 1.0), (21.0, 2.0)], 5.0, &[50.0]);
        assert_eq!(rows.iter().map(|r| r.bin).collect::<Vec<_>>(), vec![0.0, 20.0]);
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = PipelineConfig::default();
        assert_eq!((c.srt_nh, c.s_wrs_nh, c.s_sii_nh, c.delta_sii, c.delta_pta), (29.3, 4.5, 0.0307, 0.00084, 5.0));
        let parsed = PipelineConfig::from_toml_str("seed = 7\nimportance = \"flat\"\n").unwrap();
        assert_eq!(parsed.seed, 7);
        assert_eq!(parsed.importance, ImportanceFunction::Flat);
        assert!(matches!(PipelineConfig::from_toml_str("srt_nh = -1.0"), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::from_toml_str("unknown = 1"), Err(Error::Config(_))));
    }

    #[test]
    fn hash_ignores_worker_count() {
        let a = PipelineConfig::default();
        let b = PipelineConfig { workers: 3, output_dir: "elsewhere".into(), ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), PipelineConfig { seed: 1, ..a.clone() }.hash());
    }
}
