//! Python bindings for `srt_core`.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;

use srt_core::clinical_data::{
    categorize as core_categorize, compute_pta, impute_audiogram, Ear, HlToSpl, PatientRecord, SpeechMeasurement,
    SpeechPoint, FREQUENCIES,
};
use srt_core::estimators::{Procedure, SRT_NH};
use srt_core::pipeline::{self, PipelineConfig};
use srt_core::protocol_sim::{self, GeneratorConfig, NoiseModel};
use srt_core::sii_model::{self, SiiModel, SiiParameters, DELTA_SII, S_SII_NH, S_WRS_NH};
use srt_core::uncertainty::{self, WrsConfidenceTable};
use srt_core::{psychometrics, Error};

create_exception!(srt_py, SrtError, PyException, "Raised for any failure inside the SRT library.");

fn err(e: Error) -> PyErr {
    SrtError::new_err((e.to_string(), e.exit_code()))
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<PyObject> {
    let text = serde_json::to_string(value).map_err(|e| err(e.into()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn speech(points: Vec<(f64, f64)>) -> PyResult<SpeechMeasurement> {
    SpeechMeasurement::new(points.into_iter().map(|(l, w)| SpeechPoint::new(l, w)).collect()).map_err(err)
}

fn sii_params(calibrate: bool) -> PyResult<SiiParameters> {
    let params = SiiParameters::default();
    if calibrate {
        Ok(sii_model::calibrate_spectrum(&params, S_SII_NH, 1e-6).map_err(err)?.params)
    } else {
        Ok(params)
    }
}

/// Audiogram in dB HL at 250 to 8000 Hz. Missing values (`None`) are imputed.
#[pyclass(module = "srt_py", frozen)]
#[derive(Clone)]
struct Audiogram {
    inner: srt_core::clinical_data::Audiogram,
}

#[pymethods]
impl Audiogram {
    #[new]
    fn new(thresholds: Vec<Option<f64>>) -> PyResult<Self> {
        let partial: [Option<f64>; 9] = thresholds
            .try_into()
            .map_err(|v: Vec<Option<f64>>| SrtError::new_err((format!("expected 9 thresholds, got {}", v.len()), 2)))?;
        Ok(Self { inner: impute_audiogram(&partial).map_err(err)? })
    }

    #[staticmethod]
    fn frequencies() -> Vec<f64> {
        FREQUENCIES.to_vec()
    }

    #[getter]
    fn thresholds(&self) -> Vec<f64> {
        self.inner.thresholds().to_vec()
    }

    #[getter]
    fn imputed(&self) -> Vec<bool> {
        self.inner.imputed().to_vec()
    }

    /// `(pta_hl, pta_spl)` with the default HL to SPL offsets.
    fn pta(&self) -> (f64, f64) {
        compute_pta(&self.inner, &HlToSpl::default())
    }

    #[pyo3(signature = (level, calibrate = false))]
    fn sii(&self, level: f64, calibrate: bool) -> PyResult<f64> {
        let params = sii_params(calibrate)?;
        Ok(SiiModel::new(&self.inner, &params).sii(level))
    }

    /// Linear range of the SII-level curve and its slope.
    #[pyo3(signature = (calibrate = false))]
    fn sii_curve<'py>(&self, py: Python<'py>, calibrate: bool) -> PyResult<Bound<'py, PyDict>> {
        let params = sii_params(calibrate)?;
        let c = sii_model::find_linear_range(&self.inner, &params).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("s_sii", c.s_sii)?;
        d.set_item("s_h", sii_model::convert_slope(c.s_sii, S_WRS_NH, S_SII_NH))?;
        d.set_item("r_squared", c.r_squared)?;
        d.set_item("converged", c.converged)?;
        d.set_item("best_triple", c.best_triple.to_vec())?;
        d.set_item("samples", c.samples)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!("Audiogram({:?})", self.inner.thresholds())
    }
}

/// Logistic psychometric function with slope on the 100 % scale.
#[pyclass(module = "srt_py", frozen)]
struct PsychometricFunction {
    inner: psychometrics::PsychometricFunction,
}

#[pymethods]
impl PsychometricFunction {
    #[new]
    #[pyo3(signature = (srt, slope, wrs_max = 100.0))]
    fn new(srt: f64, slope: f64, wrs_max: f64) -> PyResult<Self> {
        Ok(Self { inner: psychometrics::PsychometricFunction::new(srt, slope, wrs_max).map_err(err)? })
    }

    #[getter]
    fn srt(&self) -> f64 {
        self.inner.srt
    }

    #[getter]
    fn slope(&self) -> f64 {
        self.inner.slope
    }

    #[getter]
    fn wrs_max(&self) -> f64 {
        self.inner.wrs_max
    }

    fn evaluate(&self, level: f64) -> f64 {
        self.inner.evaluate(level)
    }

    fn level_at(&self, wrs: f64) -> Option<f64> {
        self.inner.level_at(wrs)
    }
}

type Point = (f64, f64);

/// `(category, slope_area_points, wrs_max_point)` for measured `(level, wrs)` pairs.
#[pyfunction]
#[pyo3(signature = (points, floor = 10.0))]
fn categorize(points: Vec<Point>, floor: f64) -> PyResult<(String, Vec<Point>, Point)> {
    let c = core_categorize(&speech(points)?, floor);
    Ok((
        c.category.as_str().to_string(),
        c.slope_area.iter().map(|p| (p.level, p.wrs)).collect(),
        (c.wrs_max_point.level, c.wrs_max_point.wrs),
    ))
}

/// SRT estimates for one ear, one dict per applicable procedure.
#[pyfunction]
#[pyo3(signature = (audiogram, points, calibrate = false, corrected_delta_slope_h = false))]
fn estimate(
    py: Python<'_>,
    audiogram: &Audiogram,
    points: Vec<(f64, f64)>,
    calibrate: bool,
    corrected_delta_slope_h: bool,
) -> PyResult<PyObject> {
    let cfg = PipelineConfig { calibrate, corrected_delta_slope_h, ..Default::default() };
    let record = PatientRecord::new("py", Ear::Right, audiogram.inner.clone(), speech(points)?, &cfg.hl_to_spl);
    let (_, _, estimates) = pipeline::estimate_record(&record, &cfg).map_err(err)?;
    to_py(py, &estimates)
}

#[pyfunction]
#[pyo3(signature = (s_sii, s_wrs_nh = S_WRS_NH, s_sii_nh = S_SII_NH))]
fn convert_slope(s_sii: f64, s_wrs_nh: f64, s_sii_nh: f64) -> f64 {
    sii_model::convert_slope(s_sii, s_wrs_nh, s_sii_nh)
}

#[pyfunction]
#[pyo3(signature = (delta_sii = DELTA_SII))]
fn delta_slope_sii(delta_sii: f64) -> f64 {
    uncertainty::delta_slope_sii(delta_sii)
}

#[pyfunction]
fn delta_srt(wrs: f64, delta_wrs: f64, slope: f64, delta_slope: f64) -> PyResult<f64> {
    uncertainty::delta_srt(wrs, delta_wrs, slope, delta_slope).map_err(err)
}

/// `(delta_low, delta_high, delta)` half-widths of the interval around a 20-word list score.
#[pyfunction]
fn wrs_ci(wrs: f64) -> PyResult<(f64, f64, f64)> {
    uncertainty::wrs_ci(wrs, &WrsConfidenceTable::default()).map_err(err)
}

/// `(tilt_db_per_octave, achieved_slope)`
#[pyfunction]
#[pyo3(signature = (target = S_SII_NH, tolerance = 1e-6))]
fn calibrate_sii(target: f64, tolerance: f64) -> PyResult<(f64, f64)> {
    let cal = sii_model::calibrate_spectrum(&SiiParameters::default(), target, tolerance).map_err(err)?;
    Ok((cal.tilt, cal.achieved_slope))
}

fn generator(noise: &str, jitter: f64) -> PyResult<GeneratorConfig> {
    let noise: NoiseModel = noise.parse().map_err(err)?;
    Ok(GeneratorConfig { noise, jitter_db: jitter, ..Default::default() })
}

/// Synthetic patients with their ground truth and measured scores.
#[pyfunction]
#[pyo3(signature = (n, seed = 1, noise = "binomial", jitter = 5.0))]
fn simulate_cohort(py: Python<'_>, n: usize, seed: u64, noise: &str, jitter: f64) -> PyResult<PyObject> {
    let cohort = protocol_sim::generate_cohort(n, &generator(noise, jitter)?, seed).map_err(err)?;
    to_py(py, &cohort)
}

/// Simulates a cohort, estimates it and returns the per-procedure accuracy.
#[pyfunction]
#[pyo3(signature = (n, seed = 1, noise = "binomial", jitter = 5.0, workers = 0))]
fn validate(py: Python<'_>, n: usize, seed: u64, noise: &str, jitter: f64, workers: usize) -> PyResult<PyObject> {
    let cohort = protocol_sim::generate_cohort(n, &generator(noise, jitter)?, seed).map_err(err)?;
    let cfg = PipelineConfig { workers, ..Default::default() };
    let report = py
        .allow_threads(|| pipeline::run_on_cohort(&cohort, &cfg).map(|(_, est)| protocol_sim::validate(&cohort, &est)))
        .map_err(err)?;
    to_py(py, &report)
}

/// Runs the full analysis and writes the reports. Returns the patient flow.
#[pyfunction]
#[pyo3(signature = (input, output_dir, config = None, workers = None, seed = None, calibrate = false))]
fn run_pipeline(
    py: Python<'_>,
    input: PathBuf,
    output_dir: PathBuf,
    config: Option<PathBuf>,
    workers: Option<usize>,
    seed: Option<u64>,
    calibrate: bool,
) -> PyResult<PyObject> {
    let mut cfg = match config {
        Some(p) => PipelineConfig::load(&p).map_err(err)?,
        None => PipelineConfig::default(),
    };
    cfg.input = Some(input);
    cfg.output_dir = output_dir;
    cfg.calibrate |= calibrate;
    if let Some(w) = workers {
        cfg.workers = w;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let out = py.allow_threads(|| pipeline::run_pipeline(&cfg)).map_err(err)?;
    to_py(py, &out.flow)
}

#[pymodule]
fn srt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SrtError", m.py().get_type::<SrtError>())?;
    m.add("SRT_NH", SRT_NH)?;
    m.add("S_WRS_NH", S_WRS_NH)?;
    m.add("S_SII_NH", S_SII_NH)?;
    m.add("DELTA_SII", DELTA_SII)?;
    m.add("PROCEDURES", Procedure::ESTIMATING.map(|p| p.as_str()).to_vec())?;
    m.add_class::<Audiogram>()?;
    m.add_class::<PsychometricFunction>()?;
    m.add_function(wrap_pyfunction!(categorize, m)?)?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(convert_slope, m)?)?;
    m.add_function(wrap_pyfunction!(delta_slope_sii, m)?)?;
    m.add_function(wrap_pyfunction!(delta_srt, m)?)?;
    m.add_function(wrap_pyfunction!(wrs_ci, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_sii, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_cohort, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
