use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use srt_core::clinical_data::{Audiogram, InputFormat};
use srt_core::estimators::Procedure;
use srt_core::pipeline::{run_on_cohort, run_pipeline, PipelineConfig};
use srt_core::protocol_sim::{
    generate_cohort, validate, write_cohort_csv, write_truth_csv, GeneratorConfig, NoiseModel,
};
use srt_core::sii_model::{calibrate_spectrum, find_linear_range, BandTable, ImportanceFunction, SiiParameters};
use srt_core::{Error, Result};

#[derive(Parser)]
#[command(name = "srtkit", version, about = "Speech recognition thresholds from incomplete word-recognition data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full analysis on a patient file and write the reports.
    Run(RunArgs),
    /// Generate a synthetic cohort with known ground truth.
    Simulate(SimulateArgs),
    /// Find the speech-spectrum tilt that reproduces the normal-hearing SII slope.
    CalibrateSii(CalibrateArgs),
    /// Simulate a cohort, estimate SRTs and compare them with the truth.
    Validate(ValidateArgs),
}

/// Flags override values from `--config`.
#[derive(Args, Default)]
struct PipelineFlags {
    /// TOML file with pipeline settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    bands: Option<PathBuf>,
    /// CSV of WRS confidence intervals (wrs,ci_low,ci_high).
    #[arg(long)]
    ci_table: Option<PathBuf>,
    /// spin or flat
    #[arg(long)]
    importance: Option<ImportanceFunction>,
    /// Tilt the speech spectrum to match the normal-hearing SII slope.
    #[arg(long)]
    calibrate: bool,
    #[arg(long)]
    corrected_delta_slope_h: bool,
    /// Worker threads, 0 for all cores.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl PipelineFlags {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(b) = &self.bands {
            cfg.band_table = Some(b.clone());
        }
        if let Some(c) = &self.ci_table {
            cfg.ci_table = Some(c.clone());
        }
        if let Some(i) = self.importance {
            cfg.importance = i;
        }
        cfg.calibrate |= self.calibrate;
        cfg.corrected_delta_slope_h |= self.corrected_delta_slope_h;
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    /// csv or json; inferred from the extension by default.
    #[arg(long)]
    format: Option<InputFormat>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// none or binomial
    #[arg(long, default_value = "binomial")]
    noise: NoiseModel,
    /// Maximum per-frequency audiogram jitter, dB.
    #[arg(long, default_value_t = 5.0)]
    jitter: f64,
    /// Directory for cohort.csv and truth.csv.
    #[arg(long, default_value = "sim")]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    bands: Option<PathBuf>,
    #[arg(long, default_value = "spin")]
    importance: ImportanceFunction,
    /// Target SII slope, 1/dB.
    #[arg(long, default_value_t = srt_core::sii_model::S_SII_NH)]
    target: f64,
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long, default_value_t = 5000)]
    n: usize,
    /// Cohort seed.
    #[arg(long = "cohort-seed", default_value_t = 1)]
    cohort_seed: u64,
    #[arg(long, default_value = "binomial")]
    noise: NoiseModel,
    #[arg(long, default_value_t = 5.0)]
    jitter: f64,
    /// Write the report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let error_dir = match &cli.command {
        Command::Run(a) => a.out.clone(),
        _ => None,
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            let report = error_report(&e);
            eprintln!("error: {e}");
            eprintln!("{report}");
            if let Some(dir) = error_dir {
                if std::fs::create_dir_all(&dir).is_ok() {
                    let _ = std::fs::write(dir.join("error.json"), format!("{report}\n"));
                }
            }
            ExitCode::from(code as u8)
        }
    }
}

fn error_report(e: &Error) -> serde_json::Value {
    let kind = format!("{e:?}");
    let kind = kind.split(|c: char| !c.is_alphanumeric()).next().unwrap_or("Error").to_string();
    serde_json::json!({ "kind": kind, "message": e.to_string(), "exit_code": e.exit_code() })
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run(a) => run(a),
        Command::Simulate(a) => simulate(a),
        Command::CalibrateSii(a) => calibrate(a),
        Command::Validate(a) => validate_cmd(a),
    }
}

fn run(a: RunArgs) -> Result<()> {
    let mut cfg = a.pipeline.resolve()?;
    if a.input.is_some() {
        cfg.input = a.input;
    }
    if a.format.is_some() {
        cfg.format = a.format;
    }
    if let Some(o) = a.out {
        cfg.output_dir = o;
    }
    let out = run_pipeline(&cfg)?;
    for w in &out.warnings {
        log::warn!("{w}");
    }
    let f = &out.flow;
    println!("patients\t{}", f.patients);
    for (c, n) in &f.categories {
        println!("{c}\t{n}");
    }
    println!("estimate_rows\t{}", f.estimate_rows);
    println!("reports\t{}", cfg.output_dir.display());
    Ok(())
}

fn generator(noise: NoiseModel, jitter: f64) -> GeneratorConfig {
    GeneratorConfig { noise, jitter_db: jitter, ..Default::default() }
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let gen = generator(a.noise, a.jitter);
    let cohort = generate_cohort(a.n, &gen, a.seed)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Config(format!("{}: {e}", a.out.display())))?;
    write_cohort_csv(&cohort, &gen.offsets, create(&a.out.join("cohort.csv"))?)?;
    write_truth_csv(&cohort, create(&a.out.join("truth.csv"))?)?;
    info!("wrote {} simulated patients to {}", cohort.len(), a.out.display());
    println!("{}", a.out.join("cohort.csv").display());
    Ok(())
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    let table = match &a.bands {
        Some(p) => BandTable::load(p)?,
        None => BandTable::builtin(),
    };
    let params = SiiParameters::new(&table, a.importance)?;
    let zero = Audiogram::from_thresholds([0.0; 9]);
    let before = find_linear_range(&zero, &params)?.s_sii;
    let cal = calibrate_spectrum(&params, a.target, a.tolerance)?;
    println!("default_slope\t{before:.7}");
    println!("tilt_db_per_octave\t{:.6}", cal.tilt);
    println!("calibrated_slope\t{:.9}", cal.achieved_slope);
    Ok(())
}

fn validate_cmd(a: ValidateArgs) -> Result<()> {
    let cfg = a.pipeline.resolve()?;
    let gen = GeneratorConfig { offsets: cfg.hl_to_spl.clone(), ..generator(a.noise, a.jitter) };
    let cohort = generate_cohort(a.n, &gen, a.cohort_seed)?;
    let (_, estimates) = run_on_cohort(&cohort, &cfg)?;
    let report = validate(&cohort, &estimates);

    let mut text = String::from("procedure,n,n_excluded,bias,rmse,coverage,median_delta_srt\n");
    for p in &report.procedures {
        text.push_str(&format!(
            "{},{},{},{:.4},{:.4},{:.4},{:.4}\n",
            p.procedure.as_str(),
            p.n,
            p.n_excluded,
            p.bias,
            p.rmse,
            p.coverage,
            p.median_delta_srt
        ));
    }
    let median = |proc| report.procedures.iter().find(|p| p.procedure == proc).map_or(f64::NAN, |p| p.median_delta_srt);
    let (f, h) = (median(Procedure::Empirical), median(Procedure::SiiSlope));
    text.push_str(&format!("# median delta_srt empirical {f:.4} dB, sii_slope {h:.4} dB\n"));
    for (c, n) in &report.categories {
        text.push_str(&format!("# category {c} {n}\n"));
    }
    match a.out {
        Some(path) => create(&path)?.write_all(text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}
