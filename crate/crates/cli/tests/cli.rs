use std::path::Path;
use std::process::{Command, Output};

fn srtkit(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srtkit")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn simulate_then_run_writes_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let sim = srtkit(&["simulate", "--n", "300", "--seed", "9", "--out", "sim"], dir);
    assert!(sim.status.success(), "{}", String::from_utf8_lossy(&sim.stderr));
    let truth = std::fs::read_to_string(dir.join("sim/truth.csv")).unwrap();
    assert_eq!(truth.lines().count(), 301);

    let run = srtkit(&["run", "--input", "sim/cohort.csv", "--out", "out", "--workers", "2"], dir);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(stdout(&run).contains("patients\t300"));
    for f in ["estimates.csv", "population.csv", "stats.csv", "glm.csv", "manifest.json"] {
        assert!(dir.join("out").join(f).is_file(), "{f}");
    }
    assert!(!dir.join("out/error.json").exists());
}

#[test]
fn config_file_is_honoured_and_flags_override_it() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert!(srtkit(&["simulate", "--n", "200", "--out", "sim"], dir).status.success());
    std::fs::write(dir.join("cfg.toml"), "input = \"sim/cohort.csv\"\nseed = 7\n").unwrap();
    let run = srtkit(&["run", "--config", "cfg.toml", "--seed", "11", "--out", "out"], dir);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("out/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 11);
}

#[test]
fn failures_map_to_exit_codes_and_leave_an_error_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    let missing = srtkit(&["run", "--input", "absent.csv", "--out", "out"], dir);
    assert_eq!(missing.status.code(), Some(2));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("out/error.json")).unwrap()).unwrap();
    assert_eq!(report["exit_code"], 2);
    assert_eq!(report["kind"], "Config");

    std::fs::write(dir.join("bad.toml"), "no_such_key = 1\n").unwrap();
    assert_eq!(srtkit(&["run", "--config", "bad.toml"], dir).status.code(), Some(2));

    std::fs::write(
        dir.join("bad.csv"),
        "id,ear,gender,age,date,ag250,ag500,ag1000,ag1500,ag2000,ag3000,ag4000,ag6000,ag8000,wrs60,wrs80,wrs100,wrs110\n",
    )
    .unwrap();
    let empty = srtkit(&["run", "--input", "bad.csv", "--out", "o2"], dir);
    assert_eq!(empty.status.code(), Some(3));
    assert!(dir.join("o2/error.json").is_file());
}

#[test]
fn calibrate_reports_the_target_slope() {
    let tmp = tempfile::tempdir().unwrap();
    let out = srtkit(&["calibrate-sii"], tmp.path());
    assert!(out.status.success());
    let text = stdout(&out);
    let slope: f64 = text.lines().find_map(|l| l.strip_prefix("calibrated_slope\t")).unwrap().parse().unwrap();
    assert!((slope - 0.0307).abs() <= 1e-6);
}

#[test]
fn validate_prints_one_row_per_procedure() {
    let tmp = tempfile::tempdir().unwrap();
    let out = srtkit(&["validate", "--n", "600"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "procedure,n,n_excluded,bias,rmse,coverage,median_delta_srt");
    assert_eq!(rows.len(), 4);
    assert!(text.contains("# median delta_srt empirical"));
}
