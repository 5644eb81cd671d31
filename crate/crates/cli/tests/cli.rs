use std::path::Path;
use std::process::{Command, Output};

fn dpps(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpps"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

const MASK_PRESET: &str = "preset = \"gmm-inpaint-16\"\n[sampler]\nvariant = \"dpps_fixed_n\"\nn_candidates = 4\n";

#[test]
fn restore_writes_estimate_trace_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), MASK_PRESET);
    let out = dir.path().join("out");
    let o = dpps(&["restore", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["estimate.pgm", "trace.csv", "summary.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 3);
    assert!(summary["final_residual"].as_f64().unwrap().is_finite());
    assert!(summary["oracle_mse"].as_f64().is_some());
    assert!(summary["psnr"].as_f64().is_some());
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1001);
    assert!(String::from_utf8_lossy(&o.stderr).contains("step 1000/1000"));
}

#[test]
fn rerun_gives_a_byte_identical_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), MASK_PRESET);
    let mut traces = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = dpps(&["restore", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
        traces.push(std::fs::read(out.join("trace.csv")).unwrap());
    }
    assert_eq!(traces[0], traces[1]);
}

#[test]
fn adaptive_sampler_with_n_max_one_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[sampler]\nvariant = \"dpps_adaptive\"\nn_max = 1\n");
    let o = dpps(&["restore", "--config", &cfg, "--out", dir.path().join("out").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sampler.n_max"));
    let v = dpps(&["validate-config", "--config", &cfg]);
    assert_eq!(v.status.code(), Some(1));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[sampler]\nlambda = 2.0\n");
    let o = dpps(&["validate-config", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lambda"));
}

#[test]
fn valid_config_passes_validation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), MASK_PRESET);
    let o = dpps(&["validate-config", "--config", &cfg]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("gmm-inpaint-16"));
}

#[test]
fn variance_experiment_reports_the_ordering() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = dpps(&["experiment", "variance", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("variance.json")).unwrap()).unwrap();
    assert_eq!(report["verdicts"]["ordering_holds"], true);
}

#[test]
fn unknown_experiment_lists_valid_names() {
    let o = dpps(&["experiment", "fid"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    for name in ["variance", "convergence", "lambda-sweep", "error-accum"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn one_dimensional_problems_write_csv_estimates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "preset = \"gaussian-mask-1d\"\n");
    let out = dir.path().join("out");
    let o = dpps(&["restore", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let est = std::fs::read_to_string(out.join("estimate.csv")).unwrap();
    assert_eq!(est.lines().count(), 9);
}
