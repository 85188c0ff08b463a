use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn repo(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .join(rel)
}

fn dfrc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfrc"))
        .args(args)
        .output()
        .expect("spawn dfrc")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn lists_presets() {
    let o = dfrc(&["presets", "--list"]);
    assert!(o.status.success());
    let names: Vec<String> = stdout(&o).lines().map(str::to_owned).collect();
    assert!(names.contains(&"eta_doa_sweep".to_string()));
    assert!(names.contains(&"distance_sweep".to_string()));
}

#[test]
fn crlb_of_tradeoff_scenario() {
    let s = repo("scenarios/tradeoff.json");
    let o = dfrc(&["crlb", s.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let doa: Vec<f64> = text
        .lines()
        .filter(|l| l.contains(",doa,"))
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(doa.len(), 2);
    for v in doa {
        assert!((v - 7.157e-4).abs() < 1e-6, "{v}");
    }
}

#[test]
fn optimize_reports_infeasible_limits() {
    let dir = tempfile::tempdir().unwrap();
    let limits = dir.path().join("limits.json");
    std::fs::write(&limits, r#"{"schema_version": 1, "velocity": 1e-9}"#).unwrap();
    let s = repo("scenarios/tradeoff.json");
    let o = dfrc(&["optimize", s.to_str().unwrap(), limits.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn optimize_meets_velocity_limit() {
    let s = repo("scenarios/tradeoff.json");
    let l = repo("scenarios/limits_velocity.json");
    let o = dfrc(&[
        "--format",
        "json",
        "optimize",
        s.to_str().unwrap(),
        l.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    for t in v["lcrlb"].as_array().unwrap() {
        assert!(t["velocity"].as_f64().unwrap() <= 0.012 * (1.0 + 1e-6));
    }
    let total: f64 = v["power"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p.as_f64().unwrap())
        .sum();
    assert!((total - 5.0).abs() < 1e-6);
}

#[test]
fn missing_file_is_a_usage_error() {
    let o = dfrc(&["crlb", "does/not/exist.json"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn experiment_output_is_reproducible() {
    let spec = repo("presets/four_target_scatter.json");
    let run = |threads: &str| {
        let dir = tempfile::tempdir().unwrap();
        let o = dfrc(&[
            "--seed",
            "11",
            "--threads",
            threads,
            "--out-dir",
            dir.path().to_str().unwrap(),
            "experiment",
            spec.to_str().unwrap(),
            "--trials",
            "2",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(dir.path().join("four_target_scatter.gp").exists());
        std::fs::read_to_string(dir.path().join("four_target_scatter.csv")).unwrap()
    };
    let a = run("1");
    assert_eq!(a, run("2"));
    assert!(a.starts_with("sweep_value,estimator,parameter,rmse"));
}

#[test]
fn estimate_from_saved_tensor_matches_synthesis() {
    let dir = tempfile::tempdir().unwrap();
    let s = repo("scenarios/single_target.json");
    let t = dir.path().join("echo.json");
    let a = dfrc(&[
        "--seed",
        "4",
        "estimate",
        s.to_str().unwrap(),
        "--snr-db",
        "10",
        "--save-tensor",
        t.to_str().unwrap(),
    ]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let b = dfrc(&[
        "--seed",
        "4",
        "estimate",
        s.to_str().unwrap(),
        "--tensor",
        t.to_str().unwrap(),
    ]);
    assert!(b.status.success());
    assert_eq!(stdout(&a), stdout(&b));
}
