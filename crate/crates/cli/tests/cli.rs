//! End-to-end tests of the w99sim binary: exit codes, file outputs, and
//! byte-identical determinism across reruns and thread counts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_w99sim"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary spawns")
}

fn code(output: &Output) -> i32 {
    output.status.code().expect("no signal")
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// One-lane 240 s setup small enough for dozens of invocations.
fn write_tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.json");
    std::fs::write(
        &path,
        r#"{
  "network": {"lane_count": 1, "mainline_length": 500.0, "inflow_length": 200.0},
  "flows": {
    "car": {"volume_vph": 600.0, "length_m": 4.5, "width_m": 1.8},
    "truck": {"volume_vph": 120.0, "length_m": 12.0, "width_m": 2.5}
  },
  "warmup_s": 30.0,
  "horizon_s": 240.0,
  "seed": 2024
}"#,
    )
    .unwrap();
    path
}

fn simulate_dataset(dir: &Path) -> PathBuf {
    write_tiny_config(dir);
    let out = run_in(
        dir,
        &[
            "simulate",
            "--config",
            "tiny.json",
            "--out-stats",
            "stats.csv",
            "--out-traj",
            "traj.json",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    dir.join("traj.json")
}

#[test]
fn help_succeeds_and_unknown_flag_is_usage_error() {
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("simulate"));

    let out = bin().args(["simulate", "--bogus"]).output().unwrap();
    assert_eq!(code(&out), 1);

    let out = bin().arg("--version").output().unwrap();
    assert_eq!(code(&out), 0);
}

#[test]
fn simulate_writes_stats_and_valid_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let traj = simulate_dataset(dir.path());
    let stats = read(&dir.path().join("stats.csv"));
    let mut lines = stats.lines();
    assert_eq!(
        lines.next(),
        Some("id,class,mean_speed_kmh,min_ttc_s,mean_ttc_s,completed")
    );
    assert!(lines.count() > 10, "expected a body of stats rows");

    let out = run_in(dir.path(), &["validate", "--data", "traj.json"]);
    assert_eq!(code(&out), 0);
    let summary = String::from_utf8_lossy(&out.stdout);
    assert!(summary.contains("car"), "summary was {summary:?}");
    assert!(summary.contains("truck"), "summary was {summary:?}");
    drop(traj);
}

#[test]
fn simulate_with_empty_window_warns_and_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("degenerate.json");
    std::fs::write(&config, r#"{"warmup_s": 120.0, "horizon_s": 120.0}"#).unwrap();
    let out = bin()
        .current_dir(dir.path())
        .env("W99_LOG", "warn")
        .args([
            "simulate",
            "--config",
            "degenerate.json",
            "--out-stats",
            "empty.csv",
        ])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("warmup"),
        "expected a warning about the empty window"
    );
    assert_eq!(
        read(&dir.path().join("empty.csv")),
        "id,class,mean_speed_kmh,min_ttc_s,mean_ttc_s,completed\n"
    );
}

#[test]
fn seed_flag_overrides_config_and_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_config(dir.path());
    let base = ["simulate", "--config", "tiny.json", "--out-stats"];
    for (seed, name) in [("5", "a.csv"), ("5", "b.csv"), ("6", "c.csv")] {
        let out = run_in(dir.path(), &[&base[..], &[name, "--seed", seed]].concat());
        assert_eq!(code(&out), 0);
    }
    let a = read(&dir.path().join("a.csv"));
    let b = read(&dir.path().join("b.csv"));
    let c = read(&dir.path().join("c.csv"));
    assert_eq!(a, b, "same seed must reproduce bytes");
    assert_ne!(a, c, "different seed must change the traffic");
}

#[test]
fn missing_input_file_exits_2_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["validate", "--data", "absent.json"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.json"));
}

#[test]
fn invalid_dataset_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.json");
    // Track with zero samples violates the dataset invariants.
    std::fs::write(
        &path,
        r#"{
  "meta": {"timestamp": "2020-01-01T00:00:00Z", "location": "x", "provenance": "natural", "source_method": "m"},
  "tracks": [{"id": 1, "class": "car", "length_m": 4.0, "width_m": 1.8, "samples": []}]
}"#,
    )
    .unwrap();
    let out = run_in(dir.path(), &["validate", "--data", "broken.json"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn invalid_config_content_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"dt_s": 0.0}"#).unwrap();
    let out = run_in(
        dir.path(),
        &["simulate", "--config", "bad.json", "--out-stats", "x.csv"],
    );
    assert_eq!(code(&out), 2);
    assert!(!dir.path().join("x.csv").exists(), "no partial outputs");
}

#[test]
fn metrics_reports_per_vehicle_ttc() {
    let dir = tempfile::tempdir().unwrap();
    simulate_dataset(dir.path());
    let out = run_in(
        dir.path(),
        &["metrics", "--data", "traj.json", "--out", "ttc.csv"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = read(&dir.path().join("ttc.csv"));
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("id,min_ttc_s,mean_ttc_s,n_defined_samples")
    );
    let body: Vec<&str> = lines.collect();
    assert!(!body.is_empty(), "one-lane traffic interacts");
    for line in body {
        assert_eq!(line.split(',').count(), 4);
    }
}

#[test]
fn calibrate_zero_restarts_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "calibrate",
            "--data",
            "x.json",
            "--restarts",
            "0",
            "--out",
            "r.json",
        ],
    );
    assert_eq!(code(&out), 1);
}

#[test]
fn calibrate_writes_result_json_and_runs_csv_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    simulate_dataset(dir.path());
    let args = [
        "calibrate",
        "--data",
        "traj.json",
        "--config",
        "tiny.json",
        "--restarts",
        "2",
        "--seed",
        "7",
    ];
    let out = run_in(dir.path(), &[&args[..], &["--out", "r1.json"]].concat());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = run_in(
        dir.path(),
        &[&args[..], &["--out", "r2.json", "--jobs", "2"]].concat(),
    );
    assert_eq!(code(&out), 0);

    let r1 = read(&dir.path().join("r1.json"));
    let r2 = read(&dir.path().join("r2.json"));
    assert_eq!(r1, r2, "thread count must not leak into results");

    let result: serde_json::Value = serde_json::from_str(&r1).unwrap();
    assert_eq!(result["runs"].as_array().unwrap().len(), 2);
    let best = &result["best"];
    for key in [
        "mu_car_kmh",
        "sigma_car_kmh",
        "mu_truck_kmh",
        "sigma_truck_kmh",
    ] {
        assert!(best[key].as_f64().unwrap().is_finite());
    }

    let csv = read(&dir.path().join("r1.csv"));
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("restart,mu_car_kmh,sigma_car_kmh,mu_truck_kmh,sigma_truck_kmh,objective")
    );
    assert_eq!(lines.count(), 2);
}

#[test]
fn sensitivity_sweep_csv_matches_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_config(dir.path());
    let args = [
        "sensitivity",
        "--param",
        "cc1",
        "--steps",
        "3",
        "--fraction",
        "0.3",
        "--config",
        "tiny.json",
    ];
    let out = run_in(dir.path(), &[&args[..], &["--out", "s1.csv"]].concat());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = run_in(
        dir.path(),
        &[&args[..], &["--out", "s2.csv", "--jobs", "4"]].concat(),
    );
    assert_eq!(code(&out), 0);
    let s1 = read(&dir.path().join("s1.csv"));
    assert_eq!(s1, read(&dir.path().join("s2.csv")));
    let mut lines = s1.lines();
    assert_eq!(
        lines.next(),
        Some("value,min_mean_ttc_s,min_min_ttc_s,n_altered,failed")
    );
    let body: Vec<&str> = lines.collect();
    assert_eq!(body.len(), 3);
    assert!(body[0].starts_with("0.100000,"));
    assert!(body[2].starts_with("1.00000,"));
}

#[test]
fn sensitivity_rejects_bad_grid_flags() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_config(dir.path());
    let out = run_in(
        dir.path(),
        &["sensitivity", "--param", "cc42", "--out", "s.csv"],
    );
    assert_eq!(code(&out), 1);
    let out = run_in(
        dir.path(),
        &[
            "sensitivity",
            "--param",
            "cc1",
            "--steps",
            "0",
            "--out",
            "s.csv",
        ],
    );
    assert_eq!(code(&out), 1);
    let out = run_in(
        dir.path(),
        &[
            "sensitivity",
            "--param",
            "cc1",
            "--start",
            "-0.5",
            "--config",
            "tiny.json",
            "--out",
            "s.csv",
        ],
    );
    assert_eq!(code(&out), 1, "sign-violating start is a usage error");
    let out = run_in(
        dir.path(),
        &[
            "sensitivity",
            "--param",
            "cc1",
            "--fraction",
            "1.5",
            "--out",
            "s.csv",
        ],
    );
    assert_eq!(code(&out), 1);
}

#[test]
fn negative_sweep_ranges_parse() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_config(dir.path());
    let out = run_in(
        dir.path(),
        &[
            "sensitivity",
            "--param",
            "cc3",
            "--start",
            "-2.0",
            "--end",
            "-11.0",
            "--steps",
            "2",
            "--config",
            "tiny.json",
            "--out",
            "cc3.csv",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = read(&dir.path().join("cc3.csv"));
    assert!(csv.lines().nth(1).unwrap().starts_with("-2.00000,"));
    assert!(csv.lines().nth(2).unwrap().starts_with("-11.0000,"));
}

#[test]
fn jobs_zero_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["--jobs", "0", "validate", "--data", "x.json"]);
    assert_eq!(code(&out), 1);
}
