//! End-to-end checks of the `pgs` binary: exit codes, artifact layout,
//! overrides, aggregation, and the config round-trip property (the echo in
//! any report reproduces the run bit for bit when fed back).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn pgs() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pgs"))
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("pgs-cli-{tag}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn minimal_config() -> serde_json::Value {
    serde_json::json!({
        "protocol": {
            "name": "cli-test",
            "data": {"synthetic_classification": {
                "n_train": 24, "n_val": 12, "n_test": 12,
                "dim": 3, "classes": 2, "separation": 3.0
            }},
            "weak": {"uniform_flip": {"ratio": 0.25}},
            "ensemble_size": 2,
            "methods": ["baseline", "pgs_convex"],
            "seeds": [0, 1],
            "model": {"family": "softmax_regression", "l2_reg": 0.001},
            "pgs": {"upper_iters": 2}
        }
    })
}

fn write_config(dir: &Path, value: &serde_json::Value) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn collect_reports(dir: &Path) -> Vec<serde_json::Value> {
    let mut out: Vec<serde_json::Value> = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            let report = path.join("report.json");
            if report.exists() {
                out.push(serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap());
            }
        }
    }
    out.sort_by_key(|r| {
        (
            r["method"].as_str().unwrap().to_string(),
            r["seed"].as_u64().unwrap(),
        )
    });
    out
}

#[test]
fn missing_config_exits_one_with_message() {
    let output = pgs()
        .args(["run", "--config", "/nonexistent/nope.json"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("cannot read config"), "stderr: {stderr}");
}

#[test]
fn run_writes_reports_and_summary() {
    let dir = temp_dir("run");
    let config = write_config(&dir, &minimal_config());
    let out = dir.join("out");
    let output = pgs()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{output:?}");
    assert!(out.join("summary.csv").exists());
    assert!(out.join("config.json").exists());
    let reports = collect_reports(&out);
    assert_eq!(reports.len(), 4); // 2 methods x 2 seeds
}

#[test]
fn seed_flag_overrides_only_seeds_in_echo() {
    let dir = temp_dir("seed");
    let config = write_config(&dir, &minimal_config());
    let out = dir.join("out");
    let status = pgs()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .args(["--seed", "7"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let effective: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    let mut expected = minimal_config();
    expected["protocol"]["seeds"] = serde_json::json!([7]);
    assert_eq!(effective, expected);
    let reports = collect_reports(&out);
    assert!(reports.iter().all(|r| r["seed"] == 7));
}

#[test]
fn config_echo_round_trips_bit_for_bit() {
    let dir = temp_dir("roundtrip");
    let config = write_config(&dir, &minimal_config());
    let out1 = dir.join("first");
    assert_eq!(
        pgs()
            .args(["run", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out1)
            .args(["--threads", "1"])
            .status()
            .unwrap()
            .code(),
        Some(0)
    );
    let first = collect_reports(&out1);

    // rebuild a config file from one report's embedded echo and rerun
    let echo = &first[0]["config_echo"];
    let mut protocol = echo.clone();
    protocol.as_object_mut().unwrap().remove("seed");
    protocol.as_object_mut().unwrap().remove("method");
    let rebuilt = serde_json::json!({ "protocol": protocol });
    let config2 = dir.join("rebuilt.json");
    fs::write(&config2, serde_json::to_string_pretty(&rebuilt).unwrap()).unwrap();
    let out2 = dir.join("second");
    assert_eq!(
        pgs()
            .args(["run", "--config"])
            .arg(&config2)
            .arg("--out")
            .arg(&out2)
            .args(["--threads", "1"])
            .status()
            .unwrap()
            .code(),
        Some(0)
    );
    let second = collect_reports(&out2);
    assert_eq!(first.len(), second.len());
    for (a, b) in first.iter().zip(&second) {
        // identical except the wall clock (and the echoed config itself,
        // which the rebuilt file reproduces)
        let mut a = a.clone();
        let mut b = b.clone();
        a["wall_clock_secs"] = serde_json::json!(0.0);
        b["wall_clock_secs"] = serde_json::json!(0.0);
        assert_eq!(a, b);
    }
}

#[test]
fn report_aggregates_run_directory() {
    let dir = temp_dir("report");
    let config = write_config(&dir, &minimal_config());
    let out = dir.join("out");
    pgs()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    let csv = dir.join("agg.csv");
    let output = pgs()
        .arg("report")
        .arg(&out)
        .arg("--csv")
        .arg(&csv)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("baseline"));
    assert!(stdout.contains("pgs_convex"));
    let csv_text = fs::read_to_string(&csv).unwrap();
    assert!(csv_text.starts_with("method,metric,mean,std,runs"));
    assert!(csv_text.lines().count() >= 3);
}

#[test]
fn report_on_empty_directory_is_empty_and_ok() {
    let dir = temp_dir("empty");
    let output = pgs().arg("report").arg(&dir).output().unwrap();
    assert_eq!(output.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert_eq!(stdout.lines().count(), 1); // header only
}

#[test]
fn sweep_requires_axis_and_writes_csv() {
    let dir = temp_dir("sweep");
    let mut config = minimal_config();
    config["protocol"]["methods"] = serde_json::json!(["baseline"]);
    config["sweep"] = serde_json::json!({"validation_size": [8, 12]});
    let path = write_config(&dir, &config);
    let out = dir.join("out");
    let status = pgs()
        .args(["sweep", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(csv.contains("n_val=8"));
    assert!(csv.contains("n_val=12"));

    // without a sweep section the subcommand errors out
    let plain = write_config(&temp_dir("sweep2"), &minimal_config());
    let output = pgs().args(["sweep", "--config"]).arg(&plain).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn gradcheck_zero_threshold_fails_unknown_family_errors() {
    let ok = pgs()
        .args(["gradcheck", "--family", "linear", "--instances", "1"])
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0), "{ok:?}");

    let zero = pgs()
        .args(["gradcheck", "--family", "linear", "--instances", "1", "--threshold", "0"])
        .output()
        .unwrap();
    assert_eq!(zero.status.code(), Some(1));

    let unknown = pgs()
        .args(["gradcheck", "--family", "transformer"])
        .output()
        .unwrap();
    assert_eq!(unknown.status.code(), Some(1));
}

#[test]
fn project_check_passes_defaults() {
    let output = pgs()
        .args(["project-check", "--cases", "200", "--seed", "1"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{output:?}");
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("within 5% of oracle"));
}

#[test]
fn unsafe_runs_exit_two_unless_disabled() {
    // one huge unguarded upper step wrecks the quality parameters, so the
    // final validation losses regress past the slack and the run flags unsafe
    let dir = temp_dir("unsafe");
    let mut config = minimal_config();
    config["protocol"]["methods"] = serde_json::json!(["pgs_convex"]);
    config["protocol"]["seeds"] = serde_json::json!([0]);
    config["protocol"]["pgs"] = serde_json::json!({
        "safeness_weight": 0.0,
        "upper_iters": 1,
        "upper": {"learning_rate": 5.0}
    });
    let path = write_config(&dir, &config);
    let out = dir.join("out");
    let output = pgs()
        .args(["run", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2), "{output:?}");

    let tolerated = pgs()
        .args(["run", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(&out)
        .arg("--no-fail-unsafe")
        .status()
        .unwrap();
    assert_eq!(tolerated.code(), Some(0));
}
