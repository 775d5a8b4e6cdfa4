//! End-to-end checks of the `twinloc` binary and the library commands
//! behind it.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use twinloc::estimator::Mode;
use twinloc::simkit::NoiseConfig;
use twinloc_cli::bench::{alignment_config, canyon_config, facade_config};
use twinloc_cli::bundle::{
    sha256_hex, Manifest, GNSS_MODEL_FILE, GPS_FILE, GROUND_TRUTH_FILE, IMU_FILE, MANIFEST_FILE, MESH_FILE,
    OBSERVATIONS_FILE,
};
use twinloc_cli::calibration::calibrate_beta;
use twinloc_cli::commands::{
    ALIGNMENT_LOG_FILE, DIAGNOSTICS_FILE, METRICS_FILE, REGISTRATION_LOG_FILE, RUN_MANIFEST_FILE, TRAJECTORY_FILE,
};
use twinloc_cli::config::ExperimentConfig;
use twinloc_cli::pipeline::run_scenario;
use twinloc_cli::scenario::{build_trajectory, simulate};

const BUNDLE_FILES: [&str; 7] =
    [MESH_FILE, GROUND_TRUTH_FILE, IMU_FILE, OBSERVATIONS_FILE, GPS_FILE, GNSS_MODEL_FILE, MANIFEST_FILE];

fn repo_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn twinloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_twinloc")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = twinloc(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn error_kind(out: &Output) -> String {
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).expect("errors are JSON on stderr");
    v["error"].as_str().unwrap().to_string()
}

fn metrics(json: &str) -> (f64, f64) {
    let v: serde_json::Value = serde_json::from_str(json).unwrap();
    (v["ate_p_m"].as_f64().unwrap(), v["ate_r_deg"].as_f64().unwrap())
}

fn simulate_minimal(dir: &Path) {
    let config = repo_path("configs/minimal.toml");
    ok(&["simulate", "--config", config.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
}

#[test]
fn simulate_writes_a_complete_reproducible_bundle() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    simulate_minimal(a.path());
    simulate_minimal(b.path());
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(a.path().join(MANIFEST_FILE)).unwrap()).unwrap();
    for name in BUNDLE_FILES {
        let bytes = std::fs::read(a.path().join(name)).unwrap();
        assert_eq!(bytes, std::fs::read(b.path().join(name)).unwrap(), "{name} differs between identical runs");
        if name != MANIFEST_FILE {
            assert_eq!(manifest.files[name], sha256_hex(&bytes), "{name} hash");
        }
    }
    assert_eq!(manifest.seed, 1);
}

#[test]
fn corrupted_bundle_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    simulate_minimal(dir.path());
    let gps = dir.path().join(GPS_FILE);
    let mut text = std::fs::read_to_string(&gps).unwrap();
    text.push_str("999,0,0,0,1,0,0,1,0,1,6\n");
    std::fs::write(&gps, text).unwrap();
    let out = twinloc(&["run", "--bundle", dir.path().to_str().unwrap(), "--out", dir.path().join("run").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_kind(&out), "bundle");
}

#[test]
fn run_then_evaluate_reproduces_the_reported_metrics() {
    let dir = tempfile::tempdir().unwrap();
    simulate_minimal(dir.path());
    let run_dir = dir.path().join("run");
    let reported =
        ok(&["run", "--bundle", dir.path().to_str().unwrap(), "--out", run_dir.to_str().unwrap(), "--deterministic"]);
    for name in [TRAJECTORY_FILE, DIAGNOSTICS_FILE, ALIGNMENT_LOG_FILE, REGISTRATION_LOG_FILE, METRICS_FILE, RUN_MANIFEST_FILE] {
        assert!(run_dir.join(name).is_file(), "missing {name}");
    }
    let (p, r) = metrics(&reported);
    assert!(p.is_finite() && r.is_finite() && p < 5.0, "ATE_P {p} ATE_R {r}");
    let evaluated = ok(&[
        "evaluate",
        "--gt",
        dir.path().join(GROUND_TRUTH_FILE).to_str().unwrap(),
        "--est",
        run_dir.join(TRAJECTORY_FILE).to_str().unwrap(),
        "--manifest",
        dir.path().join(MANIFEST_FILE).to_str().unwrap(),
    ]);
    // The CSV stores shortest round-trip decimals, so only the last bits may move.
    let (p2, r2) = metrics(&evaluated);
    assert!((p - p2).abs() < 1e-9 && (r - r2).abs() < 1e-9, "{p} vs {p2}, {r} vs {r2}");
    let v: serde_json::Value = serde_json::from_str(&evaluated).unwrap();
    assert_eq!(v["seed"], 1);
    assert!(!v["config_hash"].as_str().unwrap().is_empty());
}

/// Writes the ground truth as a world-frame estimate shifted by `offset`.
fn shifted_estimate(gt: &Path, est: &Path, offset: [f64; 3]) {
    let mut rdr = csv::Reader::from_path(gt).unwrap();
    let mut out = String::from("t,x,y,z,qw,qx,qy,qz,frame\n");
    for row in rdr.records() {
        let row = row.unwrap();
        let f = |i: usize| row[i].parse::<f64>().unwrap();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},W\n",
            &row[0],
            f(1) + offset[0],
            f(2) + offset[1],
            f(3) + offset[2],
            &row[4],
            &row[5],
            &row[6],
            &row[7]
        ));
    }
    std::fs::write(est, out).unwrap();
}

#[test]
fn evaluate_exact_and_offset_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    simulate_minimal(dir.path());
    let gt = dir.path().join(GROUND_TRUTH_FILE);
    let same = dir.path().join("same.csv");
    let shifted = dir.path().join("shifted.csv");
    shifted_estimate(&gt, &same, [0.0; 3]);
    shifted_estimate(&gt, &shifted, [3.0, 4.0, 0.0]);
    let (p, r) = metrics(&ok(&["evaluate", "--gt", gt.to_str().unwrap(), "--est", same.to_str().unwrap()]));
    assert_eq!((p, r), (0.0, 0.0));
    let (p, r) = metrics(&ok(&["evaluate", "--gt", gt.to_str().unwrap(), "--est", shifted.to_str().unwrap()]));
    assert!((p - 5.0).abs() < 1e-9 && r == 0.0, "{p} {r}");
    // A rigid alignment removes the constant offset.
    let (p, _) =
        metrics(&ok(&["evaluate", "--gt", gt.to_str().unwrap(), "--est", shifted.to_str().unwrap(), "--alignment", "se3"]));
    assert!(p < 1e-6, "{p}");
}

#[test]
fn usage_and_input_errors_are_json_with_exit_codes() {
    let config = repo_path("configs/minimal.toml");
    let dir = tempfile::tempdir().unwrap();
    let out = twinloc(&["run", "--config", config.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "--mode", "vio-magic"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_kind(&out), "usage");

    let out = twinloc(&["run", "--config", "does/not/exist.toml", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_kind(&out), "io");

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "mode = \"vio-twin\"\n").unwrap();
    let out = twinloc(&["simulate", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_kind(&out), "parse");
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));

    assert!(twinloc(&["--help"]).status.success());
}

#[test]
fn gps_model_is_deterministic() {
    let config = repo_path("configs/minimal.toml");
    let dir = tempfile::tempdir().unwrap();
    let files: Vec<PathBuf> = (0..2).map(|k| dir.path().join(format!("model{k}.json"))).collect();
    for f in &files {
        ok(&["gps-model", "--config", config.to_str().unwrap(), "--out", f.to_str().unwrap(), "--samples", "300"]);
    }
    let a = std::fs::read(&files[0]).unwrap();
    assert_eq!(a, std::fs::read(&files[1]).unwrap());
    let v: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert!(v["models"]["multipath"].is_object());
    assert_eq!(v["diagnostics"]["seed"], 1);
}

#[test]
fn shipped_configs_match_the_benchmark_builders() {
    for (file, cfg) in [
        ("configs/canyon.toml", canyon_config(1)),
        ("configs/facade.toml", facade_config(1)),
        ("configs/biased_gps.toml", alignment_config(1)),
    ] {
        let loaded = ExperimentConfig::load(&repo_path(file)).unwrap();
        assert_eq!(loaded, cfg, "{file}");
    }
}

#[test]
fn canyon_trajectory_is_five_hundred_meters() {
    let traj = build_trajectory(&canyon_config(1)).unwrap();
    let n = 100_000;
    let dt = traj.duration() / n as f64;
    let length: f64 = (0..n).map(|k| (traj.position((k + 1) as f64 * dt) - traj.position(k as f64 * dt)).norm()).sum();
    assert!((length - 500.0).abs() <= 1.0, "{length}");
}

/// Final keyframe position error in the world frame.
fn final_error(sc: &twinloc_cli::scenario::Scenario, mode: Mode) -> f64 {
    let r = run_scenario(sc, mode, true).unwrap();
    let (t, est) = *r.estimate.poses.last().unwrap();
    let gt = r.ground_truth.poses.iter().min_by(|a, b| (a.0 - t).abs().total_cmp(&(b.0 - t).abs())).unwrap().1;
    (est.translation - gt.translation).norm()
}

#[test]
fn map_factors_reduce_final_error() {
    let sc = simulate(&ExperimentConfig::load(&repo_path("configs/minimal.toml")).unwrap()).unwrap();
    let gps = final_error(&sc, Mode::VioGps);
    let twin = final_error(&sc, Mode::VioTwin);
    assert!(twin < gps, "vio-twin {twin} m, vio-gps {gps} m");
}

#[test]
fn noiseless_visual_inertial_run_is_nearly_exact() {
    let mut cfg = ExperimentConfig::load(&repo_path("configs/minimal.toml")).unwrap();
    cfg.sensors.noise = NoiseConfig::noiseless(1);
    let sc = simulate(&cfg).unwrap();
    let r = run_scenario(&sc, Mode::VioOnly, true).unwrap();
    assert!(r.metrics.ate_p_m < 0.01, "{}", r.metrics.ate_p_m);
}

#[test]
fn calibrated_beta_agrees_with_the_default() {
    let sc = simulate(&canyon_config(1)).unwrap();
    let cal = calibrate_beta(&sc).unwrap();
    let default = sc.config.estimator.weighting.beta;
    assert!(cal.measurements > 50, "{}", cal.measurements);
    let ratio = cal.beta / default;
    assert!((0.5..2.0).contains(&ratio), "calibrated {} vs default {default}", cal.beta);
}
