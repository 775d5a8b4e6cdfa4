//! Subcommand implementations behind the `twinloc` binary.

use std::path::{Path, PathBuf};

use serde::Serialize;

use twinloc::alignment::{AlignmentEstimate, AlignmentLogEntry};
use twinloc::estimator::{KeyframeDiagnostics, Mode};
use twinloc::evaluation::{evaluate, EvalAlignment, FrameTag, Metrics};
use twinloc::gnss::{GpConfig, TrainingSets};
use twinloc::registration::RegistrationLogEntry;

use crate::bench::{format_table, run_bench, BenchReport};
use crate::bundle::{
    json_string, read_bundle, read_ground_truth, read_json, read_trajectory, sha256_hex, trajectory_csv, write_bundle,
    write_file, GnssModelFile, Manifest,
};
use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::pipeline::run_scenario;
use crate::scenario::{fit_gnss_models, simulate, Scenario};

pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";
pub const ALIGNMENT_LOG_FILE: &str = "alignment_log.csv";
pub const REGISTRATION_LOG_FILE: &str = "registration_log.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

/// Loads a configuration and applies a seed override.
pub fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn cmd_simulate(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest, CliError> {
    let sc = simulate(cfg)?;
    write_bundle(&sc, out)
}

#[derive(Clone, Debug, Serialize)]
pub struct BinDiagnostics {
    pub lo: f64,
    pub hi: f64,
    pub samples: usize,
    pub components: usize,
    /// Log-likelihood of the bin's training values under its mixture.
    pub log_likelihood: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GnssFitDiagnostics {
    pub seed: u64,
    pub count_samples: usize,
    pub multipath_samples: usize,
    pub gp_hyperparameters: GpConfig,
    pub multipath_bins: Vec<BinDiagnostics>,
}

fn fit_diagnostics(cfg: &ExperimentConfig, training: &TrainingSets, models: &twinloc::gnss::GnssModels) -> GnssFitDiagnostics {
    let multipath_bins = models
        .multipath
        .bins
        .iter()
        .map(|b| {
            let values: Vec<f64> =
                training.multipath.iter().filter(|(h, _)| *h >= b.lo && *h < b.hi).map(|(_, v)| *v).collect();
            BinDiagnostics {
                lo: b.lo,
                hi: b.hi,
                samples: b.samples,
                components: b.gmm.components.len(),
                log_likelihood: b.gmm.log_likelihood(&values),
            }
        })
        .collect();
    GnssFitDiagnostics {
        seed: cfg.seed,
        count_samples: training.counts.len(),
        multipath_samples: training.multipath.len(),
        gp_hyperparameters: cfg.gnss.gp,
        multipath_bins,
    }
}

/// Fits the satellite-count GP and multipath mixtures on the scene mesh and
/// writes them with fit diagnostics.
pub fn cmd_gps_model(
    mut cfg: ExperimentConfig,
    samples: Option<usize>,
    components: Option<usize>,
    out: &Path,
) -> Result<GnssFitDiagnostics, CliError> {
    if let Some(n) = samples {
        cfg.gnss.training.n_samples = n;
    }
    if let Some(k) = components {
        cfg.gnss.multipath.components = k;
    }
    let mesh = crate::scenario::build_mesh(&cfg)?;
    let fitted = fit_gnss_models(&cfg, &mesh)?;
    let diagnostics = fit_diagnostics(&cfg, &fitted.training, &fitted.models);
    let file = GnssModelFile { models: fitted.models, diagnostics: diagnostics.clone() };
    write_file(out, json_string(&file).as_bytes())?;
    Ok(diagnostics)
}

#[derive(Clone, Debug, Serialize)]
pub struct RunDiagnostics {
    pub mode: Mode,
    pub seed: u64,
    pub registration_attempts: usize,
    pub registration_converged: usize,
    pub alignment: Option<AlignmentEstimate>,
    pub phase1: Option<AlignmentEstimate>,
    pub phase2: Option<AlignmentEstimate>,
    pub keyframes: Vec<KeyframeDiagnostics>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub mode: Mode,
    pub deterministic: bool,
    pub seed: u64,
    pub config_hash: String,
    pub config: ExperimentConfig,
    /// Output file name to SHA-256 hex digest.
    pub files: std::collections::BTreeMap<String, String>,
}

#[derive(Serialize)]
struct AlignmentRow {
    t: f64,
    phase: u8,
    yaw: f64,
    tx: f64,
    ty: f64,
    tz: f64,
    heading_variance: f64,
    converged: bool,
}

#[derive(Serialize)]
struct RegistrationRow {
    t: f64,
    converged: bool,
    inlier_count: usize,
    inlier_rmse: f64,
    trace_h: f64,
    w0: f64,
    w1: f64,
    w2: f64,
    w3: f64,
    w4: f64,
    w5: f64,
}

fn csv_of<R: Serialize>(rows: impl IntoIterator<Item = R>) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Bundle(format!("CSV encoding failed: {e}")))?;
    }
    w.into_inner().map_err(|e| CliError::Bundle(format!("CSV encoding failed: {e}")))
}

fn alignment_rows(log: &[AlignmentLogEntry]) -> Result<Vec<u8>, CliError> {
    csv_of(log.iter().map(|e| AlignmentRow {
        t: e.t,
        phase: e.phase,
        yaw: e.yaw,
        tx: e.translation.x,
        ty: e.translation.y,
        tz: e.translation.z,
        heading_variance: e.heading_variance,
        converged: e.converged,
    }))
}

fn registration_rows(log: &[RegistrationLogEntry]) -> Result<Vec<u8>, CliError> {
    csv_of(log.iter().map(|e| {
        let w = e.weight_eigenvalues;
        RegistrationRow {
            t: e.t,
            converged: e.converged,
            inlier_count: e.inlier_count,
            inlier_rmse: e.gamma,
            trace_h: e.trace_h,
            w0: w[0],
            w1: w[1],
            w2: w[2],
            w3: w[3],
            w4: w[4],
            w5: w[5],
        }
    }))
}

/// Runs the estimator and writes the trajectory, diagnostics, logs, the
/// metrics against the scenario ground truth and a manifest.
pub fn cmd_run(sc: &Scenario, mode: Mode, deterministic: bool, out: &Path) -> Result<Metrics, CliError> {
    let r = run_scenario(sc, mode, deterministic)?;
    let s = &r.session;
    let diagnostics = RunDiagnostics {
        mode,
        seed: sc.config.seed,
        registration_attempts: s.registration_attempts,
        registration_converged: s.registration_converged,
        alignment: s.alignment,
        phase1: s.phase1,
        phase2: s.phase2,
        keyframes: s.diagnostics.clone(),
    };
    let files = [
        (TRAJECTORY_FILE, trajectory_csv(&r.estimate)?),
        (DIAGNOSTICS_FILE, json_string(&diagnostics).into_bytes()),
        (ALIGNMENT_LOG_FILE, alignment_rows(&s.alignment_log)?),
        (REGISTRATION_LOG_FILE, registration_rows(&s.registration_log)?),
        (METRICS_FILE, json_string(&r.metrics).into_bytes()),
    ];
    let mut hashes = std::collections::BTreeMap::new();
    for (name, bytes) in &files {
        write_file(&out.join(name), bytes)?;
        hashes.insert(name.to_string(), sha256_hex(bytes));
    }
    let manifest = RunManifest {
        mode,
        deterministic,
        seed: sc.config.seed,
        config_hash: sc.config.hash(),
        config: sc.config.clone(),
        files: hashes,
    };
    write_file(&out.join(RUN_MANIFEST_FILE), json_string(&manifest).as_bytes())?;
    Ok(r.metrics)
}

/// Scores a trajectory file against ground truth. Without an explicit mode,
/// local-frame estimates get a yaw alignment and world-frame ones none.
pub fn cmd_evaluate(
    gt: &Path,
    est: &Path,
    alignment: Option<EvalAlignment>,
    manifest: Option<&Path>,
    out: Option<&Path>,
) -> Result<Metrics, CliError> {
    let truth = read_ground_truth(gt)?;
    let estimate = read_trajectory(est, "estimate")?;
    let mode = alignment.unwrap_or(match estimate.frame {
        FrameTag::Local => EvalAlignment::Yaw4dof,
        FrameTag::World => EvalAlignment::None,
    });
    let (hash, seed) = match manifest {
        Some(p) => {
            let m: serde_json::Value = read_json(p)?;
            (m["config_hash"].as_str().unwrap_or_default().to_string(), m["seed"].as_u64().unwrap_or_default())
        }
        None => (String::new(), 0),
    };
    let metrics = evaluate(&truth, &estimate, mode, &hash, seed)?;
    if let Some(p) = out {
        write_file(p, json_string(&metrics).as_bytes())?;
    }
    Ok(metrics)
}

/// Runs the benchmark suite and writes its metrics, timing and table.
pub fn cmd_bench(seeds: &[u64], deterministic: bool, out: &Path) -> Result<BenchReport, CliError> {
    let (report, timing) = run_bench(seeds, deterministic)?;
    write_file(&out.join(METRICS_FILE), json_string(&report).as_bytes())?;
    write_file(&out.join("timing.json"), json_string(&timing).as_bytes())?;
    write_file(&out.join("table.txt"), format_table(&report).as_bytes())?;
    Ok(report)
}

/// Resolves the `run` input: a bundle directory or a configuration that is
/// simulated in memory.
pub fn load_scenario(bundle: Option<&PathBuf>, config: Option<&PathBuf>, seed: Option<u64>) -> Result<Scenario, CliError> {
    match (bundle, config) {
        (Some(dir), None) => {
            let sc = read_bundle(dir)?;
            if seed.is_some_and(|s| s != sc.config.seed) {
                return Err(CliError::config("seed", "a bundle is simulated for one seed; re-run `simulate` instead"));
            }
            Ok(sc)
        }
        (None, Some(path)) => simulate(&load_config(path, seed)?),
        _ => Err(CliError::config("input", "pass exactly one of --bundle or --config")),
    }
}
