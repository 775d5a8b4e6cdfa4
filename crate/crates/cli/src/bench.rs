//! Benchmark scenarios and the suite that runs them.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use twinloc::estimator::Mode;
use twinloc::evaluation::Metrics;
use twinloc::geometry::wrap_angle;
use twinloc::simkit::{CityBox, CityConfig, LoopShape};

use crate::config::{BiasSegment, ExperimentConfig};
use crate::error::CliError;
use crate::pipeline::{initial_state, run_scenario};
use crate::scenario::{simulate, Scenario};

/// Three loops (500 m) around the central block of a 3x3 grid of tall
/// buildings at street level.
pub fn canyon_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml_str(&format!("seed = {seed}\n"), "canyon").expect("valid literal");
    cfg.scene.city = CityConfig {
        blocks: [3, 3],
        block_size: 30.0,
        street_width: 20.0,
        height_range: [20.0, 60.0],
        ground_margin: 30.0,
        ground_tile: Some(10.0),
        empty_blocks: Vec::new(),
        extra_boxes: Vec::new(),
    };
    cfg.trajectory.loop_shape = Some(LoopShape {
        center: [0.0, 0.0],
        half_size: [25.0, 25.0],
        corner_radius: 8.0,
        loops: 3.0,
        start_height: 5.0,
        climb_per_loop: 0.0,
        length: Some(500.0),
        spacing: 5.0,
        start_offset: 0.0,
    });
    // Keyframes at 2 Hz give a few metres of baseline across the window.
    cfg.estimator.keyframe_stride = 5;
    // Canyon GPS never reaches a 1 degree heading deviation on this loop.
    cfg.estimator.alignment.min_duration = Some(20.0);
    // Phase-1 offsets of several meters need a wide first gate.
    cfg.estimator.icp.gate_schedule = vec![5.0, 2.0, 1.0, 0.5];
    cfg.estimator.icp.max_iter = 40;
    cfg
}

/// Open field with one 180 m long building whose facade lines the southern
/// leg of the loop, and a few buildings along the other legs.
pub fn facade_config(seed: u64) -> ExperimentConfig {
    let mut cfg = canyon_config(seed);
    let b = |min: [f64; 3], max: [f64; 3]| CityBox { min, max };
    cfg.scene.city = CityConfig {
        blocks: [0, 0],
        ground_margin: 140.0,
        ground_tile: Some(10.0),
        extra_boxes: vec![
            b([-90.0, -80.0, 0.0], [90.0, -70.0, 30.0]),
            b([-60.0, 40.0, 0.0], [-20.0, 70.0, 40.0]),
            b([20.0, 40.0, 0.0], [60.0, 70.0, 35.0]),
            b([110.0, -40.0, 0.0], [140.0, 10.0, 30.0]),
            b([-140.0, -40.0, 0.0], [-110.0, 10.0, 45.0]),
        ],
        ..CityConfig::default()
    };
    cfg.trajectory.loop_shape = Some(LoopShape {
        center: [0.0, -15.0],
        half_size: [80.0, 45.0],
        corner_radius: 10.0,
        loops: 2.0,
        start_height: 5.0,
        climb_per_loop: 0.0,
        length: None,
        spacing: 5.0,
        start_offset: 0.0,
    });
    cfg
}

/// Canyon loop whose GPS fixes carry a 10 m horizontal bias while the
/// GPS-only alignment is being collected.
pub fn alignment_config(seed: u64) -> ExperimentConfig {
    let mut cfg = canyon_config(seed);
    cfg.gnss.bias = vec![BiasSegment { t0: 0.0, t1: 10.0, offset: [0.0, 10.0, 0.0] }];
    cfg
}

pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModeCell {
    pub seed: u64,
    pub mode: Mode,
    pub metrics: Metrics,
    pub registration_success_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WeightingCell {
    pub seed: u64,
    pub isotropic: bool,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignmentCell {
    pub seed: u64,
    /// Absolute heading error of the GPS-only alignment (deg).
    pub phase1_heading_error_deg: Option<f64>,
    /// Absolute heading error of the registration-refined alignment (deg).
    pub phase2_heading_error_deg: Option<f64>,
}

/// Means over seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchSummary {
    pub canyon_ate_p_m: Vec<(Mode, f64)>,
    pub canyon_ate_r_deg: Vec<(Mode, f64)>,
    /// `1 - twin / gps` for the mean ATE values.
    pub twin_vs_gps_ate_p_reduction: f64,
    pub twin_vs_gps_ate_r_reduction: f64,
    pub facade_adaptive_ate_p_m: f64,
    pub facade_isotropic_ate_p_m: f64,
    /// `isotropic / adaptive - 1` for the mean ATE_P.
    pub isotropic_ate_p_degradation: f64,
    pub phase1_heading_error_deg: f64,
    pub phase2_heading_error_deg: f64,
    /// Phase-1 over phase-2 mean heading error.
    pub heading_error_ratio: f64,
}

/// Metrics of the whole suite. Contains no timing so that deterministic
/// runs serialize identically.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub seeds: Vec<u64>,
    pub deterministic: bool,
    pub canyon: Vec<ModeCell>,
    pub facade: Vec<WeightingCell>,
    pub alignment: Vec<AlignmentCell>,
    pub summary: BenchSummary,
}

/// Wall-clock seconds per part of the suite.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct BenchTiming {
    pub canyon_s: f64,
    pub facade_s: f64,
    pub alignment_s: f64,
}

pub const CANYON_MODES: [Mode; 3] = [Mode::VioOnly, Mode::VioGps, Mode::VioTwin];

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

pub fn run_canyon(seeds: &[u64], deterministic: bool) -> Result<Vec<ModeCell>, CliError> {
    let per_seed: Vec<Vec<ModeCell>> = seeds
        .par_iter()
        .map(|&seed| {
            let sc = simulate(&canyon_config(seed))?;
            CANYON_MODES
                .iter()
                .map(|&mode| {
                    let r = run_scenario(&sc, mode, deterministic)?;
                    let registration_success_rate = r.session.registration_success_rate();
                    Ok(ModeCell { seed, mode, metrics: r.metrics, registration_success_rate })
                })
                .collect::<Result<Vec<_>, CliError>>()
        })
        .collect::<Result<_, _>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}

pub fn run_facade(seeds: &[u64], deterministic: bool) -> Result<Vec<WeightingCell>, CliError> {
    let per_seed: Vec<Vec<WeightingCell>> = seeds
        .par_iter()
        .map(|&seed| {
            let adaptive = simulate(&facade_config(seed))?;
            let mut isotropic = adaptive.clone();
            isotropic.config.estimator.weighting.isotropic = true;
            [adaptive, isotropic]
                .iter()
                .map(|sc: &Scenario| {
                    let r = run_scenario(sc, Mode::VioTwin, deterministic)?;
                    Ok(WeightingCell { seed, isotropic: sc.config.estimator.weighting.isotropic, metrics: r.metrics })
                })
                .collect::<Result<Vec<_>, CliError>>()
        })
        .collect::<Result<_, _>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}

pub fn run_alignment(seeds: &[u64], deterministic: bool) -> Result<Vec<AlignmentCell>, CliError> {
    seeds
        .par_iter()
        .map(|&seed| {
            let sc = simulate(&alignment_config(seed))?;
            let (t_wl, _) = initial_state(&sc)?;
            let r = run_scenario(&sc, Mode::VioTwin, deterministic)?;
            let err = |e: Option<twinloc::alignment::AlignmentEstimate>| {
                e.map(|e| wrap_angle(e.yaw - t_wl.rotation.yaw()).abs().to_degrees())
            };
            Ok(AlignmentCell {
                seed,
                phase1_heading_error_deg: err(r.session.phase1),
                phase2_heading_error_deg: err(r.session.phase2),
            })
        })
        .collect()
}

pub fn summarize(canyon: &[ModeCell], facade: &[WeightingCell], alignment: &[AlignmentCell]) -> BenchSummary {
    let mode_mean = |mode: Mode, f: fn(&Metrics) -> f64| mean(canyon.iter().filter(|c| c.mode == mode).map(|c| f(&c.metrics)));
    let ate_p = |m: &Metrics| m.ate_p_m;
    let ate_r = |m: &Metrics| m.ate_r_deg;
    let facade_mean = |iso: bool| mean(facade.iter().filter(|c| c.isotropic == iso).map(|c| c.metrics.ate_p_m));
    // A phase that never converged counts as a missing value, which poisons the mean.
    let phase = |f: fn(&AlignmentCell) -> Option<f64>| mean(alignment.iter().map(|c| f(c).unwrap_or(f64::NAN)));
    let p1 = phase(|c| c.phase1_heading_error_deg);
    let p2 = phase(|c| c.phase2_heading_error_deg);
    BenchSummary {
        canyon_ate_p_m: CANYON_MODES.iter().map(|&m| (m, mode_mean(m, ate_p))).collect(),
        canyon_ate_r_deg: CANYON_MODES.iter().map(|&m| (m, mode_mean(m, ate_r))).collect(),
        twin_vs_gps_ate_p_reduction: 1.0 - mode_mean(Mode::VioTwin, ate_p) / mode_mean(Mode::VioGps, ate_p),
        twin_vs_gps_ate_r_reduction: 1.0 - mode_mean(Mode::VioTwin, ate_r) / mode_mean(Mode::VioGps, ate_r),
        facade_adaptive_ate_p_m: facade_mean(false),
        facade_isotropic_ate_p_m: facade_mean(true),
        isotropic_ate_p_degradation: facade_mean(true) / facade_mean(false) - 1.0,
        phase1_heading_error_deg: p1,
        phase2_heading_error_deg: p2,
        heading_error_ratio: p1 / p2,
    }
}

/// Runs every benchmark scenario for each seed.
pub fn run_bench(seeds: &[u64], deterministic: bool) -> Result<(BenchReport, BenchTiming), CliError> {
    let clock = Instant::now();
    let canyon = run_canyon(seeds, deterministic)?;
    let canyon_s = clock.elapsed().as_secs_f64();
    let clock = Instant::now();
    let facade = run_facade(seeds, deterministic)?;
    let facade_s = clock.elapsed().as_secs_f64();
    let clock = Instant::now();
    let alignment = run_alignment(seeds, deterministic)?;
    let alignment_s = clock.elapsed().as_secs_f64();
    let summary = summarize(&canyon, &facade, &alignment);
    let report = BenchReport { seeds: seeds.to_vec(), deterministic, canyon, facade, alignment, summary };
    Ok((report, BenchTiming { canyon_s, facade_s, alignment_s }))
}

/// Plain-text comparison table of the suite.
pub fn format_table(report: &BenchReport) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let _ = writeln!(out, "canyon benchmark (mean over {} seeds)", report.seeds.len());
    let _ = writeln!(out, "  {:<10} {:>10} {:>12}", "mode", "ATE_P [m]", "ATE_R [deg]");
    for ((mode, p), (_, r)) in report.summary.canyon_ate_p_m.iter().zip(&report.summary.canyon_ate_r_deg) {
        let _ = writeln!(out, "  {:<10} {:>10.3} {:>12.3}", mode.as_str(), p, r);
    }
    let s = &report.summary;
    let _ = writeln!(
        out,
        "  vio-twin vs vio-gps: ATE_P -{:.1}%, ATE_R -{:.1}%",
        100.0 * s.twin_vs_gps_ate_p_reduction,
        100.0 * s.twin_vs_gps_ate_r_reduction
    );
    let _ = writeln!(
        out,
        "facade benchmark: adaptive {:.3} m, isotropic {:.3} m ({:+.1}%)",
        s.facade_adaptive_ate_p_m,
        s.facade_isotropic_ate_p_m,
        100.0 * s.isotropic_ate_p_degradation
    );
    let _ = writeln!(
        out,
        "biased-GPS alignment: phase 1 {:.3} deg, phase 2 {:.3} deg (ratio {:.2})",
        s.phase1_heading_error_deg, s.phase2_heading_error_deg, s.heading_error_ratio
    );
    out
}
