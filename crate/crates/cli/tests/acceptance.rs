//! Acceptance suite: one test per criterion, each printing a single
//! `criterion N: PASS|FAIL` line with the measured values.
//!
//! Criteria 1, 2, 6 and 9 share one deterministic run of the five-seed
//! benchmark; criterion 9 runs it a second time and compares the bytes.

use std::f64::consts::PI;
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix6, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use twinloc::alignment::umeyama_yaw;
use twinloc::estimator::{
    imu_residual, keyframe_state, map_residual, preintegrate, visual_residual, EstimatorConfig, ImuNoise,
    KeyframeState, MapFactor, SlidingWindow, STATE_DIM,
};
use twinloc::geometry::{wrap_angle, Pose, Rotation};
use twinloc::gnss::{
    fit_gmm, generate_fix_stream, trilaterate, visible_satellites, FixStreamConfig, GnssModels, MultipathModel,
};
use twinloc::registration::{associate, compute_hessian, compute_weight, iterate_icp, Correspondence, IcpConfig};
use twinloc::simkit::{
    generate_city, synthesize_imu, CityBox, CameraConfig, CameraIntrinsics, CityConfig, ImuSample, NoiseConfig,
    Observation, Trajectory, YawPolicy,
};
use twinloc::twin::{sample_surface, TwinMesh};
use twinloc_cli::bench::{canyon_config, DEFAULT_SEEDS};
use twinloc_cli::commands::{cmd_bench, METRICS_FILE};
use twinloc_cli::scenario::{build_mesh, build_trajectory, fit_gnss_models};

fn verdict(n: u32, pass: bool, detail: String) {
    println!("criterion {n}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {detail}");
}

struct BenchRun {
    metrics_json: String,
    summary: serde_json::Value,
    runtime_s: f64,
}

fn bench_once() -> BenchRun {
    let dir = tempfile::tempdir().unwrap();
    cmd_bench(&DEFAULT_SEEDS, true, dir.path()).unwrap();
    let metrics_json = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let timing: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("timing.json")).unwrap()).unwrap();
    let runtime_s = ["canyon_s", "facade_s", "alignment_s"].iter().map(|k| timing[k].as_f64().unwrap()).sum();
    let report: serde_json::Value = serde_json::from_str(&metrics_json).unwrap();
    BenchRun { summary: report["summary"].clone(), metrics_json, runtime_s }
}

fn bench() -> &'static BenchRun {
    static RUN: OnceLock<BenchRun> = OnceLock::new();
    RUN.get_or_init(bench_once)
}

fn summary(key: &str) -> f64 {
    bench().summary[key].as_f64().unwrap_or(f64::NAN)
}

fn mode_mean(key: &str, mode: &str) -> f64 {
    bench().summary[key]
        .as_array()
        .unwrap()
        .iter()
        .find(|e| e[0] == mode)
        .and_then(|e| e[1].as_f64())
        .unwrap_or(f64::NAN)
}

#[test]
fn criterion_1_registration_factor_benefit() {
    let run = bench();
    let p = summary("twin_vs_gps_ate_p_reduction");
    let r = summary("twin_vs_gps_ate_r_reduction");
    verdict(
        1,
        p >= 0.25 && r >= 0.20 && run.runtime_s <= 600.0,
        format!(
            "ATE_P vio-twin {:.3} m vs vio-gps {:.3} m, reduction {:.1}% (>= 25%); ATE_R {:.3} deg vs {:.3} deg, reduction {:.1}% (>= 20%); bench runtime {:.0} s (<= 600 s)",
            mode_mean("canyon_ate_p_m", "vio-twin"),
            mode_mean("canyon_ate_p_m", "vio-gps"),
            100.0 * p,
            mode_mean("canyon_ate_r_deg", "vio-twin"),
            mode_mean("canyon_ate_r_deg", "vio-gps"),
            100.0 * r,
            run.runtime_s
        ),
    );
}

#[test]
fn criterion_2_adaptive_weighting_ablation() {
    let d = summary("isotropic_ate_p_degradation");
    verdict(
        2,
        d >= 0.20,
        format!(
            "facade ATE_P adaptive {:.3} m, isotropic {:.3} m, degradation {:.1}% (>= 20%)",
            summary("facade_adaptive_ate_p_m"),
            summary("facade_isotropic_ate_p_m"),
            100.0 * d
        ),
    );
}

/// Ground with two buildings: at least three plane orientations.
fn icp_scene() -> (twinloc::twin::SpatialIndex, Vec<Vector3<f64>>) {
    let cfg = CityConfig {
        blocks: [0, 0],
        ground_margin: 30.0,
        ground_tile: Some(10.0),
        extra_boxes: vec![
            CityBox { min: [-15.0, -10.0, 0.0], max: [-3.0, 5.0, 18.0] },
            CityBox { min: [4.0, 2.0, 0.0], max: [14.0, 16.0, 25.0] },
        ],
        ..Default::default()
    };
    let mesh = generate_city(&cfg, 0).unwrap();
    let samples = sample_surface(&mesh, 0.4, 3).unwrap();
    (mesh.build_index(8), samples.points)
}

#[test]
fn criterion_3_icp_recovery() {
    let (index, points) = icp_scene();
    let c = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let noise = Normal::new(0.0, 0.05).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut ok, mut slowest) = (0, 0.0f64);
    const TRIALS: usize = 200;
    for _ in 0..TRIALS {
        let axis = Vector3::from_fn(|_, _| rng.random::<f64>() - 0.5).normalize();
        let t = Vector3::from_fn(|_, _| rng.random::<f64>() - 0.5).normalize() * rng.random::<f64>() * 2.0;
        let angle = rng.random::<f64>() * 10f64.to_radians();
        // Rotation about the cloud centroid, then translation.
        let inj = Pose::from_translation(c)
            .compose(&Pose::new(Rotation::exp(&(axis * angle)), t))
            .compose(&Pose::from_translation(-c));
        let src: Vec<Vector3<f64>> = points
            .iter()
            .map(|p| inj.inverse().transform_point(&(p + Vector3::from_fn(|_, _| noise.sample(&mut rng)))))
            .collect();
        let clock = Instant::now();
        let r = iterate_icp(&src, &index, &Pose::identity(), &c, &IcpConfig::default());
        slowest = slowest.max(clock.elapsed().as_secs_f64());
        let e = inj.inverse().compose(&r.delta_t);
        let (et, er) = ((e.transform_point(&c) - c).norm(), e.rotation.angle().to_degrees());
        if r.converged && et <= 0.05 && er <= 0.5 {
            ok += 1;
        }
    }
    let rate = ok as f64 / TRIALS as f64;
    verdict(
        3,
        rate >= 0.95 && slowest < 0.5,
        format!("{ok}/{TRIALS} within 0.05 m and 0.5 deg ({:.1}% >= 95%); slowest registration {:.3} s (< 0.5 s)", 100.0 * rate, slowest),
    );
}

#[test]
fn criterion_4_degeneracy_detection() {
    let floor = TwinMesh::from_parts(
        vec![
            Vector3::new(-10.0, -10.0, 0.0),
            Vector3::new(10.0, -10.0, 0.0),
            Vector3::new(10.0, 10.0, 0.0),
            Vector3::new(-10.0, 10.0, 0.0),
        ],
        vec![[0, 1, 2], [0, 2, 3]],
    )
    .unwrap()
    .0;
    let index = floor.build_index(4);
    let src: Vec<Vector3<f64>> = (0..36).map(|k| Vector3::new((k % 6) as f64 - 2.5, (k / 6) as f64 * 1.3 - 3.0, 0.2)).collect();
    let corrs = associate(&src, &index, 1.0).unwrap();
    let h = compute_hessian(&corrs);
    let w = compute_weight(&h, 0.2, 1.4e5).unwrap();
    let eig = w.fixed_view::<3, 3>(3, 3).into_owned().symmetric_eigen();
    let ratio = eig.eigenvalues.min() / eig.eigenvalues.max();
    // Rotation about the normal and both in-plane translations.
    let null_axes = [2, 3, 4];
    let mut shared = true;
    for &i in &null_axes {
        let mut e = nalgebra::Vector6::zeros();
        e[i] = 1.0;
        shared &= (h * e).iter().all(|&v| v == 0.0) && (w * e).iter().all(|&v| v == 0.0);
    }
    // Every other eigenvector of H is an eigenvector of W with the same ratio.
    let he = h.symmetric_eigen();
    let c = w.trace() / h.trace();
    for k in 0..6 {
        let v = he.eigenvectors.column(k);
        shared &= (w * v - v * (c * he.eigenvalues[k])).norm() <= 1e-12 * w.norm();
    }
    verdict(4, ratio < 1e-3 && shared, format!("translation eigenvalue ratio {ratio:.3e} (< 1e-3); in-plane null directions shared exactly: {shared}"));
}

const FD_STEP: f64 = 1e-6;

fn random_vec(rng: &mut ChaCha8Rng, scale: f64) -> Vector3<f64> {
    Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * scale
}

fn random_state(rng: &mut ChaCha8Rng) -> KeyframeState {
    KeyframeState {
        t: 0.0,
        pose: Pose::new(Rotation::exp(&random_vec(rng, 1.5)), random_vec(rng, 20.0)),
        velocity: random_vec(rng, 5.0),
        bias_gyro: random_vec(rng, 0.01),
        bias_accel: random_vec(rng, 0.1),
    }
}

/// Central differences over the first `cols` state tangent directions.
fn numeric_jacobian(s: &KeyframeState, cols: usize, f: impl Fn(&KeyframeState) -> DVector<f64>) -> DMatrix<f64> {
    let rows = f(s).len();
    let mut j = DMatrix::zeros(rows, cols);
    for c in 0..cols {
        let mut d = [0.0; STATE_DIM];
        d[c] = FD_STEP;
        let plus = f(&s.retract(&d));
        d[c] = -FD_STEP;
        j.column_mut(c).copy_from(&((plus - f(&s.retract(&d))) / (2.0 * FD_STEP)));
    }
    j
}

fn relative_error(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> f64 {
    (analytic - numeric).norm() / numeric.norm().max(1.0)
}

fn dyn_vec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

#[test]
fn criterion_5_jacobian_suite() {
    const CONFIGS: u64 = 100;
    let intr = CameraIntrinsics::default();
    let t_bc = CameraConfig::default().body_to_camera();
    let gravity = Vector3::new(0.0, 0.0, -9.81);
    let mut worst = [0.0f64; 4];
    for trial in 0..CONFIGS {
        let mut rng = ChaCha8Rng::seed_from_u64(50_000 + trial);

        let s = random_state(&mut rng);
        let pc = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-4.0..4.0), rng.random_range(3.0..40.0));
        let lm = s.pose.compose(&t_bc).transform_point(&pc);
        let px = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
        let e = visual_residual(&s, &lm, &px, &intr, &t_bc).unwrap();
        let num = numeric_jacobian(&s, 6, |x| dyn_vec(visual_residual(x, &lm, &px, &intr, &t_bc).unwrap().residual.as_slice()));
        let mut num_l = DMatrix::zeros(2, 3);
        for c in 0..3 {
            let mut d = Vector3::zeros();
            d[c] = FD_STEP;
            let p = visual_residual(&s, &(lm + d), &px, &intr, &t_bc).unwrap().residual;
            let m = visual_residual(&s, &(lm - d), &px, &intr, &t_bc).unwrap().residual;
            num_l.column_mut(c).copy_from(&((p - m) / (2.0 * FD_STEP)));
        }
        worst[0] = worst[0]
            .max(relative_error(&DMatrix::from_column_slice(2, 6, e.d_pose.as_slice()), &num))
            .max(relative_error(&DMatrix::from_column_slice(2, 3, e.d_landmark.as_slice()), &num_l));

        let w0 = random_vec(&mut rng, 0.5);
        let a0 = random_vec(&mut rng, 2.0) + Vector3::new(0.0, 0.0, 9.81);
        let samples: Vec<ImuSample> = (0..41)
            .map(|k| {
                let t = k as f64 / 200.0;
                ImuSample { t, gyro: w0 * (1.0 + t), accel: a0 + Vector3::new(t.sin(), t, -t) }
            })
            .collect();
        let (bg, ba) = (random_vec(&mut rng, 0.01), random_vec(&mut rng, 0.1));
        let pre = preintegrate(&samples, 0.0, 0.2, &bg, &ba, &ImuNoise::default()).unwrap();
        let mut si = random_state(&mut rng);
        si.bias_gyro = bg + random_vec(&mut rng, 0.005);
        si.bias_accel = ba + random_vec(&mut rng, 0.05);
        let mut sj = random_state(&mut rng);
        sj.pose.rotation = si.pose.rotation * pre.delta_r * Rotation::exp(&random_vec(&mut rng, 0.3));
        let e = imu_residual(&si, &sj, &pre, &gravity);
        let num_i = numeric_jacobian(&si, STATE_DIM, |x| dyn_vec(imu_residual(x, &sj, &pre, &gravity).residual.as_slice()));
        let num_j = numeric_jacobian(&sj, STATE_DIM, |x| dyn_vec(imu_residual(&si, x, &pre, &gravity).residual.as_slice()));
        worst[1] = worst[1]
            .max(relative_error(&DMatrix::from_column_slice(9, STATE_DIM, e.d_i.as_slice()), &num_i))
            .max(relative_error(&DMatrix::from_column_slice(9, STATE_DIM, e.d_j.as_slice()), &num_j));

        let s = random_state(&mut rng);
        let measured =
            Pose::new(s.pose.rotation * Rotation::exp(&random_vec(&mut rng, 0.5)), s.pose.translation + random_vec(&mut rng, 3.0));
        let f = MapFactor { t: 0.0, measured, weight: Matrix6::identity() };
        let e = map_residual(&s, &f);
        let num = numeric_jacobian(&s, 6, |x| dyn_vec(map_residual(x, &f).stacked().as_slice()));
        worst[2] = worst[2].max(relative_error(&DMatrix::from_column_slice(6, 6, e.d_pose.as_slice()), &num));

        // ICP rows are the negative gradient of the point-to-plane offset
        // under a left perturbation of the source point.
        let corrs: Vec<Correspondence> = (0..20)
            .map(|_| {
                let a = random_vec(&mut rng, 30.0);
                Correspondence { a, b: a + random_vec(&mut rng, 0.5), n: random_vec(&mut rng, 1.0).normalize(), distance: 0.0 }
            })
            .collect();
        let analytic = DMatrix::from_fn(corrs.len(), 6, |r, c| corrs[r].jacobian_row()[c]);
        let offsets = |x: &nalgebra::Vector6<f64>| -> DVector<f64> {
            let d = Pose::new(Rotation::exp(&x.fixed_rows::<3>(0).into_owned()), x.fixed_rows::<3>(3).into_owned());
            DVector::from_iterator(corrs.len(), corrs.iter().map(|k| k.n.dot(&(d.transform_point(&k.a) - k.b))))
        };
        let mut num = DMatrix::zeros(corrs.len(), 6);
        for c in 0..6 {
            let mut x = nalgebra::Vector6::zeros();
            x[c] = FD_STEP;
            num.column_mut(c).copy_from(&(-(offsets(&x) - offsets(&(-x))) / (2.0 * FD_STEP)));
        }
        worst[3] = worst[3].max(relative_error(&analytic, &num));
    }
    let pass = worst.iter().all(|&e| e <= 1e-5);
    verdict(
        5,
        pass,
        format!(
            "worst relative error over {CONFIGS} configurations: visual {:.2e}, inertial {:.2e}, map {:.2e}, ICP {:.2e} (<= 1e-5)",
            worst[0], worst[1], worst[2], worst[3]
        ),
    );
}

#[test]
fn criterion_6_frame_alignment() {
    let ratio = summary("heading_error_ratio");
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let local: Vec<Vector3<f64>> = (0..20).map(|_| random_vec(&mut rng, 40.0)).collect();
        let yaw = rng.random_range(-PI..PI);
        let t = random_vec(&mut rng, 100.0);
        let global: Vec<Vector3<f64>> = local.iter().map(|l| Rotation::about_z(yaw).rotate(l) + t).collect();
        let est = umeyama_yaw(&global, &local).unwrap();
        worst = worst.max(wrap_angle(est.yaw - yaw).abs()).max((est.translation - t).norm());
    }
    verdict(
        6,
        ratio >= 3.0 && worst <= 1e-9,
        format!(
            "heading error phase 1 {:.3} deg, phase 2 {:.3} deg, ratio {:.2} (>= 3); noiseless yaw alignment worst error {:.1e} (<= 1e-9)",
            summary("phase1_heading_error_deg"),
            summary("phase2_heading_error_deg"),
            ratio,
            worst
        ),
    );
}

#[test]
fn criterion_7_gnss_pipeline() {
    // Exact ranges from six satellites.
    let truth = Vector3::new(12.0, -7.0, 30.0);
    let sats: Vec<Vector3<f64>> = (0..6)
        .map(|i| {
            let (az, el) = (i as f64 * 1.1, 0.3 + 0.2 * i as f64);
            Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * 2.0e7
        })
        .collect();
    let ranges: Vec<f64> = sats.iter().map(|s| (s - truth).norm() + 42.0).collect();
    let trilat_err = (trilaterate(&sats, &ranges, &Vector3::zeros(), 1.5).unwrap().position - truth).norm();

    // Two-component generator with means 0 and 15 m.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (a, b) = (Normal::new(0.0, 1.0).unwrap(), Normal::new(15.0, 2.0).unwrap());
    let data: Vec<f64> = (0..5000).map(|_| if rng.random::<f64>() < 0.7 { a.sample(&mut rng) } else { b.sample(&mut rng) }).collect();
    let mut means: Vec<f64> = fit_gmm(&data, 2, 3).unwrap().gmm.components.iter().map(|c| c.mean).collect();
    means.sort_by(f64::total_cmp);
    let gmm_err = means[0].abs().max((means[1] - 15.0).abs());

    // Matched runs: same trajectory, seed and receiver noise, with and without the canyon.
    let cfg = canyon_config(1);
    let traj = build_trajectory(&cfg).unwrap();
    let canyon_mesh = build_mesh(&cfg).unwrap();
    let canyon_index = canyon_mesh.build_index(8);
    let canyon_models = fit_gnss_models(&cfg, &canyon_mesh).unwrap().models;
    let open_mesh = generate_city(&CityConfig { blocks: [0, 0], ground_margin: 200.0, ..Default::default() }, 1).unwrap();
    let open_index = open_mesh.build_index(8);
    let open_models = GnssModels { constellation: canyon_models.constellation.clone(), count_gp: None, multipath: MultipathModel::zero() };
    let fixes_cfg = FixStreamConfig { rate: 5.0, ..cfg.gnss.fixes.clone() };
    let canyon = generate_fix_stream(&traj, &canyon_index, &canyon_models, &fixes_cfg, cfg.seed).unwrap();
    let open = generate_fix_stream(&traj, &open_index, &open_models, &fixes_cfg, cfg.seed).unwrap();
    let rmse = |fixes: &[twinloc::gnss::GpsFix]| {
        (fixes.iter().map(|f| (f.position - traj.position(f.t)).norm_squared()).sum::<f64>() / fixes.len() as f64).sqrt()
    };
    let (canyon_rmse, open_rmse) = (rmse(&canyon), rmse(&open));

    // A fix at every 0.2 s epoch with four or more visible satellites, and nowhere else.
    let epochs = (traj.duration() * 5.0 + 1e-9).floor() as usize + 1;
    let mut rate_ok = true;
    for (fixes, index) in [(&canyon, &canyon_index), (&open, &open_index)] {
        let expected: Vec<f64> = (0..epochs)
            .map(|k| k as f64 / 5.0)
            .filter(|&t| visible_satellites(&traj.position(t), &canyon_models.constellation, index, fixes_cfg.mask_deg).len() >= 4)
            .collect();
        let got: Vec<f64> = fixes.iter().map(|f| f.t).collect();
        rate_ok &= got == expected;
    }
    rate_ok &= open.len() == epochs;

    verdict(
        7,
        trilat_err < 1e-6 && gmm_err <= 0.5 && canyon_rmse > open_rmse && rate_ok,
        format!(
            "trilateration error {trilat_err:.1e} m (< 1e-6); GMM means {:.3}/{:.3} m (within 0.5 of 0/15); fix RMSE canyon {canyon_rmse:.2} m > open sky {open_rmse:.2} m; 5 Hz epochs exact: {rate_ok} ({} canyon, {} open of {epochs})",
            means[0],
            means[1],
            canyon.len(),
            open.len()
        ),
    );
}

fn segment_distance(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let ab = b - a;
    let s = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    (p - (a + ab * s)).norm()
}

fn brute_triangle_distance(p: &Vector3<f64>, [a, b, c]: [Vector3<f64>; 3]) -> f64 {
    let n = (b - a).cross(&(c - a)).normalize();
    let d = (p - a).dot(&n);
    let q = p - n * d;
    if [(a, b), (b, c), (c, a)].iter().all(|(u, v)| (v - u).cross(&(q - u)).dot(&n) >= 0.0) {
        d.abs()
    } else {
        segment_distance(p, &a, &b).min(segment_distance(p, &b, &c)).min(segment_distance(p, &c, &a))
    }
}

fn brute_ray_distance(o: &Vector3<f64>, dir: &Vector3<f64>, [a, b, c]: [Vector3<f64>; 3]) -> Option<f64> {
    let n = (b - a).cross(&(c - a));
    let denom = n.dot(dir);
    if denom.abs() < 1e-12 {
        return None;
    }
    let t = n.dot(&(a - o)) / denom;
    let q = o + dir * t;
    (t > 1e-9 && [(a, b), (b, c), (c, a)].iter().all(|(u, v)| (v - u).cross(&(q - u)).dot(&n) >= 0.0)).then_some(t)
}

/// Largest relative difference between the prior left by dropping the
/// oldest keyframe and a dense elimination of that keyframe together with
/// all landmarks, over a five-keyframe visual-inertial window.
fn marginalization_mismatch() -> (f64, usize) {
    let wps: Vec<Vector3<f64>> = (0..40)
        .map(|k| {
            let a = k as f64 * 0.25;
            Vector3::new(20.0 * a.cos(), 20.0 * a.sin(), 5.0 + 0.3 * k as f64)
        })
        .collect();
    let traj = Trajectory::from_waypoints(&wps, 5.0, &YawPolicy::FollowVelocity { offset: 0.0 }).unwrap();
    let imu = synthesize_imu(&traj, 200.0, &NoiseConfig::noiseless(1)).unwrap();
    let t_bc = CameraConfig::default().body_to_camera();
    let intr = CameraIntrinsics::default();
    let points: Vec<Vector3<f64>> = (0..200)
        .map(|k| {
            let a = k as f64 * 0.7;
            let r = 35.0 + (k % 7) as f64 * 3.0;
            Vector3::new(r * a.cos(), r * a.sin(), 2.0 + (k % 11) as f64 * 1.5)
        })
        .collect();
    let times: Vec<f64> = (0..5).map(|k| k as f64 * 0.2).collect();
    let all: Vec<Vec<Observation>> = times
        .iter()
        .map(|&t| {
            let t_cl = traj.pose(t).compose(&t_bc).inverse();
            points
                .iter()
                .enumerate()
                .filter_map(|(i, p)| {
                    intr.project(&t_cl.transform_point(p))
                        .filter(|px| intr.in_bounds(px))
                        .map(|pixel| Observation { landmark_id: i as u32, pixel })
                })
                .collect()
        })
        .collect();
    let seen_by_all = |o: &Observation| all.iter().all(|v| v.iter().any(|x| x.landmark_id == o.landmark_id));
    let obs: Vec<Vec<Observation>> = all.iter().map(|v| v.iter().filter(|o| seen_by_all(o)).cloned().collect()).collect();

    let mut sigmas = [1e-3; STATE_DIM];
    sigmas[9..].fill(1e-2);
    // No solver iterations: landmarks are triangulated from the perturbed poses.
    let cfg = EstimatorConfig { window_size: 4, max_iterations: 0, ..Default::default() };
    let first = keyframe_state(0.0, traj.pose(0.0), traj.velocity(0.0));
    let mut w = SlidingWindow::new(cfg, intr, t_bc, first, &sigmas, &obs[0]);
    for k in 1..times.len() {
        let pre = preintegrate(&imu.samples, times[k - 1], times[k], &Vector3::zeros(), &Vector3::zeros(), &ImuNoise::default()).unwrap();
        let mut guess = w.predict(&pre);
        guess.pose.translation += Vector3::new(0.02, -0.01, 0.015) * k as f64;
        w.push_keyframe(guess, pre, &obs[k]).unwrap();
    }
    w.optimize().unwrap();
    let landmarks = w.active_landmark_ids().len();

    let eliminate = |h: &DMatrix<f64>, g: &DVector<f64>, drop: &[usize]| {
        let keep: Vec<usize> = (0..h.nrows()).filter(|i| !drop.contains(i)).collect();
        let pick = |r: &[usize], c: &[usize]| DMatrix::from_fn(r.len(), c.len(), |i, j| h[(r[i], c[j])]);
        let inv = pick(drop, drop).try_inverse().unwrap();
        let hkd = pick(&keep, drop);
        let gk = DVector::from_fn(keep.len(), |i, _| g[keep[i]]);
        let gd = DVector::from_fn(drop.len(), |i, _| g[drop[i]]);
        (pick(&keep, &keep) - &hkd * &inv * hkd.transpose(), gk - &hkd * &inv * gd)
    };
    let (h, g, nk) = w.full_normal_equations();
    let drop: Vec<usize> = (0..STATE_DIM).chain(nk..h.nrows()).collect();
    let (h_oracle, g_oracle) = eliminate(&h, &g, &drop);
    w.marginalize_oldest().unwrap();
    let (h2, g2, nk2) = w.full_normal_equations();
    let (h_post, g_post) = eliminate(&h2, &g2, &(nk2..h2.nrows()).collect::<Vec<_>>());
    let dh = (&h_post - &h_oracle).norm() / h_oracle.norm();
    let dg = (&g_post - &g_oracle).norm() / g_oracle.norm();
    (dh.max(dg), landmarks)
}

#[test]
fn criterion_8_oracle_equivalence() {
    let mesh = generate_city(
        &CityConfig {
            blocks: [3, 3],
            ground_tile: Some(12.0),
            extra_boxes: vec![CityBox { min: [-5.0, -5.0, 0.0], max: [5.0, 5.0, 12.0] }],
            ..Default::default()
        },
        11,
    )
    .unwrap();
    let index = mesh.build_index(8);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut point = || Vector3::new(rng.random_range(-120.0..120.0), rng.random_range(-120.0..120.0), rng.random_range(-5.0..80.0));
    let (mut closest_err, mut ray_err, mut ray_mismatch) = (0.0f64, 0.0f64, 0);
    for _ in 0..1000 {
        let q = point();
        let brute = (0..mesh.len()).map(|i| brute_triangle_distance(&q, mesh.triangle(i))).fold(f64::INFINITY, f64::min);
        closest_err = closest_err.max((index.closest_point(&q).unwrap().distance - brute).abs());
    }
    for _ in 0..1000 {
        let o = point();
        let dir = (point() - o).normalize();
        let brute = (0..mesh.len()).filter_map(|i| brute_ray_distance(&o, &dir, mesh.triangle(i))).fold(f64::INFINITY, f64::min);
        match index.ray_cast(&o, &dir) {
            Some(hit) => ray_err = ray_err.max((hit.distance - brute).abs()),
            None if brute.is_finite() => ray_mismatch += 1,
            None => {}
        }
    }
    let (marg, landmarks) = marginalization_mismatch();
    verdict(
        8,
        closest_err <= 1e-9 && ray_err <= 1e-9 && ray_mismatch == 0 && marg <= 1e-8 && landmarks > 0,
        format!(
            "closest point max error {closest_err:.1e}, ray cast max error {ray_err:.1e} with {ray_mismatch} missed hits over {} triangles (<= 1e-9); marginal prior relative error {marg:.1e} with {landmarks} landmarks (<= 1e-8)",
            mesh.len()
        ),
    );
}

#[test]
fn criterion_9_determinism() {
    let first = &bench().metrics_json;
    let second = bench_once().metrics_json;
    verdict(9, *first == second, format!("metrics JSON of two deterministic runs: {} and {} bytes, identical: {}", first.len(), second.len(), *first == second));
}
