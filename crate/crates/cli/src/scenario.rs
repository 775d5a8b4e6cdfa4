//! Builds a complete simulated scenario from an experiment configuration.

use nalgebra::Vector3;

use twinloc::geometry::Pose;
use twinloc::gnss::{
    build_training_sets, fit_gp, fit_multipath, generate_fix_stream, Constellation, GnssModels, GpsFix, SatCountGp,
    TrainingSets,
};
use twinloc::rng::substream_seed;
use twinloc::simkit::{
    generate_city, loop_waypoints, synthesize_imu, synthesize_observations, FrameObservations, ImuSample, Landmarks,
    Trajectory,
};
use twinloc::twin::{sample_surface, TwinMesh};

use crate::config::ExperimentConfig;
use crate::error::CliError;

/// Ground-truth body state at a camera timestamp.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruthSample {
    pub t: f64,
    pub pose: Pose,
    pub velocity: Vector3<f64>,
}

/// Everything a run consumes, held in memory.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub config: ExperimentConfig,
    pub mesh: TwinMesh,
    pub ground_truth: Vec<GroundTruthSample>,
    pub imu: Vec<ImuSample>,
    pub gyro_bias: Vector3<f64>,
    pub accel_bias: Vector3<f64>,
    pub frames: Vec<FrameObservations>,
    pub fixes: Vec<GpsFix>,
    pub gnss_models: GnssModels,
}

pub fn build_mesh(cfg: &ExperimentConfig) -> Result<TwinMesh, CliError> {
    match &cfg.scene.mesh {
        Some(path) => Ok(TwinMesh::load(path)?.mesh),
        None => Ok(generate_city(&cfg.scene.city, cfg.seed)?),
    }
}

pub fn build_trajectory(cfg: &ExperimentConfig) -> Result<Trajectory, CliError> {
    let t = &cfg.trajectory;
    let waypoints: Vec<Vector3<f64>> = match (&t.loop_shape, &t.waypoints) {
        (Some(shape), None) => loop_waypoints(shape)?,
        (None, Some(w)) => w.iter().map(|p| Vector3::from(*p)).collect(),
        _ => return Err(CliError::config("trajectory", "set exactly one of `loop` or `waypoints`")),
    };
    Ok(Trajectory::from_waypoints(&waypoints, t.speed, &t.yaw)?)
}

pub fn constellation(cfg: &ExperimentConfig) -> Result<Constellation, CliError> {
    match &cfg.gnss.sky {
        Some(dirs) => {
            let d: Vec<(f64, f64)> = dirs.iter().map(|[az, el]| (az.to_radians(), el.to_radians())).collect();
            Ok(Constellation::from_az_el(&d)?)
        }
        None => Ok(Constellation::default_sky()),
    }
}

/// Fitted GNSS models plus the training data behind them.
pub struct FittedGnss {
    pub models: GnssModels,
    pub training: TrainingSets,
}

pub fn fit_gnss_models(cfg: &ExperimentConfig, mesh: &TwinMesh) -> Result<FittedGnss, CliError> {
    let index = mesh.build_index(8);
    let sky = constellation(cfg)?;
    let training = build_training_sets(mesh, &index, &sky, &cfg.gnss.training, cfg.seed)?;
    let count_gp: Option<SatCountGp> = Some(fit_gp(&training.counts, cfg.gnss.gp)?);
    let multipath = fit_multipath(&training.multipath, &cfg.gnss.multipath, cfg.seed)?;
    Ok(FittedGnss { models: GnssModels { constellation: sky, count_gp, multipath }, training })
}

pub fn load_gnss_models(path: &std::path::Path) -> Result<GnssModels, CliError> {
    #[derive(serde::Deserialize)]
    struct File {
        models: GnssModels,
    }
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let f: File = serde_json::from_str(&text)
        .map_err(|e| CliError::Parse { file: path.display().to_string(), message: e.to_string() })?;
    Ok(f.models)
}

/// Landmarks sampled on the twin surface; identical for equal seeds.
pub fn scene_landmarks(cfg: &ExperimentConfig, mesh: &TwinMesh) -> Result<Landmarks, CliError> {
    let samples = sample_surface(mesh, cfg.scene.landmark_density, substream_seed(cfg.seed, "landmarks"))?;
    Ok(Landmarks::from_samples(&samples))
}

/// Simulates every sensor stream for the configuration.
pub fn simulate(cfg: &ExperimentConfig) -> Result<Scenario, CliError> {
    cfg.validate()?;
    let mesh = build_mesh(cfg)?;
    let traj = build_trajectory(cfg)?;
    let index = mesh.build_index(8);

    let mut noise = cfg.sensors.noise.clone();
    noise.seed = cfg.seed;
    let imu = synthesize_imu(&traj, cfg.sensors.imu_rate, &noise)?;
    let landmarks = scene_landmarks(cfg, &mesh)?;
    let frames = synthesize_observations(&traj, &landmarks, &index, &cfg.sensors.camera, &noise)?;
    let ground_truth =
        frames.iter().map(|f| GroundTruthSample { t: f.t, pose: traj.pose(f.t), velocity: traj.velocity(f.t) }).collect();

    let gnss_models = match &cfg.gnss.model {
        Some(path) => load_gnss_models(path)?,
        None => fit_gnss_models(cfg, &mesh)?.models,
    };
    let mut fixes = generate_fix_stream(&traj, &index, &gnss_models, &cfg.gnss.fixes, cfg.seed)?;
    for fix in &mut fixes {
        for b in &cfg.gnss.bias {
            if fix.t >= b.t0 && fix.t <= b.t1 {
                fix.position += Vector3::from(b.offset);
            }
        }
    }
    Ok(Scenario {
        config: cfg.clone(),
        mesh,
        ground_truth,
        gyro_bias: noise.initial_gyro_bias.into(),
        accel_bias: noise.initial_accel_bias.into(),
        imu: imu.samples,
        frames,
        fixes,
        gnss_models,
    })
}
