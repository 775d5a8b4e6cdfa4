//! Runs the estimator on a scenario and scores the result.

use twinloc::estimator::{run_session, KeyframeState, Mode, SessionInputs, SessionOutput};
use twinloc::evaluation::{evaluate, EvalAlignment, FrameTag, Metrics, TrajectoryRecord};
use twinloc::geometry::Pose;

use crate::error::CliError;
use crate::scenario::Scenario;

/// Gravity-aligned local frame anchored at the first body pose.
pub fn local_frame_origin(first: &Pose) -> Pose {
    Pose::from_yaw(first.rotation.yaw(), first.translation)
}

/// First keyframe state expressed in the local frame.
pub fn initial_state(sc: &Scenario) -> Result<(Pose, KeyframeState), CliError> {
    let first = sc.ground_truth.first().ok_or_else(|| CliError::Bundle("scenario has no camera frames".into()))?;
    let t_wl = local_frame_origin(&first.pose);
    let t_lw = t_wl.inverse();
    let state = KeyframeState {
        t: first.t,
        pose: t_lw.compose(&first.pose),
        velocity: t_lw.rotation.rotate(&first.velocity),
        bias_gyro: sc.gyro_bias,
        bias_accel: sc.accel_bias,
    };
    Ok((t_wl, state))
}

pub struct RunResult {
    pub session: SessionOutput,
    /// Estimated trajectory as emitted: world frame when an alignment
    /// exists, else local.
    pub estimate: TrajectoryRecord,
    pub ground_truth: TrajectoryRecord,
    pub alignment_mode: EvalAlignment,
    pub metrics: Metrics,
}

pub fn ground_truth_record(sc: &Scenario) -> Result<TrajectoryRecord, CliError> {
    Ok(TrajectoryRecord::new(FrameTag::World, "ground-truth", sc.ground_truth.iter().map(|g| (g.t, g.pose)).collect())?)
}

/// Runs the configured estimator in `mode` and evaluates it at keyframes.
pub fn run_scenario(sc: &Scenario, mode: Mode, deterministic: bool) -> Result<RunResult, CliError> {
    let (_, initial) = initial_state(sc)?;
    let mut cfg = sc.config.estimator.clone();
    cfg.deterministic = deterministic;
    let inputs = SessionInputs {
        imu: &sc.imu,
        frames: &sc.frames,
        fixes: &sc.fixes,
        twin: Some(&sc.mesh),
        body_to_camera: sc.config.sensors.camera.body_to_camera(),
        initial,
    };
    let session = run_session(inputs, mode, &cfg)?;
    let (estimate, alignment_mode) = match &session.trajectory_world {
        Some(world) if mode != Mode::VioOnly => {
            (TrajectoryRecord::new(FrameTag::World, mode.as_str(), world.clone())?, EvalAlignment::None)
        }
        _ => (
            TrajectoryRecord::new(FrameTag::Local, mode.as_str(), session.trajectory_local.clone())?,
            EvalAlignment::Yaw4dof,
        ),
    };
    let ground_truth = ground_truth_record(sc)?;
    let metrics = evaluate(&ground_truth, &estimate, alignment_mode, &sc.config.hash(), sc.config.seed)?;
    Ok(RunResult { session, estimate, ground_truth, alignment_mode, metrics })
}
