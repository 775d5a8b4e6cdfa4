//! Mode driver: runs the sliding window over recorded sensor streams with
//! GPS bootstrap, frame alignment and twin registration.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use super::factors::{derive_map_measurement, GpsFactor, KeyframeState, STATE_DIM};
use super::preint::preintegrate;
use super::window::{CostBreakdown, EstimatorConfig, SlidingWindow};
use super::EstimatorError;
use crate::alignment::{nearest_stamp, AlignmentConfig, AlignmentEstimate, AlignmentLogEntry, FrameAligner};
use crate::geometry::Pose;
use crate::gnss::GpsFix;
use crate::registration::{
    run_request, IcpConfig, RegistrationLogEntry, RegistrationRequest, RegistrationResponse, RegistrationWorker,
    Weighting,
};
use crate::simkit::{FrameObservations, ImuSample};
use crate::twin::{crop_local, TwinMesh};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "vio-only")]
    VioOnly,
    #[serde(rename = "vio-gps")]
    VioGps,
    #[serde(rename = "vio-twin")]
    VioTwin,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::VioOnly => "vio-only",
            Mode::VioGps => "vio-gps",
            Mode::VioTwin => "vio-twin",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vio-only" => Ok(Mode::VioOnly),
            "vio-gps" => Ok(Mode::VioGps),
            "vio-twin" => Ok(Mode::VioTwin),
            other => Err(format!("unknown mode '{other}' (expected vio-only, vio-gps or vio-twin)")),
        }
    }
}

/// Standard deviations of the prior anchoring the first keyframe.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitialPriorSigmas {
    pub rotation: f64,
    pub position: f64,
    pub velocity: f64,
    pub gyro_bias: f64,
    pub accel_bias: f64,
}

impl Default for InitialPriorSigmas {
    fn default() -> Self {
        Self { rotation: 1e-3, position: 1e-3, velocity: 1e-2, gyro_bias: 1e-3, accel_bias: 1e-2 }
    }
}

impl InitialPriorSigmas {
    pub fn as_array(&self) -> [f64; STATE_DIM] {
        let mut s = [0.0; STATE_DIM];
        for (k, v) in [self.rotation, self.position, self.velocity, self.gyro_bias, self.accel_bias].iter().enumerate() {
            s[3 * k..3 * k + 3].fill(*v);
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub estimator: EstimatorConfig,
    /// Camera frames per keyframe.
    pub keyframe_stride: usize,
    pub alignment: AlignmentConfig,
    pub icp: IcpConfig,
    pub weighting: Weighting,
    /// Half side of the square twin crop around the current position (m).
    pub crop_half_extent: f64,
    pub index_leaf_size: usize,
    /// Minimum landmark count for a registration attempt.
    pub min_registration_points: usize,
    pub initial_prior: InitialPriorSigmas,
    /// Pairing tolerance between keyframes and GPS fixes (s).
    pub gps_max_dt: f64,
    /// Run registration inline on the estimator thread.
    pub deterministic: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            estimator: EstimatorConfig::default(),
            keyframe_stride: 6,
            alignment: AlignmentConfig::default(),
            icp: IcpConfig::default(),
            weighting: Weighting::default(),
            crop_half_extent: 75.0,
            index_leaf_size: 8,
            min_registration_points: 30,
            initial_prior: InitialPriorSigmas::default(),
            gps_max_dt: 0.1,
            deterministic: true,
        }
    }
}

/// Recorded streams for one run. `initial` is the first keyframe state in
/// the local frame and must carry the first camera frame's timestamp.
#[derive(Clone, Copy, Debug)]
pub struct SessionInputs<'a> {
    pub imu: &'a [ImuSample],
    pub frames: &'a [FrameObservations],
    pub fixes: &'a [GpsFix],
    pub twin: Option<&'a TwinMesh>,
    pub body_to_camera: Pose,
    pub initial: KeyframeState,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegistrationStatus {
    NotAttempted,
    Pending,
    Converged,
    Failed,
    /// Converged after its keyframe left the window.
    Late,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyframeDiagnostics {
    pub keyframe: u64,
    pub t: f64,
    pub window_size: usize,
    pub cost: CostBreakdown,
    pub iterations: usize,
    pub converged: bool,
    pub stalled: bool,
    pub gps_factor: bool,
    pub map_factor: bool,
    pub registration: RegistrationStatus,
}

/// Registered world body pose with the registration weight, which acts on
/// `[rotation; translation]` perturbations applied on the left about the
/// linearization center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapMeasurement {
    pub t: f64,
    pub world_pose: Pose,
    pub linearization_center: Vector3<f64>,
    pub weight: Matrix6<f64>,
}

impl MapMeasurement {
    /// Normalized squared error against a true world body pose.
    pub fn nees(&self, truth: &Pose) -> f64 {
        let c = Pose::from_translation(self.linearization_center);
        let e = c.inverse().compose(&self.world_pose.compose(&truth.inverse())).compose(&c);
        let mut x = Vector6::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&e.rotation.log());
        x.fixed_rows_mut::<3>(3).copy_from(&e.translation);
        (x.transpose() * self.weight * x)[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionOutput {
    pub mode: Mode,
    /// Keyframe poses `T_LB`, fixed when each keyframe leaves the window.
    pub trajectory_local: Vec<(f64, Pose)>,
    /// World poses `T_WL T_LB`. A keyframe uses the alignment current when
    /// it left the window if that alignment had converged, else the first
    /// converged one (or the final estimate); `None` without any alignment.
    pub trajectory_world: Option<Vec<(f64, Pose)>>,
    pub alignment: Option<AlignmentEstimate>,
    pub phase1: Option<AlignmentEstimate>,
    pub phase2: Option<AlignmentEstimate>,
    pub alignment_log: Vec<AlignmentLogEntry>,
    pub registration_log: Vec<RegistrationLogEntry>,
    /// Registrations that became map factors.
    pub map_measurements: Vec<MapMeasurement>,
    pub registration_attempts: usize,
    pub registration_converged: usize,
    pub diagnostics: Vec<KeyframeDiagnostics>,
}

impl SessionOutput {
    pub fn registration_success_rate(&self) -> Option<f64> {
        (self.registration_attempts > 0).then(|| self.registration_converged as f64 / self.registration_attempts as f64)
    }
}

/// Failure of a run, carrying the last keyframe that was solved cleanly.
#[derive(Clone, Debug, PartialEq, thiserror::Error)]
#[error("estimation failed after keyframe {last_good:?} (t = {t}): {source}")]
pub struct SessionError {
    pub last_good: Option<u64>,
    pub t: f64,
    pub source: EstimatorError,
}

struct Snapshot {
    t_wl: Pose,
    t_lb: Pose,
    /// Taken with the frozen registration-refined alignment.
    final_alignment: bool,
}

struct Session<'a> {
    mode: Mode,
    cfg: &'a SessionConfig,
    inputs: SessionInputs<'a>,
    window: SlidingWindow,
    aligner: FrameAligner,
    worker: Option<RegistrationWorker>,
    pending: BTreeMap<u64, Snapshot>,
    diagnostics: Vec<KeyframeDiagnostics>,
    departed: Vec<(f64, Pose, Option<Pose>)>,
    registration_log: Vec<RegistrationLogEntry>,
    map_measurements: Vec<MapMeasurement>,
    attempts: usize,
    successes: usize,
}

impl Session<'_> {
    fn phase1_frozen(&self) -> bool {
        self.aligner.phase1().is_some_and(|e| e.converged)
    }

    fn phase2_frozen(&self) -> bool {
        self.aligner.phase2().is_some_and(|e| e.converged)
    }

    fn gps_fusion_active(&self) -> bool {
        match self.mode {
            Mode::VioOnly => false,
            Mode::VioGps => self.phase1_frozen(),
            Mode::VioTwin => self.phase1_frozen() && !self.phase2_frozen(),
        }
    }

    fn current_t_wl(&self) -> Option<Pose> {
        self.aligner.current().map(|e| e.pose())
    }

    fn handle_response(&mut self, resp: RegistrationResponse) {
        let id = resp.keyframe as u64;
        let Some(snap) = self.pending.remove(&id) else { return };
        self.registration_log.push(RegistrationLogEntry::new(resp.t, &resp.result));
        let status = if resp.result.converged {
            self.successes += 1;
            if snap.final_alignment {
                let factor = derive_map_measurement(&resp.result, &snap.t_wl, &snap.t_lb, resp.t);
                self.map_measurements.push(MapMeasurement {
                    t: resp.t,
                    world_pose: resp.result.delta_t.compose(&snap.t_wl).compose(&snap.t_lb),
                    linearization_center: resp.result.linearization_center,
                    weight: resp.result.weight,
                });
                if self.window.set_map_factor(id, factor) {
                    self.diagnostics[id as usize].map_factor = true;
                    RegistrationStatus::Converged
                } else {
                    RegistrationStatus::Late
                }
            } else {
                let global = resp.result.delta_t.compose(&snap.t_wl).compose(&snap.t_lb).translation;
                self.aligner.add_registration_pair(resp.t, global, snap.t_lb.translation);
                RegistrationStatus::Converged
            }
        } else {
            RegistrationStatus::Failed
        };
        self.diagnostics[id as usize].registration = status;
    }

    fn drain_worker(&mut self) {
        let ready = self.worker.as_ref().map(|w| w.poll()).unwrap_or_default();
        for r in ready {
            self.handle_response(r);
        }
    }

    fn maybe_register(&mut self, id: u64, t: f64) {
        let Some(mesh) = self.inputs.twin else { return };
        if self.mode != Mode::VioTwin || !self.phase1_frozen() {
            return;
        }
        let Some(t_wl) = self.current_t_wl() else { return };
        let cloud = self.window.landmark_cloud();
        if cloud.len() < self.cfg.min_registration_points {
            return;
        }
        let t_lb = self.window.state(id).expect("newest keyframe is in the window").pose;
        let source: Vec<Vector3<f64>> = cloud.iter().map(|p| t_wl.transform_point(p)).collect();
        let here = t_wl.compose(&t_lb).translation;
        let Ok(crop) = crop_local(mesh, &here, self.cfg.crop_half_extent) else { return };
        let center = source.iter().sum::<Vector3<f64>>() / source.len() as f64;
        let req = RegistrationRequest {
            keyframe: id as usize,
            t,
            source,
            init: Pose::identity(),
            center,
            index: Arc::new(crop.build_index(self.cfg.index_leaf_size)),
        };
        self.attempts += 1;
        self.pending.insert(id, Snapshot { t_wl, t_lb, final_alignment: self.phase2_frozen() });
        self.diagnostics[id as usize].registration = RegistrationStatus::Pending;
        match &self.worker {
            Some(w) => w.submit(req),
            None => {
                let resp = run_request(&req, &self.cfg.icp, &self.cfg.weighting);
                self.handle_response(resp);
            }
        }
    }

    fn retire(&mut self, state: &KeyframeState) {
        let world = self.aligner.current().filter(|e| e.converged).map(|e| e.pose().compose(&state.pose));
        self.departed.push((state.t, state.pose, world));
    }
}

/// Runs the estimator in the given mode over the recorded streams.
pub fn run_session(inputs: SessionInputs<'_>, mode: Mode, cfg: &SessionConfig) -> Result<SessionOutput, SessionError> {
    let fail = |last_good: Option<u64>, t: f64, source: EstimatorError| SessionError { last_good, t, source };
    let frames = inputs.frames;
    if frames.is_empty() || cfg.keyframe_stride == 0 {
        return Err(fail(None, 0.0, EstimatorError::InvalidInput("no camera frames or zero keyframe stride".into())));
    }
    if (frames[0].t - inputs.initial.t).abs() > 1e-6 {
        return Err(fail(
            None,
            frames[0].t,
            EstimatorError::InvalidInput("initial state does not match the first camera frame".into()),
        ));
    }
    let window = SlidingWindow::new(
        cfg.estimator.clone(),
        frames[0].intrinsics,
        inputs.body_to_camera,
        inputs.initial,
        &cfg.initial_prior.as_array(),
        &frames[0].observations,
    );
    let worker = (mode == Mode::VioTwin && !cfg.deterministic && inputs.twin.is_some())
        .then(|| RegistrationWorker::spawn(cfg.icp.clone(), cfg.weighting.clone()));
    let mut s = Session {
        mode,
        cfg,
        inputs,
        window,
        aligner: FrameAligner::new(cfg.alignment.clone()),
        worker,
        pending: BTreeMap::new(),
        diagnostics: Vec::new(),
        departed: Vec::new(),
        registration_log: Vec::new(),
        map_measurements: Vec::new(),
        attempts: 0,
        successes: 0,
    };
    let fix_times: Vec<f64> = inputs.fixes.iter().map(|f| f.t).collect();
    let mut last_good: Option<u64> = None;

    for (k, frame) in frames.iter().step_by(cfg.keyframe_stride).enumerate() {
        let id = if k == 0 {
            0
        } else {
            let (_, last) = s.window.latest();
            let pre = preintegrate(inputs.imu, last.t, frame.t, &last.bias_gyro, &last.bias_accel, &cfg.estimator.imu)
                .map_err(|e| fail(last_good, frame.t, e))?;
            let guess = s.window.predict(&pre);
            let guess = KeyframeState { t: frame.t, ..guess };
            s.window.push_keyframe(guess, pre, &frame.observations).map_err(|e| fail(last_good, frame.t, e))?
        };
        debug_assert_eq!(id as usize, s.diagnostics.len());
        s.diagnostics.push(KeyframeDiagnostics {
            keyframe: id,
            t: frame.t,
            window_size: s.window.len(),
            cost: CostBreakdown::default(),
            iterations: 0,
            converged: false,
            stalled: false,
            gps_factor: false,
            map_factor: false,
            registration: RegistrationStatus::NotAttempted,
        });

        let fix = nearest_stamp(&fix_times, frame.t, cfg.gps_max_dt).map(|i| &inputs.fixes[i]);
        if let (Some(fix), true) = (fix, s.gps_fusion_active()) {
            let t_wl = s.current_t_wl().expect("fusion requires an alignment");
            let factor = GpsFactor::from_world(frame.t, &fix.position, &fix.covariance, &t_wl, cfg.estimator.gps_min_sigma);
            s.window.add_gps_factor(id, factor).map_err(|e| fail(last_good, frame.t, e))?;
            s.diagnostics[id as usize].gps_factor = true;
        }

        s.drain_worker();
        let report = s.window.optimize().map_err(|e| fail(last_good, frame.t, e))?;
        let d = &mut s.diagnostics[id as usize];
        d.cost = s.window.cost_breakdown();
        d.iterations = report.iterations;
        d.converged = report.converged;
        d.stalled = report.stalled;
        d.window_size = s.window.len();
        last_good = Some(id);

        if let (Some(fix), true) = (fix, mode != Mode::VioOnly) {
            let local = s.window.state(id).expect("newest keyframe").pose.translation;
            s.aligner.add_gps_pair(frame.t, fix.position, local);
        }
        s.maybe_register(id, frame.t);

        if s.window.needs_marginalization() {
            if let Some((_, state)) = s.window.marginalize_oldest() {
                s.retire(&state);
            }
        }
    }

    if let Some(w) = s.worker.take() {
        for r in w.finish() {
            s.handle_response(r);
        }
    }
    let remaining: Vec<KeyframeState> = s.window.keyframes().map(|(_, st)| *st).collect();
    for st in &remaining {
        s.retire(st);
    }
    // Registrations still pending were submitted but never answered.
    for id in std::mem::take(&mut s.pending).into_keys() {
        s.diagnostics[id as usize].registration = RegistrationStatus::Failed;
    }

    // Keyframes that left before any alignment converged use the first
    // converged one, or the final estimate if none converged.
    let final_alignment = s.aligner.current().copied();
    let first_converged = [s.aligner.phase1(), s.aligner.phase2()].into_iter().flatten().find(|e| e.converged).copied();
    let trajectory_world = first_converged.or(final_alignment).map(|fa| {
        s.departed
            .iter()
            .map(|(t, local, world)| (*t, world.unwrap_or_else(|| fa.pose().compose(local))))
            .collect()
    });
    Ok(SessionOutput {
        mode,
        trajectory_local: s.departed.iter().map(|(t, p, _)| (*t, *p)).collect(),
        trajectory_world,
        alignment: final_alignment,
        phase1: s.aligner.phase1().copied(),
        phase2: s.aligner.phase2().copied(),
        alignment_log: s.aligner.log().to_vec(),
        registration_log: s.registration_log,
        map_measurements: s.map_measurements,
        registration_attempts: s.attempts,
        registration_converged: s.successes,
        diagnostics: s.diagnostics,
    })
}
