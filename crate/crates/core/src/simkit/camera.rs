use nalgebra::{Matrix3, Vector2, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{NoiseConfig, SimError, Trajectory};
use crate::geometry::{Pose, Rotation};
use crate::rng::{indexed_substream, substream};
use crate::twin::{SpatialIndex, SurfaceSamples};

/// Pinhole intrinsics without distortion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self { fx: 320.0, fy: 320.0, cx: 320.0, cy: 240.0, width: 640, height: 480 }
    }
}

impl CameraIntrinsics {
    /// Projects a camera-frame point; `None` behind the image plane.
    pub fn project(&self, p: &Vector3<f64>) -> Option<Vector2<f64>> {
        if p.z <= 0.0 {
            return None;
        }
        Some(Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    pub fn in_bounds(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }
}

/// Camera model and selection limits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraConfig {
    pub intrinsics: CameraIntrinsics,
    pub rate: f64,
    /// Downward tilt of the optical axis (radians).
    pub mount_pitch: f64,
    /// Rotation of the optical axis about body z (radians).
    pub mount_yaw: f64,
    /// Camera center in the body frame.
    pub mount_offset: [f64; 3],
    pub min_depth: f64,
    pub max_range: f64,
    /// Minimum cosine between the surface normal and the viewing ray.
    pub min_cos_incidence: f64,
    pub max_features: usize,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics::default(),
            rate: 10.0,
            mount_pitch: 0.0,
            mount_yaw: 0.0,
            mount_offset: [0.05, 0.0, 0.0],
            min_depth: 0.5,
            max_range: 80.0,
            min_cos_incidence: 0.1,
            max_features: 120,
        }
    }
}

impl CameraConfig {
    /// Camera pose in the body frame. Camera axes: z forward, x right, y down.
    pub fn body_to_camera(&self) -> Pose {
        let base = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
        let (sp, cp) = self.mount_pitch.sin_cos();
        let pitch = Matrix3::new(cp, 0.0, sp, 0.0, 1.0, 0.0, -sp, 0.0, cp);
        let r = Rotation::about_z(self.mount_yaw).matrix() * pitch * base;
        Pose::new(Rotation::from_matrix_unchecked(r), Vector3::from(self.mount_offset))
    }
}

/// Ground-truth landmark set; the id of a landmark is its index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Landmarks {
    pub points: Vec<Vector3<f64>>,
    pub normals: Vec<Vector3<f64>>,
}

impl Landmarks {
    pub fn from_samples(s: &SurfaceSamples) -> Self {
        Self { points: s.points.clone(), normals: s.normals.clone() }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub landmark_id: u32,
    pub pixel: Vector2<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameObservations {
    pub t: f64,
    pub intrinsics: CameraIntrinsics,
    pub observations: Vec<Observation>,
}

/// Noise-free projection of a landmark when it is visible from the camera
/// at `world_to_camera`: in front, inside the image, within range, facing
/// the camera and not hidden behind other geometry.
pub fn visible_projection(
    cfg: &CameraConfig,
    world_to_camera: &Pose,
    camera_center: &Vector3<f64>,
    point: &Vector3<f64>,
    normal: &Vector3<f64>,
    index: &SpatialIndex,
) -> Option<Vector2<f64>> {
    let pc = world_to_camera.transform_point(point);
    if pc.z < cfg.min_depth {
        return None;
    }
    let ray = camera_center - point;
    let dist = ray.norm();
    if dist > cfg.max_range || normal.dot(&ray) < cfg.min_cos_incidence * dist {
        return None;
    }
    let px = cfg.intrinsics.project(&pc)?;
    if !cfg.intrinsics.in_bounds(&px) {
        return None;
    }
    if index.segment_blocked(camera_center, point, 1e-6 + 1e-9 * dist) {
        return None;
    }
    Some(px)
}

/// One frame per `1 / rate` seconds over the trajectory, each carrying up to
/// `max_features` visible landmarks. Landmarks are preferred by a fixed
/// random priority, which keeps tracks persistent across frames.
pub fn synthesize_observations(
    traj: &Trajectory,
    landmarks: &Landmarks,
    index: &SpatialIndex,
    cfg: &CameraConfig,
    noise: &NoiseConfig,
) -> Result<Vec<FrameObservations>, SimError> {
    if !(cfg.rate > 0.0) {
        return Err(SimError::InvalidConfig("camera rate must be positive".into()));
    }
    if cfg.rate > 30.0 {
        return Err(SimError::CameraRateTooHigh(cfg.rate));
    }
    noise.validate()?;
    let mut prio_rng = substream(noise.seed, "feature-priority");
    let priority: Vec<u64> = (0..landmarks.len()).map(|_| prio_rng.random()).collect();
    let t_bc = cfg.body_to_camera();
    let n = (traj.duration() * cfg.rate + 1e-9).floor() as usize;

    let frames = (0..=n)
        .into_par_iter()
        .map(|k| {
            let t = k as f64 / cfg.rate;
            let t_wc = traj.pose(t).compose(&t_bc);
            let t_cw = t_wc.inverse();
            let center = t_wc.translation;
            let mut visible: Vec<(u64, u32, Vector2<f64>)> = landmarks
                .points
                .iter()
                .zip(&landmarks.normals)
                .enumerate()
                .filter_map(|(id, (p, nrm))| {
                    visible_projection(cfg, &t_cw, &center, p, nrm, index).map(|px| (priority[id], id as u32, px))
                })
                .collect();
            visible.sort_by_key(|&(prio, id, _)| (prio, id));
            visible.truncate(cfg.max_features);
            visible.sort_by_key(|&(_, id, _)| id);

            let mut rng = indexed_substream(noise.seed, "pixels", k as u64);
            let observations = visible
                .into_iter()
                .filter_map(|(_, id, px)| {
                    let du: f64 = StandardNormal.sample(&mut rng);
                    let dv: f64 = StandardNormal.sample(&mut rng);
                    let noisy = px + Vector2::new(du, dv) * noise.pixel_sigma;
                    cfg.intrinsics.in_bounds(&noisy).then_some(Observation { landmark_id: id, pixel: noisy })
                })
                .collect();
            FrameObservations { t, intrinsics: cfg.intrinsics, observations }
        })
        .collect();
    Ok(frames)
}
