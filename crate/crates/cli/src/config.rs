//! Experiment configuration loaded from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use twinloc::estimator::{Mode, SessionConfig};
use twinloc::gnss::{FixStreamConfig, GpConfig, MultipathFitConfig, TrainingConfig};
use twinloc::simkit::{CameraConfig, CityConfig, LoopShape, NoiseConfig, YawPolicy};

use crate::error::CliError;

/// Everything needed to reproduce one run. The root `seed` drives every
/// random stream; `sensors.noise.seed` is overwritten by it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default)]
    pub scene: SceneConfig,
    #[serde(default)]
    pub trajectory: TrajectoryConfig,
    #[serde(default)]
    pub sensors: SensorConfig,
    #[serde(default)]
    pub gnss: GnssConfig,
    #[serde(default)]
    pub estimator: SessionConfig,
}

fn default_mode() -> Mode {
    Mode::VioTwin
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub city: CityConfig,
    /// Use this OBJ/PLY mesh instead of the generated city.
    pub mesh: Option<PathBuf>,
    /// Landmarks per square metre of surface.
    pub landmark_density: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { city: CityConfig::default(), mesh: None, landmark_density: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    #[serde(rename = "loop")]
    pub loop_shape: Option<LoopShape>,
    pub waypoints: Option<Vec<[f64; 3]>>,
    /// Nominal speed along the path (m/s).
    pub speed: f64,
    pub yaw: YawPolicy,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self { loop_shape: Some(LoopShape::default()), waypoints: None, speed: 5.0, yaw: YawPolicy::FollowVelocity { offset: 0.0 } }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorConfig {
    pub imu_rate: f64,
    pub camera: CameraConfig,
    pub noise: NoiseConfig,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self { imu_rate: 200.0, camera: CameraConfig::default(), noise: NoiseConfig::default() }
    }
}

/// Constant offset added to every fix inside a time interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasSegment {
    pub t0: f64,
    pub t1: f64,
    pub offset: [f64; 3],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GnssConfig {
    pub training: TrainingConfig,
    pub gp: GpConfig,
    pub multipath: MultipathFitConfig,
    pub fixes: FixStreamConfig,
    /// Satellite `(azimuth, elevation)` in degrees; a fixed 12-satellite
    /// sky when unset.
    pub sky: Option<Vec<[f64; 2]>>,
    pub bias: Vec<BiasSegment>,
    /// Previously fitted model file; fitted during simulation when unset.
    pub model: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Parse { file: origin.into(), message: e.to_string() })?;
        Ok(cfg)
    }

    /// Loads and validates; relative paths resolve against the file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(m) = cfg.scene.mesh.as_mut() {
            if m.is_relative() {
                *m = base.join(&*m);
            }
        }
        if let Some(m) = cfg.gnss.model.as_mut() {
            if m.is_relative() {
                *m = base.join(&*m);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration always serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("configuration always serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let check = |ok: bool, path: &str, msg: &str| if ok { Ok(()) } else { Err(CliError::config(path, msg)) };
        check(self.scene.landmark_density > 0.0, "scene.landmark_density", "must be positive")?;
        if let Some(m) = &self.scene.mesh {
            check(m.exists(), "scene.mesh", &format!("file {} does not exist", m.display()))?;
        }
        if let Some(m) = &self.gnss.model {
            check(m.exists(), "gnss.model", &format!("file {} does not exist", m.display()))?;
        }
        let t = &self.trajectory;
        check(t.loop_shape.is_some() != t.waypoints.is_some(), "trajectory", "set exactly one of `loop` or `waypoints`")?;
        if let Some(w) = &t.waypoints {
            check(w.len() >= 2, "trajectory.waypoints", "need at least two waypoints")?;
        }
        check(t.speed > 0.0, "trajectory.speed", "must be positive")?;
        check(self.sensors.imu_rate >= 50.0, "sensors.imu_rate", "must be at least 50 Hz")?;
        let cam = &self.sensors.camera;
        check(cam.rate > 0.0 && cam.rate <= 30.0, "sensors.camera.rate", "must be in (0, 30] Hz")?;
        check(cam.max_features > 0, "sensors.camera.max_features", "must be positive")?;
        check(self.sensors.noise.validate().is_ok(), "sensors.noise", "noise densities must be non-negative")?;
        check(self.gnss.fixes.rate > 0.0, "gnss.fixes.rate", "must be positive")?;
        for (i, b) in self.gnss.bias.iter().enumerate() {
            check(b.t1 > b.t0, &format!("gnss.bias[{i}]"), "t1 must exceed t0")?;
        }
        if let Some(sky) = &self.gnss.sky {
            check(sky.len() >= 4, "gnss.sky", "need at least four satellites")?;
        }
        let e = &self.estimator;
        check(e.keyframe_stride >= 1, "estimator.keyframe_stride", "must be at least 1")?;
        check(e.estimator.window_size >= 2, "estimator.estimator.window_size", "must be at least 2")?;
        check(e.crop_half_extent > 0.0, "estimator.crop_half_extent", "must be positive")?;
        check(e.weighting.beta > 0.0, "estimator.weighting.beta", "must be positive")?;
        check(e.alignment.epsilon > 0.0, "estimator.alignment.epsilon", "must be positive")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml_str("seed = 3\n", "inline").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.mode, Mode::VioTwin);
        cfg.validate().unwrap();
    }

    #[test]
    fn seed_is_mandatory() {
        let err = ExperimentConfig::from_toml_str("mode = \"vio-gps\"\n", "inline").unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn unknown_mode_rejected() {
        let err = ExperimentConfig::from_toml_str("seed = 1\nmode = \"vio-lidar\"\n", "inline").unwrap_err();
        assert!(matches!(err, CliError::Parse { .. }));
    }

    #[test]
    fn validation_reports_field_path() {
        let mut cfg = ExperimentConfig::from_toml_str("seed = 1\n", "inline").unwrap();
        cfg.sensors.imu_rate = 10.0;
        match cfg.validate() {
            Err(CliError::Config { path, .. }) => assert_eq!(path, "sensors.imu_rate"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn toml_round_trip_preserves_hash() {
        let cfg = ExperimentConfig::from_toml_str("seed = 9\n[trajectory]\nspeed = 4.0\n", "inline").unwrap();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string(), "echo").unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }
}
