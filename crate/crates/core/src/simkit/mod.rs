//! Synthetic scenario generation: city meshes, smooth ground-truth
//! trajectories, IMU streams and per-frame landmark observations.
//!
//! Everything here is a pure function of its configuration and seed.

mod camera;
mod city;
mod imu;
mod trajectory;

pub use camera::{synthesize_observations, visible_projection, CameraConfig, CameraIntrinsics, FrameObservations, Landmarks, Observation};
pub use city::{generate_city, CityBox, CityConfig};
pub use imu::{synthesize_imu, ImuSample, ImuStream};
pub use trajectory::{loop_waypoints, LoopShape, Trajectory, YawPolicy};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Standard gravity in the world frame (z up).
pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("IMU rate {0} Hz is below the 50 Hz minimum")]
    ImuRateTooLow(f64),
    #[error("camera rate {0} Hz exceeds the 30 Hz maximum")]
    CameraRateTooHigh(f64),
}

/// Sensor noise levels. Densities are continuous-time: white noise in
/// unit/sqrt(Hz), bias random walk in unit/s/sqrt(Hz).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub gyro_noise_density: f64,
    pub accel_noise_density: f64,
    pub gyro_random_walk: f64,
    pub accel_random_walk: f64,
    pub pixel_sigma: f64,
    pub initial_gyro_bias: [f64; 3],
    pub initial_accel_bias: [f64; 3],
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            gyro_noise_density: 1.7e-4,
            accel_noise_density: 2.0e-3,
            gyro_random_walk: 1.9e-5,
            accel_random_walk: 3.0e-3,
            pixel_sigma: 1.0,
            initial_gyro_bias: [0.0; 3],
            initial_accel_bias: [0.0; 3],
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn noiseless(seed: u64) -> Self {
        Self {
            gyro_noise_density: 0.0,
            accel_noise_density: 0.0,
            gyro_random_walk: 0.0,
            accel_random_walk: 0.0,
            pixel_sigma: 0.0,
            initial_gyro_bias: [0.0; 3],
            initial_accel_bias: [0.0; 3],
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let sigmas = [
            self.gyro_noise_density,
            self.accel_noise_density,
            self.gyro_random_walk,
            self.accel_random_walk,
            self.pixel_sigma,
        ];
        if sigmas.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(SimError::InvalidConfig("noise levels must be finite and non-negative".into()));
        }
        Ok(())
    }
}
