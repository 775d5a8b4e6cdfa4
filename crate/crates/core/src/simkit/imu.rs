use nalgebra::Vector3;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{NoiseConfig, SimError, Trajectory, GRAVITY};
use crate::rng::substream;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub t: f64,
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

/// Measured samples plus the true bias at each sample time.
#[derive(Clone, Debug, PartialEq)]
pub struct ImuStream {
    pub samples: Vec<ImuSample>,
    pub gyro_bias: Vec<Vector3<f64>>,
    pub accel_bias: Vec<Vector3<f64>>,
}

pub(crate) fn gaussian3(rng: &mut impl rand::Rng) -> Vector3<f64> {
    Vector3::from_fn(|_, _| StandardNormal.sample(rng))
}

/// Samples the trajectory's specific force and angular rate at `rate` Hz and
/// corrupts them with white noise and random-walk biases.
pub fn synthesize_imu(traj: &Trajectory, rate: f64, noise: &NoiseConfig) -> Result<ImuStream, SimError> {
    if !(rate >= 50.0) {
        return Err(SimError::ImuRateTooLow(rate));
    }
    noise.validate()?;
    let dt = 1.0 / rate;
    let n = (traj.duration() * rate + 1e-9).floor() as usize;
    let mut rng = substream(noise.seed, "imu");
    let gravity = Vector3::new(0.0, 0.0, -GRAVITY);
    let sd_g = noise.gyro_noise_density / dt.sqrt();
    let sd_a = noise.accel_noise_density / dt.sqrt();
    let walk_g = noise.gyro_random_walk * dt.sqrt();
    let walk_a = noise.accel_random_walk * dt.sqrt();

    let mut bg = Vector3::from(noise.initial_gyro_bias);
    let mut ba = Vector3::from(noise.initial_accel_bias);
    let mut out = ImuStream {
        samples: Vec::with_capacity(n + 1),
        gyro_bias: Vec::with_capacity(n + 1),
        accel_bias: Vec::with_capacity(n + 1),
    };
    for k in 0..=n {
        let t = k as f64 / rate;
        let r = traj.rotation(t);
        let specific = r.transpose().rotate(&(traj.acceleration(t) - gravity));
        let gyro = traj.angular_velocity(t) + bg + gaussian3(&mut rng) * sd_g;
        let accel = specific + ba + gaussian3(&mut rng) * sd_a;
        out.samples.push(ImuSample { t, gyro, accel });
        out.gyro_bias.push(bg);
        out.accel_bias.push(ba);
        bg += gaussian3(&mut rng) * walk_g;
        ba += gaussian3(&mut rng) * walk_a;
    }
    Ok(out)
}
