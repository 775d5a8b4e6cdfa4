use nalgebra::{Matrix3, SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use super::EstimatorError;
use crate::geometry::{right_jacobian, skew, Rotation};
use crate::simkit::{ImuSample, NoiseConfig};

pub type Matrix9 = SMatrix<f64, 9, 9>;
type Matrix9x3 = SMatrix<f64, 9, 3>;

/// Continuous-time IMU noise model assumed by the estimator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImuNoise {
    pub gyro_noise_density: f64,
    pub accel_noise_density: f64,
    pub gyro_random_walk: f64,
    pub accel_random_walk: f64,
    pub rate: f64,
}

impl Default for ImuNoise {
    fn default() -> Self {
        Self::from_noise_config(&NoiseConfig::default(), 200.0)
    }
}

impl ImuNoise {
    pub fn from_noise_config(n: &NoiseConfig, rate: f64) -> Self {
        Self {
            gyro_noise_density: n.gyro_noise_density,
            accel_noise_density: n.accel_noise_density,
            gyro_random_walk: n.gyro_random_walk,
            accel_random_walk: n.accel_random_walk,
            rate,
        }
    }
}

/// Relative motion between two keyframes integrated from raw IMU samples,
/// with first-order bias Jacobians. Residual ordering is
/// (rotation, velocity, position).
#[derive(Clone, Debug, PartialEq)]
pub struct PreintegratedImu {
    pub t0: f64,
    pub t1: f64,
    pub dt: f64,
    pub delta_r: Rotation,
    pub delta_v: Vector3<f64>,
    pub delta_p: Vector3<f64>,
    pub covariance: Matrix9,
    pub dr_dbg: Matrix3<f64>,
    pub dv_dbg: Matrix3<f64>,
    pub dv_dba: Matrix3<f64>,
    pub dp_dbg: Matrix3<f64>,
    pub dp_dba: Matrix3<f64>,
    pub bias_gyro: Vector3<f64>,
    pub bias_accel: Vector3<f64>,
    noise: ImuNoise,
    /// Measurement knots `(t, gyro, accel)` spanning `[t0, t1]`.
    knots: Vec<(f64, Vector3<f64>, Vector3<f64>)>,
}

fn interpolate(a: &ImuSample, b: &ImuSample, t: f64) -> (Vector3<f64>, Vector3<f64>) {
    let s = if b.t > a.t { (t - a.t) / (b.t - a.t) } else { 0.0 };
    (a.gyro + (b.gyro - a.gyro) * s, a.accel + (b.accel - a.accel) * s)
}

/// Integrates the samples covering `[t0, t1]` about the given biases using
/// midpoint steps on the rotation manifold.
pub fn preintegrate(
    samples: &[ImuSample],
    t0: f64,
    t1: f64,
    bias_gyro: &Vector3<f64>,
    bias_accel: &Vector3<f64>,
    noise: &ImuNoise,
) -> Result<PreintegratedImu, EstimatorError> {
    const EPS: f64 = 1e-9;
    if !(t1 > t0) || samples.len() < 2 {
        return Err(EstimatorError::ImuCoverage { t0, t1 });
    }
    let first = samples.partition_point(|s| s.t < t0 - EPS);
    let last = samples.partition_point(|s| s.t <= t1 + EPS);
    // Need one sample at or before t0 and one at or after t1.
    let lo = if first < samples.len() && (samples[first].t - t0).abs() <= EPS { first } else { first.wrapping_sub(1) };
    if lo >= samples.len() || last == 0 {
        return Err(EstimatorError::ImuCoverage { t0, t1 });
    }
    let hi = if (samples[last - 1].t - t1).abs() <= EPS { last - 1 } else { last };
    if hi >= samples.len() || hi <= lo {
        return Err(EstimatorError::ImuCoverage { t0, t1 });
    }
    let period = 1.0 / noise.rate;
    for w in samples[lo..=hi].windows(2) {
        if w[1].t - w[0].t > 3.0 * period + EPS {
            return Err(EstimatorError::ImuGap { at: w[0].t, gap: w[1].t - w[0].t });
        }
    }
    let mut knots = Vec::with_capacity(hi - lo + 2);
    let (g0, a0) = interpolate(&samples[lo], &samples[lo + 1], t0);
    knots.push((t0, g0, a0));
    for s in &samples[lo + 1..hi] {
        if s.t > t0 + EPS && s.t < t1 - EPS {
            knots.push((s.t, s.gyro, s.accel));
        }
    }
    let (g1, a1) = interpolate(&samples[hi - 1], &samples[hi], t1);
    knots.push((t1, g1, a1));
    Ok(integrate(knots, bias_gyro, bias_accel, noise))
}

fn integrate(
    knots: Vec<(f64, Vector3<f64>, Vector3<f64>)>,
    bg: &Vector3<f64>,
    ba: &Vector3<f64>,
    noise: &ImuNoise,
) -> PreintegratedImu {
    let mut r = Matrix3::identity();
    let mut v = Vector3::zeros();
    let mut p = Vector3::zeros();
    let mut cov = Matrix9::zeros();
    let mut dr_dbg = Matrix3::zeros();
    let mut dv_dbg = Matrix3::zeros();
    let mut dv_dba = Matrix3::zeros();
    let mut dp_dbg = Matrix3::zeros();
    let mut dp_dba = Matrix3::zeros();
    let mut total = 0.0;
    let i3 = Matrix3::identity();

    for w in knots.windows(2) {
        let (ta, ga, aa) = w[0];
        let (tb, gb, ab) = w[1];
        let dt = tb - ta;
        if dt <= 0.0 {
            continue;
        }
        total += dt;
        let omega = (ga + gb) * 0.5 - bg;
        let acc = (aa + ab) * 0.5 - ba;
        let half = Rotation::exp(&(omega * (0.5 * dt)));
        let step = Rotation::exp(&(omega * dt));
        let r_mid = r * half.matrix();
        let acc_skew = skew(&acc);
        let jr_half = right_jacobian(&(omega * (0.5 * dt)));
        let jr = right_jacobian(&(omega * dt));

        // Bias Jacobians.
        let dr_mid_dbg = half.matrix().transpose() * dr_dbg - jr_half * (0.5 * dt);
        let dv_dbg_next = dv_dbg - r_mid * acc_skew * dr_mid_dbg * dt;
        let dp_dbg_next = dp_dbg + dv_dbg * dt - r_mid * acc_skew * dr_mid_dbg * (0.5 * dt * dt);
        let dp_dba_next = dp_dba + dv_dba * dt - r_mid * (0.5 * dt * dt);
        let dv_dba_next = dv_dba - r_mid * dt;
        dr_dbg = step.matrix().transpose() * dr_dbg - jr * dt;
        dv_dbg = dv_dbg_next;
        dv_dba = dv_dba_next;
        dp_dbg = dp_dbg_next;
        dp_dba = dp_dba_next;

        // Error-state propagation of (rotation, velocity, position).
        let mut a = Matrix9::identity();
        a.fixed_view_mut::<3, 3>(0, 0).copy_from(&step.matrix().transpose());
        let rv = -r_mid * acc_skew * half.matrix().transpose();
        a.fixed_view_mut::<3, 3>(3, 0).copy_from(&(rv * dt));
        a.fixed_view_mut::<3, 3>(6, 0).copy_from(&(rv * (0.5 * dt * dt)));
        a.fixed_view_mut::<3, 3>(6, 3).copy_from(&(i3 * dt));
        let mut bg_map = Matrix9x3::zeros();
        bg_map.fixed_view_mut::<3, 3>(0, 0).copy_from(&(jr * dt));
        let mut ba_map = Matrix9x3::zeros();
        ba_map.fixed_view_mut::<3, 3>(3, 0).copy_from(&(r_mid * dt));
        ba_map.fixed_view_mut::<3, 3>(6, 0).copy_from(&(r_mid * (0.5 * dt * dt)));
        let qg = noise.gyro_noise_density.powi(2) / dt;
        let qa = noise.accel_noise_density.powi(2) / dt;
        cov = a * cov * a.transpose() + bg_map * bg_map.transpose() * qg + ba_map * ba_map.transpose() * qa;

        let acc_w = r_mid * acc;
        p += v * dt + acc_w * (0.5 * dt * dt);
        v += acc_w * dt;
        r *= step.matrix();
    }
    let cov = (cov + cov.transpose()) * 0.5;
    PreintegratedImu {
        t0: knots[0].0,
        t1: knots[knots.len() - 1].0,
        dt: total,
        delta_r: Rotation::from_matrix_projected(&r),
        delta_v: v,
        delta_p: p,
        covariance: cov,
        dr_dbg,
        dv_dbg,
        dv_dba,
        dp_dbg,
        dp_dba,
        bias_gyro: *bg,
        bias_accel: *ba,
        noise: *noise,
        knots,
    }
}

impl PreintegratedImu {
    /// Integrates the same measurements again about new biases.
    pub fn reintegrate(&self, bias_gyro: &Vector3<f64>, bias_accel: &Vector3<f64>) -> Self {
        integrate(self.knots.clone(), bias_gyro, bias_accel, &self.noise)
    }

    pub fn noise(&self) -> &ImuNoise {
        &self.noise
    }

    /// Information of the bias random walk over this interval, per axis.
    pub fn bias_walk_information(&self) -> (f64, f64) {
        let var = |rw: f64| (rw * rw * self.dt).max(1e-16);
        (1.0 / var(self.noise.gyro_random_walk), 1.0 / var(self.noise.accel_random_walk))
    }

    /// Bias-corrected deltas to first order.
    pub fn corrected(&self, bg: &Vector3<f64>, ba: &Vector3<f64>) -> (Rotation, Vector3<f64>, Vector3<f64>) {
        let dbg = bg - self.bias_gyro;
        let dba = ba - self.bias_accel;
        let r = self.delta_r * Rotation::exp(&(self.dr_dbg * dbg));
        let v = self.delta_v + self.dv_dbg * dbg + self.dv_dba * dba;
        let p = self.delta_p + self.dp_dbg * dbg + self.dp_dba * dba;
        (r, v, p)
    }
}
