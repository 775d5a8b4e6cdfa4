//! Residuals and analytic Jacobians. Keyframe tangent ordering is
//! `[rotation, position, velocity, gyro bias, accel bias]` with the rotation
//! perturbed on the right and everything else additively.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Matrix6, SMatrix, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use super::preint::{Matrix9, PreintegratedImu};
use crate::geometry::{right_jacobian, right_jacobian_inv, skew, Pose, Rotation};
use crate::registration::RegistrationResult;
use crate::simkit::CameraIntrinsics;

pub const STATE_DIM: usize = 15;
pub type StateJacobian<const R: usize> = SMatrix<f64, R, STATE_DIM>;
pub type Vector9 = SMatrix<f64, 9, 1>;

/// Estimated state of one keyframe, expressed in the local frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyframeState {
    pub t: f64,
    pub pose: Pose,
    pub velocity: Vector3<f64>,
    pub bias_gyro: Vector3<f64>,
    pub bias_accel: Vector3<f64>,
}

impl KeyframeState {
    /// Applies a tangent increment.
    pub fn retract(&self, d: &[f64]) -> Self {
        let v = |k: usize| Vector3::new(d[k], d[k + 1], d[k + 2]);
        Self {
            t: self.t,
            pose: Pose::new(self.pose.rotation * Rotation::exp(&v(0)), self.pose.translation + v(3)),
            velocity: self.velocity + v(6),
            bias_gyro: self.bias_gyro + v(9),
            bias_accel: self.bias_accel + v(12),
        }
    }

    /// Tangent difference `self - base`.
    pub fn local(&self, base: &Self) -> SMatrix<f64, STATE_DIM, 1> {
        let mut out = SMatrix::<f64, STATE_DIM, 1>::zeros();
        out.fixed_rows_mut::<3>(0).copy_from(&(base.pose.rotation.transpose() * self.pose.rotation).log());
        out.fixed_rows_mut::<3>(3).copy_from(&(self.pose.translation - base.pose.translation));
        out.fixed_rows_mut::<3>(6).copy_from(&(self.velocity - base.velocity));
        out.fixed_rows_mut::<3>(9).copy_from(&(self.bias_gyro - base.bias_gyro));
        out.fixed_rows_mut::<3>(12).copy_from(&(self.bias_accel - base.bias_accel));
        out
    }
}

// ---------------------------------------------------------------- visual

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VisualEval {
    /// Measured minus predicted pixel.
    pub residual: Vector2<f64>,
    /// With respect to the keyframe rotation and position.
    pub d_pose: SMatrix<f64, 2, 6>,
    pub d_landmark: Matrix2x3<f64>,
}

/// Reprojection residual of a local-frame landmark. `None` when the point
/// is less than 1 mm in front of the camera.
pub fn visual_residual(
    kf: &KeyframeState,
    landmark: &Vector3<f64>,
    pixel: &Vector2<f64>,
    intrinsics: &CameraIntrinsics,
    body_to_camera: &Pose,
) -> Option<VisualEval> {
    let r_lb = kf.pose.rotation.matrix();
    let p_b = r_lb.transpose() * (landmark - kf.pose.translation);
    let t_cb = body_to_camera.inverse();
    let r_cb = t_cb.rotation.matrix();
    let p_c = r_cb * p_b + t_cb.translation;
    if p_c.z <= 1e-3 {
        return None;
    }
    let (x, y, z) = (p_c.x, p_c.y, p_c.z);
    let predicted = Vector2::new(intrinsics.fx * x / z + intrinsics.cx, intrinsics.fy * y / z + intrinsics.cy);
    let dproj = Matrix2x3::new(
        intrinsics.fx / z,
        0.0,
        -intrinsics.fx * x / (z * z),
        0.0,
        intrinsics.fy / z,
        -intrinsics.fy * y / (z * z),
    );
    let de_dpc = -dproj;
    let de_dpb = de_dpc * r_cb;
    let mut d_pose = SMatrix::<f64, 2, 6>::zeros();
    d_pose.fixed_view_mut::<2, 3>(0, 0).copy_from(&(de_dpb * skew(&p_b)));
    d_pose.fixed_view_mut::<2, 3>(0, 3).copy_from(&(-de_dpb * r_lb.transpose()));
    let d_landmark = de_dpb * r_lb.transpose();
    Some(VisualEval { residual: pixel - predicted, d_pose, d_landmark })
}

/// Huber weight and cost for a whitened residual norm `s`.
pub fn huber(s: f64, delta: f64) -> (f64, f64) {
    if s <= delta {
        (1.0, 0.5 * s * s)
    } else {
        (delta / s, delta * s - 0.5 * delta * delta)
    }
}

// ---------------------------------------------------------------- inertial

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuEval {
    /// `(rotation, velocity, position)`.
    pub residual: Vector9,
    pub d_i: StateJacobian<9>,
    pub d_j: StateJacobian<9>,
}

/// Preintegration residual between consecutive keyframes with first-order
/// bias correction about the preintegration biases.
pub fn imu_residual(i: &KeyframeState, j: &KeyframeState, pre: &PreintegratedImu, gravity: &Vector3<f64>) -> ImuEval {
    let dt = pre.dt;
    let dbg = i.bias_gyro - pre.bias_gyro;
    let (_, dv, dp) = pre.corrected(&i.bias_gyro, &i.bias_accel);
    let corr = pre.dr_dbg * dbg;
    let delta_r = pre.delta_r * Rotation::exp(&corr);
    let ri = i.pose.rotation.matrix();
    let rj = j.pose.rotation.matrix();
    let rit = ri.transpose();

    let r_rot = (delta_r.transpose() * (i.pose.rotation.transpose() * j.pose.rotation)).log();
    let vel_term = j.velocity - i.velocity - gravity * dt;
    let pos_term = j.pose.translation - i.pose.translation - i.velocity * dt - gravity * (0.5 * dt * dt);
    let r_vel = rit * vel_term - dv;
    let r_pos = rit * pos_term - dp;

    let jr_inv = right_jacobian_inv(&r_rot);
    let mut d_i = StateJacobian::<9>::zeros();
    let mut d_j = StateJacobian::<9>::zeros();
    // Rotation rows.
    d_i.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-jr_inv * rj.transpose() * ri));
    d_j.fixed_view_mut::<3, 3>(0, 0).copy_from(&jr_inv);
    let exp_r = Rotation::exp(&r_rot);
    d_i.fixed_view_mut::<3, 3>(0, 9)
        .copy_from(&(-jr_inv * exp_r.matrix().transpose() * right_jacobian(&corr) * pre.dr_dbg));
    // Velocity rows.
    d_i.fixed_view_mut::<3, 3>(3, 0).copy_from(&skew(&(rit * vel_term)));
    d_i.fixed_view_mut::<3, 3>(3, 6).copy_from(&(-rit));
    d_j.fixed_view_mut::<3, 3>(3, 6).copy_from(&rit);
    d_i.fixed_view_mut::<3, 3>(3, 9).copy_from(&(-pre.dv_dbg));
    d_i.fixed_view_mut::<3, 3>(3, 12).copy_from(&(-pre.dv_dba));
    // Position rows.
    d_i.fixed_view_mut::<3, 3>(6, 0).copy_from(&skew(&(rit * pos_term)));
    d_i.fixed_view_mut::<3, 3>(6, 3).copy_from(&(-rit));
    d_j.fixed_view_mut::<3, 3>(6, 3).copy_from(&rit);
    d_i.fixed_view_mut::<3, 3>(6, 6).copy_from(&(-rit * dt));
    d_i.fixed_view_mut::<3, 3>(6, 9).copy_from(&(-pre.dp_dbg));
    d_i.fixed_view_mut::<3, 3>(6, 12).copy_from(&(-pre.dp_dba));

    let mut residual = Vector9::zeros();
    residual.fixed_rows_mut::<3>(0).copy_from(&r_rot);
    residual.fixed_rows_mut::<3>(3).copy_from(&r_vel);
    residual.fixed_rows_mut::<3>(6).copy_from(&r_pos);
    ImuEval { residual, d_i, d_j }
}

/// Information matrix of the preintegration residual, regularized so that
/// noiseless models stay invertible.
pub fn imu_information(pre: &PreintegratedImu) -> Matrix9 {
    let floor = (pre.covariance.trace() / 9.0 * 1e-9).max(1e-18);
    let reg = pre.covariance + Matrix9::identity() * floor;
    let inv = reg.try_inverse().unwrap_or_else(|| Matrix9::identity() / floor);
    (inv + inv.transpose()) * 0.5
}

/// Bias random-walk residual `[bg_j - bg_i, ba_j - ba_i]`.
pub fn bias_residual(i: &KeyframeState, j: &KeyframeState) -> Vector6<f64> {
    let mut r = Vector6::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&(j.bias_gyro - i.bias_gyro));
    r.fixed_rows_mut::<3>(3).copy_from(&(j.bias_accel - i.bias_accel));
    r
}

// ---------------------------------------------------------------- map

/// Global pose measurement of one keyframe derived from a registration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapFactor {
    pub t: f64,
    pub measured: Pose,
    /// Weight of the residual `[position; rotation]`.
    pub weight: Matrix6<f64>,
}

/// Map residual split into its position and rotation blocks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapEval {
    pub position: Vector3<f64>,
    pub rotation: Vector3<f64>,
    /// `[position; rotation]` with respect to the keyframe rotation and
    /// position.
    pub d_pose: Matrix6<f64>,
}

impl MapEval {
    pub fn stacked(&self) -> Vector6<f64> {
        let mut r = Vector6::zeros();
        r.fixed_rows_mut::<3>(0).copy_from(&self.position);
        r.fixed_rows_mut::<3>(3).copy_from(&self.rotation);
        r
    }
}

pub fn map_residual(kf: &KeyframeState, factor: &MapFactor) -> MapEval {
    let position = kf.pose.translation - factor.measured.translation;
    let rotation = (factor.measured.rotation.transpose() * kf.pose.rotation).log();
    let mut d_pose = Matrix6::zeros();
    d_pose.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    d_pose.fixed_view_mut::<3, 3>(3, 0).copy_from(&right_jacobian_inv(&rotation));
    MapEval { position, rotation, d_pose }
}

/// Turns a registration correction into a local-frame pose measurement
/// `T_LW dT T_WL T_LB` and carries the registration weight over to the
/// residual coordinates.
pub fn derive_map_measurement(reg: &RegistrationResult, t_wl: &Pose, t_lb: &Pose, t: f64) -> MapFactor {
    let t_lw = t_wl.inverse();
    let measured = t_lw.compose(&reg.delta_t).compose(t_wl).compose(t_lb);
    // Registration noise is a left perturbation about the linearization
    // center in the world frame; move it to a left perturbation in L.
    let adj = t_lw.compose(&Pose::from_translation(reg.linearization_center)).adjoint();
    // Sensitivity of [position; rotation] residual to that perturbation.
    let mut g = Matrix6::zeros();
    g.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&measured.translation));
    g.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-Matrix3::identity()));
    g.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-measured.rotation.matrix().transpose()));
    let k = g * adj;
    let weight = match k.try_inverse() {
        Some(k_inv) => {
            let w = k_inv.transpose() * reg.weight * k_inv;
            (w + w.transpose()) * 0.5
        }
        None => Matrix6::zeros(),
    };
    MapFactor { t, measured, weight }
}

// ---------------------------------------------------------------- gps

/// Position fix mapped into the local frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GpsFactor {
    pub t: f64,
    pub position: Vector3<f64>,
    pub information: Matrix3<f64>,
}

impl GpsFactor {
    /// Maps a world-frame fix through the current `T_WL`.
    pub fn from_world(t: f64, p_w: &Vector3<f64>, cov_w: &Matrix3<f64>, t_wl: &Pose, min_sigma: f64) -> Self {
        let t_lw = t_wl.inverse();
        let r = t_lw.rotation.matrix();
        let cov = r * cov_w * r.transpose() + Matrix3::identity() * (min_sigma * min_sigma);
        let information = cov.try_inverse().unwrap_or_else(Matrix3::zeros);
        Self { t, position: t_lw.transform_point(p_w), information: (information + information.transpose()) * 0.5 }
    }

    pub fn residual(&self, kf: &KeyframeState) -> Vector3<f64> {
        kf.pose.translation - self.position
    }
}

// ---------------------------------------------------------------- prior

/// Gaussian prior on the leading keyframes of the window left by
/// marginalization: `r = e0 + J (x - x_lin)` with `x` stacking the tangents
/// of `linearization.len()` consecutive keyframes.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowPrior {
    pub linearization: Vec<KeyframeState>,
    pub sqrt_information: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl WindowPrior {
    /// Prior from an information matrix and gradient `g` at the
    /// linearization point, so that `J^T J = H` and `J^T e0 = g`.
    pub fn from_information(linearization: Vec<KeyframeState>, h: &DMatrix<f64>, g: &DVector<f64>) -> Self {
        assert_eq!(h.nrows(), linearization.len() * STATE_DIM, "prior dimension must match its keyframes");
        let h = (h + h.transpose()) * 0.5;
        let n = h.nrows();
        let eig = h.symmetric_eigen();
        let max = eig.eigenvalues.max().max(0.0);
        let keep: Vec<usize> = (0..eig.eigenvalues.len()).filter(|&k| eig.eigenvalues[k] > max * 1e-14 && eig.eigenvalues[k] > 0.0).collect();
        let mut j = DMatrix::zeros(keep.len(), n);
        let mut e0 = DVector::zeros(keep.len());
        for (row, &k) in keep.iter().enumerate() {
            let l = eig.eigenvalues[k];
            let v = eig.eigenvectors.column(k);
            j.row_mut(row).copy_from(&(v.transpose() * l.sqrt()));
            e0[row] = v.dot(g) / l.sqrt();
        }
        Self { linearization, sqrt_information: j, offset: e0 }
    }

    /// Diagonal prior on one keyframe with the given standard deviations.
    pub fn diagonal(linearization: KeyframeState, sigmas: &[f64; STATE_DIM]) -> Self {
        let j = DMatrix::from_fn(STATE_DIM, STATE_DIM, |r, c| if r == c { 1.0 / sigmas[r] } else { 0.0 });
        Self { linearization: vec![linearization], sqrt_information: j, offset: DVector::zeros(STATE_DIM) }
    }

    /// Number of leading keyframes the prior constrains.
    pub fn len(&self) -> usize {
        self.linearization.len()
    }

    pub fn is_empty(&self) -> bool {
        self.linearization.is_empty()
    }

    /// Residual and Jacobian at the first `len()` entries of `states`.
    pub fn evaluate(&self, states: &[KeyframeState]) -> (DVector<f64>, DMatrix<f64>) {
        let m = self.len();
        assert!(states.len() >= m, "prior covers {m} keyframes but {} were given", states.len());
        let mut dx = DVector::zeros(m * STATE_DIM);
        let mut jac = self.sqrt_information.clone();
        for (k, (s, lin)) in states.iter().zip(&self.linearization).enumerate() {
            let d = s.local(lin);
            dx.rows_mut(k * STATE_DIM, STATE_DIM).copy_from_slice(d.as_slice());
            let jr_inv = right_jacobian_inv(&d.fixed_rows::<3>(0).into_owned());
            let cols = jac.columns(k * STATE_DIM, 3) * DMatrix::from_column_slice(3, 3, jr_inv.as_slice());
            jac.columns_mut(k * STATE_DIM, 3).copy_from(&cols);
        }
        (&self.offset + &self.sqrt_information * dx, jac)
    }
}
