//! Rigid-body primitives: SO(3) rotations, SE(3) poses and the exponential /
//! logarithm maps used by every residual in the estimator.
//!
//! Frame naming follows the usual `T_AB` convention: `T_AB` maps coordinates
//! expressed in frame `B` into frame `A`, so `T_AC = T_AB * T_BC`.
//!
//! Six-dimensional tangent vectors are always ordered rotation first,
//! translation second. The same ordering is used by the registration Hessian,
//! the map-factor weight and the estimator state blocks.

use std::f64::consts::PI;
use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix6, Quaternion, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

/// Angles below this use the series expansions of exp/log.
const SMALL_ANGLE: f64 = 1e-8;

/// Skew-symmetric matrix `[v]x` such that `[v]x * w = v x w`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`skew`], reading the off-diagonal entries.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// A rotation stored as an orthonormal 3x3 matrix with determinant +1.
#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation(Matrix3<f64>);

impl fmt::Debug for Rotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Rotation(log = {:?})", self.log().as_slice())
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Wraps a matrix without checking it. Callers are expected to pass a
    /// product of valid rotations or a matrix built from an orthonormal basis.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    /// Projects an arbitrary matrix onto the closest rotation (polar
    /// decomposition through the SVD).
    pub fn from_matrix_projected(m: &Matrix3<f64>) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.expect("svd u");
        let v_t = svd.v_t.expect("svd v_t");
        let mut d = Matrix3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Self(u * d * v_t)
    }

    /// Rotation about the z (gravity) axis.
    pub fn about_z(yaw: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        Self(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>) -> Self {
        Self(*q.to_rotation_matrix().matrix())
    }

    /// Builds a rotation from `(w, x, y, z)` quaternion components, which are
    /// normalized first.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Self {
        let q = UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z));
        Self::from_quaternion(&q)
    }

    /// Quaternion with non-negative scalar part.
    pub fn to_quaternion(&self) -> UnitQuaternion<f64> {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(self.0);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        if q.w < 0.0 {
            UnitQuaternion::new_unchecked(-q.into_inner())
        } else {
            q
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    pub fn exp(omega: &Vector3<f64>) -> Self {
        exp_so3(omega)
    }

    pub fn log(&self) -> Vector3<f64> {
        log_so3(self)
    }

    /// Heading angle of the rotated x axis in the xy plane.
    pub fn yaw(&self) -> f64 {
        self.0[(1, 0)].atan2(self.0[(0, 0)])
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        self.log().norm()
    }

    /// Largest deviation of `R^T R` from identity and of `det R` from one.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.0.transpose() * self.0 - Matrix3::identity();
        gram.amax().max((self.0.determinant() - 1.0).abs())
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

/// Rodrigues' formula with a second-order series below `1e-8` rad.
pub fn exp_so3(omega: &Vector3<f64>) -> Rotation {
    let theta = omega.norm();
    let k = skew(omega);
    if theta < SMALL_ANGLE {
        return Rotation(Matrix3::identity() + k + 0.5 * k * k);
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Rotation(Matrix3::identity() + a * k + b * k * k)
}

/// Principal logarithm; the returned vector has norm in `[0, pi]`.
pub fn log_so3(r: &Rotation) -> Vector3<f64> {
    let m = r.matrix();
    let anti = vee(&(m - m.transpose())) * 0.5; // = sin(theta) * axis
    let sin_theta = anti.norm();
    let cos_theta = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = sin_theta.atan2(cos_theta);

    if theta < SMALL_ANGLE {
        return anti * (1.0 + theta * theta / 6.0);
    }
    if theta < PI - 1e-4 {
        return anti * (theta / sin_theta);
    }

    // Near pi the antisymmetric part vanishes; recover the axis from the
    // symmetric part  (R + R^T)/2 = cos(theta) I + (1 - cos(theta)) k k^T.
    let sym = (m + m.transpose()) * 0.5;
    let kkt = (sym - Matrix3::identity() * cos_theta) / (1.0 - cos_theta);
    let i = (0..3)
        .max_by(|&a, &b| kkt[(a, a)].total_cmp(&kkt[(b, b)]))
        .unwrap_or(0);
    let ki = kkt[(i, i)].max(0.0).sqrt();
    let mut axis = Vector3::zeros();
    for j in 0..3 {
        axis[j] = if j == i { ki } else { kkt[(i, j)] / ki };
    }
    axis /= axis.norm();
    if axis.dot(&anti) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Right Jacobian of SO(3).
pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-5 {
        return Matrix3::identity() - 0.5 * k + k * k / 6.0;
    }
    let t2 = theta * theta;
    Matrix3::identity() - (1.0 - theta.cos()) / t2 * k + (theta - theta.sin()) / (t2 * theta) * k * k
}

/// Inverse of the right Jacobian of SO(3).
pub fn right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-5 {
        return Matrix3::identity() + 0.5 * k + k * k / 12.0;
    }
    let coeff = 1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() + 0.5 * k + coeff * k * k
}

/// Rigid transform `[R | t]`.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Rotation::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Rotation::identity(), t)
    }

    pub fn from_rotation(r: Rotation) -> Self {
        Self::new(r, Vector3::zeros())
    }

    /// Yaw-plus-translation transform.
    pub fn from_yaw(yaw: f64, t: Vector3<f64>) -> Self {
        Self::new(Rotation::about_z(yaw), t)
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -rt.rotate(&self.translation) }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    /// Exponential of a pose tangent `(theta, rho)`.
    pub fn exp(xi: &Vector6<f64>) -> Pose {
        let theta = xi.fixed_rows::<3>(0).into_owned();
        let rho = xi.fixed_rows::<3>(3).into_owned();
        // Left Jacobian equals the right Jacobian of -theta.
        let jl = right_jacobian(&(-theta));
        Pose::new(exp_so3(&theta), jl * rho)
    }

    /// Logarithm, inverse of [`Pose::exp`].
    pub fn log(&self) -> Vector6<f64> {
        let theta = self.rotation.log();
        let jl_inv = right_jacobian_inv(&(-theta));
        let rho = jl_inv * self.translation;
        let mut out = Vector6::zeros();
        out.fixed_rows_mut::<3>(0).copy_from(&theta);
        out.fixed_rows_mut::<3>(3).copy_from(&rho);
        out
    }

    /// Adjoint in rotation-first ordering: `T Exp(xi) T^-1 = Exp(Ad_T xi)`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation.matrix();
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(r);
        ad.fixed_view_mut::<3, 3>(3, 0).copy_from(&(skew(&self.translation) * r));
        ad
    }

    /// Homogeneous 4x4 matrix.
    pub fn to_homogeneous(&self) -> nalgebra::Matrix4<f64> {
        let mut m = nalgebra::Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Largest absolute entry difference of the homogeneous matrices.
    pub fn max_abs_diff(&self, other: &Pose) -> f64 {
        (self.to_homogeneous() - other.to_homogeneous()).amax()
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl Mul<&Pose> for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn inverse(a: &Pose) -> Pose {
    a.inverse()
}

pub fn transform_point(a: &Pose, p: &Vector3<f64>) -> Vector3<f64> {
    a.transform_point(p)
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut x = a % (2.0 * PI);
    if x <= -PI {
        x += 2.0 * PI;
    } else if x > PI {
        x -= 2.0 * PI;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut ChaCha8Rng, max_angle: f64) -> Rotation {
        let axis = Vector3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
            .normalize();
        exp_so3(&(axis * rng.random_range(0.0..max_angle)))
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let t = Vector3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
        Pose::new(random_rotation(rng, PI - 1e-3), t)
    }

    #[test]
    fn exp_identity_and_quarter_turn() {
        assert_eq!(exp_so3(&Vector3::zeros()).matrix(), &Matrix3::identity());
        let r = exp_so3(&Vector3::new(0.0, 0.0, PI / 2.0));
        let y = r.rotate(&Vector3::x());
        assert!((y - Vector3::y()).norm() < 1e-12);
    }

    #[test]
    fn log_identity_is_zero() {
        assert_eq!(log_so3(&Rotation::identity()), Vector3::zeros());
    }

    #[test]
    fn log_small_vector_round_trip() {
        let w = Vector3::new(0.1, -0.2, 0.3);
        assert!((log_so3(&exp_so3(&w)) - w).norm() < 1e-9);
    }

    #[test]
    fn log_at_pi() {
        let r = Rotation::from_matrix_unchecked(Matrix3::new(-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0));
        let w = log_so3(&r);
        assert!((w.abs() - Vector3::new(0.0, 0.0, PI)).norm() < 1e-7, "{w:?}");
    }

    #[test]
    fn exp_log_round_trip_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let axis = Vector3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
                .normalize();
            let w = axis * rng.random_range(0.0..PI - 1e-3);
            let back = log_so3(&exp_so3(&w));
            assert!((back - w).norm() < 1e-9, "{w:?} -> {back:?}");
            assert!(exp_so3(&w).orthonormality_error() < 1e-9);
        }
    }

    #[test]
    fn tiny_angles_are_continuous() {
        for &s in &[1e-12, 1e-9, 1e-8, 1e-7, 1e-5] {
            let w = Vector3::new(s, -2.0 * s, 0.5 * s);
            let back = log_so3(&exp_so3(&w));
            assert!((back - w).norm() < 1e-15 + 1e-9 * s);
        }
    }

    #[test]
    fn near_pi_round_trip() {
        for &eps in &[1e-3, 1e-5, 1e-7] {
            let w = Vector3::new(1.0, 2.0, -0.5).normalize() * (PI - eps);
            let back = log_so3(&exp_so3(&w));
            assert!((back - w).norm() < 1e-6, "eps {eps}: {back:?}");
        }
    }

    #[test]
    fn pose_compose_identity_and_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_pose(&mut rng);
        assert!(Pose::identity().compose(&t).max_abs_diff(&t) < 1e-15);
        let p = Pose::from_translation(Vector3::new(1.0, 2.0, 3.0)).transform_point(&Vector3::zeros());
        assert_eq!(p, Vector3::new(1.0, 2.0, 3.0));
        assert!(t.compose(&t.inverse()).max_abs_diff(&Pose::identity()) < 1e-9);
    }

    #[test]
    fn global_measurement_chain_with_identity_correction() {
        // T_LB = T_LW * dT * T_WL * T_LB must reduce to T_LB when dT = I.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t_wl = random_pose(&mut rng);
        let t_lb = random_pose(&mut rng);
        let chain = t_wl.inverse() * Pose::identity() * t_wl * t_lb;
        assert!(chain.max_abs_diff(&t_lb) < 1e-9);
    }

    #[test]
    fn group_axioms_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let (a, b, c) = (random_pose(&mut rng), random_pose(&mut rng), random_pose(&mut rng));
            assert!(((a * b) * c).max_abs_diff(&(a * (b * c))) < 1e-9);
            let p = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 1.0);
            let lhs = (a * b).transform_point(&p);
            let rhs = a.transform_point(&b.transform_point(&p));
            assert!((lhs - rhs).norm() < 1e-9);
        }
    }

    #[test]
    fn adjoint_moves_perturbations_between_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = random_pose(&mut rng);
        let xi = Vector6::new(0.01, -0.02, 0.015, 0.1, 0.2, -0.3);
        let lhs = t * Pose::exp(&xi) * t.inverse();
        let rhs = Pose::exp(&(t.adjoint() * xi));
        assert!(lhs.max_abs_diff(&rhs) < 1e-9);
    }

    #[test]
    fn pose_exp_log_round_trip() {
        let xi = Vector6::new(0.3, -0.1, 0.7, 1.0, -2.0, 0.5);
        assert!((Pose::exp(&xi).log() - xi).norm() < 1e-12);
    }

    #[test]
    fn right_jacobian_matches_finite_difference() {
        let phi = Vector3::new(0.3, -0.4, 0.2);
        let jr = right_jacobian(&phi);
        let h = 1e-6;
        for i in 0..3 {
            let mut d = Vector3::zeros();
            d[i] = h;
            // Exp(phi + d) ~ Exp(phi) Exp(Jr d)
            let lhs = (exp_so3(&phi).transpose() * exp_so3(&(phi + d))).log() / h;
            assert!((lhs - jr.column(i)).norm() < 1e-6);
        }
        assert!((right_jacobian_inv(&phi) * jr - Matrix3::identity()).amax() < 1e-12);
    }

    #[test]
    fn quaternion_round_trip() {
        let r = exp_so3(&Vector3::new(0.2, 1.0, -0.3));
        let q = r.to_quaternion();
        let back = Rotation::from_wxyz(q.w, q.i, q.j, q.k);
        assert!((back.matrix() - r.matrix()).amax() < 1e-12);
        assert!((Rotation::about_z(0.7).yaw() - 0.7).abs() < 1e-15);
    }
}
