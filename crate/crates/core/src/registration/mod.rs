//! Point-to-plane ICP of a sparse landmark cloud against the twin, the
//! resulting observability Hessian and its adaptive weight.

mod worker;

pub use worker::{run_request, RegistrationRequest, RegistrationResponse, RegistrationWorker};

use nalgebra::{Matrix6, SymmetricEigen, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pose, Rotation};
use crate::twin::SpatialIndex;

pub const MIN_CORRESPONDENCES: usize = 12;
const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistrationError {
    #[error("source cloud is empty")]
    EmptySource,
    #[error("only {0} correspondences, need {MIN_CORRESPONDENCES}")]
    TooFewCorrespondences(usize),
    #[error("normal equations are singular (condition number {0:e})")]
    SingularNormalEquations(f64),
    #[error("Hessian has zero trace")]
    ZeroTrace,
}

/// Source point paired with its closest twin surface point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
    pub n: Vector3<f64>,
    pub distance: f64,
}

impl Correspondence {
    /// Signed point-to-plane offset `n . (a - b)`.
    pub fn offset(&self) -> f64 {
        self.n.dot(&(self.a - self.b))
    }

    /// Row of the linearized system `y = A x` for a left perturbation
    /// `x = (rotation, translation)` applied to `a`.
    pub fn jacobian_row(&self) -> Vector6<f64> {
        let c = self.a.cross(&self.n);
        Vector6::new(-c.x, -c.y, -c.z, -self.n.x, -self.n.y, -self.n.z)
    }
}

/// Closest-point association with a hard distance gate.
pub fn associate(source: &[Vector3<f64>], index: &SpatialIndex, max_dist: f64) -> Result<Vec<Correspondence>, RegistrationError> {
    if source.is_empty() {
        return Err(RegistrationError::EmptySource);
    }
    let corrs: Vec<Correspondence> = source
        .iter()
        .filter_map(|a| {
            let hit = index.closest_point(a)?;
            (hit.distance <= max_dist).then_some(Correspondence { a: *a, b: hit.point, n: hit.normal, distance: hit.distance })
        })
        .collect();
    if corrs.len() < MIN_CORRESPONDENCES {
        return Err(RegistrationError::TooFewCorrespondences(corrs.len()));
    }
    Ok(corrs)
}

/// Gauss-Newton Hessian `sum A^T A` (rotation block first).
pub fn compute_hessian(corrs: &[Correspondence]) -> Matrix6<f64> {
    corrs.iter().fold(Matrix6::zeros(), |h, c| {
        let row = c.jacobian_row();
        h + row * row.transpose()
    })
}

/// One linearized point-to-plane step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IcpStep {
    /// `(rotation, translation)` increment.
    pub x: Vector6<f64>,
    pub delta: Pose,
    pub hessian: Matrix6<f64>,
    /// RMS of the linearized residuals after the step.
    pub rmse: f64,
}

fn finish_step(corrs: &[Correspondence], x: Vector6<f64>, hessian: Matrix6<f64>) -> IcpStep {
    let sq: f64 = corrs.iter().map(|c| (c.offset() - c.jacobian_row().dot(&x)).powi(2)).sum();
    let rmse = (sq / corrs.len() as f64).sqrt();
    let delta = Pose::new(Rotation::exp(&x.fixed_rows::<3>(0).into_owned()), x.fixed_rows::<3>(3).into_owned());
    IcpStep { x, delta, hessian, rmse }
}

fn gradient(corrs: &[Correspondence]) -> Vector6<f64> {
    corrs.iter().fold(Vector6::zeros(), |g, c| g + c.jacobian_row() * c.offset())
}

/// Solves `H x = A^T y`; the returned transform moves the source onto the
/// target (`delta * a ~ b`).
pub fn solve_point_to_plane(corrs: &[Correspondence]) -> Result<IcpStep, RegistrationError> {
    if corrs.len() < MIN_CORRESPONDENCES {
        return Err(RegistrationError::TooFewCorrespondences(corrs.len()));
    }
    let h = compute_hessian(corrs);
    let eig = SymmetricEigen::new(h);
    let (min, max) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    let cond = if min > 0.0 { max / min } else { f64::INFINITY };
    if cond > MAX_CONDITION {
        return Err(RegistrationError::SingularNormalEquations(cond));
    }
    let x = eig.eigenvectors * eig.eigenvalues.map(|l| 1.0 / l).component_mul(&(eig.eigenvectors.transpose() * gradient(corrs)));
    Ok(finish_step(corrs, x, h))
}

/// Minimum-norm step: eigen-directions with eigenvalue below `1e-12` of
/// the largest are left untouched.
pub fn solve_point_to_plane_truncated(corrs: &[Correspondence]) -> IcpStep {
    let h = compute_hessian(corrs);
    let eig = SymmetricEigen::new(h);
    let cutoff = eig.eigenvalues.max() / MAX_CONDITION;
    let inv = eig.eigenvalues.map(|l| if l > cutoff && l > 0.0 { 1.0 / l } else { 0.0 });
    let x = eig.eigenvectors * inv.component_mul(&(eig.eigenvectors.transpose() * gradient(corrs)));
    finish_step(corrs, x, h)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpConfig {
    pub max_iter: usize,
    /// Association gates (m); a stage ends once the step is below `tol`.
    pub gate_schedule: Vec<f64>,
    pub tol: f64,
    pub min_inlier_fraction: f64,
    pub rmse_threshold: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self { max_iter: 30, gate_schedule: vec![1.0, 0.5, 0.25], tol: 1e-6, min_inlier_fraction: 0.5, rmse_threshold: 0.3 }
    }
}

/// Outcome of one registration attempt, the global measurement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegistrationResult {
    /// Correction in the world frame: `delta_t * source ~ twin`.
    pub delta_t: Pose,
    /// Hessian about `linearization_center` (rotation block first).
    pub hessian: Matrix6<f64>,
    /// Adaptive weight, set by [`RegistrationResult::with_weight`].
    pub weight: Matrix6<f64>,
    pub linearization_center: Vector3<f64>,
    pub inlier_rmse: f64,
    pub inlier_count: usize,
    pub source_count: usize,
    pub iterations: usize,
    pub converged: bool,
}

impl RegistrationResult {
    fn failed(source_count: usize, center: Vector3<f64>, iterations: usize) -> Self {
        Self {
            delta_t: Pose::identity(),
            hessian: Matrix6::zeros(),
            weight: Matrix6::zeros(),
            linearization_center: center,
            inlier_rmse: f64::INFINITY,
            inlier_count: 0,
            source_count,
            iterations,
            converged: false,
        }
    }

    /// Attaches `compute_weight(hessian, inlier_rmse, beta)`.
    pub fn with_weight(mut self, weighting: &Weighting) -> Result<Self, RegistrationError> {
        self.weight = weighting.weight(&self.hessian, self.inlier_rmse)?;
        Ok(self)
    }
}

/// Alternates association and point-to-plane steps starting from `init`.
/// Linearization happens about `center`, so the Hessian does not depend on
/// where the world origin lies.
pub fn iterate_icp(
    source: &[Vector3<f64>],
    index: &SpatialIndex,
    init: &Pose,
    center: &Vector3<f64>,
    cfg: &IcpConfig,
) -> RegistrationResult {
    let n = source.len();
    if n == 0 || index.is_empty() || cfg.gate_schedule.is_empty() {
        return RegistrationResult::failed(n, *center, 0);
    }
    let to_center = Pose::from_translation(-center);
    let from_center = Pose::from_translation(*center);
    // Current transform in centered coordinates.
    let mut current = to_center.compose(init).compose(&from_center);
    let local: Vec<Vector3<f64>> = source.iter().map(|p| p - center).collect();
    let shifted = *center;
    let mut stage = 0;
    let mut last: Option<(IcpStep, usize)> = None;

    for iter in 1..=cfg.max_iter {
        let gate = cfg.gate_schedule[stage];
        let moved: Vec<Vector3<f64>> = local.iter().map(|p| current.transform_point(p) + shifted).collect();
        let mut corrs = match associate(&moved, index, gate) {
            Ok(c) => c,
            Err(_) => return RegistrationResult::failed(n, *center, iter),
        };
        for c in &mut corrs {
            c.a -= shifted;
            c.b -= shifted;
        }
        let step = solve_point_to_plane(&corrs).unwrap_or_else(|_| solve_point_to_plane_truncated(&corrs));
        current = step.delta.compose(&current);
        let small = step.x.norm() < cfg.tol;
        last = Some((step, corrs.len()));
        if small {
            if stage + 1 == cfg.gate_schedule.len() {
                return finish(&current, &from_center, &to_center, step, corrs.len(), n, *center, iter, cfg, true);
            }
            stage += 1;
        }
    }
    match last {
        Some((step, count)) => finish(&current, &from_center, &to_center, step, count, n, *center, cfg.max_iter, cfg, false),
        None => RegistrationResult::failed(n, *center, cfg.max_iter),
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    current: &Pose,
    from_center: &Pose,
    to_center: &Pose,
    step: IcpStep,
    inliers: usize,
    n: usize,
    center: Vector3<f64>,
    iterations: usize,
    cfg: &IcpConfig,
    settled: bool,
) -> RegistrationResult {
    let delta_t = from_center.compose(current).compose(to_center);
    let fraction = inliers as f64 / n as f64;
    let converged = settled && fraction >= cfg.min_inlier_fraction && step.rmse <= cfg.rmse_threshold;
    RegistrationResult {
        delta_t,
        hessian: step.hessian,
        weight: Matrix6::zeros(),
        linearization_center: center,
        inlier_rmse: step.rmse,
        inlier_count: inliers,
        source_count: n,
        iterations,
        converged,
    }
}

/// Adaptive weight parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Weighting {
    pub beta: f64,
    /// Length scale (m) dividing the inlier RMSE inside the exponential.
    pub rmse_scale: f64,
    /// Replace the weight by `trace(W) / 6 * I` (ablation).
    pub isotropic: bool,
}

impl Default for Weighting {
    fn default() -> Self {
        Self { beta: 1.4e5, rmse_scale: 1.0, isotropic: false }
    }
}

impl Weighting {
    pub fn weight(&self, hessian: &Matrix6<f64>, rmse: f64) -> Result<Matrix6<f64>, RegistrationError> {
        let w = compute_weight(hessian, rmse / self.rmse_scale, self.beta)?;
        Ok(if self.isotropic { isotropic_equivalent(&w) } else { w })
    }
}

/// `W = beta / trace(H) * exp(-gamma^2 / 2) * H`.
pub fn compute_weight(hessian: &Matrix6<f64>, gamma: f64, beta: f64) -> Result<Matrix6<f64>, RegistrationError> {
    let sigma2 = hessian.trace();
    if !(sigma2 > 0.0) {
        return Err(RegistrationError::ZeroTrace);
    }
    Ok(hessian * (beta / sigma2 * (-0.5 * gamma * gamma).exp()))
}

/// Isotropic matrix with the same trace.
pub fn isotropic_equivalent(w: &Matrix6<f64>) -> Matrix6<f64> {
    Matrix6::identity() * (w.trace() / 6.0)
}

/// Eigenvalues in ascending order.
pub fn sorted_eigenvalues(m: &Matrix6<f64>) -> [f64; 6] {
    let mut e: Vec<f64> = SymmetricEigen::new(*m).eigenvalues.iter().copied().collect();
    e.sort_by(f64::total_cmp);
    [e[0], e[1], e[2], e[3], e[4], e[5]]
}

/// One row of the registration log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationLogEntry {
    pub t: f64,
    pub converged: bool,
    pub inlier_count: usize,
    pub gamma: f64,
    pub trace_h: f64,
    pub weight_eigenvalues: [f64; 6],
}

impl RegistrationLogEntry {
    pub fn new(t: f64, r: &RegistrationResult) -> Self {
        Self {
            t,
            converged: r.converged,
            inlier_count: r.inlier_count,
            gamma: r.inlier_rmse,
            trace_h: r.hessian.trace(),
            weight_eigenvalues: sorted_eigenvalues(&r.weight),
        }
    }
}
