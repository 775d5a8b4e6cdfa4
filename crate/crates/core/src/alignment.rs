//! Yaw-and-translation alignment of the local estimation frame to the world
//! frame, bootstrapped from GPS fixes and refined with registration
//! positions once those are available.

use nalgebra::{Matrix4, SymmetricEigen, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{wrap_angle, Pose, Rotation};

/// Minimum horizontal spread (m) for the yaw to be observable.
pub const MIN_HORIZONTAL_SPREAD: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignmentError {
    #[error("need at least two position pairs with matching lengths")]
    TooFewPairs,
    #[error("horizontal spread {0:.3} m is too small to observe the heading")]
    DegenerateSpread(f64),
    #[error("alignment information matrix is singular")]
    SingularInformation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentSource {
    Gps,
    Registration,
}

/// `T_WL` restricted to a rotation about gravity plus a translation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentEstimate {
    pub yaw: f64,
    pub translation: Vector3<f64>,
    pub heading_variance: f64,
    pub converged: bool,
    pub source: AlignmentSource,
    pub n_pairs: usize,
}

impl AlignmentEstimate {
    pub fn rotation(&self) -> Rotation {
        Rotation::about_z(self.yaw)
    }

    /// Pose of the local frame in the world frame.
    pub fn pose(&self) -> Pose {
        Pose::new(self.rotation(), self.translation)
    }
}

/// Closed-form least-squares yaw and translation mapping `local` onto
/// `global`.
pub fn umeyama_yaw(global: &[Vector3<f64>], local: &[Vector3<f64>]) -> Result<AlignmentEstimate, AlignmentError> {
    let n = global.len();
    if n < 2 || local.len() != n {
        return Err(AlignmentError::TooFewPairs);
    }
    let cg = global.iter().sum::<Vector3<f64>>() / n as f64;
    let cl = local.iter().sum::<Vector3<f64>>() / n as f64;
    let spread = local.iter().map(|l| (l - cl).xy().norm()).fold(0.0, f64::max);
    if spread <= MIN_HORIZONTAL_SPREAD {
        return Err(AlignmentError::DegenerateSpread(spread));
    }
    let (mut s, mut c) = (0.0, 0.0);
    for (g, l) in global.iter().zip(local) {
        let (g, l) = (g - cg, l - cl);
        s += l.x * g.y - l.y * g.x;
        c += l.x * g.x + l.y * g.y;
    }
    let yaw = s.atan2(c);
    let translation = cg - Rotation::about_z(yaw).rotate(&cl);
    Ok(AlignmentEstimate { yaw, translation, heading_variance: f64::INFINITY, converged: false, source: AlignmentSource::Gps, n_pairs: n })
}

/// Cost `sum |g - (R l + t)|^2` of a candidate alignment.
pub fn alignment_cost(global: &[Vector3<f64>], local: &[Vector3<f64>], yaw: f64, t: &Vector3<f64>) -> f64 {
    let r = Rotation::about_z(yaw);
    global.iter().zip(local).map(|(g, l)| (g - r.rotate(l) - t).norm_squared()).sum()
}

/// Heading variance from the Gauss-Newton information of the alignment
/// cost in `(yaw, t)`, scaled by the residual variance.
pub fn heading_covariance(global: &[Vector3<f64>], local: &[Vector3<f64>], est: &AlignmentEstimate) -> Result<f64, AlignmentError> {
    let n = global.len();
    if n < 2 || local.len() != n {
        return Err(AlignmentError::TooFewPairs);
    }
    let r = est.rotation();
    let mut info = Matrix4::zeros();
    let mut sq = 0.0;
    for (g, l) in global.iter().zip(local) {
        let rl = r.rotate(l);
        sq += (g - rl - est.translation).norm_squared();
        // d(residual)/d(yaw) = -(z x R l); d/dt = -I.
        let dyaw = Vector3::new(-rl.y, rl.x, 0.0);
        for k in 0..3 {
            let mut row = Vector4::zeros();
            row[0] = dyaw[k];
            row[1 + k] = 1.0;
            info += row * row.transpose();
        }
    }
    let eig = SymmetricEigen::new(info);
    let (min, max) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    if !(min > 0.0) || max / min > 1e12 {
        return Err(AlignmentError::SingularInformation);
    }
    let dof = (3 * n).saturating_sub(4).max(1) as f64;
    let sigma2 = sq / dof;
    let inv = eig.eigenvectors * Matrix4::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l)) * eig.eigenvectors.transpose();
    Ok((inv[(0, 0)] * sigma2).max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignmentConfig {
    /// Heading variance threshold (rad^2).
    pub epsilon: f64,
    pub min_pairs: usize,
    /// Pairing tolerance between position streams (s).
    pub max_dt: f64,
    /// Also converge once the pairs span this much time (s).
    pub min_duration: Option<f64>,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self { epsilon: (std::f64::consts::PI / 180.0).powi(2), min_pairs: 20, max_dt: 0.1, min_duration: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentLogEntry {
    pub t: f64,
    pub phase: u8,
    pub yaw: f64,
    pub translation: Vector3<f64>,
    pub heading_variance: f64,
    pub converged: bool,
}

#[derive(Clone, Debug, Default)]
struct PairSet {
    times: Vec<f64>,
    global: Vec<Vector3<f64>>,
    local: Vec<Vector3<f64>>,
}

/// Incremental two-phase aligner. Each phase re-solves on every new pair
/// until its convergence test passes, after which its estimate is frozen.
#[derive(Clone, Debug)]
pub struct FrameAligner {
    cfg: AlignmentConfig,
    gps: PairSet,
    reg: PairSet,
    phase1: Option<AlignmentEstimate>,
    phase2: Option<AlignmentEstimate>,
    log: Vec<AlignmentLogEntry>,
}

impl FrameAligner {
    pub fn new(cfg: AlignmentConfig) -> Self {
        Self { cfg, gps: PairSet::default(), reg: PairSet::default(), phase1: None, phase2: None, log: Vec::new() }
    }

    pub fn config(&self) -> &AlignmentConfig {
        &self.cfg
    }

    /// True once registration pairs have started arriving.
    pub fn in_registration_phase(&self) -> bool {
        !self.reg.times.is_empty()
    }

    pub fn phase1(&self) -> Option<&AlignmentEstimate> {
        self.phase1.as_ref()
    }

    pub fn phase2(&self) -> Option<&AlignmentEstimate> {
        self.phase2.as_ref()
    }

    /// Best available estimate: phase 2 once converged, else phase 1.
    pub fn current(&self) -> Option<&AlignmentEstimate> {
        match (&self.phase2, &self.phase1) {
            (Some(p2), _) if p2.converged => Some(p2),
            (_, Some(p1)) => Some(p1),
            (Some(p2), None) => Some(p2),
            (None, None) => None,
        }
    }

    pub fn log(&self) -> &[AlignmentLogEntry] {
        &self.log
    }

    /// GPS pairs are used only before registration pairs arrive and until
    /// phase 1 converges.
    pub fn add_gps_pair(&mut self, t: f64, global: Vector3<f64>, local: Vector3<f64>) -> Option<AlignmentEstimate> {
        if self.in_registration_phase() || self.phase1.is_some_and(|e| e.converged) {
            return None;
        }
        push(&mut self.gps, t, global, local);
        let est = solve(&self.cfg, &self.gps, AlignmentSource::Gps)?;
        self.phase1 = Some(est);
        self.record(t, 1, &est);
        Some(est)
    }

    pub fn add_registration_pair(&mut self, t: f64, global: Vector3<f64>, local: Vector3<f64>) -> Option<AlignmentEstimate> {
        if self.phase2.is_some_and(|e| e.converged) {
            return None;
        }
        push(&mut self.reg, t, global, local);
        let est = solve(&self.cfg, &self.reg, AlignmentSource::Registration)?;
        self.phase2 = Some(est);
        self.record(t, 2, &est);
        Some(est)
    }

    fn record(&mut self, t: f64, phase: u8, e: &AlignmentEstimate) {
        self.log.push(AlignmentLogEntry {
            t,
            phase,
            yaw: e.yaw,
            translation: e.translation,
            heading_variance: e.heading_variance,
            converged: e.converged,
        });
    }
}

fn push(set: &mut PairSet, t: f64, g: Vector3<f64>, l: Vector3<f64>) {
    set.times.push(t);
    set.global.push(g);
    set.local.push(l);
}

fn solve(cfg: &AlignmentConfig, set: &PairSet, source: AlignmentSource) -> Option<AlignmentEstimate> {
    let mut est = umeyama_yaw(&set.global, &set.local).ok()?;
    est.source = source;
    est.heading_variance = heading_covariance(&set.global, &set.local, &est).unwrap_or(f64::INFINITY);
    let n = set.times.len();
    let span = set.times.last().unwrap_or(&0.0) - set.times.first().unwrap_or(&0.0);
    est.converged =
        n >= cfg.min_pairs && (est.heading_variance < cfg.epsilon || cfg.min_duration.is_some_and(|d| span >= d));
    Some(est)
}

/// Index of the sample in sorted `times` nearest to `t` within `max_dt`.
pub fn nearest_stamp(times: &[f64], t: f64, max_dt: f64) -> Option<usize> {
    let i = times.partition_point(|&x| x < t);
    let mut best: Option<usize> = None;
    for j in [i.wrapping_sub(1), i] {
        if j < times.len() && (times[j] - t).abs() <= max_dt && best.is_none_or(|b| (times[j] - t).abs() < (times[b] - t).abs()) {
            best = Some(j);
        }
    }
    best
}

/// Batch form: feeds GPS pairs until the first registration position, then
/// registration pairs, returning the estimate after every accepted pair.
/// Streams are `(t, position)` sorted by time; `vslam` supplies local
/// positions.
pub fn run_alignment(
    gps: &[(f64, Vector3<f64>)],
    registration: &[(f64, Vector3<f64>)],
    vslam: &[(f64, Vector3<f64>)],
    cfg: &AlignmentConfig,
) -> Vec<AlignmentEstimate> {
    let times: Vec<f64> = vslam.iter().map(|v| v.0).collect();
    let first_reg = registration.first().map_or(f64::INFINITY, |r| r.0);
    let mut aligner = FrameAligner::new(cfg.clone());
    let mut out = Vec::new();
    let mut events: Vec<(f64, bool, Vector3<f64>)> = gps
        .iter()
        .filter(|g| g.0 < first_reg)
        .map(|g| (g.0, false, g.1))
        .chain(registration.iter().map(|r| (r.0, true, r.1)))
        .collect();
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for (t, is_reg, global) in events {
        let Some(k) = nearest_stamp(&times, t, cfg.max_dt) else { continue };
        let local = vslam[k].1;
        let est = if is_reg { aligner.add_registration_pair(t, global, local) } else { aligner.add_gps_pair(t, global, local) };
        out.extend(est);
    }
    out
}

/// Signed heading difference between two alignments (rad).
pub fn heading_error(a: &AlignmentEstimate, b: &AlignmentEstimate) -> f64 {
    wrap_angle(a.yaw - b.yaw)
}
