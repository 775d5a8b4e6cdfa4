//! Absolute trajectory error metrics and the alignments applied before
//! computing them.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{umeyama_yaw, AlignmentError};
use crate::geometry::{Pose, Rotation};

pub const DEFAULT_MAX_DT: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("trajectory is empty")]
    Empty,
    #[error("no timestamps could be paired")]
    EmptyPairing,
    #[error("need at least two pairs, got {0}")]
    TooFewPairs(usize),
    #[error("timestamps must strictly increase")]
    UnsortedStamps,
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error("rigid alignment is degenerate")]
    Degenerate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameTag {
    #[serde(rename = "L")]
    Local,
    #[serde(rename = "W")]
    World,
}

/// Timestamped poses in a declared frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub frame: FrameTag,
    pub source: String,
    pub poses: Vec<(f64, Pose)>,
}

impl TrajectoryRecord {
    pub fn new(frame: FrameTag, source: impl Into<String>, poses: Vec<(f64, Pose)>) -> Result<Self, EvalError> {
        if poses.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(EvalError::UnsortedStamps);
        }
        Ok(Self { frame, source: source.into(), poses })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// Ground-truth and estimated pose at a shared timestamp.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosePair {
    pub t: f64,
    pub gt: Pose,
    pub est: Pose,
}

/// Pairs every pose of `a` with the nearest pose of `b` within `max_dt`.
pub fn associate_stamps(gt: &TrajectoryRecord, est: &TrajectoryRecord, max_dt: f64) -> Result<Vec<PosePair>, EvalError> {
    if gt.is_empty() || est.is_empty() {
        return Err(EvalError::Empty);
    }
    let times: Vec<f64> = est.poses.iter().map(|p| p.0).collect();
    let pairs: Vec<PosePair> = gt
        .poses
        .iter()
        .filter_map(|(t, g)| {
            let k = crate::alignment::nearest_stamp(&times, *t, max_dt + 1e-12)?;
            Some(PosePair { t: *t, gt: *g, est: est.poses[k].1 })
        })
        .collect();
    if pairs.is_empty() {
        return Err(EvalError::EmptyPairing);
    }
    Ok(pairs)
}

/// Root mean square position error (m).
pub fn ate_position(pairs: &[PosePair]) -> Result<f64, EvalError> {
    if pairs.len() < 2 {
        return Err(EvalError::TooFewPairs(pairs.len()));
    }
    let sum: f64 = pairs.iter().map(|p| (p.gt.translation - p.est.translation).norm_squared()).sum();
    Ok((sum / pairs.len() as f64).sqrt())
}

/// Root mean square rotation angle error (degrees).
pub fn ate_rotation(pairs: &[PosePair]) -> Result<f64, EvalError> {
    if pairs.len() < 2 {
        return Err(EvalError::TooFewPairs(pairs.len()));
    }
    let sum: f64 = pairs
        .iter()
        .map(|p| (p.gt.rotation.transpose() * p.est.rotation).log().norm_squared())
        .sum();
    Ok((sum / pairs.len() as f64).sqrt().to_degrees())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalAlignment {
    #[default]
    None,
    Yaw4dof,
    Se3,
}

impl std::str::FromStr for EvalAlignment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "yaw4dof" => Ok(Self::Yaw4dof),
            "se3" => Ok(Self::Se3),
            other => Err(format!("unknown alignment mode `{other}`")),
        }
    }
}

/// Expresses `est` in the world frame of `gt` using the requested offline
/// alignment estimated from paired positions.
pub fn align_for_eval(est: &TrajectoryRecord, gt: &TrajectoryRecord, mode: EvalAlignment, max_dt: f64) -> Result<TrajectoryRecord, EvalError> {
    let transform = match mode {
        EvalAlignment::None => return Ok(est.clone()),
        EvalAlignment::Yaw4dof | EvalAlignment::Se3 => {
            let pairs = associate_stamps(gt, est, max_dt)?;
            let g: Vec<Vector3<f64>> = pairs.iter().map(|p| p.gt.translation).collect();
            let l: Vec<Vector3<f64>> = pairs.iter().map(|p| p.est.translation).collect();
            if mode == EvalAlignment::Yaw4dof {
                umeyama_yaw(&g, &l)?.pose()
            } else {
                umeyama_rigid(&g, &l)?
            }
        }
    };
    let poses = est.poses.iter().map(|(t, p)| (*t, transform.compose(p))).collect();
    Ok(TrajectoryRecord { frame: FrameTag::World, source: est.source.clone(), poses })
}

/// Least-squares rigid transform (no scale) mapping `local` onto `global`.
pub fn umeyama_rigid(global: &[Vector3<f64>], local: &[Vector3<f64>]) -> Result<Pose, EvalError> {
    let n = global.len();
    if n < 3 || local.len() != n {
        return Err(EvalError::TooFewPairs(n));
    }
    let cg = global.iter().sum::<Vector3<f64>>() / n as f64;
    let cl = local.iter().sum::<Vector3<f64>>() / n as f64;
    let mut cov = Matrix3::zeros();
    for (g, l) in global.iter().zip(local) {
        cov += (g - cg) * (l - cl).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.ok_or(EvalError::Degenerate)?, svd.v_t.ok_or(EvalError::Degenerate)?);
    let mut sv = svd.singular_values;
    // Order singular values descending for the rank test.
    sv.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    if sv[1] <= 1e-12 * sv[0].max(1e-300) {
        return Err(EvalError::Degenerate);
    }
    let mut s = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * v_t;
    let rot = Rotation::from_matrix_projected(&r);
    Ok(Pose::new(rot, cg - rot.rotate(&cl)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub config_hash: String,
    pub seed: u64,
    pub ate_p_m: f64,
    pub ate_r_deg: f64,
    pub n_pairs: usize,
    pub alignment_mode: EvalAlignment,
}

/// Aligns, pairs and computes both metrics.
pub fn evaluate(
    gt: &TrajectoryRecord,
    est: &TrajectoryRecord,
    mode: EvalAlignment,
    config_hash: &str,
    seed: u64,
) -> Result<Metrics, EvalError> {
    let aligned = align_for_eval(est, gt, mode, DEFAULT_MAX_DT)?;
    let pairs = associate_stamps(gt, &aligned, DEFAULT_MAX_DT)?;
    Ok(Metrics {
        config_hash: config_hash.to_string(),
        seed,
        ate_p_m: ate_position(&pairs)?,
        ate_r_deg: ate_rotation(&pairs)?,
        n_pairs: pairs.len(),
        alignment_mode: mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gt_record(n: usize) -> TrajectoryRecord {
        let poses = (0..n)
            .map(|k| {
                let t = k as f64 * 0.2;
                (t, Pose::new(Rotation::about_z(0.1 * t), Vector3::new(3.0 * t, (t * 0.7).sin() * 5.0, 2.0 + 0.1 * t)))
            })
            .collect();
        TrajectoryRecord::new(FrameTag::World, "gt", poses).unwrap()
    }

    fn map(r: &TrajectoryRecord, f: impl Fn(&Pose) -> Pose, dt: f64) -> TrajectoryRecord {
        TrajectoryRecord { frame: r.frame, source: "est".into(), poses: r.poses.iter().map(|(t, p)| (t + dt, f(p))).collect() }
    }

    #[test]
    fn pairing_rules() {
        let gt = gt_record(20);
        assert_eq!(associate_stamps(&gt, &gt, 0.02).unwrap().len(), 20);
        assert_eq!(associate_stamps(&gt, &map(&gt, |p| *p, 0.01), 0.02).unwrap().len(), 20);
        assert_eq!(associate_stamps(&gt, &map(&gt, |p| *p, 100.0), 0.02), Err(EvalError::EmptyPairing));
    }

    #[test]
    fn zero_and_constant_offset() {
        let gt = gt_record(20);
        let p = associate_stamps(&gt, &gt, 0.02).unwrap();
        assert_eq!(ate_position(&p).unwrap(), 0.0);
        assert_eq!(ate_rotation(&p).unwrap(), 0.0);
        let off = map(&gt, |p| Pose::new(p.rotation, p.translation + Vector3::new(3.0, 4.0, 0.0)), 0.0);
        let p = associate_stamps(&gt, &off, 0.02).unwrap();
        assert!((ate_position(&p).unwrap() - 5.0).abs() < 1e-12);
        let rot = map(&gt, |p| Pose::new(p.rotation * Rotation::about_z(10f64.to_radians()), p.translation), 0.0);
        let p = associate_stamps(&gt, &rot, 0.02).unwrap();
        assert!((ate_rotation(&p).unwrap() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn matches_direct_recomputation() {
        let gt = gt_record(50);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let est = map(&gt, |p| *p, 0.0);
        let est = TrajectoryRecord {
            poses: est
                .poses
                .iter()
                .map(|(t, p)| {
                    let dr = Vector3::from_fn(|_, _| rng.random_range(-0.1..0.1));
                    let dp = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
                    (*t, Pose::new(p.rotation * Rotation::exp(&dr), p.translation + dp))
                })
                .collect(),
            ..est
        };
        let pairs = associate_stamps(&gt, &est, 0.02).unwrap();
        let mut sp = 0.0;
        let mut sr = 0.0;
        for (g, e) in gt.poses.iter().zip(&est.poses) {
            let d = g.1.translation - e.1.translation;
            sp += d.x * d.x + d.y * d.y + d.z * d.z;
            let rel = g.1.rotation.matrix().transpose() * e.1.rotation.matrix();
            let angle = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
            sr += angle * angle;
        }
        let n = gt.len() as f64;
        assert!((ate_position(&pairs).unwrap() - (sp / n).sqrt()).abs() < 1e-12);
        assert!((ate_rotation(&pairs).unwrap() - (sr / n).sqrt().to_degrees()).abs() < 1e-9);
    }

    #[test]
    fn alignment_modes_recover_exact_copies() {
        let gt = gt_record(30);
        let yawed = Pose::from_yaw(20f64.to_radians(), Vector3::new(4.0, -1.0, 0.5));
        let est = map(&gt, |p| yawed.compose(p), 0.0);
        let aligned = align_for_eval(&est, &gt, EvalAlignment::Yaw4dof, 0.02).unwrap();
        let pairs = associate_stamps(&gt, &aligned, 0.02).unwrap();
        assert!(ate_position(&pairs).unwrap() < 1e-9);

        let full = Pose::new(Rotation::exp(&Vector3::new(0.3, -0.5, 1.2)), Vector3::new(1.0, 2.0, 3.0));
        let est = map(&gt, |p| full.compose(p), 0.0);
        let aligned = align_for_eval(&est, &gt, EvalAlignment::Se3, 0.02).unwrap();
        let pairs = associate_stamps(&gt, &aligned, 0.02).unwrap();
        assert!(ate_position(&pairs).unwrap() < 1e-9);
        assert!(ate_rotation(&pairs).unwrap() < 1e-7);

        let same = align_for_eval(&gt, &gt, EvalAlignment::None, 0.02).unwrap();
        assert_eq!(same.poses, gt.poses);
    }

    #[test]
    fn invariances_and_scaling() {
        let gt = gt_record(30);
        let est = map(&gt, |p| Pose::new(p.rotation * Rotation::about_z(0.05), p.translation + Vector3::new(0.3, -0.2, 0.1)), 0.0);
        let base = associate_stamps(&gt, &est, 0.02).unwrap();
        let common = Pose::new(Rotation::exp(&Vector3::new(0.2, 0.1, -0.4)), Vector3::new(10.0, 5.0, -2.0));
        let moved: Vec<PosePair> =
            base.iter().map(|p| PosePair { t: p.t, gt: common.compose(&p.gt), est: common.compose(&p.est) }).collect();
        assert!((ate_position(&base).unwrap() - ate_position(&moved).unwrap()).abs() < 1e-12);
        assert!((ate_rotation(&base).unwrap() - ate_rotation(&moved).unwrap()).abs() < 1e-9);
        let doubled: Vec<PosePair> = base
            .iter()
            .map(|p| PosePair { est: Pose::new(p.est.rotation, p.gt.translation + (p.est.translation - p.gt.translation) * 2.0), ..*p })
            .collect();
        assert!((ate_position(&doubled).unwrap() - 2.0 * ate_position(&base).unwrap()).abs() < 1e-12);
    }
}
