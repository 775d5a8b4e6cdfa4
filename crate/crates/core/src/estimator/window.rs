//! Fixed-lag window of keyframes solved with Levenberg-Marquardt. Landmarks
//! are eliminated through their 3x3 blocks before each step, and the oldest
//! keyframe is folded into a Gaussian prior when the window overflows.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, SMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::factors::{
    bias_residual, huber, imu_information, imu_residual, map_residual, visual_residual, GpsFactor, KeyframeState,
    MapFactor, WindowPrior, STATE_DIM,
};
use super::preint::{ImuNoise, PreintegratedImu};
use super::EstimatorError;
use crate::geometry::Pose;
use crate::simkit::{CameraIntrinsics, Observation, GRAVITY};

type Matrix15x3 = SMatrix<f64, STATE_DIM, 3>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub window_size: usize,
    pub pixel_sigma: f64,
    pub huber_delta: f64,
    pub max_iterations: usize,
    pub relative_tolerance: f64,
    pub max_rejections: usize,
    pub initial_lambda: f64,
    pub imu: ImuNoise,
    pub min_parallax_deg: f64,
    pub max_init_reprojection: f64,
    pub min_depth: f64,
    pub max_depth: f64,
    /// Floor added to GPS position sigma, in metres.
    pub gps_min_sigma: f64,
    /// Bias drift beyond which a preintegration is recomputed.
    pub relinearize_gyro_bias: f64,
    pub relinearize_accel_bias: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            window_size: 5,
            pixel_sigma: 1.0,
            huber_delta: 2.0,
            max_iterations: 10,
            relative_tolerance: 1e-6,
            max_rejections: 5,
            initial_lambda: 1e-4,
            imu: ImuNoise::default(),
            min_parallax_deg: 1.0,
            max_init_reprojection: 4.0,
            min_depth: 0.5,
            max_depth: 200.0,
            gps_min_sigma: 0.1,
            relinearize_gyro_bias: 1e-3,
            relinearize_accel_bias: 1e-2,
        }
    }
}

/// Cost split by factor family.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub visual: f64,
    pub imu: f64,
    pub bias: f64,
    pub map: f64,
    pub gps: f64,
    pub prior: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.visual + self.imu + self.bias + self.map + self.gps + self.prior
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub converged: bool,
    /// Stopped after too many consecutive rejected steps.
    pub stalled: bool,
}

#[derive(Clone, Debug)]
struct KeyframeEntry {
    id: u64,
    state: KeyframeState,
    map: Option<MapFactor>,
    gps: Vec<GpsFactor>,
}

#[derive(Clone, Debug)]
struct LandmarkEntry {
    position: Option<Vector3<f64>>,
    /// `(keyframe id, pixel)`.
    observations: Vec<(u64, Vector2<f64>)>,
}

struct LandmarkBlock {
    id: u32,
    hll: Matrix3<f64>,
    gl: Vector3<f64>,
    hkl: Vec<(usize, Matrix15x3)>,
}

struct System {
    hkk: DMatrix<f64>,
    gk: DVector<f64>,
    landmarks: Vec<LandmarkBlock>,
}

/// Accumulates `J^T W J` and `J^T W r` for a factor touching keyframe slots.
fn accumulate(h: &mut DMatrix<f64>, g: &mut DVector<f64>, blocks: &[(usize, DMatrix<f64>)], r: &DVector<f64>, w: &DMatrix<f64>) {
    for (a, ja) in blocks {
        let jaw = ja.transpose() * w;
        let mut ga = g.rows_mut(a * STATE_DIM, STATE_DIM);
        ga += &jaw * r;
        for (b, jb) in blocks {
            let mut hab = h.view_mut((a * STATE_DIM, b * STATE_DIM), (STATE_DIM, STATE_DIM));
            hab += &jaw * jb;
        }
    }
}

fn dyn_of<const R: usize, const C: usize>(m: &SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, C, m.as_slice())
}

/// Inverse of a symmetric positive semi-definite matrix on its range.
fn pseudo_inverse(h: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = ((h + h.transpose()) * 0.5).symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let inv = eig.eigenvalues.map(|l| if l > max * 1e-14 && l > 0.0 { 1.0 / l } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

/// Adds `J^T J` and `J^T r` of a prior over the leading keyframe slots.
fn add_prior(p: &WindowPrior, states: &[KeyframeState], h: &mut DMatrix<f64>, g: &mut DVector<f64>) {
    let (r, j) = p.evaluate(states);
    let m = j.ncols();
    let mut hv = h.view_mut((0, 0), (m, m));
    hv += j.transpose() * &j;
    let mut gv = g.rows_mut(0, m);
    gv += j.transpose() * r;
}

/// Eliminates a landmark from the keyframe system, using the pseudo-inverse
/// when it is not fully constrained.
fn eliminate_landmark(b: &LandmarkBlock, h: &mut DMatrix<f64>, g: &mut DVector<f64>) {
    let eig = b.hll.symmetric_eigen();
    let max = eig.eigenvalues.max().max(0.0);
    let inv_l = eig.eigenvalues.map(|l| if l > max * 1e-12 && l > 0.0 { 1.0 / l } else { 0.0 });
    let inv = eig.eigenvectors * Matrix3::from_diagonal(&inv_l) * eig.eigenvectors.transpose();
    for (sa, ha) in &b.hkl {
        let hai = ha * inv;
        let mut r = g.rows_mut(sa * STATE_DIM, STATE_DIM);
        r -= &hai * b.gl;
        for (sb, hb) in &b.hkl {
            let mut blk = h.view_mut((sa * STATE_DIM, sb * STATE_DIM), (STATE_DIM, STATE_DIM));
            blk -= &hai * hb.transpose();
        }
    }
}

pub struct SlidingWindow {
    cfg: EstimatorConfig,
    intrinsics: CameraIntrinsics,
    body_to_camera: Pose,
    gravity: Vector3<f64>,
    keyframes: VecDeque<KeyframeEntry>,
    /// Link `k` joins keyframes `k` and `k + 1`.
    links: VecDeque<PreintegratedImu>,
    landmarks: BTreeMap<u32, LandmarkEntry>,
    prior: Option<WindowPrior>,
    next_id: u64,
}

impl SlidingWindow {
    /// Starts a window anchored by a diagonal prior on the first keyframe.
    pub fn new(
        cfg: EstimatorConfig,
        intrinsics: CameraIntrinsics,
        body_to_camera: Pose,
        initial: KeyframeState,
        prior_sigmas: &[f64; STATE_DIM],
        observations: &[Observation],
    ) -> Self {
        let mut w = Self {
            cfg,
            intrinsics,
            body_to_camera,
            gravity: Vector3::new(0.0, 0.0, -GRAVITY),
            keyframes: VecDeque::new(),
            links: VecDeque::new(),
            landmarks: BTreeMap::new(),
            prior: Some(WindowPrior::diagonal(initial, prior_sigmas)),
            next_id: 0,
        };
        w.insert(initial, observations);
        w
    }

    fn insert(&mut self, state: KeyframeState, observations: &[Observation]) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.keyframes.push_back(KeyframeEntry { id, state, map: None, gps: Vec::new() });
        for o in observations {
            self.landmarks
                .entry(o.landmark_id)
                .or_insert_with(|| LandmarkEntry { position: None, observations: Vec::new() })
                .observations
                .push((id, o.pixel));
        }
        id
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn latest(&self) -> (u64, &KeyframeState) {
        let k = self.keyframes.back().expect("window is never empty");
        (k.id, &k.state)
    }

    pub fn keyframes(&self) -> impl Iterator<Item = (u64, &KeyframeState)> {
        self.keyframes.iter().map(|k| (k.id, &k.state))
    }

    fn slot(&self, id: u64) -> Option<usize> {
        let first = self.keyframes.front()?.id;
        let s = id.checked_sub(first)? as usize;
        (s < self.keyframes.len()).then_some(s)
    }

    pub fn contains(&self, id: u64) -> bool {
        self.slot(id).is_some()
    }

    pub fn state(&self, id: u64) -> Option<&KeyframeState> {
        self.slot(id).map(|s| &self.keyframes[s].state)
    }

    pub fn prior(&self) -> Option<&WindowPrior> {
        self.prior.as_ref()
    }

    /// Propagates the newest keyframe through a preintegrated interval.
    pub fn predict(&self, pre: &PreintegratedImu) -> KeyframeState {
        let (_, s) = self.latest();
        let (dr, dv, dp) = pre.corrected(&s.bias_gyro, &s.bias_accel);
        let dt = pre.dt;
        let r = s.pose.rotation;
        KeyframeState {
            t: pre.t1,
            pose: Pose::new(
                r * dr,
                s.pose.translation + s.velocity * dt + self.gravity * (0.5 * dt * dt) + r.rotate(&dp),
            ),
            velocity: s.velocity + self.gravity * dt + r.rotate(&dv),
            bias_gyro: s.bias_gyro,
            bias_accel: s.bias_accel,
        }
    }

    /// Appends a keyframe linked to the newest one by `pre`.
    pub fn push_keyframe(
        &mut self,
        state: KeyframeState,
        pre: PreintegratedImu,
        observations: &[Observation],
    ) -> Result<u64, EstimatorError> {
        let (_, last) = self.latest();
        if (pre.t0 - last.t).abs() > 1e-6 || (pre.t1 - state.t).abs() > 1e-6 {
            return Err(EstimatorError::InvalidInput(format!(
                "preintegration [{}, {}] does not join keyframes at {} and {}",
                pre.t0, pre.t1, last.t, state.t
            )));
        }
        self.links.push_back(pre);
        Ok(self.insert(state, observations))
    }

    pub fn add_gps_factor(&mut self, id: u64, factor: GpsFactor) -> Result<(), EstimatorError> {
        let s = self.slot(id).ok_or(EstimatorError::UnknownKeyframe(id))?;
        self.keyframes[s].gps.push(factor);
        Ok(())
    }

    /// Attaches a map factor; returns `false` if the keyframe already left.
    pub fn set_map_factor(&mut self, id: u64, factor: MapFactor) -> bool {
        match self.slot(id) {
            Some(s) => {
                self.keyframes[s].map = Some(factor);
                true
            }
            None => false,
        }
    }

    /// Landmarks currently constrained by at least two keyframes and
    /// holding a position estimate.
    fn is_active(&self, lm: &LandmarkEntry) -> bool {
        lm.position.is_some() && lm.observations.len() >= 2
    }

    pub fn active_landmark_ids(&self) -> Vec<u32> {
        self.landmarks.iter().filter(|(_, l)| self.is_active(l)).map(|(&id, _)| id).collect()
    }

    /// Positions of the active landmarks in the local frame.
    pub fn landmark_cloud(&self) -> Vec<Vector3<f64>> {
        self.landmarks.values().filter(|l| self.is_active(l)).filter_map(|l| l.position).collect()
    }

    pub fn landmark_position(&self, id: u32) -> Option<Vector3<f64>> {
        self.landmarks.get(&id).and_then(|l| l.position)
    }

    fn camera_pose(&self, state: &KeyframeState) -> Pose {
        state.pose.compose(&self.body_to_camera)
    }

    /// Linear triangulation over all observing keyframes, accepted only with
    /// positive depth, small reprojection error and enough parallax.
    fn triangulate(&self, lm: &LandmarkEntry) -> Option<Vector3<f64>> {
        let cams: Vec<(Pose, Vector2<f64>)> = lm
            .observations
            .iter()
            .filter_map(|(id, px)| self.state(*id).map(|s| (self.camera_pose(s), *px)))
            .collect();
        if cams.len() < 2 {
            return None;
        }
        let k = &self.intrinsics;
        let mut a = DMatrix::zeros(2 * cams.len(), 4);
        for (i, (t_lc, px)) in cams.iter().enumerate() {
            let t_cl = t_lc.inverse();
            let r = t_cl.rotation.matrix();
            let mut p = Matrix4::zeros();
            p.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
            p.fixed_view_mut::<3, 1>(0, 3).copy_from(&t_cl.translation);
            let x = (px.x - k.cx) / k.fx;
            let y = (px.y - k.cy) / k.fy;
            a.row_mut(2 * i).copy_from(&(p.row(2) * x - p.row(0)));
            a.row_mut(2 * i + 1).copy_from(&(p.row(2) * y - p.row(1)));
        }
        let svd = a.svd(false, true);
        let vt = svd.v_t?;
        let (min_idx, _) = svd.singular_values.argmin();
        let h = vt.row(min_idx);
        if h[3].abs() < 1e-12 {
            return None;
        }
        let point = Vector3::new(h[0], h[1], h[2]) / h[3];
        for (t_lc, px) in &cams {
            let pc = t_lc.inverse().transform_point(&point);
            if pc.z < self.cfg.min_depth || pc.z > self.cfg.max_depth {
                return None;
            }
            let proj = k.project(&pc)?;
            if (proj - px).norm() > self.cfg.max_init_reprojection {
                return None;
            }
        }
        let ray = |t: &Pose| (point - t.translation).normalize();
        let first = ray(&cams[0].0);
        let parallax = cams[1..].iter().map(|(t, _)| first.dot(&ray(t)).clamp(-1.0, 1.0).acos()).fold(0.0, f64::max);
        (parallax.to_degrees() >= self.cfg.min_parallax_deg).then_some(point)
    }

    fn triangulate_pending(&mut self) {
        let pending: Vec<(u32, Vector3<f64>)> = self
            .landmarks
            .iter()
            .filter(|(_, l)| l.position.is_none() && l.observations.len() >= 2)
            .filter_map(|(&id, l)| self.triangulate(l).map(|p| (id, p)))
            .collect();
        for (id, p) in pending {
            if let Some(l) = self.landmarks.get_mut(&id) {
                l.position = Some(p);
            }
        }
    }

    fn relinearize_imu(&mut self) {
        for k in 0..self.links.len() {
            let s = &self.keyframes[k].state;
            let pre = &self.links[k];
            if (s.bias_gyro - pre.bias_gyro).norm() > self.cfg.relinearize_gyro_bias
                || (s.bias_accel - pre.bias_accel).norm() > self.cfg.relinearize_accel_bias
            {
                let (bg, ba) = (s.bias_gyro, s.bias_accel);
                self.links[k] = pre.reintegrate(&bg, &ba);
            }
        }
    }

    fn bias_information(&self, pre: &PreintegratedImu) -> DMatrix<f64> {
        let (gi, ai) = pre.bias_walk_information();
        DMatrix::from_diagonal(&DVector::from_vec(vec![gi, gi, gi, ai, ai, ai]))
    }

    /// Cost of the non-visual factors plus, optionally, the visual ones.
    fn cost(&self, states: &[KeyframeState], positions: &BTreeMap<u32, Vector3<f64>>) -> CostBreakdown {
        let mut c = CostBreakdown::default();
        let sigma = self.cfg.pixel_sigma;
        for (id, p) in positions {
            for (kf, px) in &self.landmarks[id].observations {
                let Some(s) = self.slot(*kf) else { continue };
                if let Some(v) = visual_residual(&states[s], p, px, &self.intrinsics, &self.body_to_camera) {
                    c.visual += huber(v.residual.norm() / sigma, self.cfg.huber_delta).1;
                }
            }
        }
        for (k, pre) in self.links.iter().enumerate() {
            let e = imu_residual(&states[k], &states[k + 1], pre, &self.gravity);
            c.imu += 0.5 * (e.residual.transpose() * imu_information(pre) * e.residual)[0];
            let b = DVector::from_column_slice(bias_residual(&states[k], &states[k + 1]).as_slice());
            c.bias += 0.5 * (b.transpose() * self.bias_information(pre) * &b)[0];
        }
        for (s, kf) in self.keyframes.iter().enumerate() {
            if let Some(m) = &kf.map {
                let r = map_residual(&states[s], m).stacked();
                c.map += 0.5 * (r.transpose() * m.weight * r)[0];
            }
            for g in &kf.gps {
                let r = g.residual(&states[s]);
                c.gps += 0.5 * (r.transpose() * g.information * r)[0];
            }
        }
        if let Some(p) = &self.prior {
            let (r, _) = p.evaluate(states);
            c.prior += 0.5 * r.norm_squared();
        }
        c
    }

    /// Visual terms of one landmark, skipping observations from `skip`.
    /// Pose-pose terms go straight into `hkk` and `gk`.
    fn landmark_terms(
        &self,
        states: &[KeyframeState],
        id: u32,
        p: &Vector3<f64>,
        skip: Option<u64>,
        hkk: &mut DMatrix<f64>,
        gk: &mut DVector<f64>,
    ) -> LandmarkBlock {
        let sigma2 = self.cfg.pixel_sigma * self.cfg.pixel_sigma;
        let mut block = LandmarkBlock { id, hll: Matrix3::zeros(), gl: Vector3::zeros(), hkl: Vec::new() };
        for (kf, px) in &self.landmarks[&id].observations {
            if skip == Some(*kf) {
                continue;
            }
            let Some(s) = self.slot(*kf) else { continue };
            let Some(v) = visual_residual(&states[s], p, px, &self.intrinsics, &self.body_to_camera) else {
                continue;
            };
            let (w, _) = huber(v.residual.norm() / self.cfg.pixel_sigma, self.cfg.huber_delta);
            let w = w / sigma2;
            let jp = v.d_pose;
            let jl = v.d_landmark;
            let o = s * STATE_DIM;
            let mut hpp = hkk.view_mut((o, o), (6, 6));
            hpp += jp.transpose() * jp * w;
            let mut gp = gk.rows_mut(o, 6);
            gp += jp.transpose() * v.residual * w;
            block.hll += jl.transpose() * jl * w;
            block.gl += jl.transpose() * v.residual * w;
            let mut hkl = Matrix15x3::zeros();
            hkl.fixed_view_mut::<6, 3>(0, 0).copy_from(&(jp.transpose() * jl * w));
            block.hkl.push((s, hkl));
        }
        block
    }

    fn build_system(&self, states: &[KeyframeState], positions: &BTreeMap<u32, Vector3<f64>>) -> System {
        let n = states.len() * STATE_DIM;
        let mut hkk = DMatrix::zeros(n, n);
        let mut gk = DVector::zeros(n);
        let landmarks = positions.iter().map(|(&id, p)| self.landmark_terms(states, id, p, None, &mut hkk, &mut gk)).collect();
        self.add_keyframe_factors(states, &mut hkk, &mut gk);
        System { hkk, gk, landmarks }
    }

    fn add_keyframe_factors(&self, states: &[KeyframeState], hkk: &mut DMatrix<f64>, gk: &mut DVector<f64>) {
        for (k, pre) in self.links.iter().enumerate() {
            let e = imu_residual(&states[k], &states[k + 1], pre, &self.gravity);
            let info = dyn_of(&imu_information(pre));
            let r = DVector::from_column_slice(e.residual.as_slice());
            accumulate(hkk, gk, &[(k, dyn_of(&e.d_i)), (k + 1, dyn_of(&e.d_j))], &r, &info);
            let b = DVector::from_column_slice(bias_residual(&states[k], &states[k + 1]).as_slice());
            let mut ji = DMatrix::zeros(6, STATE_DIM);
            let mut jj = DMatrix::zeros(6, STATE_DIM);
            for d in 0..6 {
                ji[(d, 9 + d)] = -1.0;
                jj[(d, 9 + d)] = 1.0;
            }
            accumulate(hkk, gk, &[(k, ji), (k + 1, jj)], &b, &self.bias_information(pre));
        }
        for (s, kf) in self.keyframes.iter().enumerate() {
            if let Some(m) = &kf.map {
                let e = map_residual(&states[s], m);
                let mut j = DMatrix::zeros(6, STATE_DIM);
                j.view_mut((0, 0), (6, 6)).copy_from(&e.d_pose);
                let r = DVector::from_column_slice(e.stacked().as_slice());
                accumulate(hkk, gk, &[(s, j)], &r, &dyn_of(&m.weight));
            }
            for g in &kf.gps {
                let mut j = DMatrix::zeros(3, STATE_DIM);
                j.view_mut((0, 3), (3, 3)).fill_with_identity();
                let r = DVector::from_column_slice(g.residual(&states[s]).as_slice());
                accumulate(hkk, gk, &[(s, j)], &r, &dyn_of(&g.information));
            }
        }
        if let Some(p) = &self.prior {
            add_prior(p, states, hkk, gk);
        }
    }

    /// Gauss-Newton information and gradient over the keyframe states from
    /// all factors except the landmark coupling terms.
    pub fn normal_equations(&self) -> (DMatrix<f64>, DVector<f64>) {
        let states: Vec<KeyframeState> = self.keyframes.iter().map(|k| k.state).collect();
        let n = states.len() * STATE_DIM;
        let mut h = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        self.add_keyframe_factors(&states, &mut h, &mut g);
        (h, g)
    }

    /// Dense information and gradient over the keyframe states followed by
    /// the active landmarks, with the size of the keyframe block.
    pub fn full_normal_equations(&self) -> (DMatrix<f64>, DVector<f64>, usize) {
        let states: Vec<KeyframeState> = self.keyframes.iter().map(|k| k.state).collect();
        let sys = self.build_system(&states, &self.active_positions());
        let nk = states.len() * STATE_DIM;
        let n = nk + 3 * sys.landmarks.len();
        let mut h = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        h.view_mut((0, 0), (nk, nk)).copy_from(&sys.hkk);
        g.rows_mut(0, nk).copy_from(&sys.gk);
        for (i, b) in sys.landmarks.iter().enumerate() {
            let o = nk + 3 * i;
            h.view_mut((o, o), (3, 3)).copy_from(&b.hll);
            g.rows_mut(o, 3).copy_from(&b.gl);
            for (s, hkl) in &b.hkl {
                let mut blk = h.view_mut((s * STATE_DIM, o), (STATE_DIM, 3));
                blk += hkl;
                let mut blk_t = h.view_mut((o, s * STATE_DIM), (3, STATE_DIM));
                blk_t += hkl.transpose();
            }
        }
        (h, g, nk)
    }

    pub fn cost_breakdown(&self) -> CostBreakdown {
        let states: Vec<KeyframeState> = self.keyframes.iter().map(|k| k.state).collect();
        self.cost(&states, &self.active_positions())
    }

    fn active_positions(&self) -> BTreeMap<u32, Vector3<f64>> {
        self.landmarks
            .iter()
            .filter(|(_, l)| self.is_active(l))
            .map(|(&id, l)| (id, l.position.expect("active landmarks have positions")))
            .collect()
    }

    /// Damped step with landmarks eliminated. `None` if the reduced system
    /// cannot be solved.
    fn solve_step(&self, sys: &System, lambda: f64) -> Option<(DVector<f64>, Vec<Vector3<f64>>)> {
        let damp = |v: f64| v + lambda * v.max(1e-6);
        let mut s = sys.hkk.clone();
        for i in 0..s.nrows() {
            s[(i, i)] = damp(sys.hkk[(i, i)]);
        }
        let mut rhs = -&sys.gk;
        let mut hll_inv = Vec::with_capacity(sys.landmarks.len());
        for b in &sys.landmarks {
            let mut hll = b.hll;
            for i in 0..3 {
                hll[(i, i)] = damp(hll[(i, i)]);
            }
            let inv = hll.try_inverse()?;
            for (sa, ha) in &b.hkl {
                let hai = ha * inv;
                let mut r = rhs.rows_mut(sa * STATE_DIM, STATE_DIM);
                r += &hai * b.gl;
                for (sb, hb) in &b.hkl {
                    let mut blk = s.view_mut((sa * STATE_DIM, sb * STATE_DIM), (STATE_DIM, STATE_DIM));
                    blk -= &hai * hb.transpose();
                }
            }
            hll_inv.push(inv);
        }
        let s = (&s + s.transpose()) * 0.5;
        let dk = match s.clone().cholesky() {
            Some(c) => c.solve(&rhs),
            None => s.lu().solve(&rhs)?,
        };
        if dk.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let dl = sys
            .landmarks
            .iter()
            .zip(&hll_inv)
            .map(|(b, inv)| {
                let mut acc = -b.gl;
                for (sa, ha) in &b.hkl {
                    acc -= ha.transpose() * dk.rows(sa * STATE_DIM, STATE_DIM);
                }
                inv * acc
            })
            .collect();
        Some((dk, dl))
    }

    /// Runs Levenberg-Marquardt over keyframes and active landmarks.
    pub fn optimize(&mut self) -> Result<SolveReport, EstimatorError> {
        self.triangulate_pending();
        self.relinearize_imu();
        let mut states: Vec<KeyframeState> = self.keyframes.iter().map(|k| k.state).collect();
        let mut positions = self.active_positions();
        let mut cost = self.cost(&states, &positions).total();
        if !cost.is_finite() {
            return Err(EstimatorError::Diverged(format!("non-finite initial cost {cost}")));
        }
        let initial_cost = cost;
        let mut lambda = self.cfg.initial_lambda;
        let mut report = SolveReport { iterations: 0, initial_cost, final_cost: cost, converged: false, stalled: false };
        'outer: for iter in 0..self.cfg.max_iterations {
            report.iterations = iter + 1;
            let sys = self.build_system(&states, &positions);
            let mut rejections = 0;
            loop {
                let step = self.solve_step(&sys, lambda);
                let accepted = step.and_then(|(dk, dl)| {
                    let cand_states: Vec<KeyframeState> = states
                        .iter()
                        .enumerate()
                        .map(|(s, st)| st.retract(dk.rows(s * STATE_DIM, STATE_DIM).as_slice()))
                        .collect();
                    let cand_pos: BTreeMap<u32, Vector3<f64>> =
                        sys.landmarks.iter().zip(&dl).map(|(b, d)| (b.id, positions[&b.id] + d)).collect();
                    let c = self.cost(&cand_states, &cand_pos).total();
                    (c.is_finite() && c <= cost).then_some((cand_states, cand_pos, c, dk.norm()))
                });
                match accepted {
                    Some((cs, cp, c, step_norm)) => {
                        let rel = (cost - c) / cost.max(1e-300);
                        states = cs;
                        positions = cp;
                        cost = c;
                        lambda = (lambda * 0.1).max(1e-12);
                        if rel < self.cfg.relative_tolerance || step_norm < 1e-12 {
                            report.converged = true;
                            break 'outer;
                        }
                        break;
                    }
                    None => {
                        rejections += 1;
                        lambda *= 10.0;
                        if rejections >= self.cfg.max_rejections {
                            report.stalled = true;
                            break 'outer;
                        }
                    }
                }
            }
        }
        report.final_cost = cost;
        for (k, s) in self.keyframes.iter_mut().zip(states) {
            k.state = s;
        }
        for (id, p) in positions {
            if let Some(l) = self.landmarks.get_mut(&id) {
                l.position = Some(p);
            }
        }
        self.reject_landmarks_behind();
        Ok(report)
    }

    /// Clears landmark estimates that ended up behind an observing camera.
    fn reject_landmarks_behind(&mut self) {
        let bad: Vec<u32> = self
            .landmarks
            .iter()
            .filter_map(|(&id, l)| {
                let p = l.position?;
                let behind = l.observations.iter().any(|(kf, _)| {
                    self.state(*kf).is_some_and(|s| self.camera_pose(s).inverse().transform_point(&p).z < self.cfg.min_depth)
                });
                behind.then_some(id)
            })
            .collect();
        for id in bad {
            if let Some(l) = self.landmarks.get_mut(&id) {
                l.position = None;
            }
        }
    }

    pub fn needs_marginalization(&self) -> bool {
        self.keyframes.len() > self.cfg.window_size
    }

    /// Folds the oldest keyframe into a prior on the remaining ones. The
    /// landmarks it observes are eliminated twice, with and without its
    /// observations, and the difference is kept: the prior then carries
    /// exactly the information the departing observations added, while the
    /// landmarks stay in the window with their other observations.
    pub fn marginalize_oldest(&mut self) -> Option<(u64, KeyframeState)> {
        if self.keyframes.len() < 2 {
            return None;
        }
        let states: Vec<KeyframeState> = self.keyframes.iter().map(|k| k.state).collect();
        let n = states.len() * STATE_DIM;
        let mut h = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        let (s0, s1) = (&states[0], &states[1]);
        let pre = &self.links[0];
        let e = imu_residual(s0, s1, pre, &self.gravity);
        let r = DVector::from_column_slice(e.residual.as_slice());
        accumulate(&mut h, &mut g, &[(0, dyn_of(&e.d_i)), (1, dyn_of(&e.d_j))], &r, &dyn_of(&imu_information(pre)));
        let b = DVector::from_column_slice(bias_residual(s0, s1).as_slice());
        let mut ji = DMatrix::zeros(6, STATE_DIM);
        let mut jj = DMatrix::zeros(6, STATE_DIM);
        for d in 0..6 {
            ji[(d, 9 + d)] = -1.0;
            jj[(d, 9 + d)] = 1.0;
        }
        accumulate(&mut h, &mut g, &[(0, ji), (1, jj)], &b, &self.bias_information(pre));
        let kf0 = &self.keyframes[0];
        if let Some(m) = &kf0.map {
            let e = map_residual(s0, m);
            let mut j = DMatrix::zeros(6, STATE_DIM);
            j.view_mut((0, 0), (6, 6)).copy_from(&e.d_pose);
            let r = DVector::from_column_slice(e.stacked().as_slice());
            accumulate(&mut h, &mut g, &[(0, j)], &r, &dyn_of(&m.weight));
        }
        for gf in &kf0.gps {
            let mut j = DMatrix::zeros(3, STATE_DIM);
            j.view_mut((0, 3), (3, 3)).fill_with_identity();
            let r = DVector::from_column_slice(gf.residual(s0).as_slice());
            accumulate(&mut h, &mut g, &[(0, j)], &r, &dyn_of(&gf.information));
        }
        if let Some(p) = &self.prior {
            add_prior(p, &states, &mut h, &mut g);
        }
        let removed_id = kf0.id;
        for (id, p) in self.active_positions() {
            if !self.landmarks[&id].observations.iter().any(|(kf, _)| *kf == removed_id) {
                continue;
            }
            let mut h_without = DMatrix::zeros(n, n);
            let mut g_without = DVector::zeros(n);
            let with = self.landmark_terms(&states, id, &p, None, &mut h, &mut g);
            eliminate_landmark(&with, &mut h, &mut g);
            let without = self.landmark_terms(&states, id, &p, Some(removed_id), &mut h_without, &mut g_without);
            eliminate_landmark(&without, &mut h_without, &mut g_without);
            h -= h_without;
            g -= g_without;
        }

        let m = STATE_DIM;
        let r = n - m;
        let hmm_inv = pseudo_inverse(&h.view((0, 0), (m, m)).into_owned());
        let hrm = h.view((m, 0), (r, m)).into_owned();
        let h_star = h.view((m, m), (r, r)) - &hrm * &hmm_inv * hrm.transpose();
        let g_star = g.rows(m, r) - &hrm * &hmm_inv * g.rows(0, m);
        self.prior = Some(WindowPrior::from_information(states[1..].to_vec(), &h_star, &g_star));

        let removed = self.keyframes.pop_front().expect("checked length");
        self.links.pop_front();
        self.landmarks.retain(|_, l| {
            l.observations.retain(|(kf, _)| *kf != removed.id);
            !l.observations.is_empty()
        });
        Some((removed.id, removed.state))
    }
}

/// Helper for building keyframe states in tests and drivers.
pub fn keyframe_state(t: f64, pose: Pose, velocity: Vector3<f64>) -> KeyframeState {
    KeyframeState { t, pose, velocity, bias_gyro: Vector3::zeros(), bias_accel: Vector3::zeros() }
}
