use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::geometry::{Pose, Rotation};

/// Natural cubic spline through `(t_i, y_i)`.
#[derive(Clone, Debug, PartialEq)]
struct CubicSpline {
    t: Vec<f64>,
    y: Vec<f64>,
    /// Second derivatives at the knots.
    m: Vec<f64>,
}

impl CubicSpline {
    fn new(t: &[f64], y: &[f64]) -> Self {
        let n = t.len();
        let mut m = vec![0.0; n];
        if n > 2 {
            // Thomas algorithm on the interior equations.
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut upper = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for i in 1..n - 1 {
                let h0 = t[i] - t[i - 1];
                let h1 = t[i + 1] - t[i];
                diag[i - 1] = 2.0 * (h0 + h1);
                upper[i - 1] = h1;
                rhs[i - 1] = 6.0 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
            }
            for i in 1..k {
                let lower = t[i + 1] - t[i];
                let w = lower / diag[i - 1];
                diag[i] -= w * upper[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                m[i + 1] = (rhs[i] - upper[i] * m[i + 2]) / diag[i];
            }
        }
        Self { t: t.to_vec(), y: y.to_vec(), m }
    }

    fn segment(&self, t: f64) -> usize {
        let n = self.t.len();
        self.t.partition_point(|&k| k <= t).clamp(1, n - 1) - 1
    }

    /// Value and first two derivatives.
    fn eval(&self, t: f64) -> (f64, f64, f64) {
        let i = self.segment(t);
        let h = self.t[i + 1] - self.t[i];
        let a = (self.t[i + 1] - t) / h;
        let b = (t - self.t[i]) / h;
        let (m0, m1) = (self.m[i], self.m[i + 1]);
        let (y0, y1) = (self.y[i], self.y[i + 1]);
        let value = a * y0 + b * y1 + ((a * a * a - a) * m0 + (b * b * b - b) * m1) * h * h / 6.0;
        let d1 = (y1 - y0) / h - (3.0 * a * a - 1.0) * h / 6.0 * m0 + (3.0 * b * b - 1.0) * h / 6.0 * m1;
        let d2 = a * m0 + b * m1;
        (value, d1, d2)
    }
}

/// How the body yaw is chosen along the path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum YawPolicy {
    /// Heading of the horizontal velocity plus a fixed offset (radians).
    FollowVelocity { offset: f64 },
    Constant(f64),
    /// One yaw (radians) per waypoint, unwrapped before interpolation.
    PerWaypoint(Vec<f64>),
}

/// Smooth ground-truth trajectory of the body frame in the world frame.
/// Attitude is yaw-only.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    axes: [CubicSpline; 3],
    yaw: CubicSpline,
    duration: f64,
}

impl Trajectory {
    /// Interpolates explicit `(time, position, yaw)` knots.
    pub fn from_timed(times: &[f64], positions: &[Vector3<f64>], yaws: &[f64]) -> Result<Self, SimError> {
        let n = times.len();
        if n < 2 || positions.len() != n || yaws.len() != n {
            return Err(SimError::InvalidConfig("need at least two matching knots".into()));
        }
        if times[0] != 0.0 || times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(SimError::InvalidConfig("knot times must start at 0 and increase".into()));
        }
        let axis = |k: usize| CubicSpline::new(times, &positions.iter().map(|p| p[k]).collect::<Vec<_>>());
        let yaw = CubicSpline::new(times, &unwrap(yaws));
        Ok(Self { axes: [axis(0), axis(1), axis(2)], yaw, duration: times[n - 1] })
    }

    /// Spline through waypoints traversed at roughly constant `speed`, with
    /// knot times proportional to chord length.
    pub fn from_waypoints(waypoints: &[Vector3<f64>], speed: f64, yaw: &YawPolicy) -> Result<Self, SimError> {
        if waypoints.len() < 2 || !(speed > 0.0) {
            return Err(SimError::InvalidConfig("need two waypoints and a positive speed".into()));
        }
        let mut times = vec![0.0];
        for w in waypoints.windows(2) {
            let d = (w[1] - w[0]).norm();
            if d <= 1e-9 {
                return Err(SimError::InvalidConfig("consecutive waypoints coincide".into()));
            }
            times.push(times.last().unwrap() + d / speed);
        }
        let yaws = match yaw {
            YawPolicy::Constant(y) => vec![*y; waypoints.len()],
            YawPolicy::PerWaypoint(v) => {
                if v.len() != waypoints.len() {
                    return Err(SimError::InvalidConfig("one yaw per waypoint required".into()));
                }
                v.clone()
            }
            YawPolicy::FollowVelocity { offset } => {
                let path = Self::from_timed(&times, waypoints, &vec![0.0; waypoints.len()])?;
                times
                    .iter()
                    .map(|&t| {
                        let v = path.velocity(t);
                        v.y.atan2(v.x) + offset
                    })
                    .collect()
            }
        };
        Self::from_timed(&times, waypoints, &yaws)
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    fn clamp(&self, t: f64) -> f64 {
        t.clamp(0.0, self.duration)
    }

    pub fn position(&self, t: f64) -> Vector3<f64> {
        let t = self.clamp(t);
        Vector3::from_fn(|k, _| self.axes[k].eval(t).0)
    }

    pub fn velocity(&self, t: f64) -> Vector3<f64> {
        let t = self.clamp(t);
        Vector3::from_fn(|k, _| self.axes[k].eval(t).1)
    }

    pub fn acceleration(&self, t: f64) -> Vector3<f64> {
        let t = self.clamp(t);
        Vector3::from_fn(|k, _| self.axes[k].eval(t).2)
    }

    pub fn yaw(&self, t: f64) -> f64 {
        self.yaw.eval(self.clamp(t)).0
    }

    pub fn yaw_rate(&self, t: f64) -> f64 {
        self.yaw.eval(self.clamp(t)).1
    }

    pub fn rotation(&self, t: f64) -> Rotation {
        Rotation::about_z(self.yaw(t))
    }

    /// Body-frame angular velocity.
    pub fn angular_velocity(&self, t: f64) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, self.yaw_rate(t))
    }

    /// Body pose in the world frame.
    pub fn pose(&self, t: f64) -> Pose {
        Pose::new(self.rotation(t), self.position(t))
    }

    /// Arc length approximated by a polyline sampled every `step` seconds.
    pub fn path_length(&self, step: f64) -> f64 {
        let n = (self.duration / step).ceil().max(1.0) as usize;
        let mut prev = self.position(0.0);
        let mut len = 0.0;
        for i in 1..=n {
            let p = self.position(self.duration * i as f64 / n as f64);
            len += (p - prev).norm();
            prev = p;
        }
        len
    }
}

fn unwrap(angles: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(angles.len());
    for (i, &a) in angles.iter().enumerate() {
        if i == 0 {
            out.push(a);
        } else {
            let prev: f64 = out[i - 1];
            out.push(prev + crate::geometry::wrap_angle(a - prev));
        }
    }
    out
}

/// Rounded-rectangle loops around a center, optionally climbing, cut at a
/// target length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopShape {
    pub center: [f64; 2],
    pub half_size: [f64; 2],
    pub corner_radius: f64,
    pub loops: f64,
    pub start_height: f64,
    pub climb_per_loop: f64,
    /// Truncate the path at this arc length.
    pub length: Option<f64>,
    /// Spacing of the emitted waypoints along the path.
    pub spacing: f64,
    /// Arc length offset of the starting point along the loop.
    pub start_offset: f64,
}

impl Default for LoopShape {
    fn default() -> Self {
        Self {
            center: [0.0, 0.0],
            half_size: [40.0, 30.0],
            corner_radius: 10.0,
            loops: 3.0,
            start_height: 5.0,
            climb_per_loop: 0.0,
            length: None,
            spacing: 5.0,
            start_offset: 0.0,
        }
    }
}

/// Waypoints along the configured loop. Fails when the corners do not fit.
pub fn loop_waypoints(shape: &LoopShape) -> Result<Vec<Vector3<f64>>, SimError> {
    let [a, b] = shape.half_size;
    let r = shape.corner_radius;
    if !(r > 0.0 && a > r && b > r && shape.loops > 0.0 && shape.spacing > 0.0) {
        return Err(SimError::InvalidConfig("loop corners must fit inside the rectangle".into()));
    }
    let sx = 2.0 * (a - r);
    let sy = 2.0 * (b - r);
    let arc = std::f64::consts::FRAC_PI_2 * r;
    let perimeter = 2.0 * (sx + sy) + 4.0 * arc;
    let total = shape.length.unwrap_or(perimeter * shape.loops).min(perimeter * shape.loops);
    if !(total > shape.spacing) {
        return Err(SimError::InvalidConfig("loop length shorter than waypoint spacing".into()));
    }

    // Position on the flat loop at arc length s, starting mid-way along the
    // bottom edge and running counter-clockwise.
    let flat = |s: f64| -> [f64; 2] {
        let mut s = s.rem_euclid(perimeter);
        let legs: [(f64, [f64; 2], [f64; 2]); 4] = [
            (sx, [-(a - r), -b], [1.0, 0.0]),
            (sy, [a, -(b - r)], [0.0, 1.0]),
            (sx, [a - r, b], [-1.0, 0.0]),
            (sy, [-a, b - r], [0.0, -1.0]),
        ];
        let corners = [[a - r, -(b - r)], [a - r, b - r], [-(a - r), b - r], [-(a - r), -(b - r)]];
        // Shift so that s = 0 is the middle of the bottom edge.
        s = (s + sx / 2.0).rem_euclid(perimeter);
        for k in 0..4 {
            let (len, start, dir) = legs[k];
            if s < len {
                return [start[0] + dir[0] * s, start[1] + dir[1] * s];
            }
            s -= len;
            if s < arc {
                let phi0 = -std::f64::consts::FRAC_PI_2 + k as f64 * std::f64::consts::FRAC_PI_2;
                let phi = phi0 + s / r;
                let c = corners[k];
                return [c[0] + r * phi.cos(), c[1] + r * phi.sin()];
            }
            s -= arc;
        }
        [legs[0].1[0], legs[0].1[1]]
    };

    let n = (total / shape.spacing).ceil() as usize;
    let mut out = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let s = total * i as f64 / n as f64;
        let [x, y] = flat(s + shape.start_offset);
        let z = shape.start_height + shape.climb_per_loop * s / perimeter;
        out.push(Vector3::new(shape.center[0] + x, shape.center[1] + y, z));
    }
    Ok(out)
}
