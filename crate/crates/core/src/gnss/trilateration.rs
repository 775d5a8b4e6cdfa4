use nalgebra::{Matrix3, Matrix4, SymmetricEigen, Vector3, Vector4};

use super::GnssError;

const MAX_ITERATIONS: usize = 50;
const STEP_TOLERANCE: f64 = 1e-9;
const MAX_CONDITION: f64 = 1e12;

/// Position fix with the estimated receiver clock offset (meters).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Trilateration {
    pub position: Vector3<f64>,
    pub clock_bias: f64,
    pub covariance: Matrix3<f64>,
    pub iterations: usize,
}

/// Range residuals `|s_i - p| + b - rho_i` at `(p, b)`.
pub fn range_residuals(sats: &[Vector3<f64>], ranges: &[f64], p: &Vector3<f64>, bias: f64) -> Vec<f64> {
    sats.iter().zip(ranges).map(|(s, r)| (s - p).norm() + bias - r).collect()
}

/// Gauss-Newton solve for receiver position and clock bias from
/// pseudoranges. `sigma_range` scales the returned covariance.
pub fn trilaterate(
    sats: &[Vector3<f64>],
    ranges: &[f64],
    initial: &Vector3<f64>,
    sigma_range: f64,
) -> Result<Trilateration, GnssError> {
    if sats.len() != ranges.len() {
        return Err(GnssError::InvalidConfig("one range per satellite required".into()));
    }
    if sats.len() < 4 {
        return Err(GnssError::TooFewSatellites(sats.len()));
    }
    let mut p = *initial;
    let mut b = 0.0;
    for iter in 1..=MAX_ITERATIONS {
        let mut jtj = Matrix4::zeros();
        let mut jtr = Vector4::zeros();
        for (s, r) in sats.iter().zip(ranges) {
            let d = s - p;
            let dist = d.norm();
            let row = Vector4::new(-d.x / dist, -d.y / dist, -d.z / dist, 1.0);
            let res = dist + b - r;
            jtj += row * row.transpose();
            jtr += row * res;
        }
        let eig = SymmetricEigen::new(jtj);
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        if !(min > 0.0) || max / min > MAX_CONDITION {
            return Err(GnssError::GeometrySingular);
        }
        let inv = eig.eigenvectors * Matrix4::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l)) * eig.eigenvectors.transpose();
        let step = -(inv * jtr);
        p += step.fixed_rows::<3>(0);
        b += step[3];
        if step.norm() < STEP_TOLERANCE * (1.0 + p.norm()) {
            let covariance = inv.fixed_view::<3, 3>(0, 0).into_owned() * (sigma_range * sigma_range);
            let covariance = (covariance + covariance.transpose()) * 0.5;
            return Ok(Trilateration { position: p, clock_bias: b, covariance, iterations: iter });
        }
    }
    Err(GnssError::NonConvergence(MAX_ITERATIONS))
}
