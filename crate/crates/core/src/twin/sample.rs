use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use super::{MeshError, TwinMesh};

/// Points drawn uniformly over a mesh surface.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SurfaceSamples {
    pub points: Vec<Vector3<f64>>,
    pub normals: Vec<Vector3<f64>>,
    /// Source triangle of each point.
    pub triangles: Vec<usize>,
}

impl SurfaceSamples {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Samples a Poisson number of points with mean `density * area`, choosing
/// triangles proportionally to their area and positions uniformly inside.
pub fn sample_surface(mesh: &TwinMesh, density: f64, seed: u64) -> Result<SurfaceSamples, MeshError> {
    if !(density > 0.0) || !density.is_finite() {
        return Err(MeshError::InvalidDensity(density));
    }
    let mut cdf = Vec::with_capacity(mesh.len());
    let mut total = 0.0;
    for i in 0..mesh.len() {
        total += mesh.area(i);
        cdf.push(total);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean = density * total;
    let count = if mean > 0.0 {
        Poisson::new(mean).map(|p| p.sample(&mut rng) as usize).unwrap_or(0)
    } else {
        0
    };

    let mut out = SurfaceSamples {
        points: Vec::with_capacity(count),
        normals: Vec::with_capacity(count),
        triangles: Vec::with_capacity(count),
    };
    for _ in 0..count {
        let u = rng.random::<f64>() * total;
        let tri = cdf.partition_point(|&c| c < u).min(mesh.len() - 1);
        let [a, b, c] = mesh.triangle(tri);
        let r1 = rng.random::<f64>().sqrt();
        let r2 = rng.random::<f64>();
        let p = a * (1.0 - r1) + b * (r1 * (1.0 - r2)) + c * (r1 * r2);
        out.points.push(p);
        out.normals.push(mesh.normals()[tri]);
        out.triangles.push(tri);
    }
    Ok(out)
}
