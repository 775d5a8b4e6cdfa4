//! Urban-canyon GPS simulator: static constellation, ray-traced visibility,
//! one-bounce multipath, learned height-conditioned models and a
//! trilateration-based fix stream.

mod gmm;
mod gp;
mod trilateration;

pub use gmm::{fit_gmm, Gmm1d, GmmComponent, GmmFit};
pub use gp::{fit_gp, GpConfig, SatCountGp};
pub use trilateration::{range_residuals, trilaterate, Trilateration};

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{indexed_substream, substream};
use crate::simkit::Trajectory;
use crate::twin::{SpatialIndex, TwinMesh};

/// Distance of the satellites from the scene origin (m).
pub const SATELLITE_RANGE: f64 = 26_560e3;
pub const DEFAULT_MASK_DEG: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GnssError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("kernel matrix is singular")]
    SingularKernel,
    #[error("mixture component collapsed (mean {mean}, variance {variance})")]
    DegenerateComponent { mean: f64, variance: f64 },
    #[error("trilateration needs 4 satellites, got {0}")]
    TooFewSatellites(usize),
    #[error("satellite geometry is singular")]
    GeometrySingular,
    #[error("trilateration did not converge in {0} iterations")]
    NonConvergence(usize),
}

/// Static satellites at fixed azimuth/elevation from the scene origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constellation {
    pub satellites: Vec<Vector3<f64>>,
}

impl Constellation {
    /// `(azimuth, elevation)` pairs in degrees; azimuth from north (+y)
    /// toward east (+x).
    pub fn from_az_el(directions: &[(f64, f64)]) -> Result<Self, GnssError> {
        let satellites = directions
            .iter()
            .map(|&(az, el)| {
                let (az, el) = (az.to_radians(), el.to_radians());
                Vector3::new(el.cos() * az.sin(), el.cos() * az.cos(), el.sin()) * SATELLITE_RANGE
            })
            .collect();
        let c = Self { satellites };
        let above = (0..c.len()).filter(|&i| c.elevation(i, &Vector3::zeros()) > DEFAULT_MASK_DEG.to_radians()).count();
        if above < 4 {
            return Err(GnssError::InvalidConfig(format!("only {above} satellites above the 10 degree mask")));
        }
        Ok(c)
    }

    /// Twelve well-spread satellites.
    pub fn default_sky() -> Self {
        Self::from_az_el(&DEFAULT_SKY).expect("default sky is valid")
    }

    pub fn len(&self) -> usize {
        self.satellites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.satellites.is_empty()
    }

    pub fn direction(&self, i: usize, from: &Vector3<f64>) -> Vector3<f64> {
        (self.satellites[i] - from).normalize()
    }

    pub fn elevation(&self, i: usize, from: &Vector3<f64>) -> f64 {
        self.direction(i, from).z.asin()
    }
}

pub const DEFAULT_SKY: [(f64, f64); 12] = [
    (0.0, 82.0),
    (40.0, 62.0),
    (130.0, 55.0),
    (220.0, 66.0),
    (310.0, 48.0),
    (15.0, 33.0),
    (95.0, 28.0),
    (185.0, 38.0),
    (275.0, 24.0),
    (60.0, 15.0),
    (160.0, 19.0),
    (245.0, 13.0),
];

/// Satellites above `mask_deg` with an unobstructed line of sight.
pub fn visible_satellites(pos: &Vector3<f64>, sky: &Constellation, index: &SpatialIndex, mask_deg: f64) -> Vec<usize> {
    let mask = mask_deg.to_radians();
    (0..sky.len())
        .filter(|&i| {
            let d = sky.direction(i, pos);
            d.z.asin() > mask && index.ray_cast(pos, &d).is_none()
        })
        .collect()
}

/// Vertical facades of a mesh, used as reflector candidates.
#[derive(Clone, Debug)]
pub struct Facades {
    tris: Vec<([Vector3<f64>; 3], Vector3<f64>)>,
}

impl Facades {
    pub fn from_mesh(mesh: &TwinMesh) -> Self {
        let tris = (0..mesh.len())
            .filter(|&i| mesh.normals()[i].z.abs() < 0.1)
            .map(|i| (mesh.triangle(i), mesh.normals()[i]))
            .collect();
        Self { tris }
    }

    pub fn len(&self) -> usize {
        self.tris.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tris.is_empty()
    }

    /// Smallest excess path length `2 d (u . n)` over single specular
    /// reflections that reach `pos` from direction `u` with both legs
    /// unobstructed. `None` when no facade provides such a bounce.
    pub fn reflection_excess(&self, pos: &Vector3<f64>, u: &Vector3<f64>, index: &SpatialIndex) -> Option<f64> {
        let mut best: Option<f64> = None;
        for ([a, b, c], n) in &self.tris {
            let d = n.dot(&(pos - a));
            let un = u.dot(n);
            if d <= 1e-6 || un <= 1e-6 {
                continue;
            }
            let excess = 2.0 * d * un;
            if best.is_some_and(|e| e <= excess) {
                continue;
            }
            let mirrored = pos - n * (2.0 * d);
            let q = mirrored + u * (d / un);
            if !inside_triangle(&q, a, b, c, n) {
                continue;
            }
            let off = q + n * 1e-4;
            if index.segment_blocked(pos, &off, 1e-6) || index.ray_cast(&off, u).is_some() {
                continue;
            }
            best = Some(excess);
        }
        best
    }
}

fn inside_triangle(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>, n: &Vector3<f64>) -> bool {
    let e = |x: &Vector3<f64>, y: &Vector3<f64>| (y - x).cross(&(p - x)).dot(n);
    let tol = -1e-9;
    e(a, b) >= tol && e(b, c) >= tol && e(c, a) >= tol
}

/// True when `pos` lies inside a closed building: the first surface hit
/// straight up is seen from its back side.
pub fn inside_solid(pos: &Vector3<f64>, index: &SpatialIndex) -> bool {
    index.ray_cast(pos, &Vector3::z()).is_some_and(|h| h.normal.z > 0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub n_samples: usize,
    pub height_range: [f64; 2],
    pub mask_deg: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self { n_samples: 2000, height_range: [1.0, 100.0], mask_deg: DEFAULT_MASK_DEG }
    }
}

/// Height-indexed datasets drawn from random free-space positions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingSets {
    /// `(height, visible satellite count)`.
    pub counts: Vec<(f64, f64)>,
    /// `(height, multipath excess)` per above-mask satellite: 0 with line of
    /// sight or without a reflection path.
    pub multipath: Vec<(f64, f64)>,
}

pub fn build_training_sets(
    mesh: &TwinMesh,
    index: &SpatialIndex,
    sky: &Constellation,
    cfg: &TrainingConfig,
    seed: u64,
) -> Result<TrainingSets, GnssError> {
    if cfg.n_samples < 100 {
        return Err(GnssError::TooFewSamples { needed: 100, got: cfg.n_samples });
    }
    let [h0, h1] = cfg.height_range;
    if !(h0 > 0.0 && h1 >= h0) {
        return Err(GnssError::InvalidConfig("training heights must be positive".into()));
    }
    let (lo, hi) = mesh.bounds();
    let facades = Facades::from_mesh(mesh);
    let mut rng = substream(seed, "gnss-training");
    let mask = cfg.mask_deg.to_radians();
    let mut out = TrainingSets::default();
    let mut accepted = 0;
    let mut attempts = 0usize;
    while accepted < cfg.n_samples {
        attempts += 1;
        if attempts > 100 * cfg.n_samples {
            return Err(GnssError::InvalidConfig("scene has almost no free space".into()));
        }
        let h = if h1 > h0 { rng.random_range(h0..=h1) } else { h0 };
        let pos = Vector3::new(rng.random_range(lo.x..=hi.x), rng.random_range(lo.y..=hi.y), h);
        if inside_solid(&pos, index) {
            continue;
        }
        accepted += 1;
        let mut count = 0;
        for i in 0..sky.len() {
            let u = sky.direction(i, &pos);
            if u.z.asin() <= mask {
                continue;
            }
            let excess = if index.ray_cast(&pos, &u).is_none() {
                count += 1;
                0.0
            } else {
                facades.reflection_excess(&pos, &u, index).unwrap_or(0.0)
            };
            out.multipath.push((h, excess));
        }
        out.counts.push((h, count as f64));
    }
    Ok(out)
}

/// Height-binned mixture model of the multipath error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultipathBin {
    pub lo: f64,
    pub hi: f64,
    pub samples: usize,
    pub gmm: Gmm1d,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MultipathModel {
    pub bins: Vec<MultipathBin>,
}

impl MultipathModel {
    /// Model that always returns zero.
    pub fn zero() -> Self {
        Self { bins: Vec::new() }
    }

    pub fn bin_for(&self, height: f64) -> Option<&MultipathBin> {
        self.bins.iter().min_by(|a, b| {
            let da = dist_to_interval(height, a.lo, a.hi);
            let db = dist_to_interval(height, b.lo, b.hi);
            da.total_cmp(&db)
        })
    }

    pub fn sample(&self, height: f64, rng: &mut impl Rng) -> f64 {
        self.bin_for(height).map_or(0.0, |b| b.gmm.sample(rng))
    }
}

fn dist_to_interval(x: f64, lo: f64, hi: f64) -> f64 {
    if x < lo {
        lo - x
    } else if x >= hi {
        x - hi
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultipathFitConfig {
    pub components: usize,
    pub bin_edges: Vec<f64>,
    /// Gaussian dither added before fitting so that exact zeros do not
    /// collapse a component.
    pub dither_sigma: f64,
}

impl Default for MultipathFitConfig {
    fn default() -> Self {
        Self { components: 3, bin_edges: vec![0.0, 10.0, 20.0, 35.0, 50.0, 75.0, 1e9], dither_sigma: 0.05 }
    }
}

/// Fits one mixture per height bin. Bins with fewer than ten samples are
/// skipped; bins with fewer than `10 K` samples or a collapsing component
/// use fewer components.
pub fn fit_multipath(pairs: &[(f64, f64)], cfg: &MultipathFitConfig, seed: u64) -> Result<MultipathModel, GnssError> {
    if cfg.bin_edges.len() < 2 || cfg.bin_edges.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(GnssError::InvalidConfig("bin edges must increase".into()));
    }
    if cfg.components == 0 {
        return Err(GnssError::InvalidConfig("mixture needs at least one component".into()));
    }
    let mut rng = substream(seed, "gmm-dither");
    let mut bins = Vec::new();
    for (b, w) in cfg.bin_edges.windows(2).enumerate() {
        let (lo, hi) = (w[0], w[1]);
        let mut values: Vec<f64> = pairs.iter().filter(|p| p.0 >= lo && p.0 < hi).map(|p| p.1).collect();
        if values.len() < 10 {
            continue;
        }
        for v in &mut values {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += cfg.dither_sigma * z;
        }
        // A component that collapses onto an isolated sample is retried
        // with fewer components.
        let mut k = cfg.components.min(values.len() / 10).max(1);
        let bin_seed = crate::rng::substream_seed(seed, &format!("bin-{b}"));
        let fit = loop {
            match fit_gmm(&values, k, bin_seed) {
                Err(GnssError::DegenerateComponent { .. }) if k > 1 => k -= 1,
                other => break other?,
            }
        };
        bins.push(MultipathBin { lo, hi, samples: values.len(), gmm: fit.gmm });
    }
    Ok(MultipathModel { bins })
}

/// Fitted simulator models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GnssModels {
    pub constellation: Constellation,
    pub count_gp: Option<SatCountGp>,
    pub multipath: MultipathModel,
}

/// How each epoch decides which satellites are tracked.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisibilityMode {
    /// Ray cast against the mesh.
    #[default]
    RayCast,
    /// Draw a count from the GP and keep that many highest satellites.
    GpCount,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixStreamConfig {
    pub rate: f64,
    pub sigma_range: f64,
    pub mask_deg: f64,
    /// Standard deviation of the per-epoch receiver clock offset (m).
    pub clock_sigma: f64,
    pub visibility: VisibilityMode,
}

impl Default for FixStreamConfig {
    fn default() -> Self {
        Self { rate: 5.0, sigma_range: 1.5, mask_deg: DEFAULT_MASK_DEG, clock_sigma: 30.0, visibility: VisibilityMode::RayCast }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpsFix {
    pub t: f64,
    pub position: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    pub n_sats: usize,
}

/// One candidate epoch every `1 / rate` seconds; epochs with fewer than four
/// tracked satellites or a failed solve emit nothing.
pub fn generate_fix_stream(
    traj: &Trajectory,
    index: &SpatialIndex,
    models: &GnssModels,
    cfg: &FixStreamConfig,
    seed: u64,
) -> Result<Vec<GpsFix>, GnssError> {
    if !(cfg.rate > 0.0 && cfg.sigma_range >= 0.0 && cfg.clock_sigma >= 0.0) {
        return Err(GnssError::InvalidConfig("fix stream rates and sigmas must be non-negative".into()));
    }
    if cfg.visibility == VisibilityMode::GpCount && models.count_gp.is_none() {
        return Err(GnssError::InvalidConfig("GP visibility requires a fitted count model".into()));
    }
    let sky = &models.constellation;
    let n = (traj.duration() * cfg.rate + 1e-9).floor() as usize;
    let fixes = (0..=n)
        .into_par_iter()
        .filter_map(|k| {
            let t = k as f64 / cfg.rate;
            let pos = traj.position(t);
            let mut rng = indexed_substream(seed, "gnss", k as u64);
            let tracked = match cfg.visibility {
                VisibilityMode::RayCast => visible_satellites(&pos, sky, index, cfg.mask_deg),
                VisibilityMode::GpCount => gp_tracked(&pos, sky, models.count_gp.as_ref()?, cfg.mask_deg, &mut rng)?,
            };
            if tracked.len() < 4 {
                return None;
            }
            let clock: f64 = StandardNormal.sample(&mut rng);
            let clock = clock * cfg.clock_sigma;
            let sats: Vec<Vector3<f64>> = tracked.iter().map(|&i| sky.satellites[i]).collect();
            let ranges: Vec<f64> = sats
                .iter()
                .map(|s| {
                    let mp = models.multipath.sample(pos.z, &mut rng);
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (s - pos).norm() + clock + mp + cfg.sigma_range * z
                })
                .collect();
            let sol = trilaterate(&sats, &ranges, &Vector3::zeros(), cfg.sigma_range).ok()?;
            Some(GpsFix { t, position: sol.position, covariance: sol.covariance, n_sats: sats.len() })
        })
        .collect();
    Ok(fixes)
}

fn gp_tracked(pos: &Vector3<f64>, sky: &Constellation, gp: &SatCountGp, mask_deg: f64, rng: &mut impl Rng) -> Option<Vec<usize>> {
    let (mean, var) = gp.predict(pos.z);
    let z: f64 = StandardNormal.sample(rng);
    let mask = mask_deg.to_radians();
    let mut above: Vec<(f64, usize)> =
        (0..sky.len()).map(|i| (sky.elevation(i, pos), i)).filter(|(e, _)| *e > mask).collect();
    above.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let count = (mean + var.sqrt() * z).round().clamp(0.0, above.len() as f64) as usize;
    let mut out: Vec<usize> = above[..count].iter().map(|e| e.1).collect();
    out.sort_unstable();
    Some(out)
}
