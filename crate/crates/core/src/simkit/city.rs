use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::rng::substream;
use crate::twin::TwinMesh;

/// Axis-aligned box given by two opposite corners.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CityBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

/// Grid city: `blocks[0] x blocks[1]` building blocks separated by streets,
/// centered on the origin, on a flat ground plane at z = 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CityConfig {
    pub blocks: [usize; 2],
    pub block_size: f64,
    pub street_width: f64,
    pub height_range: [f64; 2],
    /// Ground extends this far beyond the outermost blocks.
    pub ground_margin: f64,
    /// Subdivide the ground into squares of this size; one quad when unset.
    pub ground_tile: Option<f64>,
    /// Grid cells left empty (plazas, parks).
    pub empty_blocks: Vec<[usize; 2]>,
    pub extra_boxes: Vec<CityBox>,
}

impl Default for CityConfig {
    fn default() -> Self {
        Self {
            blocks: [1, 1],
            block_size: 40.0,
            street_width: 20.0,
            height_range: [20.0, 60.0],
            ground_margin: 40.0,
            ground_tile: None,
            empty_blocks: Vec::new(),
            extra_boxes: Vec::new(),
        }
    }
}

impl CityConfig {
    fn validate(&self) -> Result<(), SimError> {
        let [h0, h1] = self.height_range;
        let ok = self.block_size > 0.0
            && self.street_width >= 0.0
            && self.ground_margin >= 0.0
            && h0 > 0.0
            && h1 >= h0
            && self.ground_tile.is_none_or(|t| t > 0.0);
        if !ok {
            return Err(SimError::InvalidConfig("city dimensions must be positive".into()));
        }
        for b in &self.extra_boxes {
            if (0..3).any(|k| b.max[k] <= b.min[k]) {
                return Err(SimError::InvalidConfig("box max must exceed min on every axis".into()));
            }
        }
        Ok(())
    }

    /// Half width of the built area along x and y.
    pub fn half_extent(&self) -> [f64; 2] {
        let span = |n: usize| {
            if n == 0 {
                0.0
            } else {
                n as f64 * self.block_size + (n - 1) as f64 * self.street_width
            }
        };
        [span(self.blocks[0]) / 2.0, span(self.blocks[1]) / 2.0]
    }

    /// Footprint `(min_xy, max_xy)` of grid cell `(i, j)`.
    pub fn block_footprint(&self, i: usize, j: usize) -> ([f64; 2], [f64; 2]) {
        let [hx, hy] = self.half_extent();
        let pitch = self.block_size + self.street_width;
        let x0 = -hx + i as f64 * pitch;
        let y0 = -hy + j as f64 * pitch;
        ([x0, y0], [x0 + self.block_size, y0 + self.block_size])
    }
}

/// Builds the city mesh. Building heights are drawn uniformly from
/// `height_range` using the seed; everything else is deterministic.
pub fn generate_city(cfg: &CityConfig, seed: u64) -> Result<TwinMesh, SimError> {
    cfg.validate()?;
    let mut rng = substream(seed, "city");
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();

    let [hx, hy] = cfg.half_extent();
    let gx = hx + cfg.ground_margin;
    let gy = hy + cfg.ground_margin;
    push_ground(&mut vertices, &mut triangles, [-gx, -gy], [gx, gy], cfg.ground_tile);

    let [h0, h1] = cfg.height_range;
    for i in 0..cfg.blocks[0] {
        for j in 0..cfg.blocks[1] {
            // Draw even for empty cells so that emptying a cell keeps the others.
            let h = if h1 > h0 { rng.random_range(h0..=h1) } else { h0 };
            if cfg.empty_blocks.contains(&[i, j]) {
                continue;
            }
            let (lo, hi) = cfg.block_footprint(i, j);
            push_box(&mut vertices, &mut triangles, [lo[0], lo[1], 0.0], [hi[0], hi[1], h]);
        }
    }
    for b in &cfg.extra_boxes {
        push_box(&mut vertices, &mut triangles, b.min, b.max);
    }
    let (mesh, _) = TwinMesh::from_parts(vertices, triangles)
        .map_err(|e| SimError::InvalidConfig(format!("city mesh: {e}")))?;
    Ok(mesh)
}

fn push_ground(vertices: &mut Vec<Vector3<f64>>, triangles: &mut Vec<[u32; 3]>, lo: [f64; 2], hi: [f64; 2], tile: Option<f64>) {
    let (nx, ny) = match tile {
        Some(t) => (((hi[0] - lo[0]) / t).ceil().max(1.0) as usize, ((hi[1] - lo[1]) / t).ceil().max(1.0) as usize),
        None => (1, 1),
    };
    let base = vertices.len() as u32;
    for j in 0..=ny {
        for i in 0..=nx {
            let x = lo[0] + (hi[0] - lo[0]) * i as f64 / nx as f64;
            let y = lo[1] + (hi[1] - lo[1]) * j as f64 / ny as f64;
            vertices.push(Vector3::new(x, y, 0.0));
        }
    }
    let at = |i: usize, j: usize| base + (j * (nx + 1) + i) as u32;
    for j in 0..ny {
        for i in 0..nx {
            triangles.push([at(i, j), at(i + 1, j), at(i + 1, j + 1)]);
            triangles.push([at(i, j), at(i + 1, j + 1), at(i, j + 1)]);
        }
    }
}

/// Closed box with outward-facing triangles.
fn push_box(vertices: &mut Vec<Vector3<f64>>, triangles: &mut Vec<[u32; 3]>, lo: [f64; 3], hi: [f64; 3]) {
    let base = vertices.len() as u32;
    for k in 0..8 {
        vertices.push(Vector3::new(
            if k & 1 == 0 { lo[0] } else { hi[0] },
            if k & 2 == 0 { lo[1] } else { hi[1] },
            if k & 4 == 0 { lo[2] } else { hi[2] },
        ));
    }
    const FACES: [[u32; 3]; 12] = [
        [0, 2, 1], [1, 2, 3], // bottom (-z)
        [4, 5, 6], [5, 7, 6], // top (+z)
        [0, 1, 4], [1, 5, 4], // -y
        [2, 6, 3], [3, 6, 7], // +y
        [0, 4, 2], [2, 4, 6], // -x
        [1, 3, 5], [3, 7, 5], // +x
    ];
    for f in FACES {
        triangles.push([base + f[0], base + f[1], base + f[2]]);
    }
}
