//! Bounding-volume hierarchy over mesh triangles.

use nalgebra::Vector3;

use super::TwinMesh;

/// Rays ignore intersections closer than this (self-intersection guard).
pub const RAY_EPSILON: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
struct Aabb {
    min: Vector3<f64>,
    max: Vector3<f64>,
}

impl Aabb {
    fn empty() -> Self {
        Self { min: Vector3::repeat(f64::INFINITY), max: Vector3::repeat(f64::NEG_INFINITY) }
    }

    fn grow(&mut self, p: &Vector3<f64>) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    fn merge(&mut self, other: &Aabb) {
        self.min = self.min.inf(&other.min);
        self.max = self.max.sup(&other.max);
    }

    fn distance2(&self, p: &Vector3<f64>) -> f64 {
        let mut d2 = 0.0;
        for k in 0..3 {
            let d = (self.min[k] - p[k]).max(0.0).max(p[k] - self.max[k]);
            d2 += d * d;
        }
        d2
    }

    /// Slab test; returns the entry distance when the ray hits within `t_max`.
    fn ray_entry(&self, origin: &Vector3<f64>, inv_dir: &Vector3<f64>, t_max: f64) -> Option<f64> {
        let mut t0 = 0.0f64;
        let mut t1 = t_max;
        for k in 0..3 {
            let mut near = (self.min[k] - origin[k]) * inv_dir[k];
            let mut far = (self.max[k] - origin[k]) * inv_dir[k];
            if near > far {
                std::mem::swap(&mut near, &mut far);
            }
            // NaN arises for a zero direction component with the origin on a
            // slab plane; treat that axis as unconstrained.
            if near.is_nan() || far.is_nan() {
                continue;
            }
            t0 = t0.max(near);
            t1 = t1.min(far * (1.0 + 4.0 * f64::EPSILON));
            if t0 > t1 {
                return None;
            }
        }
        Some(t0)
    }
}

#[derive(Clone, Debug)]
enum NodeKind {
    Leaf { start: usize, count: usize },
    Inner { left: usize, right: usize },
}

#[derive(Clone, Debug)]
struct Node {
    bounds: Aabb,
    kind: NodeKind,
}

/// Closest surface point returned by [`SpatialIndex::closest_point`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClosestHit {
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub distance: f64,
    /// Triangle index in the indexed mesh.
    pub triangle: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayHit {
    pub distance: f64,
    pub triangle: usize,
    /// Outward face normal of the hit triangle.
    pub normal: Vector3<f64>,
}

/// Static BVH built by median splits along the longest centroid axis.
#[derive(Clone, Debug)]
pub struct SpatialIndex {
    nodes: Vec<Node>,
    tris: Vec<[Vector3<f64>; 3]>,
    normals: Vec<Vector3<f64>>,
    /// Original triangle index for each slot in `tris`.
    ids: Vec<usize>,
    leaf_size: usize,
}

impl SpatialIndex {
    pub fn build(mesh: &TwinMesh, leaf_size: usize) -> Self {
        let leaf_size = leaf_size.max(1);
        let n = mesh.len();
        let all_tris: Vec<[Vector3<f64>; 3]> = (0..n).map(|i| mesh.triangle(i)).collect();
        let centroids: Vec<Vector3<f64>> = all_tris.iter().map(|t| (t[0] + t[1] + t[2]) / 3.0).collect();
        let mut order: Vec<usize> = (0..n).collect();
        let mut nodes = Vec::with_capacity(2 * n / leaf_size + 1);
        if n > 0 {
            build_node(&mut nodes, &mut order, 0, n, &all_tris, &centroids, leaf_size);
        }
        let tris = order.iter().map(|&i| all_tris[i]).collect();
        let normals = order.iter().map(|&i| mesh.normals()[i]).collect();
        Self { nodes, tris, normals, ids: order, leaf_size }
    }

    pub fn len(&self) -> usize {
        self.tris.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tris.is_empty()
    }

    pub fn leaf_size(&self) -> usize {
        self.leaf_size
    }

    /// Exact closest point over all triangles. Exact distance ties resolve to
    /// the lowest triangle index. Returns `None` only for an empty index.
    pub fn closest_point(&self, q: &Vector3<f64>) -> Option<ClosestHit> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best_d2 = f64::INFINITY;
        let mut best: Option<(usize, Vector3<f64>)> = None;
        let mut stack = vec![0usize];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni];
            if node.bounds.distance2(q) > best_d2 {
                continue;
            }
            match node.kind {
                NodeKind::Leaf { start, count } => {
                    for slot in start..start + count {
                        let [a, b, c] = self.tris[slot];
                        let p = closest_point_on_triangle(q, &a, &b, &c);
                        let d2 = (p - q).norm_squared();
                        let better = match best {
                            None => true,
                            Some((bs, _)) => d2 < best_d2 || (d2 == best_d2 && self.ids[slot] < self.ids[bs]),
                        };
                        if better {
                            best_d2 = d2;
                            best = Some((slot, p));
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    let dl = self.nodes[left].bounds.distance2(q);
                    let dr = self.nodes[right].bounds.distance2(q);
                    // Push the farther child first so the nearer one is visited first.
                    if dl <= dr {
                        stack.push(right);
                        stack.push(left);
                    } else {
                        stack.push(left);
                        stack.push(right);
                    }
                }
            }
        }
        best.map(|(slot, point)| ClosestHit {
            point,
            normal: self.normals[slot],
            distance: best_d2.sqrt(),
            triangle: self.ids[slot],
        })
    }

    /// Nearest intersection with `t >= 1e-6` along a unit direction.
    pub fn ray_cast(&self, origin: &Vector3<f64>, direction: &Vector3<f64>) -> Option<RayHit> {
        self.ray_cast_within(origin, direction, f64::INFINITY)
    }

    /// Like [`ray_cast`](Self::ray_cast) but ignores hits beyond `t_max`.
    pub fn ray_cast_within(&self, origin: &Vector3<f64>, direction: &Vector3<f64>, t_max: f64) -> Option<RayHit> {
        if self.nodes.is_empty() {
            return None;
        }
        let inv = direction.map(|d| 1.0 / d);
        let mut best_t = t_max;
        let mut best: Option<usize> = None;
        let mut stack = vec![0usize];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni];
            if node.bounds.ray_entry(origin, &inv, best_t).is_none() {
                continue;
            }
            match node.kind {
                NodeKind::Leaf { start, count } => {
                    for slot in start..start + count {
                        let [a, b, c] = self.tris[slot];
                        if let Some(t) = ray_triangle(origin, direction, &a, &b, &c) {
                            let better = match best {
                                None => t <= best_t,
                                Some(bs) => t < best_t || (t == best_t && self.ids[slot] < self.ids[bs]),
                            };
                            if better {
                                best_t = t;
                                best = Some(slot);
                            }
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    stack.push(right);
                    stack.push(left);
                }
            }
        }
        best.map(|slot| RayHit { distance: best_t, triangle: self.ids[slot], normal: self.normals[slot] })
    }

    /// True when a segment between two points is blocked by any triangle.
    /// The last `end_margin` meters before `to` are ignored.
    pub fn segment_blocked(&self, from: &Vector3<f64>, to: &Vector3<f64>, end_margin: f64) -> bool {
        let d = to - from;
        let len = d.norm();
        if len <= end_margin {
            return false;
        }
        self.ray_cast_within(from, &(d / len), len - end_margin).is_some()
    }
}

fn build_node(
    nodes: &mut Vec<Node>,
    order: &mut [usize],
    start: usize,
    end: usize,
    tris: &[[Vector3<f64>; 3]],
    centroids: &[Vector3<f64>],
    leaf_size: usize,
) -> usize {
    let mut bounds = Aabb::empty();
    let mut cbounds = Aabb::empty();
    for &i in &order[start..end] {
        for v in &tris[i] {
            bounds.grow(v);
        }
        cbounds.grow(&centroids[i]);
    }
    let idx = nodes.len();
    nodes.push(Node { bounds, kind: NodeKind::Leaf { start, count: end - start } });
    let extent = cbounds.max - cbounds.min;
    if end - start <= leaf_size || extent.max() <= 0.0 {
        return idx;
    }
    let axis = extent.imax();
    let mid = start + (end - start) / 2;
    order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
        centroids[a][axis].total_cmp(&centroids[b][axis]).then(a.cmp(&b))
    });
    let left = build_node(nodes, order, start, mid, tris, centroids, leaf_size);
    let right = build_node(nodes, order, mid, end, tris, centroids, leaf_size);
    let mut merged = nodes[left].bounds;
    merged.merge(&nodes[right].bounds);
    nodes[idx] = Node { bounds: merged, kind: NodeKind::Inner { left, right } };
    idx
}

/// Closest point on triangle `abc` to `p` by Voronoi-region classification.
pub fn closest_point_on_triangle(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> Vector3<f64> {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

/// Moller-Trumbore intersection; returns `t >= RAY_EPSILON` on a hit.
pub fn ray_triangle(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    c: &Vector3<f64>,
) -> Option<f64> {
    let e1 = b - a;
    let e2 = c - a;
    let pvec = dir.cross(&e2);
    let det = e1.dot(&pvec);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv_det = 1.0 / det;
    let tvec = origin - a;
    let u = tvec.dot(&pvec) * inv_det;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let qvec = tvec.cross(&e1);
    let v = dir.dot(&qvec) * inv_det;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&qvec) * inv_det;
    (t >= RAY_EPSILON).then_some(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn floor(size: f64, z: f64) -> TwinMesh {
        let v = vec![
            Vector3::new(-size, -size, z),
            Vector3::new(size, -size, z),
            Vector3::new(size, size, z),
            Vector3::new(-size, size, z),
        ];
        TwinMesh::from_parts(v, vec![[0, 1, 2], [0, 2, 3]]).unwrap().0
    }

    #[test]
    fn point_on_face_has_zero_distance() {
        let idx = floor(1.0, 0.0).build_index(1);
        let hit = idx.closest_point(&Vector3::new(0.3, -0.2, 0.0)).unwrap();
        assert!(hit.distance < 1e-15);
        assert!((hit.normal - Vector3::z()).norm() < 1e-12);
    }

    #[test]
    fn point_above_floor_center() {
        let idx = floor(5.0, 0.0).build_index(4);
        let hit = idx.closest_point(&Vector3::new(0.1, 0.2, 2.5)).unwrap();
        assert!((hit.distance - 2.5).abs() < 1e-12);
        assert!((hit.normal - Vector3::z()).norm() < 1e-12);
    }

    #[test]
    fn ray_up_hits_ceiling_and_away_misses() {
        let idx = floor(5.0, 3.0).build_index(4);
        let hit = idx.ray_cast(&Vector3::new(0.5, 0.5, 0.0), &Vector3::z()).unwrap();
        assert!((hit.distance - 3.0).abs() < 1e-12);
        assert!(idx.ray_cast(&Vector3::new(0.5, 0.5, 0.0), &(-Vector3::z())).is_none());
        assert!(idx.ray_cast(&Vector3::new(0.5, 0.5, 0.0), &Vector3::x()).is_none());
    }

    #[test]
    fn ray_ignores_origin_surface() {
        let idx = floor(5.0, 0.0).build_index(4);
        assert!(idx.ray_cast(&Vector3::new(0.5, 0.5, 0.0), &Vector3::z()).is_none());
    }

    #[test]
    fn empty_index_returns_none() {
        let idx = SpatialIndex { nodes: vec![], tris: vec![], normals: vec![], ids: vec![], leaf_size: 4 };
        assert!(idx.closest_point(&Vector3::zeros()).is_none());
        assert!(idx.ray_cast(&Vector3::zeros(), &Vector3::x()).is_none());
    }
}
