//! Spatial-index queries against brute-force scans written independently of
//! the index's own triangle routines, plus property checks on the twin.

use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twinloc::simkit::{generate_city, CityBox, CityConfig};
use twinloc::twin::{crop_local, sample_surface, TwinMesh};

fn city() -> TwinMesh {
    let cfg = CityConfig {
        blocks: [3, 3],
        ground_tile: Some(12.0),
        extra_boxes: vec![CityBox { min: [-5.0, -5.0, 0.0], max: [5.0, 5.0, 12.0] }],
        ..Default::default()
    };
    generate_city(&cfg, 11).unwrap()
}

fn segment_distance(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let ab = b - a;
    let s = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    (p - (a + ab * s)).norm()
}

/// Plane projection when it falls inside the triangle, otherwise the
/// nearest of the three edges.
fn triangle_distance(p: &Vector3<f64>, [a, b, c]: [Vector3<f64>; 3]) -> f64 {
    let n = (b - a).cross(&(c - a)).normalize();
    let d = (p - a).dot(&n);
    let q = p - n * d;
    let inside = [(a, b), (b, c), (c, a)].iter().all(|(u, v)| (v - u).cross(&(q - u)).dot(&n) >= 0.0);
    if inside {
        d.abs()
    } else {
        segment_distance(p, &a, &b).min(segment_distance(p, &b, &c)).min(segment_distance(p, &c, &a))
    }
}

/// Ray parameter of the plane crossing, kept when it lies inside the triangle.
fn ray_distance(o: &Vector3<f64>, dir: &Vector3<f64>, [a, b, c]: [Vector3<f64>; 3]) -> Option<f64> {
    let n = (b - a).cross(&(c - a));
    let denom = n.dot(dir);
    if denom.abs() < 1e-12 {
        return None;
    }
    let t = n.dot(&(a - o)) / denom;
    if t <= 1e-9 {
        return None;
    }
    let q = o + dir * t;
    [(a, b), (b, c), (c, a)].iter().all(|(u, v)| (v - u).cross(&(q - u)).dot(&n) >= 0.0).then_some(t)
}

fn random_point(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(rng.random_range(-120.0..120.0), rng.random_range(-120.0..120.0), rng.random_range(-5.0..80.0))
}

#[test]
fn closest_point_matches_brute_force() {
    let mesh = city();
    assert!(mesh.len() <= 10_000);
    let index = mesh.build_index(8);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..1000 {
        let q = random_point(&mut rng);
        let brute = (0..mesh.len()).map(|i| triangle_distance(&q, mesh.triangle(i))).fold(f64::INFINITY, f64::min);
        let hit = index.closest_point(&q).unwrap();
        assert!((hit.distance - brute).abs() <= 1e-9, "query {q:?}: index {} brute {brute}", hit.distance);
        assert!(((hit.point - q).norm() - brute).abs() <= 1e-9);
        assert!(triangle_distance(&hit.point, mesh.triangle(hit.triangle)) <= 1e-9);
    }
}

#[test]
fn ray_cast_matches_brute_force() {
    let mesh = city();
    let index = mesh.build_index(8);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut hits = 0;
    for _ in 0..1000 {
        let o = random_point(&mut rng);
        let dir = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
        let brute = (0..mesh.len()).filter_map(|i| ray_distance(&o, &dir, mesh.triangle(i))).fold(f64::INFINITY, f64::min);
        match index.ray_cast(&o, &dir) {
            Some(hit) => {
                hits += 1;
                assert!((hit.distance - brute).abs() <= 1e-9, "ray {o:?} {dir:?}: index {} brute {brute}", hit.distance);
            }
            None => assert!(brute.is_infinite(), "index missed a hit at {brute}"),
        }
    }
    assert!(hits > 300, "too few hits to be informative: {hits}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn closest_distance_never_exceeds_vertex_distance(x in -100.0..100.0f64, y in -100.0..100.0f64, z in -5.0..70.0f64) {
        let mesh = city();
        let index = mesh.build_index(4);
        let q = Vector3::new(x, y, z);
        let hit = index.closest_point(&q).unwrap();
        let nearest_vertex = mesh.vertices().iter().map(|v| (v - q).norm()).fold(f64::INFINITY, f64::min);
        prop_assert!(hit.distance <= nearest_vertex + 1e-12);
        prop_assert!((hit.normal.norm() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn crop_is_idempotent(cx in -80.0..80.0f64, cy in -80.0..80.0f64, half in 10.0..90.0f64) {
        let mesh = city();
        let center = Vector3::new(cx, cy, 0.0);
        let once = crop_local(&mesh, &center, half).unwrap();
        let twice = crop_local(&once.mesh, &center, half).unwrap();
        prop_assert_eq!(once.mesh, twice.mesh);
    }

    #[test]
    fn samples_lie_on_their_source_triangle(seed in 0u64..1000) {
        let mesh = city();
        let s = sample_surface(&mesh, 0.01, seed).unwrap();
        for (p, &t) in s.points.iter().zip(&s.triangles) {
            prop_assert!(triangle_distance(p, mesh.triangle(t)) <= 1e-9);
        }
    }

    #[test]
    fn ingested_meshes_are_well_formed(seed in 0u64..1000) {
        let mesh = city_with_seed(seed);
        let nv = mesh.vertices().len() as u32;
        for (i, t) in mesh.triangles().iter().enumerate() {
            prop_assert!(t.iter().all(|&v| v < nv));
            prop_assert!((mesh.normals()[i].norm() - 1.0).abs() <= 1e-9);
            prop_assert!(mesh.area(i) > 0.0);
        }
    }
}

fn city_with_seed(seed: u64) -> TwinMesh {
    generate_city(&CityConfig { blocks: [2, 3], ..Default::default() }, seed).unwrap()
}
