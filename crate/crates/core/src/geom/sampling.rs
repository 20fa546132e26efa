use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{PointCloud, TexturedMesh, Vec3};

/// A point on a mesh surface together with the face it lies on.
#[derive(Debug, Clone, Copy)]
pub struct SurfaceSample {
    pub point: Vec3,
    pub face: usize,
}

/// Area-weighted uniform samples on the surface, deterministic under `seed`.
pub fn sample_surface(mesh: &TexturedMesh, n: usize, seed: u64) -> Vec<SurfaceSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_surface_with(mesh, n, &mut rng)
}

pub fn sample_surface_with(mesh: &TexturedMesh, n: usize, rng: &mut impl Rng) -> Vec<SurfaceSample> {
    if mesh.faces.is_empty() || n == 0 {
        return Vec::new();
    }
    let mut cumulative = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        total += mesh.face_area(f);
        cumulative.push(total);
    }
    (0..n)
        .map(|_| {
            let target = rng.random::<f64>() * total;
            let face = cumulative.partition_point(|&c| c <= target).min(mesh.faces.len() - 1);
            let [a, b, c] = mesh.triangle(face);
            let (r1, r2): (f64, f64) = (rng.random(), rng.random());
            let s = r1.sqrt();
            let point = a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2);
            SurfaceSample { point, face }
        })
        .collect()
}

pub fn sample_cloud(mesh: &TexturedMesh, n: usize, seed: u64) -> PointCloud {
    PointCloud::from_points(sample_surface(mesh, n, seed).into_iter().map(|s| s.point).collect())
}
