use nalgebra::{Matrix3, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Vec3;

/// Half-space boundary `normal . x + offset = 0`; the free side has positive distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub normal: Vec3,
    pub offset: f64,
}

impl Plane {
    pub fn new(normal: Vec3, offset: f64) -> Result<Self> {
        let n = normal.norm();
        if !(n > 1e-12 && n.is_finite() && offset.is_finite()) {
            return Err(Error::Degenerate("plane normal must be nonzero".into()));
        }
        Ok(Plane {
            normal: normal / n,
            offset: offset / n,
        })
    }

    pub fn through(point: &Vec3, normal: &Vec3) -> Result<Self> {
        let n = normal.normalize();
        Self::new(n, -n.dot(point))
    }

    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) + self.offset
    }
}

const RANSAC_ITERATIONS: usize = 256;

/// Least-squares plane through points: centroid and smallest-eigenvalue direction.
fn fit_least_squares(points: &[&Vec3]) -> Option<(Vec3, Vec3)> {
    let c = points.iter().fold(Vec3::zeros(), |a, p| a + *p) / points.len() as f64;
    let cov = points.iter().fold(Matrix3::zeros(), |a, p| {
        let d = *p - c;
        a + d * d.transpose()
    });
    let eig = SymmetricEigen::new(cov);
    let k = eig.eigenvalues.imin();
    let n = eig.eigenvectors.column(k).into_owned();
    (n.norm() > 0.5).then_some((c, n))
}

/// Dominant plane of a cloud by RANSAC with inlier threshold `threshold`,
/// refined by least squares on the inliers and oriented so that `viewpoint`
/// lies on the positive side.
pub fn fit_plane_ransac(points: &[Vec3], threshold: f64, viewpoint: &Vec3, seed: u64) -> Result<Plane> {
    if points.len() < 3 {
        return Err(Error::InsufficientCorrespondences {
            found: points.len(),
            required: 3,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, Vec3, Vec3)> = None;
    for _ in 0..RANSAC_ITERATIONS {
        let idx = rand::seq::index::sample(&mut rng, points.len(), 3);
        let (a, b, c) = (points[idx.index(0)], points[idx.index(1)], points[idx.index(2)]);
        let n = (b - a).cross(&(c - a));
        if n.norm() < 1e-12 {
            continue;
        }
        let n = n.normalize();
        let count = points.iter().filter(|p| n.dot(&(*p - a)).abs() <= threshold).count();
        if best.as_ref().is_none_or(|(k, _, _)| count > *k) {
            best = Some((count, a, n));
        }
    }
    let (_, a, n) = best.ok_or_else(|| Error::Degenerate("all points collinear".into()))?;
    let inliers: Vec<&Vec3> = points.iter().filter(|p| n.dot(&(*p - a)).abs() <= threshold).collect();
    let (c, mut n) = fit_least_squares(&inliers).ok_or_else(|| Error::Degenerate("plane fit failed".into()))?;
    if n.dot(&(viewpoint - c)) < 0.0 {
        n = -n;
    }
    Plane::through(&c, &n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn recovers_a_noisy_table_among_clutter() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = Normal::new(0.0, 0.001).unwrap();
        let tilt = Vec3::new(0.1, -0.2, 1.0).normalize();
        let (u, v) = super::super::perpendicular_basis(&tilt);
        let mut pts: Vec<Vec3> = (0..2000)
            .map(|_| {
                let (s, t): (f64, f64) = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
                u * s + v * t + tilt * (0.3 + noise.sample(&mut rng))
            })
            .collect();
        pts.extend((0..800).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())));
        let plane = fit_plane_ransac(&pts, 0.005, &Vec3::new(0.0, 0.0, 5.0), 3).unwrap();
        assert!(plane.normal.dot(&tilt) > 0.9999);
        assert!((plane.offset + 0.3).abs() < 5e-4, "{}", plane.offset);
        let flipped = fit_plane_ransac(&pts, 0.005, &Vec3::new(0.0, 0.0, -5.0), 3).unwrap();
        assert!(flipped.normal.dot(&tilt) < -0.9999);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(fit_plane_ransac(&[Vec3::zeros(); 2], 0.01, &Vec3::z(), 0).is_err());
        let line: Vec<Vec3> = (0..10).map(|i| Vec3::x() * i as f64).collect();
        assert!(fit_plane_ransac(&line, 0.01, &Vec3::z(), 0).is_err());
        assert!(Plane::new(Vec3::zeros(), 1.0).is_err());
    }

    #[test]
    fn signed_distance_is_normalized() {
        let p = Plane::new(Vec3::new(0.0, 0.0, 2.0), -2.0).unwrap();
        assert_eq!(p.signed_distance(&Vec3::new(3.0, 4.0, 1.5)), 0.5);
    }
}
