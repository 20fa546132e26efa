//! Multi-start point-to-point ICP registering a scaled mesh to its partial
//! cloud, plus the scoring rule shared with externally supplied poses.

use nalgebra::{Matrix3, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{sample_surface, KdTree, TriangleBvh};
use crate::model::{PointCloud, RigidTransform, TexturedMesh, Vec3};

const MIN_CLOUD_POINTS: usize = 10;
/// Below this inlier fraction an externally supplied pose is refined.
pub const ADAPTER_MIN_INLIER_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfig {
    /// Meters; also the inlier radius.
    pub accept_rmse: f64,
    pub max_iterations: usize,
    /// Pose change (meters + radians) below which a start stops.
    pub tolerance: f64,
    pub mesh_samples: usize,
    /// Clouds are thinned to at most this many points while iterating.
    pub max_cloud_points: usize,
    /// Pairs farther than this multiple of the median distance are rejected.
    pub reject_factor: f64,
    /// Coarse starts refined against the exact surface.
    pub refine_starts: usize,
    pub seed: u64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            accept_rmse: 0.005,
            max_iterations: 60,
            tolerance: 1e-6,
            mesh_samples: 2000,
            max_cloud_points: 1000,
            reject_factor: 3.0,
            refine_starts: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    /// Mesh frame to camera frame.
    pub pose: RigidTransform,
    /// Root-mean-square point-to-surface distance over the whole cloud.
    pub rmse: f64,
    pub inlier_fraction: f64,
    pub converged: bool,
    pub restarts_used: usize,
}

/// The 24 proper rotations mapping the coordinate axes onto themselves.
pub fn octahedral_rotations() -> Vec<Matrix3<f64>> {
    const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut out = Vec::with_capacity(24);
    for p in PERMS {
        for signs in 0..8u32 {
            let mut m = Matrix3::zeros();
            for (row, &col) in p.iter().enumerate() {
                m[(row, col)] = if signs >> row & 1 == 1 { -1.0 } else { 1.0 };
            }
            if m.determinant() > 0.0 {
                out.push(m);
            }
        }
    }
    out
}

/// Least-squares rigid transform taking `src[i]` onto `dst[i]`.
pub fn kabsch(src: &[Vec3], dst: &[Vec3]) -> Option<RigidTransform> {
    if src.len() != dst.len() || src.len() < 3 {
        return None;
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vec3>() / n;
    let cd = dst.iter().sum::<Vec3>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let mut d = Matrix3::identity();
    if (v_t.transpose() * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = v_t.transpose() * d * u.transpose();
    let t = cd - r * cs;
    Some(RigidTransform::from_nearly_orthonormal(r, t))
}

fn check_cloud(partial: &PointCloud) -> Result<()> {
    if partial.len() < MIN_CLOUD_POINTS {
        return Err(Error::Precondition(format!(
            "partial cloud has {} points, need at least {MIN_CLOUD_POINTS}",
            partial.len()
        )));
    }
    let c = partial.centroid().expect("nonempty");
    let mut cov = Matrix3::zeros();
    for p in &partial.points {
        cov += (p - c) * (p - c).transpose();
    }
    cov /= partial.len() as f64;
    let mut ev: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[1] > 1e-12 * ev[0].max(1e-300)) || ev[0] <= 1e-18 {
        return Err(Error::Degenerate("partial cloud covariance has rank below 2".into()));
    }
    Ok(())
}

/// Root-mean-square point-to-surface distance of the posed mesh to every cloud
/// point, and the fraction of points within `accept_rmse`.
pub fn evaluate_registration(
    mesh: &TexturedMesh,
    pose: &RigidTransform,
    partial: &PointCloud,
    accept_rmse: f64,
) -> (f64, f64) {
    evaluate_with(&TriangleBvh::from_mesh(mesh), pose, &partial.points, accept_rmse)
}

fn evaluate_with(bvh: &TriangleBvh, pose: &RigidTransform, points: &[Vec3], accept: f64) -> (f64, f64) {
    if points.is_empty() || bvh.is_empty() {
        return (f64::INFINITY, 0.0);
    }
    let inv = pose.inverse();
    let d2: Vec<f64> = points
        .par_iter()
        .map(|q| bvh.closest_point(&inv.apply_point(q)).map_or(f64::INFINITY, |c| c.dist_sq))
        .collect();
    let sum: f64 = d2.iter().sum();
    let inliers = d2.iter().filter(|d| d.sqrt() <= accept).count();
    ((sum / points.len() as f64).sqrt(), inliers as f64 / points.len() as f64)
}

/// Every `k`-th point so that at most `max` remain.
fn thin(points: &[Vec3], max: usize) -> Vec<Vec3> {
    if points.len() <= max || max == 0 {
        return points.to_vec();
    }
    let step = points.len().div_ceil(max);
    points.iter().step_by(step).copied().collect()
}

/// Median-based rejection; returns kept `(mesh point, cloud point)` pairs.
fn reject(pairs: Vec<(Vec3, Vec3, f64)>, factor: f64) -> Vec<(Vec3, Vec3, f64)> {
    let mut d: Vec<f64> = pairs.iter().map(|p| p.2).collect();
    let mid = d.len() / 2;
    let (_, median, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let limit = (*median * factor).max(1e-12);
    pairs.into_iter().filter(|p| p.2 <= limit).collect()
}

struct Start {
    pose: RigidTransform,
    rmse: f64,
}

/// Iterate ICP from `pose`; `nearest` maps a mesh-frame query to the closest
/// mesh point. Returns the best pose seen and its rmse over all points.
fn run_icp(
    mut pose: RigidTransform,
    cloud: &[Vec3],
    cfg: &RegistrationConfig,
    nearest: impl Fn(&Vec3) -> Vec3,
) -> Start {
    let mut best = Start {
        pose,
        rmse: f64::INFINITY,
    };
    for _ in 0..cfg.max_iterations.max(1) {
        let inv = pose.inverse();
        let pairs: Vec<(Vec3, Vec3, f64)> = cloud
            .iter()
            .map(|q| {
                let local = inv.apply_point(q);
                let m = nearest(&local);
                (m, *q, (m - local).norm())
            })
            .collect();
        let rmse = (pairs.iter().map(|p| p.2 * p.2).sum::<f64>() / pairs.len() as f64).sqrt();
        if rmse < best.rmse {
            best = Start { pose, rmse };
        }
        let kept = reject(pairs, cfg.reject_factor);
        let (src, dst): (Vec<Vec3>, Vec<Vec3>) = kept.iter().map(|p| (p.0, p.1)).unzip();
        let Some(next) = kabsch(&src, &dst) else { break };
        let delta = pose.angle_to(&next) + pose.translation_distance(&next);
        pose = next;
        if delta < cfg.tolerance {
            break;
        }
    }
    // score the final pose too
    let inv = pose.inverse();
    let rmse = (cloud
        .iter()
        .map(|q| {
            let l = inv.apply_point(q);
            (nearest(&l) - l).norm_squared()
        })
        .sum::<f64>()
        / cloud.len() as f64)
        .sqrt();
    if rmse < best.rmse {
        best = Start { pose, rmse };
    }
    best
}

pub fn icp_register(mesh: &TexturedMesh, partial: &PointCloud, cfg: &RegistrationConfig) -> Result<RegistrationResult> {
    icp_register_seeded(mesh, partial, cfg, &[])
}

/// ICP from the octahedral seeds plus any `extra` full poses.
pub fn icp_register_seeded(
    mesh: &TexturedMesh,
    partial: &PointCloud,
    cfg: &RegistrationConfig,
    extra: &[RigidTransform],
) -> Result<RegistrationResult> {
    mesh.validate()?;
    if mesh.is_empty() {
        return Err(Error::Precondition("cannot register an empty mesh".into()));
    }
    check_cloud(partial)?;

    let samples: Vec<Vec3> = sample_surface(mesh, cfg.mesh_samples.max(1), cfg.seed)
        .into_iter()
        .map(|s| s.point)
        .collect();
    let tree = KdTree::new(&samples);
    let cloud = thin(&partial.points, cfg.max_cloud_points);
    let mesh_c = mesh.centroid();
    let cloud_c = partial.centroid().expect("nonempty");

    let mut seeds: Vec<RigidTransform> = octahedral_rotations()
        .into_iter()
        .map(|r| RigidTransform::from_nearly_orthonormal(r, cloud_c - r * mesh_c))
        .collect();
    seeds.extend_from_slice(extra);

    let coarse: Vec<Start> = seeds
        .par_iter()
        .map(|s| run_icp(*s, &cloud, cfg, |p| samples[tree.nearest(p).expect("samples").0]))
        .collect();
    let mut order: Vec<usize> = (0..coarse.len()).collect();
    order.sort_by(|&a, &b| coarse[a].rmse.total_cmp(&coarse[b].rmse).then(a.cmp(&b)));
    order.truncate(cfg.refine_starts.max(1));

    let bvh = TriangleBvh::from_mesh(mesh);
    let refined: Vec<(usize, RigidTransform, f64, f64)> = order
        .par_iter()
        .map(|&i| {
            let s = run_icp(coarse[i].pose, &cloud, cfg, |p| {
                bvh.closest_point(p).expect("nonempty mesh").point
            });
            let (rmse, inl) = evaluate_with(&bvh, &s.pose, &partial.points, cfg.accept_rmse);
            (i, s.pose, rmse, inl)
        })
        .collect();
    let best = refined
        .iter()
        .min_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)))
        .expect("at least one start");
    Ok(RegistrationResult {
        pose: best.1,
        rmse: best.2,
        inlier_fraction: best.3,
        converged: best.2 < cfg.accept_rmse,
        restarts_used: seeds.len(),
    })
}

/// Score an externally estimated pose; refine with ICP when too few points fit.
pub fn rescore_adapter_pose(
    mesh: &TexturedMesh,
    pose: &RigidTransform,
    partial: &PointCloud,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult> {
    check_cloud(partial)?;
    let (rmse, inlier_fraction) = evaluate_registration(mesh, pose, partial, cfg.accept_rmse);
    if inlier_fraction >= ADAPTER_MIN_INLIER_FRACTION {
        return Ok(RegistrationResult {
            pose: *pose,
            rmse,
            inlier_fraction,
            converged: rmse < cfg.accept_rmse,
            restarts_used: 0,
        });
    }
    log::info!("adapter pose fits {:.0}% of points; refining", inlier_fraction * 100.0);
    icp_register_seeded(mesh, partial, cfg, &[*pose])
}
