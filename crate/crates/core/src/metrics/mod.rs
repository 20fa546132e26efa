//! Scene-level evaluation: volumetric mesh IoU, Chamfer distance and MMD-EMD.

pub mod emd;
pub mod voxel;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{sample_cloud, KdTree};
use crate::model::{PointCloud, SceneReconstruction, TexturedMesh, Vec3};

pub use emd::emd;
pub use voxel::{voxelize_union, voxelize_watertight, GridSpec, VoxelGrid};

pub const DEFAULT_IOU_RESOLUTION: usize = 192;
/// Points per scene for Chamfer distance.
pub const DEFAULT_CD_SAMPLES: usize = 100_000;
/// Points per object for EMD.
pub const DEFAULT_EMD_SAMPLES: usize = 512;
pub const CD_REPORT_SCALE: f64 = 1e4;
pub const EMD_REPORT_SCALE: f64 = 1e2;
/// Empty cells around the joint bounding box of both scenes.
const GRID_PAD: usize = 2;

fn nn_sq_mean(from: &[Vec3], tree: &KdTree) -> f64 {
    let d: Vec<f64> = from.par_iter().map(|p| tree.nearest(p).expect("nonempty").1).collect();
    d.iter().sum::<f64>() / from.len() as f64
}

/// Symmetric sum of mean squared nearest-neighbor distances.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("chamfer distance of an empty cloud".into()));
    }
    let ta = KdTree::new(&a.points);
    let tb = KdTree::new(&b.points);
    Ok(nn_sq_mean(&a.points, &tb) + nn_sq_mean(&b.points, &ta))
}

/// Mean over truth clouds of the smallest EMD to any reconstructed cloud.
pub fn mmd_emd(truth: &[PointCloud], recon: &[PointCloud]) -> Result<f64> {
    Ok(mmd_matches(truth, recon)?.iter().map(|m| m.1).sum::<f64>() / truth.len() as f64)
}

/// For each truth cloud, `(index of closest recon cloud, its EMD)`.
pub fn mmd_matches(truth: &[PointCloud], recon: &[PointCloud]) -> Result<Vec<(usize, f64)>> {
    if truth.is_empty() || recon.is_empty() {
        return Err(Error::Empty("mmd-emd needs nonempty cloud lists".into()));
    }
    let pairs: Vec<(usize, usize)> = (0..truth.len())
        .flat_map(|t| (0..recon.len()).map(move |r| (t, r)))
        .collect();
    let d: Vec<f64> = pairs
        .par_iter()
        .map(|&(t, r)| emd(&truth[t].points, &recon[r].points))
        .collect::<Result<_>>()?;
    Ok((0..truth.len())
        .map(|t| {
            (0..recon.len())
                .map(|r| (r, d[t * recon.len() + r]))
                .min_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)))
                .expect("nonempty")
        })
        .collect())
}

fn joint_bounds(meshes: &[&TexturedMesh]) -> Option<(Vec3, Vec3)> {
    meshes
        .iter()
        .filter_map(|m| m.bounds())
        .reduce(|(l1, h1), (l2, h2)| (l1.inf(&l2), h1.sup(&h2)))
}

/// Shared grid over both scenes: `resolution` cells along the longest axis of the joint box.
pub fn shared_grid(a: &[TexturedMesh], b: &[TexturedMesh], resolution: usize) -> Result<GridSpec> {
    let all: Vec<&TexturedMesh> = a.iter().chain(b).collect();
    let (lo, hi) = joint_bounds(&all).ok_or_else(|| Error::Empty("no geometry to voxelize".into()))?;
    GridSpec::covering(&lo, &hi, resolution, GRID_PAD)
}

/// Volumetric IoU of the unions of enclosed volumes of two scenes.
pub fn mesh_iou(truth: &SceneReconstruction, recon: &SceneReconstruction, resolution: usize) -> Result<f64> {
    if truth.is_empty() || recon.is_empty() {
        return Err(Error::Empty("mesh IoU needs two nonempty scenes".into()));
    }
    let (t, r) = (truth.posed_meshes(), recon.posed_meshes());
    let spec = shared_grid(&t, &r, resolution)?;
    Ok(voxelize_union(&t, &spec)?.iou(&voxelize_union(&r, &spec)?))
}

/// Pairwise voxel overlap counts `[truth][recon]` on one shared grid.
pub fn voxel_overlaps(truth: &[TexturedMesh], recon: &[TexturedMesh], resolution: usize) -> Result<Vec<Vec<usize>>> {
    let spec = shared_grid(truth, recon, resolution)?;
    let vt: Vec<VoxelGrid> = truth.par_iter().map(|m| voxelize_watertight(m, &spec)).collect::<Result<_>>()?;
    let vr: Vec<VoxelGrid> = recon.par_iter().map(|m| voxelize_watertight(m, &spec)).collect::<Result<_>>()?;
    Ok(vt.iter().map(|a| vr.iter().map(|b| a.intersection_count(b)).collect()).collect())
}

fn scene_cloud(meshes: &[TexturedMesh], n: usize, seed: u64) -> PointCloud {
    sample_cloud(&TexturedMesh::merge(meshes), n, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub iou_resolution: usize,
    pub cd_samples: usize,
    pub emd_samples: usize,
    pub seed: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            iou_resolution: DEFAULT_IOU_RESOLUTION,
            cd_samples: DEFAULT_CD_SAMPLES,
            emd_samples: DEFAULT_EMD_SAMPLES,
            seed: 0,
        }
    }
}

/// Per ground-truth object: the reconstructed object with smallest EMD and the distances to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectMetrics {
    pub truth_index: usize,
    pub prompt: String,
    pub matched_recon: usize,
    pub cd: f64,
    pub emd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub miou: f64,
    /// Squared meters.
    pub cd: f64,
    /// Meters.
    pub mmd_emd: f64,
    pub per_object: Vec<ObjectMetrics>,
}

impl SceneMetrics {
    /// Metrics of a scene with nothing reconstructed.
    pub fn empty() -> Self {
        SceneMetrics {
            miou: 0.0,
            cd: f64::NAN,
            mmd_emd: f64::NAN,
            per_object: Vec::new(),
        }
    }
}

pub fn scene_metrics(
    truth: &SceneReconstruction,
    recon: &SceneReconstruction,
    cfg: &MetricsConfig,
) -> Result<SceneMetrics> {
    if truth.is_empty() {
        return Err(Error::Empty("ground-truth scene has no objects".into()));
    }
    if recon.is_empty() {
        return Ok(SceneMetrics::empty());
    }
    let (t, r) = (truth.posed_meshes(), recon.posed_meshes());
    let miou = mesh_iou(truth, recon, cfg.iou_resolution)?;
    let cd = chamfer(
        &scene_cloud(&t, cfg.cd_samples, cfg.seed),
        &scene_cloud(&r, cfg.cd_samples, cfg.seed ^ 0x5eed),
    )?;
    let obj_seed = |side: u64, i: usize| cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (side << 32) ^ i as u64;
    let tc: Vec<PointCloud> = t.iter().enumerate().map(|(i, m)| sample_cloud(m, cfg.emd_samples, obj_seed(1, i))).collect();
    let rc: Vec<PointCloud> = r.iter().enumerate().map(|(i, m)| sample_cloud(m, cfg.emd_samples, obj_seed(2, i))).collect();
    let matches = mmd_matches(&tc, &rc)?;
    let mmd = matches.iter().map(|m| m.1).sum::<f64>() / matches.len() as f64;
    let per_object = matches
        .iter()
        .enumerate()
        .map(|(i, &(j, e))| {
            Ok(ObjectMetrics {
                truth_index: i,
                prompt: truth.objects[i].prompt.clone(),
                matched_recon: j,
                cd: chamfer(&tc[i], &rc[j])?,
                emd: e,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SceneMetrics {
        miou,
        cd,
        mmd_emd: mmd,
        per_object,
    })
}
