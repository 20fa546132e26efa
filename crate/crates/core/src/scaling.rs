//! Isotropic scale between a generated mesh and the observed object, from the
//! spread of the lifted correspondence clouds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PointCloud, TexturedMesh, Vec3};

/// Fraction of largest centroid distances dropped when trimming is enabled.
pub const TRIM_FRACTION: f64 = 0.1;
const MIN_POINTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleEstimate {
    pub factor: f64,
    pub n_pairs: usize,
    pub spread_observed: f64,
    pub spread_rendered: f64,
}

/// Mean distance to the centroid, optionally after dropping the farthest `trim` fraction.
pub fn spread(points: &[Vec3], trim: bool) -> f64 {
    let mean_dist = |pts: &[Vec3]| {
        let c = pts.iter().sum::<Vec3>() / pts.len() as f64;
        pts.iter().map(|p| (p - c).norm()).sum::<f64>() / pts.len() as f64
    };
    if !trim {
        return mean_dist(points);
    }
    let c = points.iter().sum::<Vec3>() / points.len() as f64;
    let mut order: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| ((p - c).norm(), i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let keep = points.len() - (points.len() as f64 * TRIM_FRACTION).floor() as usize;
    let kept: Vec<Vec3> = order[..keep].iter().map(|&(_, i)| points[i]).collect();
    mean_dist(&kept)
}

pub fn estimate_scale(observed: &PointCloud, rendered: &PointCloud) -> Result<ScaleEstimate> {
    estimate_scale_with(observed, rendered, false)
}

pub fn estimate_scale_with(observed: &PointCloud, rendered: &PointCloud, trim: bool) -> Result<ScaleEstimate> {
    for (name, c) in [("observed", observed), ("rendered", rendered)] {
        if c.len() < MIN_POINTS {
            return Err(Error::Precondition(format!(
                "{name} cloud has {} points, need at least {MIN_POINTS}",
                c.len()
            )));
        }
    }
    let spread_observed = spread(&observed.points, trim);
    let spread_rendered = spread(&rendered.points, trim);
    if !(spread_rendered >= 1e-9) {
        return Err(Error::Degenerate(format!("rendered spread {spread_rendered:e} m")));
    }
    if !(spread_observed > 0.0) {
        return Err(Error::Degenerate("observed cloud collapses to a point".into()));
    }
    Ok(ScaleEstimate {
        factor: spread_observed / spread_rendered,
        n_pairs: observed.len().min(rendered.len()),
        spread_observed,
        spread_rendered,
    })
}

/// Scale vertices about the mesh centroid.
pub fn apply_scale(mesh: &TexturedMesh, estimate: &ScaleEstimate) -> TexturedMesh {
    scale_about_centroid(mesh, estimate.factor)
}

pub fn scale_about_centroid(mesh: &TexturedMesh, factor: f64) -> TexturedMesh {
    let c = mesh.centroid();
    let mut out = mesh.clone();
    out.vertices.iter_mut().for_each(|v| *v = c + (*v - c) * factor);
    out
}
