use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{sample_filtered, Grasp, GraspSet, GripperModel, Plane};
use crate::error::{Error, Result};
use crate::geom::bvh::obb_corners;
use crate::geom::TriangleBvh;
use crate::metrics::voxel_overlaps;
use crate::model::{RigidTransform, SceneReconstruction, TexturedMesh, Vec3};

/// Grid resolution used to match reconstructed objects to ground truth.
pub const MATCH_RESOLUTION: usize = 96;

/// The two fingers and the palm as oriented boxes `(frame, half extents)`.
pub fn gripper_boxes(grasp: &Grasp, gripper: &GripperModel) -> [(RigidTransform, Vec3); 3] {
    let (a, d) = (grasp.axis, grasp.approach);
    let b = a.cross(&d);
    let rot = Matrix3::from_columns(&[a, b, d]);
    let open = grasp.width + gripper.preclose_margin;
    let t = gripper.finger_thickness;
    let finger_half = Vec3::new(t / 2.0, gripper.finger_height / 2.0, gripper.finger_depth / 2.0);
    let along = gripper.tip_offset - gripper.finger_depth / 2.0;
    let finger = |side: f64| {
        let c = grasp.center + a * (side * (open / 2.0 + t / 2.0)) + d * along;
        (RigidTransform::from_nearly_orthonormal(rot, c), finger_half)
    };
    let palm_half = Vec3::new(
        gripper.palm[0].max(open + 2.0 * t) / 2.0,
        gripper.palm[1] / 2.0,
        gripper.palm[2] / 2.0,
    );
    let palm_c = grasp.center + d * (gripper.tip_offset - gripper.finger_depth - gripper.palm[2] / 2.0);
    [
        finger(-1.0),
        finger(1.0),
        (RigidTransform::from_nearly_orthonormal(rot, palm_c), palm_half),
    ]
}

/// Posed meshes plus an optional support half-space, ready for gripper queries.
pub struct CollisionWorld {
    bvh: TriangleBvh,
    bounds: Vec<(Vec3, Vec3)>,
    plane: Option<Plane>,
}

impl CollisionWorld {
    pub fn new(meshes: &[TexturedMesh], plane: Option<Plane>) -> Self {
        CollisionWorld {
            bvh: TriangleBvh::from_meshes(meshes.iter().map(|m| (m, None))),
            bounds: meshes
                .iter()
                .map(|m| m.bounds().unwrap_or((Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY))))
                .collect(),
            plane,
        }
    }

    pub fn from_scene(scene: &SceneReconstruction, plane: Option<Plane>) -> Self {
        Self::new(&scene.posed_meshes(), plane)
    }

    pub fn plane(&self) -> Option<&Plane> {
        self.plane.as_ref()
    }

    /// True iff any gripper box touches a mesh other than `exclude`, lies
    /// inside one, or reaches below the support plane.
    pub fn collides(&self, grasp: &Grasp, gripper: &GripperModel, exclude: Option<usize>) -> bool {
        let skip = exclude.map(|e| e as u32);
        gripper_boxes(grasp, gripper).iter().any(|(frame, half)| {
            if let Some(plane) = &self.plane {
                if obb_corners(frame, half).iter().any(|c| plane.signed_distance(c) < 0.0) {
                    return true;
                }
            }
            if self.bvh.intersects_obb(frame, half, skip) {
                return true;
            }
            // a box wholly inside a solid touches no triangle
            let c = frame.translation();
            self.bounds.iter().enumerate().any(|(owner, (lo, hi))| {
                Some(owner) != exclude
                    && c.iter().zip(lo.iter().zip(hi.iter())).all(|(x, (l, h))| l <= x && x <= h)
                    && self.bvh.contains(c, Some(owner as u32))
            })
        })
    }
}

/// Scene-level form of [`CollisionWorld::collides`] with no support plane.
pub fn gripper_collides(
    grasp: &Grasp,
    gripper: &GripperModel,
    scene: &SceneReconstruction,
    exclude: Option<usize>,
) -> Result<bool> {
    grasp.check(gripper)?;
    Ok(CollisionWorld::from_scene(scene, None).collides(grasp, gripper, exclude))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcObject {
    pub recon_index: usize,
    pub prompt: String,
    pub matched_truth: Option<usize>,
    /// Grasps collision-free in the reconstruction.
    pub sampled: usize,
    /// Of those, grasps colliding with the ground truth.
    pub colliding: usize,
    pub attempts: usize,
    pub grasps: Vec<Grasp>,
}

impl GcObject {
    pub fn rate(&self) -> Option<f64> {
        (self.sampled > 0).then(|| self.colliding as f64 / self.sampled as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcReport {
    /// Mean per-object collision rate; `None` when no object yielded a grasp.
    pub gc: Option<f64>,
    pub g: usize,
    pub objects: Vec<GcObject>,
    /// Objects without any collision-free grasp, left out of the mean.
    pub skipped: usize,
}

/// Per-object seed so objects sample independently of each other.
fn object_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Recon-to-truth matching by maximum voxel overlap; zero overlap means unmatched.
fn match_objects(recon: &[TexturedMesh], truth: &[TexturedMesh]) -> Result<Vec<Option<usize>>> {
    if truth.is_empty() {
        return Ok(vec![None; recon.len()]);
    }
    let overlaps = voxel_overlaps(truth, recon, MATCH_RESOLUTION)?;
    Ok((0..recon.len())
        .map(|r| {
            let (best, count) = (0..truth.len())
                .map(|t| (t, overlaps[t][r]))
                .fold((0, 0), |acc, x| if x.1 > acc.1 { x } else { acc });
            (count > 0).then_some(best)
        })
        .collect())
}

/// Grasp-collision report: for every reconstructed object, sample up to `g`
/// grasps that are collision-free in the reconstruction and count those that
/// collide with the ground truth (its matched truth object excluded).
pub fn grasp_collision_report(
    recon: &SceneReconstruction,
    truth: &SceneReconstruction,
    gripper: &GripperModel,
    g: usize,
    seed: u64,
    plane: Option<Plane>,
) -> Result<GcReport> {
    gripper.validate()?;
    if g == 0 {
        return Err(Error::Precondition("grasp count must be at least 1".into()));
    }
    let recon_meshes = recon.posed_meshes();
    let truth_meshes = truth.posed_meshes();
    let matches = match_objects(&recon_meshes, &truth_meshes)?;
    let recon_world = CollisionWorld::new(&recon_meshes, plane);
    let truth_world = CollisionWorld::new(&truth_meshes, plane);
    let up = plane.map(|p| p.normal);
    let objects: Vec<GcObject> = recon_meshes
        .par_iter()
        .enumerate()
        .map(|(i, mesh)| {
            let set = sample_filtered(mesh, gripper, g, object_seed(seed, i), up.as_ref(), |grasp| {
                !recon_world.collides(grasp, gripper, None)
            })?;
            let colliding = set
                .grasps
                .iter()
                .filter(|grasp| truth_world.collides(grasp, gripper, matches[i]))
                .count();
            Ok(GcObject {
                recon_index: i,
                prompt: recon.objects[i].prompt.clone(),
                matched_truth: matches[i],
                sampled: set.grasps.len(),
                colliding,
                attempts: set.attempts,
                grasps: set.grasps,
            })
        })
        .collect::<Result<_>>()?;
    let rates: Vec<f64> = objects.iter().filter_map(GcObject::rate).collect();
    Ok(GcReport {
        gc: (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64),
        g,
        skipped: objects.len() - rates.len(),
        objects,
    })
}

/// Per object, up to `count` grasps free of collision with the whole scene
/// and the optional support plane, in the scene frame.
pub fn scene_grasps(
    scene: &SceneReconstruction,
    gripper: &GripperModel,
    count: usize,
    seed: u64,
    plane: Option<Plane>,
) -> Result<Vec<GraspSet>> {
    gripper.validate()?;
    let meshes = scene.posed_meshes();
    let world = CollisionWorld::new(&meshes, plane);
    let up = plane.map(|p| p.normal);
    meshes
        .par_iter()
        .enumerate()
        .map(|(i, mesh)| {
            sample_filtered(mesh, gripper, count, object_seed(seed, i), up.as_ref(), |g| {
                !world.collides(g, gripper, None)
            })
        })
        .collect()
}

/// The GC ratio; undefined (an error carrying the per-object report) when no
/// object yields a collision-free grasp.
pub fn grasp_collision_metric(
    recon: &SceneReconstruction,
    truth: &SceneReconstruction,
    gripper: &GripperModel,
    g: usize,
    seed: u64,
    plane: Option<Plane>,
) -> Result<f64> {
    let report = grasp_collision_report(recon, truth, gripper, g, seed, plane)?;
    report.gc.ok_or_else(|| {
        let detail: Vec<String> = report
            .objects
            .iter()
            .map(|o| format!("{}:{} sampled/{} attempts", o.recon_index, o.sampled, o.attempts))
            .collect();
        Error::UndefinedMetric(format!("no object yields a collision-free grasp [{}]", detail.join(", ")))
    })
}
