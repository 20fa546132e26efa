//! Antipodal parallel-jaw grasps, gripper collision checks and the
//! grasp-collision rate of a reconstruction against ground truth.

mod collision;
mod plane;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::TriangleBvh;
use crate::model::{TexturedMesh, Vec3};

pub use collision::{
    grasp_collision_metric, grasp_collision_report, gripper_boxes, gripper_collides, scene_grasps, CollisionWorld,
    GcObject, GcReport,
};
pub use plane::{fit_plane_ransac, Plane};

/// Grasps per object for the collision metric.
pub const DEFAULT_GRASPS: usize = 40;
/// Attempts allowed per requested grasp.
pub const ATTEMPTS_PER_GRASP: usize = 100;
/// Candidate approach directions examined per grasp.
const APPROACH_CANDIDATES: usize = 8;
/// Angular slack on the friction cone, radians.
const CONE_SLACK: f64 = 1e-6;
const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GripperModel {
    pub max_width: f64,
    /// Finger length along the approach direction.
    pub finger_depth: f64,
    /// Finger extent along the closing axis.
    pub finger_thickness: f64,
    /// Finger extent along the binormal.
    pub finger_height: f64,
    /// Palm extents along (closing axis, binormal, approach).
    pub palm: [f64; 3],
    /// How far the finger tips reach past the grasp center.
    pub tip_offset: f64,
    /// Extra opening beyond the grasp width while approaching.
    pub preclose_margin: f64,
    pub friction_coefficient: f64,
}

impl Default for GripperModel {
    fn default() -> Self {
        GripperModel {
            max_width: 0.08,
            finger_depth: 0.04,
            finger_thickness: 0.01,
            finger_height: 0.02,
            palm: [0.11, 0.02, 0.02],
            tip_offset: 0.005,
            preclose_margin: 0.01,
            friction_coefficient: 0.5,
        }
    }
}

impl GripperModel {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            self.max_width,
            self.finger_depth,
            self.finger_thickness,
            self.finger_height,
            self.palm[0],
            self.palm[1],
            self.palm[2],
        ];
        if extents.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(Error::Config("gripper extents must be positive".into()));
        }
        if !(self.friction_coefficient >= 0.0) || !(self.tip_offset >= 0.0) || !(self.preclose_margin >= 0.0) {
            return Err(Error::Config("gripper friction and offsets must be non-negative".into()));
        }
        Ok(())
    }

    pub fn cone_half_angle(&self) -> f64 {
        self.friction_coefficient.atan()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grasp {
    /// Midpoint between the contacts.
    pub center: Vec3,
    /// Unit closing direction, from the first contact to the second.
    pub axis: Vec3,
    /// Unit direction the gripper moves in along while approaching.
    pub approach: Vec3,
    pub width: f64,
    pub quality: f64,
}

impl Grasp {
    pub fn contacts(&self) -> (Vec3, Vec3) {
        let h = self.axis * (self.width / 2.0);
        (self.center - h, self.center + h)
    }

    pub fn binormal(&self) -> Vec3 {
        self.axis.cross(&self.approach)
    }

    pub fn check(&self, gripper: &GripperModel) -> Result<()> {
        let ok = (self.axis.norm() - 1.0).abs() <= 1e-9
            && (self.approach.norm() - 1.0).abs() <= 1e-9
            && self.axis.dot(&self.approach).abs() <= 1e-9
            && self.width > 0.0
            && self.width <= gripper.max_width
            && (0.0..=1.0).contains(&self.quality);
        if ok {
            Ok(())
        } else {
            Err(Error::Precondition(format!("invalid grasp {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraspSet {
    pub grasps: Vec<Grasp>,
    pub attempts: usize,
    /// The attempt budget ran out before `count` grasps were accepted.
    pub exhausted: bool,
}

/// Area-weighted face sampler plus ray-casting structure for one mesh.
struct Sampler<'a> {
    mesh: &'a TexturedMesh,
    bvh: TriangleBvh,
    cumulative: Vec<f64>,
    eps: f64,
}

impl<'a> Sampler<'a> {
    fn new(mesh: &'a TexturedMesh) -> Self {
        let mut total = 0.0;
        let cumulative = (0..mesh.faces.len())
            .map(|f| {
                total += mesh.face_area(f);
                total
            })
            .collect();
        Sampler {
            mesh,
            bvh: TriangleBvh::from_mesh(mesh),
            cumulative,
            eps: 1e-7 * mesh.bounding_radius().max(1e-9),
        }
    }

    /// One attempt: a contact pair from a random surface point, or `None`.
    fn attempt(&self, gripper: &GripperModel, up: Option<&Vec3>, rng: &mut ChaCha8Rng) -> Option<Grasp> {
        let total = *self.cumulative.last()?;
        let target = rng.random::<f64>() * total;
        let face = self.cumulative.partition_point(|&c| c <= target).min(self.cumulative.len() - 1);
        let [a, b, c] = self.mesh.triangle(face);
        let (r1, r2): (f64, f64) = (rng.random(), rng.random());
        let s = r1.sqrt();
        let p1 = a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2);
        let n1 = self.mesh.face_normal(face);
        let phase: f64 = rng.random::<f64>() * std::f64::consts::TAU;

        let dir = -n1;
        let mut hits = self.bvh.all_hits(&p1, &dir, self.eps);
        hits.sort_by(|x, y| x.t.total_cmp(&y.t).then(x.slot.cmp(&y.slot)));
        let cone = gripper.cone_half_angle() + CONE_SLACK;
        for h in hits {
            let n2 = self.bvh.normal(h.slot);
            if n2.dot(&dir) <= 0.0 {
                continue; // entering again
            }
            let p2 = p1 + dir * h.t;
            let width = h.t;
            if width > gripper.max_width {
                break;
            }
            let axis = (p2 - p1) / width;
            let a1 = (-n1).dot(&axis).clamp(-1.0, 1.0).acos();
            let a2 = n2.dot(&axis).clamp(-1.0, 1.0).acos();
            if a1 > cone || a2 > cone {
                continue;
            }
            let quality = if gripper.friction_coefficient > 0.0 {
                (1.0 - a1.max(a2) / gripper.cone_half_angle()).clamp(0.0, 1.0)
            } else {
                1.0
            };
            return Some(Grasp {
                center: (p1 + p2) / 2.0,
                axis,
                approach: choose_approach(&axis, up, phase),
                width,
                quality,
            });
        }
        None
    }
}

/// Orthonormal pair spanning the plane perpendicular to `axis`.
fn perpendicular_basis(axis: &Vec3) -> (Vec3, Vec3) {
    let helper = if axis.x.abs() < 0.6 { Vec3::x() } else { Vec3::y() };
    let u = axis.cross(&helper).normalize();
    let v = axis.cross(&u);
    (u, v)
}

/// Approach in the plane perpendicular to the axis; with a support plane,
/// the most downward of evenly spaced candidates so the gripper comes from above.
fn choose_approach(axis: &Vec3, up: Option<&Vec3>, phase: f64) -> Vec3 {
    let (u, v) = perpendicular_basis(axis);
    let at = |k: usize| {
        let ang = phase + std::f64::consts::TAU * k as f64 / APPROACH_CANDIDATES as f64;
        u * ang.cos() + v * ang.sin()
    };
    match up {
        None => at(0),
        Some(up) => (0..APPROACH_CANDIDATES)
            .map(at)
            .min_by(|a, b| a.dot(up).total_cmp(&b.dot(up)))
            .expect("candidates"),
    }
}

fn attempt_rng(seed: u64, attempt: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(attempt as u64);
    rng
}

/// Draw attempts in index order until `count` grasps pass `keep` or the
/// budget is spent. Each attempt has its own random stream, so the result
/// does not depend on scheduling.
pub(crate) fn sample_filtered(
    mesh: &TexturedMesh,
    gripper: &GripperModel,
    count: usize,
    seed: u64,
    up: Option<&Vec3>,
    keep: impl Fn(&Grasp) -> bool + Sync,
) -> Result<GraspSet> {
    gripper.validate()?;
    if mesh.is_empty() {
        return Err(Error::Precondition("cannot grasp an empty mesh".into()));
    }
    if count == 0 {
        return Err(Error::Precondition("grasp count must be at least 1".into()));
    }
    let sampler = Sampler::new(mesh);
    let budget = ATTEMPTS_PER_GRASP * count;
    let mut grasps = Vec::with_capacity(count);
    let mut next = 0;
    while next < budget && grasps.len() < count {
        let end = (next + CHUNK).min(budget);
        let found: Vec<Option<Grasp>> = (next..end)
            .into_par_iter()
            .map(|k| {
                let mut rng = attempt_rng(seed, k);
                sampler.attempt(gripper, up, &mut rng).filter(|g| keep(g))
            })
            .collect();
        for (k, g) in (next..end).zip(found) {
            if let Some(g) = g {
                grasps.push(g);
                if grasps.len() == count {
                    next = k + 1;
                    break;
                }
            }
            next = k + 1;
        }
    }
    Ok(GraspSet {
        exhausted: grasps.len() < count,
        grasps,
        attempts: next,
    })
}

/// Antipodal grasps on a lone mesh; `up` (the support-plane normal) biases approaches from above.
pub fn sample_antipodal(
    mesh: &TexturedMesh,
    gripper: &GripperModel,
    count: usize,
    seed: u64,
    up: Option<&Vec3>,
) -> Result<GraspSet> {
    sample_filtered(mesh, gripper, count, seed, up, |_| true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::shapes;
    use crate::geom::tri::ray_triangle;

    /// Nearest hit of a ray over every triangle, with that triangle's normal.
    fn brute_hit(mesh: &TexturedMesh, o: &Vec3, d: &Vec3) -> Option<(f64, Vec3)> {
        (0..mesh.faces.len())
            .filter_map(|f| ray_triangle(o, d, &mesh.triangle(f), 0.0).map(|h| (h.0, mesh.face_normal(f))))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    /// Independent contact check: approach each contact from just outside along the
    /// closing axis, find the first surface hit by brute force and test its cone.
    fn recheck(mesh: &TexturedMesh, g: &Grasp, gripper: &GripperModel) -> bool {
        let (p1, p2) = g.contacts();
        let delta = 1e-5;
        let cone = gripper.friction_coefficient.atan() + 1e-6;
        let Some((t1, n1)) = brute_hit(mesh, &(p1 - g.axis * delta), &g.axis) else { return false };
        let Some((t2, n2)) = brute_hit(mesh, &(p2 + g.axis * delta), &-g.axis) else { return false };
        (t1 - delta).abs() < 1e-7
            && (t2 - delta).abs() < 1e-7
            && (-n1).dot(&g.axis).clamp(-1.0, 1.0).acos() <= cone
            && n2.dot(&g.axis).clamp(-1.0, 1.0).acos() <= cone
    }

    #[test]
    fn sphere_grasps_are_diametral() {
        let sphere = shapes::icosphere(0.03, 3);
        assert!(sphere.faces.len() <= 1280);
        let gripper = GripperModel::default();
        let set = sample_antipodal(&sphere, &gripper, 40, 1, None).unwrap();
        assert_eq!(set.grasps.len(), 40);
        for g in &set.grasps {
            g.check(&gripper).unwrap();
            // facets sit inside the ideal sphere by less than the chord sag
            assert!((g.width - 0.06).abs() < 1e-3, "{}", g.width);
            // contact angles stay within the tilt between neighbouring facets (< 0.2 rad here)
            assert!(g.quality > 1.0 - 0.2 / gripper.cone_half_angle(), "{}", g.quality);
            assert!(recheck(&sphere, g, &gripper));
        }
    }

    #[test]
    fn thin_box_is_grasped_across_its_narrow_side() {
        let slab = shapes::box_mesh(Vec3::new(0.05, 0.12, 0.2), 2);
        let gripper = GripperModel::default();
        let set = sample_antipodal(&slab, &gripper, 30, 2, None).unwrap();
        assert_eq!(set.grasps.len(), 30);
        for g in &set.grasps {
            assert!(g.axis.x.abs() > 1.0 - 1e-9, "{:?}", g.axis);
            assert!((g.width - 0.05).abs() < 1e-9);
            assert!(recheck(&slab, g, &gripper));
        }
    }

    #[test]
    fn frictionless_grasps_need_exactly_opposed_normals() {
        let gripper = GripperModel {
            friction_coefficient: 0.0,
            ..GripperModel::default()
        };
        let sphere = shapes::icosphere(0.03, 2);
        let set = sample_antipodal(&sphere, &gripper, 10, 3, None).unwrap();
        assert_eq!(set.grasps.len(), 10);
        let cube = shapes::box_mesh(Vec3::repeat(0.05), 3);
        let set = sample_antipodal(&cube, &gripper, 20, 4, None).unwrap();
        for g in &set.grasps {
            assert!(g.axis.iter().any(|c| (c.abs() - 1.0).abs() < 1e-9));
            assert_eq!(g.quality, 1.0);
        }
    }

    #[test]
    fn wide_objects_exhaust_the_budget() {
        let big = shapes::box_mesh(Vec3::repeat(0.3), 1);
        let set = sample_antipodal(&big, &GripperModel::default(), 2, 5, None).unwrap();
        assert!(set.grasps.is_empty());
        assert!(set.exhausted);
        assert_eq!(set.attempts, 200);
    }

    #[test]
    fn sampling_is_deterministic_and_rechecks() {
        let mesh = shapes::l_block(0.07, 0.04, 0.03, 0.03, 0.06, 0.02);
        assert!(mesh.faces.len() <= 500, "{}", mesh.faces.len());
        let gripper = GripperModel::default();
        let up = Vec3::z();
        let a = sample_antipodal(&mesh, &gripper, 40, 9, Some(&up)).unwrap();
        let b = sample_antipodal(&mesh, &gripper, 40, 9, Some(&up)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.grasps.len(), 40);
        for g in &a.grasps {
            g.check(&gripper).unwrap();
            assert!(recheck(&mesh, g, &gripper), "{g:?}");
            // the chosen approach is the most downward candidate, so never upward
            assert!(g.approach.dot(&up) <= 1e-9);
        }
    }

    #[test]
    fn bad_arguments() {
        let sphere = shapes::icosphere(0.03, 1);
        assert!(sample_antipodal(&sphere, &GripperModel::default(), 0, 1, None).is_err());
        let broken = GripperModel {
            finger_depth: 0.0,
            ..GripperModel::default()
        };
        assert!(sample_antipodal(&sphere, &broken, 1, 1, None).is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn grasps_on_random_boxes_are_valid(
            sx in 0.01f64..0.1, sy in 0.01f64..0.1, sz in 0.01f64..0.1, seed in 0u64..1000,
        ) {
            let mesh = shapes::box_mesh(Vec3::new(sx, sy, sz), 2);
            let gripper = GripperModel::default();
            let set = sample_antipodal(&mesh, &gripper, 10, seed, Some(&Vec3::z())).unwrap();
            proptest::prop_assert!(!set.grasps.is_empty());
            for g in &set.grasps {
                proptest::prop_assert!(g.check(&gripper).is_ok());
                proptest::prop_assert!(recheck(&mesh, g, &gripper));
            }
        }
    }
}
