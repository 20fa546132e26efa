use nalgebra::{Matrix3, UnitQuaternion, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::SyntheticScene;
use crate::correspond::DescriptorMap;
use crate::error::{Error, Result};
use crate::geom::TriangleBvh;
use crate::maskops::WHITE;
use crate::model::{Grid, Mask, ObjectMask, RgbImage, RigidTransform, TexturedMesh, Vec3};
use crate::raster::{render_object_view, RenderedView};

pub const ORACLE_STAGES: [&str; 6] = ["describe", "segment", "inpaint", "image_to_3d", "descriptors", "pose"];

/// Angular frequencies of the canonical-coordinate embedding, per unit of bounding radius.
const EMBED_FREQUENCIES: [f64; 4] = [
    std::f64::consts::FRAC_PI_2,
    std::f64::consts::PI,
    2.0 * std::f64::consts::PI,
    4.0 * std::f64::consts::PI,
];
pub const EMBED_DIM: usize = 3 * 2 * EMBED_FREQUENCIES.len();

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub seed: u64,
    /// Bounds of the log-uniform image-to-3D scale.
    pub scale_range: [f64; 2],
    /// Half-width of the uniform image-to-3D translation, meters.
    pub translation_range: f64,
    /// Standard deviation of the pose-oracle rotation noise, degrees.
    pub pose_noise_rotation_deg: f64,
    /// Standard deviation of the pose-oracle translation noise per axis, meters.
    pub pose_noise_translation: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            seed: 0,
            scale_range: [0.5, 2.0],
            translation_range: 0.1,
            pose_noise_rotation_deg: 0.0,
            pose_noise_translation: 0.0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config(format!("bad oracle scale range [{lo}, {hi}]")));
        }
        if !(self.translation_range >= 0.0 && self.pose_noise_rotation_deg >= 0.0 && self.pose_noise_translation >= 0.0)
        {
            return Err(Error::Config("oracle ranges and noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// `x -> scale * R x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub rotation: Matrix3<f64>,
    pub scale: f64,
    pub translation: Vec3,
}

impl Similarity {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p * self.scale + self.translation
    }

    pub fn invert(&self, q: &Vec3) -> Vec3 {
        self.rotation.transpose() * (q - self.translation) / self.scale
    }

    pub fn apply_mesh(&self, mesh: &TexturedMesh) -> TexturedMesh {
        let mut out = mesh.clone();
        out.vertices.iter_mut().for_each(|v| *v = self.apply(v));
        out
    }
}

/// Ground-truth answers for every neural stage of one scene.
pub struct Oracle<'a> {
    scene: &'a SyntheticScene,
    ids: Grid<u16>,
    cfg: OracleConfig,
    /// Objects posed in the camera frame.
    world: TriangleBvh,
    camera_poses: Vec<RigidTransform>,
    /// Canonical centroid and bounding radius per object.
    frames: Vec<(Vec3, f64)>,
}

impl<'a> Oracle<'a> {
    /// `ids` is the scene's instance-id map; rendered afresh when absent.
    pub fn new(scene: &'a SyntheticScene, ids: Option<Grid<u16>>, cfg: OracleConfig) -> Result<Self> {
        cfg.validate()?;
        let ids = ids.unwrap_or_else(|| scene.render().instance_ids);
        if ids.width() != scene.intrinsics.width as usize || ids.height() != scene.intrinsics.height as usize {
            return Err(Error::DimensionMismatch("id map does not match the scene camera".into()));
        }
        let camera_poses = scene.camera_poses();
        let world = TriangleBvh::from_meshes(scene.objects.iter().zip(&camera_poses).map(|(o, p)| (&o.mesh, Some(p))));
        let frames = scene
            .objects
            .iter()
            .map(|o| (o.mesh.centroid(), o.mesh.bounding_radius()))
            .collect();
        Ok(Oracle {
            scene,
            ids,
            cfg,
            world,
            camera_poses,
            frames,
        })
    }

    fn visible(&self, i: usize) -> bool {
        let id = i as u16 + 1;
        self.ids.data().contains(&id)
    }

    /// Labels of all visible objects.
    pub fn describe(&self) -> Vec<String> {
        (0..self.scene.objects.len())
            .filter(|&i| self.visible(i))
            .map(|i| self.scene.objects[i].label.clone())
            .collect()
    }

    /// Visible-pixel masks of the objects named in `labels`, confidence 1.
    pub fn segment(&self, labels: &[String]) -> Result<Vec<ObjectMask>> {
        (0..self.scene.objects.len())
            .filter(|&i| self.visible(i) && labels.contains(&self.scene.objects[i].label))
            .map(|i| {
                let id = i as u16 + 1;
                ObjectMask::new(self.ids.map(|&v| v == id), 1.0, self.scene.objects[i].label.clone())
            })
            .collect()
    }

    /// Scene object covering most of the mask.
    pub fn identify(&self, mask: &Mask) -> Result<usize> {
        if !mask.same_shape(&self.ids) {
            return Err(Error::DimensionMismatch("mask does not match the scene camera".into()));
        }
        let mut votes = vec![0usize; self.scene.objects.len()];
        for (m, &id) in mask.data().iter().zip(self.ids.data()) {
            if *m && id >= 1 && (id as usize) <= votes.len() {
                votes[id as usize - 1] += 1;
            }
        }
        let (best, n) = votes
            .iter()
            .enumerate()
            .fold((0, 0), |acc, (i, &n)| if n > acc.1 { (i, n) } else { acc });
        if n == 0 {
            return Err(Error::Stage("mask covers no scene object".into()));
        }
        Ok(best)
    }

    /// The object rendered alone, on white: a perfect completion.
    pub fn inpaint(&self, mask: &Mask) -> Result<RgbImage> {
        let i = self.identify(mask)?;
        let lone = self.scene.render_lone(i);
        let id = i as u16 + 1;
        Ok(Grid::from_fn(lone.color.width(), lone.color.height(), |x, y| {
            if *lone.instance_ids.get(x, y) == id {
                *lone.color.get(x, y)
            } else {
                WHITE
            }
        }))
    }

    /// Seeded random similarity that the image-to-3D oracle applies to object `i`.
    pub fn similarity(&self, i: usize) -> Similarity {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ self.scene.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rng.set_stream(2 * i as u64);
        let q: Vector4<f64> = Vector4::from_fn(|_, _| StandardNormal.sample(&mut rng));
        let rotation = UnitQuaternion::from_quaternion(nalgebra::Quaternion::from_vector(q))
            .to_rotation_matrix()
            .into_inner();
        let [lo, hi] = self.cfg.scale_range;
        let scale = if hi > lo {
            rng.random_range(lo.ln()..=hi.ln()).exp()
        } else {
            lo
        };
        let t = self.cfg.translation_range;
        let translation = if t > 0.0 {
            Vec3::from_fn(|_, _| rng.random_range(-t..=t))
        } else {
            Vec3::zeros()
        };
        Similarity {
            rotation,
            scale,
            translation,
        }
    }

    /// The object's canonical mesh under its similarity.
    pub fn image_to_3d(&self, mask: &Mask) -> Result<TexturedMesh> {
        let i = self.identify(mask)?;
        Ok(self.similarity(i).apply_mesh(&self.scene.objects[i].mesh))
    }

    /// Direction from the image-to-3D mesh centroid toward the camera that
    /// observed the object, in the mesh frame: the view the generated mesh
    /// should be rendered from.
    pub fn viewpoint(&self, mask: &Mask) -> Result<Vec3> {
        let i = self.identify(mask)?;
        let eye = self.camera_poses[i].inverse().apply_point(&Vec3::zeros());
        Ok((self.similarity(i).rotation * (eye - self.frames[i].0)).normalize())
    }

    fn embed(&self, i: usize, canonical: &Vec3) -> [f32; EMBED_DIM] {
        let (c, r) = self.frames[i];
        let q = (canonical - c) / r;
        let mut out = [0f32; EMBED_DIM];
        let mut k = 0;
        for w in EMBED_FREQUENCIES {
            for a in 0..3 {
                out[k] = (w * q[a]).sin() as f32;
                out[k + 1] = (w * q[a]).cos() as f32;
                k += 2;
            }
        }
        out
    }

    fn grid(
        &self,
        region: &Mask,
        stride: usize,
        mut value: impl FnMut(usize, usize) -> Option<[f32; EMBED_DIM]>,
    ) -> Result<DescriptorMap> {
        if stride == 0 {
            return Err(Error::Precondition("descriptor stride must be positive".into()));
        }
        let Some((x0, y0, x1, y1)) = region.bounding_box() else {
            return Ok(DescriptorMap::empty(EMBED_DIM));
        };
        let (w, h) = ((x1 - x0) / stride + 1, (y1 - y0) / stride + 1);
        let mut data = vec![0f32; w * h * EMBED_DIM];
        for row in 0..h {
            for col in 0..w {
                let (x, y) = (x0 + col * stride, y0 + row * stride);
                if !*region.get(x, y) {
                    continue;
                }
                if let Some(v) = value(x, y) {
                    let at = (row * w + col) * EMBED_DIM;
                    data[at..at + EMBED_DIM].copy_from_slice(&v);
                }
            }
        }
        DescriptorMap::from_raw(w, h, EMBED_DIM, data, stride, (x0, y0))
    }

    /// Canonical-coordinate embeddings of the observed object pixels, from the
    /// noise-free scene geometry.
    pub fn observed_descriptors(&self, mask: &Mask, stride: usize) -> Result<DescriptorMap> {
        let i = self.identify(mask)?;
        let to_canonical = self.camera_poses[i].inverse();
        let k = self.scene.intrinsics;
        self.grid(mask, stride, |x, y| {
            let dir = k.ray_direction(x as f64, y as f64);
            let hit = self.world.nearest_hit(&Vec3::zeros(), &dir, 0.0, f64::INFINITY)?;
            (hit.tri.owner as usize == i).then(|| self.embed(i, &to_canonical.apply_point(&(dir * hit.t))))
        })
    }

    /// Canonical-coordinate embeddings of the canonical render of `mesh`, the
    /// image-to-3D output for the object under `mask`.
    pub fn rendered_descriptors(&self, mask: &Mask, mesh: &TexturedMesh, stride: usize) -> Result<DescriptorMap> {
        let view = render_object_view(mesh)?;
        self.rendered_descriptors_for(mask, &view, stride)
    }

    pub fn rendered_descriptors_for(&self, mask: &Mask, view: &RenderedView, stride: usize) -> Result<DescriptorMap> {
        let i = self.identify(mask)?;
        let sim = self.similarity(i);
        let to_mesh = view.camera_pose.inverse();
        self.grid(&view.foreground_mask(), stride, |x, y| {
            let d = *view.depth.get(x, y) as f64;
            let p = to_mesh.apply_point(&view.intrinsics.backproject(x as f64, y as f64, d));
            Some(self.embed(i, &sim.invert(&p)))
        })
    }

    /// Pose of a rescaled image-to-3D mesh in the camera frame, with the
    /// configured noise. Exact when the mesh was rescaled about its centroid by
    /// the inverse of the similarity scale.
    pub fn pose(&self, mask: &Mask, scaled_mesh: &TexturedMesh) -> Result<RigidTransform> {
        let i = self.identify(mask)?;
        let sim = self.similarity(i);
        let c = scaled_mesh.centroid();
        let rt = sim.rotation.transpose();
        let to_canonical = RigidTransform::from_nearly_orthonormal(rt, rt * (c - sim.translation) / sim.scale - rt * c);
        let exact = self.camera_poses[i].compose(&to_canonical);

        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ self.scene.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rng.set_stream(2 * i as u64 + 1);
        let sr = self.cfg.pose_noise_rotation_deg.to_radians();
        let st = self.cfg.pose_noise_translation;
        if sr == 0.0 && st == 0.0 {
            return Ok(exact);
        }
        let axis = Vec3::from_fn(|_, _| StandardNormal.sample(&mut rng)).normalize();
        let angle = Normal::new(0.0, sr).expect("finite").sample(&mut rng);
        let shift = Vec3::from_fn(|_, _| Normal::new(0.0, st).expect("finite").sample(&mut rng));
        // perturb about the object's centroid in the camera frame
        let centre = exact.apply_point(&c);
        let spin = RigidTransform::from_axis_angle(&axis, angle, Vec3::zeros());
        let noise = RigidTransform::from_axis_angle(&axis, angle, centre + shift - spin.apply_point(&centre));
        Ok(noise.compose(&exact))
    }
}
