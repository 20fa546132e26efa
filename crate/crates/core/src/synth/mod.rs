//! Synthetic tabletop scenes with ground truth, their rendered RGB-D input,
//! scene bundles on disk, and oracle outputs for every neural stage.

mod oracle;

use std::f64::consts::TAU;
use std::path::Path;

use noise::{NoiseFn, Perlin};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::shapes;
use crate::grasp::Plane;
use crate::model::io::{self, COLOR_FILE, DEPTH_FILE, INTRINSICS_FILE};
use crate::model::{
    CameraIntrinsics, Grid, Rgb, RgbdFrame, RigidTransform, SceneObject, SceneReconstruction, TexturedMesh,
    Vec3,
};
use crate::raster::{look_at, render, RenderedView, IDS_FILE};

pub use oracle::{Oracle, OracleConfig, Similarity, ORACLE_STAGES};

pub const SCENE_FILE: &str = "scene.json";
pub const POSES_FILE: &str = "gt_poses.json";
pub const MESH_DIR: &str = "meshes";
pub const SCENE_VERSION: u32 = 1;

/// Clearance kept between bounding circles of neighboring objects.
const PLACEMENT_GAP: f64 = 0.002;
const PLACEMENT_TRIES: usize = 200;
const LAYOUT_TRIES: usize = 40;
/// Target edge length of generated meshes.
const MESH_SPACING: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Box,
    Cylinder,
    Sphere,
    Capsule,
    LBlock,
    Mug,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::Box,
        ShapeKind::Cylinder,
        ShapeKind::Sphere,
        ShapeKind::Capsule,
        ShapeKind::LBlock,
        ShapeKind::Mug,
    ];

    /// Generic name used in labels.
    pub fn noun(self) -> &'static str {
        match self {
            ShapeKind::Box => "box",
            ShapeKind::Cylinder => "can",
            ShapeKind::Sphere => "ball",
            ShapeKind::Capsule => "capsule",
            ShapeKind::LBlock => "block",
            ShapeKind::Mug => "mug",
        }
    }

    /// A random instance, base on `z = 0` and centered on the `z` axis.
    fn build(self, rng: &mut ChaCha8Rng) -> TexturedMesh {
        let mesh = match self {
            ShapeKind::Box => {
                let size = Vec3::new(
                    rng.random_range(0.03..0.07),
                    rng.random_range(0.03..0.07),
                    rng.random_range(0.03..0.08),
                );
                shapes::box_with_spacing(size, MESH_SPACING)
            }
            ShapeKind::Cylinder => shapes::cylinder(
                rng.random_range(0.02..0.035),
                rng.random_range(0.05..0.11),
                32,
                MESH_SPACING,
            ),
            ShapeKind::Sphere => shapes::icosphere(rng.random_range(0.025..0.038), 3),
            ShapeKind::Capsule => shapes::capsule(rng.random_range(0.015..0.028), rng.random_range(0.02..0.05), 32, 6),
            ShapeKind::LBlock => {
                let long = rng.random_range(0.06..0.09);
                let leg = rng.random_range(0.02..0.03);
                let height = rng.random_range(0.02..0.035);
                shapes::l_block(
                    long,
                    rng.random_range(0.03..0.05),
                    height,
                    leg,
                    height + rng.random_range(0.025..0.05),
                    MESH_SPACING,
                )
            }
            ShapeKind::Mug => shapes::mug(
                rng.random_range(0.03..0.038),
                rng.random_range(0.07..0.1),
                0.004,
                32,
                MESH_SPACING,
            ),
        };
        canonicalize(mesh)
    }
}

/// Center the bounding box on the `z` axis, put the base at `z = 0` and round
/// vertices to `f32` so meshes survive the PLY round trip exactly.
fn canonicalize(mut mesh: TexturedMesh) -> TexturedMesh {
    let (lo, hi) = mesh.bounds().expect("generated meshes are nonempty");
    let shift = Vec3::new(-(lo.x + hi.x) / 2.0, -(lo.y + hi.y) / 2.0, -lo.z);
    for v in &mut mesh.vertices {
        *v = (*v + shift).map(|c| c as f32 as f64);
    }
    // exact zero base after rounding
    let zmin = mesh.vertices.iter().map(|v| v.z).fold(f64::INFINITY, f64::min);
    mesh.vertices.iter_mut().for_each(|v| v.z -= zmin);
    mesh
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clutter {
    Low,
    Medium,
    High,
}

impl Clutter {
    /// Radius of the disk object centers are drawn from.
    fn placement_radius(self) -> f64 {
        match self {
            Clutter::Low => 0.22,
            Clutter::Medium => 0.15,
            Clutter::High => 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub n_objects: usize,
    pub shapes: Vec<ShapeKind>,
    pub clutter: Clutter,
    pub seed: u64,
    /// Standard deviation of additive Gaussian depth noise, meters.
    pub depth_noise: f64,
    /// Every object keeps at least this fraction of its unoccluded pixels.
    pub min_visible_fraction: f64,
    /// Plain base colors without Perlin texture.
    pub uniform_color: bool,
    pub image_size: [u32; 2],
    pub focal_length: f64,
    pub camera_distance: f64,
    pub camera_elevation_deg: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            n_objects: 5,
            shapes: ShapeKind::ALL.to_vec(),
            clutter: Clutter::Medium,
            seed: 0,
            depth_noise: 0.0,
            min_visible_fraction: 0.3,
            uniform_color: false,
            image_size: [640, 480],
            focal_length: 615.0,
            camera_distance: 0.65,
            camera_elevation_deg: 50.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_objects == 0 {
            return Err(Error::Config("n_objects must be at least 1".into()));
        }
        if self.n_objects > PALETTE.len() {
            return Err(Error::Config(format!("at most {} objects per scene", PALETTE.len())));
        }
        if self.shapes.is_empty() {
            return Err(Error::Config("shape set is empty".into()));
        }
        if !(self.depth_noise >= 0.0) || !(0.0..=1.0).contains(&self.min_visible_fraction) {
            return Err(Error::Config("depth_noise and min_visible_fraction out of range".into()));
        }
        if !(self.focal_length > 0.0 && self.camera_distance > 0.0) || self.image_size.contains(&0) {
            return Err(Error::Config("camera parameters must be positive".into()));
        }
        Ok(())
    }
}

const PALETTE: [(&str, Rgb); 8] = [
    ("red", [200, 40, 40]),
    ("green", [40, 160, 60]),
    ("blue", [40, 70, 200]),
    ("yellow", [220, 200, 40]),
    ("orange", [230, 120, 30]),
    ("purple", [130, 50, 170]),
    ("cyan", [40, 170, 180]),
    ("brown", [140, 90, 50]),
];
const TABLE_COLOR: Rgb = [150, 150, 150];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthObject {
    pub shape: ShapeKind,
    pub label: String,
    /// Canonical frame: base at `z = 0`, centered on the `z` axis.
    pub mesh: TexturedMesh,
    /// Canonical to world.
    pub pose: RigidTransform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub height: f64,
    pub extents: [f64; 2],
}

impl Table {
    pub fn mesh(&self) -> TexturedMesh {
        let mut m = shapes::quad(self.extents[0], self.extents[1]);
        m.vertices.iter_mut().for_each(|v| v.z = self.height);
        m.vertex_colors = Some(vec![TABLE_COLOR; 4]);
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub spec: SceneSpec,
    pub objects: Vec<SynthObject>,
    pub table: Table,
    /// World to camera.
    pub camera_pose: RigidTransform,
    pub intrinsics: CameraIntrinsics,
}

fn perlin_colorize(mesh: &mut TexturedMesh, base: Rgb, seed: u32) {
    let perlin = Perlin::new(seed);
    let colors = mesh
        .vertices
        .iter()
        .map(|v| {
            let p = v * 60.0;
            let n = perlin.get([p.x, p.y, p.z]) + 0.5 * perlin.get([2.0 * p.x + 17.0, 2.0 * p.y, 2.0 * p.z]);
            let k = (0.7 + 0.45 * n).clamp(0.25, 1.15);
            base.map(|c| (c as f64 * k).round().clamp(0.0, 255.0) as u8)
        })
        .collect();
    mesh.vertex_colors = Some(colors);
}

/// Bounding-circle radius about the `z` axis.
fn footprint(mesh: &TexturedMesh) -> f64 {
    mesh.vertices.iter().map(|v| v.x.hypot(v.y)).fold(0.0, f64::max)
}

fn yaw_pose(yaw: f64, x: f64, y: f64, z: f64) -> RigidTransform {
    RigidTransform::from_axis_angle(&Vec3::z(), yaw, Vec3::new(x, y, z))
}

/// Yaw and position for each mesh, dropping those that never fit.
fn place(footprints: &[f64], radius: f64, rng: &mut ChaCha8Rng) -> Vec<Option<(f64, f64, f64)>> {
    let mut placed: Vec<(f64, f64, f64)> = Vec::new();
    footprints
        .iter()
        .map(|&r| {
            for _ in 0..PLACEMENT_TRIES {
                let yaw = rng.random_range(0.0..TAU);
                let rho = radius * rng.random::<f64>().sqrt();
                let phi = rng.random_range(0.0..TAU);
                let (x, y) = (rho * phi.cos(), rho * phi.sin());
                if placed
                    .iter()
                    .all(|&(px, py, pr)| (x - px).hypot(y - py) >= r + pr + PLACEMENT_GAP)
                {
                    placed.push((x, y, r));
                    return Some((yaw, x, y));
                }
            }
            None
        })
        .collect()
}

impl SyntheticScene {
    pub fn table_id(&self) -> u16 {
        self.objects.len() as u16 + 1
    }

    /// Object poses composed with the camera: canonical to camera frame.
    pub fn camera_poses(&self) -> Vec<RigidTransform> {
        self.objects.iter().map(|o| self.camera_pose.compose(&o.pose)).collect()
    }

    /// Table top in the camera frame, normal pointing up.
    pub fn table_plane(&self) -> Plane {
        let p = self.camera_pose.apply_point(&Vec3::new(0.0, 0.0, self.table.height));
        let n = self.camera_pose.apply_vector(&Vec3::z());
        Plane::through(&p, &n).expect("unit normal")
    }

    /// Ground truth as a camera-frame reconstruction (table excluded).
    pub fn truth(&self) -> SceneReconstruction {
        let objects = self
            .objects
            .iter()
            .zip(self.camera_poses())
            .map(|(o, pose)| SceneObject {
                mesh: o.mesh.clone(),
                pose,
                prompt: o.label.clone(),
            })
            .collect();
        SceneReconstruction {
            objects,
            frame: self.intrinsics,
        }
    }

    fn render_parts(&self, objects: &[usize], with_table: bool) -> RenderedView {
        let mut parts: Vec<(TexturedMesh, RigidTransform)> = objects
            .iter()
            .map(|&i| (self.objects[i].mesh.clone(), self.objects[i].pose))
            .collect();
        if with_table {
            parts.push((self.table.mesh(), RigidTransform::identity()));
        }
        let mut view = render(&parts, &self.intrinsics, &self.camera_pose);
        // instance ids follow scene object indices, the table after them
        let ids: Vec<u16> = objects
            .iter()
            .map(|&i| i as u16 + 1)
            .chain(with_table.then(|| self.table_id()))
            .collect();
        view.instance_ids = view.instance_ids.map(|&v| if v == 0 { 0 } else { ids[v as usize - 1] });
        view
    }

    /// Noise-free render of objects and table.
    pub fn render(&self) -> RenderedView {
        self.render_parts(&(0..self.objects.len()).collect::<Vec<_>>(), true)
    }

    /// One object alone, without table or occluders.
    pub fn render_lone(&self, index: usize) -> RenderedView {
        self.render_parts(&[index], false)
    }

    /// Hidden-pixel fraction of the farther of two objects when only they are rendered.
    pub fn pair_occlusion(&self, a: usize, b: usize) -> f64 {
        let both = self.render_parts(&[a, b], false);
        let lone = [self.render_lone(a), self.render_lone(b)];
        let mean_depth = |v: &RenderedView, id: u16| {
            let (s, n) = v
                .instance_ids
                .data()
                .iter()
                .zip(v.depth.data())
                .filter(|(i, _)| **i == id)
                .fold((0.0, 0usize), |(s, n), (_, d)| (s + *d as f64, n + 1));
            if n == 0 {
                f64::INFINITY
            } else {
                s / n as f64
            }
        };
        let ids = [a as u16 + 1, b as u16 + 1];
        let far = if mean_depth(&lone[0], ids[0]) >= mean_depth(&lone[1], ids[1]) { 0 } else { 1 };
        let alone = lone[far].instance_mask(ids[far]).count();
        if alone == 0 {
            return 0.0;
        }
        1.0 - both.instance_mask(ids[far]).count() as f64 / alone as f64
    }

    /// Visible over unoccluded pixel count for every object.
    pub fn visible_fractions(&self) -> Vec<f64> {
        let full = self.render();
        (0..self.objects.len())
            .into_par_iter()
            .map(|i| {
                let alone = self.render_lone(i).instance_mask(i as u16 + 1).count();
                if alone == 0 {
                    0.0
                } else {
                    full.instance_mask(i as u16 + 1).count() as f64 / alone as f64
                }
            })
            .collect()
    }

    /// The input frame: rendered color, depth with optional noise, scene intrinsics.
    pub fn frame(&self) -> RgbdFrame {
        let view = self.render();
        let mut depth = view.depth.clone();
        if self.spec.depth_noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(1);
            let normal = Normal::new(0.0, self.spec.depth_noise).expect("finite sigma");
            for d in depth.data_mut() {
                if *d > 0.0 {
                    *d = (*d as f64 + normal.sample(&mut rng)).max(0.0) as f32;
                }
            }
        }
        RgbdFrame {
            rgb: view.color,
            depth,
            intrinsics: self.intrinsics,
        }
    }
}

fn object_fits(view: &RenderedView, id: u16) -> bool {
    let (w, h) = (view.instance_ids.width(), view.instance_ids.height());
    match view.instance_mask(id).bounding_box() {
        Some((x0, y0, x1, y1)) => x0 > 0 && y0 > 0 && x1 + 1 < w && y1 + 1 < h,
        None => false,
    }
}

/// Deterministic scene for a spec: shapes, textures, placement, camera.
pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut palette = PALETTE.to_vec();
    palette.shuffle(&mut rng);
    let mut protos = Vec::with_capacity(spec.n_objects);
    for (k, (color_name, base)) in palette.iter().take(spec.n_objects).enumerate() {
        let shape = spec.shapes[rng.random_range(0..spec.shapes.len())];
        let mut mesh = shape.build(&mut rng);
        if spec.uniform_color {
            mesh.vertex_colors = Some(vec![*base; mesh.vertices.len()]);
        } else {
            perlin_colorize(&mut mesh, *base, (spec.seed as u32).wrapping_mul(31).wrapping_add(k as u32));
        }
        protos.push((shape, format!("{color_name} {}", shape.noun()), mesh));
    }
    let footprints: Vec<f64> = protos.iter().map(|p| footprint(&p.2)).collect();

    let [w, h] = spec.image_size;
    let intrinsics = CameraIntrinsics::new(
        spec.focal_length,
        spec.focal_length,
        (w as f64 - 1.0) / 2.0,
        (h as f64 - 1.0) / 2.0,
        w,
        h,
    )?;
    let azimuth = rng.random_range(0.0..TAU);
    let elev = spec.camera_elevation_deg.to_radians();
    let eye = Vec3::new(elev.cos() * azimuth.cos(), elev.cos() * azimuth.sin(), elev.sin()) * spec.camera_distance;
    let camera_pose = look_at(&eye, &Vec3::new(0.0, 0.0, 0.03), &Vec3::z())?;
    let table = Table {
        height: 0.0,
        extents: [2.0, 2.0],
    };

    let mut best: Option<(f64, SyntheticScene)> = None;
    for attempt in 0..LAYOUT_TRIES {
        let slots = place(&footprints, spec.clutter.placement_radius(), &mut rng);
        let objects: Vec<SynthObject> = protos
            .iter()
            .zip(&slots)
            .filter_map(|((shape, label, mesh), slot)| {
                slot.map(|(yaw, x, y)| SynthObject {
                    shape: *shape,
                    label: label.clone(),
                    mesh: mesh.clone(),
                    pose: yaw_pose(yaw, x, y, table.height),
                })
            })
            .collect();
        let scene = SyntheticScene {
            seed: spec.seed,
            spec: spec.clone(),
            objects,
            table,
            camera_pose,
            intrinsics,
        };
        let fits = (0..scene.objects.len()).all(|i| object_fits(&scene.render_lone(i), i as u16 + 1));
        let worst = if fits {
            scene.visible_fractions().into_iter().fold(1.0, f64::min)
        } else {
            -1.0
        };
        let complete = scene.objects.len() == spec.n_objects;
        if complete && worst >= spec.min_visible_fraction {
            log::debug!("scene {} laid out after {} attempts", spec.seed, attempt + 1);
            return Ok(scene);
        }
        let score = worst + if complete { 1.0 } else { 0.0 };
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, scene));
        }
    }
    let (_, scene) = best.expect("at least one layout");
    log::warn!(
        "scene {}: placement budget exhausted, keeping {} of {} objects with relaxed visibility",
        spec.seed,
        scene.objects.len(),
        spec.n_objects
    );
    Ok(scene)
}

/// `count` scenes with consecutive seeds starting at `spec.seed`, generated in parallel.
pub fn generate_batch(spec: &SceneSpec, count: usize) -> Result<Vec<SyntheticScene>> {
    (0..count as u64)
        .into_par_iter()
        .map(|k| {
            generate_scene(&SceneSpec {
                seed: spec.seed + k,
                ..spec.clone()
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ObjectDoc {
    name: String,
    shape: ShapeKind,
    label: String,
    mesh: String,
}

#[derive(Serialize, Deserialize)]
struct SceneDoc {
    version: u32,
    seed: u64,
    spec: SceneSpec,
    objects: Vec<ObjectDoc>,
    table: Table,
    table_id: u16,
    camera_pose: RigidTransform,
    intrinsics: CameraIntrinsics,
}

#[derive(Serialize, Deserialize)]
struct PoseDoc {
    name: String,
    /// Canonical to world.
    world: RigidTransform,
    /// Canonical to camera.
    camera: RigidTransform,
}

fn object_name(i: usize) -> String {
    format!("obj_{i:03}")
}

/// Write the scene bundle: manifest, canonical meshes, poses and the rendered input.
pub fn save_bundle(scene: &SyntheticScene, dir: &Path) -> Result<()> {
    let mesh_dir = dir.join(MESH_DIR);
    std::fs::create_dir_all(&mesh_dir).map_err(|e| Error::io(&mesh_dir, e))?;
    let mut objects = Vec::new();
    for (i, o) in scene.objects.iter().enumerate() {
        let rel = format!("{MESH_DIR}/{}.ply", object_name(i));
        io::save_mesh(&o.mesh, &dir.join(&rel))?;
        objects.push(ObjectDoc {
            name: object_name(i),
            shape: o.shape,
            label: o.label.clone(),
            mesh: rel,
        });
    }
    io::write_json(
        &dir.join(SCENE_FILE),
        &SceneDoc {
            version: SCENE_VERSION,
            seed: scene.seed,
            spec: scene.spec.clone(),
            objects,
            table: scene.table,
            table_id: scene.table_id(),
            camera_pose: scene.camera_pose,
            intrinsics: scene.intrinsics,
        },
    )?;
    let poses: Vec<PoseDoc> = scene
        .objects
        .iter()
        .zip(scene.camera_poses())
        .enumerate()
        .map(|(i, (o, camera))| PoseDoc {
            name: object_name(i),
            world: o.pose,
            camera,
        })
        .collect();
    io::write_json(&dir.join(POSES_FILE), &poses)?;
    let frame = scene.frame();
    io::save_frame_dir(dir, &frame)?;
    io::save_ids(&dir.join(IDS_FILE), &scene.render().instance_ids)
}

/// True if `dir` looks like a scene bundle.
pub fn is_bundle(dir: &Path) -> bool {
    dir.join(SCENE_FILE).is_file()
}

pub fn load_bundle(dir: &Path) -> Result<SyntheticScene> {
    let doc: SceneDoc = io::read_json(&dir.join(SCENE_FILE))?;
    if doc.version != SCENE_VERSION {
        return Err(Error::format("scene", format!("unsupported version {}", doc.version)));
    }
    let poses: Vec<PoseDoc> = io::read_json(&dir.join(POSES_FILE))?;
    if poses.len() != doc.objects.len() {
        return Err(Error::format("scene", "pose count differs from object count"));
    }
    let objects = doc
        .objects
        .iter()
        .zip(&poses)
        .map(|(o, p)| {
            if o.name != p.name {
                return Err(Error::format("scene", format!("pose for {} listed as {}", o.name, p.name)));
            }
            Ok(SynthObject {
                shape: o.shape,
                label: o.label.clone(),
                mesh: io::load_mesh(&dir.join(&o.mesh))?,
                pose: p.world,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let scene = SyntheticScene {
        seed: doc.seed,
        spec: doc.spec,
        objects,
        table: doc.table,
        camera_pose: doc.camera_pose,
        intrinsics: doc.intrinsics,
    };
    if doc.table_id != scene.table_id() {
        return Err(Error::format("scene", "table id does not follow the objects"));
    }
    Ok(scene)
}

/// Ground-truth instance ids of a bundle, as rendered at generation time.
pub fn load_bundle_ids(dir: &Path) -> Result<Grid<u16>> {
    io::load_ids(&dir.join(IDS_FILE))
}

/// Files every bundle contains besides the meshes.
pub const BUNDLE_FILES: [&str; 6] = [SCENE_FILE, POSES_FILE, COLOR_FILE, DEPTH_FILE, IDS_FILE, INTRINSICS_FILE];
