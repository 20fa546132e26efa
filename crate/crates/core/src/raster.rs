//! Ray-cast rendering of posed meshes into depth / color / instance-id
//! buffers, and back-projection of depth into point clouds.

use std::path::Path;

use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::TriangleBvh;
use crate::model::io::{self, COLOR_FILE, DEPTH_FILE};
use crate::model::{
    CameraIntrinsics, Grid, ObjectMask, PointCloud, RgbImage, RgbdFrame, RigidTransform, TexturedMesh, Vec3,
};

/// Distance of the canonical camera from the mesh centroid, in bounding radii.
pub const CANONICAL_DISTANCE_FACTOR: f64 = 2.2;
/// Square resolution of the canonical object view.
pub const CANONICAL_SIZE: u32 = 518;
/// Half field of view of the canonical camera.
const CANONICAL_HALF_FOV_DEG: f64 = 30.0;

pub const IDS_FILE: &str = "ids.png";
pub const VIEW_FILE: &str = "view.json";

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    /// Meters along the optical axis; 0 where no surface was hit.
    pub depth: Grid<f32>,
    pub color: RgbImage,
    /// Owning mesh index + 1; 0 for background.
    pub instance_ids: Grid<u16>,
    /// World-to-camera transform used for rendering.
    pub camera_pose: RigidTransform,
    pub intrinsics: CameraIntrinsics,
}

#[derive(Serialize, Deserialize)]
struct ViewDoc {
    intrinsics: CameraIntrinsics,
    camera_pose: RigidTransform,
}

impl RenderedView {
    /// The view as an RGB-D frame (depth kept at full float precision).
    pub fn to_frame(&self) -> RgbdFrame {
        RgbdFrame {
            rgb: self.color.clone(),
            depth: self.depth.clone(),
            intrinsics: self.intrinsics,
        }
    }

    /// Foreground pixels with the given instance id.
    pub fn instance_mask(&self, id: u16) -> Grid<bool> {
        self.instance_ids.map(|&v| v == id)
    }

    pub fn foreground_mask(&self) -> Grid<bool> {
        self.instance_ids.map(|&v| v != 0)
    }

    /// PNG triplet (16-bit depth in mm, 8-bit color, 16-bit ids) plus `view.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        io::save_depth(&dir.join(DEPTH_FILE), &self.depth)?;
        io::save_color(&dir.join(COLOR_FILE), &self.color)?;
        io::save_ids(&dir.join(IDS_FILE), &self.instance_ids)?;
        io::write_json(
            &dir.join(VIEW_FILE),
            &ViewDoc {
                intrinsics: self.intrinsics,
                camera_pose: self.camera_pose,
            },
        )
    }

    /// Inverse of [`RenderedView::save`]; depth comes back quantized to millimeters.
    pub fn load(dir: &Path) -> Result<Self> {
        let doc: ViewDoc = io::read_json(&dir.join(VIEW_FILE))?;
        let view = RenderedView {
            depth: io::load_depth(&dir.join(DEPTH_FILE))?,
            color: io::load_color(&dir.join(COLOR_FILE))?,
            instance_ids: io::load_ids(&dir.join(IDS_FILE))?,
            camera_pose: doc.camera_pose,
            intrinsics: doc.intrinsics,
        };
        let (w, h) = (doc.intrinsics.width as usize, doc.intrinsics.height as usize);
        if !(view.depth.width() == w
            && view.depth.height() == h
            && view.color.same_shape(&view.depth)
            && view.instance_ids.same_shape(&view.depth))
        {
            return Err(Error::DimensionMismatch(format!("view buffers do not match {w}x{h}")));
        }
        Ok(view)
    }
}

/// Render meshes (each with its mesh-to-world pose) through a pinhole camera.
pub fn render(
    meshes: &[(TexturedMesh, RigidTransform)],
    intrinsics: &CameraIntrinsics,
    camera_pose: &RigidTransform,
) -> RenderedView {
    let posed: Vec<RigidTransform> = meshes.iter().map(|(_, p)| camera_pose.compose(p)).collect();
    let bvh = TriangleBvh::from_meshes(meshes.iter().zip(&posed).map(|((m, _), p)| (m, Some(p))));
    let (w, h) = (intrinsics.width as usize, intrinsics.height as usize);
    let origin = Vec3::zeros();

    let rows: Vec<Vec<(f32, [u8; 3], u16)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let dir = intrinsics.ray_direction(x as f64, y as f64);
                    match bvh.nearest_hit(&origin, &dir, 0.0, f64::INFINITY) {
                        Some(hit) => {
                            let mesh = &meshes[hit.tri.owner as usize].0;
                            let f = mesh.faces[hit.tri.face as usize];
                            let color = flat_color(mesh, &f);
                            // direction has unit z, so t is the depth
                            (hit.t as f32, color, hit.tri.owner as u16 + 1)
                        }
                        None => (0.0, [0, 0, 0], 0),
                    }
                })
                .collect()
        })
        .collect();

    let mut depth = Vec::with_capacity(w * h);
    let mut color = Vec::with_capacity(w * h);
    let mut ids = Vec::with_capacity(w * h);
    for row in rows {
        for (d, c, id) in row {
            // a hit so close that it rounds to zero depth still counts as foreground
            depth.push(if id != 0 && d <= 0.0 { f32::MIN_POSITIVE } else { d });
            color.push(c);
            ids.push(id);
        }
    }
    RenderedView {
        depth: Grid::from_vec(w, h, depth).expect("size"),
        color: Grid::from_vec(w, h, color).expect("size"),
        instance_ids: Grid::from_vec(w, h, ids).expect("size"),
        camera_pose: *camera_pose,
        intrinsics: *intrinsics,
    }
}

fn flat_color(mesh: &TexturedMesh, f: &[u32; 3]) -> [u8; 3] {
    let mut acc = [0u32; 3];
    for &v in f {
        let c = mesh.color(v as usize);
        for k in 0..3 {
            acc[k] += c[k] as u32;
        }
    }
    acc.map(|s| ((s + 1) / 3) as u8)
}

/// Intrinsics of the canonical object view.
pub fn canonical_intrinsics() -> CameraIntrinsics {
    let half = (CANONICAL_SIZE as f64 - 1.0) / 2.0;
    let f = (half + 0.5) / CANONICAL_HALF_FOV_DEG.to_radians().tan();
    CameraIntrinsics {
        fx: f,
        fy: f,
        cx: half,
        cy: half,
        width: CANONICAL_SIZE,
        height: CANONICAL_SIZE,
    }
}

/// World-to-camera pose of the canonical viewpoint for a mesh: on the `-Z`
/// side of the centroid at 2.2 bounding radii, looking along `+Z`.
pub fn canonical_camera(mesh: &TexturedMesh) -> Result<RigidTransform> {
    if mesh.is_empty() {
        return Err(Error::Precondition("cannot render an empty mesh".into()));
    }
    let c = mesh.centroid();
    let r = mesh.bounding_radius();
    if !(r > 1e-12) {
        return Err(Error::Degenerate("mesh has zero extent".into()));
    }
    let eye = c - Vec3::new(0.0, 0.0, CANONICAL_DISTANCE_FACTOR * r);
    Ok(RigidTransform::from_translation(-eye))
}

/// World-to-camera pose looking from `eye` at `target`, with `+X` along `forward × up`.
pub fn look_at(eye: &Vec3, target: &Vec3, up: &Vec3) -> Result<RigidTransform> {
    let z = (target - eye).normalize();
    let x = z.cross(up);
    if !(x.norm() > 1e-9) {
        return Err(Error::Degenerate("view direction is parallel to the up vector".into()));
    }
    let x = x.normalize();
    let y = z.cross(&x);
    let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    RigidTransform::new(r, -(r * eye))
}

/// Object-view camera placed along `toward_eye` from the centroid, at the
/// canonical distance. The canonical viewpoint is `toward_eye = -Z`.
pub fn viewpoint_camera(mesh: &TexturedMesh, toward_eye: &Vec3) -> Result<RigidTransform> {
    let canonical = canonical_camera(mesh)?;
    let n = toward_eye.norm();
    if !(n > 1e-12 && n.is_finite()) {
        return Err(Error::Precondition("viewpoint direction must be nonzero".into()));
    }
    let d = toward_eye / n;
    if d == -Vec3::z() {
        return Ok(canonical);
    }
    let c = mesh.centroid();
    let eye = c + d * (CANONICAL_DISTANCE_FACTOR * mesh.bounding_radius());
    let up = if d.cross(&Vec3::y()).norm() > 1e-3 { -Vec3::y() } else { Vec3::z() };
    look_at(&eye, &c, &up)
}

/// Render a lone mesh from its canonical viewpoint.
pub fn render_object_view(mesh: &TexturedMesh) -> Result<RenderedView> {
    render_object_view_from(mesh, &-Vec3::z())
}

/// Render a lone mesh from the viewpoint along `toward_eye`.
pub fn render_object_view_from(mesh: &TexturedMesh, toward_eye: &Vec3) -> Result<RenderedView> {
    let camera = viewpoint_camera(mesh, toward_eye)?;
    Ok(render(
        &[(mesh.clone(), RigidTransform::identity())],
        &canonical_intrinsics(),
        &camera,
    ))
}

/// Lift valid-depth pixels (inside the mask, if one is given) to camera-frame points.
pub fn backproject(frame: &RgbdFrame, mask: Option<&ObjectMask>) -> Result<PointCloud> {
    if let Some(m) = mask {
        if m.width() != frame.width() || m.height() != frame.height() {
            return Err(Error::DimensionMismatch(format!(
                "mask is {}x{}, frame is {}x{}",
                m.width(),
                m.height(),
                frame.width(),
                frame.height()
            )));
        }
    }
    let k = &frame.intrinsics;
    let mut points = Vec::new();
    let mut colors = Vec::new();
    for y in 0..frame.height() {
        for x in 0..frame.width() {
            if mask.is_some_and(|m| !*m.bits.get(x, y)) {
                continue;
            }
            if let Some(d) = frame.valid_depth(x, y) {
                points.push(k.backproject(x as f64, y as f64, d));
                colors.push(*frame.rgb.get(x, y));
            }
        }
    }
    Ok(PointCloud {
        points,
        colors: Some(colors),
    })
}
