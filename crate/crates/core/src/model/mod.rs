//! Geometric data types shared by every stage of the pipeline.
//!
//! Conventions: distances are meters, the camera looks down +Z with +X to the
//! right and +Y down, and every pose is expressed in the camera frame unless a
//! name says otherwise.

mod image;
pub mod io;
mod transform;

pub use self::image::{Grid, Mask, RgbImage};
pub use self::transform::RigidTransform;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Rgb = [u8; 3];

/// Pinhole intrinsics in pixels. Pixel `(u, v)` is the ray through
/// `((u - cx) / fx, (v - cy) / fy, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidIntrinsics("zero image size".into()));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(Error::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Camera-frame point seen at pixel `(u, v)` with depth `d`.
    pub fn backproject(&self, u: f64, v: f64, d: f64) -> Vec3 {
        Vec3::new(d * (u - self.cx) / self.fx, d * (v - self.cy) / self.fy, d)
    }

    /// Continuous pixel coordinates of a camera-frame point, `None` behind the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= -0.5 && v >= -0.5 && u < self.width as f64 - 0.5 && v < self.height as f64 - 0.5
    }

    pub fn ray_direction(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// Registered color + metric depth. Depth is meters, `0` marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbdFrame {
    pub rgb: RgbImage,
    pub depth: Grid<f32>,
    pub intrinsics: CameraIntrinsics,
}

impl RgbdFrame {
    pub fn new(rgb: RgbImage, depth: Grid<f32>, intrinsics: CameraIntrinsics) -> Result<Self> {
        intrinsics.validate()?;
        let (w, h) = (intrinsics.width as usize, intrinsics.height as usize);
        if rgb.width() != w || rgb.height() != h || depth.width() != w || depth.height() != h {
            return Err(Error::DimensionMismatch(format!(
                "intrinsics declare {}x{}, color is {}x{}, depth is {}x{}",
                w,
                h,
                rgb.width(),
                rgb.height(),
                depth.width(),
                depth.height()
            )));
        }
        if let Some(bad) = depth.data().iter().find(|d| d.is_finite() && **d < 0.0) {
            return Err(Error::Precondition(format!("negative depth value {bad}")));
        }
        Ok(RgbdFrame {
            rgb,
            depth,
            intrinsics,
        })
    }

    pub fn width(&self) -> usize {
        self.rgb.width()
    }

    pub fn height(&self) -> usize {
        self.rgb.height()
    }

    /// Depth at a pixel if it is finite and positive.
    pub fn valid_depth(&self, x: usize, y: usize) -> Option<f64> {
        let d = *self.depth.get(x, y);
        (d.is_finite() && d > 0.0).then_some(d as f64)
    }
}

/// A binary object region from segmentation, with its score and text prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectMask {
    pub bits: Mask,
    pub confidence: f64,
    pub prompt: String,
}

impl ObjectMask {
    pub fn new(bits: Mask, confidence: f64, prompt: impl Into<String>) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::Precondition(format!(
                "mask confidence {confidence} outside [0, 1]"
            )));
        }
        if bits.count() == 0 {
            return Err(Error::Precondition("object mask has no set pixel".into()));
        }
        Ok(ObjectMask {
            bits,
            confidence,
            prompt: prompt.into(),
        })
    }

    pub fn width(&self) -> usize {
        self.bits.width()
    }

    pub fn height(&self) -> usize {
        self.bits.height()
    }

    pub fn area(&self) -> usize {
        self.bits.count()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub colors: Option<Vec<Rgb>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>, colors: Option<Vec<Rgb>>) -> Result<Self> {
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::Precondition("point cloud has non-finite coordinates".into()));
        }
        if let Some(c) = &colors {
            if c.len() != points.len() {
                return Err(Error::DimensionMismatch(format!(
                    "{} colors for {} points",
                    c.len(),
                    points.len()
                )));
            }
        }
        Ok(PointCloud { points, colors })
    }

    pub fn from_points(points: Vec<Vec3>) -> Self {
        PointCloud {
            points,
            colors: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Option<Vec3> {
        centroid(&self.points)
    }
}

pub(crate) fn centroid(points: &[Vec3]) -> Option<Vec3> {
    if points.is_empty() {
        return None;
    }
    let sum = points.iter().fold(Vec3::zeros(), |acc, p| acc + p);
    Some(sum / points.len() as f64)
}

/// Triangle mesh with optional per-vertex colors. Faces wind counter-clockwise
/// seen from outside.
#[derive(Debug, Clone, PartialEq)]
pub struct TexturedMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    pub vertex_colors: Option<Vec<Rgb>>,
}

/// Relative collinearity threshold below which a triangle counts as zero-area.
const DEGENERATE_RATIO: f64 = 1e-10;

impl TexturedMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>, vertex_colors: Option<Vec<Rgb>>) -> Result<Self> {
        let mesh = TexturedMesh {
            vertices,
            faces,
            vertex_colors,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if let Some((i, _)) = self
            .vertices
            .iter()
            .enumerate()
            .find(|(_, v)| !v.iter().all(|c| c.is_finite()))
        {
            return Err(Error::InvalidMesh(format!("vertex {i} is not finite")));
        }
        if let Some(c) = &self.vertex_colors {
            if c.len() != n {
                return Err(Error::InvalidMesh(format!("{} colors for {} vertices", c.len(), n)));
            }
        }
        for (fi, f) in self.faces.iter().enumerate() {
            if let Some(&bad) = f.iter().find(|&&i| i as usize >= n) {
                return Err(Error::InvalidMesh(format!(
                    "face {fi} references vertex {bad} but mesh has {n} vertices"
                )));
            }
            let [a, b, c] = self.triangle(fi);
            let (e1, e2, e3) = (b - a, c - a, c - b);
            let longest = e1.norm_squared().max(e2.norm_squared()).max(e3.norm_squared());
            if e1.cross(&e2).norm() <= DEGENERATE_RATIO * longest || longest == 0.0 {
                return Err(Error::InvalidMesh(format!("face {fi} is degenerate (zero area)")));
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn triangle(&self, face: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[face];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    pub fn face_normal(&self, face: usize) -> Vec3 {
        let [a, b, c] = self.triangle(face);
        (b - a).cross(&(c - a)).normalize()
    }

    pub fn face_area(&self, face: usize) -> f64 {
        let [a, b, c] = self.triangle(face);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Area-weighted centroid of the surface; independent of tessellation density.
    pub fn centroid(&self) -> Vec3 {
        let mut total = 0.0;
        let mut acc = Vec3::zeros();
        for f in 0..self.faces.len() {
            let [a, b, c] = self.triangle(f);
            let area = 0.5 * (b - a).cross(&(c - a)).norm();
            acc += (a + b + c) * (area / 3.0);
            total += area;
        }
        if total > 0.0 {
            acc / total
        } else {
            centroid(&self.vertices).unwrap_or_else(Vec3::zeros)
        }
    }

    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        bounds(&self.vertices)
    }

    /// Largest distance from the centroid to any vertex.
    pub fn bounding_radius(&self) -> f64 {
        let c = self.centroid();
        self.vertices.iter().map(|v| (v - c).norm()).fold(0.0, f64::max)
    }

    pub fn transformed(&self, t: &RigidTransform) -> TexturedMesh {
        TexturedMesh {
            vertices: self.vertices.iter().map(|v| t.apply_point(v)).collect(),
            faces: self.faces.clone(),
            vertex_colors: self.vertex_colors.clone(),
        }
    }

    pub fn color(&self, vertex: usize) -> Rgb {
        self.vertex_colors
            .as_ref()
            .map(|c| c[vertex])
            .unwrap_or([180, 180, 180])
    }

    /// Concatenate meshes into one, offsetting face indices.
    pub fn merge(parts: &[TexturedMesh]) -> TexturedMesh {
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        let colored = parts.iter().any(|p| p.vertex_colors.is_some());
        let mut colors = Vec::new();
        for p in parts {
            let base = vertices.len() as u32;
            vertices.extend_from_slice(&p.vertices);
            faces.extend(p.faces.iter().map(|f| [f[0] + base, f[1] + base, f[2] + base]));
            if colored {
                colors.extend((0..p.vertices.len()).map(|i| p.color(i)));
            }
        }
        TexturedMesh {
            vertices,
            faces,
            vertex_colors: colored.then_some(colors),
        }
    }
}

pub(crate) fn bounds(points: &[Vec3]) -> Option<(Vec3, Vec3)> {
    let first = *points.first()?;
    Some(points.iter().fold((first, first), |(lo, hi), p| (lo.inf(p), hi.sup(p))))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub mesh: TexturedMesh,
    pub pose: RigidTransform,
    pub prompt: String,
}

impl SceneObject {
    /// The mesh with its pose applied, i.e. in camera coordinates.
    pub fn posed_mesh(&self) -> TexturedMesh {
        self.mesh.transformed(&self.pose)
    }
}

/// A set of posed meshes in the camera frame of one input view.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneReconstruction {
    pub objects: Vec<SceneObject>,
    pub frame: CameraIntrinsics,
}

impl SceneReconstruction {
    pub fn new(objects: Vec<SceneObject>, frame: CameraIntrinsics) -> Result<Self> {
        for (i, o) in objects.iter().enumerate() {
            if o.mesh.is_empty() {
                return Err(Error::InvalidMesh(format!("scene object {i} has an empty mesh")));
            }
        }
        Ok(SceneReconstruction { objects, frame })
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn posed_meshes(&self) -> Vec<TexturedMesh> {
        self.objects.iter().map(SceneObject::posed_mesh).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tri_mesh() -> TexturedMesh {
        TexturedMesh::new(
            vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2]],
            None,
        )
        .unwrap()
    }

    #[test]
    fn intrinsics_reject_bad_focal() {
        assert!(CameraIntrinsics::new(0.0, 500.0, 320.0, 240.0, 640, 480).is_err());
        assert!(CameraIntrinsics::new(500.0, -1.0, 320.0, 240.0, 640, 480).is_err());
        assert!(CameraIntrinsics::new(500.0, 500.0, 640.0, 240.0, 640, 480).is_err());
        assert!(CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).is_ok());
    }

    #[test]
    fn backproject_and_project_agree() {
        let k = CameraIntrinsics::new(500.0, 510.0, 320.0, 240.0, 640, 480).unwrap();
        let p = k.backproject(100.0, 50.0, 1.7);
        let (u, v) = k.project(&p).unwrap();
        assert!((u - 100.0).abs() < 1e-9 && (v - 50.0).abs() < 1e-9);
    }

    #[test]
    fn mesh_rejects_out_of_range_and_degenerate_faces() {
        let v = tri_mesh().vertices;
        assert!(matches!(
            TexturedMesh::new(v.clone(), vec![[0, 1, 9]], None),
            Err(Error::InvalidMesh(_))
        ));
        let mut collinear = v.clone();
        collinear[2] = Vec3::new(2.0, 0.0, 0.0);
        assert!(TexturedMesh::new(collinear, vec![[0, 1, 2]], None).is_err());
    }

    #[test]
    fn mask_needs_a_pixel() {
        let bits = Mask::new(4, 4, false);
        assert!(ObjectMask::new(bits.clone(), 0.5, "x").is_err());
        let mut bits = bits;
        bits.set(1, 1, true);
        assert!(ObjectMask::new(bits.clone(), 1.5, "x").is_err());
        assert_eq!(ObjectMask::new(bits, 0.5, "x").unwrap().area(), 1);
    }

    #[test]
    fn centroid_is_area_weighted() {
        let m = tri_mesh();
        let c = m.centroid();
        assert!((c - Vec3::new(1.0 / 3.0, 1.0 / 3.0, 0.0)).norm() < 1e-12);
        assert!((m.surface_area() - 0.5).abs() < 1e-12);
    }
}
