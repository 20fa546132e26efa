//! Stage names and the files each adapter stage reads and writes. Paths are
//! relative to the job directory.
//!
//! | stage | inputs | outputs |
//! |---|---|---|
//! | describe | `image` rgb.png | `labels` labels.json |
//! | segment | `image` rgb.png, `labels` labels.json | `masks` masks.json (+ the PNGs it lists) |
//! | inpaint | `image` image.png, `mask` mask.png, `prompt` prompt.txt, `object_mask` object_mask.png | `image` inpainted.png |
//! | image_to_3d | `image` inpainted.png, `object_mask` object_mask.png | `mesh` mesh.ply (optional viewpoint.json) |
//! | descriptors | `observed_image`, `observed_mask`, `rendered_image`, `rendered_depth`, `rendered_mask`, `mesh`, `viewpoint` | `observed` observed.desc, `rendered` rendered.desc |
//! | pose | `image`, `depth`, `intrinsics`, `mask`, `mesh` | `pose` pose.json |

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::manifest::StageManifest;
use crate::error::{Error, Result};
use crate::model::{io, Mask, ObjectMask, Vec3};

pub const DESCRIBE: &str = "describe";
pub const SEGMENT: &str = "segment";
pub const INPAINT: &str = "inpaint";
pub const IMAGE_TO_3D: &str = "image_to_3d";
pub const DESCRIPTORS: &str = "descriptors";
pub const POSE: &str = "pose";

/// Stages that always run through a backend.
pub const ADAPTER_STAGES: [&str; 5] = [DESCRIBE, SEGMENT, INPAINT, IMAGE_TO_3D, DESCRIPTORS];

pub const INPAINT_JOB: &str = "inpaint_job";
pub const RENDER: &str = "render";
pub const MATCH: &str = "match";
pub const SCALE: &str = "scale";
pub const REGISTER: &str = "register";

/// Per-object chain in execution order.
pub const OBJECT_STAGES: [&str; 9] = [
    INPAINT_JOB,
    INPAINT,
    IMAGE_TO_3D,
    RENDER,
    DESCRIPTORS,
    MATCH,
    SCALE,
    POSE,
    REGISTER,
];

pub const LABELS_FILE: &str = "labels.json";
pub const MASKS_FILE: &str = "masks.json";
pub const OBJECT_MASK_FILE: &str = "object_mask.png";
pub const INPAINTED_FILE: &str = "inpainted.png";
pub const MESH_FILE: &str = "mesh.ply";
pub const VIEWPOINT_FILE: &str = "viewpoint.json";
pub const OBSERVED_IMAGE_FILE: &str = "observed.png";
pub const OBSERVED_MASK_FILE: &str = "observed_mask.png";
pub const RENDERED_IMAGE_FILE: &str = "rendered.png";
pub const RENDERED_DEPTH_FILE: &str = "rendered_depth.png";
pub const RENDERED_MASK_FILE: &str = "rendered_mask.png";
pub const OBSERVED_DESC_FILE: &str = "observed.desc";
pub const RENDERED_DESC_FILE: &str = "rendered.desc";
pub const POSE_FILE: &str = "pose.json";

/// One entry of `masks.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskEntry {
    pub mask: String,
    pub confidence: f64,
    pub prompt: String,
}

/// `viewpoint.json`: direction from the mesh centroid toward the camera the
/// mesh should be rendered from, in mesh coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Viewpoint {
    pub toward_eye: [f64; 3],
}

impl Viewpoint {
    pub fn canonical() -> Self {
        Viewpoint {
            toward_eye: [0.0, 0.0, -1.0],
        }
    }

    pub fn direction(&self) -> Vec3 {
        Vec3::from(self.toward_eye)
    }
}

/// Reject absolute paths and paths leaving the job directory.
pub fn check_relative(path: &str) -> Result<()> {
    let p = Path::new(path);
    let escapes = p.components().any(|c| !matches!(c, std::path::Component::Normal(_)));
    if path.is_empty() || escapes {
        return Err(Error::Stage(format!("path '{path}' is not relative to the job directory")));
    }
    Ok(())
}

pub fn write_labels(dir: &Path, labels: &[String]) -> Result<()> {
    io::write_json(&dir.join(LABELS_FILE), labels)
}

pub fn read_labels(dir: &Path, manifest: &StageManifest) -> Result<Vec<String>> {
    io::read_json(&dir.join(manifest.output("labels")?))
}

pub fn write_masks(dir: &Path, masks: &[ObjectMask]) -> Result<()> {
    let mut entries = Vec::with_capacity(masks.len());
    for (i, m) in masks.iter().enumerate() {
        let name = format!("mask_{i:03}.png");
        io::save_mask(&dir.join(&name), &m.bits)?;
        entries.push(MaskEntry {
            mask: name,
            confidence: m.confidence,
            prompt: m.prompt.clone(),
        });
    }
    io::write_json(&dir.join(MASKS_FILE), &entries)
}

pub fn read_masks(dir: &Path, manifest: &StageManifest) -> Result<Vec<ObjectMask>> {
    let entries: Vec<MaskEntry> = io::read_json(&dir.join(manifest.output("masks")?))?;
    entries
        .into_iter()
        .map(|e| {
            check_relative(&e.mask)?;
            ObjectMask::new(io::load_mask(&dir.join(&e.mask))?, e.confidence, e.prompt)
        })
        .collect()
}

pub fn read_viewpoint(dir: &Path) -> Result<Viewpoint> {
    let path = dir.join(VIEWPOINT_FILE);
    if !path.is_file() {
        return Ok(Viewpoint::canonical());
    }
    let v: Viewpoint = io::read_json(&path)?;
    let d = v.direction();
    if !(d.norm() > 1e-12 && d.iter().all(|c| c.is_finite())) {
        return Err(Error::Stage("viewpoint direction must be finite and nonzero".into()));
    }
    Ok(v)
}

pub fn load_mask_input(dir: &Path, manifest: &StageManifest, role: &str) -> Result<Mask> {
    io::load_mask(&dir.join(manifest.input(role)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths_only() {
        assert!(check_relative("mask_000.png").is_ok());
        assert!(check_relative("sub/mask.png").is_ok());
        for bad in ["", "/etc/passwd", "../x.png", "a/../../b", "./a"] {
            assert!(check_relative(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn masks_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut bits = Mask::new(6, 4, false);
        bits.set(2, 1, true);
        let masks = vec![
            ObjectMask::new(bits.clone(), 0.75, "red box").unwrap(),
            ObjectMask::new(bits, 1.0, "red box").unwrap(),
        ];
        write_masks(dir.path(), &masks).unwrap();
        let m = StageManifest::new(SEGMENT).with_output("masks", MASKS_FILE);
        assert_eq!(read_masks(dir.path(), &m).unwrap(), masks);
    }

    #[test]
    fn missing_viewpoint_means_canonical() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(read_viewpoint(dir.path()).unwrap(), Viewpoint::canonical());
        io::write_json(&dir.path().join(VIEWPOINT_FILE), &Viewpoint { toward_eye: [0.0; 3] }).unwrap();
        assert!(read_viewpoint(dir.path()).is_err());
    }
}
