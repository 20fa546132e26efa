//! In-process stage backends: the synthetic-scene oracle and builtin
//! stand-ins that need no external model.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use super::manifest::StageManifest;
use super::protocol::{self, Viewpoint, DESCRIBE, DESCRIPTORS, IMAGE_TO_3D, INPAINT, POSE, SEGMENT};
use crate::correspond::{zncc_descriptors, DescriptorMap};
use crate::error::{Error, Result};
use crate::model::{io, Grid};
use crate::raster::render_object_view_from;
use crate::synth::{load_bundle, load_bundle_ids, Oracle, OracleConfig, SyntheticScene};

type LoadedScene = Arc<(SyntheticScene, Grid<u16>)>;

/// Bundles stay loaded for the life of the process; oracle jobs of one run
/// all read the same scene.
fn scene_cache() -> &'static Mutex<HashMap<PathBuf, LoadedScene>> {
    static CACHE: OnceLock<Mutex<HashMap<PathBuf, LoadedScene>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

fn load_truth(path: &Path) -> Result<LoadedScene> {
    if let Some(s) = scene_cache().lock().expect("scene cache poisoned").get(path) {
        return Ok(s.clone());
    }
    let loaded = Arc::new((load_bundle(path)?, load_bundle_ids(path)?));
    scene_cache()
        .lock()
        .expect("scene cache poisoned")
        .insert(path.to_path_buf(), loaded.clone());
    Ok(loaded)
}

/// Run `name` ("oracle" or "builtin") on a populated job directory; the error
/// string becomes the manifest diagnostics.
pub fn run_in_process(name: &str, dir: &Path, manifest: &StageManifest) -> std::result::Result<(), String> {
    let run = || match name {
        "oracle" => oracle_stage(dir, manifest),
        "builtin" => builtin_stage(dir, manifest),
        other => Err(Error::Config(format!("no in-process backend '{other}'"))),
    };
    match catch_unwind(AssertUnwindSafe(run)) {
        Ok(Ok(())) => Ok(()),
        Ok(Err(e)) => Err(e.to_string()),
        Err(_) => Err(format!("{name} backend panicked in stage {}", manifest.stage)),
    }
}

fn input(dir: &Path, m: &StageManifest, role: &str) -> Result<PathBuf> {
    Ok(dir.join(m.input(role)?))
}

fn output(dir: &Path, m: &StageManifest, role: &str) -> Result<PathBuf> {
    Ok(dir.join(m.output(role)?))
}

fn oracle_stage(dir: &Path, m: &StageManifest) -> Result<()> {
    let truth: PathBuf = m.param("truth")?;
    let cfg: OracleConfig = m.param("oracle")?;
    let loaded = load_truth(&truth)?;
    let oracle = Oracle::new(&loaded.0, Some(loaded.1.clone()), cfg)?;
    match m.stage.as_str() {
        DESCRIBE => io::write_json(&output(dir, m, "labels")?, &oracle.describe()),
        SEGMENT => {
            let labels: Vec<String> = io::read_json(&input(dir, m, "labels")?)?;
            let masks = oracle.segment(&labels)?;
            protocol::write_masks(dir, &masks)
        }
        INPAINT => {
            let mask = io::load_mask(&input(dir, m, "object_mask")?)?;
            io::save_color(&output(dir, m, "image")?, &oracle.inpaint(&mask)?)
        }
        IMAGE_TO_3D => {
            let mask = io::load_mask(&input(dir, m, "object_mask")?)?;
            io::save_mesh(&oracle.image_to_3d(&mask)?, &output(dir, m, "mesh")?)?;
            let d = oracle.viewpoint(&mask)?;
            io::write_json(
                &dir.join(protocol::VIEWPOINT_FILE),
                &Viewpoint {
                    toward_eye: [d.x, d.y, d.z],
                },
            )
        }
        DESCRIPTORS => {
            let stride: usize = m.param("stride")?;
            let mask = io::load_mask(&input(dir, m, "observed_mask")?)?;
            let mesh = io::load_mesh(&input(dir, m, "mesh")?)?;
            let vp: Viewpoint = io::read_json(&input(dir, m, "viewpoint")?)?;
            let view = render_object_view_from(&mesh, &vp.direction())?;
            let a = oracle.observed_descriptors(&mask, stride)?;
            let b = oracle.rendered_descriptors_for(&mask, &view, stride)?;
            a.save_tensor(&output(dir, m, "observed")?)?;
            b.save_tensor(&output(dir, m, "rendered")?)
        }
        POSE => {
            let mask = io::load_mask(&input(dir, m, "mask")?)?;
            let mesh = io::load_mesh(&input(dir, m, "mesh")?)?;
            io::write_json(&output(dir, m, "pose")?, &oracle.pose(&mask, &mesh)?)
        }
        other => Err(Error::Stage(format!("oracle has no stage '{other}'"))),
    }
}

fn builtin_stage(dir: &Path, m: &StageManifest) -> Result<()> {
    match m.stage.as_str() {
        // no neural fill: the isolated object as is
        INPAINT => {
            let from = input(dir, m, "image")?;
            let to = output(dir, m, "image")?;
            std::fs::copy(&from, &to).map_err(|e| Error::io(&to, e))?;
            Ok(())
        }
        DESCRIPTORS => {
            let stride: usize = m.param("stride")?;
            let patch: usize = m.param("patch")?;
            let zncc = |image: &str, mask: &str| -> Result<DescriptorMap> {
                let img = io::load_color(&input(dir, m, image)?)?;
                let mask = io::load_mask(&input(dir, m, mask)?)?;
                zncc_descriptors(&img, &mask, patch, stride)
            };
            zncc("observed_image", "observed_mask")?.save_tensor(&output(dir, m, "observed")?)?;
            zncc("rendered_image", "rendered_mask")?.save_tensor(&output(dir, m, "rendered")?)
        }
        other => Err(Error::Stage(format!("no builtin backend for stage '{other}'"))),
    }
}
