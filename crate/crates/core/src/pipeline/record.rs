use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::protocol::check_relative;
use crate::error::{Error, Result};
use crate::model::{io, CameraIntrinsics, RigidTransform, SceneObject, SceneReconstruction};

pub const RECONSTRUCTION_FILE: &str = "reconstruction.json";
pub const RUN_FILE: &str = "run.json";
pub const TIMINGS_FILE: &str = "timings.json";
pub const CONFIG_SNAPSHOT_FILE: &str = "config.json";
pub const STAGES_DIR: &str = "stages";
pub const OBJECTS_DIR: &str = "objects";
pub const RECONSTRUCTION_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectEntry {
    /// Position among the selected masks.
    pub index: usize,
    pub prompt: String,
    /// Scaled mesh in its own frame, relative to the run directory.
    pub mesh: String,
    /// Mesh frame to camera frame.
    pub pose: RigidTransform,
    pub scale: f64,
    pub rmse: f64,
    pub inlier_fraction: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedEntry {
    pub index: usize,
    pub prompt: String,
    pub stage: String,
    pub diagnostics: String,
}

/// `reconstruction.json`: the run's result, byte-stable for identical inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionDoc {
    pub version: u32,
    pub intrinsics: CameraIntrinsics,
    pub objects: Vec<ObjectEntry>,
    pub failed: Vec<FailedEntry>,
    /// Set when describe or segment produced no objects.
    #[serde(default)]
    pub diagnostics: String,
}

impl ReconstructionDoc {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let doc: ReconstructionDoc = io::read_json(&run_dir.join(RECONSTRUCTION_FILE))?;
        if doc.version != RECONSTRUCTION_VERSION {
            return Err(Error::format("reconstruction", format!("unsupported version {}", doc.version)));
        }
        Ok(doc)
    }

    pub fn to_scene(&self, run_dir: &Path) -> Result<SceneReconstruction> {
        let objects = self
            .objects
            .iter()
            .map(|o| {
                check_relative(&o.mesh)?;
                Ok(SceneObject {
                    mesh: io::load_mesh(&run_dir.join(&o.mesh))?,
                    pose: o.pose,
                    prompt: o.prompt.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        SceneReconstruction::new(objects, self.intrinsics)
    }
}

/// Load the reconstruction of a finished run directory.
pub fn load_reconstruction(run_dir: &Path) -> Result<SceneReconstruction> {
    ReconstructionDoc::load(run_dir)?.to_scene(run_dir)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Ok,
    Failed,
}

/// One executed stage; `job` names the job directory of adapter stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub status: RecordStatus,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub job: Option<String>,
    #[serde(skip_serializing_if = "String::is_empty", default)]
    pub diagnostics: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub index: usize,
    pub prompt: String,
    pub stages: Vec<StageRecord>,
}

/// `run.json`: stage bookkeeping, byte-stable for identical inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub frame: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub scene: Vec<StageRecord>,
    pub objects: Vec<ObjectRecord>,
}

/// Wall-clock interval of one stage, milliseconds since the run started.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// `None` for scene-level stages.
    pub object: Option<usize>,
    pub stage: String,
    pub start_ms: f64,
    pub end_ms: f64,
    pub cached: bool,
}
