use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use sha2::{Digest, Sha256};

use super::backends;
use super::config::BackendSpec;
use super::manifest::{invoke_adapter, StageManifest, StageStatus, Subprocess};
use crate::error::{Error, Result};

/// Hex digits of the cache key kept in job directory names.
const KEY_CHARS: usize = 16;

static SCRATCH_COUNTER: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone)]
pub struct JobOutcome {
    /// Directory name under the stages directory.
    pub name: String,
    pub dir: PathBuf,
    pub manifest: StageManifest,
    /// True if a finished job with the same key was reused.
    pub cached: bool,
}

impl JobOutcome {
    pub fn ok(&self) -> bool {
        self.manifest.status == StageStatus::Ok
    }
}

fn backend_key(backend: &BackendSpec) -> String {
    match backend {
        BackendSpec::Named(n) => n.clone(),
        BackendSpec::Command { command, args, .. } => format!("command:{command}\0{}", args.join("\0")),
    }
}

/// Content address of a job: stage, backend, parameters, declared outputs
/// and every input file's role, name and bytes.
pub fn job_key(manifest: &StageManifest, backend: &BackendSpec, dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    let mut field = |bytes: &[u8]| {
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    };
    field(manifest.stage.as_bytes());
    field(backend_key(backend).as_bytes());
    field(&serde_json::to_vec(&manifest.params)?);
    for f in &manifest.outputs {
        field(f.role.as_bytes());
        field(f.path.as_bytes());
    }
    for f in &manifest.inputs {
        let p = dir.join(&f.path);
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        field(f.role.as_bytes());
        field(f.path.as_bytes());
        field(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

fn cached(dir: &Path) -> Option<StageManifest> {
    let m = StageManifest::load(dir).ok()?;
    (m.status == StageStatus::Ok && m.missing_outputs(dir).is_empty()).then_some(m)
}

/// Execute the manifest's stage on an already populated job directory.
pub fn execute(manifest: StageManifest, dir: &Path, backend: &BackendSpec, timeout: Duration) -> Result<StageManifest> {
    match backend {
        BackendSpec::Command { command, args, .. } => invoke_adapter(
            manifest,
            dir,
            &Subprocess {
                command: command.clone(),
                args: args.clone(),
                timeout,
            },
        ),
        BackendSpec::Named(name) => {
            manifest.validate()?;
            let mut manifest = manifest;
            manifest.status = StageStatus::Pending;
            manifest.diagnostics.clear();
            manifest.save(dir)?;
            let outcome = backends::run_in_process(name, dir, &manifest);
            manifest.finish_checked(dir, outcome)?;
            manifest.save(dir)?;
            Ok(manifest)
        }
    }
}

/// Run a stage job under `stages_dir`, reusing a finished job with the same
/// content address. `write_inputs` places the manifest's input files into
/// the job directory.
pub fn run_job(
    stages_dir: &Path,
    manifest: StageManifest,
    backend: &BackendSpec,
    timeout: Duration,
    write_inputs: impl FnOnce(&Path) -> Result<()>,
) -> Result<JobOutcome> {
    manifest.validate()?;
    std::fs::create_dir_all(stages_dir).map_err(|e| Error::io(stages_dir, e))?;
    let scratch = stages_dir.join(format!(
        ".scratch-{}-{}-{}",
        manifest.stage,
        std::process::id(),
        SCRATCH_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    if scratch.exists() {
        std::fs::remove_dir_all(&scratch).map_err(|e| Error::io(&scratch, e))?;
    }
    std::fs::create_dir_all(&scratch).map_err(|e| Error::io(&scratch, e))?;
    let result = run_in_scratch(stages_dir, &scratch, manifest, backend, timeout, write_inputs);
    if scratch.exists() {
        let _ = std::fs::remove_dir_all(&scratch);
    }
    result
}

fn run_in_scratch(
    stages_dir: &Path,
    scratch: &Path,
    manifest: StageManifest,
    backend: &BackendSpec,
    timeout: Duration,
    write_inputs: impl FnOnce(&Path) -> Result<()>,
) -> Result<JobOutcome> {
    write_inputs(scratch)?;
    let absent = manifest.missing_inputs(scratch);
    if !absent.is_empty() {
        return Err(Error::Stage(format!("{}: inputs not written: {}", manifest.stage, absent.join(", "))));
    }
    let key = job_key(&manifest, backend, scratch)?;
    let name = format!("{}-{}", manifest.stage, &key[..KEY_CHARS]);
    let dir = stages_dir.join(&name);
    if let Some(m) = cached(&dir) {
        return Ok(JobOutcome {
            name,
            dir,
            manifest: m,
            cached: true,
        });
    }
    let manifest = execute(manifest, scratch, backend, timeout)?;
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    if let Err(e) = std::fs::rename(scratch, &dir) {
        // a concurrent identical job may have landed first
        if let Some(m) = cached(&dir) {
            return Ok(JobOutcome {
                name,
                dir,
                manifest: m,
                cached: true,
            });
        }
        return Err(Error::io(&dir, e));
    }
    Ok(JobOutcome {
        name,
        dir,
        manifest,
        cached: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{io, Grid};
    use crate::pipeline::protocol::{INPAINT, INPAINTED_FILE};

    fn inpaint_manifest() -> StageManifest {
        StageManifest::new(INPAINT)
            .with_input("image", "image.png")
            .with_output("image", INPAINTED_FILE)
    }

    fn write_image(value: u8) -> impl FnOnce(&Path) -> Result<()> {
        move |dir: &Path| io::save_color(&dir.join("image.png"), &Grid::new(4, 3, [value, 0, 0]))
    }

    #[test]
    fn identical_jobs_are_cached() {
        let root = tempfile::tempdir().unwrap();
        let b = BackendSpec::builtin();
        let t = Duration::from_secs(5);
        let first = run_job(root.path(), inpaint_manifest(), &b, t, write_image(7)).unwrap();
        assert!(first.ok() && !first.cached, "{}", first.manifest.diagnostics);
        let again = run_job(root.path(), inpaint_manifest(), &b, t, write_image(7)).unwrap();
        assert!(again.cached);
        assert_eq!(again.name, first.name);
        let other = run_job(root.path(), inpaint_manifest(), &b, t, write_image(8)).unwrap();
        assert!(!other.cached);
        assert_ne!(other.name, first.name);
        let params = inpaint_manifest().with_param("seed", 1);
        let p = run_job(root.path(), params, &b, t, write_image(7)).unwrap();
        assert_ne!(p.name, first.name);
        // no scratch directories left behind
        let names: Vec<String> = std::fs::read_dir(root.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names.len(), 3);
        assert!(names.iter().all(|n| n.starts_with("inpaint-")));
    }

    #[test]
    fn failed_jobs_are_rerun() {
        let root = tempfile::tempdir().unwrap();
        let b = BackendSpec::builtin();
        let t = Duration::from_secs(5);
        // builtin inpaint needs the mask inputs of the full protocol
        let m = StageManifest::new(INPAINT).with_output("image", INPAINTED_FILE);
        let write = |_: &Path| Ok(());
        let first = run_job(root.path(), m.clone(), &b, t, write).unwrap();
        assert!(!first.ok());
        let again = run_job(root.path(), m, &b, t, write).unwrap();
        assert!(!again.cached);
    }

    #[test]
    fn unwritten_inputs_are_an_error() {
        let root = tempfile::tempdir().unwrap();
        let m = inpaint_manifest().with_input("mask", "mask.png");
        let r = run_job(root.path(), m, &BackendSpec::builtin(), Duration::from_secs(1), write_image(1));
        assert!(r.is_err());
    }
}
