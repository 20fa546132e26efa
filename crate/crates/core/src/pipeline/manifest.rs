use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::protocol::check_relative;
use crate::error::{Error, Result};
use crate::model::io;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const STDOUT_FILE: &str = "stdout.log";
pub const STDERR_FILE: &str = "stderr.log";
/// Searched before `PATH` for adapter executables.
pub const ADAPTER_PATH_VAR: &str = "SCOMP_ADAPTER_PATH";
/// Bytes of captured stderr kept in diagnostics.
const DIAGNOSTIC_TAIL: u64 = 4096;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRef {
    pub role: String,
    pub path: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Pending,
    Ok,
    Failed,
}

/// Contract between the pipeline and one stage invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageManifest {
    pub stage: String,
    pub inputs: Vec<FileRef>,
    pub params: BTreeMap<String, Value>,
    pub outputs: Vec<FileRef>,
    pub status: StageStatus,
    #[serde(default)]
    pub diagnostics: String,
}

impl StageManifest {
    pub fn new(stage: &str) -> Self {
        StageManifest {
            stage: stage.into(),
            inputs: Vec::new(),
            params: BTreeMap::new(),
            outputs: Vec::new(),
            status: StageStatus::Pending,
            diagnostics: String::new(),
        }
    }

    pub fn with_input(mut self, role: &str, path: &str) -> Self {
        self.inputs.push(FileRef {
            role: role.into(),
            path: path.into(),
        });
        self
    }

    pub fn with_output(mut self, role: &str, path: &str) -> Self {
        self.outputs.push(FileRef {
            role: role.into(),
            path: path.into(),
        });
        self
    }

    pub fn with_param(mut self, key: &str, value: impl Serialize) -> Self {
        let v = serde_json::to_value(value).expect("parameters serialize");
        self.params.insert(key.into(), v);
        self
    }

    pub fn input(&self, role: &str) -> Result<&str> {
        lookup(&self.inputs, role).ok_or_else(|| Error::Stage(format!("{}: no input with role '{role}'", self.stage)))
    }

    pub fn output(&self, role: &str) -> Result<&str> {
        lookup(&self.outputs, role).ok_or_else(|| Error::Stage(format!("{}: no output with role '{role}'", self.stage)))
    }

    pub fn param<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .params
            .get(key)
            .ok_or_else(|| Error::Stage(format!("{}: missing parameter '{key}'", self.stage)))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Stage(format!("{}: parameter '{key}': {e}", self.stage)))
    }

    /// Paths relative and inside the job directory, roles unique per side.
    pub fn validate(&self) -> Result<()> {
        for side in [&self.inputs, &self.outputs] {
            for (i, f) in side.iter().enumerate() {
                check_relative(&f.path)?;
                if side[..i].iter().any(|g| g.role == f.role) {
                    return Err(Error::Stage(format!("{}: duplicate role '{}'", self.stage, f.role)));
                }
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: StageManifest = io::read_json(&dir.join(MANIFEST_FILE))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        io::write_json(&dir.join(MANIFEST_FILE), self)
    }

    pub fn missing_inputs(&self, dir: &Path) -> Vec<&str> {
        missing(&self.inputs, dir)
    }

    pub fn missing_outputs(&self, dir: &Path) -> Vec<&str> {
        missing(&self.outputs, dir)
    }

    /// Pending to ok or failed; a finished manifest never changes status again.
    pub fn finish(&mut self, outcome: std::result::Result<(), String>) -> Result<()> {
        if self.status != StageStatus::Pending {
            return Err(Error::Stage(format!("{}: status already {:?}", self.stage, self.status)));
        }
        match outcome {
            Ok(()) => self.status = StageStatus::Ok,
            Err(d) => {
                self.status = StageStatus::Failed;
                self.diagnostics = d;
            }
        }
        Ok(())
    }

    /// Mark ok if every declared output exists, failed otherwise.
    pub(crate) fn finish_checked(&mut self, dir: &Path, outcome: std::result::Result<(), String>) -> Result<()> {
        let outcome = outcome.and_then(|()| {
            let absent = self.missing_outputs(dir);
            if absent.is_empty() {
                Ok(())
            } else {
                Err(format!("missing outputs: {}", absent.join(", ")))
            }
        });
        self.finish(outcome)
    }
}

fn lookup<'a>(files: &'a [FileRef], role: &str) -> Option<&'a str> {
    files.iter().find(|f| f.role == role).map(|f| f.path.as_str())
}

fn missing<'a>(files: &'a [FileRef], dir: &Path) -> Vec<&'a str> {
    files
        .iter()
        .filter(|f| !dir.join(&f.path).is_file())
        .map(|f| f.path.as_str())
        .collect()
}

/// An external adapter executable.
#[derive(Debug, Clone, PartialEq)]
pub struct Subprocess {
    pub command: String,
    pub args: Vec<String>,
    pub timeout: Duration,
}

fn is_executable(path: &Path) -> bool {
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        path.metadata().is_ok_and(|m| m.is_file() && m.permissions().mode() & 0o111 != 0)
    }
    #[cfg(not(unix))]
    {
        path.is_file()
    }
}

/// Locate an adapter: paths with a separator are used as given, bare names
/// are searched in `SCOMP_ADAPTER_PATH`, then `PATH`.
pub fn resolve_command(command: &str) -> Option<PathBuf> {
    if command.contains(std::path::MAIN_SEPARATOR) || command.contains('/') {
        let p = PathBuf::from(command);
        return is_executable(&p).then_some(p);
    }
    [ADAPTER_PATH_VAR, "PATH"]
        .iter()
        .filter_map(std::env::var_os)
        .flat_map(|v| std::env::split_paths(&v).collect::<Vec<_>>())
        .map(|d| d.join(command))
        .find(|p| is_executable(p))
}

fn tail(path: &Path) -> String {
    let Ok(mut f) = File::open(path) else {
        return String::new();
    };
    let len = f.metadata().map(|m| m.len()).unwrap_or(0);
    if f.seek(SeekFrom::Start(len.saturating_sub(DIAGNOSTIC_TAIL))).is_err() {
        return String::new();
    }
    let mut buf = Vec::new();
    let _ = f.read_to_end(&mut buf);
    String::from_utf8_lossy(&buf).trim().to_string()
}

/// Run an adapter on a job directory: write the pending manifest, launch the
/// backend with the directory as its sole extra argument and wait up to the
/// timeout. The returned manifest is ok only if the process exits 0 and every
/// declared output exists; it is also written back to the directory.
pub fn invoke_adapter(manifest: StageManifest, dir: &Path, backend: &Subprocess) -> Result<StageManifest> {
    manifest.validate()?;
    let mut manifest = manifest;
    manifest.status = StageStatus::Pending;
    manifest.diagnostics.clear();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    manifest.save(dir)?;
    let outcome = run_process(dir, backend);
    manifest.finish_checked(dir, outcome)?;
    manifest.save(dir)?;
    Ok(manifest)
}

fn run_process(dir: &Path, backend: &Subprocess) -> std::result::Result<(), String> {
    let exe = resolve_command(&backend.command)
        .ok_or_else(|| format!("adapter '{}' not found in {ADAPTER_PATH_VAR} or PATH", backend.command))?;
    let open = |name: &str| File::create(dir.join(name)).map_err(|e| format!("cannot create {name}: {e}"));
    let (stdout, stderr) = (open(STDOUT_FILE)?, open(STDERR_FILE)?);
    let mut child = Command::new(&exe)
        .args(&backend.args)
        .arg(dir)
        .stdin(Stdio::null())
        .stdout(stdout)
        .stderr(stderr)
        .spawn()
        .map_err(|e| format!("cannot launch {}: {e}", exe.display()))?;
    let start = Instant::now();
    let mut pause = Duration::from_millis(2);
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) if start.elapsed() >= backend.timeout => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(format!("timed out after {:.1} s", backend.timeout.as_secs_f64()));
            }
            Ok(None) => {
                std::thread::sleep(pause.min(backend.timeout.saturating_sub(start.elapsed())));
                pause = (pause * 2).min(Duration::from_millis(50));
            }
            Err(e) => return Err(format!("wait failed: {e}")),
        }
    };
    if status.success() {
        return Ok(());
    }
    let err = tail(&dir.join(STDERR_FILE));
    let code = status.code().map_or_else(|| "signal".to_string(), |c| c.to_string());
    Err(if err.is_empty() {
        format!("exit status {code}")
    } else {
        format!("exit status {code}: {err}")
    })
}

#[cfg(all(test, unix))]
mod tests {
    use super::*;
    use std::os::unix::fs::PermissionsExt;

    fn script(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, format!("#!/bin/sh\n{body}\n")).unwrap();
        std::fs::set_permissions(&p, std::fs::Permissions::from_mode(0o755)).unwrap();
        p
    }

    fn job(root: &Path) -> (PathBuf, StageManifest) {
        let dir = root.join("job");
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("in.txt"), "payload").unwrap();
        let m = StageManifest::new("echo")
            .with_input("text", "in.txt")
            .with_output("text", "out.txt")
            .with_param("n", 3);
        (dir, m)
    }

    fn backend(p: &Path, timeout_ms: u64) -> Subprocess {
        Subprocess {
            command: p.to_string_lossy().into_owned(),
            args: Vec::new(),
            timeout: Duration::from_millis(timeout_ms),
        }
    }

    #[test]
    fn echo_adapter_succeeds() {
        let root = tempfile::tempdir().unwrap();
        let exe = script(root.path(), "echo", r#"cp "$1/in.txt" "$1/out.txt""#);
        let (dir, m) = job(root.path());
        let done = invoke_adapter(m, &dir, &backend(&exe, 10_000)).unwrap();
        assert_eq!(done.status, StageStatus::Ok, "{}", done.diagnostics);
        assert_eq!(std::fs::read_to_string(dir.join("out.txt")).unwrap(), "payload");
        assert_eq!(StageManifest::load(&dir).unwrap(), done);
        assert_eq!(done.param::<i32>("n").unwrap(), 3);
    }

    #[test]
    fn nonzero_exit_fails_with_stderr() {
        let root = tempfile::tempdir().unwrap();
        let exe = script(root.path(), "bad", "echo 'model exploded' >&2\nexit 1");
        let (dir, m) = job(root.path());
        let done = invoke_adapter(m, &dir, &backend(&exe, 10_000)).unwrap();
        assert_eq!(done.status, StageStatus::Failed);
        assert!(done.diagnostics.contains("exit status 1"), "{}", done.diagnostics);
        assert!(done.diagnostics.contains("model exploded"));
    }

    #[test]
    fn partial_outputs_fail() {
        let root = tempfile::tempdir().unwrap();
        let exe = script(root.path(), "partial", r#"touch "$1/out.txt""#);
        let (dir, m) = job(root.path());
        let m = m.with_output("extra", "extra.txt");
        let done = invoke_adapter(m, &dir, &backend(&exe, 10_000)).unwrap();
        assert_eq!(done.status, StageStatus::Failed);
        assert!(done.diagnostics.contains("extra.txt"));
    }

    #[test]
    fn slow_adapter_times_out() {
        let root = tempfile::tempdir().unwrap();
        let exe = script(root.path(), "slow", "sleep 5");
        let (dir, m) = job(root.path());
        let start = Instant::now();
        let done = invoke_adapter(m, &dir, &backend(&exe, 200)).unwrap();
        assert!(start.elapsed() < Duration::from_secs(4));
        assert_eq!(done.status, StageStatus::Failed);
        assert!(done.diagnostics.contains("timed out"));
    }

    #[test]
    fn unknown_adapter_fails() {
        let root = tempfile::tempdir().unwrap();
        let (dir, m) = job(root.path());
        let b = Subprocess {
            command: "scomp-no-such-adapter".into(),
            args: Vec::new(),
            timeout: Duration::from_secs(1),
        };
        let done = invoke_adapter(m, &dir, &b).unwrap();
        assert_eq!(done.status, StageStatus::Failed);
        assert!(done.diagnostics.contains("not found"));
    }

    #[test]
    fn status_moves_forward_only() {
        let mut m = StageManifest::new("x");
        m.finish(Ok(())).unwrap();
        assert!(m.finish(Err("again".into())).is_err());
        assert_eq!(m.status, StageStatus::Ok);
    }

    #[test]
    fn escaping_paths_and_duplicate_roles_are_invalid() {
        assert!(StageManifest::new("x").with_input("a", "../a").validate().is_err());
        assert!(StageManifest::new("x").with_output("a", "/tmp/a").validate().is_err());
        assert!(StageManifest::new("x").with_input("a", "a").with_input("a", "b").validate().is_err());
        assert!(StageManifest::new("x").with_input("a", "a").with_output("a", "b").validate().is_ok());
    }

    #[test]
    fn manifest_json_shape() {
        let m = StageManifest::new("segment")
            .with_input("image", "rgb.png")
            .with_output("masks", "masks.json");
        let v = serde_json::to_value(&m).unwrap();
        assert_eq!(v["status"], "pending");
        assert_eq!(v["inputs"][0]["role"], "image");
        assert_eq!(v["outputs"][0]["path"], "masks.json");
    }
}
