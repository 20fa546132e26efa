use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::protocol::{ADAPTER_STAGES, OBJECT_STAGES, POSE};
use crate::correspond::{DEFAULT_MIN_SCORE, DEFAULT_PATCH, DEFAULT_STRIDE, DEFAULT_TOP_K};
use crate::error::{Error, Result};
use crate::maskops::{DEFAULT_DILATION_PX, DEFAULT_OVERLAP_THRESHOLD};
use crate::model::io;
use crate::register::RegistrationConfig;
use crate::synth::OracleConfig;

pub const CONFIG_VERSION: u32 = 1;
pub const DEFAULT_DESCRIBE_PROMPT: &str =
    "describe the objects in the image with their generic name and color as prompts in a list.";
pub const DEFAULT_TIMEOUT_S: f64 = 300.0;

/// Where a stage runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BackendSpec {
    /// `"oracle"`, `"builtin"` or `"none"`.
    Named(String),
    Command {
        command: String,
        #[serde(default)]
        args: Vec<String>,
        /// Overrides the run-wide adapter timeout.
        #[serde(default)]
        timeout_s: Option<f64>,
    },
}

impl BackendSpec {
    pub fn oracle() -> Self {
        BackendSpec::Named("oracle".into())
    }

    pub fn builtin() -> Self {
        BackendSpec::Named("builtin".into())
    }

    pub fn none() -> Self {
        BackendSpec::Named("none".into())
    }

    pub fn is_named(&self, name: &str) -> bool {
        matches!(self, BackendSpec::Named(n) if n == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DescriptorConfig {
    pub stride: usize,
    /// ZNCC patch side, pixels.
    pub patch: usize,
    pub top_k: usize,
    pub min_score: f64,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        DescriptorConfig {
            stride: DEFAULT_STRIDE,
            patch: DEFAULT_PATCH,
            top_k: DEFAULT_TOP_K,
            min_score: DEFAULT_MIN_SCORE,
        }
    }
}

/// Settings of the oracle backend.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSettings {
    /// Scene bundle the oracle answers from; the input frame directory when unset.
    pub truth: Option<PathBuf>,
    pub params: OracleConfig,
}

/// Forces one stage of one object to fail.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fault {
    pub object: usize,
    pub stage: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    pub describe_prompt: String,
    /// Backend per adapter stage; stages left out keep their default.
    #[serde(deserialize_with = "merge_backends")]
    pub backends: BTreeMap<String, BackendSpec>,
    pub adapter_timeout_s: f64,
    /// Worker threads for per-object chains; 0 uses every logical core.
    pub max_parallel_objects: usize,
    pub mask_overlap_threshold: f64,
    pub inpaint_dilation_px: usize,
    pub descriptors: DescriptorConfig,
    pub scale_trim: bool,
    pub registration: RegistrationConfig,
    pub oracle: OracleSettings,
    pub faults: Vec<Fault>,
}

fn default_backends() -> BTreeMap<String, BackendSpec> {
    let mut backends = BTreeMap::new();
    for stage in ADAPTER_STAGES {
        backends.insert(stage.to_string(), BackendSpec::oracle());
    }
    backends.insert(POSE.to_string(), BackendSpec::none());
    backends
}

fn merge_backends<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<BTreeMap<String, BackendSpec>, D::Error> {
    let mut backends = default_backends();
    backends.extend(BTreeMap::<String, BackendSpec>::deserialize(d)?);
    Ok(backends)
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let backends = default_backends();
        PipelineConfig {
            version: CONFIG_VERSION,
            describe_prompt: DEFAULT_DESCRIBE_PROMPT.into(),
            backends,
            adapter_timeout_s: DEFAULT_TIMEOUT_S,
            max_parallel_objects: 0,
            mask_overlap_threshold: DEFAULT_OVERLAP_THRESHOLD,
            inpaint_dilation_px: DEFAULT_DILATION_PX,
            descriptors: DescriptorConfig::default(),
            scale_trim: false,
            registration: RegistrationConfig::default(),
            oracle: OracleSettings::default(),
            faults: Vec::new(),
        }
    }
}

/// Stages a backend name may serve in-process.
fn builtin_stages() -> &'static [&'static str] {
    &["inpaint", "descriptors"]
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} unsupported, expected {CONFIG_VERSION}",
                self.version
            )));
        }
        for stage in self.backends.keys() {
            if !ADAPTER_STAGES.contains(&stage.as_str()) && stage != POSE {
                return Err(Error::Config(format!("unknown stage '{stage}' in backends")));
            }
        }
        for stage in ADAPTER_STAGES {
            let Some(b) = self.backends.get(stage) else {
                return Err(Error::Config(format!("no backend bound to stage '{stage}'")));
            };
            if b.is_named("none") {
                return Err(Error::Config(format!("stage '{stage}' cannot be disabled")));
            }
        }
        for (stage, b) in &self.backends {
            match b {
                BackendSpec::Named(n) => match n.as_str() {
                    "oracle" | "none" => {}
                    "builtin" if builtin_stages().contains(&stage.as_str()) => {}
                    "builtin" => return Err(Error::Config(format!("stage '{stage}' has no builtin backend"))),
                    other => return Err(Error::Config(format!("unknown backend '{other}' for stage '{stage}'"))),
                },
                BackendSpec::Command { command, timeout_s, .. } => {
                    if command.is_empty() {
                        return Err(Error::Config(format!("empty command for stage '{stage}'")));
                    }
                    if timeout_s.is_some_and(|t| !(t > 0.0 && t.is_finite())) {
                        return Err(Error::Config(format!("timeout for stage '{stage}' must be positive")));
                    }
                }
            }
        }
        if !(self.adapter_timeout_s > 0.0 && self.adapter_timeout_s.is_finite()) {
            return Err(Error::Config("adapter_timeout_s must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_overlap_threshold) {
            return Err(Error::Config("mask_overlap_threshold must lie in [0, 1]".into()));
        }
        let d = &self.descriptors;
        if d.stride == 0 || d.patch.is_multiple_of(2) || d.top_k == 0 {
            return Err(Error::Config("descriptor stride and top_k must be positive, patch odd".into()));
        }
        self.oracle.params.validate()?;
        for f in &self.faults {
            if !OBJECT_STAGES.contains(&f.stage.as_str()) {
                return Err(Error::Config(format!("fault names unknown per-object stage '{}'", f.stage)));
            }
        }
        Ok(())
    }

    pub fn backend(&self, stage: &str) -> BackendSpec {
        self.backends.get(stage).cloned().unwrap_or_else(BackendSpec::none)
    }

    pub fn timeout(&self, backend: &BackendSpec) -> Duration {
        let s = match backend {
            BackendSpec::Command {
                timeout_s: Some(t), ..
            } => *t,
            _ => self.adapter_timeout_s,
        };
        Duration::from_secs_f64(s)
    }

    pub fn uses_oracle(&self) -> bool {
        self.backends.values().any(|b| b.is_named("oracle"))
    }

    pub fn is_faulted(&self, object: usize, stage: &str) -> bool {
        self.faults.iter().any(|f| f.object == object && f.stage == stage)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.describe_prompt, DEFAULT_DESCRIBE_PROMPT);
        let text = serde_json::to_string(&cfg).unwrap();
        let back: PipelineConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_documents_take_defaults() {
        let cfg: PipelineConfig = serde_json::from_str(
            r#"{"version": 1, "backends": {"describe": "oracle", "segment": "oracle", "inpaint": "builtin",
                "image_to_3d": {"command": "i23d", "args": ["--fast"], "timeout_s": 20},
                "descriptors": "builtin", "pose": "none"}}"#,
        )
        .unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.timeout(&cfg.backend("image_to_3d")), Duration::from_secs(20));
        assert_eq!(cfg.timeout(&cfg.backend("inpaint")), Duration::from_secs(300));
        let cfg: PipelineConfig = serde_json::from_str(r#"{"backends": {"inpaint": "builtin"}}"#).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.backend("inpaint"), BackendSpec::builtin());
        assert_eq!(cfg.backend("describe"), BackendSpec::oracle());
        assert_eq!(cfg.backend("pose"), BackendSpec::none());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            r#"{"version": 2}"#,
            r#"{"colour": 1}"#,
            r#"{"backends": {"describe": "builtin", "segment": "oracle", "inpaint": "oracle", "image_to_3d": "oracle", "descriptors": "oracle"}}"#,
            r#"{"backends": {"describe": "none", "segment": "oracle", "inpaint": "oracle", "image_to_3d": "oracle", "descriptors": "oracle"}}"#,
            r#"{"backends": {"colour": "oracle"}}"#,
            r#"{"faults": [{"object": 0, "stage": "segment"}]}"#,
            r#"{"adapter_timeout_s": 0}"#,
            r#"{"descriptors": {"patch": 8}}"#,
        ];
        for text in bad {
            let parsed: std::result::Result<PipelineConfig, _> = serde_json::from_str(text);
            assert!(parsed.map_or(true, |c| c.validate().is_err()), "{text}");
        }
    }
}
