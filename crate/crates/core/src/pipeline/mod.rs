//! Stage orchestration: configuration, the filesystem adapter protocol,
//! content-addressed stage jobs, the per-object scheduler and evaluation.

mod backends;
pub mod config;
pub mod evaluate;
pub mod jobs;
pub mod manifest;
pub mod protocol;
pub mod record;
pub mod run;

pub use config::{BackendSpec, PipelineConfig};
pub use evaluate::{evaluate_reconstruction, evaluate_run, write_report, EvalConfig, EvalReport};
pub use jobs::{execute, run_job};
pub use manifest::{invoke_adapter, StageManifest, StageStatus};
pub use record::{load_reconstruction, ReconstructionDoc};
pub use run::{run_frame_dir, run_pipeline, PipelineRun, RunStatus};
