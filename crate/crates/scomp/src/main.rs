use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;

use scomp_core::grasp::{fit_plane_ransac, scene_grasps, Grasp, GripperModel, Plane};
use scomp_core::model::{io, SceneReconstruction, Vec3};
use scomp_core::pipeline::evaluate::csv_path;
use scomp_core::pipeline::manifest::MANIFEST_FILE;
use scomp_core::pipeline::record::{RunRecord, RUN_FILE};
use scomp_core::pipeline::{
    evaluate_run, execute, load_reconstruction, run_frame_dir, write_report, EvalConfig, PipelineConfig,
    StageManifest, StageStatus,
};
use scomp_core::raster::backproject;
use scomp_core::synth::{generate_batch, is_bundle, load_bundle, save_bundle, SceneSpec};
use scomp_core::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 4;
/// Inlier distance for the support plane of a run's frame, meters.
const PLANE_THRESHOLD: f64 = 0.005;

#[derive(Parser)]
#[command(name = "scomp", version, about = "Single-view object-centric scene completion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Reconstruct the scene seen in one RGB-D frame.
    Run {
        /// Directory with rgb.png, depth.png and intrinsics.json.
        #[arg(long)]
        frame: PathBuf,
        /// Pipeline configuration (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate synthetic scene bundles.
    Synth {
        /// Scene specification (JSON).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Scenes with consecutive seeds, written to scene_NNNN subdirectories.
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Score a run against a ground-truth bundle.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// JSON report; a CSV with the same stem is written alongside.
        #[arg(long)]
        out: PathBuf,
        /// Evaluation settings (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Sample collision-free grasps on every object of a bundle or run.
    Grasp {
        /// Scene bundle or run directory.
        #[arg(long)]
        scene: PathBuf,
        /// Gripper model (JSON); the default gripper when omitted.
        #[arg(long)]
        gripper: Option<PathBuf>,
        /// Grasps per object.
        #[arg(long, default_value_t = 40)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Execute one stage job directory.
    Stage {
        /// The job's manifest.json.
        #[arg(long)]
        manifest: PathBuf,
        /// Configuration naming the stage's backend.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Unreadable or malformed configuration files are configuration errors.
fn as_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

fn load_config(path: Option<&Path>) -> scomp_core::Result<PipelineConfig> {
    let cfg = match path {
        Some(p) => PipelineConfig::load(p).map_err(as_config)?,
        None => PipelineConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn config_file<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> scomp_core::Result<T> {
    match path {
        Some(p) => io::read_json(p).map_err(as_config),
        None => Ok(T::default()),
    }
}

fn cmd_run(frame: &Path, config: Option<&Path>, out: &Path) -> scomp_core::Result<u8> {
    let cfg = load_config(config)?;
    let run = run_frame_dir(frame, &cfg, out)?;
    for f in &run.doc.failed {
        warn!("object {} ({}) failed at {}: {}", f.index, f.prompt, f.stage, f.diagnostics);
    }
    if !run.doc.diagnostics.is_empty() {
        warn!("{}", run.doc.diagnostics);
    }
    println!(
        "{:?}: {} reconstructed, {} failed, {} stage jobs executed",
        run.status,
        run.doc.objects.len(),
        run.doc.failed.len(),
        run.executed_jobs()
    );
    Ok(run.status.exit_code() as u8)
}

fn cmd_synth(spec: &Path, out: &Path, count: usize) -> scomp_core::Result<u8> {
    let spec: SceneSpec = config_file(Some(spec))?;
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    if count == 0 {
        return Err(Error::Config("count must be at least 1".into()));
    }
    for (k, scene) in generate_batch(&spec, count)?.iter().enumerate() {
        let dir = out.join(format!("scene_{k:04}"));
        save_bundle(scene, &dir)?;
        info!("seed {} -> {}", scene.seed, dir.display());
    }
    println!("{count} scene(s) written to {}", out.display());
    Ok(0)
}

fn cmd_eval(run: &Path, truth: &Path, out: &Path, config: Option<&Path>) -> scomp_core::Result<u8> {
    let cfg: EvalConfig = config_file(config)?;
    let report = evaluate_run(run, truth, &cfg)?;
    write_report(&report, out)?;
    let opt = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "miou {:.4}  cd x1e4 {}  mmd-emd x1e2 {}  gc {}",
        report.miou,
        opt(report.cd_x1e4),
        opt(report.mmd_emd_x1e2),
        opt(report.gc)
    );
    println!("{} and {}", out.display(), csv_path(out).display());
    Ok(0)
}

#[derive(Serialize)]
struct ObjectGrasps<'a> {
    index: usize,
    prompt: &'a str,
    attempts: usize,
    exhausted: bool,
    grasps: &'a [Grasp],
}

/// A bundle's objects with its table, or a run's objects with a plane fit to its frame.
fn grasp_scene(dir: &Path, seed: u64) -> scomp_core::Result<(SceneReconstruction, Option<Plane>)> {
    if is_bundle(dir) {
        let scene = load_bundle(dir)?;
        return Ok((scene.truth(), Some(scene.table_plane())));
    }
    let recon = load_reconstruction(dir)?;
    let record: RunRecord = io::read_json(&dir.join(RUN_FILE))?;
    let plane = match record.frame {
        Some(frame) => {
            let cloud = backproject(&io::load_frame_dir(&frame)?, None)?;
            Some(fit_plane_ransac(&cloud.points, PLANE_THRESHOLD, &Vec3::zeros(), seed)?)
        }
        None => None,
    };
    Ok((recon, plane))
}

fn cmd_grasp(scene: &Path, gripper: Option<&Path>, count: usize, seed: u64, out: Option<&Path>) -> scomp_core::Result<u8> {
    let gripper: GripperModel = config_file(gripper)?;
    gripper.validate().map_err(|e| Error::Config(e.to_string()))?;
    let (recon, plane) = grasp_scene(scene, seed)?;
    let sets = scene_grasps(&recon, &gripper, count, seed, plane)?;
    let doc: Vec<ObjectGrasps> = sets
        .iter()
        .zip(&recon.objects)
        .enumerate()
        .map(|(index, (s, o))| ObjectGrasps {
            index,
            prompt: &o.prompt,
            attempts: s.attempts,
            exhausted: s.exhausted,
            grasps: &s.grasps,
        })
        .collect();
    match out {
        Some(p) => io::write_json(p, &doc)?,
        None => println!("{}", serde_json::to_string_pretty(&doc)?),
    }
    for d in &doc {
        info!("object {} ({}): {} grasps", d.index, d.prompt, d.grasps.len());
    }
    Ok(0)
}

fn cmd_stage(manifest: &Path, config: Option<&Path>) -> scomp_core::Result<u8> {
    if manifest.file_name().is_some_and(|n| n != MANIFEST_FILE) {
        return Err(Error::Config(format!("expected a {MANIFEST_FILE}, got {}", manifest.display())));
    }
    let dir = manifest.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    let cfg = load_config(config)?;
    let m = StageManifest::load(&dir)?;
    let backend = cfg.backend(&m.stage);
    let done = execute(m, &dir, &backend, cfg.timeout(&backend))?;
    match done.status {
        StageStatus::Ok => {
            println!("{}: ok", done.stage);
            Ok(0)
        }
        _ => {
            eprintln!("{}: failed: {}", done.stage, done.diagnostics);
            Ok(EXIT_FAILURE)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Run { frame, config, out } => cmd_run(frame, config.as_deref(), out),
        Command::Synth { spec, out, count } => cmd_synth(spec, out, *count),
        Command::Eval { run, truth, out, config } => cmd_eval(run, truth, out, config.as_deref()),
        Command::Grasp {
            scene,
            gripper,
            count,
            seed,
            out,
        } => cmd_grasp(scene, gripper.as_deref(), *count, *seed, out.as_deref()),
        Command::Stage { manifest, config } => cmd_stage(manifest, config.as_deref()),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Config(_)) { EXIT_CONFIG } else { EXIT_FAILURE })
        }
    }
}
