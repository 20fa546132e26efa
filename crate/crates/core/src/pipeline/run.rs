use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;

use super::config::{BackendSpec, PipelineConfig};
use super::jobs::{run_job, JobOutcome};
use super::manifest::StageManifest;
use super::protocol::*;
use super::record::*;
use crate::correspond::{lift_to_3d, match_descriptors, DescriptorMap};
use crate::error::{Error, Result};
use crate::maskops::{build_inpaint_job, select_masks, MaskCandidateSet, JOB_IMAGE_FILE, JOB_MASK_FILE, JOB_PROMPT_FILE};
use crate::model::{io, Grid, ObjectMask, RgbdFrame, RigidTransform, SceneObject, SceneReconstruction, TexturedMesh, Vec3};
use crate::raster::{backproject, render_object_view_from, RenderedView};
use crate::register::{icp_register_seeded, kabsch, rescore_adapter_pose, RegistrationResult};
use crate::scaling::{apply_scale, estimate_scale_with};
use crate::synth::is_bundle;

pub const SELECT_MASKS: &str = "select_masks";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    /// Every selected object was reconstructed.
    Complete,
    /// Some objects failed, at least one succeeded.
    Partial,
    /// Nothing reconstructed.
    Empty,
}

impl RunStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Complete => 0,
            RunStatus::Partial => 2,
            RunStatus::Empty => 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub run_dir: PathBuf,
    pub status: RunStatus,
    pub reconstruction: SceneReconstruction,
    pub doc: ReconstructionDoc,
    pub record: RunRecord,
    pub timings: Vec<Timing>,
    pub config: PipelineConfig,
}

impl PipelineRun {
    /// Stage jobs that actually executed rather than coming from the cache.
    pub fn executed_jobs(&self) -> usize {
        self.timings.iter().filter(|t| is_job_stage(&t.stage) && !t.cached).count()
    }
}

fn is_job_stage(stage: &str) -> bool {
    ADAPTER_STAGES.contains(&stage) || stage == POSE
}

struct Ctx<'a> {
    cfg: &'a PipelineConfig,
    frame: &'a RgbdFrame,
    stages_dir: PathBuf,
    truth: Option<PathBuf>,
    start: Instant,
    timings: Mutex<Vec<Timing>>,
}

/// Failure of one stage, carried to the object or scene record.
struct StageFailure {
    stage: String,
    diagnostics: String,
}

impl Ctx<'_> {
    fn ms(&self) -> f64 {
        self.start.elapsed().as_secs_f64() * 1e3
    }

    fn log_timing(&self, object: Option<usize>, stage: &str, start_ms: f64, cached: bool) {
        let t = Timing {
            object,
            stage: stage.into(),
            start_ms,
            end_ms: self.ms(),
            cached,
        };
        self.timings.lock().expect("timings poisoned").push(t);
    }

    fn with_oracle_params(&self, m: StageManifest, backend: &BackendSpec) -> StageManifest {
        if !backend.is_named("oracle") {
            return m;
        }
        m.with_param("truth", &self.truth).with_param("oracle", self.cfg.oracle.params)
    }

    /// Run an adapter-stage job and record it.
    fn job(
        &self,
        object: Option<usize>,
        records: &mut Vec<StageRecord>,
        manifest: StageManifest,
        write_inputs: impl FnOnce(&Path) -> Result<()>,
    ) -> std::result::Result<JobOutcome, StageFailure> {
        let stage = manifest.stage.clone();
        let t0 = self.ms();
        let backend = self.cfg.backend(&stage);
        let manifest = self.with_oracle_params(manifest, &backend);
        let outcome = run_job(&self.stages_dir, manifest, &backend, self.cfg.timeout(&backend), write_inputs);
        let cached = outcome.as_ref().is_ok_and(|o| o.cached);
        self.log_timing(object, &stage, t0, cached);
        let (job, diagnostics) = match outcome {
            Ok(o) if o.ok() => {
                records.push(StageRecord {
                    stage,
                    status: RecordStatus::Ok,
                    job: Some(o.name.clone()),
                    diagnostics: String::new(),
                });
                return Ok(o);
            }
            Ok(o) => (Some(o.name), o.manifest.diagnostics),
            Err(e) => (None, e.to_string()),
        };
        records.push(StageRecord {
            stage: stage.clone(),
            status: RecordStatus::Failed,
            job,
            diagnostics: diagnostics.clone(),
        });
        Err(StageFailure { stage, diagnostics })
    }

    /// Run an in-process stage and record it.
    fn local<T>(
        &self,
        object: usize,
        records: &mut Vec<StageRecord>,
        stage: &str,
        f: impl FnOnce() -> Result<T>,
    ) -> std::result::Result<T, StageFailure> {
        let t0 = self.ms();
        let r = f();
        self.log_timing(Some(object), stage, t0, false);
        match r {
            Ok(v) => {
                records.push(StageRecord {
                    stage: stage.into(),
                    status: RecordStatus::Ok,
                    job: None,
                    diagnostics: String::new(),
                });
                Ok(v)
            }
            Err(e) => Err(fail(records, stage, e.to_string())),
        }
    }

    fn fault(&self, object: usize, records: &mut Vec<StageRecord>, stage: &str) -> std::result::Result<(), StageFailure> {
        if self.cfg.is_faulted(object, stage) {
            return Err(fail(records, stage, "injected fault".into()));
        }
        Ok(())
    }
}

fn fail(records: &mut Vec<StageRecord>, stage: &str, diagnostics: String) -> StageFailure {
    records.push(StageRecord {
        stage: stage.into(),
        status: RecordStatus::Failed,
        job: None,
        diagnostics: diagnostics.clone(),
    });
    StageFailure {
        stage: stage.into(),
        diagnostics,
    }
}

fn copy_from(job: &JobOutcome, role: &str, to: &Path) -> Result<()> {
    let from = job.dir.join(job.manifest.output(role)?);
    std::fs::copy(&from, to).map_err(|e| Error::io(to, e))?;
    Ok(())
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(p).map_err(|e| Error::io(p, e))
}

/// Run the pipeline on a frame directory (`rgb.png`, `depth.png`,
/// `intrinsics.json`). A scene bundle doubles as the oracle's ground truth
/// unless the config names another.
pub fn run_frame_dir(frame_dir: &Path, cfg: &PipelineConfig, run_dir: &Path) -> Result<PipelineRun> {
    let frame = io::load_frame_dir(frame_dir)?;
    let mut cfg = cfg.clone();
    if cfg.oracle.truth.is_none() && is_bundle(frame_dir) {
        cfg.oracle.truth = Some(absolute(frame_dir)?);
    }
    run_inner(&frame, Some(absolute(frame_dir)?), &cfg, run_dir)
}

/// Run the pipeline on an in-memory frame.
pub fn run_pipeline(frame: &RgbdFrame, cfg: &PipelineConfig, run_dir: &Path) -> Result<PipelineRun> {
    run_inner(frame, None, cfg, run_dir)
}

fn run_inner(frame: &RgbdFrame, frame_dir: Option<PathBuf>, cfg: &PipelineConfig, run_dir: &Path) -> Result<PipelineRun> {
    cfg.validate()?;
    let truth = cfg.oracle.truth.as_deref().map(absolute).transpose()?;
    if cfg.uses_oracle() && truth.is_none() {
        return Err(Error::Config("oracle backends need a ground-truth scene bundle".into()));
    }
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    cfg.save(&run_dir.join(CONFIG_SNAPSHOT_FILE))?;
    let ctx = Ctx {
        cfg,
        frame,
        stages_dir: run_dir.join(STAGES_DIR),
        truth: truth.clone(),
        start: Instant::now(),
        timings: Mutex::new(Vec::new()),
    };

    let mut scene_records = Vec::new();
    let selected = match scene_stages(&ctx, &mut scene_records) {
        Ok(masks) => masks,
        Err(f) => {
            let diagnostics = format!("{}: {}", f.stage, f.diagnostics);
            return finish(&ctx, run_dir, frame_dir, scene_records, Vec::new(), diagnostics);
        }
    };
    if selected.is_empty() {
        return finish(&ctx, run_dir, frame_dir, scene_records, Vec::new(), "no objects found".into());
    }

    let threads = if cfg.max_parallel_objects == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        cfg.max_parallel_objects
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Stage(format!("worker pool: {e}")))?;
    let results: Vec<ObjectResult> = pool.install(|| {
        (0..selected.len())
            .into_par_iter()
            .map(|i| run_object(&ctx, i, &selected, run_dir))
            .collect()
    });
    finish(&ctx, run_dir, frame_dir, scene_records, results, String::new())
}

/// describe, segment and mask selection.
fn scene_stages(ctx: &Ctx, records: &mut Vec<StageRecord>) -> std::result::Result<Vec<ObjectMask>, StageFailure> {
    let describe = StageManifest::new(DESCRIBE)
        .with_input("image", io::COLOR_FILE)
        .with_output("labels", LABELS_FILE)
        .with_param("prompt", &ctx.cfg.describe_prompt);
    let d = ctx.job(None, records, describe, |dir| io::save_color(&dir.join(io::COLOR_FILE), &ctx.frame.rgb))?;
    let labels = read_labels(&d.dir, &d.manifest).map_err(|e| fail(records, DESCRIBE, e.to_string()))?;
    if labels.is_empty() {
        return Ok(Vec::new());
    }

    let segment = StageManifest::new(SEGMENT)
        .with_input("image", io::COLOR_FILE)
        .with_input("labels", LABELS_FILE)
        .with_output("masks", MASKS_FILE);
    let s = ctx.job(None, records, segment, |dir| {
        io::save_color(&dir.join(io::COLOR_FILE), &ctx.frame.rgb)?;
        copy_from(&d, "labels", &dir.join(LABELS_FILE))
    })?;
    let t0 = ctx.ms();
    let selected = read_masks(&s.dir, &s.manifest).and_then(|masks| {
        if let Some(m) = masks.iter().find(|m| m.width() != ctx.frame.width() || m.height() != ctx.frame.height()) {
            return Err(Error::DimensionMismatch(format!("mask '{}' does not match the frame", m.prompt)));
        }
        select_masks(&MaskCandidateSet::new(masks)?, ctx.cfg.mask_overlap_threshold)
    });
    ctx.log_timing(None, SELECT_MASKS, t0, false);
    match selected {
        Ok(m) => {
            records.push(StageRecord {
                stage: SELECT_MASKS.into(),
                status: RecordStatus::Ok,
                job: None,
                diagnostics: String::new(),
            });
            Ok(m)
        }
        Err(e) => Err(fail(records, SELECT_MASKS, e.to_string())),
    }
}

struct ObjectResult {
    record: ObjectRecord,
    outcome: std::result::Result<(SceneObject, ObjectEntry), StageFailure>,
}

fn object_dir_name(i: usize) -> String {
    format!("{OBJECTS_DIR}/obj_{i:03}")
}

fn run_object(ctx: &Ctx, i: usize, masks: &[ObjectMask], run_dir: &Path) -> ObjectResult {
    let mut stages = Vec::new();
    let outcome = object_chain(ctx, i, masks, run_dir, &mut stages);
    ObjectResult {
        record: ObjectRecord {
            index: i,
            prompt: masks[i].prompt.clone(),
            stages,
        },
        outcome,
    }
}

fn object_chain(
    ctx: &Ctx,
    i: usize,
    masks: &[ObjectMask],
    run_dir: &Path,
    rec: &mut Vec<StageRecord>,
) -> std::result::Result<(SceneObject, ObjectEntry), StageFailure> {
    let cfg = ctx.cfg;
    let target = &masks[i];
    let others: Vec<ObjectMask> = masks
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, m)| m.clone())
        .collect();
    let save_object_mask = |dir: &Path| io::save_mask(&dir.join(OBJECT_MASK_FILE), &target.bits);

    ctx.fault(i, rec, INPAINT_JOB)?;
    let job = ctx.local(i, rec, INPAINT_JOB, || {
        build_inpaint_job(target, &others, ctx.frame, cfg.inpaint_dilation_px)
    })?;

    ctx.fault(i, rec, INPAINT)?;
    let inpaint = StageManifest::new(INPAINT)
        .with_input("image", JOB_IMAGE_FILE)
        .with_input("mask", JOB_MASK_FILE)
        .with_input("prompt", JOB_PROMPT_FILE)
        .with_input("object_mask", OBJECT_MASK_FILE)
        .with_output("image", INPAINTED_FILE);
    let inpainted = ctx.job(Some(i), rec, inpaint, |dir| {
        job.save(dir)?;
        save_object_mask(dir)
    })?;

    ctx.fault(i, rec, IMAGE_TO_3D)?;
    let i23d = StageManifest::new(IMAGE_TO_3D)
        .with_input("image", INPAINTED_FILE)
        .with_input("object_mask", OBJECT_MASK_FILE)
        .with_output("mesh", MESH_FILE)
        .with_param("viewpoint_file", VIEWPOINT_FILE);
    let generated = ctx.job(Some(i), rec, i23d, |dir| {
        copy_from(&inpainted, "image", &dir.join(INPAINTED_FILE))?;
        save_object_mask(dir)
    })?;

    ctx.fault(i, rec, RENDER)?;
    let (mesh, viewpoint, view) = ctx.local(i, rec, RENDER, || {
        let mesh = io::load_mesh(&generated.dir.join(generated.manifest.output("mesh")?))?;
        let viewpoint = read_viewpoint(&generated.dir)?;
        let view = render_object_view_from(&mesh, &viewpoint.direction())?;
        Ok((mesh, viewpoint, view))
    })?;

    ctx.fault(i, rec, DESCRIPTORS)?;
    let d = cfg.descriptors;
    let rendered_mask = view.foreground_mask();
    let origin = |m: &Grid<bool>| m.bounding_box().map_or((0, 0), |(x, y, _, _)| (x, y));
    let (obs_origin, ren_origin) = (origin(&target.bits), origin(&rendered_mask));
    let desc = StageManifest::new(DESCRIPTORS)
        .with_input("observed_image", OBSERVED_IMAGE_FILE)
        .with_input("observed_mask", OBSERVED_MASK_FILE)
        .with_input("rendered_image", RENDERED_IMAGE_FILE)
        .with_input("rendered_depth", RENDERED_DEPTH_FILE)
        .with_input("rendered_mask", RENDERED_MASK_FILE)
        .with_input("mesh", MESH_FILE)
        .with_input("viewpoint", VIEWPOINT_FILE)
        .with_output("observed", OBSERVED_DESC_FILE)
        .with_output("rendered", RENDERED_DESC_FILE)
        .with_param("stride", d.stride)
        .with_param("patch", d.patch)
        .with_param("observed_origin", obs_origin)
        .with_param("rendered_origin", ren_origin);
    let descriptors = ctx.job(Some(i), rec, desc, |dir| {
        io::save_color(&dir.join(OBSERVED_IMAGE_FILE), &ctx.frame.rgb)?;
        io::save_mask(&dir.join(OBSERVED_MASK_FILE), &target.bits)?;
        write_view(dir, &view, &rendered_mask)?;
        copy_from(&generated, "mesh", &dir.join(MESH_FILE))?;
        io::write_json(&dir.join(VIEWPOINT_FILE), &viewpoint)
    })?;

    ctx.fault(i, rec, MATCH)?;
    let (observed, rendered) = ctx.local(i, rec, MATCH, || {
        let load = |role: &str, origin: (usize, usize)| {
            DescriptorMap::load_tensor(&descriptors.dir.join(descriptors.manifest.output(role)?), d.stride, origin)
        };
        let (a, b) = (load("observed", obs_origin)?, load("rendered", ren_origin)?);
        let corr = match_descriptors(&a, &b, d.top_k, d.min_score)?;
        lift_to_3d(&corr, ctx.frame, target, &view)
    })?;

    ctx.fault(i, rec, SCALE)?;
    let (estimate, scaled) = ctx.local(i, rec, SCALE, || {
        let e = estimate_scale_with(&observed, &rendered, cfg.scale_trim)?;
        let scaled = apply_scale(&mesh, &e);
        Ok((e, scaled))
    })?;

    ctx.fault(i, rec, POSE)?;
    let pose_backend = cfg.backend(POSE);
    let adapter_pose = if pose_backend.is_named("none") {
        None
    } else {
        let pose = StageManifest::new(POSE)
            .with_input("image", io::COLOR_FILE)
            .with_input("depth", io::DEPTH_FILE)
            .with_input("intrinsics", io::INTRINSICS_FILE)
            .with_input("mask", OBJECT_MASK_FILE)
            .with_input("mesh", MESH_FILE)
            .with_output("pose", POSE_FILE);
        let p = ctx.job(Some(i), rec, pose, |dir| {
            io::save_frame_dir(dir, ctx.frame)?;
            save_object_mask(dir)?;
            io::save_mesh(&scaled, &dir.join(MESH_FILE))
        })?;
        let pose: RigidTransform = io::read_json(&p.dir.join(POSE_FILE)).map_err(|e| fail(rec, POSE, e.to_string()))?;
        Some(pose)
    };

    ctx.fault(i, rec, REGISTER)?;
    let result = ctx.local(i, rec, REGISTER, || {
        register(&scaled, &mesh, estimate.factor, &observed.points, &rendered.points, target, ctx, adapter_pose)
    })?;

    let rel = format!("{}/{MESH_FILE}", object_dir_name(i));
    let out = run_dir.join(&rel);
    let saved = out
        .parent()
        .map_or(Ok(()), |p| std::fs::create_dir_all(p).map_err(|e| Error::io(p, e)))
        .and_then(|()| io::save_mesh(&scaled, &out));
    saved.map_err(|e| fail(rec, REGISTER, e.to_string()))?;
    let entry = ObjectEntry {
        index: i,
        prompt: target.prompt.clone(),
        mesh: rel,
        pose: result.pose,
        scale: estimate.factor,
        rmse: result.rmse,
        inlier_fraction: result.inlier_fraction,
        converged: result.converged,
    };
    let object = SceneObject {
        mesh: scaled,
        pose: result.pose,
        prompt: target.prompt.clone(),
    };
    Ok((object, entry))
}

fn write_view(dir: &Path, view: &RenderedView, mask: &Grid<bool>) -> Result<()> {
    io::save_color(&dir.join(RENDERED_IMAGE_FILE), &view.color)?;
    io::save_depth(&dir.join(RENDERED_DEPTH_FILE), &view.depth)?;
    io::save_mask(&dir.join(RENDERED_MASK_FILE), mask)
}

/// ICP over the octahedral seeds plus a rigid fit of the lifted
/// correspondences; an adapter pose, when present, is scored first.
#[allow(clippy::too_many_arguments)]
fn register(
    scaled: &TexturedMesh,
    mesh: &TexturedMesh,
    factor: f64,
    observed: &[Vec3],
    rendered: &[Vec3],
    target: &ObjectMask,
    ctx: &Ctx,
    adapter_pose: Option<RigidTransform>,
) -> Result<RegistrationResult> {
    let partial = backproject(ctx.frame, Some(target))?;
    let reg = &ctx.cfg.registration;
    if let Some(pose) = adapter_pose {
        return rescore_adapter_pose(scaled, &pose, &partial, reg);
    }
    let c = mesh.centroid();
    let src: Vec<Vec3> = rendered.iter().map(|p| c + (p - c) * factor).collect();
    let seeds: Vec<RigidTransform> = kabsch(&src, observed).into_iter().collect();
    icp_register_seeded(scaled, &partial, reg, &seeds)
}

fn finish(
    ctx: &Ctx,
    run_dir: &Path,
    frame_dir: Option<PathBuf>,
    scene: Vec<StageRecord>,
    results: Vec<ObjectResult>,
    diagnostics: String,
) -> Result<PipelineRun> {
    let mut objects = Vec::new();
    let mut entries = Vec::new();
    let mut failed = Vec::new();
    let mut records = Vec::new();
    for r in results {
        match r.outcome {
            Ok((o, e)) => {
                objects.push(o);
                entries.push(e);
            }
            Err(f) => failed.push(FailedEntry {
                index: r.record.index,
                prompt: r.record.prompt.clone(),
                stage: f.stage,
                diagnostics: f.diagnostics,
            }),
        }
        records.push(r.record);
    }
    let status = match (entries.is_empty(), failed.is_empty()) {
        (true, _) => RunStatus::Empty,
        (false, true) => RunStatus::Complete,
        (false, false) => RunStatus::Partial,
    };
    let doc = ReconstructionDoc {
        version: RECONSTRUCTION_VERSION,
        intrinsics: ctx.frame.intrinsics,
        objects: entries,
        failed,
        diagnostics,
    };
    let record = RunRecord {
        frame: frame_dir,
        truth: ctx.truth.clone(),
        scene,
        objects: records,
    };
    let mut timings = ctx.timings.lock().expect("timings poisoned").clone();
    timings.sort_by(|a, b| a.start_ms.total_cmp(&b.start_ms));
    io::write_json(&run_dir.join(RECONSTRUCTION_FILE), &doc)?;
    io::write_json(&run_dir.join(RUN_FILE), &record)?;
    io::write_json(&run_dir.join(TIMINGS_FILE), &timings)?;
    Ok(PipelineRun {
        run_dir: run_dir.to_path_buf(),
        status,
        reconstruction: SceneReconstruction::new(objects, ctx.frame.intrinsics)?,
        doc,
        record,
        timings,
        config: ctx.cfg.clone(),
    })
}
