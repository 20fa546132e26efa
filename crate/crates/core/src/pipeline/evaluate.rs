use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::record::ReconstructionDoc;
use crate::error::{Error, Result};
use crate::grasp::{grasp_collision_report, GripperModel, DEFAULT_GRASPS};
use crate::metrics::{scene_metrics, MetricsConfig, CD_REPORT_SCALE, EMD_REPORT_SCALE};
use crate::model::{io, SceneReconstruction};
use crate::synth::{load_bundle, SyntheticScene};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub metrics: MetricsConfig,
    pub gripper: GripperModel,
    /// Grasps sampled per reconstructed object.
    pub grasps: usize,
    pub grasp_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            metrics: MetricsConfig::default(),
            gripper: GripperModel::default(),
            grasps: DEFAULT_GRASPS,
            grasp_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectReport {
    pub truth_index: usize,
    pub prompt: String,
    pub matched_recon: usize,
    pub cd_x1e4: f64,
    pub mmd_emd_x1e2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspReport {
    pub recon_index: usize,
    pub prompt: String,
    pub matched_truth: Option<usize>,
    pub sampled: usize,
    pub colliding: usize,
}

/// Scene metrics and grasp collisions of one run against its ground truth.
/// Distances are `None` when nothing was reconstructed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub miou: f64,
    pub cd_x1e4: Option<f64>,
    pub mmd_emd_x1e2: Option<f64>,
    pub gc: Option<f64>,
    pub gc_undefined: bool,
    pub grasps: usize,
    pub truth_objects: usize,
    pub reconstructed: usize,
    pub failed: usize,
    pub per_object: Vec<ObjectReport>,
    pub grasp_objects: Vec<GraspReport>,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// Evaluate a reconstruction against a synthetic scene; grasps are checked
/// against the truth objects and the table.
pub fn evaluate_reconstruction(
    recon: &SceneReconstruction,
    truth: &SyntheticScene,
    failed: usize,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let t = truth.truth();
    let m = scene_metrics(&t, recon, &cfg.metrics)?;
    let (gc, grasp_objects) = if recon.is_empty() {
        (None, Vec::new())
    } else {
        let r = grasp_collision_report(recon, &t, &cfg.gripper, cfg.grasps, cfg.grasp_seed, Some(truth.table_plane()))?;
        let objects = r
            .objects
            .into_iter()
            .map(|o| GraspReport {
                recon_index: o.recon_index,
                prompt: o.prompt,
                matched_truth: o.matched_truth,
                sampled: o.sampled,
                colliding: o.colliding,
            })
            .collect();
        (r.gc, objects)
    };
    Ok(EvalReport {
        miou: m.miou,
        cd_x1e4: finite(m.cd * CD_REPORT_SCALE),
        mmd_emd_x1e2: finite(m.mmd_emd * EMD_REPORT_SCALE),
        gc,
        gc_undefined: gc.is_none(),
        grasps: cfg.grasps,
        truth_objects: t.objects.len(),
        reconstructed: recon.objects.len(),
        failed,
        per_object: m
            .per_object
            .into_iter()
            .map(|o| ObjectReport {
                truth_index: o.truth_index,
                prompt: o.prompt,
                matched_recon: o.matched_recon,
                cd_x1e4: o.cd * CD_REPORT_SCALE,
                mmd_emd_x1e2: o.emd * EMD_REPORT_SCALE,
            })
            .collect(),
        grasp_objects,
    })
}

/// Evaluate a finished run directory against a scene bundle.
pub fn evaluate_run(run_dir: &Path, truth_dir: &Path, cfg: &EvalConfig) -> Result<EvalReport> {
    let doc = ReconstructionDoc::load(run_dir)?;
    let recon = doc.to_scene(run_dir)?;
    let truth = load_bundle(truth_dir)?;
    evaluate_reconstruction(&recon, &truth, doc.failed.len(), cfg)
}

/// Path of the CSV written next to a JSON report.
pub fn csv_path(json: &Path) -> PathBuf {
    json.with_extension("csv")
}

#[derive(Serialize)]
struct CsvRow<'a> {
    scope: &'a str,
    index: Option<usize>,
    prompt: &'a str,
    miou: Option<f64>,
    cd_x1e4: Option<f64>,
    mmd_emd_x1e2: Option<f64>,
    gc: Option<f64>,
}

/// The report as CSV: one scene row, then one row per ground-truth object.
pub fn report_csv(report: &EvalReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::format("csv", e.to_string());
    w.serialize(CsvRow {
        scope: "scene",
        index: None,
        prompt: "",
        miou: Some(report.miou),
        cd_x1e4: report.cd_x1e4,
        mmd_emd_x1e2: report.mmd_emd_x1e2,
        gc: report.gc,
    })
    .map_err(csv_err)?;
    for o in &report.per_object {
        let gc = report
            .grasp_objects
            .iter()
            .find(|g| g.recon_index == o.matched_recon && g.sampled > 0)
            .map(|g| g.colliding as f64 / g.sampled as f64);
        w.serialize(CsvRow {
            scope: "object",
            index: Some(o.truth_index),
            prompt: &o.prompt,
            miou: None,
            cd_x1e4: Some(o.cd_x1e4),
            mmd_emd_x1e2: Some(o.mmd_emd_x1e2),
            gc,
        })
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format("csv", e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::format("csv", e.to_string()))
}

/// Write the JSON report and its CSV companion.
pub fn write_report(report: &EvalReport, json: &Path) -> Result<()> {
    io::write_json(json, report)?;
    let path = csv_path(json);
    std::fs::write(&path, report_csv(report)?).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, SceneSpec};

    fn fast() -> EvalConfig {
        EvalConfig {
            metrics: MetricsConfig {
                iou_resolution: 64,
                cd_samples: 4000,
                emd_samples: 128,
                seed: 3,
            },
            grasps: 8,
            ..EvalConfig::default()
        }
    }

    fn two_objects() -> SyntheticScene {
        let spec = SceneSpec {
            seed: 4,
            n_objects: 2,
            ..SceneSpec::default()
        };
        generate_scene(&spec).unwrap()
    }

    #[test]
    fn perfect_reconstruction_scores_one_and_no_collisions() {
        let scene = two_objects();
        let r = evaluate_reconstruction(&scene.truth(), &scene, 0, &fast()).unwrap();
        assert!(r.miou > 0.97, "{}", r.miou);
        // sampling floor only: 4000 points leave a few millimeters between samples
        assert!(r.cd_x1e4.unwrap() < 0.5, "{:?}", r.cd_x1e4);
        assert_eq!(r.gc, Some(0.0));
        assert!(!r.gc_undefined);
    }

    #[test]
    fn empty_reconstruction_flags_gc_undefined() {
        let scene = two_objects();
        let empty = SceneReconstruction::new(Vec::new(), scene.intrinsics).unwrap();
        let r = evaluate_reconstruction(&empty, &scene, 2, &fast()).unwrap();
        assert_eq!(r.miou, 0.0);
        assert!(r.gc_undefined && r.gc.is_none() && r.cd_x1e4.is_none());
        let json = serde_json::to_string(&r).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn csv_rows_align_with_objects() {
        let scene = two_objects();
        let r = evaluate_reconstruction(&scene.truth(), &scene, 0, &fast()).unwrap();
        let text = report_csv(&r).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "scope,index,prompt,miou,cd_x1e4,mmd_emd_x1e2,gc");
        assert_eq!(lines.len(), 2 + r.per_object.len());
        assert!(lines[1].starts_with("scene,,,"));
        let width = lines[0].split(',').count();
        assert!(lines.iter().all(|l| l.split(',').count() == width));
    }
}
