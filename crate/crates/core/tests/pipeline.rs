use std::path::Path;

use scomp_core::pipeline::config::Fault;
use scomp_core::pipeline::protocol::{IMAGE_TO_3D, REGISTER, SEGMENT};
use scomp_core::pipeline::record::{RECONSTRUCTION_FILE, RUN_FILE};
use scomp_core::pipeline::{evaluate_run, run_frame_dir, BackendSpec, EvalConfig, PipelineConfig, RunStatus};
use scomp_core::synth::{generate_scene, save_bundle, SceneSpec};

fn bundle(dir: &Path, seed: u64, n: usize) {
    let spec = SceneSpec {
        seed,
        n_objects: n,
        ..SceneSpec::default()
    };
    save_bundle(&generate_scene(&spec).unwrap(), dir).unwrap();
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn oracle_run_closes_the_loop() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    bundle(&scene, 3, 4);
    let out = tmp.path().join("run");
    let run = run_frame_dir(&scene, &PipelineConfig::default(), &out).unwrap();
    assert_eq!(run.status, RunStatus::Complete, "{:?}", run.doc.failed);
    assert_eq!(run.reconstruction.objects.len(), 4);
    let report = evaluate_run(&out, &scene, &EvalConfig::default()).unwrap();
    assert!(report.miou >= 0.95, "{}", report.miou);
    assert_eq!(report.gc, Some(0.0));

    // stage phases never overlap out of order within an object
    for obj in 0..4 {
        let ends: Vec<(f64, f64)> = run
            .timings
            .iter()
            .filter(|t| t.object == Some(obj))
            .map(|t| (t.start_ms, t.end_ms))
            .collect();
        assert!(ends.windows(2).all(|w| w[0].1 <= w[1].0));
    }
    let segment_end = run.timings.iter().find(|t| t.stage == SEGMENT).unwrap().end_ms;
    assert!(run.timings.iter().filter(|t| t.object.is_some()).all(|t| t.start_ms >= segment_end));

    // second pass over the same directory reuses every job
    let reconstruction = read(&out.join(RECONSTRUCTION_FILE));
    let again = run_frame_dir(&scene, &PipelineConfig::default(), &out).unwrap();
    assert_eq!(again.executed_jobs(), 0);
    assert_eq!(read(&out.join(RECONSTRUCTION_FILE)), reconstruction);
}

#[test]
fn injected_fault_leaves_other_objects_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    bundle(&scene, 5, 3);
    let clean = run_frame_dir(&scene, &PipelineConfig::default(), &tmp.path().join("clean")).unwrap();
    assert_eq!(clean.status, RunStatus::Complete);
    for stage in [IMAGE_TO_3D, REGISTER] {
        let cfg = PipelineConfig {
            faults: vec![Fault {
                object: 1,
                stage: stage.into(),
            }],
            ..PipelineConfig::default()
        };
        let out = tmp.path().join(stage);
        let faulted = run_frame_dir(&scene, &cfg, &out).unwrap();
        assert_eq!(faulted.status, RunStatus::Partial);
        assert_eq!(faulted.status.exit_code(), 2);
        assert_eq!(faulted.doc.failed.len(), 1);
        assert_eq!(faulted.doc.failed[0].stage, stage);
        let kept: Vec<_> = clean.doc.objects.iter().filter(|o| o.index != 1).cloned().collect();
        assert_eq!(faulted.doc.objects, kept);
        for o in &kept {
            assert_eq!(read(&out.join(&o.mesh)), read(&tmp.path().join("clean").join(&o.mesh)));
        }
        let clean_other: Vec<_> = clean.record.objects.iter().filter(|o| o.index != 1).collect();
        let faulted_other: Vec<_> = faulted.record.objects.iter().filter(|o| o.index != 1).collect();
        assert_eq!(clean_other, faulted_other);
    }
}

#[test]
fn identical_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    bundle(&scene, 8, 4);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_frame_dir(&scene, &PipelineConfig::default(), &a).unwrap();
    let cfg = PipelineConfig {
        max_parallel_objects: 1,
        ..PipelineConfig::default()
    };
    run_frame_dir(&scene, &cfg, &b).unwrap();
    assert_eq!(read(&a.join(RECONSTRUCTION_FILE)), read(&b.join(RECONSTRUCTION_FILE)));
    assert_eq!(read(&a.join(RUN_FILE)), read(&b.join(RUN_FILE)));
}

#[cfg(unix)]
#[test]
fn empty_segmentation_is_an_empty_run() {
    use std::os::unix::fs::PermissionsExt;
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    bundle(&scene, 2, 2);
    let script = tmp.path().join("no-masks");
    std::fs::write(&script, "#!/bin/sh\necho '[]' > \"$1/masks.json\"\n").unwrap();
    std::fs::set_permissions(&script, std::fs::Permissions::from_mode(0o755)).unwrap();
    let mut cfg = PipelineConfig::default();
    cfg.backends.insert(
        SEGMENT.into(),
        BackendSpec::Command {
            command: script.to_string_lossy().into_owned(),
            args: Vec::new(),
            timeout_s: None,
        },
    );
    let out = tmp.path().join("run");
    let run = run_frame_dir(&scene, &cfg, &out).unwrap();
    assert_eq!(run.status, RunStatus::Empty);
    assert_eq!(run.status.exit_code(), 3);
    assert!(run.reconstruction.is_empty());
    let report = evaluate_run(&out, &scene, &EvalConfig::default()).unwrap();
    assert_eq!(report.miou, 0.0);
    assert!(report.gc_undefined);
}

#[test]
fn oracle_without_truth_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    bundle(&scene, 1, 2);
    let frame = scomp_core::model::io::load_frame_dir(&scene).unwrap();
    let r = scomp_core::pipeline::run_pipeline(&frame, &PipelineConfig::default(), &tmp.path().join("run"));
    assert!(matches!(r, Err(scomp_core::Error::Config(_))));
}
