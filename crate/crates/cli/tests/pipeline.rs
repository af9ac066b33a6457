mod common;

use std::fs;
use std::path::Path;

use true_cli::pipeline::{run_pipeline, PipelineError, RunOptions, Stage, StageStatus};
use true_cli::store::{to_json_bytes, ArtifactStore};

fn outputs(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            let name = p.file_name().unwrap().to_string_lossy().to_string();
            if name.starts_with('.') || name == "manifests" {
                continue;
            }
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn recorded_run_replays_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    let live = tmp.path().join("recorded");
    let summary = run_pipeline(&common::simulated_config(&live), &[], &RunOptions { record: true }).unwrap();
    let script = tmp.path().join("script.json");
    fs::write(&script, to_json_bytes(summary.recorded.as_ref().unwrap())).unwrap();

    let mut runs = Vec::new();
    for name in ["replay-a", "replay-b"] {
        let out = tmp.path().join(name);
        run_pipeline(&common::replay_config(&out, &script), &[], &RunOptions::default()).unwrap();
        runs.push(outputs(&out));
    }
    assert_eq!(runs[0], runs[1]);
    assert_eq!(runs[0], outputs(&live));
    assert!(runs[0].iter().any(|(p, _)| p == "report/report.txt"));
}

#[test]
fn unchanged_inputs_skip_every_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = common::simulated_config(tmp.path());
    let first = run_pipeline(&cfg, &[], &RunOptions::default()).unwrap();
    assert!(first.stages.iter().all(|s| s.status == StageStatus::Ran));
    let manifests = fs::read_dir(tmp.path().join("manifests")).unwrap().count();
    let second = run_pipeline(&cfg, &[], &RunOptions::default()).unwrap();
    assert!(second.stages.iter().all(|s| s.status == StageStatus::Skipped));
    assert_eq!(
        first.stages.iter().map(|s| &s.manifest_hash).collect::<Vec<_>>(),
        second.stages.iter().map(|s| &s.manifest_hash).collect::<Vec<_>>()
    );
    assert_eq!(fs::read_dir(tmp.path().join("manifests")).unwrap().count(), manifests);

    // A config change reaching only the tail reruns only the tail.
    let mut cfg = cfg;
    cfg.stability.repeats = 2;
    let third = run_pipeline(&cfg, &[], &RunOptions::default()).unwrap();
    let ran: Vec<&str> = third.stages.iter().filter(|s| s.status == StageStatus::Ran).map(|s| s.stage.as_str()).collect();
    assert_eq!(ran, ["stability", "report"]);
}

#[test]
fn missing_upstream_names_the_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let err = run_pipeline(&common::simulated_config(tmp.path()), &[Stage::E3], &RunOptions::default()).unwrap_err();
    assert!(matches!(err, PipelineError::MissingArtifact { .. }));
    let msg = err.to_string();
    assert!(msg.contains("verify/verify.json") && msg.contains("verify"), "{msg}");
}

#[test]
fn tampered_artifact_is_detected_and_rebuilt() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = common::simulated_config(tmp.path());
    run_pipeline(&cfg, &[Stage::Verify, Stage::E3], &RunOptions::default()).unwrap();
    let store = ArtifactStore::open(tmp.path()).unwrap();
    let names: Vec<&str> = Stage::ALL.iter().map(|s| s.as_str()).collect();
    assert_eq!(store.verify_chain(&names).unwrap(), 2);

    let path = tmp.path().join("verify/verify.json");
    let original = fs::read(&path).unwrap();
    fs::write(&path, String::from_utf8(original.clone()).unwrap().replacen("true", "false", 1)).unwrap();
    assert!(store.verify_chain(&names).is_err());

    let rerun = run_pipeline(&cfg, &[Stage::Verify], &RunOptions::default()).unwrap();
    assert_eq!(rerun.stages[0].status, StageStatus::Ran);
    assert_eq!(fs::read(&path).unwrap(), original);
    assert!(store.verify_chain(&names).is_ok());
}

#[test]
fn stability_table_is_reproducible_under_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let mut csvs = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        run_pipeline(&common::simulated_config(&out), &[], &RunOptions::default()).unwrap();
        csvs.push(fs::read(out.join("stability/stability-arith.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    let text = String::from_utf8(csvs.remove(0)).unwrap();
    assert!(text.starts_with("size,jaccard,kendall_tau\n"));
    assert_eq!(text.lines().count(), 5);
}
