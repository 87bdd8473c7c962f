mod common;

use std::fs;

use fairboard::manifest::Manifest;
use fairboard::pipeline::{artifacts, OEDEMA_ONLY};
use fairboard::{run_stage, CliError, Stage};

fn rows(path: &std::path::Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

#[test]
fn oedema_only_ground_truth_is_excluded_and_accounted() {
    let mut cfg = common::study(&common::tmp("pipeline_oedema"), 4, 3);
    let out = cfg.paths.output.clone();
    run_stage(&cfg, Stage::Evaluate, true).unwrap();
    assert_eq!(rows(&out.join(artifacts::METRICS)).len(), 9);
    let excl = rows(&out.join(artifacts::EXCLUSIONS));
    assert_eq!(excl.len(), 3);
    assert!(excl.iter().all(|r| &r[0] == "P004" && &r[2] == OEDEMA_ONLY));
    let m = Manifest::read(&out, "evaluate").unwrap().unwrap();
    for (_, a) in m.notes["accounting"].as_object().unwrap() {
        assert_eq!(a["included"].as_u64().unwrap() + a["excluded"].as_u64().unwrap(), 4);
    }

    cfg.exclude_oedema_only = false;
    run_stage(&cfg, Stage::Evaluate, false).unwrap();
    assert_eq!(rows(&out.join(artifacts::METRICS)).len(), 12);
    assert!(rows(&out.join(artifacts::EXCLUSIONS)).is_empty());
}

#[test]
fn downstream_stage_names_its_missing_input() {
    let cfg = common::study(&common::tmp("pipeline_upstream"), 4, 3);
    let err = run_stage(&cfg, Stage::Inequality, false).unwrap_err();
    assert!(matches!(err, CliError::MissingUpstream { stage: "evaluate", .. }));
    assert!(err.to_string().contains("fairboard evaluate"));
}

#[test]
fn unchanged_stage_is_skipped_and_changed_input_reruns() {
    let cfg = common::study(&common::tmp("pipeline_cache"), 4, 5);
    let out = cfg.paths.output.clone();
    run_stage(&cfg, Stage::Evaluate, false).unwrap();
    let metrics = out.join(artifacts::METRICS);
    let stamp = fs::metadata(&metrics).unwrap().modified().unwrap();
    std::thread::sleep(std::time::Duration::from_millis(20));
    run_stage(&cfg, Stage::Evaluate, false).unwrap();
    assert_eq!(fs::metadata(&metrics).unwrap().modified().unwrap(), stamp);

    // tampering with an output invalidates the cache
    fs::write(&metrics, "patient_id\n").unwrap();
    run_stage(&cfg, Stage::Evaluate, false).unwrap();
    assert_eq!(rows(&metrics).len(), 9);

    let stamp = fs::metadata(&metrics).unwrap().modified().unwrap();
    std::thread::sleep(std::time::Duration::from_millis(20));
    run_stage(&cfg, Stage::Evaluate, true).unwrap();
    assert_ne!(fs::metadata(&metrics).unwrap().modified().unwrap(), stamp);
}

#[test]
fn missing_ground_truth_is_fatal() {
    let cfg = common::study(&common::tmp("pipeline_missing_gt"), 4, 3);
    fs::remove_file(cfg.paths.ground_truth.join("P002.nii.gz")).unwrap();
    let err = run_stage(&cfg, Stage::Evaluate, true).unwrap_err();
    assert!(matches!(err, CliError::MissingGroundTruth(ref s) if s.contains("P002")));
}

#[test]
fn missing_prediction_is_an_exclusion() {
    let cfg = common::study(&common::tmp("pipeline_missing_pred"), 4, 3);
    fs::remove_file(cfg.paths.masks.join("model_b").join("P001.nii.gz")).unwrap();
    run_stage(&cfg, Stage::Evaluate, true).unwrap();
    let excl = rows(&cfg.paths.output.join(artifacts::EXCLUSIONS));
    assert!(excl.iter().any(|r| &r[0] == "P001" && &r[1] == "model_b"));
    assert_eq!(rows(&cfg.paths.output.join(artifacts::METRICS)).len(), 8);
}
