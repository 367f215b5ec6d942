use std::fs;

use sgld_rr::analytics::Scheme;
use sgld_rr::experiment::{self, ExperimentKind, ExperimentSpec};

fn small(kind: ExperimentKind) -> ExperimentSpec {
    ExperimentSpec {
        kind,
        realizations: 40,
        groups: 4,
        steps: vec![0.3],
        epochs: Some(30),
        burn_in: 100,
        ..ExperimentSpec::default()
    }
}

#[test]
fn variance_check_enumerates_small_data() {
    let spec = ExperimentSpec {
        kind: ExperimentKind::VarianceCheck,
        batches: 3,
        num_terms: Some(6),
        ..ExperimentSpec::default()
    };
    let checks = experiment::run_variance_check(&spec).unwrap();
    assert!(!checks.is_empty());
    for c in &checks {
        assert!(c.pass, "{} {} vs {}", c.identity, c.observed, c.predicted);
    }
}

#[test]
fn variance_check_full_batch_is_exactly_zero() {
    let spec = ExperimentSpec {
        kind: ExperimentKind::VarianceCheck,
        batches: 1,
        num_terms: Some(12),
        ..ExperimentSpec::default()
    };
    for c in experiment::run_variance_check(&spec).unwrap() {
        assert_eq!(c.observed, 0.0);
        assert_eq!(c.predicted, 0.0);
    }
}

#[test]
fn model_problem_writes_versioned_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ExperimentSpec {
        output: Some(dir.path().to_path_buf()),
        ..small(ExperimentKind::ModelProblem)
    };
    let report = experiment::run_model_problem(&spec).unwrap();
    assert_eq!(report.runs.len(), 3);
    let rr = report.run(0.3, Scheme::Rr).unwrap();
    assert_eq!(rr.phases.len(), report.batches);
    assert_eq!(rr.iterations, 30 * report.batches);
    for file in ["model_problem_phases.csv", "model_problem_summary.csv", "model_problem_series.csv"] {
        let text = fs::read_to_string(dir.path().join(file)).unwrap();
        assert!(text.starts_with("#schema="), "{file}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["seeds"].is_object());
    assert_eq!(manifest["spec"]["realizations"], 40);
}

#[test]
fn reruns_are_identical() {
    let spec = small(ExperimentKind::ModelProblem);
    let a = experiment::run_model_problem(&spec).unwrap();
    let b = experiment::run_model_problem(&spec).unwrap();
    assert_eq!(a, b);
}

#[test]
fn spec_round_trips_through_json_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("spec.json");
    let spec = small(ExperimentKind::Logreg);
    fs::write(&path, serde_json::to_string(&spec).unwrap()).unwrap();
    assert_eq!(ExperimentSpec::from_json_file(&path).unwrap(), spec);
}

#[test]
fn unknown_spec_fields_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("spec.json");
    fs::write(&path, r#"{"kind": "model-problem", "step": 0.1}"#).unwrap();
    assert!(ExperimentSpec::from_json_file(&path).is_err());
}

#[test]
fn logreg_runs_on_small_simdata() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ExperimentSpec {
        num_terms: Some(64),
        features: 3,
        hmc_samples: 2_000,
        hmc_burn_in: 200,
        output: Some(dir.path().to_path_buf()),
        ..small(ExperimentKind::Logreg)
    };
    let report = experiment::run_logreg(&spec).unwrap();
    assert_eq!(report.dim, 4);
    assert!((0.4..=0.95).contains(&report.reference.acceptance_rate));
    for run in &report.runs {
        assert!(run.final_error.is_finite());
        assert_eq!(run.oscillation.len(), 10 * report.batches);
    }
    for file in ["logreg_reference.csv", "logreg_summary.csv", "logreg_series.csv", "logreg_oscillations.csv"] {
        assert!(dir.path().join(file).exists(), "{file}");
    }
}

#[test]
fn bounds_sweep_marks_large_steps_inadmissible() {
    let spec = ExperimentSpec {
        kind: ExperimentKind::BoundsSweep,
        steps: vec![0.1, 1.5],
        ..ExperimentSpec::default()
    };
    let report = experiment::run_bounds_sweep(&spec).unwrap();
    assert!(report.cells.iter().any(|c| c.step == 1.5 && c.status == "inadmissible"));
    assert!(report.cells.iter().any(|c| c.step == 0.1 && c.status == "ok"));
}
