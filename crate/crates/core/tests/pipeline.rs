use std::fs;
use std::sync::Arc;

use mfas::harness::{self, Manifest, Prediction};
use mfas::{
    run_study, run_study_with, Algorithm, BenchmarkSpec, Model, RangeConfig, Registry, StudyConfig, StudyResult,
};

fn tiny(benchmark: &str, algorithm: Algorithm) -> StudyConfig {
    StudyConfig {
        benchmark: benchmark.into(),
        algorithm,
        n_low: 40,
        n_high_grid: vec![6, 12],
        n_test: 300,
        n_repetitions: 2,
        seed: 5,
        n_mc: 16,
        restarts: 2,
        ..StudyConfig::default()
    }
}

fn rows(dir: &std::path::Path, file: &str) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(dir.join(file)).unwrap();
    r.records().map(|r| r.unwrap()).collect()
}

#[test]
fn emitted_errors_summarize_to_study_means() {
    let result = run_study(&tiny("piston", Algorithm::Shared)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    harness::emit_results(&result, dir.path()).unwrap();

    let errors = rows(dir.path(), harness::ERRORS_FILE);
    assert_eq!(errors.len(), 2 * 2 * 3);
    for r in &errors {
        assert_eq!(&r[0], "piston");
        assert_eq!(&r[1], "alg1");
        assert!(r[5].parse::<f64>().unwrap() >= 0.0);
    }

    let summary = harness::summarize(dir.path()).unwrap();
    assert_eq!(summary.len(), 2 * 3);
    for s in &summary {
        let model = match s.model.as_str() {
            "LF" => Model::Lf,
            "HF" => Model::Hf,
            _ => Model::Mf,
        };
        let expected = result.mean_error(s.n_high, model).unwrap();
        assert!((s.mean.unwrap() - expected).abs() <= 1e-15 * expected.max(1.0));
        assert_eq!((s.succeeded, s.failed), (2, 0));
    }

    // Sufficient-summary pairs cover every repetition; level correlation only the first.
    let summary_rows = rows(dir.path(), harness::SUMMARY_FILE);
    assert_eq!(summary_rows.len(), 2 * (6 + 12));
    let corr = rows(dir.path(), harness::CORRELATION_FILE);
    assert_eq!(corr.len(), 2 * 300);
    assert!(corr.iter().all(|r| &r[1] == "0"));
}

#[test]
fn independent_design_accounting_is_recorded() {
    let cfg = StudyConfig { n_as: Some(4), ..tiny("ebola", Algorithm::Independent) };
    let result = run_study(&cfg).unwrap();
    for e in &result.errors {
        assert_eq!(e.n_as, 4);
        assert_eq!(e.n_high_total, e.n_high + 4);
    }
    let summary = result.summary.iter().filter(|p| p.n_high == 12 && p.repetition == 1).count();
    assert_eq!(summary, 4);
}

#[test]
fn replay_reproduces_mean_propagation_study() {
    let cfg = StudyConfig { prediction: Prediction::MeanPropagation, ..tiny("ebola", Algorithm::Shared) };
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a");
    let second = dir.path().join("b");
    harness::emit_results(&run_study(&cfg).unwrap(), &first).unwrap();
    let manifest = Manifest::read(&first.join(harness::MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.config.prediction, Prediction::MeanPropagation);
    assert_eq!(manifest.repetition_seeds.len(), 2);
    harness::emit_results(&harness::replay(&manifest).unwrap(), &second).unwrap();
    for f in [harness::ERRORS_FILE, harness::SUMMARY_FILE, harness::CORRELATION_FILE] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn tampered_seeds_are_rejected_on_replay() {
    let result =
        run_study(&StudyConfig { n_high_grid: vec![6], n_repetitions: 1, ..tiny("piston", Algorithm::Shared) })
            .unwrap();
    let dir = tempfile::tempdir().unwrap();
    harness::emit_results(&result, dir.path()).unwrap();
    let mut manifest = Manifest::read(&dir.path().join(harness::MANIFEST_FILE)).unwrap();
    manifest.repetition_seeds[0] ^= 1;
    assert!(harness::replay(&manifest).is_err());
}

#[test]
fn narrowed_ranges_flow_into_the_manifest() {
    let toml = r#"
        [[benchmark]]
        name = "piston"
        parameters = [
          { name = "M",  lower = 40.0,    upper = 50.0 },
          { name = "S",  lower = 0.010,   upper = 0.015 },
          { name = "V0", lower = 0.004,   upper = 0.008 },
          { name = "k",  lower = 2000.0,  upper = 4000.0 },
          { name = "P0", lower = 95000.0, upper = 105000.0 },
          { name = "Ta", lower = 291.0,   upper = 295.0 },
          { name = "T0", lower = 345.0,   upper = 355.0 },
        ]
    "#;
    let mut registry = Registry::with_defaults();
    registry.apply_ranges(&RangeConfig::from_toml_str(toml).unwrap()).unwrap();
    let ranges = registry.get("piston").unwrap().ranges;
    let cfg = StudyConfig { ranges: Some(ranges.clone()), ..tiny("piston", Algorithm::Shared) };
    let result = run_study(&cfg).unwrap();
    assert_eq!(result.ranges, ranges);

    let dir = tempfile::tempdir().unwrap();
    harness::emit_results(&result, dir.path()).unwrap();
    let manifest = Manifest::read(&dir.path().join(harness::MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.config.ranges.as_deref(), Some(ranges.as_slice()));
}

#[test]
fn user_registered_benchmark_runs() {
    // A ridge function with an exact one-dimensional active subspace.
    let mut registry = Registry::with_defaults();
    registry
        .register(BenchmarkSpec {
            name: "ridge".into(),
            parameter_names: vec!["a".into(), "b".into(), "c".into()],
            ranges: vec![(-1.0, 1.0); 3],
            evaluate: Arc::new(|p| Ok((p[0] + 0.5 * p[1] - 0.25 * p[2]).exp())),
            gradient: Arc::new(|p| {
                let e = (p[0] + 0.5 * p[1] - 0.25 * p[2]).exp();
                Ok(vec![e, 0.5 * e, -0.25 * e])
            }),
        })
        .unwrap();
    let result: StudyResult = run_study_with(&tiny("ridge", Algorithm::Shared), &registry).unwrap();
    assert!(result.errors.iter().all(|e| e.l1_error.is_some()));
    // With an exact ridge the surrogate chain should be close to the truth.
    let mf = result.mean_error(12, Model::Mf).unwrap();
    assert!(mf < 0.05, "MF error {mf}");
}

#[test]
fn unknown_benchmark_is_an_error() {
    assert!(run_study(&tiny("borehole", Algorithm::Shared)).is_err());
}
