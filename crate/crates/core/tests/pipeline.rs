use std::path::{Path, PathBuf};

use ronin_core::detections_io::{load_manifest, save_manifest, Manifest};
use ronin_core::mock_scene::{write_scene, MockSceneSpec};
use ronin_core::pipeline::{
    report, report_from_scores, sweep, BackendSelector, ReportDocument, Resolution, RunConfig,
    SweepAxis, ERRORS_FILE, HIST_FILE, REPORT_FILE, ROC_FILE, SWEEP_FILE,
};
use ronin_core::run;

fn scene(dir: &Path, spec: &MockSceneSpec) -> PathBuf {
    write_scene(spec, &dir.join("scene")).unwrap()
}

fn config(manifest: &Path, out: &Path) -> RunConfig {
    RunConfig {
        manifest: manifest.to_path_buf(),
        out_dir: out.to_path_buf(),
        ..RunConfig::default()
    }
}

fn names(files: &[PathBuf]) -> Vec<String> {
    let mut v: Vec<String> = files
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn two_labels_one_image_two_calls() {
    let dir = tempfile::tempdir().unwrap();
    let spec = MockSceneSpec {
        n_id: 4,
        n_ood: 0,
        per_image: 4,
        id_labels: vec!["cat".into(), "dog".into()],
        ..MockSceneSpec::default()
    };
    let m = scene(dir.path(), &spec);
    let r = run(&config(&m, &dir.path().join("out"))).unwrap();
    assert_eq!(r.inpaint_calls, 2);
    assert_eq!(r.scored.len(), 4);
    assert!(r.report.is_none());
    assert!(r.note.unwrap().starts_with("no data"));
}

#[test]
fn conservation_with_broken_image() {
    let dir = tempfile::tempdir().unwrap();
    let m = scene(dir.path(), &MockSceneSpec::default());
    let manifest = load_manifest(&m).unwrap();
    let victim = &manifest.images[3];
    let lost = victim.detections.len();
    std::fs::write(m.parent().unwrap().join(&victim.image_path), b"not a png").unwrap();

    let r = {
        let c = config(&m, &dir.path().join("out"));
        let backends =
            ronin_core::pipeline::Backends::from_config(&c, &manifest.id_label_set).unwrap();
        ronin_core::pipeline::run_with(&c, &manifest, &backends).unwrap()
    };
    assert_eq!(r.scored.len() + r.errors.len(), manifest.detection_count());
    assert_eq!(r.errors.len(), lost);
    assert!(r.errors.iter().all(|e| e.stage == "load_image"));
    assert!(r.is_partial());

    let files = report(std::slice::from_ref(&r), &r.out_dir, false).unwrap();
    assert_eq!(names(&files), [HIST_FILE, REPORT_FILE, ROC_FILE]);
    let doc: ReportDocument =
        serde_json::from_str(&std::fs::read_to_string(r.out_dir.join(REPORT_FILE)).unwrap())
            .unwrap();
    assert_eq!(doc.errors_file.as_deref(), Some(ERRORS_FILE));
    assert_eq!(doc.n_errors, lost);
    let ledger = std::fs::read_to_string(r.out_dir.join(ERRORS_FILE)).unwrap();
    assert_eq!(ledger.lines().count(), lost);
}

#[test]
fn confidence_filter_counts() {
    let dir = tempfile::tempdir().unwrap();
    let m = scene(dir.path(), &MockSceneSpec::default());
    let total = load_manifest(&m).unwrap().detection_count();
    let c = RunConfig {
        min_confidence: Some(0.75),
        ..config(&m, &dir.path().join("out"))
    };
    let r = run(&c).unwrap();
    assert!(r.n_filtered > 0);
    assert_eq!(r.n_detections + r.n_filtered, total);
    assert_eq!(r.scored.len() + r.errors.len(), r.n_detections);
}

#[test]
fn empty_manifest_gives_no_data_note() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.jsonl");
    let empty = Manifest {
        id_label_set: vec!["cat".into()],
        ..Manifest::default()
    };
    save_manifest(&empty, &path).unwrap();
    let r = run(&config(&path, &dir.path().join("out"))).unwrap();
    assert!(r.scored.is_empty() && r.errors.is_empty());
    assert!(r.report.is_none());
    assert!(r.note.as_deref().unwrap().contains("no data"));
    assert_eq!(std::fs::read_to_string(&r.scores_path).unwrap(), "");
    report(std::slice::from_ref(&r), &r.out_dir, false).unwrap();
    let doc: ReportDocument =
        serde_json::from_str(&std::fs::read_to_string(r.out_dir.join(REPORT_FILE)).unwrap())
            .unwrap();
    assert!(doc.eval.is_none());
    assert_eq!(
        std::fs::read_to_string(r.out_dir.join(ROC_FILE)).unwrap(),
        "threshold,tpr,fpr\n"
    );
}

#[test]
fn steps_sweep_is_score_neutral_under_mocks() {
    let dir = tempfile::tempdir().unwrap();
    let m = scene(dir.path(), &MockSceneSpec::default());
    let out = dir.path().join("sweep");
    let values: Vec<String> = ["5", "10", "15", "20"].map(String::from).to_vec();
    let outcome = sweep(&config(&m, &out), SweepAxis::Steps, &values).unwrap();
    assert_eq!(outcome.points.len(), 4);
    let scores: Vec<Vec<u8>> = outcome
        .results()
        .map(|r| std::fs::read(&r.scores_path).unwrap())
        .collect();
    assert_eq!(scores.len(), 4);
    assert!(scores.windows(2).all(|w| w[0] == w[1]));

    let files = outcome.write_report(&out, false).unwrap();
    assert!(files.contains(&out.join(SWEEP_FILE)));
    let csv = std::fs::read_to_string(out.join(SWEEP_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("axis,value,auroc,fpr_at_95,mean_wall_time_per_image"));
    for v in &values {
        assert!(out.join(format!("steps={v}")).join(REPORT_FILE).exists());
    }
}

#[test]
fn mask_ratio_sweep_has_six_rows() {
    let dir = tempfile::tempdir().unwrap();
    let m = scene(dir.path(), &MockSceneSpec::default());
    let out = dir.path().join("ratios");
    let values: Vec<String> = ["0.25", "0.5", "0.75", "0.8", "0.9", "1.0"]
        .map(String::from)
        .to_vec();
    let outcome = sweep(&config(&m, &out), SweepAxis::MaskRatio, &values).unwrap();
    outcome.write_report(&out, false).unwrap();
    assert_eq!(
        std::fs::read_to_string(out.join(SWEEP_FILE))
            .unwrap()
            .lines()
            .count(),
        7
    );
    assert_eq!(outcome.failures(), 0);
}

#[test]
fn invalid_sweep_value_rejected_up_front() {
    let dir = tempfile::tempdir().unwrap();
    let m = scene(dir.path(), &MockSceneSpec::default());
    let out = dir.path().join("bad");
    let values: Vec<String> = ["0.5", "1.5"].map(String::from).to_vec();
    assert!(sweep(&config(&m, &out), SweepAxis::MaskRatio, &values).is_err());
    assert!(!out.exists());
}

#[test]
fn singleton_sweep_matches_run() {
    let dir = tempfile::tempdir().unwrap();
    let m = scene(dir.path(), &MockSceneSpec::default());
    let base = config(&m, &dir.path().join("single"));
    let direct = run(&RunConfig {
        steps: 10,
        ..base.clone()
    })
    .unwrap();
    let outcome = sweep(&base, SweepAxis::Steps, &["10".to_string()]).unwrap();
    let swept = outcome.results().next().unwrap();
    assert_eq!(
        std::fs::read(&direct.scores_path).unwrap(),
        std::fs::read(&swept.scores_path).unwrap()
    );
    assert_eq!(direct.fingerprint, swept.fingerprint);
}

#[test]
fn modes_agree_and_resolution_runs() {
    let dir = tempfile::tempdir().unwrap();
    let m = scene(dir.path(), &MockSceneSpec::default());
    let outcome = sweep(
        &config(&m, &dir.path().join("modes")),
        SweepAxis::Mode,
        &["class-wise".to_string(), "object-wise".to_string()],
    )
    .unwrap();
    let r: Vec<_> = outcome.results().collect();
    assert_eq!(r.len(), 2);
    let score = |i: usize| r[i].scored.iter().map(|s| s.score).collect::<Vec<_>>();
    assert_eq!(score(0), score(1));
    assert!(r[0].inpaint_calls < r[1].inpaint_calls);

    let half = run(&RunConfig {
        resolution: Some(Resolution {
            width: 64,
            height: 64,
        }),
        ..config(&m, &dir.path().join("res"))
    })
    .unwrap();
    assert_eq!(half.scored.len() + half.errors.len(), 50);
    assert_eq!(half.report.unwrap().auroc, 1.0);
}

#[test]
fn refined_mode_with_exclusions_file() {
    let dir = tempfile::tempdir().unwrap();
    let m = scene(dir.path(), &MockSceneSpec::default());
    let ex = dir.path().join("ex.json");
    std::fs::write(
        &ex,
        r#"{"horse": ["donkey", "zebra", "mule", "pony", "camel"]}"#,
    )
    .unwrap();
    let plain = run(&config(&m, &dir.path().join("plain"))).unwrap();
    let refined = run(&RunConfig {
        exclusions: Some(ex),
        ..config(&m, &dir.path().join("refined"))
    })
    .unwrap();
    assert!(refined.prompt_fallbacks > 0);
    assert_ne!(plain.fingerprint, refined.fingerprint);
    let s = |r: &ronin_core::RunResult| r.scored.iter().map(|s| s.score).collect::<Vec<_>>();
    assert_eq!(s(&plain), s(&refined));
}

#[test]
fn eval_reproduces_run_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let m = scene(dir.path(), &MockSceneSpec::default());
    let r = run(&config(&m, &dir.path().join("out"))).unwrap();
    let (doc, files) =
        report_from_scores(&r.scores_path, 0.95, &dir.path().join("eval"), true).unwrap();
    let e = doc.eval.unwrap();
    let orig = r.report.unwrap();
    assert_eq!((e.auroc, e.fpr_at_95), (orig.auroc, orig.fpr_at_95));
    assert_eq!(
        names(&files),
        ["hist.csv", "hist.png", "report.json", "roc.csv", "roc.png"]
    );
}

#[test]
fn unreachable_adapter_is_backend_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = scene(dir.path(), &MockSceneSpec::default());
    let c = RunConfig {
        inpaint_backend: BackendSelector::Adapter("exit 1".into()),
        ..config(&m, &dir.path().join("out"))
    };
    let err = run(&c).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn ablations_and_mcm_reported() {
    let dir = tempfile::tempdir().unwrap();
    let m = scene(dir.path(), &MockSceneSpec::default());
    let r = run(&config(&m, &dir.path().join("out"))).unwrap();
    assert_eq!(r.ablations.len(), 4);
    assert!(r.mcm.is_some());
    assert!(r.scored.iter().all(|s| s.fingerprint == r.fingerprint));
}
