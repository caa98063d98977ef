//! End-to-end behaviour of runs, sweeps and reports on small configs.

use std::fs;

use air_core::evalbench::{run_sweep, Paradigm, SweepOptions, SweepParameter, SweepSpec};
use air_core::experiment::{
    prompt_checkpoint_path, read_prompt_checkpoint, read_results_csv, run_experiment, run_to_dir, ExperimentConfig,
};
use air_core::report::report_dir;
use air_core::AirError;

/// Default config cut down to a few iterations so each run takes well
/// under a second.
fn quick(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default().with_seed(seed);
    cfg.trainer.iterations = 2;
    cfg.trainer.epochs = 8;
    cfg.trainer.warmup_epochs = 2;
    cfg.generator.finetune.steps = 200;
    cfg.generator.num_synthetic = 30;
    cfg
}

#[test]
fn runs_are_deterministic() {
    let a = run_experiment(&quick(3)).unwrap();
    let b = run_experiment(&quick(3)).unwrap();
    assert_eq!(a.config_hash, b.config_hash);
    assert_eq!(a.result.records, b.result.records);
    assert_eq!(a.result.final_prompt, b.result.final_prompt);
    let c = run_experiment(&quick(4)).unwrap();
    assert_ne!(a.result.trajectory_hash().unwrap(), c.result.trajectory_hash().unwrap());
}

#[test]
fn zero_weights_reduce_to_the_text_only_baseline() {
    let mut with_aux = quick(1);
    with_aux.trainer.lambda = 0.0;
    with_aux.trainer.beta = 0.0;
    with_aux.fused_eval = false;
    let mut without = with_aux.clone();
    without.generator.num_synthetic = 0;
    let a = run_experiment(&with_aux).unwrap();
    let b = run_experiment(&without).unwrap();
    assert!(a.acg.aux.is_some() && b.acg.aux.is_none());
    assert_eq!(a.result.final_prompt, b.result.final_prompt);
    for (x, y) in a.result.records.iter().zip(&b.result.records) {
        assert_eq!(x.prompt_sha256, y.prompt_sha256);
        assert_eq!(x.losses, y.losses);
        assert_eq!(x.test, y.test);
    }
}

#[test]
fn trzsl_runs_report_a_harmonic_mean() {
    let mut cfg = quick(0);
    cfg.paradigm.kind = Paradigm::Trzsl;
    let out = run_experiment(&cfg).unwrap();
    let m = out.result.final_metrics().unwrap();
    let (s, u) = (m.seen_acc.unwrap(), m.unseen_acc.unwrap());
    let h = m.harmonic_mean.unwrap();
    if s + u > 0.0 {
        assert!((h - 2.0 * s * u / (s + u)).abs() < 1e-12);
    }
    for set in &out.result.pseudo_labels {
        for e in &set.entries {
            assert!(e.label >= out.data.seen_mask.as_ref().unwrap().iter().filter(|&&x| x).count());
        }
    }
}

#[test]
fn run_directory_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let (out, row) = run_to_dir(&quick(2), &dir, false).unwrap();
    for name in ["config.json", "trace.json", "pseudolabels.jsonl", "results.csv"] {
        assert!(dir.join(name).is_file(), "{name} missing");
    }
    let rows = read_results_csv(&dir.join("results.csv")).unwrap();
    assert_eq!(rows, vec![row]);

    let last = out.result.checkpoints.len() - 1;
    let back = read_prompt_checkpoint(&prompt_checkpoint_path(&dir, last), &out.result.final_prompt, &out.config_hash)
        .unwrap();
    assert_eq!(back, out.result.final_prompt);
    let wrong = read_prompt_checkpoint(&prompt_checkpoint_path(&dir, last), &out.result.final_prompt, "beef");
    assert!(wrong.is_err());

    let summary = report_dir(&dir).unwrap();
    assert_eq!(summary.kind, "run");
    assert_eq!(summary.rows, 1);
    assert_eq!(summary.plotted_points, out.result.records.len());
    assert!(dir.join("report/summary.txt").is_file());
}

#[test]
fn report_rejects_mixed_hashes() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run_to_dir(&quick(5), &a, false).unwrap();
    run_to_dir(&quick(6), &b, false).unwrap();
    fs::copy(b.join("trace.json"), a.join("trace.json")).unwrap();
    assert!(matches!(report_dir(&a), Err(AirError::HashMismatch { .. })));
    fs::write(b.join("trace.json"), "{ not json").unwrap();
    assert!(matches!(report_dir(&b), Err(AirError::Corrupt { .. })));
}

#[test]
fn sweep_resumes_from_cached_cells() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("sweep");
    let spec = SweepSpec { parameter: SweepParameter::Lambda, grid: vec![0.0, 0.5], seeds: vec![0, 1] };
    let opts = SweepOptions { out_dir: Some(dir.clone()), workers: 1, timing: false };
    let first = run_sweep(&quick(0), &spec, &opts).unwrap();
    assert_eq!(first.rows.len(), 4);
    assert_eq!(first.reused, 0);
    assert!(first.failures.is_empty());
    let csv = fs::read(dir.join("results.csv")).unwrap();
    let trace = fs::read(dir.join("trace.json")).unwrap();

    let cells: Vec<_> = fs::read_dir(dir.join("cells")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(cells.len(), 4);
    fs::remove_file(&cells[0]).unwrap();
    let second = run_sweep(&quick(0), &spec, &opts).unwrap();
    assert_eq!(second.reused, 3);
    assert_eq!(fs::read(dir.join("results.csv")).unwrap(), csv);
    assert_eq!(fs::read(dir.join("trace.json")).unwrap(), trace);

    let summary = report_dir(&dir).unwrap();
    assert_eq!(summary.kind, "sweep");
    assert_eq!(summary.rows, 4);
    assert_eq!(summary.plotted_points, 4);
}

#[test]
fn sweep_rows_follow_the_grid() {
    let spec = SweepSpec { parameter: SweepParameter::NumSynthetic, grid: vec![0.0, 10.0], seeds: vec![7] };
    let out = run_sweep(&quick(0), &spec, &SweepOptions::default()).unwrap();
    let values: Vec<_> = out.rows.iter().map(|r| (r.value, r.seed)).collect();
    assert_eq!(values, vec![(Some(0.0), 7), (Some(10.0), 7)]);
    assert!(out.rows.iter().all(|r| r.parameter == "num_synthetic"));
}
