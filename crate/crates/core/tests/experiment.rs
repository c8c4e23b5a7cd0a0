use std::process::Command;

use cltr::experiment::*;
use cltr::ltr::LtrEstimator;

fn small() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.dataset.sizes = [20, 6, 6];
    cfg.dataset.items_per_query = 8;
    cfg.dataset.feature_dim = 4;
    cfg.n = vec![300, 1200];
    cfg.repeats = 2;
    cfg.estimators = vec![LtrEstimator::Ips, LtrEstimator::Dr, LtrEstimator::FullInfo];
    cfg.logging_fraction = 0.1;
    cfg.logging.epochs = 20;
    cfg.regression.epochs = 5;
    cfg.ltr.max_steps = 40;
    cfg.ltr.eval_interval = 20;
    cfg.ltr.eval_samples = 20;
    cfg.ltr.n_samples = 8;
    cfg.em.iterations = 3;
    cfg.em.inner_epochs = 3;
    cfg.eval_samples = 50;
    cfg.threads = 2;
    cfg.record_wall_time = false;
    cfg
}

#[test]
fn reruns_are_bit_identical() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&cfg).unwrap().write(dir.path(), "a").unwrap();
    run_experiment(&cfg).unwrap().write(dir.path(), "b").unwrap();
    let a = std::fs::read(dir.path().join("a.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b.csv")).unwrap();
    assert_eq!(a, b);
    let rows = read_rows(dir.path().join("a.csv")).unwrap();
    assert_eq!(rows.len(), 2 * 3 * 2);
    assert!(rows.iter().all(|r| r.is_ok() && r.ecp.is_some() && r.wall_time_s == 0.0));
}

#[test]
fn full_info_ignores_the_log_size() {
    let out = run_experiment(&small()).unwrap();
    for repeat in 0..2 {
        let ecps: Vec<_> = out
            .rows
            .iter()
            .filter(|r| r.estimator == "full_info" && r.repeat == repeat)
            .map(|r| r.ecp.unwrap())
            .collect();
        assert_eq!(ecps.len(), 2);
        assert_eq!(ecps[0], ecps[1]);
    }
}

#[test]
fn repeats_get_distinct_seeds() {
    let out = run_experiment(&small()).unwrap();
    let dr: Vec<_> = out.rows.iter().filter(|r| r.estimator == "dr" && r.n == 300).collect();
    assert_eq!(dr.len(), 2);
    assert_ne!(dr[0].seed, dr[1].seed);
    assert_ne!(dr[0].ecp, dr[1].ecp);
}

#[test]
fn unit_multiplier_and_unit_z_reproduce_the_plain_run() {
    let mut cfg = small();
    cfg.n = vec![600];
    cfg.repeats = 1;
    let plain = run_experiment(&cfg).unwrap().rows;
    let clip = sweep_clipping(&cfg, &[1.0]).unwrap().rows;
    let bias = sweep_bias_misspecification(&cfg, &[1.0]).unwrap().rows;
    let metrics = |rows: &[ResultRow]| -> Vec<_> { rows.iter().map(|r| (r.estimator.clone(), r.ecp, r.ndcg_at_5)).collect() };
    assert_eq!(metrics(&plain), metrics(&clip));
    assert_eq!(metrics(&plain), metrics(&bias));
}

#[test]
fn sweeps_key_rows_by_their_parameter() {
    let mut cfg = small();
    cfg.n = vec![600];
    cfg.repeats = 1;
    cfg.estimators = vec![LtrEstimator::Ips];
    let out = sweep_clipping(&cfg, &[0.001, 1000.0]).unwrap();
    let mults: Vec<_> = out.rows.iter().map(|r| r.tau_multiplier).collect();
    assert_eq!(mults, vec![0.001, 1000.0]);
    let tidy = tidy_rows(&out.rows, FigureKind::ClipSweep);
    assert_eq!(tidy.len(), 4);
    assert!(tidy.iter().all(|t| t.x_name == "tau_multiplier"));
}

#[test]
fn estimated_bias_setting_records_em_output() {
    let mut cfg = small();
    cfg.setting = Setting::Top5Estimated;
    cfg.n = vec![800];
    cfg.repeats = 1;
    cfg.estimators = vec![LtrEstimator::Dr];
    let out = run_experiment(&cfg).unwrap();
    assert!(!out.any_failed());
    assert_eq!(out.bias_estimates.len(), 1);
}

#[test]
fn clip_threshold_schedule() {
    assert_eq!(clip_threshold(10_000, Setting::Top5Known.clip(), 1.0).unwrap(), 0.1);
    assert_eq!(clip_threshold(10_000, Setting::FullKnown.clip(), 1.0).unwrap(), 1.0);
    assert!((clip_threshold(10_000, Setting::FullKnown.clip(), 0.001).unwrap() - 0.001).abs() < 1e-15);
    assert!(clip_threshold(0, Setting::Top5Known.clip(), 1.0).is_err());
}

#[test]
fn overrides_reach_nested_fields_and_reject_typos() {
    let cfg = RunConfig::from_toml_with_overrides(
        "repeats = 3",
        &["ltr.max_steps=7".into(), "dataset.sizes=[4,2,2]".into(), "setting=\"full_known\"".into()],
    )
    .unwrap();
    assert_eq!((cfg.repeats, cfg.ltr.max_steps, cfg.dataset.sizes), (3, 7, [4, 2, 2]));
    assert_eq!(cfg.setting, Setting::FullKnown);
    assert!(RunConfig::from_toml_with_overrides("", &["ltr.max_stepz=7".into()]).is_err());
    let back = RunConfig::from_toml_with_overrides(&cfg.to_toml().unwrap(), &[]).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn cli_run_and_plot_data() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_cltr");
    let status = Command::new(bin)
        .env(OUTPUT_DIR_ENV, dir.path())
        .args([
            "run",
            "--n",
            "400",
            "--repeats",
            "1",
            "--estimators",
            "naive,dm",
            "--no-wall-time",
            "--set",
            "dataset.sizes=[12,4,4]",
            "--set",
            "dataset.items_per_query=6",
            "--set",
            "ltr.max_steps=20",
            "--set",
            "regression.epochs=3",
            "--set",
            "logging_fraction=0.2",
            "--set",
            "eval_samples=30",
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let csv = dir.path().join("results.csv");
    assert_eq!(read_rows(&csv).unwrap().len(), 2);
    assert!(dir.path().join("results_config.toml").exists());

    let tidy = dir.path().join("tidy.csv");
    let status = Command::new(bin)
        .args(["plot-data", csv.to_str().unwrap(), "--kind", "learning_curve", "-o", tidy.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&tidy).unwrap();
    assert!(text.starts_with("kind,setting,dataset,estimator,n,x_name,x,seed,metric,value"));
    assert_eq!(text.lines().count(), 1 + 4);

    let bad = Command::new(bin).args(["run", "--setting", "nonsense"]).status().unwrap();
    assert_eq!(bad.code(), Some(2));
}
