use std::fs;

use winlab::harness::{
    buy_and_hold_baseline, cumulative_reward, emit_report, grid_keys, grid_table, run_experiment,
    run_experiment_on, CellKey, ExperimentConfig, GridCell, GridReport, WINDOW_WEEKS,
};
use winlab::market_data::MarketFrame;
use winlab::synthetic::{synthetic_frame, SyntheticSpec};
use winlab::{DatasetKind, LayoutMode};

fn frame_from_closes(closes: &[&[f64]]) -> MarketFrame {
    let d = closes[0].len();
    let n = closes.len();
    let flat: Vec<f64> = closes.iter().flat_map(|r| r.iter().copied()).collect();
    let mut cols = indexmap::IndexMap::new();
    for name in ["open", "high", "low", "close"] {
        cols.insert(name.to_string(), flat.clone());
    }
    cols.insert("volume".to_string(), vec![1.0; n * d]);
    let dates = winlab::synthetic::business_dates(n);
    let tickers = (0..d).map(|i| format!("S{i}")).collect();
    MarketFrame::from_dense(dates, tickers, cols).unwrap()
}

#[test]
fn baseline_examples() {
    let flat = frame_from_closes(&[&[10.0, 20.0], &[10.0, 20.0], &[10.0, 20.0]]);
    assert_eq!(buy_and_hold_baseline(&flat, 1000.0).unwrap().cumulative_reward, 0.0);
    let double = frame_from_closes(&[&[5.0], &[7.0], &[10.0]]);
    assert!((buy_and_hold_baseline(&double, 1000.0).unwrap().cumulative_reward - 100.0).abs() < 1e-12);
    let mixed = frame_from_closes(&[&[10.0, 10.0], &[15.0, 5.0]]);
    assert!(buy_and_hold_baseline(&mixed, 1000.0).unwrap().cumulative_reward.abs() < 1e-12);
}

fn quick_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.env.initial_amount = 100_000.0;
    cfg.train.total_timesteps = Some(64);
    cfg.ppo.n_steps = 32;
    cfg.ppo.epochs = 1;
    cfg.ppo.minibatch_size = 16;
    cfg.seed = 5;
    cfg
}

fn small_market(seed: u64) -> MarketFrame {
    synthetic_frame(&SyntheticSpec {
        n_tickers: 2,
        n_days: 80,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

#[test]
fn experiment_is_deterministic_and_self_consistent() {
    let frame = small_market(1);
    let cfg = quick_config();
    let a = run_experiment_on(&frame, &cfg).unwrap();
    let b = run_experiment_on(&frame, &cfg).unwrap();
    // wall-clock time is the only field allowed to differ, and it is not serialized
    assert_eq!(
        serde_json::to_string(&a.report).unwrap(),
        serde_json::to_string(&b.report).unwrap()
    );
    assert_eq!(a.trajectory, b.trajectory);
    let r = &a.report;
    let recomputed = cumulative_reward(r.initial_amount, a.trajectory.last().unwrap().value).unwrap();
    assert!((r.cumulative_reward - recomputed).abs() < 1e-9);
    assert!((r.cumulative_reward - 100.0 * (r.final_value / r.initial_amount - 1.0)).abs() < 1e-9);
    assert_eq!(a.log.len(), 2);
}

#[test]
fn zero_budget_equals_untrained_backtest() {
    let frame = small_market(2);
    let mut cfg = quick_config();
    cfg.train.total_timesteps = Some(0);
    let out = run_experiment_on(&frame, &cfg).unwrap();
    assert!(out.log.is_empty());
    let untrained = winlab::harness::prepare_data(&frame, cfg.dataset.kind, &cfg).unwrap();
    let mut policy = winlab::harness::build_policy(&untrained, &cfg).unwrap();
    let traj = winlab::harness::backtest(&mut policy, &untrained.test, &untrained, &cfg.env_config()).unwrap();
    assert_eq!(traj.last().unwrap().value, out.report.final_value);
}

#[test]
fn technical_and_company_layout_run() {
    let frame = small_market(3);
    let mut cfg = quick_config();
    cfg.dataset.kind = DatasetKind::Technical;
    cfg.layout = LayoutMode::Company;
    cfg.window_weeks = 4;
    let out = run_experiment_on(&frame, &cfg).unwrap();
    assert!(out.report.final_value > 0.0);
}

#[test]
fn run_experiment_reads_the_dataset_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("market.csv");
    small_market(4).save(&path).unwrap();
    let mut cfg = quick_config();
    cfg.dataset.path = Some(path);
    assert!(run_experiment(&cfg).is_ok());
    cfg.dataset.path = Some(dir.path().join("missing.csv"));
    assert!(run_experiment(&cfg).is_err());
}

#[test]
fn config_file_keys() {
    let text = r#"
        layout = "company"
        window_weeks = 6
        seed = 9
        out_dir = "out"
        [dataset]
        path = "data.csv"
        kind = "technical"
        [env]
        initial_amount = 5000.0
        hmax = 10
        cost_rate = 0.0
        [ppo]
        clip_eps = 0.1
        n_steps = 128
        [train]
        total_timesteps = 1000
        [split]
        train_end = "2020-01-01"
        test_end = "2021-01-01"
    "#;
    let cfg = ExperimentConfig::from_toml_str(text).unwrap();
    assert_eq!(cfg.layout, LayoutMode::Company);
    assert_eq!(cfg.window_days(), 30);
    assert_eq!(cfg.dataset.kind, DatasetKind::Technical);
    assert_eq!(cfg.env_config().hmax, 10);
    assert_eq!(cfg.ppo_config().clip_eps, 0.1);
    assert_eq!(cfg.total_timesteps(), 1000);
    assert_eq!(cfg.split.test_end.as_deref(), Some("2021-01-01"));
    assert!(ExperimentConfig::from_toml_str("bogus_key = 1").is_err());
}

fn fake_grid() -> GridReport {
    let cells = grid_keys()
        .into_iter()
        .enumerate()
        .map(|(i, key)| {
            let mut cfg = ExperimentConfig::default();
            cfg.window_weeks = key.weeks;
            let report = winlab::MetricsReport {
                config: cfg,
                cumulative_reward: i as f64 * 1.5 - 10.0,
                initial_amount: 1.0,
                final_value: 1.0,
                episode_rewards: vec![],
                baseline_cumulative_reward: 0.0,
                training_timesteps: 0,
                policy_digest: String::new(),
                wall_clock_seconds: 0.0,
            };
            GridCell {
                key,
                seed: i as u64,
                report: (i != 5).then_some(report),
                log: Some(Default::default()),
                error: (i == 5).then(|| "boom".to_string()),
            }
        })
        .collect();
    GridReport { cells }
}

#[test]
fn grid_table_mirrors_published_layout() {
    let table = grid_table(&fake_grid());
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "weeks,sma_company,sma_category,technical_company,technical_category");
    assert_eq!(lines.len(), 7);
    for (line, w) in lines[1..].iter().zip(WINDOW_WEEKS) {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 5);
        assert_eq!(fields[0], w.to_string());
    }
    // cell 5 = 4 weeks, sma, category
    assert_eq!(lines[2].split(',').nth(2), Some("NA"));
    assert_eq!(lines[1], "2,-10.0000,-8.5000,-7.0000,-5.5000");
}

#[test]
fn emit_report_is_byte_identical_and_rejects_empty() {
    let grid = fake_grid();
    let a = tempfile::tempdir().unwrap();
    let files = emit_report(&grid, a.path()).unwrap();
    let first: Vec<Vec<u8>> = files.iter().map(|p| fs::read(p).unwrap()).collect();
    let again = emit_report(&grid, a.path()).unwrap();
    assert_eq!(files, again);
    let second: Vec<Vec<u8>> = again.iter().map(|p| fs::read(p).unwrap()).collect();
    assert_eq!(first, second);
    for name in ["grid.csv", "grid.json", "plot_sma.csv", "plot_sma.svg", "plot_technical.csv", "plot_technical.svg"] {
        assert!(a.path().join(name).exists(), "{name}");
    }
    let back = GridReport::from_json(&fs::read_to_string(a.path().join("grid.json")).unwrap()).unwrap();
    assert_eq!(grid_table(&back), grid_table(&grid));
    assert!(emit_report(&GridReport { cells: vec![] }, a.path()).is_err());
    let key = CellKey { weeks: 2, kind: DatasetKind::Sma, layout: LayoutMode::Company };
    assert_eq!(key.slug(), "sma_company_2w");
}
