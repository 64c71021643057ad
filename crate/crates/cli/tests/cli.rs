use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use winlab::synthetic::{synthetic_frame, SyntheticSpec};

fn winlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_winlab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn market(dir: &Path, name: &str, seed: u64, with_ratios: bool) -> PathBuf {
    let path = dir.join(name);
    let spec = SyntheticSpec { n_tickers: 2, n_days: 120, seed, with_ratios, ..SyntheticSpec::default() };
    synthetic_frame(&spec).unwrap().save(&path).unwrap();
    path
}

const QUICK: [&str; 10] = [
    "--timesteps", "64", "--n-steps", "32", "--minibatch-size", "16", "--epochs", "1", "--initial-amount", "100000",
];

#[test]
fn no_arguments_prints_usage_and_exits_2() {
    let out = winlab(&[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("Usage"));
}

#[test]
fn unknown_verb_or_flag_is_usage_error() {
    assert_eq!(winlab(&["fly"]).status.code(), Some(2));
    assert_eq!(winlab(&["shapes", "--bogus"]).status.code(), Some(2));
    assert_eq!(winlab(&["shapes", "--kind", "crypto"]).status.code(), Some(2));
}

#[test]
fn shapes_table_exact_ends_with_total() {
    let out = winlab(&["shapes", "--preset", "table_exact"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert_eq!(text.lines().last(), Some("total params 6763552"));
    assert!(text.contains("Flatten-15") && text.contains("[5632]"));
}

#[test]
fn shapes_adaptive_follows_weeks_and_kind() {
    let out = winlab(&["shapes", "--preset", "adaptive", "--weeks", "4", "--kind", "technical", "--stocks", "30"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out).lines().next(), Some("input [1, 20, 511]"));
    // the fixed table geometry refuses other inputs
    let out = winlab(&["shapes", "--preset", "table_exact", "--window", "10", "--width", "20"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error:"));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, "seed = 3\nwindow_weeks = 6\n[env]\nhmax = 7\n[ppo]\ngamma = 0.9\n").unwrap();
    let cfg = cfg.to_str().unwrap();
    let out = winlab(&["train", "--config", cfg, "--print-config"]);
    let text = stdout(&out);
    assert!(text.contains("seed = 3") && text.contains("window_weeks = 6"), "{text}");
    assert!(text.contains("hmax = 7") && text.contains("gamma = 0.9"));
    let out = winlab(&[
        "train", "--config", cfg, "--seed", "5", "--hmax", "9", "--gamma", "0.5", "--layout", "company",
        "--train-end", "2010-03-01", "--timesteps", "10", "--policy-preset", "table_exact", "--print-config",
    ]);
    let text = stdout(&out);
    assert!(text.contains("seed = 5") && text.contains("window_weeks = 6"), "{text}");
    assert!(text.contains("hmax = 9") && text.contains("gamma = 0.5"));
    assert!(text.contains("layout = \"company\"") && text.contains("train_end = \"2010-03-01\""));
    assert!(text.contains("total_timesteps = 10") && text.contains("preset = \"table_exact\""));
}

#[test]
fn bad_config_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let out = winlab(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("config error"));
    let out = winlab(&["train"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ingest_and_features_write_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = market(dir.path(), "m.csv", 1, false);
    let aligned = dir.path().join("aligned.csv");
    let out = winlab(&["ingest", "--dataset", data.to_str().unwrap(), "--out", aligned.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(fs::read_to_string(&aligned).unwrap().lines().count(), 1 + 120 * 2);

    let out = winlab(&["features", "--dataset", aligned.to_str().unwrap(), "--layout", "company"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    // date + 1 + (2 + 8) * 2
    assert_eq!(header.len(), 22);
    assert_eq!(&header[..4], ["date", "amount", "price_T00", "holdings_T00"]);
    assert_eq!(text.lines().count(), 121);
}

#[test]
fn train_then_backtest_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = market(dir.path(), "m.csv", 2, false);
    let run = dir.path().join("run");
    let mut args = vec!["train", "--dataset", data.to_str().unwrap(), "--seed", "4", "--out", run.to_str().unwrap()];
    args.extend(QUICK);
    let out = winlab(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    for f in ["report.json", "training_log.csv", "trajectory.csv", "policy.ckpt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let trained: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();

    let again = dir.path().join("again");
    let mut args2 = args.clone();
    let pos = args2.iter().position(|a| *a == run.to_str().unwrap()).unwrap();
    let again_str = again.to_str().unwrap().to_string();
    args2[pos] = &again_str;
    assert!(winlab(&args2).status.success());
    for f in ["training_log.csv", "trajectory.csv", "policy.ckpt"] {
        assert_eq!(fs::read(run.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
    // the report records its own out_dir, everything else must match
    let mut rerun: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(again.join("report.json")).unwrap()).unwrap();
    rerun["config"]["out_dir"] = trained["config"]["out_dir"].clone();
    assert_eq!(rerun, trained);

    let bt = dir.path().join("bt");
    let ckpt = run.join("policy.ckpt");
    let out = winlab(&[
        "backtest", "--dataset", data.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(),
        "--initial-amount", "100000", "--out", bt.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let replay: serde_json::Value = serde_json::from_str(&fs::read_to_string(bt.join("report.json")).unwrap()).unwrap();
    assert_eq!(replay["final_value"], trained["final_value"]);
    assert_eq!(replay["policy_digest"], trained["policy_digest"]);
    assert_eq!(fs::read(run.join("trajectory.csv")).unwrap(), fs::read(bt.join("trajectory.csv")).unwrap());
}

#[test]
fn grid_is_reproducible_and_report_reemits() {
    let dir = tempfile::tempdir().unwrap();
    let sma = market(dir.path(), "sma.csv", 5, false);
    let tech = market(dir.path(), "tech.csv", 6, true);
    let grid = |out: &Path| {
        let mut args = vec![
            "grid", "--sma-dataset", sma.to_str().unwrap(), "--technical-dataset", tech.to_str().unwrap(),
            "--seed", "7", "--jobs", "2", "--out", out.to_str().unwrap(),
        ];
        args.extend(QUICK);
        winlab(&args)
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let out = grid(&a);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(grid(&b).status.success());
    let table = fs::read_to_string(a.join("grid.csv")).unwrap();
    assert_eq!(table, fs::read_to_string(b.join("grid.csv")).unwrap());
    assert_eq!(table.lines().count(), 7);
    assert_eq!(stdout(&out), table);

    let c = dir.path().join("c");
    let json = a.join("grid.json");
    let out = winlab(&["report", "--from", json.to_str().unwrap(), "--out", c.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    for f in ["grid.csv", "grid.json", "plot_sma.svg", "plot_technical.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(c.join(f)).unwrap(), "{f}");
    }
}
