use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use dft_cli::commands::{self, Scores, FINAL_CHECKPOINT, TRAIN_LOG};
use dft_cli::RunConfig;
use dft_core::backtest::{annualized_return, information_ratio, Benchmark};
use dft_core::data::{load_panel_csv, Split, SynthConfig};
use dft_core::eval::read_daily_csv;
use dft_core::stats::{mean, population_std, ratio_or_sentinel};
use serde_json::{json, Value};
use tempfile::TempDir;

fn dft() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dft"));
    c.env("DFT_LOG", "error");
    c
}

fn small_model() -> Value {
    json!({
        "features": 6, "dim": 8, "lookback": 8, "heads": 2,
        "pool_kernel": 3, "market_kernel": 2, "market_features": 30
    })
}

/// Synthetic data plus a config file next to it.
struct Fixture {
    dir: TempDir,
    config: PathBuf,
}

impl Fixture {
    fn new(synth: SynthConfig, overrides: Value) -> Self {
        let dir = tempfile::tempdir().unwrap();
        commands::synth(&synth, &dir.path().join("data")).unwrap();
        let mut cfg = json!({
            "seed": 3,
            "output_dir": "run",
            "data": {
                "panel": "data/panel.csv",
                "market": "data/market.csv",
                "split": {"train_fraction": 0.5, "valid_fraction": 0.1}
            },
            "model": small_model(),
            "train": {"schedule": {"total_epochs": 2}},
            "backtest": {"top_k": 3}
        });
        merge(&mut cfg, overrides);
        let config = dir.path().join("cfg.json");
        std::fs::write(&config, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        Self { dir, config }
    }

    fn small() -> Self {
        Self::new(
            SynthConfig {
                stocks: 8,
                dates: 120,
                ..SynthConfig::default()
            },
            json!({}),
        )
    }

    fn cfg(&self) -> RunConfig {
        RunConfig::load(&self.config).unwrap()
    }

    fn run_dir(&self) -> PathBuf {
        self.dir.path().join("run")
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

fn write_config(dir: &Path, cfg: Value) -> PathBuf {
    let p = dir.join("cfg.json");
    std::fs::write(&p, cfg.to_string()).unwrap();
    p
}

// ---------------------------------------------------------------- synth

#[test]
fn synth_is_reproducible_and_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let status = dft()
            .args([
                "synth", "--seed", "11", "--stocks", "20", "--days", "300", "--signal", "2", "--out",
            ])
            .arg(dir.path().join(out))
            .status()
            .unwrap();
        assert!(status.success());
    }
    for f in ["panel.csv", "market.csv"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let panel = load_panel_csv(&dir.path().join("a/panel.csv")).unwrap();
    assert_eq!(panel.row_count(), 20 * 300);
    assert_eq!((panel.n_symbols(), panel.n_dates()), (20, 300));
}

#[test]
fn synth_into_unwritable_location_fails() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let out = dft()
        .args(["synth", "--out"])
        .arg(blocker.join("sub"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

// ---------------------------------------------------------------- config

#[test]
fn missing_data_file_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("market.csv"), "date,idx0\n").unwrap();
    let cfg = write_config(
        dir.path(),
        json!({"output_dir": "run", "data": {"panel": "nope.csv", "market": "market.csv"}}),
    );
    let out = dft().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("data.panel"), "{err}");
}

#[test]
fn absent_data_field_is_reported_with_its_path() {
    let err = RunConfig::from_json(r#"{"output_dir": "x", "data": {"market": "m.csv"}}"#).unwrap_err();
    let msg = format!("{err:#}");
    assert!(msg.contains("data") && msg.contains("panel"), "{msg}");
}

#[test]
fn unknown_fields_are_rejected() {
    let base = r#"{"output_dir": "x", "data": {"panel": "p", "market": "m"}, "model": {"dimm": 8}}"#;
    let msg = format!("{:#}", RunConfig::from_json(base).unwrap_err());
    assert!(
        msg.contains("model.dimm") || (msg.contains("model") && msg.contains("dimm")),
        "{msg}"
    );

    let top = r#"{"output_dir": "x", "data": {"panel": "p", "market": "m"}, "sede": 1}"#;
    assert!(format!("{:#}", RunConfig::from_json(top).unwrap_err()).contains("sede"));

    let seed = r#"{"output_dir": "x", "data": {"panel": "p", "market": "m"}, "train": {"seed": 4}}"#;
    assert!(format!("{:#}", RunConfig::from_json(seed).unwrap_err()).contains("train.seed"));
}

#[test]
fn feature_count_mismatch_names_the_model_field() {
    let fx = Fixture::new(
        SynthConfig {
            stocks: 6,
            dates: 100,
            features: 4,
            ..SynthConfig::default()
        },
        json!({}),
    );
    let msg = format!("{:#}", commands::prepare(&fx.cfg()).err().unwrap());
    assert!(msg.contains("model.features"), "{msg}");

    let fx = Fixture::new(
        SynthConfig {
            stocks: 6,
            dates: 100,
            ..SynthConfig::default()
        },
        json!({"data": {"market_intervals": [5, 10]}}),
    );
    let msg = format!("{:#}", commands::prepare(&fx.cfg()).err().unwrap());
    assert!(msg.contains("model.market_features"), "{msg}");
}

#[test]
fn seed_flows_into_training() {
    let fx = Fixture::small();
    assert_eq!(fx.cfg().train.seed, 3);
}

// ---------------------------------------------------------------- train

#[test]
fn smoke_run_writes_one_checkpoint_and_a_log() {
    let fx = Fixture::small();
    let out = dft().args(["train", "--config"]).arg(&fx.config).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpts: Vec<_> = std::fs::read_dir(fx.run_dir())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".dft"))
        .collect();
    assert_eq!(ckpts, [FINAL_CHECKPOINT]);
    let log = std::fs::read_to_string(fx.run_dir().join(TRAIN_LOG)).unwrap();
    let lines: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["epoch"], i);
        for key in ["lr", "mean_loss", "grad_norm", "wall_ms"] {
            assert!(l.get(key).is_some(), "{key}");
        }
    }
}

#[test]
fn cadence_checkpoints_are_written() {
    let fx = Fixture::new(
        SynthConfig {
            stocks: 6,
            dates: 100,
            ..SynthConfig::default()
        },
        json!({"train": {"schedule": {"total_epochs": 3}, "checkpoint_every": 1}}),
    );
    commands::train(&fx.cfg(), None, None).unwrap();
    for name in ["epoch_001.dft", "epoch_002.dft", FINAL_CHECKPOINT] {
        assert!(fx.run_dir().join(name).is_file(), "{name}");
    }
}

#[test]
fn identical_runs_give_identical_checkpoint_bytes() {
    let fx = Fixture::small();
    let a = std::fs::read(commands::train(&fx.cfg(), None, None).unwrap().checkpoint).unwrap();
    let b = std::fs::read(commands::train(&fx.cfg(), None, None).unwrap().checkpoint).unwrap();
    assert_eq!(a, b);

    let other = Fixture::new(
        SynthConfig {
            stocks: 8,
            dates: 120,
            ..SynthConfig::default()
        },
        json!({"seed": 4}),
    );
    let c = std::fs::read(commands::train(&other.cfg(), None, None).unwrap().checkpoint).unwrap();
    assert_ne!(a, c, "the seed must matter");
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let fx = Fixture::new(
        SynthConfig {
            stocks: 8,
            dates: 120,
            ..SynthConfig::default()
        },
        json!({"train": {"schedule": {"total_epochs": 3}}}),
    );
    let cfg = fx.cfg();
    let straight = std::fs::read(commands::train(&cfg, None, None).unwrap().checkpoint).unwrap();
    let straight_log = std::fs::read_to_string(fx.run_dir().join(TRAIN_LOG)).unwrap();

    let partial = commands::train(&cfg, None, Some(1)).unwrap();
    assert!(partial.checkpoint.ends_with("epoch_001.dft"));
    let resumed = commands::train(&cfg, Some(&partial.checkpoint), None).unwrap();
    assert_eq!(resumed.epochs.len(), 2);
    assert_eq!(std::fs::read(resumed.checkpoint).unwrap(), straight);

    let strip = |log: &str| -> Vec<Value> {
        log.lines()
            .map(|l| {
                let mut v: Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("wall_ms");
                v
            })
            .collect()
    };
    let resumed_log = std::fs::read_to_string(fx.run_dir().join(TRAIN_LOG)).unwrap();
    assert_eq!(strip(&resumed_log), strip(&straight_log));
}

// ---------------------------------------------------------------- eval

fn trained(fx: &Fixture) -> PathBuf {
    commands::train(&fx.cfg(), None, None).unwrap().checkpoint
}

#[test]
fn labels_as_scores_give_perfect_correlation() {
    let fx = Fixture::small();
    let ckpt = trained(&fx);
    let out = commands::eval(&fx.cfg(), &ckpt, Split::Test, Scores::Labels).unwrap();
    assert_eq!(out.report.ic, 1.0);
    assert_eq!(out.report.rank_ic, 1.0);
    let json: Value = serde_json::from_str(&std::fs::read_to_string(&out.json).unwrap()).unwrap();
    assert_eq!(json["icir"], "inf");
}

#[test]
fn icir_recomputes_from_the_daily_csv() {
    let fx = Fixture::small();
    let ckpt = trained(&fx);
    let out = dft()
        .args(["eval", "--split", "test", "--config"])
        .arg(&fx.config)
        .arg("--checkpoint")
        .arg(&ckpt)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(fx.run_dir().join("metrics_test.json")).unwrap()).unwrap();
    let daily = read_daily_csv(&fx.run_dir().join("daily_ic_test.csv")).unwrap();
    let ics: Vec<f64> = daily.iter().map(|d| d.ic).collect();
    let rics: Vec<f64> = daily.iter().map(|d| d.rank_ic).collect();
    assert_eq!(report["n_days"], daily.len());
    assert_eq!(report["ic"].as_f64().unwrap(), mean(&ics));
    assert_eq!(
        report["icir"].as_f64().unwrap(),
        ratio_or_sentinel(mean(&ics), population_std(&ics))
    );
    assert_eq!(
        report["rank_icir"].as_f64().unwrap(),
        ratio_or_sentinel(mean(&rics), population_std(&rics))
    );
}

#[test]
fn untrained_model_on_noise_has_no_skill() {
    let fx = Fixture::new(
        SynthConfig {
            stocks: 20,
            dates: 400,
            signal_strength: 0.0,
            seed: 21,
            ..SynthConfig::default()
        },
        json!({"train": {"schedule": {"total_epochs": 0}}, "data": {"split": {"train_fraction": 0.2}}}),
    );
    let ckpt = trained(&fx);
    let out = commands::eval(&fx.cfg(), &ckpt, Split::Test, Scores::Model).unwrap();
    assert!(out.report.ic.abs() < 0.1, "{:?}", out.report);
    assert!(out.report.n_days > 100);
}

#[test]
fn checkpoint_from_another_model_is_refused() {
    let fx = Fixture::small();
    let ckpt = trained(&fx);
    let mut cfg = fx.cfg();
    cfg.model.dim = 16;
    let msg = format!(
        "{:#}",
        commands::eval(&cfg, &ckpt, Split::Test, Scores::Model).err().unwrap()
    );
    assert!(msg.contains("model.dim"), "{msg}");
    let msg = format!("{:#}", commands::train(&cfg, Some(&ckpt), None).err().unwrap());
    assert!(msg.contains("model.dim"), "{msg}");
}

// ---------------------------------------------------------------- backtest

#[test]
fn holding_everything_tracks_the_equal_weight_benchmark() {
    let fx = Fixture::new(
        SynthConfig {
            stocks: 8,
            dates: 120,
            ..SynthConfig::default()
        },
        json!({"backtest": {"top_k": 50}}),
    );
    let ckpt = trained(&fx);
    let out = commands::backtest(&fx.cfg(), &ckpt, Split::Test, Scores::Model).unwrap();
    for (p, b) in out.report.portfolio_returns.iter().zip(&out.report.benchmark_returns) {
        assert!((p - b).abs() < 1e-15);
    }
    assert!(out.report.turnover.iter().all(|&t| t == 0.0));
}

#[test]
fn backtest_is_deterministic_and_recomputable() {
    let fx = Fixture::small();
    let ckpt = trained(&fx);
    let run = || {
        let out = dft()
            .args(["backtest", "--split", "test", "--config"])
            .arg(&fx.config)
            .arg("--checkpoint")
            .arg(&ckpt)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        (
            std::fs::read(fx.run_dir().join("backtest_test.json")).unwrap(),
            std::fs::read(fx.run_dir().join("curves_test.csv")).unwrap(),
        )
    };
    let first = run();
    assert_eq!(first, run());

    let mut reader = csv::Reader::from_reader(first.1.as_slice());
    let excess: Vec<f64> = reader.records().map(|r| r.unwrap()[2].parse().unwrap()).collect();
    let summary: Value = serde_json::from_slice(&first.0).unwrap();
    assert_eq!(summary["ar"].as_f64().unwrap(), annualized_return(&excess));
    assert_eq!(summary["ir"].as_f64().unwrap(), information_ratio(&excess));
    assert_eq!(summary["n_days"], excess.len());
}

#[test]
fn index_benchmark_uses_the_next_day_index_return() {
    let fx = Fixture::new(
        SynthConfig {
            stocks: 8,
            dates: 120,
            ..SynthConfig::default()
        },
        json!({"backtest": {"top_k": 3, "benchmark": {"index": "idx1"}}}),
    );
    let ckpt = trained(&fx);
    let cfg = fx.cfg();
    let out = commands::backtest(&cfg, &ckpt, Split::Test, Scores::Model).unwrap();
    let data = commands::prepare(&cfg).unwrap();
    let first = data.split(Split::Test)[0];
    let l = &data.market.levels;
    assert_eq!(
        out.report.benchmark_returns[0],
        l[first.t + 2][1] / l[first.t + 1][1] - 1.0
    );

    let mut bad = cfg.clone();
    bad.backtest.benchmark = Benchmark::Index("nope".into());
    let msg = format!(
        "{:#}",
        commands::backtest(&bad, &ckpt, Split::Test, Scores::Model)
            .err()
            .unwrap()
    );
    assert!(msg.contains("backtest.benchmark"), "{msg}");
}

// ---------------------------------------------------------------- gradcheck

#[test]
fn gradcheck_passes_on_the_reference_model() {
    let out = dft().args(["gradcheck", "--samples", "64"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("64 coordinates"));
}

#[test]
fn gradcheck_flags_a_corrupted_backward_rule() {
    for op in ["matmul", "wkv", "layer_norm"] {
        let out = dft()
            .args(["gradcheck", "--samples", "64", "--corrupt-backward", op])
            .output()
            .unwrap();
        assert!(!out.status.success(), "{op} corruption went unnoticed");
    }
    let out = dft()
        .args(["gradcheck", "--corrupt-backward", "bogus"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn single_coordinate_gradcheck_is_fast() {
    let started = Instant::now();
    let out = dft().args(["gradcheck", "--samples", "1"]).output().unwrap();
    assert!(out.status.success());
    assert!(started.elapsed().as_secs_f64() < 5.0);
}
