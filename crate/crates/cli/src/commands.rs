use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use dft_core::backtest::{export_curves, run_topk_dropk, write_summary_json, BacktestDay, BacktestReport, Benchmark};
use dft_core::data::{
    build_market_features, build_windows, load_market_csv, load_panel_csv, synth_generate, write_market_csv,
    write_panel_csv, MarketFeatures, MarketSeries, PanelDataset, Sample, Split, SynthConfig, WindowSpec,
};
use dft_core::eval::{aggregate, write_daily_csv, write_report_json, DailyScores, MetricsReport};
use dft_core::model::{mse_loss, DftModel, ModelConfig};
use dft_core::seed::sub_seed;
use dft_core::tensor::{
    finite_difference_gradcheck, sample_coordinates, GradcheckReport, Graph, OpKind, ParamStore, Tensor,
};
use dft_core::train::{save_checkpoint, train_epoch, Checkpoint, EpochStats, TrainState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{MarketMode, RunConfig};

pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.dft";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:03}.dft")
}

// ---------------------------------------------------------------- synth

pub fn synth(cfg: &SynthConfig, out: &Path) -> Result<(PathBuf, PathBuf)> {
    let (panel, market) = synth_generate(cfg)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let (p, m) = (out.join("panel.csv"), out.join("market.csv"));
    write_panel_csv(&panel, &p)?;
    write_market_csv(&market, &m)?;
    log::info!("wrote {} panel rows to {}", panel.row_count(), p.display());
    Ok((p, m))
}

// ---------------------------------------------------------------- data

/// Loaded inputs plus the windowed samples for every split.
pub struct Prepared {
    pub panel: PanelDataset,
    /// Market CSV restricted to the panel dates.
    pub market: MarketSeries,
    pub samples: Vec<Sample>,
}

impl Prepared {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let panel = load_panel_csv(&cfg.data.panel)?;
    let indices = cfg.data.market_mode == MarketMode::Indices;
    let market = load_market_csv(&cfg.data.market, indices)?
        .align(panel.dates())
        .with_context(|| format!("aligning {} with the panel", cfg.data.market.display()))?;
    let features = if indices {
        build_market_features(&market, &cfg.data.market_intervals)?
    } else {
        MarketFeatures::precomputed(&market)
    };
    ensure!(
        cfg.model.features == panel.n_features(),
        "model.features: configured {} but the panel has {} features",
        cfg.model.features,
        panel.n_features()
    );
    ensure!(
        cfg.model.market_features == features.width(),
        "model.market_features: configured {} but the market data yields {}",
        cfg.model.market_features,
        features.width()
    );
    let spec = WindowSpec {
        lookback: cfg.model.lookback,
        market_kernel: cfg.model.market_kernel,
        horizon: cfg.data.horizon,
    };
    let samples = build_windows(&panel, &features, &spec, &cfg.data.split)?;
    let count = |s| samples.iter().filter(|x| x.split == s).count();
    log::info!(
        "{} samples: {} train, {} valid, {} test",
        samples.len(),
        count(Split::Train),
        count(Split::Valid),
        count(Split::Test)
    );
    Ok(Prepared { panel, market, samples })
}

// ---------------------------------------------------------------- train

fn config_diff(a: &impl Serialize, b: &impl Serialize) -> Vec<String> {
    let (a, b) = (serde_json::to_value(a).unwrap(), serde_json::to_value(b).unwrap());
    match (a.as_object(), b.as_object()) {
        (Some(a), Some(b)) => a.keys().filter(|k| a.get(*k) != b.get(*k)).cloned().collect(),
        _ => vec![String::new()],
    }
}

fn check_model_matches(cfg: &RunConfig, ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let diff = config_diff(&cfg.model, &ckpt.meta.model);
    if !diff.is_empty() {
        bail!(
            "checkpoint {} does not match the config: model.{} differ",
            path.display(),
            diff.join(", model.")
        );
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct LogLine<'a> {
    #[serde(flatten)]
    stats: &'a EpochStats,
    train_samples: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint written when the run stopped.
    pub checkpoint: PathBuf,
    pub epochs: Vec<EpochStats>,
}

/// Trains on the train split. With `resume`, optimizer state and the epoch
/// counter come from the checkpoint and the log is appended to. Stops
/// after epoch `until_epoch` (exclusive count) when given.
pub fn train(cfg: &RunConfig, resume: Option<&Path>, until_epoch: Option<usize>) -> Result<TrainOutcome> {
    let data = prepare(cfg)?;
    let train_set = data.split(Split::Train);
    ensure!(!train_set.is_empty(), "data.split: the train split is empty");
    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "init", 0));
    let (model, mut store) = DftModel::new(&cfg.model, &mut init_rng)?;
    let mut state = match resume {
        Some(path) => {
            let ckpt = Checkpoint::read(path)?;
            check_model_matches(cfg, &ckpt, path)?;
            if ckpt.meta.adam != cfg.train.adam {
                bail!(
                    "checkpoint {} was trained with different train.adam settings",
                    path.display()
                );
            }
            let state = ckpt.restore(&mut store)?;
            log::info!("resuming from {} at epoch {}", path.display(), state.epoch);
            state
        }
        None => TrainState::new(&store, &cfg.train),
    };

    let total = cfg.train.schedule.total_epochs;
    let stop = until_epoch.unwrap_or(total).min(total);
    ensure!(
        state.epoch <= stop,
        "checkpoint is at epoch {} but the run should stop at {stop}",
        state.epoch
    );
    let log_path = cfg.output_dir.join(TRAIN_LOG);
    let log_file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let mut log_out = BufWriter::new(log_file);

    let mut epochs = Vec::new();
    while state.epoch < stop {
        let stats = train_epoch(&model, &mut store, &train_set, &mut state, &cfg.train)?;
        let line = LogLine {
            stats: &stats,
            train_samples: train_set.len(),
        };
        writeln!(log_out, "{}", serde_json::to_string(&line)?)?;
        log_out.flush()?;
        log::info!(
            "epoch {:>3}/{total}  lr {:.3e}  loss {:.5}  grad {:.3}  {} ms",
            stats.epoch + 1,
            stats.lr,
            stats.mean_loss,
            stats.grad_norm,
            stats.wall_ms
        );
        let every = cfg.train.checkpoint_every;
        if every > 0 && state.epoch % every == 0 && state.epoch < stop {
            save_checkpoint(
                &cfg.output_dir.join(epoch_checkpoint_name(state.epoch)),
                &cfg.model,
                &store,
                &state,
            )?;
        }
        epochs.push(stats);
    }
    let name = if state.epoch == total {
        FINAL_CHECKPOINT.to_string()
    } else {
        epoch_checkpoint_name(state.epoch)
    };
    let checkpoint = cfg.output_dir.join(name);
    save_checkpoint(&checkpoint, &cfg.model, &store, &state)?;
    log::info!("wrote {}", checkpoint.display());
    Ok(TrainOutcome { checkpoint, epochs })
}

// ---------------------------------------------------------------- eval

/// What to rank stocks by.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scores {
    Model,
    /// The normalized labels themselves, a sanity ceiling.
    Labels,
}

pub struct Scored<'a> {
    pub sample: &'a Sample,
    pub scores: Vec<f64>,
}

pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<(DftModel, ParamStore)> {
    let ckpt = Checkpoint::read(checkpoint)?;
    check_model_matches(cfg, &ckpt, checkpoint)?;
    let (model, mut store) = DftModel::new(&ckpt.meta.model, &mut ChaCha8Rng::seed_from_u64(0))?;
    ckpt.restore(&mut store)?;
    Ok((model, store))
}

pub fn score_split<'a>(
    data: &'a Prepared,
    model: &DftModel,
    store: &ParamStore,
    split: Split,
    scores: Scores,
) -> Result<Vec<Scored<'a>>> {
    let samples = data.split(split);
    ensure!(!samples.is_empty(), "the {} split is empty", split.as_str());
    samples
        .into_iter()
        .map(|s| {
            let scores = match scores {
                Scores::Model => model.predict_values(store, &s.features, &s.market)?,
                Scores::Labels => s.labels.clone(),
            };
            Ok(Scored { sample: s, scores })
        })
        .collect()
}

pub struct EvalOutcome {
    pub report: MetricsReport,
    pub json: PathBuf,
    pub daily_csv: PathBuf,
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, split: Split, scores: Scores) -> Result<EvalOutcome> {
    let (model, store) = load_model(cfg, checkpoint)?;
    let data = prepare(cfg)?;
    let days: Vec<DailyScores> = score_split(&data, &model, &store, split, scores)?
        .into_iter()
        .map(|x| DailyScores {
            date: x.sample.date,
            symbols: x.sample.symbols.clone(),
            scores: x.scores,
            labels: x.sample.labels.clone(),
        })
        .collect();
    let report = aggregate(&days)?;
    fs::create_dir_all(&cfg.output_dir)?;
    let json = cfg.output_dir.join(format!("metrics_{}.json", split.as_str()));
    let daily_csv = cfg.output_dir.join(format!("daily_ic_{}.csv", split.as_str()));
    write_report_json(&report, &json)?;
    write_daily_csv(&report, &daily_csv)?;
    log::info!(
        "{}: IC {:.4}  ICIR {:.4}  RankIC {:.4}  RankICIR {:.4}  ({} days)",
        split.as_str(),
        report.ic,
        report.icir,
        report.rank_ic,
        report.rank_icir,
        report.n_days
    );
    Ok(EvalOutcome {
        report,
        json,
        daily_csv,
    })
}

// ---------------------------------------------------------------- backtest

pub struct BacktestOutcome {
    pub report: BacktestReport,
    pub json: PathBuf,
    pub curves_csv: PathBuf,
}

pub fn backtest(cfg: &RunConfig, checkpoint: &Path, split: Split, scores: Scores) -> Result<BacktestOutcome> {
    let (model, store) = load_model(cfg, checkpoint)?;
    let data = prepare(cfg)?;
    let index = match &cfg.backtest.benchmark {
        Benchmark::EqualWeight => None,
        Benchmark::Index(name) => Some(data.market.names.iter().position(|n| n == name).with_context(|| {
            format!(
                "backtest.benchmark: no index '{name}' in the market data (have {:?})",
                data.market.names
            )
        })?),
    };
    let days: Vec<BacktestDay> = score_split(&data, &model, &store, split, scores)?
        .into_iter()
        .map(|x| {
            let t = x.sample.t;
            // Same holding window as the stock returns: close t+1 to close t+2.
            let benchmark_return = index.and_then(|i| {
                let levels = &data.market.levels;
                (t + 2 < levels.len()).then(|| levels[t + 2][i] / levels[t + 1][i] - 1.0)
            });
            BacktestDay {
                date: x.sample.date,
                symbols: x.sample.symbols.clone(),
                scores: x.scores,
                returns: x.sample.next_returns.clone(),
                benchmark_return,
            }
        })
        .collect();
    let report = run_topk_dropk(&days, &cfg.backtest)?;
    fs::create_dir_all(&cfg.output_dir)?;
    let json = cfg.output_dir.join(format!("backtest_{}.json", split.as_str()));
    let curves_csv = cfg.output_dir.join(format!("curves_{}.csv", split.as_str()));
    write_summary_json(&report, &json)?;
    export_curves(&report, &curves_csv)?;
    log::info!(
        "{}: AR {:.4}  IR {:.4}  over {} days",
        split.as_str(),
        report.ar,
        report.ir,
        report.dates.len()
    );
    Ok(BacktestOutcome {
        report,
        json,
        curves_csv,
    })
}

// ---------------------------------------------------------------- gradcheck

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Small model used when no config is given.
pub fn reference_gradcheck_model() -> ModelConfig {
    ModelConfig {
        features: 6,
        dim: 8,
        lookback: 8,
        heads: 2,
        pool_kernel: 3,
        market_kernel: 2,
        market_features: 3,
        tc_layers: 1,
        ..ModelConfig::default()
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub coordinates: usize,
    pub stocks: usize,
    pub eps: f64,
    /// Backward rule to corrupt, for exercising the checker itself.
    pub fault: Option<OpKind>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            coordinates: 64,
            stocks: 4,
            eps: 1e-6,
            fault: None,
        }
    }
}

/// Central-difference check of the full model's MSE loss on random inputs.
/// Parameters are jittered off their initial values so that zero-initialised
/// weights do not hide paths.
pub fn gradcheck(model_cfg: &ModelConfig, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    ensure!(opts.stocks >= 1, "gradcheck needs at least one stock");
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(opts.seed, "gradcheck", 0));
    let (model, mut store) = DftModel::new(model_cfg, &mut rng)?;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let mut v = store.value(id).clone();
        v.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.3..0.3));
        store.set_value(id, v)?;
    }
    let mut uniform = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let x = uniform(&[opts.stocks, model_cfg.lookback, model_cfg.features]);
    let m = uniform(&[model_cfg.market_rows(), model_cfg.market_features]);
    let labels = uniform(&[opts.stocks]).into_data();
    let coords = sample_coordinates(&store, opts.coordinates, &mut rng);
    let fault = opts.fault;
    let report = finite_difference_gradcheck(
        &mut store,
        |g, s| {
            let out = model.forward(g, s, &x, &m)?;
            mse_loss(g, out.predictions, &labels)
        },
        || match fault {
            Some(kind) => Graph::with_fault(kind),
            None => Graph::new(),
        },
        &coords,
        opts.eps,
    )?;
    Ok(report)
}
