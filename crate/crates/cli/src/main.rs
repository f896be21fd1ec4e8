use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use dft_cli::commands::{self, GradcheckOptions, Scores, GRADCHECK_TOLERANCE};
use dft_cli::RunConfig;
use dft_core::data::{Split, SynthConfig};
use dft_core::tensor::OpKind;

// Each training step builds and drops a whole graph; glibc malloc hands those pages back to the OS every time.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(
    name = "dft",
    version,
    about = "Dual-branch stock ranking model: data, training, evaluation, backtests"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic panel.csv and market.csv with a planted signal.
    Synth {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        stocks: usize,
        #[arg(long, default_value_t = 300)]
        days: usize,
        /// Strength of the planted signal in feature f0; 0 gives pure noise.
        #[arg(long, default_value_t = 5.0)]
        signal: f64,
        #[arg(long, default_value_t = 5)]
        horizon: usize,
        #[arg(long, default_value_t = 6)]
        features: usize,
        #[arg(long, default_value_t = 2)]
        indices: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the train split; writes checkpoints and train_log.jsonl.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this many epochs have completed.
        #[arg(long)]
        until_epoch: Option<usize>,
    },
    /// IC, ICIR, RankIC and RankICIR on a split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, hide = true)]
        score_labels: bool,
    },
    /// Daily top-k simulation on a split.
    Backtest {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, hide = true)]
        score_labels: bool,
    },
    /// Compare autodiff gradients with finite differences on random inputs.
    Gradcheck {
        /// Take the model section from this run config instead of the built-in small model.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of parameter coordinates to check.
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 4)]
        stocks: usize,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt_backward: Option<String>,
    },
}

fn scores(labels: bool) -> Scores {
    if labels {
        Scores::Labels
    } else {
        Scores::Model
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth {
            seed,
            stocks,
            days,
            signal,
            horizon,
            features,
            indices,
            out,
        } => {
            let cfg = SynthConfig {
                seed,
                stocks,
                dates: days,
                signal_strength: signal,
                horizon,
                features,
                indices,
                ..SynthConfig::default()
            };
            commands::synth(&cfg, &out)?;
        }
        Command::Train {
            config,
            resume,
            until_epoch,
        } => {
            let cfg = RunConfig::load(&config)?;
            let outcome = commands::train(&cfg, resume.as_deref(), until_epoch)?;
            println!("{}", outcome.checkpoint.display());
        }
        Command::Eval {
            config,
            checkpoint,
            split,
            score_labels,
        } => {
            let cfg = RunConfig::load(&config)?;
            let out = commands::eval(&cfg, &checkpoint, split.into(), scores(score_labels))?;
            println!("{}", serde_json::to_string_pretty(&out.report)?);
        }
        Command::Backtest {
            config,
            checkpoint,
            split,
            score_labels,
        } => {
            let cfg = RunConfig::load(&config)?;
            let out = commands::backtest(&cfg, &checkpoint, split.into(), scores(score_labels))?;
            println!("{}", serde_json::to_string_pretty(&out.report.summary())?);
        }
        Command::Gradcheck {
            config,
            samples,
            stocks,
            eps,
            seed,
            corrupt_backward,
        } => {
            let model = match config {
                Some(path) => RunConfig::load(&path)?.model,
                None => commands::reference_gradcheck_model(),
            };
            let fault = corrupt_backward.map(|s| s.parse::<OpKind>()).transpose()?;
            let opts = GradcheckOptions {
                seed,
                coordinates: samples,
                stocks,
                eps,
                fault,
            };
            let report = commands::gradcheck(&model, &opts)?;
            let worst = report
                .worst
                .as_ref()
                .map(|(n, i)| format!("{n}[{i}]"))
                .unwrap_or("-".into());
            println!(
                "max relative error {:.3e} over {} coordinates (worst {worst})",
                report.max_rel_err, report.checked
            );
            if !(report.max_rel_err < GRADCHECK_TOLERANCE) {
                eprintln!("gradcheck failed: tolerance {GRADCHECK_TOLERANCE:e}");
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DFT_LOG", "info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
