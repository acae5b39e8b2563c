use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sbattn::attention::saturation_sweep;
use sbattn::cost::count_madds;
use sbattn::{build_mobilenet_v2, GateKind, Mechanism};
use sbattn_harness::checks::{block_grad_check, run_trials, TOLERANCE};
use sbattn_harness::data::{load_cifar10, Split, DATA_DIR_ENV, DEFAULT_DATA_DIR};
use sbattn_harness::report::{write_cost_csv, write_epoch_csv, write_json, write_sweep_csv};
use sbattn_harness::{train_eval, ExperimentConfig, HarnessError, Result};

#[derive(Parser)]
#[command(name = "sbattn", version, about = "Channel-attention experiments on MobileNetV2")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on CIFAR-10 and write a run report.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = DATA_DIR_ENV, default_value = DEFAULT_DATA_DIR)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch CSV next to the JSON report.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Analytic parameter and multiply/add counts for a model config.
    CountCosts {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Seeded finite-difference checks of a whole attentive conv block.
    GradCheck {
        #[arg(long)]
        mechanism: Mechanism,
        #[arg(long, default_value = "tanh")]
        gate: GateKind,
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// Gradient norms of a saturating attention branch at several pre-gate offsets.
    SaturationSweep {
        #[arg(long)]
        mechanism: Mechanism,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        offsets: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a named preset as a config file.
    Preset {
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, data, out, csv } => {
            let cfg = ExperimentConfig::load(&config)?;
            let mut model = build_mobilenet_v2(&cfg.model_config()?)?;
            let train = load_cifar10(&data, Split::Train, cfg.train.subset_size, cfg.train.seed)?;
            let test = load_cifar10(&data, Split::Test, cfg.train.test_subset, cfg.train.seed)?;
            eprintln!("training {} parameters on {} images", model.param_count(), train.len());
            let report = train_eval(&mut model, &train, &test, &cfg.train)?;
            for e in &report.epochs {
                let lambda = e.lambda.as_ref().map(|l| format!(" lambda_mean {:.5}", l.mean)).unwrap_or_default();
                eprintln!(
                    "epoch {:>3} lr {:.5} loss {:.4} acc {:.4}{lambda}",
                    e.epoch, e.lr, e.train_loss, e.test_accuracy
                );
            }
            write_json(&report, &out)?;
            if let Some(path) = csv {
                write_epoch_csv(&report, &path)?;
            }
            Ok(true)
        }
        Command::CountCosts { config, out, csv } => {
            let cfg = ExperimentConfig::load(&config)?;
            let model = build_mobilenet_v2(&cfg.model_config()?)?;
            let report = count_madds(&model, model.input_shape(1))?;
            println!("params {} madds {} adds {}", report.params, report.madds, report.adds);
            write_json(&report, &out)?;
            if let Some(path) = csv {
                write_cost_csv(&report, &path)?;
            }
            Ok(true)
        }
        Command::GradCheck { mechanism, gate, trials } => {
            if trials == 0 {
                return Err(HarnessError::Config("at least one trial is required".into()));
            }
            let subject = format!("{} block, {} gate", mechanism.name(), gate.name());
            let summary = run_trials(subject, trials, |seed| block_grad_check(mechanism, gate, seed))?;
            println!(
                "{}: {} trials, max relative error {:.3e} (seed {}), bound {TOLERANCE:e}: {}",
                summary.subject,
                summary.trials,
                summary.max_relative_error,
                summary.worst_seed,
                if summary.passed { "ok" } else { "FAILED" }
            );
            Ok(summary.passed)
        }
        Command::SaturationSweep { mechanism, offsets, out } => {
            if offsets.is_empty() {
                return Err(HarnessError::Config("no offsets given".into()));
            }
            let rows = saturation_sweep(mechanism, &offsets)?;
            for r in &rows {
                println!(
                    "offset {:>8} trunk {:.6e} branch {:.6e} input {:.6e}",
                    r.offset, r.trunk_grad_norm, r.branch_grad_norm, r.input_grad_norm
                );
            }
            write_sweep_csv(&rows, &out)?;
            Ok(true)
        }
        Command::Preset { name, out } => {
            write_json(&ExperimentConfig::preset(&name)?, &out)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
