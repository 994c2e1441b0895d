use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sts_cli::config::OUTPUT_ROOT_ENV;
use sts_cli::pipeline::{self, Method};
use sts_cli::{CliResult, ExperimentConfig};

/// Accuracy-preserving calibration experiments.
#[derive(Parser)]
#[command(name = "sts", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a config field, e.g. `--set calibration.epochs=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory, replacing `output_dir` from the config.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one classifier per trial seed.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Fit a calibration on top of checkpoints (default: every pretrained trial).
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        method: Method,
        checkpoints: Vec<PathBuf>,
    },
    /// Accuracy and ECE before/after calibration, aggregated over trials.
    Evaluate {
        #[command(flatten)]
        common: Common,
        checkpoints: Vec<PathBuf>,
    },
    /// AUROC/AUPR of uncertainty scores on in-distribution vs OOD inputs.
    Ood {
        #[command(flatten)]
        common: Common,
        checkpoints: Vec<PathBuf>,
    },
    /// Validation ECE over the beta grid, without writing checkpoints.
    TuneBeta {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "sts")]
        method: Method,
        checkpoints: Vec<PathBuf>,
    },
}

fn load(common: &Common) -> CliResult<ExperimentConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(dir) = &common.output_dir {
        let quoted = toml::Value::String(dir.to_string_lossy().into_owned());
        overrides.push(format!("output_dir={quoted}"));
    }
    let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from);
    ExperimentConfig::load(&common.config, &overrides, root.as_deref())
}

fn or_default(given: Vec<PathBuf>, fallback: impl FnOnce() -> Vec<PathBuf>) -> Vec<PathBuf> {
    if given.is_empty() {
        fallback()
    } else {
        given
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Pretrain { common } => {
            let config = load(&common)?;
            for o in pipeline::cmd_pretrain(&config)? {
                let last = o.trace.epoch_losses.last().copied().unwrap_or(f64::NAN);
                println!("trial {}: final loss {last:.6} -> {}", o.trial_seed, o.checkpoint.display());
            }
        }
        Command::Calibrate { common, method, checkpoints } => {
            let config = load(&common)?;
            let checkpoints = or_default(checkpoints, || pipeline::default_pretrained(&config));
            for o in pipeline::cmd_calibrate(&config, &checkpoints, method)? {
                let detail = match (o.beta, o.temperature) {
                    (Some(b), _) => format!("beta {b:.2}"),
                    (_, Some(t)) => format!("T {t:.4}"),
                    _ => String::new(),
                };
                println!("trial {} {}: {detail} -> {}", o.trial_seed, o.method.name(), o.checkpoint.display());
            }
        }
        Command::Evaluate { common, checkpoints } => {
            let config = load(&common)?;
            let checkpoints = or_default(checkpoints, || pipeline::default_evaluation_set(&config));
            print!("{}", pipeline::cmd_evaluate(&config, &checkpoints)?.to_table());
        }
        Command::Ood { common, checkpoints } => {
            let config = load(&common)?;
            let checkpoints = or_default(checkpoints, || {
                config.trial_seeds.iter().map(|&t| pipeline::calibrated_path(&config, t, Method::Sts)).collect()
            });
            print!("{}", pipeline::cmd_ood(&config, &checkpoints)?.to_table());
        }
        Command::TuneBeta { common, method, checkpoints } => {
            let config = load(&common)?;
            let checkpoints = or_default(checkpoints, || pipeline::default_pretrained(&config));
            print!("{}", pipeline::cmd_tune_beta(&config, &checkpoints, method)?.to_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
