use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bpl_cli::commands::{self, CompareConfig, InspectOptions, Split, TrainOptions};
use bpl_cli::config::{read_json, to_pretty_json, ExperimentConfig};
use bpl_cli::error::CliError;
use bpl_core::data::SyntheticSpec;
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "bpl", version, about = "Basis-projected layer experiments")]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic sparse dataset.
    GenData {
        /// SyntheticSpec JSON; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train one model and write its checkpoint and report.
    Train {
        /// ExperimentConfig JSON; defaults apply to missing fields.
        #[arg(long, conflicts_with = "resume")]
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "resume")]
        seed: Option<u64>,
        /// Dataset directory, overriding the config's data source.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        /// Continue from a checkpoint (its stored config is used).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many total steps, leaving a resumable checkpoint.
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Score a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Score every sample of this dataset directory instead.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train and score a grid of front layers, sizes and initializers.
    Compare {
        /// CompareConfig JSON; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run a single seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Export a 2-D embedding of learned bases and reference sets.
    InspectBases {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Checkpoint whose bases serve as the "initial" set.
        #[arg(long)]
        initial: Option<PathBuf>,
        #[arg(long)]
        no_initial: bool,
        /// Add the SVD components of the training data.
        #[arg(long)]
        svd: bool,
        /// Add the NMF components of the training data.
        #[arg(long)]
        nmf: bool,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_or_default<T: Default + for<'de> serde::Deserialize<'de>>(
    path: Option<&Path>,
) -> Result<T, CliError> {
    path.map_or_else(|| Ok(T::default()), read_json)
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData {
            config,
            seed,
            out,
            force,
        } => {
            let mut spec: SyntheticSpec = load_or_default(config.as_deref())?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            commands::gen_data(&spec, &out, force)?;
        }
        Command::Train {
            config,
            seed,
            data,
            out,
            force,
            resume,
            max_steps,
        } => {
            let mut c = match &config {
                Some(p) => read_json(p)?,
                None => ExperimentConfig::default(),
            };
            if let Some(s) = seed {
                c.seed = s;
            }
            commands::train(
                &c,
                &TrainOptions {
                    out: &out,
                    force,
                    resume: resume.as_deref(),
                    data: data.as_deref(),
                    max_steps,
                },
            )?;
        }
        Command::Evaluate {
            checkpoint,
            data,
            split,
            out,
            force,
        } => {
            let report = commands::evaluate_checkpoint(&checkpoint, data.as_deref(), split)?;
            let file = out.join(format!("evaluation_{}.json", report.split.name()));
            if file.exists() && !force {
                return Err(CliError::OutputExists(file));
            }
            std::fs::create_dir_all(&out)
                .and_then(|_| std::fs::write(&file, to_pretty_json(&report)))
                .map_err(|e| {
                    CliError::Core(bpl_core::Error::Io {
                        path: file.clone(),
                        source: e,
                    })
                })?;
            log::info!(
                "{} samples: micro-F1 {:.4}, macro-F1 {:.4}",
                report.n_samples,
                report.metrics.micro_f1,
                report.metrics.macro_f1
            );
        }
        Command::Compare {
            config,
            seed,
            out,
            force,
        } => {
            let mut c: CompareConfig = load_or_default(config.as_deref())?;
            if let Some(s) = seed {
                c.seeds = vec![s];
            }
            commands::prepare_output_dir(&out, force)?;
            let report = commands::compare(&c)?;
            commands::write_comparison(&report, &out)?;
            for s in &report.summary {
                log::info!(
                    "{:<32} micro-F1 {}",
                    s.key.label(),
                    s.mean_micro_f1
                        .map(|v| format!("{v:.4}"))
                        .unwrap_or_else(|| "-".into())
                );
            }
        }
        Command::InspectBases {
            checkpoint,
            initial,
            no_initial,
            svd,
            nmf,
            data,
            out,
        } => {
            let sets = commands::inspect_bases(&InspectOptions {
                checkpoint: &checkpoint,
                initial: initial.as_deref(),
                include_initial: !no_initial,
                include_svd: svd,
                include_nmf: nmf,
                data: data.as_deref(),
                out: &out,
            })?;
            log::info!("embedded sets: {}", sets.join(", "));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            let report = anyhow::Error::new(e).context("bpl failed");
            eprintln!("error: {report:#}");
            ExitCode::from(code as u8)
        }
    }
}
