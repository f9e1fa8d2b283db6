//! `uwamod`: dataset generation, training, BER evaluation, and inspection for
//! unitary modulation design over underwater acoustic channels.
//!
//! Every command is a pure function of its configuration file, input files,
//! and seeds. Exit codes: 0 success, 2 validation error, 3 I/O or format
//! error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use commands::FChoice;
use config::RunConfig;
use uwamod::error::Error;

#[derive(Parser)]
#[command(name = "uwamod", version, about = "Unitary modulation design for underwater acoustic links")]
struct Cli {
    /// Worker threads for parallel sections (1 = fully sequential).
    /// Results are identical for any value; this only affects speed.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Builtin {
    Identity,
    Dft,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportFormat {
    Csv,
    Binary,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a channel dataset and print its summary statistics.
    GenDataset {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset seed (default: train.seed from the config).
        #[arg(long)]
        seed: Option<u64>,
        /// Number of realizations (default: train.m_train from the config).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the network and write checkpoint, training log, and modulation.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Training dataset (UWAD).
        #[arg(long)]
        train_data: PathBuf,
        /// Test dataset (UWAD).
        #[arg(long)]
        test_data: PathBuf,
        #[arg(long)]
        out_checkpoint: PathBuf,
        #[arg(long)]
        out_fmatrix: PathBuf,
        /// Training log CSV path.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Monte Carlo BER sweep of a modulation over a dataset.
    EvalBer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Modulation matrix file (UWAF).
        #[arg(long, conflicts_with = "builtin")]
        fmatrix: Option<PathBuf>,
        /// Built-in baseline instead of a file.
        #[arg(long, value_enum)]
        builtin: Option<Builtin>,
        /// SNR grid in dB, comma separated (default: eval.snr_db).
        #[arg(long, value_delimiter = ',')]
        snr: Option<Vec<f64>>,
        /// Trials per realization (default: eval.trials_per_realization).
        #[arg(long)]
        trials: Option<u64>,
        /// Noise/bit seed (default: eval.noise_seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Optional snr vs log10(BER) data file for external plotting.
        #[arg(long)]
        plot_data: Option<PathBuf>,
    },
    /// Report unitarity, trace invariance, and per-symbol MSE statistics.
    Inspect {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        fmatrix: Option<PathBuf>,
        /// SNR in dB for the MSE profile (default: first eval.snr_db entry).
        #[arg(long)]
        snr_db: Option<f64>,
        /// Write per-symbol MSE profiles as CSV.
        #[arg(long)]
        out_csv: Option<PathBuf>,
    },
    /// Export a modulation matrix file as CSV or a binary copy.
    ExportF {
        #[arg(long)]
        fmatrix: PathBuf,
        #[arg(long, value_enum)]
        format: ExportFormat,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Io(_) | Error::Format { .. } => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Error::InvalidInput("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    }

    match &cli.command {
        Command::GenDataset { config, out, seed, count } => {
            let cfg = RunConfig::load(config)?;
            commands::cmd_gen_dataset(&cfg, out, *seed, *count)
        }
        Command::Train {
            config,
            train_data,
            test_data,
            out_checkpoint,
            out_fmatrix,
            log,
            resume,
        } => {
            let cfg = RunConfig::load(config)?;
            commands::cmd_train(
                &cfg,
                train_data,
                test_data,
                out_checkpoint,
                out_fmatrix,
                log.as_deref(),
                resume.as_deref(),
            )
        }
        Command::EvalBer {
            config,
            dataset,
            fmatrix,
            builtin,
            snr,
            trials,
            seed,
            out,
            plot_data,
        } => {
            let cfg = RunConfig::load(config)?;
            let choice = match (fmatrix, builtin) {
                (Some(path), None) => FChoice::File(path.clone()),
                (None, Some(Builtin::Identity)) => FChoice::Identity,
                (None, Some(Builtin::Dft)) => FChoice::Dft,
                _ => {
                    return Err(Error::InvalidInput(
                        "pass exactly one of --fmatrix or --builtin".into(),
                    ))
                }
            };
            commands::cmd_eval_ber(
                &cfg,
                dataset,
                &choice,
                snr.clone(),
                *trials,
                *seed,
                out,
                plot_data.as_deref(),
            )
        }
        Command::Inspect { config, dataset, fmatrix, snr_db, out_csv } => {
            let cfg = RunConfig::load(config)?;
            commands::cmd_inspect(&cfg, dataset, fmatrix.as_deref(), *snr_db, out_csv.as_deref())
        }
        Command::ExportF { fmatrix, format, out } => {
            let fmt = match format {
                ExportFormat::Csv => "csv",
                ExportFormat::Binary => "binary",
            };
            commands::cmd_export_f(fmatrix, fmt, out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
