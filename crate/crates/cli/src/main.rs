//! `mma`: train, evaluate, verify and inspect multi-manifold attention
//! classifiers.

mod commands;
mod export;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{error::ErrorKind, Args, Parser, Subcommand};
use mma_core::{Fusion, ManifoldSet};

use commands::{EvalArgs, Failure, GenDataArgs, InspectArgs, Split, TrainArgs};
use settings::{ModelFlags, Settings, SyntheticSpec};

#[derive(Parser, Debug)]
#[command(
    name = "mma",
    version,
    about = "Multi-manifold attention vision transformers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options selecting data and model. Precedence: flags > config file >
/// defaults of the data source.
#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat key=value settings file
    #[arg(long)]
    config: Option<PathBuf>,
    /// synthetic, cifar10:<dir> or records:<dir>
    #[arg(long)]
    data: Option<String>,
    /// Comma-separated subset of e,s,g
    #[arg(long, value_parser = parse_manifolds)]
    manifolds: Option<ManifoldSet>,
    /// early or late
    #[arg(long, value_parser = parse_fusion)]
    fusion: Option<Fusion>,
    /// Any other setting, as key=value (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn flags(&self) -> ModelFlags {
        ModelFlags {
            config: self.config.clone(),
            data: self.data.clone(),
            manifolds: self.manifolds,
            fusion: self.fusion,
            set: self.set.clone(),
        }
    }

    fn resolve(&self, extra: Vec<(String, String)>) -> Result<Settings, Failure> {
        Ok(Settings::resolve(&self.flags().entries(extra)?)?)
    }
}

fn parse_manifolds(s: &str) -> Result<ManifoldSet, String> {
    s.parse().map_err(|e: mma_core::Error| e.to_string())
}

fn parse_fusion(s: &str) -> Result<Fusion, String> {
    s.parse().map_err(|e: mma_core::Error| e.to_string())
}

fn push<V: ToString>(out: &mut Vec<(String, String)>, key: &str, v: Option<V>) {
    if let Some(v) = v {
        out.push((key.to_string(), v.to_string()));
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a classifier and write a checkpoint plus a per-epoch CSV log
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// 32 or 64
        #[arg(long)]
        precision: Option<String>,
        #[arg(long, default_value = "model.mmac")]
        out: PathBuf,
        #[arg(long, default_value = "train_log.csv")]
        log: PathBuf,
        /// Suppress per-epoch lines
        #[arg(long)]
        quiet: bool,
    },
    /// Loss and accuracy of a checkpoint on a data split
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 128)]
        batch: usize,
        /// Write label and pooled features per sample to this CSV
        #[arg(long)]
        export_features: Option<PathBuf>,
    },
    /// Write the synthetic texture set as binary records
    GenData {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 625)]
        per_class: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value = "synthetic-data")]
        out: PathBuf,
    },
    /// Finite-difference gradient checks of every primitive and an MMA block
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Break the abs backward rule to demonstrate detection
        #[arg(long)]
        inject_fault: bool,
    },
    /// Seeded property suite of the attention, data and training code
    Verify {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Break the abs backward rule to demonstrate detection
        #[arg(long)]
        inject_fault: bool,
    },
    /// Parameter and FLOP breakdown of a model configuration
    Report {
        #[command(flatten)]
        common: Common,
    },
    /// Export distance and attention maps for one image as CSV and PGM
    Inspect {
        #[command(flatten)]
        common: Common,
        /// Use trained weights; otherwise weights are initialized from --seed
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value = "maps")]
        out: PathBuf,
    },
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train {
            common,
            epochs,
            batch,
            lr,
            seed,
            precision,
            out,
            log,
            quiet,
        } => {
            let mut extra = Vec::new();
            push(&mut extra, "epochs", epochs);
            push(&mut extra, "batch_size", batch);
            push(&mut extra, "lr", lr);
            push(&mut extra, "seed", seed);
            push(&mut extra, "precision", precision);
            commands::train(TrainArgs {
                settings: common.resolve(extra)?,
                out,
                log,
                quiet,
            })
        }
        Command::Eval {
            common,
            checkpoint,
            split,
            batch,
            export_features,
        } => commands::eval(EvalArgs {
            settings: common.resolve(Vec::new())?,
            checkpoint,
            split,
            batch,
            export_features,
        }),
        Command::GenData {
            seed,
            per_class,
            size,
            noise,
            out,
        } => commands::gen_data(GenDataArgs {
            spec: SyntheticSpec {
                per_class,
                seed,
                noise,
            },
            size,
            out,
        }),
        Command::Gradcheck { seed, inject_fault } => commands::gradcheck(seed, inject_fault),
        Command::Verify { seed, inject_fault } => commands::verify(seed, inject_fault),
        Command::Report { common } => commands::report(&common.resolve(Vec::new())?.model),
        Command::Inspect {
            common,
            checkpoint,
            seed,
            split,
            index,
            out,
        } => {
            let mut extra = Vec::new();
            push(&mut extra, "seed", seed);
            commands::inspect(InspectArgs {
                settings: common.resolve(extra)?,
                checkpoint,
                split,
                index,
                out,
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.exit_code())
        }
    }
}
