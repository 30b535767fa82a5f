use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use epiflow_cli::commands::{self, Primitive, TrainPaths};
use epiflow_cli::config::{Precision, RunConfig};
use epiflow_cli::{exit_code, selfcheck, EXIT_BAD_INPUT, EXIT_SELFCHECK};
use epiflow_core::Result;

/// Multi-view depth estimation on epipolar disparity flows.
///
/// Exit codes: 0 success, 2 bad input (files, configuration, geometry),
/// 3 numeric failure, 4 self-check failure.
#[derive(Parser)]
#[command(version)]
struct Cli {
    /// Flat TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Configuration override `key=value`, applied after the file.
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrimitiveArg {
    Plane,
    Sphere,
    Step,
}

#[derive(Subcommand)]
enum Command {
    /// Writes synthetic scene bundles.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        scenes: usize,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, value_enum, default_value = "plane")]
        primitive: PrimitiveArg,
    },
    /// Writes the initial depth of every reference view.
    Init {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Writes refined depth maps for every reference view.
    Infer {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Trains on synthetic scenes (or bundles under `--data`).
    Train {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Filters depth maps against each other and fuses a point cloud.
    Fuse {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        depths: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy, completeness and F-score of a cloud against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Runs the oracle, gradient and property checks.
    Selfcheck {
        /// Fewer random camera pairs.
        #[arg(long)]
        quick: bool,
    },
    /// Prints the effective configuration.
    Config,
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let report = match cli.command {
        Command::Synth {
            out,
            scenes,
            lambda,
            primitive,
        } => {
            let p = match primitive {
                PrimitiveArg::Plane => Primitive::Plane,
                PrimitiveArg::Sphere => Primitive::Sphere,
                PrimitiveArg::Step => Primitive::Step,
            };
            commands::synth(&cfg, &out, scenes, lambda, p)?
        }
        Command::Init { bundle, out } => commands::init(&bundle, &out)?,
        Command::Infer { bundle, out, checkpoint } => match cfg.precision {
            Precision::F32 => commands::infer::<f32>(&cfg, &bundle, &out, checkpoint.as_deref())?,
            Precision::F64 => commands::infer::<f64>(&cfg, &bundle, &out, checkpoint.as_deref())?,
        },
        Command::Train { out, log, data, resume } => {
            let paths = TrainPaths {
                checkpoint: &out,
                log: log.as_deref(),
                data: data.as_deref(),
                resume: resume.as_deref(),
            };
            match cfg.precision {
                Precision::F32 => commands::train::<f32>(&cfg, &paths)?,
                Precision::F64 => commands::train::<f64>(&cfg, &paths)?,
            }
        }
        Command::Fuse { bundle, depths, out } => commands::fuse(&cfg, &bundle, &depths, &out)?,
        Command::Eval { pred, gt } => commands::eval(&cfg, &pred, &gt)?,
        Command::Selfcheck { quick } => {
            let checks = selfcheck::run_all(quick);
            for c in &checks {
                println!("{c}");
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            println!("{} checks, {failed} failed", checks.len());
            return Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(EXIT_SELFCHECK as u8) });
        }
        Command::Config => cfg.to_toml(),
    };
    print!("{report}");
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_BAD_INPUT as u8) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
