//! `oxn` command line: run experiments, validate experiment files, render
//! plots and re-print run summaries.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use oxn_core::engine::{run_experiment, validate_file, BackendChoice, RunOptions};
use oxn_core::report::plots::render_run_plots;
use oxn_core::report::ExperimentReport;

#[derive(Parser)]
#[command(name = "oxn", version, about = "observability experiment engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Sim,
    Container,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment file end to end and write a report.
    Run {
        /// The experiment YAML file.
        file: PathBuf,
        /// Runtime backend for the system under experiment.
        #[arg(long, value_enum, default_value = "sim")]
        backend: Backend,
        /// Seed for the simulated backend and synthetic data.
        #[arg(long)]
        seed: Option<u64>,
        /// Output root for run directories (default $OXN_OUT or ./runs).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-user think time between requests, milliseconds.
        #[arg(long, default_value_t = 0)]
        think_time_ms: u64,
    },
    /// Parse and validate an experiment file without running it.
    Validate { file: PathBuf },
    /// Render SVG plots for a finished run directory.
    Plot { run_dir: PathBuf },
    /// Re-print the summary of a finished run.
    Report { run_dir: PathBuf },
}

fn out_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var("OXN_OUT").ok().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run {
            file,
            backend,
            seed,
            out,
            think_time_ms,
        } => {
            let options = RunOptions {
                backend: match backend {
                    Backend::Sim => BackendChoice::Sim,
                    Backend::Container => BackendChoice::Container,
                },
                seed,
                out_root: out_root(out),
                think_time_ms,
            };
            match run_experiment(&file, &options) {
                Err(e) => {
                    eprintln!("error: {e}");
                    e.exit().code()
                }
                Ok(outcome) => {
                    print!("{}", outcome.report.summary_text());
                    println!("artifacts: {}", outcome.run_dir.display());
                    outcome.exit.code()
                }
            }
        }
        Command::Validate { file } => match validate_file(&file) {
            Err(e) => {
                eprintln!("error: {e}");
                1
            }
            Ok(report) if report.is_valid() => {
                println!("OK");
                0
            }
            Ok(report) => {
                print!("{report}");
                1
            }
        },
        Command::Plot { run_dir } => match render_run_plots(&run_dir) {
            Err(e) => {
                eprintln!("error: {e}");
                4
            }
            Ok(paths) => {
                for path in &paths {
                    println!("{}", path.display());
                }
                println!("{} plot(s) written", paths.len());
                0
            }
        },
        Command::Report { run_dir } => match ExperimentReport::read(&run_dir) {
            Err(e) => {
                eprintln!("error: {e}");
                4
            }
            Ok(report) => {
                print!("{}", report.summary_text());
                0
            }
        },
    };
    ExitCode::from(code as u8)
}
