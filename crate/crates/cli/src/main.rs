//! `xreplay`: run, compare and visualize class-incremental experiments.
//!
//! Exit codes: 0 on success, 2 when the config violates the schema (the
//! message names the field), 1 on any runtime failure (the message names the
//! failing task when there is one).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;
use xreplay::experiment::{self, RunError, SampleRef, OUTPUT_ROOT_ENV};

#[derive(Parser)]
#[command(name = "xreplay", version, about = "Continual learning with explanation replay")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate the task sequence described by a config file.
    #[command(after_help = format!(
        "Relative output_dir values resolve against ${OUTPUT_ROOT_ENV} when it is set."
    ))]
    Run { config: PathBuf },
    /// Compare runs (or directories of seed runs) task by task.
    Compare {
        #[arg(required = true, num_args = 2..)]
        dirs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one test sample's saliency across archived checkpoints.
    Visualize {
        run_dir: PathBuf,
        /// `<task>:<index>` into that task's test set.
        #[arg(long)]
        sample: SampleRef,
        /// Comma-separated task checkpoints, e.g. `1,3,5`.
        #[arg(long, value_delimiter = ',', required = true)]
        checkpoints: Vec<usize>,
    },
}

fn report(e: &RunError) -> ExitCode {
    match e {
        RunError::Invalid(inner) => error!("invalid configuration: {inner}"),
        other => error!("{other}"),
    }
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config } => match experiment::run_from_path(&config) {
            Ok((dir, summary)) => {
                println!(
                    "{}: ACC {:.4} BWT {:.4}{}",
                    dir.display(),
                    summary.acc,
                    summary.bwt,
                    match (summary.pg_acc, summary.pg_bwt) {
                        (Some(a), Some(b)) => format!(" PG-ACC {a:.4} PG-BWT {b:.4}"),
                        _ => String::new(),
                    }
                );
                ExitCode::SUCCESS
            }
            Err(e) => report(&e),
        },
        Command::Compare { dirs, out } => match experiment::compare(&dirs, &out) {
            Ok(cmp) => {
                for a in &cmp.arms {
                    println!("{}: ACC {:.4} over {} run(s)", a.name, a.acc_mean, a.runs.len());
                }
                println!("wrote {}", out.display());
                ExitCode::SUCCESS
            }
            Err(e) => report(&RunError::Runtime(e)),
        },
        Command::Visualize {
            run_dir,
            sample,
            checkpoints,
        } => {
            match experiment::visualize(&run_dir, sample, &checkpoints) {
                Ok((png, json)) => {
                    println!("wrote {} and {}", png.display(), json.display());
                    ExitCode::SUCCESS
                }
                Err(e) => report(&RunError::Runtime(e)),
            }
        }
    }
}
