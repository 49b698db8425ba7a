//! Command-line front end.
//!
//! ```text
//! ortho-lora run <config> [--out DIR] [--mode MODE]...
//! ortho-lora sweep-rank <config> --ranks 2,4,16 [--seeds 0,1,2,3,4] [--out DIR]
//! ortho-lora summarize <dir>
//! ortho-lora validate <config>
//! ```
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or
//! validation errors. Output goes to `--out`, else the config's
//! `output_dir`, else `$ORTHO_LORA_OUT`, else `./runs`.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::report::{rank_sweep_runs, summarize_dir, write_run_dir, write_sweep_dir, SummaryTable};
use crate::trainer::{run_experiment, TrainMode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ortho-lora", version, about = "Multi-task LoRA with orthogonal gradient projection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train every configured mode and write CSV metrics.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Restrict to these modes (repeatable).
        #[arg(long = "mode", value_parser = parse_mode)]
        modes: Vec<TrainMode>,
    },
    /// Compare JOINT and ORTHO_STRUCTURED across adapter ranks.
    SweepRank {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        ranks: Vec<usize>,
        #[arg(long, value_delimiter = ',', num_args = 1.., default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute the summary table from a run or sweep directory.
    Summarize { dir: PathBuf },
    /// Parse and validate a config without running anything.
    Validate { config: PathBuf },
}

fn parse_mode(s: &str) -> std::result::Result<TrainMode, String> {
    TrainMode::parse(s).ok_or_else(|| {
        let names: Vec<_> = TrainMode::ALL.iter().map(TrainMode::label).collect();
        format!("unknown mode `{s}`, expected one of {}", names.join(", "))
    })
}

/// Failure split by exit code.
enum Failure {
    Usage(Error),
    Runtime(Error),
}

fn usage<T>(r: Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(Failure::Usage)
}

fn runtime<T>(r: Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(Failure::Runtime)
}

/// Runs the CLI against the process's stdout and stderr.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_cli_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

/// Same as [`run_cli`] with explicit output streams.
pub fn run_cli_with<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let sink: &mut dyn Write = if e.use_stderr() { stderr } else { stdout };
            let _ = write!(sink, "{}", e.render());
            return code;
        }
    };
    match dispatch(cli.command, stdout) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(e)) => {
            let _ = writeln!(stderr, "error: {e}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(stderr, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn dispatch(cmd: Command, stdout: &mut dyn Write) -> std::result::Result<(), Failure> {
    match cmd {
        Command::Validate { config } => {
            usage(ExperimentConfig::load(&config))?;
            Ok(())
        }
        Command::Run { config, out, modes } => {
            let mut cfg = usage(ExperimentConfig::load(&config))?;
            if !modes.is_empty() {
                cfg.modes = modes;
            }
            let dir = out.unwrap_or_else(|| cfg.output_root());
            let logs = runtime(run_experiment(&cfg))?;
            let table = runtime(write_run_dir(&dir, &logs))?;
            print_table(stdout, &table, &dir)
        }
        Command::SweepRank {
            config,
            ranks,
            seeds,
            out,
        } => {
            let cfg = usage(ExperimentConfig::load(&config))?;
            let dir = out.unwrap_or_else(|| cfg.output_root());
            let runs = rank_sweep_runs(&cfg, &ranks, &seeds).map_err(|e| match e {
                Error::Config { .. } | Error::Param(_) => Failure::Usage(e),
                e => Failure::Runtime(e),
            })?;
            let rows = runtime(write_sweep_dir(&dir, &runs))?;
            let table = SummaryTable {
                rank_rows: rows,
                ..Default::default()
            };
            print_table(stdout, &table, &dir)
        }
        Command::Summarize { dir } => {
            let table = summarize_dir(&dir).map_err(|e| match e {
                Error::Io { .. } | Error::Format { .. } => Failure::Usage(e),
                e => Failure::Runtime(e),
            })?;
            runtime(write!(stdout, "{table}").map_err(|e| Error::io("<stdout>", e)))
        }
    }
}

fn print_table(stdout: &mut dyn Write, table: &SummaryTable, dir: &Path) -> std::result::Result<(), Failure> {
    runtime(
        write!(stdout, "{table}")
            .and_then(|_| writeln!(stdout, "wrote {}", dir.display()))
            .map_err(|e| Error::io("<stdout>", e)),
    )
}
