use std::path::PathBuf;
use std::process::ExitCode;

use cavity_qst::experiment::{load_config, run_experiment, selftest, write_csv};
use cavity_qst::Error;
use clap::{Parser, Subcommand};

/// Exit statuses: 0 success, 1 validation or integration failure, 2 I/O failure.
const EXIT_FAILURE: u8 = 1;
const EXIT_IO: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "cavity-qst",
    version,
    about = "Cavity-QED state transfer and memory simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the experiment described by a config file and emit CSV.
    Run {
        config: PathBuf,
        /// Output path; overrides `output_path` in the config. Stdout if neither is set.
        #[arg(long)]
        out: Option<PathBuf>,
        /// RK4 steps per π-pulse duration; overrides `dt_per_T` in the config.
        #[arg(long = "dt-per-T")]
        dt_per_t: Option<usize>,
    },
    /// Run the built-in invariant suite.
    Selftest,
}

fn exit_for(err: &Error) -> ExitCode {
    match err {
        Error::Io(_) => ExitCode::from(EXIT_IO),
        _ => ExitCode::from(EXIT_FAILURE),
    }
}

fn run(config: PathBuf, out: Option<PathBuf>, dt_per_t: Option<usize>) -> ExitCode {
    let mut cfg = match load_config(&config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {}: {e}", config.display());
            return exit_for(&e);
        }
    };
    if let Some(n) = dt_per_t {
        if n == 0 {
            eprintln!("error: --dt-per-T must be positive");
            return ExitCode::from(EXIT_FAILURE);
        }
        cfg.dt_per_t = n;
    }
    let run = match run_experiment(&cfg) {
        Ok(run) => run,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_for(&e);
        }
    };
    match out.or(cfg.output_path.clone()) {
        Some(path) => {
            if let Err(e) = write_csv(&run.table, &path) {
                eprintln!("error: {}: {e}", path.display());
                return ExitCode::from(EXIT_IO);
            }
            log::info!("wrote {} rows to {}", run.table.rows().len(), path.display());
        }
        None => print!("{}", run.table.to_csv_string()),
    }
    if run.within_tolerance {
        ExitCode::SUCCESS
    } else {
        eprintln!("error: diagnostics outside tolerance");
        ExitCode::from(EXIT_FAILURE)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run { config, out, dt_per_t } => run(config, out, dt_per_t),
        Command::Selftest => {
            let results = selftest();
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            if results.iter().all(|r| r.passed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_FAILURE)
            }
        }
    }
}
