//! Command-line entry point. Exit codes: 0 success, 2 configuration error,
//! 3 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crowdlearn::cli_runner::{
    load_results_csv, parse_config, run_simulate, run_sweep, run_train_single,
    save_summary_csv, save_summary_markdown, summarize, ExperimentConfig,
};
use crowdlearn::Error;

#[derive(Parser)]
#[command(
    name = "crowdlearn",
    about = "Train classifiers from noisy multi-annotator labels and compare \
             confusion-matrix estimation methods",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config file (strict JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the run seed (simulate/train) or restrict the sweep to this
    /// single seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a population and its noisy annotations, without training.
    Simulate(CommonArgs),
    /// Run the config's single method on one cell and print its report.
    Train(CommonArgs),
    /// Run the full method/skill/seed sweep.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Reuse completed cells from the output manifest.
        #[arg(long)]
        resume: bool,
    },
    /// Summarize an existing results.csv into summary.csv and summary.md.
    Report {
        /// Directory holding results.csv (sweep output).
        #[arg(long)]
        out: PathBuf,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

/// Prints to stdout, treating a closed pipe (e.g. `crowdlearn ... | head`)
/// as a successful early exit rather than a panic.
fn emit(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout();
    let result = out.write_all(text.as_bytes()).and_then(|()| out.flush());
    if let Err(e) = result {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        eprintln!("error: failed writing to stdout: {e}");
        std::process::exit(i32::from(EXIT_RUNTIME));
    }
}

/// Errors raised while loading or validating inputs exit with 2; everything
/// after that is a runtime failure and exits with 3. Config errors exit with
/// 2 even when surfaced mid-run (e.g. `train` rejecting a multi-method
/// config), since they always mean the invocation was bad.
struct Failure {
    code: u8,
    error: Error,
}

fn config_phase<T>(result: crowdlearn::Result<T>) -> Result<T, Failure> {
    result.map_err(|error| Failure {
        code: EXIT_CONFIG,
        error,
    })
}

fn run_phase<T>(result: crowdlearn::Result<T>) -> Result<T, Failure> {
    result.map_err(|error| Failure {
        code: match error {
            Error::Config(_) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        },
        error,
    })
}

fn resolve_out(config: &ExperimentConfig, flag: Option<PathBuf>) -> crowdlearn::Result<PathBuf> {
    flag.or_else(|| config.output_dir.clone()).ok_or_else(|| {
        Error::Config("no output directory: pass --out or set output_dir".to_string())
    })
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate(common) => {
            let config = config_phase(parse_config(&common.config))?;
            let out = config_phase(resolve_out(&config, common.out))?;
            run_phase(run_simulate(&config, &out, common.seed))?;
            emit(&format!(
                "wrote annotations and population to {}\n",
                out.display()
            ));
            Ok(())
        }
        Command::Train(common) => {
            let config = config_phase(parse_config(&common.config))?;
            let out = config_phase(resolve_out(&config, common.out))?;
            let report = run_phase(run_train_single(&config, &out, common.seed))?;
            let json = run_phase(report.to_json())?;
            emit(&format!("{json}\n"));
            Ok(())
        }
        Command::Sweep { common, resume } => {
            let mut config = config_phase(parse_config(&common.config))?;
            if let Some(seed) = common.seed {
                config.seeds = vec![seed];
            }
            let out = config_phase(resolve_out(&config, common.out))?;
            let rows = run_phase(run_sweep(&config, &out, resume))?;
            let summary = run_phase(summarize(&rows))?;
            run_phase(save_summary_csv(&summary, &out.join("summary.csv")))?;
            run_phase(save_summary_markdown(&summary, &out.join("summary.md")))?;
            let ok = rows
                .iter()
                .filter(|r| r.status == crowdlearn::cli_runner::RunStatus::Ok)
                .count();
            emit(&format!(
                "{} of {} cell runs succeeded; results in {}\n",
                ok,
                rows.len(),
                out.display()
            ));
            Ok(())
        }
        Command::Report { out } => {
            let rows = config_phase(load_results_csv(&out.join("results.csv")))?;
            let summary = run_phase(summarize(&rows))?;
            run_phase(save_summary_csv(&summary, &out.join("summary.csv")))?;
            run_phase(save_summary_markdown(&summary, &out.join("summary.md")))?;
            let text = run_phase(
                std::fs::read_to_string(out.join("summary.md")).map_err(Error::from),
            )?;
            emit(&text);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.error);
            ExitCode::from(failure.code)
        }
    }
}
