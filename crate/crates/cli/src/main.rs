use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fed_normec::harness::{self, ExperimentSpec, VerifySuite, OUTPUT_ROOT_ENV};
use fed_normec::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 3;
const EXIT_VERIFY: u8 = 4;
const EXIT_DIVERGED: u8 = 5;

#[derive(Parser, Debug)]
#[command(name = "fed-normec", version, about = "Fed-α-NormEC federated optimization simulator")]
struct Cli {
    /// Override the seed of the config (or of the verify fixtures).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Root directory for run outputs.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV, default_value = "runs")]
    output_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every replicate of an experiment config.
    Run { config: PathBuf },
    /// Run the p × β grid of a config and emit the communication table.
    Sweep { config: PathBuf },
    /// Run a property suite and print a JSON report.
    Verify { suite: Suite },
    /// Print the theory bound for a config without running it.
    Bound { config: PathBuf },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Suite {
    Lemmas,
    Sampling,
    Convergence,
    Bounds,
    All,
}

impl From<Suite> for VerifySuite {
    fn from(s: Suite) -> Self {
        match s {
            Suite::Lemmas => VerifySuite::Lemmas,
            Suite::Sampling => VerifySuite::Sampling,
            Suite::Convergence => VerifySuite::Convergence,
            Suite::Bounds => VerifySuite::Bounds,
            Suite::All => VerifySuite::All,
        }
    }
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentSpec, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(path.display().to_string(), format!("cannot read config: {e}")))?;
    let mut spec = harness::parse_config(&text)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    Ok(spec)
}

fn print_json<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_divergence() => EXIT_DIVERGED,
        Some(
            Error::Config { .. }
            | Error::UnknownFamily(_)
            | Error::ScheduleInfeasible { .. }
            | Error::TheoryCondition { .. }
            | Error::InvalidInput(_)
            | Error::InvalidProblem(_),
        ) => EXIT_CONFIG,
        _ => EXIT_FAILURE,
    }
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Run { config } => {
            let spec = load(&config, cli.seed)?;
            let out = harness::run_experiment(&spec, &cli.output_root)?;
            log::info!("wrote {}", out.dir.display());
            print_json(&out.summary)?;
        }
        Command::Sweep { config } => {
            let spec = load(&config, cli.seed)?;
            print_json(&harness::run_sweep(&spec, &cli.output_root)?)?;
        }
        Command::Verify { suite } => {
            let report = harness::verify(suite.into(), cli.seed.unwrap_or(0));
            print_json(&report)?;
            if !report.passed {
                return Ok(EXIT_VERIFY);
            }
        }
        Command::Bound { config } => {
            let spec = load(&config, cli.seed)?;
            print_json(&harness::bound_for_spec(&spec)?)?;
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
