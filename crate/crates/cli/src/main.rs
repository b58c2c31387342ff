use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cfl_cli::{run_histogram, run_plan, run_sweep, run_train, CliError, ExperimentConfig, Mode, Overrides};

#[derive(Debug, Parser)]
#[command(name = "cfl-sim", version, about = "Coded federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML experiment configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Pin the reference physical constants, learning rate, SNR and parity cap.
    #[arg(long, global = true)]
    paper: bool,

    /// Coding redundancy c/m; repeat to form a grid.
    #[arg(long = "delta", global = true, value_name = "F")]
    deltas: Vec<f64>,

    /// Compute heterogeneity; repeat to form the sweep grid.
    #[arg(long, global = true, value_name = "F")]
    nu_comp: Vec<f64>,

    /// Link heterogeneity; repeat to form the sweep grid.
    #[arg(long, global = true, value_name = "F")]
    nu_link: Vec<f64>,

    /// Use seeds 1..=N.
    #[arg(long, global = true, value_name = "N")]
    seeds: Option<u64>,

    /// NMSE target; repeatable.
    #[arg(long = "nmse-target", global = true, value_name = "F")]
    nmse_targets: Vec<f64>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[arg(long, global = true, value_name = "N")]
    max_epochs: Option<usize>,

    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,

    /// Most parity rows the joint plan may use.
    #[arg(long, global = true, value_name = "C")]
    parity_cap: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute load allocations and epoch deadlines.
    Plan,
    /// Train and record NMSE against simulated time.
    Train,
    /// Histogram of per-epoch gradient collection times.
    Histogram,
    /// Coding gain and communication load over a heterogeneity grid.
    Sweep,
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("CFL_SIM_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .parse()
        .map_err(|_| CliError::Config(format!("CFL_SIM_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Other(e.to_string()))
}

fn run(cli: Cli) -> Result<String, CliError> {
    configure_threads()?;
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    config.apply(&Overrides {
        paper: cli.paper,
        deltas: cli.deltas,
        nu_comp: cli.nu_comp,
        nu_link: cli.nu_link,
        seeds: cli.seeds,
        nmse_targets: cli.nmse_targets,
        out: cli.out,
        max_epochs: cli.max_epochs,
        mode: cli.mode,
        parity_cap: cli.parity_cap,
    });
    config.validate()?;
    match cli.command {
        Command::Plan => run_plan(&config),
        Command::Train => run_train(&config),
        Command::Histogram => run_histogram(&config),
        Command::Sweep => run_sweep(&config),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
