//! `stochbound` command-line front end.
//!
//! Every subcommand writes its artifacts plus a manifest under `--out`.
//! Failures print a single-line error JSON on stderr; usage and config
//! errors exit with 2, everything else with 1.

mod commands;
mod config;
mod error;
mod manifest;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

/// Seed used when `--seed` is not given and no manifest supplies one.
pub const DEFAULT_SEED: u64 = 20_240_917;

#[derive(Debug, Parser)]
#[command(name = "stochbound", version, about = "Stochastic-boundary causal inference on synthetic spatial panels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML or JSON config; a manifest written by an earlier run also works.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Root seed for every random draw of the run.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Directory for artifacts.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Progress on stderr; repeat for more detail.
    #[arg(short, long, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Clone, Args)]
pub struct PanelArg {
    /// Directory written by `simulate-panel`; simulated from `[dgp]` when absent.
    #[arg(long, value_name = "DIR")]
    pub panel: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate one spillover path and its boundary crossing.
    SimulatePath(Common),
    /// Simulate a spatial panel.
    SimulatePanel(Common),
    /// CUSUM detection on a CSV series or on distance,effect pairs.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "CSV")]
        input: PathBuf,
        /// Treat the input as distance,effect pairs.
        #[arg(long)]
        spatial: bool,
    },
    /// Train the conditional diffusion model on a panel.
    TrainDdpm {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        panel: PanelArg,
    },
    /// Point estimates from the baselines and the diffusion pipeline.
    Estimate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        panel: PanelArg,
    },
    /// Hierarchical bootstrap of the diffusion pipeline.
    Bootstrap {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        panel: PanelArg,
    },
    /// Monte Carlo study over one or more scenarios.
    Montecarlo {
        #[command(flatten)]
        common: Common,
        /// Scenario file; same as `--config`.
        #[arg(long, value_name = "FILE", conflicts_with = "config")]
        scenario: Option<PathBuf>,
        /// Replications per scenario, overriding the file.
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Permutation placebo for a chosen estimator.
    Placebo {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        panel: PanelArg,
    },
    /// Coverage, power and type-I rate across CUSUM thresholds.
    Sensitivity {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Budgeted targeting from a JSON inputs file.
    Policy {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "JSON")]
        input: PathBuf,
    },
    /// Render tables and plot data from the artifacts in a directory.
    Report {
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool, CliError> {
    if threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))
}

fn dispatch(command: Command) -> Result<(), CliError> {
    use commands::*;
    let (common, job): (Common, Box<dyn FnOnce(&Common) -> Result<(), CliError> + Send>) = match command {
        Command::Report { out } => return report::run(&out),
        Command::SimulatePath(c) => (c, Box::new(simulate_path)),
        Command::SimulatePanel(c) => (c, Box::new(simulate_panel)),
        Command::Detect { common, input, spatial } => (common, Box::new(move |c: &Common| detect(c, &input, spatial))),
        Command::TrainDdpm { common, panel } => (common, Box::new(move |c: &Common| train_ddpm(c, &panel))),
        Command::Estimate { common, panel } => (common, Box::new(move |c: &Common| estimate(c, &panel))),
        Command::Bootstrap { common, panel } => (common, Box::new(move |c: &Common| bootstrap(c, &panel))),
        Command::Montecarlo { mut common, scenario, reps } => {
            common.config = common.config.or(scenario);
            (common, Box::new(move |c: &Common| montecarlo(c, reps)))
        }
        Command::Placebo { common, panel } => (common, Box::new(move |c: &Common| placebo(c, &panel))),
        Command::Sensitivity { common, reps } => (common, Box::new(move |c: &Common| sensitivity(c, reps))),
        Command::Policy { common, input } => (common, Box::new(move |c: &Common| policy(c, &input))),
    };
    thread_pool(common.threads)?.install(|| job(&common))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return ExitCode::from(if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand { 2 } else { 0 });
            }
            let err = CliError::Usage(e.render().to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.exit_code());
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", err.to_json());
            ExitCode::from(err.exit_code())
        }
    }
}
