use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod manifest;

#[derive(Parser, Debug)]
#[command(name = "edge-admission", version, about = "Admission control for an edge server: solve, train, evaluate")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. They override the config file.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON experiment config; missing blocks take the reference values
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run a single seed instead of the configured list
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Traffic scenario
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(1..=6))]
    pub scenario: Option<u8>,
    /// salmut, qlearning, baseline or dp
    #[arg(long, global = true)]
    pub learner: Option<String>,
    /// Multiplies the scenario horizon and every change point
    #[arg(long, global = true)]
    pub horizon_scale: Option<f64>,
    /// Use the ascent sign in the threshold update
    #[arg(long, global = true)]
    pub paper_literal_sign: bool,
    /// Plan with the self-loop departure kernel
    #[arg(long, global = true)]
    pub self_loop_variant: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Value iteration at the scenario's initial arrival rate
    Solve,
    /// Train the configured learner for every seed
    Train,
    /// Evaluate policy artifacts, or check the structure of a solution
    Evaluate {
        /// Policy artifact written by `train` (repeatable)
        #[arg(long = "policy")]
        policies: Vec<PathBuf>,
        /// Training logs to aggregate into a curve (repeatable)
        #[arg(long = "log")]
        logs: Vec<PathBuf>,
        /// Solution artifact written by `solve`; prints the structure verdicts
        #[arg(long)]
        check_structure: Option<PathBuf>,
    },
    /// DP, SALMUT, Q-learning and the baseline on shared traces
    Compare,
    /// Arrival rate and population over the scenario horizon
    Trajectory {
        /// Sample every N steps instead of listing change points
        #[arg(long)]
        every: Option<u64>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Solve => commands::solve(&cli.common),
        Command::Train => commands::train(&cli.common),
        Command::Evaluate {
            policies,
            logs,
            check_structure,
        } => commands::evaluate(&cli.common, &policies, &logs, check_structure.as_deref()),
        Command::Compare => commands::compare(&cli.common),
        Command::Trajectory { every } => commands::trajectory(&cli.common, every),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else if e.is_numeric() {
                ExitCode::from(3)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
