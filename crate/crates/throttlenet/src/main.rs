use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use throttlenet::cli;

/// Runtime-throttleable neural networks: two-phase training and
/// accuracy-vs-utilization sweeps.
#[derive(Parser)]
#[command(name = "throttlenet", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Dotted-path override, e.g. --set train.datapath.epochs=5 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Phase 1: train the data path under random gating.
    TrainDatapath {
        #[command(flatten)]
        common: Common,
    },
    /// Phase 2: train the blind gate controller with the data path frozen.
    TrainController {
        #[command(flatten)]
        common: Common,
        /// Data-path checkpoint from train-datapath.
        #[arg(long)]
        datapath: PathBuf,
    },
    /// Evaluate accuracy/utilization/FLOPs over the u grid and emit CSV.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Data-path checkpoint.
        #[arg(long)]
        datapath: PathBuf,
        /// Controller checkpoint (required for learned strategies).
        #[arg(long)]
        controller: Option<PathBuf>,
        /// Gating strategy: nested, independent, depthwise-nested, all-on,
        /// learned, learned-stochastic (default from config).
        #[arg(long)]
        strategy: Option<String>,
        /// Curve CSV destination.
        #[arg(long = "out-csv")]
        out_csv: PathBuf,
    },
    /// Finite-difference checks for every op kind and the controller.
    Gradcheck {
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::TrainDatapath { common } => cli::cmd_train_datapath(
            &common.config,
            &common.set,
            common.out.as_deref(),
            common.seed,
        ),
        Cmd::TrainController { common, datapath } => cli::cmd_train_controller(
            &common.config,
            datapath,
            &common.set,
            common.out.as_deref(),
            common.seed,
        ),
        Cmd::Sweep { common, datapath, controller, strategy, out_csv } => cli::cmd_sweep(
            &common.config,
            datapath,
            controller.as_deref(),
            strategy.as_deref(),
            out_csv,
            &common.set,
            common.out.as_deref(),
            common.seed,
        ),
        Cmd::Gradcheck { corrupt } => cli::cmd_gradcheck(corrupt.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
