// SPDX-License-Identifier: MIT OR Apache-2.0

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

mod commands;
mod config;
mod fail;

use config::{Flags, Resolved};
use fail::{CliResult, EXIT_CONFIG};

#[derive(Debug, Parser)]
#[command(name = "circuitquant", version, about = "Mixed-precision circuit discovery on planted tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Generate a planted task: weights, dataset and metadata.
    GenTask,
    /// Prune one task at a fixed threshold.
    RunAcdc,
    /// ROC curves of every method over a threshold grid.
    SweepRoc,
    /// Wall-clock and simulated step times for every stream configuration.
    AblateScheduler,
    /// AUC and accuracy with non-target heads at 4, 8 or 16 bits.
    AblatePrecision,
    /// Accuracy while heads move to FP8 one at a time.
    QuantSweep,
    /// Show FP8 underflow and mantissa loss on planted signals.
    DemoUnderflow,
}

fn run(cli: &Cli) -> CliResult<()> {
    let cfg = Resolved::from_flags(&cli.flags)?;
    match cli.command {
        Command::GenTask => commands::gen_task(&cfg),
        Command::RunAcdc => commands::run_acdc_cmd(&cfg),
        Command::SweepRoc => commands::sweep_roc(&cfg),
        Command::AblateScheduler => commands::ablate_scheduler(&cfg),
        Command::AblatePrecision => commands::ablate_precision(&cfg),
        Command::QuantSweep => commands::quant_sweep(&cfg),
        Command::DemoUnderflow => commands::demo_underflow(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    ExitCode::SUCCESS
                }
                _ => {
                    let _ = e.print();
                    ExitCode::from(EXIT_CONFIG as u8)
                }
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code() as u8)
        }
    }
}
