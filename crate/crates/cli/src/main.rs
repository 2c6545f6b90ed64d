//! `gibbsnet` command-line interface.
//!
//! Exit codes: 0 success, 2 config/usage error, 3 training divergence,
//! 4 corrupt artifact, 1 anything else.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "gibbsnet", version, about = "Train and probe adversarially learned Gibbs chains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Output directory.
    #[arg(long, env = "GIBBSNET_OUT", default_value = "gibbsnet-out")]
    pub out: PathBuf,
    /// Seed override.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model.
    ///
    /// Writes checkpoint.gbnt, records.jsonl (one TrainRecord per
    /// iteration), timings.csv, config.txt and manifest.json.
    Train {
        /// Flat key = value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config key (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the unclamped chain from a checkpoint.
    ///
    /// trajectory.csv has columns step,index,x0..,z0..[,y], one row per chain
    /// per probe step. For 2-D data, scatter/step_NNNNN.csv holds x0,x1 per
    /// probe step; for image data, images/step_NNNNN.pgm holds a grid.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Chain steps to run.
        #[arg(long)]
        steps: usize,
        /// Parallel chains.
        #[arg(long, default_value_t = 1000)]
        count: usize,
        /// Record every this many steps (the first and last step are always
        /// recorded).
        #[arg(long, default_value_t = 1)]
        probe_every: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Fill in unobserved coordinates by running the chain with the observed
    /// ones clamped.
    ///
    /// Observations are a CSV of rows x0,x1,.. (an optional non-numeric
    /// header is skipped). trajectory.csv has columns step,index,x0..,z0...
    Inpaint {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        observations: PathBuf,
        /// One 0/1 flag per x coordinate; 1 = observed.
        #[arg(long)]
        mask: String,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Exact stationarity check on a finite-state model; prints a JSON report.
    Oracle {
        /// JSON file with p_x_given_z, q_z_given_x and data_dist. Without it a
        /// random consistent model is built from --seed.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 12)]
        x_states: usize,
        #[arg(long, default_value_t = 8)]
        z_states: usize,
        /// Mix this fraction of uniform into the decoder.
        #[arg(long, default_value_t = 0.0)]
        perturb: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint; writes metrics.jsonl and stability.csv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset config; defaults to the one stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Samples per side for MMD, coverage and histograms.
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        /// Length of the stability chain.
        #[arg(long, default_value_t = 2000)]
        chain_steps: usize,
        #[arg(long, default_value_t = 100)]
        probe_every: usize,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train {
            config,
            overrides,
            common,
        } => commands::train(config.as_deref(), &overrides, &common),
        Command::Sample {
            checkpoint,
            steps,
            count,
            probe_every,
            common,
        } => commands::sample(&checkpoint, steps, count, probe_every, &common),
        Command::Inpaint {
            checkpoint,
            observations,
            mask,
            steps,
            common,
        } => commands::inpaint(&checkpoint, &observations, &mask, steps, &common),
        Command::Oracle {
            model,
            x_states,
            z_states,
            perturb,
            common,
        } => commands::oracle(model.as_deref(), x_states, z_states, perturb, &common),
        Command::Eval {
            checkpoint,
            config,
            overrides,
            samples,
            chain_steps,
            probe_every,
            common,
        } => commands::eval(
            &checkpoint,
            config.as_deref(),
            &overrides,
            commands::EvalOptions {
                samples,
                chain_steps,
                probe_every,
            },
            &common,
        ),
    };
    ExitCode::from(outcome)
}
