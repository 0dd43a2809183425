//! `vgalab` — reproducible experiment runs for the gated-attention lab.
//!
//! Exit codes: 0 success, 1 assertion/tolerance failure, 2 usage or
//! configuration error.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use config::RunConfig;
use std::path::PathBuf;
use vgalab_core::error::Error;

#[derive(Parser)]
#[command(name = "vgalab", about = "gated-attention laboratory", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Dotted-path overrides, e.g. --set train.lr=1e-3
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a Bigram-Backcopy dataset (JSONL) with its chain sidecar.
    BbGen(CommonArgs),
    /// Train the configured variant; writes metrics, checkpoints, charts.
    Train(CommonArgs),
    /// Verify tape gradients against finite differences and the
    /// closed-form value gradients, across all five attention variants.
    Gradcheck(CommonArgs),
    /// Evaluate a checkpoint on the configured split.
    Eval(CommonArgs),
    /// Calibrate and evaluate simulated-INT8 quantization of a checkpoint.
    Quantize(CommonArgs),
    /// Re-render SVG charts from an existing metrics log.
    Export(CommonArgs),
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::NonFinite { .. } => 1,
        _ => 2,
    }
}

fn run(args: &CommonArgs, f: impl FnOnce(&RunConfig) -> vgalab_core::Result<bool>) -> i32 {
    let config = match RunConfig::load(&args.config, &args.set, args.out.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    match f(&config) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let code = match &cli.command {
        Command::BbGen(a) => run(a, |c| commands::cmd_bb_gen(c).map(|_| true)),
        Command::Train(a) => run(a, |c| commands::cmd_train(c).map(|_| true)),
        Command::Gradcheck(a) => run(a, commands::cmd_gradcheck),
        Command::Eval(a) => run(a, commands::cmd_eval),
        Command::Quantize(a) => run(a, |c| commands::cmd_quantize(c).map(|_| true)),
        Command::Export(a) => run(a, |c| commands::cmd_export(c).map(|_| true)),
    };
    std::process::exit(code);
}
