//! `derain`: synthetic rain, pseudo-label stacking, DSF fusion, gradient
//! checks, toy forward passes and image metrics.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::commands::Mode;
use crate::config::{load_config, resolve, Globals};

#[derive(Parser)]
#[command(name = "derain", version, about = "Video deraining toolkit")]
struct Cli {
    /// JSON config with one section per command
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a rainy sequence with its clean frames and true flows
    Synth(SynthFlags),
    /// Masked median stacking of aligned frames
    Pseudo(PseudoFlags),
    /// Fuse aligned frames with the dynamic stacking filter
    Fuse(FuseFlags),
    /// Finite-difference check of the analytic gradients
    Gradcheck(GradcheckFlags),
    /// Run the toy network
    Forward(ForwardFlags),
    /// PSNR and SSIM between two frame directories
    Metrics(MetricsFlags),
}

#[derive(Args, Serialize)]
struct SynthFlags {
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    motion_x: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    motion_y: Option<f64>,
    #[arg(long)]
    density: Option<f64>,
    #[arg(long)]
    streak_length: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    angle: Option<f64>,
    #[arg(long)]
    intensity: Option<f64>,
}

#[derive(Args, Serialize)]
struct PseudoFlags {
    /// Directory of rainy PNG frames
    #[arg(long)]
    frames: Option<PathBuf>,
    /// Directory of flow_NNN.flo files, one per non-center frame
    #[arg(long)]
    flows: Option<PathBuf>,
    /// Directory of clean frames, enables PSNR in the report
    #[arg(long)]
    clean: Option<PathBuf>,
    #[arg(long)]
    center: Option<usize>,
    #[arg(long)]
    patches: Option<usize>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
}

#[derive(Args, Serialize)]
struct FuseFlags {
    #[arg(long)]
    frames: Option<PathBuf>,
    #[arg(long)]
    flows: Option<PathBuf>,
    #[arg(long)]
    clean: Option<PathBuf>,
    #[arg(long)]
    center: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    a: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    b: Option<f64>,
    /// Parameter dump with `dsf.a` / `dsf.b` maps
    #[arg(long)]
    params: Option<PathBuf>,
    /// Prefix of the maps inside the dump, e.g. `enc0.tsml`
    #[arg(long)]
    param_prefix: Option<String>,
}

#[derive(Args, Serialize)]
struct GradcheckFlags {
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    max_sharpness: Option<f64>,
    #[arg(long, hide = true)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    inject_sign_bug: bool,
}

#[derive(Args, Serialize)]
struct ForwardFlags {
    #[arg(long)]
    frames: Option<PathBuf>,
    #[arg(long)]
    flows: Option<PathBuf>,
    #[arg(long)]
    center: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Load parameters from a dump instead of seeding them
    #[arg(long)]
    params: Option<PathBuf>,
    /// Write the parameters used to a dump
    #[arg(long)]
    save_params: Option<PathBuf>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    state_dim: Option<usize>,
    #[arg(long)]
    local_scale: Option<f64>,
}

#[derive(Args, Serialize)]
struct MetricsFlags {
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let config = load_config(cli.config.as_deref())?;
    let globals = Globals {
        seed: cli.seed,
        out: cli.out,
    };
    match &cli.command {
        Command::Synth(f) => commands::synth(&resolve(&config, "synth", f, &globals)?)?,
        Command::Pseudo(f) => {
            commands::pseudo(&resolve(&config, "pseudo", f, &globals)?)?;
        }
        Command::Fuse(f) => commands::fuse(&resolve(&config, "fuse", f, &globals)?)?,
        Command::Gradcheck(f) => return commands::gradcheck(&resolve(&config, "gradcheck", f, &globals)?),
        Command::Forward(f) => commands::forward(&resolve(&config, "forward", f, &globals)?)?,
        Command::Metrics(f) => {
            commands::metrics(&resolve(&config, "metrics", f, &globals)?)?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
