//! `gsvox`: reproducible runs of the fixed-budget splatting, voxel
//! structuring, alignment and diffusion pipeline.

// Range checks are written negated so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod error;
mod files;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Ctx;
use config::Sources;
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "gsvox", version, about, long_about = None)]
struct Cli {
    /// Seed for every random draw (default 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads. Outputs are identical for any value.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML file of configuration values for the command.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration value, e.g. `--set lr.opacity=0.05`.
    /// Applied after `--config`; dedicated flags win over both.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic desk scene and the diffusion toy set.
    Demo(commands::DemoArgs),
    /// Convert a pretrained cloud into exactly `n_max` Gaussians.
    Fit(commands::FitArgs),
    /// Render a cloud from every manifest camera and report PSNR.
    Render(commands::RenderArgs),
    /// Assign an n³-Gaussian cloud to voxel centres by optimal transport.
    Voxelize(commands::VoxelizeArgs),
    /// Decode a voxel grid back into a cloud.
    Devoxelize(commands::DevoxelizeArgs),
    /// Evaluate alignment losses and retrieval on stored embeddings.
    AlignEval(commands::AlignArgs),
    /// Train the conditioned voxel diffusion model.
    DiffuseTrain(commands::TrainArgs),
    /// Draw a grid from a trained diffusion model.
    DiffuseSample(commands::SampleArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(commands::GradcheckArgs),
}

fn configure_threads(threads: Option<usize>) -> Result<(), CliError> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    if n > 1 {
        eprintln!("built without the `parallel` feature; running on one thread");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads(cli.threads)?;
    let ctx = Ctx {
        seed: cli.seed,
        sources: Sources::load(cli.config.as_deref(), &cli.sets)?,
    };
    match &cli.command {
        Command::Demo(a) => commands::demo(&ctx, a),
        Command::Fit(a) => commands::fit(&ctx, a),
        Command::Render(a) => commands::render_cmd(&ctx, a),
        Command::Voxelize(a) => commands::voxelize(&ctx, a),
        Command::Devoxelize(a) => commands::devoxelize(&ctx, a),
        Command::AlignEval(a) => commands::align_eval(&ctx, a),
        Command::DiffuseTrain(a) => commands::diffuse_train(&ctx, a),
        Command::DiffuseSample(a) => commands::diffuse_sample(&ctx, a),
        Command::Gradcheck(a) => commands::gradcheck(&ctx, a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
