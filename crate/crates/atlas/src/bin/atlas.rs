use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use atlas::pipeline::Pipeline;

/// Pipeline driver: areal interpolation of regional counts, piecewise panel
/// estimation, shift-share IV, and the housing-market simulator.
#[derive(Parser)]
#[command(name = "atlas", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Pipeline configuration file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (defaults to the config's output_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Cap on worker threads.
    #[arg(long)]
    jobs: Option<usize>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Reallocate source-region counts onto the target region system.
    Interpolate(CommonArgs),
    /// Build and write an estimation panel for a preset.
    Panel {
        #[command(flatten)]
        common: CommonArgs,
        /// Preset naming the panel specification.
        #[arg(long, default_value = "chronic-pooled")]
        preset: String,
    },
    /// Run one estimation preset (OLS, quasi-difference, or IV).
    Estimate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        preset: String,
        /// List available presets and exit.
        #[arg(long)]
        list: bool,
    },
    /// Simulate the low-end housing market and the asymmetry experiment.
    Simulate(CommonArgs),
    /// Per-year sanity correlations and summary statistics.
    Validate(CommonArgs),
}

fn run() -> atlas::Result<()> {
    let cli = Cli::parse();
    let common = match &cli.command {
        Command::Interpolate(c) | Command::Simulate(c) | Command::Validate(c) => c,
        Command::Panel { common, .. } | Command::Estimate { common, .. } => common,
    };

    let pipeline = Pipeline::load(&common.config, common.out.clone(), common.seed)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(common.jobs.unwrap_or(0))
        .build()
        .map_err(|e| atlas::AtlasError::Config(format!("thread pool: {e}")))?;

    pool.install(|| -> atlas::Result<()> {
        match &cli.command {
            Command::Interpolate(_) => {
                pipeline.cmd_interpolate()?;
            }
            Command::Panel { preset, .. } => {
                pipeline.cmd_panel(preset)?;
            }
            Command::Estimate { preset, list, .. } => {
                if *list {
                    for name in pipeline.preset_names() {
                        println!("{name}");
                    }
                    return Ok(());
                }
                pipeline.cmd_estimate(preset)?;
            }
            Command::Simulate(_) => {
                pipeline.cmd_simulate()?;
            }
            Command::Validate(_) => {
                pipeline.cmd_validate()?;
            }
        }
        println!("wrote outputs to {}", pipeline.out_dir().display());
        Ok(())
    })
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
