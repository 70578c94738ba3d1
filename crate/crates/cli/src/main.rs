mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::CliError;

/// Data root used when a command's directory flag is omitted.
pub const DATA_ROOT_VAR: &str = "SOF_DATA_ROOT";

#[derive(Debug, Parser)]
#[command(name = "sof", version, about = "Semantic occupancy fields: data, training, rendering and latent tools")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Rasterizes synthetic scenes into a segmap dataset.
    GenData(commands::GenDataArgs),
    /// Trains a field model on a dataset.
    Train(commands::TrainArgs),
    /// Renders segmaps of one instance from a camera file or an orbit.
    Render(commands::RenderArgs),
    /// Fits a mixture to the trained latents and renders new samples.
    Sample(commands::SampleArgs),
    /// Moves an instance along a principal latent axis.
    Edit(commands::EditArgs),
    /// Fits a latent to a target segmap seen from a known camera.
    Project(commands::ProjectArgs),
    /// Runs the texturing identities and gradient checks.
    SiwCheck(commands::SiwCheckArgs),
    /// Writes a marching-cubes mesh as OBJ text.
    McExport(commands::McExportArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.global.config.as_deref())?;
    if let Some(seed) = cli.global.seed {
        cfg.seed = seed;
    }
    let threads = cli.global.threads.unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot start {threads} worker threads: {e}")))?;
    match cli.command {
        Command::GenData(a) => commands::gen_data(a, cfg),
        Command::Train(a) => commands::train(a, cfg),
        Command::Render(a) => commands::render(a, cfg),
        Command::Sample(a) => commands::sample(a, cfg),
        Command::Edit(a) => commands::edit(a, cfg),
        Command::Project(a) => commands::project(a, cfg),
        Command::SiwCheck(a) => commands::siw_check(a, cfg),
        Command::McExport(a) => commands::mc_export(a, cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
