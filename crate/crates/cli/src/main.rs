use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod datasets;
mod manifest;

use config::RunConfig;

/// Bad user input; exits with status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct InputError(pub String);

#[derive(Parser)]
#[command(name = "hyperunmix", version, about = "Hyperspectral calibration, dataset building and unmixing")]
struct Cli {
    /// Run configuration JSON.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Raw DN cube to reflectance with dark frame and reference panels.
    Calibrate,
    /// VCA endmember extraction.
    Endmembers {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Nearest-endmember labels, class statistics and outlier resampling.
    Classify,
    /// Window-averaged mixing with abundance ground truth.
    Mix {
        #[arg(long)]
        kernel: Option<usize>,
    },
    /// endmembers, classify and mix in one run.
    BuildDataset,
    /// Train the network and write a checkpoint.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Total epoch count to reach.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Unmix with a registered method (fcls, nmf, unet).
    Unmix {
        #[arg(long)]
        method: Option<String>,
    },
    /// Score predictions against ground truth.
    Evaluate,
    /// False-colour PNG of a cube.
    Render { cube: Option<PathBuf> },
    /// List the dataset registry.
    Datasets,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Calibrate => "calibrate",
            Command::Endmembers { .. } => "endmembers",
            Command::Classify => "classify",
            Command::Mix { .. } => "mix",
            Command::BuildDataset => "build-dataset",
            Command::Train { .. } => "train",
            Command::Unmix { .. } => "unmix",
            Command::Evaluate => "evaluate",
            Command::Render { .. } => "render",
            Command::Datasets => "datasets",
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use hyperunmix::Error as E;
    for cause in err.chain() {
        if cause.is::<InputError>() || cause.is::<serde_json::Error>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Diverged { .. } | E::NonFinite { .. } | E::Image(_) => 1,
                _ => 2,
            };
        }
    }
    1
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    match &cli.command {
        Command::Endmembers { count: Some(n) } => cfg.vca.endmembers = *n,
        Command::Mix { kernel: Some(k) } => cfg.mixer.kernel = *k,
        Command::Train { resume, epochs } => {
            if let Some(p) = resume {
                cfg.unmix.checkpoint = Some(p.clone());
            }
            if let Some(n) = epochs {
                cfg.unmix.network.max_epochs = *n;
            }
        }
        Command::Unmix { method: Some(m) } => cfg.unmix.method = m.clone(),
        Command::Render { cube: Some(c) } => cfg.render.cube = Some(c.clone()),
        _ => {}
    }
    if let Command::Datasets = cli.command {
        print!("{}", datasets::table());
        return Ok(());
    }
    let out = cli.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let mut ctx = commands::Context::new(cfg, out)?;
    let name = cli.command.name();
    match cli.command {
        Command::Calibrate => commands::calibrate(&mut ctx)?,
        Command::Endmembers { .. } => commands::endmembers(&mut ctx)?,
        Command::Classify => commands::classify(&mut ctx)?,
        Command::Mix { .. } => commands::mix(&mut ctx)?,
        Command::BuildDataset => commands::build_dataset(&mut ctx)?,
        Command::Train { .. } => commands::train(&mut ctx)?,
        Command::Unmix { .. } => commands::unmix(&mut ctx)?,
        Command::Evaluate => commands::evaluate(&mut ctx)?,
        Command::Render { .. } => commands::render(&mut ctx)?,
        Command::Datasets => unreachable!(),
    }
    ctx.write_manifest(name)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
