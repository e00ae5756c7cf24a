//! `wrt` command line: simulate, reconstruct-fbp, reconstruct-rmbir,
//! signatures, evaluate. Set `WRT_LOG=info` for progress lines.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use wrt_cli::{cmd_evaluate, cmd_fbp, cmd_rmbir, cmd_signatures, cmd_simulate, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "wrt", version, about = "Wavelength-resolved tomography pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Worker threads; 0 uses all available cores.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override config fields with dotted paths, e.g.
    /// --set rmbir.max_outer=10 --set 'rmbir.threshold={"mode":"fixed","value":3.5}'.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom and simulated counts with ground truth.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Filtered backprojection baseline per wavelength.
    ReconstructFbp {
        #[command(flatten)]
        common: CommonArgs,
        /// Counts container from `simulate`.
        #[arg(long)]
        input: PathBuf,
    },
    /// Robust MBIR reconstruction plus Bragg maps.
    ReconstructRmbir {
        #[command(flatten)]
        common: CommonArgs,
        /// Counts container from `simulate`.
        #[arg(long)]
        input: PathBuf,
    },
    /// Segment reconstruction and Bragg maps, match, emit signatures.
    Signatures {
        #[command(flatten)]
        common: CommonArgs,
        /// Reconstruction container from `reconstruct-rmbir`.
        #[arg(long)]
        recon: PathBuf,
        /// Bragg-map container; defaults to the reconstruction container.
        #[arg(long)]
        bragg: Option<PathBuf>,
    },
    /// Quantitative report against simulator ground truth.
    Evaluate {
        /// Simulation container (ground truth).
        #[arg(long)]
        sim: PathBuf,
        /// Robust reconstruction container.
        #[arg(long)]
        rmbir: PathBuf,
        /// Optional FBP container for baseline comparison.
        #[arg(long)]
        fbp: Option<PathBuf>,
        /// Signatures container.
        #[arg(long)]
        signatures: PathBuf,
        /// Report destination.
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
    },
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>, CliError> {
    raw.iter()
        .map(|item| {
            item.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got '{item}'")))
        })
        .collect()
}

fn load_config(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut overrides = parse_overrides(&common.set)?;
    if let Some(seed) = common.seed {
        overrides.push(("seed".to_string(), seed.to_string()));
    }
    RunConfig::load(&common.config, &overrides)
}

fn in_worker_pool<T>(workers: usize, job: impl FnOnce() -> T + Send) -> T
where
    T: Send,
{
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("thread pool");
        pool.install(job)
    }
    #[cfg(not(feature = "parallel"))]
    {
        if workers > 1 {
            log::warn!("built without the parallel feature; --workers ignored");
        }
        job()
    }
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate { common } => {
            let config = load_config(&common)?;
            let path = in_worker_pool(common.workers, || cmd_simulate(&config, &common.out))?;
            log::info!("wrote {}", path.display());
        }
        Command::ReconstructFbp { common, input } => {
            let config = load_config(&common)?;
            let path =
                in_worker_pool(common.workers, || cmd_fbp(&input, &config, &common.out))?;
            log::info!("wrote {}", path.display());
        }
        Command::ReconstructRmbir { common, input } => {
            let config = load_config(&common)?;
            let path =
                in_worker_pool(common.workers, || cmd_rmbir(&input, &config, &common.out))?;
            log::info!("wrote {}", path.display());
        }
        Command::Signatures { common, recon, bragg } => {
            let config = load_config(&common)?;
            let bragg = bragg.unwrap_or_else(|| recon.clone());
            let path = in_worker_pool(common.workers, || {
                cmd_signatures(&recon, &bragg, &config, &common.out)
            })?;
            log::info!("wrote {}", path.display());
        }
        Command::Evaluate { sim, rmbir, fbp, signatures, out } => {
            cmd_evaluate(&sim, &rmbir, fbp.as_deref(), &signatures, &out)?;
            log::info!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("WRT_LOG", "warn")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
