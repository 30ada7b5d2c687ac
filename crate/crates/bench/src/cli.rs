//! Argument parsing and dispatch for the `tif-bench` binary.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::commands::{self, AblationAxis, CurveKind};
use crate::config::ExperimentConfig;
use crate::error::{BenchError, BenchResult};

pub const THREADS_ENV: &str = "TIF_THREADS";

#[derive(Debug, Parser)]
#[command(name = "tif-bench", version, about = "Time-step few-shot learner lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render every configured task to PGM files and check the world premise.
    GenWorld(Common),
    /// Train the shared base denoiser.
    Pretrain(Common),
    /// Train class adapters and evaluate TiF and the baselines.
    Run(Common),
    /// Emit error or weight curves as CSV.
    Curves {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        which: CurveKind,
    },
    /// Sweep weight schemes, adapter ranks or injection subsets.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: AblationAxis,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Self::GenWorld(c) | Self::Pretrain(c) | Self::Run(c) => c,
            Self::Curves { common, .. } | Self::Ablate { common, .. } => common,
        }
    }
}

fn resolve_out(common: &Common, cfg: &ExperimentConfig) -> BenchResult<PathBuf> {
    common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| BenchError::Usage("no --out given and config has no output_dir".into()))
}

/// Caps the global worker pool when `TIF_THREADS` is set.
pub fn init_threads() -> BenchResult<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        BenchError::Usage(format!(
            "{THREADS_ENV} must be a positive integer, got {value:?}"
        ))
    })?;
    // A pool that is already built (e.g. in tests) is left alone.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

/// Runs one parsed command and returns a one-line summary for stdout.
pub fn execute(cli: &Cli) -> BenchResult<String> {
    let common = cli.command.common();
    let cfg = ExperimentConfig::load(&common.config)?;
    let out = resolve_out(common, &cfg)?;
    let out: &Path = &out;
    Ok(match &cli.command {
        Command::GenWorld(_) => {
            let check = commands::gen_world(&cfg, out)?;
            format!(
                "wrote {} tasks to {}; env median {:.3} vs nuance median {:.3}",
                check.tasks.len(),
                out.join(commands::WORLD_DIR).display(),
                check.env_median_distance,
                check.nuance_median_distance
            )
        }
        Command::Pretrain(_) => {
            let hash = commands::pretrain(&cfg, out)?;
            format!(
                "wrote {} (sha256 {hash})",
                out.join(commands::BASE_FILE).display()
            )
        }
        Command::Run(_) => {
            let rows = commands::run(&cfg, out)?;
            format!("wrote {} rows to {}", rows.len(), out.display())
        }
        Command::Curves { which, .. } => {
            let files = commands::curves(&cfg, *which, out)?;
            format!(
                "wrote {} curve files to {}",
                files.len(),
                out.join("curves").display()
            )
        }
        Command::Ablate { axis, .. } => {
            let rows = commands::ablate(&cfg, *axis, out)?;
            format!(
                "wrote {} rows to {}",
                rows.len(),
                out.join("ablate").join(axis.name()).display()
            )
        }
    })
}
