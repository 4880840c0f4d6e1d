use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use webharvest::config::Overrides;
use webharvest::core::manifest::Strategy;
use webharvest::core::noise::NoiseKind;
use webharvest::stages::{Pipeline, StageError};

/// Build image-classification datasets from web search engines.
#[derive(Parser)]
#[command(name = "webharvest", version)]
struct Cli {
    /// Pipeline configuration file.
    #[arg(long, global = true, default_value = "pipeline.toml")]
    config: PathBuf,
    /// Override the configured RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Read keyword and search responses from this fixture directory.
    #[arg(long, global = true)]
    fixtures: Option<PathBuf>,
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    stage: Stage,
}

#[derive(Subcommand)]
enum Stage {
    /// Ask the keyword service for expansions of every class.
    Expand,
    /// Query the search engines with base and expanded queries.
    Search,
    /// Download, validate and store every search result.
    Fetch,
    /// Remove per-query and cross-expansion near-duplicates.
    Dedup {
        /// Hamming distance at or below which two images are duplicates.
        #[arg(long)]
        threshold: Option<u32>,
    },
    /// Compute feature vectors and expansion statistics.
    Embed,
    /// Score expansions and select the best per class.
    Score {
        #[arg(long)]
        stats: Option<PathBuf>,
        #[arg(long)]
        keep: Option<usize>,
    },
    /// Build a labeled manifest.
    Assemble {
        #[arg(long, value_parser = parse_strategy)]
        strategy: Option<Strategy>,
        /// Images per class.
        #[arg(long)]
        target: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inject controlled label noise.
    Noise {
        #[command(subcommand)]
        cmd: NoiseCmd,
    },
    /// Check noisy manifests against their replacement logs.
    Audit(AuditArgs),
    /// Export a 2-D PCA of one class for plotting.
    Project {
        /// Class id or name; defaults to the first class.
        #[arg(long)]
        class: Option<String>,
        /// Manifests to compare; each becomes one label.
        #[arg(long)]
        manifest: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run expand through assemble in one go.
    Run,
}

#[derive(Subcommand)]
enum NoiseCmd {
    /// One noisy replica.
    Inject {
        #[arg(long)]
        kind: Kind,
        #[arg(long)]
        fraction: f64,
        #[command(flatten)]
        io: NoiseIo,
    },
    /// Every (kind, fraction) cell of the noise grid.
    Grid {
        #[arg(long, default_value = "both")]
        kinds: Kinds,
        /// Comma-separated fractions; defaults to 0.05, 0.15, ..., 0.85.
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
        #[command(flatten)]
        io: NoiseIo,
    },
    Audit(AuditArgs),
}

#[derive(Args)]
struct NoiseIo {
    /// Clean manifest; defaults to the configured strategy's manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Manifest of images with labels outside the dataset.
    #[arg(long)]
    external_pool: Option<PathBuf>,
    /// Output directory; defaults to <work_dir>/noise.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    /// Clean manifest the noise was injected into.
    #[arg(long)]
    original: Option<PathBuf>,
    /// One noisy manifest; without it every cell in <work_dir>/noise is audited.
    #[arg(long)]
    noisy: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Internal,
    External,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kinds {
    Internal,
    External,
    Both,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e| format!("{e}"))
}

impl From<Kind> for NoiseKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Internal => NoiseKind::Internal,
            Kind::External => NoiseKind::External,
        }
    }
}

impl Kinds {
    fn list(self) -> Vec<NoiseKind> {
        match self {
            Kinds::Internal => vec![NoiseKind::Internal],
            Kinds::External => vec![NoiseKind::External],
            Kinds::Both => vec![NoiseKind::Internal, NoiseKind::External],
        }
    }
}

fn run(cli: Cli) -> Result<(), StageError> {
    let overrides = Overrides {
        seed: cli.seed,
        fixtures: cli.fixtures,
    };
    let p = Pipeline::load(&cli.config, &overrides)?;
    log::info!("config {} (hash {})", cli.config.display(), p.config().hash);
    match cli.stage {
        Stage::Expand => p.expand(),
        Stage::Search => p.search(),
        Stage::Fetch => p.fetch(),
        Stage::Dedup { threshold } => p.dedup(threshold),
        Stage::Embed => p.embed(),
        Stage::Score { stats, keep } => p.score(stats.as_deref(), keep),
        Stage::Assemble {
            strategy,
            target,
            out,
        } => p.assemble(strategy, target, out.as_deref()).map(drop),
        Stage::Noise { cmd } => match cmd {
            NoiseCmd::Inject { kind, fraction, io } => p
                .noise_inject(
                    kind.into(),
                    fraction,
                    io.manifest.as_deref(),
                    io.external_pool.as_deref(),
                    io.out.as_deref(),
                )
                .map(drop),
            NoiseCmd::Grid {
                kinds,
                fractions,
                io,
            } => p
                .noise_grid(
                    &kinds.list(),
                    fractions.as_deref(),
                    io.manifest.as_deref(),
                    io.external_pool.as_deref(),
                    io.out.as_deref(),
                )
                .map(drop),
            NoiseCmd::Audit(a) => p
                .audit(a.original.as_deref(), a.noisy.as_deref(), a.log.as_deref())
                .map(drop),
        },
        Stage::Audit(a) => p
            .audit(a.original.as_deref(), a.noisy.as_deref(), a.log.as_deref())
            .map(drop),
        Stage::Project {
            class,
            manifest,
            out,
        } => p
            .project(class.as_deref(), &manifest, out.as_deref())
            .map(drop),
        Stage::Run => p.run_all().map(drop),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
