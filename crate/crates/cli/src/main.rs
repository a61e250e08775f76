//! `salient`: the attribution pipeline as re-runnable stages.
//!
//! Every stage reads its inputs from earlier stage directories under
//! `output_dir`, writes only into its own directory, and leaves a
//! `config.toml` snapshot there.

mod config;
mod stages;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use salient_core::ErrorCategory;

use config::{Overrides, RunConfig};

/// Invalid configuration detected before any stage work.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

/// A file an earlier stage should have produced.
#[derive(Debug)]
pub struct MissingInput {
    pub path: PathBuf,
    pub hint: String,
}

impl fmt::Display for MissingInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "missing input {}: {}", self.path.display(), self.hint)
    }
}

impl std::error::Error for MissingInput {}

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "salient", version, about = "Entropy-gated tile attribution pipeline")]
struct Cli {
    /// TOML run configuration; flags override its keys.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Log filter, e.g. `debug` or `salient_core=debug`. `RUST_LOG` wins.
    #[arg(long, global = true, default_value = "info")]
    log: String,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CompositeKind {
    /// Left half positive, right half comparative.
    Halves,
    /// Comparative square inside a positive field.
    Island,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus and manifest.
    Synth {
        /// Also paint a two-region composite with its ground-truth mask.
        #[arg(long, value_enum)]
        composite: Option<CompositeKind>,
    },
    /// Cut and entropy-gate train and test tiles.
    Tile,
    /// Train one model per seed on the tiles.
    Train,
    /// Score test images with every trained model.
    Evaluate,
    /// Probability map, overlay and numeric dump for one image.
    Map {
        /// Manifest id of the image.
        #[arg(long, conflicts_with = "image")]
        id: Option<String>,
        /// Image file outside the manifest; needs its density.
        #[arg(long, requires = "image_density")]
        image: Option<PathBuf>,
        /// Pixels per canvas centimetre of `--image`.
        #[arg(long)]
        image_density: Option<f64>,
        /// Model file; defaults to the best evaluated model, else the first
        /// trained one.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Fit target probability against false positives.
    Regress {
        /// Summary table or two-column `x,y` file; defaults to the
        /// evaluate stage's summary.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Check whether models order external images consistently.
    Corroborate {
        /// Model files; defaults to every trained model.
        #[arg(long, value_delimiter = ',')]
        models: Option<Vec<PathBuf>>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return EXIT_CONFIG;
        }
        if cause.is::<MissingInput>() {
            return EXIT_DATA;
        }
        if let Some(e) = cause.downcast_ref::<salient_core::Error>() {
            return match e.category() {
                ErrorCategory::Config => EXIT_CONFIG,
                ErrorCategory::Data => EXIT_DATA,
                ErrorCategory::Numeric => EXIT_NUMERIC,
            };
        }
    }
    1
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if config.threads > 0 {
        salient_core::exec::init_threads(config.threads);
    }
    match cli.command {
        Command::Synth { composite } => stages::synth(&config, composite),
        Command::Tile => stages::tile(&config),
        Command::Train => stages::train(&config),
        Command::Evaluate => stages::evaluate(&config),
        Command::Map {
            id,
            image,
            image_density,
            model,
        } => {
            let source = match (id, image) {
                (Some(id), _) => stages::MapSource::Manifest(id),
                (None, Some(path)) => stages::MapSource::File {
                    path,
                    density: image_density.expect("required by clap"),
                },
                (None, None) => {
                    return Err(ConfigError("map needs --id or --image".into()).into());
                }
            };
            stages::map(&config, source, model)
        }
        Command::Regress { input } => stages::regress(&config, input),
        Command::Corroborate { models } => stages::corroborate(&config, models),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.log))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
