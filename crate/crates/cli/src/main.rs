//! Command-line driver: one subcommand per pipeline stage, each reading and
//! writing files in the output directory.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use gif_core::pipeline::{self, ExperimentConfig, InitMode};
use gif_core::GifError;
use serde::Serialize;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "gif", version, about = "Code-vector construction, tokenization and training for identity codes")]
struct Cli {
    /// TOML experiment config; omitted sections take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true, env = "GIF_OUT_DIR")]
    out_dir: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, env = "GIF_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Init {
    Mean,
    Random,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write initial code vectors from per-identity mean embeddings.
    InitVectors {
        #[arg(long, value_enum)]
        init: Option<Init>,
    },
    /// Spread the code vectors over the sphere and report their separation.
    Optimize {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Build the code tree and assign one code per identity.
    Tokenize {
        #[arg(long)]
        l: Option<usize>,
        #[arg(long)]
        v: Option<usize>,
        /// Reassign codes randomly among identities.
        #[arg(long)]
        shuffle_codes: bool,
    },
    /// Train the backbone and token heads against the frozen codes.
    Train {
        #[arg(long)]
        gamma_balance: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Compare softmax-centroid separation on balanced and long-tailed data.
    Collapse,
    /// Write classifier parameter and memory scaling.
    Cost,
    /// Run init-vectors, optimize, tokenize and train in order.
    Run,
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => read_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    match &cli.command {
        Command::InitVectors { init: Some(init) } => {
            cfg.init = match init {
                Init::Mean => InitMode::Mean,
                Init::Random => InitMode::Random,
            }
        }
        Command::Optimize { epochs: Some(e) } => cfg.uniformity.epochs = *e,
        Command::Tokenize { l, v, shuffle_codes } => {
            cfg.tokenizer.l = l.or(cfg.tokenizer.l);
            cfg.tokenizer.v = v.or(cfg.tokenizer.v);
            cfg.tokenizer.shuffle_codes |= shuffle_codes;
        }
        Command::Train { gamma_balance, epochs } => {
            if let Some(g) = gamma_balance {
                cfg.training.gamma_balance = *g;
            }
            if let Some(e) = epochs {
                cfg.training.epochs = *e;
            }
        }
        _ => {}
    }
    Ok(cfg)
}

fn read_config(path: &Path) -> anyhow::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| GifError::config(format!("cannot read config {}: {e}", path.display())))?;
    let cfg = toml::from_str(&text).map_err(|e| GifError::config(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

fn print<T: Serialize>(value: &T) -> anyhow::Result<()> {
    // A closed pipe (e.g. `| head`) is not worth a panic.
    match writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(value)?) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => r.context("writing report"),
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = load_config(cli)?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .context("configuring the worker pool")?;
    }
    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating output directory {}", cfg.out_dir.display()))?;
    log::info!("config {} -> {}", cfg.hash(), cfg.out_dir.display());
    match cli.command {
        Command::InitVectors { .. } => {
            let h = pipeline::init_vectors(&cfg)?;
            print(&serde_json::json!({ "m": h.m(), "d": h.d(), "file": cfg.path(pipeline::VECTORS_FILE) }))
        }
        Command::Optimize { .. } => print(&pipeline::optimize(&cfg)?),
        Command::Tokenize { .. } => {
            let (tree, codes) = pipeline::tokenize(&cfg)?;
            print(&serde_json::json!({ "l": tree.l(), "v": tree.v(), "m": codes.m() }))
        }
        Command::Train { .. } => print(&pipeline::train(&cfg)?),
        Command::Collapse => print(&pipeline::collapse(&cfg)?),
        Command::Cost => print(&pipeline::cost(&cfg)?),
        Command::Run => print(&pipeline::run_all(&cfg)?),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<GifError>() {
        Some(e) if e.is_config() => EXIT_CONFIG,
        Some(e) if e.is_numeric() => EXIT_NUMERIC,
        _ => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
