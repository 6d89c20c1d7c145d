//! `sed`: extract features, train, evaluate and predict on binaural sound
//! event datasets, and generate synthetic corpora.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sed_core::experiment::{
    cmd_evaluate, cmd_extract, cmd_predict, cmd_train, synthesize, ExperimentConfig, SynthSpec,
};
use sed_core::Error;

#[derive(Parser)]
#[command(name = "sed", version, about = "Binaural sound event detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract feature volumes for every recording in the dataset.
    Extract(Common),
    /// Train one model per selected test fold.
    Train(Common),
    /// Score the selected test folds and write reports.
    Evaluate(WithCheckpoint),
    /// Write predicted event lists for the selected test folds.
    Predict(WithCheckpoint),
    /// Generate a synthetic binaural corpus.
    Synth(SynthArgs),
}

#[derive(Args)]
struct Common {
    /// Experiment config file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root holding `manifest.tsv`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated test folds.
    #[arg(long)]
    folds: Option<String>,
    /// Comma-separated feature names.
    #[arg(long)]
    features: Option<String>,
    /// `volume` or `concat`.
    #[arg(long)]
    layering: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Rewrite up-to-date outputs.
    #[arg(long)]
    force: bool,
    /// Extraction worker threads; 0 runs strictly single-threaded.
    #[arg(long)]
    threads: Option<usize>,
    /// Override any config key, e.g. `--set max_epochs=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Use this checkpoint for every selected fold instead of
    /// `<out>/models/fold<N>.sedm`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Corpus spec file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory to write the corpus into.
    #[arg(long)]
    out: PathBuf,
    /// Override any spec key, e.g. `--set preset=pure-spatial`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn read_text(path: &Path) -> sed_core::Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn split_override(raw: &str) -> sed_core::Result<(&str, &str)> {
    raw.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| Error::Validation(format!("override `{raw}` is not KEY=VALUE")))
}

fn resolve(args: &Common) -> sed_core::Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_text(&read_text(path)?)?,
        None => ExperimentConfig::default(),
    };
    for raw in &args.overrides {
        let (k, v) = split_override(raw)?;
        cfg.set(k, v)?;
    }
    if let Some(d) = &args.dataset {
        cfg.dataset = Some(d.clone());
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(f) = &args.folds {
        cfg.set("folds", f)?;
    }
    if let Some(f) = &args.features {
        cfg.set("features", f)?;
    }
    if let Some(l) = &args.layering {
        cfg.set("layering", l)?;
    }
    if let Some(o) = &args.out {
        cfg.out = o.clone();
    }
    if args.force {
        cfg.force = true;
    }
    if let Some(t) = args.threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> sed_core::Result<()> {
    match cli.command {
        Command::Extract(args) => {
            let s = cmd_extract(&resolve(&args)?)?;
            println!("extract: {} written, {} up to date", s.written, s.skipped);
        }
        Command::Train(args) => {
            let cfg = resolve(&args)?;
            for outcome in cmd_train(&cfg)? {
                let best = outcome.history.best().expect("training ran at least one epoch");
                println!(
                    "fold {}: best epoch {} of {}, validation F {:.4}",
                    outcome.fold,
                    best.epoch,
                    outcome.history.epochs.len(),
                    best.val_f
                );
            }
        }
        Command::Evaluate(args) => {
            let report = cmd_evaluate(&resolve(&args.common)?, args.checkpoint.as_deref())?;
            print!("{}", report.to_table());
        }
        Command::Predict(args) => {
            let n = cmd_predict(&resolve(&args.common)?, args.checkpoint.as_deref())?;
            println!("predict: {n} event lists written");
        }
        Command::Synth(args) => {
            let mut text = match &args.config {
                Some(path) => read_text(path)?,
                None => String::new(),
            };
            for raw in &args.overrides {
                let (k, v) = split_override(raw)?;
                text.push_str(&format!("\n{k} = {v}"));
            }
            let spec = SynthSpec::from_text(&text, args.seed)?;
            synthesize(&spec, &args.out)?;
            println!("synth: {} recordings written to {}", spec.recordings, args.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
