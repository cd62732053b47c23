//! `cpr`: command-line driver for the pseudo-label refinement pipeline.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cpr_core::labeling::LabelMask;
use cpr_core::metrics::MetricReport;
use cpr_core::stages;
use cpr_core::synthgen::{Preset, ScenarioConfig};
use cpr_core::{npy, Error, PipelineConfig, Result};

#[derive(Parser)]
#[command(name = "cpr", version, about = "Context-aware pseudo-label refinement")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Corpus directory.
    #[arg(long = "in", global = true)]
    input: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus to --out.
    Synth {
        /// noiseless, paper-like or separable.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        images: Option<usize>,
    },
    /// Aggregate passes into pseudo-labels, prototypes and reliability masks.
    PseudoLabel,
    /// Train the similarity head.
    TrainHead,
    /// Revise and calibrate probabilities.
    Refine,
    /// Threshold refined probabilities and select reliable labels.
    Denoise,
    /// Adapt the toy segmentor on the selected labels.
    Adapt,
    /// Score label sets against ground truth.
    Evaluate {
        /// Score a single prediction file instead of a work directory.
        #[arg(long, requires = "truth")]
        pred: Option<PathBuf>,
        #[arg(long, requires = "pred")]
        truth: Option<PathBuf>,
    },
    /// Run every stage; synthesizes a corpus when --in is absent.
    RunAll,
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if common.threads.is_some() {
        cfg.threads = common.threads;
    }
    if common.input.is_some() {
        cfg.input = common.input.clone();
    }
    if common.out.is_some() {
        cfg.output = common.out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn required<'a>(dir: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    dir.as_deref()
        .ok_or_else(|| Error::Config(format!("--{flag} is required (or set `{}` in the config)", config_key(flag))))
}

fn config_key(flag: &str) -> &str {
    match flag {
        "in" => "input",
        _ => "output",
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let input = cfg.input.clone();
    let output = cfg.output.clone();
    match cli.command {
        Command::Synth { preset, images } => {
            if let Some(name) = preset {
                let images = cfg.synth.images;
                cfg.synth = ScenarioConfig { images, ..ScenarioConfig::preset(name.parse::<Preset>()?, 0) };
            }
            if let Some(n) = images {
                cfg.synth.images = n;
            }
            cfg.validate()?;
            print_json(&stages::synth(required(&output, "out")?, &cfg)?)
        }
        Command::Evaluate { pred: Some(pred), truth: Some(truth) } => {
            let load = |p: &Path| -> Result<LabelMask> {
                LabelMask::new(npy::load_tensor(p)?).map_err(|e| e.in_file(p))
            };
            let (pred, truth) = (load(&pred)?, load(&truth)?);
            print_json(&MetricReport::over_images(&[(&pred, &truth)])?)
        }
        Command::Evaluate { .. } => print_json(&stages::evaluate_stage(
            required(&input, "in")?,
            required(&output, "out")?,
            &cfg,
        )?),
        Command::RunAll => print_json(&stages::run_all(input.as_deref(), required(&output, "out")?, &cfg)?),
        stage => {
            let (corpus, work) = (required(&input, "in")?, required(&output, "out")?);
            let manifest = match stage {
                Command::PseudoLabel => stages::pseudo_label_stage(corpus, work, &cfg)?,
                Command::TrainHead => stages::train_head_stage(corpus, work, &cfg)?,
                Command::Refine => stages::refine_stage(corpus, work, &cfg)?,
                Command::Denoise => stages::denoise_stage(corpus, work, &cfg)?,
                Command::Adapt => stages::adapt_stage(corpus, work, &cfg)?,
                _ => unreachable!("handled above"),
            };
            print_json(&manifest)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CPR_LOG_LEVEL", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            let report = serde_json::json!({
                "error": {
                    "kind": e.kind(),
                    "message": e.to_string(),
                    "path": e.path().map(|p| p.display().to_string()),
                }
            });
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}
