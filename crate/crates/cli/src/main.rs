use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use stepscore_core::harness::{
    ablate, emit_plots, evaluate, read_predictions, score_predictions, train, write_evaluation, AblationMode, RunConfig,
    RunLog,
};
use stepscore_core::metrics::MetricsReport;
use stepscore_core::synthgen::{generate_dataset, GeneratorSpec};

#[derive(Parser)]
#[command(name = "stepscore", version, about = "Step segmentation and step-wise scoring of procedural videos")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (features, train/test manifests).
    Synth {
        /// Generator spec (.toml or .json).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train two paired variants and compare them on the test split.
    Ablate {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        config: PathBuf,
    },
    /// Score prediction files offline.
    Metrics {
        /// JSON array of {"id", "labels", "score"}.
        #[arg(long)]
        pred: PathBuf,
        /// Same format, or a dataset manifest.
        #[arg(long)]
        gt: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    MotionFeatures,
    Attention,
    StepVsWhole,
    Sigmoid,
}

impl From<Mode> for AblationMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::MotionFeatures => AblationMode::MotionFeatures,
            Mode::Attention => AblationMode::Attention,
            Mode::StepVsWhole => AblationMode::StepVsWhole,
            Mode::Sigmoid => AblationMode::Sigmoid,
        }
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth { spec, out } => {
            let spec = GeneratorSpec::from_file(&spec).with_context(|| format!("loading {}", spec.display()))?;
            let paths = generate_dataset(&spec, &out).context("generating dataset")?;
            println!("train manifest: {}", paths.train_manifest.display());
            println!("test manifest:  {}", paths.test_manifest.display());
        }
        Command::Train { config } => {
            let config = RunConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let outcome = train(&config).context("training")?;
            println!(
                "best epoch {} (eval spearman {}), checkpoint {}",
                outcome.log.best_epoch,
                outcome.log.best_spearman.map_or("n/a".into(), |s| format!("{s:.4}")),
                outcome.best_checkpoint.display()
            );
            if let Some(report) = &outcome.test_report {
                println!("test: {}", MetricsReport::table_header());
                println!("test: {}", report.table_row());
            }
        }
        Command::Eval { checkpoint, manifest, out } => {
            let report = evaluate(&checkpoint, &manifest).context("evaluating")?;
            write_evaluation(&report, &out)?;
            emit_plots(&RunLog::default(), Some(&report), &out.join("plots"))?;
            println!("{}", MetricsReport::table_header());
            println!("{}", report.table_row());
        }
        Command::Ablate { mode, config } => {
            let config = RunConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let report = ablate(&config, mode.into()).context("ablation")?;
            print!("{}", report.table());
        }
        Command::Metrics { pred, gt } => {
            let p = read_predictions(&pred).with_context(|| format!("reading {}", pred.display()))?;
            let g = read_predictions(&gt).with_context(|| format!("reading {}", gt.display()))?;
            let report = score_predictions(&p, &g)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            println!("{}", MetricsReport::table_header());
            println!("{}", report.table_row());
        }
    }
    Ok(())
}
