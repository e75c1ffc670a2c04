//! `fractrack`: synthetic cohort generation, temporal-order training,
//! evaluation, saliency, ablation, statistics and the reader study.
//!
//! Exit codes: 0 ok, 1 stage failure, 2 configuration or usage error.

mod config;
mod manifest;
mod plot;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fractrack_core::PairMode;

use crate::config::{RunConfig, SaliencySide};
use crate::stages::{Ctx, StatsKind, TrainStage};

#[derive(Parser)]
#[command(name = "fractrack", version, about = "Temporal ordering of longitudinal 3D phantoms")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory holding every artifact and manifest.json.
    #[arg(long, global = true, default_value = "fractrack-out")]
    out: PathBuf,
    /// Overrides the configured seed everywhere.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom cohort and its ground truth.
    Synth,
    /// Split patients and write pair files.
    Pair {
        /// Write only this pairing.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<PairMode>,
    },
    /// Train the Siamese model.
    Train {
        #[arg(long, value_enum, default_value = "curriculum")]
        stage: TrainStage,
        /// Checkpoint to start from.
        #[arg(long)]
        init_from: Option<PathBuf>,
    },
    /// Score test pairs and write metrics, logits and the pairwise analysis.
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Pair file to score instead of the test split.
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Bootstrap resamples.
        #[arg(long)]
        bootstrap: Option<usize>,
    },
    /// Grad-CAM maps, peak table and group average for test F1-FL pairs.
    Saliency {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, value_enum)]
        side: Option<SaliencySide>,
    },
    /// Crop pairs to their high-saliency box.
    Restrict {
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Input-ablation suite on the test split.
    Ablate {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// JSON array of ablation specs.
        #[arg(long)]
        specs: Option<PathBuf>,
    },
    /// Trend model, organ change and test tables.
    Stats {
        #[arg(value_enum, default_value = "all")]
        kind: StatsKind,
    },
    /// Reader study.
    Study {
        #[command(subcommand)]
        action: StudyAction,
    },
    /// Markdown summary and stale-artifact check.
    Report,
    /// Run the pipeline end to end.
    Run {
        /// Comma-separated subset of stages to run.
        #[arg(long, value_delimiter = ',')]
        only: Option<Vec<String>>,
    },
}

#[derive(Subcommand)]
enum StudyAction {
    /// Write the study pair file from the test split.
    Prepare,
    /// Serve the study over HTTP.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
}

fn parse_mode(s: &str) -> Result<PairMode, String> {
    s.parse().map_err(|e: fractrack_core::Error| e.to_string())
}

const PIPELINE: [&str; 10] = [
    "synth", "pair", "train", "eval", "saliency", "restrict", "ablate", "stats", "study", "report",
];

enum Failure {
    Config(anyhow::Error),
    Stage(&'static str, anyhow::Error),
}

fn stage(name: &'static str, r: anyhow::Result<()>) -> Result<(), Failure> {
    r.map_err(|e| Failure::Stage(name, e))
}

fn run_stage(ctx: &mut Ctx, name: &'static str) -> Result<(), Failure> {
    eprintln!("[{name}]");
    let r = match name {
        "synth" => stages::synth(ctx),
        "pair" => stages::pair(ctx, None),
        "train" => stages::train(ctx, TrainStage::Curriculum, None),
        "eval" => stages::eval(ctx, None, None, None),
        "saliency" => stages::saliency(ctx, None, None),
        "restrict" => stages::restrict(ctx, None),
        "ablate" => stages::ablate(ctx, None, None),
        "stats" => stages::stats(ctx, StatsKind::All),
        "study" => stages::study_prepare(ctx),
        "report" => report(ctx),
        _ => unreachable!("stage names are validated"),
    };
    stage(name, r)
}

fn report(ctx: &mut Ctx) -> anyhow::Result<()> {
    for s in stages::report(ctx)? {
        eprintln!("warning: stale artifact: {s}");
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<(), Failure> {
    let mut config = RunConfig::load(cli.config.as_deref()).map_err(Failure::Config)?;
    config.apply_seed(cli.seed.unwrap_or(config.seed));
    config.validate().map_err(Failure::Config)?;
    let mut ctx = Ctx::new(cli.out, config).map_err(Failure::Config)?;
    match cli.command {
        Command::Synth => stage("synth", stages::synth(&mut ctx)),
        Command::Pair { mode } => stage("pair", stages::pair(&mut ctx, mode)),
        Command::Train { stage: s, init_from } => stage("train", stages::train(&mut ctx, s, init_from.as_deref())),
        Command::Eval { ckpt, pairs, bootstrap } => stage(
            "eval",
            stages::eval(&mut ctx, ckpt.as_deref(), pairs.as_deref(), bootstrap),
        ),
        Command::Saliency { ckpt, side } => stage("saliency", stages::saliency(&mut ctx, ckpt.as_deref(), side)),
        Command::Restrict { threshold } => stage("restrict", stages::restrict(&mut ctx, threshold)),
        Command::Ablate { ckpt, specs } => stage("ablate", stages::ablate(&mut ctx, ckpt.as_deref(), specs.as_deref())),
        Command::Stats { kind } => stage("stats", stages::stats(&mut ctx, kind)),
        Command::Study {
            action: StudyAction::Prepare,
        } => stage("study", stages::study_prepare(&mut ctx)),
        Command::Study {
            action: StudyAction::Serve { port, pairs },
        } => stage("study", stages::study_serve(&ctx, port, pairs.as_deref())),
        Command::Report => stage("report", report(&mut ctx)),
        Command::Run { only } => {
            let selected: Vec<&'static str> = match only {
                None => PIPELINE.to_vec(),
                Some(names) => {
                    for n in &names {
                        if !PIPELINE.contains(&n.as_str()) {
                            return Err(Failure::Config(anyhow::anyhow!(
                                "unknown stage `{n}` in --only; expected one of {}",
                                PIPELINE.join(", ")
                            )));
                        }
                    }
                    PIPELINE
                        .iter()
                        .copied()
                        .filter(|p| names.iter().any(|n| n == p))
                        .collect()
                }
            };
            for name in selected {
                run_stage(&mut ctx, name)?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("configuration error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Stage(name, e)) => {
            eprintln!("stage `{name}` failed: {e:#}");
            ExitCode::from(1)
        }
    }
}
