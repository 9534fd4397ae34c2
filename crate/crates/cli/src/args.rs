use std::path::PathBuf;

use avflow_core::model::Stage;
use avflow_core::preference::RankStrategy;
use avflow_core::rope::AudioIdStrategy;
use clap::{Parser, Subcommand, ValueEnum};

use crate::commands::{self, Command};
use crate::config::{Overrides, RunConfig};
use crate::error::{usage, Result};
use crate::manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "avflow", version, about = "Toy joint audio-video flow training and evaluation")]
pub struct Args {
    /// JSON run config (or a run manifest); flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Audio position-id strategy.
    #[arg(long, global = true, value_parser = parse_strategy)]
    pub strategy: Option<AudioIdStrategy>,
    #[arg(long, global = true, value_enum)]
    pub stage: Option<StageArg>,
    #[command(subcommand)]
    pub command: Sub,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Audio,
    Av,
    Dpo,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Audio => Stage::AudioPretrain,
            StageArg::Av => Stage::AvSft,
            StageArg::Dpo => Stage::AvDpo,
        }
    }
}

fn parse_strategy(s: &str) -> std::result::Result<AudioIdStrategy, String> {
    s.parse().map_err(|e: avflow_core::Error| e.to_string())
}

fn parse_ranking(s: &str) -> std::result::Result<RankStrategy, String> {
    s.parse().map_err(|e: avflow_core::Error| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Sub {
    /// Flow-matching training (stage audio or av).
    TrainFlow {
        /// Start from this checkpoint instead of a fresh model.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Preference optimization against a frozen copy of the checkpoint.
    TrainDpo {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
    },
    /// Sample candidates, score them and select preference pairs.
    MakePairs {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n_prompts: Option<usize>,
        /// Generated candidates per prompt.
        #[arg(long)]
        candidates: Option<usize>,
        /// Ranking strategy, e.g. `modality-micro/norm/gt`.
        #[arg(long, value_parser = parse_ranking)]
        ranking: Option<RankStrategy>,
    },
    /// Position-id overlap sweep plus per-strategy training runs.
    AblateRope,
    /// Sample prompts and report quality and synchrony metrics.
    Eval {
        #[arg(long, conflicts_with = "oracle", required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Use the exact constant-velocity oracle instead of a model.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        n_prompts: Option<usize>,
    },
    /// Finite-difference check of the flow and preference gradients.
    GradCheck,
    /// Replay a run manifest.
    Rerun { manifest: PathBuf },
}

/// Parses, executes and returns the manifest of the run.
pub fn execute(args: Args) -> Result<RunManifest> {
    let overrides = Overrides {
        seed: args.seed,
        out_dir: args.out.clone(),
        rope_strategy: args.strategy,
        stage: args.stage.map(Stage::from),
    };
    if let Sub::Rerun { manifest } = &args.command {
        if args.config.is_some() || args.seed.is_some() || args.strategy.is_some() || args.stage.is_some() {
            return Err(usage("rerun takes only --out"));
        }
        let m = RunManifest::load(manifest)?;
        let out = commands::rerun(&m, args.out)?;
        commands::check_outcome(&out)?;
        return Ok(out);
    }
    let mut cfg = RunConfig::load(args.config.as_deref(), &overrides)?;
    let cmd = match args.command {
        Sub::TrainFlow { init } => Command::TrainFlow { init },
        Sub::TrainDpo { checkpoint, pairs } => Command::TrainDpo { checkpoint, pairs },
        Sub::MakePairs {
            checkpoint,
            n_prompts,
            candidates,
            ranking,
        } => {
            cfg.pairs.n_prompts = n_prompts.unwrap_or(cfg.pairs.n_prompts);
            cfg.pairs.candidates = candidates.unwrap_or(cfg.pairs.candidates);
            cfg.ranking = ranking.unwrap_or(cfg.ranking);
            Command::MakePairs { checkpoint }
        }
        Sub::AblateRope => Command::AblateRope,
        Sub::Eval {
            checkpoint, n_prompts, ..
        } => {
            cfg.eval.n_prompts = n_prompts.unwrap_or(cfg.eval.n_prompts);
            Command::Eval { checkpoint }
        }
        Sub::GradCheck => Command::GradCheck,
        Sub::Rerun { .. } => unreachable!("handled above"),
    };
    let cfg = cfg.resolved()?;
    let manifest = commands::run(&cmd, &cfg)?;
    commands::check_outcome(&manifest)?;
    Ok(manifest)
}
