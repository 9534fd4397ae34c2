//! The subcommands: each reads its inputs, runs a pipeline step, writes its
//! artifacts into `out_dir` and finishes with `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use avflow_core::checkpoint::{load_model, save_model, LatentStore, VERSION};
use avflow_core::flow::write_jsonl;
use avflow_core::preference::{train_dpo, PreferencePair};
use avflow_core::rope::{AudioIdStrategy, GridSpec};
use avflow_core::Model64;
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{usage, CliError, Result};
use crate::manifest::{file_sha256, RunManifest};
use crate::pipeline::{self, median, stream_seed, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Command {
    TrainFlow { init: Option<PathBuf> },
    TrainDpo { checkpoint: PathBuf, pairs: PathBuf },
    MakePairs { checkpoint: PathBuf },
    AblateRope,
    /// `checkpoint = None` evaluates the oracle field.
    Eval { checkpoint: Option<PathBuf> },
    GradCheck,
}

/// One line of a pair file. Latents live in the `latents/` directory next
/// to the file, addressed by content hash.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub prompt_id: u64,
    pub class_id: usize,
    pub grid: GridSpec,
    pub winner_ref: String,
    pub loser_ref: String,
    pub winner_is_ground_truth: bool,
    pub loser_is_ground_truth: bool,
    pub dimension_sums: PairSums,
    pub strategy: String,
}

/// Raw reward sums `[audio, video, av]` of both sides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSums {
    pub winner: [f64; 3],
    pub loser: [f64; 3],
}

pub const MANIFEST: &str = "manifest.json";
pub const MODEL: &str = "model.ckpt";
pub const PAIRS: &str = "pairs.jsonl";
pub const METRICS: &str = "metrics.json";

fn latent_dir(pairs_file: &Path) -> PathBuf {
    pairs_file.parent().unwrap_or(Path::new(".")).join("latents")
}

pub fn load_pairs(path: &Path) -> Result<(Vec<PairRecord>, Vec<PreferencePair<f64>>)> {
    let file = fs::File::open(path).map_err(|e| usage(format!("pairs file {}: {e}", path.display())))?;
    let store = LatentStore::new(latent_dir(path))?;
    let mut records = Vec::new();
    let mut pairs = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairRecord = serde_json::from_str(&line)?;
        pairs.push(PreferencePair {
            prompt_id: rec.prompt_id,
            class_id: rec.class_id,
            grid: rec.grid,
            winner: store.get(&rec.winner_ref)?,
            loser: store.get(&rec.loser_ref)?,
        });
        records.push(rec);
    }
    if pairs.is_empty() {
        return Err(usage(format!("pairs file {} holds no pairs", path.display())));
    }
    Ok((records, pairs))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Model64> {
    if !path.exists() {
        return Err(usage(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(load_model(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: String,
    pub total_overlaps: usize,
    pub toy_desync_median: f64,
    pub mean_last_loss: f64,
}

/// Executes `cmd` under `cfg` and writes the manifest. Returns the manifest
/// even for a failing gradient check; see [`check_outcome`].
pub fn run(cmd: &Command, cfg: &RunConfig) -> Result<RunManifest> {
    let start = Instant::now();
    let out = &cfg.out_dir;
    fs::create_dir_all(out)?;
    let mut inputs = BTreeMap::new();
    let mut outputs: Vec<&str> = Vec::new();
    let metrics = match cmd {
        Command::TrainFlow { init } => {
            let init_model = match init {
                Some(p) => {
                    inputs.insert(p.display().to_string(), file_sha256(p)?);
                    Some(load_checkpoint(p)?)
                }
                None => None,
            };
            let (model, log, fm) = pipeline::train_flow_stage(cfg, init_model)?;
            save_model(&model, &out.join(MODEL))?;
            write_jsonl(&log, BufWriter::new(fs::File::create(out.join("train_log.jsonl"))?))?;
            write_json(&out.join(METRICS), &fm)?;
            outputs.extend([MODEL, "train_log.jsonl", METRICS]);
            serde_json::to_value(&fm)?
        }
        Command::MakePairs { checkpoint } => {
            inputs.insert(checkpoint.display().to_string(), file_sha256(checkpoint)?);
            let model = load_checkpoint(checkpoint)?;
            let mined = pipeline::mine_pairs(&model, cfg)?;
            let pairs_path = out.join(PAIRS);
            let store = LatentStore::new(latent_dir(&pairs_path))?;
            let mut w = BufWriter::new(fs::File::create(&pairs_path)?);
            let strategy = cfg.ranking.to_string();
            for s in &mined.selections {
                let (win, lose) = (&mined.pool[s.winner], &mined.pool[s.loser]);
                let rec = PairRecord {
                    prompt_id: s.prompt_id,
                    class_id: win.class_id,
                    grid: cfg.grid,
                    winner_ref: store.put(&win.latent)?,
                    loser_ref: store.put(&lose.latent)?,
                    winner_is_ground_truth: win.info.is_ground_truth,
                    loser_is_ground_truth: lose.info.is_ground_truth,
                    dimension_sums: PairSums {
                        winner: win.info.rewards.dimension_sums(),
                        loser: lose.info.rewards.dimension_sums(),
                    },
                    strategy: strategy.clone(),
                };
                serde_json::to_writer(&mut w, &rec)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
            outputs.push(PAIRS);
            let fraction = mined.generated_winner_fraction();
            info!(
                "{} pairs from {} prompts; {:.1}% of winners generated",
                mined.selections.len(),
                cfg.pairs.n_prompts,
                100.0 * fraction
            );
            serde_json::json!({
                "n_pairs": mined.selections.len(),
                "n_prompts": cfg.pairs.n_prompts,
                "candidates": cfg.pairs.candidates,
                "strategy": strategy,
                "generated_winner_fraction": fraction,
            })
        }
        Command::TrainDpo { checkpoint, pairs } => {
            let (records, pair_data) = load_pairs(pairs)?;
            inputs.insert(pairs.display().to_string(), file_sha256(pairs)?);
            inputs.insert(checkpoint.display().to_string(), file_sha256(checkpoint)?);
            let reference = load_checkpoint(checkpoint)?;
            let mut policy = load_checkpoint(checkpoint)?;
            let log = train_dpo(&mut policy, &reference, &pair_data, &cfg.dpo)?;
            save_model(&policy, &out.join(MODEL))?;
            write_jsonl(&log, BufWriter::new(fs::File::create(out.join("dpo_log.jsonl"))?))?;
            let last = log.last();
            let final_acc = log.iter().rev().find_map(|r| r.acc_a.zip(r.acc_v));
            let m = serde_json::json!({
                "n_pairs": records.len(),
                "beta_a": cfg.dpo.beta_a,
                "beta_v": cfg.dpo.beta_v,
                "final_loss": last.map(|r| r.loss),
                "final_acc_a": final_acc.map(|a| a.0),
                "final_acc_v": final_acc.map(|a| a.1),
                "best_acc_a": last.map(|r| r.best_acc_a),
                "best_acc_v": last.map(|r| r.best_acc_v),
            });
            write_json(&out.join(METRICS), &m)?;
            outputs.extend([MODEL, "dpo_log.jsonl", METRICS]);
            m
        }
        Command::Eval { checkpoint } => {
            let model = match checkpoint {
                Some(p) => {
                    inputs.insert(p.display().to_string(), file_sha256(p)?);
                    Some(load_checkpoint(p)?)
                }
                None => None,
            };
            let em = pipeline::evaluate(model.as_ref(), cfg)?;
            write_json(&out.join(METRICS), &em)?;
            outputs.push(METRICS);
            serde_json::to_value(&em)?
        }
        Command::AblateRope => {
            let overlaps = pipeline::overlap_sweep(cfg)?;
            write_csv(&out.join("rope_overlaps.csv"), &overlaps)?;
            outputs.push("rope_overlaps.csv");
            let mut trend = Vec::new();
            for s in AudioIdStrategy::ALL {
                for k in 0..cfg.ablation.seeds as u64 {
                    let row = pipeline::trend_run(cfg, s, cfg.seed + k)?;
                    info!("{} seed {}: desync median {}", row.strategy, row.seed, row.toy_desync_median);
                    trend.push(row);
                }
            }
            if !trend.is_empty() {
                write_csv(&out.join("rope_training.csv"), &trend)?;
                outputs.push("rope_training.csv");
            }
            let summary: Vec<StrategySummary> = AudioIdStrategy::ALL
                .iter()
                .map(|s| {
                    let rows: Vec<_> = trend.iter().filter(|r| r.strategy == s.name()).collect();
                    StrategySummary {
                        strategy: s.name().into(),
                        total_overlaps: overlaps.iter().filter(|r| r.strategy == s.name()).map(|r| r.overlaps).sum(),
                        toy_desync_median: median(&rows.iter().map(|r| r.toy_desync_median).collect::<Vec<_>>()),
                        mean_last_loss: rows.iter().map(|r| r.last_loss).sum::<f64>() / rows.len().max(1) as f64,
                    }
                })
                .collect();
            write_csv(&out.join("rope_summary.csv"), &summary)?;
            outputs.push("rope_summary.csv");
            serde_json::to_value(&summary)?
        }
        Command::GradCheck => {
            let rows = pipeline::gradient_checks(cfg)?;
            let worst = rows
                .iter()
                .map(|r| r.joint_fm_max_rel_error.max(r.dpo_max_rel_error))
                .fold(0.0, f64::max);
            let m = serde_json::json!({
                "max_rel_error": worst,
                "tolerance": cfg.grad_check.tolerance,
                "passed": worst < cfg.grad_check.tolerance,
                "per_seed": rows,
            });
            write_json(&out.join("grad_check.json"), &m)?;
            outputs.push("grad_check.json");
            m
        }
    };
    let mut hashes = BTreeMap::new();
    for name in outputs {
        hashes.insert(name.to_string(), file_sha256(&out.join(name))?);
    }
    let seeds = [
        ("run", cfg.seed),
        ("train_data", stream_seed(cfg.seed, Stream::Train)),
        ("held_out", stream_seed(cfg.seed, Stream::HeldOut)),
        ("pairs", stream_seed(cfg.seed, Stream::Pairs)),
        ("eval", stream_seed(cfg.seed, Stream::Eval)),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let manifest = RunManifest {
        command: cmd.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        container_version: VERSION,
        resolved_config: cfg.clone(),
        seeds,
        inputs,
        outputs: hashes,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        metrics,
    };
    manifest.save(&out.join(MANIFEST))?;
    Ok(manifest)
}

/// Turns a failed gradient check into an error after its report is written.
pub fn check_outcome(manifest: &RunManifest) -> Result<()> {
    if matches!(manifest.command, Command::GradCheck) && manifest.metrics["passed"] == false {
        let worst = manifest.metrics["max_rel_error"].as_f64().unwrap_or(f64::NAN);
        return Err(CliError::GradCheck(worst));
    }
    Ok(())
}

/// Replays a manifest, optionally into another directory.
pub fn rerun(manifest: &RunManifest, out_dir: Option<PathBuf>) -> Result<RunManifest> {
    let mut cfg = manifest.resolved_config.clone();
    if let Some(d) = out_dir {
        cfg.out_dir = d;
    }
    run(&manifest.command, &cfg.resolved()?)
}
