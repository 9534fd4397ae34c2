use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use avflow_cli::config::RunConfig;
use avflow_cli::manifest::RunManifest;
use avflow_core::checkpoint::load_model;
use avflow_core::model::Model;
use serde_json::{json, Value};
use tempfile::TempDir;

/// A fast configuration: one-layer dim-8 model on a tiny grid.
fn tiny_config() -> Value {
    json!({
        "model": { "n_layers": 1, "model_dim": 8, "n_heads": 2, "ffn_dim": 16 },
        "grid": { "video_frames": 4, "height": 1, "width": 2, "audio_steps": 8, "freq_bins": 2 },
        "flow": { "steps": 20, "batch_size": 2 },
        "dpo": { "steps": 5, "batch_size": 2, "eval_every": 5 },
        "pairs": { "n_prompts": 4, "candidates": 2 },
        "eval": { "n_prompts": 3 },
        "ablation": { "grids": 5, "max_extent": 6, "seeds": 0 },
        "grad_check": { "seeds": 1 },
        "seed": 3
    })
}

struct Sandbox {
    dir: TempDir,
}

impl Sandbox {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self, name: &str, value: &Value) -> PathBuf {
        let p = self.path(name);
        fs::write(&p, value.to_string()).unwrap();
        p
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_avflow"))
            .args(args)
            .env("RUST_LOG", "error")
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> RunManifest {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        let dir = args.windows(2).find(|w| w[0] == "--out").map(|w| w[1]).expect("--out");
        RunManifest::load(&self.path(dir).join("manifest.json")).unwrap()
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn with(mut base: Value, patch: impl FnOnce(&mut Value)) -> Value {
    patch(&mut base);
    base
}

fn trained_checkpoint(sb: &Sandbox) -> PathBuf {
    sb.config("c.json", &tiny_config());
    sb.ok(&["train-flow", "--config", "c.json", "--out", "flow"]);
    sb.path("flow/model.ckpt")
}

#[test]
fn unknown_config_key_exits_with_usage_code() {
    let sb = Sandbox::new();
    sb.config("bad.json", &with(tiny_config(), |v| v["flow"]["stepz"] = 3.into()));
    let out = sb.run(&["train-flow", "--config", "bad.json", "--out", "x"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));
    assert!(!sb.path("x/manifest.json").exists());
}

#[test]
fn bad_flags_exit_with_usage_code() {
    let sb = Sandbox::new();
    assert_eq!(code(&sb.run(&["train-flow", "--strategy", "sideways"])), 2);
    assert_eq!(code(&sb.run(&["eval"])), 2);
    sb.config("c.json", &tiny_config());
    assert_eq!(code(&sb.run(&["train-flow", "--config", "c.json", "--stage", "dpo", "--out", "d"])), 2);
}

#[test]
fn zero_step_training_saves_the_initialization() {
    let sb = Sandbox::new();
    let cfg = with(tiny_config(), |v| v["flow"]["steps"] = 0.into());
    sb.config("c.json", &cfg);
    let m = sb.ok(&["train-flow", "--config", "c.json", "--out", "r"]);
    let saved: Model<f64> = load_model(&sb.path("r/model.ckpt")).unwrap();
    let resolved = RunConfig::from_json(&cfg.to_string()).unwrap().resolved().unwrap();
    let fresh = Model::<f64>::new(resolved.model, resolved.seed).unwrap();
    assert_eq!(saved.params().checksum(), fresh.params().checksum());
    assert_eq!(m.resolved_config.flow.steps, 0);
    assert_eq!(fs::read_to_string(sb.path("r/train_log.jsonl")).unwrap(), "");
}

#[test]
fn training_is_reproducible_and_rerun_matches() {
    let sb = Sandbox::new();
    sb.config("c.json", &tiny_config());
    let a = sb.ok(&["train-flow", "--config", "c.json", "--out", "a"]);
    let b = sb.ok(&["train-flow", "--config", "c.json", "--out", "b"]);
    assert_eq!(a.outputs, b.outputs);
    assert_eq!(a.metrics, b.metrics);
    let c = sb.ok(&["rerun", "a/manifest.json", "--out", "c"]);
    assert_eq!(a.outputs, c.outputs);
    let d = sb.ok(&["train-flow", "--config", "c.json", "--seed", "4", "--out", "d"]);
    assert_ne!(a.outputs["model.ckpt"], d.outputs["model.ckpt"]);
    assert_eq!(d.resolved_config.seed, 4);
}

#[test]
fn flags_override_the_config_file() {
    let sb = Sandbox::new();
    sb.config("c.json", &tiny_config());
    let m = sb.ok(&[
        "train-flow",
        "--config",
        "c.json",
        "--strategy",
        "vanilla",
        "--stage",
        "audio",
        "--out",
        "o",
    ]);
    let cfg = &m.resolved_config;
    assert_eq!(cfg.rope_strategy.name(), "vanilla");
    assert_eq!(cfg.model.audio_ids, cfg.rope_strategy);
    assert_eq!(cfg.flow.seed, 3);
    let log = fs::read_to_string(sb.path("o/train_log.jsonl")).unwrap();
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert!(first["loss_video"].is_null());
}

fn pair_lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn pairs_then_zero_lr_dpo_keeps_the_checkpoint() {
    let sb = Sandbox::new();
    let ckpt = trained_checkpoint(&sb);
    let ckpt = ckpt.to_str().unwrap();
    let m = sb.ok(&["make-pairs", "--config", "c.json", "--checkpoint", ckpt, "--ranking", "average-macro/norm/gt", "--out", "p"]);
    let lines = pair_lines(&sb.path("p/pairs.jsonl"));
    assert_eq!(lines.len() as u64, m.metrics["n_pairs"].as_u64().unwrap());
    assert!(!lines.is_empty());
    for rec in &lines {
        assert_eq!(rec["strategy"], "average-macro/norm/gt");
        for key in ["winner_ref", "loser_ref"] {
            let hash = rec[key].as_str().unwrap();
            assert!(sb.path(&format!("p/latents/{hash}.ckpt")).exists());
        }
    }

    sb.config("lr0.json", &with(tiny_config(), |v| v["dpo"]["lr"] = 0.0.into()));
    let d = sb.ok(&[
        "train-dpo",
        "--config",
        "lr0.json",
        "--checkpoint",
        ckpt,
        "--pairs",
        "p/pairs.jsonl",
        "--out",
        "d",
    ]);
    let before: Model<f64> = load_model(Path::new(ckpt)).unwrap();
    let after: Model<f64> = load_model(&sb.path("d/model.ckpt")).unwrap();
    assert_eq!(before.params().checksum(), after.params().checksum());
    assert_eq!(d.metrics["final_acc_a"], 0.0);
    assert_eq!(d.metrics["beta_v"], 3000.0);
    assert_eq!(d.inputs.len(), 2);
}

#[test]
fn dpo_without_pairs_is_a_usage_error() {
    let sb = Sandbox::new();
    let ckpt = trained_checkpoint(&sb);
    let ckpt = ckpt.to_str().unwrap();
    let missing = sb.run(&["train-dpo", "--checkpoint", ckpt, "--pairs", "nope.jsonl", "--out", "d"]);
    assert_eq!(code(&missing), 2);
    fs::write(sb.path("empty.jsonl"), "").unwrap();
    let empty = sb.run(&["train-dpo", "--checkpoint", ckpt, "--pairs", "empty.jsonl", "--out", "d"]);
    assert_eq!(code(&empty), 2);
}

#[test]
fn single_candidate_without_ground_truth_is_rejected() {
    let sb = Sandbox::new();
    let ckpt = trained_checkpoint(&sb);
    let out = sb.run(&[
        "make-pairs",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--candidates",
        "1",
        "--ranking",
        "modality-micro/norm/no-gt",
        "--out",
        "p",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn untrained_model_rarely_beats_ground_truth() {
    let sb = Sandbox::new();
    sb.config("c.json", &with(tiny_config(), |v| v["flow"]["steps"] = 0.into()));
    sb.ok(&["train-flow", "--config", "c.json", "--out", "f"]);
    let m = sb.ok(&[
        "make-pairs",
        "--config",
        "c.json",
        "--checkpoint",
        "f/model.ckpt",
        "--candidates",
        "1",
        "--n-prompts",
        "8",
        "--out",
        "p",
    ]);
    assert!(m.metrics["generated_winner_fraction"].as_f64().unwrap() < 0.2);
}

#[test]
fn oracle_eval_is_perfectly_synchronized() {
    let sb = Sandbox::new();
    sb.config("c.json", &tiny_config());
    let m = sb.ok(&["eval", "--oracle", "--config", "c.json", "--out", "e"]);
    assert_eq!(m.metrics["toy_desync_median"], 0.0);
    assert_eq!(m.metrics["event_count_accuracy"], 1.0);
    assert_eq!(m.metrics["n_prompts"], 3);
}

#[test]
fn ablation_sweep_reports_every_strategy() {
    let sb = Sandbox::new();
    sb.config("c.json", &tiny_config());
    sb.ok(&["ablate-rope", "--config", "c.json", "--out", "a"]);
    let mut reader = csv::Reader::from_path(sb.path("a/rope_overlaps.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4 * 5);
    let headers = reader.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    for r in &rows {
        let overlaps: usize = r[col("overlaps")].parse().unwrap();
        match &r[col("strategy")] {
            "interleave-offset" => assert_eq!(overlaps, 0),
            "vanilla" => assert!(overlaps >= 1),
            _ => {}
        }
    }
    assert!(sb.path("a/rope_summary.csv").exists());
    assert!(!sb.path("a/rope_training.csv").exists());
}

#[test]
fn failed_gradient_check_still_writes_its_report() {
    let sb = Sandbox::new();
    sb.config("c.json", &with(tiny_config(), |v| v["grad_check"]["tolerance"] = 1e-300.into()));
    let out = sb.run(&["grad-check", "--config", "c.json", "--out", "g"]);
    assert_eq!(code(&out), 1);
    let report: Value = serde_json::from_str(&fs::read_to_string(sb.path("g/grad_check.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], false);

    sb.config("ok.json", &tiny_config());
    let m = sb.ok(&["grad-check", "--config", "ok.json", "--out", "h"]);
    assert_eq!(m.metrics["passed"], true);
}
