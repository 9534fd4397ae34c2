//! In-memory building blocks of the commands: training, sampling, pair
//! mining, evaluation and the position-id ablation. Nothing here touches
//! the filesystem.

use avflow_core::flow::{
    eval_flow_loss, euler_sample, euler_sample_seeded, loss_ends, train_flow, ConstantField, FlowLogRecord,
    JointLatent, TrainExample, VelocityField,
};
use avflow_core::gradcheck::grad_check;
use avflow_core::model::{ConditionInput, Model, ModelInput, Stage};
use avflow_core::preference::{
    dpo_loss_against, reference_diffs, select_pairs, validate_pairs, CandidateInfo, PairSelection, PreferencePair, RewardVector,
};
use avflow_core::rope::{audio_position_ids, count_overlaps, video_position_ids, AudioIdStrategy, GridSpec};
use avflow_core::tensor::Tensor;
use avflow_core::toyworld::{DatasetRecord, ToySample, ToyWorld};
use avflow_core::{flow, Model64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{usage, CliError, Result};

/// Independent random streams derived from the run seed.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    Train = 1,
    HeldOut = 2,
    Pairs = 3,
    Eval = 4,
    Sweep = 6,
    GradCheck = 7,
}

pub fn stream_seed(seed: u64, stream: Stream) -> u64 {
    ChaCha8Rng::seed_from_u64(seed ^ (stream as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)).gen()
}

fn item_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(a.wrapping_mul(0x1_0000_0001).wrapping_add(b));
    rng.gen()
}

const HELD_OUT: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowMetrics {
    /// Mean loss over the first and last 50 logged steps.
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    /// Joint loss on a fixed held-out set with fixed `(t, noise)`.
    pub eval_loss_initial: f64,
    pub eval_loss_final: f64,
}

fn held_out(cfg: &RunConfig) -> Result<Vec<TrainExample<f64>>> {
    let world = cfg.world();
    let seed = stream_seed(cfg.seed, Stream::HeldOut);
    Ok((0..HELD_OUT as u64)
        .map(|i| world.example(seed, i))
        .collect::<avflow_core::Result<_>>()?)
}

/// Runs flow training for `cfg.stage` on a fresh or given model.
pub fn train_flow_stage(
    cfg: &RunConfig,
    init: Option<Model64>,
) -> Result<(Model64, Vec<FlowLogRecord>, FlowMetrics)> {
    let mut model = match init {
        Some(m) => {
            if m.config() != &cfg.model {
                return Err(CliError::Config("checkpoint model config differs from the run config".into()));
            }
            m
        }
        None => Model::new(cfg.model.clone(), cfg.seed)?,
    };
    let mut flow_cfg = cfg.flow.clone();
    match cfg.stage {
        Stage::AudioPretrain => flow_cfg.audio_only = true,
        Stage::AvSft => {}
        Stage::AvDpo => return Err(usage("stage av_dpo is trained with train-dpo")),
    }
    model.set_stage(cfg.stage);
    let eval_set = held_out(cfg)?;
    let eval_seed = stream_seed(cfg.seed, Stream::HeldOut);
    let eval_loss_initial = eval_flow_loss(&model, &eval_set, eval_seed)?;
    let world = cfg.world();
    let data_seed = stream_seed(cfg.seed, Stream::Train);
    let log = train_flow(&mut model, |i| world.example(data_seed, i), &flow_cfg)?;
    let eval_loss_final = eval_flow_loss(&model, &eval_set, eval_seed)?;
    let ends = loss_ends(&log, 50);
    let metrics = FlowMetrics {
        first_loss: ends.map(|e| e.0),
        last_loss: ends.map(|e| e.1),
        eval_loss_initial,
        eval_loss_final,
    };
    Ok((model, log, metrics))
}

/// Prompt `index` of a stream and its reference sample.
pub fn prompt(world: &ToyWorld, stream: u64, index: u64) -> Result<(DatasetRecord, ToySample<f64>)> {
    let rec = world.record(stream, index);
    let sample = world.sample_for(&rec)?;
    Ok((rec, sample))
}

/// Generates one candidate with the sampler from prompt-specific noise.
pub fn generate<F: VelocityField<f64> + ?Sized>(
    field: &F,
    cfg: &RunConfig,
    class_id: usize,
    noise_seed: u64,
) -> Result<JointLatent<f64>> {
    let ch = (cfg.model.video_channels, cfg.model.audio_channels);
    Ok(euler_sample_seeded(field, class_id, &cfg.grid, ch, &cfg.sampler, noise_seed)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub n_prompts: usize,
    /// Mean squared error to the clean templates.
    pub audio_mse: f64,
    pub video_mse: f64,
    pub toy_desync_median: f64,
    pub toy_desync_mean: f64,
    /// Fraction of prompts whose detected video event count is exact.
    pub event_count_accuracy: f64,
    /// Fraction of prompts with no detections in some modality.
    pub degenerate_fraction: f64,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Samples every evaluation prompt, from the model or (with `model = None`)
/// from the oracle field `noise − clean`, which integrates exactly to the
/// clean template.
pub fn evaluate(model: Option<&Model64>, cfg: &RunConfig) -> Result<EvalMetrics> {
    let world = cfg.world();
    let stream = stream_seed(cfg.seed, Stream::Eval);
    let n = cfg.eval.n_prompts;
    let (mut mse_a, mut mse_v, mut hits, mut degenerate) = (0.0, 0.0, 0usize, 0usize);
    let mut desync = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let (rec, sample) = prompt(&world, stream, i)?;
        let class_id = sample.script.class_id;
        let noise_seed = item_seed(stream, i, 0);
        let out = match model {
            Some(m) => generate(m, cfg, class_id, noise_seed)?,
            None => {
                let ch = (cfg.model.video_channels, cfg.model.audio_channels);
                let noise = JointLatent::<f64>::noise(&cfg.grid, ch.0, ch.1, noise_seed);
                let oracle = ConstantField(JointLatent {
                    audio: noise.audio.sub(&sample.clean_audio)?,
                    video: noise.video.sub(&sample.clean_video)?,
                });
                euler_sample(&oracle, class_id, noise, &cfg.sampler)?
            }
        };
        mse_a += flow::fm_error(&out.audio, &sample.clean_audio)?;
        mse_v += flow::fm_error(&out.video, &sample.clean_video)?;
        let sync = world.toy_desync(&out.video, &out.audio)?;
        hits += usize::from(sync.video_events == rec.n_events);
        degenerate += usize::from(sync.degenerate);
        desync.push(sync.desync_steps);
    }
    let nf = n as f64;
    Ok(EvalMetrics {
        n_prompts: n,
        audio_mse: mse_a / nf,
        video_mse: mse_v / nf,
        toy_desync_median: median(&desync),
        toy_desync_mean: desync.iter().sum::<f64>() / nf,
        event_count_accuracy: hits as f64 / nf,
        degenerate_fraction: degenerate as f64 / nf,
    })
}

/// One scored candidate of the preference pool.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub info: CandidateInfo,
    pub class_id: usize,
    pub latent: JointLatent<f64>,
}

#[derive(Clone, Debug)]
pub struct MinedPairs {
    pub pool: Vec<Candidate>,
    pub selections: Vec<PairSelection>,
}

impl MinedPairs {
    /// Fraction of selected winners that were generated rather than ground truth.
    pub fn generated_winner_fraction(&self) -> f64 {
        if self.selections.is_empty() {
            return 0.0;
        }
        let generated = self
            .selections
            .iter()
            .filter(|s| !self.pool[s.winner].info.is_ground_truth)
            .count();
        generated as f64 / self.selections.len() as f64
    }

    pub fn preference_pairs(&self, grid: GridSpec) -> Vec<PreferencePair<f64>> {
        self.selections
            .iter()
            .map(|s| PreferencePair {
                prompt_id: s.prompt_id,
                class_id: self.pool[s.winner].class_id,
                grid,
                winner: self.pool[s.winner].latent.clone(),
                loser: self.pool[s.loser].latent.clone(),
            })
            .collect()
    }

    /// The same candidates ranked under a different strategy.
    pub fn reselect(&self, ranking: &avflow_core::preference::RankStrategy) -> Result<MinedPairs> {
        let infos: Vec<CandidateInfo> = self.pool.iter().map(|c| c.info.clone()).collect();
        let selections = select_pairs(&infos, ranking)?;
        validate_pairs(&infos, ranking, &selections)?;
        Ok(MinedPairs {
            pool: self.pool.clone(),
            selections,
        })
    }
}

/// Samples `cfg.pairs.candidates` candidates per prompt, adds the ground
/// truth, scores everything with the toy rewards and selects pairs under
/// `cfg.ranking`. Ground truth stays in the pool either way; strategies
/// without it simply skip those entries.
pub fn mine_pairs(model: &Model64, cfg: &RunConfig) -> Result<MinedPairs> {
    if !cfg.ranking.with_gt && cfg.pairs.candidates < 2 {
        return Err(usage("ranking without ground truth needs at least 2 candidates per prompt"));
    }
    let world = cfg.world();
    let stream = stream_seed(cfg.seed, Stream::Pairs);
    let mut pool = Vec::new();
    for p in 0..cfg.pairs.n_prompts as u64 {
        let (_, sample) = prompt(&world, stream, p)?;
        let class_id = sample.script.class_id;
        for k in 0..cfg.pairs.candidates as u64 {
            let latent = generate(model, cfg, class_id, item_seed(stream, p, k + 1))?;
            let rewards = world.toy_rewards(&latent.audio, &latent.video, &sample)?;
            pool.push(Candidate {
                info: CandidateInfo {
                    prompt_id: p,
                    is_ground_truth: false,
                    rewards,
                },
                class_id,
                latent,
            });
        }
        let rewards: RewardVector = world.toy_rewards(&sample.audio, &sample.video, &sample)?;
        pool.push(Candidate {
            info: CandidateInfo {
                prompt_id: p,
                is_ground_truth: true,
                rewards,
            },
            class_id,
            latent: JointLatent {
                audio: sample.audio.clone(),
                video: sample.video.clone(),
            },
        });
    }
    let infos: Vec<CandidateInfo> = pool.iter().map(|c| c.info.clone()).collect();
    let selections = select_pairs(&infos, &cfg.ranking)?;
    validate_pairs(&infos, &cfg.ranking, &selections)?;
    Ok(MinedPairs { pool, selections })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapRow {
    pub strategy: String,
    pub grid_index: usize,
    pub video_frames: usize,
    pub height: usize,
    pub width: usize,
    pub audio_steps: usize,
    pub freq_bins: usize,
    pub overlaps: usize,
}

/// Position-id collisions of every strategy over a seeded random grid sweep.
pub fn overlap_sweep(cfg: &RunConfig) -> Result<Vec<OverlapRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, Stream::Sweep));
    let m = cfg.ablation.max_extent.max(1);
    let mut rows = Vec::new();
    for gi in 0..cfg.ablation.grids {
        let tv = rng.gen_range(1..=m);
        let grid = GridSpec::new(
            tv,
            rng.gen_range(1..=m),
            rng.gen_range(1..=m),
            rng.gen_range(1..=4 * m),
            rng.gen_range(1..=m),
        )?;
        let video = video_position_ids(&grid);
        for s in AudioIdStrategy::ALL {
            rows.push(OverlapRow {
                strategy: s.name().into(),
                grid_index: gi,
                video_frames: grid.video_frames,
                height: grid.height,
                width: grid.width,
                audio_steps: grid.audio_steps,
                freq_bins: grid.freq_bins,
                overlaps: count_overlaps(&video, &audio_position_ids(s, &grid)),
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendRow {
    pub strategy: String,
    pub seed: u64,
    pub last_loss: f64,
    pub eval_loss: f64,
    pub toy_desync_median: f64,
    pub degenerate_fraction: f64,
    pub event_count_accuracy: f64,
}

/// Trains one model under `strategy` and evaluates its samples.
pub fn trend_run(cfg: &RunConfig, strategy: AudioIdStrategy, seed: u64) -> Result<TrendRow> {
    let mut run = cfg.clone();
    run.rope_strategy = strategy;
    run.seed = seed;
    run.stage = Stage::AvSft;
    let run = run.resolved()?;
    let (model, _, fm) = train_flow_stage(&run, None)?;
    let em = evaluate(Some(&model), &run)?;
    Ok(TrendRow {
        strategy: strategy.name().into(),
        seed,
        last_loss: fm.last_loss.unwrap_or(f64::NAN),
        eval_loss: fm.eval_loss_final,
        toy_desync_median: em.toy_desync_median,
        degenerate_fraction: em.degenerate_fraction,
        event_count_accuracy: em.event_count_accuracy,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub seed: u64,
    pub joint_fm_max_rel_error: f64,
    pub dpo_max_rel_error: f64,
}

fn randomized(cfg: &RunConfig, seed: u64) -> Result<Model64> {
    let mut model = Model::new(cfg.model.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(item_seed(stream_seed(cfg.seed, Stream::GradCheck), seed, 0));
    for p in model.params_mut().iter_mut() {
        let fresh = Tensor::randn(p.tensor.shape(), cfg.grad_check.param_std, &mut rng);
        p.tensor.data_mut().copy_from_slice(fresh.data());
    }
    Ok(model)
}

/// Central-difference checks of the joint flow loss and the DPO loss on
/// randomized models over the tiny grid `(2, 1, 2, 3, 2)`.
pub fn gradient_checks(cfg: &RunConfig) -> Result<Vec<GradCheckRow>> {
    let grid = GridSpec::new(2, 1, 2, 3, 2)?;
    let (cv, ca) = (cfg.model.video_channels, cfg.model.audio_channels);
    let h = cfg.grad_check.step;
    let dpo_cfg = avflow_core::preference::DpoConfig {
        beta_a: cfg.grad_check.dpo_beta,
        beta_v: cfg.grad_check.dpo_beta,
        ..cfg.dpo.clone()
    };
    let mut rows = Vec::new();
    for seed in 0..cfg.grad_check.seeds as u64 {
        let policy = randomized(cfg, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = JointLatent::<f64>::noise(&grid, cv, ca, rng.gen());
        let t: f64 = rng.gen_range(0.05..0.95);
        let class_id = rng.gen_range(0..cfg.model.n_classes);
        let sa = flow::make_sample(&data.audio, rng.gen(), t)?;
        let sv = flow::make_sample(&data.video, rng.gen(), t)?;
        let joint = grad_check(
            policy.params(),
            |g, store| {
                let input = ModelInput {
                    grid,
                    video: Some(g.constant(&sv.xt)),
                    audio: Some(g.constant(&sa.xt)),
                };
                let p = policy.view_with(store)?.forward(g, &input, &ConditionInput { class_id, t })?;
                flow::joint_fm_loss(p.audio.expect("audio"), p.video.expect("video"), &sa, &sv)
            },
            h,
        )?;
        // The reference is a nearby model so that the log-sigmoid works in
        // its responsive range.
        let mut reference = Model::from_parts(policy.config().clone(), policy.params().clone(), policy.lora())?;
        for p in reference.params_mut().iter_mut() {
            for x in p.tensor.data_mut() {
                *x += 1e-3 * rng.gen_range(-1.0..1.0);
            }
        }
        let pair = PreferencePair {
            prompt_id: seed,
            class_id,
            grid,
            winner: JointLatent::noise(&grid, cv, ca, rng.gen()),
            loser: JointLatent::noise(&grid, cv, ca, rng.gen()),
        };
        let noise_seed: u64 = rng.gen();
        let dr = reference_diffs(&reference.view(), &pair, t, noise_seed)?;
        let dpo = grad_check(
            policy.params(),
            |g, store| {
                let view = policy.view_with(store)?;
                Ok(dpo_loss_against(g, &view, dr, &pair, t, noise_seed, &dpo_cfg)?.loss)
            },
            h,
        )?;
        rows.push(GradCheckRow {
            seed,
            joint_fm_max_rel_error: joint.max_rel_error,
            dpo_max_rel_error: dpo.max_rel_error,
        });
    }
    Ok(rows)
}
