//! Audio-video DPO over rectified flows.
//!
//! For a pair (winner w, loser l) and a shared path point (t, noise), each
//! model's flow-matching errors give per-modality differences
//! `D^u = err(w, u) − err(l, u)`. The loss is
//! `−log σ(−β_v·(D^v_pol − D^v_ref) − β_a·(D^a_pol − D^a_ref))`
//! plus `fm_reg_weight` times the policy's joint flow-matching loss on the
//! winner.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, shape_err, Error, Result};
use crate::flow::{fm_error, fm_loss, FlowSample, JointLatent};
use crate::model::{ConditionInput, Model, ModelInput, ModelView, Stage};
use crate::optim::{Algorithm, OptimizerConfig, Optimizer};
use crate::rope::GridSpec;
use crate::scalar::Real;
use crate::tape::{Graph, Var};
use crate::tensor::log_sigmoid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpoConfig {
    pub beta_a: f64,
    pub beta_v: f64,
    pub fm_reg_weight: f64,
    pub lr: f64,
    pub algorithm: Algorithm,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    pub steps: usize,
    pub batch_size: usize,
    /// Seed of the pair order and per-step (t, noise) draws.
    pub seed: u64,
    /// Seed of the fixed (t, noise) used for implicit accuracy.
    pub eval_seed: u64,
    /// Evaluate implicit accuracy every this many steps (0 = never).
    pub eval_every: usize,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta_a: 1000.0,
            beta_v: 3000.0,
            fm_reg_weight: 1.0,
            lr: 1e-5,
            algorithm: Algorithm::Sgd,
            momentum: 0.0,
            clip_norm: None,
            steps: 200,
            batch_size: 4,
            seed: 0,
            eval_seed: 0x00ac_c000,
            eval_every: 1,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_a > 0.0 && self.beta_v > 0.0) {
            return Err(contract("betas must be positive"));
        }
        if !(self.fm_reg_weight >= 0.0) || !(self.lr >= 0.0) {
            return Err(contract("fm_reg_weight and lr must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(contract("batch_size must be positive"));
        }
        Ok(())
    }

    fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            algorithm: self.algorithm,
            lr: self.lr,
            momentum: self.momentum,
            clip_norm: self.clip_norm,
            ..OptimizerConfig::default()
        }
    }
}

/// Winner and loser latents generated for one prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct PreferencePair<T> {
    pub prompt_id: u64,
    pub class_id: usize,
    pub grid: GridSpec,
    pub winner: JointLatent<T>,
    pub loser: JointLatent<T>,
}

impl<T: Real> PreferencePair<T> {
    fn check(&self) -> Result<()> {
        for (w, l) in [
            (&self.winner.audio, &self.loser.audio),
            (&self.winner.video, &self.loser.video),
        ] {
            if w.shape() != l.shape() {
                return Err(shape_err("preference pair", w.shape(), l.shape()));
            }
        }
        Ok(())
    }

    fn channels(&self) -> (usize, usize) {
        (self.winner.video.shape()[3], self.winner.audio.shape()[2])
    }

    /// Flow samples `[audio, video]` of winner and loser at a shared `(t, noise)`.
    fn samples(&self, t: T, noise_seed: u64) -> Result<[[FlowSample<T>; 2]; 2]> {
        self.check()?;
        let (cv, ca) = self.channels();
        let noise = JointLatent::noise(&self.grid, cv, ca, noise_seed);
        let make = |x: &JointLatent<T>| -> Result<[FlowSample<T>; 2]> {
            Ok([
                FlowSample::from_endpoints(x.audio.clone(), noise.audio.clone(), t)?,
                FlowSample::from_endpoints(x.video.clone(), noise.video.clone(), t)?,
            ])
        };
        Ok([make(&self.winner)?, make(&self.loser)?])
    }
}

/// Loss node plus the scalar diagnostics of one pair.
#[derive(Clone, Copy, Debug)]
pub struct DpoTerms<'g, T> {
    pub loss: Var<'g, T>,
    /// `[D^a, D^v]` of the policy.
    pub diff_policy: [f64; 2],
    /// `[D^a, D^v]` of the reference.
    pub diff_ref: [f64; 2],
    /// Argument of the log-sigmoid.
    pub argument: f64,
}

/// `−log σ(x)`, the preference term as a function of its argument.
pub fn preference_term<T: Real>(argument: T) -> T {
    -log_sigmoid(argument)
}

/// Reference-model errors `[[w_a, w_v], [l_a, l_v]]` without a tape.
fn value_errors<T: Real>(view: &ModelView<'_, T>, pair: &PreferencePair<T>, t: T, noise_seed: u64) -> Result<[[T; 2]; 2]> {
    let samples = pair.samples(t, noise_seed)?;
    let mut out = [[T::zero(); 2]; 2];
    for (k, s) in samples.iter().enumerate() {
        let cond = ConditionInput {
            class_id: pair.class_id,
            t,
        };
        let (v, a) = view.predict(&pair.grid, Some(&s[1].xt), Some(&s[0].xt), &cond)?;
        out[k] = [
            fm_error(&a.expect("audio requested"), &s[0].v_target)?,
            fm_error(&v.expect("video requested"), &s[1].v_target)?,
        ];
    }
    Ok(out)
}

/// Reference differences `[D^a, D^v]` (winner minus loser error) of one pair.
pub fn reference_diffs<T: Real>(
    reference: &ModelView<'_, T>,
    pair: &PreferencePair<T>,
    t: T,
    noise_seed: u64,
) -> Result<[T; 2]> {
    let r = value_errors(reference, pair, t, noise_seed)?;
    Ok([r[0][0] - r[1][0], r[0][1] - r[1][1]])
}

/// AV-DPO loss of one pair at path point `(t, noise_seed)`; gradients flow
/// into the policy only.
pub fn dpo_loss<'g, T: Real>(
    g: &'g Graph<T>,
    policy: &ModelView<'_, T>,
    reference: &ModelView<'_, T>,
    pair: &PreferencePair<T>,
    t: T,
    noise_seed: u64,
    cfg: &DpoConfig,
) -> Result<DpoTerms<'g, T>> {
    let dr = reference_diffs(reference, pair, t, noise_seed)?;
    dpo_loss_against(g, policy, dr, pair, t, noise_seed, cfg)
}

/// [`dpo_loss`] with the reference differences precomputed by
/// [`reference_diffs`] at the same `(t, noise_seed)`.
pub fn dpo_loss_against<'g, T: Real>(
    g: &'g Graph<T>,
    policy: &ModelView<'_, T>,
    dr: [T; 2],
    pair: &PreferencePair<T>,
    t: T,
    noise_seed: u64,
    cfg: &DpoConfig,
) -> Result<DpoTerms<'g, T>> {
    let samples = pair.samples(t, noise_seed)?;
    let cond = ConditionInput {
        class_id: pair.class_id,
        t,
    };
    let mut errs = Vec::with_capacity(2);
    for s in &samples {
        let input = ModelInput {
            grid: pair.grid,
            video: Some(g.constant(&s[1].xt)),
            audio: Some(g.constant(&s[0].xt)),
        };
        let p = policy.forward(g, &input, &cond)?;
        errs.push([
            fm_loss(p.audio.expect("audio requested"), &s[0])?,
            fm_loss(p.video.expect("video requested"), &s[1])?,
        ]);
    }
    let dp = [errs[0][0].sub(errs[1][0])?, errs[0][1].sub(errs[1][1])?];
    let arg = dp[1]
        .add_scalar(-dr[1])
        .scale(T::lit(-cfg.beta_v))
        .add(dp[0].add_scalar(-dr[0]).scale(T::lit(-cfg.beta_a)))?;
    let mut loss = arg.log_sigmoid().neg();
    if cfg.fm_reg_weight != 0.0 {
        let reg = errs[0][0].add(errs[0][1])?.scale(T::lit(cfg.fm_reg_weight));
        loss = loss.add(reg)?;
    }
    Ok(DpoTerms {
        loss,
        diff_policy: [dp[0].item().as_f64(), dp[1].item().as_f64()],
        diff_ref: [dr[0].as_f64(), dr[1].as_f64()],
        argument: arg.item().as_f64(),
    })
}

/// Fixed per-pair `(t, noise_seed)` draws for deterministic evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSeeds {
    pub base: u64,
}

impl EvalSeeds {
    pub fn draw<T: Real>(&self, pair_index: usize) -> (T, u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.base ^ (pair_index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        (T::lit(rng.gen::<f64>()), rng.gen())
    }
}

/// Per-pair reference differences, computed once for a frozen reference.
struct AccuracyProbe<T> {
    seeds: EvalSeeds,
    ref_diffs: Vec<[T; 2]>,
}

impl<T: Real> AccuracyProbe<T> {
    fn new(reference: &ModelView<'_, T>, pairs: &[PreferencePair<T>], seeds: EvalSeeds) -> Result<Self> {
        let ref_diffs = pairs
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let (t, s) = seeds.draw::<T>(i);
                let e = value_errors(reference, p, t, s)?;
                Ok([e[0][0] - e[1][0], e[0][1] - e[1][1]])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { seeds, ref_diffs })
    }

    fn evaluate(&self, policy: &ModelView<'_, T>, pairs: &[PreferencePair<T>]) -> Result<(f64, f64)> {
        let (mut hit_a, mut hit_v) = (0usize, 0usize);
        for (i, p) in pairs.iter().enumerate() {
            let (t, s) = self.seeds.draw::<T>(i);
            let e = value_errors(policy, p, t, s)?;
            hit_a += usize::from(e[0][0] - e[1][0] < self.ref_diffs[i][0]);
            hit_v += usize::from(e[0][1] - e[1][1] < self.ref_diffs[i][1]);
        }
        let n = pairs.len() as f64;
        Ok((hit_a as f64 / n, hit_v as f64 / n))
    }
}

/// Fraction of pairs on which the policy's winner-minus-loser error is
/// strictly below the reference's, per modality: `(acc_a, acc_v)`.
pub fn implicit_accuracy<T: Real>(
    policy: &ModelView<'_, T>,
    reference: &ModelView<'_, T>,
    pairs: &[PreferencePair<T>],
    seeds: EvalSeeds,
) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(contract("implicit accuracy needs at least one pair"));
    }
    AccuracyProbe::new(reference, pairs, seeds)?.evaluate(policy, pairs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpoLogRecord {
    pub step: usize,
    pub loss: f64,
    pub acc_a: Option<f64>,
    pub acc_v: Option<f64>,
    pub best_acc_a: f64,
    pub best_acc_v: f64,
    pub lr: f64,
}

/// Optimizes the mean DPO loss over mini-batches drawn from a reshuffled
/// pair order; `reference` stays frozen. The policy is switched to the DPO
/// stage's trainable set.
pub fn train_dpo<T: Real>(
    policy: &mut Model<T>,
    reference: &Model<T>,
    pairs: &[PreferencePair<T>],
    cfg: &DpoConfig,
) -> Result<Vec<DpoLogRecord>> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(contract("no preference pairs"));
    }
    policy.set_stage(Stage::AvDpo);
    let probe = AccuracyProbe::new(&reference.view(), pairs, EvalSeeds { base: cfg.eval_seed })?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer());
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.steps);
    let (mut best_a, mut best_v) = (0.0f64, 0.0f64);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(pairs.len()) {
            if order.is_empty() {
                order = (0..pairs.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(order.pop().expect("refilled"));
        }
        let g = Graph::new();
        let mut total: Option<Var<'_, T>> = None;
        for &i in &batch {
            let t = T::lit(rng.gen::<f64>());
            let terms = dpo_loss(&g, &policy.view(), &reference.view(), &pairs[i], t, rng.gen(), cfg)?;
            total = Some(match total {
                Some(acc) => acc.add(terms.loss)?,
                None => terms.loss,
            });
        }
        let loss = total.expect("non-empty batch").scale(T::lit(1.0 / batch.len() as f64));
        let value = loss.item().as_f64();
        if !value.is_finite() {
            return Err(Error::Numerical(format!("dpo loss {value} at step {step}")));
        }
        let grads = g.backward(loss)?;
        drop(g);
        grads.accumulate(policy.params_mut())?;
        opt.step(policy.params_mut());
        let (acc_a, acc_v) = if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            let (a, v) = probe.evaluate(&policy.view(), pairs)?;
            best_a = best_a.max(a);
            best_v = best_v.max(v);
            (Some(a), Some(v))
        } else {
            (None, None)
        };
        debug!("dpo step {step}: loss {value:.5} acc {acc_a:?}/{acc_v:?}");
        log.push(DpoLogRecord {
            step,
            loss: value,
            acc_a,
            acc_v,
            best_acc_a: best_a,
            best_acc_v: best_v,
            lr: cfg.lr,
        });
    }
    if let Some(last) = log.last() {
        info!(
            "dpo training: final loss {:.4}, best accuracy audio {:.3} video {:.3}",
            last.loss, last.best_acc_a, last.best_acc_v
        );
    }
    Ok(log)
}
