//! Rectified flow: straight paths `x_t = (1−t)·x0 + t·x1` between data `x0`
//! (t = 0) and Gaussian noise `x1` (t = 1), the constant velocity target
//! `x1 − x0`, flow-matching losses, an Euler sampler integrating from t = 1
//! down to t = 0, and the training loop.

use std::io::Write;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, shape_err, Error, Result};
use crate::model::{ConditionInput, Model, ModelInput};
use crate::optim::{OptimizerConfig, Optimizer};
use crate::rope::GridSpec;
use crate::scalar::{Field, Real};
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

/// One point on a straight path together with its velocity target.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample<T> {
    pub x0: Tensor<T>,
    pub x1: Tensor<T>,
    pub t: T,
    pub xt: Tensor<T>,
    pub v_target: Tensor<T>,
}

impl<T: Field> FlowSample<T> {
    /// Path point from explicit endpoints; exact for exact scalars.
    pub fn from_endpoints(x0: Tensor<T>, x1: Tensor<T>, t: T) -> Result<Self> {
        if t < T::zero() || t > T::one() {
            return Err(contract(format!("t = {t:?} outside [0, 1]")));
        }
        if x0.shape() != x1.shape() {
            return Err(shape_err("flow sample", x0.shape(), x1.shape()));
        }
        let xt = x0.scale(&(T::one() - t.clone())).add(&x1.scale(&t))?;
        let v_target = x1.sub(&x0)?;
        Ok(Self {
            x0,
            x1,
            t,
            xt,
            v_target,
        })
    }
}

/// Standard-normal tensor drawn from `seed`.
pub fn seeded_noise<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Path point with noise drawn i.i.d. N(0, 1) from `noise_seed`.
pub fn make_sample<T: Real>(x0: &Tensor<T>, noise_seed: u64, t: T) -> Result<FlowSample<T>> {
    if !t.is_finite() {
        return Err(contract("t must be finite"));
    }
    let x1 = seeded_noise(x0.shape(), noise_seed);
    FlowSample::from_endpoints(x0.clone(), x1, t)
}

/// Mean squared error between two same-shape tensors.
pub fn fm_error<T: Field>(vhat: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if vhat.shape() != target.shape() {
        return Err(shape_err("fm_error", vhat.shape(), target.shape()));
    }
    if vhat.numel() == 0 {
        return Err(contract("fm_error of an empty tensor"));
    }
    let d = vhat.sub(target)?;
    let sq = d.mul(&d)?.sum();
    Ok(sq / T::from_count(vhat.numel()))
}

/// Flow-matching loss on the tape: mean over elements of `(vhat − v)²`.
pub fn fm_loss<'g, T: Real>(vhat: Var<'g, T>, sample: &FlowSample<T>) -> Result<Var<'g, T>> {
    if vhat.shape() != sample.v_target.shape() {
        return Err(shape_err("fm_loss", &vhat.shape(), sample.v_target.shape()));
    }
    let target = vhat.graph().constant(&sample.v_target);
    Ok(vhat.sub(target)?.square().mean())
}

/// Sum of the audio and video flow-matching losses.
pub fn joint_fm_loss<'g, T: Real>(
    vhat_a: Var<'g, T>,
    vhat_v: Var<'g, T>,
    sample_a: &FlowSample<T>,
    sample_v: &FlowSample<T>,
) -> Result<Var<'g, T>> {
    fm_loss(vhat_a, sample_a)?.add(fm_loss(vhat_v, sample_v)?)
}

/// Joint audio/video latent state.
#[derive(Clone, Debug, PartialEq)]
pub struct JointLatent<T> {
    pub audio: Tensor<T>,
    pub video: Tensor<T>,
}

impl<T: Real> JointLatent<T> {
    /// Standard-normal state for `grid`; video is drawn before audio.
    pub fn noise(grid: &GridSpec, video_channels: usize, audio_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let video = Tensor::randn(
            &[grid.video_frames, grid.height, grid.width, video_channels],
            1.0,
            &mut rng,
        );
        let audio = Tensor::randn(&[grid.audio_steps, grid.freq_bins, audio_channels], 1.0, &mut rng);
        Self { audio, video }
    }
}

/// Anything that predicts a joint velocity.
pub trait VelocityField<T> {
    fn velocity(&self, state: &JointLatent<T>, t: &T, class_id: usize) -> Result<JointLatent<T>>;
}

impl<T: Real> VelocityField<T> for Model<T> {
    fn velocity(&self, state: &JointLatent<T>, t: &T, class_id: usize) -> Result<JointLatent<T>> {
        let (vs, as_) = (state.video.shape(), state.audio.shape());
        if vs.len() != 4 || as_.len() != 3 {
            return Err(contract("joint state must be [T_v,H,W,C] and [T_a,M,C]"));
        }
        let grid = GridSpec::new(vs[0], vs[1], vs[2], as_[0], as_[1])?;
        let cond = ConditionInput { class_id, t: *t };
        let (v, a) = self.predict(&grid, Some(&state.video), Some(&state.audio), &cond)?;
        Ok(JointLatent {
            audio: a.expect("audio requested"),
            video: v.expect("video requested"),
        })
    }
}

/// Field that ignores its input and returns a fixed velocity.
#[derive(Clone, Debug)]
pub struct ConstantField<T>(pub JointLatent<T>);

impl<T: Field> VelocityField<T> for ConstantField<T> {
    fn velocity(&self, _: &JointLatent<T>, _: &T, _: usize) -> Result<JointLatent<T>> {
        Ok(self.0.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_steps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { n_steps: 16 }
    }
}

impl SamplerConfig {
    /// Uniform grid `1 = t_0 > t_1 > … > t_n = 0`.
    pub fn schedule<T: Field>(&self) -> Result<Vec<T>> {
        if self.n_steps == 0 {
            return Err(contract("sampler needs at least one step"));
        }
        let n = T::from_count(self.n_steps);
        Ok((0..=self.n_steps)
            .map(|i| T::from_count(self.n_steps - i) / n.clone())
            .collect())
    }
}

/// Integrates `dx/dt = v(x, t)` from `init` at t = 1 down to t = 0 with
/// `x ← x − Δt·v(x, t)`.
pub fn euler_sample<T: Field, F: VelocityField<T> + ?Sized>(
    field: &F,
    class_id: usize,
    init: JointLatent<T>,
    cfg: &SamplerConfig,
) -> Result<JointLatent<T>> {
    let ts = cfg.schedule::<T>()?;
    let mut x = init;
    for w in ts.windows(2) {
        let dt = w[0].clone() - w[1].clone();
        let v = field.velocity(&x, &w[0], class_id)?;
        x = JointLatent {
            audio: x.audio.sub(&v.audio.scale(&dt))?,
            video: x.video.sub(&v.video.scale(&dt))?,
        };
    }
    Ok(x)
}

/// [`euler_sample`] from seeded standard-normal noise.
pub fn euler_sample_seeded<T: Real, F: VelocityField<T> + ?Sized>(
    field: &F,
    class_id: usize,
    grid: &GridSpec,
    channels: (usize, usize),
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<JointLatent<T>> {
    let init = JointLatent::noise(grid, channels.0, channels.1, seed);
    euler_sample(field, class_id, init, cfg)
}

/// One training example: clean latents and their condition.
#[derive(Clone, Debug)]
pub struct TrainExample<T> {
    pub grid: GridSpec,
    pub video: Tensor<T>,
    pub audio: Tensor<T>,
    pub class_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainFlowConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Stage-1 mode: audio loss only, video latents never embedded.
    pub audio_only: bool,
    /// Seed of the timestep and noise stream.
    pub seed: u64,
}

impl Default for TrainFlowConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            optimizer: OptimizerConfig::default(),
            audio_only: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowLogRecord {
    pub step: usize,
    pub loss: f64,
    pub loss_audio: f64,
    pub loss_video: Option<f64>,
    pub lr: f64,
}

/// Writes records as JSON lines.
pub fn write_jsonl<R: Serialize, W: Write>(records: &[R], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Builds the batch-mean flow-matching loss of one step. Returns the loss
/// node and the mean per-modality losses.
fn flow_step_loss<'g, T: Real>(
    g: &'g Graph<T>,
    model: &Model<T>,
    batch: &[TrainExample<T>],
    audio_only: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Var<'g, T>, f64, Option<f64>)> {
    let mut total: Option<Var<'g, T>> = None;
    let (mut la_sum, mut lv_sum) = (0.0, 0.0);
    for ex in batch {
        let t = T::lit(rng.gen::<f64>());
        let sa = make_sample(&ex.audio, rng.gen(), t)?;
        let sv = if audio_only {
            None
        } else {
            Some(make_sample(&ex.video, rng.gen(), t)?)
        };
        let input = ModelInput {
            grid: ex.grid,
            video: sv.as_ref().map(|s| g.constant(&s.xt)),
            audio: Some(g.constant(&sa.xt)),
        };
        let pred = model.forward(g, &input, &ConditionInput { class_id: ex.class_id, t })?;
        let la = fm_loss(pred.audio.expect("audio requested"), &sa)?;
        la_sum += la.item().as_f64();
        let mut l = la;
        if let (Some(sv), Some(pv)) = (&sv, pred.video) {
            let lv = fm_loss(pv, sv)?;
            lv_sum += lv.item().as_f64();
            l = l.add(lv)?;
        }
        total = Some(match total {
            Some(acc) => acc.add(l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| contract("empty batch"))?;
    let n = batch.len() as f64;
    Ok((
        total.scale(T::lit(1.0 / n)),
        la_sum / n,
        (!audio_only).then_some(lv_sum / n),
    ))
}

/// Gradient descent on the (joint or audio-only) flow-matching loss.
///
/// `data(i)` yields the `i`-th training example; step `s` consumes examples
/// `s·batch_size .. (s+1)·batch_size`. Only parameters flagged trainable are
/// updated. A non-finite loss aborts with [`Error::Numerical`].
pub fn train_flow<T, D>(model: &mut Model<T>, mut data: D, cfg: &TrainFlowConfig) -> Result<Vec<FlowLogRecord>>
where
    T: Real,
    D: FnMut(u64) -> Result<TrainExample<T>>,
{
    if cfg.batch_size == 0 {
        return Err(contract("batch_size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer.clone());
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let start = (step * cfg.batch_size) as u64;
        let batch = (start..start + cfg.batch_size as u64)
            .map(&mut data)
            .collect::<Result<Vec<_>>>()?;
        let g = Graph::new();
        let (loss, la, lv) = flow_step_loss(&g, model, &batch, cfg.audio_only, &mut rng)?;
        let value = loss.item().as_f64();
        if !value.is_finite() {
            return Err(Error::Numerical(format!("flow loss {value} at step {step}")));
        }
        let grads = g.backward(loss)?;
        drop(g);
        grads.accumulate(model.params_mut())?;
        opt.step(model.params_mut());
        if !model.params().all_finite() {
            return Err(Error::Numerical(format!("non-finite parameters after step {step}")));
        }
        if step % 100 == 0 {
            debug!("flow step {step}: loss {value:.5}");
        }
        log.push(FlowLogRecord {
            step,
            loss: value,
            loss_audio: la,
            loss_video: lv,
            lr: cfg.optimizer.lr,
        });
    }
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        info!("flow training: loss {:.4} -> {:.4} over {} steps", first.loss, last.loss, log.len());
    }
    Ok(log)
}

/// Mean loss over the first and last `window` records.
pub fn loss_ends(log: &[FlowLogRecord], window: usize) -> Option<(f64, f64)> {
    let w = window.min(log.len());
    if w == 0 {
        return None;
    }
    let mean = |r: &[FlowLogRecord]| r.iter().map(|x| x.loss).sum::<f64>() / r.len() as f64;
    Some((mean(&log[..w]), mean(&log[log.len() - w..])))
}

/// Mean joint flow-matching error of `model` on fixed examples, with the
/// `(t, noise)` of example `i` drawn from a stream seeded by `seed`. Two
/// models evaluated with the same seed see identical noisy inputs.
pub fn eval_flow_loss<T: Real>(model: &Model<T>, examples: &[TrainExample<T>], seed: u64) -> Result<f64> {
    if examples.is_empty() {
        return Err(contract("empty evaluation set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for ex in examples {
        let t = T::lit(rng.gen::<f64>());
        let sa = make_sample(&ex.audio, rng.gen(), t)?;
        let sv = make_sample(&ex.video, rng.gen(), t)?;
        let (pv, pa) = model.predict(&ex.grid, Some(&sv.xt), Some(&sa.xt), &ConditionInput { class_id: ex.class_id, t })?;
        let pa = pa.expect("audio requested");
        let pv = pv.expect("video requested");
        total += fm_error(&pa, &sa.v_target)?.as_f64() + fm_error(&pv, &sv.v_target)?.as_f64();
    }
    Ok(total / examples.len() as f64)
}
