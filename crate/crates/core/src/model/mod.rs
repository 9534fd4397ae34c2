//! Joint audio-video diffusion transformer.
//!
//! Both modalities are embedded into one token sequence (video first, then
//! audio), processed by blocks of shared self-attention followed by a
//! feed-forward sublayer that routes each token to the expert of its
//! modality, and projected back to per-modality velocity predictions.

mod config;
mod lora;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{count_params, LoraPlacement, LoraSpec, ModelConfig, ParamCount, Variant};

use crate::error::{contract, shape_err, Result};
use crate::params::ParamStore;
use crate::rope::{audio_position_ids, video_position_ids, GridSpec, PositionTriple, RopeConfig};
use crate::scalar::Real;
use crate::tape::{Graph, RotaryTable, Var};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Video,
    Audio,
}

/// Training stage; decides which parameter groups are trainable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Audio embedder, head and audio FFN only.
    AudioPretrain,
    #[default]
    AvSft,
    AvDpo,
}

/// Condition of one sample: toy class and diffusion time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConditionInput<T> {
    pub class_id: usize,
    pub t: T,
}

/// Latents fed to the network. `grid` holds latent (pre-patchify) extents;
/// either modality may be absent.
#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'g, T> {
    pub grid: GridSpec,
    pub video: Option<Var<'g, T>>,
    pub audio: Option<Var<'g, T>>,
}

/// Per-modality velocity predictions, shaped like the inputs.
#[derive(Clone, Copy, Debug)]
pub struct Prediction<'g, T> {
    pub video: Option<Var<'g, T>>,
    pub audio: Option<Var<'g, T>>,
}

/// Token sequence plus per-token routing and position metadata.
#[derive(Clone, Debug)]
pub struct TokenBatch<'g, T> {
    pub tokens: Var<'g, T>,
    pub modality: Vec<Modality>,
    pub ids: Vec<PositionTriple>,
    /// Token grid (post-patchify).
    pub grid: GridSpec,
    /// Index of each row within its modality's canonical raster order.
    pub origin: Vec<usize>,
    rotary: RotaryTable<T>,
}

impl<'g, T: Real> TokenBatch<'g, T> {
    pub fn len(&self) -> usize {
        self.modality.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modality.is_empty()
    }

    /// Storage rows holding tokens of `m`, in storage order.
    pub fn rows_of(&self, m: Modality) -> Vec<usize> {
        (0..self.len()).filter(|&r| self.modality[r] == m).collect()
    }

    /// Storage rows of `m` sorted into canonical raster order.
    fn canonical_rows(&self, m: Modality) -> Vec<usize> {
        let mut rows = self.rows_of(m);
        rows.sort_by_key(|&r| self.origin[r]);
        rows
    }

    /// Reorders storage so that new row `i` is old row `perm[i]`; ids, mask
    /// and origins travel with their tokens.
    pub fn permuted(&self, perm: &[usize], rope: &RopeConfig) -> Result<Self> {
        let mut seen = vec![false; self.len()];
        if perm.len() != self.len() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(contract("not a permutation of the token rows"));
        }
        let ids: Vec<PositionTriple> = perm.iter().map(|&p| self.ids[p]).collect();
        Ok(Self {
            tokens: self.tokens.gather_rows(perm)?,
            modality: perm.iter().map(|&p| self.modality[p]).collect(),
            rotary: rope.table(&ids),
            ids,
            grid: self.grid,
            origin: perm.iter().map(|&p| self.origin[p]).collect(),
        })
    }

    /// Same batch with the token matrix replaced.
    pub fn with_tokens(&self, tokens: Var<'g, T>) -> Self {
        Self {
            tokens,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    cfg: ModelConfig,
    params: ParamStore<T>,
    lora: Option<LoraSpec>,
}

/// Sinusoidal embedding of `t · 1000` with `dim` channels (cosines then sines).
pub fn timestep_embedding<T: Real>(t: T, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    let x = t.as_f64() * 1000.0;
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = T::lit((x * freq).cos());
        out[half + i] = T::lit((x * freq).sin());
    }
    Tensor::new(vec![1, dim], out).expect("length matches")
}

enum Init {
    Normal,
    Zero,
}

fn base_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, f) = (cfg.model_dim, cfg.ffn_dim);
    let (cv, ca) = (cfg.video_token_channels(), cfg.audio_channels);
    let mut out = Vec::new();
    let linear = |out: &mut Vec<_>, name: String, din: usize, dout: usize, init: Init| {
        out.push((format!("{name}.w"), vec![din, dout], init));
        out.push((format!("{name}.b"), vec![dout], Init::Zero));
    };
    linear(&mut out, "video_embed".into(), cv, d, Init::Normal);
    linear(&mut out, "audio_embed".into(), ca, d, Init::Normal);
    out.push(("cond.class_embed".into(), vec![cfg.n_classes, d], Init::Normal));
    linear(&mut out, "cond.fc".into(), d, d, Init::Normal);
    for i in 0..cfg.n_layers {
        linear(&mut out, format!("blocks.{i}.mod"), d, 4 * d, Init::Normal);
        for p in ["q", "k", "v", "o"] {
            linear(&mut out, format!("blocks.{i}.attn.{p}"), d, d, Init::Normal);
        }
        for e in cfg.expert_names() {
            linear(&mut out, format!("blocks.{i}.{e}.fc1"), d, f, Init::Normal);
            linear(&mut out, format!("blocks.{i}.{e}.fc2"), f, d, Init::Normal);
        }
    }
    linear(&mut out, "video_head".into(), d, cv, Init::Zero);
    linear(&mut out, "audio_head".into(), d, ca, Init::Zero);
    out
}

fn is_lora_param(name: &str) -> bool {
    name.ends_with(".lora_a") || name.ends_with(".lora_b")
}

fn is_video_side(name: &str) -> bool {
    name.starts_with("video_embed.") || name.starts_with("video_head.") || name.contains(".video_ffn.")
}

fn is_audio_side(name: &str) -> bool {
    name.starts_with("audio_embed.") || name.starts_with("audio_head.") || name.contains(".audio_ffn.")
}

impl<T: Real> Model<T> {
    /// Fresh model; `SharedFfnLora` variants get zero-effect adapters.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, init) in base_shapes(&cfg) {
            let t = match init {
                Init::Normal => Tensor::randn(&shape, cfg.init_std, &mut rng),
                Init::Zero => Tensor::zeros(&shape),
            };
            params.insert(name, t)?;
        }
        let mut model = Self {
            cfg,
            params,
            lora: None,
        };
        if let Variant::SharedFfnLora(spec) = model.cfg.variant {
            model.apply_lora(spec, seed ^ 0x5eed_10_7a)?;
        }
        model.set_stage(Stage::AvSft);
        Ok(model)
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_parts(cfg: ModelConfig, params: ParamStore<T>, lora: Option<LoraSpec>) -> Result<Self> {
        cfg.validate()?;
        let mut expected: Vec<(String, Vec<usize>)> =
            base_shapes(&cfg).into_iter().map(|(n, s, _)| (n, s)).collect();
        if let Some(spec) = lora {
            for (name, din, dout) in cfg.lora_targets(spec.placement) {
                expected.push((format!("{name}.lora_a"), vec![dout, spec.rank]));
                expected.push((format!("{name}.lora_b"), vec![spec.rank, din]));
            }
        }
        if expected.len() != params.len() {
            return Err(contract(format!(
                "parameter count {} != expected {}",
                params.len(),
                expected.len()
            )));
        }
        for (name, shape) in &expected {
            let t = params
                .get(name)
                .ok_or_else(|| contract(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(shape_err("from_parts", t.shape(), shape));
            }
        }
        Ok(Self { cfg, params, lora })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn lora(&self) -> Option<LoraSpec> {
        self.lora
    }

    /// Counts from the live parameter store (adapters included).
    pub fn count_params(&self) -> ParamCount {
        let total = self.params.numel();
        let inactive = (self.cfg.variant.experts() - 1) * self.cfg.n_layers * self.cfg.ffn_params();
        ParamCount {
            total,
            activated_per_token: total - inactive,
        }
    }

    /// Whether `name` is updated during `stage`.
    pub fn trainable_in(&self, name: &str, stage: Stage) -> bool {
        let adapters = self.lora.is_some();
        let io = name.starts_with("audio_embed.")
            || name.starts_with("audio_head.")
            || name.starts_with("video_embed.")
            || name.starts_with("video_head.");
        match stage {
            Stage::AudioPretrain => {
                if is_video_side(name) {
                    false
                } else if adapters {
                    is_lora_param(name) || is_audio_side(name) && !name.contains("_ffn.")
                } else {
                    is_audio_side(name) || name.contains(".ffn.")
                }
            }
            Stage::AvSft | Stage::AvDpo => !adapters || is_lora_param(name) || io,
        }
    }

    pub fn set_stage(&mut self, stage: Stage) {
        let flags: Vec<bool> = self.params.names().map(|n| self.trainable_in(n, stage)).collect();
        for (idx, on) in flags.into_iter().enumerate() {
            self.params.by_index_mut(idx).tensor.set_requires_grad(on);
        }
    }

    pub fn view(&self) -> ModelView<'_, T> {
        ModelView {
            cfg: &self.cfg,
            params: &self.params,
            lora: self.lora,
        }
    }

    /// View evaluating this architecture with `params`, which must have the
    /// same names and shapes as the model's own store.
    pub fn view_with<'a>(&'a self, params: &'a ParamStore<T>) -> Result<ModelView<'a, T>> {
        if params.len() != self.params.len() {
            return Err(contract("parameter layout differs from the model"));
        }
        for p in self.params.iter() {
            match params.get(&p.name) {
                Some(t) if t.shape() == p.tensor.shape() => {}
                _ => return Err(contract(format!("parameter {} missing or reshaped", p.name))),
            }
        }
        Ok(ModelView {
            cfg: &self.cfg,
            params,
            lora: self.lora,
        })
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, input: &ModelInput<'g, T>, cond: &ConditionInput<T>) -> Result<Prediction<'g, T>> {
        self.view().forward(g, input, cond)
    }

    pub fn predict(
        &self,
        grid: &GridSpec,
        video: Option<&Tensor<T>>,
        audio: Option<&Tensor<T>>,
        cond: &ConditionInput<T>,
    ) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
        self.view().predict(grid, video, audio, cond)
    }
}

/// Forward computation over a borrowed parameter store. Obtained from
/// [`Model::view`] or, for probing alternative weights with the same layout,
/// [`Model::view_with`].
#[derive(Clone, Copy, Debug)]
pub struct ModelView<'a, T> {
    cfg: &'a ModelConfig,
    params: &'a ParamStore<T>,
    lora: Option<LoraSpec>,
}

impl<'a, T: Real> ModelView<'a, T> {
    pub fn config(&self) -> &'a ModelConfig {
        self.cfg
    }

    fn linear<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>, name: &str) -> Result<Var<'g, T>> {
        let w = g.param_named(self.params, &format!("{name}.w"))?;
        let b = g.param_named(self.params, &format!("{name}.b"))?;
        let y = x.matmul(w)?.add_row(b)?;
        match (self.lora, self.params.index_of(&format!("{name}.lora_a"))) {
            (Some(spec), Some(ia)) => {
                let a = g.param(self.params, ia);
                let bb = g.param_named(self.params, &format!("{name}.lora_b"))?;
                let delta = x.matmul_t(bb)?.matmul_t(a)?.scale(T::lit(spec.alpha / spec.rank as f64));
                y.add(delta)
            }
            _ => Ok(y),
        }
    }

    /// Conditioning vector `[1 × d]`.
    pub fn condition<'g>(&self, g: &'g Graph<T>, cond: &ConditionInput<T>) -> Result<Var<'g, T>> {
        if cond.class_id >= self.cfg.n_classes {
            return Err(contract(format!(
                "class_id {} outside [0, {})",
                cond.class_id, self.cfg.n_classes
            )));
        }
        if !cond.t.is_finite() {
            return Err(contract("timestep must be finite"));
        }
        let temb = g.constant(&timestep_embedding(cond.t, self.cfg.model_dim));
        let class = g
            .param_named(self.params, "cond.class_embed")?
            .gather_rows(&[cond.class_id])?;
        Ok(self.linear(g, temb.add(class)?, "cond.fc")?.gelu())
    }

    fn token_grid(&self, grid: &GridSpec) -> Result<GridSpec> {
        grid.validate()?;
        let p = self.cfg.video_patch;
        if !grid.height.is_multiple_of(p) || !grid.width.is_multiple_of(p) {
            return Err(contract(format!("video extent {grid} not divisible by patch {p}")));
        }
        GridSpec::new(grid.video_frames, grid.height / p, grid.width / p, grid.audio_steps, grid.freq_bins)
    }

    /// Latent row of each (token, sub-patch) pair, in token-major order.
    fn patch_rows(&self, grid: &GridSpec) -> Vec<usize> {
        let p = self.cfg.video_patch;
        let (hp, wp) = (grid.height / p, grid.width / p);
        let mut rows = Vec::with_capacity(grid.video_tokens());
        for f in 0..grid.video_frames {
            for y in 0..hp {
                for x in 0..wp {
                    for dy in 0..p {
                        for dx in 0..p {
                            rows.push((f * grid.height + y * p + dy) * grid.width + x * p + dx);
                        }
                    }
                }
            }
        }
        rows
    }

    /// Projects latents to tokens and attaches ids and the modality mask.
    pub fn embed<'g>(&self, g: &'g Graph<T>, input: &ModelInput<'g, T>) -> Result<TokenBatch<'g, T>> {
        let tg = self.token_grid(&input.grid)?;
        let grid = input.grid;
        let mut parts = Vec::new();
        let mut modality = Vec::new();
        let mut ids = Vec::new();
        let mut origin = Vec::new();
        if let Some(v) = input.video {
            let want = [grid.video_frames, grid.height, grid.width, self.cfg.video_channels];
            if v.shape() != want {
                return Err(shape_err("embed video", &v.shape(), &want));
            }
            let mut flat = v.reshape(&[grid.video_tokens(), self.cfg.video_channels])?;
            if self.cfg.video_patch > 1 {
                flat = flat
                    .gather_rows(&self.patch_rows(&grid))?
                    .reshape(&[tg.video_tokens(), self.cfg.video_token_channels()])?;
            }
            parts.push(self.linear(g, flat, "video_embed")?);
            modality.extend(std::iter::repeat_n(Modality::Video, tg.video_tokens()));
            ids.extend(video_position_ids(&tg));
            origin.extend(0..tg.video_tokens());
        }
        if let Some(a) = input.audio {
            let want = [grid.audio_steps, grid.freq_bins, self.cfg.audio_channels];
            if a.shape() != want {
                return Err(shape_err("embed audio", &a.shape(), &want));
            }
            let flat = a.reshape(&[tg.audio_tokens(), self.cfg.audio_channels])?;
            parts.push(self.linear(g, flat, "audio_embed")?);
            modality.extend(std::iter::repeat_n(Modality::Audio, tg.audio_tokens()));
            ids.extend(audio_position_ids(self.cfg.audio_ids, &tg));
            origin.extend(0..tg.audio_tokens());
        }
        let tokens = match parts.len() {
            0 => return Err(contract("model input holds neither modality")),
            1 => parts[0],
            _ => g.concat_rows(&parts)?,
        };
        Ok(TokenBatch {
            tokens,
            modality,
            rotary: self.cfg.rope.table(&ids),
            ids,
            grid: tg,
            origin,
        })
    }

    fn unit_norm<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let d = self.cfg.model_dim;
        let ones = g.constant(&Tensor::full(&[d], T::one()));
        let zeros = g.constant(&Tensor::zeros(&[d]));
        x.layer_norm(ones, zeros, T::lit(LN_EPS))
    }

    fn attention<'g>(&self, g: &'g Graph<T>, i: usize, h: Var<'g, T>, rot: &RotaryTable<T>) -> Result<Var<'g, T>> {
        let q = self.linear(g, h, &format!("blocks.{i}.attn.q"))?;
        let k = self.linear(g, h, &format!("blocks.{i}.attn.k"))?;
        let v = self.linear(g, h, &format!("blocks.{i}.attn.v"))?;
        let hd = self.cfg.head_dim();
        let scale = T::lit(1.0 / (hd as f64).sqrt());
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        for head in 0..self.cfg.n_heads {
            let qh = q.slice_cols(head * hd, hd)?.rotary(rot)?;
            let kh = k.slice_cols(head * hd, hd)?.rotary(rot)?;
            let vh = v.slice_cols(head * hd, hd)?;
            heads.push(qh.matmul_t(kh)?.scale(scale).softmax_rows()?.matmul(vh)?);
        }
        let o = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        self.linear(g, o, &format!("blocks.{i}.attn.o"))
    }

    fn ffn<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>, prefix: &str) -> Result<Var<'g, T>> {
        let h = self.linear(g, x, &format!("{prefix}.fc1"))?.gelu();
        self.linear(g, h, &format!("{prefix}.fc2"))
    }

    /// FFN sublayer with modality routing; rows keep their storage order.
    fn routed_ffn<'g>(&self, g: &'g Graph<T>, i: usize, h: Var<'g, T>, modality: &[Modality]) -> Result<Var<'g, T>> {
        if self.cfg.variant != Variant::MsMoe {
            return self.ffn(g, h, &format!("blocks.{i}.ffn"));
        }
        let mut parts = Vec::new();
        let mut order = Vec::with_capacity(modality.len());
        for (m, expert) in [(Modality::Video, "video_ffn"), (Modality::Audio, "audio_ffn")] {
            let rows: Vec<usize> = (0..modality.len()).filter(|&r| modality[r] == m).collect();
            if rows.is_empty() {
                continue;
            }
            parts.push(self.ffn(g, h.gather_rows(&rows)?, &format!("blocks.{i}.{expert}"))?);
            order.extend(rows);
        }
        let stacked = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
        let mut inverse = vec![0; order.len()];
        for (pos, &row) in order.iter().enumerate() {
            inverse[row] = pos;
        }
        stacked.gather_rows(&inverse)
    }

    /// One transformer block: modulated pre-norm attention over all tokens,
    /// then the routed FFN, each with a residual connection.
    pub fn block_forward<'g>(
        &self,
        g: &'g Graph<T>,
        layer: usize,
        x: &TokenBatch<'g, T>,
        cond: Var<'g, T>,
    ) -> Result<TokenBatch<'g, T>> {
        if layer >= self.cfg.n_layers {
            return Err(contract(format!("layer {layer} of {}", self.cfg.n_layers)));
        }
        let d = self.cfg.model_dim;
        let m = self.linear(g, cond, &format!("blocks.{layer}.mod"))?;
        let chunk = |j: usize| m.slice_cols(j * d, d)?.reshape(&[d]);
        let (shift1, scale1, shift2, scale2) = (chunk(0)?, chunk(1)?, chunk(2)?, chunk(3)?);
        let one = T::one();

        let h = self
            .unit_norm(g, x.tokens)?
            .mul_row(scale1.add_scalar(one))?
            .add_row(shift1)?;
        let resid = x.tokens.add(self.attention(g, layer, h, &x.rotary)?)?;
        let h = self
            .unit_norm(g, resid)?
            .mul_row(scale2.add_scalar(one))?
            .add_row(shift2)?;
        let out = resid.add(self.routed_ffn(g, layer, h, &x.modality)?)?;
        Ok(x.with_tokens(out))
    }

    /// Runs every block.
    pub fn run_blocks<'g>(&self, g: &'g Graph<T>, batch: TokenBatch<'g, T>, cond: Var<'g, T>) -> Result<TokenBatch<'g, T>> {
        let mut x = batch;
        for layer in 0..self.cfg.n_layers {
            x = self.block_forward(g, layer, &x, cond)?;
        }
        Ok(x)
    }

    /// Final norm and per-modality heads, reshaped to latent grids.
    pub fn heads<'g>(&self, g: &'g Graph<T>, batch: &TokenBatch<'g, T>, grid: &GridSpec) -> Result<Prediction<'g, T>> {
        let h = self.unit_norm(g, batch.tokens)?;
        let mut pred = Prediction { video: None, audio: None };
        let vrows = batch.canonical_rows(Modality::Video);
        if !vrows.is_empty() {
            let out = self.linear(g, h.gather_rows(&vrows)?, "video_head")?;
            let c = self.cfg.video_channels;
            let mut flat = out.reshape(&[grid.video_tokens(), c])?;
            if self.cfg.video_patch > 1 {
                let mut inverse = vec![0; grid.video_tokens()];
                for (pos, row) in self.patch_rows(grid).into_iter().enumerate() {
                    inverse[row] = pos;
                }
                flat = flat.gather_rows(&inverse)?;
            }
            pred.video = Some(flat.reshape(&[grid.video_frames, grid.height, grid.width, c])?);
        }
        let arows = batch.canonical_rows(Modality::Audio);
        if !arows.is_empty() {
            let out = self.linear(g, h.gather_rows(&arows)?, "audio_head")?;
            pred.audio = Some(out.reshape(&[grid.audio_steps, grid.freq_bins, self.cfg.audio_channels])?);
        }
        Ok(pred)
    }

    /// Full velocity prediction.
    pub fn forward<'g>(&self, g: &'g Graph<T>, input: &ModelInput<'g, T>, cond: &ConditionInput<T>) -> Result<Prediction<'g, T>> {
        let c = self.condition(g, cond)?;
        let batch = self.embed(g, input)?;
        let out = self.run_blocks(g, batch, c)?;
        self.heads(g, &out, &input.grid)
    }

    /// Gradient-free forward on plain tensors.
    pub fn predict(
        &self,
        grid: &GridSpec,
        video: Option<&Tensor<T>>,
        audio: Option<&Tensor<T>>,
        cond: &ConditionInput<T>,
    ) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
        let g = Graph::no_grad();
        let input = ModelInput {
            grid: *grid,
            video: video.map(|t| g.constant(t)),
            audio: audio.map(|t| g.constant(t)),
        };
        let p = self.forward(&g, &input, cond)?;
        Ok((p.video.map(|v| v.value()), p.audio.map(|a| a.value())))
    }
}
