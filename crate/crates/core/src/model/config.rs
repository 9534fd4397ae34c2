use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::rope::{AudioIdStrategy, RopeConfig};

/// Where low-rank adapters are attached.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoraPlacement {
    Attention,
    #[default]
    AttentionFfn,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
    #[serde(default)]
    pub placement: LoraPlacement,
}

/// Feed-forward arrangement of each block.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Separate audio and video FFN experts, routed by modality.
    #[default]
    MsMoe,
    /// One FFN shared by both modalities, all weights trainable.
    SharedFfn,
    /// One shared FFN with frozen base weights and trainable adapters.
    SharedFfnLora(LoraSpec),
}

impl Variant {
    pub fn experts(&self) -> usize {
        match self {
            Variant::MsMoe => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub rope: RopeConfig,
    /// Size of the toy condition vocabulary.
    pub n_classes: usize,
    pub variant: Variant,
    pub video_channels: usize,
    pub audio_channels: usize,
    /// Spatial patch size for video latents (1 = identity).
    pub video_patch: usize,
    pub audio_ids: AudioIdStrategy,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy(16, 2, 2)
    }
}

impl ModelConfig {
    /// Small config with the default rotary split and `ffn_dim = 4·dim`.
    pub fn toy(model_dim: usize, n_heads: usize, n_layers: usize) -> Self {
        let head_dim = model_dim / n_heads.max(1);
        Self {
            n_layers,
            model_dim,
            n_heads,
            ffn_dim: 4 * model_dim,
            rope: RopeConfig::new(head_dim).unwrap_or(RopeConfig {
                head_dim,
                split: (head_dim, 0, 0),
                base: 10_000.0,
            }),
            n_classes: 4,
            variant: Variant::MsMoe,
            video_channels: 2,
            audio_channels: 2,
            video_patch: 1,
            audio_ids: AudioIdStrategy::InterleaveOffset,
            init_std: 0.02,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.model_dim == 0 || self.ffn_dim == 0 || self.n_classes == 0 {
            return Err(contract("model extents must be positive"));
        }
        if self.n_heads == 0 || !self.model_dim.is_multiple_of(self.n_heads) {
            return Err(contract(format!(
                "model_dim {} not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.rope.head_dim != self.head_dim() {
            return Err(contract(format!(
                "rope head_dim {} != model_dim / n_heads = {}",
                self.rope.head_dim,
                self.head_dim()
            )));
        }
        self.rope.validate()?;
        if self.video_channels == 0 || self.audio_channels == 0 {
            return Err(contract("latent channels must be positive"));
        }
        if !(1..=2).contains(&self.video_patch) {
            return Err(contract(format!("video_patch {} not in {{1, 2}}", self.video_patch)));
        }
        if let Variant::SharedFfnLora(spec) = self.variant {
            let limit = self.model_dim.min(self.ffn_dim);
            if spec.rank == 0 || spec.rank >= limit {
                return Err(contract(format!("lora rank {} must be in [1, {limit})", spec.rank)));
            }
        }
        Ok(())
    }

    pub(crate) fn video_token_channels(&self) -> usize {
        self.video_channels * self.video_patch * self.video_patch
    }

    /// Parameters of one two-layer FFN.
    pub fn ffn_params(&self) -> usize {
        let (d, f) = (self.model_dim, self.ffn_dim);
        d * f + f + f * d + d
    }

    /// Linear layers that receive adapters, as `(name, d_in, d_out)`.
    pub(crate) fn lora_targets(&self, placement: LoraPlacement) -> Vec<(String, usize, usize)> {
        let (d, f) = (self.model_dim, self.ffn_dim);
        let mut out = Vec::new();
        for i in 0..self.n_layers {
            for p in ["q", "k", "v", "o"] {
                out.push((format!("blocks.{i}.attn.{p}"), d, d));
            }
            if placement == LoraPlacement::AttentionFfn {
                for expert in self.expert_names() {
                    out.push((format!("blocks.{i}.{expert}.fc1"), d, f));
                    out.push((format!("blocks.{i}.{expert}.fc2"), f, d));
                }
            }
        }
        out
    }

    pub(crate) fn expert_names(&self) -> &'static [&'static str] {
        match self.variant {
            Variant::MsMoe => &["video_ffn", "audio_ffn"],
            _ => &["ffn"],
        }
    }
}

/// Parameter totals for a configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    /// Parameters one token traverses: every non-expert parameter plus one
    /// expert per block.
    pub activated_per_token: usize,
}

/// Closed-form parameter count, including adapters for the LoRA variant.
pub fn count_params(cfg: &ModelConfig) -> ParamCount {
    let d = cfg.model_dim;
    let cv = cfg.video_token_channels();
    let ca = cfg.audio_channels;
    let embedders = (cv * d + d) + (ca * d + d);
    let heads = (d * cv + cv) + (d * ca + ca);
    let cond = cfg.n_classes * d + d * d + d;
    let per_block_shared = (d * 4 * d + 4 * d) + 4 * (d * d + d);
    let ffn = cfg.ffn_params();
    let experts = cfg.variant.experts();
    let adapters = match cfg.variant {
        Variant::SharedFfnLora(spec) => cfg
            .lora_targets(spec.placement)
            .iter()
            .map(|(_, din, dout)| spec.rank * (din + dout))
            .sum(),
        _ => 0,
    };
    let total = embedders + heads + cond + cfg.n_layers * (per_block_shared + experts * ffn) + adapters;
    ParamCount {
        total,
        activated_per_token: total - (experts - 1) * cfg.n_layers * ffn,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ffn_closed_form() {
        let mut cfg = ModelConfig::toy(8, 2, 1);
        cfg.ffn_dim = 16;
        assert_eq!(cfg.ffn_params(), 280);
        let moe = count_params(&cfg);
        cfg.variant = Variant::SharedFfn;
        let shared = count_params(&cfg);
        assert_eq!(moe.total - shared.total, 280);
        assert_eq!(moe.activated_per_token, shared.total);
        assert_eq!(shared.activated_per_token, shared.total);
    }

    #[test]
    fn activated_independent_of_expert_count() {
        for layers in 1..4 {
            let mut cfg = ModelConfig::toy(8, 2, layers);
            let moe = count_params(&cfg);
            cfg.variant = Variant::SharedFfn;
            assert_eq!(moe.activated_per_token, count_params(&cfg).activated_per_token);
            assert_eq!(moe.total - count_params(&cfg).total, layers * cfg.ffn_params());
        }
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::toy(8, 3, 1).validate().is_err());
        let mut cfg = ModelConfig::toy(8, 2, 1);
        assert!(cfg.validate().is_ok());
        cfg.variant = Variant::SharedFfnLora(LoraSpec {
            rank: 8,
            alpha: 8.0,
            placement: LoraPlacement::Attention,
        });
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn variant_serde_names() {
        let v: Variant = serde_json::from_str("\"ms-moe\"").unwrap();
        assert_eq!(v, Variant::MsMoe);
        let l: Variant =
            serde_json::from_str(r#"{"shared-ffn-lora": {"rank": 2, "alpha": 4.0}}"#).unwrap();
        assert!(matches!(l, Variant::SharedFfnLora(LoraSpec { rank: 2, .. })));
    }
}
