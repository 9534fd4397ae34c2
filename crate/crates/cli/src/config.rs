//! Run configuration: JSON file, then command-line overrides, then
//! validation. Every field has a default and unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use avflow_core::flow::{SamplerConfig, TrainFlowConfig};
use avflow_core::model::{ModelConfig, Stage};
use avflow_core::preference::{DpoConfig, RankStrategy};
use avflow_core::rope::{AudioIdStrategy, GridSpec, RopeConfig};
use avflow_core::toyworld::ToyWorld;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub noise_std: f64,
    pub max_events: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let w = ToyWorld::default();
        Self {
            noise_std: w.noise_std,
            max_events: w.max_events,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairsConfig {
    pub n_prompts: usize,
    /// Generated candidates per prompt.
    pub candidates: usize,
}

impl Default for PairsConfig {
    fn default() -> Self {
        Self {
            n_prompts: 32,
            candidates: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_prompts: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_prompts: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Random grids in the static overlap sweep.
    pub grids: usize,
    /// Largest extent drawn for each grid axis in the sweep.
    pub max_extent: usize,
    /// Training seeds per strategy; 0 skips the training half.
    pub seeds: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            grids: 20,
            max_extent: 8,
            seeds: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub seeds: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Standard deviation of the random parameters under test.
    pub param_std: f64,
    /// Both betas of the checked DPO loss. The loss curvature grows as
    /// beta squared, and at beta in the thousands central differences with
    /// `step = 1e-5` carry truncation errors above 1e-4.
    pub dpo_beta: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seeds: 20,
            step: 1e-5,
            tolerance: 1e-4,
            param_std: 0.3,
            dpo_beta: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub grid: GridSpec,
    /// Audio position ids; overrides `model.audio_ids`.
    pub rope_strategy: AudioIdStrategy,
    pub stage: Stage,
    pub data: DataConfig,
    /// `flow.seed` is replaced by the top-level seed.
    pub flow: TrainFlowConfig,
    pub sampler: SamplerConfig,
    /// `dpo.seed` is replaced by the top-level seed.
    pub dpo: DpoConfig,
    pub ranking: RankStrategy,
    pub pairs: PairsConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
    pub grad_check: GradCheckConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            grid: ToyWorld::default().grid,
            rope_strategy: AudioIdStrategy::InterleaveOffset,
            stage: Stage::AvSft,
            data: DataConfig::default(),
            flow: TrainFlowConfig::default(),
            sampler: SamplerConfig::default(),
            dpo: DpoConfig::default(),
            ranking: RankStrategy::default(),
            pairs: PairsConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
            grad_check: GradCheckConfig::default(),
            seed: 0,
            out_dir: PathBuf::from("runs/latest"),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub rope_strategy: Option<AudioIdStrategy>,
    pub stage: Option<Stage>,
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

impl RunConfig {
    /// Parses a config file, or the `resolved_config` of a run manifest.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(config_err)?;
        let value = match value.get("resolved_config") {
            Some(inner) => inner.clone(),
            None => value,
        };
        let model_keys = value.get("model").and_then(|m| m.as_object()).cloned().unwrap_or_default();
        let mut cfg: Self = serde_json::from_value(value).map_err(config_err)?;
        // Omitted width-dependent fields follow the given width, as in `ModelConfig::toy`.
        if !model_keys.contains_key("ffn_dim") {
            cfg.model.ffn_dim = 4 * cfg.model.model_dim;
        }
        if !model_keys.contains_key("rope") && cfg.model.n_heads > 0 {
            if let Ok(rope) = RopeConfig::new(cfg.model.head_dim()) {
                cfg.model.rope = rope;
            }
        }
        Ok(cfg)
    }

    /// Defaults, then the file (if any), then the overrides; validated.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let base = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
                Self::from_json(&text)?
            }
            None => Self::default(),
        };
        base.with_overrides(overrides).resolved()
    }

    pub fn with_overrides(mut self, o: &Overrides) -> Self {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        if let Some(r) = o.rope_strategy {
            self.rope_strategy = r;
        }
        if let Some(s) = o.stage {
            self.stage = s;
        }
        self
    }

    /// Propagates the shared fields and validates the result.
    pub fn resolved(mut self) -> Result<Self> {
        self.model.audio_ids = self.rope_strategy;
        self.flow.seed = self.seed;
        self.dpo.seed = self.seed;
        self.model.validate().map_err(config_err)?;
        self.world().validate().map_err(config_err)?;
        self.dpo.validate().map_err(config_err)?;
        if self.flow.batch_size == 0 {
            return Err(config_err("flow.batch_size must be positive"));
        }
        if self.sampler.n_steps == 0 {
            return Err(config_err("sampler.n_steps must be positive"));
        }
        if self.pairs.candidates == 0 || self.pairs.n_prompts == 0 || self.eval.n_prompts == 0 {
            return Err(config_err("prompt and candidate counts must be positive"));
        }
        let gc = &self.grad_check;
        if !(1e-6..=1e-3).contains(&gc.step) || !(gc.tolerance > 0.0) || !(gc.dpo_beta > 0.0) {
            return Err(config_err("grad_check.step must lie in [1e-6, 1e-3] and tolerance be positive"));
        }
        Ok(self)
    }

    pub fn world(&self) -> ToyWorld {
        ToyWorld {
            grid: self.grid,
            video_channels: self.model.video_channels,
            audio_channels: self.model.audio_channels,
            n_classes: self.model.n_classes,
            noise_std: self.data.noise_std,
            max_events: self.data.max_events,
        }
    }
}
