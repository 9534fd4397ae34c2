//! Low-rank adapters: each targeted linear `y = x·W + b` gains
//! `(alpha/r) · x·Bᵀ·Aᵀ`, i.e. the weight delta `(alpha/r)·A·B` in
//! `d_out × d_in` orientation. `A` starts at zero so adapters are inert.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{LoraSpec, Model, Variant};
use crate::error::{contract, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

impl<T: Real> Model<T> {
    pub fn apply_lora(&mut self, spec: LoraSpec, seed: u64) -> Result<()> {
        if self.lora.is_some() {
            return Err(contract("adapters already applied"));
        }
        if self.cfg.variant == Variant::SharedFfn {
            return Err(contract("full fine-tune variant takes no adapters"));
        }
        let targets = self.cfg.lora_targets(spec.placement);
        for (name, din, dout) in &targets {
            if spec.rank == 0 || spec.rank >= (*din).min(*dout) {
                return Err(contract(format!(
                    "lora rank {} must be in [1, {}) for {name}",
                    spec.rank,
                    din.min(dout)
                )));
            }
        }
        if !(spec.alpha.is_finite()) {
            return Err(contract("lora alpha must be finite"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, din, dout) in targets {
            self.params
                .insert(format!("{name}.lora_a"), Tensor::zeros(&[dout, spec.rank]))?;
            let b = Tensor::randn(&[spec.rank, din], 1.0 / (din as f64).sqrt(), &mut rng);
            self.params.insert(format!("{name}.lora_b"), b)?;
        }
        self.lora = Some(spec);
        Ok(())
    }

    /// Folds every adapter into its base weight and removes it.
    pub fn merge_lora(&mut self) -> Result<()> {
        let spec = self.lora.ok_or_else(|| contract("no adapters to merge"))?;
        let s = T::lit(spec.alpha / spec.rank as f64);
        let r = spec.rank;
        for (name, din, dout) in self.cfg.lora_targets(spec.placement) {
            let a = self.params.remove(&format!("{name}.lora_a")).map(|p| p.tensor);
            let b = self.params.remove(&format!("{name}.lora_b")).map(|p| p.tensor);
            let (Some(a), Some(b)) = (a, b) else {
                return Err(contract(format!("adapter pair for {name} missing")));
            };
            let w = self
                .params
                .get_mut(&format!("{name}.w"))
                .ok_or_else(|| contract(format!("missing {name}.w")))?;
            let (a, b, w) = (a.data(), b.data(), w.data_mut());
            for i in 0..din {
                for o in 0..dout {
                    let mut acc = T::zero();
                    for k in 0..r {
                        acc += a[o * r + k] * b[k * din + i];
                    }
                    w[i * dout + o] += s * acc;
                }
            }
        }
        self.lora = None;
        if let Variant::SharedFfnLora(_) = self.cfg.variant {
            self.cfg.variant = Variant::SharedFfn;
        }
        Ok(())
    }
}
