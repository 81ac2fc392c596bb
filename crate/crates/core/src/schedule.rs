//! Learning-rate schedules and the gradual-unfreezing plan.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Pretraining schedule: linear warmup from 0 to `peak` over
/// `warmup_steps`, then linear decay to 0 at `total_steps`. `step` counts
/// from 0.
pub fn warmup_linear_decay(step: usize, warmup_steps: usize, total_steps: usize, peak: f64) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        return peak * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return peak;
    }
    let remaining = total_steps.saturating_sub(step) as f64;
    peak * (remaining / (total_steps - warmup_steps) as f64).max(0.0)
}

/// Parser schedule: `peak · min(t / w, √(w / t))` for `t ≥ 1`.
pub fn inverse_sqrt(t: usize, warmup_steps: usize, peak: f64) -> Result<f64> {
    if t < 1 {
        return Err(Error::invalid("inverse-sqrt schedule is defined from step 1"));
    }
    if warmup_steps < 1 {
        return Err(Error::invalid("warmup must span at least one step"));
    }
    let (t, w) = (t as f64, warmup_steps as f64);
    Ok(peak * (t / w).min((w / t).sqrt()))
}

/// Which encoder parts take updates during one parser epoch, with their
/// learning-rate multipliers. Layer 0 is the embedding block; layers
/// `1..=L` are transformer layers, `L` the topmost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnfreezePlan {
    pub multipliers: BTreeMap<usize, f64>,
}

impl UnfreezePlan {
    pub fn is_trainable(&self, layer: usize) -> bool {
        self.multipliers.contains_key(&layer)
    }

    pub fn n_trainable(&self) -> usize {
        self.multipliers.len()
    }
}

/// Gradual unfreezing with discriminative rates.
///
/// At 1-based epoch `k` the top `min(k, L)` layers train; the embedding
/// block joins from epoch `L + 1`. Layer `ℓ` gets multiplier `η^(L−ℓ)`,
/// the embeddings `η^L`. In frozen mode nothing trains.
pub fn unfreezing_plan(epoch: usize, n_layers: usize, finetune: bool, decay: f64) -> UnfreezePlan {
    let mut multipliers = BTreeMap::new();
    if finetune && epoch >= 1 {
        let open = epoch.min(n_layers);
        for layer in (n_layers + 1 - open)..=n_layers {
            multipliers.insert(layer, decay.powi((n_layers - layer) as i32));
        }
        if epoch > n_layers {
            multipliers.insert(0, decay.powi(n_layers as i32));
        }
    }
    UnfreezePlan { multipliers }
}
