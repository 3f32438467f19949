//! SGD with momentum and L2 weight decay.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TrainError};
use crate::network::{Gradients, ShadowWeights};

/// When weight masks are recomputed from the current shadow weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskRefresh {
    EveryForward,
    EveryEpoch,
    /// Every forward pass until epoch `k` (0-based) completes, then frozen.
    FrozenAfterEpoch(usize),
}

impl fmt::Display for MaskRefresh {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskRefresh::EveryForward => write!(f, "every-forward"),
            MaskRefresh::EveryEpoch => write!(f, "every-epoch"),
            MaskRefresh::FrozenAfterEpoch(k) => write!(f, "frozen-after-epoch:{k}"),
        }
    }
}

impl FromStr for MaskRefresh {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "every-forward" => Ok(MaskRefresh::EveryForward),
            "every-epoch" => Ok(MaskRefresh::EveryEpoch),
            _ => s
                .strip_prefix("frozen-after-epoch:")
                .and_then(|k| k.parse().ok())
                .map(MaskRefresh::FrozenAfterEpoch)
                .ok_or_else(|| {
                    TrainError::InvalidNetwork(format!(
                        "unknown mask refresh '{s}' (every-forward, every-epoch, frozen-after-epoch:K)"
                    ))
                }),
        }
    }
}

/// Learning-rate schedule over the whole run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from `learning_rate` down to zero at the last step.
    Cosine,
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        })
    }
}

impl FromStr for LrSchedule {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            _ => Err(TrainError::InvalidNetwork(format!(
                "unknown learning-rate schedule '{s}' (constant, cosine)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mask_refresh: MaskRefresh,
    pub lr_schedule: LrSchedule,
}

impl TrainConfig {
    /// Learning rate for optimizer step `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 10,
            batch_size: 64,
            seed: 1,
            mask_refresh: MaskRefresh::EveryForward,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

/// `v ← momentum·v + g + weight_decay·w; w ← w − lr·v`, elementwise.
pub fn sgd_step(shadow: &mut ShadowWeights, grads: &Gradients, cfg: &TrainConfig, velocity: &mut ShadowWeights) -> Result<()> {
    let aligned = shadow.tensors.len() == grads.tensors.len()
        && shadow.tensors.len() == velocity.tensors.len()
        && shadow
            .tensors
            .iter()
            .zip(&grads.tensors)
            .zip(&velocity.tensors)
            .all(|((w, g), v)| w.len() == g.len() && w.len() == v.len());
    if !aligned {
        return Err(TrainError::shape("sgd_step", "weights, gradients and velocity differ in layout"));
    }
    for ((w, g), v) in shadow.tensors.iter_mut().zip(&grads.tensors).zip(velocity.tensors.iter_mut()) {
        for ((w, g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
            *v = cfg.momentum * *v + g + cfg.weight_decay * *w;
            *w -= cfg.learning_rate * *v;
        }
    }
    Ok(())
}
