//! Flat TOML run configuration shared by `approx-bench` and `train`.
//! Unknown keys are rejected; every key is optional and command-line flags
//! override file values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: Option<Vec<u64>>,

    // approx-bench
    /// Tensor size.
    pub n: Option<usize>,
    pub avg_bits: Option<Vec<f64>>,
    pub heuristics: Option<Vec<String>>,
    /// `adjacent`, `tiered-1.4`, `preset(...)` or `grid-best[(max,step)]`.
    pub policy: Option<String>,
    pub homogeneous_bits: Option<Vec<usize>>,

    // train
    /// CIFAR-10 binary directory; the synthetic task is used when unset.
    pub data_dir: Option<PathBuf>,
    pub n_train: Option<usize>,
    pub n_test: Option<usize>,
    pub data_seed: Option<u64>,
    pub synthetic_noise: Option<f64>,
    pub synthetic_distractor: Option<f64>,
    /// `convnet4` or `separable`.
    pub model: Option<String>,
    pub width: Option<usize>,
    /// Sweep points, e.g. `"full"`, `"w=1.4"`, `"a=1.4 w=1.4 h=mo policy=tiered-1.4"`,
    /// `"layers=1-2-2-3"`.
    pub points: Option<Vec<String>>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub mask_refresh: Option<String>,
    /// `"constant"` or `"cosine"`.
    pub lr_schedule: Option<String>,
    pub verify_packed: Option<bool>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, UsageError> {
        toml::from_str(text).map_err(|e| UsageError(format!("config: {}", e.message())))
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
        Ok(Self::parse(&text)?)
    }

    /// Serialized form, logged before each run.
    pub fn resolved(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects_unknown() {
        let c = RunConfig::parse("n = 1000\nseeds = [1, 2]\npolicy = \"grid-best\"").unwrap();
        assert_eq!(c.n, Some(1000));
        assert_eq!(c.seeds, Some(vec![1, 2]));
        assert!(RunConfig::parse("n = 1\nbogus = 3").is_err());
        assert!(RunConfig::parse("n = \"many\"").is_err());
    }

    #[test]
    fn resolved_round_trips() {
        let c = RunConfig {
            epochs: Some(3),
            points: Some(vec!["w=1.4".into()]),
            ..Default::default()
        };
        assert_eq!(RunConfig::parse(&c.resolved()).unwrap(), c);
    }
}
