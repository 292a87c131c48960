use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Cosine,
    Constant,
}

/// Hyperparameters of the model and its training run.
///
/// Stored on disk as flat `key = value` text; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    pub modes: usize,
    pub observed: usize,
    pub predicted: usize,
    pub conv_kernel: usize,
    pub box_sizes: Vec<usize>,
    pub radius: f64,
    pub dropout: f64,
    pub lambda1: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_schedule: LrSchedule,
    /// Score every agent with a complete future instead of focal agents only.
    pub score_all_agents: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            heads: 8,
            modes: 6,
            observed: 20,
            predicted: 30,
            conv_kernel: 3,
            box_sizes: vec![3, 7, 21],
            radius: 50.0,
            dropout: 0.1,
            lambda1: 5.0,
            lr: 5e-4,
            weight_decay: 1e-4,
            batch_size: 32,
            epochs: 64,
            lr_schedule: LrSchedule::Cosine,
            score_all_agents: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| Err(DataError::Config(msg));
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(format!(
                "hidden = {} must be a positive multiple of heads = {}",
                self.hidden, self.heads
            ));
        }
        if self.modes == 0 {
            return bad("modes must be at least 1".into());
        }
        if self.observed < 3 {
            return bad(format!("observed = {} must be at least 3", self.observed));
        }
        if self.predicted == 0 {
            return bad("predicted must be at least 1".into());
        }
        if self.conv_kernel == 0 {
            return bad("conv_kernel must be at least 1".into());
        }
        if self.box_sizes.is_empty() || self.box_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "box_sizes {:?} must be strictly increasing",
                self.box_sizes
            ));
        }
        if self.box_sizes[0] == 0 {
            return bad("box sizes must be positive".into());
        }
        if *self.box_sizes.last().expect("non-empty") != self.observed + 1 {
            return bad(format!(
                "last box size {} must equal observed + 1 = {}",
                self.box_sizes.last().expect("non-empty"),
                self.observed + 1
            ));
        }
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return bad(format!("radius = {} must be positive", self.radius));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout = {} must lie in [0, 1)", self.dropout));
        }
        if !(self.lambda1.is_finite() && self.lambda1 >= 0.0) {
            return bad(format!("lambda1 = {} must be non-negative", self.lambda1));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr = {} must be positive", self.lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!(
                "weight_decay = {} must be non-negative",
                self.weight_decay
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, DataError> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| DataError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_text()).map_err(|e| DataError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = ModelConfig::default();
        c.hidden = 32;
        c.lambda1 = 2.5;
        assert_eq!(ModelConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = ModelConfig::parse("hidden = 64\nwidth = 3\n").unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
    }

    #[test]
    fn partial_file_uses_defaults() {
        let c = ModelConfig::parse("modes = 3\n").unwrap();
        assert_eq!(c.modes, 3);
        assert_eq!(c.hidden, 64);
    }

    #[test]
    fn invariants_enforced() {
        assert!(ModelConfig::parse("heads = 5\n").is_err());
        assert!(ModelConfig::parse("box_sizes = [7, 3, 21]\n").is_err());
        assert!(ModelConfig::parse("box_sizes = [3, 7, 20]\n").is_err());
        assert!(ModelConfig::parse("dropout = 1.0\n").is_err());
    }
}
