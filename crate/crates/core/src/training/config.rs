use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Ablation, ModelConfig};

/// Everything a training run needs. Serialized as a flat `key = value` TOML
/// file; missing keys take the desk defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dim: usize,
    pub heads: usize,
    pub ica_layers: usize,
    pub units: usize,
    pub k: usize,
    pub sinkhorn_iters: usize,
    pub no_bilateral_context: bool,
    pub vanilla_attention: bool,
    pub random_sampling: bool,
    /// Weight of the matchability classification terms.
    pub lambda: f64,
    pub learning_rate: f64,
    pub lr_decay: Option<f64>,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub class_balanced: bool,
    /// Pairs with fewer ground-truth matches are skipped.
    pub min_matches: usize,
    /// Match threshold used for the logged precision.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        let m = ModelConfig::desk();
        Self {
            dim: m.dim,
            heads: m.heads,
            ica_layers: m.ica_layers,
            units: m.units,
            k: m.k,
            sinkhorn_iters: m.sinkhorn_iters,
            no_bilateral_context: false,
            vanilla_attention: false,
            random_sampling: false,
            lambda: 5.0,
            learning_rate: 2e-3,
            lr_decay: None,
            batch_size: 1,
            iterations: 5000,
            seed: 0,
            class_balanced: false,
            min_matches: 10,
            threshold: 0.2,
        }
    }

    /// Full-size architecture with the published optimizer settings.
    pub fn full() -> Self {
        let m = ModelConfig::full();
        Self {
            dim: m.dim,
            heads: m.heads,
            ica_layers: m.ica_layers,
            units: m.units,
            k: m.k,
            learning_rate: 1e-4,
            min_matches: 50,
            ..Self::desk()
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            heads: self.heads,
            ica_layers: self.ica_layers,
            units: self.units,
            k: self.k,
            sinkhorn_iters: self.sinkhorn_iters,
            ablation: self.ablation(),
        }
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            no_bilateral_context: self.no_bilateral_context,
            vanilla_attention: self.vanilla_attention,
            random_sampling: self.random_sampling,
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.no_bilateral_context = ablation.no_bilateral_context;
        self.vanilla_attention = ablation.vanilla_attention;
        self.random_sampling = ablation.random_sampling;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config("threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }
}
