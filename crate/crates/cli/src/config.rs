//! Run configuration: JSON file merged under command-line flags.
//! Precedence is flags > file > defaults.

use std::path::Path;

use isense_core::encoder::ModelConfig;
use isense_core::pooling::PoolingSpec;
use isense_core::training::TrainConfig;
use serde::Deserialize;

use crate::CliError;

fn default_k() -> usize {
    4
}
fn default_d() -> usize {
    32
}
fn default_layers() -> usize {
    2
}
fn default_heads() -> usize {
    4
}
fn default_vocab() -> usize {
    512
}
fn default_max_len() -> usize {
    16
}

/// Model section with desk-scale defaults for every omitted field.
#[derive(Clone, Debug, Deserialize)]
pub struct ModelSection {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    /// Vocabulary cap passed to the builder; the stored config records the
    /// actual size.
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            k: default_k(),
            d: default_d(),
            n_layers: default_layers(),
            n_heads: default_heads(),
            vocab_size: default_vocab(),
            max_len: default_max_len(),
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self) -> ModelConfig {
        ModelConfig {
            k: self.k,
            d: self.d,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            vocab_size: self.vocab_size,
            max_len: self.max_len,
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub pooling: Option<PoolingSpec>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig, CliError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::Usage(format!("cannot read config {}: {e}", p.display()))
                })?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("bad config {}: {e}", p.display())))
            }
        }
    }

    /// Apply flag overrides: flags win over file values.
    pub fn with_overrides(
        mut self,
        seed: Option<u64>,
        pooling: Option<PoolingSpec>,
    ) -> RunConfig {
        if seed.is_some() {
            self.seed = seed;
        }
        if pooling.is_some() {
            self.pooling = pooling;
        }
        self
    }

    pub fn effective_seed(&self) -> u64 {
        self.seed.unwrap_or(42)
    }

    /// Training config with the run seed folded in (explicit train.seed in
    /// the file wins over the derived one only when no --seed flag is set;
    /// the caller passes the resolved value).
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        if self.seed.is_some() || t.seed == 0 {
            t.seed = self.effective_seed();
        }
        t
    }
}
