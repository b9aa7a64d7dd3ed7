//! Run configuration file: one TOML document fixing every seed, model,
//! optimizer and pipeline setting of a run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ama::AmaConfig;
use crate::annotation::{BuildConfig, FilterConfig};
use crate::backbone::EncoderConfig;
use crate::error::{Error, Result};
use crate::lavs::LavsConfig;
use crate::optim::AdamWConfig;
use crate::train_eval::{Augmentation, TrainConfig};
use crate::vgnet::{LossWeights, ModalityMode, ModelConfig, VlConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderProfile {
    #[default]
    Toy,
    Paper,
}

/// Encoder profile plus optional per-field overrides.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub profile: EncoderProfile,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_layers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_heads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text_max_len: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text_dim: Option<usize>,
}

impl EncoderSection {
    pub fn resolve(&self, seed: u64) -> EncoderConfig {
        let mut c = match self.profile {
            EncoderProfile::Toy => EncoderConfig::toy(),
            EncoderProfile::Paper => EncoderConfig::paper(),
        };
        c.num_layers = self.num_layers.unwrap_or(c.num_layers);
        c.dim = self.dim.unwrap_or(c.dim);
        c.num_heads = self.num_heads.unwrap_or(c.num_heads);
        c.patch_size = self.patch_size.unwrap_or(c.patch_size);
        c.image_size = self.image_size.unwrap_or(c.image_size);
        c.text_max_len = self.text_max_len.unwrap_or(c.text_max_len);
        c.text_dim = self.text_dim.or(c.text_dim);
        c.seed = seed;
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub modality: ModalityMode,
    pub use_ama: bool,
    pub vl_layers: usize,
    pub vl_heads: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ground_dim: Option<usize>,
    pub head_hidden_dims: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = ModelConfig::toy();
        Self {
            modality: t.modality,
            use_ama: t.use_ama,
            vl_layers: t.vl.layers,
            vl_heads: t.vl.heads,
            ground_dim: None,
            head_hidden_dims: t.head_hidden_dims,
        }
    }
}

/// Optimization schedule. The seed and loss weights come from the top
/// level and `[loss]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    pub eval_every_epochs: usize,
    pub optimizer: AdamWConfig,
    pub augment: Augmentation,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            max_steps: t.max_steps,
            eval_every_epochs: t.eval_every_epochs,
            optimizer: t.optimizer,
            augment: t.augment,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotationSection {
    pub max_retries: usize,
}

impl Default for AnnotationSection {
    fn default() -> Self {
        Self {
            max_retries: BuildConfig::default().max_retries,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds the frozen towers, the trainable initialization and the data
    /// order.
    pub seed: u64,
    pub encoder: EncoderSection,
    pub model: ModelSection,
    pub ama: AmaConfig,
    pub lavs: LavsConfig,
    pub loss: LossWeights,
    pub train: TrainSection,
    pub filter: FilterConfig,
    pub annotation: AnnotationSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.resolve(self.seed),
            ama: self.ama.clone(),
            lavs: self.lavs.clone(),
            modality: self.model.modality,
            use_ama: self.model.use_ama,
            vl: VlConfig {
                layers: self.model.vl_layers,
                heads: self.model.vl_heads,
                dim: self.model.ground_dim,
            },
            head_hidden_dims: self.model.head_hidden_dims.clone(),
            seed: self.seed,
        }
    }

    /// Train settings with the run seed and the `[loss]` weights applied.
    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            max_steps: t.max_steps,
            optimizer: t.optimizer,
            loss: self.loss,
            augment: t.augment,
            eval_every_epochs: t.eval_every_epochs,
            seed: self.seed,
        }
    }

    pub fn build_config(&self) -> BuildConfig {
        BuildConfig {
            filter: self.filter.clone(),
            max_retries: self.annotation.max_retries,
        }
    }

    /// Checks every section and the cross-field rules before any work.
    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train_config().validate()?;
        self.filter.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_toy_default() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c.model_config(), ModelConfig::toy());
        assert_eq!(c.train_config().learning_rate, 1e-4);
    }

    #[test]
    fn cross_field_rules_are_enforced() {
        let err = RunConfig::from_toml("[model]\nuse_ama = false\n").unwrap_err().to_string();
        assert!(err.contains("use_lavs requires use_ama"), "{err}");
        let err = RunConfig::from_toml("[model]\nmodality = \"TIR\"\n").unwrap_err().to_string();
        assert!(err.contains("requires modality RGBT"), "{err}");
        let err = RunConfig::from_toml("[ama]\nr_v = 16\nr_t = 8\n").unwrap_err().to_string();
        assert!(err.contains("r_v <= r_t"), "{err}");
        assert!(RunConfig::from_toml("[model]\nuse_ama = false\n[lavs]\nenabled = false\n").is_ok());
        assert!(RunConfig::from_toml("bogus = 1\n").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.seed = 9;
        c.train.max_steps = Some(50);
        c.encoder.dim = Some(64);
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
