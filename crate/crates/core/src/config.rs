//! Experiment configuration: one TOML document with `[synth]`, `[graph]` and
//! `[train]` tables. Missing keys take their defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::embed::WalkConfig;
use crate::error::{Error, Result};
use crate::fusion::ProjectionConfig;
use crate::model::ModelConfig;
use crate::synth::SynthConfig;
use crate::train::{GraphConfig, Stage2Config, TrainConfig};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub graph: GraphConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    /// Full-size benchmark: 76 classes, 168 prescriptions.
    pub fn full_size() -> Self {
        Self::default()
    }

    /// Reduced benchmark that trains in seconds on one CPU core.
    pub fn desk() -> Self {
        Self {
            synth: SynthConfig::desk(),
            graph: GraphConfig::default(),
            train: TrainConfig {
                seed: 0,
                stage1: WalkConfig {
                    embedding_dim: 16,
                    ..WalkConfig::default()
                },
                stage2: Stage2Config {
                    image_size: 16,
                    epochs: 60,
                    ..Stage2Config::default()
                },
                model: ModelConfig {
                    backbone: BackboneConfig {
                        base_width: 8,
                        feature_dim: 32,
                        ..BackboneConfig::default()
                    },
                    projection: ProjectionConfig {
                        layer_dims: vec![64, 32, 16],
                    },
                    ..ModelConfig::default()
                },
                ..TrainConfig::default()
            },
        }
    }

    /// Same experiment with a different seed for data generation, graph
    /// embedding and visual training alike.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.synth.seed = seed;
        c.train.seed = seed;
        c.train.stage1.seed = seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.graph.cut_ratio) {
            return Err(Error::Config(format!(
                "cut_ratio {} outside [0, 1]",
                self.graph.cut_ratio
            )));
        }
        let dims = &self.train.model.projection.layer_dims;
        if self.train.model.variant.has_projection() && dims.last() != Some(&self.train.stage1.embedding_dim) {
            return Err(Error::Config(format!(
                "projection layer_dims {dims:?} must end at embedding_dim {}",
                self.train.stage1.embedding_dim
            )));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn presets_validate_and_round_trip() {
        for cfg in [ExperimentConfig::full_size(), ExperimentConfig::desk()] {
            cfg.validate().unwrap();
            let text = cfg.to_toml_string().unwrap();
            assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
        }
    }

    #[test]
    fn full_size_defaults() {
        let c = ExperimentConfig::full_size();
        assert_eq!((c.synth.num_classes, c.synth.num_prescriptions), (76, 168));
        assert_eq!(c.train.stage2.batch_size, 32);
        assert_eq!(c.train.stage2.learning_rate, 1e-3);
        assert_eq!(c.train.model.projection.layer_dims, vec![512, 256, 64]);
        assert_eq!(c.train.stage1.embedding_dim, 64);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c = ExperimentConfig::from_toml_str(
            "[train.model]\nvariant = \"no-pseudo\"\n[graph]\ncut_ratio = 0.2\n",
        )
        .unwrap();
        assert_eq!(c.train.model.variant, Variant::NoPseudo);
        assert_eq!(c.graph.cut_ratio, 0.2);
        assert_eq!(c.synth, SynthConfig::default());
    }

    #[test]
    fn invalid_documents_are_config_errors() {
        for text in [
            "[graph]\ncut_ratio = 1.5\n",
            "[train.stage2]\nbatch_size = 1\n",
            "[train.loss]\nalpha = 1.0\n",
            "[synth]\ncrop_size = 4\n",
            "[train.stage1]\nembedding_dim = 32\n",
            "unknown = 1\n",
            "[train.model.backbone]\nkind = \"alexnet\"\n",
        ] {
            assert!(
                matches!(ExperimentConfig::from_toml_str(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn with_seed_moves_every_seed() {
        let c = ExperimentConfig::desk().with_seed(7);
        assert_eq!((c.synth.seed, c.train.seed, c.train.stage1.seed), (7, 7, 7));
    }
}
