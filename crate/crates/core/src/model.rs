//! The assembled recognition model and its checkpoint format.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::fusion::{
    classify, condensed_features, grouped_attention, mean_context, project_v2g, AttentionConfig,
    FusionOutputs, Projection, ProjectionConfig,
};
use crate::nn::{Linear, ParamBuilder, Params};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Graph-assisted model with pseudo classifier, projection and attention.
    #[default]
    Full,
    /// Backbone and its classifier only.
    Baseline,
    /// Condensed features built from uniform class weights instead of the
    /// pseudo classifier; no pseudo loss.
    NoPseudo,
    /// Context is the plain mean of condensed features; no projection and no
    /// linkage loss.
    NoProjectionAttention,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::Baseline,
        Variant::NoPseudo,
        Variant::NoProjectionAttention,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Baseline => "baseline",
            Self::NoPseudo => "no-pseudo",
            Self::NoProjectionAttention => "no-projection-attention",
        }
    }

    pub fn uses_graph(self) -> bool {
        self != Self::Baseline
    }

    pub fn has_projection(self) -> bool {
        matches!(self, Self::Full | Self::NoPseudo)
    }

    pub fn has_pseudo_loss(self) -> bool {
        matches!(self, Self::Full | Self::NoProjectionAttention)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant `{s}` (expected full, baseline, no-pseudo or no-projection-attention)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub backbone: BackboneConfig,
    pub projection: ProjectionConfig,
    pub attention: AttentionConfig,
}

pub struct PillNet {
    cfg: ModelConfig,
    num_classes: usize,
    embed_dim: usize,
    backbone: Backbone,
    projection: Option<Projection>,
    classifier: Option<Linear>,
    params: Params,
}

const META_CONFIG: &str = "model_config";
const META_CLASSES: &str = "num_classes";
const META_EMBED: &str = "embed_dim";

impl PillNet {
    /// `embed_dim` is the graph embedding width `H`; it is ignored by the
    /// baseline, which never sees the graph.
    pub fn new(cfg: &ModelConfig, num_classes: usize, embed_dim: usize, seed: u64, dtype: DType) -> Result<Self> {
        let mut pb = ParamBuilder::new(seed, dtype, &Device::Cpu);
        let backbone = Backbone::new(&cfg.backbone, num_classes, &mut pb)?;
        let variant = cfg.variant;
        if variant.uses_graph() && embed_dim == 0 {
            return Err(Error::Config("graph embedding width must be positive".into()));
        }
        let projection = if variant.has_projection() {
            if cfg.projection.layer_dims.last() != Some(&embed_dim) {
                return Err(Error::Config(format!(
                    "projection must end at the embedding width {embed_dim}, got {:?}",
                    cfg.projection.layer_dims
                )));
            }
            Some(Projection::new(&cfg.projection, cfg.backbone.feature_dim, &mut pb)?)
        } else {
            None
        };
        let classifier = if variant.uses_graph() {
            Some(pb.linear("fusion.classifier", cfg.backbone.feature_dim + embed_dim, num_classes)?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            num_classes,
            embed_dim: if variant.uses_graph() { embed_dim } else { 0 },
            backbone,
            projection,
            classifier,
            params: pb.finish(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    /// Forward pass over a batch of crops `(M, 3, S, S)`. `groups` gives the
    /// crop count of each photo in order; `embeddings` is the frozen `N x H`
    /// graph embedding matrix (unused by the baseline).
    pub fn forward(&self, crops: &Tensor, groups: &[usize], embeddings: Option<&Tensor>) -> Result<FusionOutputs> {
        let vf = self.backbone.extract_features(crops)?;
        let variant = self.cfg.variant;
        if variant == Variant::Baseline {
            return Ok(FusionOutputs {
                features: vf.features,
                pseudo_logits: None,
                projected: None,
                condensed: None,
                context: None,
                final_logits: vf.pseudo_logits,
            });
        }
        let u = embeddings.ok_or_else(|| Error::Config("graph variants need embeddings".into()))?;
        let (un, uh) = u.dims2()?;
        if un != self.num_classes || uh != self.embed_dim {
            return Err(Error::Shape(format!(
                "embeddings are {un}x{uh}, model expects {}x{}",
                self.num_classes, self.embed_dim
            )));
        }
        let u = u.to_dtype(vf.features.dtype())?;
        let weights_source = if variant == Variant::NoPseudo {
            vf.pseudo_logits.zeros_like()?
        } else {
            vf.pseudo_logits.clone()
        };
        let condensed = condensed_features(&weights_source, &u)?;
        let (projected, context) = match &self.projection {
            Some(p) => {
                let projected = project_v2g(&vf.features, p, self.embed_dim)?;
                let att = grouped_attention(&projected, &condensed, groups, self.cfg.attention)?;
                (Some(projected), att.context)
            }
            None => (None, mean_context(&condensed, groups)?),
        };
        let classifier = self.classifier.as_ref().expect("graph variants own a classifier");
        let final_logits = classify(&vf.features, Some(&context), classifier)?;
        Ok(FusionOutputs {
            features: vf.features,
            pseudo_logits: (variant != Variant::NoPseudo).then_some(vf.pseudo_logits),
            projected,
            condensed: Some(condensed),
            context: Some(context),
            final_logits,
        })
    }

    /// Per-crop argmax of the final logits.
    pub fn predict(&self, crops: &Tensor, groups: &[usize], embeddings: Option<&Tensor>) -> Result<Vec<usize>> {
        let out = self.forward(crops, groups, embeddings)?;
        Ok(out.final_logits.argmax(1)?.to_vec1::<u32>()?.into_iter().map(|v| v as usize).collect())
    }

    /// Writes weights and the model shape to one safetensors file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = HashMap::new();
        meta.insert(META_CONFIG.to_string(), serde_json::to_string(&self.cfg)?);
        meta.insert(META_CLASSES.to_string(), self.num_classes.to_string());
        meta.insert(META_EMBED.to_string(), self.embed_dim.to_string());
        let map = self.params.to_map();
        let mut entries: Vec<(String, Tensor)> = map.into_iter().collect();
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let bytes = safetensors::serialize(entries, Some(meta))
            .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint and checks it against the expected class count and
    /// embedding width.
    pub fn load(path: &Path, num_classes: usize, embed_dim: usize) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                reason: "checkpoint not found".into(),
            });
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let meta = header
            .metadata()
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no model metadata".into()))?;
        let field = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint metadata lacks `{k}`")))
        };
        let cfg: ModelConfig = serde_json::from_str(field(META_CONFIG)?)?;
        let parse = |k: &str| -> Result<usize> {
            field(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad `{k}` in checkpoint metadata")))
        };
        let n = parse(META_CLASSES)?;
        let h = parse(META_EMBED)?;
        if n != num_classes {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {n} classes, expected {num_classes}"
            )));
        }
        if cfg.variant.uses_graph() && h != embed_dim {
            return Err(Error::Checkpoint(format!(
                "checkpoint expects {h}-dim embeddings, got {embed_dim}"
            )));
        }
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        let dtype = tensors.values().next().map_or(DType::F32, Tensor::dtype);
        let model = Self::new(&cfg, n, h, 0, dtype)?;
        model.params.load_map(&tensors)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneKind;
    use crate::fusion::{AttentionValues, Similarity};

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            backbone: BackboneConfig {
                kind: BackboneKind::SmallCnn,
                base_width: 4,
                feature_dim: 8,
            },
            projection: ProjectionConfig { layer_dims: vec![8, 6] },
            attention: AttentionConfig::default(),
        }
    }

    fn crops(m: usize) -> Tensor {
        let v: Vec<f32> = (0..m * 3 * 8 * 8).map(|i| ((i * 37 % 101) as f32) / 101.0).collect();
        Tensor::from_vec(v, (m, 3, 8, 8), &Device::Cpu).unwrap()
    }

    fn embeddings(n: usize, h: usize) -> Tensor {
        let v: Vec<f32> = (0..n * h).map(|i| ((i * 13 % 7) as f32 - 3.0) / 3.0).collect();
        Tensor::from_vec(v, (n, h), &Device::Cpu).unwrap()
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!("nope".parse::<Variant>(), Err(Error::Config(_))));
    }

    #[test]
    fn forward_shapes_per_variant() {
        let u = embeddings(5, 6);
        for v in Variant::ALL {
            let net = PillNet::new(&tiny(v), 5, 6, 1, DType::F32).unwrap();
            let out = net.forward(&crops(4), &[3, 1], Some(&u)).unwrap();
            assert_eq!(out.final_logits.dims(), &[4, 5], "{v}");
            assert_eq!(out.projected.is_some(), v.has_projection());
            assert_eq!(out.context.is_some(), v.uses_graph());
        }
    }

    #[test]
    fn no_pseudo_condensed_is_mean_embedding() {
        let u = embeddings(5, 6);
        let net = PillNet::new(&tiny(Variant::NoPseudo), 5, 6, 1, DType::F32).unwrap();
        let out = net.forward(&crops(2), &[2], Some(&u)).unwrap();
        let mean = u.mean_keepdim(0).unwrap().to_vec2::<f32>().unwrap()[0].clone();
        for row in out.condensed.unwrap().to_vec2::<f32>().unwrap() {
            for (a, b) in row.iter().zip(&mean) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn embedding_shape_is_checked() {
        let net = PillNet::new(&tiny(Variant::Full), 5, 6, 1, DType::F32).unwrap();
        assert!(matches!(
            net.forward(&crops(2), &[2], Some(&embeddings(4, 6))),
            Err(Error::Shape(_))
        ));
        assert!(PillNet::new(&tiny(Variant::Full), 5, 7, 1, DType::F32).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.safetensors");
        let mut cfg = tiny(Variant::Full);
        cfg.attention = AttentionConfig {
            similarity: Similarity::Cosine,
            values: AttentionValues::Projected,
        };
        let net = PillNet::new(&cfg, 5, 6, 9, DType::F32).unwrap();
        net.save(&path).unwrap();
        let back = PillNet::load(&path, 5, 6).unwrap();
        assert_eq!(back.config(), &cfg);
        let u = embeddings(5, 6);
        let a = net.forward(&crops(3), &[3], Some(&u)).unwrap().final_logits.to_vec2::<f32>().unwrap();
        let b = back.forward(&crops(3), &[3], Some(&u)).unwrap().final_logits.to_vec2::<f32>().unwrap();
        assert_eq!(a, b);
        assert!(matches!(PillNet::load(&path, 6, 6), Err(Error::Checkpoint(_))));
        assert!(matches!(PillNet::load(&path, 5, 8), Err(Error::Checkpoint(_))));
        assert!(matches!(
            PillNet::load(&dir.path().join("absent"), 5, 6),
            Err(Error::MissingArtifact { .. })
        ));
    }

    #[test]
    fn baseline_checkpoint_ignores_embedding_width() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.safetensors");
        PillNet::new(&tiny(Variant::Baseline), 5, 6, 0, DType::F32).unwrap().save(&path).unwrap();
        assert_eq!(PillNet::load(&path, 5, 64).unwrap().variant(), Variant::Baseline);
    }
}
