//! Visual backbones. Each maps a batch of crops `(M, 3, S, S)` to an `M x F`
//! feature matrix and carries a single fully connected head producing `N`
//! class scores (the pseudo classifier in the fused model, the final
//! classifier in the visual baseline).

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{max_pool2x2, Conv2d, Linear, ParamBuilder};
use crate::synth::CHANNELS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    /// Three conv blocks and global average pooling.
    #[default]
    SmallCnn,
    /// Stages of paired 3x3 convolutions followed by max pooling.
    Vgg16Like,
    /// Residual basic blocks with projection shortcuts.
    ResnetLike,
}

impl BackboneKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::SmallCnn => "small-cnn",
            Self::Vgg16Like => "vgg16-like",
            Self::ResnetLike => "resnet-like",
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small-cnn" => Ok(Self::SmallCnn),
            "vgg16-like" => Ok(Self::Vgg16Like),
            "resnet-like" => Ok(Self::ResnetLike),
            other => Err(Error::Config(format!(
                "unknown backbone `{other}` (expected small-cnn, vgg16-like or resnet-like)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Channels of the first stage; later stages double it.
    pub base_width: usize,
    /// F, the width of the pooled feature vector.
    pub feature_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::SmallCnn,
            base_width: 32,
            feature_dim: 128,
        }
    }
}

#[derive(Clone)]
enum Stage {
    Conv(Conv2d),
    Pool,
    Residual {
        a: Conv2d,
        b: Conv2d,
        shortcut: Option<Conv2d>,
    },
}

/// Per-crop visual features and pseudo-classifier logits.
#[derive(Debug, Clone)]
pub struct VisualFeatures {
    /// `M x F`
    pub features: Tensor,
    /// `M x N`
    pub pseudo_logits: Tensor,
}

#[derive(Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    stages: Vec<Stage>,
    head: Linear,
}

impl Backbone {
    pub fn new(cfg: &BackboneConfig, num_classes: usize, pb: &mut ParamBuilder) -> Result<Self> {
        if cfg.base_width == 0 || cfg.feature_dim == 0 || num_classes == 0 {
            return Err(Error::Config("backbone widths and class count must be positive".into()));
        }
        let w = cfg.base_width;
        let f = cfg.feature_dim;
        let mut stages = Vec::new();
        match cfg.kind {
            BackboneKind::SmallCnn => {
                stages.push(Stage::Conv(pb.conv3x3("backbone.conv1", CHANNELS, w)?));
                stages.push(Stage::Pool);
                stages.push(Stage::Conv(pb.conv3x3("backbone.conv2", w, 2 * w)?));
                stages.push(Stage::Pool);
                stages.push(Stage::Conv(pb.conv3x3("backbone.conv3", 2 * w, f)?));
            }
            BackboneKind::Vgg16Like => {
                let widths = [w, 2 * w, 4 * w, f];
                let mut prev = CHANNELS;
                for (s, &out) in widths.iter().enumerate() {
                    stages.push(Stage::Conv(pb.conv3x3(&format!("backbone.stage{s}.conv1"), prev, out)?));
                    stages.push(Stage::Conv(pb.conv3x3(&format!("backbone.stage{s}.conv2"), out, out)?));
                    if s + 1 < widths.len() {
                        stages.push(Stage::Pool);
                    }
                    prev = out;
                }
            }
            BackboneKind::ResnetLike => {
                stages.push(Stage::Conv(pb.conv3x3("backbone.stem", CHANNELS, w)?));
                let widths = [w, 2 * w, f];
                let mut prev = w;
                for (s, &out) in widths.iter().enumerate() {
                    let a = pb.conv3x3(&format!("backbone.block{s}.conv1"), prev, out)?;
                    let b = pb.conv3x3(&format!("backbone.block{s}.conv2"), out, out)?;
                    let shortcut = if prev != out {
                        Some(pb.conv(&format!("backbone.block{s}.shortcut"), prev, out, 1)?)
                    } else {
                        None
                    };
                    stages.push(Stage::Residual { a, b, shortcut });
                    if s + 1 < widths.len() {
                        stages.push(Stage::Pool);
                    }
                    prev = out;
                }
            }
        }
        let head = pb.linear("backbone.head", f, num_classes)?;
        Ok(Self {
            cfg: cfg.clone(),
            stages,
            head,
        })
    }

    pub fn kind(&self) -> BackboneKind {
        self.cfg.kind
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn feature_dim(&self) -> usize {
        self.cfg.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.head.out_dim()
    }

    /// The class-score head (`N x F` weight).
    pub fn head(&self) -> &Linear {
        &self.head
    }

    /// Pooled `M x F` features.
    pub fn features(&self, crops: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = crops.dims4().map_err(|_| {
            Error::Shape(format!("crops must be (M, C, S, S), got {:?}", crops.dims()))
        })?;
        if c != CHANNELS {
            return Err(Error::Shape(format!("expected {CHANNELS} channels, got {c}")));
        }
        if h < 4 || w < 4 {
            return Err(Error::Shape(format!("crops of {h}x{w} are too small")));
        }
        let mut x = crops.clone();
        for stage in &self.stages {
            x = match stage {
                Stage::Conv(conv) => conv.forward(&x)?.relu()?,
                Stage::Pool => {
                    let (_, _, h, w) = x.dims4()?;
                    if h >= 2 && w >= 2 {
                        max_pool2x2(&x)?
                    } else {
                        x
                    }
                }
                Stage::Residual { a, b, shortcut } => {
                    let y = b.forward(&a.forward(&x)?.relu()?)?;
                    let skip = match shortcut {
                        Some(s) => s.forward(&x)?,
                        None => x.clone(),
                    };
                    (y + skip)?.relu()?
                }
            };
        }
        Ok(x.mean((2, 3))?)
    }

    pub fn extract_features(&self, crops: &Tensor) -> Result<VisualFeatures> {
        let features = self.features(crops)?;
        let pseudo_logits = self.head.forward(&features)?;
        Ok(VisualFeatures {
            features,
            pseudo_logits,
        })
    }
}

/// Builds a backbone of the named kind with the default widths.
pub fn make_backbone(kind: &str, num_classes: usize, pb: &mut ParamBuilder) -> Result<Backbone> {
    let kind: BackboneKind = kind.parse()?;
    Backbone::new(
        &BackboneConfig {
            kind,
            ..BackboneConfig::default()
        },
        num_classes,
        pb,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn crops(m: usize, s: usize, seed: u64) -> Tensor {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..m * 3 * s * s).map(|_| rng.random()).collect();
        Tensor::from_vec(v, (m, 3, s, s), &Device::Cpu).unwrap()
    }

    #[test]
    fn small_cnn_shapes() {
        let mut pb = ParamBuilder::new(0, DType::F32, &Device::Cpu);
        let bb = make_backbone("small-cnn", 76, &mut pb).unwrap();
        assert_eq!(bb.head().weight().dims(), &[76, 128]);
        let out = bb.extract_features(&crops(3, 16, 0)).unwrap();
        assert_eq!(out.features.dims(), &[3, 128]);
        assert_eq!(out.pseudo_logits.dims(), &[3, 76]);
    }

    #[test]
    fn every_kind_emits_n_scores() {
        for kind in ["small-cnn", "vgg16-like", "resnet-like"] {
            let mut pb = ParamBuilder::new(0, DType::F32, &Device::Cpu);
            let bb = Backbone::new(
                &BackboneConfig { kind: kind.parse().unwrap(), base_width: 4, feature_dim: 16 },
                76,
                &mut pb,
            )
            .unwrap();
            let out = bb.extract_features(&crops(2, 16, 1)).unwrap();
            assert_eq!(out.pseudo_logits.dims(), &[2, 76], "{kind}");
            assert_eq!(bb.kind().to_string(), kind);
        }
    }

    #[test]
    fn unknown_kind_is_config_error() {
        let mut pb = ParamBuilder::new(0, DType::F32, &Device::Cpu);
        assert!(matches!(make_backbone("alexnet", 76, &mut pb), Err(Error::Config(_))));
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let mut pb = ParamBuilder::new(0, DType::F32, &Device::Cpu);
        let bb = make_backbone("small-cnn", 4, &mut pb).unwrap();
        let gray = Tensor::zeros((2, 1, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(bb.extract_features(&gray), Err(Error::Shape(_))));
    }

    #[test]
    fn duplicate_crops_give_identical_rows() {
        let mut pb = ParamBuilder::new(3, DType::F64, &Device::Cpu);
        let bb = make_backbone("small-cnn", 5, &mut pb).unwrap();
        let one = crops(1, 16, 2).to_dtype(DType::F64).unwrap();
        let batch = Tensor::cat(&[&one, &one, &one], 0).unwrap();
        let out = bb.extract_features(&batch).unwrap().features.to_vec2::<f64>().unwrap();
        assert_eq!(out[0], out[1]);
        assert_eq!(out[0], out[2]);
        let again = bb.extract_features(&batch).unwrap().features.to_vec2::<f64>().unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let cfg = BackboneConfig { kind: BackboneKind::SmallCnn, base_width: 3, feature_dim: 6 };
        let mut pb = ParamBuilder::new(5, DType::F64, &Device::Cpu);
        let bb = Backbone::new(&cfg, 4, &mut pb).unwrap();
        let params = pb.finish();
        let x = crops(2, 8, 4).to_dtype(DType::F64).unwrap();
        let labels = [1usize, 3];
        let loss = |bb: &Backbone| {
            let logits = bb.extract_features(&x).unwrap().pseudo_logits;
            crate::losses::classification_loss_from_logits(&logits, None, &labels, 0.0).unwrap().0
        };
        let var = params.get("backbone.conv2.weight").unwrap().clone();
        let grads = loss(&bb).backward().unwrap();
        let auto = grads.get(&var).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let h = 1e-6;
        for idx in [0usize, 7, 25, 60] {
            let eval = |delta: f64| {
                let mut w = base.clone();
                w[idx] += delta;
                var.set(&Tensor::from_vec(w, var.dims(), &Device::Cpu).unwrap()).unwrap();
                loss(&bb).to_scalar::<f64>().unwrap()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            var.set(&Tensor::from_vec(base.clone(), var.dims(), &Device::Cpu).unwrap()).unwrap();
            let rel = (numeric - auto[idx]).abs() / numeric.abs().max(auto[idx].abs()).max(1e-7);
            assert!(rel < 1e-3, "weight {idx}: numeric {numeric} vs autodiff {}", auto[idx]);
        }
    }
}
