//! Graph-assisted classification head.
//!
//! For the `M` crops of one intake photo:
//! * the V2G projection maps visual features into the graph embedding space;
//! * condensed relational features are `softmax(P) · U`, a per-crop convex
//!   combination of class embeddings weighted by the pseudo classifier;
//! * the context attention lets each crop's projected feature attend over the
//!   condensed features of every crop in the same photo;
//! * the final classifier reads `[features ‖ context]`.
//!
//! Batches hold several photos at once. `groups` lists the crop count of each
//! photo (rows are contiguous per photo) and attention never crosses photos.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax_rows, Linear, ParamBuilder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionConfig {
    /// Output width of each fully connected layer; the last must equal the
    /// graph embedding width.
    pub layer_dims: Vec<usize>,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            layer_dims: vec![512, 256, 64],
        }
    }
}

/// Stack of fully connected layers with tanh between them and no activation
/// after the last one.
#[derive(Clone)]
pub struct Projection {
    layers: Vec<Linear>,
}

impl Projection {
    pub fn new(cfg: &ProjectionConfig, in_dim: usize, pb: &mut ParamBuilder) -> Result<Self> {
        if cfg.layer_dims.is_empty() || cfg.layer_dims.contains(&0) {
            return Err(Error::Config("projection needs at least one non-empty layer".into()));
        }
        let mut layers = Vec::with_capacity(cfg.layer_dims.len());
        let mut prev = in_dim;
        for (k, &d) in cfg.layer_dims.iter().enumerate() {
            layers.push(pb.linear(&format!("projection.fc{k}"), prev, d)?);
            prev = d;
        }
        Ok(Self { layers })
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::out_dim)
    }

    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let mut x = features.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x)?;
            if k + 1 < self.layers.len() {
                x = x.tanh()?;
            }
        }
        Ok(x)
    }
}

/// Projects `M x F` features to `M x H`; `H` must be the embedding width.
pub fn project_v2g(features: &Tensor, projection: &Projection, embed_dim: usize) -> Result<Tensor> {
    if projection.output_dim() != embed_dim {
        return Err(Error::Config(format!(
            "projection emits {} dims but graph embeddings have {embed_dim}",
            projection.output_dim()
        )));
    }
    projection.forward(features)
}

/// `softmax(P) · U` for `M x N` logits and an `N x H` embedding matrix.
pub fn condensed_features(pseudo_logits: &Tensor, embeddings: &Tensor) -> Result<Tensor> {
    let (_, n) = pseudo_logits.dims2()?;
    let (un, _) = embeddings.dims2()?;
    if n != un {
        return Err(Error::Shape(format!(
            "logits cover {n} classes but the embedding matrix has {un} rows"
        )));
    }
    Ok(softmax_rows(pseudo_logits)?.matmul(embeddings)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Similarity {
    /// `q · k / sqrt(H)`
    #[default]
    ScaledDot,
    Dot,
    Cosine,
}

/// Which tensor plays query versus key/value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionValues {
    /// Projected features query the condensed graph features, which are also
    /// the values.
    #[default]
    Condensed,
    /// Condensed features query the projected features, which are also the
    /// values.
    Projected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub similarity: Similarity,
    pub values: AttentionValues,
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// `M x M` row-stochastic weights (zero across photo boundaries).
    pub weights: Tensor,
    /// `M x H`
    pub context: Tensor,
}

fn l2_normalize_rows(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

fn check_groups(groups: &[usize], rows: usize) -> Result<()> {
    if groups.iter().sum::<usize>() != rows || groups.contains(&0) {
        return Err(Error::Shape(format!(
            "group sizes {groups:?} do not partition {rows} rows"
        )));
    }
    Ok(())
}

/// Additive mask: 0 within a photo, a huge negative value across photos.
fn block_mask(groups: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let m: usize = groups.iter().sum();
    let mut mask = vec![-1e30f64; m * m];
    let mut start = 0;
    for &g in groups {
        for i in start..start + g {
            for k in start..start + g {
                mask[i * m + k] = 0.0;
            }
        }
        start += g;
    }
    Ok(Tensor::from_vec(mask, (m, m), device)?.to_dtype(dtype)?)
}

/// Block-diagonal averaging matrix: `1/|g|` within each photo.
fn block_mean(groups: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let m: usize = groups.iter().sum();
    let mut avg = vec![0f64; m * m];
    let mut start = 0;
    for &g in groups {
        for i in start..start + g {
            for k in start..start + g {
                avg[i * m + k] = 1.0 / g as f64;
            }
        }
        start += g;
    }
    Ok(Tensor::from_vec(avg, (m, m), device)?.to_dtype(dtype)?)
}

/// Context attention over crops grouped by photo.
pub fn grouped_attention(
    projected: &Tensor,
    condensed: &Tensor,
    groups: &[usize],
    cfg: AttentionConfig,
) -> Result<AttentionOutput> {
    let (m, h) = projected.dims2()?;
    let (mc, hc) = condensed.dims2()?;
    if (m, h) != (mc, hc) {
        return Err(Error::Shape(format!(
            "projected is {m}x{h} but condensed is {mc}x{hc}"
        )));
    }
    check_groups(groups, m)?;
    let (query, values) = match cfg.values {
        AttentionValues::Condensed => (projected, condensed),
        AttentionValues::Projected => (condensed, projected),
    };
    let scores = match cfg.similarity {
        Similarity::ScaledDot => (query.matmul(&values.t()?)? / (h as f64).sqrt())?,
        Similarity::Dot => query.matmul(&values.t()?)?,
        Similarity::Cosine => l2_normalize_rows(query)?.matmul(&l2_normalize_rows(values)?.t()?)?,
    };
    let scores = if groups.len() > 1 {
        scores.broadcast_add(&block_mask(groups, scores.dtype(), scores.device())?)?
    } else {
        scores
    };
    let weights = softmax_rows(&scores)?;
    let context = weights.matmul(values)?;
    Ok(AttentionOutput { weights, context })
}

/// Context vectors for the crops of a single photo.
pub fn context_attention(projected: &Tensor, condensed: &Tensor, cfg: AttentionConfig) -> Result<Tensor> {
    let (m, _) = projected.dims2()?;
    Ok(grouped_attention(projected, condensed, &[m], cfg)?.context)
}

/// Attention-free context: every crop receives the mean condensed feature of
/// its photo.
pub fn mean_context(condensed: &Tensor, groups: &[usize]) -> Result<Tensor> {
    let (m, _) = condensed.dims2()?;
    check_groups(groups, m)?;
    Ok(block_mean(groups, condensed.dtype(), condensed.device())?.matmul(condensed)?)
}

/// Final classifier over `[features ‖ context]`, or over the features alone
/// when there is no context.
pub fn classify(features: &Tensor, context: Option<&Tensor>, classifier: &Linear) -> Result<Tensor> {
    let input = match context {
        Some(c) => {
            if c.dim(0)? != features.dim(0)? {
                return Err(Error::Shape("features and context disagree on row count".into()));
            }
            Tensor::cat(&[features, c], 1)?
        }
        None => features.clone(),
    };
    classifier.forward(&input)
}

/// Every intermediate of one forward pass. Optional entries are absent in the
/// variants that skip the corresponding module.
#[derive(Debug, Clone)]
pub struct FusionOutputs {
    /// `M x F`
    pub features: Tensor,
    /// `M x N`
    pub pseudo_logits: Option<Tensor>,
    /// `M x H`
    pub projected: Option<Tensor>,
    /// `M x H`
    pub condensed: Option<Tensor>,
    /// `M x H`
    pub context: Option<Tensor>,
    /// `M x N`
    pub final_logits: Tensor,
}
