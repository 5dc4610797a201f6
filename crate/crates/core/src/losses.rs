//! Training objectives: cross-entropy on both heads, a symmetric-KL linkage
//! loss between pairwise conditional similarities of visual and graph points,
//! and their weighted sum.
//!
//! Conditionals use the kernel `K(a, b) = exp(cos(a, b) / τ)`, normalized per
//! column over the off-diagonal entries.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::log_softmax_rows;

const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the pseudo-classifier cross-entropy.
    pub beta_loose: f64,
    /// Weight of the classification loss against the linkage loss.
    pub alpha: f64,
    /// Kernel temperature τ.
    pub kernel_temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta_loose: 0.1,
            alpha: 0.9,
            kernel_temperature: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta_loose) {
            return Err(Error::Config(format!("beta_loose {} not in [0, 1]", self.beta_loose)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} not in (0, 1)", self.alpha)));
        }
        if !(self.kernel_temperature > 0.0 && self.kernel_temperature.is_finite()) {
            return Err(Error::Config("kernel_temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Loss values of one step. `total = alpha * classification + (1 - alpha) * linkage`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub classification: f64,
    pub linkage: f64,
    pub total: f64,
    /// The `beta_loose`-weighted pseudo-head cross-entropy (already included
    /// in `classification`).
    pub pseudo_term: f64,
}

fn one_hot(labels: &[usize], n: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut v = vec![0f64; labels.len() * n];
    for (r, &l) in labels.iter().enumerate() {
        if l >= n {
            return Err(Error::Domain(format!("label {l} out of range for {n} classes")));
        }
        v[r * n + l] = 1.0;
    }
    Ok(Tensor::from_vec(v, (labels.len(), n), device)?.to_dtype(dtype)?)
}

/// Mean over rows of `-log p[label]`, from log-probabilities.
fn mean_nll(log_probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (m, n) = log_probs.dims2()?;
    if m != labels.len() || m == 0 {
        return Err(Error::Shape(format!("{m} rows but {} labels", labels.len())));
    }
    let mask = one_hot(labels, n, log_probs.dtype(), log_probs.device())?;
    Ok(((log_probs * mask)?.sum_all()? / -(m as f64))?)
}

fn cross_entropy_probs(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (m, n) = probs.dims2()?;
    if m != labels.len() {
        return Err(Error::Shape(format!("{m} rows but {} labels", labels.len())));
    }
    let rows = probs.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    for (r, row) in rows.iter().enumerate() {
        if (row.iter().sum::<f64>() - 1.0).abs() > 1e-5 {
            return Err(Error::Domain(format!("probability row {r} does not sum to 1")));
        }
        if labels[r] < n && row[labels[r]] <= 0.0 {
            log::warn!("true-class probability of row {r} is 0; clamping to {PROB_FLOOR:e}");
        }
    }
    mean_nll(&probs.clamp(PROB_FLOOR, 1.0)?.log()?, labels)
}

/// Cross-entropy of the final head plus `beta_loose` times that of the pseudo
/// head, each averaged over crops. Inputs are probability rows.
pub fn classification_loss(
    final_probs: &Tensor,
    pseudo_probs: &Tensor,
    labels: &[usize],
    beta_loose: f64,
) -> Result<Tensor> {
    let main = cross_entropy_probs(final_probs, labels)?;
    if beta_loose == 0.0 {
        return Ok(main);
    }
    Ok((main + (cross_entropy_probs(pseudo_probs, labels)? * beta_loose)?)?)
}

/// Same loss from raw logits (numerically stable). Returns the total and the
/// weighted pseudo term separately; `pseudo_logits = None` drops that term.
pub fn classification_loss_from_logits(
    final_logits: &Tensor,
    pseudo_logits: Option<&Tensor>,
    labels: &[usize],
    beta_loose: f64,
) -> Result<(Tensor, Option<Tensor>)> {
    let main = mean_nll(&log_softmax_rows(final_logits)?, labels)?;
    match pseudo_logits {
        Some(p) if beta_loose > 0.0 => {
            let term = (mean_nll(&log_softmax_rows(p)?, labels)? * beta_loose)?;
            Ok(((main + &term)?, Some(term)))
        }
        _ => Ok((main, None)),
    }
}

fn normalized_rows(points: &Tensor) -> Result<Tensor> {
    let (m, _) = points.dims2()?;
    if m < 2 {
        return Err(Error::Domain(format!("conditionals need at least 2 points, got {m}")));
    }
    let norms = points.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let min = norms.min_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if min.is_nan() || min <= 0.0 {
        return Err(Error::Domain("zero-norm row: cosine similarity undefined".into()));
    }
    Ok(points.broadcast_div(&norms)?)
}

/// Kernel matrix with a zero diagonal.
fn off_diagonal_kernel(points: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("temperature {tau} must be positive")));
    }
    let x = normalized_rows(points)?;
    let (m, _) = x.dims2()?;
    let cos = x.matmul(&x.t()?)?;
    let off = (Tensor::ones((m, m), x.dtype(), x.device())? - Tensor::eye(m, x.dtype(), x.device())?)?;
    Ok(((cos / tau)?.exp()? * off)?)
}

/// `M x M` conditionals: entry `[i][j]` is `K(x_i, x_j) / Σ_{k≠j} K(x_k, x_j)`;
/// the diagonal is 0 and every column sums to 1.
pub fn conditional_distribution(points: &Tensor, tau: f64) -> Result<Tensor> {
    let k = off_diagonal_kernel(points, tau)?;
    Ok(k.broadcast_div(&k.sum_keepdim(0)?)?)
}

/// Joint density `K(x_i, x_j) / Σ_{k≠l} K(x_k, x_l)` with a zero diagonal.
/// Only used as a reference; training uses the conditionals.
pub fn joint_density(points: &Tensor, tau: f64) -> Result<Tensor> {
    let k = off_diagonal_kernel(points, tau)?;
    Ok(k.broadcast_div(&k.sum_all()?)?)
}

/// Symmetric KL divergence between the conditionals of the projected visual
/// points and those of the graph points:
/// `½ Σ_{i≠j} (u - v)(log u - log v)`.
pub fn linkage_loss(projected: &Tensor, graph_points: &Tensor, tau: f64) -> Result<Tensor> {
    if projected.dims() != graph_points.dims() {
        return Err(Error::Shape(format!(
            "projected {:?} and graph points {:?} differ",
            projected.dims(),
            graph_points.dims()
        )));
    }
    let v = conditional_distribution(projected, tau)?;
    let u = conditional_distribution(graph_points, tau)?;
    let (m, _) = v.dims2()?;
    // Diagonals are 0 on both sides; shifting them to 1 keeps the logs finite
    // while (u - v) still zeroes their contribution.
    let eye = Tensor::eye(m, v.dtype(), v.device())?;
    let log_u = (&u + &eye)?.log()?;
    let log_v = (&v + &eye)?.log()?;
    Ok((((u - v)? * (log_u - log_v)?)?.sum_all()? * 0.5)?)
}

/// `alpha * lc + (1 - alpha) * ll`.
pub fn total_loss(lc: f64, ll: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha {alpha} not in (0, 1)")));
    }
    Ok(alpha * lc + (1.0 - alpha) * ll)
}

/// Tensor form of [`total_loss`]; a missing linkage term counts as 0.
pub fn combine_losses(lc: &Tensor, ll: Option<&Tensor>, alpha: f64) -> Result<Tensor> {
    total_loss(0.0, 0.0, alpha)?;
    let weighted = (lc * alpha)?;
    Ok(match ll {
        Some(ll) => (weighted + (ll * (1.0 - alpha))?)?,
        None => weighted,
    })
}
