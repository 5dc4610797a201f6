//! Minimal layer set on top of candle with seeded, reproducible initialization.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Named trainable variables of a model, in creation order.
#[derive(Clone, Default)]
pub struct Params {
    entries: Vec<(String, Var)>,
}

impl Params {
    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Deep copy of the current values.
    pub fn snapshot(&self) -> Result<Vec<Tensor>> {
        Ok(self
            .entries
            .iter()
            .map(|(_, v)| v.as_tensor().copy())
            .collect::<candle_core::Result<_>>()?)
    }

    pub fn restore(&self, values: &[Tensor]) -> Result<()> {
        for ((_, var), t) in self.entries.iter().zip(values) {
            var.set(t)?;
        }
        Ok(())
    }

    pub fn to_map(&self) -> HashMap<String, Tensor> {
        self.entries
            .iter()
            .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites every parameter from `map`; names and shapes must match.
    pub fn load_map(&self, map: &HashMap<String, Tensor>) -> Result<()> {
        if map.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                map.len(),
                self.entries.len()
            )));
        }
        for (name, var) in &self.entries {
            let t = map
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks tensor `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }
}

/// Creates parameters with `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` initial values.
pub struct ParamBuilder {
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
    params: Params,
}

impl ParamBuilder {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: device.clone(),
            params: Params::default(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<Var> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let count: usize = shape.iter().product();
        let values: Vec<f64> = (0..count)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.params.entries.push((name.to_string(), var.clone()));
        Ok(var)
    }

    pub fn linear(&mut self, name: &str, in_dim: usize, out_dim: usize) -> Result<Linear> {
        Ok(Linear {
            weight: self.uniform(&format!("{name}.weight"), &[out_dim, in_dim], in_dim)?,
            bias: self.uniform(&format!("{name}.bias"), &[out_dim], in_dim)?,
        })
    }

    pub fn conv3x3(&mut self, name: &str, in_ch: usize, out_ch: usize) -> Result<Conv2d> {
        self.conv(name, in_ch, out_ch, 3)
    }

    pub fn conv(&mut self, name: &str, in_ch: usize, out_ch: usize, k: usize) -> Result<Conv2d> {
        let fan_in = in_ch * k * k;
        Ok(Conv2d {
            weight: self.uniform(&format!("{name}.weight"), &[out_ch, in_ch, k, k], fan_in)?,
            bias: self.uniform(&format!("{name}.bias"), &[out_ch], fan_in)?,
            padding: k / 2,
        })
    }

    pub fn finish(self) -> Params {
        self.params
    }
}

#[derive(Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn weight(&self) -> &Tensor {
        self.weight.as_tensor()
    }

    pub fn bias(&self) -> &Tensor {
        self.bias.as_tensor()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, d) = x.dims2()?;
        if d != self.in_dim() {
            return Err(Error::Shape(format!(
                "linear layer expects {} inputs, got {d}",
                self.in_dim()
            )));
        }
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Var,
    padding: usize,
}

impl Conv2d {
    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let out = self.weight.dims()[0];
        let y = x.conv2d(&self.weight, self.padding, 1, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, out, 1, 1))?)?)
    }
}

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
///
/// Built from reshapes and max reductions because candle's fused max-pool
/// backward scales gradients by the window's share of maxima instead of
/// dividing by the number of ties.
pub fn max_pool2x2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (h2, w2) = (h / 2, w / 2);
    let x = if h % 2 == 1 || w % 2 == 1 {
        x.narrow(2, 0, 2 * h2)?.narrow(3, 0, 2 * w2)?
    } else {
        x.clone()
    };
    Ok(x.reshape((b, c, h2, 2, w2, 2))?.max(5)?.max(3)?)
}

/// Row-wise softmax over the last dimension.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, candle_core::D::Minus1)?)
}

pub fn log_softmax_rows(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::log_softmax(x, candle_core::D::Minus1)?)
}
