//! Layer building blocks: dense (affine) layers and learnable LayerNorm,
//! with seeded uniform initialization so every run is reproducible.

use crate::rng::Rng;
use crate::tensor::{layer_norm, Tensor};
use crate::Result;
use rand::Rng as _;

/// Kaiming-style uniform init: U(−1/√fan_in, 1/√fan_in), drawn in index order.
pub fn uniform_init(rng: &mut Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Affine map `y = W·x + b` with `W: [out, in]`, `b: [out]`.
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    /// Seeded init: weight U(−1/√in, 1/√in), bias zero.
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Result<Self> {
        let weight = Tensor::param(uniform_init(rng, in_dim, in_dim * out_dim), &[out_dim, in_dim])?;
        let bias = Tensor::param(vec![0.0; out_dim], &[out_dim])?;
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    /// Rebuild from stored data (checkpoint load, frozen snapshots).
    pub fn from_data(
        weight: Vec<f64>,
        bias: Vec<f64>,
        in_dim: usize,
        out_dim: usize,
        trainable: bool,
    ) -> Result<Self> {
        let (w, b) = if trainable {
            (
                Tensor::param(weight, &[out_dim, in_dim])?,
                Tensor::param(bias, &[out_dim])?,
            )
        } else {
            (
                Tensor::from_vec(weight, &[out_dim, in_dim])?,
                Tensor::from_vec(bias, &[out_dim])?,
            )
        };
        Ok(Self { weight: w, bias: b, in_dim, out_dim })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.weight.matmul(x)?.add(&self.bias)
    }

    /// Parameters as (name, handle) pairs under the given prefix.
    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.weight"), self.weight.clone()),
            (format!("{prefix}.bias"), self.bias.clone()),
        ]
    }
}

/// LayerNorm over a vector with learnable gain and bias.
pub struct LayerNorm1d {
    pub gain: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

impl LayerNorm1d {
    /// Identity init: gain 1, bias 0.
    pub fn new(dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            gain: Tensor::param(vec![1.0; dim], &[dim])?,
            bias: Tensor::param(vec![0.0; dim], &[dim])?,
            eps,
        })
    }

    pub fn from_data(gain: Vec<f64>, bias: Vec<f64>, eps: f64, trainable: bool) -> Result<Self> {
        let n = gain.len();
        let (g, b) = if trainable {
            (Tensor::param(gain, &[n])?, Tensor::param(bias, &[n])?)
        } else {
            (Tensor::from_vec(gain, &[n])?, Tensor::from_vec(bias, &[n])?)
        };
        Ok(Self { gain: g, bias: b, eps })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, &self.gain, &self.bias, self.eps)
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.gain"), self.gain.clone()),
            (format!("{prefix}.bias"), self.bias.clone()),
        ]
    }
}
