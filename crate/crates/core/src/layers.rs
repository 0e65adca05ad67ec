//! Parameterized building blocks shared by the attention layer and the model.

use rand::Rng;

use crate::error::Result;
use crate::init::{trunc_normal, uniform, INIT_STD};
use crate::tensor::{layer_norm, linear, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Visits named parameter tensors in a fixed, module-path order.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    /// Fills every parameter with `U(-scale, scale)`.
    fn randomize(&mut self, scale: f64, rng: &mut impl Rng)
    where
        Self: Sized,
    {
        self.visit_mut("", &mut |_, t| *t = uniform(t.shape(), scale, rng));
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[out_dim, in_dim]`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn init(in_dim: usize, out_dim: usize, bias: bool, rng: &mut impl Rng) -> Self {
        Linear {
            weight: trunc_normal(&[out_dim, in_dim], INIT_STD, rng),
            bias: bias.then(|| Tensor::zeros(&[out_dim])),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Linear {
            weight: Tensor::zeros(&[out_dim, in_dim]),
            bias: bias.then(|| Tensor::zeros(&[out_dim])),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Linear {
            weight: Tensor::identity(dim),
            bias: Some(Tensor::zeros(&[dim])),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        linear(x, &self.weight, self.bias.as_ref())
    }

    pub fn bias_at(&self, o: usize) -> f64 {
        self.bias.as_ref().map_or(0.0, |b| b.data()[o])
    }
}

impl Params for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::full(&[dim], 1.0),
            beta: Tensor::zeros(&[dim]),
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, &self.gamma, &self.beta, self.eps)
    }
}

impl Params for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}
