use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FocalError, Result};
use crate::geometry::FocalLevel;
use crate::layers::{join, LayerNorm, Linear, Params};
use crate::tensor::Tensor;

/// Hyper-parameters of one focal attention layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionGeometry {
    /// Window partition size.
    pub window: usize,
    pub levels: Vec<FocalLevel>,
    pub dim: usize,
    pub heads: usize,
}

impl AttentionGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(FocalError::config("window", "must be >= 1"));
        }
        if self.levels.is_empty() {
            return Err(FocalError::config("levels", "at least one focal level is required"));
        }
        for l in &self.levels {
            l.validate()?;
        }
        if self.levels[0].sub_window != 1 {
            return Err(FocalError::config("levels[0].sub_window", "the first level must be unpooled (1)"));
        }
        // a smaller first region can leave a query with no valid key
        if self.levels[0].region < self.window {
            return Err(FocalError::config("levels[0].region", "must be >= window"));
        }
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(FocalError::config(
                "dim",
                format!("{} is not divisible by {} heads", self.dim, self.heads),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Edge of the first-level bias table, `window + region - 1`.
    pub fn fine_table_extent(&self) -> usize {
        self.window + self.levels[0].region - 1
    }

    /// Added to a key-minus-query token offset to index the first-level table.
    pub fn fine_table_offset(&self) -> isize {
        let extra = self.levels[0].region as isize - self.window as isize;
        self.window as isize - 1 + extra.div_euclid(2)
    }

    pub fn keys(&self) -> usize {
        crate::geometry::key_count(&self.levels)
    }
}

/// Learnable state of focal self-attention: per-level sub-window pooling,
/// shared q/k/v projections, output projection and relative position biases.
#[derive(Debug, Clone, PartialEq)]
pub struct FocalAttentionParams {
    pub geometry: AttentionGeometry,
    /// `pool[l]` maps the `s_w^2` tokens of a sub-window to one token;
    /// absent for levels with `sub_window == 1`.
    pub pool: Vec<Option<Linear>>,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub proj: Linear,
    /// `[heads, E, E]` indexed by token offset, `E = window + region_0 - 1`.
    pub bias_fine: Tensor,
    /// `bias_coarse[l]` is `[heads, region_l, region_l]`; `None` at level 0.
    pub bias_coarse: Vec<Option<Tensor>>,
}

impl FocalAttentionParams {
    /// Default initialization: truncated-normal projections, mean pooling and
    /// zero position biases.
    pub fn init(geometry: AttentionGeometry, rng: &mut impl Rng) -> Result<Self> {
        geometry.validate()?;
        let d = geometry.dim;
        let pool = geometry
            .levels
            .iter()
            .map(|l| {
                (l.sub_window > 1).then(|| {
                    let n = l.sub_window * l.sub_window;
                    Linear {
                        weight: Tensor::full(&[1, n], 1.0 / n as f64),
                        bias: Some(Tensor::zeros(&[1])),
                    }
                })
            })
            .collect();
        let query = Linear::init(d, d, true, rng);
        let key = Linear::init(d, d, true, rng);
        let value = Linear::init(d, d, true, rng);
        let proj = Linear::init(d, d, true, rng);
        let e = geometry.fine_table_extent();
        let bias_fine = Tensor::zeros(&[geometry.heads, e, e]);
        let bias_coarse = geometry
            .levels
            .iter()
            .enumerate()
            .map(|(i, l)| (i > 0).then(|| Tensor::zeros(&[geometry.heads, l.region, l.region])))
            .collect();
        Ok(FocalAttentionParams {
            geometry,
            pool,
            query,
            key,
            value,
            proj,
            bias_fine,
            bias_coarse,
        })
    }

    /// Every tensor drawn from `U(-scale, scale)`, biases included.
    pub fn random(geometry: AttentionGeometry, scale: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut p = Self::init(geometry, rng)?;
        p.randomize(scale, rng);
        Ok(p)
    }

    /// Same structure, every entry zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, t| t.data_mut().fill(0.0));
        z
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        g.validate()?;
        let d = g.dim;
        for (name, lin) in [("query", &self.query), ("key", &self.key), ("value", &self.value), ("proj", &self.proj)] {
            if lin.weight.shape() != [d, d] {
                return Err(FocalError::config(name, format!("expected [{d}, {d}] weight")));
            }
        }
        if self.pool.len() != g.levels.len() || self.bias_coarse.len() != g.levels.len() {
            return Err(FocalError::config("levels", "per-level parameter count mismatch"));
        }
        for (l, level) in g.levels.iter().enumerate() {
            match (&self.pool[l], level.sub_window > 1) {
                (None, true) => {
                    return Err(FocalError::config(format!("pool[{l}]"), "missing pooling weights"));
                }
                (Some(p), true) if p.weight.shape() != [1, level.sub_window * level.sub_window] => {
                    return Err(FocalError::config(format!("pool[{l}]"), "wrong pooling weight extent"));
                }
                _ => {}
            }
            if l > 0 {
                let ok = self.bias_coarse[l]
                    .as_ref()
                    .is_some_and(|t| t.shape() == [g.heads, level.region, level.region]);
                if !ok {
                    return Err(FocalError::config(format!("bias_coarse[{l}]"), "extent must be [heads, region, region]"));
                }
            }
        }
        let e = g.fine_table_extent();
        if self.bias_fine.shape() != [g.heads, e, e] {
            return Err(FocalError::config("bias_fine", format!("extent must be [{}, {e}, {e}]", g.heads)));
        }
        Ok(())
    }
}

impl Params for FocalAttentionParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (l, p) in self.pool.iter().enumerate() {
            if let Some(p) = p {
                p.visit(&join(prefix, &format!("pool.{l}")), f);
            }
        }
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.proj.visit(&join(prefix, "proj"), f);
        f(&join(prefix, "bias_fine"), &self.bias_fine);
        for (l, b) in self.bias_coarse.iter().enumerate() {
            if let Some(b) = b {
                f(&join(prefix, &format!("bias_coarse.{l}")), b);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (l, p) in self.pool.iter_mut().enumerate() {
            if let Some(p) = p {
                p.visit_mut(&join(prefix, &format!("pool.{l}")), f);
            }
        }
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
        f(&join(prefix, "bias_fine"), &mut self.bias_fine);
        for (l, b) in self.bias_coarse.iter_mut().enumerate() {
            if let Some(b) = b {
                f(&join(prefix, &format!("bias_coarse.{l}")), b);
            }
        }
    }
}

/// A full pre-norm transformer block around focal attention.
#[derive(Debug, Clone, PartialEq)]
pub struct FocalLayerParams {
    pub norm1: LayerNorm,
    pub attn: FocalAttentionParams,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub const MLP_RATIO: usize = 4;

impl FocalLayerParams {
    pub fn init(geometry: AttentionGeometry, rng: &mut impl Rng) -> Result<Self> {
        let d = geometry.dim;
        let attn = FocalAttentionParams::init(geometry, rng)?;
        Ok(FocalLayerParams {
            norm1: LayerNorm::new(d),
            attn,
            norm2: LayerNorm::new(d),
            fc1: Linear::init(d, MLP_RATIO * d, true, rng),
            fc2: Linear::init(MLP_RATIO * d, d, true, rng),
        })
    }

    pub fn geometry(&self) -> &AttentionGeometry {
        &self.attn.geometry
    }
}

impl Params for FocalLayerParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.fc1.visit(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit(&join(prefix, "mlp.fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.fc1.visit_mut(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit_mut(&join(prefix, "mlp.fc2"), f);
    }
}
