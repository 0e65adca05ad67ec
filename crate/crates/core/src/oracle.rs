//! Slow reference implementations used as ground truth.
//!
//! Nothing here touches [`GatherPlan`](crate::geometry::GatherPlan) or the
//! fast-path bias lookup: every region, offset and key is recomputed per
//! query with scalar loops. Softmax and dense projections reuse the
//! `tensor` kernels so that a mismatch points at gathering or indexing.
//! Every multiply-accumulate is counted.

use serde::Serialize;

use crate::attention::{FocalAttentionParams, FocalLayerParams};
use crate::error::{FocalError, Result};
use crate::feature::FeatureMap;
use crate::layers::Linear;
use crate::model::Model;
use crate::tensor::{gelu, masked_softmax, Tensor};

/// Multiply-accumulate tallies by kind.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MacCounter {
    pub embed: u64,
    pub pool: u64,
    pub qkv: u64,
    pub attention: u64,
    pub proj: u64,
    pub mlp: u64,
    pub head: u64,
}

impl MacCounter {
    pub fn total(&self) -> u64 {
        self.embed + self.pool + self.qkv + self.attention + self.proj + self.mlp + self.head
    }

    fn absorb(&mut self, other: &MacCounter) {
        self.embed += other.embed;
        self.pool += other.pool;
        self.qkv += other.qkv;
        self.attention += other.attention;
        self.proj += other.proj;
        self.mlp += other.mlp;
        self.head += other.head;
    }
}

fn counted_linear(x: &Tensor, lin: &Linear, counter: &mut u64) -> Result<Tensor> {
    *counter += (x.rows() * lin.in_dim() * lin.out_dim()) as u64;
    lin.forward(x)
}

fn floor_half(v: isize) -> isize {
    (v as f64 / 2.0).floor() as isize
}

/// First covered cell and cell count of a window span `[lo, lo + len)` pooled
/// by `sw`.
fn pooled_span(lo: usize, len: usize, sw: usize) -> (isize, isize) {
    let first = (lo as f64 / sw as f64).floor() as isize;
    let last = ((lo + len) as f64 / sw as f64).ceil() as isize;
    (first, last - first)
}

/// Per-query, per-key scalar evaluation of focal self-attention.
pub fn naive_focal_forward(x: &FeatureMap, params: &FocalAttentionParams) -> Result<(FeatureMap, MacCounter)> {
    params.validate()?;
    let g = &params.geometry;
    let (m, n, d) = (x.height(), x.width(), x.channels());
    if d != g.dim {
        return Err(FocalError::config("dim", "input channels differ from attention dim"));
    }
    let mut macs = MacCounter::default();

    // pooled maps
    let mut pooled: Vec<FeatureMap> = Vec::new();
    for (l, level) in g.levels.iter().enumerate() {
        let sw = level.sub_window;
        if sw == 1 {
            pooled.push(x.clone());
            continue;
        }
        let pool = params.pool[l].as_ref().expect("validated");
        let (ph, pw) = (m.div_ceil(sw), n.div_ceil(sw));
        let mut map = FeatureMap::zeros(ph, pw, d);
        for i in 0..ph {
            for j in 0..pw {
                for c in 0..d {
                    let mut acc = 0.0;
                    for u in 0..sw {
                        for v in 0..sw {
                            let (r, cc) = (i * sw + u, j * sw + v);
                            if r < m && cc < n {
                                acc += pool.weight.get(&[0, u * sw + v]) * x.pixel(r, cc)[c];
                                macs.pool += 1;
                            }
                        }
                    }
                    map.pixel_mut(i, j)[c] = acc + pool.bias_at(0);
                }
            }
        }
        pooled.push(map);
    }

    let query = FeatureMap::from_tensor(counted_linear(x.as_tensor(), &params.query, &mut macs.qkv)?)?;
    let mut keys = Vec::new();
    let mut values = Vec::new();
    for map in &pooled {
        keys.push(FeatureMap::from_tensor(counted_linear(map.as_tensor(), &params.key, &mut macs.qkv)?)?);
        values.push(FeatureMap::from_tensor(counted_linear(map.as_tensor(), &params.value, &mut macs.qkv)?)?);
    }

    let sp = g.window;
    let dh = g.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut mixed = FeatureMap::zeros(m, n, d);
    for r in 0..m {
        for c in 0..n {
            let (wr, wc) = (r / sp, c / sp);
            // key list shared by all heads: (level, pooled row, pooled col, cell a, cell b, valid)
            let mut slots = Vec::new();
            let mut fine_min = (0isize, 0isize);
            for (l, level) in g.levels.iter().enumerate() {
                let (sw, sr) = (level.sub_window, level.region as isize);
                let (ph, pw) = (m.div_ceil(sw) as isize, n.div_ceil(sw) as isize);
                let (fr, fr_len) = pooled_span(wr * sp, sp, sw);
                let (fc, fc_len) = pooled_span(wc * sp, sp, sw);
                let top = fr - floor_half(sr - fr_len);
                let left = fc - floor_half(sr - fc_len);
                if l == 0 {
                    // smallest key-minus-query offset any query of this window sees
                    fine_min = (top - (wr * sp + sp - 1) as isize, left - (wc * sp + sp - 1) as isize);
                }
                for a in 0..sr {
                    for b in 0..sr {
                        let (pr, pc) = (top + a, left + b);
                        let valid = pr >= 0 && pc >= 0 && pr < ph && pc < pw;
                        slots.push((l, pr, pc, a as usize, b as usize, valid));
                    }
                }
            }
            let s = slots.len();
            let mask: Vec<bool> = slots.iter().map(|s| s.5).collect();
            let qrow = query.pixel(r, c).to_vec();
            let zeros = vec![0.0; d];
            for h in 0..g.heads {
                let mut logits = Tensor::zeros(&[s]);
                for (j, &(l, pr, pc, a, b, valid)) in slots.iter().enumerate() {
                    let key = if valid { keys[l].pixel(pr as usize, pc as usize) } else { &zeros[..] };
                    let mut dot = 0.0;
                    for e in 0..dh {
                        dot += qrow[h * dh + e] * key[h * dh + e];
                        macs.attention += 1;
                    }
                    let bias = if !valid {
                        0.0
                    } else if l == 0 {
                        let ir = (pr - r as isize - fine_min.0) as usize;
                        let ic = (pc - c as isize - fine_min.1) as usize;
                        params.bias_fine.get(&[h, ir, ic])
                    } else {
                        params.bias_coarse[l].as_ref().expect("validated").get(&[h, a, b])
                    };
                    logits.data_mut()[j] = dot * scale + bias;
                }
                let probs = masked_softmax(&logits, Some(&mask))?;
                for e in 0..dh {
                    let mut acc = 0.0;
                    for (j, &(l, pr, pc, _, _, valid)) in slots.iter().enumerate() {
                        let v = if valid { values[l].pixel(pr as usize, pc as usize)[h * dh + e] } else { 0.0 };
                        acc += probs.data()[j] * v;
                        macs.attention += 1;
                    }
                    mixed.pixel_mut(r, c)[h * dh + e] = acc;
                }
            }
        }
    }
    let out = FeatureMap::from_tensor(counted_linear(mixed.as_tensor(), &params.proj, &mut macs.proj)?)?;
    Ok((out, macs))
}

/// Plain multi-head softmax attention over `[n, d]` tokens, every token
/// attending every token, with the layer's projections and no bias.
pub fn full_attention_reference(tokens: &Tensor, params: &FocalAttentionParams) -> Result<Tensor> {
    let g = &params.geometry;
    if tokens.ndim() != 2 || tokens.last_dim() != g.dim {
        return Err(FocalError::Shape {
            lhs: tokens.shape().to_vec(),
            rhs: vec![g.dim],
            context: "full attention expects [n, dim] tokens",
        });
    }
    let (n, d) = (tokens.rows(), tokens.last_dim());
    let dh = g.head_dim();
    let q = params.query.forward(tokens)?;
    let k = params.key.forward(tokens)?;
    let v = params.value.forward(tokens)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut mixed = Tensor::zeros(&[n, d]);
    for h in 0..g.heads {
        let mut logits = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                let mut dot = 0.0;
                for e in 0..dh {
                    dot += q.get(&[i, h * dh + e]) * k.get(&[j, h * dh + e]);
                }
                logits.set(&[i, j], dot * scale);
            }
        }
        let p = masked_softmax(&logits, None)?;
        for i in 0..n {
            for e in 0..dh {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += p.get(&[i, j]) * v.get(&[j, h * dh + e]);
                }
                mixed.set(&[i, h * dh + e], acc);
            }
        }
    }
    params.proj.forward(&mixed)
}

/// Pre-norm block built from [`naive_focal_forward`].
pub fn naive_layer_forward(x: &FeatureMap, params: &FocalLayerParams) -> Result<(FeatureMap, MacCounter)> {
    let normed = FeatureMap::from_tensor(params.norm1.forward(x.as_tensor())?)?;
    let (attn, mut macs) = naive_focal_forward(&normed, &params.attn)?;
    let x1 = x.as_tensor().add(attn.as_tensor())?;
    let h = params.norm2.forward(&x1)?;
    let h = counted_linear(&h, &params.fc1, &mut macs.mlp)?;
    let h = counted_linear(&gelu(&h), &params.fc2, &mut macs.mlp)?;
    Ok((FeatureMap::from_tensor(x1.add(&h)?)?, macs))
}

/// Explicit stride-`p` convolution with a `p x p` kernel; input positions
/// past the edge read as zero but still count a MAC.
pub fn naive_patch_embed(x: &FeatureMap, patch: usize, embed: &Linear, macs: &mut u64) -> Result<FeatureMap> {
    let cin = x.channels();
    if embed.in_dim() != patch * patch * cin {
        return Err(FocalError::config("embed", "kernel size differs from patch * patch * channels"));
    }
    let (oh, ow, cout) = (x.height().div_ceil(patch), x.width().div_ceil(patch), embed.out_dim());
    let mut out = FeatureMap::zeros(oh, ow, cout);
    for i in 0..oh {
        for j in 0..ow {
            for o in 0..cout {
                let mut acc = embed.bias_at(o);
                for u in 0..patch {
                    for v in 0..patch {
                        for ch in 0..cin {
                            let (r, c) = (i * patch + u, j * patch + v);
                            let px = if r < x.height() && c < x.width() { x.pixel(r, c)[ch] } else { 0.0 };
                            acc += embed.weight.get(&[o, (u * patch + v) * cin + ch]) * px;
                            *macs += 1;
                        }
                    }
                }
                out.pixel_mut(i, j)[o] = acc;
            }
        }
    }
    Ok(out)
}

/// Whole-model forward through the reference kernels: stage maps, logits and
/// the total MAC tally.
pub fn naive_model_forward(model: &Model, image: &FeatureMap) -> Result<(Vec<FeatureMap>, Tensor, MacCounter)> {
    let mut macs = MacCounter::default();
    let mut x = image.clone();
    let mut maps = Vec::new();
    for (stage, cfg) in model.stages.iter().zip(&model.config.stages) {
        x = naive_patch_embed(&x, cfg.patch, &stage.embed, &mut macs.embed)?;
        for layer in &stage.layers {
            let (y, m) = naive_layer_forward(&x, layer)?;
            macs.absorb(&m);
            x = y;
        }
        maps.push(x.clone());
    }
    let d = x.channels();
    let mut mean = Tensor::zeros(&[d]);
    for r in 0..x.height() {
        for c in 0..x.width() {
            for (acc, v) in mean.data_mut().iter_mut().zip(x.pixel(r, c)) {
                *acc += v;
            }
        }
    }
    let mean = mean.map(|v| v / x.tokens() as f64);
    let normed = model.norm.forward(&mean)?;
    let logits = counted_linear(&normed, &model.head, &mut macs.head)?;
    Ok((maps, logits, macs))
}
