//! Window-wise focal self-attention.
//!
//! A layer runs in two steps. Every level `l` first pools the input map with
//! `s_w^l x s_w^l` sub-windows (level 0 is the map itself). Queries come from
//! the unpooled map; keys and values come from every pooled map through the
//! same projections. Each `s_p x s_p` query window then gathers the
//! `s_r^l x s_r^l` cells around it at every level and attends all of them at
//! once, with a relative position bias indexed by token offset at level 0 and
//! by region cell at coarser levels.
//!
//! Windows are independent, so they are evaluated in parallel and written
//! back in window order.

mod backward;
mod params;

pub use backward::{focal_attention_backward, AttentionGrads};
pub use params::{AttentionGeometry, FocalAttentionParams, FocalLayerParams, MLP_RATIO};

use rayon::prelude::*;

use crate::error::{FocalError, Result};
use crate::feature::FeatureMap;
use crate::geometry::{pooled_extent, FocalLevel, GatherPlan, WindowGather};
use crate::layers::Linear;
use crate::tensor::{gelu, softmax_row, Tensor};

/// Pooled maps, one per level; level 0 is the input map.
#[derive(Debug, Clone)]
pub struct PooledLevels {
    pub maps: Vec<FeatureMap>,
}

/// Linear pooling of every `s_w x s_w` sub-window into one token, with the
/// same `s_w^2` coefficients for all channels and positions. Cells past the
/// map edge count as zeros.
pub fn subwindow_pool(x: &FeatureMap, level: FocalLevel, pool: Option<&Linear>) -> Result<FeatureMap> {
    let sw = level.sub_window;
    if sw == 1 {
        return Ok(x.clone());
    }
    let pool = pool.ok_or_else(|| FocalError::config("pool", format!("missing pooling weights for sub-window {sw}")))?;
    if pool.weight.shape() != [1, sw * sw] {
        return Err(FocalError::Shape {
            lhs: pool.weight.shape().to_vec(),
            rhs: vec![1, sw * sw],
            context: "pooling weights",
        });
    }
    let (h, w, c) = (x.height(), x.width(), x.channels());
    let (ph, pw) = pooled_extent(h, w, sw);
    let coeffs = pool.weight.data();
    let bias = pool.bias_at(0);
    let mut out = FeatureMap::from_fn(ph, pw, c, |_| bias);
    for i in 0..ph {
        for j in 0..pw {
            let cell = out.pixel_mut(i, j);
            for u in 0..sw.min(h - i * sw) {
                for v in 0..sw.min(w - j * sw) {
                    let coeff = coeffs[u * sw + v];
                    let px = x.pixel(i * sw + u, j * sw + v);
                    for (o, p) in cell.iter_mut().zip(px) {
                        *o += coeff * p;
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn pool_levels(x: &FeatureMap, params: &FocalAttentionParams) -> Result<PooledLevels> {
    let maps = params
        .geometry
        .levels
        .iter()
        .zip(&params.pool)
        .map(|(level, pool)| subwindow_pool(x, *level, pool.as_ref()))
        .collect::<Result<_>>()?;
    Ok(PooledLevels { maps })
}

fn apply(lin: &Linear, x: &FeatureMap) -> Result<FeatureMap> {
    FeatureMap::from_tensor(lin.forward(x.as_tensor())?)
}

/// Queries from the unpooled map; keys and values from every level through
/// the shared projections.
pub fn project_qkv(
    pooled: &PooledLevels,
    params: &FocalAttentionParams,
) -> Result<(FeatureMap, Vec<FeatureMap>, Vec<FeatureMap>)> {
    if pooled.maps.len() != params.geometry.levels.len() {
        return Err(FocalError::config("levels", "pooled level count differs from parameters"));
    }
    let q = apply(&params.query, &pooled.maps[0])?;
    let k = pooled.maps.iter().map(|m| apply(&params.key, m)).collect::<Result<_>>()?;
    let v = pooled.maps.iter().map(|m| apply(&params.value, m)).collect::<Result<_>>()?;
    Ok((q, k, v))
}

/// Keys and values gathered by one window, level-major, with zero rows and a
/// false mask entry at masked slots.
#[derive(Debug, Clone)]
pub struct GatheredKv {
    pub keys: Tensor,
    pub values: Tensor,
    pub mask: Vec<bool>,
}

fn gather_one(keys: &[FeatureMap], values: &[FeatureMap], w: &WindowGather) -> GatheredKv {
    let d = keys[0].channels();
    let s = w.sources.len();
    let mut k = Tensor::zeros(&[s, d]);
    let mut v = Tensor::zeros(&[s, d]);
    for (j, src) in w.sources.iter().enumerate() {
        if let Some(src) = src {
            k.row_mut(j).copy_from_slice(keys[src.level].as_tensor().row(src.index));
            v.row_mut(j).copy_from_slice(values[src.level].as_tensor().row(src.index));
        }
    }
    GatheredKv { keys: k, values: v, mask: w.mask() }
}

pub fn gather_window_kv(keys: &[FeatureMap], values: &[FeatureMap], plan: &GatherPlan) -> Result<Vec<GatheredKv>> {
    if keys.len() != plan.levels.len() || values.len() != plan.levels.len() {
        return Err(FocalError::config("levels", "key/value level count differs from plan"));
    }
    for (l, &(ph, pw)) in plan.pooled.iter().enumerate() {
        if (keys[l].height(), keys[l].width()) != (ph, pw) || (values[l].height(), values[l].width()) != (ph, pw) {
            return Err(FocalError::Shape {
                lhs: keys[l].as_tensor().shape().to_vec(),
                rhs: vec![ph, pw],
                context: "pooled keys vs plan",
            });
        }
    }
    Ok(plan.windows.iter().map(|w| gather_one(keys, values, w)).collect())
}

/// Relative position bias added to one window's logits, `[heads, s_p^2, s]`.
///
/// Level-0 keys look up `bias_fine` by key-minus-query token offset. Coarser
/// keys look up `bias_coarse[l]` by their cell in the region, identically for
/// every query of the window. Masked slots are zero.
pub fn bias_rows(params: &FocalAttentionParams, plan: &GatherPlan, window: (usize, usize)) -> Result<Tensor> {
    let g = &params.geometry;
    if plan.levels != g.levels || plan.grid.window != g.window {
        return Err(FocalError::config("plan", "gather plan built for a different geometry"));
    }
    let w = plan.window(window.0, window.1)?;
    let sp = g.window;
    let s = plan.keys;
    let (r0, c0) = plan.grid.window_origin(window.0, window.1);
    let extent = g.fine_table_extent() as isize;
    let off = g.fine_table_offset();
    let mut out = Tensor::zeros(&[g.heads, sp * sp, s]);
    for (k, slot) in w.slots[0].iter().enumerate().filter(|(_, s)| s.valid) {
        for qi in 0..sp {
            for qj in 0..sp {
                let dr = slot.row - (r0 + qi) as isize + off;
                let dc = slot.col - (c0 + qj) as isize + off;
                if !(0..extent).contains(&dr) || !(0..extent).contains(&dc) {
                    return Err(FocalError::Internal(format!(
                        "offset ({dr}, {dc}) outside {extent}x{extent} bias table"
                    )));
                }
                for h in 0..g.heads {
                    let b = params.bias_fine.get(&[h, dr as usize, dc as usize]);
                    out.set(&[h, qi * sp + qj, k], b);
                }
            }
        }
    }
    let mut base = w.slots[0].len();
    for (l, cells) in w.slots.iter().enumerate().skip(1) {
        let table = params.bias_coarse[l]
            .as_ref()
            .ok_or_else(|| FocalError::config(format!("bias_coarse[{l}]"), "missing"))?;
        let region = g.levels[l].region;
        for (k, _) in cells.iter().enumerate().filter(|(_, s)| s.valid) {
            for h in 0..g.heads {
                let b = table.get(&[h, k / region, k % region]);
                for q in 0..sp * sp {
                    out.set(&[h, q, base + k], b);
                }
            }
        }
        base += cells.len();
    }
    Ok(out)
}

/// Attention probabilities of one window, `[heads, queries, s]`, for the
/// window's real (unpadded) query tokens.
#[derive(Debug, Clone)]
pub struct WindowProbs {
    pub row: usize,
    pub col: usize,
    pub tokens: Vec<(usize, usize)>,
    pub probs: Tensor,
}

#[derive(Debug, Clone)]
pub struct AttentionProbs {
    pub plan: GatherPlan,
    pub windows: Vec<WindowProbs>,
}

/// Intermediate values of one forward pass, kept for the backward pass.
pub(crate) struct Trace {
    pub plan: GatherPlan,
    pub pooled: PooledLevels,
    pub query: FeatureMap,
    pub keys: Vec<FeatureMap>,
    pub values: Vec<FeatureMap>,
    pub windows: Vec<WindowProbs>,
    pub mixed: FeatureMap,
    pub output: FeatureMap,
}

/// Softmax attention of one window; returns per-query head-concatenated
/// outputs (`queries x dim`, row-major) and probabilities.
fn attend_window(
    params: &FocalAttentionParams,
    plan: &GatherPlan,
    index: usize,
    query: &FeatureMap,
    kv: &GatheredKv,
) -> Result<(WindowProbs, Vec<f64>)> {
    let g = &params.geometry;
    let w = &plan.windows[index];
    let bias = bias_rows(params, plan, (w.row, w.col))?;
    let tokens = plan.grid.window_tokens(w.row, w.col);
    let (r0, c0) = plan.grid.window_origin(w.row, w.col);
    let (d, dh, s, sp) = (g.dim, g.head_dim(), plan.keys, g.window);
    let scale = 1.0 / (dh as f64).sqrt();
    let nq = tokens.len();
    let mut probs = Tensor::zeros(&[g.heads, nq, s]);
    let mut mixed = vec![0.0; nq * d];
    for (qi, &(r, c)) in tokens.iter().enumerate() {
        let qrow = query.pixel(r, c);
        let local = (r - r0) * sp + (c - c0);
        for h in 0..g.heads {
            let hs = h * dh..(h + 1) * dh;
            let qh = &qrow[hs.clone()];
            let row = probs.row_mut(h * nq + qi);
            for (j, logit) in row.iter_mut().enumerate() {
                if kv.mask[j] {
                    let kh = &kv.keys.row(j)[hs.clone()];
                    let dot: f64 = qh.iter().zip(kh).map(|(a, b)| a * b).sum();
                    *logit = dot * scale + bias.get(&[h, local, j]);
                }
            }
            if !softmax_row(row, Some(&kv.mask)) {
                return Err(FocalError::DegenerateRow { row: qi });
            }
            let out = &mut mixed[qi * d + h * dh..qi * d + (h + 1) * dh];
            for (j, &p) in row.iter().enumerate() {
                if p != 0.0 {
                    let vh = &kv.values.row(j)[hs.clone()];
                    for (o, v) in out.iter_mut().zip(vh) {
                        *o += p * v;
                    }
                }
            }
        }
    }
    Ok((WindowProbs { row: w.row, col: w.col, tokens, probs }, mixed))
}

pub(crate) fn forward_trace(x: &FeatureMap, params: &FocalAttentionParams) -> Result<Trace> {
    params.validate()?;
    let g = &params.geometry;
    if x.channels() != g.dim {
        return Err(FocalError::Shape {
            lhs: x.as_tensor().shape().to_vec(),
            rhs: vec![g.dim],
            context: "feature map channels vs attention dim",
        });
    }
    let plan = GatherPlan::build(x.height(), x.width(), g.window, &g.levels)?;
    let pooled = pool_levels(x, params)?;
    let (query, keys, values) = project_qkv(&pooled, params)?;
    let results = (0..plan.windows.len())
        .into_par_iter()
        .map(|i| {
            let kv = gather_one(&keys, &values, &plan.windows[i]);
            attend_window(params, &plan, i, &query, &kv)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut mixed = FeatureMap::zeros(x.height(), x.width(), g.dim);
    let mut windows = Vec::with_capacity(results.len());
    for (wp, rows) in results {
        for (qi, &(r, c)) in wp.tokens.iter().enumerate() {
            mixed.pixel_mut(r, c).copy_from_slice(&rows[qi * g.dim..(qi + 1) * g.dim]);
        }
        windows.push(wp);
    }
    let output = apply(&params.proj, &mixed)?;
    Ok(Trace {
        plan,
        pooled,
        query,
        keys,
        values,
        windows,
        mixed,
        output,
    })
}

/// Focal self-attention over a whole map: `softmax(Q K^T / sqrt(d_head) + B) V`
/// per window and head, followed by the output projection.
pub fn focal_attention_forward(x: &FeatureMap, params: &FocalAttentionParams) -> Result<(FeatureMap, AttentionProbs)> {
    let t = forward_trace(x, params)?;
    Ok((t.output, AttentionProbs { plan: t.plan, windows: t.windows }))
}

fn residual_add(a: &FeatureMap, b: &FeatureMap) -> Result<FeatureMap> {
    FeatureMap::from_tensor(a.as_tensor().add(b.as_tensor())?)
}

/// Pre-norm block: `x + attn(LN(x))`, then `+ MLP(LN(.))`.
pub fn focal_layer_forward(x: &FeatureMap, params: &FocalLayerParams) -> Result<FeatureMap> {
    focal_layer_forward_with_probs(x, params).map(|(y, _)| y)
}

pub fn focal_layer_forward_with_probs(x: &FeatureMap, params: &FocalLayerParams) -> Result<(FeatureMap, AttentionProbs)> {
    let normed = FeatureMap::from_tensor(params.norm1.forward(x.as_tensor())?)?;
    let (attn, probs) = focal_attention_forward(&normed, &params.attn)?;
    let x1 = residual_add(x, &attn)?;
    let h = params.norm2.forward(x1.as_tensor())?;
    let h = params.fc2.forward(&gelu(&params.fc1.forward(&h)?))?;
    Ok((residual_add(&x1, &FeatureMap::from_tensor(h)?)?, probs))
}

/// Mean attention mass per query row on level-0 keys inside the query's own
/// window, level-0 keys around it, and pooled keys from coarser levels.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct AttentionBreakdown {
    pub inside_window: f64,
    pub surround_local: f64,
    pub global_pooled: f64,
}

pub fn attention_breakdown(probs: &AttentionProbs, plan: &GatherPlan) -> Result<AttentionBreakdown> {
    let sp = plan.grid.window as isize;
    let (mut inside, mut surround, mut global) = (0.0, 0.0, 0.0);
    let mut rows = 0usize;
    for wp in &probs.windows {
        let w = plan.window(wp.row, wp.col)?;
        let (r0, c0) = plan.grid.window_origin(wp.row, wp.col);
        let (r0, c0) = (r0 as isize, c0 as isize);
        let fine = w.slots[0].len();
        let is_inside: Vec<bool> = w.slots[0]
            .iter()
            .map(|s| (r0..r0 + sp).contains(&s.row) && (c0..c0 + sp).contains(&s.col))
            .collect();
        if wp.probs.last_dim() != plan.keys {
            return Err(FocalError::config("probs", "key count differs from plan"));
        }
        for r in 0..wp.probs.rows() {
            let row = wp.probs.row(r);
            for (j, &p) in row.iter().enumerate() {
                if j >= fine {
                    global += p;
                } else if is_inside[j] {
                    inside += p;
                } else {
                    surround += p;
                }
            }
            rows += 1;
        }
    }
    let n = rows.max(1) as f64;
    Ok(AttentionBreakdown {
        inside_window: inside / n,
        surround_local: surround / n,
        global_pooled: global / n,
    })
}
