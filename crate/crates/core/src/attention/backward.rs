//! Reverse-mode gradients of focal self-attention.

use rayon::prelude::*;

use super::{forward_trace, gather_one, FocalAttentionParams};
use crate::error::{FocalError, Result};
use crate::feature::FeatureMap;
use crate::layers::Linear;
use crate::tensor::Tensor;

/// Gradients of `sum(upstream * forward(x))` with respect to the input map
/// and every parameter tensor (same layout as the parameters).
#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub input: FeatureMap,
    pub params: FocalAttentionParams,
}

/// `dx` for `y = x W^T + b`; accumulates `dW` and `db` into `grad`.
fn linear_backward(x: &Tensor, lin: &Linear, dy: &Tensor, grad: &mut Linear) -> Tensor {
    let (out_dim, in_dim) = (lin.out_dim(), lin.in_dim());
    let mut dx = Tensor::zeros(x.shape());
    let w = lin.weight.data();
    let gw = grad.weight.data_mut();
    for r in 0..x.rows() {
        let xr = x.row(r);
        let dyr = dy.row(r);
        let dxr = dx.row_mut(r);
        for o in 0..out_dim {
            let g = dyr[o];
            if g == 0.0 {
                continue;
            }
            let wr = &w[o * in_dim..(o + 1) * in_dim];
            let gwr = &mut gw[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                dxr[i] += g * wr[i];
                gwr[i] += g * xr[i];
            }
        }
    }
    if let Some(gb) = grad.bias.as_mut() {
        let gb = gb.data_mut();
        for r in 0..dy.rows() {
            for (b, g) in gb.iter_mut().zip(dy.row(r)) {
                *b += g;
            }
        }
    }
    dx
}

struct WindowGrad {
    dq: Vec<f64>,
    dk: Tensor,
    dv: Tensor,
    bias_fine: Tensor,
    bias_coarse: Vec<Option<Tensor>>,
}

pub fn focal_attention_backward(
    x: &FeatureMap,
    params: &FocalAttentionParams,
    upstream: &FeatureMap,
) -> Result<AttentionGrads> {
    let t = forward_trace(x, params)?;
    if upstream.as_tensor().shape() != t.output.as_tensor().shape() {
        return Err(FocalError::Shape {
            lhs: upstream.as_tensor().shape().to_vec(),
            rhs: t.output.as_tensor().shape().to_vec(),
            context: "upstream gradient vs output",
        });
    }
    let g = &params.geometry;
    let (d, dh) = (g.dim, g.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    let off = g.fine_table_offset();
    let mut grads = params.zeros_like();

    let dmixed = linear_backward(t.mixed.as_tensor(), &params.proj, upstream.as_tensor(), &mut grads.proj);
    let dmixed = FeatureMap::from_tensor(dmixed)?;

    let window_grads: Vec<WindowGrad> = (0..t.plan.windows.len())
        .into_par_iter()
        .map(|wi| {
            let w = &t.plan.windows[wi];
            let wp = &t.windows[wi];
            let kv = gather_one(&t.keys, &t.values, w);
            let s = t.plan.keys;
            let nq = wp.tokens.len();
            let mut out = WindowGrad {
                dq: vec![0.0; nq * d],
                dk: Tensor::zeros(&[s, d]),
                dv: Tensor::zeros(&[s, d]),
                bias_fine: Tensor::zeros(params.bias_fine.shape()),
                bias_coarse: params
                    .bias_coarse
                    .iter()
                    .map(|b| b.as_ref().map(|b| Tensor::zeros(b.shape())))
                    .collect(),
            };
            let mut dlogit = vec![0.0; s];
            for (qi, &(r, c)) in wp.tokens.iter().enumerate() {
                let qrow = t.query.pixel(r, c);
                let dorow = dmixed.pixel(r, c);
                for h in 0..g.heads {
                    let hs = h * dh..(h + 1) * dh;
                    let p = wp.probs.row(h * nq + qi);
                    let d_out = &dorow[hs.clone()];
                    let mut weighted = 0.0;
                    for j in 0..s {
                        if p[j] == 0.0 {
                            dlogit[j] = 0.0;
                            continue;
                        }
                        let vj = &kv.values.row(j)[hs.clone()];
                        let dp: f64 = d_out.iter().zip(vj).map(|(a, b)| a * b).sum();
                        dlogit[j] = dp;
                        weighted += p[j] * dp;
                        let dvj = &mut out.dv.row_mut(j)[hs.clone()];
                        for (acc, go) in dvj.iter_mut().zip(d_out) {
                            *acc += p[j] * go;
                        }
                    }
                    for j in 0..s {
                        dlogit[j] = p[j] * (dlogit[j] - weighted);
                    }
                    // position bias
                    let mut k = 0;
                    for (l, cells) in w.slots.iter().enumerate() {
                        let region = g.levels[l].region;
                        for (ci, slot) in cells.iter().enumerate() {
                            if slot.valid && dlogit[k] != 0.0 {
                                if l == 0 {
                                    let dr = (slot.row - r as isize + off) as usize;
                                    let dc = (slot.col - c as isize + off) as usize;
                                    out.bias_fine.add_at(&[h, dr, dc], dlogit[k]);
                                } else if let Some(table) = out.bias_coarse[l].as_mut() {
                                    table.add_at(&[h, ci / region, ci % region], dlogit[k]);
                                }
                            }
                            k += 1;
                        }
                    }
                    let qh = &qrow[hs.clone()];
                    let dqh = &mut out.dq[qi * d + h * dh..qi * d + (h + 1) * dh];
                    for (j, &dl) in dlogit.iter().enumerate() {
                        let ds = dl * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &kv.keys.row(j)[hs.clone()];
                        for (acc, kv) in dqh.iter_mut().zip(kj) {
                            *acc += ds * kv;
                        }
                        let dkj = &mut out.dk.row_mut(j)[hs.clone()];
                        for (acc, qv) in dkj.iter_mut().zip(qh) {
                            *acc += ds * qv;
                        }
                    }
                }
            }
            out
        })
        .collect();

    let mut dq = FeatureMap::zeros(x.height(), x.width(), d);
    let mut dkeys: Vec<FeatureMap> = t
        .keys
        .iter()
        .map(|k| FeatureMap::zeros(k.height(), k.width(), d))
        .collect();
    let mut dvalues = dkeys.clone();
    for (wi, wg) in window_grads.into_iter().enumerate() {
        let wp = &t.windows[wi];
        for (qi, &(r, c)) in wp.tokens.iter().enumerate() {
            dq.pixel_mut(r, c).copy_from_slice(&wg.dq[qi * d..(qi + 1) * d]);
        }
        for (j, src) in t.plan.windows[wi].sources.iter().enumerate() {
            if let Some(src) = src {
                let dk = dkeys[src.level].tensor_mut().row_mut(src.index);
                for (a, b) in dk.iter_mut().zip(wg.dk.row(j)) {
                    *a += b;
                }
                let dv = dvalues[src.level].tensor_mut().row_mut(src.index);
                for (a, b) in dv.iter_mut().zip(wg.dv.row(j)) {
                    *a += b;
                }
            }
        }
        for (a, b) in grads.bias_fine.data_mut().iter_mut().zip(wg.bias_fine.data()) {
            *a += b;
        }
        for (acc, part) in grads.bias_coarse.iter_mut().zip(&wg.bias_coarse) {
            if let (Some(acc), Some(part)) = (acc.as_mut(), part) {
                for (a, b) in acc.data_mut().iter_mut().zip(part.data()) {
                    *a += b;
                }
            }
        }
    }

    let mut dx = linear_backward(t.pooled.maps[0].as_tensor(), &params.query, dq.as_tensor(), &mut grads.query);
    for (l, level) in g.levels.iter().enumerate() {
        let xl = t.pooled.maps[l].as_tensor();
        let mut dxl = linear_backward(xl, &params.key, dkeys[l].as_tensor(), &mut grads.key);
        let dxl_v = linear_backward(xl, &params.value, dvalues[l].as_tensor(), &mut grads.value);
        for (a, b) in dxl.data_mut().iter_mut().zip(dxl_v.data()) {
            *a += b;
        }
        if level.sub_window == 1 {
            for (a, b) in dx.data_mut().iter_mut().zip(dxl.data()) {
                *a += b;
            }
            continue;
        }
        let pool = params.pool[l].as_ref().expect("validated pooling weights");
        let gpool = grads.pool[l].as_mut().expect("validated pooling weights");
        let sw = level.sub_window;
        let dxl = FeatureMap::from_tensor(dxl)?;
        let (ph, pw) = (dxl.height(), dxl.width());
        let coeffs = pool.weight.data();
        let mut dcoeff = vec![0.0; sw * sw];
        let mut dbias = 0.0;
        let mut dxm = FeatureMap::from_tensor(std::mem::replace(&mut dx, Tensor::zeros(&[1])))?;
        for i in 0..ph {
            for j in 0..pw {
                let gcell = dxl.pixel(i, j);
                dbias += gcell.iter().sum::<f64>();
                for u in 0..sw.min(x.height() - i * sw) {
                    for v in 0..sw.min(x.width() - j * sw) {
                        let (r, c) = (i * sw + u, j * sw + v);
                        let px = x.pixel(r, c);
                        dcoeff[u * sw + v] += gcell.iter().zip(px).map(|(a, b)| a * b).sum::<f64>();
                        let coeff = coeffs[u * sw + v];
                        for (a, gv) in dxm.pixel_mut(r, c).iter_mut().zip(gcell) {
                            *a += coeff * gv;
                        }
                    }
                }
            }
        }
        dx = dxm.into_tensor();
        for (a, b) in gpool.weight.data_mut().iter_mut().zip(&dcoeff) {
            *a += b;
        }
        if let Some(b) = gpool.bias.as_mut() {
            b.data_mut()[0] += dbias;
        }
    }
    Ok(AttentionGrads {
        input: FeatureMap::from_tensor(dx)?,
        params: grads,
    })
}
