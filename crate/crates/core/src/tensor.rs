//! Dense row-major `f64` tensors and the handful of kernels the attention
//! layers are composed from.
//!
//! Every kernel sums in a fixed order per output element, so results are
//! bit-identical no matter how many rayon workers execute them.

use rayon::prelude::*;

use crate::error::{FocalError, Result};

/// Rows per rayon task in [`linear`].
const LINEAR_CHUNK_ROWS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(FocalError::Shape {
                lhs: shape,
                rhs: vec![],
                context: "tensor extents must be positive",
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(FocalError::Shape {
                lhs: shape,
                rhs: vec![data.len()],
                context: "element count does not match data length",
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&e| e > 0), "zero extent in {shape:?}");
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
        t
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    /// Number of rows when viewed as `[numel / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let d = self.last_dim();
        &self.data[r * d..(r + 1) * d]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let d = self.last_dim();
        &mut self.data[r * d..(r + 1) * d]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data)
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &e)| {
                debug_assert!(i < e);
                acc * e + i
            })
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn add_at(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] += value;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(FocalError::Shape {
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
                context: "elementwise",
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `y[..., o] = sum_i x[..., i] * weight[o, i] + bias[o]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if weight.ndim() != 2 || weight.shape()[1] != x.last_dim() {
        return Err(FocalError::Shape {
            lhs: x.shape().to_vec(),
            rhs: weight.shape().to_vec(),
            context: "linear input vs weight",
        });
    }
    let (out_dim, in_dim) = (weight.shape()[0], weight.shape()[1]);
    if let Some(b) = bias {
        if b.shape() != [out_dim] {
            return Err(FocalError::Shape {
                lhs: weight.shape().to_vec(),
                rhs: b.shape().to_vec(),
                context: "linear weight vs bias",
            });
        }
    }
    let mut out_shape = x.shape().to_vec();
    *out_shape.last_mut().unwrap() = out_dim;
    let mut out = Tensor::zeros(&out_shape);
    let w = weight.data();
    out.data
        .par_chunks_mut(out_dim * LINEAR_CHUNK_ROWS)
        .zip(x.data.par_chunks(in_dim * LINEAR_CHUNK_ROWS))
        .for_each(|(ys, xs)| {
            for (y, xr) in ys.chunks_exact_mut(out_dim).zip(xs.chunks_exact(in_dim)) {
                for (o, yo) in y.iter_mut().enumerate() {
                    let wr = &w[o * in_dim..(o + 1) * in_dim];
                    let mut acc = 0.0;
                    for (a, b) in xr.iter().zip(wr) {
                        acc += a * b;
                    }
                    *yo = acc + bias.map_or(0.0, |b| b.data[o]);
                }
            }
        });
    Ok(out)
}

/// Row-wise softmax over the last axis. Entries whose `mask` flag is false
/// come out as exactly `0.0`.
pub fn masked_softmax(logits: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    if let Some(m) = mask {
        if m.len() != logits.numel() {
            return Err(FocalError::Shape {
                lhs: logits.shape().to_vec(),
                rhs: vec![m.len()],
                context: "softmax mask length",
            });
        }
    }
    let mut out = logits.clone();
    let n = logits.last_dim();
    for r in 0..logits.rows() {
        let row_mask = mask.map(|m| &m[r * n..(r + 1) * n]);
        if !softmax_row(out.row_mut(r), row_mask) {
            return Err(FocalError::DegenerateRow { row: r });
        }
    }
    Ok(out)
}

/// In-place masked softmax on one row. Returns false, leaving the row
/// untouched, when no entry is valid.
#[must_use]
pub fn softmax_row(row: &mut [f64], mask: Option<&[bool]>) -> bool {
    let valid = |j: usize| mask.is_none_or(|m| m[j]);
    let max = (0..row.len())
        .filter(|&j| valid(j))
        .map(|j| row[j])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return false;
    }
    let mut sum = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        if valid(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    for (j, v) in row.iter_mut().enumerate() {
        if valid(j) {
            *v /= sum;
        }
    }
    true
}

/// Normalizes each last-axis row with its population variance.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.last_dim();
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(FocalError::Shape {
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
            context: "layer_norm input vs affine parameters",
        });
    }
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (i, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gamma.data[i] + beta.data[i];
        }
    }
    Ok(out)
}

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

/// Align-corners bilinear interpolation of a 2-D table.
pub fn bilinear_resize(table: &Tensor, new_h: usize, new_w: usize) -> Result<Tensor> {
    if table.ndim() != 2 {
        return Err(FocalError::Shape {
            lhs: table.shape().to_vec(),
            rhs: vec![new_h, new_w],
            context: "bilinear_resize expects a 2-D table",
        });
    }
    if new_h == 0 || new_w == 0 {
        return Err(FocalError::config("bilinear_resize", "target extents must be positive"));
    }
    let (h, w) = (table.shape()[0], table.shape()[1]);
    if (h, w) == (new_h, new_w) {
        return Ok(table.clone());
    }
    let rows: Vec<_> = (0..new_h).map(|i| source_coord(i, h, new_h)).collect();
    let cols: Vec<_> = (0..new_w).map(|j| source_coord(j, w, new_w)).collect();
    let mut out = Tensor::zeros(&[new_h, new_w]);
    for (i, &(r0, r1, fr)) in rows.iter().enumerate() {
        for (j, &(c0, c1, fc)) in cols.iter().enumerate() {
            let top = lerp(table.get(&[r0, c0]), table.get(&[r0, c1]), fc);
            let bottom = lerp(table.get(&[r1, c0]), table.get(&[r1, c1]), fc);
            out.set(&[i, j], lerp(top, bottom, fr));
        }
    }
    Ok(out)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    (1.0 - t) * a + t * b
}

/// Maps output index `i` of an `n`-long axis onto the `len`-long source axis:
/// `(lower, upper, fraction)`.
fn source_coord(i: usize, len: usize, n: usize) -> (usize, usize, f64) {
    if n == 1 || len == 1 {
        return (0, 0, 0.0);
    }
    let num = i * (len - 1);
    let den = n - 1;
    let lo = num / den;
    let frac = (num % den) as f64 / den as f64;
    (lo, (lo + 1).min(len - 1), frac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn linear_identity_and_hand_sum() {
        let x = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[0.0, 0.0]);
        let y = linear(&x, &Tensor::identity(2), Some(&b)).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
        let w = t(&[2, 2], &[1.0, 1.0, 1.0, -1.0]);
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.data(), &[3.0, -1.0]);
    }

    #[test]
    fn linear_matches_triple_loop() {
        let x = Tensor::from_fn(&[4, 3], |i| ((i * 7 + 3) % 11) as f64 * 0.37 - 1.1);
        let w = Tensor::from_fn(&[5, 3], |i| ((i * 5 + 1) % 13) as f64 * 0.21 - 0.9);
        let b = Tensor::from_fn(&[5], |i| i as f64 * 0.1);
        let y = linear(&x, &w, Some(&b)).unwrap();
        for r in 0..4 {
            for o in 0..5 {
                let mut acc = 0.0;
                for i in 0..3 {
                    acc += x.get(&[r, i]) * w.get(&[o, i]);
                }
                acc += b.get(&[o]);
                assert_eq!(y.get(&[r, o]), acc);
            }
        }
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let err = linear(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[4, 2]), None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let y = masked_softmax(&t(&[3], &[0.0, 0.0, 0.0]), None).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = masked_softmax(&t(&[2], &[5.0, 1.0]), Some(&[true, false])).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0]);
        let y = masked_softmax(&t(&[2], &[0.0, 3f64.ln()]), None).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15);
        assert!((y.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let err = masked_softmax(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), Some(&[true, false, false, false]));
        assert!(matches!(err, Err(FocalError::DegenerateRow { row: 1 })));
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::full(&[3], 1.0);
        let zeros = Tensor::zeros(&[3]);
        let y = layer_norm(&Tensor::full(&[3], 4.2), &ones, &zeros, 1e-5).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));
        let y = layer_norm(&t(&[2], &[1.0, -1.0]), &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]), 0.0)
            .unwrap();
        assert_eq!(y.data(), &[1.0, -1.0]);
    }

    #[test]
    fn layer_norm_matches_two_pass() {
        let x = Tensor::from_fn(&[1, 6], |i| ((i * 29 + 5) % 17) as f64 * 0.3 - 2.0);
        let g = Tensor::from_fn(&[6], |i| 0.5 + i as f64 * 0.1);
        let b = Tensor::from_fn(&[6], |i| i as f64 * -0.2);
        let y = layer_norm(&x, &g, &b, 1e-6).unwrap();
        let row = x.row(0);
        let mut mean = 0.0;
        for v in row {
            mean += v;
        }
        mean /= 6.0;
        let mut var = 0.0;
        for v in row {
            var += (v - mean).powi(2);
        }
        var /= 6.0;
        for i in 0..6 {
            let expect = (row[i] - mean) / (var + 1e-6).sqrt() * g.data()[i] + b.data()[i];
            assert!((y.data()[i] - expect).abs() < 1e-12);
        }
    }

    /// Maclaurin series for erf, summed until terms vanish.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        let mut n = 0.0;
        while term.abs() > 1e-20 {
            n += 1.0;
            term *= -x * x / n;
            sum += term / (2.0 * n + 1.0);
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-12);
        assert!(gelu_scalar(-10.0).abs() < 1e-12);
        let expect = 0.5 * (1.0 + erf_series(1.0 / 2f64.sqrt()));
        assert!((gelu_scalar(1.0) - expect).abs() < 1e-12);
    }

    #[test]
    fn bilinear_examples() {
        let one = t(&[1, 1], &[2.5]);
        let y = bilinear_resize(&one, 4, 3).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.5));

        let sq = t(&[2, 2], &[0.0, 1.0, 2.0, 3.0]);
        let y = bilinear_resize(&sq, 3, 3).unwrap();
        assert_eq!(y.data(), &[0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0]);

        let table = Tensor::from_fn(&[13, 13], |i| (i as f64).sin());
        assert_eq!(bilinear_resize(&table, 13, 13).unwrap(), table);
    }

    #[test]
    fn bilinear_preserves_corners() {
        let table = Tensor::from_fn(&[5, 4], |i| (i as f64 * 0.7).cos());
        let y = bilinear_resize(&table, 9, 7).unwrap();
        assert_eq!(y.get(&[0, 0]), table.get(&[0, 0]));
        assert_eq!(y.get(&[8, 6]), table.get(&[4, 3]));
        assert_eq!(y.get(&[0, 6]), table.get(&[0, 3]));
    }

    fn small_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-20.0f64..20.0, n)
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(logits in small_vec(12), mask in prop::collection::vec(any::<bool>(), 12)) {
            let mut mask = mask;
            // one guaranteed valid entry per row of 4
            for r in 0..3 { mask[r * 4 + r] = true; }
            let x = Tensor::new(vec![3, 4], logits).unwrap();
            let y = masked_softmax(&x, Some(&mask)).unwrap();
            for r in 0..3 {
                let row = y.row(r);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for j in 0..4 {
                    if mask[r * 4 + j] { prop_assert!(row[j] > 0.0); } else { prop_assert_eq!(row[j], 0.0); }
                }
            }
        }

        #[test]
        fn linear_is_affine(x in small_vec(6), y in small_vec(6), w in small_vec(6), b in small_vec(3), a in -3.0f64..3.0, c in -3.0f64..3.0) {
            let xt = Tensor::new(vec![2, 3], x).unwrap();
            let yt = Tensor::new(vec![2, 3], y).unwrap();
            let wt = Tensor::new(vec![2, 3], w).unwrap();
            let bt = Tensor::new(vec![2], b[..2].to_vec()).unwrap();
            let mix = xt.zip_with(&yt, |p, q| a * p + c * q).unwrap();
            let lhs = linear(&mix, &wt, Some(&bt)).unwrap();
            let lx = linear(&xt, &wt, Some(&bt)).unwrap();
            let ly = linear(&yt, &wt, Some(&bt)).unwrap();
            for r in 0..2 {
                for o in 0..2 {
                    let rhs = a * lx.get(&[r, o]) + c * ly.get(&[r, o]) - (a + c - 1.0) * bt.get(&[o]);
                    prop_assert!((lhs.get(&[r, o]) - rhs).abs() < 1e-10);
                }
            }
        }

        #[test]
        fn bilinear_same_size_is_identity(h in 1usize..8, w in 1usize..8, seed in any::<u32>()) {
            let table = Tensor::from_fn(&[h, w], |i| ((i as u64 * 2654435761 + seed as u64) % 1000) as f64 / 7.0);
            prop_assert_eq!(bilinear_resize(&table, h, w).unwrap(), table);
        }
    }
}
