//! Randomized verification harnesses driven by a single seed: fast path vs.
//! oracle, full-attention degeneracy, finite-difference gradients and window
//! independence. Each returns its worst observed error so callers can apply
//! their own tolerance.

use rand::Rng;
use serde::Serialize;

use crate::attention::{focal_attention_backward, focal_attention_forward, AttentionGeometry, FocalAttentionParams};
use crate::error::{FocalError, Result};
use crate::feature::FeatureMap;
use crate::geometry::{FocalLevel, GatherPlan};
use crate::init::{rng_from_seed, uniform, FocalRng};
use crate::layers::Params;
use crate::oracle::{full_attention_reference, naive_focal_forward};

pub const EQUIVALENCE_TOL: f64 = 1e-12;
pub const DEGENERACY_TOL: f64 = 1e-10;
pub const GRADCHECK_TOL: f64 = 1e-5;
pub const GRADCHECK_STEP: f64 = 1e-5;
/// Denominator floor of the gradient relative error, so entries whose true
/// gradient is ~0 are judged on absolute error instead.
pub const GRADCHECK_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct CaseOutcome {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub levels: Vec<FocalLevel>,
    pub error: f64,
}

impl CaseOutcome {
    fn new(seed: u64, x: &FeatureMap, g: &AttentionGeometry, error: f64) -> Self {
        CaseOutcome {
            seed,
            height: x.height(),
            width: x.width(),
            dim: g.dim,
            heads: g.heads,
            window: g.window,
            levels: g.levels.clone(),
            error,
        }
    }
}

/// Random geometry with `max_extent`-bounded map sides, `dim <= max_dim`,
/// window 2 or 4 and up to three levels.
fn random_instance(rng: &mut FocalRng, max_extent: usize, max_dim: usize) -> Result<(FeatureMap, FocalAttentionParams)> {
    let heads = rng.random_range(1..=2);
    let dim = heads * rng.random_range(1..=max_dim / heads);
    let (m, n) = (rng.random_range(1..=max_extent), rng.random_range(1..=max_extent));
    let window = if rng.random_bool(0.5) { 2 } else { 4 };
    let num_levels = rng.random_range(1..=3);
    let mut levels = vec![FocalLevel::new(1, rng.random_range(window..=window + 4))];
    for _ in 1..num_levels {
        levels.push(FocalLevel::new(rng.random_range(2..=4), rng.random_range(1..=5)));
    }
    let g = AttentionGeometry {
        window,
        levels,
        dim,
        heads,
    };
    let params = FocalAttentionParams::random(g, 0.5, rng)?;
    let x = FeatureMap::from_tensor(uniform(&[m, n, dim], 1.0, rng))?;
    Ok((x, params))
}

/// Max |fast - oracle| on one random instance (sides <= 16, dim <= 8).
pub fn equivalence_case(seed: u64) -> Result<CaseOutcome> {
    let mut rng = rng_from_seed(seed);
    let (x, params) = random_instance(&mut rng, 16, 8)?;
    let (fast, _) = focal_attention_forward(&x, &params)?;
    let (slow, _) = naive_focal_forward(&x, &params)?;
    Ok(CaseOutcome::new(seed, &x, &params.geometry, fast.max_abs_diff(&slow)))
}

/// One window covering the whole map, one level whose region spans twice the
/// larger side, zero bias: compared against plain full attention.
pub fn degeneracy_case(seed: u64) -> Result<CaseOutcome> {
    let mut rng = rng_from_seed(seed);
    let heads = rng.random_range(1..=2);
    let dim = heads * rng.random_range(1..=4);
    let (m, n) = (rng.random_range(1..=8), rng.random_range(1..=8));
    let side = m.max(n);
    let g = AttentionGeometry {
        window: side,
        levels: vec![FocalLevel::new(1, 2 * side + rng.random_range(0..=2))],
        dim,
        heads,
    };
    let mut params = FocalAttentionParams::random(g, 0.5, &mut rng)?;
    params.bias_fine.data_mut().fill(0.0);
    let x = FeatureMap::from_tensor(uniform(&[m, n, dim], 1.0, &mut rng))?;
    let (focal, _) = focal_attention_forward(&x, &params)?;
    let tokens = x.as_tensor().clone().reshape(&[m * n, dim])?;
    let full = full_attention_reference(&tokens, &params)?;
    let focal = focal.into_tensor().reshape(&[m * n, dim])?;
    Ok(CaseOutcome::new(seed, &x, &params.geometry, focal.max_abs_diff(&full)))
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR)
}

/// Worst elementwise relative error between the analytic backward pass and
/// central differences of `<upstream, forward(x)>`, over the input and every
/// parameter entry.
pub fn gradcheck_case(seed: u64) -> Result<CaseOutcome> {
    let mut rng = rng_from_seed(seed);
    let (x, params) = random_instance(&mut rng, 5, 4)?;
    let upstream = FeatureMap::from_tensor(uniform(x.as_tensor().shape(), 1.0, &mut rng))?;
    let loss = |x: &FeatureMap, p: &FocalAttentionParams| -> Result<f64> {
        let (y, _) = focal_attention_forward(x, p)?;
        Ok(y.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum())
    };
    let grads = focal_attention_backward(&x, &params, &upstream)?;
    let h = GRADCHECK_STEP;
    let mut worst = 0.0f64;

    for i in 0..x.data().len() {
        let mut plus = x.clone();
        plus.tensor_mut().data_mut()[i] += h;
        let mut minus = x.clone();
        minus.tensor_mut().data_mut()[i] -= h;
        let numeric = (loss(&plus, &params)? - loss(&minus, &params)?) / (2.0 * h);
        worst = worst.max(relative_error(grads.input.data()[i], numeric));
    }

    let analytic = grads.params.named_params();
    for (name, g) in &analytic {
        for i in 0..g.numel() {
            let shifted = |delta: f64| {
                let mut p = params.clone();
                p.visit_mut("", &mut |n, t| {
                    if n == name {
                        t.data_mut()[i] += delta;
                    }
                });
                p
            };
            let numeric = (loss(&x, &shifted(h))? - loss(&x, &shifted(-h))?) / (2.0 * h);
            worst = worst.max(relative_error(g.data()[i], numeric));
        }
    }
    Ok(CaseOutcome::new(seed, &x, &params.geometry, worst))
}

#[derive(Debug, Clone, Serialize)]
pub struct IndependenceOutcome {
    pub seed: u64,
    pub window: (usize, usize),
    pub perturbed_tokens: usize,
    pub unchanged: bool,
}

/// Tokens whose value can reach window `(wr, wc)`: every token pooled into a
/// valid gathered cell at any level.
pub fn influencing_tokens(plan: &GatherPlan, wr: usize, wc: usize) -> Result<Vec<bool>> {
    let (m, n) = (plan.grid.height, plan.grid.width);
    let mut reach = vec![false; m * n];
    let w = plan.window(wr, wc)?;
    for (level, slots) in plan.levels.iter().zip(&w.slots) {
        let sw = level.sub_window;
        for s in slots.iter().filter(|s| s.valid) {
            let (pr, pc) = (s.row as usize, s.col as usize);
            for r in pr * sw..((pr + 1) * sw).min(m) {
                for c in pc * sw..((pc + 1) * sw).min(n) {
                    reach[r * n + c] = true;
                }
            }
        }
    }
    Ok(reach)
}

/// Perturbs every token outside one window's gathered region and checks that
/// the window's outputs stay bit-identical.
pub fn window_independence_trial(seed: u64) -> Result<IndependenceOutcome> {
    let mut rng = rng_from_seed(seed);
    let heads = rng.random_range(1..=2);
    let dim = heads * rng.random_range(1..=4);
    let (m, n) = (rng.random_range(10..=16), rng.random_range(10..=16));
    let window = rng.random_range(2..=3);
    let mut levels = vec![FocalLevel::new(1, window + rng.random_range(0..=2))];
    if rng.random_bool(0.5) {
        levels.push(FocalLevel::new(2, rng.random_range(1..=3)));
    }
    let g = AttentionGeometry {
        window,
        levels,
        dim,
        heads,
    };
    let params = FocalAttentionParams::random(g, 0.5, &mut rng)?;
    let x = FeatureMap::from_tensor(uniform(&[m, n, dim], 1.0, &mut rng))?;
    let plan = GatherPlan::build(m, n, window, &params.geometry.levels)?;
    let (wr, wc) = (rng.random_range(0..plan.grid.rows), rng.random_range(0..plan.grid.cols));
    let reach = influencing_tokens(&plan, wr, wc)?;

    let mut y = x.clone();
    let mut perturbed = 0;
    for (t, _) in reach.iter().enumerate().filter(|(_, &r)| !r) {
        for v in y.tensor_mut().row_mut(t) {
            *v += rng.random_range(-1.0..1.0);
        }
        perturbed += 1;
    }
    if perturbed == 0 {
        return Err(FocalError::Internal(format!("seed {seed}: window reaches every token")));
    }
    let (before, _) = focal_attention_forward(&x, &params)?;
    let (after, _) = focal_attention_forward(&y, &params)?;
    let unchanged = plan.grid.window_tokens(wr, wc).iter().all(|&(r, c)| {
        let bits = |f: &FeatureMap| f.pixel(r, c).iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        bits(&before) == bits(&after)
    });
    Ok(IndependenceOutcome {
        seed,
        window: (wr, wc),
        perturbed_tokens: perturbed,
        unchanged,
    })
}
