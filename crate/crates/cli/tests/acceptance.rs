//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines always show; exits nonzero if any criterion fails.

// `ensure!(delta < tol)` negates comparisons on purpose: NaN must fail
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use focal_cli::{run, RunReport, EXIT_OK};
use focal_core::init::{rng_from_seed, uniform};
use focal_core::model::flops_for_config;
use focal_core::oracle::naive_model_forward;
use focal_core::tensor::bilinear_resize;
use focal_core::verify::{degeneracy_case, window_independence_trial, DEGENERACY_TOL};
use focal_core::{
    analytic_param_count, build_model, count_flops, count_params, forward_features, receptive_field,
    resize_focal_regions, FeatureMap, FocalLevel, GatherPlan, Linear, ModelConfig, Params, StageConfig, Tensor,
};

type Check = std::result::Result<String, String>;
/// Name, time budget in seconds and check.
type Criterion = (&'static str, u64, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn cli(args: &[&str]) -> std::result::Result<(i32, RunReport), String> {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = run(std::iter::once("focal").chain(args.iter().copied()), &mut out, &mut err);
    let report = serde_json::from_slice(&out)
        .map_err(|e| format!("{args:?}: {e}; stderr: {}", String::from_utf8_lossy(&err)))?;
    Ok((code, report))
}

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn structure() -> Check {
    let expected = [
        ("tiny", [96, 192, 384, 768], [2, 2, 6, 2]),
        ("small", [96, 192, 384, 768], [2, 2, 18, 2]),
        ("base", [128, 256, 512, 1024], [2, 2, 18, 2]),
    ];
    for (name, dims, depths) in expected {
        let cfg = ModelConfig::preset(name).ok_or("missing preset")?;
        cfg.validate().map_err(|e| e.to_string())?;
        let extents: Vec<usize> = cfg.stage_extents([224, 224]).iter().map(|e| e.0).collect();
        ensure!(extents == [56, 28, 14, 7], "{name}: extents {extents:?}");
        ensure!(cfg.stages.iter().map(|s| s.dim).eq(dims), "{name}: dims");
        ensure!(cfg.stages.iter().map(|s| s.depth).eq(depths), "{name}: depths");
        ensure!(cfg.stages.iter().map(|s| s.patch).eq([4, 2, 2, 2]), "{name}: patches");
        for (i, s) in cfg.stages.iter().enumerate() {
            let levels = [FocalLevel::new(1, [13, 13, 13, 7][i]), FocalLevel::new(7, [7, 5, 3, 1][i])];
            ensure!(s.window == 7 && s.levels == levels, "{name}: stage {i} levels {:?}", s.levels);
        }
        let report = flops_for_config(&cfg, [224, 224]).map_err(|e| e.to_string())?;
        let heights: Vec<usize> = report.stages.iter().map(|s| s.height).collect();
        ensure!(heights == [56, 28, 14, 7], "{name}: counted heights {heights:?}");
    }
    Ok("56/28/14/7 for tiny, small, base".into())
}

fn param_counts() -> Check {
    let mut detail = Vec::new();
    for (name, reference) in [("tiny", 29.1e6), ("small", 51.1e6), ("base", 89.8e6)] {
        let cfg = ModelConfig::preset(name).unwrap();
        let model = build_model(&cfg, 0).map_err(|e| e.to_string())?;
        let n = count_params(&model);
        let formula = analytic_param_count(&cfg);
        ensure!(n == formula, "{name}: count {n} != formula {formula}");
        let rel = n as f64 / reference - 1.0;
        ensure!(rel.abs() <= 0.03, "{name}: {n} is {:+.2}% from {reference}", 100.0 * rel);
        detail.push(format!("{name} {:.2}M ({:+.2}%)", n as f64 / 1e6, 100.0 * rel));
    }
    let stub = Linear::zeros(4, 3, true).num_params();
    ensure!(stub == 15, "linear stub has {stub} params");
    Ok(detail.join(", "))
}

fn toy_configs() -> Vec<ModelConfig> {
    let stage = |depth, dim, patch, heads, window, levels: &[(usize, usize)]| StageConfig {
        depth,
        dim,
        patch,
        heads,
        window,
        levels: levels.iter().map(|&(w, r)| FocalLevel::new(w, r)).collect(),
    };
    vec![
        ModelConfig {
            input_size: [16, 16],
            in_channels: 3,
            stages: vec![stage(1, 4, 2, 2, 2, &[(1, 4), (2, 3)]), stage(1, 8, 2, 2, 2, &[(1, 2), (2, 1)])],
            num_classes: 5,
        },
        ModelConfig {
            input_size: [18, 14],
            in_channels: 2,
            stages: vec![stage(2, 6, 3, 3, 3, &[(1, 5), (2, 2), (4, 2)])],
            num_classes: 3,
        },
        ModelConfig {
            input_size: [20, 20],
            in_channels: 1,
            stages: vec![stage(0, 4, 2, 1, 2, &[(1, 2)]), stage(1, 8, 2, 4, 4, &[(1, 7), (3, 2)])],
            num_classes: 4,
        },
    ]
}

fn flop_counts() -> Check {
    let tiny = flops_for_config(&ModelConfig::tiny(), [224, 224]).map_err(|e| e.to_string())?;
    let rel = tiny.total as f64 / 4.9e9 - 1.0;
    ensure!(rel.abs() <= 0.15, "tiny {} MACs is {:+.1}% from 4.9G", tiny.total, 100.0 * rel);
    for (i, cfg) in toy_configs().iter().enumerate() {
        let model = build_model(cfg, i as u64).map_err(|e| e.to_string())?;
        let [h, w] = cfg.input_size;
        let x = FeatureMap::from_tensor(uniform(&[h, w, cfg.in_channels], 1.0, &mut rng_from_seed(i as u64)))
            .map_err(|e| e.to_string())?;
        let (_, _, macs) = naive_model_forward(&model, &x).map_err(|e| e.to_string())?;
        let counted = count_flops(&model, cfg.input_size).map_err(|e| e.to_string())?.total;
        ensure!(counted == macs.total(), "toy {i}: analytic {counted} != instrumented {}", macs.total());
    }
    Ok(format!("tiny {:.3}G ({:+.1}%), 3 toy configs exact", tiny.total as f64 / 1e9, 100.0 * rel))
}

fn three_level_geometry() -> Check {
    let levels = [FocalLevel::new(1, 8), FocalLevel::new(2, 6), FocalLevel::new(4, 5)];
    let plan = GatherPlan::build(20, 20, 4, &levels).map_err(|e| e.to_string())?;
    let w = plan.window(2, 2).map_err(|e| e.to_string())?;
    let sizes: Vec<usize> = w.slots.iter().map(Vec::len).collect();
    ensure!(sizes == [64, 36, 25], "region sizes {sizes:?}");
    ensure!(plan.keys == 125, "{} keys", plan.keys);
    for (l, side) in [(0, 8), (1, 6), (2, 5)] {
        let rows: BTreeSet<isize> = w.slots[l].iter().map(|s| s.row).collect();
        let cols: BTreeSet<isize> = w.slots[l].iter().map(|s| s.col).collect();
        ensure!(rows.len() == side && cols.len() == side, "level {l} is not {side}x{side}");
    }
    let coarse: BTreeSet<(isize, isize)> = w.slots[2].iter().filter(|s| s.valid).map(|s| (s.row, s.col)).collect();
    ensure!(plan.pooled[2] == (5, 5) && coarse.len() == 25, "coarsest level covers {} of 25 cells", coarse.len());

    let three_level = configs().join("geometry.toml");
    let (code, report) = cli(&["geometry", "--config", three_level.to_str().unwrap(), "--window", "2,2"])?;
    ensure!(code == EXIT_OK && report.result["rows"] == 125, "cli reported {}", report.result["rows"]);
    Ok("8x8 + 6x6 + 5x5 = 125 keys, coarsest covers 5x5".into())
}

fn oracle_equivalence() -> Check {
    let (code, report) = cli(&["equivalence", "--seed", "0", "--cases", "100", "--threads", "1"])?;
    let delta = report.result["max_delta"].as_f64().ok_or("no max_delta")?;
    ensure!(code == EXIT_OK && delta < 1e-12, "max |delta| {delta:e} (exit {code})");
    Ok(format!("100 cases, max |delta| {delta:.2e}"))
}

fn degeneracy() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let c = degeneracy_case(seed).map_err(|e| e.to_string())?;
        ensure!(c.levels[0].region >= 2 * c.height.max(c.width) && c.window >= c.height.max(c.width), "seed {seed}: not degenerate");
        worst = worst.max(c.error);
    }
    ensure!(worst < DEGENERACY_TOL, "max |delta| {worst:e}");
    Ok(format!("20 cases, max |delta| {worst:.2e}"))
}

fn gradient_check() -> Check {
    let (code, report) = cli(&["gradcheck", "--seed", "0", "--cases", "20"])?;
    let err = report.result["max_rel_error"].as_f64().ok_or("no max_rel_error")?;
    ensure!(code == EXIT_OK && err < 1e-5, "max relative error {err:e} (exit {code})");
    Ok(format!("20 cases, max relative error {err:.2e}"))
}

fn window_independence() -> Check {
    let mut perturbed = 0;
    for seed in 0..20 {
        let t = window_independence_trial(seed).map_err(|e| e.to_string())?;
        ensure!(t.unchanged, "seed {seed}: window {:?} changed", t.window);
        perturbed += t.perturbed_tokens;
    }
    Ok(format!("20 trials bit-identical, {perturbed} tokens perturbed in total"))
}

fn receptive_fields() -> Check {
    let mut checked = 0;
    for base in 1..=7 {
        let levels = focal_core::geometry::doubling_schedule(base, 6, 8);
        for k in 1..=levels.len() {
            let (area, tokens) = receptive_field(&levels[..k]).map_err(|e| e.to_string())?;
            ensure!(area >= tokens, "base {base}, {k} levels: area {area} < {tokens}");
            ensure!(k == 1 || area > tokens, "base {base}, {k} levels: area {area} not above {tokens}");
            checked += 1;
        }
    }
    let (code, report) = cli(&["receptive-field", "--levels", "doubling:3:5"])?;
    let rows = report.result["rows"].as_array().ok_or("no rows")?;
    ensure!(code == EXIT_OK && rows.len() == 5, "cli rows {}", rows.len());
    let last = &rows[4];
    Ok(format!("{checked} budgets; base 3 at 5 levels: {} tokens see {} tokens", last["tokens"], last["focal_area"]))
}

fn bias_resize() -> Check {
    let mut model = build_model(&ModelConfig::tiny(), 0).map_err(|e| e.to_string())?;
    let mut rng = rng_from_seed(1);
    for stage in &mut model.stages {
        for layer in &mut stage.layers {
            let t = &mut layer.attn.bias_fine;
            *t = uniform(t.shape(), 1.0, &mut rng);
        }
    }
    let same = resize_focal_regions(&model, 0, &[13, 13, 13, 7]).map_err(|e| e.to_string())?;
    let bits = |m: &focal_core::Model| m.named_params().into_iter().flat_map(|(_, t)| t.into_data()).map(f64::to_bits).collect::<Vec<_>>();
    ensure!(bits(&same) == bits(&model), "identity resize changed weights");

    let det = resize_focal_regions(&model, 0, &[15, 13, 9, 7]).map_err(|e| e.to_string())?;
    for (i, (stage, extent)) in det.stages.iter().zip([21, 19, 15, 13]).enumerate() {
        for layer in &stage.layers {
            let heads = det.config.stages[i].heads;
            ensure!(layer.attn.bias_fine.shape() == [heads, extent, extent], "stage {i}: {:?}", layer.attn.bias_fine.shape());
        }
    }
    let src = &model.stages[0].layers[0].attn.bias_fine;
    let slice = Tensor::new(vec![19, 19], src.data()[..361].to_vec()).map_err(|e| e.to_string())?;
    let direct = bilinear_resize(&slice, 21, 21).map_err(|e| e.to_string())?;
    ensure!(&det.stages[0].layers[0].attn.bias_fine.data()[..441] == direct.data(), "table differs from direct resize");

    let image = FeatureMap::from_tensor(uniform(&[224, 224, 3], 1.0, &mut rng)).map_err(|e| e.to_string())?;
    let f = forward_features(&det, &image).map_err(|e| e.to_string())?;
    ensure!(f.logits.data().len() == 1000 && f.logits.data().iter().all(|v| v.is_finite()), "bad logits");
    Ok("regions (13,13,13,7) -> (15,13,9,7), extents 21/19/15/13, forward ok at 224".into())
}

fn strip_time(mut r: RunReport) -> RunReport {
    r.wall_ms = 0;
    r
}

fn determinism() -> Check {
    let a = build_model(&ModelConfig::tiny(), 42).map_err(|e| e.to_string())?;
    let b = build_model(&ModelConfig::tiny(), 42).map_err(|e| e.to_string())?;
    ensure!(a == b, "weights differ between builds");
    drop((a, b));

    let toy = configs().join("toy.toml");
    let toy = toy.to_str().unwrap();
    let runs: [&[&str]; 3] = [
        &["forward", "--model", "tiny", "--seed", "42"],
        &["attn-stats", "--config", toy, "--seed", "42"],
        &["equivalence", "--seed", "42", "--cases", "16"],
    ];
    for args in runs {
        let mut reports = Vec::new();
        for threads in ["1", "8"] {
            let mut argv = args.to_vec();
            argv.extend(["--threads", threads]);
            let (code, report) = cli(&argv)?;
            ensure!(code == EXIT_OK, "{argv:?} exited {code}");
            reports.push(strip_time(report));
        }
        ensure!(reports[0] == reports[1], "{} differs between 1 and 8 threads", args[0]);
    }
    Ok("weights, tiny logits and 3 reports identical at 1 and 8 threads".into())
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("structural reproduction of the presets", 1, structure),
        ("parameter counts", 5, param_counts),
        ("FLOP counts", 30, flop_counts),
        ("three-level gather geometry", 1, three_level_geometry),
        ("oracle equivalence", 60, oracle_equivalence),
        ("full-attention degeneracy", 10, degeneracy),
        ("gradient check", 60, gradient_check),
        ("window independence", 10, window_independence),
        ("receptive field", 1, receptive_fields),
        ("bias resize", 10, bias_resize),
        ("determinism", 30, determinism),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(_) if elapsed > Duration::from_secs(budget) => Err(format!("took {elapsed:.2?}, budget {budget} s")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name} ({elapsed:.2?}): {detail}", i + 1),
            Err(reason) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({elapsed:.2?}): {reason}", i + 1);
            }
        }
    }
    println!("{} of 11 criteria passed", 11 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
