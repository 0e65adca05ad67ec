use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use focal_core::geometry::{doubling_schedule, receptive_field};
use focal_core::init::{rng_for_stream, uniform};
use focal_core::io::{load_model, save_model};
use focal_core::model::{attention_statistics, param_breakdown, Features};
use focal_core::verify::{self, CaseOutcome};
use focal_core::{
    build_model, count_flops, count_params, forward_features, resize_focal_regions, FeatureMap, FocalLevel,
    GatherPlan, Model, ModelConfig, Params, Tensor,
};

use crate::{sha256_hex, Cli, Command, ModelSource};

pub(crate) struct Outcome {
    /// Hashed into the report's config digest.
    pub config: Value,
    pub result: Value,
    pub table: Option<String>,
    pub passed: bool,
}

impl Outcome {
    fn new(config: Value, result: Value) -> Self {
        Outcome {
            config,
            result,
            table: None,
            passed: true,
        }
    }
}

/// A single attention layer's geometry, read from TOML or JSON.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeometryConfig {
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub levels: Vec<FocalLevel>,
}

fn read_document<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    } else {
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

fn load(source: &ModelSource, seed: u64) -> Result<Model> {
    if let Some(path) = &source.weights {
        return load_model(path).with_context(|| format!("loading {}", path.display()));
    }
    let config = match (&source.model, &source.config) {
        (Some(name), _) => ModelConfig::preset(name).ok_or_else(|| anyhow!("unknown preset {name}"))?,
        (None, Some(path)) => ModelConfig::from_file(path).with_context(|| format!("loading {}", path.display()))?,
        (None, None) => bail!("one of --model, --config or --weights is required"),
    };
    Ok(build_model(&config, seed)?)
}

fn sample_image(config: &ModelConfig, input: Option<[usize; 2]>, seed: u64) -> Result<FeatureMap> {
    let [h, w] = input.unwrap_or(config.input_size);
    let mut rng = rng_for_stream(seed, 1);
    Ok(FeatureMap::from_tensor(uniform(&[h, w, config.in_channels], 1.0, &mut rng))?)
}

fn f64_digest(values: impl Iterator<Item = f64>) -> String {
    let bytes: Vec<u8> = values.flat_map(f64::to_le_bytes).collect();
    sha256_hex(&bytes)
}

pub fn weights_digest(model: &Model) -> String {
    let mut bytes = Vec::new();
    model.visit("", &mut |_, t| bytes.extend(t.data().iter().flat_map(|v| v.to_le_bytes())));
    sha256_hex(&bytes)
}

fn features_summary(f: &Features) -> Value {
    let logits = f.logits.data();
    let argmax = logits
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0;
    json!({
        "stage_shapes": f.stage_maps.iter().map(|m| [m.height(), m.width(), m.channels()]).collect::<Vec<_>>(),
        "num_classes": logits.len(),
        "logits_digest": f64_digest(logits.iter().copied()),
        "logits_head": &logits[..logits.len().min(5)],
        "argmax": argmax,
    })
}

pub(crate) fn dispatch(cli: &Cli) -> Result<Outcome> {
    let seed = cli.seed;
    match &cli.command {
        Command::Paramcount { source } => {
            let model = load(source, seed)?;
            Ok(Outcome::new(
                json!(model.config),
                json!({ "total": count_params(&model), "breakdown": param_breakdown(&model) }),
            ))
        }
        Command::Flops { source, input } => {
            let model = load(source, seed)?;
            let input = input.unwrap_or(model.config.input_size);
            let report = count_flops(&model, input)?;
            Ok(Outcome::new(
                json!({ "model": model.config, "input": input }),
                json!({
                    "input": input,
                    "total": report.total,
                    "gmacs": report.total as f64 / 1e9,
                    "head": report.head,
                    "stages": report.stages,
                }),
            ))
        }
        Command::Geometry { config, window, .. } => geometry(config, *window),
        Command::ReceptiveField { levels, .. } => receptive(levels),
        Command::Forward { source, input } => {
            let model = load(source, seed)?;
            let image = sample_image(&model.config, *input, seed)?;
            let f = forward_features(&model, &image)?;
            let mut result = features_summary(&f);
            result["input"] = json!([image.height(), image.width(), image.channels()]);
            result["weights_digest"] = json!(weights_digest(&model));
            Ok(Outcome::new(json!(model.config), result))
        }
        Command::Equivalence { cases } => harness(
            "equivalence",
            seed,
            *cases,
            verify::EQUIVALENCE_TOL,
            "max_delta",
            verify::equivalence_case,
        ),
        Command::Gradcheck { cases } => {
            harness("gradcheck", seed, *cases, verify::GRADCHECK_TOL, "max_rel_error", verify::gradcheck_case)
        }
        Command::AttnStats { source, input, .. } => {
            let model = load(source, seed)?;
            let image = sample_image(&model.config, *input, seed)?;
            let (f, stats) = attention_statistics(&model, &image)?;
            let mut csv = String::from("stage,layer,inside_window,surround_local,global_pooled\n");
            for s in &stats {
                let b = &s.breakdown;
                writeln!(
                    csv,
                    "{},{},{},{},{}",
                    s.stage, s.layer, b.inside_window, b.surround_local, b.global_pooled
                )?;
            }
            let mut result = features_summary(&f);
            result["layers"] = json!(stats);
            Ok(Outcome {
                table: Some(csv),
                ..Outcome::new(json!(model.config), result)
            })
        }
        Command::BiasDump { source, out } => bias_dump(&load(source, seed)?, out),
        Command::ResizeBias {
            source,
            sizes,
            level,
            out,
        } => {
            let model = load(source, seed)?;
            let old: Vec<usize> = model
                .config
                .stages
                .iter()
                .map(|s| s.levels.get(*level).map_or(0, |l| l.region))
                .collect();
            let resized = resize_focal_regions(&model, *level, sizes)?;
            save_model(&resized, out).with_context(|| format!("writing {}", out.display()))?;
            let tables: Vec<Option<Vec<usize>>> = resized
                .stages
                .iter()
                .map(|s| {
                    s.layers.first().and_then(|l| {
                        if *level == 0 {
                            Some(l.attn.bias_fine.shape().to_vec())
                        } else {
                            l.attn.bias_coarse[*level].as_ref().map(|t| t.shape().to_vec())
                        }
                    })
                })
                .collect();
            Ok(Outcome::new(
                json!({ "model": model.config, "level": level, "sizes": sizes }),
                json!({
                    "level": level,
                    "old_regions": old,
                    "new_regions": sizes,
                    "table_shapes": tables,
                    "params": count_params(&resized),
                    "weights_digest": weights_digest(&resized),
                    "path": out.display().to_string(),
                }),
            ))
        }
    }
}

fn geometry(path: &Path, window: Option<(usize, usize)>) -> Result<Outcome> {
    let cfg: GeometryConfig = read_document(path)?;
    let plan = GatherPlan::build(cfg.height, cfg.width, cfg.window, &cfg.levels)?;
    let csv = plan.to_csv(window)?;
    let region_cells: Vec<usize> = cfg.levels.iter().map(FocalLevel::keys).collect();
    let result = json!({
        "windows": [plan.grid.rows, plan.grid.cols],
        "pooled": plan.pooled,
        "keys_per_window": plan.keys,
        "level_keys": region_cells,
        "window": window,
        "rows": csv.lines().count() - 1,
    });
    Ok(Outcome {
        table: Some(csv),
        ..Outcome::new(json!(cfg), result)
    })
}

/// `SW:SR,...` or `doubling:REGION:LEVELS[:CAP]`.
pub fn parse_levels(spec: &str) -> Result<Vec<FocalLevel>> {
    let spec = spec.trim();
    if let Some(rest) = spec.strip_prefix("doubling:") {
        let parts: Vec<usize> = rest
            .split(':')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("bad schedule {spec:?}"))?;
        let (region, levels, cap) = match parts[..] {
            [r, l] => (r, l, 8),
            [r, l, c] => (r, l, c),
            _ => bail!("expected doubling:REGION:LEVELS[:CAP], got {spec:?}"),
        };
        if region == 0 || levels == 0 || cap == 0 {
            bail!("schedule values must be >= 1");
        }
        return Ok(doubling_schedule(region, levels, cap));
    }
    spec.split(',')
        .map(|item| {
            let (sw, sr) = item.split_once(':').ok_or_else(|| anyhow!("expected SW:SR, got {item:?}"))?;
            let level = FocalLevel::new(sw.trim().parse()?, sr.trim().parse()?);
            level.validate()?;
            Ok(level)
        })
        .collect()
}

fn receptive(spec: &str) -> Result<Outcome> {
    let levels = parse_levels(spec)?;
    let mut csv = String::from("levels,tokens,focal_area,standard_area\n");
    let mut rows = Vec::new();
    for k in 1..=levels.len() {
        let (area, tokens) = receptive_field(&levels[..k])?;
        writeln!(csv, "{k},{tokens},{area},{tokens}")?;
        rows.push(json!({ "levels": k, "tokens": tokens, "focal_area": area, "standard_area": tokens }));
    }
    Ok(Outcome {
        table: Some(csv),
        ..Outcome::new(json!(levels), json!({ "schedule": levels, "rows": rows }))
    })
}

fn harness(
    name: &str,
    seed: u64,
    cases: u64,
    tolerance: f64,
    metric: &str,
    case: fn(u64) -> focal_core::Result<CaseOutcome>,
) -> Result<Outcome> {
    if cases == 0 {
        bail!("--cases must be >= 1");
    }
    let outcomes: Vec<CaseOutcome> = (0..cases)
        .into_par_iter()
        .map(|i| case(seed.wrapping_add(i)))
        .collect::<focal_core::Result<_>>()?;
    let worst = outcomes
        .iter()
        .fold(&outcomes[0], |w, c| if c.error > w.error { c } else { w });
    let passed = worst.error < tolerance;
    let per_case: Vec<Value> = outcomes
        .iter()
        .map(|c| {
            json!({
                "seed": c.seed,
                "shape": [c.height, c.width, c.dim],
                "heads": c.heads,
                "window": c.window,
                "levels": c.levels,
                metric: c.error,
            })
        })
        .collect();
    let verdict = if passed { "<" } else { ">=" };
    let mut outcome = Outcome::new(
        json!({ "harness": name, "first_seed": seed, "cases": cases }),
        json!({
            "cases": cases,
            "tolerance": tolerance,
            metric: worst.error,
            "worst_seed": worst.seed,
            "status": format!("{metric} {verdict} {tolerance:e}"),
            "per_case": per_case,
        }),
    );
    outcome.passed = passed;
    Ok(outcome)
}

fn table_csv(t: &Tensor) -> Result<String> {
    let [heads, h, w] = t.shape() else {
        bail!("bias table is not [heads, h, w]");
    };
    let mut csv = String::from("head,row,col,value\n");
    for head in 0..*heads {
        for r in 0..*h {
            for c in 0..*w {
                writeln!(csv, "{head},{r},{c},{}", t.get(&[head, r, c]))?;
            }
        }
    }
    Ok(csv)
}

fn bias_dump(model: &Model, dir: &Path) -> Result<Outcome> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut files = Vec::new();
    for (i, stage) in model.stages.iter().enumerate() {
        for (j, layer) in stage.layers.iter().enumerate() {
            let tables = std::iter::once((0, &layer.attn.bias_fine))
                .chain(layer.attn.bias_coarse.iter().enumerate().filter_map(|(l, t)| t.as_ref().map(|t| (l, t))));
            for (l, t) in tables {
                let name = format!("stage{i}_layer{j}_level{l}.csv");
                let path = dir.join(&name);
                std::fs::write(&path, table_csv(t)?).with_context(|| format!("writing {}", path.display()))?;
                files.push(json!({ "file": name, "stage": i, "layer": j, "level": l, "shape": t.shape() }));
            }
        }
    }
    Ok(Outcome::new(
        json!(model.config),
        json!({ "dir": dir.display().to_string(), "files": files }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn failing(seed: u64) -> focal_core::Result<CaseOutcome> {
        Ok(CaseOutcome {
            seed,
            height: 1,
            width: 1,
            dim: 1,
            heads: 1,
            window: 1,
            levels: vec![FocalLevel::new(1, 1)],
            error: if seed == 2 { 1.0 } else { 0.0 },
        })
    }

    #[test]
    fn harness_flags_the_worst_case() {
        let o = harness("t", 0, 4, 1e-12, "max_delta", failing).unwrap();
        assert!(!o.passed);
        assert_eq!(o.result["worst_seed"], 2);
        assert_eq!(o.result["status"], "max_delta >= 1e-12");
        assert!(harness("t", 3, 1, 1e-12, "max_delta", failing).unwrap().passed);
    }

    #[test]
    fn level_specs() {
        assert_eq!(parse_levels("1:3, 2:5").unwrap(), vec![FocalLevel::new(1, 3), FocalLevel::new(2, 5)]);
        assert_eq!(parse_levels("doubling:3:2").unwrap(), vec![FocalLevel::new(1, 3), FocalLevel::new(2, 3)]);
        assert_eq!(parse_levels("doubling:2:3:2").unwrap()[2], FocalLevel::new(2, 4));
        assert!(parse_levels("1-3").is_err());
        assert!(parse_levels("doubling:0:3").is_err());
    }

    #[test]
    fn extents_and_pairs() {
        assert_eq!(crate::parse_extent("224").unwrap(), [224, 224]);
        assert_eq!(crate::parse_extent("32x48").unwrap(), [32, 48]);
        assert!(crate::parse_extent("a").is_err());
        assert_eq!(crate::parse_pair("2, 3").unwrap(), (2, 3));
        assert!(crate::parse_pair("2").is_err());
    }
}
