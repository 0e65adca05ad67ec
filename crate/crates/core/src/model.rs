//! Four-stage focal Transformer: patch embeddings, stacks of focal layers and
//! a classification head, plus parameter and MAC accounting.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_breakdown, focal_layer_forward, focal_layer_forward_with_probs, AttentionBreakdown, AttentionGeometry,
    FocalLayerParams, MLP_RATIO,
};
use crate::error::{FocalError, Result};
use crate::feature::FeatureMap;
use crate::geometry::{attention_cost, pooled_extent, FocalLevel};
use crate::init::rng_from_seed;
use crate::layers::{join, LayerNorm, Linear, Params};
use crate::tensor::{bilinear_resize, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub depth: usize,
    pub dim: usize,
    /// Spatial reduction of the patch embedding entering this stage.
    pub patch: usize,
    pub heads: usize,
    pub window: usize,
    pub levels: Vec<FocalLevel>,
}

impl StageConfig {
    pub fn attention_geometry(&self) -> AttentionGeometry {
        AttentionGeometry {
            window: self.window,
            levels: self.levels.clone(),
            dim: self.dim,
            heads: self.heads,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `[height, width]`
    pub input_size: [usize; 2],
    pub in_channels: usize,
    pub stages: Vec<StageConfig>,
    pub num_classes: usize,
}

pub const PRESETS: [&str; 3] = ["tiny", "small", "base"];

impl ModelConfig {
    fn preset_with(dims: [usize; 4], depths: [usize; 4]) -> Self {
        let fine = [13, 13, 13, 7];
        let coarse = [7, 5, 3, 1];
        let stages = (0..4)
            .map(|i| StageConfig {
                depth: depths[i],
                dim: dims[i],
                patch: if i == 0 { 4 } else { 2 },
                heads: dims[i] / 32,
                window: 7,
                levels: vec![FocalLevel::new(1, fine[i]), FocalLevel::new(7, coarse[i])],
            })
            .collect();
        ModelConfig {
            input_size: [224, 224],
            in_channels: 3,
            stages,
            num_classes: 1000,
        }
    }

    pub fn tiny() -> Self {
        Self::preset_with([96, 192, 384, 768], [2, 2, 6, 2])
    }

    pub fn small() -> Self {
        Self::preset_with([96, 192, 384, 768], [2, 2, 18, 2])
    }

    pub fn base() -> Self {
        Self::preset_with([128, 256, 512, 1024], [2, 2, 18, 2])
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "tiny" => Some(Self::tiny()),
            "small" => Some(Self::small()),
            "base" => Some(Self::base()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(FocalError::config("stages", "at least one stage is required"));
        }
        for (name, v) in [
            ("input_size[0]", self.input_size[0]),
            ("input_size[1]", self.input_size[1]),
            ("in_channels", self.in_channels),
            ("num_classes", self.num_classes),
        ] {
            if v == 0 {
                return Err(FocalError::config(name, "must be >= 1"));
            }
        }
        let mut reduction = 1;
        for (i, s) in self.stages.iter().enumerate() {
            if s.patch == 0 {
                return Err(FocalError::config(format!("stages[{i}].patch"), "must be >= 1"));
            }
            if s.heads == 0 || !s.dim.is_multiple_of(s.heads) {
                return Err(FocalError::config(
                    format!("stages[{i}].dim"),
                    format!("{} is not divisible by {} heads", s.dim, s.heads),
                ));
            }
            s.attention_geometry().validate().map_err(|e| match e {
                FocalError::Config { field, reason } => FocalError::Config {
                    field: format!("stages[{i}].{field}"),
                    reason,
                },
                other => other,
            })?;
            reduction *= s.patch;
        }
        if self.input_size.iter().any(|&e| e < reduction) {
            return Err(FocalError::config(
                "input_size",
                format!("smaller than the total reduction factor {reduction}"),
            ));
        }
        Ok(())
    }

    /// Spatial extents of every stage output for an input of `input` pixels.
    pub fn stage_extents(&self, input: [usize; 2]) -> Vec<(usize, usize)> {
        let (mut h, mut w) = (input[0], input[1]);
        self.stages
            .iter()
            .map(|s| {
                h = h.div_ceil(s.patch);
                w = w.div_ceil(s.patch);
                (h, w)
            })
            .collect()
    }

    /// Reads a JSON (`.json`) or TOML document mirroring this struct.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ModelConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| FocalError::config("config", e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| FocalError::config("config", e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub embed: Linear,
    pub layers: Vec<FocalLayerParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub stages: Vec<Stage>,
    pub norm: LayerNorm,
    pub head: Linear,
}

impl Params for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, s) in self.stages.iter().enumerate() {
            let p = join(prefix, &format!("stages.{i}"));
            s.embed.visit(&join(&p, "embed"), f);
            for (j, l) in s.layers.iter().enumerate() {
                l.visit(&join(&p, &format!("layers.{j}")), f);
            }
        }
        self.norm.visit(&join(prefix, "norm"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            let p = join(prefix, &format!("stages.{i}"));
            s.embed.visit_mut(&join(&p, "embed"), f);
            for (j, l) in s.layers.iter_mut().enumerate() {
                l.visit_mut(&join(&p, &format!("layers.{j}")), f);
            }
        }
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Non-overlapping `p x p` patches flattened in `(row, col, channel)` order
/// and mapped through `embed`; edges are zero-padded to a multiple of `p`.
pub fn patch_embed(x: &FeatureMap, patch: usize, embed: &Linear) -> Result<FeatureMap> {
    let cin = x.channels();
    let k = patch * patch * cin;
    if embed.in_dim() != k {
        return Err(FocalError::Shape {
            lhs: embed.weight.shape().to_vec(),
            rhs: vec![embed.out_dim(), k],
            context: "patch embedding weight",
        });
    }
    let (oh, ow) = (x.height().div_ceil(patch), x.width().div_ceil(patch));
    let mut patches = Tensor::zeros(&[oh, ow, k]);
    for i in 0..oh {
        for j in 0..ow {
            let row = patches.row_mut(i * ow + j);
            for u in 0..patch {
                for v in 0..patch {
                    let (r, c) = (i * patch + u, j * patch + v);
                    if r < x.height() && c < x.width() {
                        let dst = (u * patch + v) * cin;
                        row[dst..dst + cin].copy_from_slice(x.pixel(r, c));
                    }
                }
            }
        }
    }
    FeatureMap::from_tensor(embed.forward(&patches)?)
}

pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = rng_from_seed(seed);
    let mut cin = config.in_channels;
    let mut stages = Vec::with_capacity(config.stages.len());
    for s in &config.stages {
        let embed = Linear::init(s.patch * s.patch * cin, s.dim, true, &mut rng);
        let layers = (0..s.depth)
            .map(|_| FocalLayerParams::init(s.attention_geometry(), &mut rng))
            .collect::<Result<_>>()?;
        stages.push(Stage { embed, layers });
        cin = s.dim;
    }
    Ok(Model {
        config: config.clone(),
        stages,
        norm: LayerNorm::new(cin),
        head: Linear::init(cin, config.num_classes, true, &mut rng),
    })
}

#[derive(Debug, Clone)]
pub struct Features {
    pub stage_maps: Vec<FeatureMap>,
    pub logits: Tensor,
}

/// Runs every stage and returns all stage outputs plus
/// `head(LN(mean over tokens of the last map))`.
pub fn forward_features(model: &Model, image: &FeatureMap) -> Result<Features> {
    forward_with(model, image, focal_layer_forward)
}

pub(crate) fn forward_with(
    model: &Model,
    image: &FeatureMap,
    mut layer_fn: impl FnMut(&FeatureMap, &FocalLayerParams) -> Result<FeatureMap>,
) -> Result<Features> {
    if image.channels() != model.config.in_channels {
        return Err(FocalError::Shape {
            lhs: image.as_tensor().shape().to_vec(),
            rhs: vec![model.config.in_channels],
            context: "image channels",
        });
    }
    let reduction: usize = model.config.stages.iter().map(|s| s.patch).product();
    if image.height() < reduction || image.width() < reduction {
        return Err(FocalError::config("image", format!("smaller than the reduction factor {reduction}")));
    }
    let mut x = image.clone();
    let mut stage_maps = Vec::with_capacity(model.stages.len());
    for (stage, cfg) in model.stages.iter().zip(&model.config.stages) {
        x = patch_embed(&x, cfg.patch, &stage.embed)?;
        for layer in &stage.layers {
            x = layer_fn(&x, layer)?;
        }
        stage_maps.push(x.clone());
    }
    let logits = classify(model, &x)?;
    Ok(Features { stage_maps, logits })
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerAttention {
    pub stage: usize,
    pub layer: usize,
    #[serde(flatten)]
    pub breakdown: AttentionBreakdown,
}

/// Forward pass that records where each layer's attention mass goes.
pub fn attention_statistics(model: &Model, image: &FeatureMap) -> Result<(Features, Vec<LayerAttention>)> {
    let mut labels = model
        .stages
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.layers.len()).map(move |j| (i, j)));
    let mut stats = Vec::new();
    let features = forward_with(model, image, |x, layer| {
        let (y, probs) = focal_layer_forward_with_probs(x, layer)?;
        let (stage, index) = labels.next().expect("one label per layer");
        stats.push(LayerAttention {
            stage,
            layer: index,
            breakdown: attention_breakdown(&probs, &probs.plan)?,
        });
        Ok(y)
    })?;
    Ok((features, stats))
}

pub fn classify(model: &Model, last: &FeatureMap) -> Result<Tensor> {
    let mut mean = Tensor::zeros(&[last.channels()]);
    for r in 0..last.height() {
        for c in 0..last.width() {
            for (acc, v) in mean.data_mut().iter_mut().zip(last.pixel(r, c)) {
                *acc += v;
            }
        }
    }
    let mean = mean.map(|v| v / last.tokens() as f64);
    let normed = model.norm.forward(&mean)?;
    model.head.forward(&normed)
}

pub fn count_params(model: &Model) -> usize {
    model.num_params()
}

/// Parameter totals grouped by module kind.
pub fn param_breakdown(model: &Model) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    model.visit("", &mut |name, t| {
        let kind = if name.contains(".embed.") {
            "patch_embed"
        } else if name.contains(".attn.pool.") {
            "pooling"
        } else if name.contains(".attn.bias_") {
            "position_bias"
        } else if name.contains(".attn.") {
            "attention_projections"
        } else if name.contains(".mlp.") {
            "mlp"
        } else if name.contains("norm") {
            "layer_norm"
        } else {
            "head"
        };
        *out.entry(kind.to_string()).or_insert(0) += t.numel();
    });
    out
}

/// Parameter count from the configuration alone.
pub fn analytic_param_count(config: &ModelConfig) -> usize {
    let mut total = 0;
    let mut cin = config.in_channels;
    for s in &config.stages {
        let d = s.dim;
        total += s.patch * s.patch * cin * d + d;
        let r0 = s.levels[0].region;
        let fine = s.heads * (s.window + r0 - 1).pow(2);
        let coarse: usize = s.levels.iter().skip(1).map(|l| s.heads * l.region * l.region).sum();
        let pool: usize = s
            .levels
            .iter()
            .filter(|l| l.sub_window > 1)
            .map(|l| l.sub_window * l.sub_window + 1)
            .sum();
        let hidden = MLP_RATIO * d;
        let per_layer = 4 * (d * d + d) + (d * hidden + hidden) + (hidden * d + d) + 4 * d + fine + coarse + pool;
        total += s.depth * per_layer;
        cin = d;
    }
    total + 2 * cin + cin * config.num_classes + config.num_classes
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StageFlops {
    pub height: usize,
    pub width: usize,
    pub embed: u64,
    pub pool: u64,
    pub qkv: u64,
    pub attention: u64,
    pub proj: u64,
    pub mlp: u64,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlopReport {
    pub stages: Vec<StageFlops>,
    pub head: u64,
    pub total: u64,
}

/// Multiply-accumulate count of one forward pass; one MAC is one reported
/// FLOP. Normalization, softmax and activations are not counted.
pub fn count_flops(model: &Model, input: [usize; 2]) -> Result<FlopReport> {
    flops_for_config(&model.config, input)
}

pub fn flops_for_config(config: &ModelConfig, input: [usize; 2]) -> Result<FlopReport> {
    let mut cin = config.in_channels as u64;
    let mut stages = Vec::new();
    for (s, (h, w)) in config.stages.iter().zip(config.stage_extents(input)) {
        let d = s.dim as u64;
        let tokens = (h * w) as u64;
        let mut st = StageFlops {
            height: h,
            width: w,
            embed: tokens * (s.patch * s.patch) as u64 * cin * d,
            ..Default::default()
        };
        let kv_tokens: u64 = s
            .levels
            .iter()
            .map(|l| {
                let (ph, pw) = pooled_extent(h, w, l.sub_window);
                (ph * pw) as u64
            })
            .sum();
        let cost = attention_cost(h, w, s.dim, s.window, &s.levels)?;
        let depth = s.depth as u64;
        st.pool = depth * cost.pool_macs;
        st.attention = depth * cost.attn_macs;
        st.qkv = depth * (tokens * d * d + 2 * kv_tokens * d * d);
        st.proj = depth * tokens * d * d;
        st.mlp = depth * 2 * tokens * d * (MLP_RATIO as u64 * d);
        st.total = st.embed + st.pool + st.qkv + st.attention + st.proj + st.mlp;
        stages.push(st);
        cin = d;
    }
    let head = cin * config.num_classes as u64;
    let total = stages.iter().map(|s| s.total).sum::<u64>() + head;
    Ok(FlopReport { stages, head, total })
}

/// Changes the focal region of `level` in every stage and resamples the
/// affected position-bias tables bilinearly to the new extents.
pub fn resize_focal_regions(model: &Model, level: usize, new_regions: &[usize]) -> Result<Model> {
    if new_regions.len() != model.stages.len() {
        return Err(FocalError::config(
            "sizes",
            format!("expected {} sizes, got {}", model.stages.len(), new_regions.len()),
        ));
    }
    let mut out = model.clone();
    for (i, (&region, stage)) in new_regions.iter().zip(out.stages.iter_mut()).enumerate() {
        if region == 0 {
            return Err(FocalError::config(format!("sizes[{i}]"), "must be >= 1"));
        }
        let cfg = &mut out.config.stages[i];
        if level >= cfg.levels.len() {
            return Err(FocalError::config("level", format!("stage {i} has {} levels", cfg.levels.len())));
        }
        cfg.levels[level].region = region;
        for layer in &mut stage.layers {
            let attn = &mut layer.attn;
            attn.geometry.levels[level].region = region;
            if level == 0 {
                let e = attn.geometry.fine_table_extent();
                attn.bias_fine = resize_heads(&attn.bias_fine, e, e)?;
            } else if let Some(t) = attn.bias_coarse[level].as_mut() {
                *t = resize_heads(t, region, region)?;
            }
        }
    }
    Ok(out)
}

/// Resizes the model's first-level regions, the detection-time workflow.
pub fn resize_level0_regions(model: &Model, new_regions: &[usize]) -> Result<Model> {
    resize_focal_regions(model, 0, new_regions)
}

/// Bilinear resize of every `[h, w]` slice of a `[heads, h, w]` table.
pub fn resize_heads(table: &Tensor, new_h: usize, new_w: usize) -> Result<Tensor> {
    let [heads, h, w] = table.shape() else {
        return Err(FocalError::Shape {
            lhs: table.shape().to_vec(),
            rhs: vec![],
            context: "bias table must be [heads, h, w]",
        });
    };
    let (heads, h, w) = (*heads, *h, *w);
    let mut data = Vec::with_capacity(heads * new_h * new_w);
    for head in 0..heads {
        let slice = Tensor::new(vec![h, w], table.data()[head * h * w..(head + 1) * h * w].to_vec())?;
        data.extend(bilinear_resize(&slice, new_h, new_w)?.into_data());
    }
    Tensor::new(vec![heads, new_h, new_w], data)
}
