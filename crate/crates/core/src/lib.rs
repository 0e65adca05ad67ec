//! Focal self-attention and the focal Transformer backbone in `f64`, with
//! slow reference oracles, an analytic backward pass, and parameter/MAC
//! accounting.

pub mod attention;
pub mod error;
pub mod feature;
pub mod geometry;
pub mod init;
pub mod io;
pub mod layers;
pub mod model;
pub mod oracle;
pub mod tensor;
pub mod verify;

pub use attention::{
    attention_breakdown, bias_rows, focal_attention_backward, focal_attention_forward, focal_layer_forward,
    gather_window_kv, project_qkv, subwindow_pool, AttentionBreakdown, AttentionGeometry, AttentionGrads,
    AttentionProbs, FocalAttentionParams, FocalLayerParams,
};
pub use error::{FocalError, Result};
pub use feature::FeatureMap;
pub use geometry::{
    attention_cost, focal_region_coords, partition_windows, receptive_field, FocalLevel, GatherPlan, WindowGrid,
};
pub use layers::{LayerNorm, Linear, Params};
pub use model::{
    analytic_param_count, attention_statistics, build_model, count_flops, count_params, forward_features, patch_embed,
    resize_focal_regions, Model, ModelConfig, StageConfig,
};
pub use tensor::Tensor;
