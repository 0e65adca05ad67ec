use focal_core::init::{rng_for_stream, uniform};
use focal_core::io::{load_model, save_model};
use focal_core::oracle::naive_model_forward;
use focal_core::{
    build_model, count_flops, forward_features, resize_focal_regions, FeatureMap, FocalLevel, ModelConfig, Params,
    StageConfig,
};

fn config() -> ModelConfig {
    ModelConfig {
        input_size: [24, 20],
        in_channels: 3,
        stages: vec![
            StageConfig {
                depth: 2,
                dim: 8,
                patch: 2,
                heads: 2,
                window: 3,
                levels: vec![FocalLevel::new(1, 5), FocalLevel::new(3, 3)],
            },
            StageConfig {
                depth: 1,
                dim: 12,
                patch: 2,
                heads: 3,
                window: 3,
                levels: vec![FocalLevel::new(1, 3), FocalLevel::new(2, 2)],
            },
        ],
        num_classes: 6,
    }
}

fn image(cfg: &ModelConfig) -> FeatureMap {
    let [h, w] = cfg.input_size;
    FeatureMap::from_tensor(uniform(&[h, w, cfg.in_channels], 1.0, &mut rng_for_stream(5, 1))).unwrap()
}

#[test]
fn saved_model_reproduces_logits() {
    let cfg = config();
    let mut model = build_model(&cfg, 11).unwrap();
    model.randomize(0.2, &mut rng_for_stream(11, 2));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.fw");
    save_model(&model, &path).unwrap();
    let back = load_model(&path).unwrap();
    let x = image(&cfg);
    let a = forward_features(&model, &x).unwrap();
    let b = forward_features(&back, &x).unwrap();
    assert_eq!(a.logits, b.logits);
}

#[test]
fn fast_model_matches_oracle_model() {
    let cfg = config();
    let mut model = build_model(&cfg, 3).unwrap();
    model.randomize(0.2, &mut rng_for_stream(3, 2));
    let x = image(&cfg);
    let fast = forward_features(&model, &x).unwrap();
    let (maps, logits, macs) = naive_model_forward(&model, &x).unwrap();
    for (a, b) in fast.stage_maps.iter().zip(&maps) {
        assert!(a.max_abs_diff(b) < 1e-10);
    }
    assert!(fast.logits.max_abs_diff(&logits) < 1e-10);
    assert_eq!(count_flops(&model, cfg.input_size).unwrap().total, macs.total());
}

#[test]
fn resized_model_survives_round_trip() {
    let cfg = config();
    let model = build_model(&cfg, 1).unwrap();
    let resized = resize_focal_regions(&model, 0, &[7, 5]).unwrap();
    assert_eq!(resized.config.stages[0].levels[0], FocalLevel::new(1, 7));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("resized.fw");
    save_model(&resized, &path).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back, resized);
    let f = forward_features(&back, &image(&cfg)).unwrap();
    assert_eq!(f.stage_maps[1].as_tensor().shape(), &[6, 5, 12]);
}
