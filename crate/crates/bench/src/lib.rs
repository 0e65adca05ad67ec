//! Fixtures shared by the criterion benchmarks under `benches/`.

use focal_core::init::{rng_from_seed, uniform};
use focal_core::{AttentionGeometry, FeatureMap, FocalAttentionParams, FocalLevel, FocalLayerParams, Result};

/// Two-level geometry with the presets' 7x7 windows and 7x7 sub-windows.
pub fn stage_geometry(dim: usize, heads: usize, fine_region: usize, coarse_region: usize) -> AttentionGeometry {
    AttentionGeometry {
        window: 7,
        levels: vec![FocalLevel::new(1, fine_region), FocalLevel::new(7, coarse_region)],
        dim,
        heads,
    }
}

pub fn attention_fixture(side: usize, geometry: AttentionGeometry, seed: u64) -> Result<(FeatureMap, FocalAttentionParams)> {
    let mut rng = rng_from_seed(seed);
    let x = FeatureMap::from_tensor(uniform(&[side, side, geometry.dim], 1.0, &mut rng))?;
    let params = FocalAttentionParams::random(geometry, 0.1, &mut rng)?;
    Ok((x, params))
}

pub fn layer_fixture(side: usize, geometry: AttentionGeometry, seed: u64) -> Result<(FeatureMap, FocalLayerParams)> {
    let mut rng = rng_from_seed(seed);
    let x = FeatureMap::from_tensor(uniform(&[side, side, geometry.dim], 1.0, &mut rng))?;
    let params = FocalLayerParams::init(geometry, &mut rng)?;
    Ok((x, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_have_requested_shapes() {
        let (x, p) = attention_fixture(14, stage_geometry(24, 3, 13, 2), 0).unwrap();
        assert_eq!(x.as_tensor().shape(), &[14, 14, 24]);
        assert_eq!(p.bias_fine.shape(), &[3, 19, 19]);
        let (_, l) = layer_fixture(7, stage_geometry(24, 3, 7, 1), 0).unwrap();
        assert_eq!(l.fc1.out_dim(), 96);
    }
}
