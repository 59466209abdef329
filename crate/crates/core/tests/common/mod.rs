#![allow(dead_code)]

use adfq_core::config::RunConfig;
use adfq_core::quant::BitWidth;
use adfq_core::vit::ViTConfig;

pub fn tiny(blocks: usize) -> ViTConfig {
    ViTConfig {
        image_h: 8,
        image_w: 8,
        channels: 1,
        patch_h: 4,
        patch_w: 4,
        dim: 8,
        heads: 2,
        blocks,
        mlp_dim: 16,
        classes: 4,
    }
}

pub fn run_config(model: ViTConfig, bits: u32) -> RunConfig {
    RunConfig {
        model,
        bits_w: BitWidth::new(bits).unwrap(),
        bits_a: BitWidth::new(bits).unwrap(),
        ..RunConfig::default()
    }
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}
