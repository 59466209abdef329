mod common;

use adfq_core::calib::{collect_stats, init_bundle, save_bundle};
use adfq_core::config::{InputMode, RunConfig};
use adfq_core::pipeline::{evaluate, gen_synthetic_dataset, quantize_model, Dataset};
use adfq_core::recon::{run_all_modules, ModuleKind, OptimConfig};
use adfq_core::tensor::Tensor;
use adfq_core::vit::{forward_full, BlockIo, SiteKind, TapFilter, ViTModel};
use common::{run_config, tiny};

fn setup(blocks: usize, bits: u32, iterations: usize) -> (ViTModel, Dataset, RunConfig) {
    let mut cfg = run_config(tiny(blocks), bits);
    cfg.iterations = iterations;
    let model = ViTModel::init(cfg.model, 11).unwrap();
    let calib = gen_synthetic_dataset(&cfg.model, 16, 12).unwrap();
    (model, calib, cfg)
}

#[test]
fn one_block_runs_two_modules_in_order() {
    let (model, calib, cfg) = setup(1, 4, 5);
    let (bundle, _) = quantize_model(&model, &calib.images, &cfg).unwrap();
    let labels: Vec<_> = bundle.traces.iter().map(|t| (t.module.as_str(), t.kind)).collect();
    assert_eq!(labels, [("block0.mha", ModuleKind::Mha), ("block0.mlp", ModuleKind::Mlp)]);
    assert!(bundle.traces.iter().all(|t| t.steps.len() == 5));
}

#[test]
fn modules_reduce_their_losses_at_k4() {
    let (model, calib, cfg) = setup(2, 4, 80);
    let (bundle, _) = quantize_model(&model, &calib.images, &cfg).unwrap();
    assert_eq!(bundle.traces.len(), 4);
    for t in &bundle.traces {
        assert!(t.best_lo() < t.first_lo(), "{}: {} vs {}", t.module, t.best_lo(), t.first_lo());
        if t.kind == ModuleKind::Mha {
            let total = |s: &adfq_core::recon::TraceStep| s.l_o + s.l_as;
            let best = t.steps.iter().map(total).fold(f64::INFINITY, f64::min);
            assert!(best < total(&t.steps[0]), "{}", t.module);
        }
    }
}

#[test]
fn reconstruction_lowers_end_to_end_error() {
    let (model, calib, cfg) = setup(2, 4, 80);
    let eval = gen_synthetic_dataset(&cfg.model, 32, 13).unwrap();
    let (tuned, _) = quantize_model(&model, &calib.images, &cfg).unwrap();
    let plain_cfg = RunConfig {
        toggles: adfq_core::config::Toggles { amo: false, ..cfg.toggles },
        ..cfg.clone()
    };
    let (plain, _) = quantize_model(&model, &calib.images, &plain_cfg).unwrap();
    let a = evaluate(&model, Some(&tuned), &eval, &cfg).unwrap();
    let b = evaluate(&model, Some(&plain), &eval, &plain_cfg).unwrap();
    assert!(a.logits_mse_normalized < b.logits_mse_normalized, "{} vs {}", a.logits_mse_normalized, b.logits_mse_normalized);
}

#[test]
fn k8_without_regularizer_is_a_near_noop() {
    // Log2 codes keep a fixed relative step at any k, so only a uniform MLP starts near zero.
    let (model, calib, mut cfg) = setup(1, 8, 30);
    cfg.lambda = 0.0;
    cfg.toggles.slq = false;
    let (bundle, _) = quantize_model(&model, &calib.images, &cfg).unwrap();
    let energy = |f: &dyn Fn(&BlockIo) -> &Tensor| -> f64 {
        calib
            .images
            .iter()
            .map(|img| {
                let out = forward_full(img, &model, None, &TapFilter::None, true).unwrap();
                f(&out.io[0]).data().iter().map(|v| v * v).sum::<f64>()
            })
            .sum()
    };
    let energies = [energy(&|io| &io.mha_out), energy(&|io| &io.mlp_out)];
    for (t, e) in bundle.traces.iter().zip(energies) {
        if t.kind != ModuleKind::Mlp {
            continue;
        }
        assert!(t.lo_before / e < 1e-3, "{}: {}", t.module, t.lo_before / e);
        assert!((t.lo_after - t.lo_before).abs() / e < 1e-3, "{}: {} vs {}", t.module, t.lo_after, t.lo_before);
    }
}

#[test]
fn frozen_scales_leave_activation_params_untouched() {
    let (model, calib, mut cfg) = setup(1, 4, 20);
    cfg.lambda = 0.0;
    cfg.lr_a = 0.0;
    let policy = cfg.policy();
    let stats = collect_stats(&model, &calib.images, &policy, false).unwrap();
    let before = init_bundle(&model, &stats, &policy).unwrap();
    let mut after = before.clone();
    run_all_modules(&model, &mut after, &calib.images, &OptimConfig::from(&cfg)).unwrap();
    assert_eq!(before.blocks[0].acts, after.blocks[0].acts);
    assert_ne!(before.blocks[0].weights, after.blocks[0].weights);
}

#[test]
fn tuned_scales_move_only_uniform_sites() {
    let (model, calib, mut cfg) = setup(1, 4, 20);
    cfg.lr_a = 1e-2;
    let policy = cfg.policy();
    let stats = collect_stats(&model, &calib.images, &policy, false).unwrap();
    let before = init_bundle(&model, &stats, &policy).unwrap();
    let (after, _) = quantize_model(&model, &calib.images, &cfg).unwrap();
    for kind in SiteKind::ALL {
        let (a, b) = (before.blocks[0].act(kind), after.blocks[0].act(kind));
        if a.uniform_params().is_none() {
            assert_eq!(a, b, "{}", kind.name());
        }
    }
    assert_ne!(before.blocks[0].acts, after.blocks[0].acts);
}

#[test]
fn quantization_is_deterministic() {
    let (model, calib, cfg) = setup(1, 4, 15);
    let mut bytes = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let (bundle, _) = quantize_model(&model, &calib.images, &cfg).unwrap();
        let path = dir.path().join("bundle.json");
        save_bundle(&bundle, &path).unwrap();
        bytes.push((std::fs::read(&path).unwrap(), std::fs::read(path.with_extension("bin")).unwrap()));
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn quantized_input_mode_runs_every_module() {
    let (model, calib, mut cfg) = setup(2, 4, 10);
    cfg.input_mode = InputMode::Quantized;
    let (bundle, _) = quantize_model(&model, &calib.images, &cfg).unwrap();
    assert_eq!(bundle.traces.len(), 4);
    assert!(bundle.traces.iter().all(|t| t.lo_after.is_finite() && t.steps.iter().all(|s| s.l_o.is_finite())));
    cfg.input_mode = InputMode::Clean;
    let (clean, _) = quantize_model(&model, &calib.images, &cfg).unwrap();
    assert_eq!(clean.traces[0].lo_before, bundle.traces[0].lo_before);
    assert_ne!(clean.traces[2].lo_before, bundle.traces[2].lo_before);
}
