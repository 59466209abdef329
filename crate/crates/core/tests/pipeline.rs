mod common;

use adfq_core::config::{RunConfig, TrainConfig};
use adfq_core::pipeline::{
    ablate, evaluate, gen_synthetic_dataset, label_of, load_dataset, quantize_model, region_grid, save_dataset,
    toggle_combinations, train_toy, REPORT_FORMAT,
};
use adfq_core::tensor::gelu_scalar;
use adfq_core::vit::{ViTConfig, ViTModel};
use common::{run_config, tiny};
use serde_json::Value;
use statrs::distribution::{ContinuousCDF, Normal};

#[test]
fn gelu_matches_exact_normal_cdf() {
    // statrs loses ~1e-10 relative in the far tail; mpmath agrees with ours there.
    let n = Normal::standard();
    for i in -80..=80 {
        let x = i as f64 / 10.0;
        let want = x * n.cdf(x);
        assert!((gelu_scalar(x) - want).abs() <= 1e-9 * want.abs().max(1e-3), "{x}: {} vs {want}", gelu_scalar(x));
    }
}

#[test]
fn default_labels_are_balanced() {
    let cfg = ViTConfig { classes: 4, ..ViTConfig::default() };
    assert_eq!(region_grid(4), (2, 2));
    let data = gen_synthetic_dataset(&cfg, 10_000, 99).unwrap();
    let labels = data.labels.as_ref().unwrap();
    for c in 0..4 {
        let share = labels.iter().filter(|&&l| l == c).count() as f64 / 10_000.0;
        assert!((share - 0.25).abs() <= 0.02, "class {c}: {share}");
    }
    for (img, &l) in data.images.iter().zip(labels).take(200) {
        assert_eq!(label_of(img, 4).unwrap(), l);
    }
}

#[test]
fn datasets_are_seeded_and_round_trip() {
    let cfg = tiny(1);
    let a = gen_synthetic_dataset(&cfg, 12, 7).unwrap();
    assert_eq!(a, gen_synthetic_dataset(&cfg, 12, 7).unwrap());
    assert_ne!(a.images, gen_synthetic_dataset(&cfg, 12, 8).unwrap().images);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.json");
    save_dataset(&a, &path).unwrap();
    let b = load_dataset(&path).unwrap();
    assert_eq!(a.images, b.images);
    assert_eq!(a.labels, b.labels);
}

#[test]
fn training_reduces_the_loss() {
    let cfg = tiny(1);
    let model = ViTModel::init(cfg, 3).unwrap();
    let data = gen_synthetic_dataset(&cfg, 160, 4).unwrap();
    let tc = TrainConfig { samples: 160, epochs: 4, lr: 3e-3, batch: 16, val_fraction: 0.2 };
    let (trained, report) = train_toy(&model, &data, &tc, 5).unwrap();
    assert_eq!(report.epoch_losses.len(), 4);
    assert!(report.epoch_losses[3] < report.epoch_losses[0], "{:?}", report.epoch_losses);
    assert_eq!((report.train_samples, report.val_samples), (128, 32));
    assert!(trained.all_finite());
}

fn conforms(v: &Value, schema: &Value, path: &str) -> Result<(), String> {
    if let Some(c) = schema.get("const") {
        if v != c {
            return Err(format!("{path}: {v} != {c}"));
        }
    }
    if let Some(e) = schema.get("enum").and_then(Value::as_array) {
        if !e.contains(v) {
            return Err(format!("{path}: {v} not in enum"));
        }
    }
    if let Some(t) = schema.get("type") {
        let types: Vec<&str> = match t {
            Value::String(s) => vec![s.as_str()],
            Value::Array(a) => a.iter().filter_map(Value::as_str).collect(),
            _ => vec![],
        };
        let ok = types.iter().any(|t| match *t {
            "object" => v.is_object(),
            "array" => v.is_array(),
            "string" => v.is_string(),
            "integer" => v.is_u64() || v.is_i64(),
            "number" => v.is_number(),
            "boolean" => v.is_boolean(),
            "null" => v.is_null(),
            _ => false,
        });
        if !ok {
            return Err(format!("{path}: {v} is not {types:?}"));
        }
    }
    if let Some(obj) = v.as_object() {
        for key in schema.get("required").and_then(Value::as_array).into_iter().flatten() {
            if !obj.contains_key(key.as_str().unwrap()) {
                return Err(format!("{path}: missing {key}"));
            }
        }
        let props = schema.get("properties").and_then(Value::as_object);
        for (k, child) in obj {
            match props.and_then(|p| p.get(k)) {
                Some(s) => conforms(child, s, &format!("{path}.{k}"))?,
                None if schema.get("additionalProperties") == Some(&Value::Bool(false)) => {
                    let listed = schema["required"].as_array().is_some_and(|r| r.iter().any(|x| x == k));
                    if !listed {
                        return Err(format!("{path}: unexpected {k}"));
                    }
                }
                None => {}
            }
        }
    }
    if let (Some(items), Some(arr)) = (schema.get("items"), v.as_array()) {
        for (i, x) in arr.iter().enumerate() {
            conforms(x, items, &format!("{path}[{i}]"))?;
        }
    }
    Ok(())
}

#[test]
fn report_matches_the_published_schema() {
    let mut cfg = run_config(tiny(1), 4);
    cfg.iterations = 4;
    let model = ViTModel::init(cfg.model, 1).unwrap();
    let calib = gen_synthetic_dataset(&cfg.model, 6, 2).unwrap();
    let eval = gen_synthetic_dataset(&cfg.model, 8, 3).unwrap();
    let (bundle, _) = quantize_model(&model, &calib.images, &cfg).unwrap();
    let report = evaluate(&model, Some(&bundle), &eval, &cfg).unwrap();
    assert_eq!(report.format, REPORT_FORMAT);
    assert_eq!(report.site_errors.len(), 8);
    assert_eq!(report.traces.len(), 2);
    let schema: Value =
        serde_json::from_str(include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/eval_report.schema.json")))
            .unwrap();
    conforms(&serde_json::to_value(&report).unwrap(), &schema, "$").unwrap();

    let fp = evaluate(&model, None, &eval, &cfg).unwrap();
    assert_eq!((fp.top1_agreement, fp.logits_mse_normalized), (1.0, 0.0));
    assert!((fp.mean_cosine - 1.0).abs() < 1e-12);
}

#[test]
fn ablation_covers_every_combination() {
    let mut cfg: RunConfig = run_config(tiny(1), 4);
    cfg.iterations = 4;
    let model = ViTModel::init(cfg.model, 21).unwrap();
    let calib = gen_synthetic_dataset(&cfg.model, 8, 22).unwrap();
    let eval = gen_synthetic_dataset(&cfg.model, 8, 23).unwrap();
    let alphas = [0.25, 0.5, 1.0, 2.0, 5.0];
    let table = ablate(&model, &calib.images, &eval, &cfg, &alphas).unwrap();
    assert_eq!(table.rows.len(), 8);
    assert!(table.naive_matches_all_disabled);
    let combos = toggle_combinations();
    for (row, t) in table.rows.iter().zip(combos) {
        assert_eq!((row.poq, row.slq, row.amo), (t.poq, t.slq, t.amo));
        assert_eq!(row.report.traces.is_empty(), !t.amo);
    }
    assert_eq!(table.alpha_sweep.len(), 2 * alphas.len());
    for layer in table.alpha_sweep.chunks(alphas.len()) {
        assert!(layer.windows(2).all(|w| w[1].outlier_ratio <= w[0].outlier_ratio));
        assert!(layer[0].outlier_ratio > 0.0);
    }
}
