use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use adfq_core::vit::{load_checkpoint, save_checkpoint, ViTConfig, ViTModel};
use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_adfq");

fn tiny_model() -> ViTConfig {
    ViTConfig { image_h: 8, image_w: 8, channels: 1, patch_h: 4, patch_w: 4, dim: 8, heads: 2, blocks: 1, mlp_dim: 16, classes: 4 }
}

struct Work {
    dir: tempfile::TempDir,
}

impl Work {
    fn new() -> Self {
        let w = Work { dir: tempfile::tempdir().unwrap() };
        let cfg = json!({
            "model": tiny_model(),
            "iterations": 5,
            "calib_samples": 8,
            "eval_samples": 16,
            "train": { "samples": 64, "epochs": 1, "batch": 16 }
        });
        std::fs::write(w.path("config.json"), cfg.to_string()).unwrap();
        w
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        let cfg = self.path("config.json");
        Command::new(BIN).arg("--config").arg(&cfg).args(args).current_dir(self.dir.path()).output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr_kind(out: &Output) -> String {
    let s = String::from_utf8_lossy(&out.stderr);
    let line = s.lines().find(|l| l.starts_with("error kind=")).unwrap_or_else(|| panic!("{s}"));
    line.split_whitespace().nth(1).unwrap().trim_start_matches("kind=").to_string()
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let w = Work::new();
    let out = w.run(&["eval", "--checkpoint", "missing.json", "--out", "r.json"]);
    assert_eq!((code(&out), stderr_kind(&out).as_str()), (4, "io"));

    std::fs::write(w.path("bad.json"), r#"{"bits_w": 12}"#).unwrap();
    let out = Command::new(BIN).args(["--config", "bad.json", "gen-model", "--out", "m.json"]).current_dir(w.dir.path()).output().unwrap();
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));

    let out = w.run(&["--bits-a", "1", "gen-model", "--out", "m.json"]);
    assert_eq!(code(&out), 3);

    let out = w.run(&["no-such-command"]);
    assert_eq!(code(&out), 2);

    let out = w.run(&["gen-model"]);
    assert_eq!((code(&out), stderr_kind(&out).as_str()), (2, "usage"));

    std::fs::write(w.path("junk.json"), "{ not json").unwrap();
    let out = w.run(&["eval", "--checkpoint", "junk.json", "--out", "r.json"]);
    assert!(matches!(code(&out), 5 | 10), "{}", code(&out));

    w.ok(&["gen-model", "--out", "m.json"]);
    let default_cfg = Command::new(BIN).args(["eval", "--checkpoint", "m.json", "--out", "r.json"]).current_dir(w.dir.path()).output().unwrap();
    assert_eq!((code(&default_cfg), stderr_kind(&default_cfg).as_str()), (3, "config"));
}

#[test]
fn pipeline_commands_chain_and_are_deterministic() {
    let w = Work::new();
    w.ok(&["gen-model", "--out", "m.json"]);
    w.ok(&["gen-data", "--split", "calib", "--out", "calib.json"]);
    w.ok(&["gen-data", "--split", "eval", "--count", "12", "--out", "eval.json"]);
    let train = w.ok(&["train-toy", "--checkpoint", "m.json", "--out", "t.json"]);
    let report: Value = serde_json::from_str(&train).unwrap();
    assert_eq!(report["epoch_losses"].as_array().unwrap().len(), 1);

    let mut seen = Vec::new();
    for i in 0..2 {
        let b = format!("run{i}/bundle.json");
        std::fs::create_dir_all(w.path(&format!("run{i}"))).unwrap();
        let q = w.ok(&["quantize", "--checkpoint", "t.json", "--calib", "calib.json", "--out", &b]);
        assert_eq!(q.lines().count(), 2);
        assert!(q.starts_with("block0.mha\t"));
        let r = format!("run{i}/report.json");
        w.ok(&["eval", "--checkpoint", "t.json", "--bundle", &b, "--data", "eval.json", "--out", &r]);
        let read = |p: &str| std::fs::read(w.path(p)).unwrap();
        seen.push((read(&b), read(&format!("run{i}/bundle.bin")), read(&r)));
    }
    assert!(seen[0] == seen[1]);
    let report: Value = serde_json::from_slice(&seen[0].2).unwrap();
    assert_eq!(report["samples"], 12);
    assert_eq!(report["traces"].as_array().unwrap().len(), 2);

    let c = w.ok(&["calibrate", "--checkpoint", "t.json", "--calib", "calib.json", "--out", "c.json"]);
    assert!(c.is_empty());
    w.ok(&["eval", "--checkpoint", "t.json", "--data", "eval.json", "--out", "fp.json"]);
    let fp: Value = serde_json::from_slice(&std::fs::read(w.path("fp.json")).unwrap()).unwrap();
    assert_eq!(fp["top1_agreement"], 1.0);
    assert_eq!(fp["config"]["quantized"], false);
}

fn histogram(dir: &Path, site: &str) -> Vec<(f64, f64, u64)> {
    let mut r = csv::Reader::from_path(dir.join(format!("{site}.csv"))).unwrap();
    assert_eq!(r.headers().unwrap(), vec!["bin_left", "bin_right", "count"]);
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            (rec[0].parse().unwrap(), rec[1].parse().unwrap(), rec[2].parse().unwrap())
        })
        .collect()
}

fn ratios(dir: &Path) -> Vec<Value> {
    serde_json::from_slice::<Vec<Value>>(&std::fs::read(dir.join("outlier_ratios.json")).unwrap()).unwrap()
}

#[test]
fn inspect_writes_histograms_and_ratios() {
    let w = Work::new();
    let zero = ViTModel::zeros_with_pos(tiny_model(), 3).unwrap();
    save_checkpoint(&zero, &w.path("zero.json")).unwrap();
    let out = w.path("inspect_zero");
    w.ok(&["inspect", "--checkpoint", "zero.json", "--out", out.to_str().unwrap()]);
    for kind in ["qkv_input", "q", "k", "softmax", "v", "attn_out_input", "fc1_input", "fc2_input"] {
        let h = histogram(&out, &format!("block0.{kind}"));
        assert_eq!(h.len(), 2048, "{kind}");
    }
    let q = histogram(&out, "block0.q");
    let total: u64 = q.iter().map(|r| r.2).sum();
    let at_zero: u64 = q.iter().filter(|r| r.0 <= 0.0 && 0.0 <= r.1).map(|r| r.2).sum();
    assert_eq!(at_zero, total);
    assert_eq!(total, 8 * 4 * 8);
    assert!(ratios(&out).iter().all(|r| r["ratio"].is_null() || r["ratio"] == 0.0));

    let mut spiky = ViTModel::init(tiny_model(), 4).unwrap();
    spiky.blocks[0].ln1_gamma.data_mut()[2] = 40.0;
    save_checkpoint(&spiky, &w.path("spiky.json")).unwrap();
    assert_eq!(load_checkpoint(&w.path("spiky.json")).unwrap().blocks[0].ln1_gamma.data()[2], 40.0);
    let out = w.path("inspect_spiky");
    w.ok(&["inspect", "--checkpoint", "spiky.json", "--out", out.to_str().unwrap()]);
    let qkv = ratios(&out).into_iter().find(|r| r["site"] == "block0.qkv_input").unwrap();
    assert_eq!(qkv["alpha"], 5.0);
    assert!(qkv["ratio"].as_f64().unwrap() > 0.0, "{qkv}");
}

#[test]
fn ablate_reports_every_row_and_the_sweep() {
    let w = Work::new();
    w.ok(&["gen-model", "--out", "m.json"]);
    let text = w.ok(&["ablate", "--checkpoint", "m.json", "--out", "ablation.json"]);
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines.iter().filter(|l| l.starts_with("poq=")).count(), 8);
    assert_eq!(lines.iter().filter(|l| l.starts_with("alpha_")).count(), 18);
    let table: Value = serde_json::from_slice(&std::fs::read(w.path("ablation.json")).unwrap()).unwrap();
    assert_eq!(table["naive_matches_all_disabled"], true);
    assert_eq!(table["rows"].as_array().unwrap().len(), 8);
}

#[test]
fn disable_flags_reach_the_report() {
    let w = Work::new();
    w.ok(&["gen-model", "--out", "m.json"]);
    w.ok(&["--disable", "amo", "--disable", "slq", "quantize", "--checkpoint", "m.json", "--out", "b.json"]);
    w.ok(&["--disable", "amo", "--disable", "slq", "eval", "--checkpoint", "m.json", "--bundle", "b.json", "--out", "r.json"]);
    let r: Value = serde_json::from_slice(&std::fs::read(w.path("r.json")).unwrap()).unwrap();
    assert_eq!(r["config"]["toggles"], json!({"poq": true, "slq": false, "amo": false}));
    assert!(r["traces"].as_array().unwrap().is_empty());
}

#[test]
fn gradcheck_passes() {
    let w = Work::new();
    let text = w.ok(&["gradcheck", "--graphs", "2", "--out", "audit.json"]);
    assert_eq!(text.lines().count(), 9);
    assert!(text.lines().all(|l| l.ends_with("\tpass")));
}
