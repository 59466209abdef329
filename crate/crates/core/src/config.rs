//! Run configuration: one JSON document plus command-line overrides, with
//! precedence flags > file > defaults. Paper mode swaps the desk-scale
//! defaults for the published ones in [`RunConfig::defaults`].

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::quant::{BitWidth, OutlierConfig, OutlierRule, SHIFT_LOG2_EPS};
use crate::serde_ext::f64_or_inf;
use crate::vit::{SiteKind, ViTConfig};

/// Quantizer family placed at an activation site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SitePolicy {
    UniformPerTensor,
    UniformPerPatch,
    OutlierAware {
        #[serde(with = "f64_or_inf")]
        alpha: f64,
    },
    Log2,
    ShiftLog2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    pub poq: bool,
    pub slq: bool,
    pub amo: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            poq: true,
            slq: true,
            amo: true,
        }
    }
}

/// Where reconstruction takes module inputs from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Full-precision activations of the original model.
    #[default]
    Clean,
    /// Activations of the partially quantized model built so far.
    Quantized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub model: u64,
    pub data: u64,
    pub calib: u64,
    pub eval: u64,
    pub recon: u64,
    pub train: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            model: 0,
            data: 1,
            calib: 2,
            eval: 3,
            recon: 4,
            train: 5,
        }
    }
}

impl Seeds {
    /// Every stream derived from one base seed.
    pub fn from_base(base: u64) -> Self {
        let s = |k: u64| base.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(k);
        Seeds {
            model: s(0),
            data: s(1),
            calib: s(2),
            eval: s(3),
            recon: s(4),
            train: s(5),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub samples: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Fraction of the dataset held out for validation accuracy.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            samples: 2048,
            epochs: 5,
            lr: 2e-3,
            batch: 32,
            val_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub calib: Option<PathBuf>,
    pub bundle: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ViTConfig,
    pub bits_w: BitWidth,
    pub bits_a: BitWidth,
    #[serde(with = "f64_or_inf")]
    pub alpha_qkv: f64,
    #[serde(with = "f64_or_inf")]
    pub alpha_fc1: f64,
    pub outlier_rule: OutlierRule,
    pub epsilon: f64,
    pub lambda: f64,
    pub lr_w: f64,
    pub lr_a: f64,
    pub iterations: usize,
    pub batch: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub calib_samples: usize,
    pub eval_samples: usize,
    pub input_mode: InputMode,
    pub toggles: Toggles,
    pub site_overrides: BTreeMap<SiteKind, SitePolicy>,
    pub seeds: Seeds,
    pub train: TrainConfig,
    pub paths: Paths,
    pub paper_mode: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::defaults(false)
    }
}

impl RunConfig {
    /// Desk-scale defaults, or the published settings when `paper_mode`.
    pub fn defaults(paper_mode: bool) -> Self {
        RunConfig {
            model: ViTConfig {
                classes: 4,
                ..ViTConfig::default()
            },
            bits_w: BitWidth::new(4).expect("valid"),
            bits_a: BitWidth::new(4).expect("valid"),
            alpha_qkv: 5.0,
            alpha_fc1: 10.0,
            outlier_rule: OutlierRule::Magnitude,
            epsilon: SHIFT_LOG2_EPS,
            lambda: 0.01,
            lr_w: 3e-3,
            lr_a: 4e-5,
            iterations: if paper_mode { 3000 } else { 300 },
            batch: 8,
            beta_start: 10.0,
            beta_end: 2.0,
            calib_samples: if paper_mode { 1024 } else { 64 },
            eval_samples: 256,
            input_mode: InputMode::Clean,
            toggles: Toggles::default(),
            site_overrides: BTreeMap::new(),
            seeds: Seeds::default(),
            train: TrainConfig::default(),
            paths: Paths::default(),
            paper_mode,
        }
    }

    /// Parses a config document layered over the defaults. `paper_mode`
    /// forces paper defaults even when the document does not ask for them.
    pub fn from_json_str(text: &str, paper_mode: bool) -> Result<Self> {
        let doc: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if !doc.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        let paper = paper_mode || doc.get("paper_mode").and_then(Value::as_bool).unwrap_or(false);
        let mut base = serde_json::to_value(RunConfig::defaults(paper))?;
        merge(&mut base, doc);
        if paper {
            base["paper_mode"] = Value::Bool(true);
        }
        let cfg: RunConfig = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_string(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, a) in [("alpha_qkv", self.alpha_qkv), ("alpha_fc1", self.alpha_fc1)] {
            if !(a > 0.0) {
                return bad(format!("{name} must be positive, got {a}"));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        for (name, lr) in [("lr_w", self.lr_w), ("lr_a", self.lr_a), ("train.lr", self.train.lr)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be non-negative, got {lr}"));
            }
        }
        if self.iterations == 0 || self.batch == 0 {
            return bad("iterations and batch must be at least 1".into());
        }
        if !(self.beta_start > self.beta_end && self.beta_end > 0.0) {
            return bad(format!(
                "beta schedule needs start > end > 0, got {} -> {}",
                self.beta_start, self.beta_end
            ));
        }
        if self.calib_samples == 0 || self.eval_samples == 0 {
            return bad("sample counts must be at least 1".into());
        }
        if self.train.batch == 0 || !(0.0..1.0).contains(&self.train.val_fraction) {
            return bad("train.batch must be ≥ 1 and train.val_fraction in [0, 1)".into());
        }
        for (site, p) in &self.site_overrides {
            if let SitePolicy::OutlierAware { alpha } = p {
                if !(*alpha > 0.0) {
                    return bad(format!("override for {} has alpha {alpha}", site.name()));
                }
            }
        }
        Ok(())
    }

    /// Quantizer family at each site after toggles and overrides.
    pub fn site_policy(&self, kind: SiteKind) -> SitePolicy {
        if let Some(p) = self.site_overrides.get(&kind) {
            return *p;
        }
        match kind {
            SiteKind::QkvInput if self.toggles.poq => SitePolicy::OutlierAware {
                alpha: self.alpha_qkv,
            },
            SiteKind::Fc1Input if self.toggles.poq => SitePolicy::OutlierAware {
                alpha: self.alpha_fc1,
            },
            SiteKind::Fc2Input if self.toggles.slq => SitePolicy::ShiftLog2,
            SiteKind::Softmax => SitePolicy::Log2,
            _ => SitePolicy::UniformPerTensor,
        }
    }

    pub fn policy(&self) -> QuantPolicy {
        QuantPolicy {
            bits_w: self.bits_w,
            bits_a: self.bits_a,
            epsilon: self.epsilon,
            outlier_rule: self.outlier_rule,
            sites: SiteKind::ALL.map(|k| self.site_policy(k)),
            stat_alpha: [self.alpha_qkv, self.alpha_fc1],
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Everything calibration needs to place and initialise quantizers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantPolicy {
    pub bits_w: BitWidth,
    pub bits_a: BitWidth,
    pub epsilon: f64,
    pub outlier_rule: OutlierRule,
    /// Indexed by [`SiteKind::index`].
    pub sites: [SitePolicy; 8],
    /// Thresholds at which outlier ratios are reported for the QKV and FC1
    /// inputs, whatever quantizer sits there.
    #[serde(with = "alpha_pair")]
    pub stat_alpha: [f64; 2],
}

mod alpha_pair {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64; 2], s: S) -> Result<S::Ok, S::Error> {
        let opt: Vec<Option<f64>> = v.iter().map(|a| a.is_finite().then_some(*a)).collect();
        opt.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[f64; 2], D::Error> {
        let v = <[Option<f64>; 2]>::deserialize(d)?;
        Ok(v.map(|a| a.unwrap_or(f64::INFINITY)))
    }
}

impl QuantPolicy {
    pub fn site(&self, kind: SiteKind) -> SitePolicy {
        self.sites[kind.index()]
    }

    pub fn outlier_config(&self, kind: SiteKind) -> Option<OutlierConfig> {
        match self.site(kind) {
            SitePolicy::OutlierAware { alpha } => Some(OutlierConfig {
                alpha,
                rule: self.outlier_rule,
            }),
            _ => None,
        }
    }

    /// Threshold used for the outlier-ratio statistic at `kind`, if any.
    pub fn stat_outlier(&self, kind: SiteKind) -> Option<OutlierConfig> {
        let alpha = match kind {
            SiteKind::QkvInput => self.stat_alpha[0],
            SiteKind::Fc1Input => self.stat_alpha[1],
            _ => return self.outlier_config(kind),
        };
        Some(OutlierConfig {
            alpha,
            rule: self.outlier_rule,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_paper_mode() {
        let d = RunConfig::default();
        assert_eq!((d.alpha_qkv, d.alpha_fc1, d.epsilon, d.lambda), (5.0, 10.0, 1e-8, 0.01));
        assert_eq!((d.lr_w, d.lr_a, d.iterations, d.calib_samples), (3e-3, 4e-5, 300, 64));
        let p = RunConfig::from_json_str("{}", true).unwrap();
        assert_eq!((p.iterations, p.calib_samples), (3000, 1024));
        let p = RunConfig::from_json_str(r#"{"paper_mode": true, "iterations": 7}"#, false).unwrap();
        assert_eq!((p.iterations, p.calib_samples), (7, 1024));
    }

    #[test]
    fn unknown_keys_rejected() {
        for doc in [r#"{"bogus": 1}"#, r#"{"toggles": {"poq": false, "x": 1}}"#, r#"{"model": {"dimm": 3}}"#] {
            assert!(matches!(RunConfig::from_json_str(doc, false), Err(Error::Config(_))), "{doc}");
        }
    }

    #[test]
    fn invalid_values_rejected() {
        for doc in [
            r#"{"bits_w": 9}"#,
            r#"{"alpha_qkv": -1}"#,
            r#"{"beta_start": 1, "beta_end": 2}"#,
            r#"{"iterations": 0}"#,
            r#"{"model": {"image_h": 32, "image_w": 32, "channels": 3, "patch_h": 5, "patch_w": 8, "dim": 64, "heads": 4, "blocks": 1, "mlp_dim": 8, "classes": 2}}"#,
        ] {
            assert!(RunConfig::from_json_str(doc, false).is_err(), "{doc}");
        }
    }

    #[test]
    fn round_trip_is_fixed_point() {
        let mut cfg = RunConfig::from_json_str(
            r#"{"alpha_qkv": null, "toggles": {"poq": true, "slq": false, "amo": true},
                "site_overrides": {"v": {"kind": "outlier_aware", "alpha": 3.5}}}"#,
            false,
        )
        .unwrap();
        assert!(cfg.alpha_qkv.is_infinite());
        cfg.paths.bundle = Some("b.json".into());
        let text = cfg.to_json_string().unwrap();
        let again = RunConfig::from_json_str(&text, false).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_json_string().unwrap(), text);
    }

    #[test]
    fn toggles_shape_policy() {
        let mut cfg = RunConfig::default();
        let p = cfg.policy();
        assert_eq!(p.site(SiteKind::QkvInput), SitePolicy::OutlierAware { alpha: 5.0 });
        assert_eq!(p.site(SiteKind::Fc1Input), SitePolicy::OutlierAware { alpha: 10.0 });
        assert_eq!(p.site(SiteKind::Fc2Input), SitePolicy::ShiftLog2);
        assert_eq!(p.site(SiteKind::Softmax), SitePolicy::Log2);
        cfg.toggles = Toggles {
            poq: false,
            slq: false,
            amo: false,
        };
        let p = cfg.policy();
        for k in SiteKind::ALL {
            let want = if k == SiteKind::Softmax {
                SitePolicy::Log2
            } else {
                SitePolicy::UniformPerTensor
            };
            assert_eq!(p.site(k), want);
        }
        assert_eq!(p.stat_outlier(SiteKind::QkvInput).unwrap().alpha, 5.0);
    }
}
