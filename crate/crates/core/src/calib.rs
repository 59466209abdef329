//! Stage one: per-site activation statistics over a calibration set and the
//! quantizer bundle initialised from them, plus the bundle file format.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{QuantPolicy, SitePolicy};
use crate::error::{Error, Result};
use crate::quant::{
    outlier_split, ActQuant, BitWidth, Granularity, Log2Params, LogShift, OutlierConfig,
    UniformParams, WeightQuant, WeightRounding,
};
use crate::recon::ModuleTrace;
use crate::storage;
use crate::tensor::Tensor;
use crate::vit::{
    forward_full, BlockQuant, LayerKind, QuantizedModel, SiteId, SiteKind, TapFilter, ViTModel,
};

pub const HIST_BINS: usize = 2048;
pub const BUNDLE_FORMAT: &str = "ADFQ-QNT v1";

/// Fixed-width histogram over `[lo, hi]`; the last bin is closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64) -> Self {
        Histogram {
            lo,
            hi,
            counts: vec![0; HIST_BINS],
        }
    }

    pub fn bin(&self, x: f64) -> usize {
        if self.hi <= self.lo {
            return 0;
        }
        let t = (x - self.lo) / (self.hi - self.lo) * HIST_BINS as f64;
        (t.floor().max(0.0) as usize).min(HIST_BINS - 1)
    }

    pub fn add(&mut self, x: f64) {
        let b = self.bin(x);
        self.counts[b] += 1;
    }

    /// Left and right edge of bin `i`.
    pub fn edges(&self, i: usize) -> (f64, f64) {
        let w = (self.hi - self.lo) / HIST_BINS as f64;
        let right = if i + 1 == HIST_BINS { self.hi } else { self.lo + w * (i + 1) as f64 };
        (self.lo + w * i as f64, right)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn merge(&mut self, other: &Histogram) -> Result<()> {
        if self.lo != other.lo || self.hi != other.hi {
            return Err(Error::Precondition("histograms cover different ranges".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteStats {
    pub site: SiteId,
    /// Extremes of the raw activation.
    pub min: f64,
    pub max: f64,
    /// Per-row extremes for per-patch sites, taken after outlier removal.
    pub group_mins: Vec<f64>,
    pub group_maxs: Vec<f64>,
    pub count: u64,
    /// Threshold of the outlier statistic, when the site has one.
    pub outlier: Option<OutlierConfig>,
    pub outliers: u64,
    pub histogram: Option<Histogram>,
}

impl SiteStats {
    pub fn outlier_ratio(&self) -> Option<f64> {
        self.outlier.map(|_| self.outliers as f64 / self.count as f64)
    }

    fn merge(&mut self, other: &SiteStats) -> Result<()> {
        if self.site != other.site || self.group_mins.len() != other.group_mins.len() {
            return Err(Error::Precondition(format!(
                "cannot merge stats of {} and {}",
                self.site.label(),
                other.site.label()
            )));
        }
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        for (a, b) in self.group_mins.iter_mut().zip(&other.group_mins) {
            *a = a.min(*b);
        }
        for (a, b) in self.group_maxs.iter_mut().zip(&other.group_maxs) {
            *a = a.max(*b);
        }
        self.count += other.count;
        self.outliers += other.outliers;
        match (&mut self.histogram, &other.histogram) {
            (Some(a), Some(b)) => a.merge(b)?,
            (None, None) => {}
            _ => return Err(Error::Precondition("only one side has histograms".into())),
        }
        Ok(())
    }
}

/// Statistics for every site of every block, in block-major, site-kind order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibStats {
    pub samples: u64,
    pub sites: Vec<SiteStats>,
}

impl CalibStats {
    /// Exact, associative and commutative merge.
    pub fn merge(mut self, other: &CalibStats) -> Result<CalibStats> {
        if self.sites.len() != other.sites.len() {
            return Err(Error::Precondition("stats cover different site sets".into()));
        }
        for (a, b) in self.sites.iter_mut().zip(&other.sites) {
            a.merge(b)?;
        }
        self.samples += other.samples;
        Ok(self)
    }

    pub fn site(&self, site: SiteId) -> Option<&SiteStats> {
        self.sites.iter().find(|s| s.site == site)
    }
}

fn needs_rows(p: SitePolicy) -> bool {
    matches!(p, SitePolicy::UniformPerPatch | SitePolicy::OutlierAware { .. })
}

// `-0.0` and `0.0` compare equal but differ in bits; folding them together
// keeps min/max merges order-independent.
fn canon(x: f64) -> f64 {
    x + 0.0
}

fn site_stats(site: SiteId, value: &Tensor, policy: &QuantPolicy) -> Result<SiteStats> {
    let sp = policy.site(site.kind);
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in value.data() {
        min = min.min(canon(v));
        max = max.max(canon(v));
    }
    let stat = policy.stat_outlier(site.kind);
    let outliers = stat
        .map(|cfg| value.data().iter().filter(|&&v| cfg.is_outlier(v)).count() as u64)
        .unwrap_or(0);
    let (mut group_mins, mut group_maxs) = (vec![], vec![]);
    if needs_rows(sp) {
        let c = value.last_dim();
        let rows = Tensor::new(vec![value.numel() / c, c], value.data().to_vec())?;
        let dense = match policy.outlier_config(site.kind) {
            Some(cfg) => outlier_split(&rows, &cfg)?.0,
            None => rows,
        };
        for r in 0..dense.rows() {
            let row = dense.row(r);
            group_mins.push(row.iter().fold(f64::INFINITY, |a, &b| a.min(canon(b))));
            group_maxs.push(row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(canon(b))));
        }
    }
    Ok(SiteStats {
        site,
        min,
        max,
        group_mins,
        group_maxs,
        count: value.numel() as u64,
        outlier: stat,
        outliers,
        histogram: None,
    })
}

fn site_order(taps: Vec<crate::vit::ActivationTap>) -> Vec<crate::vit::ActivationTap> {
    let mut taps = taps;
    taps.sort_by_key(|t| (t.site.block, t.site.kind.index()));
    taps
}

/// Statistics of a single sample.
pub fn sample_stats(model: &ViTModel, image: &Tensor, policy: &QuantPolicy) -> Result<CalibStats> {
    let out = forward_full(image, model, None, &TapFilter::All, false)?;
    let sites = site_order(out.taps)
        .iter()
        .map(|t| site_stats(t.site, &t.value, policy))
        .collect::<Result<_>>()?;
    Ok(CalibStats { samples: 1, sites })
}

/// Merged statistics over `images`, with diagnostic histograms over the
/// final ranges when `histograms` is set (a second pass, since bins depend on
/// the global range).
pub fn collect_stats(
    model: &ViTModel,
    images: &[Tensor],
    policy: &QuantPolicy,
    histograms: bool,
) -> Result<CalibStats> {
    if images.is_empty() {
        return Err(Error::Precondition("calibration set is empty".into()));
    }
    let per_sample: Vec<CalibStats> = images
        .par_iter()
        .map(|img| sample_stats(model, img, policy))
        .collect::<Result<_>>()?;
    let mut iter = per_sample.into_iter();
    let first = iter.next().expect("nonempty");
    let mut stats = iter.try_fold(first, |acc, s| acc.merge(&s))?;
    if histograms {
        let parts: Vec<Vec<Histogram>> = images
            .par_iter()
            .map(|img| -> Result<Vec<Histogram>> {
                let out = forward_full(img, model, None, &TapFilter::All, false)?;
                Ok(site_order(out.taps)
                    .iter()
                    .zip(&stats.sites)
                    .map(|(t, s)| {
                        let mut h = Histogram::new(s.min, s.max);
                        for &v in t.value.data() {
                            h.add(v);
                        }
                        h
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        for (i, site) in stats.sites.iter_mut().enumerate() {
            let mut h = Histogram::new(site.min, site.max);
            for p in &parts {
                h.merge(&p[i])?;
            }
            site.histogram = Some(h);
        }
    }
    Ok(stats)
}

/// Quantizers for the whole model plus the reconstruction record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantBundle {
    pub policy: QuantPolicy,
    pub blocks: Vec<BlockQuant>,
    pub traces: Vec<ModuleTrace>,
}

impl QuantBundle {
    pub fn prepare(&self, model: &ViTModel) -> Result<QuantizedModel> {
        QuantizedModel::new(model, &self.blocks)
    }

    /// Activation quantizer count: one per policy site per block.
    pub fn act_count(&self) -> usize {
        self.blocks.iter().map(|b| b.acts.len()).sum()
    }
}

fn init_act(stats: &SiteStats, sp: SitePolicy, policy: &QuantPolicy) -> Result<ActQuant> {
    let bits = policy.bits_a;
    let per_patch = |s: &SiteStats| {
        UniformParams::from_minmax(&s.group_mins, &s.group_maxs, bits, Granularity::PerPatch)
            .map(UniformParams::snapped_to_f32)
    };
    Ok(match sp {
        SitePolicy::UniformPerTensor => ActQuant::Uniform {
            params: UniformParams::from_minmax(&[stats.min], &[stats.max], bits, Granularity::PerTensor)?
                .snapped_to_f32(),
        },
        SitePolicy::UniformPerPatch => ActQuant::Uniform {
            params: per_patch(stats)?,
        },
        SitePolicy::OutlierAware { alpha } => ActQuant::OutlierAware {
            params: per_patch(stats)?,
            outlier: OutlierConfig {
                alpha,
                rule: policy.outlier_rule,
            },
        },
        SitePolicy::Log2 => ActQuant::Log2 {
            params: Log2Params::new(stats.max, bits, None)?.snapped_to_f32(),
        },
        SitePolicy::ShiftLog2 => ActQuant::Log2 {
            params: Log2Params::shifted_from_minmax(stats.min, stats.max, bits, policy.epsilon)?
                .snapped_to_f32(),
        },
    })
}

/// Initial quantizers: activations from `stats`, weights per output channel
/// with nearest rounding.
pub fn init_bundle(model: &ViTModel, stats: &CalibStats, policy: &QuantPolicy) -> Result<QuantBundle> {
    let mut blocks = Vec::with_capacity(model.blocks.len());
    for (b, block) in model.blocks.iter().enumerate() {
        let acts = SiteKind::ALL
            .iter()
            .map(|&kind| {
                let site = SiteId { block: b, kind };
                let s = stats
                    .site(site)
                    .ok_or_else(|| Error::Config(format!("no statistics for {}", site.label())))?;
                if needs_rows(policy.site(kind)) != !s.group_mins.is_empty() {
                    return Err(Error::Config(format!(
                        "statistics for {} were collected under another policy",
                        site.label()
                    )));
                }
                init_act(s, policy.site(kind), policy)
            })
            .collect::<Result<Vec<_>>>()?;
        let weights = LayerKind::ALL
            .iter()
            .map(|&l| WeightQuant::nearest(block.weight(l), policy.bits_w))
            .collect::<Result<Vec<_>>>()?;
        blocks.push(BlockQuant { acts, weights });
    }
    Ok(QuantBundle {
        policy: policy.clone(),
        blocks,
        traces: vec![],
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ActEntry {
    site: String,
    kind: String,
    bits: BitWidth,
    granularity: Option<Granularity>,
    outlier: Option<OutlierConfig>,
    shift: Option<LogShift>,
    scale: String,
    zero: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightEntry {
    layer: String,
    bits: BitWidth,
    granularity: Granularity,
    rounding: String,
    scale: String,
    zero: String,
    up: Option<String>,
}

const MAX_EXACT_ZERO: i64 = 1 << 24;

fn zeros_tensor(zeros: &[i64], name: &str) -> Result<Tensor> {
    if let Some(z) = zeros.iter().find(|z| z.abs() > MAX_EXACT_ZERO) {
        return Err(Error::Precondition(format!(
            "zero point {z} of {name} is not representable in binary32"
        )));
    }
    Tensor::vector(&zeros.iter().map(|&z| z as f64).collect::<Vec<_>>())
}

/// Writes the bundle as an `ADFQ-QNT v1` manifest plus blob.
pub fn save_bundle(bundle: &QuantBundle, path: &Path) -> Result<()> {
    let mut owned: Vec<(String, Tensor)> = Vec::new();
    let mut blocks = Vec::new();
    for (b, bq) in bundle.blocks.iter().enumerate() {
        let mut acts = Vec::new();
        for (kind, act) in SiteKind::ALL.iter().zip(&bq.acts) {
            let label = SiteId { block: b, kind: *kind }.label();
            let scale = format!("{label}.scale");
            let zero = format!("{label}.zero");
            let entry = match act {
                ActQuant::Uniform { params } | ActQuant::OutlierAware { params, .. } => {
                    owned.push((scale.clone(), Tensor::vector(&params.scales)?));
                    owned.push((zero.clone(), zeros_tensor(&params.zeros, &label)?));
                    ActEntry {
                        site: label,
                        kind: act.kind_name().into(),
                        bits: params.bits,
                        granularity: Some(params.granularity),
                        outlier: act.outlier().copied(),
                        shift: None,
                        scale,
                        zero: Some(zero),
                    }
                }
                ActQuant::Log2 { params } => {
                    owned.push((scale.clone(), Tensor::vector(&[params.scale])?));
                    ActEntry {
                        site: label,
                        kind: act.kind_name().into(),
                        bits: params.bits,
                        granularity: None,
                        outlier: None,
                        shift: params.shift,
                        scale,
                        zero: None,
                    }
                }
            };
            acts.push(entry);
        }
        let mut weights = Vec::new();
        for (layer, wq) in LayerKind::ALL.iter().zip(&bq.weights) {
            let label = format!("block{b}.{}", layer.name());
            let scale = format!("{label}.scale");
            let zero = format!("{label}.zero");
            owned.push((scale.clone(), Tensor::vector(&wq.params.scales)?));
            owned.push((zero.clone(), zeros_tensor(&wq.params.zeros, &label)?));
            let (rounding, up) = match &wq.rounding {
                WeightRounding::Nearest => ("nearest", None),
                WeightRounding::Learned { up } => {
                    let name = format!("{label}.up");
                    let flags: Vec<f64> = up.iter().map(|&u| u as u8 as f64).collect();
                    owned.push((name.clone(), Tensor::vector(&flags)?));
                    ("learned", Some(name))
                }
            };
            weights.push(WeightEntry {
                layer: label,
                bits: wq.params.bits,
                granularity: wq.params.granularity,
                rounding: rounding.into(),
                scale,
                zero,
                up,
            });
        }
        blocks.push(json!({ "acts": acts, "weights": weights }));
    }
    for (name, t) in &owned {
        if t.data().iter().any(|&v| v as f32 as f64 != v) {
            return Err(Error::Precondition(format!("{name} is not representable in binary32")));
        }
    }
    let header = json!({
        "policy": bundle.policy,
        "blocks": blocks,
        "traces": bundle.traces,
    });
    let refs: Vec<(String, &Tensor)> = owned.iter().map(|(n, t)| (n.clone(), t)).collect();
    storage::save(path, BUNDLE_FORMAT, header, &refs)
}

pub fn load_bundle(path: &Path) -> Result<QuantBundle> {
    let bad = |detail: String| Error::Manifest {
        path: path.to_path_buf(),
        detail,
    };
    let mut loaded = storage::load(path, BUNDLE_FORMAT)?;
    let header = std::mem::take(&mut loaded.header);
    let policy: QuantPolicy =
        serde_json::from_value(header["policy"].clone()).map_err(|e| bad(format!("policy: {e}")))?;
    let traces: Vec<ModuleTrace> =
        serde_json::from_value(header["traces"].clone()).map_err(|e| bad(format!("traces: {e}")))?;
    let blocks_json = header["blocks"]
        .as_array()
        .ok_or_else(|| bad("missing blocks".into()))?;
    let mut take = |name: &str| -> Result<Vec<f64>> {
        let idx = loaded
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| bad(format!("missing tensor {name}")))?;
        Ok(loaded.tensors.remove(idx).1.into_data())
    };
    let to_zeros = |v: Vec<f64>, name: &str| -> Result<Vec<i64>> {
        v.into_iter()
            .map(|z| {
                if z.fract() == 0.0 {
                    Ok(z as i64)
                } else {
                    Err(bad(format!("{name}: non-integer zero point {z}")))
                }
            })
            .collect()
    };
    let mut blocks = Vec::with_capacity(blocks_json.len());
    for bj in blocks_json {
        let acts_e: Vec<ActEntry> =
            serde_json::from_value(bj["acts"].clone()).map_err(|e| bad(format!("acts: {e}")))?;
        let weights_e: Vec<WeightEntry> =
            serde_json::from_value(bj["weights"].clone()).map_err(|e| bad(format!("weights: {e}")))?;
        if acts_e.len() != SiteKind::ALL.len() || weights_e.len() != LayerKind::ALL.len() {
            return Err(bad("block does not list every site".into()));
        }
        let mut acts = Vec::new();
        for e in acts_e {
            let scales = take(&e.scale)?;
            let act = match e.kind.as_str() {
                "uniform" | "outlier_aware" => {
                    let zname = e.zero.as_deref().ok_or_else(|| bad(format!("{}: no zero", e.site)))?;
                    let zeros = to_zeros(take(zname)?, zname)?;
                    let gran = e
                        .granularity
                        .ok_or_else(|| bad(format!("{}: no granularity", e.site)))?;
                    let params = UniformParams::new(e.bits, gran, scales, zeros)?;
                    match (e.kind.as_str(), e.outlier) {
                        ("uniform", _) => ActQuant::Uniform { params },
                        (_, Some(outlier)) => ActQuant::OutlierAware { params, outlier },
                        _ => return Err(bad(format!("{}: outlier config missing", e.site))),
                    }
                }
                "log2" | "shift_log2" => {
                    if scales.len() != 1 || (e.kind == "shift_log2") != e.shift.is_some() {
                        return Err(bad(format!("{}: malformed log2 entry", e.site)));
                    }
                    ActQuant::Log2 {
                        params: Log2Params::new(scales[0], e.bits, e.shift)?,
                    }
                }
                other => return Err(bad(format!("{}: unknown quantizer kind {other}", e.site))),
            };
            acts.push(act);
        }
        let mut weights = Vec::new();
        for e in weights_e {
            let scales = take(&e.scale)?;
            let zeros = to_zeros(take(&e.zero)?, &e.zero)?;
            let params = UniformParams::new(e.bits, e.granularity, scales, zeros)?;
            let rounding = match (e.rounding.as_str(), &e.up) {
                ("nearest", None) => WeightRounding::Nearest,
                ("learned", Some(name)) => {
                    let up = take(name)?
                        .into_iter()
                        .map(|v| match v {
                            0.0 => Ok(false),
                            1.0 => Ok(true),
                            _ => Err(bad(format!("{name}: rounding flag {v}"))),
                        })
                        .collect::<Result<_>>()?;
                    WeightRounding::Learned { up }
                }
                _ => return Err(bad(format!("{}: bad rounding entry", e.layer))),
            };
            weights.push(WeightQuant { params, rounding });
        }
        blocks.push(BlockQuant { acts, weights });
    }
    Ok(QuantBundle {
        policy,
        blocks,
        traces,
    })
}
