//! End-to-end orchestration: synthetic data, the toy trainer, the two
//! quantization stages, evaluation against the full-precision model and the
//! ablation harness.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::calib::{collect_stats, init_bundle, CalibStats, QuantBundle};
use crate::config::{InputMode, RunConfig, Seeds, SitePolicy, Toggles, TrainConfig};
use crate::error::{Error, Result};
use crate::quant::{ActQuant, BitWidth, Granularity, Log2Params, UniformParams, WeightQuant};
use crate::recon::{adam_step, run_all_modules, AdamState, ModuleTrace, OptimConfig, DIVERGENCE_FACTOR};
use crate::rng::Rng;
use crate::storage;
use crate::tensor::{Tensor, LAYERNORM_EPS};
use crate::vit::{
    flatten_patches, forward_full, model_forward, BlockQuant, LayerKind, SiteId, SiteKind, TapFilter,
    ViTConfig, ViTModel,
};

pub const DATASET_FORMAT: &str = "ADFQ-DATA v1";
pub const REPORT_FORMAT: &str = "adfq-eval-report v1";
/// Thresholds visited by the α sweep.
pub const ALPHA_SWEEP: [f64; 9] = [1.0, 2.0, 3.0, 4.0, 5.0, 7.5, 10.0, 15.0, 20.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Synthetic { seed: u64 },
    File { path: String },
    Subset { of: Box<Provenance>, start: usize, len: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Option<Vec<usize>>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Checks image shapes and label range against a model config.
    pub fn validate(&self, cfg: &ViTConfig) -> Result<()> {
        let shape = cfg.image_shape();
        if let Some(img) = self.images.iter().find(|i| i.shape() != shape) {
            return Err(Error::dim(
                "dataset",
                format!("image {:?}, model expects {:?}", img.shape(), shape),
            ));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.images.len() {
                return Err(Error::Config("label count differs from image count".into()));
            }
            if let Some(l) = labels.iter().find(|&&l| l >= cfg.classes) {
                return Err(Error::Domain(format!("label {l} outside {} classes", cfg.classes)));
            }
        }
        Ok(())
    }

    /// Contiguous slice `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Dataset> {
        if start + len > self.len() {
            return Err(Error::Precondition(format!(
                "slice {start}..{} of {} samples",
                start + len,
                self.len()
            )));
        }
        Ok(Dataset {
            images: self.images[start..start + len].to_vec(),
            labels: self.labels.as_ref().map(|l| l[start..start + len].to_vec()),
            provenance: Provenance::Subset {
                of: Box::new(self.provenance.clone()),
                start,
                len,
            },
        })
    }
}

/// Class regions: a `rows × cols` grid with `cols = ⌈√C⌉`, `rows = ⌈C/cols⌉`;
/// class `c` owns cell `c` in row-major order.
pub fn region_grid(classes: usize) -> (usize, usize) {
    let cols = (classes as f64).sqrt().ceil() as usize;
    let cols = cols.max(1);
    (classes.div_ceil(cols), cols)
}

fn cell_of(y: usize, x: usize, h: usize, w: usize, grid: (usize, usize)) -> usize {
    (y * grid.0 / h) * grid.1 + x * grid.1 / w
}

/// Label rule: argmax over classes of the mean intensity inside each class
/// region (first maximum wins).
pub fn label_of(image: &Tensor, classes: usize) -> Result<usize> {
    let [h, w, c] = match image.shape() {
        &[h, w, c] => [h, w, c],
        s => return Err(Error::dim("label_of", format!("image {s:?}, expected [h x w x c]"))),
    };
    let grid = region_grid(classes);
    if grid.0 > h || grid.1 > w {
        return Err(Error::Domain(format!("{h}x{w} image too small for {classes} regions")));
    }
    let mut sums = vec![0.0; classes];
    let mut counts = vec![0usize; classes];
    for y in 0..h {
        for x in 0..w {
            let cell = cell_of(y, x, h, w, grid);
            if cell < classes {
                let px = &image.data()[(y * w + x) * c..(y * w + x + 1) * c];
                sums[cell] += px.iter().sum::<f64>();
                counts[cell] += c;
            }
        }
    }
    let mut best = 0;
    for k in 1..classes {
        if sums[k] / counts[k] as f64 > sums[best] / counts[best] as f64 {
            best = k;
        }
    }
    Ok(best)
}

/// Seeded synthetic images: uniform noise plus a random offset per region,
/// with one class region (drawn uniformly) lifted further.
/// Labels follow [`label_of`]. Pixels are binary32-representable.
pub fn gen_synthetic_dataset(cfg: &ViTConfig, count: usize, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::Precondition("dataset needs at least one sample".into()));
    }
    let [h, w, c] = cfg.image_shape();
    let grid = region_grid(cfg.classes);
    let mut rng = Rng::new(seed);
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.below(cfg.classes);
        let gain = rng.uniform_range(0.2, 0.6);
        let mut lift: Vec<f64> = (0..grid.0 * grid.1).map(|_| rng.uniform_range(0.0, 0.25)).collect();
        lift[class] += rng.uniform_range(0.05, 0.25);
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                let lift = lift[cell_of(y, x, h, w, grid)];
                for _ in 0..c {
                    data.push((gain * rng.uniform() + lift) as f32 as f64);
                }
            }
        }
        let img = Tensor::new(vec![h, w, c], data)?;
        labels.push(label_of(&img, cfg.classes)?);
        images.push(img);
    }
    Ok(Dataset {
        images,
        labels: Some(labels),
        provenance: Provenance::Synthetic { seed },
    })
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    count: usize,
    image_shape: Vec<usize>,
    labels: Option<Vec<usize>>,
    provenance: Provenance,
}

pub fn save_dataset(data: &Dataset, path: &Path) -> Result<()> {
    let shape = data
        .images
        .first()
        .map(|i| i.shape().to_vec())
        .ok_or_else(|| Error::Precondition("cannot save an empty dataset".into()))?;
    let mut flat = Vec::with_capacity(data.len() * shape.iter().product::<usize>());
    for img in &data.images {
        if img.shape() != shape.as_slice() {
            return Err(Error::dim("save_dataset", "images of differing shape"));
        }
        flat.extend_from_slice(img.data());
    }
    let mut all_shape = vec![data.len()];
    all_shape.extend_from_slice(&shape);
    let all = Tensor::new(all_shape, flat)?;
    let header = DatasetHeader {
        count: data.len(),
        image_shape: shape,
        labels: data.labels.clone(),
        provenance: data.provenance.clone(),
    };
    storage::save(path, DATASET_FORMAT, serde_json::to_value(header)?, &[("images".into(), &all)])
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut loaded = storage::load(path, DATASET_FORMAT)?;
    let header: DatasetHeader = serde_json::from_value(loaded.header.clone()).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    if header.count == 0 || header.labels.as_ref().is_some_and(|l| l.len() != header.count) {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            detail: "inconsistent sample or label count".into(),
        });
    }
    let mut all_shape = vec![header.count];
    all_shape.extend_from_slice(&header.image_shape);
    let all = loaded.take("images", &all_shape)?;
    let per: usize = header.image_shape.iter().product();
    let images = all
        .data()
        .chunks_exact(per)
        .map(|c| Tensor::new(header.image_shape.clone(), c.to_vec()))
        .collect::<Result<_>>()?;
    Ok(Dataset {
        images,
        labels: header.labels,
        provenance: Provenance::File {
            path: path.display().to_string(),
        },
    })
}

/// Full-precision forward of a batch through the autodiff graph; `params`
/// follow [`ViTModel::named`] order. Returns `[B × classes]` logits.
pub fn model_graph(g: &mut Graph, model: &ViTModel, params: &[Var], images: &[&Tensor]) -> Result<Var> {
    let cfg = &model.config;
    let (d, n) = (cfg.dim, cfg.patches());
    let batch = images.len();
    let patches: Vec<Tensor> = images.iter().map(|i| flatten_patches(i, cfg)).collect::<Result<_>>()?;
    let x = g.constant(Tensor::vstack(&patches)?);
    let h = g.matmul(x, params[0])?;
    let h = g.add_row_vector(h, params[1])?;
    let mut h = g.add_periodic_rows(h, params[2])?;
    for b in 0..cfg.blocks {
        let p = &params[3 + 12 * b..3 + 12 * (b + 1)];
        let xl = g.layernorm(h, p[0], p[1], LAYERNORM_EPS)?;
        let qkv = g.matmul(xl, p[2])?;
        let qkv = g.add_row_vector(qkv, p[3])?;
        let q = g.slice_cols(qkv, 0, d)?;
        let k = g.slice_cols(qkv, d, d)?;
        let v = g.slice_cols(qkv, 2 * d, d)?;
        let s = g.attn_scores(q, k, batch, cfg.heads, 1.0 / (cfg.head_dim() as f64).sqrt())?;
        let pr = g.softmax_rows(s);
        let o = g.attn_apply(pr, v, batch, cfg.heads)?;
        let a = g.matmul(o, p[4])?;
        let a = g.add_row_vector(a, p[5])?;
        h = g.add(h, a)?;
        let xl = g.layernorm(h, p[6], p[7], LAYERNORM_EPS)?;
        let f = g.matmul(xl, p[8])?;
        let f = g.add_row_vector(f, p[9])?;
        let f = g.gelu(f);
        let m = g.matmul(f, p[10])?;
        let m = g.add_row_vector(m, p[11])?;
        h = g.add(h, m)?;
    }
    let last = params.len();
    let pooled = g.mean_pool_rows(h, n)?;
    let logits = g.matmul(pooled, params[last - 2])?;
    g.add_row_vector(logits, params[last - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean cross-entropy over the minibatches of each epoch.
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub train_samples: usize,
    pub val_samples: usize,
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Fraction of `images` whose predicted class equals the label.
pub fn accuracy(model: &ViTModel, images: &[Tensor], labels: &[usize]) -> Result<f64> {
    if images.is_empty() {
        return Ok(0.0);
    }
    let hits: Vec<bool> = images
        .par_iter()
        .zip(labels)
        .map(|(img, &l)| Ok(argmax(model_forward(img, model, None, &TapFilter::None)?.0.data()) == l))
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / images.len() as f64)
}

/// Cross-entropy training with Adam. The trailing `val_fraction` of the data
/// is held out. Parameters are snapped to binary32 after every step so the
/// returned model survives a checkpoint round trip unchanged.
pub fn train_toy(model: &ViTModel, data: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<(ViTModel, TrainReport)> {
    let labels = data
        .labels
        .as_ref()
        .ok_or_else(|| Error::Precondition("training needs a labelled dataset".into()))?;
    data.validate(&model.config)?;
    let val = (data.len() as f64 * cfg.val_fraction).round() as usize;
    let train_n = data.len() - val;
    if train_n == 0 {
        return Err(Error::Precondition("no training samples after the validation split".into()));
    }
    let mut model = model.clone();
    let names: Vec<String> = model.named().into_iter().map(|(n, _)| n).collect();
    let mut params: Vec<Tensor> = model.named().into_iter().map(|(_, t)| t.clone()).collect();
    let lrs = vec![cfg.lr; params.len()];
    let mut adam = AdamState::new(&params);
    let mut rng = Rng::new(seed);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut limit = f64::INFINITY;
    for epoch in 0..cfg.epochs {
        let order = rng.sample_indices(train_n, train_n);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch) {
            let imgs: Vec<&Tensor> = chunk.iter().map(|&i| &data.images[i]).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone(), true)).collect();
            let logits = model_graph(&mut g, &model, &vars, &imgs)?;
            let loss = g.cross_entropy(logits, &ys)?;
            let l = g.scalar_value(loss);
            if !l.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            if limit.is_infinite() {
                limit = DIVERGENCE_FACTOR * l.max(1e-6);
            } else if l > limit {
                return Err(Error::Divergence {
                    context: "train_toy".into(),
                    loss: l,
                    limit,
                });
            }
            let mut grads = g.backward(loss)?;
            let grads: Vec<Tensor> = vars
                .iter()
                .zip(&params)
                .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            adam_step(&mut adam, &mut params, &grads, &lrs, &names)?;
            for p in &mut params {
                *p = storage::snap_f32(p);
            }
            total += l;
            batches += 1;
        }
        let mean = total / batches as f64;
        log::info!("epoch {epoch}: loss {mean:.5}");
        epoch_losses.push(mean);
    }
    for ((_, slot), p) in model.named_mut().into_iter().zip(params) {
        *slot = p;
    }
    let report = TrainReport {
        epoch_losses,
        train_accuracy: accuracy(&model, &data.images[..train_n], &labels[..train_n])?,
        val_accuracy: accuracy(&model, &data.images[train_n..], &labels[train_n..])?,
        train_samples: train_n,
        val_samples: val,
    };
    Ok((model, report))
}

/// Stage one (statistics and initial quantizers) followed, when AMO is
/// enabled, by stage two (module-wise reconstruction).
pub fn quantize_model(model: &ViTModel, calib: &[Tensor], cfg: &RunConfig) -> Result<(QuantBundle, CalibStats)> {
    cfg.validate()?;
    if model.config != cfg.model {
        return Err(Error::Config("checkpoint model config differs from the run config".into()));
    }
    let policy = cfg.policy();
    let stats = collect_stats(model, calib, &policy, false)?;
    let mut bundle = init_bundle(model, &stats, &policy)?;
    if cfg.toggles.amo {
        run_all_modules(model, &mut bundle, calib, &OptimConfig::from(cfg))?;
    }
    Ok((bundle, stats))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteError {
    pub site: String,
    /// Mean squared fake-quantization error at the site's input.
    pub mse: f64,
    pub max_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteOutliers {
    pub site: String,
    /// `null` encodes an infinite threshold.
    pub alpha: Option<f64>,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub bits_w: u32,
    pub bits_a: u32,
    pub alpha_qkv: Option<f64>,
    pub alpha_fc1: Option<f64>,
    pub epsilon: f64,
    pub lambda: f64,
    pub lr_w: f64,
    pub lr_a: f64,
    pub iterations: usize,
    pub batch: usize,
    pub calib_samples: usize,
    pub input_mode: InputMode,
    pub toggles: Toggles,
    pub seeds: Seeds,
    /// What the attention-score KL term compares.
    pub kl_target: String,
    pub quantized: bool,
}

impl ConfigEcho {
    fn new(cfg: &RunConfig, quantized: bool) -> Self {
        let fin = |a: f64| a.is_finite().then_some(a);
        ConfigEcho {
            bits_w: cfg.bits_w.bits(),
            bits_a: cfg.bits_a.bits(),
            alpha_qkv: fin(cfg.alpha_qkv),
            alpha_fc1: fin(cfg.alpha_fc1),
            epsilon: cfg.epsilon,
            lambda: cfg.lambda,
            lr_w: cfg.lr_w,
            lr_a: cfg.lr_a,
            iterations: cfg.iterations,
            batch: cfg.batch,
            calib_samples: cfg.calib_samples,
            input_mode: cfg.input_mode,
            toggles: cfg.toggles,
            seeds: cfg.seeds,
            kl_target: "softmax attention probabilities, quantized rows renormalized".into(),
            quantized,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub samples: usize,
    /// `Σ‖l_q − l_fp‖² / Σ‖l_fp‖²` over the dataset.
    pub logits_mse_normalized: f64,
    pub mean_cosine: f64,
    pub top1_agreement: f64,
    pub site_errors: Vec<SiteError>,
    pub outlier_ratios: Vec<SiteOutliers>,
    pub config: ConfigEcho,
    pub traces: Vec<ModuleTrace>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (dot / (na * nb)).clamp(-1.0, 1.0),
    }
}

struct SampleEval {
    sq_err: f64,
    sq_ref: f64,
    cosine: f64,
    agree: bool,
    /// Per site in tap order: (Σ err², max |err|, count).
    site_err: Vec<(SiteId, f64, f64, usize)>,
    /// Per reported site: (outliers, count).
    outliers: Vec<(SiteId, usize, usize)>,
}

/// Compares the quantized model described by `bundle` (or the model itself
/// when `None`) against the full-precision model on `data`.
pub fn evaluate(model: &ViTModel, bundle: Option<&QuantBundle>, data: &Dataset, cfg: &RunConfig) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Precondition("evaluation dataset is empty".into()));
    }
    data.validate(&model.config)?;
    let policy = bundle.map_or_else(|| cfg.policy(), |b| b.policy.clone());
    let qm = bundle.map(|b| b.prepare(model)).transpose()?;
    let per: Vec<SampleEval> = data
        .images
        .par_iter()
        .map(|img| -> Result<SampleEval> {
            let fp = forward_full(img, model, None, &TapFilter::All, false)?;
            let mut outliers = Vec::new();
            for tap in &fp.taps {
                if let Some(oc) = policy.stat_outlier(tap.site.kind) {
                    let n = tap.value.data().iter().filter(|&&x| oc.is_outlier(x)).count();
                    outliers.push((tap.site, n, tap.value.numel()));
                }
            }
            let (logits, site_err) = match (&qm, bundle) {
                (Some(qm), Some(b)) => {
                    let q = forward_full(img, model, Some(qm), &TapFilter::All, false)?;
                    let mut errs = Vec::with_capacity(q.taps.len());
                    for tap in &q.taps {
                        let act = b.blocks[tap.site.block].act(tap.site.kind);
                        let fq = act.fake(&tap.value)?;
                        let (mut s, mut m) = (0.0, 0.0f64);
                        for (a, r) in fq.data().iter().zip(tap.value.data()) {
                            let e = a - r;
                            s += e * e;
                            m = m.max(e.abs());
                        }
                        errs.push((tap.site, s, m, tap.value.numel()));
                    }
                    (q.logits, errs)
                }
                _ => (fp.logits.clone(), Vec::new()),
            };
            let (a, r) = (logits.data(), fp.logits.data());
            Ok(SampleEval {
                sq_err: a.iter().zip(r).map(|(x, y)| (x - y) * (x - y)).sum(),
                sq_ref: r.iter().map(|y| y * y).sum(),
                cosine: cosine(a, r),
                agree: argmax(a) == argmax(r),
                site_err,
                outliers,
            })
        })
        .collect::<Result<_>>()?;

    let n = per.len() as f64;
    let (mut sq_err, mut sq_ref, mut cos, mut agree) = (0.0, 0.0, 0.0, 0usize);
    let mut site_acc: Vec<(SiteId, f64, f64, usize)> = Vec::new();
    let mut out_acc: Vec<(SiteId, usize, usize)> = Vec::new();
    for s in &per {
        sq_err += s.sq_err;
        sq_ref += s.sq_ref;
        cos += s.cosine;
        agree += s.agree as usize;
        for &(site, e, m, c) in &s.site_err {
            match site_acc.iter_mut().find(|x| x.0 == site) {
                Some(x) => {
                    x.1 += e;
                    x.2 = x.2.max(m);
                    x.3 += c;
                }
                None => site_acc.push((site, e, m, c)),
            }
        }
        for &(site, o, c) in &s.outliers {
            match out_acc.iter_mut().find(|x| x.0 == site) {
                Some(x) => {
                    x.1 += o;
                    x.2 += c;
                }
                None => out_acc.push((site, o, c)),
            }
        }
    }
    let key = |s: &SiteId| (s.block, s.kind.index());
    site_acc.sort_by_key(|x| key(&x.0));
    out_acc.sort_by_key(|x| key(&x.0));
    let logits_mse_normalized = if sq_ref > 0.0 {
        sq_err / sq_ref
    } else if sq_err == 0.0 {
        0.0
    } else {
        f64::MAX
    };
    Ok(EvalReport {
        format: REPORT_FORMAT.into(),
        samples: per.len(),
        logits_mse_normalized,
        mean_cosine: cos / n,
        top1_agreement: agree as f64 / n,
        site_errors: site_acc
            .into_iter()
            .map(|(site, e, m, c)| SiteError {
                site: site.label(),
                mse: e / c as f64,
                max_abs: m,
            })
            .collect(),
        outlier_ratios: out_acc
            .into_iter()
            .map(|(site, o, c)| SiteOutliers {
                site: site.label(),
                alpha: policy
                    .stat_outlier(site.kind)
                    .and_then(|oc| oc.alpha.is_finite().then_some(oc.alpha)),
                ratio: o as f64 / c as f64,
            })
            .collect(),
        config: ConfigEcho::new(cfg, bundle.is_some()),
        traces: bundle.map(|b| b.traces.clone()).unwrap_or_default(),
    })
}

/// Plain min-max quantization built directly from full-precision taps:
/// per-tensor uniform at every site except the softmax output (log2 with
/// scale = max), per-channel nearest-rounded weights.
pub fn naive_baseline(model: &ViTModel, calib: &[Tensor], bits_w: BitWidth, bits_a: BitWidth) -> Result<Vec<BlockQuant>> {
    if calib.is_empty() {
        return Err(Error::Precondition("calibration set is empty".into()));
    }
    let blocks = model.blocks.len();
    let mut lo = vec![[f64::INFINITY; 8]; blocks];
    let mut hi = vec![[f64::NEG_INFINITY; 8]; blocks];
    for img in calib {
        let out = forward_full(img, model, None, &TapFilter::All, false)?;
        for tap in out.taps {
            let (b, k) = (tap.site.block, tap.site.kind.index());
            for &x in tap.value.data() {
                lo[b][k] = lo[b][k].min(x + 0.0);
                hi[b][k] = hi[b][k].max(x + 0.0);
            }
        }
    }
    let mut out = Vec::with_capacity(blocks);
    for (b, block) in model.blocks.iter().enumerate() {
        let acts = SiteKind::ALL
            .iter()
            .map(|&kind| {
                let (mn, mx) = (lo[b][kind.index()], hi[b][kind.index()]);
                Ok(match kind {
                    SiteKind::Softmax => ActQuant::Log2 {
                        params: Log2Params::new(mx, bits_a, None)?.snapped_to_f32(),
                    },
                    _ => ActQuant::Uniform {
                        params: UniformParams::from_minmax(&[mn], &[mx], bits_a, Granularity::PerTensor)?
                            .snapped_to_f32(),
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let weights = LayerKind::ALL
            .iter()
            .map(|&l| WeightQuant::nearest(block.weight(l), bits_w))
            .collect::<Result<Vec<_>>>()?;
        out.push(BlockQuant { acts, weights });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub poq: bool,
    pub slq: bool,
    pub amo: bool,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSweepRow {
    /// `qkv` or `fc1`: the layer whose threshold varies.
    pub layer: String,
    pub alpha: f64,
    pub other_alpha: f64,
    /// Outlier ratio at the varied site over the calibration set, all blocks.
    pub outlier_ratio: f64,
    pub top1_agreement: f64,
    pub logits_mse_normalized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub alpha_sweep: Vec<AlphaSweepRow>,
    /// Whether the all-disabled pipeline bundle equals [`naive_baseline`] bit for bit.
    pub naive_matches_all_disabled: bool,
}

/// Toggle combinations, all-enabled first and all-disabled last.
pub fn toggle_combinations() -> [Toggles; 8] {
    std::array::from_fn(|i| Toggles {
        poq: i & 4 == 0,
        slq: i & 2 == 0,
        amo: i & 1 == 0,
    })
}

fn site_ratio(stats: &CalibStats, kind: SiteKind) -> f64 {
    let (o, c) = stats
        .sites
        .iter()
        .filter(|s| s.site.kind == kind)
        .fold((0u64, 0u64), |(o, c), s| (o + s.outliers, c + s.count));
    if c == 0 {
        0.0
    } else {
        o as f64 / c as f64
    }
}

/// Runs every toggle combination and the α sweep (calibration only, the
/// other layer's threshold held at its configured value).
pub fn ablate(model: &ViTModel, calib: &[Tensor], eval: &Dataset, cfg: &RunConfig, alphas: &[f64]) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(8);
    let mut naive_matches = false;
    for toggles in toggle_combinations() {
        let c = RunConfig { toggles, ..cfg.clone() };
        let (bundle, _) = quantize_model(model, calib, &c)?;
        if !(toggles.poq || toggles.slq || toggles.amo) {
            naive_matches = bundle.blocks == naive_baseline(model, calib, cfg.bits_w, cfg.bits_a)?;
        }
        let report = evaluate(model, Some(&bundle), eval, &c)?;
        log::info!(
            "poq={} slq={} amo={}: agreement {:.4}",
            toggles.poq,
            toggles.slq,
            toggles.amo,
            report.top1_agreement
        );
        rows.push(AblationRow {
            poq: toggles.poq,
            slq: toggles.slq,
            amo: toggles.amo,
            report,
        });
    }
    let mut alpha_sweep = Vec::new();
    for (layer, kind) in [("qkv", SiteKind::QkvInput), ("fc1", SiteKind::Fc1Input)] {
        for &alpha in alphas {
            let mut c = cfg.clone();
            c.toggles.amo = false;
            let other = if kind == SiteKind::QkvInput {
                c.alpha_qkv = alpha;
                c.alpha_fc1
            } else {
                c.alpha_fc1 = alpha;
                c.alpha_qkv
            };
            let (bundle, stats) = quantize_model(model, calib, &c)?;
            let report = evaluate(model, Some(&bundle), eval, &c)?;
            alpha_sweep.push(AlphaSweepRow {
                layer: layer.into(),
                alpha,
                other_alpha: other,
                outlier_ratio: site_ratio(&stats, kind),
                top1_agreement: report.top1_agreement,
                logits_mse_normalized: report.logits_mse_normalized,
            });
        }
    }
    Ok(AblationTable {
        rows,
        alpha_sweep,
        naive_matches_all_disabled: naive_matches,
    })
}

/// Calibration statistics with histograms for the inspect command.
pub fn inspect(model: &ViTModel, data: &Dataset, cfg: &RunConfig) -> Result<CalibStats> {
    data.validate(&model.config)?;
    collect_stats(model, &data.images, &cfg.policy(), true)
}

/// Policy entry for the sites the toggles act on, for reporting.
pub fn describe_policy(cfg: &RunConfig) -> Vec<(String, SitePolicy)> {
    SiteKind::ALL
        .iter()
        .map(|&k| (k.name().to_string(), cfg.site_policy(k)))
        .collect()
}
