//! Randomised finite-difference audit of the reverse pass, grouped by op
//! class. Quantizer classes are checked against the linearized forward at
//! points where no perturbation crosses a rounding, clamp or outlier branch.

use serde::{Deserialize, Serialize};

use crate::autodiff::{gradcheck, Graph, ScaleGroups, Var};
use crate::calib::{collect_stats, init_bundle};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::quant::{BitWidth, Log2Params, OutlierConfig};
use crate::recon::{module_leaves, ModuleCtx, ModuleKind};
use crate::rng::Rng;
use crate::tensor::{Tensor, LAYERNORM_EPS};
use crate::vit::{forward_full, TapFilter, ViTConfig, ViTModel};

/// Tolerance for ops without rounding.
pub const SMOOTH_TOL: f64 = 1e-6;
/// Tolerance for quantized nodes and assembled module losses.
pub const STE_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-6;
const MAX_ENTRIES: usize = 48;
const MAX_REDRAWS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpClass {
    Smooth,
    Attention,
    Loss,
    UniformSte,
    OutlierSte,
    Log2Ste,
    SoftWeight,
    MhaModule,
    MlpModule,
}

impl OpClass {
    pub const ALL: [OpClass; 9] = [
        OpClass::Smooth,
        OpClass::Attention,
        OpClass::Loss,
        OpClass::UniformSte,
        OpClass::OutlierSte,
        OpClass::Log2Ste,
        OpClass::SoftWeight,
        OpClass::MhaModule,
        OpClass::MlpModule,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpClass::Smooth => "smooth",
            OpClass::Attention => "attention",
            OpClass::Loss => "loss",
            OpClass::UniformSte => "uniform_ste",
            OpClass::OutlierSte => "outlier_ste",
            OpClass::Log2Ste => "log2_ste",
            OpClass::SoftWeight => "soft_weight",
            OpClass::MhaModule => "mha_module",
            OpClass::MlpModule => "mlp_module",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            OpClass::Smooth | OpClass::Attention | OpClass::Loss => SMOOTH_TOL,
            _ => STE_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub class: OpClass,
    pub tolerance: f64,
    pub max_rel_err: f64,
    /// Graphs audited.
    pub graphs: usize,
    /// Draws discarded because a perturbation crossed a branch.
    pub redraws: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub classes: Vec<ClassResult>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.classes.iter().all(|c| c.passed)
    }

    pub fn graphs(&self) -> usize {
        self.classes.iter().map(|c| c.graphs).sum()
    }
}

type Leaves = Vec<(String, Tensor)>;
type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var> + Sync>;

fn shape(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn zeros(rng: &mut Rng, count: usize, qmax: u32) -> Vec<i64> {
    (0..count).map(|_| rng.below(qmax as usize + 1) as i64).collect()
}

fn bits(rng: &mut Rng) -> BitWidth {
    BitWidth::new([2, 4, 8][rng.below(3)]).expect("valid width")
}

fn stochastic_rows(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = rng.normal_tensor(&[rows, cols], 1.0);
    for r in 0..rows {
        let row = t.row_mut(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter_mut().map(|x| {
            *x = (*x - m).exp();
            *x
        }).sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    t
}

fn draw_smooth(rng: &mut Rng) -> (Leaves, Build) {
    let (m, k, n) = (shape(rng, 2, 5), shape(rng, 2, 6), shape(rng, 3, 5));
    let target = rng.normal_tensor(&[m, n], 0.3);
    let leaves = vec![
        ("x".into(), rng.normal_tensor(&[m, k], 1.0)),
        ("w".into(), rng.normal_tensor(&[k, n], 0.7)),
        ("b".into(), rng.normal_tensor(&[n], 0.5)),
        ("gamma".into(), rng.normal_tensor(&[n], 1.0)),
        ("beta".into(), rng.normal_tensor(&[n], 1.0)),
    ];
    let scale = rng.uniform_range(0.5, 2.0);
    let build: Build = Box::new(move |g, v| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.add_row_vector(h, v[2])?;
        let h = g.gelu(h);
        let h = g.layernorm(h, v[3], v[4], LAYERNORM_EPS)?;
        let h = g.scale(h, scale);
        let s = g.softmax_rows(h);
        let h = g.sub(h, s)?;
        g.sum_sq_diff(h, &target)
    });
    (leaves, build)
}

fn draw_attention(rng: &mut Rng) -> (Leaves, Build) {
    let (batch, heads, n) = (shape(rng, 1, 2), shape(rng, 1, 2), shape(rng, 2, 4));
    let d = heads * shape(rng, 1, 3);
    let target = rng.normal_tensor(&[batch, d], 0.3);
    let leaves = vec![
        ("qkv".into(), rng.normal_tensor(&[batch * n, 3 * d], 1.0)),
        ("pos".into(), rng.normal_tensor(&[n, 3 * d], 0.5)),
    ];
    let scale = 1.0 / ((d / heads) as f64).sqrt();
    let build: Build = Box::new(move |g, v| {
        let x = g.add_periodic_rows(v[0], v[1])?;
        let q = g.slice_cols(x, 0, d)?;
        let k = g.slice_cols(x, d, d)?;
        let vv = g.slice_cols(x, 2 * d, d)?;
        let s = g.attn_scores(q, k, batch, heads, scale)?;
        let p = g.softmax_rows(s);
        let o = g.attn_apply(p, vv, batch, heads)?;
        let pooled = g.mean_pool_rows(o, n)?;
        g.sum_sq_diff(pooled, &target)
    });
    (leaves, build)
}

fn draw_loss(rng: &mut Rng) -> (Leaves, Build) {
    let (rows, cols) = (shape(rng, 2, 5), shape(rng, 2, 5));
    let p_ref = stochastic_rows(rng, rows, cols);
    let labels: Vec<usize> = (0..rows).map(|_| rng.below(cols)).collect();
    let target = rng.normal_tensor(&[rows, cols], 1.0);
    let beta = rng.uniform_range(2.0, 10.0);
    let leaves = vec![
        ("logits".into(), rng.normal_tensor(&[rows, cols], 1.0)),
        ("v".into(), rng.normal_tensor(&[rows, cols], 1.5)),
    ];
    let build: Build = Box::new(move |g, v| {
        let p = g.softmax_rows(v[0]);
        let kl = g.kl_rows(&p_ref, p)?;
        let ce = g.cross_entropy(v[0], &labels)?;
        let rr = g.round_reg(v[1], beta)?;
        let sq = g.sum_sq_diff(v[1], &target)?;
        let a = g.add(kl, ce)?;
        let b = g.add(rr, sq)?;
        g.add(a, b)
    });
    (leaves, build)
}

fn draw_uniform(rng: &mut Rng, outliers: bool) -> (Leaves, Build) {
    let (rows, cols) = (shape(rng, 2, 5), shape(rng, 2, 5));
    let k = bits(rng);
    let qmax = k.qmax();
    let (groups, count) = match rng.below(3) {
        0 => (ScaleGroups::PerTensor, 1),
        1 => (ScaleGroups::PerRow, rows),
        _ => (ScaleGroups::PerColumn, cols),
    };
    let z = zeros(rng, count, qmax);
    let span = if outliers { 3.0 } else { 1.0 };
    let s: Vec<f64> = (0..count).map(|_| rng.uniform_range(0.5, 1.5) * span / qmax as f64).collect();
    let oc = outliers.then(|| OutlierConfig::new(rng.uniform_range(1.0, 2.0)).expect("positive"));
    let w = rng.normal_tensor(&[cols, 3], 1.0);
    let target = rng.normal_tensor(&[rows, 3], 1.0);
    let leaves = vec![
        ("x".into(), rng.normal_tensor(&[rows, cols], span)),
        ("s".into(), Tensor::vector(&s).expect("vector")),
    ];
    let build: Build = Box::new(move |g, v| {
        let xq = g.fake_quant_uniform(v[0], v[1], &z, qmax, groups, oc)?;
        let wc = g.constant(w.clone());
        let y = g.matmul(xq, wc)?;
        g.sum_sq_diff(y, &target)
    });
    (leaves, build)
}

fn draw_log2(rng: &mut Rng) -> (Leaves, Build) {
    let (rows, cols) = (shape(rng, 2, 5), shape(rng, 2, 5));
    let k = bits(rng);
    let shifted = rng.below(2) == 1;
    let x = if shifted {
        rng.normal_tensor(&[rows, cols], 1.0).map(crate::tensor::gelu_scalar)
    } else {
        rng.uniform_tensor(&[rows, cols], 0.01, 1.0)
    };
    let (mn, mx) = x.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let params = if shifted {
        Log2Params::shifted_from_minmax(mn, mx, k, 1e-8)
    } else {
        Log2Params::new(mx, k, None)
    }
    .expect("valid log2 params");
    let target = rng.normal_tensor(&[rows, cols], 0.5);
    let leaves = vec![("x".into(), x)];
    let build: Build = Box::new(move |g, v| {
        let y = g.fake_quant_log2(v[0], &params);
        let y = g.gelu(y);
        g.sum_sq_diff(y, &target)
    });
    (leaves, build)
}

fn draw_soft_weight(rng: &mut Rng) -> (Leaves, Build) {
    let (rows, k, cols) = (shape(rng, 2, 4), shape(rng, 2, 5), shape(rng, 2, 4));
    let bw = bits(rng);
    let qmax = bw.qmax();
    let w = rng.normal_tensor(&[k, cols], 0.5);
    let mut scales = Vec::with_capacity(cols);
    let mut zs = Vec::with_capacity(cols);
    for c in 0..cols {
        let col: Vec<f64> = (0..k).map(|r| w.at2(r, c)).collect();
        let (mn, mx) = col.iter().fold((0.0f64, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        let s = ((mx - mn) / qmax as f64).max(1e-3);
        scales.push(s);
        zs.push(crate::quant::round_half_even(-mn / s) as i64);
    }
    let x = rng.normal_tensor(&[rows, k], 1.0);
    let target = rng.normal_tensor(&[rows, cols], 0.5);
    let leaves = vec![("v".into(), rng.normal_tensor(&[k, cols], 1.0))];
    let build: Build = Box::new(move |g, v| {
        let wh = g.soft_weight(&w, &scales, &zs, qmax, v[0])?;
        let xc = g.constant(x.clone());
        let y = g.matmul(xc, wh)?;
        g.sum_sq_diff(y, &target)
    });
    (leaves, build)
}

/// Miniature one-block model: two patches of four values, `d = 4`.
pub fn miniature_config() -> ViTConfig {
    ViTConfig {
        image_h: 2,
        image_w: 4,
        channels: 1,
        patch_h: 2,
        patch_w: 2,
        dim: 4,
        heads: 2,
        blocks: 1,
        mlp_dim: 8,
        classes: 2,
    }
}

fn draw_module(rng: &mut Rng, kind: ModuleKind) -> Result<(Leaves, Build)> {
    let mc = miniature_config();
    let model = ViTModel::init(mc, rng.below(1 << 30) as u64)?;
    let batch = 2;
    let images: Vec<Tensor> = (0..batch).map(|_| rng.normal_tensor(&mc.image_shape(), 1.0)).collect();
    let mut cfg = RunConfig {
        model: mc,
        bits_w: BitWidth::new(4)?,
        bits_a: BitWidth::new(4)?,
        ..RunConfig::default()
    };
    // Low thresholds so the outlier path carries entries.
    cfg.alpha_qkv = 1.2;
    cfg.alpha_fc1 = 1.2;
    let policy = cfg.policy();
    let stats = collect_stats(&model, &images, &policy, false)?;
    let bq = init_bundle(&model, &stats, &policy)?.blocks.remove(0);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut ps = Vec::new();
    for img in &images {
        let io = forward_full(img, &model, None, &TapFilter::None, true)?.io.remove(0);
        let n = io.probs.last_dim();
        match kind {
            ModuleKind::Mha => {
                xs.push(io.mha_in);
                ys.push(io.mha_out);
                ps.push(io.probs.clone().reshape(&[io.probs.numel() / n, n])?);
            }
            ModuleKind::Mlp => {
                xs.push(io.mlp_in);
                ys.push(io.mlp_out);
            }
        }
    }
    let block = model.blocks[0].clone();
    let mut leaves = module_leaves(&block, &bq, kind, true)?;
    for l in &mut leaves {
        if l.name.starts_with("v_") {
            l.value = rng.normal_tensor(l.value.shape(), 1.5);
        }
    }
    let roles: Vec<_> = leaves.iter().map(|l| l.role).collect();
    let named: Leaves = leaves.into_iter().map(|l| (l.name, l.value)).collect();
    let x = Tensor::vstack(&xs)?;
    let y = Tensor::vstack(&ys)?;
    let p = if ps.is_empty() { None } else { Some(Tensor::vstack(&ps)?) };
    let beta = rng.uniform_range(2.0, 10.0);
    let heads = mc.heads;
    let build: Build = Box::new(move |g, v| {
        let ctx = ModuleCtx {
            block: &block,
            bq: &bq,
            kind,
            heads,
            roles: roles.clone(),
            x: x.clone(),
            y: y.clone(),
            p: p.clone(),
            batch,
            lambda: 0.5,
        };
        Ok(ctx.loss(g, v, beta)?.total)
    });
    Ok((named, build))
}

fn draw(rng: &mut Rng, class: OpClass) -> Result<(Leaves, Build)> {
    Ok(match class {
        OpClass::Smooth => draw_smooth(rng),
        OpClass::Attention => draw_attention(rng),
        OpClass::Loss => draw_loss(rng),
        OpClass::UniformSte => draw_uniform(rng, false),
        OpClass::OutlierSte => draw_uniform(rng, true),
        OpClass::Log2Ste => draw_log2(rng),
        OpClass::SoftWeight => draw_soft_weight(rng),
        OpClass::MhaModule => draw_module(rng, ModuleKind::Mha)?,
        OpClass::MlpModule => draw_module(rng, ModuleKind::Mlp)?,
    })
}

/// Audits `graphs_per_class` random graphs of every op class.
pub fn run_audit(graphs_per_class: usize, seed: u64) -> Result<AuditReport> {
    let mut classes = Vec::with_capacity(OpClass::ALL.len());
    for (ci, class) in OpClass::ALL.into_iter().enumerate() {
        let mut rng = Rng::derive(seed, ci as u64);
        let (mut max_err, mut done, mut redraws) = (0.0f64, 0, 0);
        while done < graphs_per_class {
            if redraws > MAX_REDRAWS {
                return Err(Error::Precondition(format!(
                    "{}: no boundary-free sample point after {MAX_REDRAWS} draws",
                    class.name()
                )));
            }
            let (leaves, build) = draw(&mut rng, class)?;
            match gradcheck::check(&leaves, &build, FD_STEP, MAX_ENTRIES, rng.below(1 << 30) as u64)? {
                Some(report) => {
                    max_err = max_err.max(report.max_rel_err());
                    done += 1;
                }
                None => redraws += 1,
            }
        }
        log::info!("{}: max rel err {max_err:.3e}", class.name());
        classes.push(ClassResult {
            class,
            tolerance: class.tolerance(),
            max_rel_err: max_err,
            graphs: done,
            redraws,
            passed: max_err <= class.tolerance(),
        });
    }
    Ok(AuditReport { classes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_class_passes_small_audit() {
        let r = run_audit(2, 11).unwrap();
        assert_eq!(r.graphs(), 2 * OpClass::ALL.len());
        for c in &r.classes {
            assert!(c.passed, "{c:?}");
        }
    }
}
