//! Stage two: module-wise reconstruction. Each attention and MLP module is
//! tuned on its own against the full-precision module: learned weight
//! rounding through a soft gate, Adam on the rounding variables and the
//! uniform activation scales, an annealed rounding regulariser, and for
//! attention modules a KL term between full-precision and quantized
//! attention probabilities.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{rectified_sigmoid, rectified_sigmoid_inverse, Graph, ScaleGroups, Var};
use crate::calib::QuantBundle;
use crate::config::{InputMode, RunConfig};
use crate::error::{Error, Result};
use crate::quant::{ActQuant, Granularity, UniformParams, WeightRounding};
use crate::rng::Rng;
use crate::tensor::{Tensor, LAYERNORM_EPS};
use crate::vit::{
    forward_full, mha_forward, mlp_forward, patch_embed, Block, BlockQuant, LayerKind, PreparedBlock,
    SiteKind, TapFilter, ViTModel,
};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Losses above this multiple of the first step's loss abort the run.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr_w: f64,
    pub lr_a: f64,
    pub iterations: usize,
    pub batch: usize,
    pub lambda: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub seed: u64,
    pub input_mode: InputMode,
}

impl From<&RunConfig> for OptimConfig {
    fn from(c: &RunConfig) -> Self {
        OptimConfig {
            lr_w: c.lr_w,
            lr_a: c.lr_a,
            iterations: c.iterations,
            batch: c.batch,
            lambda: c.lambda,
            beta_start: c.beta_start,
            beta_end: c.beta_end,
            seed: c.seeds.recon,
            input_mode: c.input_mode,
        }
    }
}

/// Linear anneal from `start` at step 0 to `end` at step `total - 1`.
pub fn beta_at(step: usize, total: usize, start: f64, end: f64) -> f64 {
    if total <= 1 {
        return end;
    }
    let t = step.min(total - 1) as f64 / (total - 1) as f64;
    if t == 1.0 {
        end
    } else {
        start + (end - start) * t
    }
}

/// `‖y_fp - ŷ‖²` summed over every element.
pub fn loss_output(g: &mut Graph, y_fp: &Tensor, y_q: Var) -> Result<Var> {
    g.sum_sq_diff(y_q, y_fp)
}

/// `Σ 1 - |2h(V) - 1|^β`.
pub fn loss_round(g: &mut Graph, v: Var, beta: f64) -> Result<Var> {
    g.round_reg(v, beta)
}

/// Mean row-wise `KL(p_fp ‖ p_q)` over `[rows × n]` probability matrices.
pub fn loss_attention(g: &mut Graph, p_fp: &Tensor, p_q: Var) -> Result<Var> {
    g.kl_rows(p_fp, p_q)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamLeaf {
    pub m: Tensor,
    pub v: Tensor,
}

/// Adam moments of every trainable leaf plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub leaves: Vec<AdamLeaf>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            step: 0,
            leaves: params
                .iter()
                .map(|p| AdamLeaf {
                    m: Tensor::zeros(p.shape()),
                    v: Tensor::zeros(p.shape()),
                })
                .collect(),
        }
    }
}

/// One bias-corrected Adam update. Rejects non-finite gradients, naming the leaf.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [Tensor],
    grads: &[Tensor],
    lrs: &[f64],
    names: &[String],
) -> Result<()> {
    for (i, g) in grads.iter().enumerate() {
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", names[i])));
        }
        if g.shape() != params[i].shape() {
            return Err(Error::dim("adam_step", format!("gradient shape of {}", names[i])));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let leaf = &mut state.leaves[i];
        let p = params[i].data_mut();
        let (m, v) = (leaf.m.data_mut(), leaf.v.data_mut());
        for j in 0..p.len() {
            let gj = g.data()[j];
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            p[j] -= lrs[i] * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleKind {
    Mha,
    Mlp,
}

impl ModuleKind {
    pub fn layers(self) -> [LayerKind; 2] {
        match self {
            ModuleKind::Mha => [LayerKind::Qkv, LayerKind::Out],
            ModuleKind::Mlp => [LayerKind::Fc1, LayerKind::Fc2],
        }
    }

    pub fn sites(self) -> &'static [SiteKind] {
        match self {
            ModuleKind::Mha => &[
                SiteKind::QkvInput,
                SiteKind::Q,
                SiteKind::K,
                SiteKind::Softmax,
                SiteKind::V,
                SiteKind::AttnOutInput,
            ],
            ModuleKind::Mlp => &[SiteKind::Fc1Input, SiteKind::Fc2Input],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModuleKind::Mha => "mha",
            ModuleKind::Mlp => "mlp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub l_o: f64,
    pub l_round: f64,
    pub l_as: f64,
    pub beta: f64,
}

/// Per-step losses of one module plus full-calibration-set output losses
/// before (nearest rounding, initial scales) and after (hardened) tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleTrace {
    pub module: String,
    pub kind: ModuleKind,
    pub steps: Vec<TraceStep>,
    pub lo_before: f64,
    pub lo_after: f64,
}

impl ModuleTrace {
    pub fn first_lo(&self) -> f64 {
        self.steps.first().map_or(f64::NAN, |s| s.l_o)
    }

    pub fn best_lo(&self) -> f64 {
        self.steps.iter().map(|s| s.l_o).fold(f64::INFINITY, f64::min)
    }
}

/// Rounding variables whose gate starts at the fractional part of `w/s`
/// (clipped to `[0.01, 0.99]`), so the soft weight starts at the real weight.
pub fn init_v(w: &Tensor, params: &UniformParams) -> Result<Tensor> {
    params.check_shape(w.shape())?;
    let c = w.last_dim();
    let data = w
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let s = params.scales[params.group(i / c, i % c)];
            let t = x / s;
            rectified_sigmoid_inverse((t - t.floor()).clamp(0.01, 0.99))
        })
        .collect();
    Tensor::new(w.shape().to_vec(), data)
}

/// Hardened gate: round up where `h(v) ≥ 0.5`.
pub fn harden(v: &Tensor) -> Vec<bool> {
    v.data().iter().map(|&x| rectified_sigmoid(x) >= 0.5).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafRole {
    Rounding(LayerKind),
    Scale(SiteKind),
}

#[derive(Debug, Clone)]
pub struct Leaf {
    pub name: String,
    pub role: LeafRole,
    pub value: Tensor,
}

/// Trainable leaves of a module: one rounding matrix per linear layer and,
/// when `train_scales`, the scales of every uniform activation site.
pub fn module_leaves(
    block: &Block,
    bq: &BlockQuant,
    kind: ModuleKind,
    train_scales: bool,
) -> Result<Vec<Leaf>> {
    let mut leaves = Vec::new();
    for layer in kind.layers() {
        leaves.push(Leaf {
            name: format!("v_{}", layer.name()),
            role: LeafRole::Rounding(layer),
            value: init_v(block.weight(layer), &bq.weight(layer).params)?,
        });
    }
    if train_scales {
        for &site in kind.sites() {
            if let Some(p) = bq.act(site).uniform_params() {
                leaves.push(Leaf {
                    name: format!("s_{}", site.name()),
                    role: LeafRole::Scale(site),
                    value: Tensor::vector(&p.scales)?,
                });
            }
        }
    }
    Ok(leaves)
}

/// Fixed inputs of one module loss evaluation.
pub struct ModuleCtx<'a> {
    pub block: &'a Block,
    pub bq: &'a BlockQuant,
    pub kind: ModuleKind,
    pub heads: usize,
    pub roles: Vec<LeafRole>,
    /// Stacked `[B·n × d]` module inputs.
    pub x: Tensor,
    /// Stacked full-precision module outputs.
    pub y: Tensor,
    /// Stacked `[B·H·n × n]` full-precision attention probabilities.
    pub p: Option<Tensor>,
    pub batch: usize,
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub l_o: Var,
    pub l_round: Option<Var>,
    pub l_as: Option<Var>,
}

fn scale_groups(g: Granularity) -> ScaleGroups {
    match g {
        Granularity::PerTensor => ScaleGroups::PerTensor,
        Granularity::PerChannel => ScaleGroups::PerColumn,
        Granularity::PerPatch => ScaleGroups::PerRow,
    }
}

impl ModuleCtx<'_> {
    fn leaf(&self, vars: &[Var], role: LeafRole) -> Option<Var> {
        self.roles.iter().position(|r| *r == role).map(|i| vars[i])
    }

    fn site(&self, g: &mut Graph, vars: &[Var], kind: SiteKind, x: Var) -> Result<Var> {
        let act = self.bq.act(kind);
        match act {
            ActQuant::Uniform { params } | ActQuant::OutlierAware { params, .. } => {
                let s = match self.leaf(vars, LeafRole::Scale(kind)) {
                    Some(v) => v,
                    None => g.constant(Tensor::vector(&params.scales)?),
                };
                g.fake_quant_uniform(
                    x,
                    s,
                    &params.zeros,
                    params.bits.qmax(),
                    scale_groups(params.granularity),
                    act.outlier().copied(),
                )
            }
            ActQuant::Log2 { params } => Ok(g.fake_quant_log2(x, params)),
        }
    }

    fn weight(&self, g: &mut Graph, vars: &[Var], layer: LayerKind) -> Result<Var> {
        let w = self.block.weight(layer);
        let wq = self.bq.weight(layer);
        match self.leaf(vars, LeafRole::Rounding(layer)) {
            Some(v) => g.soft_weight(w, &wq.params.scales, &wq.params.zeros, wq.params.bits.qmax(), v),
            None => Ok(g.constant(wq.dequantize(w)?)),
        }
    }

    fn linear(&self, g: &mut Graph, vars: &[Var], x: Var, layer: LayerKind, bias: &Tensor) -> Result<Var> {
        let w = self.weight(g, vars, layer)?;
        let y = g.matmul(x, w)?;
        let b = g.constant(bias.clone());
        g.add_row_vector(y, b)
    }

    /// Builds the module loss for leaf variables `vars` (ordered as `roles`).
    pub fn loss(&self, g: &mut Graph, vars: &[Var], beta: f64) -> Result<LossParts> {
        let blk = self.block;
        let x = g.constant(self.x.clone());
        let (out, l_as) = match self.kind {
            ModuleKind::Mha => {
                let d = blk.w_o.shape()[0];
                let dh = d / self.heads;
                let gamma = g.constant(blk.ln1_gamma.clone());
                let beta_ln = g.constant(blk.ln1_beta.clone());
                let xl = g.layernorm(x, gamma, beta_ln, LAYERNORM_EPS)?;
                let xq = self.site(g, vars, SiteKind::QkvInput, xl)?;
                let qkv = self.linear(g, vars, xq, LayerKind::Qkv, &blk.b_qkv)?;
                let q = g.slice_cols(qkv, 0, d)?;
                let k = g.slice_cols(qkv, d, d)?;
                let v = g.slice_cols(qkv, 2 * d, d)?;
                let q = self.site(g, vars, SiteKind::Q, q)?;
                let k = self.site(g, vars, SiteKind::K, k)?;
                let v = self.site(g, vars, SiteKind::V, v)?;
                let scores = g.attn_scores(q, k, self.batch, self.heads, 1.0 / (dh as f64).sqrt())?;
                let p = g.softmax_rows(scores);
                let pq = self.site(g, vars, SiteKind::Softmax, p)?;
                let p_fp = self
                    .p
                    .as_ref()
                    .ok_or_else(|| Error::Precondition("attention module needs reference probabilities".into()))?;
                let l_as = loss_attention(g, p_fp, pq)?;
                let o = g.attn_apply(pq, v, self.batch, self.heads)?;
                let oq = self.site(g, vars, SiteKind::AttnOutInput, o)?;
                (self.linear(g, vars, oq, LayerKind::Out, &blk.b_o)?, Some(l_as))
            }
            ModuleKind::Mlp => {
                let gamma = g.constant(blk.ln2_gamma.clone());
                let beta_ln = g.constant(blk.ln2_beta.clone());
                let xl = g.layernorm(x, gamma, beta_ln, LAYERNORM_EPS)?;
                let xq = self.site(g, vars, SiteKind::Fc1Input, xl)?;
                let h = self.linear(g, vars, xq, LayerKind::Fc1, &blk.b_fc1)?;
                let h = g.gelu(h);
                let hq = self.site(g, vars, SiteKind::Fc2Input, h)?;
                (self.linear(g, vars, hq, LayerKind::Fc2, &blk.b_fc2)?, None)
            }
        };
        let l_o = loss_output(g, &self.y, out)?;
        let mut total = l_o;
        if let Some(las) = l_as {
            total = g.add(total, las)?;
        }
        let mut l_round = None;
        for layer in self.kind.layers() {
            if let Some(v) = self.leaf(vars, LeafRole::Rounding(layer)) {
                let r = loss_round(g, v, beta)?;
                l_round = Some(match l_round {
                    Some(acc) => g.add(acc, r)?,
                    None => r,
                });
            }
        }
        if let Some(r) = l_round {
            let scaled = g.scale(r, self.lambda);
            total = g.add(total, scaled)?;
        }
        Ok(LossParts {
            total,
            l_o,
            l_round,
            l_as,
        })
    }
}

/// Cached per-sample module inputs, full-precision outputs and (attention
/// modules) full-precision probabilities `[H × n × n]`.
#[derive(Debug, Clone)]
pub struct ModuleData {
    pub inputs: Vec<Tensor>,
    pub outputs: Vec<Tensor>,
    pub probs: Option<Vec<Tensor>>,
}

fn pick<'a>(v: &'a [Tensor], idx: &[usize]) -> Vec<&'a Tensor> {
    idx.iter().map(|&i| &v[i]).collect()
}

fn stack(parts: &[&Tensor]) -> Result<Tensor> {
    let owned: Vec<Tensor> = parts.iter().map(|t| (*t).clone()).collect();
    Tensor::vstack(&owned)
}

fn stack_probs(parts: &[&Tensor]) -> Result<Tensor> {
    let flat: Vec<Tensor> = parts
        .iter()
        .map(|t| {
            let n = t.last_dim();
            (*t).clone().reshape(&[t.numel() / n, n])
        })
        .collect::<Result<_>>()?;
    Tensor::vstack(&flat)
}

/// Output loss of the module under `bq`'s deployed quantizers, summed over all samples.
pub fn module_output_loss(
    block: &Block,
    heads: usize,
    kind: ModuleKind,
    bq: &BlockQuant,
    data: &ModuleData,
) -> Result<f64> {
    let prepared = PreparedBlock::new(block, bq)?;
    let losses: Vec<f64> = data
        .inputs
        .par_iter()
        .zip(&data.outputs)
        .map(|(x, y)| -> Result<f64> {
            let out = match kind {
                ModuleKind::Mha => mha_forward(x, block, heads, Some(&prepared))?.0,
                ModuleKind::Mlp => mlp_forward(x, block, Some(&prepared))?,
            };
            Ok(out.sub(y)?.data().iter().map(|v| v * v).sum())
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum())
}

/// Tunes one module in place and returns its trace. Rounding is hardened
/// and tuned scales are snapped to binary32 before returning.
pub fn optimize_module(
    block: &Block,
    heads: usize,
    kind: ModuleKind,
    data: &ModuleData,
    bq: &mut BlockQuant,
    cfg: &OptimConfig,
    label: &str,
    stream: u64,
) -> Result<ModuleTrace> {
    let count = data.inputs.len();
    if count == 0 || data.outputs.len() != count {
        return Err(Error::Precondition(format!("{label}: no calibration inputs")));
    }
    if kind == ModuleKind::Mha && data.probs.as_ref().map(Vec::len) != Some(count) {
        return Err(Error::Precondition(format!("{label}: missing reference probabilities")));
    }
    let lo_before = module_output_loss(block, heads, kind, bq, data)?;
    let leaves = module_leaves(block, bq, kind, cfg.lr_a > 0.0)?;
    let roles: Vec<LeafRole> = leaves.iter().map(|l| l.role).collect();
    let names: Vec<String> = leaves.iter().map(|l| format!("{label}.{}", l.name)).collect();
    let lrs: Vec<f64> = roles
        .iter()
        .map(|r| match r {
            LeafRole::Rounding(_) => cfg.lr_w,
            LeafRole::Scale(_) => cfg.lr_a,
        })
        .collect();
    let mut params: Vec<Tensor> = leaves.into_iter().map(|l| l.value).collect();
    let mut adam = AdamState::new(&params);
    let mut rng = Rng::derive(cfg.seed, stream);
    let batch = cfg.batch.min(count);
    let mut steps = Vec::with_capacity(cfg.iterations);
    let mut limit = f64::INFINITY;
    for step in 0..cfg.iterations {
        let beta = beta_at(step, cfg.iterations, cfg.beta_start, cfg.beta_end);
        let idx = rng.sample_indices(count, batch);
        let ctx = ModuleCtx {
            block,
            bq,
            kind,
            heads,
            roles: roles.clone(),
            x: stack(&pick(&data.inputs, &idx))?,
            y: stack(&pick(&data.outputs, &idx))?,
            p: match &data.probs {
                Some(p) if kind == ModuleKind::Mha => Some(stack_probs(&pick(p, &idx))?),
                _ => None,
            },
            batch,
            lambda: cfg.lambda,
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone(), true)).collect();
        let parts = ctx.loss(&mut g, &vars, beta)?;
        let total = g.scalar_value(parts.total);
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("{label} loss at step {step}")));
        }
        if step == 0 {
            limit = DIVERGENCE_FACTOR * total.max(1e-6);
        } else if total > limit {
            return Err(Error::Divergence {
                context: label.to_string(),
                loss: total,
                limit,
            });
        }
        steps.push(TraceStep {
            step,
            l_o: g.scalar_value(parts.l_o),
            l_round: parts.l_round.map_or(0.0, |v| g.scalar_value(v)),
            l_as: parts.l_as.map_or(0.0, |v| g.scalar_value(v)),
            beta,
        });
        let mut grads = g.backward(parts.total)?;
        let grads: Vec<Tensor> = vars
            .iter()
            .zip(&params)
            .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        adam_step(&mut adam, &mut params, &grads, &lrs, &names)?;
        for (p, r) in params.iter_mut().zip(&roles) {
            if matches!(r, LeafRole::Scale(_)) {
                for s in p.data_mut() {
                    *s = s.max(crate::autodiff::SCALE_FLOOR);
                }
            }
        }
    }
    for (p, r) in params.iter().zip(&roles) {
        match *r {
            LeafRole::Rounding(layer) => {
                bq.weight_mut(layer).rounding = WeightRounding::Learned { up: harden(p) };
            }
            LeafRole::Scale(site) => {
                let up = bq
                    .act_mut(site)
                    .uniform_params_mut()
                    .expect("scale leaves exist only for uniform sites");
                up.scales = p.data().to_vec();
                *up = up.clone().snapped_to_f32();
            }
        }
    }
    let lo_after = module_output_loss(block, heads, kind, bq, data)?;
    Ok(ModuleTrace {
        module: label.to_string(),
        kind,
        steps,
        lo_before,
        lo_after,
    })
}

/// Reconstructs every module in order (block by block, attention before
/// MLP) and appends the traces to `bundle`.
pub fn run_all_modules(
    model: &ViTModel,
    bundle: &mut QuantBundle,
    images: &[Tensor],
    cfg: &OptimConfig,
) -> Result<()> {
    if images.is_empty() {
        return Err(Error::Precondition("calibration set is empty".into()));
    }
    let fp: Vec<_> = images
        .par_iter()
        .map(|img| forward_full(img, model, None, &TapFilter::None, true))
        .collect::<Result<_>>()?;
    let heads = model.config.heads;
    let mut xq: Option<Vec<Tensor>> = match cfg.input_mode {
        InputMode::Clean => None,
        InputMode::Quantized => Some(images.iter().map(|i| patch_embed(i, model)).collect::<Result<_>>()?),
    };
    for (b, block) in model.blocks.iter().enumerate() {
        let io = |f: &dyn Fn(&crate::vit::BlockIo) -> Tensor| fp.iter().map(|o| f(&o.io[b])).collect::<Vec<_>>();
        let mha = ModuleData {
            inputs: xq.clone().unwrap_or_else(|| io(&|x| x.mha_in.clone())),
            outputs: io(&|x| x.mha_out.clone()),
            probs: Some(io(&|x| x.probs.clone())),
        };
        let label = format!("block{b}.mha");
        let trace = optimize_module(block, heads, ModuleKind::Mha, &mha, &mut bundle.blocks[b], cfg, &label, 2 * b as u64)?;
        log::info!("{label}: L_o {:.6e} -> {:.6e}", trace.lo_before, trace.lo_after);
        bundle.traces.push(trace);

        let mid = match &xq {
            Some(xs) => {
                let prepared = PreparedBlock::new(block, &bundle.blocks[b])?;
                Some(
                    xs.par_iter()
                        .map(|x| x.add(&mha_forward(x, block, heads, Some(&prepared))?.0))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
            None => None,
        };
        let mlp = ModuleData {
            inputs: mid.clone().unwrap_or_else(|| io(&|x| x.mlp_in.clone())),
            outputs: io(&|x| x.mlp_out.clone()),
            probs: None,
        };
        let label = format!("block{b}.mlp");
        let trace = optimize_module(block, heads, ModuleKind::Mlp, &mlp, &mut bundle.blocks[b], cfg, &label, 2 * b as u64 + 1)?;
        log::info!("{label}: L_o {:.6e} -> {:.6e}", trace.lo_before, trace.lo_after);
        bundle.traces.push(trace);

        if let Some(mid) = mid {
            let prepared = PreparedBlock::new(block, &bundle.blocks[b])?;
            xq = Some(
                mid.par_iter()
                    .map(|x| x.add(&mlp_forward(x, block, Some(&prepared))?))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
    }
    Ok(())
}
