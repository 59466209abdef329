//! Toy vision transformer: patch embedding, pre-norm blocks of multi-head
//! attention and an MLP, mean-pool readout, activation taps at every
//! quantization site, and the on-disk checkpoint format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{ActQuant, WeightQuant};
use crate::rng::Rng;
use crate::storage;
use crate::tensor::{gelu, gemm, gemm_nt, layernorm, softmax_in_place, Tensor, LAYERNORM_EPS};

pub const CHECKPOINT_FORMAT: &str = "ADFQ-CKPT v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_dim: usize,
    pub classes: usize,
}

impl Default for ViTConfig {
    /// 32×32×3 images, 8×8 patches (16 tokens), d = 64, 4 heads, 4 blocks, 10 classes.
    fn default() -> Self {
        ViTConfig {
            image_h: 32,
            image_w: 32,
            channels: 3,
            patch_h: 8,
            patch_w: 8,
            dim: 64,
            heads: 4,
            blocks: 4,
            mlp_dim: 256,
            classes: 10,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let nonzero = [
            self.image_h,
            self.image_w,
            self.channels,
            self.patch_h,
            self.patch_w,
            self.dim,
            self.heads,
            self.mlp_dim,
            self.classes,
        ];
        if nonzero.contains(&0) {
            return Err(Error::Config("model extents must be positive".into()));
        }
        if self.image_h % self.patch_h != 0 || self.image_w % self.patch_w != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible into {}x{} patches",
                self.image_h, self.image_w, self.patch_h, self.patch_w
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        (self.image_h / self.patch_h) * (self.image_w / self.patch_w)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_h * self.patch_w * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_h, self.image_w, self.channels]
    }
}

/// Weights of one transformer block. Linear weights are stored `[in × out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub w_qkv: Tensor,
    pub b_qkv: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w_fc1: Tensor,
    pub b_fc1: Tensor,
    pub w_fc2: Tensor,
    pub b_fc2: Tensor,
}

/// The four quantized linear layers of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Qkv,
    Out,
    Fc1,
    Fc2,
}

impl LayerKind {
    pub const ALL: [LayerKind; 4] = [LayerKind::Qkv, LayerKind::Out, LayerKind::Fc1, LayerKind::Fc2];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Qkv => "qkv",
            LayerKind::Out => "out",
            LayerKind::Fc1 => "fc1",
            LayerKind::Fc2 => "fc2",
        }
    }
}

impl Block {
    pub fn weight(&self, layer: LayerKind) -> &Tensor {
        match layer {
            LayerKind::Qkv => &self.w_qkv,
            LayerKind::Out => &self.w_o,
            LayerKind::Fc1 => &self.w_fc1,
            LayerKind::Fc2 => &self.w_fc2,
        }
    }

    fn named(&self) -> [(&'static str, &Tensor); 12] {
        [
            ("ln1_gamma", &self.ln1_gamma),
            ("ln1_beta", &self.ln1_beta),
            ("w_qkv", &self.w_qkv),
            ("b_qkv", &self.b_qkv),
            ("w_o", &self.w_o),
            ("b_o", &self.b_o),
            ("ln2_gamma", &self.ln2_gamma),
            ("ln2_beta", &self.ln2_beta),
            ("w_fc1", &self.w_fc1),
            ("b_fc1", &self.b_fc1),
            ("w_fc2", &self.w_fc2),
            ("b_fc2", &self.b_fc2),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Tensor); 12] {
        [
            ("ln1_gamma", &mut self.ln1_gamma),
            ("ln1_beta", &mut self.ln1_beta),
            ("w_qkv", &mut self.w_qkv),
            ("b_qkv", &mut self.b_qkv),
            ("w_o", &mut self.w_o),
            ("b_o", &mut self.b_o),
            ("ln2_gamma", &mut self.ln2_gamma),
            ("ln2_beta", &mut self.ln2_beta),
            ("w_fc1", &mut self.w_fc1),
            ("b_fc1", &mut self.b_fc1),
            ("w_fc2", &mut self.w_fc2),
            ("b_fc2", &mut self.b_fc2),
        ]
    }

    fn shapes(cfg: &ViTConfig) -> [Vec<usize>; 12] {
        let (d, m) = (cfg.dim, cfg.mlp_dim);
        [
            vec![d],
            vec![d],
            vec![d, 3 * d],
            vec![3 * d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, m],
            vec![m],
            vec![m, d],
            vec![d],
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViTModel {
    pub config: ViTConfig,
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<Block>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl ViTModel {
    /// Seeded random initialisation; every value is representable in binary32.
    pub fn init(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let (d, m, p) = (config.dim, config.mlp_dim, config.patch_dim());
        let mut normal = |shape: &[usize], std: f64| storage::snap_f32(&rng.normal_tensor(shape, std));
        let patch_w = normal(&[p, d], 1.0 / (p as f64).sqrt());
        let pos = normal(&[config.patches(), d], 0.5);
        let blocks = (0..config.blocks)
            .map(|_| Block {
                ln1_gamma: Tensor::full(&[d], 1.0),
                ln1_beta: Tensor::zeros(&[d]),
                w_qkv: normal(&[d, 3 * d], 1.0 / (d as f64).sqrt()),
                b_qkv: Tensor::zeros(&[3 * d]),
                w_o: normal(&[d, d], 1.0 / (d as f64).sqrt()),
                b_o: Tensor::zeros(&[d]),
                ln2_gamma: Tensor::full(&[d], 1.0),
                ln2_beta: Tensor::zeros(&[d]),
                w_fc1: normal(&[d, m], 1.0 / (d as f64).sqrt()),
                b_fc1: Tensor::zeros(&[m]),
                w_fc2: normal(&[m, d], 1.0 / (m as f64).sqrt()),
                b_fc2: Tensor::zeros(&[d]),
            })
            .collect();
        let head_w = normal(&[d, config.classes], 1.0 / (d as f64).sqrt());
        Ok(ViTModel {
            config,
            patch_w,
            patch_b: Tensor::zeros(&[d]),
            pos,
            blocks,
            head_w,
            head_b: Tensor::zeros(&[config.classes]),
        })
    }

    /// All parameters zero except LayerNorm gains (one) and the positional
    /// embedding, which is drawn from `seed`.
    pub fn zeros_with_pos(config: ViTConfig, seed: u64) -> Result<Self> {
        let mut model = ViTModel::init(config, seed)?;
        let pos = model.pos.clone();
        for (name, t) in model.named_mut() {
            let keep = name.ends_with("gamma");
            if !keep {
                *t = Tensor::zeros(t.shape());
            }
        }
        model.pos = pos;
        Ok(model)
    }

    /// Parameters in canonical order with stable names.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("patch_w".to_string(), &self.patch_w),
            ("patch_b".to_string(), &self.patch_b),
            ("pos".to_string(), &self.pos),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, t) in b.named() {
                out.push((format!("blocks.{i}.{n}"), t));
            }
        }
        out.push(("head_w".to_string(), &self.head_w));
        out.push(("head_b".to_string(), &self.head_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("patch_w".to_string(), &mut self.patch_w),
            ("patch_b".to_string(), &mut self.patch_b),
            ("pos".to_string(), &mut self.pos),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (n, t) in b.named_mut() {
                out.push((format!("blocks.{i}.{n}"), t));
            }
        }
        out.push(("head_w".to_string(), &mut self.head_w));
        out.push(("head_b".to_string(), &mut self.head_b));
        out
    }

    fn expected_shapes(config: &ViTConfig) -> Vec<(String, Vec<usize>)> {
        let d = config.dim;
        let mut out = vec![
            ("patch_w".to_string(), vec![config.patch_dim(), d]),
            ("patch_b".to_string(), vec![d]),
            ("pos".to_string(), vec![config.patches(), d]),
        ];
        let names = [
            "ln1_gamma", "ln1_beta", "w_qkv", "b_qkv", "w_o", "b_o", "ln2_gamma", "ln2_beta",
            "w_fc1", "b_fc1", "w_fc2", "b_fc2",
        ];
        for i in 0..config.blocks {
            for (n, s) in names.iter().zip(Block::shapes(config)) {
                out.push((format!("blocks.{i}.{n}"), s));
            }
        }
        out.push(("head_w".to_string(), vec![d, config.classes]));
        out.push(("head_b".to_string(), vec![config.classes]));
        out
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }
}

/// Activation sites of one block that receive a fake quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    /// Post-LayerNorm input of the QKV linear.
    QkvInput,
    Q,
    K,
    /// Attention probabilities.
    Softmax,
    V,
    /// Concatenated head outputs entering the output projection.
    AttnOutInput,
    /// Post-LayerNorm input of FC1.
    Fc1Input,
    /// Post-GELU input of FC2.
    Fc2Input,
}

impl SiteKind {
    pub const ALL: [SiteKind; 8] = [
        SiteKind::QkvInput,
        SiteKind::Q,
        SiteKind::K,
        SiteKind::Softmax,
        SiteKind::V,
        SiteKind::AttnOutInput,
        SiteKind::Fc1Input,
        SiteKind::Fc2Input,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            SiteKind::QkvInput => "qkv_input",
            SiteKind::Q => "q",
            SiteKind::K => "k",
            SiteKind::Softmax => "softmax",
            SiteKind::V => "v",
            SiteKind::AttnOutInput => "attn_out_input",
            SiteKind::Fc1Input => "fc1_input",
            SiteKind::Fc2Input => "fc2_input",
        }
    }

    pub fn from_name(name: &str) -> Option<SiteKind> {
        SiteKind::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn in_mha(self) -> bool {
        !matches!(self, SiteKind::Fc1Input | SiteKind::Fc2Input)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SiteId {
    pub block: usize,
    pub kind: SiteKind,
}

impl SiteId {
    pub fn label(&self) -> String {
        format!("block{}.{}", self.block, self.kind.name())
    }
}

/// Activation captured at a site, before its quantizer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTap {
    pub site: SiteId,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum TapFilter {
    #[default]
    None,
    All,
    Only(Vec<SiteId>),
}

impl TapFilter {
    fn wants(&self, site: SiteId) -> bool {
        match self {
            TapFilter::None => false,
            TapFilter::All => true,
            TapFilter::Only(ids) => ids.contains(&site),
        }
    }
}

/// Quantizers of one block: activation sites indexed by [`SiteKind::index`],
/// weights indexed by [`LayerKind`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockQuant {
    pub acts: Vec<ActQuant>,
    pub weights: Vec<WeightQuant>,
}

impl BlockQuant {
    pub fn act(&self, kind: SiteKind) -> &ActQuant {
        &self.acts[kind.index()]
    }

    pub fn act_mut(&mut self, kind: SiteKind) -> &mut ActQuant {
        &mut self.acts[kind.index()]
    }

    pub fn weight(&self, layer: LayerKind) -> &WeightQuant {
        &self.weights[layer as usize]
    }

    pub fn weight_mut(&mut self, layer: LayerKind) -> &mut WeightQuant {
        &mut self.weights[layer as usize]
    }
}

/// Block quantizers with the weights already dequantized.
#[derive(Debug, Clone)]
pub struct PreparedBlock {
    pub quant: BlockQuant,
    pub w_hat: [Tensor; 4],
}

impl PreparedBlock {
    pub fn new(block: &Block, quant: &BlockQuant) -> Result<Self> {
        if quant.acts.len() != SiteKind::ALL.len() || quant.weights.len() != 4 {
            return Err(Error::Config("block quantizer is missing sites".into()));
        }
        let w = |l: LayerKind| quant.weight(l).dequantize(block.weight(l));
        Ok(PreparedBlock {
            quant: quant.clone(),
            w_hat: [
                w(LayerKind::Qkv)?,
                w(LayerKind::Out)?,
                w(LayerKind::Fc1)?,
                w(LayerKind::Fc2)?,
            ],
        })
    }

    fn act(&self, kind: SiteKind) -> &ActQuant {
        self.quant.act(kind)
    }

    fn w(&self, layer: LayerKind) -> &Tensor {
        &self.w_hat[layer as usize]
    }
}

/// Every block of a model prepared for quantized inference.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    pub blocks: Vec<PreparedBlock>,
}

impl QuantizedModel {
    pub fn new(model: &ViTModel, quant: &[BlockQuant]) -> Result<Self> {
        if quant.len() != model.blocks.len() {
            return Err(Error::Config(format!(
                "{} block quantizers for {} blocks",
                quant.len(),
                model.blocks.len()
            )));
        }
        let blocks = model
            .blocks
            .iter()
            .zip(quant)
            .map(|(b, q)| PreparedBlock::new(b, q))
            .collect::<Result<_>>()?;
        Ok(QuantizedModel { blocks })
    }
}

struct Taps<'a> {
    block: usize,
    filter: &'a TapFilter,
    out: Vec<ActivationTap>,
}

impl Taps<'_> {
    fn record(&mut self, kind: SiteKind, value: &Tensor) {
        let site = SiteId {
            block: self.block,
            kind,
        };
        if self.filter.wants(site) {
            self.out.push(ActivationTap {
                site,
                value: value.clone(),
            });
        }
    }
}

/// Rearranges an `[h × w × c]` image into `[n × (h_p·w_p·c)]` patch rows.
pub fn flatten_patches(image: &Tensor, cfg: &ViTConfig) -> Result<Tensor> {
    if image.shape() != cfg.image_shape() {
        return Err(Error::dim(
            "patch_embed",
            format!("image {:?}, expected {:?}", image.shape(), cfg.image_shape()),
        ));
    }
    let (ph, pw, c) = (cfg.patch_h, cfg.patch_w, cfg.channels);
    let grid_w = cfg.image_w / pw;
    let mut out = Vec::with_capacity(image.numel());
    for p in 0..cfg.patches() {
        let (pr, pc) = (p / grid_w, p % grid_w);
        for y in 0..ph {
            let row = pr * ph + y;
            let start = (row * cfg.image_w + pc * pw) * c;
            out.extend_from_slice(&image.data()[start..start + pw * c]);
        }
    }
    Ok(Tensor::from_raw(vec![cfg.patches(), cfg.patch_dim()], out))
}

/// `X_0 = patches · W_proj + b_proj + pos`.
pub fn patch_embed(image: &Tensor, model: &ViTModel) -> Result<Tensor> {
    let patches = flatten_patches(image, &model.config)?;
    gemm(&patches, &model.patch_w)?
        .add_row_vector(&model.patch_b)?
        .add(&model.pos)
}

fn check_tokens(x: &Tensor, d: usize, op: &'static str) -> Result<()> {
    match x.shape() {
        [_, c] if *c == d => Ok(()),
        s => Err(Error::dim(op, format!("tokens {s:?}, expected [n x {d}]"))),
    }
}

fn mha_impl(
    x: &Tensor,
    block: &Block,
    heads: usize,
    quant: Option<&PreparedBlock>,
    taps: &mut Taps<'_>,
) -> Result<(Tensor, Tensor)> {
    let d = block.w_o.shape()[0];
    check_tokens(x, d, "mha_forward")?;
    let n = x.rows();
    let dh = d / heads;
    let xl = layernorm(x, &block.ln1_gamma, &block.ln1_beta, LAYERNORM_EPS)?;
    taps.record(SiteKind::QkvInput, &xl);
    let qkv = match quant {
        Some(pq) => pq.act(SiteKind::QkvInput).linear(&xl, pq.w(LayerKind::Qkv), &block.b_qkv)?,
        None => gemm(&xl, &block.w_qkv)?.add_row_vector(&block.b_qkv)?,
    };
    let mut q = qkv.slice_cols(0, d)?;
    let mut k = qkv.slice_cols(d, d)?;
    let mut v = qkv.slice_cols(2 * d, d)?;
    taps.record(SiteKind::Q, &q);
    taps.record(SiteKind::K, &k);
    taps.record(SiteKind::V, &v);
    if let Some(pq) = quant {
        q = pq.act(SiteKind::Q).fake(&q)?;
        k = pq.act(SiteKind::K).fake(&k)?;
        v = pq.act(SiteKind::V).fake(&v)?;
    }
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut probs = Vec::with_capacity(heads * n * n);
    for h in 0..heads {
        let qh = q.slice_cols(h * dh, dh)?;
        let kh = k.slice_cols(h * dh, dh)?;
        let mut logits = gemm_nt(&qh, &kh)?.scale(inv_sqrt);
        for r in 0..n {
            softmax_in_place(logits.row_mut(r));
        }
        probs.extend_from_slice(logits.data());
    }
    let mut probs = Tensor::from_raw(vec![heads, n, n], probs);
    taps.record(SiteKind::Softmax, &probs);
    if let Some(pq) = quant {
        probs = pq.act(SiteKind::Softmax).fake(&probs)?;
    }
    let mut concat = vec![0.0; n * d];
    for h in 0..heads {
        let p = Tensor::from_raw(vec![n, n], probs.data()[h * n * n..(h + 1) * n * n].to_vec());
        let oh = gemm(&p, &v.slice_cols(h * dh, dh)?)?;
        for r in 0..n {
            concat[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(oh.row(r));
        }
    }
    let concat = Tensor::from_raw(vec![n, d], concat);
    taps.record(SiteKind::AttnOutInput, &concat);
    let out = match quant {
        Some(pq) => pq.act(SiteKind::AttnOutInput).linear(&concat, pq.w(LayerKind::Out), &block.b_o)?,
        None => gemm(&concat, &block.w_o)?.add_row_vector(&block.b_o)?,
    };
    Ok((out, probs))
}

fn mlp_impl(
    x: &Tensor,
    block: &Block,
    quant: Option<&PreparedBlock>,
    taps: &mut Taps<'_>,
) -> Result<Tensor> {
    check_tokens(x, block.w_fc1.shape()[0], "mlp_forward")?;
    let xl = layernorm(x, &block.ln2_gamma, &block.ln2_beta, LAYERNORM_EPS)?;
    taps.record(SiteKind::Fc1Input, &xl);
    let h = match quant {
        Some(pq) => pq.act(SiteKind::Fc1Input).linear(&xl, pq.w(LayerKind::Fc1), &block.b_fc1)?,
        None => gemm(&xl, &block.w_fc1)?.add_row_vector(&block.b_fc1)?,
    };
    let g = gelu(&h);
    taps.record(SiteKind::Fc2Input, &g);
    match quant {
        Some(pq) => pq.act(SiteKind::Fc2Input).linear(&g, pq.w(LayerKind::Fc2), &block.b_fc2),
        None => gemm(&g, &block.w_fc2)?.add_row_vector(&block.b_fc2),
    }
}

/// Attention branch `W_o · concat_h(softmax(Q_h K_hᵀ / √d_h) V_h) + b_o` on
/// `LayerNorm(x)`. Returns the branch output and the `[H × n × n]`
/// probabilities that multiplied `V` (dequantized when `quant` is given).
pub fn mha_forward(
    x: &Tensor,
    block: &Block,
    heads: usize,
    quant: Option<&PreparedBlock>,
) -> Result<(Tensor, Tensor)> {
    let filter = TapFilter::None;
    let mut taps = Taps { block: 0, filter: &filter, out: vec![] };
    mha_impl(x, block, heads, quant, &mut taps)
}

/// MLP branch `GELU(LayerNorm(x) W_fc1 + b_fc1) W_fc2 + b_fc2`.
pub fn mlp_forward(x: &Tensor, block: &Block, quant: Option<&PreparedBlock>) -> Result<Tensor> {
    let filter = TapFilter::None;
    let mut taps = Taps { block: 0, filter: &filter, out: vec![] };
    mlp_impl(x, block, quant, &mut taps)
}

/// Inputs and outputs of both modules of one block for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockIo {
    pub mha_in: Tensor,
    pub mha_out: Tensor,
    pub probs: Tensor,
    pub mlp_in: Tensor,
    pub mlp_out: Tensor,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub taps: Vec<ActivationTap>,
    pub io: Vec<BlockIo>,
}

/// Full forward pass with optional quantization, tap capture and per-block
/// module I/O recording.
pub fn forward_full(
    image: &Tensor,
    model: &ViTModel,
    quant: Option<&QuantizedModel>,
    filter: &TapFilter,
    record_io: bool,
) -> Result<ForwardOutput> {
    if let Some(qm) = quant {
        if qm.blocks.len() != model.blocks.len() {
            return Err(Error::Config("quantized model depth differs from model".into()));
        }
    }
    let mut x = patch_embed(image, model)?;
    let mut taps = Taps { block: 0, filter, out: vec![] };
    let mut io = Vec::new();
    for (i, block) in model.blocks.iter().enumerate() {
        taps.block = i;
        let pq = quant.map(|q| &q.blocks[i]);
        let (mha_out, probs) = mha_impl(&x, block, model.config.heads, pq, &mut taps)?;
        let mid = x.add(&mha_out)?;
        let mlp_out = mlp_impl(&mid, block, pq, &mut taps)?;
        let next = mid.add(&mlp_out)?;
        if record_io {
            io.push(BlockIo {
                mha_in: x,
                mha_out,
                probs,
                mlp_in: mid,
                mlp_out,
            });
        }
        x = next;
    }
    let logits = head_forward(&x, model)?;
    Ok(ForwardOutput {
        logits,
        taps: taps.out,
        io,
    })
}

/// Mean over tokens followed by the linear classifier.
pub fn head_forward(tokens: &Tensor, model: &ViTModel) -> Result<Tensor> {
    let n = tokens.rows() as f64;
    let d = tokens.last_dim();
    let mut pooled = vec![0.0; d];
    for r in 0..tokens.rows() {
        for (p, v) in pooled.iter_mut().zip(tokens.row(r)) {
            *p += v;
        }
    }
    let pooled = Tensor::from_raw(vec![1, d], pooled.into_iter().map(|v| v / n).collect());
    Ok(gemm(&pooled, &model.head_w)?
        .add_row_vector(&model.head_b)?
        .reshape(&[model.config.classes])?)
}

/// Logits and requested taps for one image.
pub fn model_forward(
    image: &Tensor,
    model: &ViTModel,
    quant: Option<&QuantizedModel>,
    filter: &TapFilter,
) -> Result<(Tensor, Vec<ActivationTap>)> {
    let out = forward_full(image, model, quant, filter, false)?;
    Ok((out.logits, out.taps))
}

pub fn save_checkpoint(model: &ViTModel, path: &Path) -> Result<()> {
    let header = serde_json::json!({ "config": model.config });
    let tensors: Vec<(String, &Tensor)> = model.named();
    storage::save(path, CHECKPOINT_FORMAT, header, &tensors)
}

pub fn load_checkpoint(path: &Path) -> Result<ViTModel> {
    let mut loaded = storage::load(path, CHECKPOINT_FORMAT)?;
    let config: ViTConfig = serde_json::from_value(loaded.header["config"].clone()).map_err(|e| {
        Error::Manifest {
            path: path.to_path_buf(),
            detail: format!("config: {e}"),
        }
    })?;
    config.validate()?;
    let mut values = Vec::new();
    for (name, shape) in ViTModel::expected_shapes(&config) {
        values.push(loaded.take(&name, &shape)?);
    }
    if let Some((extra, _)) = loaded.tensors.first() {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            detail: format!("unexpected tensor `{extra}`"),
        });
    }
    let mut model = ViTModel::init(config, 0)?;
    for ((_, slot), value) in model.named_mut().into_iter().zip(values) {
        *slot = value;
    }
    Ok(model)
}
