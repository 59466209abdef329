//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes live in an arena in creation order, so reverse iteration is a
//! reverse topological order and every node is visited once.
//!
//! Quantizer nodes use straight-through estimators: rounding has derivative
//! one, clamping passes gradient only inside `[0, 2^k - 1]`, and trainable
//! activation scales get the LSQ rule `(q - z) - x/s` inside the range and
//! `q - z` at the clamped ends.
//!
//! A graph can also be built in *linearized* mode from the anchors of a
//! previous build. Every rounding then evaluates to its straight-through
//! linearization around the anchor point, and clamp/saturation masks are
//! frozen. The forward value of such a graph is the function whose exact
//! derivative the estimator claims, so central differences over it audit the
//! backward pass (see [`gradcheck`]).

use crate::error::{Error, Result};
use crate::quant::{Log2Params, OutlierConfig};
use crate::tensor::{gemm, gemm_nt, gemm_tn, normal_cdf, normal_pdf, row_moments, softmax_in_place, Tensor};

/// Rectified-sigmoid stretch bounds.
pub const ZETA: f64 = 1.1;
pub const GAMMA: f64 = -0.1;
/// Floor applied to trainable scales.
pub const SCALE_FLOOR: f64 = 1e-12;
/// Probability floor inside the KL loss.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Grouping of a trainable activation scale over a 2-D input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleGroups {
    PerTensor,
    /// Row `r` uses scale `r % groups`.
    PerRow,
    PerColumn,
}

/// Rectified sigmoid `clamp(σ(v)(ζ - γ) + γ, 0, 1)`.
pub fn rectified_sigmoid(v: f64) -> f64 {
    (sigmoid(v) * (ZETA - GAMMA) + GAMMA).clamp(0.0, 1.0)
}

/// Derivative of [`rectified_sigmoid`]; zero where the clamp is active.
pub fn rectified_sigmoid_grad(v: f64) -> f64 {
    let s = sigmoid(v);
    let raw = s * (ZETA - GAMMA) + GAMMA;
    if raw <= 0.0 || raw >= 1.0 {
        0.0
    } else {
        s * (1.0 - s) * (ZETA - GAMMA)
    }
}

/// Inverse of the unclamped rectified sigmoid for `h` in `(0, 1)`.
pub fn rectified_sigmoid_inverse(h: f64) -> f64 {
    let s = (h - GAMMA) / (ZETA - GAMMA);
    (s / (1.0 - s)).ln()
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Frozen per-element state of one quantizer node.
#[derive(Debug, Clone, PartialEq)]
pub enum Anchor {
    Uniform {
        /// Rounded value `round(x/s)` at the anchor.
        rounded: Vec<f64>,
        /// Unrounded `x/s` at the anchor.
        ratio: Vec<f64>,
        inside: Vec<bool>,
    },
    Log2 {
        x0: Vec<f64>,
        y0: Vec<f64>,
        saturated: Vec<bool>,
    },
}

/// Anchors of every quantizer node, in creation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Anchors(Vec<Anchor>);

#[derive(Debug, Clone)]
struct UniformState {
    /// `round(x/s) - x/s` for inside elements (LSQ scale gradient), else 0.
    residual: Vec<f64>,
    /// Clamped code minus zero point, for outside elements.
    clamped: Vec<f64>,
    /// 0 = inside, 1 = clamped, 2 = outlier pass-through.
    class: Vec<u8>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRowVector(Var, Var),
    AddPeriodicRows(Var, Var),
    Scale(Var, f64),
    SliceCols(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    SoftmaxRows(Var),
    AttnScores {
        q: Var,
        k: Var,
        batch: usize,
        heads: usize,
        scale: f64,
    },
    AttnApply {
        p: Var,
        v: Var,
        batch: usize,
        heads: usize,
    },
    MeanPoolRows {
        x: Var,
        group: usize,
    },
    FakeQuantUniform {
        x: Var,
        scale: Var,
        groups: ScaleGroups,
        state: UniformState,
    },
    FakeQuantLog2 {
        x: Var,
        pass: Vec<bool>,
    },
    SoftWeight {
        v: Var,
        /// `s · dh/dv` where the clamp is inactive, else 0.
        dv: Vec<f64>,
    },
    Sum(Var),
    SumSqDiff {
        x: Var,
        target: Tensor,
    },
    KlRows {
        p_ref: Tensor,
        q: Var,
    },
    RoundReg {
        v: Var,
        beta: f64,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    trainable: bool,
    needs_grad: bool,
}

/// Computation graph. Build it, then call [`Graph::backward`] on a scalar.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    recorded: Vec<Anchor>,
    replay: Option<Anchors>,
    quant_nodes: usize,
    fingerprint: u64,
}

/// Gradients of the trainable leaves.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn fnv(h: u64, x: u64) -> u64 {
    (h ^ x).wrapping_mul(0x100_0000_01b3)
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            fingerprint: 0xcbf2_9ce4_8422_2325,
            ..Default::default()
        }
    }

    /// Graph whose quantizer nodes evaluate the straight-through surrogate
    /// linearized at `anchors`.
    pub fn linearized(anchors: Anchors) -> Self {
        Graph {
            replay: Some(anchors),
            ..Graph::new()
        }
    }

    /// Anchors recorded by the quantizer nodes of this graph.
    pub fn anchors(&self) -> Anchors {
        Anchors(self.recorded.clone())
    }

    /// Hash of every discrete branch taken (outlier membership, clamp states
    /// of soft weights, probability floors). Two evaluations with the same
    /// fingerprint lie on the same smooth piece.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    fn mark(&mut self, bits: impl IntoIterator<Item = bool>) {
        let mut h = self.fingerprint;
        let mut word = 0u64;
        let mut n = 0;
        for b in bits {
            word = (word << 1) | b as u64;
            n += 1;
            if n == 64 {
                h = fnv(h, word);
                word = 0;
                n = 0;
            }
        }
        self.fingerprint = fnv(fnv(h, word), n);
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            trainable: false,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            trainable,
            needs_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = gemm(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// `x[m×p] + b[p]` broadcast over rows.
    pub fn add_row_vector(&mut self, x: Var, b: Var) -> Result<Var> {
        let out = self.value(x).add_row_vector(self.value(b))?;
        Ok(self.push(out, Op::AddRowVector(x, b), &[x, b]))
    }

    /// `x[(B·n)×d] + pos[n×d]`, `pos` repeated for every group of `n` rows.
    pub fn add_periodic_rows(&mut self, x: Var, pos: Var) -> Result<Var> {
        let (xv, pv) = (self.value(x), self.value(pos));
        let (n, d) = pv.dims2("add_periodic_rows")?;
        if xv.last_dim() != d || xv.rows() % n != 0 {
            return Err(Error::dim(
                "add_periodic_rows",
                format!("{:?} + {:?}", xv.shape(), pv.shape()),
            ));
        }
        let mut out = xv.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += pv.data()[i % (n * d)];
        }
        Ok(self.push(out, Op::AddPeriodicRows(x, pos), &[x, pos]))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).scale(k);
        self.push(out, Op::Scale(x, k), &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_cols(start, len)?;
        Ok(self.push(out, Op::SliceCols(x, start), &[x]))
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.numel() != d || b.numel() != d {
            return Err(Error::dim("layernorm", "affine size differs from last axis"));
        }
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for row in xhat.data_mut().chunks_mut(d) {
            let (mean, is) = row_moments(row, eps);
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let mut out = xhat.clone();
        for row in out.data_mut().chunks_mut(d) {
            for ((v, gg), bb) in row.iter_mut().zip(g.data()).zip(b.data()) {
                *v = *v * gg + bb;
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = crate::tensor::gelu(self.value(x));
        self.push(out, Op::Gelu(x), &[x])
    }

    /// Softmax along the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let c = out.last_dim();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(out, Op::SoftmaxRows(x), &[x])
    }

    /// Scaled per-head scores for a stacked batch. `q`, `k` are `[(B·n)×d]`;
    /// the output is `[(B·H·n)×n]` with row `(b·H + h)·n + i`.
    pub fn attn_scores(&mut self, q: Var, k: Var, batch: usize, heads: usize, scale: f64) -> Result<Var> {
        let (qv, kv) = (self.value(q), self.value(k));
        let (rows, d) = qv.dims2("attn_scores")?;
        if kv.shape() != qv.shape() || rows % batch != 0 || d % heads != 0 {
            return Err(Error::dim("attn_scores", format!("{:?}", qv.shape())));
        }
        let n = rows / batch;
        let dh = d / heads;
        let mut out = vec![0.0; batch * heads * n * n];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..n {
                    let qrow = &qv.row(b * n + i)[h * dh..(h + 1) * dh];
                    let orow = &mut out[((b * heads + h) * n + i) * n..][..n];
                    for (j, o) in orow.iter_mut().enumerate() {
                        let krow = &kv.row(b * n + j)[h * dh..(h + 1) * dh];
                        *o = scale * qrow.iter().zip(krow).map(|(a, c)| a * c).sum::<f64>();
                    }
                }
            }
        }
        let out = Tensor::from_raw(vec![batch * heads * n, n], out);
        Ok(self.push(
            out,
            Op::AttnScores {
                q,
                k,
                batch,
                heads,
                scale,
            },
            &[q, k],
        ))
    }

    /// Per-head `P · V` for a stacked batch, heads concatenated along columns.
    pub fn attn_apply(&mut self, p: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        let (pv, vv) = (self.value(p), self.value(v));
        let (rows, d) = vv.dims2("attn_apply")?;
        let n = rows / batch;
        if pv.shape() != [batch * heads * n, n] || d % heads != 0 {
            return Err(Error::dim(
                "attn_apply",
                format!("{:?} x {:?}", pv.shape(), vv.shape()),
            ));
        }
        let dh = d / heads;
        let mut out = vec![0.0; rows * d];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..n {
                    let prow = pv.row((b * heads + h) * n + i);
                    let orow = &mut out[(b * n + i) * d + h * dh..][..dh];
                    for (j, &pj) in prow.iter().enumerate() {
                        let vrow = &vv.row(b * n + j)[h * dh..(h + 1) * dh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += pj * x;
                        }
                    }
                }
            }
        }
        let out = Tensor::from_raw(vec![rows, d], out);
        Ok(self.push(out, Op::AttnApply { p, v, batch, heads }, &[p, v]))
    }

    /// Mean over consecutive groups of `group` rows: `[(B·n)×d] → [B×d]`.
    pub fn mean_pool_rows(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = xv.dims2("mean_pool_rows")?;
        if group == 0 || rows % group != 0 {
            return Err(Error::dim("mean_pool_rows", format!("{rows} rows in groups of {group}")));
        }
        let b = rows / group;
        let mut out = vec![0.0; b * d];
        for r in 0..rows {
            for (o, v) in out[(r / group) * d..][..d].iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= group as f64;
        }
        Ok(self.push(Tensor::from_raw(vec![b, d], out), Op::MeanPoolRows { x, group }, &[x]))
    }

    fn next_anchor(&mut self) -> Option<Anchor> {
        let idx = self.quant_nodes;
        self.quant_nodes += 1;
        self.replay.as_ref().and_then(|a| a.0.get(idx).cloned())
    }

    /// Uniform fake quantization with a (possibly trainable) scale node and
    /// fixed zero points. With `outlier`, entries classified as outliers pass
    /// through at full precision.
    pub fn fake_quant_uniform(
        &mut self,
        x: Var,
        scale: Var,
        zeros: &[i64],
        qmax: u32,
        groups: ScaleGroups,
        outlier: Option<OutlierConfig>,
    ) -> Result<Var> {
        let anchor = self.next_anchor();
        let xv = self.value(x);
        let sv = self.value(scale);
        let c = xv.last_dim();
        let ng = sv.numel();
        let ok = zeros.len() == ng
            && match groups {
                ScaleGroups::PerTensor => ng == 1,
                ScaleGroups::PerRow => xv.rows() % ng == 0,
                ScaleGroups::PerColumn => c == ng,
            };
        if !ok {
            return Err(Error::dim(
                "fake_quant_uniform",
                format!("{ng} scales for input {:?}", xv.shape()),
            ));
        }
        let qmax = qmax as f64;
        let numel = xv.numel();
        let mut out = vec![0.0; numel];
        let mut state = UniformState {
            residual: vec![0.0; numel],
            clamped: vec![0.0; numel],
            class: vec![0; numel],
        };
        let mut rounded = vec![0.0; numel];
        let mut ratio = vec![0.0; numel];
        let mut inside_v = vec![true; numel];
        let mut outlier_bits = Vec::new();
        for (i, &xi) in xv.data().iter().enumerate() {
            let g = match groups {
                ScaleGroups::PerTensor => 0,
                ScaleGroups::PerRow => (i / c) % ng,
                ScaleGroups::PerColumn => i % c,
            };
            if let Some(cfg) = &outlier {
                let is_out = cfg.is_outlier(xi);
                outlier_bits.push(is_out);
                if is_out {
                    out[i] = xi;
                    state.class[i] = 2;
                    continue;
                }
            }
            let s = sv.data()[g].max(SCALE_FLOOR);
            let z = zeros[g] as f64;
            let t = xi / s;
            let (r, inside) = match &anchor {
                Some(Anchor::Uniform {
                    rounded: r0,
                    ratio: t0,
                    inside: in0,
                }) => (r0[i] + (t - t0[i]), in0[i]),
                _ => {
                    let r = t.round_ties_even();
                    (r, (0.0..=qmax).contains(&(r + z)))
                }
            };
            rounded[i] = r;
            ratio[i] = t;
            inside_v[i] = inside;
            if inside {
                out[i] = s * r;
                state.residual[i] = r - t;
            } else {
                let q = if r + z < 0.0 { 0.0 } else { qmax };
                out[i] = s * (q - z);
                state.clamped[i] = q - z;
                state.class[i] = 1;
            }
        }
        if self.replay.is_none() {
            self.recorded.push(Anchor::Uniform {
                rounded,
                ratio,
                inside: inside_v,
            });
        }
        if !outlier_bits.is_empty() {
            self.mark(outlier_bits);
        }
        let out = Tensor::from_raw(self.value(x).shape().to_vec(), out);
        Ok(self.push(
            out,
            Op::FakeQuantUniform {
                x,
                scale,
                groups,
                state,
            },
            &[x, scale],
        ))
    }

    /// Log2 (or shifted log2) fake quantization with fixed params; the
    /// straight-through gradient is one except where the code saturates.
    pub fn fake_quant_log2(&mut self, x: Var, params: &Log2Params) -> Var {
        let anchor = self.next_anchor();
        let xv = self.value(x);
        let (out, pass): (Vec<f64>, Vec<bool>) = match &anchor {
            Some(Anchor::Log2 { x0, y0, saturated }) => xv
                .data()
                .iter()
                .enumerate()
                .map(|(i, &xi)| {
                    if saturated[i] {
                        (y0[i], false)
                    } else {
                        (y0[i] + (xi - x0[i]), true)
                    }
                })
                .unzip(),
            _ => xv
                .data()
                .iter()
                .map(|&xi| (params.decode(params.encode(xi)), !params.saturates(xi)))
                .unzip(),
        };
        let x0 = xv.data().to_vec();
        let shape = xv.shape().to_vec();
        if self.replay.is_none() {
            self.recorded.push(Anchor::Log2 {
                x0,
                y0: out.clone(),
                saturated: pass.iter().map(|p| !p).collect(),
            });
        }
        let out = Tensor::from_raw(shape, out);
        self.push(out, Op::FakeQuantLog2 { x, pass }, &[x])
    }

    /// AdaRound soft weight `s·(clamp(floor(w/s) + z + h(v), 0, qmax) - z)`
    /// with per-column `scales`/`zeros`. Without zero points pass zeros.
    pub fn soft_weight(
        &mut self,
        w: &Tensor,
        scales: &[f64],
        zeros: &[i64],
        qmax: u32,
        v: Var,
    ) -> Result<Var> {
        let vv = self.value(v);
        if vv.shape() != w.shape() {
            return Err(Error::dim(
                "soft_weight",
                format!("v {:?} vs w {:?}", vv.shape(), w.shape()),
            ));
        }
        let c = w.last_dim();
        if scales.len() != c || zeros.len() != c {
            return Err(Error::dim("soft_weight", "per-channel params must match columns"));
        }
        let qmax = qmax as f64;
        let mut out = vec![0.0; w.numel()];
        let mut dv = vec![0.0; w.numel()];
        let mut bits = Vec::with_capacity(2 * w.numel());
        for (i, (&wi, &vi)) in w.data().iter().zip(vv.data()).enumerate() {
            let (s, z) = (scales[i % c], zeros[i % c] as f64);
            let h = rectified_sigmoid(vi);
            let dh = rectified_sigmoid_grad(vi);
            let pre = (wi / s).floor() + z + h;
            let inside = (0.0..=qmax).contains(&pre);
            out[i] = s * (pre.clamp(0.0, qmax) - z);
            dv[i] = if inside { s * dh } else { 0.0 };
            bits.push(inside);
            bits.push(dh != 0.0);
        }
        self.mark(bits);
        let out = Tensor::from_raw(w.shape().to_vec(), out);
        Ok(self.push(out, Op::SoftWeight { v, dv }, &[v]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    /// `‖target - x‖²` summed over all elements.
    pub fn sum_sq_diff(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != target.shape() {
            return Err(Error::dim(
                "sum_sq_diff",
                format!("{:?} vs {:?}", xv.shape(), target.shape()),
            ));
        }
        let total = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(self.push(
            Tensor::scalar(total),
            Op::SumSqDiff {
                x,
                target: target.clone(),
            },
            &[x],
        ))
    }

    /// Mean over rows of `KL(p_ref ‖ q̃)`, where `q̃` is `q` floored at
    /// [`PROB_FLOOR`] and renormalised per row.
    pub fn kl_rows(&mut self, p_ref: &Tensor, q: Var) -> Result<Var> {
        let qv = self.value(q);
        if qv.shape() != p_ref.shape() {
            return Err(Error::dim(
                "kl_rows",
                format!("{:?} vs {:?}", qv.shape(), p_ref.shape()),
            ));
        }
        let rows = qv.rows();
        let mut total = 0.0;
        let mut bits = Vec::with_capacity(qv.numel());
        for r in 0..rows {
            let (p, qr) = (p_ref.row(r), qv.row(r));
            let mass: f64 = qr.iter().map(|v| v.max(PROB_FLOOR)).sum();
            for (&pj, &qj) in p.iter().zip(qr) {
                bits.push(qj >= PROB_FLOOR);
                if pj > 0.0 {
                    let qn = qj.max(PROB_FLOOR) / mass;
                    total += pj * (pj.max(PROB_FLOOR).ln() - qn.ln());
                }
            }
        }
        self.mark(bits);
        Ok(self.push(
            Tensor::scalar(total / rows as f64),
            Op::KlRows {
                p_ref: p_ref.clone(),
                q,
            },
            &[q],
        ))
    }

    /// `Σ 1 - |2h(v) - 1|^β`.
    pub fn round_reg(&mut self, v: Var, beta: f64) -> Result<Var> {
        if !(beta > 0.0) {
            return Err(Error::Precondition(format!("beta must be positive, got {beta}")));
        }
        let total = self
            .value(v)
            .data()
            .iter()
            .map(|&vi| 1.0 - (2.0 * rectified_sigmoid(vi) - 1.0).abs().powf(beta))
            .sum();
        Ok(self.push(Tensor::scalar(total), Op::RoundReg { v, beta }, &[v]))
    }

    /// Mean softmax cross-entropy of `[B×C]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (b, c) = lv.dims2("cross_entropy")?;
        if labels.len() != b || labels.iter().any(|&l| l >= c) {
            return Err(Error::dim("cross_entropy", "labels do not match logits"));
        }
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        Ok(self.push(
            Tensor::scalar(total / b as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for the
    /// trainable leaves only.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Precondition(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.trainable {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let ga = gemm_nt(g, self.value(*b))?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.needs(*b) {
                    let gb = gemm_tn(self.value(*a), g)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::AddRowVector(x, b) => {
                self.accumulate(grads, *x, g.clone())?;
                if self.needs(*b) {
                    let c = g.last_dim();
                    let mut gb = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    let shape = self.value(*b).shape().to_vec();
                    self.accumulate(grads, *b, Tensor::from_raw(shape, gb))?;
                }
            }
            Op::AddPeriodicRows(x, pos) => {
                self.accumulate(grads, *x, g.clone())?;
                if self.needs(*pos) {
                    let shape = self.value(*pos).shape().to_vec();
                    let period = shape.iter().product::<usize>();
                    let mut gp = vec![0.0; period];
                    for (i, v) in g.data().iter().enumerate() {
                        gp[i % period] += v;
                    }
                    self.accumulate(grads, *pos, Tensor::from_raw(shape, gp))?;
                }
            }
            Op::Scale(x, k) => self.accumulate(grads, *x, g.scale(*k))?,
            Op::SliceCols(x, start) => {
                let shape = self.value(*x).shape().to_vec();
                let c = shape[shape.len() - 1];
                let len = g.last_dim();
                let mut gx = vec![0.0; shape.iter().product()];
                for r in 0..g.rows() {
                    gx[r * c + start..r * c + start + len].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, Tensor::from_raw(shape, gx))?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = xhat.last_dim();
                let gam = self.value(*gamma).data();
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut gg = vec![0.0; d];
                    let mut gb = vec![0.0; d];
                    for (grow, xrow) in g.data().chunks(d).zip(xhat.data().chunks(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * xrow[j];
                            gb[j] += grow[j];
                        }
                    }
                    let gs = self.value(*gamma).shape().to_vec();
                    let bs = self.value(*beta).shape().to_vec();
                    self.accumulate(grads, *gamma, Tensor::from_raw(gs, gg))?;
                    self.accumulate(grads, *beta, Tensor::from_raw(bs, gb))?;
                }
                if self.needs(*x) {
                    let mut gx = vec![0.0; xhat.numel()];
                    let nd = d as f64;
                    for r in 0..xhat.rows() {
                        let grow = g.row(r);
                        let xrow = xhat.row(r);
                        let dxhat: Vec<f64> = grow.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(xrow).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gx[r * d + j] =
                                inv_std[r] / nd * (nd * dxhat[j] - sum_d - xrow[j] * sum_dx);
                        }
                    }
                    let shape = xhat.shape().to_vec();
                    self.accumulate(grads, *x, Tensor::from_raw(shape, gx))?;
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let gx = xv.zip_map(g, |v, gv| gv * (normal_cdf(v) + v * normal_pdf(v)))?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let c = y.last_dim();
                let mut gx = vec![0.0; y.numel()];
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[r * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_raw(y.shape().to_vec(), gx))?;
            }
            Op::AttnScores {
                q,
                k,
                batch,
                heads,
                scale,
            } => {
                let (qv, kv) = (self.value(*q), self.value(*k));
                let (rows, d) = (qv.rows(), qv.last_dim());
                let n = rows / batch;
                let dh = d / heads;
                let mut gq = vec![0.0; rows * d];
                let mut gk = vec![0.0; rows * d];
                for b in 0..*batch {
                    for h in 0..*heads {
                        for i in 0..n {
                            let grow = g.row((b * heads + h) * n + i);
                            let qi = b * n + i;
                            for (j, &gij) in grow.iter().enumerate() {
                                if gij == 0.0 {
                                    continue;
                                }
                                let kj = b * n + j;
                                let gs = gij * scale;
                                for t in h * dh..(h + 1) * dh {
                                    gq[qi * d + t] += gs * kv.data()[kj * d + t];
                                    gk[kj * d + t] += gs * qv.data()[qi * d + t];
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, Tensor::from_raw(vec![rows, d], gq))?;
                self.accumulate(grads, *k, Tensor::from_raw(vec![rows, d], gk))?;
            }
            Op::AttnApply { p, v, batch, heads } => {
                let (pv, vv) = (self.value(*p), self.value(*v));
                let (rows, d) = (vv.rows(), vv.last_dim());
                let n = rows / batch;
                let dh = d / heads;
                let mut gp = vec![0.0; pv.numel()];
                let mut gv = vec![0.0; rows * d];
                for b in 0..*batch {
                    for h in 0..*heads {
                        for i in 0..n {
                            let prow_idx = (b * heads + h) * n + i;
                            let grow = &g.row(b * n + i)[h * dh..(h + 1) * dh];
                            for j in 0..n {
                                let vrow = &vv.row(b * n + j)[h * dh..(h + 1) * dh];
                                gp[prow_idx * n + j] =
                                    grow.iter().zip(vrow).map(|(a, c)| a * c).sum();
                                let pij = pv.data()[prow_idx * n + j];
                                let gvrow = &mut gv[(b * n + j) * d + h * dh..][..dh];
                                for (o, gg) in gvrow.iter_mut().zip(grow) {
                                    *o += pij * gg;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *p, Tensor::from_raw(pv.shape().to_vec(), gp))?;
                self.accumulate(grads, *v, Tensor::from_raw(vec![rows, d], gv))?;
            }
            Op::MeanPoolRows { x, group } => {
                let shape = self.value(*x).shape().to_vec();
                let d = shape[1];
                let mut gx = vec![0.0; shape[0] * d];
                for r in 0..shape[0] {
                    for (o, v) in gx[r * d..(r + 1) * d].iter_mut().zip(g.row(r / group)) {
                        *o = v / *group as f64;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_raw(shape, gx))?;
            }
            Op::FakeQuantUniform {
                x,
                scale,
                groups,
                state,
            } => {
                let xv = self.value(*x);
                let c = xv.last_dim();
                if self.needs(*x) {
                    let gx = g
                        .data()
                        .iter()
                        .zip(&state.class)
                        .map(|(gv, &cl)| if cl == 1 { 0.0 } else { *gv })
                        .collect();
                    self.accumulate(grads, *x, Tensor::from_raw(xv.shape().to_vec(), gx))?;
                }
                if self.needs(*scale) {
                    let ng = self.value(*scale).numel();
                    let mut gs = vec![0.0; ng];
                    for (i, gv) in g.data().iter().enumerate() {
                        let grp = match groups {
                            ScaleGroups::PerTensor => 0,
                            ScaleGroups::PerRow => (i / c) % ng,
                            ScaleGroups::PerColumn => i % c,
                        };
                        gs[grp] += gv
                            * match state.class[i] {
                                0 => state.residual[i],
                                1 => state.clamped[i],
                                _ => 0.0,
                            };
                    }
                    let shape = self.value(*scale).shape().to_vec();
                    self.accumulate(grads, *scale, Tensor::from_raw(shape, gs))?;
                }
            }
            Op::FakeQuantLog2 { x, pass } => {
                let gx = g
                    .data()
                    .iter()
                    .zip(pass)
                    .map(|(gv, &p)| if p { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_raw(g.shape().to_vec(), gx))?;
            }
            Op::SoftWeight { v, dv } => {
                let gv = g.data().iter().zip(dv).map(|(a, b)| a * b).collect();
                self.accumulate(grads, *v, Tensor::from_raw(g.shape().to_vec(), gv))?;
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, g.data()[0]))?;
            }
            Op::SumSqDiff { x, target } => {
                let g0 = g.data()[0];
                let gx = self.value(*x).zip_map(target, |a, b| 2.0 * (a - b) * g0)?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::KlRows { p_ref, q } => {
                let qv = self.value(*q);
                let c = qv.last_dim();
                let rows = qv.rows();
                let g0 = g.data()[0] / rows as f64;
                let mut gq = vec![0.0; qv.numel()];
                for r in 0..rows {
                    let (p, qr) = (p_ref.row(r), qv.row(r));
                    let mass: f64 = qr.iter().map(|v| v.max(PROB_FLOOR)).sum();
                    let p_mass: f64 = p.iter().filter(|&&v| v > 0.0).sum();
                    for j in 0..c {
                        if qr[j] < PROB_FLOOR {
                            continue;
                        }
                        let own = if p[j] > 0.0 { p[j] / qr[j] } else { 0.0 };
                        gq[r * c + j] = g0 * (p_mass / mass - own);
                    }
                }
                self.accumulate(grads, *q, Tensor::from_raw(qv.shape().to_vec(), gq))?;
            }
            Op::RoundReg { v, beta } => {
                let g0 = g.data()[0];
                let gv = self.value(*v).map(|vi| {
                    let u = 2.0 * rectified_sigmoid(vi) - 1.0;
                    if u == 0.0 {
                        return 0.0;
                    }
                    -g0 * beta * u.abs().powf(beta - 1.0) * u.signum() * 2.0 * rectified_sigmoid_grad(vi)
                });
                self.accumulate(grads, *v, gv)?;
            }
            Op::CrossEntropy { logits, labels } => {
                let lv = self.value(*logits);
                let (b, c) = (lv.rows(), lv.last_dim());
                let g0 = g.data()[0] / b as f64;
                let mut gl = lv.clone();
                for (r, &label) in labels.iter().enumerate() {
                    let row = &mut gl.data_mut()[r * c..(r + 1) * c];
                    softmax_in_place(row);
                    row[label] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= g0;
                    }
                }
                self.accumulate(grads, *logits, gl)?;
            }
        }
        Ok(())
    }
}

pub mod gradcheck {
    //! Central-difference audit of the reverse pass.

    use super::*;
    use crate::rng::Rng;

    #[derive(Debug, Clone)]
    pub struct LeafError {
        pub name: String,
        pub rel_err: f64,
        pub checked: usize,
    }

    #[derive(Debug, Clone)]
    pub struct Report {
        pub leaves: Vec<LeafError>,
    }

    impl Report {
        pub fn max_rel_err(&self) -> f64 {
            self.leaves.iter().map(|l| l.rel_err).fold(0.0, f64::max)
        }
    }

    /// Outcome of one audit: `None` when a perturbation crossed a branch
    /// boundary (outlier threshold, soft-weight clamp, probability floor),
    /// in which case the caller redraws the sample point.
    pub type Outcome = Option<Report>;

    /// Compares analytic gradients of `build`'s scalar output against central
    /// differences of the (linearized) forward for every trainable leaf.
    ///
    /// Per leaf the error is `‖g_analytic - g_fd‖∞ / max(‖g_analytic‖∞, ‖g_fd‖∞)`
    /// over at most `max_entries` sampled coordinates.
    pub fn check<F>(leaves: &[(String, Tensor)], build: F, step: f64, max_entries: usize, seed: u64) -> Result<Outcome>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|(_, t)| g.leaf(t.clone(), true)).collect();
        let loss = build(&mut g, &vars)?;
        let grads = g.backward(loss)?;
        let anchors = g.anchors();
        let base_print = g.fingerprint();

        let eval = |values: &[Tensor]| -> Result<(f64, u64)> {
            let mut g = Graph::linearized(anchors.clone());
            let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), true)).collect();
            let loss = build(&mut g, &vars)?;
            Ok((g.scalar_value(loss), g.fingerprint()))
        };

        let mut rng = Rng::new(seed);
        let mut values: Vec<Tensor> = leaves.iter().map(|(_, t)| t.clone()).collect();
        let mut report = Vec::new();
        for (li, (name, t)) in leaves.iter().enumerate() {
            let analytic = grads
                .get(vars[li])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()));
            let idx = if t.numel() <= max_entries {
                (0..t.numel()).collect()
            } else {
                rng.sample_indices(t.numel(), max_entries)
            };
            let (mut max_diff, mut max_a, mut max_n) = (0.0f64, 0.0f64, 0.0f64);
            for &i in &idx {
                let x0 = t.data()[i];
                let h = step * x0.abs().max(1.0);
                values[li].data_mut()[i] = x0 + h;
                let (fp, pp) = eval(&values)?;
                values[li].data_mut()[i] = x0 - h;
                let (fm, pm) = eval(&values)?;
                values[li].data_mut()[i] = x0;
                if pp != base_print || pm != base_print {
                    return Ok(None);
                }
                let numeric = (fp - fm) / (2.0 * h);
                let a = analytic.data()[i];
                max_diff = max_diff.max((a - numeric).abs());
                max_a = max_a.max(a.abs());
                max_n = max_n.max(numeric.abs());
            }
            let denom = max_a.max(max_n);
            let rel_err = if denom == 0.0 { 0.0 } else { max_diff / denom };
            report.push(LeafError {
                name: name.clone(),
                rel_err,
                checked: idx.len(),
            });
        }
        Ok(Some(Report { leaves: report }))
    }
}
