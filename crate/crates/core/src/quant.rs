//! Quantizer math: the uniform quantizer at tensor, channel and patch
//! granularity, the log2 quantizer, the shifted log2 quantizer for post-GELU
//! activations, and the outlier split used by the outlier-aware linear layer.
//!
//! Rounding to nearest is round-half-to-even everywhere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, reduce_minmax, spmm, Reduction, SparseOutlierMatrix, Tensor};

/// Default epsilon for the shifted log2 quantizer.
pub const SHIFT_LOG2_EPS: f64 = 1e-8;

/// Round to nearest, ties to even.
#[inline]
pub fn round_half_even(x: f64) -> f64 {
    x.round_ties_even()
}

/// Quantizer bit width, `2 ≤ k ≤ 8`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct BitWidth(u32);

impl BitWidth {
    pub fn new(k: u32) -> Result<Self> {
        if (2..=8).contains(&k) {
            Ok(BitWidth(k))
        } else {
            Err(Error::Config(format!("bit width {k} outside [2, 8]")))
        }
    }

    pub fn bits(self) -> u32 {
        self.0
    }

    /// Largest code, `2^k - 1`.
    pub fn qmax(self) -> u32 {
        (1 << self.0) - 1
    }
}

impl TryFrom<u32> for BitWidth {
    type Error = Error;
    fn try_from(k: u32) -> Result<Self> {
        BitWidth::new(k)
    }
}

impl From<BitWidth> for u32 {
    fn from(b: BitWidth) -> u32 {
        b.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    /// One group per column (output channel of an `x · W` weight).
    PerChannel,
    /// One group per row (patch/token). Stacked batches map row `r` to group `r % groups`.
    PerPatch,
}

impl Granularity {
    fn reduction(self) -> Reduction {
        match self {
            Granularity::PerTensor => Reduction::Tensor,
            Granularity::PerChannel => Reduction::Column,
            Granularity::PerPatch => Reduction::Row,
        }
    }
}

/// Scale/zero-point state of a uniform quantizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformParams {
    pub bits: BitWidth,
    pub granularity: Granularity,
    pub scales: Vec<f64>,
    pub zeros: Vec<i64>,
}

impl UniformParams {
    pub fn new(
        bits: BitWidth,
        granularity: Granularity,
        scales: Vec<f64>,
        zeros: Vec<i64>,
    ) -> Result<Self> {
        if scales.is_empty() || scales.len() != zeros.len() {
            return Err(Error::Precondition(format!(
                "{} scales vs {} zero points",
                scales.len(),
                zeros.len()
            )));
        }
        if granularity == Granularity::PerTensor && scales.len() != 1 {
            return Err(Error::Precondition("per-tensor params need one group".into()));
        }
        if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Domain(format!("scale must be positive, got {s}")));
        }
        Ok(UniformParams {
            bits,
            granularity,
            scales,
            zeros,
        })
    }

    /// Min-max calibration per group. A degenerate group (`max == min`)
    /// falls back to `s = 1`, `z = round(-min)`.
    pub fn from_minmax(
        mins: &[f64],
        maxs: &[f64],
        bits: BitWidth,
        granularity: Granularity,
    ) -> Result<Self> {
        if mins.len() != maxs.len() {
            return Err(Error::Precondition("min/max group counts differ".into()));
        }
        let qmax = bits.qmax() as f64;
        let mut scales = Vec::with_capacity(mins.len());
        let mut zeros = Vec::with_capacity(mins.len());
        for (&lo, &hi) in mins.iter().zip(maxs) {
            if lo > hi {
                return Err(Error::Precondition(format!("min {lo} > max {hi}")));
            }
            let s = (hi - lo) / qmax;
            if hi == lo || s <= 0.0 {
                scales.push(1.0);
                zeros.push(round_half_even(-lo) as i64);
            } else {
                scales.push(s);
                zeros.push(round_half_even(-lo / s) as i64);
            }
        }
        UniformParams::new(bits, granularity, scales, zeros)
    }

    pub fn groups(&self) -> usize {
        self.scales.len()
    }

    /// Rounds every scale to the nearest binary32 value so the params survive
    /// the on-disk blob encoding unchanged.
    pub fn snapped_to_f32(mut self) -> Self {
        for s in &mut self.scales {
            let snapped = *s as f32 as f64;
            *s = if snapped > 0.0 { snapped } else { f32::MIN_POSITIVE as f64 };
        }
        self
    }

    /// Checks the params can be applied to a tensor of `shape`.
    pub fn check_shape(&self, shape: &[usize]) -> Result<()> {
        let cols = *shape.last().unwrap_or(&0);
        let rows = if cols == 0 { 0 } else { shape.iter().product::<usize>() / cols };
        let ok = match self.granularity {
            Granularity::PerTensor => true,
            Granularity::PerChannel => cols == self.groups(),
            Granularity::PerPatch => rows > 0 && rows % self.groups() == 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::dim(
                "uniform quantizer",
                format!(
                    "{:?} params with {} groups cannot apply to shape {shape:?}",
                    self.granularity,
                    self.groups()
                ),
            ))
        }
    }

    #[inline]
    pub(crate) fn group(&self, row: usize, col: usize) -> usize {
        match self.granularity {
            Granularity::PerTensor => 0,
            Granularity::PerChannel => col,
            Granularity::PerPatch => row % self.scales.len(),
        }
    }

    /// Code for one scalar in group `g`.
    #[inline]
    pub fn encode(&self, x: f64, g: usize) -> u32 {
        let q = round_half_even(x / self.scales[g]) + self.zeros[g] as f64;
        q.clamp(0.0, self.bits.qmax() as f64) as u32
    }

    #[inline]
    pub fn decode(&self, code: u32, g: usize) -> f64 {
        self.scales[g] * (code as f64 - self.zeros[g] as f64)
    }
}

/// Integer codes together with the params that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor<P> {
    pub shape: Vec<usize>,
    pub codes: Vec<u32>,
    pub params: P,
}

/// Calibrates a uniform quantizer on `x` by min-max.
pub fn uq_calibrate(x: &Tensor, bits: BitWidth, granularity: Granularity) -> Result<UniformParams> {
    let (mins, maxs) = reduce_minmax(x, granularity.reduction())?;
    UniformParams::from_minmax(&mins, &maxs, bits, granularity)
}

pub fn uq_quantize(x: &Tensor, p: &UniformParams) -> Result<QuantizedTensor<UniformParams>> {
    p.check_shape(x.shape())?;
    let c = x.last_dim();
    let codes = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| p.encode(v, p.group(i / c, i % c)))
        .collect();
    Ok(QuantizedTensor {
        shape: x.shape().to_vec(),
        codes,
        params: p.clone(),
    })
}

pub fn uq_dequantize(q: &QuantizedTensor<UniformParams>) -> Tensor {
    let c = *q.shape.last().expect("non-empty shape");
    let p = &q.params;
    let data = q
        .codes
        .iter()
        .enumerate()
        .map(|(i, &code)| p.decode(code, p.group(i / c, i % c)))
        .collect();
    Tensor::from_raw(q.shape.clone(), data)
}

/// Quantize-then-dequantize in one pass.
pub fn uq_fake(x: &Tensor, p: &UniformParams) -> Result<Tensor> {
    p.check_shape(x.shape())?;
    let c = x.last_dim();
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let g = p.group(i / c, i % c);
        *v = p.decode(p.encode(*v, g), g);
    }
    Ok(out)
}

/// Shift applied by the shifted log2 quantizer: values are mapped to
/// `x - min + epsilon` before the log2 quantizer and shifted back after.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogShift {
    pub min: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Log2Params {
    pub scale: f64,
    pub bits: BitWidth,
    pub shift: Option<LogShift>,
}

impl Log2Params {
    pub fn new(scale: f64, bits: BitWidth, shift: Option<LogShift>) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Domain(format!("log2 scale must be positive, got {scale}")));
        }
        if let Some(sh) = shift {
            if !(sh.epsilon > 0.0) || !sh.min.is_finite() {
                return Err(Error::Domain("shift epsilon must be positive".into()));
            }
        }
        Ok(Log2Params { scale, bits, shift })
    }

    /// Params for the shifted quantizer from the observed range of the data.
    pub fn shifted_from_minmax(min: f64, max: f64, bits: BitWidth, epsilon: f64) -> Result<Self> {
        if min > max {
            return Err(Error::Precondition(format!("min {min} > max {max}")));
        }
        Log2Params::new(max - min + epsilon, bits, Some(LogShift { min, epsilon }))
    }

    pub fn snapped_to_f32(mut self) -> Self {
        self.scale = (self.scale as f32 as f64).max(f32::MIN_POSITIVE as f64);
        self
    }

    /// Value entering the log2 mapping.
    #[inline]
    fn shifted(&self, x: f64) -> f64 {
        match self.shift {
            Some(sh) => x - sh.min + sh.epsilon,
            None => x,
        }
    }

    /// Code for one scalar. Non-positive (shifted) inputs map to the deepest bin.
    #[inline]
    pub fn encode(&self, x: f64) -> u32 {
        let qmax = self.bits.qmax() as f64;
        let xs = self.shifted(x);
        if xs <= 0.0 {
            return self.bits.qmax();
        }
        let q = round_half_even(-(xs / self.scale).log2());
        if q.is_nan() {
            return self.bits.qmax();
        }
        q.clamp(0.0, qmax) as u32
    }

    #[inline]
    pub fn decode(&self, code: u32) -> f64 {
        let base = self.scale * (-(code as f64)).exp2();
        match self.shift {
            Some(sh) => base + sh.min - sh.epsilon,
            None => base,
        }
    }

    /// True when the code is clamped at either end of `[0, 2^k - 1]`.
    #[inline]
    pub fn saturates(&self, x: f64) -> bool {
        let xs = self.shifted(x);
        if xs <= 0.0 {
            return true;
        }
        let q = round_half_even(-(xs / self.scale).log2());
        q < 0.0 || q > self.bits.qmax() as f64
    }

    pub fn fake(&self, x: &Tensor) -> Tensor {
        x.map(|v| self.decode(self.encode(v)))
    }
}

fn log2_codes(x: &Tensor, p: &Log2Params) -> QuantizedTensor<Log2Params> {
    QuantizedTensor {
        shape: x.shape().to_vec(),
        codes: x.data().iter().map(|&v| p.encode(v)).collect(),
        params: p.clone(),
    }
}

/// Log2 quantizer with `s = max(x)`. Requires strictly positive input.
pub fn lq_quantize(x: &Tensor, bits: BitWidth) -> Result<(QuantizedTensor<Log2Params>, Log2Params)> {
    if let Some(v) = x.data().iter().find(|v| **v <= 0.0) {
        return Err(Error::Domain(format!(
            "log2 quantizer needs strictly positive input, found {v}"
        )));
    }
    let s = x.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let params = Log2Params::new(s, bits, None)?;
    Ok((log2_codes(x, &params), params))
}

pub fn lq_dequantize(q: &QuantizedTensor<Log2Params>, p: &Log2Params) -> Tensor {
    Tensor::from_raw(q.shape.clone(), q.codes.iter().map(|&c| p.decode(c)).collect())
}

/// Shifted log2 quantizer: shift by `-min + epsilon`, log2-quantize, and record
/// the shift so dequantization adds `min - epsilon` back.
pub fn shift_log2_quantize(
    x: &Tensor,
    bits: BitWidth,
    epsilon: f64,
) -> Result<(QuantizedTensor<Log2Params>, Log2Params)> {
    if !(epsilon > 0.0) {
        return Err(Error::Domain("epsilon must be positive".into()));
    }
    let (mins, maxs) = reduce_minmax(x, Reduction::Tensor)?;
    let params = Log2Params::shifted_from_minmax(mins[0], maxs[0], bits, epsilon)?;
    Ok((log2_codes(x, &params), params))
}

/// Which entries count as outliers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutlierRule {
    /// `|x| ≥ α`.
    #[default]
    Magnitude,
    /// `x ≥ α`, positive outliers only.
    OneSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierConfig {
    /// Threshold; `+∞` disables the split. Serialized as `null` when infinite.
    #[serde(with = "crate::serde_ext::f64_or_inf")]
    pub alpha: f64,
    #[serde(default)]
    pub rule: OutlierRule,
}

impl OutlierConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        Self::with_rule(alpha, OutlierRule::Magnitude)
    }

    pub fn with_rule(alpha: f64, rule: OutlierRule) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
        }
        Ok(OutlierConfig { alpha, rule })
    }

    pub fn disabled() -> Self {
        OutlierConfig {
            alpha: f64::INFINITY,
            rule: OutlierRule::Magnitude,
        }
    }

    #[inline]
    pub fn is_outlier(&self, x: f64) -> bool {
        match self.rule {
            OutlierRule::Magnitude => x.abs() >= self.alpha,
            OutlierRule::OneSided => x >= self.alpha,
        }
    }
}

/// Splits a 2-D activation into a dense part with the outliers zeroed and a
/// sparse part holding the outliers at full precision.
pub fn outlier_split(x: &Tensor, cfg: &OutlierConfig) -> Result<(Tensor, SparseOutlierMatrix)> {
    let (r, c) = x.dims2("outlier_split")?;
    let mut dense = x.clone();
    let mut entries = Vec::new();
    for (i, v) in dense.data_mut().iter_mut().enumerate() {
        if cfg.is_outlier(*v) {
            entries.push((i / c, i % c, *v));
            *v = 0.0;
        }
    }
    Ok((dense, SparseOutlierMatrix::from_sorted_unchecked(r, c, entries)))
}

/// Fraction of entries that are outliers under `cfg`.
pub fn outlier_ratio(x: &Tensor, cfg: &OutlierConfig) -> f64 {
    let count = x.data().iter().filter(|&&v| cfg.is_outlier(v)).count();
    count as f64 / x.numel() as f64
}

/// Outlier-aware fake quantization: the dense remainder is quantized with
/// `params` (row-grouped), the outliers pass through untouched.
pub fn poq_fake_split(
    x: &Tensor,
    params: &UniformParams,
    cfg: &OutlierConfig,
) -> Result<(Tensor, SparseOutlierMatrix)> {
    let (dense, sparse) = outlier_split(x, cfg)?;
    Ok((uq_fake(&dense, params)?, sparse))
}

/// Linear layer with an outlier-aware quantized input:
/// `Y = Q(M_no) · Ŵ + M_o · Ŵ + b`, evaluated as a dense GEMM plus an SpMM.
pub fn poq_linear_forward(
    x: &Tensor,
    w_quantized: &QuantizedTensor<UniformParams>,
    bias: &Tensor,
    act_params: &UniformParams,
    cfg: &OutlierConfig,
) -> Result<Tensor> {
    if act_params.granularity != Granularity::PerPatch {
        return Err(Error::Precondition(
            "outlier-aware linear expects per-patch activation params".into(),
        ));
    }
    let w_hat = uq_dequantize(w_quantized);
    poq_linear_dequantized(x, &w_hat, bias, act_params, cfg)
}

/// Same as [`poq_linear_forward`] with an already-dequantized weight.
pub fn poq_linear_dequantized(
    x: &Tensor,
    w_hat: &Tensor,
    bias: &Tensor,
    act_params: &UniformParams,
    cfg: &OutlierConfig,
) -> Result<Tensor> {
    let (dense_hat, sparse) = poq_fake_split(x, act_params, cfg)?;
    let mut y = gemm(&dense_hat, w_hat)?;
    if sparse.nnz() > 0 {
        y = y.add(&spmm(&sparse, w_hat)?)?;
    }
    y.add_row_vector(bias)
}

/// Fake quantizer placed at one activation site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActQuant {
    Uniform { params: UniformParams },
    /// Uniform quantizer on the dense remainder, outliers kept at full precision.
    OutlierAware {
        params: UniformParams,
        outlier: OutlierConfig,
    },
    Log2 { params: Log2Params },
}

impl ActQuant {
    /// Quantize-dequantize `x`. Outlier-aware sites return the dense and
    /// outlier parts recombined elementwise.
    pub fn fake(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            ActQuant::Uniform { params } => uq_fake(x, params),
            ActQuant::OutlierAware { params, outlier } => {
                let (dense_hat, sparse) = poq_fake_split(x, params, outlier)?;
                let mut out = dense_hat;
                let c = out.last_dim();
                for &(r, col, v) in sparse.entries() {
                    out.data_mut()[r * c + col] = v;
                }
                Ok(out)
            }
            ActQuant::Log2 { params } => Ok(params.fake(x)),
        }
    }

    /// `Q(x) · w + b`; outlier-aware sites run the dense GEMM plus the SpMM.
    pub fn linear(&self, x: &Tensor, w_hat: &Tensor, bias: &Tensor) -> Result<Tensor> {
        match self {
            ActQuant::OutlierAware { params, outlier } => {
                poq_linear_dequantized(x, w_hat, bias, params, outlier)
            }
            _ => gemm(&self.fake(x)?, w_hat)?.add_row_vector(bias),
        }
    }

    pub fn bits(&self) -> BitWidth {
        match self {
            ActQuant::Uniform { params } | ActQuant::OutlierAware { params, .. } => params.bits,
            ActQuant::Log2 { params } => params.bits,
        }
    }

    pub fn uniform_params(&self) -> Option<&UniformParams> {
        match self {
            ActQuant::Uniform { params } | ActQuant::OutlierAware { params, .. } => Some(params),
            ActQuant::Log2 { .. } => None,
        }
    }

    pub fn uniform_params_mut(&mut self) -> Option<&mut UniformParams> {
        match self {
            ActQuant::Uniform { params } | ActQuant::OutlierAware { params, .. } => Some(params),
            ActQuant::Log2 { .. } => None,
        }
    }

    pub fn outlier(&self) -> Option<&OutlierConfig> {
        match self {
            ActQuant::OutlierAware { outlier, .. } => Some(outlier),
            _ => None,
        }
    }

    /// Short name used in manifests and reports.
    pub fn kind_name(&self) -> &'static str {
        match self {
            ActQuant::Uniform { .. } => "uniform",
            ActQuant::OutlierAware { .. } => "outlier_aware",
            ActQuant::Log2 { params } if params.shift.is_some() => "shift_log2",
            ActQuant::Log2 { .. } => "log2",
        }
    }
}

/// How a weight's fractional part is rounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightRounding {
    /// Round to nearest (half to even).
    Nearest,
    /// Learned, hardened rounding: `floor(w/s) + z + up`, one flag per element.
    Learned { up: Vec<bool> },
}

/// Per-channel uniform weight quantizer with its rounding decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightQuant {
    pub params: UniformParams,
    pub rounding: WeightRounding,
}

impl WeightQuant {
    pub fn nearest(w: &Tensor, bits: BitWidth) -> Result<Self> {
        Ok(WeightQuant {
            params: uq_calibrate(w, bits, Granularity::PerChannel)?.snapped_to_f32(),
            rounding: WeightRounding::Nearest,
        })
    }

    pub fn quantize(&self, w: &Tensor) -> Result<QuantizedTensor<UniformParams>> {
        match &self.rounding {
            WeightRounding::Nearest => uq_quantize(w, &self.params),
            WeightRounding::Learned { up } => {
                self.params.check_shape(w.shape())?;
                if up.len() != w.numel() {
                    return Err(Error::dim(
                        "WeightQuant::quantize",
                        format!("{} rounding flags for {} weights", up.len(), w.numel()),
                    ));
                }
                let p = &self.params;
                let c = w.last_dim();
                let qmax = p.bits.qmax() as f64;
                let codes = w
                    .data()
                    .iter()
                    .zip(up)
                    .enumerate()
                    .map(|(i, (&v, &u))| {
                        let g = p.group(i / c, i % c);
                        let q = (v / p.scales[g]).floor() + p.zeros[g] as f64 + u as u8 as f64;
                        q.clamp(0.0, qmax) as u32
                    })
                    .collect();
                Ok(QuantizedTensor {
                    shape: w.shape().to_vec(),
                    codes,
                    params: p.clone(),
                })
            }
        }
    }

    pub fn dequantize(&self, w: &Tensor) -> Result<Tensor> {
        Ok(uq_dequantize(&self.quantize(w)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn k(b: u32) -> BitWidth {
        BitWidth::new(b).unwrap()
    }

    #[test]
    fn bit_width_bounds() {
        assert!(BitWidth::new(1).is_err());
        assert!(BitWidth::new(9).is_err());
        assert_eq!(k(4).qmax(), 15);
    }

    #[test]
    fn calibrate_examples() {
        let x = Tensor::vector(&[0.0, 1.0, 2.0, 3.0]).unwrap();
        let p = uq_calibrate(&x, k(2), Granularity::PerTensor).unwrap();
        assert_eq!((p.scales[0], p.zeros[0]), (1.0, 0));

        // -min/s evaluates to exactly 127.5; half-to-even picks 128.
        let x = Tensor::vector(&[-1.0, 1.0]).unwrap();
        let p = uq_calibrate(&x, k(8), Granularity::PerTensor).unwrap();
        assert_eq!(p.scales[0], 2.0 / 255.0);
        assert_eq!(1.0 / p.scales[0], 127.5);
        assert_eq!(p.zeros[0], 128);

        let x = Tensor::vector(&[5.0, 5.0]).unwrap();
        for bits in 2..=8 {
            let p = uq_calibrate(&x, k(bits), Granularity::PerTensor).unwrap();
            assert_eq!((p.scales[0], p.zeros[0]), (1.0, -5));
            assert_eq!(uq_fake(&x, &p).unwrap(), x);
        }
    }

    #[test]
    fn quantize_examples() {
        let p = UniformParams::new(k(2), Granularity::PerTensor, vec![1.0], vec![0]).unwrap();
        let x = Tensor::vector(&[0.0, 1.0, 2.0, 3.0]).unwrap();
        let q = uq_quantize(&x, &p).unwrap();
        assert_eq!(q.codes, vec![0, 1, 2, 3]);
        assert_eq!(uq_dequantize(&q), x);
        let q = uq_quantize(&Tensor::vector(&[-10.0]).unwrap(), &p).unwrap();
        assert_eq!(q.codes, vec![0]);

        // Codes all equal to the zero point dequantize to zero.
        let p = UniformParams::new(k(4), Granularity::PerTensor, vec![0.3], vec![7]).unwrap();
        let q = QuantizedTensor {
            shape: vec![3],
            codes: vec![7, 7, 7],
            params: p,
        };
        assert_eq!(uq_dequantize(&q).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn quantize_matches_scalar_oracle() {
        let mut rng = Rng::new(21);
        let x = rng.normal_tensor(&[6, 10], 2.0);
        for gran in [Granularity::PerTensor, Granularity::PerChannel, Granularity::PerPatch] {
            let p = uq_calibrate(&x, k(4), gran).unwrap();
            let q = uq_quantize(&x, &p).unwrap();
            for r in 0..6 {
                for c in 0..10 {
                    let g = match gran {
                        Granularity::PerTensor => 0,
                        Granularity::PerChannel => c,
                        Granularity::PerPatch => r,
                    };
                    let v = x.at2(r, c);
                    let want = ((v / p.scales[g]).round_ties_even() + p.zeros[g] as f64)
                        .clamp(0.0, 15.0) as u32;
                    assert_eq!(q.codes[r * 10 + c], want);
                }
            }
        }
    }

    #[test]
    fn round_trip_bound_k8() {
        let x = Tensor::vector(&[-1.0, 1.0]).unwrap();
        let p = uq_calibrate(&x, k(8), Granularity::PerTensor).unwrap();
        let xh = uq_fake(&x, &p).unwrap();
        let err = x.sub(&xh).unwrap().max_abs();
        assert!(err <= (2.0 / 255.0) / 2.0 + 1e-9);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let x = Tensor::zeros(&[4, 3]);
        let p = uq_calibrate(&Tensor::zeros(&[4, 5]), k(4), Granularity::PerChannel).unwrap();
        assert!(matches!(uq_quantize(&x, &p), Err(Error::Dimension { .. })));
        let p = uq_calibrate(&Tensor::zeros(&[3, 3]), k(4), Granularity::PerPatch).unwrap();
        assert!(matches!(uq_quantize(&x, &p), Err(Error::Dimension { .. })));
    }

    #[test]
    fn log2_examples() {
        let x = Tensor::vector(&[1.0, 0.5, 0.25]).unwrap();
        let (q, p) = lq_quantize(&x, k(2)).unwrap();
        assert_eq!(p.scale, 1.0);
        assert_eq!(q.codes, vec![0, 1, 2]);
        assert_eq!(lq_dequantize(&q, &p), x);

        // -log2(0.3) = 1.7370 rounds to 2.
        let x = Tensor::vector(&[1.0, 0.3]).unwrap();
        let (q, p) = lq_quantize(&x, k(4)).unwrap();
        assert_eq!(q.codes, vec![0, 2]);
        assert_eq!(lq_dequantize(&q, &p).data(), &[1.0, 0.25]);

        let x = Tensor::vector(&[1.0, 1e-12]).unwrap();
        let (q, p) = lq_quantize(&x, k(4)).unwrap();
        assert_eq!(q.codes[1], 15);
        let deepest = p.decode(15);
        assert!(deepest > 0.0 && deepest == 2f64.powi(-15));
        assert_eq!(p.decode(0), 1.0);

        assert!(matches!(
            lq_quantize(&Tensor::vector(&[1.0, 0.0]).unwrap(), k(4)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn shift_log2_examples() {
        let x = Tensor::vector(&[-0.1, 0.0, 0.9]).unwrap();
        for bits in 2..=8 {
            let (q, p) = shift_log2_quantize(&x, k(bits), SHIFT_LOG2_EPS).unwrap();
            let xh = lq_dequantize(&q, &p);
            assert_eq!(q.codes[2], 0);
            // (1 + ε) + (-0.1) - ε, up to floating-point cancellation.
            assert!((xh.data()[2] - 0.9).abs() <= 1e-12);
            // The minimum shifts to ε; -log2(ε / s) ≈ 26.6 only saturates for k ≤ 4.
            let deepest = (-(SHIFT_LOG2_EPS / p.scale).log2()).round_ties_even() as u32;
            assert_eq!(q.codes[0], deepest.min(k(bits).qmax()));
            if bits <= 4 {
                assert_eq!(q.codes[0], k(bits).qmax());
            }
            assert!(xh.data()[0] >= -0.1 - SHIFT_LOG2_EPS);
        }
    }

    #[test]
    fn shift_log2_reduces_to_plain_log2() {
        let mut rng = Rng::new(4);
        let x = rng.uniform_tensor(&[50], 0.5, 3.0);
        let (q, p) = shift_log2_quantize(&x, k(4), SHIFT_LOG2_EPS).unwrap();
        let m = p.shift.unwrap().min;
        let (q2, _) = lq_quantize(&x.map(|v| v - m + SHIFT_LOG2_EPS), k(4)).unwrap();
        assert_eq!(q.codes, q2.codes);
    }

    #[test]
    fn outlier_split_examples() {
        let x = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 100.0]]).unwrap();
        let (dense, sparse) = outlier_split(&x, &OutlierConfig::new(10.0).unwrap()).unwrap();
        assert_eq!(sparse.entries(), &[(1, 1, 100.0)]);
        assert_eq!(dense.data(), &[1.0, 2.0, 3.0, 0.0]);

        let (dense, sparse) = outlier_split(&x, &OutlierConfig::disabled()).unwrap();
        assert_eq!(sparse.nnz(), 0);
        assert_eq!(dense, x);

        // Magnitude rule catches negative outliers, the one-sided rule does not.
        let x = Tensor::from_rows(&[&[-50.0, 1.0]]).unwrap();
        let (_, s) = outlier_split(&x, &OutlierConfig::new(10.0).unwrap()).unwrap();
        assert_eq!(s.nnz(), 1);
        let one_sided = OutlierConfig::with_rule(10.0, OutlierRule::OneSided).unwrap();
        let (_, s) = outlier_split(&x, &one_sided).unwrap();
        assert_eq!(s.nnz(), 0);
    }

    #[test]
    fn outlier_split_at_percentile() {
        let mut rng = Rng::new(9);
        let x = rng.normal_tensor(&[100, 100], 1.0);
        let mut mags: Vec<f64> = x.data().iter().map(|v| v.abs()).collect();
        mags.sort_by(f64::total_cmp);
        let alpha = mags[(0.999 * mags.len() as f64) as usize];
        let cfg = OutlierConfig::new(alpha).unwrap();
        let (dense, sparse) = outlier_split(&x, &cfg).unwrap();
        assert_eq!(dense.add(&sparse.densify()).unwrap(), x);
        let density = sparse.nnz() as f64 / x.numel() as f64;
        assert!((density - 0.001).abs() <= 0.0002, "density {density}");
    }

    #[test]
    fn outlier_ratio_examples() {
        let cfg = OutlierConfig::new(10.0).unwrap();
        assert_eq!(outlier_ratio(&Tensor::zeros(&[3, 3]), &cfg), 0.0);
        assert_eq!(outlier_ratio(&Tensor::vector(&[1.0, 20.0]).unwrap(), &cfg), 0.5);
    }

    #[test]
    fn alpha_must_be_positive() {
        assert!(OutlierConfig::new(0.0).is_err());
        assert!(OutlierConfig::new(-1.0).is_err());
        assert!(OutlierConfig::new(f64::INFINITY).is_ok());
    }

    fn per_patch_params_without_outliers(x: &Tensor, cfg: &OutlierConfig, bits: BitWidth) -> UniformParams {
        let (dense, _) = outlier_split(x, cfg).unwrap();
        uq_calibrate(&dense, bits, Granularity::PerPatch).unwrap()
    }

    #[test]
    fn poq_linear_smooth_input_close_to_full_precision() {
        let mut rng = Rng::new(31);
        let x = rng.normal_tensor(&[16, 32], 1.0);
        let w = rng.normal_tensor(&[32, 24], 0.2);
        let b = rng.normal_tensor(&[24], 0.1);
        let wp = uq_calibrate(&w, k(8), Granularity::PerChannel).unwrap();
        let wq = uq_quantize(&w, &wp).unwrap();
        let cfg = OutlierConfig::disabled();
        let ap = per_patch_params_without_outliers(&x, &cfg, k(8));
        let y = poq_linear_forward(&x, &wq, &b, &ap, &cfg).unwrap();
        let y_fp = gemm(&x, &w).unwrap().add_row_vector(&b).unwrap();
        // |Δy| ≤ Σ_k |x||Δw| + |Δx||ŵ| with |Δx| ≤ s_x/2 and |Δw| ≤ s_w/2.
        let sx = ap.scales.iter().copied().fold(0.0, f64::max);
        let sw = wp.scales.iter().copied().fold(0.0, f64::max);
        let bound = 32.0 * (x.max_abs() * sw / 2.0 + (w.max_abs() + sw) * sx / 2.0);
        assert!(y.sub(&y_fp).unwrap().max_abs() <= bound);
        // Typical error is far below the worst case.
        assert!(y.sub(&y_fp).unwrap().max_abs() < 0.1);
    }

    #[test]
    fn poq_linear_outlier_row_improves() {
        let mut rng = Rng::new(32);
        let mut x = rng.normal_tensor(&[8, 16], 1.0);
        x.data_mut()[3 * 16 + 5] = 1000.0;
        let w = rng.normal_tensor(&[16, 12], 0.3);
        let b = Tensor::zeros(&[12]);
        let wp = uq_calibrate(&w, k(8), Granularity::PerChannel).unwrap();
        let wq = uq_quantize(&w, &wp).unwrap();
        // Reference uses the quantized weight so only activation error is compared.
        let y_ref = gemm(&x, &uq_dequantize(&wq)).unwrap();

        let split = OutlierConfig::new(10.0).unwrap();
        let ap_split = per_patch_params_without_outliers(&x, &split, k(4));
        let y_split = poq_linear_forward(&x, &wq, &b, &ap_split, &split).unwrap();

        let none = OutlierConfig::disabled();
        let ap_none = per_patch_params_without_outliers(&x, &none, k(4));
        let y_none = poq_linear_forward(&x, &wq, &b, &ap_none, &none).unwrap();

        let row_err = |y: &Tensor| -> f64 {
            y.row(3).iter().zip(y_ref.row(3)).map(|(a, b)| (a - b).powi(2)).sum()
        };
        let (with_split, without) = (row_err(&y_split), row_err(&y_none));
        assert!(with_split * 100.0 < without, "{with_split} vs {without}");
    }

    #[test]
    fn poq_zero_input_gives_bias() {
        let mut rng = Rng::new(33);
        let x = Tensor::zeros(&[4, 6]);
        let w = rng.normal_tensor(&[6, 3], 1.0);
        let b = rng.normal_tensor(&[3], 1.0);
        let wq = uq_quantize(&w, &uq_calibrate(&w, k(4), Granularity::PerChannel).unwrap()).unwrap();
        let cfg = OutlierConfig::new(5.0).unwrap();
        let ap = per_patch_params_without_outliers(&x, &cfg, k(4));
        let y = poq_linear_forward(&x, &wq, &b, &ap, &cfg).unwrap();
        for r in 0..4 {
            assert_eq!(y.row(r), b.data());
        }
    }

    #[test]
    fn poq_requires_per_patch() {
        let x = Tensor::zeros(&[4, 6]);
        let wq = uq_quantize(
            &Tensor::zeros(&[6, 3]),
            &UniformParams::new(k(4), Granularity::PerTensor, vec![1.0], vec![0]).unwrap(),
        )
        .unwrap();
        let ap = UniformParams::new(k(4), Granularity::PerTensor, vec![1.0], vec![0]).unwrap();
        assert!(poq_linear_forward(&x, &wq, &Tensor::zeros(&[3]), &ap, &OutlierConfig::disabled()).is_err());
    }
}
