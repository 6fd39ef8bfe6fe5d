//! Asymmetric 4-bit group quantization.
//!
//! A matrix is flattened row-major and cut into groups of `group_size`
//! consecutive elements. Each group stores an f32 scale and an i32 zero point;
//! codes hold `clamp(round(x / scale) + zero, 0, 15)` two per byte, low nibble
//! first. Reconstruction is `(code - zero) * scale`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use half::f16;
use num_traits::Float;

use crate::error::{bail, Result};
use crate::model::{param_specs, ModelConfig, ModelParams, ParamKind};
use crate::tensor::kernels::matmul_acc_block;
use crate::tensor::Tensor;

pub const DEFAULT_GROUP_SIZE: usize = 128;
/// Largest 4-bit code.
pub const MAX_CODE: i32 = 15;
/// Scale plus zero point.
pub const GROUP_META_BYTES: u64 = 8;

/// A 4-bit matrix of logical shape `[rows, cols]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantMatrix {
    pub rows: usize,
    pub cols: usize,
    pub group_size: usize,
    pub scales: Vec<f32>,
    pub zeros: Vec<i32>,
    /// `ceil(rows * cols / 2)` bytes.
    pub codes: Vec<u8>,
}

/// Smallest f32 `s` with `15 * s >= range` (as reals).
fn scale_for(range: f64) -> f32 {
    let mut s = (range / MAX_CODE as f64) as f32;
    while (s as f64) * (MAX_CODE as f64) < range {
        s = f32::from_bits(s.to_bits() + 1);
    }
    s
}

fn group_params(group: &[f32]) -> (f32, i32) {
    let (lo, hi) =
        group.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x as f64), hi.max(x as f64)));
    if hi == lo {
        // A constant group maps to code 1 (or 0 when the constant is zero).
        if lo == 0.0 {
            return (0.0, 0);
        }
        return (Float::abs(lo) as f32, if lo > 0.0 { -1 } else { 1 });
    }
    let s = scale_for(hi - lo);
    (s, Float::round(-lo / s as f64) as i32)
}

fn encode(x: f32, s: f32, z: i32) -> u8 {
    if s == 0.0 {
        return z.clamp(0, MAX_CODE) as u8;
    }
    let q = Float::round(x as f64 / s as f64) as i64 + z as i64;
    q.clamp(0, MAX_CODE as i64) as u8
}

impl QuantMatrix {
    pub fn quantize(data: &[f32], rows: usize, cols: usize, group_size: usize) -> Result<Self> {
        if group_size < 2 {
            bail!(Config, "group size must be at least 2, got {group_size}");
        }
        if data.len() != rows * cols {
            bail!(Shape, "{} values for a {rows}x{cols} matrix", data.len());
        }
        if data.iter().any(|x| !x.is_finite()) {
            bail!(Domain, "cannot quantize non-finite values");
        }
        let n_groups = data.len().div_ceil(group_size);
        let mut scales = Vec::with_capacity(n_groups);
        let mut zeros = Vec::with_capacity(n_groups);
        let mut codes = vec![0u8; data.len().div_ceil(2)];
        for (g, group) in data.chunks(group_size).enumerate() {
            let (s, z) = group_params(group);
            scales.push(s);
            zeros.push(z);
            for (j, &x) in group.iter().enumerate() {
                let i = g * group_size + j;
                codes[i / 2] |= encode(x, s, z) << (4 * (i % 2));
            }
        }
        Ok(Self { rows, cols, group_size, scales, zeros, codes })
    }

    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }

    pub fn n_groups(&self) -> usize {
        self.numel().div_ceil(self.group_size)
    }

    pub fn code(&self, i: usize) -> u8 {
        (self.codes[i / 2] >> (4 * (i % 2))) & 0x0f
    }

    /// Reconstruction of element `i` before rounding to f32.
    pub fn value_f64(&self, i: usize) -> f64 {
        let g = i / self.group_size;
        (self.code(i) as i64 - self.zeros[g] as i64) as f64 * self.scales[g] as f64
    }

    /// Reconstructs elements `start..start + out.len()`.
    pub fn dequantize_into(&self, start: usize, out: &mut [f32]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = self.value_f64(start + j) as f32;
        }
    }

    pub fn dequantize(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.numel()];
        self.dequantize_into(0, &mut out);
        out
    }

    /// Stored bytes: packed codes plus per-group metadata.
    pub fn bytes(&self) -> u64 {
        self.codes.len() as u64 + GROUP_META_BYTES * self.n_groups() as u64
    }

    /// Checks internal consistency after deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            bail!(Config, "group size must be at least 2");
        }
        let g = self.n_groups();
        if self.scales.len() != g || self.zeros.len() != g || self.codes.len() != self.numel().div_ceil(2) {
            bail!(Shape, "quantized {}x{} matrix has inconsistent buffers", self.rows, self.cols);
        }
        if self.scales.iter().any(|s| !s.is_finite() || *s < 0.0) {
            bail!(Domain, "quantization scales must be finite and non-negative");
        }
        Ok(())
    }
}

/// Rows of the weight dequantized per block in [`dequant_matmul`].
const BLOCK_ROWS: usize = 64;

/// `x[m, k] . W` with `W` dequantized block by block; bitwise equal to a
/// dense product against [`QuantMatrix::dequantize`].
pub fn dequant_matmul(x: &[f32], m: usize, w: &QuantMatrix) -> Result<Vec<f32>> {
    let (k, n) = (w.rows, w.cols);
    if x.len() != m * k {
        bail!(Shape, "input of {} values is not [{m}, {k}]", x.len());
    }
    let mut out = vec![0.0f32; m * n];
    let mut block = vec![0.0f32; BLOCK_ROWS * n];
    let mut start = 0;
    while start < k {
        let rows = BLOCK_ROWS.min(k - start);
        let b = &mut block[..rows * n];
        w.dequantize_into(start * n, b);
        matmul_acc_block(x, k, start, b, &mut out, m, n);
        start += rows;
    }
    Ok(out)
}

/// A stored tensor: either 4-bit or exempt at 16 bits.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    Quant(QuantMatrix),
    Half { shape: Vec<usize>, data: Vec<f16> },
}

impl StoredTensor {
    pub fn half(t: &Tensor<f32>) -> Self {
        Self::Half { shape: t.shape().to_vec(), data: t.data().iter().map(|&x| f16::from_f32(x)).collect() }
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            Self::Quant(q) => vec![q.rows, q.cols],
            Self::Half { shape, .. } => shape.clone(),
        }
    }

    pub fn bytes(&self) -> u64 {
        match self {
            Self::Quant(q) => q.bytes(),
            Self::Half { data, .. } => 2 * data.len() as u64,
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor<f32>> {
        match self {
            Self::Quant(q) => Tensor::new(&[q.rows, q.cols], q.dequantize()),
            Self::Half { shape, data } => Tensor::new(shape, data.iter().map(|x| x.to_f32()).collect()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantOptions {
    pub group_size: usize,
    /// Also quantize the embedding table (norms always stay 16-bit).
    pub quantize_embeddings: bool,
}

impl Default for QuantOptions {
    fn default() -> Self {
        Self { group_size: DEFAULT_GROUP_SIZE, quantize_embeddings: false }
    }
}

fn is_quantized(kind: ParamKind, opts: &QuantOptions) -> bool {
    match kind {
        ParamKind::Norm => false,
        ParamKind::Embedding => opts.quantize_embeddings,
        ParamKind::Projection | ParamKind::ResidualProjection | ParamKind::Head => true,
    }
}

/// Every parameter of a model in canonical order, quantized or 16-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub config: ModelConfig,
    pub options: QuantOptions,
    pub tensors: Vec<(String, StoredTensor)>,
}

impl QuantizedModel {
    pub fn quantize(config: &ModelConfig, params: &ModelParams<f32>, options: QuantOptions) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(config);
        let tensors = params.tensors();
        if specs.len() != tensors.len() {
            bail!(Shape, "parameters do not match the configuration");
        }
        let mut out = Vec::with_capacity(specs.len());
        for (spec, t) in specs.iter().zip(tensors) {
            if spec.shape != t.shape() {
                bail!(Shape, "{} should be {:?}, got {:?}", spec.name, spec.shape, t.shape());
            }
            let stored = if is_quantized(spec.kind, &options) {
                let (r, c) = (spec.shape[0], spec.shape[1]);
                StoredTensor::Quant(QuantMatrix::quantize(t.data(), r, c, options.group_size)?)
            } else {
                StoredTensor::half(t)
            };
            out.push((spec.name.clone(), stored));
        }
        Ok(Self { config: config.clone(), options, tensors: out })
    }

    /// Checks names, shapes and storage class against the configuration.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let specs = param_specs(&self.config);
        if specs.len() != self.tensors.len() {
            bail!(Shape, "expected {} tensors, got {}", specs.len(), self.tensors.len());
        }
        for (spec, (name, t)) in specs.iter().zip(&self.tensors) {
            if &spec.name != name || spec.shape != t.shape() {
                bail!(Shape, "tensor {name} {:?} does not match {} {:?}", t.shape(), spec.name, spec.shape);
            }
            match t {
                StoredTensor::Quant(q) => {
                    q.validate()?;
                    if q.group_size != self.options.group_size || !is_quantized(spec.kind, &self.options) {
                        bail!(Config, "tensor {name} has an unexpected quantization");
                    }
                }
                StoredTensor::Half { data, .. } => {
                    if data.len() != spec.numel() || is_quantized(spec.kind, &self.options) {
                        bail!(Config, "tensor {name} has an unexpected 16-bit storage");
                    }
                }
            }
        }
        Ok(())
    }

    /// Stored weight bytes, excluding any container header.
    pub fn footprint_bytes(&self) -> u64 {
        self.tensors.iter().map(|(_, t)| t.bytes()).sum()
    }

    /// Full-precision parameters reconstructed from storage.
    pub fn dequantize(&self) -> Result<ModelParams<f32>> {
        let tensors = self.tensors.iter().map(|(_, t)| t.to_tensor()).collect::<Result<Vec<_>>>()?;
        ModelParams::from_tensors(&self.config, tensors)
    }
}

/// Closed-form footprint of [`QuantizedModel::footprint_bytes`] for a configuration.
pub fn footprint_formula(config: &ModelConfig, options: &QuantOptions) -> u64 {
    let g = options.group_size as u64;
    param_specs(config)
        .iter()
        .map(|s| {
            let n = s.numel() as u64;
            if is_quantized(s.kind, options) {
                n.div_ceil(2) + GROUP_META_BYTES * n.div_ceil(g)
            } else {
                2 * n
            }
        })
        .sum()
}
