//! Dense row-major `f32` tensors and the handful of kernels the rest of the
//! crate is built on.
//!
//! Storage precision is tracked separately from compute precision: a tensor
//! loaded from a 16-bit checkpoint keeps its [`DType`] tag so it can be written
//! back bit-exactly, but every value is held and computed as `f32`.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// On-disk element type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    F32,
    F16,
    BF16,
}

impl DType {
    pub fn size_in_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 | DType::BF16 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::BF16 => "BF16",
        }
    }

    pub fn parse(tag: &str) -> Option<Self> {
        match tag {
            "F32" => Some(DType::F32),
            "F16" => Some(DType::F16),
            "BF16" => Some(DType::BF16),
            _ => None,
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("dtype", &self.dtype)
            .finish_non_exhaustive()
    }
}

fn ensure_finite(data: &[f32], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tensor {
    /// Builds an `F32` tensor, checking the element count and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        ensure_finite(&data, "tensor construction")?;
        Ok(Self {
            shape,
            dtype: DType::F32,
            data,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape, vec![0.0; numel])
    }

    /// One-element tensor of shape `[1]`.
    pub fn scalar(value: f32) -> Result<Self> {
        Self::new(vec![1], vec![value])
    }

    pub fn vector(data: Vec<f32>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Retags the storage type. Values are rounded to the target precision so
    /// that a later save is lossless.
    pub fn with_dtype(mut self, dtype: DType) -> Self {
        match dtype {
            DType::F32 => {}
            DType::F16 => self
                .data
                .iter_mut()
                .for_each(|v| *v = half::f16::from_f32(*v).to_f32()),
            DType::BF16 => self
                .data
                .iter_mut()
                .for_each(|v| *v = half::bf16::from_f32(*v).to_f32()),
        }
        self.dtype = dtype;
        self
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, dtype: DType, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, dtype, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn nonzero_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::dim(format!("expected a matrix, got shape {other:?}"))),
        }
    }

    /// Views a rank-1 tensor as a single row, leaves matrices alone.
    pub fn as_rows(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[n] => Ok((1, n)),
            &[r, c] => Ok((r, c)),
            other => Err(Error::dim(format!(
                "expected a vector or matrix, got shape {other:?}"
            ))),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.contains(&0) {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn row(&self, index: usize) -> Result<&[f32]> {
        let (rows, cols) = self.dims2()?;
        if index >= rows {
            return Err(Error::dim(format!("row {index} out of {rows}")));
        }
        Ok(&self.data[index * cols..(index + 1) * cols])
    }

    /// Contiguous block of rows; keeps the storage tag.
    pub fn slice_rows(&self, range: Range<usize>) -> Result<Self> {
        let (rows, cols) = self.dims2()?;
        if range.start >= range.end || range.end > rows {
            return Err(Error::dim(format!("row range {range:?} invalid for {rows} rows")));
        }
        let data = self.data[range.start * cols..range.end * cols].to_vec();
        Ok(Self::from_parts_unchecked(
            vec![range.len(), cols],
            self.dtype,
            data,
        ))
    }

    /// Contiguous block of columns; keeps the storage tag.
    pub fn slice_cols(&self, range: Range<usize>) -> Result<Self> {
        let (rows, cols) = self.dims2()?;
        if range.start >= range.end || range.end > cols {
            return Err(Error::dim(format!("column range {range:?} invalid for {cols} columns")));
        }
        let width = range.len();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&self.data[r * cols + range.start..r * cols + range.end]);
        }
        Ok(Self::from_parts_unchecked(vec![rows, width], self.dtype, data))
    }

    /// Vertical concatenation of matrices sharing a column count.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::arg("concat of zero tensors"))?;
        let (_, cols) = first.dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, c) = p.dims2()?;
            if c != cols {
                return Err(Error::dim(format!("column mismatch {c} vs {cols}")));
            }
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Ok(Self::from_parts_unchecked(vec![rows, cols], first.dtype, data))
    }

    /// Horizontal concatenation of matrices sharing a row count.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::arg("concat of zero tensors"))?;
        let (rows, _) = first.dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = p.dims2()?;
            if r != rows {
                return Err(Error::dim(format!("row mismatch {r} vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data[r * w..(r + 1) * w]);
            }
        }
        Ok(Self::from_parts_unchecked(vec![rows, total], first.dtype, data))
    }

    pub fn transpose(&self) -> Result<Self> {
        let (rows, cols) = self.dims2()?;
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = self.data[r * cols + c];
            }
        }
        Ok(Self::from_parts_unchecked(vec![cols, rows], self.dtype, data))
    }

    /// Multiplies every element by `factor`.
    pub fn scale(&self, factor: f32) -> Result<Self> {
        let data: Vec<f32> = self.data.iter().map(|v| v * factor).collect();
        ensure_finite(&data, "scale")?;
        Ok(Self::from_parts_unchecked(self.shape.clone(), DType::F32, data))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    /// Bitwise equality of values (distinguishes `-0.0` from `0.0`).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Standard matrix product `a · b` with a fixed `i, k, j` loop order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner dims differ: {m}x{k} · {k2}x{n}"
        )));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    ensure_finite(&out, "matmul")?;
    Ok(Tensor::from_parts_unchecked(vec![m, n], DType::F32, out))
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Applies a weight stored as `[out_features × in_features]` to every row of
/// `x`: returns `x · wᵀ`. A rank-1 `x` yields a rank-1 result.
pub fn linear(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (n, d_in) = x.as_rows()?;
    let (d_out, w_in) = weight.dims2()?;
    if d_in != w_in {
        return Err(Error::dim(format!(
            "linear: input width {d_in} does not match weight [{d_out} x {w_in}]"
        )));
    }
    let mut out = Vec::with_capacity(n * d_out);
    for r in 0..n {
        let xr = &x.data[r * d_in..(r + 1) * d_in];
        for o in 0..d_out {
            out.push(dot(xr, &weight.data[o * w_in..(o + 1) * w_in]));
        }
    }
    ensure_finite(&out, "linear")?;
    let shape = if x.shape.len() == 1 {
        vec![d_out]
    } else {
        vec![n, d_out]
    };
    Ok(Tensor::from_parts_unchecked(shape, DType::F32, out))
}

/// Elementwise product of equal-shape tensors.
pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::dim(format!(
            "hadamard shape mismatch {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let data: Vec<f32> = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    ensure_finite(&data, "hadamard")?;
    Ok(Tensor::from_parts_unchecked(a.shape.clone(), DType::F32, data))
}

/// `acc += factor * term`, elementwise.
pub fn add_scaled_in_place(acc: &mut Tensor, term: &Tensor, factor: f32) -> Result<()> {
    if acc.shape != term.shape {
        return Err(Error::dim(format!(
            "accumulate shape mismatch {:?} vs {:?}",
            acc.shape, term.shape
        )));
    }
    for (a, t) in acc.data.iter_mut().zip(&term.data) {
        *a += factor * t;
    }
    acc.dtype = DType::F32;
    ensure_finite(&acc.data, "accumulate")
}

#[inline]
pub fn silu_scalar(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// `x · σ(x)` elementwise.
pub fn silu(x: &Tensor) -> Tensor {
    Activation::Silu.apply(x)
}

/// Activation applied to the gate projection of an MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Silu,
    /// tanh approximation
    Gelu,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn eval(self, x: f32) -> f32 {
        match self {
            Activation::Silu => silu_scalar(x),
            Activation::Gelu => {
                const C: f32 = 0.797_884_6; // sqrt(2/pi)
                0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
            }
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    pub fn apply(self, x: &Tensor) -> Tensor {
        let data = x.data.iter().map(|&v| self.eval(v)).collect();
        Tensor::from_parts_unchecked(x.shape.clone(), DType::F32, data)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "silu" | "swish" | "swiglu" => Ok(Activation::Silu),
            "gelu" | "gelu_pytorch_tanh" | "gelu_new" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::arg(format!("unknown activation '{other}'"))),
        }
    }
}

/// The `r`-quantile of `|w|`, linearly interpolated at position `r·(N−1)` of
/// the sorted absolute values.
pub fn quantile_abs(w: &Tensor, r: f64) -> Result<f32> {
    if w.is_empty() {
        return Err(Error::arg("quantile of an empty tensor"));
    }
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::arg(format!("quantile fraction {r} outside [0, 1]")));
    }
    let mut abs: Vec<f32> = w.data.iter().map(|v| v.abs()).collect();
    abs.sort_unstable_by(f32::total_cmp);
    let pos = r * (abs.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    let (a, b) = (abs[lo] as f64, abs[hi] as f64);
    Ok((a + (b - a) * frac) as f32)
}

/// Zeroes every entry with `|w| <= threshold`; returns the masked tensor and
/// how many entries survived.
pub fn mask_below(w: &Tensor, threshold: f32) -> (Tensor, usize) {
    let mut kept = 0;
    let data = w
        .data
        .iter()
        .map(|&v| {
            if v.abs() > threshold {
                kept += 1;
                v
            } else {
                0.0
            }
        })
        .collect();
    (
        Tensor::from_parts_unchecked(w.shape.clone(), w.dtype, data),
        kept,
    )
}

/// Population variance of all elements.
pub fn variance(x: &Tensor) -> Result<f64> {
    let n = x.len();
    if n < 2 {
        return Err(Error::arg(format!("variance needs at least 2 values, got {n}")));
    }
    let mean = x.data.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    Ok(x
        .data
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n as f64)
}
