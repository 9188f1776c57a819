//! Zero-padding to group multiples and group-wise int4 quantization.
//!
//! Each contiguous run of `group_size` elements along the inner (last)
//! dimension gets its own affine map `x ≈ code * scale + zero` with codes in
//! `0..=15`. Asymmetric mode uses `scale = (max - min) / 15, zero = min`;
//! symmetric mode uses `scale = max|x| / 7, zero = -8 * scale`. A constant
//! group is stored as `scale = 0, zero = value` and reconstructs exactly. Its
//! codes are the ones the general formula gives (0 asymmetric; 15, 8 or 1
//! symmetric by sign), so a group that collapses to a constant on
//! dequantization requantizes to the same codes.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::{DType, Tensor, TensorArchive};
use crate::matrix::Matrix;

pub const BITS: u32 = 4;
const MAX_CODE: f64 = 15.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuantError {
    #[error("invalid quantization config: {0}")]
    InvalidConfig(String),
    #[error("non-finite value {value} at row {row}, column {col}")]
    NonFinite { row: usize, col: usize, value: f32 },
    #[error("inner dimension {cols} is not a multiple of group size {group_size}; pad first")]
    NotAligned { cols: usize, group_size: usize },
    #[error("corrupted quantized tensor: {0}")]
    Corrupted(String),
    #[error("tensor `{name}`: {source}")]
    InTensor { name: String, source: Box<QuantError> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantConfig {
    pub group_size: usize,
    pub bits: u32,
    pub symmetric: bool,
    /// Per-input-channel multipliers applied before quantization and divided
    /// out after dequantization. An activation-aware scale search would
    /// produce this vector.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_scales: Option<Vec<f32>>,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            group_size: 128,
            bits: BITS,
            symmetric: false,
            channel_scales: None,
        }
    }
}

impl QuantConfig {
    pub fn with_group_size(group_size: usize) -> Self {
        Self {
            group_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), QuantError> {
        if self.bits != BITS {
            return Err(QuantError::InvalidConfig(format!("bits must be 4, got {}", self.bits)));
        }
        if self.group_size < 2 || !self.group_size.is_multiple_of(2) {
            return Err(QuantError::InvalidConfig(format!(
                "group size must be an even number >= 2, got {}",
                self.group_size
            )));
        }
        if let Some(cs) = &self.channel_scales {
            if let Some(bad) = cs.iter().find(|s| !s.is_finite() || **s <= 0.0) {
                return Err(QuantError::InvalidConfig(format!(
                    "channel scales must be finite and positive, got {bad}"
                )));
            }
        }
        Ok(())
    }
}

/// Pads the inner dimension with zero columns up to the next multiple of
/// `group_size`. Returns the padded matrix and the original `(rows, cols)`.
pub fn pad_for_groups(m: &Matrix, group_size: usize) -> Result<(Matrix, (usize, usize)), QuantError> {
    if group_size < 2 {
        return Err(QuantError::InvalidConfig(format!(
            "group size must be >= 2, got {group_size}"
        )));
    }
    let (rows, cols) = m.shape();
    let padded_cols = cols.div_ceil(group_size) * group_size;
    if padded_cols == cols {
        return Ok((m.clone(), (rows, cols)));
    }
    let mut data = Vec::with_capacity(rows * padded_cols);
    for r in 0..rows {
        data.extend_from_slice(m.row(r));
        data.extend(std::iter::repeat_n(0.0f32, padded_cols - cols));
    }
    let padded = Matrix::new(rows, padded_cols, data).expect("padded size is consistent");
    Ok((padded, (rows, cols)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    packed: Vec<u8>,
    scales: Vec<f32>,
    zeros: Vec<f32>,
    original_shape: Vec<usize>,
    padded_shape: Vec<usize>,
    group_size: usize,
    symmetric: bool,
    channel_scales: Option<Vec<f32>>,
}

/// Per-group affine parameters.
fn group_params(values: &[f32], symmetric: bool) -> (f32, f32) {
    let (min, max) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if min == max {
        return (0.0, min);
    }
    if symmetric {
        let amax = min.abs().max(max.abs()) as f64;
        let scale = (amax / 7.0) as f32;
        if scale == 0.0 {
            return (1.0, min);
        }
        (scale, -8.0 * scale)
    } else {
        let scale = ((max as f64 - min as f64) / MAX_CODE) as f32;
        if scale == 0.0 {
            return (1.0, min);
        }
        (scale, min)
    }
}

fn constant_code(v: f32, symmetric: bool) -> u8 {
    match (symmetric, v.partial_cmp(&0.0)) {
        (false, _) => 0,
        (true, Some(std::cmp::Ordering::Greater)) => 15,
        (true, Some(std::cmp::Ordering::Less)) => 1,
        (true, _) => 8,
    }
}

fn encode(x: f32, scale: f32, zero: f32) -> u8 {
    // f64::round is round-half-away-from-zero.
    let q = ((x as f64 - zero as f64) / scale as f64).round();
    q.clamp(0.0, MAX_CODE) as u8
}

fn decode(code: u8, scale: f32, zero: f32) -> f32 {
    (code as f64 * scale as f64 + zero as f64) as f32
}

pub fn quantize_groupwise(m: &Matrix, config: &QuantConfig) -> Result<QuantizedTensor, QuantError> {
    quantize_with_original(m, config, m.shape())
}

/// Quantizes an already padded matrix, recording `original` as the pre-pad shape.
pub fn quantize_with_original(
    m: &Matrix,
    config: &QuantConfig,
    original: (usize, usize),
) -> Result<QuantizedTensor, QuantError> {
    config.validate()?;
    let (rows, cols) = m.shape();
    let g = config.group_size;
    if cols % g != 0 {
        return Err(QuantError::NotAligned { cols, group_size: g });
    }
    if original.0 > rows || original.1 > cols {
        return Err(QuantError::Corrupted(format!(
            "original shape {original:?} exceeds padded shape ({rows}, {cols})"
        )));
    }
    if let Some(cs) = &config.channel_scales {
        if cs.len() != cols {
            return Err(QuantError::InvalidConfig(format!(
                "{} channel scales for {cols} columns",
                cs.len()
            )));
        }
    }
    for (i, x) in m.data().iter().enumerate() {
        if !x.is_finite() {
            return Err(QuantError::NonFinite {
                row: i / cols,
                col: i % cols,
                value: *x,
            });
        }
    }

    let groups_per_row = cols / g;
    let mut codes = Vec::with_capacity(rows * cols);
    let mut scales = Vec::with_capacity(rows * groups_per_row);
    let mut zeros = Vec::with_capacity(rows * groups_per_row);
    let mut buf = vec![0.0f32; g];
    for r in 0..rows {
        let row = m.row(r);
        for gi in 0..groups_per_row {
            let span = gi * g..(gi + 1) * g;
            buf.copy_from_slice(&row[span.clone()]);
            if let Some(cs) = &config.channel_scales {
                for (x, s) in buf.iter_mut().zip(&cs[span]) {
                    *x *= s;
                }
            }
            let (scale, zero) = group_params(&buf, config.symmetric);
            if scale == 0.0 {
                codes.extend(std::iter::repeat_n(constant_code(zero, config.symmetric), g));
            } else {
                codes.extend(buf.iter().map(|&x| encode(x, scale, zero)));
            }
            scales.push(scale);
            zeros.push(zero);
        }
    }

    Ok(QuantizedTensor {
        packed: pack_codes(&codes),
        scales,
        zeros,
        original_shape: vec![original.0, original.1],
        padded_shape: vec![rows, cols],
        group_size: g,
        symmetric: config.symmetric,
        channel_scales: config.channel_scales.clone(),
    })
}

/// Pads then quantizes, the usual entry point for raw weight matrices.
pub fn pad_and_quantize(m: &Matrix, config: &QuantConfig) -> Result<QuantizedTensor, QuantError> {
    config.validate()?;
    let (padded, original) = pad_for_groups(m, config.group_size)?;
    let config = match &config.channel_scales {
        Some(cs) if cs.len() < padded.cols() => {
            let mut cs = cs.clone();
            cs.resize(padded.cols(), 1.0);
            QuantConfig {
                channel_scales: Some(cs),
                ..config.clone()
            }
        }
        _ => config.clone(),
    };
    quantize_with_original(&padded, &config, original)
}

fn pack_codes(codes: &[u8]) -> Vec<u8> {
    codes
        .chunks(2)
        .map(|pair| pair[0] | (pair.get(1).copied().unwrap_or(0) << 4))
        .collect()
}

impl QuantizedTensor {
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        packed: Vec<u8>,
        scales: Vec<f32>,
        zeros: Vec<f32>,
        original_shape: Vec<usize>,
        padded_shape: Vec<usize>,
        group_size: usize,
        symmetric: bool,
        channel_scales: Option<Vec<f32>>,
    ) -> Result<Self, QuantError> {
        let q = Self {
            packed,
            scales,
            zeros,
            original_shape,
            padded_shape,
            group_size,
            symmetric,
            channel_scales,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<(), QuantError> {
        let corrupt = |m: String| Err(QuantError::Corrupted(m));
        let [rows, cols] = self.padded_shape[..] else {
            return corrupt(format!("padded shape {:?} is not rank 2", self.padded_shape));
        };
        if self.original_shape.len() != 2
            || self.original_shape[0] > rows
            || self.original_shape[1] > cols
        {
            return corrupt(format!(
                "original shape {:?} does not fit in padded shape {:?}",
                self.original_shape, self.padded_shape
            ));
        }
        if self.group_size < 2 || !self.group_size.is_multiple_of(2) || !cols.is_multiple_of(self.group_size) {
            return corrupt(format!(
                "group size {} does not tile {cols} columns with even packing",
                self.group_size
            ));
        }
        let n = rows * cols;
        if self.packed.len() != n.div_ceil(2) {
            return corrupt(format!(
                "packed buffer holds {} bytes, {n} codes need {}",
                self.packed.len(),
                n.div_ceil(2)
            ));
        }
        let groups = n / self.group_size;
        if self.scales.len() != groups || self.zeros.len() != groups {
            return corrupt(format!(
                "{} scales / {} zeros for {groups} groups",
                self.scales.len(),
                self.zeros.len()
            ));
        }
        if let Some(cs) = &self.channel_scales {
            if cs.len() != cols {
                return corrupt(format!("{} channel scales for {cols} columns", cs.len()));
            }
        }
        Ok(())
    }

    pub fn packed(&self) -> &[u8] {
        &self.packed
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn zeros(&self) -> &[f32] {
        &self.zeros
    }

    pub fn original_shape(&self) -> &[usize] {
        &self.original_shape
    }

    pub fn padded_shape(&self) -> &[usize] {
        &self.padded_shape
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn channel_scales(&self) -> Option<&[f32]> {
        self.channel_scales.as_deref()
    }

    /// Shape of the per-group scale/zero tables: `[rows, cols / group_size]`.
    pub fn group_table_shape(&self) -> Vec<usize> {
        vec![self.padded_shape[0], self.padded_shape[1] / self.group_size]
    }

    pub fn codes(&self) -> Vec<u8> {
        let n = self.padded_shape.iter().product::<usize>();
        self.packed
            .iter()
            .flat_map(|b| [b & 0x0f, b >> 4])
            .take(n)
            .collect()
    }

    /// Reconstruction over the padded shape, row-major.
    pub fn dequantize(&self) -> Vec<f32> {
        let cols = self.padded_shape[1];
        let g = self.group_size;
        self.codes()
            .into_iter()
            .enumerate()
            .map(|(i, code)| {
                let group = i / g;
                let x = decode(code, self.scales[group], self.zeros[group]);
                match &self.channel_scales {
                    Some(cs) => x / cs[i % cols],
                    None => x,
                }
            })
            .collect()
    }

    pub fn dequantize_matrix(&self) -> Matrix {
        Matrix::new(self.padded_shape[0], self.padded_shape[1], self.dequantize())
            .expect("validated shape")
    }

    /// Reconstruction sliced back to the pre-padding shape.
    pub fn dequantize_original(&self) -> Matrix {
        let full = self.dequantize_matrix();
        let m = full
            .slice_cols(self.original_shape[1])
            .expect("original fits in padded");
        let rows = self.original_shape[0];
        let cols = m.cols();
        Matrix::new(rows, cols, m.into_data()[..rows * cols].to_vec()).expect("row prefix")
    }

    /// Bytes needed to store codes plus the f32 scale/zero tables.
    pub fn storage_bytes(&self) -> usize {
        self.packed.len() + 4 * (self.scales.len() + self.zeros.len())
    }

    pub fn bitwise_eq(&self, other: &QuantizedTensor) -> bool {
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.packed == other.packed
            && bits(&self.scales) == bits(&other.scales)
            && bits(&self.zeros) == bits(&other.zeros)
            && self.original_shape == other.original_shape
            && self.padded_shape == other.padded_shape
            && self.group_size == other.group_size
            && self.symmetric == other.symmetric
            && self.channel_scales.as_deref().map(bits) == other.channel_scales.as_deref().map(bits)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub max_abs_error: f64,
    pub rmse: f64,
    pub elements: usize,
}

/// Reconstruction error over the original (unpadded) region.
pub fn error_report(original: &Matrix, q: &QuantizedTensor) -> ErrorReport {
    let recon = q.dequantize_original();
    let mut max_abs = 0.0f64;
    let mut sq = 0.0f64;
    for (a, b) in original.data().iter().zip(recon.data()) {
        let d = (*a as f64 - *b as f64).abs();
        max_abs = max_abs.max(d);
        sq += d * d;
    }
    let n = original.data().len();
    ErrorReport {
        max_abs_error: max_abs,
        rmse: if n == 0 { 0.0 } else { (sq / n as f64).sqrt() },
        elements: n,
    }
}

/// Quantizes every rank-2 float tensor of an archive (after padding) and
/// copies everything else through. Returns the error report per quantized
/// tensor.
pub fn quantize_archive(
    archive: &TensorArchive,
    config: &QuantConfig,
) -> Result<(TensorArchive, BTreeMap<String, ErrorReport>), QuantError> {
    config.validate()?;
    let results: Vec<(String, Tensor, Option<ErrorReport>)> = archive
        .entries
        .par_iter()
        .map(|(name, t)| {
            let quantizable = t.matrix_dims().is_some() && t.dtype() != DType::I4;
            if !quantizable {
                return Ok((name.clone(), t.clone(), None));
            }
            let m = Matrix::from_tensor(t).map_err(|e| QuantError::InvalidConfig(e.to_string()))?;
            let q = pad_and_quantize(&m, config).map_err(|e| QuantError::InTensor {
                name: name.clone(),
                source: Box::new(e),
            })?;
            let report = error_report(&m, &q);
            Ok((name.clone(), Tensor::int4(q), Some(report)))
        })
        .collect::<Result<_, QuantError>>()?;
    let mut out = TensorArchive::new();
    out.metadata = archive.metadata.clone();
    let mut reports = BTreeMap::new();
    for (name, tensor, report) in results {
        if let Some(r) = report {
            reports.insert(name.clone(), r);
        }
        out.insert(name, tensor);
    }
    Ok((out, reports))
}
