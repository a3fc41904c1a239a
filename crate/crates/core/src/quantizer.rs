//! RMS-MAX unit: RMS normalization, channel absolute maximum, ABSMAX int8
//! quantization and int32 dequantization.

use crate::error::{Error, Result};
use crate::types::{FloatMatrix, QuantizedActivations};

/// Largest int8 magnitude used by the symmetric quantizer.
pub const QMAX: f32 = 127.0;

/// RMSNorm scale vector.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsNormWeights {
    gamma: Vec<f32>,
}

impl RmsNormWeights {
    pub fn new(gamma: Vec<f32>) -> Result<Self> {
        if gamma.is_empty() {
            return Err(Error::shape("RMSNorm gamma must be non-empty"));
        }
        if gamma.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(
                "RMSNorm gamma contains non-finite values".into(),
            ));
        }
        Ok(Self { gamma })
    }

    pub fn ones(len: usize) -> Self {
        Self {
            gamma: vec![1.0; len],
        }
    }

    pub fn gamma(&self) -> &[f32] {
        &self.gamma
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }
}

/// RMS normalization followed by max-abs extraction over the normalized row.
pub fn rms_max(x: &[f32], gamma: &RmsNormWeights, eps: f32) -> Result<(Vec<f32>, f32)> {
    if x.len() != gamma.len() {
        return Err(Error::shape(format!(
            "input has {} elements, gamma has {}",
            x.len(),
            gamma.len()
        )));
    }
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::invalid(format!("eps {eps} must be finite and > 0")));
    }
    if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("input element {pos} is {}", x[pos])));
    }
    let sum_sq: f32 = x.iter().map(|v| v * v).sum();
    let inv_rms = 1.0 / (sum_sq / x.len() as f32 + eps).sqrt();
    let mut absmax = 0.0f32;
    let normed = x
        .iter()
        .zip(gamma.gamma())
        .map(|(&v, &g)| {
            let y = g * (v * inv_rms);
            absmax = absmax.max(y.abs());
            y
        })
        .collect();
    Ok((normed, absmax))
}

pub fn absmax(x: &[f32]) -> f32 {
    x.iter().fold(0.0f32, |m, v| m.max(v.abs()))
}

/// Symmetric int8 quantization against a precomputed channel maximum.
/// Returns the values and the dequant scale `absmax / 127` (1 when
/// `absmax == 0`).
pub fn quantize_absmax(x: &[f32], absmax: f32) -> (Vec<i8>, f32) {
    if absmax <= 0.0 || !absmax.is_finite() {
        return (vec![0; x.len()], 1.0);
    }
    let values = x
        .iter()
        .map(|&v| ((v * QMAX) / absmax).round().clamp(-QMAX, QMAX) as i8)
        .collect();
    (values, absmax / QMAX)
}

/// Quantizes every row of `x` with its own ABSMAX scale.
pub fn quantize_rows(x: &FloatMatrix) -> Result<QuantizedActivations> {
    let mut values = Vec::with_capacity(x.rows() * x.cols());
    let mut scales = Vec::with_capacity(x.rows());
    for row in x.rows_iter() {
        let (q, s) = quantize_absmax(row, absmax(row));
        values.extend(q);
        scales.push(s);
    }
    QuantizedActivations::new(x.rows(), x.cols(), values, scales)
}

/// RMSNorm each row, then quantize it with the max found during the norm.
pub fn rms_quantize_rows(
    x: &FloatMatrix,
    gamma: &RmsNormWeights,
    eps: f32,
) -> Result<QuantizedActivations> {
    let mut values = Vec::with_capacity(x.rows() * x.cols());
    let mut scales = Vec::with_capacity(x.rows());
    for row in x.rows_iter() {
        let (normed, max) = rms_max(row, gamma, eps)?;
        let (q, s) = quantize_absmax(&normed, max);
        values.extend(q);
        scales.push(s);
    }
    QuantizedActivations::new(x.rows(), x.cols(), values, scales)
}

/// `out[j] = o[j] · act_scale · weight_scale`.
pub fn dequantize(o: &[i32], act_scale: f32, weight_scale: f32) -> Vec<f32> {
    let s = act_scale * weight_scale;
    o.iter().map(|&v| v as f32 * s).collect()
}
