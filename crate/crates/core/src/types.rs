//! Shared containers: ternary weights, int8 activations, int32 accumulators,
//! float matrices, and the model configuration.
//!
//! Everything is row-major. Weight matrices are stored input-dim-major
//! (`rows = n` input features, `cols = k` output features) so that a group of
//! `G` consecutive input rows is contiguous in a column walk.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense `n × k` matrix of trits in `{-1, 0, +1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TernaryMatrix {
    rows: usize,
    cols: usize,
    trits: Vec<i8>,
}

impl TernaryMatrix {
    pub fn new(rows: usize, cols: usize, trits: Vec<i8>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape(format!(
                "ternary matrix must be non-empty, got {rows}x{cols}"
            )));
        }
        if trits.len() != rows * cols {
            return Err(Error::shape(format!(
                "expected {} trits for {rows}x{cols}, got {}",
                rows * cols,
                trits.len()
            )));
        }
        if let Some(pos) = trits.iter().position(|t| !(-1..=1).contains(t)) {
            return Err(Error::invalid(format!(
                "element {} = {} is not a trit",
                pos, trits[pos]
            )));
        }
        Ok(Self { rows, cols, trits })
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, vec![0; rows * cols])
    }

    /// Builds a matrix from `f(row, col)`; values are clamped into `{-1, 0, 1}`
    /// by sign.
    pub fn from_fn(
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, usize) -> i8,
    ) -> Result<Self> {
        let mut trits = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                trits.push(f(r, c).signum());
            }
        }
        Self::new(rows, cols, trits)
    }

    /// `+1` on the main diagonal, zero elsewhere.
    pub fn identity(rows: usize, cols: usize) -> Result<Self> {
        Self::from_fn(rows, cols, |r, c| i8::from(r == c))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn trits(&self) -> &[i8] {
        &self.trits
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> i8 {
        self.trits[row * self.cols + col]
    }

    pub fn negated(&self) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            trits: self.trits.iter().map(|t| -t).collect(),
        }
    }

    /// Reorders columns so that output column `c` is input column `perm[c]`.
    pub fn gather_columns(&self, perm: &[usize]) -> Result<Self> {
        let trits = gather_columns(&self.trits, self.rows, self.cols, perm)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            trits,
        })
    }
}

/// Row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FloatMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "expected {} floats for {rows}x{cols}, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn rows_iter(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.cols.max(1))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn gather_columns(&self, perm: &[usize]) -> Result<Self> {
        let data = gather_columns(&self.data, self.rows, self.cols, perm)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }
}

fn gather_columns<T: Copy>(data: &[T], rows: usize, cols: usize, perm: &[usize]) -> Result<Vec<T>> {
    if perm.len() != cols {
        return Err(Error::shape(format!(
            "column permutation has length {}, matrix has {cols} columns",
            perm.len()
        )));
    }
    let mut seen = vec![false; cols];
    for &p in perm {
        if p >= cols || std::mem::replace(&mut seen[p], true) {
            return Err(Error::invalid("column map is not a permutation"));
        }
    }
    let mut out = Vec::with_capacity(data.len());
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        out.extend(perm.iter().map(|&p| row[p]));
    }
    Ok(out)
}

/// Int8 activation rows with one ABSMAX scale per row.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedActivations {
    rows: usize,
    cols: usize,
    values: Vec<i8>,
    row_scale: Vec<f32>,
}

impl QuantizedActivations {
    pub fn new(rows: usize, cols: usize, values: Vec<i8>, row_scale: Vec<f32>) -> Result<Self> {
        if values.len() != rows * cols || row_scale.len() != rows {
            return Err(Error::shape(format!(
                "quantized activations {rows}x{cols}: got {} values and {} scales",
                values.len(),
                row_scale.len()
            )));
        }
        if values.contains(&i8::MIN) {
            return Err(Error::invalid("activation value -128 outside [-127, 127]"));
        }
        if let Some(s) = row_scale.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::invalid(format!(
                "row scale {s} must be finite and > 0"
            )));
        }
        Ok(Self {
            rows,
            cols,
            values,
            row_scale,
        })
    }

    /// Unit-scale activations, convenient for integer-only kernels and tests.
    pub fn from_values(rows: usize, cols: usize, values: Vec<i8>) -> Result<Self> {
        Self::new(rows, cols, values, vec![1.0; rows])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn row(&self, r: usize) -> &[i8] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_scale(&self) -> &[f32] {
        &self.row_scale
    }
}

/// `rows × cols` exact int32 accumulator outputs (one row per token).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Int32Matrix {
    rows: usize,
    cols: usize,
    data: Vec<i32>,
}

impl Int32Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<i32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "expected {} int32 values for {rows}x{cols}, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[i32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Transformer dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq: usize,
    pub vocab: usize,
    #[serde(default = "default_rms_eps")]
    pub rms_eps: f32,
}

pub const DEFAULT_RMS_EPS: f32 = 1e-5;

fn default_rms_eps() -> f32 {
    DEFAULT_RMS_EPS
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_seq", self.max_seq),
            ("vocab", self.vocab),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be >= 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.d_head().is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "d_head {} must be even for rotary pairing",
                self.d_head()
            )));
        }
        if !(self.rms_eps.is_finite() && self.rms_eps > 0.0) {
            return Err(Error::invalid("rms_eps must be finite and > 0"));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Reference ternary matmul: `out[i][j] = Σ_t a[i][t] · w[t][j]` by
/// pass / negate / skip selection.
pub fn ternary_matmul_naive(a: &QuantizedActivations, w: &TernaryMatrix) -> Result<Int32Matrix> {
    if a.cols() != w.rows() {
        return Err(Error::shape(format!(
            "activations have {} columns, weights have {} rows",
            a.cols(),
            w.rows()
        )));
    }
    let (m, k) = (a.rows(), w.cols());
    let mut out = vec![0i32; m * k];
    for i in 0..m {
        let arow = a.row(i);
        let orow = &mut out[i * k..(i + 1) * k];
        for (&a_t, wrow) in arow.iter().zip(w.trits().chunks_exact(k)) {
            let x = i32::from(a_t);
            for (o, &wt) in orow.iter_mut().zip(wrow) {
                match wt {
                    1 => *o += x,
                    -1 => *o -= x,
                    _ => {}
                }
            }
        }
    }
    Int32Matrix::new(m, k, out)
}
