//! Elementwise ops applied around the ternary linears: SwiGLU, residual add,
//! and rotary position embedding in both pairings.
//!
//! The half-split ("interleaved" output) pairing rotates `(x[t], x[t + d/2])`
//! into slots `(2t, 2t + 1)`; the consecutive pairing rotates `(x[2t], x[2t+1])`
//! in place. Permuting the q/k projection columns per head with
//! [`permute_qk_head_columns`] makes the consecutive form produce exactly what
//! the half-split form produces on unpermuted weights, so only the
//! consecutive form runs in the engine.

use crate::error::{Error, Result};
use crate::types::{FloatMatrix, TernaryMatrix};

pub const ROPE_BASE: f64 = 10000.0;

/// Precomputed `cos(m θ_t)`, `sin(m θ_t)` with `θ_t = 10000^(-2t/d_head)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeCache {
    max_seq: usize,
    half: usize,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl RopeCache {
    pub fn new(max_seq: usize, d_head: usize) -> Result<Self> {
        if d_head == 0 || !d_head.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "d_head {d_head} must be even and > 0"
            )));
        }
        let half = d_head / 2;
        let mut cos = Vec::with_capacity(max_seq * half);
        let mut sin = Vec::with_capacity(max_seq * half);
        for m in 0..max_seq {
            for t in 0..half {
                let theta = ROPE_BASE.powf(-2.0 * t as f64 / d_head as f64);
                let angle = m as f64 * theta;
                cos.push(angle.cos() as f32);
                sin.push(angle.sin() as f32);
            }
        }
        Ok(Self {
            max_seq,
            half,
            cos,
            sin,
        })
    }

    pub fn max_seq(&self) -> usize {
        self.max_seq
    }

    pub fn d_head(&self) -> usize {
        self.half * 2
    }

    /// `(cos, sin)` rows for position `pos`, each `d_head / 2` long.
    pub fn at(&self, pos: usize) -> Result<(&[f32], &[f32])> {
        if pos >= self.max_seq {
            return Err(Error::Capacity(format!(
                "position {pos} beyond rope cache length {}",
                self.max_seq
            )));
        }
        let r = pos * self.half..(pos + 1) * self.half;
        Ok((&self.cos[r.clone()], &self.sin[r]))
    }

    fn check_len(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.d_head() {
            return Err(Error::shape(format!(
                "rope input has {} elements, d_head is {}",
                x.len(),
                self.d_head()
            )));
        }
        Ok(())
    }
}

/// Half-split pairing with interleaved output slots.
pub fn rope_interleaved(x: &[f32], pos: usize, cache: &RopeCache) -> Result<Vec<f32>> {
    cache.check_len(x)?;
    let (cos, sin) = cache.at(pos)?;
    let half = x.len() / 2;
    let mut out = vec![0.0; x.len()];
    for t in 0..half {
        let (a, b) = (x[t], x[t + half]);
        out[2 * t] = a * cos[t] - b * sin[t];
        out[2 * t + 1] = b * cos[t] + a * sin[t];
    }
    Ok(out)
}

/// Adjacent-pair rotation.
pub fn rope_consecutive(x: &[f32], pos: usize, cache: &RopeCache) -> Result<Vec<f32>> {
    let mut out = x.to_vec();
    rope_consecutive_in_place(&mut out, pos, cache)?;
    Ok(out)
}

pub fn rope_consecutive_in_place(x: &mut [f32], pos: usize, cache: &RopeCache) -> Result<()> {
    cache.check_len(x)?;
    let (cos, sin) = cache.at(pos)?;
    for (t, pair) in x.chunks_exact_mut(2).enumerate() {
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * cos[t] - b * sin[t];
        pair[1] = b * cos[t] + a * sin[t];
    }
    Ok(())
}

/// Column gather map turning half-split head layout into consecutive
/// layout: new column `h·d + 2t` takes old `h·d + t`, new `h·d + 2t + 1`
/// takes old `h·d + d/2 + t`.
pub fn qk_column_permutation(n_heads: usize, d_head: usize) -> Result<Vec<usize>> {
    if d_head == 0 || !d_head.is_multiple_of(2) || n_heads == 0 {
        return Err(Error::invalid(format!(
            "need n_heads >= 1 and even d_head, got {n_heads} x {d_head}"
        )));
    }
    let half = d_head / 2;
    let mut perm = Vec::with_capacity(n_heads * d_head);
    for h in 0..n_heads {
        let base = h * d_head;
        for t in 0..half {
            perm.push(base + t);
            perm.push(base + half + t);
        }
    }
    Ok(perm)
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn check_head_cols(cols: usize, n_heads: usize, d_head: usize) -> Result<()> {
    if cols != n_heads * d_head {
        return Err(Error::shape(format!(
            "weight has {cols} columns, expected n_heads*d_head = {}",
            n_heads * d_head
        )));
    }
    Ok(())
}

pub fn permute_qk_head_columns(
    w: &TernaryMatrix,
    n_heads: usize,
    d_head: usize,
) -> Result<TernaryMatrix> {
    check_head_cols(w.cols(), n_heads, d_head)?;
    w.gather_columns(&qk_column_permutation(n_heads, d_head)?)
}

pub fn unpermute_qk_head_columns(
    w: &TernaryMatrix,
    n_heads: usize,
    d_head: usize,
) -> Result<TernaryMatrix> {
    check_head_cols(w.cols(), n_heads, d_head)?;
    w.gather_columns(&invert_permutation(&qk_column_permutation(
        n_heads, d_head,
    )?))
}

/// Float-weight variant, used by the packer before ternarization.
pub fn permute_qk_head_columns_f32(
    w: &FloatMatrix,
    n_heads: usize,
    d_head: usize,
) -> Result<FloatMatrix> {
    check_head_cols(w.cols(), n_heads, d_head)?;
    w.gather_columns(&qk_column_permutation(n_heads, d_head)?)
}

#[inline]
pub fn silu(z: f32) -> f32 {
    z / (1.0 + (-z).exp())
}

pub fn swiglu(gate: &[f32], up: &[f32]) -> Result<Vec<f32>> {
    if gate.len() != up.len() {
        return Err(Error::shape(format!(
            "gate has {} elements, up has {}",
            gate.len(),
            up.len()
        )));
    }
    Ok(gate.iter().zip(up).map(|(&g, &u)| silu(g) * u).collect())
}

pub fn residual_add(a: &[f32], b: &[f32]) -> Result<Vec<f32>> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "residual operands have {} and {} elements",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x + y).collect())
}

pub fn residual_add_in_place(acc: &mut [f32], b: &[f32]) -> Result<()> {
    if acc.len() != b.len() {
        return Err(Error::shape(format!(
            "residual operands have {} and {} elements",
            acc.len(),
            b.len()
        )));
    }
    acc.iter_mut().zip(b).for_each(|(x, y)| *x += y);
    Ok(())
}
