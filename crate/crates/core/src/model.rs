//! Decoder layers, W8A8 LM head and greedy generation.
//!
//! One layer, per token row:
//! RMSNorm → quant → q/k/v (TLMM) → dequant → RoPE → attention → quant →
//! o-proj → dequant → residual → RMSNorm → quant → gate/up → dequant →
//! SwiGLU → quant → down → dequant → residual.

use std::time::{Duration, Instant};

use crate::attention::{decode_attention, prefill_attention, KvCache, LayerKvCache};
use crate::error::{Error, Result};
use crate::fusion::{residual_add_in_place, rope_consecutive_in_place, swiglu, RopeCache};
use crate::quantizer::{
    absmax, dequantize, quantize_absmax, quantize_rows, rms_max, rms_quantize_rows, RmsNormWeights,
};
use crate::tlmm::{tlmm_matmul, PackedWeights, TlmmParams};
use crate::types::{FloatMatrix, ModelConfig, QuantizedActivations};

/// Default number of query tokens per prefill attention block.
pub const DEFAULT_N_PE: usize = 8;

/// Packed weights of one decoder layer. `wq` and `wk` carry the per-head
/// consecutive-RoPE column permutation.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: PackedWeights,
    pub wk: PackedWeights,
    pub wv: PackedWeights,
    pub wo: PackedWeights,
    pub w_gate: PackedWeights,
    pub w_up: PackedWeights,
    pub w_down: PackedWeights,
    pub rms1: RmsNormWeights,
    pub rms2: RmsNormWeights,
}

impl LayerWeights {
    pub fn validate(&self, config: &ModelConfig, params: TlmmParams) -> Result<()> {
        let (dm, df) = (config.d_model, config.d_ffn);
        let shapes = [
            ("wq", &self.wq, dm, dm),
            ("wk", &self.wk, dm, dm),
            ("wv", &self.wv, dm, dm),
            ("wo", &self.wo, dm, dm),
            ("w_gate", &self.w_gate, dm, df),
            ("w_up", &self.w_up, dm, df),
            ("w_down", &self.w_down, df, dm),
        ];
        for (name, w, rows, cols) in shapes {
            if w.logical_rows() != rows || w.logical_cols() != cols {
                return Err(Error::shape(format!(
                    "{name} is {}x{}, expected {rows}x{cols}",
                    w.logical_rows(),
                    w.logical_cols()
                )));
            }
            if w.params() != params {
                return Err(Error::invalid(format!(
                    "{name} packed with different TLMM parameters"
                )));
            }
        }
        if self.rms1.len() != dm || self.rms2.len() != dm {
            return Err(Error::shape("RMSNorm weights must have d_model entries"));
        }
        Ok(())
    }
}

/// Int8 `[d_model × vocab]` head with one float scale per output column.
#[derive(Debug, Clone, PartialEq)]
pub struct LmHead {
    d_model: usize,
    vocab: usize,
    values: Vec<i8>,
    col_scale: Vec<f32>,
}

impl LmHead {
    pub fn new(d_model: usize, vocab: usize, values: Vec<i8>, col_scale: Vec<f32>) -> Result<Self> {
        if values.len() != d_model * vocab || col_scale.len() != vocab {
            return Err(Error::shape(format!(
                "lm head {d_model}x{vocab}: got {} values, {} scales",
                values.len(),
                col_scale.len()
            )));
        }
        if let Some(p) = values.iter().position(|&v| v == i8::MIN) {
            return Err(Error::invalid(format!("lm head value at {p} is -128")));
        }
        if let Some(s) = col_scale.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::invalid(format!(
                "lm head column scale {s} must be > 0"
            )));
        }
        Ok(Self {
            d_model,
            vocab,
            values,
            col_scale,
        })
    }

    /// Per-column ABSMAX quantization of a float `[d_model × vocab]` matrix.
    pub fn quantize(w: &FloatMatrix) -> Result<Self> {
        let (d, v) = (w.rows(), w.cols());
        let mut col_scale = vec![1.0f32; v];
        for (j, s) in col_scale.iter_mut().enumerate() {
            let m = (0..d).fold(0.0f32, |m, r| m.max(w.row(r)[j].abs()));
            if m > 0.0 {
                *s = m / 127.0;
            }
        }
        let mut values = Vec::with_capacity(d * v);
        for r in 0..d {
            for (j, &x) in w.row(r).iter().enumerate() {
                values.push((x / col_scale[j]).round().clamp(-127.0, 127.0) as i8);
            }
        }
        Self::new(d, v, values, col_scale)
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn col_scale(&self) -> &[f32] {
        &self.col_scale
    }
}

/// W8A8 head: ABSMAX-quantize `x`, int32 accumulate, dequantize with the
/// activation scale and per-column weight scale.
pub fn lm_head(x: &[f32], head: &LmHead) -> Result<Vec<f32>> {
    if x.len() != head.d_model {
        return Err(Error::shape(format!(
            "lm head input has {} elements, d_model is {}",
            x.len(),
            head.d_model
        )));
    }
    let (xq, act_scale) = quantize_absmax(x, absmax(x));
    let v = head.vocab;
    let mut acc = vec![0i32; v];
    for (t, &a) in xq.iter().enumerate() {
        if a == 0 {
            continue;
        }
        let a = i32::from(a);
        for (o, &w) in acc.iter_mut().zip(&head.values[t * v..(t + 1) * v]) {
            *o += a * i32::from(w);
        }
    }
    Ok(acc
        .iter()
        .zip(&head.col_scale)
        .map(|(&o, &s)| o as f32 * act_scale * s)
        .collect())
}

/// Everything needed to run the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub params: TlmmParams,
    /// `[vocab × d_model]`.
    pub embedding: FloatMatrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: RmsNormWeights,
    pub lm_head: LmHead,
}

impl ModelWeights {
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        if self.embedding.rows() != c.vocab || self.embedding.cols() != c.d_model {
            return Err(Error::shape(format!(
                "embedding is {}x{}, expected {}x{}",
                self.embedding.rows(),
                self.embedding.cols(),
                c.vocab,
                c.d_model
            )));
        }
        if !self.embedding.is_finite() {
            return Err(Error::Numeric(
                "embedding contains non-finite values".into(),
            ));
        }
        if self.layers.len() != c.n_layers {
            return Err(Error::shape(format!(
                "{} layers, config says {}",
                self.layers.len(),
                c.n_layers
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.validate(c, self.params)
                .map_err(|e| Error::invalid(format!("layer {i}: {e}")))?;
        }
        if self.final_norm.len() != c.d_model {
            return Err(Error::shape("final norm must have d_model entries"));
        }
        if self.lm_head.d_model() != c.d_model || self.lm_head.vocab() != c.vocab {
            return Err(Error::shape("lm head shape does not match config"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Prefill,
    Decode,
}

/// Layer output rows plus attention score ops spent.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutput {
    pub hidden: FloatMatrix,
    pub score_ops: u64,
}

/// Immutable, shareable model: weights, RoPE tables and the prefill block size.
#[derive(Debug, Clone)]
pub struct Model {
    weights: ModelWeights,
    rope: RopeCache,
    n_pe: usize,
}

fn linear(x: &QuantizedActivations, w: &PackedWeights) -> Result<FloatMatrix> {
    let o = tlmm_matmul(x, w)?;
    let k = w.logical_cols();
    let mut data = Vec::with_capacity(x.rows() * k);
    for r in 0..x.rows() {
        data.extend(dequantize(o.row(r), x.row_scale()[r], w.weight_scale()));
    }
    FloatMatrix::new(x.rows(), k, data)
}

impl Model {
    pub fn new(weights: ModelWeights) -> Result<Self> {
        Self::with_n_pe(weights, DEFAULT_N_PE)
    }

    pub fn with_n_pe(weights: ModelWeights, n_pe: usize) -> Result<Self> {
        weights.validate()?;
        if n_pe == 0 {
            return Err(Error::invalid("n_pe must be >= 1"));
        }
        let rope = RopeCache::new(weights.config.max_seq, weights.config.d_head())?;
        Ok(Self {
            weights,
            rope,
            n_pe,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.weights.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn n_pe(&self) -> usize {
        self.n_pe
    }

    pub fn new_cache(&self) -> KvCache {
        let c = self.config();
        KvCache::new(c.n_layers, c.max_seq, c.n_heads, c.d_head())
    }

    /// Runs one decoder layer over `x` (`[tokens × d_model]`).
    pub fn forward_layer(
        &self,
        x: &FloatMatrix,
        layer: &LayerWeights,
        mode: Mode,
        cache: &mut LayerKvCache,
    ) -> Result<LayerOutput> {
        let c = self.config();
        let (dm, heads, dh) = (c.d_model, c.n_heads, c.d_head());
        let tokens = x.rows();
        if x.cols() != dm || tokens == 0 {
            return Err(Error::shape(format!(
                "layer input is {}x{}, expected Nx{dm} with N >= 1",
                tokens,
                x.cols()
            )));
        }
        let start = cache.len();
        match mode {
            Mode::Decode if tokens != 1 => {
                return Err(Error::shape(format!(
                    "decode takes one token, got {tokens}"
                )))
            }
            Mode::Decode if cache.is_empty() => {
                return Err(Error::State("decode requires a populated kv cache".into()))
            }
            _ => {}
        }
        if start + tokens > c.max_seq {
            return Err(Error::Capacity(format!(
                "{} cached + {tokens} new tokens exceeds max_seq {}",
                start, c.max_seq
            )));
        }

        // attention block
        let xq = rms_quantize_rows(x, &layer.rms1, c.rms_eps)?;
        let mut q = linear(&xq, &layer.wq)?;
        let mut k = linear(&xq, &layer.wk)?;
        let v = linear(&xq, &layer.wv)?;
        for t in 0..tokens {
            for h in 0..heads {
                let hs = h * dh..(h + 1) * dh;
                rope_consecutive_in_place(&mut q.row_mut(t)[hs.clone()], start + t, &self.rope)?;
                rope_consecutive_in_place(&mut k.row_mut(t)[hs], start + t, &self.rope)?;
            }
        }
        let attn = match mode {
            Mode::Prefill => {
                prefill_attention(q.data(), k.data(), v.data(), tokens, self.n_pe, cache)?
            }
            Mode::Decode => {
                cache.append(k.data(), v.data())?;
                decode_attention(q.data(), cache)?
            }
        };
        let attn_rows = FloatMatrix::new(tokens, dm, attn.out)?;
        let o = linear(&quantize_rows(&attn_rows)?, &layer.wo)?;
        let mut h = x.clone();
        residual_add_in_place(h.data_mut(), o.data())?;

        // feed-forward block
        let hq = rms_quantize_rows(&h, &layer.rms2, c.rms_eps)?;
        let gate = linear(&hq, &layer.w_gate)?;
        let up = linear(&hq, &layer.w_up)?;
        let act = FloatMatrix::new(tokens, c.d_ffn, swiglu(gate.data(), up.data())?)?;
        let down = linear(&quantize_rows(&act)?, &layer.w_down)?;
        residual_add_in_place(h.data_mut(), down.data())?;

        Ok(LayerOutput {
            hidden: h,
            score_ops: attn.score_ops,
        })
    }

    fn embed(&self, ids: &[u32]) -> Result<FloatMatrix> {
        let c = self.config();
        let mut data = Vec::with_capacity(ids.len() * c.d_model);
        for &id in ids {
            if id as usize >= c.vocab {
                return Err(Error::invalid(format!(
                    "token id {id} outside vocab of {}",
                    c.vocab
                )));
            }
            data.extend_from_slice(self.weights.embedding.row(id as usize));
        }
        FloatMatrix::new(ids.len(), c.d_model, data)
    }

    /// Final RMSNorm followed by the W8A8 head.
    pub fn logits(&self, hidden: &[f32]) -> Result<Vec<f32>> {
        let (normed, _) = rms_max(hidden, &self.weights.final_norm, self.config().rms_eps)?;
        lm_head(&normed, &self.weights.lm_head)
    }

    fn forward(&self, ids: &[u32], mode: Mode, cache: &mut KvCache) -> Result<(Vec<f32>, u64)> {
        let mut x = self.embed(ids)?;
        let mut score_ops = 0;
        for (i, layer) in self.weights.layers.iter().enumerate() {
            let out = self.forward_layer(&x, layer, mode, cache.layer_mut(i))?;
            score_ops += out.score_ops;
            x = out.hidden;
        }
        let logits = self.logits(x.row(x.rows() - 1))?;
        Ok((logits, score_ops))
    }

    pub fn session(&self) -> Session<'_> {
        Session {
            model: self,
            cache: self.new_cache(),
            stats: RunStats::default(),
        }
    }

    /// Greedy generation: returns the prompt followed by `n_new` tokens.
    pub fn generate(&self, prompt: &[u32], n_new: usize) -> Result<Vec<u32>> {
        Ok(self.session().generate(prompt, n_new)?.tokens)
    }
}

/// Per-phase timing and attention work of a session.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunStats {
    pub prefill_tokens: usize,
    pub prefill_time: Duration,
    pub prefill_score_ops: u64,
    pub decode_tokens: usize,
    pub decode_time: Duration,
    pub decode_score_ops: u64,
}

impl RunStats {
    pub fn prefill_tokens_per_s(&self) -> f64 {
        rate(self.prefill_tokens, self.prefill_time)
    }

    pub fn decode_tokens_per_s(&self) -> f64 {
        rate(self.decode_tokens, self.decode_time)
    }
}

fn rate(n: usize, t: Duration) -> f64 {
    if t.is_zero() {
        0.0
    } else {
        n as f64 / t.as_secs_f64()
    }
}

/// Result of [`Session::generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Prompt followed by the generated ids.
    pub tokens: Vec<u32>,
    /// Logits that produced each generated id.
    pub step_logits: Vec<Vec<f32>>,
}

pub fn argmax(xs: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best as u32
}

/// One generation stream; owns its KV cache.
#[derive(Debug)]
pub struct Session<'m> {
    model: &'m Model,
    cache: KvCache,
    stats: RunStats,
}

impl Session<'_> {
    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    pub fn stats(&self) -> &RunStats {
        &self.stats
    }

    /// Processes the prompt on an empty cache; returns the last token's logits.
    pub fn prefill(&mut self, ids: &[u32]) -> Result<Vec<f32>> {
        if ids.is_empty() {
            return Err(Error::invalid("prompt must not be empty"));
        }
        let t0 = Instant::now();
        let (logits, ops) = self.model.forward(ids, Mode::Prefill, &mut self.cache)?;
        self.stats.prefill_time += t0.elapsed();
        self.stats.prefill_tokens += ids.len();
        self.stats.prefill_score_ops += ops;
        Ok(logits)
    }

    /// Appends one token and returns its logits.
    pub fn decode(&mut self, id: u32) -> Result<Vec<f32>> {
        let t0 = Instant::now();
        let (logits, ops) = self.model.forward(&[id], Mode::Decode, &mut self.cache)?;
        self.stats.decode_time += t0.elapsed();
        self.stats.decode_tokens += 1;
        self.stats.decode_score_ops += ops;
        Ok(logits)
    }

    pub fn generate(&mut self, prompt: &[u32], n_new: usize) -> Result<Generation> {
        let max_seq = self.model.config().max_seq;
        if prompt.is_empty() {
            return Err(Error::invalid("prompt must not be empty"));
        }
        if prompt.len() + n_new > max_seq {
            return Err(Error::Capacity(format!(
                "prompt {} + {n_new} new tokens exceeds max_seq {max_seq}",
                prompt.len()
            )));
        }
        let mut tokens = prompt.to_vec();
        let mut step_logits = Vec::with_capacity(n_new);
        if n_new == 0 {
            return Ok(Generation {
                tokens,
                step_logits,
            });
        }
        step_logits.push(self.prefill(prompt)?);
        loop {
            let next = argmax(step_logits.last().expect("non-empty"));
            tokens.push(next);
            if step_logits.len() == n_new {
                return Ok(Generation {
                    tokens,
                    step_logits,
                });
            }
            step_logits.push(self.decode(next)?);
        }
    }
}
