//! Attention engines and the KV cache.
//!
//! Prefill uses a fused online-softmax kernel (flash-attention with block
//! size 1) scheduled newest-query-block first: a block of `n_pe` queries
//! streams every resident key/value, then the block's own positions are
//! evicted from the resident window, so no causally masked pair is ever
//! scored. The score-op count is exactly `N(N+1)/2` instead of `N²`.
//!
//! Decode splits the work into two streaming passes over the cache: scores
//! with a running max and exponent sum, then the value aggregation.
//!
//! Scores, softmax state and value sums are kept in f64 and rounded to f32
//! once per output element, so the prefill and decode orderings agree well
//! below one f32 ulp and the int8 requantization after attention sees the
//! same values either way.

use crate::error::{Error, Result};

/// Running online-softmax triple `(m, ℓ, o)` for one (query, head).
#[derive(Debug, Clone, PartialEq)]
pub struct AttnState {
    m: f64,
    ell: f64,
    o: Vec<f64>,
}

impl AttnState {
    pub fn new(d_head: usize) -> Self {
        Self {
            m: f64::NEG_INFINITY,
            ell: 0.0,
            o: vec![0.0; d_head],
        }
    }

    pub fn max(&self) -> f64 {
        self.m
    }

    pub fn denominator(&self) -> f64 {
        self.ell
    }

    pub fn numerator(&self) -> &[f64] {
        &self.o
    }

    /// `m' = max(m, s)`, `ℓ' = e^(m-m')ℓ + e^(s-m')`, `o' = e^(m-m')o + e^(s-m')v`.
    #[inline]
    pub fn update(&mut self, s: f64, v: &[f32]) {
        debug_assert_eq!(v.len(), self.o.len());
        let m_new = self.m.max(s);
        let rescale = (self.m - m_new).exp();
        let w = (s - m_new).exp();
        self.ell = rescale * self.ell + w;
        for (o, &x) in self.o.iter_mut().zip(v) {
            *o = rescale * *o + w * f64::from(x);
        }
        self.m = m_new;
    }

    /// `o / ℓ`.
    pub fn finish(&self) -> Vec<f32> {
        self.o.iter().map(|v| (v / self.ell) as f32).collect()
    }

    fn finish_into(&self, out: &mut [f32]) {
        for (d, v) in out.iter_mut().zip(&self.o) {
            *d = (v / self.ell) as f32;
        }
    }
}

/// Applies one score/value pair to a state; functional form of
/// [`AttnState::update`].
pub fn online_update(mut state: AttnState, s: f64, v: &[f32]) -> AttnState {
    state.update(s, v);
    state
}

/// K (post-RoPE) and V for one layer, `[max_seq × n_heads × d_head]`,
/// canonical position order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKvCache {
    max_seq: usize,
    n_heads: usize,
    d_head: usize,
    len: usize,
    k: Vec<f32>,
    v: Vec<f32>,
}

impl LayerKvCache {
    pub fn new(max_seq: usize, n_heads: usize, d_head: usize) -> Self {
        let cap = max_seq * n_heads * d_head;
        Self {
            max_seq,
            n_heads,
            d_head,
            len: 0,
            k: vec![0.0; cap],
            v: vec![0.0; cap],
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn max_seq(&self) -> usize {
        self.max_seq
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    fn width(&self) -> usize {
        self.n_heads * self.d_head
    }

    /// Appends one token's K and V rows (`n_heads · d_head` each).
    pub fn append(&mut self, k: &[f32], v: &[f32]) -> Result<()> {
        let w = self.width();
        if k.len() != w || v.len() != w {
            return Err(Error::shape(format!(
                "kv row lengths {}/{} != {w}",
                k.len(),
                v.len()
            )));
        }
        if self.len >= self.max_seq {
            return Err(Error::Capacity(format!(
                "kv cache full at {} tokens",
                self.max_seq
            )));
        }
        let off = self.len * w;
        self.k[off..off + w].copy_from_slice(k);
        self.v[off..off + w].copy_from_slice(v);
        self.len += 1;
        Ok(())
    }

    #[inline]
    pub fn key(&self, pos: usize, head: usize) -> &[f32] {
        let off = (pos * self.n_heads + head) * self.d_head;
        &self.k[off..off + self.d_head]
    }

    #[inline]
    pub fn value(&self, pos: usize, head: usize) -> &[f32] {
        let off = (pos * self.n_heads + head) * self.d_head;
        &self.v[off..off + self.d_head]
    }

    pub fn clear(&mut self) {
        self.len = 0;
    }
}

/// Per-layer caches for a whole model.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    layers: Vec<LayerKvCache>,
}

impl KvCache {
    pub fn new(n_layers: usize, max_seq: usize, n_heads: usize, d_head: usize) -> Self {
        Self {
            layers: (0..n_layers)
                .map(|_| LayerKvCache::new(max_seq, n_heads, d_head))
                .collect(),
        }
    }

    /// Tokens cached (taken from the first layer).
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, LayerKvCache::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layer(&self, i: usize) -> &LayerKvCache {
        &self.layers[i]
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut LayerKvCache {
        &mut self.layers[i]
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn clear(&mut self) {
        self.layers.iter_mut().for_each(LayerKvCache::clear);
    }
}

/// Attention rows plus the number of (query, key) score evaluations.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnOutput {
    /// `[tokens × n_heads · d_head]`, canonical token order.
    pub out: Vec<f32>,
    pub score_ops: u64,
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

fn check_prefill_inputs(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    n_tokens: usize,
    n_heads: usize,
    d_head: usize,
    n_pe: usize,
) -> Result<()> {
    if n_tokens == 0 || n_pe == 0 {
        return Err(Error::invalid(format!(
            "need N >= 1 and n_pe >= 1, got N={n_tokens}, n_pe={n_pe}"
        )));
    }
    let len = n_tokens * n_heads * d_head;
    if q.len() != len || k.len() != len || v.len() != len {
        return Err(Error::shape(format!(
            "q/k/v lengths {}/{}/{} != N*heads*d_head = {len}",
            q.len(),
            k.len(),
            v.len()
        )));
    }
    Ok(())
}

/// Query blocks in processing order, newest first; a remainder block (when
/// `n_pe` does not divide `n`) is processed first.
pub fn reverse_blocks(n: usize, n_pe: usize) -> Vec<std::ops::Range<usize>> {
    let mut blocks = Vec::new();
    let mut hi = n;
    let first = match n % n_pe {
        0 => n_pe,
        r => r,
    };
    let mut size = first.min(n);
    while hi > 0 {
        let lo = hi - size.min(hi);
        blocks.push(lo..hi);
        hi = lo;
        size = n_pe;
    }
    blocks
}

/// Causal prefill attention over an empty cache using the reversed block
/// schedule. K and V are appended to `cache` in canonical order and the
/// resident window is read back from it.
pub fn prefill_attention(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    n_tokens: usize,
    n_pe: usize,
    cache: &mut LayerKvCache,
) -> Result<AttnOutput> {
    let (n_heads, d_head) = (cache.n_heads(), cache.d_head());
    check_prefill_inputs(q, k, v, n_tokens, n_heads, d_head, n_pe)?;
    if !cache.is_empty() {
        return Err(Error::State(format!(
            "prefill expects an empty kv cache, found {} tokens",
            cache.len()
        )));
    }
    if n_tokens > cache.max_seq() {
        return Err(Error::Capacity(format!(
            "prompt of {n_tokens} tokens exceeds max_seq {}",
            cache.max_seq()
        )));
    }
    let w = n_heads * d_head;
    for t in 0..n_tokens {
        cache.append(&k[t * w..(t + 1) * w], &v[t * w..(t + 1) * w])?;
    }
    let cache = &*cache;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut out = vec![0.0f32; n_tokens * w];
    let mut score_ops = 0u64;
    // resident kv window is [0, window_end)
    let mut window_end = n_tokens;
    for block in reverse_blocks(n_tokens, n_pe) {
        let mut states: Vec<AttnState> = (0..block.len() * n_heads)
            .map(|_| AttnState::new(d_head))
            .collect();
        for j in 0..window_end {
            for (pe, i) in block.clone().enumerate() {
                if j > i {
                    continue;
                }
                score_ops += 1;
                let qrow = &q[i * w..(i + 1) * w];
                for h in 0..n_heads {
                    let s = dot(&qrow[h * d_head..(h + 1) * d_head], cache.key(j, h)) * scale;
                    states[pe * n_heads + h].update(s, cache.value(j, h));
                }
            }
        }
        for (pe, i) in block.clone().enumerate() {
            for h in 0..n_heads {
                let off = i * w + h * d_head;
                states[pe * n_heads + h].finish_into(&mut out[off..off + d_head]);
            }
        }
        // evict this block's trailing positions
        window_end = block.start;
    }
    Ok(AttnOutput { out, score_ops })
}

/// Baseline schedule: query blocks oldest first, every block streams all `N`
/// keys and masks `j > i` after scoring. Same outputs, `N²` score ops.
pub fn prefill_attention_naive_schedule(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    n_tokens: usize,
    n_heads: usize,
    d_head: usize,
    n_pe: usize,
) -> Result<AttnOutput> {
    check_prefill_inputs(q, k, v, n_tokens, n_heads, d_head, n_pe)?;
    let w = n_heads * d_head;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut out = vec![0.0f32; n_tokens * w];
    let mut score_ops = 0u64;
    let mut lo = 0;
    while lo < n_tokens {
        let hi = (lo + n_pe).min(n_tokens);
        let mut states: Vec<AttnState> = (0..(hi - lo) * n_heads)
            .map(|_| AttnState::new(d_head))
            .collect();
        for j in 0..n_tokens {
            for i in lo..hi {
                score_ops += 1;
                for h in 0..n_heads {
                    let hs = h * d_head..(h + 1) * d_head;
                    let s = dot(&q[i * w..][hs.clone()], &k[j * w..][hs.clone()]) * scale;
                    if j > i {
                        // causal mask applied after the score is computed
                        std::hint::black_box(s);
                        continue;
                    }
                    states[(i - lo) * n_heads + h].update(s, &v[j * w..][hs]);
                }
            }
        }
        for i in lo..hi {
            for h in 0..n_heads {
                let off = i * w + h * d_head;
                states[(i - lo) * n_heads + h].finish_into(&mut out[off..off + d_head]);
            }
        }
        lo = hi;
    }
    Ok(AttnOutput { out, score_ops })
}

/// Single-query attention against every cached position, two streaming
/// passes per head.
pub fn decode_attention(q: &[f32], cache: &LayerKvCache) -> Result<AttnOutput> {
    let (n_heads, d_head) = (cache.n_heads(), cache.d_head());
    if q.len() != n_heads * d_head {
        return Err(Error::shape(format!(
            "query has {} elements, expected {}",
            q.len(),
            n_heads * d_head
        )));
    }
    if cache.is_empty() {
        return Err(Error::State("decode attention on an empty kv cache".into()));
    }
    let len = cache.len();
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut out = vec![0.0f32; n_heads * d_head];
    let mut scores = vec![0.0f64; len];
    let mut acc = vec![0.0f64; d_head];
    for h in 0..n_heads {
        let qh = &q[h * d_head..(h + 1) * d_head];
        // pass 1: K stream, scores buffered with running max and exp-sum
        let mut m = f64::NEG_INFINITY;
        let mut ell = 0.0f64;
        for (j, s_slot) in scores.iter_mut().enumerate() {
            let s = dot(qh, cache.key(j, h)) * scale;
            let m_new = m.max(s);
            ell = ell * (m - m_new).exp() + (s - m_new).exp();
            m = m_new;
            *s_slot = s;
        }
        // pass 2: V stream
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (j, &s) in scores.iter().enumerate() {
            let p = (s - m).exp() / ell;
            for (a, &x) in acc.iter_mut().zip(cache.value(j, h)) {
                *a += p * f64::from(x);
            }
        }
        for (o, a) in out[h * d_head..(h + 1) * d_head].iter_mut().zip(&acc) {
            *o = *a as f32;
        }
    }
    Ok(AttnOutput {
        out,
        score_ops: len as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    }

    /// Dense softmax over explicit scores in f64.
    fn dense_softmax_mix(scores: &[f32], values: &[Vec<f32>]) -> Vec<f64> {
        let m = scores
            .iter()
            .fold(f64::NEG_INFINITY, |a, &s| a.max(s as f64));
        let ws: Vec<f64> = scores.iter().map(|&s| (s as f64 - m).exp()).collect();
        let z: f64 = ws.iter().sum();
        let d = values[0].len();
        (0..d)
            .map(|c| {
                ws.iter()
                    .zip(values)
                    .map(|(w, v)| w * v[c] as f64)
                    .sum::<f64>()
                    / z
            })
            .collect()
    }

    /// Dense causal attention reference, `[N × H × D]` layout, f64.
    fn dense_causal(q: &[f32], k: &[f32], v: &[f32], n: usize, h: usize, d: usize) -> Vec<f64> {
        let w = h * d;
        let mut out = vec![0.0; n * w];
        for i in 0..n {
            for hh in 0..h {
                let scores: Vec<f32> = (0..=i)
                    .map(|j| {
                        let s: f64 = (0..d)
                            .map(|c| q[i * w + hh * d + c] as f64 * k[j * w + hh * d + c] as f64)
                            .sum();
                        (s / (d as f64).sqrt()) as f32
                    })
                    .collect();
                let vals: Vec<Vec<f32>> = (0..=i)
                    .map(|j| v[j * w + hh * d..j * w + hh * d + d].to_vec())
                    .collect();
                let mix = dense_softmax_mix(&scores, &vals);
                out[i * w + hh * d..i * w + hh * d + d].copy_from_slice(&mix);
            }
        }
        out
    }

    #[test]
    fn first_update_reduces_to_value() {
        let s = online_update(AttnState::new(3), 0.7, &[1.0, -2.0, 3.0]);
        assert_eq!(s.max(), 0.7);
        assert_eq!(s.denominator(), 1.0);
        assert_eq!(s.numerator(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn equal_scores_average() {
        let mut s = AttnState::new(2);
        s.update(1.5, &[1.0, 4.0]);
        s.update(1.5, &[3.0, 0.0]);
        let out = s.finish();
        assert!((out[0] - 2.0).abs() < 1e-6 && (out[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn online_matches_dense_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scores: Vec<f32> = (0..40).map(|_| rng.random_range(-5.0f32..5.0)).collect();
        let values: Vec<Vec<f32>> = (0..40).map(|_| rand_vec(&mut rng, 6)).collect();
        let mut st = AttnState::new(6);
        let mut prev_m = f64::NEG_INFINITY;
        for (s, v) in scores.iter().zip(&values) {
            st.update(f64::from(*s), v);
            assert!(st.max() >= prev_m);
            assert!(st.denominator() > 0.0);
            prev_m = st.max();
        }
        let expect = dense_softmax_mix(&scores, &values);
        for (a, b) in st.finish().iter().zip(&expect) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }

    #[test]
    fn block_order() {
        assert_eq!(reverse_blocks(8, 4), vec![4..8, 0..4]);
        assert_eq!(reverse_blocks(10, 4), vec![8..10, 4..8, 0..4]);
        assert_eq!(reverse_blocks(3, 8), vec![0..3]);
        assert_eq!(reverse_blocks(1, 1), vec![0..1]);
    }

    #[test]
    fn prefill_single_token_is_value() {
        let mut cache = LayerKvCache::new(4, 2, 3);
        let q = [0.3, -0.1, 0.2, 0.9, 0.4, -0.6];
        let k = [0.5, 0.5, 0.5, -1.0, 0.0, 1.0];
        let v = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let r = prefill_attention(&q, &k, &v, 1, 8, &mut cache).unwrap();
        assert_eq!(r.out, v.to_vec());
        assert_eq!(r.score_ops, 1);
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn prefill_matches_dense_and_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, h, d) = (8, 2, 4);
        let (q, k, v) = (
            rand_vec(&mut rng, n * h * d),
            rand_vec(&mut rng, n * h * d),
            rand_vec(&mut rng, n * h * d),
        );
        let mut cache = LayerKvCache::new(16, h, d);
        let r = prefill_attention(&q, &k, &v, n, 4, &mut cache).unwrap();
        let expect = dense_causal(&q, &k, &v, n, h, d);
        for (a, b) in r.out.iter().zip(&expect) {
            assert!((*a as f64 - b).abs() <= 1e-5);
        }
        assert_eq!(r.score_ops, (n * (n + 1) / 2) as u64);
        // cache holds canonical order
        assert_eq!(cache.key(3, 1), &k[3 * 8 + 4..3 * 8 + 8]);

        let naive = prefill_attention_naive_schedule(&q, &k, &v, n, h, d, 4).unwrap();
        assert_eq!(naive.score_ops, (n * n) as u64);
        for (a, b) in naive.out.iter().zip(&r.out) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn prefill_errors() {
        let mut cache = LayerKvCache::new(2, 1, 2);
        let x = vec![0.0; 6];
        assert!(matches!(
            prefill_attention(&x, &x, &x, 3, 2, &mut cache),
            Err(Error::Capacity(_))
        ));
        assert!(prefill_attention(&x, &x, &x, 3, 0, &mut cache).is_err());
        assert!(prefill_attention(&x[..4], &x, &x, 3, 2, &mut cache).is_err());
        let y = vec![0.0; 2];
        prefill_attention(&y, &y, &y, 1, 1, &mut cache).unwrap();
        assert!(matches!(
            prefill_attention(&y, &y, &y, 1, 1, &mut cache),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn decode_cases() {
        let mut cache = LayerKvCache::new(32, 2, 4);
        let q = [0.1, 0.2, 0.3, 0.4, -0.1, 0.0, 0.5, 1.0];
        assert!(matches!(decode_attention(&q, &cache), Err(Error::State(_))));
        let v0: Vec<f32> = (0..8).map(|i| i as f32).collect();
        cache.append(&[0.5; 8], &v0).unwrap();
        assert_eq!(decode_attention(&q, &cache).unwrap().out, v0);

        // uniform keys give the mean of cached values
        let mut cache = LayerKvCache::new(8, 1, 2);
        let vals = [[1.0, 0.0], [3.0, 2.0], [-1.0, 4.0]];
        for v in &vals {
            cache.append(&[0.2, 0.2], v).unwrap();
        }
        let out = decode_attention(&[0.7, -0.3], &cache).unwrap().out;
        assert!((out[0] - 1.0).abs() < 1e-6 && (out[1] - 2.0).abs() < 1e-6);
        assert!(decode_attention(&[0.7], &cache).is_err());
    }

    #[test]
    fn decode_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (len, h, d) = (17, 3, 8);
        let mut cache = LayerKvCache::new(32, h, d);
        let mut ks = Vec::new();
        let mut vs = Vec::new();
        for _ in 0..len {
            let (k, v) = (rand_vec(&mut rng, h * d), rand_vec(&mut rng, h * d));
            cache.append(&k, &v).unwrap();
            ks.push(k);
            vs.push(v);
        }
        let q = rand_vec(&mut rng, h * d);
        let r = decode_attention(&q, &cache).unwrap();
        assert_eq!(r.score_ops, len as u64);
        for hh in 0..h {
            let scores: Vec<f32> = ks
                .iter()
                .map(|k| {
                    let s: f64 = (0..d)
                        .map(|c| q[hh * d + c] as f64 * k[hh * d + c] as f64)
                        .sum();
                    (s / (d as f64).sqrt()) as f32
                })
                .collect();
            let vals: Vec<Vec<f32>> = vs
                .iter()
                .map(|v| v[hh * d..(hh + 1) * d].to_vec())
                .collect();
            let expect = dense_softmax_mix(&scores, &vals);
            for (a, b) in r.out[hh * d..(hh + 1) * d].iter().zip(&expect) {
                assert!((*a as f64 - b).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn decode_continues_prefill() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, h, d) = (9, 2, 4);
        let w = h * d;
        let (q, k, v) = (
            rand_vec(&mut rng, (n + 1) * w),
            rand_vec(&mut rng, (n + 1) * w),
            rand_vec(&mut rng, (n + 1) * w),
        );
        let mut full = LayerKvCache::new(16, h, d);
        let all = prefill_attention(&q, &k, &v, n + 1, 4, &mut full).unwrap();
        let mut cache = LayerKvCache::new(16, h, d);
        prefill_attention(&q[..n * w], &k[..n * w], &v[..n * w], n, 4, &mut cache).unwrap();
        cache.append(&k[n * w..], &v[n * w..]).unwrap();
        let step = decode_attention(&q[n * w..], &cache).unwrap();
        for (a, b) in step.out.iter().zip(&all.out[n * w..]) {
            assert!((a - b).abs() <= 1e-4);
        }
    }

    proptest! {
        #[test]
        fn online_softmax_is_order_free(seed in any::<u64>(), len in 1usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<f32> = (0..len).map(|_| rng.random_range(-4.0f32..4.0)).collect();
            let values: Vec<Vec<f32>> = (0..len).map(|_| rand_vec(&mut rng, 4)).collect();
            let mut order: Vec<usize> = (0..len).collect();
            order.reverse();
            order.rotate_left(len / 3);
            let mut a = AttnState::new(4);
            let mut b = AttnState::new(4);
            for i in 0..len {
                a.update(f64::from(scores[i]), &values[i]);
                b.update(f64::from(scores[order[i]]), &values[order[i]]);
            }
            for (x, y) in a.finish().iter().zip(b.finish()) {
                prop_assert!((x - y).abs() <= 1e-5);
            }
        }

        #[test]
        fn prefill_counts_triangle(n in 1usize..40, n_pe in 1usize..12) {
            let x = vec![0.25f32; n * 2];
            let mut cache = LayerKvCache::new(n, 1, 2);
            let r = prefill_attention(&x, &x, &x, n, n_pe, &mut cache).unwrap();
            prop_assert_eq!(r.score_ops, (n * (n + 1) / 2) as u64);
        }
    }
}
