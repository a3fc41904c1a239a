//! Paired-kernel benchmark harness: lookup-table vs naive TLMM and reversed
//! vs naive prefill attention, on identical inputs with equivalence checks.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{prefill_attention, prefill_attention_naive_schedule, LayerKvCache};
use crate::error::{Error, Result};
use crate::tlmm::{encode_weights, tlmm_matmul, tlmm_matmul_partial_table, TlmmParams};
use crate::types::{ternary_matmul_naive, Int32Matrix, QuantizedActivations, TernaryMatrix};

/// Largest tolerated |Δ| between the two prefill schedules.
pub const ATTN_TOLERANCE: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TlmmKernel {
    Naive,
    Full,
    Partial,
}

impl TlmmKernel {
    pub fn name(self) -> &'static str {
        match self {
            TlmmKernel::Naive => "naive",
            TlmmKernel::Full => "full",
            TlmmKernel::Partial => "partial",
        }
    }
}

impl std::str::FromStr for TlmmKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(TlmmKernel::Naive),
            "full" => Ok(TlmmKernel::Full),
            "partial" => Ok(TlmmKernel::Partial),
            other => Err(Error::invalid(format!("unknown tlmm kernel {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelTiming {
    pub kernel: TlmmKernel,
    /// Best wall time over the repetitions.
    pub time: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TlmmBenchReport {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub params: TlmmParams,
    pub timings: Vec<KernelTiming>,
}

impl TlmmBenchReport {
    /// `time(naive) / time(kernel)`, when both were measured.
    pub fn speedup_vs_naive(&self, kernel: TlmmKernel) -> Option<f64> {
        let t = |k| {
            self.timings
                .iter()
                .find(|x| x.kernel == k)
                .map(|x| x.time.as_secs_f64())
        };
        Some(t(TlmmKernel::Naive)? / t(kernel)?.max(1e-12))
    }
}

fn best_of<T>(reps: usize, mut f: impl FnMut() -> Result<T>) -> Result<(T, Duration)> {
    let mut best = Duration::MAX;
    let mut out = None;
    for _ in 0..reps.max(1) {
        let t0 = Instant::now();
        let v = f()?;
        best = best.min(t0.elapsed());
        out = Some(v);
    }
    Ok((out.expect("at least one repetition"), best))
}

/// Times each kernel on one random `[m × n] · [n × k]` problem and checks all
/// outputs are bit-identical.
pub fn bench_tlmm(
    m: usize,
    n: usize,
    k: usize,
    params: TlmmParams,
    kernels: &[TlmmKernel],
    seed: u64,
    reps: usize,
) -> Result<TlmmBenchReport> {
    if kernels.is_empty() {
        return Err(Error::invalid("no tlmm kernels selected"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = QuantizedActivations::from_values(
        m,
        n,
        (0..m * n).map(|_| rng.random_range(-127i8..=127)).collect(),
    )?;
    let w = TernaryMatrix::new(
        n,
        k,
        (0..n * k).map(|_| rng.random_range(-1i8..=1)).collect(),
    )?;
    let packed = encode_weights(&w, params);
    let mut reference: Option<(TlmmKernel, Int32Matrix)> = None;
    let mut timings = Vec::new();
    for &kernel in kernels {
        let (out, time) = best_of(reps, || match kernel {
            TlmmKernel::Naive => ternary_matmul_naive(&a, &w),
            TlmmKernel::Full => tlmm_matmul(&a, &packed),
            TlmmKernel::Partial => tlmm_matmul_partial_table(&a, &packed),
        })?;
        match &reference {
            None => reference = Some((kernel, out)),
            Some((rk, r)) if r != &out => {
                return Err(Error::Check {
                    name: "tlmm_equivalence".into(),
                    detail: format!(
                        "{} and {} outputs differ at {m}x{n}x{k}",
                        rk.name(),
                        kernel.name()
                    ),
                })
            }
            Some(_) => {}
        }
        timings.push(KernelTiming { kernel, time });
    }
    Ok(TlmmBenchReport {
        m,
        n,
        k,
        params,
        timings,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnBenchReport {
    pub n_tokens: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub n_pe: usize,
    pub naive_score_ops: u64,
    pub reversed_score_ops: u64,
    pub naive_time: Duration,
    pub reversed_time: Duration,
    pub max_abs_diff: f32,
}

impl AttnBenchReport {
    pub fn score_op_ratio(&self) -> f64 {
        self.naive_score_ops as f64 / self.reversed_score_ops as f64
    }

    pub fn time_ratio(&self) -> f64 {
        self.naive_time.as_secs_f64() / self.reversed_time.as_secs_f64().max(1e-12)
    }
}

/// Runs both prefill schedules on the same random Q/K/V and checks outputs
/// and the `N²` / `N(N+1)/2` score-op counts.
pub fn bench_attention(
    n_tokens: usize,
    n_heads: usize,
    d_head: usize,
    n_pe: usize,
    seed: u64,
    reps: usize,
) -> Result<AttnBenchReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = n_tokens * n_heads * d_head;
    let mut gen = || -> Vec<f32> { (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect() };
    let (q, k, v) = (gen(), gen(), gen());
    let (naive, naive_time) = best_of(reps, || {
        prefill_attention_naive_schedule(&q, &k, &v, n_tokens, n_heads, d_head, n_pe)
    })?;
    let (reversed, reversed_time) = best_of(reps, || {
        let mut cache = LayerKvCache::new(n_tokens, n_heads, d_head);
        prefill_attention(&q, &k, &v, n_tokens, n_pe, &mut cache)
    })?;
    let n = n_tokens as u64;
    let check = |name: &str, ok: bool, detail: String| -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(Error::Check {
                name: name.into(),
                detail,
            })
        }
    };
    check(
        "attn_naive_score_ops",
        naive.score_ops == n * n,
        format!("{} != N^2 = {}", naive.score_ops, n * n),
    )?;
    check(
        "attn_reversed_score_ops",
        reversed.score_ops == n * (n + 1) / 2,
        format!("{} != N(N+1)/2 = {}", reversed.score_ops, n * (n + 1) / 2),
    )?;
    let max_abs_diff = naive
        .out
        .iter()
        .zip(&reversed.out)
        .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
    check(
        "attn_equivalence",
        max_abs_diff <= ATTN_TOLERANCE,
        format!("max |naive - reversed| = {max_abs_diff:e} > {ATTN_TOLERANCE:e}"),
    )?;
    Ok(AttnBenchReport {
        n_tokens,
        n_heads,
        d_head,
        n_pe,
        naive_score_ops: naive.score_ops,
        reversed_score_ops: reversed.score_ops,
        naive_time,
        reversed_time,
        max_abs_diff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tlmm_bench_runs_and_agrees() {
        let params = TlmmParams::new(3, 4, 2).unwrap();
        let kernels = [TlmmKernel::Naive, TlmmKernel::Full, TlmmKernel::Partial];
        let r = bench_tlmm(4, 50, 20, params, &kernels, 1, 1).unwrap();
        assert_eq!(r.timings.len(), 3);
        assert!(r.speedup_vs_naive(TlmmKernel::Full).unwrap() > 0.0);
        assert!(bench_tlmm(4, 50, 20, params, &[], 1, 1).is_err());
    }

    #[test]
    fn attention_bench_counts() {
        let r = bench_attention(128, 2, 8, 8, 3, 1).unwrap();
        assert_eq!(r.naive_score_ops, 16384);
        assert_eq!(r.reversed_score_ops, 8256);
        assert!((r.score_op_ratio() - 1.984).abs() < 1e-3);
    }

    #[test]
    fn kernel_names_parse() {
        for k in [TlmmKernel::Naive, TlmmKernel::Full, TlmmKernel::Partial] {
            assert_eq!(k.name().parse::<TlmmKernel>().unwrap(), k);
        }
        assert!("fast".parse::<TlmmKernel>().is_err());
    }
}
