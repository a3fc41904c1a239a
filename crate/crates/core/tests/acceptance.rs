//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ternlut::attention::{prefill_attention, LayerKvCache};
use ternlut::bench::{bench_attention, bench_tlmm, TlmmKernel};
use ternlut::fusion::{permute_qk_head_columns_f32, rope_consecutive, rope_interleaved, RopeCache};
use ternlut::hwmodel::{
    axi_pack_capacity, lut_budget, select_t, AddressSpace, DeviceBudget, LinearKind,
    LutCoefficients, Method,
};
use ternlut::model::{argmax, Model};
use ternlut::tlmm::{
    b_idx, encode_weights, n_tb, tlmm_matmul, tlmm_matmul_partial_table, TlmmParams,
};
use ternlut::weights_io::{load_model, read_header, save_model, toy_model, SectionKind};
use ternlut::{
    ternary_matmul_naive, FloatMatrix, ModelConfig, QuantizedActivations, TernaryMatrix,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_trits(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> TernaryMatrix {
    TernaryMatrix::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1i8..=1))
            .collect(),
    )
    .unwrap()
}

fn tlmm_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xA1);
    let (gs, ts, qs) = ([2usize, 3, 4], [1usize, 2, 4, 28], [1usize, 2, 16]);
    let mut ragged = 0;
    let instances = 1080;
    for i in 0..instances {
        // sweep every (G, T, Q) combination evenly
        let (g, t, q) = (gs[i % 3], ts[(i / 3) % 4], qs[(i / 12) % 3]);
        let params = TlmmParams::new(g, t, q).map_err(|e| e.to_string())?;
        let m = rng.random_range(1..=4);
        let n = rng.random_range(1..=96);
        let k = rng.random_range(1..=96);
        ragged += usize::from(n % (g * t) != 0);
        let a = QuantizedActivations::from_values(
            m,
            n,
            (0..m * n).map(|_| rng.random_range(-127i8..=127)).collect(),
        )
        .map_err(|e| e.to_string())?;
        let w = random_trits(&mut rng, n, k);
        let want = ternary_matmul_naive(&a, &w).map_err(|e| e.to_string())?;
        let packed = encode_weights(&w, params);
        let full = tlmm_matmul(&a, &packed).map_err(|e| e.to_string())?;
        let partial = tlmm_matmul_partial_table(&a, &packed).map_err(|e| e.to_string())?;
        ensure(full == want, || {
            format!("full table differs: G={g} T={t} Q={q} {m}x{n}x{k}")
        })?;
        ensure(partial == want, || {
            format!("partial table differs: G={g} T={t} Q={q} {m}x{n}x{k}")
        })?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(30), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "{instances} instances bit-exact ({ragged} with n not a multiple of T·G) in {:.2}s",
        elapsed.as_secs_f64()
    ))
}

fn encoding_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA2);
    for _ in 0..100 {
        let (g, t, q) = (
            rng.random_range(1..=5),
            rng.random_range(1..=8),
            rng.random_range(1..=4),
        );
        let (rows, cols) = (rng.random_range(1..=60), rng.random_range(1..=60));
        let w = random_trits(&mut rng, rows, cols);
        let params = TlmmParams::new(g, t, q).map_err(|e| e.to_string())?;
        ensure(encode_weights(&w, params).decode() == w, || {
            format!("round trip failed at G={g} T={t}")
        })?;
    }
    ensure(b_idx(3) == 5, || format!("B_idx(3) = {}", b_idx(3)))?;
    ensure(n_tb(3) == 27, || format!("N_TB(3) = {}", n_tb(3)))?;
    Ok("100 matrices round-trip; B_idx(3)=5, N_TB(3)=27".into())
}

fn dense_causal(q: &[f32], k: &[f32], v: &[f32], n: usize, h: usize, d: usize) -> Vec<f64> {
    let w = h * d;
    let mut out = vec![0.0; n * w];
    for i in 0..n {
        for hh in 0..h {
            let scores: Vec<f64> = (0..=i)
                .map(|j| {
                    (0..d)
                        .map(|c| q[i * w + hh * d + c] as f64 * k[j * w + hh * d + c] as f64)
                        .sum::<f64>()
                        / (d as f64).sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let p: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = p.iter().sum();
            for c in 0..d {
                out[i * w + hh * d + c] = (0..=i)
                    .map(|j| p[j] * v[j * w + hh * d + c] as f64)
                    .sum::<f64>()
                    / z;
            }
        }
    }
    out
}

fn prefill_attention_reference() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA3);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(1..=64);
        let h = rng.random_range(1..=8);
        let d = 2 * rng.random_range(1..=8);
        let n_pe = rng.random_range(1..=12);
        let len = n * h * d;
        let mut gen = || -> Vec<f32> { (0..len).map(|_| rng.random_range(-2.0f32..2.0)).collect() };
        let (q, k, v) = (gen(), gen(), gen());
        let mut cache = LayerKvCache::new(n, h, d);
        let got = prefill_attention(&q, &k, &v, n, n_pe, &mut cache).map_err(|e| e.to_string())?;
        let want = dense_causal(&q, &k, &v, n, h, d);
        let diff = got
            .out
            .iter()
            .zip(&want)
            .fold(0.0f64, |m, (a, b)| m.max((*a as f64 - b).abs()));
        worst = worst.max(diff);
        let expect_ops = (n * (n + 1) / 2) as u64;
        ensure(got.score_ops == expect_ops, || {
            format!("N={n}: {} score ops, expected {expect_ops}", got.score_ops)
        })?;
        ensure(diff <= 1e-5, || {
            format!("N={n} H={h} D={d} n_pe={n_pe}: max |Δ| = {diff:e}")
        })?;
    }
    Ok(format!(
        "50 instances, max |Δ| = {worst:.2e}, score ops = N(N+1)/2 on every run"
    ))
}

fn decode_prefill_consistency() -> Outcome {
    let start = Instant::now();
    let config = ModelConfig {
        d_model: 96,
        d_ffn: 256,
        n_layers: 2,
        n_heads: 4,
        max_seq: 32,
        vocab: 128,
        rms_eps: 1e-5,
    };
    let params = TlmmParams::new(3, 4, 2).map_err(|e| e.to_string())?;
    let model = Model::new(toy_model(config, params, 2024).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let prompt: Vec<u32> = vec![5, 77, 12, 31, 99, 0, 64, 18];
    let mut session = model.session();
    let mut logits = session.prefill(&prompt).map_err(|e| e.to_string())?;
    let mut tokens = prompt.clone();
    let mut recomputed = prompt.clone();
    let mut worst = 0.0f32;
    for step in 0..8 {
        let next = argmax(&logits);
        tokens.push(next);
        logits = session.decode(next).map_err(|e| e.to_string())?;
        let full = model
            .session()
            .prefill(&tokens)
            .map_err(|e| e.to_string())?;
        let diff = logits
            .iter()
            .zip(&full)
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
        worst = worst.max(diff);
        ensure(diff <= 1e-3, || {
            format!("step {step}: max |Δlogit| = {diff:e}")
        })?;
        // token chosen by the recompute path
        recomputed.push(argmax(
            &model
                .session()
                .prefill(&recomputed)
                .map_err(|e| e.to_string())?,
        ));
    }
    ensure(recomputed == tokens, || {
        format!("ids differ: {tokens:?} vs {recomputed:?}")
    })?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(10), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "8 decode steps, max |Δlogit| = {worst:.2e}, ids identical, {:.2}s",
        elapsed.as_secs_f64()
    ))
}

fn rope_permutation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA5);
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let heads = rng.random_range(1..=4);
        let d_head = 2 * rng.random_range(1..=8);
        let dm = heads * d_head;
        let pos = rng.random_range(0..512);
        let x: Vec<f32> = (0..dm).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let w = FloatMatrix::new(
            dm,
            dm,
            (0..dm * dm)
                .map(|_| rng.random_range(-1.0f32..1.0))
                .collect(),
        )
        .map_err(|e| e.to_string())?;
        let wp = permute_qk_head_columns_f32(&w, heads, d_head).map_err(|e| e.to_string())?;
        let project = |m: &FloatMatrix| -> Vec<f32> {
            (0..dm)
                .map(|j| (0..dm).map(|t| x[t] * m.row(t)[j]).sum())
                .collect()
        };
        let (q, qp) = (project(&w), project(&wp));
        let cache = RopeCache::new(512, d_head).map_err(|e| e.to_string())?;
        for h in 0..heads {
            let hs = h * d_head..(h + 1) * d_head;
            let a = rope_interleaved(&q[hs.clone()], pos, &cache).map_err(|e| e.to_string())?;
            let b = rope_consecutive(&qp[hs], pos, &cache).map_err(|e| e.to_string())?;
            for (u, v) in a.iter().zip(&b) {
                worst = worst.max((u - v).abs());
            }
        }
    }
    ensure(worst <= 1e-5, || format!("max |Δ| = {worst:e}"))?;
    Ok(format!("100 instances, max |Δ| = {worst:.2e}"))
}

fn hwmodel_constants() -> Outcome {
    let t = select_t(2, 5).map_err(|e| e.to_string())?;
    ensure(t == 28, || format!("select_T(2,5) = {t}"))?;
    let cap = axi_pack_capacity(28, 5).map_err(|e| e.to_string())?;
    ensure(cap == 5, || format!("axi_pack_capacity(28,5) = {cap}"))?;

    // exhaustive injectivity with every padded dim <= 1024
    let mut checked = 0u64;
    for (dm, tg, dff_padded) in [(1000u64, 12u64, 1020u64), (500, 84, 1008), (64, 6, 192)] {
        let dmp = dm.next_multiple_of(tg);
        let space = AddressSpace::new(dm, dmp, dff_padded, tg).map_err(|e| e.to_string())?;
        for kind in [LinearKind::Qkvo, LinearKind::Up, LinearKind::Down] {
            let (ra, rb) = space.bounds(kind);
            let x_extent = dff_padded.div_ceil(dm) + 1;
            let mut seen = vec![false; (x_extent * dmp * dm) as usize];
            for a in 0..ra {
                for b in 0..rb {
                    let (x, y, z) = space.translate(kind, a, b).map_err(|e| e.to_string())?;
                    let slot = ((x * dmp + y) * dm + z) as usize;
                    ensure(!seen[slot], || {
                        format!("{kind:?} collision at ({a},{b}) -> ({x},{y},{z})")
                    })?;
                    seen[slot] = true;
                    checked += 1;
                }
            }
        }
    }

    let coeffs = LutCoefficients::calibrate(Method::Full, 3, 28, 16, 5301.0, 11452.0, 6329.0)
        .map_err(|e| e.to_string())?;
    let budget = DeviceBudget::new(64, 23_082, coeffs).map_err(|e| e.to_string())?;
    let b = lut_budget(3, 28, 16, &budget, Method::Full).map_err(|e| e.to_string())?;
    for (name, got, want) in [
        ("pre", b.pre, 5301u64),
        ("tb", b.tb, 11452),
        ("lpl", b.lpl, 6329),
    ] {
        ensure(got.abs_diff(want) <= 1, || {
            format!("lut_{name} = {got}, expected {want} ± 1")
        })?;
    }
    Ok(format!(
        "T=28, pack capacity 5, {checked} addresses injective, LUT {}/{}/{}",
        b.pre, b.tb, b.lpl
    ))
}

fn weight_file() -> Outcome {
    let config = ModelConfig {
        d_model: 48,
        d_ffn: 96,
        n_layers: 2,
        n_heads: 4,
        max_seq: 32,
        vocab: 64,
        rms_eps: 1e-5,
    };
    let params = TlmmParams::new(3, 4, 2).map_err(|e| e.to_string())?;
    let weights = toy_model(config, params, 77).map_err(|e| e.to_string())?;
    let bytes = save_model(&weights).map_err(|e| e.to_string())?;
    let loaded = load_model(&bytes).map_err(|e| e.to_string())?;
    ensure(loaded == weights, || {
        "pack -> load is not the identity".into()
    })?;

    let header = read_header(&bytes).map_err(|e| e.to_string())?;
    let spans: Vec<(usize, usize)> = header
        .sections
        .iter()
        .filter(|d| {
            matches!(
                d.kind,
                SectionKind::Wq
                    | SectionKind::Wk
                    | SectionKind::Wv
                    | SectionKind::Wo
                    | SectionKind::Gate
                    | SectionKind::Up
                    | SectionKind::Down
            )
        })
        .map(|d| (d.offset as usize, d.length as usize))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0xA7);
    let trials = 1000;
    let mut detected = 0;
    for _ in 0..trials {
        let mut corrupt = bytes.clone();
        let (off, len) = spans[rng.random_range(0..spans.len())];
        let at = off + rng.random_range(0..len);
        let flip: u8 = rng.random_range(1..=255);
        corrupt[at] ^= flip;
        detected += usize::from(load_model(&corrupt).is_err());
    }
    let rate = detected as f64 / trials as f64;
    ensure(rate >= 0.99, || format!("detected {detected}/{trials}"))?;
    Ok(format!(
        "round trip identical; {detected}/{trials} index-byte corruptions rejected"
    ))
}

fn bench_harness() -> Outcome {
    let params = TlmmParams::new(3, 4, 2).map_err(|e| e.to_string())?;
    let kernels = [TlmmKernel::Naive, TlmmKernel::Full, TlmmKernel::Partial];
    let t = bench_tlmm(8, 384, 256, params, &kernels, 8, 3).map_err(|e| e.to_string())?;
    let a = bench_attention(128, 4, 16, 8, 8, 3).map_err(|e| e.to_string())?;
    ensure(
        a.naive_score_ops == 16384 && a.reversed_score_ops == 8256,
        || format!("score ops {} / {}", a.naive_score_ops, a.reversed_score_ops),
    )?;
    Ok(format!(
        "tlmm naive/full time ratio {:.2}, naive/partial {:.2}; attention score ops 16384 vs 8256 (ratio {:.3}), time ratio {:.2}",
        t.speedup_vs_naive(TlmmKernel::Full).unwrap_or(0.0),
        t.speedup_vs_naive(TlmmKernel::Partial).unwrap_or(0.0),
        a.score_op_ratio(),
        a.time_ratio()
    ))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("tlmm oracle equivalence", tlmm_oracle),
        ("encoding round trip and constants", encoding_round_trip),
        (
            "prefill attention vs dense reference",
            prefill_attention_reference,
        ),
        ("decode/prefill consistency", decode_prefill_consistency),
        ("rope permutation equivalence", rope_permutation),
        ("hwmodel constants", hwmodel_constants),
        ("weight file round trip and fuzzing", weight_file),
        ("benchmark harness", bench_harness),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let result = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        match result {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
