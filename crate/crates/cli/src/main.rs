//! `ternlut` command-line front end.

mod device;
mod input;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use ternlut::bench::{bench_attention, bench_tlmm, TlmmKernel};
use ternlut::hwmodel::{binding_constraints, plan_search, PlanSpace};
use ternlut::model::Model;
use ternlut::tlmm::TlmmParams;
use ternlut::weights_io::{load_model, pack_model};
use ternlut::Error;

#[derive(Debug, Parser)]
#[command(
    name = "ternlut",
    version,
    about = "Ternary table-lookup LLM inference engine"
)]
struct Cli {
    /// Worker threads for the matmul kernels (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Ternarize, encode and write a weight file.
    Pack {
        /// JSON with `config` and either `seed` or inline `weights`.
        in_spec: PathBuf,
        out_file: PathBuf,
        #[arg(long, default_value_t = 3)]
        g: usize,
        #[arg(long, default_value_t = 4)]
        t: usize,
        #[arg(long, default_value_t = 2)]
        q: usize,
    },
    /// Greedy generation from a weight file.
    Run {
        weights_file: PathBuf,
        /// Whitespace-separated token ids.
        #[arg(long, allow_hyphen_values = true)]
        prompt_ids: String,
        #[arg(long, default_value_t = 16)]
        n_new: usize,
        /// Query tokens per prefill attention block.
        #[arg(long, default_value_t = ternlut::model::DEFAULT_N_PE)]
        n_pe: usize,
        /// Print per-phase timing and attention work.
        #[arg(long)]
        report: bool,
    },
    /// Paired kernel comparisons with equivalence checks.
    Bench {
        /// `tlmm:<naive|full|partial>[,..]` or `attn:<naive|reversed>`; repeatable.
        #[arg(long)]
        compare: Vec<String>,
        /// Comma-separated sizes: n = k for TLMM, sequence length for attention.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
        /// Activation rows for TLMM.
        #[arg(long, default_value_t = 8)]
        m: usize,
        #[arg(long, default_value_t = 3)]
        g: usize,
        #[arg(long, default_value_t = 4)]
        t: usize,
        #[arg(long, default_value_t = 2)]
        q: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 16)]
        d_head: usize,
        #[arg(long, default_value_t = 8)]
        n_pe: usize,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Choose TLMM parameters for a device.
    HwPlan {
        device_file: PathBuf,
        /// `d_model,d_ffn`.
        #[arg(long, default_value = "1536,4096")]
        dims: String,
        /// `lo..hi` (inclusive) or a comma list.
        #[arg(long, default_value = "2..4")]
        g_range: String,
        #[arg(long, default_value = "2..16")]
        q_range: String,
        #[arg(long, default_value = "1..4")]
        c_range: String,
    },
}

fn parse_range<T>(s: &str) -> Result<Vec<T>>
where
    T: FromStr + Copy + PartialOrd + std::ops::Add<Output = T> + From<u8>,
    T::Err: std::error::Error + Send + Sync + 'static,
{
    let s = s.trim();
    if let Some((lo, hi)) = s.split_once("..") {
        let hi = hi.strip_prefix('=').unwrap_or(hi);
        let (lo, hi): (T, T) = (lo.trim().parse()?, hi.trim().parse()?);
        let mut out = Vec::new();
        let mut v = lo;
        while v <= hi {
            out.push(v);
            v = v + T::from(1);
        }
        if out.is_empty() {
            bail!("empty range {s:?}");
        }
        Ok(out)
    } else {
        s.split(',')
            .map(|p| {
                p.trim()
                    .parse::<T>()
                    .with_context(|| format!("bad value {p:?} in {s:?}"))
            })
            .collect()
    }
}

fn parse_ids(s: &str) -> Result<Vec<u32>> {
    let ids = s
        .split_whitespace()
        .map(|t| {
            t.parse::<u32>()
                .with_context(|| format!("bad token id {t:?}"))
        })
        .collect::<Result<Vec<_>>>()?;
    if ids.is_empty() {
        bail!("--prompt-ids is empty");
    }
    Ok(ids)
}

fn join(ids: &[u32]) -> String {
    ids.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

fn cmd_pack(in_spec: PathBuf, out_file: PathBuf, g: usize, t: usize, q: usize) -> Result<()> {
    let text =
        fs::read_to_string(&in_spec).with_context(|| format!("reading {}", in_spec.display()))?;
    let model = input::PackInput::parse(&text)?.into_float_model()?;
    let params = TlmmParams::new(g, t, q)?;
    let bytes = pack_model(&model, params)?;
    fs::write(&out_file, &bytes).with_context(|| format!("writing {}", out_file.display()))?;
    let c = model.config;
    println!(
        "packed {} layers at G={g} T={t} Q={q}: d_model {} -> {}, d_ffn {} -> {}, {} bytes",
        c.n_layers,
        c.d_model,
        params.padded_rows(c.d_model),
        c.d_ffn,
        params.padded_rows(c.d_ffn),
        bytes.len()
    );
    println!("d_model_padded={}", params.padded_rows(c.d_model));
    println!("d_ffn_padded={}", params.padded_rows(c.d_ffn));
    println!("file_bytes={}", bytes.len());
    Ok(())
}

fn cmd_run(
    weights_file: PathBuf,
    prompt_ids: &str,
    n_new: usize,
    n_pe: usize,
    report: bool,
) -> Result<()> {
    let prompt = parse_ids(prompt_ids)?;
    let bytes =
        fs::read(&weights_file).with_context(|| format!("reading {}", weights_file.display()))?;
    let model = Model::with_n_pe(load_model(&bytes)?, n_pe)?;
    let mut session = model.session();
    let generation = session.generate(&prompt, n_new)?;
    println!("prompt: {}", join(&prompt));
    println!("generated: {}", join(&generation.tokens[prompt.len()..]));
    println!("tokens={}", join(&generation.tokens));
    if report {
        let s = session.stats();
        println!(
            "prefill: {} tokens in {:.3} ms ({:.1} tok/s), {} attention score ops",
            s.prefill_tokens,
            s.prefill_time.as_secs_f64() * 1e3,
            s.prefill_tokens_per_s(),
            s.prefill_score_ops
        );
        println!(
            "decode: {} tokens in {:.3} ms ({:.1} tok/s), {} attention score ops",
            s.decode_tokens,
            s.decode_time.as_secs_f64() * 1e3,
            s.decode_tokens_per_s(),
            s.decode_score_ops
        );
        println!("prefill_tokens={}", s.prefill_tokens);
        println!("prefill_ms={:.3}", s.prefill_time.as_secs_f64() * 1e3);
        println!("prefill_tok_s={:.1}", s.prefill_tokens_per_s());
        println!("prefill_score_ops={}", s.prefill_score_ops);
        println!("decode_tokens={}", s.decode_tokens);
        println!("decode_ms={:.3}", s.decode_time.as_secs_f64() * 1e3);
        println!("decode_tok_s={:.1}", s.decode_tokens_per_s());
        println!("decode_score_ops={}", s.decode_score_ops);
    }
    Ok(())
}

struct BenchArgs {
    compare: Vec<String>,
    sizes: Vec<usize>,
    m: usize,
    params: TlmmParams,
    heads: usize,
    d_head: usize,
    n_pe: usize,
    reps: usize,
    seed: u64,
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let mut kernels = vec![TlmmKernel::Naive];
    let mut run_tlmm = a.compare.is_empty();
    let mut run_attn = a.compare.is_empty();
    if a.compare.is_empty() {
        kernels.extend([TlmmKernel::Full, TlmmKernel::Partial]);
    }
    for c in &a.compare {
        match c.split_once(':') {
            Some(("tlmm", list)) => {
                run_tlmm = true;
                for k in list.split([',', '|']) {
                    let k: TlmmKernel = k.trim().parse()?;
                    if !kernels.contains(&k) {
                        kernels.push(k);
                    }
                }
            }
            Some(("attn", list)) => {
                for k in list.split([',', '|']) {
                    if !matches!(k.trim(), "naive" | "reversed") {
                        bail!("unknown attention schedule {k:?}");
                    }
                }
                run_attn = true;
            }
            _ => bail!("--compare expects tlmm:<kernels> or attn:<schedules>, got {c:?}"),
        }
    }
    if run_tlmm {
        let sizes = if a.sizes.is_empty() {
            vec![256]
        } else {
            a.sizes.clone()
        };
        for &n in &sizes {
            let r = bench_tlmm(a.m, n, n, a.params, &kernels, a.seed, a.reps)?;
            let naive_ms = r.timings[0].time.as_secs_f64() * 1e3;
            print!("tlmm m={} n={n} k={n}: naive {naive_ms:.3} ms", a.m);
            for t in &r.timings[1..] {
                print!(
                    ", {} {:.3} ms (naive/{} = {:.2})",
                    t.kernel.name(),
                    t.time.as_secs_f64() * 1e3,
                    t.kernel.name(),
                    r.speedup_vs_naive(t.kernel).unwrap_or(0.0)
                );
            }
            println!(", outputs identical");
            for t in &r.timings {
                println!(
                    "tlmm.{n}.{}.ms={:.4}",
                    t.kernel.name(),
                    t.time.as_secs_f64() * 1e3
                );
            }
            for t in &r.timings[1..] {
                println!(
                    "tlmm.{n}.{}.speedup={:.3}",
                    t.kernel.name(),
                    r.speedup_vs_naive(t.kernel).unwrap_or(0.0)
                );
            }
        }
    }
    if run_attn {
        let sizes = if a.sizes.is_empty() {
            vec![128]
        } else {
            a.sizes.clone()
        };
        for &n in &sizes {
            let r = bench_attention(n, a.heads, a.d_head, a.n_pe, a.seed, a.reps)?;
            println!(
                "attn N={n} heads={} d_head={} n_pe={}: score ops naive {} vs reversed {} (ratio {:.3}), time naive {:.3} ms vs reversed {:.3} ms (ratio {:.2}), max |diff| {:.2e}",
                a.heads,
                a.d_head,
                a.n_pe,
                r.naive_score_ops,
                r.reversed_score_ops,
                r.score_op_ratio(),
                r.naive_time.as_secs_f64() * 1e3,
                r.reversed_time.as_secs_f64() * 1e3,
                r.time_ratio(),
                r.max_abs_diff
            );
            println!("attn.{n}.naive_score_ops={}", r.naive_score_ops);
            println!("attn.{n}.reversed_score_ops={}", r.reversed_score_ops);
            println!("attn.{n}.score_op_ratio={:.4}", r.score_op_ratio());
            println!("attn.{n}.time_ratio={:.3}", r.time_ratio());
            println!("attn.{n}.max_abs_diff={:e}", r.max_abs_diff);
        }
    }
    println!("checks=pass");
    Ok(())
}

fn cmd_hw_plan(
    device_file: PathBuf,
    dims: &str,
    g_range: &str,
    q_range: &str,
    c_range: &str,
) -> Result<()> {
    let text = fs::read_to_string(&device_file)
        .with_context(|| format!("reading {}", device_file.display()))?;
    let device = device::parse_device(&text)?;
    let dims: Vec<u64> = parse_range(dims)?;
    let [d_model, d_ffn] = dims[..] else {
        bail!("--dims expects d_model,d_ffn");
    };
    let space = PlanSpace {
        d_model,
        d_ffn,
        g_range: parse_range(g_range)?,
        q_range: parse_range(q_range)?,
        c_range: parse_range(c_range)?,
    };
    let b = device.budget;
    let plan = match plan_search(&b, &space) {
        Ok(p) => p,
        Err(Error::Infeasible { binding }) => {
            println!(
                "no feasible plan on {}; binding: {}",
                device.name,
                binding.join(", ")
            );
            println!("feasible=false");
            println!("binding={}", binding.join(","));
            bail!("infeasible");
        }
        Err(e) => return Err(e.into()),
    };
    let binding = binding_constraints(&b, &space, &plan)?;
    let c = b.coefficients;
    println!(
        "{}: G={} T={} Q={} c_uram={} (T*Q = {})",
        device.name,
        plan.g,
        plan.t,
        plan.q,
        plan.c_uram,
        plan.parallelism()
    );
    println!(
        "  B_idx = bitlen(3^G - 1) = {}, N_TB = 3^G = {}, T = floor(72*{}/{}) = {}",
        plan.b_idx, plan.n_tb, plan.c_uram, plan.b_idx, plan.t
    );
    println!(
        "  LUT_pre = T*N_TB*{:.4} = {}, LUT_tb = T*Q*N_TB*{:.4} = {}, LUT_lpl = T*Q*{:.4} = {}, total {} / {}",
        c.lut_tree, plan.lut.pre, c.lut_entry, plan.lut.tb, c.lut_lp, plan.lut.lpl, plan.lut.total, b.lut_max
    );
    println!(
        "  padded d_model {} -> {}, d_ffn {} -> {}; URAM U = {} / {}",
        d_model, plan.d_model_padded, d_ffn, plan.d_ffn_padded, plan.uram_used, b.n_uram
    );
    println!(
        "  AXI: {} index vectors of {} bits + 1 FP16 norm weight per 768-bit transfer",
        plan.pack_capacity,
        plan.t * plan.b_idx
    );
    let binding_text = if binding.is_empty() {
        "none (largest candidate fits)".to_string()
    } else {
        binding.join(", ")
    };
    println!("  binding constraint: {binding_text}");
    for (k, v) in [
        ("g", plan.g as u64),
        ("t", plan.t),
        ("q", plan.q),
        ("c_uram", plan.c_uram),
        ("b_idx", plan.b_idx),
        ("n_tb", u64::from(plan.n_tb)),
        ("lut_pre", plan.lut.pre),
        ("lut_tb", plan.lut.tb),
        ("lut_lpl", plan.lut.lpl),
        ("lut_total", plan.lut.total),
        ("lut_max", b.lut_max),
        ("d_model_padded", plan.d_model_padded),
        ("d_ffn_padded", plan.d_ffn_padded),
        ("uram_used", plan.uram_used),
        ("n_uram", b.n_uram),
        ("pack_capacity", plan.pack_capacity),
    ] {
        println!("{k}={v}");
    }
    println!("feasible=true");
    println!("binding={}", binding.join(","));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring thread pool")?;
    }
    match cli.command {
        Command::Pack {
            in_spec,
            out_file,
            g,
            t,
            q,
        } => cmd_pack(in_spec, out_file, g, t, q),
        Command::Run {
            weights_file,
            prompt_ids,
            n_new,
            n_pe,
            report,
        } => cmd_run(weights_file, &prompt_ids, n_new, n_pe, report),
        Command::Bench {
            compare,
            sizes,
            m,
            g,
            t,
            q,
            heads,
            d_head,
            n_pe,
            reps,
            seed,
        } => cmd_bench(BenchArgs {
            compare,
            sizes,
            m,
            params: TlmmParams::new(g, t, q)?,
            heads,
            d_head,
            n_pe,
            reps,
            seed,
        }),
        Command::HwPlan {
            device_file,
            dims,
            g_range,
            q_range,
            c_range,
        } => cmd_hw_plan(device_file, &dims, &g_range, &q_range, &c_range),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match e.downcast_ref::<Error>() {
                Some(Error::Check { name, detail }) => eprintln!("check failed: {name}: {detail}"),
                _ => eprintln!("error: {e:#}"),
            }
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges() {
        assert_eq!(parse_range::<u64>("2..5").unwrap(), vec![2, 3, 4, 5]);
        assert_eq!(parse_range::<u64>("2..=3").unwrap(), vec![2, 3]);
        assert_eq!(parse_range::<usize>("3, 4").unwrap(), vec![3, 4]);
        assert!(parse_range::<u64>("5..2").is_err());
        assert!(parse_range::<u64>("a").is_err());
    }

    #[test]
    fn ids() {
        assert_eq!(parse_ids(" 1  2\t3\n").unwrap(), vec![1, 2, 3]);
        assert!(parse_ids("").is_err());
        assert!(parse_ids("1 -2").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
