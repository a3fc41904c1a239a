//! Analytic FPGA resource model for the TLMM engine: URAM-width driven choice
//! of T, LUT budgets for the three lookup methods, URAM count, weight-buffer
//! address translation and AXI transfer packing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tlmm::{b_idx, n_tb};

/// Native URAM word width in bits.
pub const URAM_WIDTH: u64 = 72;
/// URAM depth in words.
pub const URAM_DEPTH: u64 = 4096;
/// Bits per combined AXI transfer (three 256-bit HP ports).
pub const AXI_TRANSFER_BITS: u64 = 768;
/// Bits reserved in each transfer for one FP16 RMSNorm weight.
pub const AXI_NORM_BITS: u64 = 16;

/// Per-unit LUT cost coefficients of one lookup method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LutCoefficients {
    /// LUTs per precompute-tree output.
    pub lut_tree: f64,
    /// LUTs per stored table entry.
    pub lut_entry: f64,
    /// LUTs per lookup including conversion and reduction.
    pub lut_lp: f64,
}

impl LutCoefficients {
    /// Solves the three cost equations for the coefficients given a measured
    /// breakdown at `(g, t, q)`.
    pub fn calibrate(
        method: Method,
        g: usize,
        t: usize,
        q: usize,
        pre: f64,
        tb: f64,
        lpl: f64,
    ) -> Result<Self> {
        if t == 0 || q == 0 {
            return Err(Error::invalid("T and Q must be >= 1"));
        }
        let entries = method.n_tb(g)? as f64;
        let (t, q) = (t as f64, q as f64);
        let per = |total: f64, units: f64| if units > 0.0 { total / units } else { 0.0 };
        Ok(Self {
            lut_tree: per(pre, t * entries),
            lut_entry: per(tb, t * q * entries),
            lut_lp: lpl / (t * q),
        })
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lut_tree", self.lut_tree),
            ("lut_entry", self.lut_entry),
            ("lut_lp", self.lut_lp),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!(
                    "{name} = {v} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }
}

/// Device resources available to the TLMM engine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceBudget {
    pub n_uram: u64,
    pub lut_max: u64,
    #[serde(flatten)]
    pub coefficients: LutCoefficients,
}

impl DeviceBudget {
    pub fn new(n_uram: u64, lut_max: u64, coefficients: LutCoefficients) -> Result<Self> {
        let b = Self {
            n_uram,
            lut_max,
            coefficients,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_uram == 0 {
            return Err(Error::invalid("n_uram must be >= 1"));
        }
        self.coefficients.validate()
    }
}

/// TLMM implementation style.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Pass/negate/zero selection per trit, no tables.
    Naive,
    /// Stores the `(3^G-1)/2` positive-half entries, negates on lookup.
    Partial,
    /// Stores all `3^G` entries.
    Full,
}

impl Method {
    pub fn n_tb(self, g: usize) -> Result<u32> {
        if !(1..=crate::tlmm::MAX_GROUP).contains(&g) {
            return Err(Error::invalid(format!(
                "G = {g} outside 1..={}",
                crate::tlmm::MAX_GROUP
            )));
        }
        Ok(match self {
            Method::Naive => 0,
            Method::Partial => ((n_tb(g) - 1) / 2) as u32,
            Method::Full => n_tb(g) as u32,
        })
    }
}

/// Number of index vectors per cascaded URAM word: `floor(72·c / B_idx)`.
pub fn select_t(c_uram: u64, b_idx: u64) -> Result<u64> {
    if c_uram == 0 || b_idx == 0 {
        return Err(Error::invalid("c_uram and B_idx must be >= 1"));
    }
    let t = URAM_WIDTH * c_uram / b_idx;
    if t == 0 {
        return Err(Error::invalid(format!(
            "B_idx = {b_idx} is wider than {c_uram} cascaded URAM words"
        )));
    }
    Ok(t)
}

/// LUT estimate for one configuration, each term rounded to whole LUTs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LutBreakdown {
    pub n_tb: u32,
    pub pre: u64,
    pub tb: u64,
    pub lpl: u64,
    pub total: u64,
    pub feasible: bool,
}

pub fn lut_budget(
    g: usize,
    t: u64,
    q: u64,
    budget: &DeviceBudget,
    method: Method,
) -> Result<LutBreakdown> {
    if t == 0 || q == 0 {
        return Err(Error::invalid("T and Q must be >= 1"));
    }
    budget.coefficients.validate()?;
    let n = method.n_tb(g)?;
    let c = budget.coefficients;
    let (tf, qf, nf) = (t as f64, q as f64, f64::from(n));
    let pre = tf * nf * c.lut_tree;
    let tb = tf * qf * nf * c.lut_entry;
    let lpl = tf * qf * c.lut_lp;
    let total = (pre + tb + lpl).round() as u64;
    Ok(LutBreakdown {
        n_tb: n,
        pre: pre.round() as u64,
        tb: tb.round() as u64,
        lpl: lpl.round() as u64,
        total,
        feasible: total <= budget.lut_max,
    })
}

/// URAM blocks for an `X × Y` index-vector buffer partitioned cyclically by
/// `Q/2` dual-port banks: `ceil(ceil(Y/Q)·ceil(X/(G·T)) / 4096) · c · Q/2`.
pub fn uram_count(x: u64, y: u64, g: u64, t: u64, q: u64, c_uram: u64) -> Result<u64> {
    if x == 0 || y == 0 || g == 0 || t == 0 || c_uram == 0 {
        return Err(Error::invalid("X, Y, G, T and c_uram must be >= 1"));
    }
    if q == 0 || !q.is_multiple_of(2) {
        return Err(Error::invalid(format!("Q = {q} must be even and >= 2")));
    }
    let depth = y.div_ceil(q) * x.div_ceil(g * t);
    Ok(depth.div_ceil(URAM_DEPTH) * c_uram * (q / 2))
}

/// Index vectors carried by one 768-bit transfer next to one FP16 norm weight.
pub fn axi_pack_capacity(t: u64, b_idx: u64) -> Result<u64> {
    let width = t * b_idx;
    let room = AXI_TRANSFER_BITS - AXI_NORM_BITS;
    if width == 0 || width > room {
        return Err(Error::invalid(format!(
            "index vector width {width} outside 1..={room} bits"
        )));
    }
    Ok(room / width)
}

/// Which linear a weight-buffer request belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LinearKind {
    /// q, k, v and o projections, `d_model × d_model`.
    Qkvo,
    /// Gate and up projections, `d_model × d_ffn`.
    Up,
    /// Down projection, `d_ffn × d_model`.
    Down,
}

/// Weight-buffer address space for one model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AddressSpace {
    pub d_model: u64,
    pub d_model_padded: u64,
    pub d_ffn_padded: u64,
}

impl AddressSpace {
    /// Both padded dims must be multiples of `T·G` and cover `d_model`.
    pub fn new(d_model: u64, d_model_padded: u64, d_ffn_padded: u64, tg: u64) -> Result<Self> {
        if d_model == 0 || tg == 0 {
            return Err(Error::invalid("d_model and T·G must be >= 1"));
        }
        if !d_model_padded.is_multiple_of(tg)
            || !d_ffn_padded.is_multiple_of(tg)
            || d_ffn_padded == 0
        {
            return Err(Error::invalid(format!(
                "padded dims {d_model_padded}/{d_ffn_padded} must be non-zero multiples of T·G = {tg}"
            )));
        }
        if d_model_padded < d_model {
            return Err(Error::invalid("d_model' must be >= d_model"));
        }
        Ok(Self {
            d_model,
            d_model_padded,
            d_ffn_padded,
        })
    }

    /// Valid `(a, b)` extents for `kind`.
    pub fn bounds(&self, kind: LinearKind) -> (u64, u64) {
        match kind {
            LinearKind::Qkvo => (self.d_model_padded, self.d_model),
            LinearKind::Up => (self.d_model_padded, self.d_ffn_padded),
            LinearKind::Down => (self.d_ffn_padded, self.d_model),
        }
    }

    /// Maps a 2D weight index `(a, b)` to the physical `(x, y, z)`.
    pub fn translate(&self, kind: LinearKind, a: u64, b: u64) -> Result<(u64, u64, u64)> {
        let (ra, rb) = self.bounds(kind);
        if a >= ra || b >= rb {
            return Err(Error::invalid(format!(
                "{kind:?} index ({a}, {b}) outside [0, {ra}) x [0, {rb})"
            )));
        }
        let x = match kind {
            LinearKind::Qkvo => 0,
            LinearKind::Up => b / self.d_model,
            LinearKind::Down => a / self.d_model_padded,
        };
        Ok((x, a % self.d_model_padded, b % self.d_model))
    }
}

/// Free-function form of [`AddressSpace::translate`].
pub fn addr_translate(
    kind: LinearKind,
    a: u64,
    b: u64,
    d_model: u64,
    d_model_padded: u64,
    d_ffn_padded: u64,
    tg: u64,
) -> Result<(u64, u64, u64)> {
    AddressSpace::new(d_model, d_model_padded, d_ffn_padded, tg)?.translate(kind, a, b)
}

/// One evaluated engine configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct HwPlan {
    pub g: usize,
    pub t: u64,
    pub q: u64,
    pub c_uram: u64,
    pub b_idx: u64,
    pub n_tb: u32,
    pub d_model_padded: u64,
    pub d_ffn_padded: u64,
    pub lut: LutBreakdown,
    pub uram_used: u64,
    pub pack_capacity: u64,
}

impl HwPlan {
    pub fn parallelism(&self) -> u64 {
        self.t * self.q
    }
}

/// Search space for [`plan_search`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanSpace {
    pub d_model: u64,
    pub d_ffn: u64,
    pub g_range: Vec<usize>,
    pub q_range: Vec<u64>,
    pub c_range: Vec<u64>,
}

/// Evaluates one `(G, Q, c)` point with full-storage tables; the returned
/// reasons are empty when the plan fits.
pub fn evaluate_plan(
    budget: &DeviceBudget,
    d_model: u64,
    d_ffn: u64,
    g: usize,
    q: u64,
    c: u64,
) -> Result<(HwPlan, Vec<String>)> {
    if d_model == 0 || d_ffn == 0 {
        return Err(Error::invalid("d_model and d_ffn must be >= 1"));
    }
    let bidx = u64::from(b_idx(g));
    let t = select_t(c, bidx)?;
    let tg = t * g as u64;
    let dm = d_model.next_multiple_of(tg);
    let df = d_ffn.next_multiple_of(tg);
    let lut = lut_budget(g, t, q, budget, Method::Full)?;
    let mut reasons = Vec::new();
    if !lut.feasible {
        reasons.push(format!(
            "lut_total: {} > lut_max {}",
            lut.total, budget.lut_max
        ));
    }
    let uram_used = if !q.is_multiple_of(2) {
        reasons.push(format!(
            "q_even: Q = {q} cannot be split into Q/2 dual-port banks"
        ));
        0
    } else {
        let u = uram_count(df, dm, g as u64, t, q, c)?;
        if u > budget.n_uram {
            reasons.push(format!("uram: {u} > n_uram {}", budget.n_uram));
        }
        u
    };
    let pack_capacity = match axi_pack_capacity(t, bidx) {
        Ok(p) => p,
        Err(e) => {
            reasons.push(format!("axi: {e}"));
            0
        }
    };
    let plan = HwPlan {
        g,
        t,
        q,
        c_uram: c,
        b_idx: bidx,
        n_tb: lut.n_tb,
        d_model_padded: dm,
        d_ffn_padded: df,
        lut,
        uram_used,
        pack_capacity,
    };
    Ok((plan, reasons))
}

fn reason_key(r: &str) -> String {
    r.split(':').next().unwrap_or(r).to_string()
}

/// Best feasible plan: maximal `T·Q`, then fewer URAMs, then fewer LUTs.
/// Fails with [`Error::Infeasible`] naming each constraint that rejected
/// some candidate when nothing fits.
pub fn plan_search(budget: &DeviceBudget, space: &PlanSpace) -> Result<HwPlan> {
    budget.validate()?;
    if space.g_range.is_empty() || space.q_range.is_empty() || space.c_range.is_empty() {
        return Err(Error::invalid("G, Q and c_uram ranges must be non-empty"));
    }
    let mut best: Option<HwPlan> = None;
    let mut binding = std::collections::BTreeSet::new();
    for &g in &space.g_range {
        for &q in &space.q_range {
            for &c in &space.c_range {
                let (plan, reasons) =
                    match evaluate_plan(budget, space.d_model, space.d_ffn, g, q, c) {
                        Ok(r) => r,
                        Err(e) => {
                            binding.insert(format!("G={g} c={c}: {e}"));
                            continue;
                        }
                    };
                if !reasons.is_empty() {
                    for r in reasons {
                        binding.insert(reason_key(&r));
                    }
                    continue;
                }
                let key =
                    |p: &HwPlan| (std::cmp::Reverse(p.parallelism()), p.uram_used, p.lut.total);
                if best.as_ref().is_none_or(|b| key(&plan) < key(b)) {
                    best = Some(plan);
                }
            }
        }
    }
    best.ok_or_else(|| Error::Infeasible {
        binding: binding.into_iter().collect(),
    })
}

/// Constraints that rejected candidates with more parallelism than `plan`,
/// i.e. what stops the search from going higher.
pub fn binding_constraints(
    budget: &DeviceBudget,
    space: &PlanSpace,
    plan: &HwPlan,
) -> Result<Vec<String>> {
    let mut binding = std::collections::BTreeSet::new();
    for &g in &space.g_range {
        for &q in &space.q_range {
            for &c in &space.c_range {
                let Ok((cand, reasons)) =
                    evaluate_plan(budget, space.d_model, space.d_ffn, g, q, c)
                else {
                    continue;
                };
                if cand.parallelism() > plan.parallelism() {
                    binding.extend(reasons.iter().map(|r| reason_key(r)));
                }
            }
        }
    }
    Ok(binding.into_iter().collect())
}
