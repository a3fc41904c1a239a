//! Table-lookup ternary matmul.
//!
//! Offline, every group of `G` consecutive input-dim trits of a weight column
//! is encoded as one base-3 index (`digit = trit + 1`, group element 0 is the
//! least-significant digit). `T` consecutive indices form one index-vector,
//! packed little-endian into `T · B_idx` bits. Input rows are padded up to a
//! multiple of `T · G` with the all-zero trit group.
//!
//! Online, for each token and each `T · G` slice of its activations, `T`
//! tables holding all `3^G` partial sums are built; the packed index-vectors
//! then address those tables, `Q` columns at a time, and the hits are
//! accumulated into int32 outputs.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::types::{Int32Matrix, QuantizedActivations, TernaryMatrix};

/// Largest supported group size (table entries are stored as `i16`).
pub const MAX_GROUP: usize = 16;

/// Accumulation stays exact in `i32` below this many input features.
const MAX_INPUT_DIM: usize = 1 << 24;

/// Kernel shape `(G, T, Q)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TlmmParams {
    group: usize,
    tables: usize,
    lanes: usize,
}

impl TlmmParams {
    /// `group` = trits per index (G), `tables` = tables per step (T),
    /// `lanes` = parallel lookups per table (Q).
    pub fn new(group: usize, tables: usize, lanes: usize) -> Result<Self> {
        if !(1..=MAX_GROUP).contains(&group) {
            return Err(Error::invalid(format!(
                "group size G={group} outside 1..={MAX_GROUP}"
            )));
        }
        if tables == 0 || lanes == 0 {
            return Err(Error::invalid(format!(
                "T={tables} and Q={lanes} must both be >= 1"
            )));
        }
        Ok(Self {
            group,
            tables,
            lanes,
        })
    }

    pub fn group(&self) -> usize {
        self.group
    }

    pub fn tables(&self) -> usize {
        self.tables
    }

    pub fn lanes(&self) -> usize {
        self.lanes
    }

    /// `N_TB = 3^G`.
    pub fn n_tb(&self) -> usize {
        n_tb(self.group)
    }

    /// `B_idx = ceil(log2(3^G))`.
    pub fn b_idx(&self) -> u32 {
        b_idx(self.group)
    }

    /// `B_TB = 8 + ceil(log2 G)`: bits needed by one table entry.
    pub fn b_tb(&self) -> u32 {
        8 + ceil_log2(self.group as u64)
    }

    /// Input rows consumed per step, `T · G`.
    pub fn stride(&self) -> usize {
        self.tables * self.group
    }

    pub fn vector_bits(&self) -> usize {
        self.tables * self.b_idx() as usize
    }

    pub fn vector_bytes(&self) -> usize {
        self.vector_bits().div_ceil(8)
    }

    pub fn padded_rows(&self, rows: usize) -> usize {
        rows.div_ceil(self.stride()) * self.stride()
    }

    /// Index of the all-zero trit group, `(3^G - 1) / 2`.
    pub fn zero_index(&self) -> u32 {
        ((self.n_tb() - 1) / 2) as u32
    }
}

pub fn n_tb(group: usize) -> usize {
    3usize.pow(group as u32)
}

pub fn b_idx(group: usize) -> u32 {
    // 3^G is never a power of two, so ceil(log2 N) is the bit length of N - 1.
    ceil_log2(n_tb(group) as u64)
}

fn ceil_log2(v: u64) -> u32 {
    if v <= 1 {
        0
    } else {
        64 - (v - 1).leading_zeros()
    }
}

/// Base-3 index of a trit group.
pub fn encode_group(trits: &[i8]) -> u32 {
    trits
        .iter()
        .rev()
        .fold(0u32, |acc, &t| acc * 3 + (t + 1) as u32)
}

/// Inverse of [`encode_group`] for a group of `group` trits.
pub fn decode_index(mut index: u32, group: usize) -> Vec<i8> {
    (0..group)
        .map(|_| {
            let d = (index % 3) as i8;
            index /= 3;
            d - 1
        })
        .collect()
}

/// Base-3 group-encoded weight matrix with padding metadata and dequant scale.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedWeights {
    logical_rows: usize,
    logical_cols: usize,
    padded_rows: usize,
    params: TlmmParams,
    weight_scale: f32,
    data: Vec<u8>,
}

/// Structural problem in a packed index payload, located by byte offset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct PayloadViolation {
    pub byte_offset: usize,
    pub message: String,
}

impl PackedWeights {
    /// Rebuilds packed weights from a raw index-vector payload, re-checking
    /// every invariant (index range, zero padding, unused bits).
    pub fn from_raw_parts(
        logical_rows: usize,
        logical_cols: usize,
        params: TlmmParams,
        weight_scale: f32,
        data: Vec<u8>,
    ) -> Result<Self> {
        Self::from_raw_parts_located(logical_rows, logical_cols, params, weight_scale, data)
            .map_err(|v| Error::invalid(format!("payload byte {}: {}", v.byte_offset, v.message)))
    }

    pub(crate) fn from_raw_parts_located(
        logical_rows: usize,
        logical_cols: usize,
        params: TlmmParams,
        weight_scale: f32,
        data: Vec<u8>,
    ) -> std::result::Result<Self, PayloadViolation> {
        let violation = |byte_offset: usize, message: String| PayloadViolation {
            byte_offset,
            message,
        };
        if logical_rows == 0 || logical_cols == 0 {
            return Err(violation(0, "empty weight matrix".into()));
        }
        if !(weight_scale.is_finite() && weight_scale > 0.0) {
            return Err(violation(
                0,
                format!("weight scale {weight_scale} must be > 0"),
            ));
        }
        let padded_rows = params.padded_rows(logical_rows);
        let blocks = padded_rows / params.stride();
        let vb = params.vector_bytes();
        let expected = blocks * logical_cols * vb;
        if data.len() != expected {
            return Err(violation(
                data.len().min(expected),
                format!("payload is {} bytes, expected {expected}", data.len()),
            ));
        }
        let pw = Self {
            logical_rows,
            logical_cols,
            padded_rows,
            params,
            weight_scale,
            data,
        };
        let (g, t_count) = (params.group(), params.tables());
        let n_tb = params.n_tb() as u32;
        let zero = params.zero_index();
        let b = params.b_idx() as usize;
        let used_bits = params.vector_bits();
        let mut idx = vec![0u32; t_count];
        for blk in 0..blocks {
            for col in 0..logical_cols {
                let vec_off = (blk * logical_cols + col) * vb;
                pw.unpack_vector(blk, col, &mut idx);
                for (t, &ix) in idx.iter().enumerate() {
                    let loc = vec_off + (t * b) / 8;
                    if ix >= n_tb {
                        return Err(violation(
                            loc,
                            format!("index {ix} >= 3^{g} at block {blk}, column {col}, slot {t}"),
                        ));
                    }
                    // Groups lying wholly or partly in the padding must keep
                    // their padded trits at zero.
                    let first_row = blk * params.stride() + t * g;
                    if first_row + g > logical_rows {
                        let trits = decode_index(ix, g);
                        let live = logical_rows.saturating_sub(first_row);
                        if trits[live..].iter().any(|&x| x != 0) {
                            return Err(violation(
                                loc,
                                format!(
                                    "padding rows of block {blk}, column {col}, slot {t} are nonzero (index {ix}, zero group is {zero})"
                                ),
                            ));
                        }
                    }
                }
                if !used_bits.is_multiple_of(8) {
                    let last = pw.data[vec_off + vb - 1];
                    if last >> (used_bits % 8) != 0 {
                        return Err(violation(
                            vec_off + vb - 1,
                            format!("unused trailing bits set in block {blk}, column {col}"),
                        ));
                    }
                }
            }
        }
        Ok(pw)
    }

    pub fn logical_rows(&self) -> usize {
        self.logical_rows
    }

    pub fn logical_cols(&self) -> usize {
        self.logical_cols
    }

    pub fn padded_rows(&self) -> usize {
        self.padded_rows
    }

    pub fn params(&self) -> TlmmParams {
        self.params
    }

    pub fn weight_scale(&self) -> f32 {
        self.weight_scale
    }

    pub fn with_weight_scale(mut self, scale: f32) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::invalid(format!("weight scale {scale} must be > 0")));
        }
        self.weight_scale = scale;
        Ok(self)
    }

    /// Number of `T · G` row blocks, `n' / (T · G)`.
    pub fn blocks(&self) -> usize {
        self.padded_rows / self.params.stride()
    }

    /// Raw index-vector bytes, block-major then column, `vector_bytes` each.
    pub fn payload(&self) -> &[u8] {
        &self.data
    }

    /// Unpacks the `T` indices of index-vector `(block, col)` into `out`.
    #[inline]
    pub fn unpack_vector(&self, block: usize, col: usize, out: &mut [u32]) {
        let vb = self.params.vector_bytes();
        let off = (block * self.logical_cols + col) * vb;
        unpack_indices(&self.data[off..off + vb], self.params.b_idx(), out);
    }

    pub fn index(&self, block: usize, col: usize, slot: usize) -> u32 {
        let mut buf = vec![0u32; self.params.tables()];
        self.unpack_vector(block, col, &mut buf);
        buf[slot]
    }

    /// Decodes back to the logical (unpadded) trit matrix.
    pub fn decode(&self) -> TernaryMatrix {
        let (g, n, k) = (self.params.group(), self.logical_rows, self.logical_cols);
        let mut trits = vec![0i8; n * k];
        let mut idx = vec![0u32; self.params.tables()];
        for blk in 0..self.blocks() {
            for col in 0..k {
                self.unpack_vector(blk, col, &mut idx);
                for (t, &ix) in idx.iter().enumerate() {
                    let base = blk * self.params.stride() + t * g;
                    for (e, trit) in decode_index(ix, g).into_iter().enumerate() {
                        if base + e < n {
                            trits[(base + e) * k + col] = trit;
                        }
                    }
                }
            }
        }
        TernaryMatrix::new(n, k, trits).expect("decoded indices are valid trits")
    }
}

#[inline]
fn unpack_indices(bytes: &[u8], width: u32, out: &mut [u32]) {
    let mask = (1u64 << width) - 1;
    let mut acc = 0u64;
    let mut have = 0u32;
    let mut it = bytes.iter();
    for slot in out.iter_mut() {
        while have < width {
            acc |= u64::from(*it.next().unwrap_or(&0)) << have;
            have += 8;
        }
        *slot = (acc & mask) as u32;
        acc >>= width;
        have -= width;
    }
}

fn pack_indices(indices: &[u32], width: u32, out: &mut [u8]) {
    let mut bit = 0usize;
    for &ix in indices {
        for b in 0..width as usize {
            if (ix >> b) & 1 == 1 {
                out[(bit + b) / 8] |= 1 << ((bit + b) % 8);
            }
        }
        bit += width as usize;
    }
}

/// Offline stage: pads `w` to `n'` rows with zero groups and encodes it into
/// packed index-vectors. The weight scale defaults to 1.
pub fn encode_weights(w: &TernaryMatrix, params: TlmmParams) -> PackedWeights {
    let (n, k, g) = (w.rows(), w.cols(), params.group());
    let padded_rows = params.padded_rows(n);
    let blocks = padded_rows / params.stride();
    let vb = params.vector_bytes();
    let mut data = vec![0u8; blocks * k * vb];
    let mut indices = vec![0u32; params.tables()];
    let mut group = vec![0i8; g];
    for blk in 0..blocks {
        for col in 0..k {
            for (t, slot) in indices.iter_mut().enumerate() {
                let base = blk * params.stride() + t * g;
                for (e, trit) in group.iter_mut().enumerate() {
                    *trit = if base + e < n {
                        w.get(base + e, col)
                    } else {
                        0
                    };
                }
                *slot = encode_group(&group);
            }
            let off = (blk * k + col) * vb;
            pack_indices(&indices, params.b_idx(), &mut data[off..off + vb]);
        }
    }
    PackedWeights {
        logical_rows: n,
        logical_cols: k,
        padded_rows,
        params,
        weight_scale: 1.0,
        data,
    }
}

/// All `3^G` partial sums of one activation group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LookupTable {
    entries: Vec<i16>,
}

impl LookupTable {
    pub fn entries(&self) -> &[i16] {
        &self.entries
    }

    #[inline]
    pub fn get(&self, index: u32) -> i32 {
        i32::from(self.entries[index as usize])
    }
}

/// Precompute `entries[encode(g)] = Σ_j g_j · a_j` for every trit group `g`.
pub fn build_table(activation_group: &[i8], params: TlmmParams) -> Result<LookupTable> {
    if activation_group.len() != params.group() {
        return Err(Error::shape(format!(
            "activation group has {} values, G = {}",
            activation_group.len(),
            params.group()
        )));
    }
    let mut entries = vec![0i16; params.n_tb()];
    fill_table(activation_group, &mut entries);
    Ok(LookupTable { entries })
}

/// Adder-tree style construction: the table for the first `j + 1` digits is
/// three shifted copies of the table for the first `j` digits.
#[inline]
fn fill_table(group: &[i8], entries: &mut [i16]) {
    entries[0] = 0;
    let mut len = 1usize;
    for &a in group {
        let a = i16::from(a);
        let (lo, rest) = entries.split_at_mut(len);
        let (mid, hi) = rest.split_at_mut(len);
        for i in 0..len {
            let base = lo[i];
            lo[i] = base - a;
            mid[i] = base;
            hi[i] = base + a;
        }
        len *= 3;
    }
}

/// Half-size table: only groups whose most significant nonzero trit is `+1`
/// are stored; the other half is served by sign inversion and the all-zero
/// group is a reserved state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartialLookupTable {
    entries: Vec<i16>,
    zero: u32,
    top: u32,
}

impl PartialLookupTable {
    pub fn new(params: TlmmParams) -> Self {
        let n = params.n_tb() as u32;
        Self {
            entries: vec![0; ((n - 1) / 2) as usize],
            zero: params.zero_index(),
            top: n - 1,
        }
    }

    pub fn stored_entries(&self) -> usize {
        self.entries.len()
    }

    /// Fills the positive half for the given activation group.
    pub fn build(&mut self, group: &[i8]) {
        // Positive groups are indices zero+1 ..= 3^G - 1; their digits are
        // recovered incrementally so every entry is one add/sub chain.
        let g = group.len();
        let mut digits = decode_index(self.zero + 1, g);
        for slot in self.entries.iter_mut() {
            *slot = digits
                .iter()
                .zip(group)
                .map(|(&t, &a)| i16::from(t) * i16::from(a))
                .sum();
            // base-3 increment on trits (digit = trit + 1)
            for d in digits.iter_mut() {
                if *d < 1 {
                    *d += 1;
                    break;
                }
                *d = -1;
            }
        }
    }

    #[inline]
    pub fn get(&self, index: u32) -> i32 {
        use std::cmp::Ordering;
        match index.cmp(&self.zero) {
            Ordering::Greater => i32::from(self.entries[(index - self.zero - 1) as usize]),
            Ordering::Equal => 0,
            Ordering::Less => -i32::from(self.entries[(self.top - index - self.zero - 1) as usize]),
        }
    }
}

trait TableStore: Send {
    fn build(&mut self, group: &[i8]);
    fn lookup(&self, index: u32) -> i32;
}

struct FullTable(Vec<i16>);

impl TableStore for FullTable {
    #[inline]
    fn build(&mut self, group: &[i8]) {
        fill_table(group, &mut self.0);
    }

    #[inline]
    fn lookup(&self, index: u32) -> i32 {
        i32::from(self.0[index as usize])
    }
}

impl TableStore for PartialLookupTable {
    #[inline]
    fn build(&mut self, group: &[i8]) {
        PartialLookupTable::build(self, group);
    }

    #[inline]
    fn lookup(&self, index: u32) -> i32 {
        self.get(index)
    }
}

/// Lookup-table matmul with full `3^G`-entry tables; bit-exact equal to
/// [`crate::ternary_matmul_naive`] on the decoded weights.
pub fn tlmm_matmul(a: &QuantizedActivations, pw: &PackedWeights) -> Result<Int32Matrix> {
    let n_tb = pw.params().n_tb();
    run_tlmm(a, pw, || FullTable(vec![0; n_tb]))
}

/// Same contract as [`tlmm_matmul`] using half-size tables with sign
/// inversion on lookup.
pub fn tlmm_matmul_partial_table(
    a: &QuantizedActivations,
    pw: &PackedWeights,
) -> Result<Int32Matrix> {
    let params = pw.params();
    run_tlmm(a, pw, || PartialLookupTable::new(params))
}

fn run_tlmm<L, F>(
    a: &QuantizedActivations,
    pw: &PackedWeights,
    make_table: F,
) -> Result<Int32Matrix>
where
    L: TableStore,
    F: Fn() -> L + Sync,
{
    if a.cols() != pw.logical_rows() {
        return Err(Error::shape(format!(
            "activations have {} columns, packed weights expect {} input rows",
            a.cols(),
            pw.logical_rows()
        )));
    }
    assert!(
        pw.logical_rows() < MAX_INPUT_DIM,
        "input dim {} can overflow int32 accumulation",
        pw.logical_rows()
    );
    let params = pw.params();
    let (n, k) = (pw.logical_rows(), pw.logical_cols());
    let (g, t_count, q) = (params.group(), params.tables(), params.lanes());
    let stride = params.stride();
    let mut out = vec![0i32; a.rows() * k];

    // outer loop: tokens
    out.par_chunks_mut(k).enumerate().for_each(|(m, orow)| {
        let arow = a.row(m);
        let mut tables: Vec<L> = (0..t_count).map(|_| make_table()).collect();
        let mut group = vec![0i8; g];
        let mut idx = vec![0u32; t_count];
        // middle loop: T·G slices of the activation row
        for blk in 0..pw.blocks() {
            for (t, table) in tables.iter_mut().enumerate() {
                let base = blk * stride + t * g;
                for (e, v) in group.iter_mut().enumerate() {
                    *v = if base + e < n { arow[base + e] } else { 0 };
                }
                table.build(&group);
            }
            // inner loop: Q index-vectors per step over the k columns
            for (j0, lanes) in orow.chunks_mut(q).enumerate() {
                for (lane, o) in lanes.iter_mut().enumerate() {
                    pw.unpack_vector(blk, j0 * q + lane, &mut idx);
                    let mut acc = 0i32;
                    for (table, &ix) in tables.iter().zip(&idx) {
                        acc += table.lookup(ix);
                    }
                    *o += acc;
                }
            }
        }
    });
    Int32Matrix::new(a.rows(), k, out)
}
