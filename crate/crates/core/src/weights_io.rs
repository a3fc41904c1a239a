//! Binary weight container, absmean ternarization and the model packer.
//!
//! Layout (all scalars little-endian, version 1):
//!
//! ```text
//! header (64 bytes)
//!   0  magic "TLLM"            4  version u16 = 1      6  header_len u16 = 64
//!   8  d_model u32            12  d_ffn u32           16  n_layers u32
//!  20  n_heads u32            24  max_seq u32         28  vocab u32
//!  32  rms_eps f32            36  G u32               40  T u32
//!  44  Q u32                  48  B_idx u32           52  section_count u32
//!  56  header_crc u32 (CRC-32 of bytes 0..56 followed by the section table)
//!  60  reserved u32 = 0
//! section table (section_count × 48 bytes)
//!   0  kind u16               2  encoding u16 (0 f32, 1 packed indices, 2 i8)
//!   4  layer u32 (0xFFFF_FFFF for model-level sections)
//!   8  rows u32              12  cols u32             16  padded_rows u32
//!  20  scale f32 (weight scale of packed matrices, 1.0 otherwise)
//!  24  offset u64            32  length u64           40  payload_crc u32
//!  44  reserved u32 = 0
//! payloads, back to back in table order
//! ```
//!
//! Packed payloads hold `padded_rows / (T·G)` block rows of `cols`
//! index-vectors, each `ceil(T·B_idx / 8)` bytes with index 0 in the lowest
//! bits and unused high bits zero. Sections are written as: embedding, then
//! per layer `attn_norm, wq, wk, wv, wo, ffn_norm, gate, up, down`, then
//! `final_norm, lm_head, lm_head_scale`, so each layer's norm weights sit
//! next to the matrices they feed.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::fusion::permute_qk_head_columns;
use crate::model::{LayerWeights, LmHead, ModelWeights};
use crate::quantizer::RmsNormWeights;
use crate::tlmm::{b_idx, encode_weights, PackedWeights, TlmmParams};
use crate::types::{FloatMatrix, ModelConfig, TernaryMatrix};

pub const MAGIC: &[u8; 4] = b"TLLM";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 64;
pub const SECTION_LEN: usize = 48;
pub const GLOBAL_LAYER: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u16)]
pub enum SectionKind {
    Embedding = 1,
    AttnNorm = 2,
    Wq = 3,
    Wk = 4,
    Wv = 5,
    Wo = 6,
    FfnNorm = 7,
    Gate = 8,
    Up = 9,
    Down = 10,
    FinalNorm = 11,
    LmHead = 12,
    LmHeadScale = 13,
}

impl SectionKind {
    fn from_u16(v: u16) -> Option<Self> {
        use SectionKind::*;
        Some(match v {
            1 => Embedding,
            2 => AttnNorm,
            3 => Wq,
            4 => Wk,
            5 => Wv,
            6 => Wo,
            7 => FfnNorm,
            8 => Gate,
            9 => Up,
            10 => Down,
            11 => FinalNorm,
            12 => LmHead,
            13 => LmHeadScale,
            _ => return None,
        })
    }

    fn encoding(self) -> Encoding {
        use SectionKind::*;
        match self {
            Wq | Wk | Wv | Wo | Gate | Up | Down => Encoding::Packed,
            LmHead => Encoding::I8,
            _ => Encoding::F32,
        }
    }

    fn is_layer(self) -> bool {
        !matches!(
            self,
            SectionKind::Embedding
                | SectionKind::FinalNorm
                | SectionKind::LmHead
                | SectionKind::LmHeadScale
        )
    }

    /// Logical `(rows, cols)` for this section under `c`.
    fn dims(self, c: &ModelConfig) -> (usize, usize) {
        use SectionKind::*;
        match self {
            Embedding => (c.vocab, c.d_model),
            AttnNorm | FfnNorm | FinalNorm => (1, c.d_model),
            Wq | Wk | Wv | Wo => (c.d_model, c.d_model),
            Gate | Up => (c.d_model, c.d_ffn),
            Down => (c.d_ffn, c.d_model),
            LmHead => (c.d_model, c.vocab),
            LmHeadScale => (1, c.vocab),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
enum Encoding {
    F32 = 0,
    Packed = 1,
    I8 = 2,
}

/// Decoded section table entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SectionDescriptor {
    pub kind: SectionKind,
    pub layer: u32,
    pub rows: u32,
    pub cols: u32,
    pub padded_rows: u32,
    pub scale: f32,
    pub offset: u64,
    pub length: u64,
    pub crc: u32,
}

/// Parsed fixed header plus section table.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightFileHeader {
    pub version: u16,
    pub config: ModelConfig,
    pub params: TlmmParams,
    pub sections: Vec<SectionDescriptor>,
}

/// BitNet-style absmean ternarization: `scale = mean|w|` (1 for an all-zero
/// matrix), `trit = clamp(round(w / scale), -1, 1)`.
pub fn ternarize(w: &FloatMatrix) -> Result<(TernaryMatrix, f32)> {
    if !w.is_finite() {
        return Err(Error::Numeric(
            "weight matrix contains non-finite values".into(),
        ));
    }
    let n = w.data().len();
    let mean_abs =
        (w.data().iter().map(|v| f64::from(v.abs())).sum::<f64>() / n.max(1) as f64) as f32;
    let scale = if mean_abs > 0.0 { mean_abs } else { 1.0 };
    let trits = w
        .data()
        .iter()
        .map(|&v| (v / scale).round().clamp(-1.0, 1.0) as i8)
        .collect();
    Ok((TernaryMatrix::new(w.rows(), w.cols(), trits)?, scale))
}

/// Float weights of one layer; matrices are `[in × out]`, `wq`/`wk` in the
/// standard half-split RoPE head layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatLayer {
    pub wq: FloatMatrix,
    pub wk: FloatMatrix,
    pub wv: FloatMatrix,
    pub wo: FloatMatrix,
    pub w_gate: FloatMatrix,
    pub w_up: FloatMatrix,
    pub w_down: FloatMatrix,
    pub rms1: Vec<f32>,
    pub rms2: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloatModel {
    pub config: ModelConfig,
    pub embedding: FloatMatrix,
    pub layers: Vec<FloatLayer>,
    pub final_norm: Vec<f32>,
    /// `[d_model × vocab]`.
    pub lm_head: FloatMatrix,
}

/// A ternary linear with its dequant scale.
#[derive(Debug, Clone, PartialEq)]
pub struct TernaryLinear {
    pub trits: TernaryMatrix,
    pub scale: f32,
}

impl TernaryLinear {
    pub fn from_float(w: &FloatMatrix) -> Result<Self> {
        let (trits, scale) = ternarize(w)?;
        Ok(Self { trits, scale })
    }

    fn pack(&self, params: TlmmParams) -> Result<PackedWeights> {
        encode_weights(&self.trits, params).with_weight_scale(self.scale)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TernaryLayer {
    pub wq: TernaryLinear,
    pub wk: TernaryLinear,
    pub wv: TernaryLinear,
    pub wo: TernaryLinear,
    pub w_gate: TernaryLinear,
    pub w_up: TernaryLinear,
    pub w_down: TernaryLinear,
    pub rms1: Vec<f32>,
    pub rms2: Vec<f32>,
}

/// Ternarized model in the standard head layout, ready to pack.
#[derive(Debug, Clone, PartialEq)]
pub struct TernaryModel {
    pub config: ModelConfig,
    pub embedding: FloatMatrix,
    pub layers: Vec<TernaryLayer>,
    pub final_norm: Vec<f32>,
    pub lm_head: FloatMatrix,
}

impl FloatModel {
    pub fn ternarize(&self) -> Result<TernaryModel> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                Ok(TernaryLayer {
                    wq: TernaryLinear::from_float(&l.wq)?,
                    wk: TernaryLinear::from_float(&l.wk)?,
                    wv: TernaryLinear::from_float(&l.wv)?,
                    wo: TernaryLinear::from_float(&l.wo)?,
                    w_gate: TernaryLinear::from_float(&l.w_gate)?,
                    w_up: TernaryLinear::from_float(&l.w_up)?,
                    w_down: TernaryLinear::from_float(&l.w_down)?,
                    rms1: l.rms1.clone(),
                    rms2: l.rms2.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TernaryModel {
            config: self.config,
            embedding: self.embedding.clone(),
            layers,
            final_norm: self.final_norm.clone(),
            lm_head: self.lm_head.clone(),
        })
    }
}

impl TernaryModel {
    /// Encodes every linear with `params`; `wq`/`wk` get the consecutive-RoPE
    /// column permutation first. The LM head is int8-quantized per column.
    pub fn pack(&self, params: TlmmParams) -> Result<ModelWeights> {
        let c = self.config;
        c.validate()?;
        let (heads, dh) = (c.n_heads, c.d_head());
        let permuted = |l: &TernaryLinear| -> Result<PackedWeights> {
            let trits = permute_qk_head_columns(&l.trits, heads, dh)?;
            encode_weights(&trits, params).with_weight_scale(l.scale)
        };
        let layers = self
            .layers
            .iter()
            .map(|l| {
                Ok(LayerWeights {
                    wq: permuted(&l.wq)?,
                    wk: permuted(&l.wk)?,
                    wv: l.wv.pack(params)?,
                    wo: l.wo.pack(params)?,
                    w_gate: l.w_gate.pack(params)?,
                    w_up: l.w_up.pack(params)?,
                    w_down: l.w_down.pack(params)?,
                    rms1: RmsNormWeights::new(l.rms1.clone())?,
                    rms2: RmsNormWeights::new(l.rms2.clone())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let weights = ModelWeights {
            config: c,
            params,
            embedding: self.embedding.clone(),
            layers,
            final_norm: RmsNormWeights::new(self.final_norm.clone())?,
            lm_head: LmHead::quantize(&self.lm_head)?,
        };
        weights.validate()?;
        Ok(weights)
    }
}

/// Float model → ternarize → permute/encode → file bytes.
pub fn pack_model(model: &FloatModel, params: TlmmParams) -> Result<Vec<u8>> {
    save_model(&model.ternarize()?.pack(params)?)
}

/// Fixed-seed random model: Gaussian weights scaled by `1/sqrt(fan_in)`,
/// unit norms, unit-variance embeddings.
pub fn toy_float_model(config: ModelConfig, seed: u64) -> Result<FloatModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaussian = |rows: usize, cols: usize, std: f32| -> FloatMatrix {
        let dist = Normal::new(0.0f32, std).expect("positive std");
        let data = (0..rows * cols).map(|_| dist.sample(&mut rng)).collect();
        FloatMatrix::new(rows, cols, data).expect("sized data")
    };
    let (dm, df) = (config.d_model, config.d_ffn);
    let s_dm = 1.0 / (dm as f32).sqrt();
    let s_df = 1.0 / (df as f32).sqrt();
    let embedding = gaussian(config.vocab, dm, 1.0);
    let layers = (0..config.n_layers)
        .map(|_| FloatLayer {
            wq: gaussian(dm, dm, s_dm),
            wk: gaussian(dm, dm, s_dm),
            wv: gaussian(dm, dm, s_dm),
            wo: gaussian(dm, dm, s_dm),
            w_gate: gaussian(dm, df, s_dm),
            w_up: gaussian(dm, df, s_dm),
            w_down: gaussian(df, dm, s_df),
            rms1: vec![1.0; dm],
            rms2: vec![1.0; dm],
        })
        .collect();
    let lm_head = gaussian(dm, config.vocab, s_dm);
    Ok(FloatModel {
        config,
        embedding,
        layers,
        final_norm: vec![1.0; dm],
        lm_head,
    })
}

/// Packed toy model, as used by tests and the CLI.
pub fn toy_model(config: ModelConfig, params: TlmmParams, seed: u64) -> Result<ModelWeights> {
    toy_float_model(config, seed)?.ternarize()?.pack(params)
}

struct Section<'a> {
    kind: SectionKind,
    layer: u32,
    rows: usize,
    cols: usize,
    padded_rows: usize,
    scale: f32,
    payload: std::borrow::Cow<'a, [u8]>,
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn packed_section(kind: SectionKind, layer: u32, w: &PackedWeights) -> Section<'_> {
    Section {
        kind,
        layer,
        rows: w.logical_rows(),
        cols: w.logical_cols(),
        padded_rows: w.padded_rows(),
        scale: w.weight_scale(),
        payload: w.payload().into(),
    }
}

fn vector_section(
    kind: SectionKind,
    layer: u32,
    rows: usize,
    cols: usize,
    data: &[f32],
) -> Section<'static> {
    Section {
        kind,
        layer,
        rows,
        cols,
        padded_rows: rows,
        scale: 1.0,
        payload: f32_bytes(data).into(),
    }
}

/// Serializes validated weights into the container format.
pub fn save_model(w: &ModelWeights) -> Result<Vec<u8>> {
    w.validate()?;
    let c = &w.config;
    let mut sections = vec![vector_section(
        SectionKind::Embedding,
        GLOBAL_LAYER,
        c.vocab,
        c.d_model,
        w.embedding.data(),
    )];
    for (i, l) in w.layers.iter().enumerate() {
        let i = i as u32;
        sections.push(vector_section(
            SectionKind::AttnNorm,
            i,
            1,
            c.d_model,
            l.rms1.gamma(),
        ));
        sections.push(packed_section(SectionKind::Wq, i, &l.wq));
        sections.push(packed_section(SectionKind::Wk, i, &l.wk));
        sections.push(packed_section(SectionKind::Wv, i, &l.wv));
        sections.push(packed_section(SectionKind::Wo, i, &l.wo));
        sections.push(vector_section(
            SectionKind::FfnNorm,
            i,
            1,
            c.d_model,
            l.rms2.gamma(),
        ));
        sections.push(packed_section(SectionKind::Gate, i, &l.w_gate));
        sections.push(packed_section(SectionKind::Up, i, &l.w_up));
        sections.push(packed_section(SectionKind::Down, i, &l.w_down));
    }
    sections.push(vector_section(
        SectionKind::FinalNorm,
        GLOBAL_LAYER,
        1,
        c.d_model,
        w.final_norm.gamma(),
    ));
    sections.push(Section {
        kind: SectionKind::LmHead,
        layer: GLOBAL_LAYER,
        rows: c.d_model,
        cols: c.vocab,
        padded_rows: c.d_model,
        scale: 1.0,
        payload: w
            .lm_head
            .values()
            .iter()
            .map(|&v| v as u8)
            .collect::<Vec<u8>>()
            .into(),
    });
    sections.push(vector_section(
        SectionKind::LmHeadScale,
        GLOBAL_LAYER,
        1,
        c.vocab,
        w.lm_head.col_scale(),
    ));

    let u32_of = |v: usize, what: &str| -> Result<u32> {
        u32::try_from(v).map_err(|_| Error::invalid(format!("{what} = {v} does not fit in u32")))
    };
    let mut header = Vec::with_capacity(HEADER_LEN);
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    header.extend_from_slice(&(HEADER_LEN as u16).to_le_bytes());
    for (name, v) in [
        ("d_model", c.d_model),
        ("d_ffn", c.d_ffn),
        ("n_layers", c.n_layers),
        ("n_heads", c.n_heads),
        ("max_seq", c.max_seq),
        ("vocab", c.vocab),
    ] {
        header.extend_from_slice(&u32_of(v, name)?.to_le_bytes());
    }
    header.extend_from_slice(&c.rms_eps.to_le_bytes());
    let p = w.params;
    for (name, v) in [("G", p.group()), ("T", p.tables()), ("Q", p.lanes())] {
        header.extend_from_slice(&u32_of(v, name)?.to_le_bytes());
    }
    header.extend_from_slice(&p.b_idx().to_le_bytes());
    header.extend_from_slice(&u32_of(sections.len(), "section count")?.to_le_bytes());

    let mut table = Vec::with_capacity(sections.len() * SECTION_LEN);
    let mut offset = (HEADER_LEN + sections.len() * SECTION_LEN) as u64;
    for s in &sections {
        table.extend_from_slice(&(s.kind as u16).to_le_bytes());
        table.extend_from_slice(&(s.kind.encoding() as u16).to_le_bytes());
        table.extend_from_slice(&s.layer.to_le_bytes());
        table.extend_from_slice(&u32_of(s.rows, "rows")?.to_le_bytes());
        table.extend_from_slice(&u32_of(s.cols, "cols")?.to_le_bytes());
        table.extend_from_slice(&u32_of(s.padded_rows, "padded rows")?.to_le_bytes());
        table.extend_from_slice(&s.scale.to_le_bytes());
        table.extend_from_slice(&offset.to_le_bytes());
        table.extend_from_slice(&(s.payload.len() as u64).to_le_bytes());
        table.extend_from_slice(&crc32fast::hash(&s.payload).to_le_bytes());
        table.extend_from_slice(&0u32.to_le_bytes());
        offset += s.payload.len() as u64;
    }
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&header);
    hasher.update(&table);
    header.extend_from_slice(&hasher.finalize().to_le_bytes());
    header.extend_from_slice(&0u32.to_le_bytes());
    debug_assert_eq!(header.len(), HEADER_LEN);

    let mut out = Vec::with_capacity(offset as usize);
    out.extend_from_slice(&header);
    out.extend_from_slice(&table);
    for s in &sections {
        out.extend_from_slice(&s.payload);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::format(
                    self.pos as u64,
                    format!(
                        "file truncated: need {n} bytes, {} left",
                        self.bytes.len() - self.pos.min(self.bytes.len())
                    ),
                )
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses and validates the header and section table (not the payloads).
pub fn read_header(bytes: &[u8]) -> Result<WeightFileHeader> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"TLLM\""));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::format(
            4,
            format!("unsupported format version {version}"),
        ));
    }
    let header_len = r.u16()?;
    if header_len as usize != HEADER_LEN {
        return Err(Error::format(
            6,
            format!("header length {header_len}, expected {HEADER_LEN}"),
        ));
    }
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = r.u32()? as usize;
    }
    let rms_eps = r.f32()?;
    let config = ModelConfig {
        d_model: dims[0],
        d_ffn: dims[1],
        n_layers: dims[2],
        n_heads: dims[3],
        max_seq: dims[4],
        vocab: dims[5],
        rms_eps,
    };
    config
        .validate()
        .map_err(|e| Error::format(8, format!("invalid model config: {e}")))?;
    let (g, t, q, bidx) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    let params = TlmmParams::new(g as usize, t as usize, q as usize)
        .map_err(|e| Error::format(36, format!("invalid TLMM parameters: {e}")))?;
    if bidx != b_idx(g as usize) {
        return Err(Error::format(
            48,
            format!(
                "B_idx {bidx} inconsistent with G={g} (expected {})",
                b_idx(g as usize)
            ),
        ));
    }
    let count = r.u32()? as usize;
    let header_crc = r.u32()?;
    let _reserved = r.u32()?;
    let table_len = count
        .checked_mul(SECTION_LEN)
        .ok_or_else(|| Error::format(52, "section count overflows"))?;
    let table = r.take(table_len)?;
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&bytes[..56]);
    hasher.update(table);
    if hasher.finalize() != header_crc {
        return Err(Error::format(56, "header checksum mismatch"));
    }

    let mut sections = Vec::with_capacity(count);
    let mut tr = Reader {
        bytes,
        pos: HEADER_LEN,
    };
    for i in 0..count {
        let at = (HEADER_LEN + i * SECTION_LEN) as u64;
        let kind_raw = tr.u16()?;
        let kind = SectionKind::from_u16(kind_raw)
            .ok_or_else(|| Error::format(at, format!("unknown section kind {kind_raw}")))?;
        let enc = tr.u16()?;
        if enc != kind.encoding() as u16 {
            return Err(Error::format(
                at + 2,
                format!("section {kind:?} has encoding {enc}"),
            ));
        }
        let d = SectionDescriptor {
            kind,
            layer: tr.u32()?,
            rows: tr.u32()?,
            cols: tr.u32()?,
            padded_rows: tr.u32()?,
            scale: tr.f32()?,
            offset: tr.u64()?,
            length: tr.u64()?,
            crc: tr.u32()?,
        };
        let _reserved = tr.u32()?;
        sections.push(d);
    }
    Ok(WeightFileHeader {
        version,
        config,
        params,
        sections,
    })
}

fn read_f32s(payload: &[u8]) -> Vec<f32> {
    payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect()
}

/// Parses and fully validates a weight file.
pub fn load_model(bytes: &[u8]) -> Result<ModelWeights> {
    let header = read_header(bytes)?;
    let c = header.config;
    let params = header.params;
    let table_end = (HEADER_LEN + header.sections.len() * SECTION_LEN) as u64;

    // expected section set
    let mut expected: BTreeMap<(SectionKind, u32), ()> = BTreeMap::new();
    expected.insert((SectionKind::Embedding, GLOBAL_LAYER), ());
    for l in 0..c.n_layers as u32 {
        use SectionKind::*;
        for k in [AttnNorm, Wq, Wk, Wv, Wo, FfnNorm, Gate, Up, Down] {
            expected.insert((k, l), ());
        }
    }
    for k in [
        SectionKind::FinalNorm,
        SectionKind::LmHead,
        SectionKind::LmHeadScale,
    ] {
        expected.insert((k, GLOBAL_LAYER), ());
    }

    let mut payloads: BTreeMap<(SectionKind, u32), (&SectionDescriptor, &[u8])> = BTreeMap::new();
    let mut spans: Vec<(u64, u64)> = Vec::new();
    for (i, d) in header.sections.iter().enumerate() {
        let at = (HEADER_LEN + i * SECTION_LEN) as u64;
        let layer_ok = if d.kind.is_layer() {
            (d.layer as usize) < c.n_layers
        } else {
            d.layer == GLOBAL_LAYER
        };
        if !layer_ok {
            return Err(Error::format(
                at + 4,
                format!("section {:?} has invalid layer {}", d.kind, d.layer),
            ));
        }
        let key = (d.kind, d.layer);
        if expected.remove(&key).is_none() {
            return Err(Error::format(
                at,
                format!("duplicate section {:?} for layer {}", d.kind, d.layer),
            ));
        }
        let (rows, cols) = d.kind.dims(&c);
        if d.rows as usize != rows || d.cols as usize != cols {
            return Err(Error::format(
                at + 8,
                format!(
                    "section {:?} is {}x{}, config implies {rows}x{cols}",
                    d.kind, d.rows, d.cols
                ),
            ));
        }
        let (padded, len) = match d.kind.encoding() {
            Encoding::Packed => {
                let padded = params.padded_rows(rows);
                (
                    padded,
                    padded / params.stride() * cols * params.vector_bytes(),
                )
            }
            Encoding::F32 => (rows, rows * cols * 4),
            Encoding::I8 => (rows, rows * cols),
        };
        if d.padded_rows as usize != padded {
            return Err(Error::format(
                at + 16,
                format!(
                    "section {:?} padded rows {} but T·G={} padding gives {padded}",
                    d.kind,
                    d.padded_rows,
                    params.stride()
                ),
            ));
        }
        if d.length != len as u64 {
            return Err(Error::format(
                at + 32,
                format!(
                    "section {:?} length {} but shape implies {len}",
                    d.kind, d.length
                ),
            ));
        }
        let end = d
            .offset
            .checked_add(d.length)
            .ok_or_else(|| Error::format(at + 24, "section offset overflows"))?;
        if d.offset < table_end {
            return Err(Error::format(
                at + 24,
                format!("section {:?} overlaps the header", d.kind),
            ));
        }
        if end > bytes.len() as u64 {
            return Err(Error::format(
                bytes.len() as u64,
                format!(
                    "file truncated: section {:?} (layer {}) spans {}..{end}, file is {} bytes",
                    d.kind,
                    d.layer,
                    d.offset,
                    bytes.len()
                ),
            ));
        }
        spans.push((d.offset, end));
        let payload = &bytes[d.offset as usize..end as usize];
        payloads.insert(key, (d, payload));
    }
    if let Some(((kind, layer), _)) = expected.into_iter().next() {
        return Err(Error::format(
            52,
            format!("missing section {kind:?} for layer {layer}"),
        ));
    }
    spans.sort_unstable();
    for pair in spans.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(Error::format(pair[1].0, "overlapping sections"));
        }
    }

    let f32_section = |kind: SectionKind, layer: u32| -> Result<Vec<f32>> {
        let (d, p) = payloads[&(kind, layer)];
        let v = read_f32s(p);
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::format(
                d.offset + 4 * i as u64,
                format!("non-finite value in {kind:?}"),
            ));
        }
        check_crc(d, p)?;
        Ok(v)
    };
    let packed = |kind: SectionKind, layer: u32| -> Result<PackedWeights> {
        let (d, p) = payloads[&(kind, layer)];
        let (rows, cols) = (d.rows as usize, d.cols as usize);
        if !(d.scale.is_finite() && d.scale > 0.0) {
            return Err(Error::format(
                d.offset,
                format!(
                    "{kind:?} layer {layer}: weight scale {} must be > 0",
                    d.scale
                ),
            ));
        }
        let w = PackedWeights::from_raw_parts_located(rows, cols, params, d.scale, p.to_vec())
            .map_err(|v| {
                Error::format(
                    d.offset + v.byte_offset as u64,
                    format!("{kind:?} layer {layer}: {}", v.message),
                )
            })?;
        check_crc(d, p)?;
        Ok(w)
    };

    let embedding = FloatMatrix::new(
        c.vocab,
        c.d_model,
        f32_section(SectionKind::Embedding, GLOBAL_LAYER)?,
    )?;
    let mut layers = Vec::with_capacity(c.n_layers);
    for l in 0..c.n_layers as u32 {
        use SectionKind::*;
        layers.push(LayerWeights {
            wq: packed(Wq, l)?,
            wk: packed(Wk, l)?,
            wv: packed(Wv, l)?,
            wo: packed(Wo, l)?,
            w_gate: packed(Gate, l)?,
            w_up: packed(Up, l)?,
            w_down: packed(Down, l)?,
            rms1: RmsNormWeights::new(f32_section(AttnNorm, l)?)?,
            rms2: RmsNormWeights::new(f32_section(FfnNorm, l)?)?,
        });
    }
    let final_norm = RmsNormWeights::new(f32_section(SectionKind::FinalNorm, GLOBAL_LAYER)?)?;
    let (hd, hp) = payloads[&(SectionKind::LmHead, GLOBAL_LAYER)];
    if let Some(i) = hp.iter().position(|&b| b as i8 == i8::MIN) {
        return Err(Error::format(
            hd.offset + i as u64,
            "lm head value -128 outside [-127, 127]",
        ));
    }
    check_crc(hd, hp)?;
    let head_values: Vec<i8> = hp.iter().map(|&b| b as i8).collect();
    let head_scales = f32_section(SectionKind::LmHeadScale, GLOBAL_LAYER)?;
    if let Some(i) = head_scales.iter().position(|&s| s <= 0.0) {
        let (sd, _) = payloads[&(SectionKind::LmHeadScale, GLOBAL_LAYER)];
        return Err(Error::format(
            sd.offset + 4 * i as u64,
            "lm head column scale must be > 0",
        ));
    }
    let weights = ModelWeights {
        config: c,
        params,
        embedding,
        layers,
        final_norm,
        lm_head: LmHead::new(c.d_model, c.vocab, head_values, head_scales)?,
    };
    weights.validate()?;
    Ok(weights)
}

fn check_crc(d: &SectionDescriptor, payload: &[u8]) -> Result<()> {
    let got = crc32fast::hash(payload);
    if got != d.crc {
        return Err(Error::format(
            d.offset,
            format!(
                "checksum mismatch in section {:?} layer {} ({got:#010x} != {:#010x})",
                d.kind, d.layer, d.crc
            ),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::unpermute_qk_head_columns;

    fn micro_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            d_ffn: 12,
            n_layers: 1,
            n_heads: 2,
            max_seq: 16,
            vocab: 10,
            rms_eps: 1e-5,
        }
    }

    fn params() -> TlmmParams {
        TlmmParams::new(3, 2, 2).unwrap()
    }

    #[test]
    fn ternarize_cases() {
        let (t, s) = ternarize(&FloatMatrix::zeros(2, 3)).unwrap();
        assert!(t.trits().iter().all(|&v| v == 0));
        assert_eq!(s, 1.0);

        let trits = vec![1i8, 0, -1, -1, 1, 0, 0, 0, 1];
        let w =
            FloatMatrix::new(3, 3, trits.iter().map(|&v| 0.42 * f32::from(v)).collect()).unwrap();
        let (t, s) = ternarize(&w).unwrap();
        assert_eq!(t.trits(), &trits[..]);
        assert!(s > 0.0);

        let bad = FloatMatrix::new(1, 1, vec![f32::INFINITY]).unwrap();
        assert!(ternarize(&bad).is_err());
    }

    #[test]
    fn ternarize_gaussian() {
        let m = toy_float_model(micro_config(), 3).unwrap();
        let (t, s) = ternarize(&m.layers[0].w_gate).unwrap();
        assert!(s > 0.0);
        assert!(t.trits().iter().all(|v| (-1..=1).contains(v)));
        assert!(t.trits().iter().any(|&v| v != 0));
    }

    #[test]
    fn round_trip_preserves_everything() {
        let tern = toy_float_model(micro_config(), 1)
            .unwrap()
            .ternarize()
            .unwrap();
        let packed = tern.pack(params()).unwrap();
        let bytes = save_model(&packed).unwrap();
        let loaded = load_model(&bytes).unwrap();
        assert_eq!(loaded, packed);
        let l = &loaded.layers[0];
        let c = micro_config();
        assert_eq!(
            unpermute_qk_head_columns(&l.wq.decode(), c.n_heads, c.d_head()).unwrap(),
            tern.layers[0].wq.trits
        );
        assert_eq!(l.w_down.decode(), tern.layers[0].w_down.trits);
        assert_eq!(l.w_down.weight_scale(), tern.layers[0].w_down.scale);
        assert_eq!(l.rms2.gamma(), &tern.layers[0].rms2[..]);
        assert_eq!(save_model(&loaded).unwrap(), bytes);
    }

    #[test]
    fn header_fields() {
        let bytes = save_model(&toy_model(micro_config(), params(), 2).unwrap()).unwrap();
        let h = read_header(&bytes).unwrap();
        assert_eq!(h.config, micro_config());
        assert_eq!(h.sections.len(), 1 + 9 + 3);
        assert_eq!(&bytes[0..4], b"TLLM");
        assert_eq!(h.sections[0].offset as usize, HEADER_LEN + 13 * SECTION_LEN);
        // wq: 8 rows padded to 12 (T·G = 6), 2 block rows x 8 cols x 2 bytes
        let wq = h.sections[2];
        assert_eq!(
            (wq.kind, wq.rows, wq.padded_rows, wq.length),
            (SectionKind::Wq, 8, 12, 32)
        );
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let bytes = save_model(&toy_model(micro_config(), params(), 2).unwrap()).unwrap();
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(matches!(
            load_model(&b),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut b = bytes.clone();
        b[4] = 9;
        assert!(matches!(
            load_model(&b),
            Err(Error::Format { offset: 4, .. })
        ));
        let cut = &bytes[..bytes.len() - 5];
        match load_model(cut) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, cut.len() as u64);
                assert!(message.contains("truncated"), "{message}");
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
        assert!(load_model(&bytes[..30]).is_err());
    }

    #[test]
    fn out_of_range_index_reports_location() {
        let w = toy_model(micro_config(), params(), 4).unwrap();
        let mut bytes = save_model(&w).unwrap();
        let h = read_header(&bytes).unwrap();
        let (i, d) = h
            .sections
            .iter()
            .enumerate()
            .find(|(_, d)| d.kind == SectionKind::Wv)
            .unwrap();
        let off = d.offset as usize + 2; // first byte of the second index-vector
        bytes[off] |= 0x1f; // index 31 in slot 0
                            // refresh the payload checksum so only the structural check can fire
        let crc = crc32fast::hash(&bytes[d.offset as usize..(d.offset + d.length) as usize]);
        let crc_at = HEADER_LEN + i * SECTION_LEN + 40;
        bytes[crc_at..crc_at + 4].copy_from_slice(&crc.to_le_bytes());
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(&bytes[..56]);
        hasher.update(&bytes[HEADER_LEN..HEADER_LEN + h.sections.len() * SECTION_LEN]);
        let hc = hasher.finalize();
        bytes[56..60].copy_from_slice(&hc.to_le_bytes());
        match load_model(&bytes) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, off as u64);
                assert!(message.contains(">= 3^3"), "{message}");
            }
            other => panic!("expected index error, got {other:?}"),
        }
    }

    #[test]
    fn pack_is_deterministic() {
        let m = toy_float_model(micro_config(), 9).unwrap();
        assert_eq!(
            pack_model(&m, params()).unwrap(),
            pack_model(&m, params()).unwrap()
        );
    }
}
