//! Inference engine for ternary-weight (1.58-bit), int8-activation decoder-only
//! transformers built around table-lookup matrix multiplication.
//!
//! Module map:
//! - [`types`]: trit/int8/float containers, model configuration, the naive
//!   ternary matmul used as the reference for every faster kernel.
//! - [`tlmm`]: base-3 group encoding of weights and the lookup-table matmul.
//! - [`quantizer`]: RMS normalization with max extraction, ABSMAX int8
//!   quantization and int32 dequantization.
//! - [`fusion`]: elementwise ops (SwiGLU, residual add, both RoPE pairings,
//!   q/k column permutation).
//! - [`attention`]: online-softmax prefill attention with reversed block
//!   scheduling, two-pass decode attention, KV cache.
//! - [`model`]: decoder layers, W8A8 LM head, greedy generation.
//! - [`hwmodel`]: analytic URAM/LUT model for choosing `(G, T, Q)`.
//! - [`weights_io`]: binary weight container, ternarization, packing, loading.
//! - [`bench`]: paired-kernel comparison harness.

pub mod attention;
pub mod bench;
pub mod error;
pub mod fusion;
pub mod hwmodel;
pub mod model;
pub mod quantizer;
pub mod tlmm;
pub mod types;
pub mod weights_io;

pub use error::{Error, Result};
pub use types::{
    ternary_matmul_naive, FloatMatrix, Int32Matrix, ModelConfig, QuantizedActivations,
    TernaryMatrix,
};
