//! `pack` input description: model config plus either a seed for random toy
//! weights or inline float weights.

use anyhow::{bail, ensure, Context, Result};
use serde::Deserialize;
use ternlut::weights_io::{toy_float_model, FloatLayer, FloatModel};
use ternlut::{FloatMatrix, ModelConfig};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackInput {
    pub config: ModelConfig,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub weights: Option<InlineWeights>,
}

/// Row-major float weights; linear matrices are `[in][out]`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineWeights {
    pub embedding: Vec<Vec<f32>>,
    pub layers: Vec<InlineLayer>,
    pub final_norm: Vec<f32>,
    pub lm_head: Vec<Vec<f32>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineLayer {
    pub wq: Vec<Vec<f32>>,
    pub wk: Vec<Vec<f32>>,
    pub wv: Vec<Vec<f32>>,
    pub wo: Vec<Vec<f32>>,
    pub w_gate: Vec<Vec<f32>>,
    pub w_up: Vec<Vec<f32>>,
    pub w_down: Vec<Vec<f32>>,
    pub rms1: Vec<f32>,
    pub rms2: Vec<f32>,
}

fn matrix(name: &str, rows: Vec<Vec<f32>>, n_rows: usize, n_cols: usize) -> Result<FloatMatrix> {
    ensure!(
        rows.len() == n_rows,
        "{name}: {} rows, expected {n_rows}",
        rows.len()
    );
    let mut data = Vec::with_capacity(n_rows * n_cols);
    for (i, r) in rows.into_iter().enumerate() {
        ensure!(
            r.len() == n_cols,
            "{name}: row {i} has {} values, expected {n_cols}",
            r.len()
        );
        data.extend(r);
    }
    Ok(FloatMatrix::new(n_rows, n_cols, data)?)
}

fn vector(name: &str, v: Vec<f32>, len: usize) -> Result<Vec<f32>> {
    ensure!(v.len() == len, "{name}: {} values, expected {len}", v.len());
    Ok(v)
}

impl PackInput {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).context("parsing pack input JSON")
    }

    pub fn into_float_model(self) -> Result<FloatModel> {
        let c = self.config;
        c.validate()?;
        match (self.seed, self.weights) {
            (Some(seed), None) => Ok(toy_float_model(c, seed)?),
            (None, Some(w)) => {
                ensure!(
                    w.layers.len() == c.n_layers,
                    "{} layers given, config has {}",
                    w.layers.len(),
                    c.n_layers
                );
                let (dm, df) = (c.d_model, c.d_ffn);
                let layers = w
                    .layers
                    .into_iter()
                    .enumerate()
                    .map(|(i, l)| {
                        let n = |s: &str| format!("layers[{i}].{s}");
                        Ok(FloatLayer {
                            wq: matrix(&n("wq"), l.wq, dm, dm)?,
                            wk: matrix(&n("wk"), l.wk, dm, dm)?,
                            wv: matrix(&n("wv"), l.wv, dm, dm)?,
                            wo: matrix(&n("wo"), l.wo, dm, dm)?,
                            w_gate: matrix(&n("w_gate"), l.w_gate, dm, df)?,
                            w_up: matrix(&n("w_up"), l.w_up, dm, df)?,
                            w_down: matrix(&n("w_down"), l.w_down, df, dm)?,
                            rms1: vector(&n("rms1"), l.rms1, dm)?,
                            rms2: vector(&n("rms2"), l.rms2, dm)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(FloatModel {
                    config: c,
                    embedding: matrix("embedding", w.embedding, c.vocab, dm)?,
                    layers,
                    final_norm: vector("final_norm", w.final_norm, dm)?,
                    lm_head: matrix("lm_head", w.lm_head, dm, c.vocab)?,
                })
            }
            (Some(_), Some(_)) => bail!("give either \"seed\" or \"weights\", not both"),
            (None, None) => bail!("pack input needs \"seed\" or \"weights\""),
        }
    }
}
