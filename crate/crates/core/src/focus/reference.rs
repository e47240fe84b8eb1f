//! Plain-loop forward pass of the attention stack without relocation.
//!
//! Shares no code with the graph implementation; used as a regression
//! reference. Accumulation orders match the graph ops so results agree bit
//! for bit.

use crate::autodiff::{AutodiffError, ParameterStore};

use super::{layer_name, EncoderConfig};

type Mat = Vec<Vec<f64>>;

fn load(store: &ParameterStore, name: &str) -> Result<Mat, AutodiffError> {
    let t = store.get(name)?;
    let cols = if t.shape().len() == 2 { t.shape()[1] } else { t.len() };
    Ok(t.data().chunks(cols).map(<[f64]>::to_vec).collect())
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let m = b[0].len();
    a.iter()
        .map(|row| {
            (0..m)
                .map(|j| {
                    let mut acc = 0.0;
                    for (p, &x) in row.iter().enumerate() {
                        acc += x * b[p][j];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

fn add_bias(a: &Mat, bias: &[f64]) -> Mat {
    a.iter()
        .map(|r| r.iter().zip(bias).map(|(x, y)| x + y).collect())
        .collect()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Mean-pooled output of the stack with relocation disabled.
pub fn encode_plain(
    cfg: &EncoderConfig,
    store: &ParameterStore,
    tokens: &[usize],
) -> Result<Vec<f64>, AutodiffError> {
    let tok = load(store, "encoder.token_embed")?;
    let pos = load(store, "encoder.pos_embed")?;
    let mut h: Mat = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| tok[t].iter().zip(&pos[i]).map(|(a, b)| a + b).collect())
        .collect();
    let inv = 1.0 / (cfg.dim as f64).sqrt();
    for layer in 0..cfg.layers {
        let w = |part: &str| load(store, &layer_name("encoder", layer, part));
        let q = matmul(&h, &w("wq")?);
        let k = matmul(&h, &w("wk")?);
        let v = matmul(&h, &w("wv")?);
        let attn: Mat = q
            .iter()
            .map(|qi| {
                let scores: Vec<f64> = k
                    .iter()
                    .map(|kj| {
                        let mut acc = 0.0;
                        for (a, b) in qi.iter().zip(kj) {
                            acc += a * b;
                        }
                        acc * inv
                    })
                    .collect();
                softmax(&scores)
            })
            .collect();
        let mixed = matmul(&matmul(&attn, &v), &w("wo")?);
        h = add(&h, &mixed);
        let f = add_bias(&matmul(&h, &w("w1")?), &w("b1")?[0]);
        let f: Mat = f.iter().map(|r| r.iter().map(|x| x.tanh()).collect()).collect();
        let f = add_bias(&matmul(&f, &w("w2")?), &w("b2")?[0]);
        h = add(&h, &f);
    }
    let n = h.len() as f64;
    Ok((0..cfg.dim)
        .map(|j| {
            let mut acc = 0.0;
            for row in &h {
                acc += row[j];
            }
            acc / n
        })
        .collect())
}
