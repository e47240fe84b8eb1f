//! Instruction encoder with dynamic token focus relocation.
//!
//! A stack of single-head self-attention blocks encodes the instruction
//! tokens. With relocation enabled, each layer first scores every window of
//! `xi` consecutive positions with a per-layer linear head, picks the best
//! window start (hard argmax, lowest index on ties) and overwrites that window
//! with the layer's learnable soft tokens. Gradients reach the scoring head
//! through a straight-through term: the forward pass sees only the hard
//! choice, the backward pass sees the softmax over window starts.

pub mod reference;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Bindings, Graph, ParameterStore, Tensor, Var};
use crate::flow::task::{MAX_TOKENS, VOCAB};
use crate::rng;

#[derive(Debug, Error)]
pub enum FocusError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("token id {0} is not in the vocabulary")]
    UnknownToken(usize),
    #[error("instruction length {0} outside 1..={MAX_TOKENS}")]
    BadLength(usize),
    #[error("window {pos}..{end} exceeds sequence length {len}")]
    OutOfBounds { pos: usize, end: usize, len: usize },
    #[error("sequence of length {len} is too short for {xi} soft tokens")]
    NoInjection { len: usize, xi: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub ff_dim: usize,
    /// Soft tokens injected per layer.
    pub xi: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            dim: 16,
            ff_dim: 32,
            xi: 4,
        }
    }
}

pub(crate) fn layer_name(kind: &str, layer: usize, part: &str) -> String {
    format!("{kind}.l{layer}.{part}")
}

/// Window-start scoring matrix: row `p` sums token scores `p..p + xi`.
fn window_matrix(len: usize, xi: usize) -> Tensor {
    let starts = len - xi + 1;
    let mut data = vec![0.0; starts * len];
    for p in 0..starts {
        for j in p..p + xi {
            data[p * len + j] = 1.0;
        }
    }
    Tensor::matrix(starts, len, data).expect("window shape")
}

/// Argmax with the lowest index winning ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-layer introspection record.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub pos: Option<usize>,
    pub position_distribution: Vec<f64>,
    /// Row-stochastic attention map, query rows by key columns.
    pub attention: Tensor,
}

#[derive(Clone, Debug)]
pub struct Encoded {
    /// Mean-pooled final layer, shape `[dim]`.
    pub embedding: Var,
    pub layers: Vec<LayerTrace>,
}

/// Output of the position predictor for one layer.
#[derive(Clone, Copy, Debug)]
pub struct PositionChoice {
    pub pos: usize,
    /// `[1, l - xi + 1]` softmax over window starts.
    pub distribution: Var,
}

impl EncoderConfig {
    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R) {
        let d = self.dim;
        let mut normal = |rows: usize, cols: usize, std: f64| {
            let data = (0..rows * cols).map(|_| std * rng::normal(rng)).collect();
            Tensor::matrix(rows, cols, data).expect("shape")
        };
        store.insert("encoder.token_embed", normal(VOCAB.len(), d, 1.0));
        store.insert("encoder.pos_embed", normal(MAX_TOKENS, d, 0.1));
        let proj = 1.0 / (d as f64).sqrt();
        for i in 0..self.layers {
            // Small query/key weights keep the untrained attention close to uniform.
            store.insert(layer_name("encoder", i, "wq"), normal(d, d, 0.01));
            store.insert(layer_name("encoder", i, "wk"), normal(d, d, 0.01));
            store.insert(layer_name("encoder", i, "wv"), normal(d, d, proj));
            store.insert(layer_name("encoder", i, "wo"), normal(d, d, proj));
            store.insert(layer_name("encoder", i, "w1"), normal(d, self.ff_dim, proj));
            store.insert(layer_name("encoder", i, "b1"), Tensor::zeros(&[self.ff_dim]));
            store.insert(
                layer_name("encoder", i, "w2"),
                normal(self.ff_dim, d, 1.0 / (self.ff_dim as f64).sqrt()),
            );
            store.insert(layer_name("encoder", i, "b2"), Tensor::zeros(&[d]));
            store.insert(layer_name("predictor", i, "w"), normal(d, 1, 0.1));
            store.insert(layer_name("predictor", i, "b"), Tensor::zeros(&[1]));
            store.insert(layer_name("soft_tokens", i, "s"), normal(self.xi, d, 1.0));
        }
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<(), FocusError> {
        if tokens.is_empty() || tokens.len() > MAX_TOKENS {
            return Err(FocusError::BadLength(tokens.len()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= VOCAB.len()) {
            return Err(FocusError::UnknownToken(bad));
        }
        Ok(())
    }

    /// Token plus position embeddings, `[l, dim]`.
    pub fn embed(&self, g: &mut Graph, b: &Bindings, tokens: &[usize]) -> Result<Var, FocusError> {
        self.check_tokens(tokens)?;
        let tok = g.gather_rows(b.get("encoder.token_embed")?, tokens)?;
        let pos = g.slice_rows(b.get("encoder.pos_embed")?, 0, tokens.len())?;
        Ok(g.add(tok, pos)?)
    }

    /// Scores every window start of `h` for `layer`.
    pub fn predict_pos(
        &self,
        g: &mut Graph,
        b: &Bindings,
        h: Var,
        layer: usize,
    ) -> Result<PositionChoice, FocusError> {
        let len = g.value(h).rows();
        if len <= self.xi {
            return Err(FocusError::NoInjection { len, xi: self.xi });
        }
        let w = b.get(&layer_name("predictor", layer, "w"))?;
        let bias = b.get(&layer_name("predictor", layer, "b"))?;
        let scores = g.matmul(h, w)?;
        let scores = g.add_row(scores, bias)?;
        let window = g.constant(window_matrix(len, self.xi));
        let logits = g.matmul(window, scores)?;
        let starts = len - self.xi + 1;
        let logits = g.reshape(logits, vec![1, starts])?;
        let distribution = g.softmax_rows(logits)?;
        let pos = argmax(g.value(logits).data());
        debug_assert!(pos <= len - self.xi);
        Ok(PositionChoice { pos, distribution })
    }

    /// Replaces rows `pos..pos + xi` of `h` with `soft` (`[xi, dim]`).
    pub fn inject(&self, g: &mut Graph, h: Var, pos: usize, soft: Var) -> Result<Var, FocusError> {
        let len = g.value(h).rows();
        let xi = g.value(soft).rows();
        if pos + xi > len {
            return Err(FocusError::OutOfBounds {
                pos,
                end: pos + xi,
                len,
            });
        }
        Ok(g.replace_rows(h, soft, pos)?)
    }

    /// Hard injection at the chosen window plus a zero-valued term whose
    /// derivative with respect to the window distribution is the derivative
    /// of the softmax-weighted mixture of all possible injections.
    pub fn relocate(
        &self,
        g: &mut Graph,
        h: Var,
        choice: PositionChoice,
        soft: Var,
    ) -> Result<Var, FocusError> {
        let hard = self.inject(g, h, choice.pos, soft)?;
        let (len, d) = (g.value(h).rows(), g.value(h).cols());
        let xi = g.value(soft).rows();
        let starts = len - xi + 1;

        let frozen = g.stop_gradient(choice.distribution);
        let delta = g.sub(choice.distribution, frozen)?;
        let delta = g.reshape(delta, vec![starts, 1])?;

        // keep[j] = sum_p delta_p * [row j not covered by window p]
        let window = window_matrix(len, xi);
        let mut uncovered = vec![0.0; len * starts];
        for j in 0..len {
            for p in 0..starts {
                uncovered[j * starts + p] = 1.0 - window.get(p, j);
            }
        }
        let uncovered = g.constant(Tensor::matrix(len, starts, uncovered)?);
        let keep = g.matmul(uncovered, delta)?;
        let ones = g.constant(Tensor::filled(&[1, d], 1.0));
        let keep = g.matmul(keep, ones)?;
        let kept = g.mul(h, keep)?;

        // placement[j, q] = delta_{j - q} for 0 <= j - q < starts
        let mut selector = vec![0.0; len * xi * starts];
        for j in 0..len {
            for q in 0..xi {
                if j >= q && j - q < starts {
                    selector[(j * xi + q) * starts + (j - q)] = 1.0;
                }
            }
        }
        let selector = g.constant(Tensor::matrix(len * xi, starts, selector)?);
        let placement = g.matmul(selector, delta)?;
        let placement = g.reshape(placement, vec![len, xi])?;
        let placed = g.matmul(placement, soft)?;

        let relaxed = g.add(kept, placed)?;
        Ok(g.add(hard, relaxed)?)
    }

    /// Single-head self-attention block with a tanh feed-forward, both residual.
    /// Returns the new state and the attention map.
    pub fn attention_block(
        &self,
        g: &mut Graph,
        b: &Bindings,
        h: Var,
        layer: usize,
    ) -> Result<(Var, Var), FocusError> {
        let p = |part: &str| b.get(&layer_name("encoder", layer, part));
        let q = g.matmul(h, p("wq")?)?;
        let k = g.matmul(h, p("wk")?)?;
        let v = g.matmul(h, p("wv")?)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (self.dim as f64).sqrt())?;
        let attn = g.softmax_rows(scores)?;
        let mixed = g.matmul(attn, v)?;
        let mixed = g.matmul(mixed, p("wo")?)?;
        let h = g.add(h, mixed)?;
        let f = g.matmul(h, p("w1")?)?;
        let f = g.add_row(f, p("b1")?)?;
        let f = g.tanh(f)?;
        let f = g.matmul(f, p("w2")?)?;
        let f = g.add_row(f, p("b2")?)?;
        Ok((g.add(h, f)?, attn))
    }

    pub fn encode(
        &self,
        g: &mut Graph,
        b: &Bindings,
        tokens: &[usize],
        relocation: bool,
    ) -> Result<Encoded, FocusError> {
        let mut h = self.embed(g, b, tokens)?;
        let mut layers = Vec::with_capacity(self.layers);
        for i in 0..self.layers {
            let mut pos = None;
            let mut position_distribution = Vec::new();
            if relocation && tokens.len() > self.xi {
                let choice = self.predict_pos(g, b, h, i)?;
                let soft = b.get(&layer_name("soft_tokens", i, "s"))?;
                h = self.relocate(g, h, choice, soft)?;
                pos = Some(choice.pos);
                position_distribution = g.value(choice.distribution).data().to_vec();
            }
            let (next, attn) = self.attention_block(g, b, h, i)?;
            h = next;
            layers.push(LayerTrace {
                pos,
                position_distribution,
                attention: g.value(attn).clone(),
            });
        }
        let embedding = g.mean_rows(h)?;
        Ok(Encoded { embedding, layers })
    }
}

/// Soft-token focus scores against an attention map.
///
/// `soft` is `xi × l` (one profile over sequence positions per soft token),
/// `attention` is the `l × l` row-stochastic map. Entry `(q, j)` contracts
/// soft token `q` with query row `j` of the map, so each score is a convex
/// combination of that token's entries.
pub fn focus_scores(soft: &Tensor, attention: &Tensor) -> Result<Tensor, FocusError> {
    let (xi, l) = (soft.rows(), soft.cols());
    if attention.shape() != [l, l] {
        return Err(FocusError::Autodiff(AutodiffError::ShapeMismatch {
            op: "focus_scores",
            lhs: soft.shape().to_vec(),
            rhs: attention.shape().to_vec(),
        }));
    }
    let mut data = vec![0.0; xi * l];
    for q in 0..xi {
        for j in 0..l {
            data[q * l + j] = soft
                .row(q)
                .iter()
                .zip(attention.row(j))
                .map(|(s, a)| s * a)
                .sum();
        }
    }
    Ok(Tensor::matrix(xi, l, data)?)
}

/// One row of the attention probe report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub layer: usize,
    pub pos: Option<usize>,
    /// Key position receiving the most total attention.
    pub argmax_position: usize,
    pub argmax_token: String,
    pub mean_entropy: f64,
    pub row_entropies: Vec<f64>,
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Per-layer focus position, most-attended token and attention entropies.
pub fn attention_probe(
    cfg: &EncoderConfig,
    params: &ParameterStore,
    tokens: &[usize],
    relocation: bool,
) -> Result<Vec<ProbeRow>, FocusError> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, crate::autodiff::BindMode::Frozen);
    let enc = cfg.encode(&mut g, &b, tokens, relocation)?;
    Ok(enc
        .layers
        .iter()
        .enumerate()
        .map(|(layer, tr)| {
            let l = tr.attention.rows();
            let column_mass: Vec<f64> = (0..l)
                .map(|k| (0..l).map(|q| tr.attention.get(q, k)).sum())
                .collect();
            let argmax_position = argmax(&column_mass);
            let injected = tr
                .pos
                .is_some_and(|p| argmax_position >= p && argmax_position < p + cfg.xi);
            let argmax_token = if injected {
                format!("<soft{}>", argmax_position - tr.pos.unwrap_or(0))
            } else {
                VOCAB[tokens[argmax_position]].to_string()
            };
            let row_entropies: Vec<f64> = (0..l).map(|q| entropy(tr.attention.row(q))).collect();
            let mean_entropy = row_entropies.iter().sum::<f64>() / l as f64;
            ProbeRow {
                layer,
                pos: tr.pos,
                argmax_position,
                argmax_token,
                mean_entropy,
                row_entropies,
            }
        })
        .collect())
}

pub const PROBE_HEADER: &str = "layer,pos,argmax_position,argmax_token,mean_entropy";

pub fn probe_csv(rows: &[ProbeRow]) -> String {
    let mut out = String::from(PROBE_HEADER);
    out.push('\n');
    for r in rows {
        let pos = r.pos.map_or_else(|| "-".to_string(), |p| p.to_string());
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.layer, pos, r.argmax_position, r.argmax_token, r.mean_entropy
        ));
    }
    out
}
