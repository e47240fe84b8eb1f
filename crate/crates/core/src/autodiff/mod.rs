//! Minimal reverse-mode automatic differentiation over dense f64 arrays.
//!
//! A [`Graph`] records every operation as it runs; [`Graph::backward`] then
//! sweeps the tape in reverse. [`Graph::stop_gradient`] is a forward identity
//! whose node never propagates gradient to its input, which is how the
//! samplers detach network inputs while keeping the additive state chain
//! differentiable.

pub mod checkpoint;
mod graph;
mod params;
mod tensor;

pub use graph::{gaussian_logpdf, Gradients, Graph, Var};
#[cfg(test)]
pub(crate) use graph::softmax_raw;
pub use params::{BindMode, Bindings, Param, ParameterStore};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("non-finite gradient during backward")]
    NonFiniteGradient,
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op} on an empty tensor")]
    Empty { op: &'static str },
    #[error("index {index} out of range for length {len} in {op}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn finite_difference<F>(x: &[f64], h: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let plus = f(&probe);
            probe[i] = orig - h;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Largest relative error between two gradient vectors, with an absolute
/// floor on the denominator so near-zero entries do not dominate.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
