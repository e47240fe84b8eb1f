//! Tanh MLP predicting the velocity of a 2D point.
//!
//! Input row layout: `[x (2), t (1), condition (cond_dim)]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::FlowError;
use crate::autodiff::{Bindings, Graph, ParameterStore, Tensor, Var};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocityNet {
    pub hidden: Vec<usize>,
    pub cond_dim: usize,
}

impl VelocityNet {
    pub fn input_dim(&self) -> usize {
        3 + self.cond_dim
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(&self.hidden);
        w.push(2);
        w
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R) {
        let widths = self.widths();
        for (i, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let std = 1.0 / (fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| std * rng::normal(rng)).collect();
            store.insert(
                format!("velocity.w{i}"),
                Tensor::matrix(fan_in, fan_out, data).expect("shape"),
            );
            store.insert(format!("velocity.b{i}"), Tensor::zeros(&[fan_out]));
        }
    }

    /// `x` is `[n, 2]`, `cond` is `[n, cond_dim]`; every row is evaluated at time `t`.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bindings,
        x: Var,
        t: f64,
        cond: Var,
    ) -> Result<Var, FlowError> {
        if !(0.0..=1.0).contains(&t) {
            return Err(FlowError::BadTime(t));
        }
        let n = g.value(x).rows();
        let time = g.constant(Tensor::filled(&[n, 1], t));
        let input = g.concat_cols(&[x, time, cond])?;
        self.forward_input(g, b, input)
    }

    /// Forward pass on prebuilt `[n, input_dim]` rows, for callers whose rows
    /// carry different times.
    pub fn forward_input(&self, g: &mut Graph, b: &Bindings, input: Var) -> Result<Var, FlowError> {
        let mut h = input;
        let layers = self.hidden.len() + 1;
        for i in 0..layers {
            h = g.matmul(h, b.get(&format!("velocity.w{i}"))?)?;
            h = g.add_row(h, b.get(&format!("velocity.b{i}"))?)?;
            if i + 1 < layers {
                h = g.tanh(h)?;
            }
        }
        Ok(h)
    }
}
