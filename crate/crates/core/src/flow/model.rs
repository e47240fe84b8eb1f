//! The full editing policy: instruction encoder feeding a velocity MLP.
//!
//! The condition row for an instance is `[source_x, source_y, embedding]`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::task::EditInstance;
use super::velocity::VelocityNet;
use super::FlowError;
use crate::autodiff::{Bindings, Graph, ParameterStore, Tensor, Var};
use crate::focus::EncoderConfig;
use crate::rng;
use crate::sampler::VelocityField;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub hidden: Vec<usize>,
    pub relocation: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            hidden: vec![64, 64],
            relocation: true,
        }
    }
}

impl ModelConfig {
    pub fn velocity_net(&self) -> VelocityNet {
        VelocityNet {
            hidden: self.hidden.clone(),
            cond_dim: 2 + self.encoder.dim,
        }
    }

    pub fn init(&self, seed: u64) -> ParameterStore {
        let mut store = ParameterStore::new();
        let mut r = rng::stream_for(seed, &[0x1417]);
        self.encoder.init_params(&mut store, &mut r);
        self.velocity_net().init_params(&mut store, &mut r);
        store
    }

    /// Condition rows `[n, 2 + dim]`, one per instance. Each distinct
    /// instruction is encoded once.
    pub fn conditions(
        &self,
        g: &mut Graph,
        b: &Bindings,
        instances: &[&EditInstance],
    ) -> Result<Var, FlowError> {
        let mut cache: HashMap<&[usize], Var> = HashMap::new();
        let mut rows = Vec::with_capacity(instances.len());
        for inst in instances {
            let tokens = inst.instruction.tokens.as_slice();
            let emb = match cache.get(tokens) {
                Some(&v) => v,
                None => {
                    let e = self.encoder.encode(g, b, tokens, self.relocation)?.embedding;
                    let e = g.reshape(e, vec![1, self.encoder.dim])?;
                    cache.insert(tokens, e);
                    e
                }
            };
            let src = g.constant(Tensor::matrix(1, 2, inst.source.to_vec())?);
            rows.push(g.concat_cols(&[src, emb])?);
        }
        Ok(g.stack_rows(&rows)?)
    }

    pub fn bind_field<'a>(&'a self, b: &'a Bindings, cond: Var) -> ModelField<'a> {
        ModelField {
            net: self.velocity_net(),
            bindings: b,
            cond,
        }
    }
}

/// Velocity field for a fixed block of condition rows.
pub struct ModelField<'a> {
    net: VelocityNet,
    bindings: &'a Bindings,
    cond: Var,
}

impl VelocityField for ModelField<'_> {
    fn velocity(&self, g: &mut Graph, x: Var, t: f64) -> Result<Var, FlowError> {
        self.net.forward(g, self.bindings, x, t, self.cond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::BindMode;
    use crate::flow::task::synth_dataset;

    #[test]
    fn condition_rows_carry_source_and_shared_embedding() {
        let cfg = ModelConfig::default();
        let store = cfg.init(1);
        let data = synth_dataset("move-to-mode", 6, 2).unwrap();
        let refs: Vec<&EditInstance> = data.iter().collect();
        let mut g = Graph::new();
        let b = store.bind(&mut g, BindMode::Frozen);
        let c = cfg.conditions(&mut g, &b, &refs).unwrap();
        let c = g.value(c).clone();
        assert_eq!(c.shape(), &[6, 18]);
        for (i, inst) in data.iter().enumerate() {
            assert_eq!(&c.row(i)[..2], &inst.source);
            for (j, other) in data.iter().enumerate() {
                if inst.instruction == other.instruction {
                    assert_eq!(&c.row(i)[2..], &c.row(j)[2..]);
                }
            }
        }
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.init(5), cfg.init(5));
        assert_ne!(cfg.init(5), cfg.init(6));
    }
}
