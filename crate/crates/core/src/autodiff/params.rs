use std::collections::{BTreeMap, HashMap};

use super::{AutodiffError, Graph, Tensor, Var};

/// A named trainable array with its gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named parameter arrays, ordered by name so iteration is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Param>,
}

/// How a store's arrays enter a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BindMode {
    Trainable,
    Frozen,
}

/// Graph handles for every parameter of a store.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: HashMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var, AutodiffError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let grad = Tensor::zeros(value.shape());
        self.params.insert(name.into(), Param { value, grad });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, AutodiffError> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, AutodiffError> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor, AutodiffError> {
        self.params
            .get(name)
            .map(|p| &p.grad)
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Parameters whose name starts with `prefix.`.
    pub fn numel_in(&self, prefix: &str) -> usize {
        let dotted = format!("{prefix}.");
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(&dotted))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    /// Adds every parameter of the store to `graph` as a leaf.
    pub fn bind(&self, graph: &mut Graph, mode: BindMode) -> Bindings {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| {
                let v = match mode {
                    BindMode::Trainable => graph.param(name, p.value.clone()),
                    BindMode::Frozen => graph.constant(p.value.clone()),
                };
                (name.clone(), v)
            })
            .collect();
        Bindings { vars }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds per-name gradients into the grad slots.
    pub fn accumulate_grads(&mut self, grads: &BTreeMap<String, Tensor>) -> Result<(), AutodiffError> {
        for (name, g) in grads {
            let p = self
                .params
                .get_mut(name)
                .ok_or_else(|| AutodiffError::UnknownParam(name.clone()))?;
            if p.grad.shape() != g.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "accumulate_grads",
                    lhs: p.grad.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(AutodiffError::NonFiniteGradient);
            }
            for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .map(|p| p.grad.norm_sq())
            .sum::<f64>()
            .sqrt()
    }

    /// Flattened parameter values in name order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params
            .values()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.params
            .values()
            .flat_map(|p| p.grad.data().iter().copied())
            .collect()
    }

    /// Overwrites values from a flat vector laid out as [`flat_values`](Self::flat_values).
    pub fn set_flat_values(&mut self, flat: &[f64]) -> Result<(), AutodiffError> {
        if flat.len() != self.numel() {
            return Err(AutodiffError::DataLength {
                shape: vec![self.numel()],
                len: flat.len(),
            });
        }
        let mut offset = 0;
        for p in self.params.values_mut() {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}
