//! Conditional flow-matching pretraining.
//!
//! Each example draws `t ~ U(0, 1)` and `z ~ N(0, I)`, forms
//! `x_t = (1 - t) * target + t * z` and regresses the velocity onto
//! `z - target`, the time derivative of that path. Encoder, predictor and
//! soft tokens are trained jointly with the velocity MLP.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::ModelConfig;
use super::task::EditInstance;
use super::FlowError;
use crate::autodiff::{BindMode, Bindings, Graph, ParameterStore, Tensor, Var};
use crate::optim::{AdamW, Schedule};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 3e-3,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Flow-matching loss on `batch` with the given per-row `(t, z)` draws.
pub fn cfm_loss(
    model: &ModelConfig,
    g: &mut Graph,
    b: &Bindings,
    batch: &[&EditInstance],
    draws: &[(f64, [f64; 2])],
) -> Result<Var, FlowError> {
    let n = batch.len();
    let cond = model.conditions(g, b, batch)?;
    let net = model.velocity_net();
    let mut xs = Vec::with_capacity(2 * n);
    let mut targets = Vec::with_capacity(2 * n);
    for (inst, (t, z)) in batch.iter().zip(draws) {
        for (y, e) in inst.target.iter().zip(z) {
            xs.push((1.0 - t) * y + t * e);
            targets.push(e - y);
        }
    }
    let x = g.constant(Tensor::matrix(n, 2, xs)?);
    let time = g.constant(Tensor::matrix(n, 1, draws.iter().map(|d| d.0).collect())?);
    let input = g.concat_cols(&[x, time, cond])?;
    let v = net.forward_input(g, b, input)?;
    let target = g.constant(Tensor::matrix(n, 2, targets)?);
    let err = g.sub(v, target)?;
    let sq = g.square(err)?;
    let per_row = g.sum_cols(sq)?;
    Ok(g.mean(per_row)?)
}

fn draw<R: Rng + ?Sized>(r: &mut R, n: usize) -> Vec<(f64, [f64; 2])> {
    (0..n)
        .map(|_| {
            let t: f64 = r.random();
            (t, [rng::normal(r), rng::normal(r)])
        })
        .collect()
}

/// Loss over the whole dataset with draws fixed by `seed`.
pub fn evaluation_loss(
    model: &ModelConfig,
    store: &ParameterStore,
    data: &[EditInstance],
    seed: u64,
) -> Result<f64, FlowError> {
    if data.is_empty() {
        return Err(FlowError::EmptyDataset);
    }
    let mut r = rng::stream_for(seed, &[0xE7A1]);
    let draws = draw(&mut r, data.len());
    let refs: Vec<&EditInstance> = data.iter().collect();
    let mut g = Graph::new();
    let b = store.bind(&mut g, BindMode::Frozen);
    let loss = cfm_loss(model, &mut g, &b, &refs, &draws)?;
    Ok(g.value(loss).item()?)
}

fn diverged(epoch: usize, batch: usize, e: impl std::fmt::Display) -> FlowError {
    FlowError::Diverged {
        epoch,
        batch,
        detail: e.to_string(),
    }
}

pub fn pretrain(
    model: &ModelConfig,
    store: &mut ParameterStore,
    data: &[EditInstance],
    cfg: &PretrainConfig,
) -> Result<PretrainReport, FlowError> {
    if data.is_empty() {
        return Err(FlowError::EmptyDataset);
    }
    let batch_size = cfg.batch_size.max(1);
    let per_epoch = data.len().div_ceil(batch_size);
    let mut opt = AdamW::new(Schedule::warmup_cosine(cfg.lr, cfg.epochs * per_epoch, 0.05));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut r = rng::stream_for(cfg.seed, &[0x9E7, epoch as u64]);
        order.shuffle(&mut r);
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(batch_size).enumerate() {
            let batch: Vec<&EditInstance> = chunk.iter().map(|&i| &data[i]).collect();
            let draws = draw(&mut r, batch.len());
            let mut g = Graph::new();
            let b = store.bind(&mut g, BindMode::Trainable);
            let loss = match cfm_loss(model, &mut g, &b, &batch, &draws) {
                Ok(l) => l,
                Err(e) if e.is_non_finite() => return Err(diverged(epoch, bi, e)),
                Err(e) => return Err(e),
            };
            let value = g.value(loss).item()?;
            let grads = g.backward(loss).map_err(|e| diverged(epoch, bi, e))?;
            store.zero_grad();
            store.accumulate_grads(&grads.by_param(&g))?;
            opt.step(store);
            if store.iter().any(|(_, p)| !p.value.all_finite()) {
                return Err(diverged(epoch, bi, "non-finite parameters after update"));
            }
            total += value;
        }
        epoch_losses.push(total / per_epoch as f64);
    }
    Ok(PretrainReport { epoch_losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::task::synth_dataset;
    use crate::focus::EncoderConfig;

    fn small() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                layers: 2,
                dim: 8,
                ff_dim: 16,
                xi: 3,
            },
            hidden: vec![32, 32],
            relocation: true,
        }
    }

    #[test]
    fn zero_epochs_leave_parameters_untouched() {
        let model = small();
        let mut store = model.init(1);
        let before = store.clone();
        let data = synth_dataset("move-to-mode", 16, 1).unwrap();
        let cfg = PretrainConfig {
            epochs: 0,
            ..PretrainConfig::default()
        };
        let report = pretrain(&model, &mut store, &data, &cfg).unwrap();
        assert!(report.epoch_losses.is_empty());
        assert_eq!(store, before);
    }

    #[test]
    fn one_epoch_reduces_training_loss_and_is_reproducible() {
        let model = small();
        let data = synth_dataset("move-to-mode", 256, 2).unwrap();
        let cfg = PretrainConfig {
            epochs: 1,
            lr: 3e-3,
            batch_size: 32,
            seed: 3,
        };
        let mut store = model.init(2);
        let before = evaluation_loss(&model, &store, &data, 9).unwrap();
        pretrain(&model, &mut store, &data, &cfg).unwrap();
        let after = evaluation_loss(&model, &store, &data, 9).unwrap();
        assert!(after < before, "{after} !< {before}");
        let mut again = model.init(2);
        pretrain(&model, &mut again, &data, &cfg).unwrap();
        assert_eq!(store, again);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let model = small();
        let mut store = model.init(1);
        assert!(matches!(
            pretrain(&model, &mut store, &[], &PretrainConfig::default()),
            Err(FlowError::EmptyDataset)
        ));
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let model = small();
        let mut store = model.init(1);
        for (_, p) in store.iter_mut() {
            p.value = p.value.map(|v| v * 1e150);
        }
        let data = synth_dataset("move-to-mode", 8, 1).unwrap();
        let err = pretrain(&model, &mut store, &data, &PretrainConfig::default()).unwrap_err();
        assert!(matches!(err, FlowError::Diverged { .. }), "{err}");
    }
}
