//! Group-relative policy optimisation over full SDE trajectories.
//!
//! Advantages are z-scores of rewards pooled over the whole batch, averaged
//! per instance. Each stochastic step contributes a clipped importance-ratio
//! surrogate; a Gaussian KL to a frozen reference policy regularises the
//! transition means.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::flow::task::EditInstance;
use crate::sampler::{transition_mean, SamplerError, SdeConfig, Trajectory, VelocityField};

/// Standard deviations below this make a reward set degenerate.
pub const MIN_STD: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("degenerate rewards: std {std:e} below {MIN_STD:e}")]
    Degenerate { std: f64 },
    #[error("need at least {min} {what}, got {got}")]
    TooSmall {
        what: &'static str,
        min: usize,
        got: usize,
    },
    #[error("reward table is ragged or does not match the rollouts")]
    Ragged,
    #[error("step {0} is deterministic; no probability ratio exists")]
    Deterministic(usize),
    #[error("trajectory does not cover step {0}")]
    MissingStep(usize),
    #[error("non-finite reward")]
    NonFiniteReward,
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Within-group z-scores.
pub fn group_advantage(rewards: &[f64]) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::TooSmall {
            what: "rollouts per group",
            min: 2,
            got: rewards.len(),
        });
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(GrpoError::NonFiniteReward);
    }
    let (mean, std) = mean_std(rewards);
    if std < MIN_STD {
        return Err(GrpoError::Degenerate { std });
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Per-instance advantages from a `B × G` reward table, z-scored against the
/// pooled batch statistics and averaged over each instance's group.
pub fn batch_advantage(rewards: &[Vec<f64>]) -> Result<Vec<f64>, GrpoError> {
    let group = rewards.first().map_or(0, Vec::len);
    if rewards.iter().any(|r| r.len() != group) {
        return Err(GrpoError::Ragged);
    }
    let pooled: Vec<f64> = rewards.iter().flatten().copied().collect();
    if pooled.len() < 2 {
        return Err(GrpoError::TooSmall {
            what: "rewards in the batch",
            min: 2,
            got: pooled.len(),
        });
    }
    if pooled.iter().any(|r| !r.is_finite()) {
        return Err(GrpoError::NonFiniteReward);
    }
    let (mean, std) = mean_std(&pooled);
    if std < MIN_STD {
        return Err(GrpoError::Degenerate { std });
    }
    Ok(rewards
        .iter()
        .map(|row| row.iter().map(|r| (r - mean) / std).sum::<f64>() / group as f64)
        .collect())
}

/// `B` instances with `G` rollouts each, stored instance-major
/// (row `b * G + i`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupBatch {
    pub instances: Vec<EditInstance>,
    pub group: usize,
    pub rollouts: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl GroupBatch {
    pub fn new(
        instances: Vec<EditInstance>,
        group: usize,
        rollouts: Vec<Trajectory>,
        rewards: Vec<f64>,
    ) -> Result<Self, GrpoError> {
        if instances.len() < 2 {
            return Err(GrpoError::TooSmall {
                what: "instances",
                min: 2,
                got: instances.len(),
            });
        }
        if group < 2 {
            return Err(GrpoError::TooSmall {
                what: "rollouts per instance",
                min: 2,
                got: group,
            });
        }
        let rows = instances.len() * group;
        if rollouts.len() != rows || rewards.len() != rows {
            return Err(GrpoError::Ragged);
        }
        let table: Vec<Vec<f64>> = rewards.chunks(group).map(<[f64]>::to_vec).collect();
        let advantages = batch_advantage(&table)?;
        Ok(Self {
            instances,
            group,
            rollouts,
            rewards,
            advantages,
        })
    }

    /// Advantage for every rollout row.
    pub fn row_advantages(&self) -> Vec<f64> {
        self.advantages
            .iter()
            .flat_map(|&a| std::iter::repeat_n(a, self.group))
            .collect()
    }

    pub fn mean_reward(&self) -> f64 {
        self.rewards.iter().sum::<f64>() / self.rewards.len() as f64
    }
}

/// Stored transitions of every row at one step index.
#[derive(Clone, Debug)]
pub struct StepBlock {
    pub index: usize,
    pub states: Tensor,
    pub next: Tensor,
    pub logp_old: Vec<f64>,
}

pub fn step_block(trajectories: &[Trajectory], index: usize) -> Result<StepBlock, GrpoError> {
    let n = trajectories.len();
    let mut states = Vec::with_capacity(2 * n);
    let mut next = Vec::with_capacity(2 * n);
    let mut logp_old = Vec::with_capacity(n);
    for tr in trajectories {
        if index == 0 || index > tr.start_index || index <= tr.end_index() {
            return Err(GrpoError::MissingStep(index));
        }
        let j = tr.start_index - index;
        states.extend(tr.states[j]);
        next.extend(tr.states[j + 1]);
        logp_old.push(tr.logps[j].ok_or(GrpoError::Deterministic(index))?);
    }
    Ok(StepBlock {
        index,
        states: Tensor::matrix(n, 2, states)?,
        next: Tensor::matrix(n, 2, next)?,
        logp_old,
    })
}

/// Log density `[n]` of the stored transitions under `field`, with the mean `[n, 2]`.
pub fn transition_logp(
    g: &mut Graph,
    field: &dyn VelocityField,
    block: &StepBlock,
    cfg: &SdeConfig,
) -> Result<(Var, Var), GrpoError> {
    let std = cfg.noise_std(block.index);
    if std == 0.0 {
        return Err(GrpoError::Deterministic(block.index));
    }
    let x = g.constant(block.states.clone());
    let mean = transition_mean(g, field, x, block.index, cfg)?;
    let next = g.constant(block.next.clone());
    let sd = g.constant(Tensor::filled(block.next.shape(), std));
    let lp = g.gaussian_logpdf(next, mean, sd)?;
    Ok((g.sum_cols(lp)?, mean))
}

/// `log p_theta - log p_old` per row, with the theta-mean.
pub fn step_log_ratio(
    g: &mut Graph,
    theta: &dyn VelocityField,
    block: &StepBlock,
    cfg: &SdeConfig,
) -> Result<(Var, Var), GrpoError> {
    let (lp, mean) = transition_logp(g, theta, block, cfg)?;
    let old = g.constant(Tensor::vector(block.logp_old.clone()));
    Ok((g.sub(lp, old)?, mean))
}

pub fn step_ratio(
    g: &mut Graph,
    theta: &dyn VelocityField,
    block: &StepBlock,
    cfg: &SdeConfig,
) -> Result<Var, GrpoError> {
    let (lr, _) = step_log_ratio(g, theta, block, cfg)?;
    Ok(g.exp(lr)?)
}

/// `min(r * A, clip(r, 1 - eps, 1 + eps) * A)` elementwise.
pub fn clipped_surrogate(g: &mut Graph, ratio: Var, adv: Var, eps: f64) -> Result<Var, AutodiffError> {
    let plain = g.mul(ratio, adv)?;
    let clipped = g.clip(ratio, 1.0 - eps, 1.0 + eps)?;
    let clipped = g.mul(clipped, adv)?;
    g.minimum(plain, clipped)
}

/// Per-row Gaussian KL `[n]` between transitions sharing std `std`.
pub fn gaussian_kl(g: &mut Graph, mean: Var, mean_ref: Var, std: f64) -> Result<Var, AutodiffError> {
    let d = g.sub(mean, mean_ref)?;
    let sq = g.square(d)?;
    let per_row = g.sum_cols(sq)?;
    g.scale(per_row, 1.0 / (2.0 * std * std))
}

#[derive(Clone, Copy, Debug)]
pub struct Objective {
    /// Scalar to minimise: `-(surrogate - beta * kl)`.
    pub loss: Var,
    pub surrogate: f64,
    pub kl: f64,
}

impl Objective {
    pub fn value(&self) -> f64 {
        self.surrogate
    }
}

/// Clipped surrogate averaged over rows and the given step indices, minus
/// `beta` times the mean per-step KL to the reference.
#[allow(clippy::too_many_arguments)]
pub fn grpo_objective(
    g: &mut Graph,
    theta: &dyn VelocityField,
    reference: &dyn VelocityField,
    trajectories: &[Trajectory],
    row_advantages: &[f64],
    steps: &[usize],
    cfg: &SdeConfig,
    eps: f64,
    beta: f64,
) -> Result<Objective, GrpoError> {
    if trajectories.len() != row_advantages.len() || steps.is_empty() {
        return Err(GrpoError::Ragged);
    }
    let adv = g.constant(Tensor::vector(row_advantages.to_vec()));
    let mut surr_total: Option<Var> = None;
    let mut kl_total: Option<Var> = None;
    for &index in steps {
        let block = step_block(trajectories, index)?;
        let (log_ratio, mean) = step_log_ratio(g, theta, &block, cfg)?;
        let ratio = g.exp(log_ratio)?;
        let surr = clipped_surrogate(g, ratio, adv, eps)?;
        surr_total = Some(match surr_total {
            Some(acc) => g.add(acc, surr)?,
            None => surr,
        });
        let (_, mean_ref) = transition_logp(g, reference, &block, cfg)?;
        let mean_ref = g.stop_gradient(mean_ref);
        let kl = gaussian_kl(g, mean, mean_ref, cfg.noise_std(index))?;
        kl_total = Some(match kl_total {
            Some(acc) => g.add(acc, kl)?,
            None => kl,
        });
    }
    let inv_steps = 1.0 / steps.len() as f64;
    let surr = g.mean(surr_total.expect("steps nonempty"))?;
    let surr = g.scale(surr, inv_steps)?;
    let kl = g.mean(kl_total.expect("steps nonempty"))?;
    let kl = g.scale(kl, inv_steps)?;
    let penalty = g.scale(kl, beta)?;
    let j = g.sub(surr, penalty)?;
    let loss = g.neg(j)?;
    Ok(Objective {
        loss,
        surrogate: g.value(surr).item()?,
        kl: g.value(kl).item()?,
    })
}

/// Every step index of a `T`-step trajectory, from `T` down to 1.
pub fn all_steps(cfg: &SdeConfig) -> Vec<usize> {
    (1..=cfg.steps).rev().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn group_advantage_worked_example() {
        let a = group_advantage(&[1.0, 2.0, 3.0]).unwrap();
        let expect = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!((a[0] + expect).abs() < 1e-12 && a[1].abs() < 1e-15 && (a[2] - expect).abs() < 1e-12);
        assert!((a[2] - 1.2247).abs() < 1e-4);
        assert!(matches!(group_advantage(&[4.0; 5]), Err(GrpoError::Degenerate { .. })));
        let shifted = group_advantage(&[11.0, 12.0, 13.0]).unwrap();
        for (x, y) in a.iter().zip(&shifted) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_advantage_worked_example() {
        let a = batch_advantage(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        // mean 2.5, std sqrt(1.25); instance means 1.5 and 3.5
        let expect = 1.0 / 1.25f64.sqrt();
        assert!((a[0] + expect).abs() < 1e-12);
        assert!((a[1] - expect).abs() < 1e-12);
        assert!((a[1] - 0.8944).abs() < 1e-4);
        assert!(matches!(
            batch_advantage(&[vec![2.0, 2.0], vec![2.0, 2.0]]),
            Err(GrpoError::Degenerate { .. })
        ));
        assert!(matches!(batch_advantage(&[vec![1.0, 2.0], vec![3.0]]), Err(GrpoError::Ragged)));
    }

    #[test]
    fn surrogate_clips_only_in_the_profitable_direction() {
        let mut g = Graph::new();
        let r = g.param("r", Tensor::vector(vec![1.5, 1.5, 0.5, 1.1]));
        let a = g.constant(Tensor::vector(vec![1.0, -1.0, -1.0, 2.0]));
        let s = clipped_surrogate(&mut g, r, a, 0.2).unwrap();
        assert_eq!(g.value(s).data(), &[1.2, -1.5, -0.8, 2.2]);
        let total = g.sum(s).unwrap();
        let grads = g.backward(total).unwrap();
        // positive advantage above the band and negative below it: zero gradient
        assert_eq!(grads.wrt(r, &g).data(), &[0.0, -1.0, 0.0, 2.0]);
    }

    use crate::autodiff::{finite_difference, gaussian_logpdf, max_relative_error, BindMode, ParameterStore};
    use crate::flow::velocity::VelocityNet;
    use crate::rng;
    use crate::sampler::{prior_sample, rollout};

    const ROWS: usize = 4;

    fn net() -> VelocityNet {
        VelocityNet {
            hidden: vec![6],
            cond_dim: 1,
        }
    }

    fn store(seed: u64) -> ParameterStore {
        let mut s = ParameterStore::new();
        net().init_params(&mut s, &mut rng::stream(seed));
        s
    }

    fn nudged(base: &ParameterStore, by: f64) -> ParameterStore {
        let mut s = base.clone();
        let mut r = rng::stream(7);
        let v: Vec<f64> = s.flat_values().iter().map(|x| x + by * rng::normal(&mut r)).collect();
        s.set_flat_values(&v).unwrap();
        s
    }

    /// Two instances, two rows each: rows `0..2` share condition 0.4, `2..4` share -0.3.
    fn cond() -> Tensor {
        Tensor::matrix(ROWS, 1, vec![0.4, 0.4, -0.3, -0.3]).unwrap()
    }

    fn sample(old: &ParameterStore, cfg: &SdeConfig) -> Vec<Trajectory> {
        let net = net();
        let mut g = Graph::new();
        let b = old.bind(&mut g, BindMode::Frozen);
        let c = g.constant(cond());
        let field = |g: &mut Graph, x: Var, t: f64| net.forward(g, &b, x, t, c);
        let mut rngs: Vec<_> = (0..ROWS as u64).map(|i| rng::stream_for(3, &[i])).collect();
        let x = g.constant(prior_sample(&mut rngs));
        rollout(&mut g, &field, x, cfg.steps, cfg.steps, cfg, &mut rngs, false)
            .unwrap()
            .trajectories
    }

    /// Loss and parameter gradients of the objective for `theta`.
    fn objective_at(
        theta: &ParameterStore,
        reference: &ParameterStore,
        trajs: &[Trajectory],
        adv: &[f64],
        cfg: &SdeConfig,
        beta: f64,
    ) -> (Objective, f64, Vec<f64>) {
        let net = net();
        let mut g = Graph::new();
        let bt = theta.bind(&mut g, BindMode::Trainable);
        let br = reference.bind(&mut g, BindMode::Frozen);
        let c = g.constant(cond());
        let ft = |g: &mut Graph, x: Var, t: f64| net.forward(g, &bt, x, t, c);
        let fr = |g: &mut Graph, x: Var, t: f64| net.forward(g, &br, x, t, c);
        let obj = grpo_objective(&mut g, &ft, &fr, trajs, adv, &all_steps(cfg), cfg, 0.2, beta).unwrap();
        let loss = g.value(obj.loss).item().unwrap();
        let grads = g.backward(obj.loss).unwrap().by_param(&g);
        let flat = theta
            .iter()
            .flat_map(|(n, p)| grads.get(n).map_or(vec![0.0; p.value.len()], |t| t.data().to_vec()))
            .collect();
        (obj, loss, flat)
    }

    #[test]
    fn log_ratio_matches_independent_recomputation() {
        let cfg = SdeConfig::constant(5, 0.6).unwrap();
        let old = store(1);
        let theta = nudged(&old, 0.05);
        let trajs = sample(&old, &cfg);
        let net = net();
        for index in all_steps(&cfg) {
            let block = step_block(&trajs, index).unwrap();
            let mut g = Graph::new();
            let bt = theta.bind(&mut g, BindMode::Frozen);
            let c = g.constant(cond());
            let ft = |g: &mut Graph, x: Var, t: f64| net.forward(g, &bt, x, t, c);
            let (lr, _) = step_log_ratio(&mut g, &ft, &block, &cfg).unwrap();
            let ratio = step_ratio(&mut g, &ft, &block, &cfg).unwrap();
            let got = g.value(lr).data().to_vec();

            // Independent: plain velocity evaluations and the scalar density.
            let t = cfg.time(index);
            let (sigma, std) = (cfg.sigma(index), cfg.noise_std(index));
            let logp = |params: &ParameterStore| -> Vec<f64> {
                let mut h = Graph::new();
                let b = params.bind(&mut h, BindMode::Frozen);
                let c = h.constant(cond());
                let x = h.constant(block.states.clone());
                let v = net.forward(&mut h, &b, x, t, c).unwrap();
                let v = h.value(v).clone();
                (0..ROWS)
                    .map(|i| {
                        (0..2)
                            .map(|d| {
                                let x = block.states.get(i, d);
                                let s = v.get(i, d) + 0.5 * sigma * sigma * (x + (1.0 - t) * v.get(i, d));
                                gaussian_logpdf(block.next.get(i, d), x - s / cfg.steps as f64, std)
                            })
                            .sum()
                    })
                    .collect()
            };
            let (lt, lo) = (logp(&theta), logp(&old));
            for i in 0..ROWS {
                assert!((got[i] - (lt[i] - lo[i])).abs() < 1e-12, "step {index} row {i}");
                assert!((lo[i] - block.logp_old[i]).abs() < 1e-12);
                assert!(g.value(ratio).data()[i] > 0.0);
            }
        }
    }

    #[test]
    fn objective_vanishes_at_the_sampling_parameters() {
        let cfg = SdeConfig::constant(4, 0.5).unwrap();
        let old = store(2);
        let trajs = sample(&old, &cfg);
        let adv = batch_advantage(&[vec![3.0, 5.0], vec![9.0, 4.0]]).unwrap();
        let rows: Vec<f64> = adv.iter().flat_map(|&a| [a, a]).collect();
        let (obj, _, grads) = objective_at(&old, &old, &trajs, &rows, &cfg, 0.0);
        assert!(obj.surrogate.abs() < 1e-12);
        assert_eq!(obj.kl, 0.0);
        assert!(grads.iter().any(|&v| v != 0.0));

        // With zero advantages and no KL nothing is left to differentiate.
        let (_, loss, grads) = objective_at(&old, &nudged(&old, 0.1), &trajs, &[0.0; ROWS], &cfg, 0.0);
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let cfg = SdeConfig::constant(2, 0.8).unwrap();
        let old = store(4);
        let theta = nudged(&old, 0.02);
        let reference = nudged(&old, 0.05);
        let trajs = sample(&old, &cfg);
        let adv = [0.9, 0.9, -0.9, -0.9];
        let (_, _, analytic) = objective_at(&theta, &reference, &trajs, &adv, &cfg, 0.1);
        let numeric = finite_difference(&theta.flat_values(), 1e-5, |v| {
            let mut s = theta.clone();
            s.set_flat_values(v).unwrap();
            objective_at(&s, &reference, &trajs, &adv, &cfg, 0.1).1
        });
        let err = max_relative_error(&analytic, &numeric, 1e-7);
        assert!(err < 1e-5, "max relative error {err}");
    }

    proptest! {
        #[test]
        fn batch_advantages_sum_to_zero_and_are_affine_invariant(
            table in proptest::collection::vec(proptest::collection::vec(-20.0f64..20.0, 4), 3),
            alpha in 0.01f64..100.0,
            c in -50.0f64..50.0,
        ) {
            let pooled: Vec<f64> = table.iter().flatten().copied().collect();
            prop_assume!(mean_std(&pooled).1 > 1e-3);
            let a = batch_advantage(&table).unwrap();
            prop_assert!(a.iter().sum::<f64>().abs() < 1e-10);
            let moved: Vec<Vec<f64>> = table.iter().map(|r| r.iter().map(|x| alpha * x + c).collect()).collect();
            let b = batch_advantage(&moved).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }

        #[test]
        fn surrogate_is_bounded_by_clip(r in 0.01f64..10.0, adv in -5.0f64..5.0, eps in 0.01f64..0.5) {
            let mut g = Graph::new();
            let rv = g.constant(Tensor::scalar(r));
            let av = g.constant(Tensor::scalar(adv));
            let s = clipped_surrogate(&mut g, rv, av, eps).unwrap();
            let s = g.value(s).item().unwrap();
            prop_assert!(s <= (1.0 + eps) * adv.abs() + 1e-12);
            if adv >= 0.0 {
                prop_assert!(s.abs() <= (1.0 + eps) * adv + 1e-12);
            }
        }
    }
}
