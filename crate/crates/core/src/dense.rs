//! Dense GRPO: a trajectory-level ratio over `k` consecutive denoising steps.
//!
//! For each instance a start index `r ~ U{k, ..., T}` is drawn. Rollouts run
//! detached from `T` to `r`, then take `k` steps whose states stay on the tape
//! (network inputs detached, additive state chain kept), then finish
//! detached to `x_0` for scoring. The summed log-ratio `psi` over the `k`
//! steps is clipped in log space before exponentiation.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::grpo::{clipped_surrogate, gaussian_kl, GrpoError, Objective};
use crate::rng::StreamRng;
use crate::sampler::{rollout, transition_mean, SamplerError, SdeConfig, Trajectory, VelocityField};

#[derive(Debug, Error)]
pub enum DenseError {
    #[error("segment length k must be at least 1")]
    ZeroK,
    #[error("segment length k = {k} exceeds step count T = {steps}")]
    KTooLarge { k: usize, steps: usize },
    #[error("step {0} inside the segment is deterministic")]
    Deterministic(usize),
    #[error("ratio {value} left [1 - eps, 1 + eps] after the log-space clip")]
    OuterClipActive { value: f64 },
    #[error("segment groups and advantages disagree")]
    Ragged,
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Uniform start index in `{k, ..., steps}`.
pub fn pick_start<R: Rng + ?Sized>(steps: usize, k: usize, rng: &mut R) -> Result<usize, DenseError> {
    if k == 0 {
        return Err(DenseError::ZeroK);
    }
    if k > steps {
        return Err(DenseError::KTooLarge { k, steps });
    }
    Ok(rng.random_range(k..=steps))
}

/// One instance's `G` rollouts split at the start index `r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseSegment {
    pub start: usize,
    pub k: usize,
    /// `T -> r`, detached.
    pub prefix: Vec<Trajectory>,
    /// `r -> r - k`, the steps that carry gradient in the objective.
    pub segment: Vec<Trajectory>,
    /// `r - k -> 0`, detached.
    pub completion: Vec<Trajectory>,
}

impl DenseSegment {
    pub fn finals(&self) -> Vec<[f64; 2]> {
        self.completion.iter().map(Trajectory::last).collect()
    }

    /// Prefix, segment and completion joined into full trajectories.
    pub fn full(&self) -> Vec<Trajectory> {
        self.prefix
            .iter()
            .zip(&self.segment)
            .zip(&self.completion)
            .map(|((p, s), c)| {
                let mut t = p.clone();
                t.append(s);
                t.append(c);
                t
            })
            .collect()
    }
}

/// Samples one instance's rows from `x_T` (one noise stream per row).
pub fn dense_rollout(
    g: &mut Graph,
    field: &dyn VelocityField,
    x_start: Var,
    start: usize,
    k: usize,
    cfg: &SdeConfig,
    rngs: &mut [StreamRng],
) -> Result<DenseSegment, DenseError> {
    if k == 0 {
        return Err(DenseError::ZeroK);
    }
    if k > start || start > cfg.steps {
        return Err(DenseError::KTooLarge { k, steps: start });
    }
    let prefix = rollout(g, field, x_start, cfg.steps, cfg.steps - start, cfg, rngs, false)?;
    let segment = rollout(g, field, prefix.end, start, k, cfg, rngs, false)?;
    let completion = rollout(g, field, segment.end, start - k, start - k, cfg, rngs, false)?;
    Ok(DenseSegment {
        start,
        k,
        prefix: prefix.trajectories,
        segment: segment.trajectories,
        completion: completion.trajectories,
    })
}

/// Fields and data for one instance's contribution to the objective.
pub struct DenseGroup<'a> {
    pub theta: &'a dyn VelocityField,
    pub old: &'a dyn VelocityField,
    pub reference: &'a dyn VelocityField,
    pub segment: &'a DenseSegment,
    pub advantage: f64,
}

/// Per-row `psi` and summed per-step KL for one group, rebuilt on the tape.
#[derive(Clone, Copy, Debug)]
pub struct SegmentTerms {
    pub psi: Var,
    pub kl: Var,
}

/// Replays the segment under `theta` with the stored noise. Each step's new
/// state is `mean_theta + std * eps`, so the chain of states depends on
/// `theta`; `psi` compares the theta and old transition densities of those
/// states.
pub fn segment_terms(g: &mut Graph, group: &DenseGroup, cfg: &SdeConfig) -> Result<SegmentTerms, DenseError> {
    let seg = group.segment;
    let rows = seg.segment.len();
    let start: Vec<f64> = seg.segment.iter().flat_map(|t| t.states[0]).collect();
    let mut x = g.constant(Tensor::matrix(rows, 2, start)?);
    let mut psi: Option<Var> = None;
    let mut kl: Option<Var> = None;
    for j in 0..seg.k {
        let index = seg.start - j;
        let std = cfg.noise_std(index);
        if std == 0.0 {
            return Err(DenseError::Deterministic(index));
        }
        let mean = transition_mean(g, group.theta, x, index, cfg)?;
        let mean_old = transition_mean(g, group.old, x, index, cfg)?;
        let mean_ref = transition_mean(g, group.reference, x, index, cfg)?;
        let eps: Vec<f64> = seg.segment.iter().flat_map(|t| t.noises[j]).collect();
        let eps = g.constant(Tensor::matrix(rows, 2, eps)?.map(|e| std * e));
        let next = g.add(mean, eps)?;
        let sd = g.constant(Tensor::filled(&[rows, 2], std));
        let lp = g.gaussian_logpdf(next, mean, sd)?;
        let lp = g.sum_cols(lp)?;
        let lp_old = g.gaussian_logpdf(next, mean_old, sd)?;
        let lp_old = g.sum_cols(lp_old)?;
        let step_psi = g.sub(lp, lp_old)?;
        let step_kl = gaussian_kl(g, mean, mean_ref, std)?;
        psi = Some(match psi {
            Some(acc) => g.add(acc, step_psi)?,
            None => step_psi,
        });
        kl = Some(match kl {
            Some(acc) => g.add(acc, step_kl)?,
            None => step_kl,
        });
        x = next;
    }
    Ok(SegmentTerms {
        psi: psi.ok_or(DenseError::ZeroK)?,
        kl: kl.ok_or(DenseError::ZeroK)?,
    })
}

/// Summed log-ratio of one group's segment, per row.
pub fn psi(g: &mut Graph, group: &DenseGroup, cfg: &SdeConfig) -> Result<Var, DenseError> {
    Ok(segment_terms(g, group, cfg)?.psi)
}

/// `exp(clip(psi, -ln(1 + eps), ln(1 + eps)))`.
///
/// `exp(ln(1 + eps))` can round one ulp past `1 + eps`, so the result is
/// clamped once more onto the exact band `[1 / (1 + eps), 1 + eps]`.
pub fn dense_ratio(g: &mut Graph, psi: Var, eps: f64) -> Result<Var, AutodiffError> {
    let bound = (1.0 + eps).ln();
    let clipped = g.clip(psi, -bound, bound)?;
    let ratio = g.exp(clipped)?;
    g.clip(ratio, 1.0 / (1.0 + eps), 1.0 + eps)
}

#[derive(Clone, Debug)]
pub struct DenseObjective {
    pub objective: Objective,
    /// `psi` of every row, group-major.
    pub psi: Vec<f64>,
}

/// Clipped surrogate on the dense ratio averaged over all rows, minus
/// `beta` times the KL averaged over rows and segment steps.
pub fn dense_objective(
    g: &mut Graph,
    groups: &[DenseGroup],
    cfg: &SdeConfig,
    eps: f64,
    beta: f64,
) -> Result<DenseObjective, DenseError> {
    if groups.is_empty() {
        return Err(DenseError::Ragged);
    }
    let lower = 1.0 / (1.0 + eps);
    assert!(lower >= 1.0 - eps, "log-space clip band must sit inside the ratio clip band");
    let k = groups[0].segment.k;
    let mut rows = 0usize;
    let mut surr_total: Option<Var> = None;
    let mut kl_total: Option<Var> = None;
    let mut psi_values = Vec::new();
    for group in groups {
        if group.segment.k != k {
            return Err(DenseError::Ragged);
        }
        let n = group.segment.segment.len();
        rows += n;
        let terms = segment_terms(g, group, cfg)?;
        psi_values.extend_from_slice(g.value(terms.psi).data());
        let ratio = dense_ratio(g, terms.psi, eps)?;
        for &r in g.value(ratio).data() {
            if r < 1.0 - eps || r > 1.0 + eps {
                return Err(DenseError::OuterClipActive { value: r });
            }
        }
        let adv = g.constant(Tensor::filled(&[n], group.advantage));
        let surr = clipped_surrogate(g, ratio, adv, eps)?;
        let surr = g.sum(surr)?;
        let kl = g.sum(terms.kl)?;
        surr_total = Some(match surr_total {
            Some(acc) => g.add(acc, surr)?,
            None => surr,
        });
        kl_total = Some(match kl_total {
            Some(acc) => g.add(acc, kl)?,
            None => kl,
        });
    }
    let surr = g.scale(surr_total.expect("groups nonempty"), 1.0 / rows as f64)?;
    let kl = g.scale(kl_total.expect("groups nonempty"), 1.0 / (rows * k) as f64)?;
    let penalty = g.scale(kl, beta)?;
    let j = g.sub(surr, penalty)?;
    let loss = g.neg(j)?;
    Ok(DenseObjective {
        objective: Objective {
            loss,
            surrogate: g.value(surr).item()?,
            kl: g.value(kl).item()?,
        },
        psi: psi_values,
    })
}
