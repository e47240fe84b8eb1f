//! Euler ODE and SDE samplers over a velocity field.
//!
//! Time runs from index `T` (pure noise, `t = 1`) down to `0` (data). The
//! stochastic step is
//!
//! ```text
//! x_{t-1} = x_t - s(sg(x_t), t) / T + (sigma_t / sqrt(T)) * eps
//! s(x, t) = v(x, t) + (sigma_t^2 / 2) * (x + (1 - t) * v(x, t))
//! ```
//!
//! The network only ever sees a detached copy of the state, while the
//! additive `x_t` term stays on the tape so that gradients can flow along
//! the chain of states.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{gaussian_logpdf, AutodiffError, Graph, Tensor, Var};
use crate::flow::FlowError;
use crate::rng::{self, StreamRng};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error("step index {index} outside 1..={steps}")]
    BadIndex { index: usize, steps: usize },
    #[error("cannot take {n} steps from index {from}")]
    TooManySteps { from: usize, n: usize },
    #[error("step at index {0} is deterministic; its transition density is undefined")]
    Deterministic(usize),
    #[error("{rngs} noise streams for {rows} rows")]
    StreamCount { rngs: usize, rows: usize },
}

impl From<crate::focus::FocusError> for SamplerError {
    fn from(e: crate::focus::FocusError) -> Self {
        Self::Flow(e.into())
    }
}

/// Anything that maps `[n, 2]` states at time `t` to `[n, 2]` velocities.
pub trait VelocityField {
    fn velocity(&self, g: &mut Graph, x: Var, t: f64) -> Result<Var, FlowError>;

    /// Detached copy of the state fed to the drift at time `t`.
    fn detach_input(&self, g: &mut Graph, x: Var, _t: f64) -> Var {
        g.stop_gradient(x)
    }
}

impl<F> VelocityField for F
where
    F: Fn(&mut Graph, Var, f64) -> Result<Var, FlowError>,
{
    fn velocity(&self, g: &mut Graph, x: Var, t: f64) -> Result<Var, FlowError> {
        self(g, x, t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NoiseSchedule {
    Constant(f64),
    /// Entry `i` is sigma at step index `i + 1`.
    Table(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdeConfig {
    pub steps: usize,
    pub noise: NoiseSchedule,
}

impl SdeConfig {
    pub fn new(steps: usize, noise: NoiseSchedule) -> Result<Self, SamplerError> {
        let cfg = Self { steps, noise };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn constant(steps: usize, sigma: f64) -> Result<Self, SamplerError> {
        Self::new(steps, NoiseSchedule::Constant(sigma))
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.steps == 0 {
            return Err(SamplerError::Config("step count must be at least 1".into()));
        }
        match &self.noise {
            NoiseSchedule::Constant(s) if !(s.is_finite() && *s >= 0.0) => {
                Err(SamplerError::Config(format!("sigma {s} must be finite and >= 0")))
            }
            NoiseSchedule::Table(tab) if tab.len() != self.steps => Err(SamplerError::Config(
                format!("sigma table has {} entries for {} steps", tab.len(), self.steps),
            )),
            NoiseSchedule::Table(tab) if tab.iter().any(|s| !(s.is_finite() && *s >= 0.0)) => {
                Err(SamplerError::Config("sigma table entries must be finite and >= 0".into()))
            }
            _ => Ok(()),
        }
    }

    fn check_index(&self, index: usize) -> Result<(), SamplerError> {
        if index == 0 || index > self.steps {
            return Err(SamplerError::BadIndex {
                index,
                steps: self.steps,
            });
        }
        Ok(())
    }

    pub fn sigma(&self, index: usize) -> f64 {
        match &self.noise {
            NoiseSchedule::Constant(s) => *s,
            NoiseSchedule::Table(tab) => tab[index - 1],
        }
    }

    pub fn time(&self, index: usize) -> f64 {
        index as f64 / self.steps as f64
    }

    /// Standard deviation of the transition at `index`: `sigma_t / sqrt(T)`.
    pub fn noise_std(&self, index: usize) -> f64 {
        self.sigma(index) / (self.steps as f64).sqrt()
    }

    pub fn is_stochastic(&self, index: usize) -> bool {
        self.sigma(index) > 0.0
    }
}

/// Score-augmented drift evaluated at `x` (the caller decides whether `x` is detached).
pub fn drift(
    g: &mut Graph,
    field: &dyn VelocityField,
    x: Var,
    t: f64,
    sigma: f64,
) -> Result<Var, SamplerError> {
    let v = field.velocity(g, x, t)?;
    if sigma == 0.0 {
        return Ok(v);
    }
    let carried = g.scale(v, 1.0 - t)?;
    let inner = g.add(x, carried)?;
    let correction = g.scale(inner, 0.5 * sigma * sigma)?;
    Ok(g.add(v, correction)?)
}

/// Mean of the transition out of `x` at `index`: `x - s(sg(x), t) / T`.
pub fn transition_mean(
    g: &mut Graph,
    field: &dyn VelocityField,
    x: Var,
    index: usize,
    cfg: &SdeConfig,
) -> Result<Var, SamplerError> {
    cfg.check_index(index)?;
    let detached = field.detach_input(g, x, cfg.time(index));
    let s = drift(g, field, detached, cfg.time(index), cfg.sigma(index))?;
    let step = g.scale(s, 1.0 / cfg.steps as f64)?;
    Ok(g.sub(x, step)?)
}

/// One row's `[n, 2]` block of standard normal draws, one stream per row.
pub fn draw_noise(rngs: &mut [StreamRng]) -> Tensor {
    let data = rngs
        .iter_mut()
        .flat_map(|r| [rng::normal(r), rng::normal(r)])
        .collect();
    Tensor::matrix(rngs.len(), 2, data).expect("noise shape")
}

pub fn row_logps(next: &Tensor, mean: &Tensor, std: f64) -> Vec<f64> {
    (0..next.rows())
        .map(|i| {
            next.row(i)
                .iter()
                .zip(mean.row(i))
                .map(|(&x, &m)| gaussian_logpdf(x, m, std))
                .sum()
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub next: Var,
    pub mean: Var,
    pub noise: Tensor,
    /// Per-row log density of the realised transition; `None` marks a
    /// deterministic step.
    pub logp: Option<Vec<f64>>,
}

/// One stochastic step from index `index` to `index - 1` using the given noise draws.
pub fn sde_step(
    g: &mut Graph,
    field: &dyn VelocityField,
    x: Var,
    index: usize,
    cfg: &SdeConfig,
    noise: Tensor,
) -> Result<StepOutput, SamplerError> {
    let mean = transition_mean(g, field, x, index, cfg)?;
    let std = cfg.noise_std(index);
    if std == 0.0 {
        return Ok(StepOutput {
            next: mean,
            mean,
            noise,
            logp: None,
        });
    }
    let scaled = g.constant(noise.map(|e| std * e));
    let next = g.add(mean, scaled)?;
    let logp = row_logps(g.value(next), g.value(mean), std);
    Ok(StepOutput {
        next,
        mean,
        noise,
        logp: Some(logp),
    })
}

/// Recorded path of one row from `start_index` down to `start_index - steps()`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub start_index: usize,
    pub states: Vec<[f64; 2]>,
    pub means: Vec<[f64; 2]>,
    pub noises: Vec<[f64; 2]>,
    pub noise_stds: Vec<f64>,
    pub logps: Vec<Option<f64>>,
}

fn pair(row: &[f64]) -> [f64; 2] {
    [row[0], row[1]]
}

impl Trajectory {
    pub fn starting_at(index: usize, x: [f64; 2]) -> Self {
        Self {
            start_index: index,
            states: vec![x],
            means: Vec::new(),
            noises: Vec::new(),
            noise_stds: Vec::new(),
            logps: Vec::new(),
        }
    }

    pub fn steps(&self) -> usize {
        self.means.len()
    }

    pub fn end_index(&self) -> usize {
        self.start_index - self.steps()
    }

    pub fn last(&self) -> [f64; 2] {
        *self.states.last().expect("trajectory has a start state")
    }

    /// State at absolute step index, if covered.
    pub fn state_at(&self, index: usize) -> Option<[f64; 2]> {
        if index > self.start_index || index < self.end_index() {
            return None;
        }
        Some(self.states[self.start_index - index])
    }

    /// Appends `other`, which must start where this one ends.
    pub fn append(&mut self, other: &Trajectory) {
        assert_eq!(other.start_index, self.end_index(), "trajectories are not contiguous");
        assert_eq!(other.states[0], self.last(), "trajectories disagree at the seam");
        self.states.extend_from_slice(&other.states[1..]);
        self.means.extend_from_slice(&other.means);
        self.noises.extend_from_slice(&other.noises);
        self.noise_stds.extend_from_slice(&other.noise_stds);
        self.logps.extend_from_slice(&other.logps);
    }

    /// Rebuilds every state after the first from the stored means and noises.
    pub fn replay(&self) -> Vec<[f64; 2]> {
        let mut out = vec![self.states[0]];
        for ((m, e), &std) in self.means.iter().zip(&self.noises).zip(&self.noise_stds) {
            out.push(if std == 0.0 {
                *m
            } else {
                [m[0] + std * e[0], m[1] + std * e[1]]
            });
        }
        out
    }

    /// One line per step: index, state, mean, noise, logp.
    pub fn dump(&self) -> String {
        let mut out = String::from("index state_x state_y mean_x mean_y noise_x noise_y logp\n");
        for j in 0..self.steps() {
            let (s, m, e) = (self.states[j], self.means[j], self.noises[j]);
            let logp = self.logps[j].map_or_else(|| "deterministic".to_string(), |l| l.to_string());
            let _ = writeln!(
                out,
                "{} {} {} {} {} {} {} {}",
                self.start_index - j,
                s[0],
                s[1],
                m[0],
                m[1],
                e[0],
                e[1],
                logp
            );
        }
        let last = self.last();
        let _ = writeln!(out, "{} {} {} - - - - -", self.end_index(), last[0], last[1]);
        out
    }
}

/// Wraps a field and replaces the detached drift input at each time with a
/// constant equal to the value seen on the first call at that time.
///
/// A loss built through a pinned field is an ordinary function of the
/// parameters whose derivative equals the stop-gradient gradient at the
/// recording point, which makes it a finite-difference oracle for graphs
/// with detached network inputs.
pub struct PinnedField<'a> {
    inner: &'a dyn VelocityField,
    inputs: RefCell<HashMap<u64, Tensor>>,
}

impl<'a> PinnedField<'a> {
    pub fn recording(inner: &'a dyn VelocityField) -> Self {
        Self {
            inner,
            inputs: RefCell::new(HashMap::new()),
        }
    }

    /// Reuses inputs recorded by another pinned field around a different inner field.
    pub fn with_inputs(inner: &'a dyn VelocityField, inputs: HashMap<u64, Tensor>) -> Self {
        Self {
            inner,
            inputs: RefCell::new(inputs),
        }
    }

    pub fn into_inputs(self) -> HashMap<u64, Tensor> {
        self.inputs.into_inner()
    }
}

impl VelocityField for PinnedField<'_> {
    fn velocity(&self, g: &mut Graph, x: Var, t: f64) -> Result<Var, FlowError> {
        self.inner.velocity(g, x, t)
    }

    fn detach_input(&self, g: &mut Graph, x: Var, t: f64) -> Var {
        let pinned = self
            .inputs
            .borrow_mut()
            .entry(t.to_bits())
            .or_insert_with(|| g.value(x).clone())
            .clone();
        g.constant(pinned)
    }
}

/// Result of a batched rollout: the final state node plus per-row records.
#[derive(Clone, Debug)]
pub struct Segment {
    pub end: Var,
    pub trajectories: Vec<Trajectory>,
}

/// `n` consecutive steps from `from`. Row `i` draws its noise from `rngs[i]`.
/// With `grad = false` every produced state is detached.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    g: &mut Graph,
    field: &dyn VelocityField,
    x_start: Var,
    from: usize,
    n: usize,
    cfg: &SdeConfig,
    rngs: &mut [StreamRng],
    grad: bool,
) -> Result<Segment, SamplerError> {
    if n > from {
        return Err(SamplerError::TooManySteps { from, n });
    }
    let rows = g.value(x_start).rows();
    if rngs.len() != rows {
        return Err(SamplerError::StreamCount {
            rngs: rngs.len(),
            rows,
        });
    }
    let mut x = if grad { x_start } else { g.stop_gradient(x_start) };
    let mut trajectories: Vec<Trajectory> = (0..rows)
        .map(|i| Trajectory::starting_at(from, pair(g.value(x).row(i))))
        .collect();
    for index in (from - n + 1..=from).rev() {
        let noise = draw_noise(rngs);
        let step = sde_step(g, field, x, index, cfg, noise)?;
        x = if grad { step.next } else { g.stop_gradient(step.next) };
        let std = cfg.noise_std(index);
        for (i, tr) in trajectories.iter_mut().enumerate() {
            tr.states.push(pair(g.value(x).row(i)));
            tr.means.push(pair(g.value(step.mean).row(i)));
            tr.noises.push(pair(step.noise.row(i)));
            tr.noise_stds.push(std);
            tr.logps.push(step.logp.as_ref().map(|l| l[i]));
        }
    }
    Ok(Segment {
        end: x,
        trajectories,
    })
}

/// Deterministic Euler integration from index `steps` to 0.
pub fn ode_sample(
    g: &mut Graph,
    field: &dyn VelocityField,
    x_start: Var,
    steps: usize,
) -> Result<Var, SamplerError> {
    let mut x = x_start;
    for index in (1..=steps).rev() {
        let t = index as f64 / steps as f64;
        let v = field.velocity(g, x, t)?;
        let step = g.scale(v, 1.0 / steps as f64)?;
        x = g.sub(x, step)?;
    }
    Ok(x)
}

/// Per-row prior draws for the start state.
pub fn prior_sample(rngs: &mut [StreamRng]) -> Tensor {
    draw_noise(rngs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference, max_relative_error, BindMode, ParameterStore};
    use crate::flow::velocity::VelocityNet;

    fn constant_field(v: [f64; 2]) -> impl Fn(&mut Graph, Var, f64) -> Result<Var, FlowError> {
        move |g: &mut Graph, x: Var, _t: f64| {
            let n = g.value(x).rows();
            let data = (0..n).flat_map(|_| v).collect();
            Ok(g.constant(Tensor::matrix(n, 2, data)?))
        }
    }

    #[test]
    fn zero_noise_drift_is_velocity() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 2, vec![2.0, 0.0]).unwrap());
        let f = constant_field([1.0, 0.0]);
        let s = drift(&mut g, &f, x, 0.5, 0.0).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 0.0]);
    }

    #[test]
    fn drift_worked_example() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 2, vec![2.0, 0.0]).unwrap());
        let f = constant_field([1.0, 0.0]);
        let s = drift(&mut g, &f, x, 0.5, 1.0).unwrap();
        assert_eq!(g.value(s).data(), &[2.25, 0.0]);
    }

    #[test]
    fn drift_correction_is_quadratic_in_sigma() {
        let f = constant_field([0.4, -0.7]);
        let gap = |sigma: f64| {
            let mut g = Graph::new();
            let x = g.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
            let s = drift(&mut g, &f, x, 0.3, sigma).unwrap();
            let v = [0.4, -0.7];
            g.value(s)
                .data()
                .iter()
                .zip(v)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let ratio = gap(1e-3) / gap(2e-3);
        assert!((ratio - 0.25).abs() < 1e-9);
    }

    #[test]
    fn deterministic_step_arithmetic() {
        let cfg = SdeConfig::constant(10, 0.0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap());
        let f = constant_field([0.5, 0.5]);
        let out = sde_step(&mut g, &f, x, 10, &cfg, Tensor::zeros(&[1, 2])).unwrap();
        assert!((g.value(out.next).data()[0] - 0.95).abs() < 1e-15);
        assert!(out.logp.is_none());
    }

    #[test]
    fn unit_noise_std_at_the_mean_gives_standard_logpdf() {
        // sigma / sqrt(T) = 1 with T = 4, sigma = 2
        let cfg = SdeConfig::constant(4, 2.0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 2, vec![0.3, -0.1]).unwrap());
        let f = constant_field([0.0, 0.0]);
        let out = sde_step(&mut g, &f, x, 2, &cfg, Tensor::zeros(&[1, 2])).unwrap();
        assert_eq!(g.value(out.next), g.value(out.mean));
        let lp = out.logp.unwrap()[0];
        assert!((lp - 2.0 * -0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn stored_logp_matches_quadrature_of_the_density() {
        let cfg = SdeConfig::constant(10, 0.3).unwrap();
        let std = cfg.noise_std(5);
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 2, vec![0.2, 0.4]).unwrap());
        let f = constant_field([1.0, -1.0]);
        let out = sde_step(&mut g, &f, x, 5, &cfg, Tensor::matrix(1, 2, vec![0.7, -0.2]).unwrap()).unwrap();
        let (next, mean) = (g.value(out.next).data()[0], g.value(out.mean).data()[0]);
        let lp = gaussian_logpdf(next, mean, std);
        // Normalise the kernel exp(-(y - mean)^2 / 2 std^2) numerically.
        let n = 40_000;
        let (a, b) = (mean - 12.0 * std, mean + 12.0 * std);
        let h = (b - a) / n as f64;
        let kernel = |y: f64| (-(y - mean).powi(2) / (2.0 * std * std)).exp();
        let mut z = 0.0;
        for i in 0..=n {
            let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            z += w * kernel(a + i as f64 * h);
        }
        z *= h / 3.0;
        assert!((lp.exp() - kernel(next) / z).abs() < 1e-6);
    }

    #[test]
    fn constant_field_ode_example() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let f = constant_field([1.0, 1.0]);
        let x0 = ode_sample(&mut g, &f, x, 4).unwrap();
        assert_eq!(g.value(x0).data(), &[-1.0, -1.0]);
    }

    fn tiny_net(seed: u64) -> (VelocityNet, ParameterStore) {
        let net = VelocityNet {
            hidden: vec![6],
            cond_dim: 1,
        };
        let mut store = ParameterStore::new();
        net.init_params(&mut store, &mut rng::stream(seed));
        (net, store)
    }

    #[test]
    fn replay_is_bit_exact_and_grad_flag_does_not_change_values() {
        let (net, store) = tiny_net(4);
        let cfg = SdeConfig::constant(10, 0.3).unwrap();
        let run = |grad: bool| {
            let mut g = Graph::new();
            let b = store.bind(&mut g, BindMode::Trainable);
            let cond = g.constant(Tensor::matrix(3, 1, vec![0.1, 0.2, 0.3]).unwrap());
            let field = |g: &mut Graph, x: Var, t: f64| net.forward(g, &b, x, t, cond);
            let mut rngs: Vec<_> = (0..3).map(|i| rng::stream_for(9, &[i])).collect();
            let x = g.constant(prior_sample(&mut rngs));
            let seg = rollout(&mut g, &field, x, 10, 10, &cfg, &mut rngs, grad).unwrap();
            (seg.trajectories, g.requires_grad(seg.end))
        };
        let (a, ga) = run(false);
        let (b, gb) = run(true);
        assert_eq!(a, b);
        assert!(!ga && gb);
        for tr in &a {
            assert_eq!(tr.states.len(), 11);
            assert_eq!(tr.replay(), tr.states);
            assert!(tr.logps.iter().all(|l| l.is_some_and(f64::is_finite)));
            assert_eq!(tr.dump().lines().count(), 12);
        }
    }

    #[test]
    fn zero_noise_rollout_equals_ode() {
        let (net, store) = tiny_net(5);
        let cfg = SdeConfig::constant(7, 0.0).unwrap();
        let mut g = Graph::new();
        let b = store.bind(&mut g, BindMode::Frozen);
        let cond = g.constant(Tensor::matrix(2, 1, vec![0.5, -0.5]).unwrap());
        let field = |g: &mut Graph, x: Var, t: f64| net.forward(g, &b, x, t, cond);
        let x = g.constant(Tensor::matrix(2, 2, vec![0.3, 1.0, -2.0, 0.1]).unwrap());
        let mut rngs: Vec<_> = (0..2).map(rng::stream).collect();
        let seg = rollout(&mut g, &field, x, 7, 7, &cfg, &mut rngs, false).unwrap();
        let ode = ode_sample(&mut g, &field, x, 7).unwrap();
        assert!(g.value(seg.end).max_abs_diff(g.value(ode)) < 1e-12);
        assert!(seg.trajectories[0].logps.iter().all(Option::is_none));
    }

    #[test]
    fn two_step_rollout_gradient_matches_finite_differences() {
        let (net, store) = tiny_net(6);
        let cfg = SdeConfig::constant(10, 0.3).unwrap();
        let x_start = Tensor::matrix(1, 2, vec![0.4, -0.6]).unwrap();
        let names: Vec<String> = store.names().map(str::to_string).collect();
        let build = |store: &ParameterStore, pins: Option<HashMap<u64, Tensor>>| {
            let mut g = Graph::new();
            let b = store.bind(&mut g, BindMode::Trainable);
            let cond = g.constant(Tensor::matrix(1, 1, vec![0.2]).unwrap());
            let field = |g: &mut Graph, x: Var, t: f64| net.forward(g, &b, x, t, cond);
            let pinned = match pins {
                Some(p) => PinnedField::with_inputs(&field, p),
                None => PinnedField::recording(&field),
            };
            let x = g.constant(x_start.clone());
            let mut rngs = vec![rng::stream(77)];
            let seg = rollout(&mut g, &pinned, x, 6, 2, &cfg, &mut rngs, true).unwrap();
            let w = g.constant(Tensor::matrix(1, 2, vec![1.0, -0.5]).unwrap());
            let p = g.mul(seg.end, w).unwrap();
            let loss = g.sum(p).unwrap();
            let value = g.value(loss).item().unwrap();
            let grads = g.backward(loss).unwrap().by_param(&g);
            (value, grads, pinned.into_inputs())
        };
        let (_, grads, pins) = build(&store, None);
        let analytic: Vec<f64> = names.iter().flat_map(|n| grads[n].data().to_vec()).collect();
        let flat = store.flat_values();
        let numeric = finite_difference(&flat, 1e-5, |v| {
            let mut s = store.clone();
            s.set_flat_values(v).unwrap();
            build(&s, Some(pins.clone())).0
        });
        assert!(max_relative_error(&analytic, &numeric, 1e-8) < 1e-5);
    }

    #[test]
    fn config_validation() {
        assert!(SdeConfig::constant(0, 0.3).is_err());
        assert!(SdeConfig::constant(10, -0.1).is_err());
        assert!(SdeConfig::new(3, NoiseSchedule::Table(vec![0.1, 0.2])).is_err());
        let cfg = SdeConfig::new(3, NoiseSchedule::Table(vec![0.1, 0.2, 0.0])).unwrap();
        assert_eq!(cfg.sigma(2), 0.2);
        assert!(!cfg.is_stochastic(3));
    }
}
