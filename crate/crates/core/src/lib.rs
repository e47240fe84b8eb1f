//! Reinforcement-learning fine-tuning of a conditional flow-matching model on
//! a synthetic 2D editing task.
//!
//! Building blocks, bottom up: [`autodiff`] (reverse-mode tape with a
//! stop-gradient primitive), [`flow`] (tasks, velocity network, pretraining),
//! [`focus`] (instruction encoder with token focus relocation), [`sampler`]
//! (ODE/SDE samplers and trajectories), [`grpo`] and [`dense`] (the two
//! policy-gradient objectives), [`reward`] (analytic scores and the scorer
//! wire protocol) and [`train`] (run configuration and training loops).

pub mod autodiff;
pub mod flow;
pub mod focus;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod dense;
pub mod grpo;
pub mod reward;
pub mod train;
