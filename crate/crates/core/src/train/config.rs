//! Flat-key run configuration, stored as TOML next to every run's outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::flow::model::ModelConfig;
use crate::flow::pretrain::PretrainConfig;
use crate::flow::task::{Instruction, Task};
use crate::focus::EncoderConfig;
use crate::sampler::{NoiseSchedule, SdeConfig};

pub const CONFIG_FILE: &str = "config.toml";

/// Where rewards come from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ScorerMode {
    Analytic,
    /// `host:port` of a line-delimited JSON scorer.
    Remote(String),
}

impl ScorerMode {
    pub fn parse(s: &str) -> Result<Self, TrainError> {
        match s.strip_prefix("remote:") {
            _ if s == "analytic" => Ok(Self::Analytic),
            Some(endpoint) if !endpoint.is_empty() => Ok(Self::Remote(endpoint.to_string())),
            _ => Err(invalid("scorer", "expected \"analytic\" or \"remote:HOST:PORT\"")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: String,
    /// Denoising steps `T`.
    pub steps: usize,
    /// Gradient-carrying steps per dense segment.
    pub k: usize,
    /// Soft tokens per encoder layer.
    pub xi: usize,
    /// Rollouts per instance.
    pub group: usize,
    /// Instances per iteration.
    pub batch: usize,
    /// A single value, or one value per step index `1..=T`.
    pub sigma: NoiseSchedule,
    pub clip_eps: f64,
    pub kl_coef: f64,
    pub lr: f64,
    pub warmup_frac: f64,
    pub max_grad_norm: f64,
    pub iterations: usize,
    pub seed: u64,
    /// `analytic` or `remote:HOST:PORT`.
    pub scorer: String,
    pub scorer_timeout_ms: u64,
    pub output_dir: String,
    pub encoder_layers: usize,
    pub encoder_dim: usize,
    pub encoder_ff: usize,
    pub hidden: Vec<usize>,
    pub relocation: bool,
    pub dataset_size: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    pub eval_instances: usize,
    /// Record elapsed milliseconds; off keeps metrics byte-reproducible.
    pub wall_clock: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        let pre = PretrainConfig::default();
        Self {
            task: Task::MoveToMode.name().to_string(),
            steps: 10,
            k: 5,
            xi: enc.xi,
            group: 8,
            batch: 4,
            sigma: NoiseSchedule::Constant(0.3),
            clip_eps: 0.2,
            kl_coef: 0.01,
            lr: 1e-5,
            warmup_frac: 0.1,
            max_grad_norm: 1.0,
            iterations: 500,
            seed: 0,
            scorer: "analytic".to_string(),
            scorer_timeout_ms: 2000,
            output_dir: "runs/default".to_string(),
            encoder_layers: enc.layers,
            encoder_dim: enc.dim,
            encoder_ff: enc.ff_dim,
            hidden: vec![64, 64],
            relocation: true,
            dataset_size: 4096,
            pretrain_epochs: pre.epochs,
            pretrain_lr: pre.lr,
            pretrain_batch: pre.batch_size,
            eval_instances: 1024,
            wall_clock: false,
        }
    }
}

fn invalid(key: &'static str, msg: impl Into<String>) -> TrainError {
    TrainError::InvalidConfig {
        key,
        msg: msg.into(),
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = toml::from_str(text).map_err(|e| TrainError::ConfigSyntax(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the config as `config.toml` inside `dir`.
    pub fn echo(&self, dir: &Path) -> Result<(), TrainError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(CONFIG_FILE), self.to_toml())?;
        Ok(())
    }

    pub fn task(&self) -> Result<Task, TrainError> {
        Ok(self.task.parse()?)
    }

    pub fn scorer_mode(&self) -> Result<ScorerMode, TrainError> {
        ScorerMode::parse(&self.scorer)
    }

    pub fn sde(&self) -> Result<SdeConfig, TrainError> {
        Ok(SdeConfig::new(self.steps, self.sigma.clone())?)
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                layers: self.encoder_layers,
                dim: self.encoder_dim,
                ff_dim: self.encoder_ff,
                xi: self.xi,
            },
            hidden: self.hidden.clone(),
            relocation: self.relocation,
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            lr: self.pretrain_lr,
            batch_size: self.pretrain_batch,
            seed: self.seed,
        }
    }

    /// Checks every module's preconditions.
    pub fn validate(&self) -> Result<(), TrainError> {
        let task = self.task()?;
        let sde = self.sde()?;
        if let Some(i) = (1..=self.steps).find(|&i| !sde.is_stochastic(i)) {
            return Err(invalid("sigma", format!("step {i} is deterministic; every step needs sigma > 0")));
        }
        if self.k == 0 || self.k > self.steps {
            return Err(invalid("k", format!("need 1 <= k <= steps ({})", self.steps)));
        }
        if self.group < 2 {
            return Err(invalid("group", "need at least 2 rollouts per instance"));
        }
        if self.batch < 2 {
            return Err(invalid("batch", "need at least 2 instances per batch"));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(invalid("clip_eps", "must lie in (0, 1)"));
        }
        if !(self.kl_coef >= 0.0 && self.kl_coef.is_finite()) {
            return Err(invalid("kl_coef", "must be finite and non-negative"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("lr", "must be finite and positive"));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(invalid("warmup_frac", "must lie in [0, 1]"));
        }
        if self.max_grad_norm.is_nan() || self.max_grad_norm <= 0.0 {
            return Err(invalid("max_grad_norm", "must be positive"));
        }
        let shortest = (0..task.num_codes())
            .map(|c| Instruction::new(task, c).map(|i| i.tokens.len()))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .min()
            .unwrap_or(0);
        if self.xi == 0 || self.xi > shortest {
            return Err(invalid("xi", format!("need 1 <= xi <= {shortest} for task {task}")));
        }
        if self.encoder_layers == 0 || self.encoder_dim == 0 || self.encoder_ff == 0 {
            return Err(invalid("encoder_layers", "encoder sizes must be positive"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(invalid("hidden", "need at least one non-empty hidden layer"));
        }
        if self.dataset_size == 0 {
            return Err(invalid("dataset_size", "must be positive"));
        }
        if !(self.pretrain_lr > 0.0 && self.pretrain_lr.is_finite()) || self.pretrain_batch == 0 {
            return Err(invalid("pretrain_lr", "pretraining needs a positive lr and batch size"));
        }
        if self.eval_instances == 0 {
            return Err(invalid("eval_instances", "must be positive"));
        }
        if self.scorer_timeout_ms == 0 {
            return Err(invalid("scorer_timeout_ms", "must be positive"));
        }
        self.scorer_mode()?;
        Ok(())
    }
}
