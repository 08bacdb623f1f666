//! QMIX learner built from scratch: per-agent Q-networks, a hypernetwork
//! mixer that is monotone in every agent's value, experience replay, TD
//! targets from a periodically synced target copy, and gradient updates.

mod checkpoint;
mod learner;
pub mod nn;
mod network;
mod replay;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use learner::{sgd_step, Optimizer, Qmix, TdLoss};
pub use network::{elu, AgentNetwork, MixerCache, MixingNetwork, MixingWeights, QmixParams};
pub use replay::{ReplayBuffer, Transition};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub discount: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Training steps between hard target syncs.
    pub target_sync_steps: u64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Environment steps over which epsilon decays linearly.
    pub epsilon_decay_steps: u64,
    pub episodes: usize,
    pub slots_per_episode: u32,
    /// Environment steps between gradient updates.
    pub train_every: u32,
    pub optimizer: OptimizerKind,
    pub hidden_units: usize,
    pub mixing_width: usize,
    /// Global L2 gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    pub shared_parameters: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            discount: 0.85,
            batch_size: 4096,
            buffer_capacity: 50_000,
            target_sync_steps: 200,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_steps: 50_000,
            episodes: 2000,
            slots_per_episode: 50,
            train_every: 1,
            optimizer: OptimizerKind::Sgd,
            hidden_units: 64,
            mixing_width: 32,
            grad_clip: 10.0,
            shared_parameters: false,
        }
    }
}

impl TrainerConfig {
    /// Linear decay from `epsilon_start` to `epsilon_end`.
    pub fn epsilon(&self, step: u64) -> f64 {
        if step >= self.epsilon_decay_steps {
            return self.epsilon_end;
        }
        let frac = step as f64 / self.epsilon_decay_steps as f64;
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }

    pub fn validate(&self) -> Result<()> {
        let p = |k: &str| format!("trainer.{k}");
        if !(self.learning_rate > 0.0) {
            return Err(Error::config(p("learning_rate"), "must be positive"));
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(Error::config(p("discount"), "must lie in (0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(p("batch_size"), "must be at least 1"));
        }
        if self.buffer_capacity < self.batch_size {
            return Err(Error::config(p("buffer_capacity"), "must be at least batch_size"));
        }
        for (k, v) in [("epsilon_start", self.epsilon_start), ("epsilon_end", self.epsilon_end)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(p(k), "probability out of range"));
            }
        }
        if self.slots_per_episode == 0 {
            return Err(Error::config(p("slots_per_episode"), "must be at least 1"));
        }
        if self.train_every == 0 || self.target_sync_steps == 0 {
            return Err(Error::config(p("train_every"), "periods must be at least 1"));
        }
        if self.hidden_units == 0 || self.mixing_width == 0 {
            return Err(Error::config(p("hidden_units"), "layer widths must be positive"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::config(p("grad_clip"), "must be nonnegative"));
        }
        Ok(())
    }
}
