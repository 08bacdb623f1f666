use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::learner::Qmix;
use super::network::QmixParams;
use super::nn::Parameters;
use super::TrainerConfig;
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "lgqp-qmix";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Serialized online parameters plus everything needed to rebuild them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub trainer: TrainerConfig,
    pub num_agents: usize,
    pub obs_dim: usize,
    pub num_actions: usize,
    pub shared: bool,
    pub train_steps: u64,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Qmix) -> Self {
        let p = &model.online;
        let mut flat = Vec::new();
        p.visit(&mut |s| flat.push(s.to_vec()));
        let tensors = p
            .describe()
            .into_iter()
            .zip(flat)
            .map(|((name, shape), data)| Tensor { name, shape, data })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            trainer: model.config().clone(),
            num_agents: p.num_agents,
            obs_dim: p.obs_dim,
            num_actions: p.num_actions(),
            shared: p.shared(),
            train_steps: model.train_steps(),
            tensors,
        }
    }

    /// Rebuilds the model; the target network starts as a copy of the
    /// online one.
    pub fn to_model(&self) -> Result<Qmix> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let t = &self.trainer;
        let mut params = QmixParams::init(
            self.num_agents,
            self.obs_dim,
            self.num_actions,
            t.hidden_units,
            t.mixing_width,
            self.shared,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        let expected = params.describe();
        if expected.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        let mut flat = Vec::with_capacity(params.num_params());
        for ((name, shape), tensor) in expected.iter().zip(&self.tensors) {
            if *name != tensor.name || *shape != tensor.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` {:?} does not match `{name}` {shape:?}",
                    tensor.name, tensor.shape
                )));
            }
            if tensor.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!("tensor `{name}` has wrong length")));
            }
            flat.extend_from_slice(&tensor.data);
        }
        params.assign_flat(&flat);
        Ok(Qmix::from_params(params, t))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}
