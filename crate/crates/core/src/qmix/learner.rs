use ndarray::{Array1, Array2};
use rand::Rng;

use super::network::QmixParams;
use super::nn::Parameters;
use super::replay::Transition;
use super::{OptimizerKind, TrainerConfig};
use crate::{Error, Result};

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn check_finite(what: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::NonFinite(format!("{what} (entry {i} = {})", values[i]))),
    }
}

/// Plain gradient descent, `theta <- theta - lr * grad`.
pub fn sgd_step<P: Parameters>(params: &mut P, grads: &P, lr: f64) -> Result<()> {
    let g = grads.flatten();
    check_finite("gradient", &g)?;
    let mut off = 0;
    params.visit_mut(&mut |s| {
        for x in s.iter_mut() {
            *x -= lr * g[off];
            off += 1;
        }
    });
    Ok(())
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        m: Vec<f64>,
        v: Vec<f64>,
        t: i32,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, num_params: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam {
                lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                m: vec![0.0; num_params],
                v: vec![0.0; num_params],
                t: 0,
            },
        }
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grad: &[f64]) -> Result<()> {
        check_finite("gradient", grad)?;
        let mut off = 0;
        match self {
            Optimizer::Sgd { lr } => params.visit_mut(&mut |s| {
                for x in s.iter_mut() {
                    *x -= *lr * grad[off];
                    off += 1;
                }
            }),
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                m,
                v,
                t,
            } => {
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - beta2.powi(*t);
                params.visit_mut(&mut |s| {
                    for x in s.iter_mut() {
                        let g = grad[off];
                        m[off] = *beta1 * m[off] + (1.0 - *beta1) * g;
                        v[off] = *beta2 * v[off] + (1.0 - *beta2) * g * g;
                        let mh = m[off] / c1;
                        let vh = v[off] / c2;
                        *x -= *lr * mh / (vh.sqrt() + *eps);
                        off += 1;
                    }
                });
            }
        }
        Ok(())
    }
}

/// Loss, gradients and intermediate values of one TD evaluation.
#[derive(Debug, Clone)]
pub struct TdLoss {
    pub loss: f64,
    pub grads: QmixParams,
    pub targets: Vec<f64>,
    pub q_tot: Vec<f64>,
}

fn joint_matrix(batch: &[&Transition], width: usize, next: bool) -> Result<Array2<f64>> {
    let mut m = Array2::zeros((batch.len(), width));
    for (i, t) in batch.iter().enumerate() {
        let src = if next { &t.next_obs } else { &t.obs };
        if src.len() != width {
            return Err(Error::Dimension {
                what: "joint observation",
                expected: width,
                got: src.len(),
            });
        }
        m.row_mut(i).assign(&ndarray::ArrayView1::from(src.as_slice()));
    }
    Ok(m)
}

/// TD targets `y = r + gamma * Q_tot(s', argmax_a' Q_u; target)`, with
/// the maximisation done per agent.
pub fn td_targets(batch: &[&Transition], target: &QmixParams, discount: f64) -> Result<Vec<f64>> {
    let width = target.num_agents * target.obs_dim;
    let next = joint_matrix(batch, width, true)?;
    let mut q_next = Array2::zeros((batch.len(), target.num_agents));
    for u in 0..target.num_agents {
        let out = target.agent(u).mlp.forward(&target.agent_inputs(&next, u));
        for (i, row) in out.rows().into_iter().enumerate() {
            q_next[[i, u]] = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        }
    }
    let mixed = target.mixer.forward(&next, &q_next);
    Ok(batch
        .iter()
        .zip(mixed.iter())
        .map(|(t, &q)| t.reward + if t.terminal { 0.0 } else { discount * q })
        .collect())
}

/// Mean squared TD error over `batch` and its gradient with respect to every
/// online parameter.
pub fn td_loss(
    batch: &[&Transition],
    online: &QmixParams,
    target: &QmixParams,
    discount: f64,
) -> Result<TdLoss> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = batch.len();
    let nu = online.num_agents;
    let na = online.num_actions();
    for t in batch {
        if t.actions.len() != nu {
            return Err(Error::Dimension {
                what: "joint action",
                expected: nu,
                got: t.actions.len(),
            });
        }
        if let Some(&a) = t.actions.iter().find(|&&a| a >= na) {
            return Err(Error::Dimension {
                what: "action index",
                expected: na,
                got: a,
            });
        }
    }
    let y = td_targets(batch, target, discount)?;
    let states = joint_matrix(batch, nu * online.obs_dim, false)?;

    let mut q = Array2::zeros((n, nu));
    let mut caches = Vec::with_capacity(nu);
    for u in 0..nu {
        let x = online.agent_inputs(&states, u);
        let (out, cache) = online.agent(u).mlp.forward_cached(&x);
        for (i, t) in batch.iter().enumerate() {
            q[[i, u]] = out[[i, t.actions[u]]];
        }
        caches.push(cache);
    }
    let (q_tot, mix_cache) = online.mixer.forward_cached(&states, &q);

    let diff: Array1<f64> = Array1::from(y.clone()) - &q_tot;
    let loss = diff.mapv(|d| d * d).sum() / n as f64;
    let g = diff.mapv(|d| -2.0 * d / n as f64);

    let mut grads = online.zeros_like();
    let dq = online.mixer.backward(&mix_cache, &g, &mut grads.mixer);
    for (u, cache) in caches.iter().enumerate() {
        let mut g_out = Array2::zeros((n, na));
        for (i, t) in batch.iter().enumerate() {
            g_out[[i, t.actions[u]]] = dq[[i, u]];
        }
        let k = online.agent_index(u);
        online.agents[k].mlp.backward(cache, g_out, &mut grads.agents[k].mlp);
    }
    Ok(TdLoss {
        loss,
        grads,
        targets: y,
        q_tot: q_tot.to_vec(),
    })
}

/// Online and target parameters plus optimiser state.
#[derive(Debug, Clone)]
pub struct Qmix {
    pub online: QmixParams,
    pub target: QmixParams,
    optimizer: Optimizer,
    cfg: TrainerConfig,
    train_steps: u64,
}

impl Qmix {
    pub fn new<R: Rng + ?Sized>(
        num_agents: usize,
        obs_dim: usize,
        actions: usize,
        cfg: &TrainerConfig,
        rng: &mut R,
    ) -> Self {
        let online = QmixParams::init(
            num_agents,
            obs_dim,
            actions,
            cfg.hidden_units,
            cfg.mixing_width,
            cfg.shared_parameters,
            rng,
        );
        Self::from_params(online, cfg)
    }

    pub fn from_params(online: QmixParams, cfg: &TrainerConfig) -> Self {
        Self {
            optimizer: Optimizer::new(cfg.optimizer, cfg.learning_rate, online.num_params()),
            target: online.clone(),
            online,
            cfg: cfg.clone(),
            train_steps: 0,
        }
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    pub fn train_steps(&self) -> u64 {
        self.train_steps
    }

    pub fn num_agents(&self) -> usize {
        self.online.num_agents
    }

    pub fn obs_dim(&self) -> usize {
        self.online.obs_dim
    }

    /// Per-agent argmax of the online Q-values.
    pub fn greedy_actions(&self, joint_obs: &[f64]) -> Result<Vec<usize>> {
        let d = self.online.obs_dim;
        if joint_obs.len() != d * self.num_agents() {
            return Err(Error::Dimension {
                what: "joint observation",
                expected: d * self.num_agents(),
                got: joint_obs.len(),
            });
        }
        (0..self.num_agents())
            .map(|u| Ok(argmax(&self.online.q_values(u, &joint_obs[u * d..(u + 1) * d])?)))
            .collect()
    }

    /// Epsilon-greedy joint action; each agent explores independently.
    pub fn select_actions<R: Rng + ?Sized>(
        &self,
        joint_obs: &[f64],
        epsilon: f64,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        let greedy = self.greedy_actions(joint_obs)?;
        let na = self.online.num_actions();
        Ok(greedy
            .into_iter()
            .map(|a| {
                if rng.random::<f64>() < epsilon {
                    rng.random_range(0..na)
                } else {
                    a
                }
            })
            .collect())
    }

    pub fn td_loss(&self, batch: &[&Transition]) -> Result<TdLoss> {
        td_loss(batch, &self.online, &self.target, self.cfg.discount)
    }

    /// One gradient update on `batch`; syncs the target every
    /// `target_sync_steps` updates. Returns the pre-update loss.
    pub fn train_step(&mut self, batch: &[&Transition]) -> Result<f64> {
        let TdLoss { loss, grads, .. } = self.td_loss(batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("TD loss = {loss}")));
        }
        let mut flat = grads.flatten();
        if self.cfg.grad_clip > 0.0 {
            let norm = flat.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > self.cfg.grad_clip {
                let s = self.cfg.grad_clip / norm;
                flat.iter_mut().for_each(|g| *g *= s);
            }
        }
        self.optimizer.step(&mut self.online, &flat)?;
        self.train_steps += 1;
        if self.train_steps.is_multiple_of(self.cfg.target_sync_steps) {
            self.sync_target();
        }
        Ok(loss)
    }

    /// Hard copy of the online parameters into the target network.
    pub fn sync_target(&mut self) {
        self.target = self.online.clone();
    }
}
