//! Agent Q-networks and the state-conditioned monotonic mixing network.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::nn::{Dense, Mlp, MlpCache, Parameters};
use crate::{Error, Result};

/// Per-agent Q-network: observation in, one Q-value per discrete action out.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentNetwork {
    pub mlp: Mlp,
}

impl AgentNetwork {
    /// Three dense layers: `input -> hidden -> hidden -> actions`.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, actions: usize, rng: &mut R) -> Self {
        Self {
            mlp: Mlp::init(&[input, hidden, hidden, actions], rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            mlp: self.mlp.zeros_like(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn num_actions(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn forward(&self, obs: &[f64]) -> Result<Vec<f64>> {
        if obs.len() != self.input_dim() {
            return Err(Error::Dimension {
                what: "agent observation",
                expected: self.input_dim(),
                got: obs.len(),
            });
        }
        let x = Array2::from_shape_vec((1, obs.len()), obs.to_vec()).expect("row shape");
        Ok(self.mlp.forward(&x).into_raw_vec_and_offset().0)
    }
}

impl Parameters for AgentNetwork {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.mlp.visit(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.mlp.visit_mut(f)
    }
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// `Q_tot = |W2(s)| . elu(|W1(s)| q + b1(s)) + b2(s)`.
///
/// `W1`, `b1` and `W2` come from single linear hypernetworks of the global
/// state; `b2` from a two-layer ReLU head. The absolute value on the
/// generated weights makes `Q_tot` nondecreasing in every agent's `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingNetwork {
    pub num_agents: usize,
    pub width: usize,
    pub hyper_w1: Dense,
    pub hyper_b1: Dense,
    pub hyper_w2: Dense,
    pub hyper_b2: Mlp,
}

#[derive(Debug, Clone)]
pub struct MixerCache {
    state: Array2<f64>,
    q: Array2<f64>,
    w1_raw: Array2<f64>,
    hidden_pre: Array2<f64>,
    w2_raw: Array2<f64>,
    b2: MlpCache,
}

/// Mixing weights generated for one state, after the nonnegativity map.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingWeights {
    /// `agents x width`.
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: f64,
}

impl MixingNetwork {
    pub fn init<R: Rng + ?Sized>(state_dim: usize, num_agents: usize, width: usize, rng: &mut R) -> Self {
        Self {
            num_agents,
            width,
            hyper_w1: Dense::init(state_dim, num_agents * width, rng),
            hyper_b1: Dense::init(state_dim, width, rng),
            hyper_w2: Dense::init(state_dim, width, rng),
            hyper_b2: Mlp::init(&[state_dim, width, 1], rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            num_agents: self.num_agents,
            width: self.width,
            hyper_w1: self.hyper_w1.zeros_like(),
            hyper_b1: self.hyper_b1.zeros_like(),
            hyper_w2: self.hyper_w2.zeros_like(),
            hyper_b2: self.hyper_b2.zeros_like(),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.hyper_w1.input_dim()
    }

    pub fn forward(&self, state: &Array2<f64>, q: &Array2<f64>) -> Array1<f64> {
        self.forward_cached(state, q).0
    }

    pub fn forward_cached(&self, state: &Array2<f64>, q: &Array2<f64>) -> (Array1<f64>, MixerCache) {
        let n = state.nrows();
        let (u, h) = (self.num_agents, self.width);
        let w1_raw = self.hyper_w1.forward(state);
        let b1 = self.hyper_b1.forward(state);
        let w2_raw = self.hyper_w2.forward(state);
        let (b2, b2_cache) = self.hyper_b2.forward_cached(state);

        let mut hidden_pre = b1;
        for i in 0..n {
            for a in 0..u {
                let qa = q[[i, a]];
                for k in 0..h {
                    hidden_pre[[i, k]] += w1_raw[[i, a * h + k]].abs() * qa;
                }
            }
        }
        let mut out = b2.index_axis(Axis(1), 0).to_owned();
        for i in 0..n {
            let mut acc = 0.0;
            for k in 0..h {
                acc += w2_raw[[i, k]].abs() * elu(hidden_pre[[i, k]]);
            }
            out[i] += acc;
        }
        let cache = MixerCache {
            state: state.clone(),
            q: q.clone(),
            w1_raw,
            hidden_pre,
            w2_raw,
            b2: b2_cache,
        };
        (out, cache)
    }

    /// Backpropagates `g = dL/dQ_tot` (one entry per sample), accumulating
    /// parameter gradients into `grad`; returns `dL/dq`.
    pub fn backward(&self, cache: &MixerCache, g: &Array1<f64>, grad: &mut MixingNetwork) -> Array2<f64> {
        let n = g.len();
        let (u, h) = (self.num_agents, self.width);
        let mut d_w2 = Array2::zeros((n, h));
        let mut d_pre = Array2::zeros((n, h));
        for i in 0..n {
            for k in 0..h {
                let pre = cache.hidden_pre[[i, k]];
                let raw = cache.w2_raw[[i, k]];
                d_w2[[i, k]] = g[i] * elu(pre) * raw.signum();
                d_pre[[i, k]] = g[i] * raw.abs() * elu_grad(pre);
            }
        }
        let mut d_w1 = Array2::zeros((n, u * h));
        let mut dq = Array2::zeros((n, u));
        for i in 0..n {
            for a in 0..u {
                let qa = cache.q[[i, a]];
                let mut acc = 0.0;
                for k in 0..h {
                    let raw = cache.w1_raw[[i, a * h + k]];
                    d_w1[[i, a * h + k]] = d_pre[[i, k]] * qa * raw.signum();
                    acc += d_pre[[i, k]] * raw.abs();
                }
                dq[[i, a]] = acc;
            }
        }
        let s = &cache.state;
        self.hyper_w1.backward(s, &d_w1, &mut grad.hyper_w1, false);
        self.hyper_b1.backward(s, &d_pre, &mut grad.hyper_b1, false);
        self.hyper_w2.backward(s, &d_w2, &mut grad.hyper_w2, false);
        let g2 = g.clone().insert_axis(Axis(1));
        self.hyper_b2.backward(&cache.b2, g2, &mut grad.hyper_b2);
        dq
    }

    /// Mixes a single sample.
    pub fn mix(&self, q: &[f64], state: &[f64]) -> Result<f64> {
        if q.len() != self.num_agents {
            return Err(Error::Dimension {
                what: "mixer agent values",
                expected: self.num_agents,
                got: q.len(),
            });
        }
        if state.len() != self.state_dim() {
            return Err(Error::Dimension {
                what: "mixer state",
                expected: self.state_dim(),
                got: state.len(),
            });
        }
        let s = Array2::from_shape_vec((1, state.len()), state.to_vec()).expect("row");
        let q = Array2::from_shape_vec((1, q.len()), q.to_vec()).expect("row");
        Ok(self.forward(&s, &q)[0])
    }

    pub fn weights(&self, state: &[f64]) -> MixingWeights {
        let s = Array2::from_shape_vec((1, state.len()), state.to_vec()).expect("row");
        let w1 = self
            .hyper_w1
            .forward(&s)
            .mapv(f64::abs)
            .into_shape_with_order((self.num_agents, self.width))
            .expect("agents x width");
        MixingWeights {
            w1,
            b1: self.hyper_b1.forward(&s).row(0).to_owned(),
            w2: self.hyper_w2.forward(&s).row(0).mapv(f64::abs),
            b2: self.hyper_b2.forward(&s)[[0, 0]],
        }
    }
}

impl Parameters for MixingNetwork {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.hyper_w1.visit(f);
        self.hyper_b1.visit(f);
        self.hyper_w2.visit(f);
        self.hyper_b2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.hyper_w1.visit_mut(f);
        self.hyper_b1.visit_mut(f);
        self.hyper_w2.visit_mut(f);
        self.hyper_b2.visit_mut(f);
    }
}

/// Every learnable parameter: one network per agent (or a single shared
/// one) plus the mixer.
#[derive(Debug, Clone, PartialEq)]
pub struct QmixParams {
    pub agents: Vec<AgentNetwork>,
    pub mixer: MixingNetwork,
    pub num_agents: usize,
    /// Observation width before the agent one-hot used by shared networks.
    pub obs_dim: usize,
}

impl QmixParams {
    pub fn init<R: Rng + ?Sized>(
        num_agents: usize,
        obs_dim: usize,
        actions: usize,
        hidden: usize,
        mixing_width: usize,
        shared: bool,
        rng: &mut R,
    ) -> Self {
        let agents = if shared {
            vec![AgentNetwork::init(obs_dim + num_agents, hidden, actions, rng)]
        } else {
            (0..num_agents)
                .map(|_| AgentNetwork::init(obs_dim, hidden, actions, rng))
                .collect()
        };
        Self {
            agents,
            mixer: MixingNetwork::init(num_agents * obs_dim, num_agents, mixing_width, rng),
            num_agents,
            obs_dim,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            agents: self.agents.iter().map(AgentNetwork::zeros_like).collect(),
            mixer: self.mixer.zeros_like(),
            num_agents: self.num_agents,
            obs_dim: self.obs_dim,
        }
    }

    pub fn shared(&self) -> bool {
        self.agents.len() == 1 && self.num_agents > 1
    }

    pub fn agent_index(&self, u: usize) -> usize {
        if self.shared() {
            0
        } else {
            u
        }
    }

    pub fn agent(&self, u: usize) -> &AgentNetwork {
        &self.agents[self.agent_index(u)]
    }

    pub fn num_actions(&self) -> usize {
        self.agents[0].num_actions()
    }

    /// Network input of agent `u` for a batch of joint observations
    /// (`N x num_agents*obs_dim`).
    pub fn agent_inputs(&self, states: &Array2<f64>, u: usize) -> Array2<f64> {
        let d = self.obs_dim;
        let own = states.slice(ndarray::s![.., u * d..(u + 1) * d]);
        if !self.shared() {
            return own.to_owned();
        }
        let mut x = Array2::zeros((states.nrows(), d + self.num_agents));
        x.slice_mut(ndarray::s![.., ..d]).assign(&own);
        x.column_mut(d + u).fill(1.0);
        x
    }

    /// Q-values of agent `u` for its own observation.
    pub fn q_values(&self, u: usize, obs: &[f64]) -> Result<Vec<f64>> {
        if obs.len() != self.obs_dim {
            return Err(Error::Dimension {
                what: "agent observation",
                expected: self.obs_dim,
                got: obs.len(),
            });
        }
        if self.shared() {
            let mut x = obs.to_vec();
            x.extend((0..self.num_agents).map(|k| if k == u { 1.0 } else { 0.0 }));
            self.agents[0].forward(&x)
        } else {
            self.agents[u].forward(obs)
        }
    }

    /// Tensor names and shapes in [`Parameters::visit`] order.
    pub fn describe(&self) -> Vec<(String, Vec<usize>)> {
        fn dense(out: &mut Vec<(String, Vec<usize>)>, name: String, d: &Dense) {
            out.push((format!("{name}.w"), d.w.shape().to_vec()));
            out.push((format!("{name}.b"), d.b.shape().to_vec()));
        }
        let mut out = Vec::new();
        for (i, a) in self.agents.iter().enumerate() {
            for (j, l) in a.mlp.layers.iter().enumerate() {
                dense(&mut out, format!("agent{i}.layer{j}"), l);
            }
        }
        dense(&mut out, "mixer.hyper_w1".into(), &self.mixer.hyper_w1);
        dense(&mut out, "mixer.hyper_b1".into(), &self.mixer.hyper_b1);
        dense(&mut out, "mixer.hyper_w2".into(), &self.mixer.hyper_w2);
        for (j, l) in self.mixer.hyper_b2.layers.iter().enumerate() {
            dense(&mut out, format!("mixer.hyper_b2.layer{j}"), l);
        }
        out
    }
}

impl Parameters for QmixParams {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        for a in &self.agents {
            a.visit(f);
        }
        self.mixer.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for a in &mut self.agents {
            a.visit_mut(f);
        }
        self.mixer.visit_mut(f);
    }
}
