//! Slot-level simulation loop: scheduling, transmission, buffer service,
//! deadline expiry, arrivals, virtual-queue update and reward, in that order.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{
    achievable_rate_with, compute_sinr, draw_channel, ChannelRealization, Layout, TopologyConfig,
};
use crate::lyapunov::{
    lgqp_reward, normalized_drift, qpips_reward, DriftTerm, RewardConfig, RunningJitter,
    VirtualQueue,
};
use crate::qmix::{Qmix, ReplayBuffer, TrainerConfig, Transition};
use crate::scheduler::{ActionSpace, RoundRobinState, Scheduler};
use crate::traffic::{
    jitter, violation_ratio, ArrivalProcess, DelayRecord, EventLog, PacketEvent, PacketFate,
    UserBuffer, UserTraffic,
};
use crate::{Error, Result};

/// Independent random streams derived from one seed.
pub(crate) mod stream {
    pub const LAYOUT: u64 = 1;
    pub const CHANNEL: u64 = 2;
    pub const TRAFFIC: u64 = 3;
    pub const INIT: u64 = 4;
    pub const EXPLORE: u64 = 5;
    pub const REPLAY: u64 = 6;
    pub const EPISODES: u64 = 7;
    pub const EVAL: u64 = 8;
}

pub(crate) fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Lgqp,
    Qpips,
    RrEdf,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::Lgqp, Policy::Qpips, Policy::RrEdf];

    pub fn is_learned(self) -> bool {
        self != Policy::RrEdf
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Lgqp => "lgqp",
            Policy::Qpips => "qpips",
            Policy::RrEdf => "rr_edf",
        }
    }

    pub fn reward_kind(self) -> RewardKind {
        match self {
            Policy::Qpips => RewardKind::Penalty,
            _ => RewardKind::Lyapunov,
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Domain(format!("unknown policy `{s}` (expected lgqp, qpips or rr_edf)")))
    }
}

/// Which reward the environment hands back from [`Env::step`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardKind {
    /// Negative drift-plus-penalty with virtual queues.
    Lyapunov,
    /// Jitter plus weighted cumulative violation ratio.
    Penalty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub topology: TopologyConfig,
    pub users: Vec<UserTraffic>,
    pub drop_on_expiry: bool,
    pub reward: RewardConfig,
    pub reward_kind: RewardKind,
    pub actions: ActionSpace,
    pub slots_per_episode: u32,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.topology.validate()?;
        self.reward.validate()?;
        self.actions.validate()?;
        if self.users.len() != self.topology.num_ues() {
            return Err(Error::Dimension {
                what: "per-user traffic",
                expected: self.topology.num_ues(),
                got: self.users.len(),
            });
        }
        if self.slots_per_episode == 0 {
            return Err(Error::Domain("episode needs at least one slot".into()));
        }
        for (u, t) in self.users.iter().enumerate() {
            if t.packet_bits == 0 {
                return Err(Error::Domain(format!("user {u}: packet size must be positive")));
            }
            if !(t.arrival_rate >= 0.0 && t.arrival_rate.is_finite()) {
                return Err(Error::Domain(format!("user {u}: arrival rate must be finite and >= 0")));
            }
            if !(0.0..=1.0).contains(&t.violation_bound) {
                return Err(Error::Domain(format!("user {u}: probability out of range")));
            }
        }
        Ok(())
    }

    /// Features per agent: `ln(1 + backlog in packets)`, `ln(1 + virtual
    /// queue)`, one channel norm per subcarrier (scaled by the largest) and
    /// the slot phase.
    pub fn obs_dim(&self) -> usize {
        self.topology.num_subcarriers + 3
    }
}

/// What drives the scheduler in one slot.
#[derive(Debug, Clone, Copy)]
pub enum Decision<'a> {
    /// One action index per user.
    Actions(&'a [usize]),
    RoundRobin,
}

/// Per-slot quantities, also one row of the reward trace.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotTrace {
    pub slot: u32,
    pub rate_bits: Vec<f64>,
    pub served_bits: Vec<u64>,
    pub violations: Vec<u32>,
    pub arrivals: Vec<u32>,
    pub drift: f64,
    pub jitter: f64,
    pub reward: f64,
}

impl SlotTrace {
    pub const CSV_HEADER: &'static str =
        "slot,served_bits,violations,arrivals,drift,jitter_slots,reward";

    pub fn write_row<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            self.slot,
            self.served_bits.iter().sum::<u64>(),
            self.violations.iter().sum::<u32>(),
            self.arrivals.iter().sum::<u32>(),
            self.drift,
            self.jitter,
            self.reward
        )?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// Joint observation for the next slot.
    pub obs: Vec<f64>,
    pub reward: f64,
    pub info: SlotTrace,
}

/// Everything that changes during an episode.
#[derive(Debug, Clone)]
pub struct SimState {
    pub slot: u32,
    pub buffers: Vec<UserBuffer>,
    pub virtual_queue: VirtualQueue,
    pub layout: Layout,
    pub channel: ChannelRealization,
    pub round_robin: RoundRobinState,
    pub records: DelayRecord,
    pub running_jitter: RunningJitter,
    pub cumulative_violations: u64,
    pub cumulative_arrivals: u64,
    pub events: EventLog,
    traffic_rng: ChaCha8Rng,
    channel_rng: ChaCha8Rng,
}

#[derive(Debug, Clone)]
pub struct Env {
    cfg: SimConfig,
    scheduler: Scheduler,
    arrivals: Vec<ArrivalProcess>,
    state: SimState,
    validated_slots: u64,
}

impl Env {
    /// Builds the environment and resets it with seed 0.
    pub fn new(cfg: SimConfig) -> Result<Self> {
        cfg.validate()?;
        let scheduler = Scheduler::new(&cfg.topology)?;
        let arrivals = cfg.users.iter().map(|u| ArrivalProcess::new(u.arrival_rate)).collect();
        let state = Self::fresh_state(&cfg, 0);
        Ok(Self {
            cfg,
            scheduler,
            arrivals,
            state,
            validated_slots: 0,
        })
    }

    fn fresh_state(cfg: &SimConfig, seed: u64) -> SimState {
        let nu = cfg.topology.num_ues();
        let layout = Layout::draw(&cfg.topology, &mut substream(seed, stream::LAYOUT));
        let mut channel_rng = substream(seed, stream::CHANNEL);
        let channel = draw_channel(&cfg.topology, &layout, &mut channel_rng);
        SimState {
            slot: 1,
            buffers: cfg
                .users
                .iter()
                .enumerate()
                .map(|(u, t)| UserBuffer::new(u, *t, cfg.drop_on_expiry))
                .collect(),
            virtual_queue: VirtualQueue::new(nu),
            layout,
            channel,
            round_robin: RoundRobinState::new(cfg.topology.num_bs),
            records: DelayRecord::new(nu),
            running_jitter: RunningJitter::new(nu),
            cumulative_violations: 0,
            cumulative_arrivals: 0,
            events: EventLog::default(),
            traffic_rng: substream(seed, stream::TRAFFIC),
            channel_rng,
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn scheduler(&self) -> &Scheduler {
        &self.scheduler
    }

    pub fn num_agents(&self) -> usize {
        self.cfg.users.len()
    }

    /// Slots whose allocation passed the constraint check since creation.
    pub fn validated_slots(&self) -> u64 {
        self.validated_slots
    }

    /// Empty buffers, zero virtual queues, a fresh layout and channel, slot 1.
    pub fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.state = Self::fresh_state(&self.cfg, seed);
        self.observe()
    }

    /// Joint observation, agent after agent.
    pub fn observe(&self) -> Vec<f64> {
        let topo = &self.cfg.topology;
        let s = &self.state;
        let mut obs = Vec::with_capacity(self.num_agents() * self.cfg.obs_dim());
        for (u, buf) in s.buffers.iter().enumerate() {
            let b = topo.serving_bs(u);
            let packets = buf.backlog_bits() as f64 / buf.traffic().packet_bits as f64;
            obs.push(packets.ln_1p());
            obs.push(s.virtual_queue.get(u).ln_1p());
            let start = obs.len();
            obs.extend((0..topo.num_subcarriers).map(|f| s.channel.norm_sqr(f, b, u).sqrt()));
            let max = obs[start..].iter().copied().fold(0.0, f64::max);
            if max > 0.0 {
                obs[start..].iter_mut().for_each(|x| *x /= max);
            }
            obs.push(f64::from(s.slot) / f64::from(self.cfg.slots_per_episode));
        }
        obs
    }

    /// Advances one slot with Poisson arrivals.
    pub fn step(&mut self, decision: Decision<'_>) -> Result<StepOutcome> {
        let arrivals: Vec<u32> = self
            .arrivals
            .iter()
            .map(|a| a.sample(&mut self.state.traffic_rng))
            .collect();
        self.step_with_arrivals(decision, &arrivals)
    }

    /// Advances one slot with the given arrival counts.
    pub fn step_with_arrivals(&mut self, decision: Decision<'_>, arrivals: &[u32]) -> Result<StepOutcome> {
        let nu = self.num_agents();
        if arrivals.len() != nu {
            return Err(Error::Dimension {
                what: "arrival counts",
                expected: nu,
                got: arrivals.len(),
            });
        }
        let t = self.state.slot;
        let topo = &self.cfg.topology;

        let plan = match decision {
            Decision::Actions(actions) => {
                if actions.len() != nu {
                    return Err(Error::Dimension {
                        what: "joint action",
                        expected: nu,
                        got: actions.len(),
                    });
                }
                if let Some(&a) = actions.iter().find(|&&a| a >= self.cfg.actions.size()) {
                    return Err(Error::Dimension {
                        what: "action index",
                        expected: self.cfg.actions.size(),
                        got: a,
                    });
                }
                let d = self.cfg.actions.directives(actions);
                self.scheduler.allocate(&d, &self.state.channel, &self.state.buffers, t)
            }
            Decision::RoundRobin => self.scheduler.round_robin_edf(
                &mut self.state.round_robin,
                &self.state.channel,
                &self.state.buffers,
                t,
            ),
        };
        let alloc = &plan.allocation;
        alloc
            .validate(topo)
            .map_err(|msg| Error::Constraint { slot: t, msg })?;
        self.validated_slots += 1;

        let gamma = compute_sinr(alloc, &self.state.channel, topo);
        let penalty = self.scheduler.penalty();
        let rate: Vec<f64> = (0..nu)
            .map(|u| achievable_rate_with(alloc.subcarriers_of(u).map(|f| gamma[[u, f]]), penalty))
            .collect();

        let s = &mut self.state;
        let backlog: Vec<u64> = s.buffers.iter().map(UserBuffer::backlog_bits).collect();
        let h_before = s.virtual_queue.values().to_vec();
        let mut served = vec![0; nu];
        let mut violations = vec![0; nu];
        for u in 0..nu {
            let out = s.buffers[u].serve(rate[u].floor() as u64, t);
            served[u] = out.served_bits;
            for c in &out.completions {
                let fate = if c.on_time {
                    s.records.record_completion(u, c);
                    s.running_jitter.push(u, c.delay);
                    PacketFate::Delivered { slot: t, delay: c.delay }
                } else {
                    PacketFate::Late { slot: t, delay: c.delay }
                };
                s.events.push(PacketEvent {
                    user: u,
                    arrival_slot: c.packet.arrival_slot,
                    seq: c.packet.seq,
                    fate,
                });
            }
        }
        for u in 0..nu {
            let out = s.buffers[u].expire(t);
            violations[u] = out.violations;
            s.records.record_violations(u, out.violations);
            for p in &out.dropped {
                s.events.push(PacketEvent {
                    user: u,
                    arrival_slot: p.arrival_slot,
                    seq: p.seq,
                    fate: PacketFate::Expired { slot: t },
                });
            }
        }
        for (u, &a) in arrivals.iter().enumerate() {
            s.buffers[u].enqueue(t, a);
            s.records.record_arrivals(u, a);
        }
        for u in 0..nu {
            s.virtual_queue
                .update(u, violations[u], arrivals[u], self.cfg.users[u].violation_bound);
        }
        s.cumulative_violations += violations.iter().map(|&v| u64::from(v)).sum::<u64>();
        s.cumulative_arrivals += arrivals.iter().map(|&a| u64::from(a)).sum::<u64>();

        let terms: Vec<DriftTerm> = (0..nu)
            .map(|u| {
                let tr = &self.cfg.users[u];
                DriftTerm {
                    backlog_bits: backlog[u] as f64,
                    virtual_queue: h_before[u],
                    rate_bits: rate[u],
                    violations: violations[u],
                    packet_bits: tr.packet_bits as f64,
                    arrival_rate: tr.arrival_rate,
                    violation_bound: tr.violation_bound,
                }
            })
            .collect();
        let drift = normalized_drift(&terms, self.cfg.reward.drift_const);
        let f_bar = s.running_jitter.value();
        let reward = match self.cfg.reward_kind {
            RewardKind::Lyapunov => lgqp_reward(drift, f_bar, &self.cfg.reward),
            RewardKind::Penalty => qpips_reward(
                f_bar,
                s.cumulative_violations,
                s.cumulative_arrivals,
                self.cfg.reward.delta,
            ),
        };
        if !reward.is_finite() {
            return Err(Error::NonFinite(format!("reward in slot {t}")));
        }

        s.slot += 1;
        s.channel = draw_channel(topo, &s.layout, &mut s.channel_rng);
        Ok(StepOutcome {
            obs: self.observe(),
            reward,
            info: SlotTrace {
                slot: t,
                rate_bits: rate,
                served_bits: served,
                violations,
                arrivals: arrivals.to_vec(),
                drift,
                jitter: f_bar,
                reward,
            },
        })
    }

    /// Event log of the episode so far, closed with one row per packet still
    /// buffered.
    pub fn event_log(&self) -> EventLog {
        let mut log = self.state.events.clone();
        for (u, b) in self.state.buffers.iter().enumerate() {
            for p in b.packets() {
                log.push(PacketEvent {
                    user: u,
                    arrival_slot: p.arrival_slot,
                    seq: p.seq,
                    fate: if p.violated() {
                        PacketFate::Overdue
                    } else {
                        PacketFate::Pending
                    },
                });
            }
        }
        log
    }
}

/// Summary of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeMetrics {
    /// Per-user violations over arrivals.
    pub violation_ratio: Vec<f64>,
    /// Mean over users of the delay standard deviation, in slots.
    pub jitter: f64,
    /// Mean delay of on-time deliveries, in slots.
    pub mean_delay: f64,
    pub delivered: u64,
    pub arrivals: u64,
    pub violations: u64,
}

impl EpisodeMetrics {
    pub fn from_records(records: &DelayRecord) -> Self {
        let delivered = records.delivered();
        let delay_sum: u64 = records
            .users
            .iter()
            .flat_map(|u| u.delays.iter())
            .map(|&d| u64::from(d))
            .sum();
        Self {
            violation_ratio: violation_ratio(records),
            jitter: jitter(records),
            mean_delay: if delivered == 0 {
                0.0
            } else {
                delay_sum as f64 / delivered as f64
            },
            delivered,
            arrivals: records.users.iter().map(|u| u.arrivals).sum(),
            violations: records.users.iter().map(|u| u.violations).sum(),
        }
    }

    /// Mean over users of the per-user violation ratio.
    pub fn mean_violation_ratio(&self) -> f64 {
        if self.violation_ratio.is_empty() {
            return 0.0;
        }
        self.violation_ratio.iter().sum::<f64>() / self.violation_ratio.len() as f64
    }
}

/// Learner state that persists across training episodes.
#[derive(Debug, Clone)]
pub struct Learner {
    pub model: Qmix,
    replay: ReplayBuffer,
    explore_rng: ChaCha8Rng,
    replay_rng: ChaCha8Rng,
    env_steps: u64,
}

impl Learner {
    pub fn new(num_agents: usize, obs_dim: usize, actions: usize, cfg: &TrainerConfig, seed: u64) -> Self {
        let model = Qmix::new(num_agents, obs_dim, actions, cfg, &mut substream(seed, stream::INIT));
        Self::from_model(model, seed)
    }

    pub fn from_model(model: Qmix, seed: u64) -> Self {
        Self {
            replay: ReplayBuffer::new(model.config().buffer_capacity),
            model,
            explore_rng: substream(seed, stream::EXPLORE),
            replay_rng: substream(seed, stream::REPLAY),
            env_steps: 0,
        }
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn epsilon(&self) -> f64 {
        self.model.config().epsilon(self.env_steps)
    }

    pub fn replay_len(&self) -> usize {
        self.replay.len()
    }

    fn act(&mut self, obs: &[f64]) -> Result<Vec<usize>> {
        let eps = self.epsilon();
        self.model.select_actions(obs, eps, &mut self.explore_rng)
    }

    /// Stores a transition and trains when due; returns the loss if an
    /// update ran.
    fn observe(&mut self, t: Transition) -> Result<Option<f64>> {
        self.replay.push(t);
        self.env_steps += 1;
        let cfg = self.model.config();
        let due = self.env_steps.is_multiple_of(u64::from(cfg.train_every.max(1)));
        if !due || self.replay.len() < cfg.batch_size {
            return Ok(None);
        }
        let batch = self.replay.sample(cfg.batch_size, &mut self.replay_rng)?;
        self.model.train_step(&batch).map(Some)
    }
}

/// Source of per-slot decisions for [`run_episode`].
pub enum Controller<'a> {
    RoundRobin,
    /// Frozen policy, per-agent argmax.
    Greedy(&'a Qmix),
    /// Epsilon-greedy with replay and gradient updates.
    Learn(&'a mut Learner),
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub metrics: EpisodeMetrics,
    pub trace: Vec<SlotTrace>,
    pub log: EventLog,
    pub losses: Vec<f64>,
    pub total_reward: f64,
}

/// Runs `slots_per_episode` slots from `reset(seed)`.
pub fn run_episode(env: &mut Env, seed: u64, mut controller: Controller<'_>) -> Result<Episode> {
    let mut obs = env.reset(seed);
    let slots = env.config().slots_per_episode;
    let mut trace = Vec::with_capacity(slots as usize);
    let mut losses = Vec::new();
    let mut total_reward = 0.0;
    for k in 0..slots {
        let actions = match &mut controller {
            Controller::RoundRobin => None,
            Controller::Greedy(m) => Some(m.greedy_actions(&obs)?),
            Controller::Learn(l) => Some(l.act(&obs)?),
        };
        let out = match &actions {
            Some(a) => env.step(Decision::Actions(a))?,
            None => env.step(Decision::RoundRobin)?,
        };
        total_reward += out.reward;
        if let (Controller::Learn(l), Some(a)) = (&mut controller, actions) {
            let loss = l.observe(Transition {
                obs: std::mem::take(&mut obs),
                actions: a,
                reward: out.reward,
                next_obs: out.obs.clone(),
                terminal: k + 1 == slots,
            })?;
            losses.extend(loss);
        }
        obs = out.obs;
        trace.push(out.info);
    }
    Ok(Episode {
        metrics: EpisodeMetrics::from_records(&env.state().records),
        trace,
        log: env.event_log(),
        losses,
        total_reward,
    })
}
