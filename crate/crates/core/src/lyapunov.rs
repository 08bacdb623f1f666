//! Virtual queues for the delay-violation constraint and the
//! drift-plus-penalty reward.
//!
//! The violation constraint `P(d > D_u) < eta_u` becomes stability of
//!
//! ```text
//! H_u(t+1) = [H_u(t) - eta_u A_u(t)]^+ + omega_u(t)
//! ```
//!
//! where `omega_u(t)` counts packets whose deadline was first missed in slot
//! `t`. The per-slot reward is the negated, rescaled drift bound with the
//! actual queue measured in packets rather than bits:
//!
//! ```text
//! drift = B + sum_u (Z_u/G_u)(lambda_u - psi_u/G_u) + sum_u H_u (omega_u - eta_u lambda_u)
//! r     = -((drift + mu * jitter) / Omega - bias)
//! ```

use serde::{Deserialize, Serialize};

use crate::traffic::{jitter, DelayRecord};
use crate::{Error, Result};

/// Per-user virtual queue backlog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualQueue {
    values: Vec<f64>,
}

impl VirtualQueue {
    pub fn new(num_users: usize) -> Self {
        Self {
            values: vec![0.0; num_users],
        }
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, u: usize) -> f64 {
        self.values[u]
    }

    /// `H <- [H - eta A]^+ + violations` for one user.
    pub fn update(&mut self, u: usize, violations: u32, arrivals: u32, eta: f64) {
        self.values[u] = update_virtual_queue(self.values[u], violations, arrivals, eta);
    }
}

pub fn update_virtual_queue(h: f64, violations: u32, arrivals: u32, eta: f64) -> f64 {
    (h - eta * f64::from(arrivals)).max(0.0) + f64::from(violations)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    /// Jitter penalty weight `mu`.
    pub mu: f64,
    /// Reward scale `Omega`.
    pub omega: f64,
    pub bias: f64,
    /// Violation-ratio weight of the penalty-only baseline reward.
    pub delta: f64,
    /// Constant `B` of the drift bound.
    pub drift_const: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            mu: 50.0,
            omega: 500.0,
            bias: 1.0,
            delta: 50.0,
            drift_const: 0.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0) {
            return Err(Error::config("reward.omega", "must be positive"));
        }
        if !(self.mu >= 0.0) {
            return Err(Error::config("reward.mu", "must be nonnegative"));
        }
        if !(self.delta >= 0.0) {
            return Err(Error::config("reward.delta", "must be nonnegative"));
        }
        if !self.bias.is_finite() || !self.drift_const.is_finite() {
            return Err(Error::config("reward", "bias and drift_const must be finite"));
        }
        Ok(())
    }
}

/// Slot quantities of one user entering the drift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftTerm {
    /// Buffer backlog `Z_u(t)` in bits at the start of the slot.
    pub backlog_bits: f64,
    /// Virtual queue `H_u(t)` at the start of the slot.
    pub virtual_queue: f64,
    /// Achieved rate `psi_u` in bits.
    pub rate_bits: f64,
    pub violations: u32,
    pub packet_bits: f64,
    pub arrival_rate: f64,
    pub violation_bound: f64,
}

/// Drift bound with the actual queue normalised by packet size.
pub fn normalized_drift(terms: &[DriftTerm], drift_const: f64) -> f64 {
    drift_const
        + terms
            .iter()
            .map(|t| {
                let g = t.packet_bits;
                (t.backlog_bits / g) * (t.arrival_rate - t.rate_bits / g)
                    + t.virtual_queue
                        * (f64::from(t.violations) - t.violation_bound * t.arrival_rate)
            })
            .sum::<f64>()
}

/// Reward of the Lyapunov-guided learner.
pub fn lgqp_reward(drift: f64, jitter: f64, cfg: &RewardConfig) -> f64 {
    -((drift + cfg.mu * jitter) / cfg.omega - cfg.bias)
}

/// Reward of the penalty-only baseline: jitter plus weighted cumulative
/// violation ratio.
pub fn qpips_reward(jitter: f64, cumulative_violations: u64, cumulative_arrivals: u64, delta: f64) -> f64 {
    let ratio = if cumulative_arrivals == 0 {
        0.0
    } else {
        cumulative_violations as f64 / cumulative_arrivals as f64
    };
    -(jitter + delta * ratio)
}

/// Incremental version of the system jitter over packets delivered so far.
///
/// Keeps integer count, sum and sum of squares per user, so the variance
/// `(n S2 - S1^2) / n^2` is exact up to the final division.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunningJitter {
    users: Vec<(u64, u64, u64)>,
}

impl RunningJitter {
    pub fn new(num_users: usize) -> Self {
        Self {
            users: vec![(0, 0, 0); num_users],
        }
    }

    pub fn from_records(records: &DelayRecord) -> Self {
        let mut j = Self::new(records.users.len());
        for (u, r) in records.users.iter().enumerate() {
            for &d in &r.delays {
                j.push(u, d);
            }
        }
        j
    }

    pub fn push(&mut self, user: usize, delay: u32) {
        let d = u64::from(delay);
        let s = &mut self.users[user];
        s.0 += 1;
        s.1 += d;
        s.2 += d * d;
    }

    pub fn user_std(&self, user: usize) -> f64 {
        let (n, s1, s2) = self.users[user];
        if n < 2 {
            return 0.0;
        }
        let num = (u128::from(n) * u128::from(s2)) - u128::from(s1) * u128::from(s1);
        (num as f64).sqrt() / n as f64
    }

    pub fn value(&self) -> f64 {
        if self.users.is_empty() {
            return 0.0;
        }
        (0..self.users.len()).map(|u| self.user_std(u)).sum::<f64>() / self.users.len() as f64
    }
}

/// Jitter over everything delivered so far, recomputed from the records.
pub fn running_jitter(records: &DelayRecord) -> f64 {
    jitter(records)
}
