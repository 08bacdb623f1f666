//! Packet arrivals, per-user FIFO buffers with bit-level service, deadline
//! expiry and the delay/jitter statistics built on top of them.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::Result;

/// Poisson packet-count generator. `rate == 0` always yields zero.
#[derive(Debug, Clone, Copy)]
pub struct ArrivalProcess(Option<Poisson<f64>>);

impl ArrivalProcess {
    pub fn new(rate: f64) -> Self {
        Self(if rate > 0.0 {
            Some(Poisson::new(rate).expect("finite positive rate"))
        } else {
            None
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        match &self.0 {
            Some(p) => p.sample(rng) as u32,
            None => 0,
        }
    }
}

pub fn poisson_arrivals<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> u32 {
    ArrivalProcess::new(rate).sample(rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Packet {
    pub arrival_slot: u32,
    /// 1-based position among the packets that arrived in `arrival_slot`.
    pub seq: u32,
    pub size: u64,
    pub remaining: u64,
    violated: bool,
}

impl Packet {
    pub fn violated(&self) -> bool {
        self.violated
    }
}

/// Per-user traffic parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserTraffic {
    /// Deadline `D_u` in slots.
    pub deadline: u32,
    /// Mean arrivals per slot.
    pub arrival_rate: f64,
    /// Bound `eta_u` on the violation probability.
    pub violation_bound: f64,
    /// Packet size `G_u` in bits.
    pub packet_bits: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Completion {
    pub packet: Packet,
    pub slot: u32,
    pub delay: u32,
    /// Delivered within the deadline.
    pub on_time: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ServeOutcome {
    pub completions: Vec<Completion>,
    pub served_bits: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExpireOutcome {
    /// Packets whose deadline was first missed in this slot.
    pub violations: u32,
    /// Bits removed from the buffer (drop mode only).
    pub dropped_bits: u64,
    /// Packets removed from the buffer (drop mode only).
    pub dropped: Vec<Packet>,
}

/// FIFO of one user's packets.
///
/// Packets enqueued in slot `t` become servable from slot `t + 1`. A packet
/// is late once `t - arrival_slot > deadline`; it is counted as a violation
/// exactly once, in the slot where its survival time reaches `deadline + 1`.
/// With `drop_on_expiry` it is then removed, otherwise it keeps its place in
/// the queue and is eventually delivered late.
#[derive(Debug, Clone)]
pub struct UserBuffer {
    user: usize,
    traffic: UserTraffic,
    drop_on_expiry: bool,
    queue: VecDeque<Packet>,
    pending_violations: u32,
}

impl UserBuffer {
    pub fn new(user: usize, traffic: UserTraffic, drop_on_expiry: bool) -> Self {
        Self {
            user,
            traffic,
            drop_on_expiry,
            queue: VecDeque::new(),
            pending_violations: 0,
        }
    }

    pub fn user(&self) -> usize {
        self.user
    }

    pub fn traffic(&self) -> &UserTraffic {
        &self.traffic
    }

    pub fn packets(&self) -> impl Iterator<Item = &Packet> {
        self.queue.iter()
    }

    /// `Z_u`: residual bits of every buffered packet.
    pub fn backlog_bits(&self) -> u64 {
        self.queue.iter().map(|p| p.remaining).sum()
    }

    fn is_stale(&self, p: &Packet, t: u32) -> bool {
        self.drop_on_expiry && t - p.arrival_slot > self.traffic.deadline
    }

    /// Packets that may be served in slot `t`, head first.
    pub fn eligible(&self, t: u32) -> impl Iterator<Item = &Packet> + '_ {
        self.queue
            .iter()
            .take_while(move |p| p.arrival_slot < t)
            .filter(move |p| !self.is_stale(p, t))
    }

    pub fn eligible_bits(&self, t: u32) -> u64 {
        self.eligible(t).map(|p| p.remaining).sum()
    }

    /// Arrival slot of the oldest servable packet.
    pub fn head_arrival(&self, t: u32) -> Option<u32> {
        self.eligible(t).next().map(|p| p.arrival_slot)
    }

    pub fn enqueue(&mut self, t: u32, count: u32) {
        let g = self.traffic.packet_bits;
        self.queue.extend((1..=count).map(|seq| Packet {
            arrival_slot: t,
            seq,
            size: g,
            remaining: g,
            violated: false,
        }));
    }

    /// Drains up to `budget` bits in FIFO order from the packets eligible in
    /// slot `t`.
    pub fn serve(&mut self, budget: u64, t: u32) -> ServeOutcome {
        let mut out = ServeOutcome::default();
        let mut left = budget;
        let mut i = 0;
        while left > 0 && i < self.queue.len() {
            let p = self.queue[i];
            if p.arrival_slot >= t {
                break;
            }
            if self.is_stale(&p, t) {
                i += 1;
                continue;
            }
            let take = left.min(p.remaining);
            left -= take;
            out.served_bits += take;
            if take < p.remaining {
                self.queue[i].remaining -= take;
                break;
            }
            let mut done = self.queue.remove(i).expect("index in range");
            done.remaining = 0;
            let delay = t - done.arrival_slot;
            let on_time = delay <= self.traffic.deadline;
            if !on_time && !done.violated {
                // only reachable without drop_on_expiry
                done.violated = true;
                self.pending_violations += 1;
            }
            out.completions.push(Completion {
                packet: done,
                slot: t,
                delay,
                on_time,
            });
        }
        out
    }

    /// Counts (and in drop mode removes) packets whose survival time has
    /// reached `deadline + 1` in slot `t`.
    pub fn expire(&mut self, t: u32) -> ExpireOutcome {
        let mut out = ExpireOutcome {
            violations: std::mem::take(&mut self.pending_violations),
            ..Default::default()
        };
        let d = self.traffic.deadline;
        for p in self.queue.iter_mut() {
            if t.saturating_sub(p.arrival_slot) < d.saturating_add(1) {
                break;
            }
            if !p.violated {
                p.violated = true;
                out.violations += 1;
            }
        }
        if self.drop_on_expiry {
            while self.queue.front().is_some_and(|p| p.violated) {
                let p = self.queue.pop_front().expect("front exists");
                out.dropped_bits += p.remaining;
                out.dropped.push(p);
            }
        }
        out
    }
}

/// Per-user delivery statistics over an observation window.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    /// Delays of packets delivered within their deadline.
    pub delays: Vec<u32>,
    pub violations: u64,
    pub arrivals: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DelayRecord {
    pub users: Vec<UserRecord>,
}

impl DelayRecord {
    pub fn new(num_users: usize) -> Self {
        Self {
            users: vec![UserRecord::default(); num_users],
        }
    }

    pub fn record_completion(&mut self, user: usize, c: &Completion) {
        if c.on_time {
            self.users[user].delays.push(c.delay);
        }
    }

    pub fn record_violations(&mut self, user: usize, n: u32) {
        self.users[user].violations += u64::from(n);
    }

    pub fn record_arrivals(&mut self, user: usize, n: u32) {
        self.users[user].arrivals += u64::from(n);
    }

    pub fn delivered(&self) -> u64 {
        self.users.iter().map(|u| u.delays.len() as u64).sum()
    }
}

/// Population standard deviation; zero for fewer than two samples.
pub fn population_std(delays: &[u32]) -> f64 {
    if delays.len() < 2 {
        return 0.0;
    }
    let n = delays.len() as f64;
    let mean = delays.iter().map(|&d| f64::from(d)).sum::<f64>() / n;
    let var = delays
        .iter()
        .map(|&d| (f64::from(d) - mean).powi(2))
        .sum::<f64>()
        / n;
    var.sqrt()
}

/// System average delay jitter in slots: the mean over users of the
/// population standard deviation of delivered-packet delays.
pub fn jitter(records: &DelayRecord) -> f64 {
    if records.users.is_empty() {
        return 0.0;
    }
    records
        .users
        .iter()
        .map(|u| population_std(&u.delays))
        .sum::<f64>()
        / records.users.len() as f64
}

/// Cumulative violations divided by cumulative arrivals, per user.
pub fn violation_ratio(records: &DelayRecord) -> Vec<f64> {
    records
        .users
        .iter()
        .map(|u| {
            if u.arrivals == 0 {
                0.0
            } else {
                u.violations as f64 / u.arrivals as f64
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PacketFate {
    Delivered { slot: u32, delay: u32 },
    /// Delivered after its deadline (only without drop-on-expiry).
    Late { slot: u32, delay: u32 },
    Expired { slot: u32 },
    /// Still buffered when the window closed.
    Pending,
    /// Still buffered when the window closed, already past its deadline
    /// (only without drop-on-expiry).
    Overdue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacketEvent {
    pub user: usize,
    pub arrival_slot: u32,
    pub seq: u32,
    pub fate: PacketFate,
}

impl fmt::Display for PacketFate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PacketFate::Delivered { slot, delay } => write!(f, "{slot},DELIVERED,{delay}"),
            PacketFate::Late { slot, delay } => write!(f, "{slot},LATE,{delay}"),
            PacketFate::Expired { slot } => write!(f, "{slot},EXPIRED,"),
            PacketFate::Pending => write!(f, ",PENDING,"),
            PacketFate::Overdue => write!(f, ",OVERDUE,"),
        }
    }
}

/// One row per packet, in the order fates were decided.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    pub events: Vec<PacketEvent>,
}

impl EventLog {
    pub fn push(&mut self, e: PacketEvent) {
        self.events.push(e);
    }

    pub const CSV_HEADER: &'static str =
        "user,arrival_slot,seq,completion_slot,status,delay_slots";

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for e in &self.events {
            writeln!(w, "{},{},{},{}", e.user, e.arrival_slot, e.seq, e.fate)?;
        }
        Ok(())
    }

    /// Rebuilds per-user statistics from the log alone.
    pub fn replay(&self, num_users: usize) -> DelayRecord {
        let mut rec = DelayRecord::new(num_users);
        for e in &self.events {
            let u = &mut rec.users[e.user];
            u.arrivals += 1;
            match e.fate {
                PacketFate::Delivered { delay, .. } => u.delays.push(delay),
                PacketFate::Late { .. } | PacketFate::Expired { .. } | PacketFate::Overdue => {
                    u.violations += 1
                }
                PacketFate::Pending => {}
            }
        }
        rec
    }
}
