//! Scheduling layer: turns per-user (priority, packet count) directives into
//! a feasible subcarrier allocation, plus the round-robin EDF baseline.
//!
//! Both allocators plan with interference-free rate estimates (each BS sees
//! only its own cell) and grant MRT beams at the fixed per-subcarrier power
//! `P_max / F`, so the per-BS power budget holds for any assignment.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::channel::{
    mrt_beamformer, Allocation, ChannelRealization, DispersionPenalty, RateAccumulator,
    TopologyConfig,
};
use crate::traffic::UserBuffer;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActionSpace {
    pub priority_levels: usize,
    pub max_packets: usize,
}

impl Default for ActionSpace {
    fn default() -> Self {
        Self {
            priority_levels: 4,
            max_packets: 5,
        }
    }
}

impl ActionSpace {
    pub fn size(&self) -> usize {
        self.priority_levels * (self.max_packets + 1)
    }

    /// Action index to `(priority, packets)`.
    pub fn decode(&self, action: usize) -> (usize, u32) {
        let per = self.max_packets + 1;
        (action / per, (action % per) as u32)
    }

    pub fn encode(&self, priority: usize, packets: u32) -> usize {
        priority * (self.max_packets + 1) + packets as usize
    }

    pub fn directives(&self, actions: &[usize]) -> Vec<UserDirective> {
        actions
            .iter()
            .enumerate()
            .map(|(user, &a)| {
                let (priority, packets) = self.decode(a);
                UserDirective {
                    user,
                    priority,
                    packets,
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.priority_levels == 0 {
            return Err(Error::config("scheduler.priority_levels", "must be at least 1"));
        }
        Ok(())
    }
}

/// Learning-layer output for one user: lower `priority` is served first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UserDirective {
    pub user: usize,
    pub priority: usize,
    pub packets: u32,
}

/// Round-robin cursor per BS, as an index into that BS's UE list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundRobinState {
    pub cursor: Vec<usize>,
}

impl RoundRobinState {
    pub fn new(num_bs: usize) -> Self {
        Self {
            cursor: vec![0; num_bs],
        }
    }
}

/// An allocation with the interference-free bits it was planned for.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub allocation: Allocation,
    pub planned_bits: Vec<f64>,
}

/// Allocator bound to one topology.
#[derive(Debug, Clone)]
pub struct Scheduler {
    topo: TopologyConfig,
    penalty: DispersionPenalty,
    snr_scale: f64,
}

impl Scheduler {
    pub fn new(topo: &TopologyConfig) -> Result<Self> {
        Ok(Self {
            penalty: DispersionPenalty::new(topo.block_error_rate)?,
            snr_scale: topo.subcarrier_power() / topo.noise_power(),
            topo: topo.clone(),
        })
    }

    pub fn topology(&self) -> &TopologyConfig {
        &self.topo
    }

    pub fn penalty(&self) -> DispersionPenalty {
        self.penalty
    }

    /// SNR of UE `u` on subcarrier `f` of its own BS with no other cell active.
    fn snr(&self, ch: &ChannelRealization, u: usize, f: usize) -> f64 {
        self.snr_scale * ch.norm_sqr(f, self.topo.serving_bs(u), u)
    }

    /// Finite-blocklength rate of `u` over `subcarriers`, ignoring
    /// co-channel interference.
    pub fn interference_free_rate(
        &self,
        subcarriers: &[usize],
        ch: &ChannelRealization,
        u: usize,
    ) -> f64 {
        let mut acc = RateAccumulator::default();
        for &f in subcarriers {
            acc.add(self.snr(ch, u, f));
        }
        acc.rate(self.penalty)
    }

    /// Subcarriers ordered by decreasing own-cell channel norm, ties by index.
    fn ranked_subcarriers(&self, ch: &ChannelRealization, u: usize) -> Vec<(usize, f64)> {
        let b = self.topo.serving_bs(u);
        let mut v: Vec<(usize, f64)> = (0..self.topo.num_subcarriers)
            .map(|f| (f, ch.norm_sqr(f, b, u)))
            .collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }

    fn grant(
        &self,
        alloc: &mut Allocation,
        ch: &ChannelRealization,
        u: usize,
        f: usize,
    ) {
        let b = self.topo.serving_bs(u);
        let w = mrt_beamformer(ch.vector(f, b, u), self.topo.subcarrier_power());
        // a zero channel carries nothing; leave the subcarrier unscheduled
        if let Ok(w) = w {
            alloc.grant(u, f, w);
        }
    }

    /// Grants subcarriers user by user in priority order until each user's
    /// request (capped at its servable bits) is covered or its BS runs out.
    pub fn allocate(
        &self,
        directives: &[UserDirective],
        ch: &ChannelRealization,
        buffers: &[UserBuffer],
        t: u32,
    ) -> Plan {
        let nu = self.topo.num_ues();
        let nf = self.topo.num_subcarriers;
        let mut alloc = Allocation::new(nu, nf);
        let mut planned = vec![0.0; nu];
        let mut taken = vec![false; self.topo.num_bs * nf];

        let mut order: Vec<&UserDirective> = directives.iter().collect();
        order.sort_by_key(|d| {
            (
                d.priority,
                buffers[d.user].head_arrival(t).unwrap_or(u32::MAX),
                d.user,
            )
        });

        for d in order {
            let u = d.user;
            let g = buffers[u].traffic().packet_bits;
            let target = (u64::from(d.packets) * g).min(buffers[u].eligible_bits(t)) as f64;
            if target <= 0.0 {
                continue;
            }
            let b = self.topo.serving_bs(u);
            let mut acc = RateAccumulator::default();
            for (f, _) in self.ranked_subcarriers(ch, u) {
                if acc.rate(self.penalty) >= target {
                    break;
                }
                if taken[b * nf + f] {
                    continue;
                }
                taken[b * nf + f] = true;
                acc.add(self.snr(ch, u, f));
                self.grant(&mut alloc, ch, u, f);
            }
            planned[u] = acc.rate(self.penalty);
        }
        Plan {
            allocation: alloc,
            planned_bits: planned,
        }
    }

    /// Round-robin EDF: per BS, visit users cyclically from the cursor; each
    /// visit adds the user's oldest uncovered packet to its target and grants
    /// its next-best free subcarriers until the target is covered. Rounds
    /// repeat until every servable packet is covered or subcarriers run out.
    pub fn round_robin_edf(
        &self,
        state: &mut RoundRobinState,
        ch: &ChannelRealization,
        buffers: &[UserBuffer],
        t: u32,
    ) -> Plan {
        let nu = self.topo.num_ues();
        let nf = self.topo.num_subcarriers;
        let mut alloc = Allocation::new(nu, nf);
        let mut planned = vec![0.0; nu];

        for b in 0..self.topo.num_bs {
            let users: Vec<usize> = self.topo.ues_of(b).collect();
            let n = users.len();
            let pending: Vec<Vec<u64>> = users
                .iter()
                .map(|&u| buffers[u].eligible(t).map(|p| p.remaining).collect())
                .collect();
            let ranked: Vec<Vec<(usize, f64)>> =
                users.iter().map(|&u| self.ranked_subcarriers(ch, u)).collect();
            let mut rank_pos = vec![0usize; n];
            let mut next_pkt = vec![0usize; n];
            let mut target = vec![0u64; n];
            let mut acc = vec![RateAccumulator::default(); n];
            let mut taken = vec![false; nf];
            let mut free = nf;
            let mut last_visited = None;
            let start = state.cursor[b] % n;

            'rounds: loop {
                let mut progressed = false;
                for k in 0..n {
                    let i = (start + k) % n;
                    if next_pkt[i] >= pending[i].len() {
                        continue;
                    }
                    target[i] += pending[i][next_pkt[i]];
                    next_pkt[i] += 1;
                    last_visited = Some(i);
                    progressed = true;
                    let u = users[i];
                    while acc[i].rate(self.penalty) < target[i] as f64 {
                        // next-best free subcarrier of this user
                        let next = ranked[i][rank_pos[i]..]
                            .iter()
                            .position(|&(f, _)| !taken[f]);
                        let Some(off) = next else {
                            break 'rounds;
                        };
                        let f = ranked[i][rank_pos[i] + off].0;
                        rank_pos[i] += off + 1;
                        taken[f] = true;
                        free -= 1;
                        acc[i].add(self.snr(ch, u, f));
                        self.grant(&mut alloc, ch, u, f);
                    }
                    if free == 0 {
                        break 'rounds;
                    }
                }
                if !progressed {
                    break;
                }
            }
            if let Some(i) = last_visited {
                state.cursor[b] = (i + 1) % n;
            }
            for (i, &u) in users.iter().enumerate() {
                planned[u] = acc[i].rate(self.penalty);
            }
        }
        Plan {
            allocation: alloc,
            planned_bits: planned,
        }
    }
}

/// Debug dump of one slot's allocation.
pub struct AllocationDump<'a> {
    pub slot: u32,
    pub plan: &'a Plan,
    pub realized_bits: &'a [f64],
}

impl AllocationDump<'_> {
    pub const CSV_HEADER: &'static str = "slot,user,subcarriers,planned_bits,realized_bits";

    pub fn write_rows<W: Write>(&self, mut w: W) -> Result<()> {
        let a = &self.plan.allocation;
        for u in 0..a.num_ues() {
            let scs: Vec<String> = a.subcarriers_of(u).map(|f| f.to_string()).collect();
            writeln!(
                w,
                "{},{},{},{:.6},{:.6}",
                self.slot,
                u,
                scs.join(" "),
                self.plan.planned_bits[u],
                self.realized_bits[u]
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use num_complex::Complex64;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::channel::{achievable_rate_with, compute_sinr, draw_channel, Layout};
    use crate::traffic::UserTraffic;

    /// Noise 1 W, eps = 0.5 (no dispersion penalty), scalar channels, so a
    /// subcarrier with |h|^2 = x carries exactly log2(1 + P x) bits.
    fn flat_topology(num_bs: usize, ues_per_bs: usize, nf: usize, p_sc: f64) -> TopologyConfig {
        TopologyConfig {
            num_bs,
            ues_per_bs,
            num_subcarriers: nf,
            num_antennas: 1,
            noise_power_dbm: 30.0,
            max_power: p_sc * nf as f64,
            block_error_rate: 0.5 - 1e-12,
            ..Default::default()
        }
    }

    fn buffers(topo: &TopologyConfig, g: u64, counts: &[u32]) -> Vec<UserBuffer> {
        counts
            .iter()
            .enumerate()
            .map(|(u, &c)| {
                let mut b = UserBuffer::new(
                    u,
                    UserTraffic {
                        deadline: 5,
                        arrival_rate: 3.0,
                        violation_bound: 0.01,
                        packet_bits: g,
                    },
                    true,
                );
                b.enqueue(1, c);
                b
            })
            .take(topo.num_ues())
            .collect()
    }

    #[test]
    fn action_space_round_trip() {
        let s = ActionSpace::default();
        assert_eq!(s.size(), 24);
        for a in 0..24 {
            let (p, n) = s.decode(a);
            assert!(p < 4 && n <= 5);
            assert_eq!(s.encode(p, n), a);
        }
    }

    #[test]
    fn zero_requests_allocate_nothing() {
        let topo = TopologyConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ch = draw_channel(&topo, &Layout::draw(&topo, &mut rng), &mut rng);
        let bufs = buffers(&topo, 40, &[3; 6]);
        let dirs: Vec<_> = (0..6)
            .map(|user| UserDirective { user, priority: 0, packets: 0 })
            .collect();
        let s = Scheduler::new(&topo).unwrap();
        assert!(s.allocate(&dirs, &ch, &bufs, 2).allocation.is_empty());
    }

    #[test]
    fn single_user_gets_best_subcarriers() {
        // Gains chosen so each subcarrier carries a distinct, known number of bits.
        let topo = flat_topology(1, 1, 6, 1.0);
        let bits = [10.0, 30.0, 25.0, 5.0, 28.0, 12.0];
        let ch = ChannelRealization::from_fn(6, 1, 1, 1, |f, _, _, _| {
            Complex64::new((2f64.powf(bits[f]) - 1.0).sqrt(), 0.0)
        });
        let bufs = buffers(&topo, 20, &[4]);
        let s = Scheduler::new(&topo).unwrap();
        let dirs = [UserDirective { user: 0, priority: 0, packets: 4 }];
        let plan = s.allocate(&dirs, &ch, &bufs, 2);
        // enumerate: best-first 30 + 28 + 25 = 83 >= 80, 30 + 28 < 80
        let got: Vec<_> = plan.allocation.subcarriers_of(0).collect();
        assert_eq!(got, vec![1, 2, 4]);
        assert!((plan.planned_bits[0] - 83.0).abs() < 1e-6);
        // request capped at what is buffered
        let dirs = [UserDirective { user: 0, priority: 0, packets: 1 }];
        let got: Vec<_> = s.allocate(&dirs, &ch, &bufs, 2).allocation.subcarriers_of(0).collect();
        assert_eq!(got, vec![1]);
    }

    #[test]
    fn priority_order_decides_who_is_served() {
        let topo = flat_topology(1, 2, 4, 1.0);
        // every subcarrier carries 21 bits for both users
        let ch = ChannelRealization::from_fn(4, 1, 2, 1, |_, _, _, _| {
            Complex64::new((2f64.powi(21) - 1.0).sqrt(), 0.0)
        });
        let bufs = buffers(&topo, 20, &[3, 3]);
        let s = Scheduler::new(&topo).unwrap();
        let dirs = [
            UserDirective { user: 0, priority: 1, packets: 3 },
            UserDirective { user: 1, priority: 0, packets: 3 },
        ];
        let plan = s.allocate(&dirs, &ch, &bufs, 2);
        assert_eq!(plan.allocation.subcarriers_of(1).count(), 3);
        assert_eq!(plan.allocation.subcarriers_of(0).count(), 1);
        assert!(plan.allocation.validate(&topo).is_ok());
    }

    #[test]
    fn ties_break_on_head_of_line_age_then_id() {
        let topo = flat_topology(1, 2, 1, 1.0);
        let ch = ChannelRealization::from_fn(1, 1, 2, 1, |_, _, _, _| Complex64::new(1e3, 0.0));
        let mut bufs = buffers(&topo, 10, &[0, 0]);
        bufs[0].enqueue(3, 1);
        bufs[1].enqueue(2, 1);
        let s = Scheduler::new(&topo).unwrap();
        let dirs = [
            UserDirective { user: 0, priority: 0, packets: 1 },
            UserDirective { user: 1, priority: 0, packets: 1 },
        ];
        let plan = s.allocate(&dirs, &ch, &bufs, 5);
        assert!(plan.allocation.is_scheduled(1, 0));
        bufs[1] = buffers(&topo, 10, &[0, 0]).remove(1);
        bufs[1].enqueue(3, 1);
        let plan = s.allocate(&dirs, &ch, &bufs, 5);
        assert!(plan.allocation.is_scheduled(0, 0));
    }

    /// Each subcarrier carries 50 bits and packets are 40 bits, so one
    /// subcarrier covers one packet and `F` is the packet capacity per slot.
    fn rr_setup(nf: usize, counts: &[u32]) -> (Scheduler, ChannelRealization, Vec<UserBuffer>) {
        let topo = flat_topology(1, counts.len(), nf, 1.0);
        let ch = ChannelRealization::from_fn(nf, 1, counts.len(), 1, |_, _, _, _| {
            Complex64::new((2f64.powi(50) - 1.0).sqrt(), 0.0)
        });
        let bufs = buffers(&topo, 40, counts);
        (Scheduler::new(&topo).unwrap(), ch, bufs)
    }

    #[test]
    fn round_robin_empty_buffers() {
        let (s, ch, bufs) = rr_setup(4, &[0, 0]);
        let mut st = RoundRobinState { cursor: vec![1] };
        let plan = s.round_robin_edf(&mut st, &ch, &bufs, 2);
        assert!(plan.allocation.is_empty());
        assert_eq!(st.cursor, vec![1]);
    }

    #[test]
    fn round_robin_one_packet_each() {
        let (s, ch, bufs) = rr_setup(2, &[1, 1]);
        let mut st = RoundRobinState::new(1);
        let plan = s.round_robin_edf(&mut st, &ch, &bufs, 2);
        assert_eq!(plan.allocation.subcarriers_of(0).count(), 1);
        assert_eq!(plan.allocation.subcarriers_of(1).count(), 1);
    }

    #[test]
    fn round_robin_one_packet_per_visit() {
        let (s, ch, bufs) = rr_setup(3, &[2, 2]);
        let mut st = RoundRobinState::new(1);
        let plan = s.round_robin_edf(&mut st, &ch, &bufs, 2);
        // A, B, then A again
        assert_eq!(plan.allocation.subcarriers_of(0).count(), 2);
        assert_eq!(plan.allocation.subcarriers_of(1).count(), 1);
        assert_eq!(st.cursor, vec![1]);
        // next slot starts from B
        let plan = s.round_robin_edf(&mut st, &ch, &bufs, 2);
        assert_eq!(plan.allocation.subcarriers_of(1).count(), 2);
        assert_eq!(plan.allocation.subcarriers_of(0).count(), 1);
    }

    #[test]
    fn round_robin_visits_every_backlogged_user() {
        // capacity of one packet per slot, three backlogged users
        let (s, ch, bufs) = rr_setup(1, &[4, 4, 4]);
        let mut st = RoundRobinState::new(1);
        let mut seen = [false; 3];
        for _ in 0..3 {
            let plan = s.round_robin_edf(&mut st, &ch, &bufs, 2);
            for (u, hit) in seen.iter_mut().enumerate() {
                *hit |= plan.allocation.subcarriers_of(u).count() > 0;
            }
        }
        assert_eq!(seen, [true; 3]);
    }

    #[test]
    fn interference_free_rate_properties() {
        let topo = TopologyConfig {
            num_bs: 1,
            num_subcarriers: 8,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ch = draw_channel(&topo, &Layout::draw(&topo, &mut rng), &mut rng);
        let s = Scheduler::new(&topo).unwrap();
        assert_eq!(s.interference_free_rate(&[], &ch, 0), 0.0);
        // single BS: equals the realized rate
        let mut alloc = Allocation::new(2, 8);
        for f in [0, 3, 5] {
            alloc.grant(0, f, mrt_beamformer(ch.vector(f, 0, 0), topo.subcarrier_power()).unwrap());
        }
        let gamma = compute_sinr(&alloc, &ch, &topo);
        let realized = achievable_rate_with(gamma.row(0).iter().copied(), s.penalty());
        let est = s.interference_free_rate(&[0, 3, 5], &ch, 0);
        assert!((realized - est).abs() <= 1e-9 * est);
    }

    #[test]
    fn estimate_bounds_realized_rate_under_interference() {
        let topo = TopologyConfig::default();
        let s = Scheduler::new(&topo).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let layout = Layout::draw(&topo, &mut rng);
            let ch = draw_channel(&topo, &layout, &mut rng);
            let dirs: Vec<_> = (0..6)
                .map(|user| UserDirective { user, priority: user % 2, packets: 5 })
                .collect();
            let bufs = buffers(&topo, 64, &[5; 6]);
            let plan = s.allocate(&dirs, &ch, &bufs, 2);
            let gamma = compute_sinr(&plan.allocation, &ch, &topo);
            for u in 0..6 {
                let scs: Vec<usize> = plan.allocation.subcarriers_of(u).collect();
                let realized = achievable_rate_with(
                    scs.iter().map(|&f| gamma[[u, f]]),
                    s.penalty(),
                );
                assert!(realized <= s.interference_free_rate(&scs, &ch, u) + 1e-9);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn allocators_respect_constraints(seed in any::<u64>(), counts in proptest::collection::vec(0u32..8, 6), g in 20u64..200) {
            let topo = TopologyConfig::default();
            let s = Scheduler::new(&topo).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ch = draw_channel(&topo, &Layout::draw(&topo, &mut rng), &mut rng);
            let bufs = buffers(&topo, g, &counts);
            let dirs: Vec<_> = (0..6)
                .map(|user| UserDirective { user, priority: (seed as usize >> user) % 4, packets: counts[user] % 6 })
                .collect();
            let plan = s.allocate(&dirs, &ch, &bufs, 2);
            prop_assert!(plan.allocation.validate(&topo).is_ok());
            let again = s.allocate(&dirs, &ch, &bufs, 2);
            prop_assert_eq!(&plan, &again);
            let mut st = RoundRobinState::new(3);
            let rr = s.round_robin_edf(&mut st, &ch, &bufs, 2);
            prop_assert!(rr.allocation.validate(&topo).is_ok());
        }

        #[test]
        fn raising_priority_never_reduces_coverage(seed in any::<u64>(), who in 0usize..6) {
            let topo = TopologyConfig::default();
            let s = Scheduler::new(&topo).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ch = draw_channel(&topo, &Layout::draw(&topo, &mut rng), &mut rng);
            let bufs = buffers(&topo, 200, &[7; 6]);
            let mut dirs: Vec<_> = (0..6)
                .map(|user| UserDirective { user, priority: 1 + user % 3, packets: 5 })
                .collect();
            let target = 5.0 * 200.0;
            let low = s.allocate(&dirs, &ch, &bufs, 2).planned_bits[who].min(target);
            dirs[who].priority = 0;
            let high = s.allocate(&dirs, &ch, &bufs, 2).planned_bits[who].min(target);
            prop_assert!(high >= low - 1e-9);
        }
    }
}
