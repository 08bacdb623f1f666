//! Multi-cell downlink channel: path loss, Rayleigh small-scale fading, MRT
//! precoding, co-channel SINR and the finite-blocklength achievable rate.

use std::f64::consts::{LOG2_E, PI};

use ndarray::Array2;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::qfunc::q_inverse;
use crate::{Error, Result};

/// Slack allowed on the per-BS power budget.
pub const POWER_TOLERANCE: f64 = 1e-9;

/// Static radio parameters of the cellular layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologyConfig {
    pub num_bs: usize,
    pub ues_per_bs: usize,
    pub num_subcarriers: usize,
    pub num_antennas: usize,
    /// Cell radius in meters.
    pub cell_radius: f64,
    /// Path-loss reference distance in meters.
    pub ref_distance: f64,
    pub path_loss_exp: f64,
    /// Noise power per subcarrier in dBm.
    pub noise_power_dbm: f64,
    /// Maximum transmit power per BS in watts.
    pub max_power: f64,
    /// Target block error rate, shared by all UEs.
    pub block_error_rate: f64,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        Self {
            num_bs: 3,
            ues_per_bs: 2,
            num_subcarriers: 32,
            num_antennas: 16,
            cell_radius: 40.0,
            ref_distance: 1.0,
            path_loss_exp: 2.0,
            noise_power_dbm: -129.0,
            max_power: 10.0,
            block_error_rate: 1e-9,
        }
    }
}

impl TopologyConfig {
    pub fn num_ues(&self) -> usize {
        self.num_bs * self.ues_per_bs
    }

    /// Serving BS of UE `u`; UEs are numbered cell by cell.
    pub fn serving_bs(&self, u: usize) -> usize {
        u / self.ues_per_bs
    }

    /// UEs attached to BS `b`.
    pub fn ues_of(&self, b: usize) -> std::ops::Range<usize> {
        b * self.ues_per_bs..(b + 1) * self.ues_per_bs
    }

    /// Noise power per subcarrier in watts.
    pub fn noise_power(&self) -> f64 {
        10f64.powf((self.noise_power_dbm - 30.0) / 10.0)
    }

    /// Fixed power of every scheduled (UE, subcarrier) pair: `P_max / F`.
    pub fn subcarrier_power(&self) -> f64 {
        self.max_power / self.num_subcarriers as f64
    }

    pub fn validate(&self) -> Result<()> {
        let p = |k: &str| format!("topology.{k}");
        for (k, v) in [
            ("num_bs", self.num_bs),
            ("ues_per_bs", self.ues_per_bs),
            ("num_subcarriers", self.num_subcarriers),
            ("num_antennas", self.num_antennas),
        ] {
            if v == 0 {
                return Err(Error::config(p(k), "must be at least 1"));
            }
        }
        if !(self.cell_radius >= 0.0) {
            return Err(Error::config(p("cell_radius"), "must be nonnegative"));
        }
        if !(self.ref_distance > 0.0) {
            return Err(Error::config(p("ref_distance"), "must be positive"));
        }
        if !(self.path_loss_exp >= 0.0) {
            return Err(Error::config(p("path_loss_exp"), "must be nonnegative"));
        }
        if !self.noise_power_dbm.is_finite() {
            return Err(Error::config(p("noise_power_dbm"), "must be finite"));
        }
        if !(self.max_power > 0.0) {
            return Err(Error::config(p("max_power"), "must be positive"));
        }
        if !(self.block_error_rate > 0.0 && self.block_error_rate < 0.5) {
            return Err(Error::config(
                p("block_error_rate"),
                "probability out of range (0, 0.5)",
            ));
        }
        Ok(())
    }
}

/// `(1 + d/d0)^(-alpha)`.
pub fn large_scale_gain(d: f64, cfg: &TopologyConfig) -> f64 {
    (1.0 + d / cfg.ref_distance).powf(-cfg.path_loss_exp)
}

/// BS and UE positions for one episode, with the derived large-scale gains.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub bs_positions: Vec<[f64; 2]>,
    pub ue_positions: Vec<[f64; 2]>,
    /// `beta[b * U + u]`.
    beta: Vec<f64>,
    num_ues: usize,
}

impl Layout {
    /// BS sites on a circle such that neighbouring sites are `2 * radius`
    /// apart (tangent cell disks); a single BS sits at the origin.
    pub fn bs_sites(cfg: &TopologyConfig) -> Vec<[f64; 2]> {
        let b = cfg.num_bs;
        if b == 1 {
            return vec![[0.0, 0.0]];
        }
        let ring = cfg.cell_radius / (PI / b as f64).sin();
        (0..b)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / b as f64;
                [ring * a.cos(), ring * a.sin()]
            })
            .collect()
    }

    /// Draws every UE uniformly in the disk of its serving cell.
    pub fn draw<R: Rng + ?Sized>(cfg: &TopologyConfig, rng: &mut R) -> Self {
        let bs = Self::bs_sites(cfg);
        let ues = (0..cfg.num_ues())
            .map(|u| {
                let c = bs[cfg.serving_bs(u)];
                let r = cfg.cell_radius * rng.random::<f64>().sqrt();
                let a = 2.0 * PI * rng.random::<f64>();
                [c[0] + r * a.cos(), c[1] + r * a.sin()]
            })
            .collect();
        Self::from_positions(cfg, bs, ues)
    }

    pub fn from_positions(
        cfg: &TopologyConfig,
        bs_positions: Vec<[f64; 2]>,
        ue_positions: Vec<[f64; 2]>,
    ) -> Self {
        let num_ues = ue_positions.len();
        let mut beta = Vec::with_capacity(bs_positions.len() * num_ues);
        for b in &bs_positions {
            for u in &ue_positions {
                let d = ((b[0] - u[0]).powi(2) + (b[1] - u[1]).powi(2)).sqrt();
                beta.push(large_scale_gain(d, cfg));
            }
        }
        Self {
            bs_positions,
            ue_positions,
            beta,
            num_ues,
        }
    }

    /// Layout given directly by the large-scale gains, `beta[b][u]`.
    pub fn from_gains(beta: Vec<Vec<f64>>) -> Self {
        let num_ues = beta.first().map_or(0, Vec::len);
        Self {
            bs_positions: Vec::new(),
            ue_positions: Vec::new(),
            beta: beta.into_iter().flatten().collect(),
            num_ues,
        }
    }

    pub fn gain(&self, b: usize, u: usize) -> f64 {
        self.beta[b * self.num_ues + u]
    }
}

/// Complex gains `h^m_{f,b,u}` for one slot, stored with the antenna index
/// innermost so that each `h_{f,b,u}` is a contiguous slice.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    num_subcarriers: usize,
    num_bs: usize,
    num_ues: usize,
    num_antennas: usize,
    gains: Vec<Complex64>,
}

impl ChannelRealization {
    pub fn from_fn(
        num_subcarriers: usize,
        num_bs: usize,
        num_ues: usize,
        num_antennas: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> Complex64,
    ) -> Self {
        let mut gains =
            Vec::with_capacity(num_subcarriers * num_bs * num_ues * num_antennas);
        for sc in 0..num_subcarriers {
            for b in 0..num_bs {
                for u in 0..num_ues {
                    for m in 0..num_antennas {
                        gains.push(f(sc, b, u, m));
                    }
                }
            }
        }
        Self {
            num_subcarriers,
            num_bs,
            num_ues,
            num_antennas,
            gains,
        }
    }

    fn offset(&self, f: usize, b: usize, u: usize) -> usize {
        ((f * self.num_bs + b) * self.num_ues + u) * self.num_antennas
    }

    /// `h_{f,b,u}` as an `M`-vector.
    pub fn vector(&self, f: usize, b: usize, u: usize) -> &[Complex64] {
        let o = self.offset(f, b, u);
        &self.gains[o..o + self.num_antennas]
    }

    pub fn norm_sqr(&self, f: usize, b: usize, u: usize) -> f64 {
        self.vector(f, b, u).iter().map(Complex64::norm_sqr).sum()
    }

    pub fn num_subcarriers(&self) -> usize {
        self.num_subcarriers
    }

    pub fn num_ues(&self) -> usize {
        self.num_ues
    }

    pub fn gains(&self) -> &[Complex64] {
        &self.gains
    }
}

/// Draws i.i.d. `CN(0, 1)` small-scale fading scaled by `sqrt(beta)`.
pub fn draw_channel<R: Rng + ?Sized>(
    cfg: &TopologyConfig,
    layout: &Layout,
    rng: &mut R,
) -> ChannelRealization {
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    ChannelRealization::from_fn(
        cfg.num_subcarriers,
        cfg.num_bs,
        cfg.num_ues(),
        cfg.num_antennas,
        |_, b, u, _| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(re, im) * (scale * layout.gain(b, u).sqrt())
        },
    )
}

/// Maximum ratio transmission: `w = sqrt(power) h / ||h||`.
pub fn mrt_beamformer(h: &[Complex64], power: f64) -> Result<Vec<Complex64>> {
    let norm = h.iter().map(Complex64::norm_sqr).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(Error::DegenerateChannel);
    }
    let s = power.max(0.0).sqrt() / norm;
    Ok(h.iter().map(|x| x * s).collect())
}

/// `|h^H w|^2`.
pub fn beam_gain(h: &[Complex64], w: &[Complex64]) -> f64 {
    h.iter()
        .zip(w)
        .map(|(h, w)| h.conj() * w)
        .sum::<Complex64>()
        .norm_sqr()
}

/// Subcarrier assignment and beamformers for one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    num_ues: usize,
    num_subcarriers: usize,
    beams: Vec<Option<Vec<Complex64>>>,
}

impl Allocation {
    pub fn new(num_ues: usize, num_subcarriers: usize) -> Self {
        Self {
            num_ues,
            num_subcarriers,
            beams: vec![None; num_ues * num_subcarriers],
        }
    }

    pub fn grant(&mut self, u: usize, f: usize, w: Vec<Complex64>) {
        self.beams[u * self.num_subcarriers + f] = Some(w);
    }

    /// `zeta_{u,f}`.
    pub fn is_scheduled(&self, u: usize, f: usize) -> bool {
        self.beams[u * self.num_subcarriers + f].is_some()
    }

    pub fn beamformer(&self, u: usize, f: usize) -> Option<&[Complex64]> {
        self.beams[u * self.num_subcarriers + f].as_deref()
    }

    pub fn subcarriers_of(&self, u: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_subcarriers).filter(move |&f| self.is_scheduled(u, f))
    }

    pub fn scheduled_on(&self, f: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_ues).filter(move |&u| self.is_scheduled(u, f))
    }

    pub fn num_ues(&self) -> usize {
        self.num_ues
    }

    pub fn num_subcarriers(&self) -> usize {
        self.num_subcarriers
    }

    pub fn num_grants(&self) -> usize {
        self.beams.iter().filter(|b| b.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.num_grants() == 0
    }

    /// Checks binary assignment, per-cell subcarrier exclusivity and the
    /// per-BS power budget. Returns a description of the first violation.
    pub fn validate(&self, cfg: &TopologyConfig) -> std::result::Result<(), String> {
        if self.num_ues != cfg.num_ues() || self.num_subcarriers != cfg.num_subcarriers {
            return Err("allocation shape does not match topology".into());
        }
        for b in 0..cfg.num_bs {
            let mut power = 0.0;
            for f in 0..self.num_subcarriers {
                let mut users = cfg.ues_of(b).filter(|&u| self.is_scheduled(u, f));
                if let (Some(a), Some(c)) = (users.next(), users.next()) {
                    return Err(format!(
                        "BS {b} schedules UEs {a} and {c} on subcarrier {f}"
                    ));
                }
                for u in cfg.ues_of(b) {
                    if let Some(w) = self.beamformer(u, f) {
                        if w.len() != cfg.num_antennas {
                            return Err(format!("beamformer of UE {u} has wrong length"));
                        }
                        power += w.iter().map(Complex64::norm_sqr).sum::<f64>();
                    }
                }
            }
            if !(power <= cfg.max_power + POWER_TOLERANCE) {
                return Err(format!(
                    "BS {b} transmits {power} W above budget {} W",
                    cfg.max_power
                ));
            }
        }
        Ok(())
    }
}

/// Per-(UE, subcarrier) SINR under the given allocation, with co-channel
/// interference from every other scheduled pair.
pub fn compute_sinr(
    alloc: &Allocation,
    ch: &ChannelRealization,
    cfg: &TopologyConfig,
) -> Array2<f64> {
    let noise = cfg.noise_power();
    let (nu, nf) = (alloc.num_ues(), alloc.num_subcarriers());
    let mut gamma = Array2::zeros((nu, nf));
    let mut active = Vec::with_capacity(nu);
    for f in 0..nf {
        active.clear();
        active.extend(alloc.scheduled_on(f));
        for &u in &active {
            let mut signal = 0.0;
            let mut interference = 0.0;
            for &v in &active {
                let w = alloc.beamformer(v, f).expect("scheduled pair has a beam");
                let g = beam_gain(ch.vector(f, cfg.serving_bs(v), u), w);
                if v == u {
                    signal = g;
                } else {
                    interference += g;
                }
            }
            gamma[[u, f]] = signal / (interference + noise);
        }
    }
    gamma
}

/// `Q^{-1}(eps)`, the multiplier of the channel-dispersion penalty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DispersionPenalty(pub f64);

impl DispersionPenalty {
    pub fn new(block_error_rate: f64) -> Result<Self> {
        q_inverse(block_error_rate).map(Self)
    }
}

/// Channel dispersion of one subcarrier, `(log2 e)^2 (1 - (1+gamma)^-2)`.
pub fn dispersion(gamma: f64) -> f64 {
    LOG2_E * LOG2_E * (1.0 - (1.0 + gamma).powi(-2))
}

/// Running sums of capacity and dispersion over a set of subcarriers.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RateAccumulator {
    capacity: f64,
    dispersion: f64,
}

impl RateAccumulator {
    pub fn add(&mut self, gamma: f64) {
        self.capacity += (1.0 + gamma).log2();
        self.dispersion += dispersion(gamma);
    }

    /// Finite-blocklength rate in bits, clamped at zero.
    pub fn rate(&self, penalty: DispersionPenalty) -> f64 {
        (self.capacity - penalty.0 * self.dispersion.sqrt()).max(0.0)
    }

    pub fn shannon(&self) -> f64 {
        self.capacity
    }
}

/// Achievable bits per slot over the given per-subcarrier SINRs.
pub fn achievable_rate_with<I>(gammas: I, penalty: DispersionPenalty) -> f64
where
    I: IntoIterator<Item = f64>,
{
    let mut acc = RateAccumulator::default();
    for g in gammas {
        acc.add(g);
    }
    acc.rate(penalty)
}

/// Like [`achievable_rate_with`], resolving the penalty from `eps` first.
pub fn achievable_rate<I>(gammas: I, eps: f64) -> Result<f64>
where
    I: IntoIterator<Item = f64>,
{
    Ok(achievable_rate_with(gammas, DispersionPenalty::new(eps)?))
}
