//! Training, evaluation and sweeps over packet sizes, with CSV output.
//!
//! Every random draw derives from the run seed: training episodes, the
//! exploration and replay streams, network initialisation and the
//! evaluation episodes. Evaluation episodes depend only on the seed, so all
//! policies are compared on the same traffic and channel draws.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::RngCore;

use crate::config::ExperimentConfig;
use crate::env::{run_episode, stream, substream, Controller, Env, Learner, Policy};
use crate::qmix::{Checkpoint, Qmix};
use crate::traffic::{DelayRecord, EventLog};
use crate::{Error, Result};

/// One row of the training curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub episode: usize,
    pub epsilon: f64,
    pub updates: usize,
    /// Mean TD loss over the episode's updates, `NaN` when none ran.
    pub mean_loss: f64,
    pub episode_reward: f64,
    pub violation_pct: f64,
    pub jitter: f64,
}

impl CurveRow {
    pub const CSV_HEADER: &'static str =
        "episode,epsilon,updates,mean_loss,episode_reward,violation_pct,jitter_slots";
}

pub fn write_curve<W: Write>(rows: &[CurveRow], mut w: W) -> Result<()> {
    writeln!(w, "{}", CurveRow::CSV_HEADER)?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.episode, r.epsilon, r.updates, r.mean_loss, r.episode_reward, r.violation_pct, r.jitter
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Qmix,
    pub curve: Vec<CurveRow>,
}

/// Conventional file names inside an output directory.
pub fn checkpoint_path(out: &Path, policy: Policy, packet_bits: u64, seed: u64) -> PathBuf {
    out.join(format!("checkpoint_{policy}_g{packet_bits}_s{seed}.json"))
}

pub fn curve_path(out: &Path, policy: Policy, packet_bits: u64, seed: u64) -> PathBuf {
    out.join(format!("curve_{policy}_g{packet_bits}_s{seed}.csv"))
}

/// Trains a learned policy for `trainer.episodes` episodes.
///
/// With `out` set, writes the checkpoint and curve there; if training hits a
/// non-finite value, the checkpoint of the last completed episode is written
/// before the error is returned.
pub fn train(
    cfg: &ExperimentConfig,
    policy: Policy,
    packet_bits: u64,
    seed: u64,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    if !policy.is_learned() {
        return Err(Error::Domain(format!("policy `{policy}` has nothing to train")));
    }
    let sim = cfg.sim_config(packet_bits, policy);
    let obs_dim = sim.obs_dim();
    let actions = sim.actions.size();
    let mut env = Env::new(sim)?;
    let mut learner = Learner::new(env.num_agents(), obs_dim, actions, &cfg.trainer, seed);
    let mut episode_seeds = substream(seed, stream::EPISODES);
    let mut curve = Vec::with_capacity(cfg.trainer.episodes);
    let mut last_good = learner.model.clone();

    for episode in 0..cfg.trainer.episodes {
        let epsilon = learner.epsilon();
        let ep = match run_episode(&mut env, episode_seeds.next_u64(), Controller::Learn(&mut learner)) {
            Ok(ep) => ep,
            Err(e) => {
                if let Some(dir) = out {
                    fs::create_dir_all(dir)?;
                    Checkpoint::from_model(&last_good)
                        .save(&checkpoint_path(dir, policy, packet_bits, seed))?;
                }
                return Err(e);
            }
        };
        let updates = ep.losses.len();
        curve.push(CurveRow {
            episode,
            epsilon,
            updates,
            mean_loss: if updates == 0 {
                f64::NAN
            } else {
                ep.losses.iter().sum::<f64>() / updates as f64
            },
            episode_reward: ep.total_reward,
            violation_pct: 100.0 * ep.metrics.mean_violation_ratio(),
            jitter: ep.metrics.jitter,
        });
        last_good = learner.model.clone();
    }

    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        Checkpoint::from_model(&learner.model).save(&checkpoint_path(dir, policy, packet_bits, seed))?;
        write_curve(&curve, BufWriter::new(File::create(curve_path(dir, policy, packet_bits, seed))?))?;
    }
    Ok(TrainOutcome {
        model: learner.model,
        curve,
    })
}

/// Aggregate of the evaluation episodes of one (policy, packet size, seed).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub policy: Policy,
    pub packet_bits: u64,
    pub seed: u64,
    /// Per-user violations over arrivals across all episodes, in percent.
    pub user_violation_pct: Vec<f64>,
    /// Mean of `user_violation_pct`.
    pub violation_pct: f64,
    /// Mean over episodes of the per-episode jitter, in slots.
    pub jitter: f64,
    /// Mean delay of on-time deliveries, in slots.
    pub mean_delay: f64,
    pub delivered: u64,
    pub arrivals: u64,
    pub violations: u64,
}

impl EvalRow {
    pub fn csv_header(num_users: usize) -> String {
        let mut h = String::from(
            "policy,packet_bits,seed,violation_pct,jitter_slots,mean_delay_slots,delivered_packets,arrival_packets,violation_packets",
        );
        for u in 0..num_users {
            h.push_str(&format!(",user{u}_violation_pct"));
        }
        h
    }

    pub fn write_row<W: Write>(&self, mut w: W) -> Result<()> {
        write!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            self.policy,
            self.packet_bits,
            self.seed,
            self.violation_pct,
            self.jitter,
            self.mean_delay,
            self.delivered,
            self.arrivals,
            self.violations
        )?;
        for v in &self.user_violation_pct {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
        Ok(())
    }
}

pub fn write_eval_rows<W: Write>(rows: &[EvalRow], num_users: usize, mut w: W) -> Result<()> {
    writeln!(w, "{}", EvalRow::csv_header(num_users))?;
    for r in rows {
        r.write_row(&mut w)?;
    }
    Ok(())
}

/// Evaluation result plus the concatenated event log of all episodes.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub row: EvalRow,
    pub log: EventLog,
}

/// Runs `run.eval_episodes` episodes with a frozen policy; `model` is
/// required for learned policies and ignored for the baseline.
pub fn evaluate(
    cfg: &ExperimentConfig,
    policy: Policy,
    packet_bits: u64,
    seed: u64,
    model: Option<&Qmix>,
) -> Result<Evaluation> {
    let sim = cfg.sim_config(packet_bits, policy);
    let nu = sim.users.len();
    if let Some(m) = model {
        if m.num_agents() != nu || m.obs_dim() != sim.obs_dim() {
            return Err(Error::Checkpoint(format!(
                "model expects {} agents with {} features, scenario has {} and {}",
                m.num_agents(),
                m.obs_dim(),
                nu,
                sim.obs_dim()
            )));
        }
    }
    let model = match (policy.is_learned(), model) {
        (true, None) => {
            return Err(Error::Checkpoint(format!("policy `{policy}` needs a trained model")));
        }
        (true, m) => m,
        (false, _) => None,
    };
    let mut env = Env::new(sim)?;
    let mut seeds = substream(seed, stream::EVAL);
    let mut pooled = DelayRecord::new(nu);
    let mut log = EventLog::default();
    let mut jitter_sum = 0.0;
    let episodes = cfg.run.eval_episodes;
    for _ in 0..episodes {
        let controller = match model {
            Some(m) => Controller::Greedy(m),
            None => Controller::RoundRobin,
        };
        let ep = run_episode(&mut env, seeds.next_u64(), controller)?;
        jitter_sum += ep.metrics.jitter;
        for (acc, u) in pooled.users.iter_mut().zip(&env.state().records.users) {
            acc.delays.extend_from_slice(&u.delays);
            acc.violations += u.violations;
            acc.arrivals += u.arrivals;
        }
        log.events.extend(ep.log.events);
    }
    let user_violation_pct: Vec<f64> = crate::traffic::violation_ratio(&pooled)
        .into_iter()
        .map(|r| 100.0 * r)
        .collect();
    let delivered = pooled.delivered();
    let delay_sum: u64 = pooled
        .users
        .iter()
        .flat_map(|u| &u.delays)
        .map(|&d| u64::from(d))
        .sum();
    Ok(Evaluation {
        row: EvalRow {
            policy,
            packet_bits,
            seed,
            violation_pct: user_violation_pct.iter().sum::<f64>() / nu as f64,
            user_violation_pct,
            jitter: if episodes == 0 { 0.0 } else { jitter_sum / episodes as f64 },
            mean_delay: if delivered == 0 {
                0.0
            } else {
                delay_sum as f64 / delivered as f64
            },
            delivered,
            arrivals: pooled.users.iter().map(|u| u.arrivals).sum(),
            violations: pooled.users.iter().map(|u| u.violations).sum(),
        },
        log,
    })
}

/// One point of the plot tables: mean and population std over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub policy: Policy,
    pub packet_bits: u64,
    pub seeds: usize,
    pub violation_pct_mean: f64,
    pub violation_pct_std: f64,
    pub jitter_mean: f64,
    pub jitter_std: f64,
}

impl SummaryRow {
    pub const CSV_HEADER: &'static str =
        "policy,packet_bits,seeds,violation_pct_mean,violation_pct_std,jitter_slots_mean,jitter_slots_std";
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Groups sorted rows by (policy, packet size).
pub fn summarize(rows: &[EvalRow]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for group in rows.chunk_by(|a, b| a.policy == b.policy && a.packet_bits == b.packet_bits) {
        let v: Vec<f64> = group.iter().map(|r| r.violation_pct).collect();
        let j: Vec<f64> = group.iter().map(|r| r.jitter).collect();
        let (vm, vs) = mean_std(&v);
        let (jm, js) = mean_std(&j);
        out.push(SummaryRow {
            policy: group[0].policy,
            packet_bits: group[0].packet_bits,
            seeds: group.len(),
            violation_pct_mean: vm,
            violation_pct_std: vs,
            jitter_mean: jm,
            jitter_std: js,
        });
    }
    out
}

pub fn write_summary<W: Write>(rows: &[SummaryRow], mut w: W) -> Result<()> {
    writeln!(w, "{}", SummaryRow::CSV_HEADER)?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.policy,
            r.packet_bits,
            r.seeds,
            r.violation_pct_mean,
            r.violation_pct_std,
            r.jitter_mean,
            r.jitter_std
        )?;
    }
    Ok(())
}

/// Trains (where needed) and evaluates every configured policy at every
/// packet size and seed. Rows come back sorted by (policy, packet size,
/// seed). With `out` set, writes `sweep.csv`, `sweep_summary.csv` and the
/// training artifacts.
pub fn sweep(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<EvalRow>> {
    let mut policies = cfg.run.policies.clone();
    policies.sort();
    policies.dedup();
    let mut sizes = cfg.traffic.packet_sizes.clone();
    sizes.sort_unstable();
    sizes.dedup();
    let mut seeds = cfg.run.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();

    let mut rows = Vec::new();
    for &policy in &policies {
        for &g in &sizes {
            for &seed in &seeds {
                let model = if policy.is_learned() {
                    Some(train(cfg, policy, g, seed, out)?.model)
                } else {
                    None
                };
                rows.push(evaluate(cfg, policy, g, seed, model.as_ref())?.row);
            }
        }
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let nu = cfg.num_users();
        write_eval_rows(&rows, nu, BufWriter::new(File::create(dir.join("sweep.csv"))?))?;
        write_summary(
            &summarize(&rows),
            BufWriter::new(File::create(dir.join("sweep_summary.csv"))?),
        )?;
    }
    Ok(rows)
}
