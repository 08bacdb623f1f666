//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Property criteria (1-8, 11) fail the run when violated. The two
//! training-trend criteria (9, 10) always print their measured numbers and
//! verdict; they fail the run only with `LGQP_ACCEPTANCE_STRICT=1`.

use std::fs;
use std::process::ExitCode;
use std::time::Instant;

use lgqp::config::ExperimentConfig;
use lgqp::env::{Decision, Env, Policy};
use lgqp::experiment::{self, EvalRow};
use lgqp::lyapunov::update_virtual_queue;
use lgqp::qfunc::{q, q_inverse};
use lgqp::qmix::nn::Parameters;
use lgqp::qmix::{MixingNetwork, OptimizerKind, Qmix, TrainerConfig, Transition};
use lgqp::traffic::{UserBuffer, UserTraffic};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

struct Verdict {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
    hard: bool,
}

fn traffic(deadline: u32, packet_bits: u64) -> UserTraffic {
    UserTraffic {
        packet_bits,
        arrival_rate: 3.0,
        violation_bound: 0.01,
        deadline,
    }
}

/// Delay of every packet, by direct search for the first slot whose
/// cumulative service covers the packet's last bit.
fn oracle_delays(arrivals: &[u32], budgets: &[u64], g: u64) -> Vec<u32> {
    let n = arrivals.len();
    // served[t]: bits drained in slot t; only bits that arrived before t count
    let mut arrived_before = 0u64;
    let mut served_total = 0u64;
    let mut cum_served = vec![0u64; n + 1];
    for t in 1..=n {
        let take = budgets[t - 1].min(arrived_before - served_total);
        served_total += take;
        cum_served[t] = served_total;
        arrived_before += u64::from(arrivals[t - 1]) * g;
    }
    let mut delays = Vec::new();
    let mut end = 0u64;
    for (i, &a) in arrivals.iter().enumerate() {
        let slot = (i + 1) as u32;
        for _ in 0..a {
            end += g;
            if let Some(done) = (1..=n).find(|&s| cum_served[s] >= end) {
                delays.push(done as u32 - slot);
            }
        }
    }
    delays
}

fn criterion_1() -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let pois = Poisson::new(3.0).unwrap();
    let g = 40;
    let (mut mismatches, mut packets) = (0usize, 0usize);
    for _ in 0..1000 {
        let arrivals: Vec<u32> = (0..50).map(|_| pois.sample(&mut rng) as u32).collect();
        let budgets: Vec<u64> = (0..50).map(|_| rng.random_range(0..=200)).collect();
        let mut buf = UserBuffer::new(0, traffic(u32::MAX, g), true);
        let mut got = Vec::new();
        for t in 1..=50u32 {
            let out = buf.serve(budgets[t as usize - 1], t);
            got.extend(out.completions.iter().map(|c| c.delay));
            buf.expire(t);
            buf.enqueue(t, arrivals[t as usize - 1]);
        }
        let want = oracle_delays(&arrivals, &budgets, g);
        packets += want.len();
        if got != want {
            mismatches += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Verdict {
        id: 1,
        name: "delay oracle equivalence",
        pass: mismatches == 0 && secs < 10.0,
        detail: format!("{mismatches} mismatching traces of 1000 ({packets} packets), {secs:.2} s"),
        hard: true,
    }
}

fn criterion_2() -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let pois = Poisson::new(3.0).unwrap();
    let mut mismatches = 0usize;
    for _ in 0..1000 {
        let g: u64 = rng.random_range(1..=100);
        let mut buf = UserBuffer::new(0, traffic(u32::MAX, g), false);
        let mut z = 0u64;
        let mut ok = true;
        for t in 1..=50u32 {
            let psi: u64 = rng.random_range(0..=300);
            let a = pois.sample(&mut rng) as u32;
            buf.serve(psi, t);
            buf.expire(t);
            buf.enqueue(t, a);
            z = z.saturating_sub(psi) + u64::from(a) * g;
            ok &= buf.backlog_bits() == z;
        }
        if !ok {
            mismatches += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Verdict {
        id: 2,
        name: "queue recursion equivalence",
        pass: mismatches == 0 && secs < 10.0,
        detail: format!("{mismatches} mismatching traces of 1000, {secs:.2} s"),
        hard: true,
    }
}

fn criterion_3() -> Verdict {
    let cfg = ExperimentConfig::default();
    let topo = cfg.topology.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let (mut slots, mut bad) = (0u64, 0u64);
    let mut worst_power: f64 = 0.0;
    let mut env_validated = 0u64;
    for &g in &cfg.traffic.packet_sizes {
        for policy in [Policy::Lgqp, Policy::RrEdf] {
            let mut env = Env::new(cfg.sim_config(g, policy)).unwrap();
            let space = env.config().actions;
            for ep in 0..20 {
                env.reset(ep);
                for _ in 0..env.config().slots_per_episode {
                    let s = env.state();
                    let actions: Vec<usize> =
                        (0..env.num_agents()).map(|_| rng.random_range(0..space.size())).collect();
                    let plan = match policy {
                        Policy::RrEdf => {
                            let mut rr = s.round_robin.clone();
                            env.scheduler().round_robin_edf(&mut rr, &s.channel, &s.buffers, s.slot)
                        }
                        _ => env.scheduler().allocate(
                            &space.directives(&actions),
                            &s.channel,
                            &s.buffers,
                            s.slot,
                        ),
                    };
                    let a = &plan.allocation;
                    let mut ok = true;
                    for b in 0..topo.num_bs {
                        let mut power = 0.0;
                        for f in 0..topo.num_subcarriers {
                            let users: Vec<usize> =
                                topo.ues_of(b).filter(|&u| a.is_scheduled(u, f)).collect();
                            ok &= users.len() <= 1;
                            for u in users {
                                let w = a.beamformer(u, f).unwrap();
                                ok &= w.len() == topo.num_antennas;
                                power += w.iter().map(Complex64::norm_sqr).sum::<f64>();
                            }
                        }
                        worst_power = worst_power.max(power - topo.max_power);
                        ok &= power <= topo.max_power + 1e-9;
                    }
                    slots += 1;
                    bad += u64::from(!ok);
                    let decision = match policy {
                        Policy::RrEdf => Decision::RoundRobin,
                        _ => Decision::Actions(&actions),
                    };
                    if env.step(decision).is_err() {
                        bad += 1;
                    }
                }
            }
            env_validated += env.validated_slots();
        }
    }
    Verdict {
        id: 3,
        name: "constraint validator",
        pass: bad == 0 && env_validated == slots,
        detail: format!(
            "{} of {slots} slots feasible, {env_validated} validated in-loop, max power excess {worst_power:.3e} W",
            slots - bad
        ),
        hard: true,
    }
}

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let h = 1e-6;
    let mut worst = f64::INFINITY;
    for _ in 0..100 {
        let agents = rng.random_range(2..=6);
        let state_dim = rng.random_range(1..=12);
        let mixer = MixingNetwork::init(state_dim, agents, rng.random_range(2..=16), &mut rng);
        let state: Vec<f64> = (0..state_dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let qv: Vec<f64> = (0..agents).map(|_| rng.random_range(-5.0..5.0)).collect();
        for u in 0..agents {
            let mut up = qv.clone();
            up[u] += h;
            let mut down = qv.clone();
            down[u] -= h;
            let d = (mixer.mix(&up, &state).unwrap() - mixer.mix(&down, &state).unwrap()) / (2.0 * h);
            worst = worst.min(d);
        }
    }
    Verdict {
        id: 4,
        name: "mixing monotonicity",
        pass: worst >= -1e-9,
        detail: format!("min finite-difference slope {worst:.3e} over 100 triples"),
        hard: true,
    }
}

fn random_batch(rng: &mut ChaCha8Rng, agents: usize, obs_dim: usize, actions: usize, n: usize) -> Vec<Transition> {
    (0..n)
        .map(|i| Transition {
            obs: (0..agents * obs_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            actions: (0..agents).map(|_| rng.random_range(0..actions)).collect(),
            reward: rng.random_range(-2.0..2.0),
            next_obs: (0..agents * obs_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            terminal: i % 3 == 0,
        })
        .collect()
}

fn criterion_5() -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for shared in [false, true] {
        let cfg = TrainerConfig {
            hidden_units: 8,
            mixing_width: 8,
            shared_parameters: shared,
            ..Default::default()
        };
        let model = Qmix::new(2, 4, 6, &cfg, &mut rng);
        let batch = random_batch(&mut rng, 2, 4, 6, 8);
        let refs: Vec<&Transition> = batch.iter().collect();
        let analytic = model.td_loss(&refs).unwrap().grads.flatten();
        let base = model.online.flatten();
        let mut probe = model.clone();
        let h = 1e-6;
        for i in 0..base.len() {
            let mut v = base.clone();
            v[i] += h;
            probe.online.assign_flat(&v);
            let up = probe.td_loss(&refs).unwrap().loss;
            v[i] -= 2.0 * h;
            probe.online.assign_flat(&v);
            let down = probe.td_loss(&refs).unwrap().loss;
            let fd = (up - down) / (2.0 * h);
            let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-3);
            worst = worst.max(err);
            checked += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Verdict {
        id: 5,
        name: "TD-loss gradient check",
        pass: worst < 1e-4 && secs < 60.0,
        detail: format!("max relative error {worst:.2e} over {checked} parameters, {secs:.2} s"),
        hard: true,
    }
}

fn criterion_6() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut mismatches = 0;
    for _ in 0..50 {
        let cfg = TrainerConfig {
            hidden_units: 16,
            mixing_width: 8,
            ..Default::default()
        };
        let obs_dim = 5;
        let model = Qmix::new(2, obs_dim, 24, &cfg, &mut rng);
        let joint: Vec<f64> = (0..2 * obs_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let greedy = model.greedy_actions(&joint).unwrap();
        let q0 = model.online.q_values(0, &joint[..obs_dim]).unwrap();
        let q1 = model.online.q_values(1, &joint[obs_dim..]).unwrap();
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for (a0, &x0) in q0.iter().enumerate() {
            for (a1, &x1) in q1.iter().enumerate() {
                let v = model.online.mixer.mix(&[x0, x1], &joint).unwrap();
                if v > best.0 {
                    best = (v, a0, a1);
                }
            }
        }
        if greedy != [best.1, best.2] {
            mismatches += 1;
        }
    }
    Verdict {
        id: 6,
        name: "factorized argmax consistency",
        pass: mismatches == 0,
        detail: format!("{mismatches} mismatches of 50 instances"),
        hard: true,
    }
}

fn criterion_7() -> Verdict {
    let mut worst: f64 = 0.0;
    for e in [1e-2, 1e-5, 1e-9] {
        let x = q_inverse(e).unwrap();
        worst = worst.max((q(x) - e).abs() / e);
    }
    let mid = q_inverse(0.5).unwrap().abs();
    Verdict {
        id: 7,
        name: "inverse Q-function accuracy",
        pass: worst < 1e-6 && mid <= 1e-10,
        detail: format!("max relative error {worst:.2e}, |q_inverse(0.5)| = {mid:.1e}"),
        hard: true,
    }
}

fn criterion_8() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let pois = Poisson::new(3.0).unwrap();
    let mut breaches = 0;
    let mut min_slack = f64::INFINITY;
    for _ in 0..1000 {
        let eta = rng.random_range(0.0..0.5);
        let (mut h, mut sum) = (0.0, 0.0);
        for _ in 0..200 {
            let a = pois.sample(&mut rng) as u32;
            let w = rng.random_range(0..=a + 1);
            h = update_virtual_queue(h, w, a, eta);
            sum += f64::from(w) - eta * f64::from(a);
            min_slack = min_slack.min(h - sum);
            if sum > h + 1e-9 {
                breaches += 1;
            }
        }
    }
    Verdict {
        id: 8,
        name: "virtual-queue telescoping bound",
        pass: breaches == 0,
        detail: format!("{breaches} breaches over 1000 traces x 200 slots, min slack {min_slack:.3e}"),
        hard: true,
    }
}

/// Desk-scale protocol shared by the trend criteria.
fn desk_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.trainer.episodes = 300;
    cfg.trainer.optimizer = OptimizerKind::Adam;
    cfg.trainer.learning_rate = 3e-3;
    cfg.trainer.batch_size = 128;
    cfg.trainer.train_every = 10;
    cfg.trainer.target_sync_steps = 200;
    cfg.trainer.epsilon_decay_steps = 4000;
    cfg.run.seeds = vec![0, 1, 2];
    cfg.run.eval_episodes = 100;
    cfg
}

fn desk_rows(cfg: &ExperimentConfig, g: u64) -> (Vec<EvalRow>, Vec<EvalRow>) {
    let mut learned = Vec::new();
    let mut rr = Vec::new();
    for &seed in &cfg.run.seeds {
        let model = experiment::train(cfg, Policy::Lgqp, g, seed, None).unwrap().model;
        learned.push(experiment::evaluate(cfg, Policy::Lgqp, g, seed, Some(&model)).unwrap().row);
        rr.push(experiment::evaluate(cfg, Policy::RrEdf, g, seed, None).unwrap().row);
    }
    (learned, rr)
}

fn mean(rows: &[EvalRow], f: impl Fn(&EvalRow) -> f64) -> f64 {
    rows.iter().map(f).sum::<f64>() / rows.len() as f64
}

fn list(rows: &[EvalRow], f: impl Fn(&EvalRow) -> f64) -> String {
    rows.iter().map(|r| format!("{:.3}", f(r))).collect::<Vec<_>>().join("/")
}

fn criterion_9(cfg: &ExperimentConfig) -> Verdict {
    let t0 = Instant::now();
    let (learned, rr) = desk_rows(cfg, 28);
    let zero_seeds = learned.iter().filter(|r| r.violations == 0).count();
    let rr_zero = rr.iter().all(|r| r.violations == 0);
    let secs = t0.elapsed().as_secs_f64();
    Verdict {
        id: 9,
        name: "low-load trend (G=28)",
        pass: 3 * zero_seeds >= 2 * learned.len() && rr_zero && secs < 1800.0,
        detail: format!(
            "lgqp violation % per seed {}, zero in {zero_seeds}/3; rr_edf {}; {secs:.0} s",
            list(&learned, |r| r.violation_pct),
            list(&rr, |r| r.violation_pct)
        ),
        hard: false,
    }
}

fn criterion_10(cfg: &ExperimentConfig) -> Verdict {
    let t0 = Instant::now();
    let (learned, rr) = desk_rows(cfg, 40);
    let (lv, rv) = (mean(&learned, |r| r.violation_pct), mean(&rr, |r| r.violation_pct));
    let (lj, rj) = (mean(&learned, |r| r.jitter), mean(&rr, |r| r.jitter));
    let low_jitter = learned.iter().filter(|r| r.jitter < 0.8).count();
    let secs = t0.elapsed().as_secs_f64();
    Verdict {
        id: 10,
        name: "mid-load dominance trend (G=40)",
        pass: lv <= rv && lj <= rj && 3 * low_jitter >= 2 * learned.len() && secs < 2700.0,
        detail: format!(
            "violation % lgqp {lv:.3} ({}) vs rr_edf {rv:.3} ({}); jitter lgqp {lj:.3} ({}) vs rr_edf {rj:.3}; \
             lgqp jitter < 0.8 in {low_jitter}/3; {secs:.0} s",
            list(&learned, |r| r.violation_pct),
            list(&rr, |r| r.violation_pct),
            list(&learned, |r| r.jitter)
        ),
        hard: false,
    }
}

fn criterion_11() -> Verdict {
    let mut cfg = ExperimentConfig::default();
    cfg.traffic.packet_sizes = vec![28, 40];
    cfg.trainer.episodes = 3;
    cfg.trainer.batch_size = 32;
    cfg.trainer.hidden_units = 16;
    cfg.trainer.mixing_width = 8;
    cfg.run.seeds = vec![0, 1];
    cfg.run.eval_episodes = 3;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        experiment::sweep(&cfg, Some(d.path())).unwrap();
    }
    let mut files: Vec<_> = fs::read_dir(dirs[0].path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .filter(|n| n.to_string_lossy().ends_with(".csv"))
        .collect();
    files.sort();
    let differing: Vec<String> = files
        .iter()
        .filter(|n| fs::read(dirs[0].path().join(n)).ok() != fs::read(dirs[1].path().join(n)).ok())
        .map(|n| n.to_string_lossy().into_owned())
        .collect();
    Verdict {
        id: 11,
        name: "determinism",
        pass: differing.is_empty() && !files.is_empty(),
        detail: format!("{} CSV files compared, {} differ {:?}", files.len(), differing.len(), differing),
        hard: true,
    }
}

fn main() -> ExitCode {
    // libtest flags such as --list or a name filter
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let strict = std::env::var("LGQP_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let desk = desk_config();
    let checks: Vec<Box<dyn Fn() -> Verdict>> = vec![
        Box::new(criterion_1),
        Box::new(criterion_2),
        Box::new(criterion_3),
        Box::new(criterion_4),
        Box::new(criterion_5),
        Box::new(criterion_6),
        Box::new(criterion_7),
        Box::new(criterion_8),
        Box::new(|| criterion_9(&desk)),
        Box::new(|| criterion_10(&desk)),
        Box::new(criterion_11),
    ];
    let mut failed = false;
    for check in checks {
        let v = check();
        println!(
            "{} criterion {:>2} {}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.id,
            v.name,
            v.detail
        );
        failed |= !v.pass && (v.hard || strict);
    }
    if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
