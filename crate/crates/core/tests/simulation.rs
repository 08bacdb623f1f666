use lgqp::config::ExperimentConfig;
use lgqp::env::{run_episode, Controller, Decision, Env, Policy};
use lgqp::qmix::{Checkpoint, Qmix, TrainerConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_env(g: u64, drop: bool) -> Env {
    let mut cfg = ExperimentConfig::default();
    cfg.traffic.drop_on_expiry = drop;
    Env::new(cfg.sim_config(g, Policy::Lgqp)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_slot_passes_the_validator(
        seed in 0u64..1000,
        g in prop::sample::select(vec![28u64, 40, 52, 64, 76]),
        actions in prop::collection::vec(prop::collection::vec(0usize..24, 6), 20),
    ) {
        let mut env = small_env(g, true);
        env.reset(seed);
        for a in &actions {
            env.step(Decision::Actions(a)).unwrap();
        }
        prop_assert_eq!(env.validated_slots(), actions.len() as u64);
    }

    #[test]
    fn counters_stay_consistent(
        seed in 0u64..1000,
        drop in any::<bool>(),
        actions in prop::collection::vec(prop::collection::vec(0usize..24, 6), 30),
    ) {
        let mut env = small_env(40, drop);
        env.reset(seed);
        for a in &actions {
            let out = env.step(Decision::Actions(a)).unwrap();
            prop_assert!(out.reward.is_finite());
            prop_assert!(out.info.jitter >= 0.0);
        }
        let s = env.state();
        let arrivals: u64 = s.records.users.iter().map(|u| u.arrivals).sum();
        let violations: u64 = s.records.users.iter().map(|u| u.violations).sum();
        prop_assert_eq!(arrivals, s.cumulative_arrivals);
        prop_assert_eq!(violations, s.cumulative_violations);
        prop_assert!(s.records.delivered() <= arrivals);
        prop_assert!(s.virtual_queue.values().iter().all(|&h| h >= 0.0));
        prop_assert_eq!(env.event_log().replay(env.num_agents()), s.records.clone());
    }
}

#[test]
fn round_robin_is_reproducible_per_seed() {
    let mut a = small_env(52, true);
    let mut b = small_env(52, true);
    let x = run_episode(&mut a, 9, Controller::RoundRobin).unwrap();
    let y = run_episode(&mut b, 9, Controller::RoundRobin).unwrap();
    assert_eq!(x.trace, y.trace);
    assert_eq!(x.metrics, y.metrics);
}

#[test]
fn greedy_controller_matches_checkpoint_reload() {
    let cfg = TrainerConfig {
        hidden_units: 16,
        mixing_width: 8,
        ..Default::default()
    };
    let mut env = small_env(40, true);
    let obs_dim = env.config().obs_dim();
    let model = Qmix::new(6, obs_dim, 24, &cfg, &mut ChaCha8Rng::seed_from_u64(2));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    Checkpoint::from_model(&model).save(&path).unwrap();
    let reloaded = Checkpoint::load(&path).unwrap().to_model().unwrap();

    let x = run_episode(&mut env, 4, Controller::Greedy(&model)).unwrap();
    let y = run_episode(&mut env, 4, Controller::Greedy(&reloaded)).unwrap();
    assert_eq!(x.trace, y.trace);
}

#[test]
fn rewards_recompute_from_the_event_log() {
    use lgqp::lyapunov::lgqp_reward;
    use lgqp::traffic::{population_std, PacketFate};

    let cfg = ExperimentConfig::default();
    for g in [40, 64] {
        let mut env = Env::new(cfg.sim_config(g, Policy::Lgqp)).unwrap();
        let ep = run_episode(&mut env, 21, Controller::RoundRobin).unwrap();
        for row in &ep.trace {
            let mut delays = vec![Vec::new(); 6];
            for e in &ep.log.events {
                if let PacketFate::Delivered { slot, delay } = e.fate {
                    if slot <= row.slot {
                        delays[e.user].push(delay);
                    }
                }
            }
            let jitter = delays.iter().map(|d| population_std(d)).sum::<f64>() / 6.0;
            assert!((jitter - row.jitter).abs() < 1e-9, "slot {}", row.slot);
            let r = lgqp_reward(row.drift, jitter, &cfg.reward);
            assert!((r - row.reward).abs() < 1e-9, "slot {}", row.slot);
        }
    }
}
