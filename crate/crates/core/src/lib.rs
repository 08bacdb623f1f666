//! Delay- and jitter-aware downlink scheduling for multi-cell OFDMA
//! networks.
//!
//! Each user runs a small Q-network that picks a scheduling priority and a
//! packet budget every slot. A monotone mixing network combines the agents
//! during training. Long-run delay-violation targets become per-user virtual
//! queues, and a drift-plus-penalty reward trades them off against jitter.
//! A greedy subcarrier allocator turns the agents' choices into a feasible
//! assignment.
//!
//! The crate also ships a round-robin earliest-deadline-first baseline and an
//! experiment runner that writes CSV results.

pub mod channel;
pub mod config;
pub mod env;
mod error;
pub mod experiment;
pub mod lyapunov;
pub mod qfunc;
pub mod qmix;
pub mod scheduler;
pub mod traffic;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/channel.md")]
    mod channel {}
    #[doc = include_str!("../../../book/src/traffic.md")]
    mod traffic {}
    #[doc = include_str!("../../../book/src/lyapunov.md")]
    mod lyapunov {}
    #[doc = include_str!("../../../book/src/scheduler.md")]
    mod scheduler {}
    #[doc = include_str!("../../../book/src/qmix.md")]
    mod qmix {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
