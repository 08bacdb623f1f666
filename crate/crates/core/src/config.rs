//! Experiment configuration in TOML, with `LGQP_*` environment overrides.
//!
//! Every section and key is optional; omitted values take the defaults of
//! the reference scenario. Unknown keys are rejected.
//!
//! ```
//! use lgqp::config::ExperimentConfig;
//!
//! let cfg = ExperimentConfig::from_toml_str("[traffic]\npacket_sizes = [40]").unwrap();
//! assert_eq!(cfg.traffic.packet_sizes, vec![40]);
//! assert_eq!(cfg.topology.num_subcarriers, 32);
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel::TopologyConfig;
use crate::env::{Policy, SimConfig};
use crate::lyapunov::RewardConfig;
use crate::qmix::TrainerConfig;
use crate::scheduler::ActionSpace;
use crate::traffic::UserTraffic;
use crate::{Error, Result};

/// Prefix of environment variables that override config keys.
pub const ENV_PREFIX: &str = "LGQP_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrafficConfig {
    /// Packet sizes to sweep, in bits.
    pub packet_sizes: Vec<u64>,
    /// Mean packet arrivals per slot, shared by all users.
    pub arrival_rate: f64,
    /// Per-user deadline in slots.
    pub deadlines: Vec<u32>,
    /// Tolerated long-run fraction of late packets.
    pub violation_bound: f64,
    /// Remove packets from the buffer once they miss their deadline.
    pub drop_on_expiry: bool,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        Self {
            packet_sizes: vec![28, 40, 52, 64, 76],
            arrival_rate: 3.0,
            deadlines: vec![5, 2, 5, 3, 2, 2],
            violation_bound: 0.01,
            drop_on_expiry: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub eval_episodes: usize,
    pub policies: Vec<Policy>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            eval_episodes: 100,
            policies: Policy::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub topology: TopologyConfig,
    pub traffic: TrafficConfig,
    pub reward: RewardConfig,
    pub trainer: TrainerConfig,
    pub scheduler: ActionSpace,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<document>", e.message()))?;
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let mut cfg = Self::default();
        for (section, value) in table {
            let err = |e: toml::de::Error| Error::config(section.clone(), e.message().trim());
            match section.as_str() {
                "topology" => cfg.topology = value.try_into().map_err(err)?,
                "traffic" => cfg.traffic = value.try_into().map_err(err)?,
                "reward" => cfg.reward = value.try_into().map_err(err)?,
                "trainer" => cfg.trainer = value.try_into().map_err(err)?,
                "scheduler" => cfg.scheduler = value.try_into().map_err(err)?,
                "run" => cfg.run = value.try_into().map_err(err)?,
                _ => return Err(Error::config(section, "unknown section")),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and applies overrides from the process environment.
    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with_overrides(path, std::env::vars())
    }

    pub fn load_with_overrides<I>(path: &Path, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(path.display().to_string(), e.message()))?;
        apply_overrides(&mut table, vars)?;
        Self::from_table(table)
    }

    /// Defaults with overrides from `vars` applied, for runs without a file.
    pub fn from_overrides<I>(vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table = toml::Table::new();
        apply_overrides(&mut table, vars)?;
        Self::from_table(table)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn num_users(&self) -> usize {
        self.topology.num_ues()
    }

    pub fn validate(&self) -> Result<()> {
        self.topology.validate()?;
        self.reward.validate()?;
        self.trainer.validate()?;
        self.scheduler.validate()?;
        let t = &self.traffic;
        if t.packet_sizes.is_empty() {
            return Err(Error::config("traffic.packet_sizes", "sweep list is empty"));
        }
        if t.packet_sizes.contains(&0) {
            return Err(Error::config("traffic.packet_sizes", "sizes must be positive"));
        }
        if !(t.arrival_rate >= 0.0 && t.arrival_rate.is_finite()) {
            return Err(Error::config("traffic.arrival_rate", "must be finite and nonnegative"));
        }
        if t.deadlines.len() != self.num_users() {
            return Err(Error::config(
                "traffic.deadlines",
                format!(
                    "has {} entries but the topology has {} users",
                    t.deadlines.len(),
                    self.num_users()
                ),
            ));
        }
        if !(0.0..=1.0).contains(&t.violation_bound) {
            return Err(Error::config("traffic.violation_bound", "probability out of range"));
        }
        if self.run.seeds.is_empty() {
            return Err(Error::config("run.seeds", "needs at least one seed"));
        }
        if self.run.policies.is_empty() {
            return Err(Error::config("run.policies", "needs at least one policy"));
        }
        Ok(())
    }

    /// Simulation settings for one packet size and policy.
    pub fn sim_config(&self, packet_bits: u64, policy: Policy) -> SimConfig {
        SimConfig {
            topology: self.topology.clone(),
            users: self
                .traffic
                .deadlines
                .iter()
                .map(|&deadline| UserTraffic {
                    deadline,
                    arrival_rate: self.traffic.arrival_rate,
                    violation_bound: self.traffic.violation_bound,
                    packet_bits,
                })
                .collect(),
            drop_on_expiry: self.traffic.drop_on_expiry,
            reward: self.reward.clone(),
            reward_kind: policy.reward_kind(),
            actions: self.scheduler,
            slots_per_episode: self.trainer.slots_per_episode,
        }
    }
}

/// Applies `LGQP_SECTION__KEY=value` overrides; `__` separates path segments
/// and names are matched case-insensitively. Values are parsed as TOML and
/// fall back to plain strings.
pub fn apply_overrides<I>(table: &mut toml::Table, vars: I) -> Result<()>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut vars: Vec<(String, String)> = vars
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..]
            .split("__")
            .map(str::to_ascii_lowercase)
            .collect();
        if path.iter().any(String::is_empty) {
            return Err(Error::config(key, "malformed override name"));
        }
        let value = parse_value(&raw);
        let (last, parents) = path.split_last().expect("nonempty path");
        let mut node = &mut *table;
        for p in parents {
            let entry = node
                .entry(p.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            node = entry
                .as_table_mut()
                .ok_or_else(|| Error::config(path.join("."), "override descends into a non-table"))?;
        }
        node.insert(last.clone(), value);
    }
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
