//! Experiment configuration, loaded from TOML. Unknown keys are errors.

use std::path::{Path, PathBuf};

use edgesched::agent::AgentConfig;
use edgesched::sim::{LinkExclusivity, OverflowPolicy};
use edgesched::workloads::{Variant, WorkloadConfig};
use edgesched::{EncodingSpec, SimConfig, Topology};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds network initialisation, exploration and all job streams.
    pub seed: u64,
    pub out: PathBuf,
    pub topology: TopologySection,
    pub sim: SimSection,
    pub encoding: EncodingSection,
    pub workload: WorkloadConfig,
    pub trace: Option<TraceSection>,
    pub agent: AgentConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            out: PathBuf::from("runs/default"),
            topology: TopologySection::default(),
            sim: SimSection::default(),
            encoding: EncodingSection::default(),
            workload: WorkloadConfig::default(),
            trace: None,
            agent: AgentConfig::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Identical nodes joined by a full mesh of identical links.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologySection {
    pub nodes: u32,
    pub capacity: u32,
    pub bandwidth: u64,
}

impl Default for TopologySection {
    fn default() -> Self {
        TopologySection {
            nodes: 3,
            capacity: 20,
            bandwidth: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub queue_slots: usize,
    pub horizon: usize,
    /// Defaults to `horizon`.
    pub link_horizon: Option<usize>,
    pub backlog_cap: usize,
    pub overflow: OverflowPolicy,
    pub link_exclusivity: LinkExclusivity,
    /// Episode cutoff in slots; 0 disables it.
    pub max_slots: u64,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            queue_slots: 5,
            horizon: 100,
            link_horizon: None,
            backlog_cap: 200,
            overflow: OverflowPolicy::Error,
            link_exclusivity: LinkExclusivity::PerLink,
            max_slots: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodingSection {
    /// Node image width in resource slots.
    pub width: usize,
    /// Component blocks per queue slot.
    pub max_components: usize,
}

impl Default for EncodingSection {
    fn default() -> Self {
        EncodingSection {
            width: 20,
            max_components: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSection {
    pub path: PathBuf,
    #[serde(default = "default_slot_len")]
    pub slot_len: u64,
    #[serde(default = "default_trace_width")]
    pub width: u32,
}

fn default_slot_len() -> u64 {
    100
}

fn default_trace_width() -> u32 {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub episodes: usize,
    /// Number of distinct job streams cycled through during training; 0
    /// draws a fresh stream every episode.
    pub streams: usize,
    /// Evaluate every this many episodes and keep the best agent; 0 keeps
    /// the final agent.
    pub eval_every: usize,
    pub eval_episodes: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            episodes: 300,
            streams: 30,
            eval_every: 0,
            eval_episodes: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub episodes: usize,
    pub arrival_rates: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            episodes: 30,
            arrival_rates: vec![0.5, 0.7, 0.9],
        }
    }
}

fn config_err(path: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{path}: {msg}"))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Sets the run seed and the workload seed together.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.workload.seed = seed;
    }

    pub fn topology(&self) -> Result<Topology, CliError> {
        let t = &self.topology;
        Topology::uniform(t.nodes, t.capacity, t.bandwidth).map_err(|e| config_err("topology", e))
    }

    pub fn sim_config(&self) -> SimConfig {
        let s = &self.sim;
        SimConfig {
            queue_slots: s.queue_slots,
            horizon: s.horizon,
            link_horizon: s.link_horizon.unwrap_or(s.horizon),
            backlog_cap: s.backlog_cap,
            overflow: s.overflow,
            link_exclusivity: s.link_exclusivity,
            max_slots: (s.max_slots > 0).then_some(s.max_slots),
        }
    }

    pub fn encoding(&self) -> Result<EncodingSpec, CliError> {
        let topo = self.topology()?;
        EncodingSpec::new(self.encoding.width, self.encoding.max_components, &self.sim_config(), &topo)
            .map_err(|e| config_err("encoding", e))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let topo = self.topology()?;
        self.sim_config().validate().map_err(|e| config_err("sim", e))?;
        self.encoding()?;
        self.workload.validate().map_err(|e| config_err("workload", e))?;
        self.agent.validate().map_err(|e| config_err("agent", e))?;
        let w = &self.workload;
        if w.max_components > self.encoding.max_components {
            return Err(config_err(
                "workload.max_components",
                format!("{} exceeds encoding.max_components {}", w.max_components, self.encoding.max_components),
            ));
        }
        match w.variant {
            Variant::Trace => {
                if self.trace.is_none() {
                    return Err(config_err("trace", "variant \"trace\" needs a [trace] section"));
                }
            }
            Variant::D1 | Variant::D2 => {
                let (d, r) = w.max_profile();
                if r > topo.min_capacity() || r as usize > self.encoding.width {
                    return Err(config_err(
                        "workload",
                        format!("components need up to {r} resource slots, more than a node or image row holds"),
                    ));
                }
                // generated transfers take one slot each
                let base = w.max_components * d as usize + w.max_components - 1;
                let window = self.sim.horizon.min(self.sim_config().link_horizon);
                if base > window {
                    return Err(config_err(
                        "sim.horizon",
                        format!("longest generated job needs {base} slots, lookahead is {window}"),
                    ));
                }
            }
        }
        if self.train.episodes == 0 {
            return Err(config_err("train.episodes", "must be positive"));
        }
        if self.train.eval_every > 0 && self.train.eval_episodes == 0 {
            return Err(config_err("train.eval_episodes", "must be positive when train.eval_every is set"));
        }
        if self.eval.episodes == 0 {
            return Err(config_err("eval.episodes", "must be positive"));
        }
        if self.eval.arrival_rates.is_empty() {
            return Err(config_err("eval.arrival_rates", "must not be empty"));
        }
        if let Some(p) = self.eval.arrival_rates.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
            return Err(config_err("eval.arrival_rates", format!("{p} not in (0, 1]")));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out = PathBuf::new();
        let json = serde_json::to_string(&canonical).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.encoding().unwrap().len(), 6691);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = ExperimentConfig::from_toml("[agent]\ngamma = 0.9\ngama = 0.9\n").unwrap_err();
        assert!(matches!(err, CliError::Config(ref m) if m.contains("gama")), "{err}");
    }

    #[test]
    fn cross_field_errors_name_the_field() {
        let err = ExperimentConfig::from_toml("[workload]\nmax_components = 4\n").unwrap_err();
        assert!(err.to_string().contains("workload.max_components"), "{err}");
        let err = ExperimentConfig::from_toml("[sim]\nhorizon = 20\n").unwrap_err();
        assert!(err.to_string().contains("sim.horizon"), "{err}");
        let err = ExperimentConfig::from_toml("[topology]\ncapacity = 30\n").unwrap_err();
        assert!(err.to_string().contains("encoding"), "{err}");
        let err = ExperimentConfig::from_toml("[workload]\nvariant = \"trace\"\n").unwrap_err();
        assert!(err.to_string().contains("trace"), "{err}");
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.agent.gamma = 0.9;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
