//! Multi-component job scheduling on geo-distributed edge nodes.
//!
//! The crate provides a time-slotted simulator ([`sim`]), its fixed-length
//! state encoding ([`encode`]), heuristic baselines ([`policies`]), a small
//! fully connected network library ([`nn`]), an actor-critic learner
//! ([`agent`]), workload generators and trace ingestion ([`workloads`]) and
//! an exhaustive reference scheduler for tiny instances ([`oracle`]).

pub mod agent;
pub mod encode;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod policies;
pub mod sim;
pub mod workloads;

pub use model::{
    job_base_time, job_slowdown, job_total_bytes, transfer_delay, ComponentSpec, JobId, JobSpec, Link,
    ModelError, Node, NodeId, Schedule, Topology, TransferSlot,
};
pub use agent::{Agent, AgentConfig, AgentError, AgentPolicy, ReplayBuffer, Transition};
pub use encode::{encode_state, EncodedState, EncodingSpec, PackedState};
pub use policies::{run_episode, Lbf, Policy, PolicyDecision, RandomPolicy, Sjf};
pub use sim::{SimConfig, SimError, SimState};
