//! Scheduling policies and the episode driver they share.
//!
//! Every policy answers one sub-action at a time. The driver applies it and
//! advances time on an invalid answer, so baselines and the learned agent
//! face the same dynamics.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::model::job_total_bytes;
use crate::sim::{EpisodeMetrics, SimError, SimState};

/// A sub-action in `0..=K`; 0 declines to schedule anything.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct PolicyDecision {
    pub sub_action: usize,
}

impl PolicyDecision {
    pub const VOID: PolicyDecision = PolicyDecision { sub_action: 0 };
}

pub trait Policy {
    fn name(&self) -> &str;
    fn decide(&mut self, state: &SimState) -> PolicyDecision;
}

/// Feasible slot with the smallest key; lowest slot index on ties.
fn pick_min_by_key(state: &SimState, key: impl Fn(usize) -> u64) -> PolicyDecision {
    state
        .feasible_slots()
        .into_iter()
        .min_by_key(|&k| (key(k), k))
        .map_or(PolicyDecision::VOID, |sub_action| PolicyDecision { sub_action })
}

/// Shortest job first: least base time among currently schedulable jobs.
pub fn sjf_pick(state: &SimState) -> PolicyDecision {
    pick_min_by_key(state, |k| state.queued(k).map_or(u64::MAX, |w| w.base_time))
}

/// Least bytes first: least compute size plus transferred data.
pub fn lbf_pick(state: &SimState) -> PolicyDecision {
    pick_min_by_key(state, |k| state.queued(k).map_or(u64::MAX, |w| job_total_bytes(&w.spec)))
}

/// Uniform over schedulable jobs; 0 only when nothing is schedulable.
pub fn random_pick<R: Rng + ?Sized>(state: &SimState, rng: &mut R) -> PolicyDecision {
    state
        .feasible_slots()
        .choose(rng)
        .map_or(PolicyDecision::VOID, |&sub_action| PolicyDecision { sub_action })
}

#[derive(Debug, Default, Clone, Copy)]
pub struct Sjf;

impl Policy for Sjf {
    fn name(&self) -> &str {
        "sjf"
    }
    fn decide(&mut self, state: &SimState) -> PolicyDecision {
        sjf_pick(state)
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct Lbf;

impl Policy for Lbf {
    fn name(&self) -> &str {
        "lbf"
    }
    fn decide(&mut self, state: &SimState) -> PolicyDecision {
        lbf_pick(state)
    }
}

#[derive(Debug, Clone)]
pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        RandomPolicy {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Policy for RandomPolicy {
    fn name(&self) -> &str {
        "random"
    }
    fn decide(&mut self, state: &SimState) -> PolicyDecision {
        random_pick(state, &mut self.rng)
    }
}

/// Runs `policy` until the episode is drained or cut off. Returns the
/// metrics and the total reward collected.
pub fn run_episode(state: &mut SimState, policy: &mut dyn Policy) -> Result<(EpisodeMetrics, f64), SimError> {
    let mut total = 0.0;
    while !state.is_done() {
        let d = policy.decide(state);
        total += state.step(d.sub_action)?.reward;
    }
    Ok((state.episode_metrics()?, total))
}
