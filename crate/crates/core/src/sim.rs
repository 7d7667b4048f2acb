//! Time-slotted environment.
//!
//! Every node keeps a lookahead grid of `horizon` rows (row 0 is the
//! current slot) by `capacity` columns; every directed link keeps a column
//! of `link_horizon` rows holding at most one transfer per slot. Choosing a
//! waiting job reserves all of its components and transfers at once, each
//! at the earliest slot that fits. Time only moves when a sub-action is
//! invalid: then the grids shift up one row, finished jobs leave, and new
//! arrivals enter the queue or the backlog.

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    job_base_time, job_slowdown, JobId, JobSpec, ModelError, NodeId, Schedule, Topology, TransferSlot,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("job {job} does not fit the simulator: {reason}")]
    JobTooLarge { job: JobId, reason: String },
    #[error("backlog overflow at slot {slot}: capacity {cap}")]
    BacklogOverflow { slot: u64, cap: usize },
    #[error("no job completed or remained in the system; metrics undefined")]
    NoCompletedJobs,
    #[error("invalid simulator config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OverflowPolicy {
    #[default]
    Error,
    Drop,
}

/// Which transfers compete for a link slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkExclusivity {
    /// One transfer per directed link per slot.
    #[default]
    PerLink,
    /// One outgoing transfer per source node per slot, across all its links.
    PerSourceNode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// K: addressable waiting-queue slots.
    pub queue_slots: usize,
    /// Node lookahead rows.
    pub horizon: usize,
    /// Link lookahead rows.
    pub link_horizon: usize,
    pub backlog_cap: usize,
    pub overflow: OverflowPolicy,
    pub link_exclusivity: LinkExclusivity,
    /// Episode cutoff; remaining jobs are censored when the clock reaches it.
    pub max_slots: Option<u64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            queue_slots: 5,
            horizon: 100,
            link_horizon: 100,
            backlog_cap: 200,
            overflow: OverflowPolicy::Error,
            link_exclusivity: LinkExclusivity::PerLink,
            max_slots: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.queue_slots == 0 || self.horizon == 0 || self.link_horizon == 0 || self.backlog_cap == 0 {
            return Err(SimError::Config(
                "queue_slots, horizon, link_horizon and backlog_cap must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Which job component (or transfer producer) holds a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Occupant {
    pub job: JobId,
    pub component: u32,
}

#[derive(Debug, Clone)]
pub struct NodeGrid {
    pub node: NodeId,
    pub capacity: u32,
    rows: VecDeque<Vec<Option<Occupant>>>,
    used: VecDeque<u32>,
}

impl NodeGrid {
    fn new(node: NodeId, capacity: u32, horizon: usize) -> Self {
        NodeGrid {
            node,
            capacity,
            rows: (0..horizon).map(|_| vec![None; capacity as usize]).collect(),
            used: std::iter::repeat(0).take(horizon).collect(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, r: usize) -> &[Option<Occupant>] {
        &self.rows[r]
    }

    pub fn used(&self, r: usize) -> u32 {
        self.used[r]
    }

    /// Earliest row `>= from` where `resource` fits for `duration` rows.
    fn earliest_fit(&self, from: usize, duration: usize, resource: u32) -> Option<usize> {
        let free = self.capacity.checked_sub(resource)?;
        let horizon = self.rows.len();
        let mut s = from;
        'outer: while s + duration <= horizon {
            for r in s..s + duration {
                if self.used[r] > free {
                    s = r + 1;
                    continue 'outer;
                }
            }
            return Some(s);
        }
        None
    }

    fn place(&mut self, start: usize, duration: usize, resource: u32, who: Occupant) {
        for r in start..start + duration {
            let mut left = resource;
            for cell in self.rows[r].iter_mut() {
                if left == 0 {
                    break;
                }
                if cell.is_none() {
                    *cell = Some(who);
                    left -= 1;
                }
            }
            debug_assert_eq!(left, 0, "capacity overrun on {}", self.node);
            self.used[r] += resource;
        }
    }

    fn shift(&mut self) {
        let cap = self.capacity as usize;
        self.rows.pop_front();
        self.rows.push_back(vec![None; cap]);
        self.used.pop_front();
        self.used.push_back(0);
    }
}

#[derive(Debug, Clone)]
pub struct LinkGrid {
    pub from: NodeId,
    pub to: NodeId,
    pub bandwidth: u64,
    rows: VecDeque<Option<Occupant>>,
}

impl LinkGrid {
    fn new(from: NodeId, to: NodeId, bandwidth: u64, horizon: usize) -> Self {
        LinkGrid {
            from,
            to,
            bandwidth,
            rows: std::iter::repeat(None).take(horizon).collect(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, r: usize) -> Option<Occupant> {
        self.rows[r]
    }

    fn shift(&mut self) {
        self.rows.pop_front();
        self.rows.push_back(None);
    }
}

/// A job that has arrived but is not yet scheduled.
#[derive(Debug, Clone, PartialEq)]
pub struct WaitingJob {
    pub spec: Arc<JobSpec>,
    pub base_time: u64,
}

#[derive(Debug, Clone)]
pub struct ActiveJob {
    pub spec: Arc<JobSpec>,
    pub base_time: u64,
    pub schedule: Schedule,
}

impl ActiveJob {
    pub fn finish(&self) -> u64 {
        self.schedule.finish(&self.spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompletedJob {
    pub job_id: JobId,
    pub arrival_slot: u64,
    pub completion_time: u64,
    pub base_time: u64,
}

impl CompletedJob {
    pub fn slowdown(&self) -> f64 {
        self.completion_time as f64 / self.base_time as f64
    }
}

/// Why a sub-action did not schedule anything.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NotScheduled {
    /// Sub-action 0.
    Void,
    EmptySlot,
    /// The job cannot be placed inside the lookahead windows right now.
    Infeasible,
    OutOfRange,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SubactionOutcome {
    Scheduled(Schedule),
    Invalid(NotScheduled),
}

impl SubactionOutcome {
    pub fn is_valid(&self) -> bool {
        matches!(self, SubactionOutcome::Scheduled(_))
    }
}

/// Result of one environment step: a sub-action plus, when it was invalid,
/// the time advance it triggered.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub scheduled: bool,
    /// Zero unless time advanced.
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    /// Mean T_g over completed jobs; NaN when none completed.
    pub mean_completion: f64,
    /// Mean T_g / T_base over completed jobs; NaN when none completed.
    pub mean_slowdown: f64,
    pub completed: usize,
    /// Jobs still in the system at the cutoff; never mixed into the means.
    pub censored: usize,
    pub censored_mean_completion: Option<f64>,
    pub censored_mean_slowdown: Option<f64>,
    pub dropped: u64,
    pub slots: u64,
}

impl EpisodeMetrics {
    /// Mean slowdown over completed and censored jobs, censored ones counted
    /// at their time in the system so far (a lower bound on their slowdown).
    pub fn slowdown_with_censored(&self) -> f64 {
        let c = self.censored as f64;
        let n = self.completed as f64 + c;
        (weighted(self.mean_slowdown, self.completed) + self.censored_mean_slowdown.unwrap_or(0.0) * c) / n
    }

    /// Mean time in system over completed and censored jobs, censored ones
    /// counted up to the cutoff.
    pub fn completion_with_censored(&self) -> f64 {
        let c = self.censored as f64;
        let n = self.completed as f64 + c;
        (weighted(self.mean_completion, self.completed) + self.censored_mean_completion.unwrap_or(0.0) * c) / n
    }
}

fn weighted(mean: f64, count: usize) -> f64 {
    if count == 0 {
        0.0
    } else {
        mean * count as f64
    }
}

/// Mutable simulator state for one episode.
#[derive(Debug, Clone)]
pub struct SimState {
    config: SimConfig,
    topology: Arc<Topology>,
    clock: u64,
    node_grids: Vec<NodeGrid>,
    link_grids: Vec<LinkGrid>,
    /// `[from * n + to]` -> index into `link_grids`.
    link_lookup: Vec<Option<usize>>,
    queue: Vec<Option<WaitingJob>>,
    backlog: VecDeque<WaitingJob>,
    active: Vec<ActiveJob>,
    completed: Vec<CompletedJob>,
    pending: VecDeque<Arc<JobSpec>>,
    arrived: u64,
    dropped: u64,
    log: Vec<Schedule>,
}

impl SimState {
    /// Validates every job against the topology and lookahead windows, then
    /// admits the arrivals of slot 0.
    pub fn new(topology: Arc<Topology>, config: SimConfig, jobs: Vec<JobSpec>) -> Result<Self, SimError> {
        config.validate()?;
        let mut jobs = jobs;
        jobs.sort_by_key(|j| j.arrival_slot);
        for j in &jobs {
            j.validate(&topology)?;
            if let Some(c) = j.components.iter().find(|c| c.duration as usize > config.horizon) {
                return Err(SimError::JobTooLarge {
                    job: j.job_id,
                    reason: format!("component {} lasts {} > horizon {}", c.index, c.duration, config.horizon),
                });
            }
            if let Some(d) = j.transfer_delays(&topology)?.into_iter().find(|&d| d as usize > config.link_horizon) {
                return Err(SimError::JobTooLarge {
                    job: j.job_id,
                    reason: format!("transfer of {d} slots > link horizon {}", config.link_horizon),
                });
            }
            if job_base_time(j, &topology)? as usize > config.horizon {
                return Err(SimError::JobTooLarge {
                    job: j.job_id,
                    reason: format!("base time exceeds horizon {}", config.horizon),
                });
            }
            // the unobstructed schedule must also fit the link window
            let mut offset = 0u64;
            for (c, d) in j.components.iter().zip(j.transfer_delays(&topology)?) {
                offset += c.duration as u64 + d;
                if d > 0 && offset as usize > config.link_horizon {
                    return Err(SimError::JobTooLarge {
                        job: j.job_id,
                        reason: format!("transfers end past link horizon {}", config.link_horizon),
                    });
                }
            }
        }
        let n = topology.node_count();
        let node_grids = topology
            .nodes()
            .iter()
            .map(|nd| NodeGrid::new(nd.id, nd.capacity, config.horizon))
            .collect();
        let mut link_lookup = vec![None; n * n];
        let mut link_grids = Vec::with_capacity(topology.link_count());
        for (i, l) in topology.links().enumerate() {
            let (u, v) = (
                topology.node_index(l.from).expect("validated"),
                topology.node_index(l.to).expect("validated"),
            );
            link_lookup[u * n + v] = Some(i);
            link_grids.push(LinkGrid::new(l.from, l.to, l.bandwidth, config.link_horizon));
        }
        let mut state = SimState {
            queue: vec![None; config.queue_slots],
            config,
            topology,
            clock: 0,
            node_grids,
            link_grids,
            link_lookup,
            backlog: VecDeque::new(),
            active: Vec::new(),
            completed: Vec::new(),
            pending: jobs.into_iter().map(Arc::new).collect(),
            arrived: 0,
            dropped: 0,
            log: Vec::new(),
        };
        state.admit_due()?;
        Ok(state)
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn node_grids(&self) -> &[NodeGrid] {
        &self.node_grids
    }

    pub fn link_grids(&self) -> &[LinkGrid] {
        &self.link_grids
    }

    pub fn queue(&self) -> &[Option<WaitingJob>] {
        &self.queue
    }

    /// Job in 1-based queue slot `k`.
    pub fn queued(&self, k: usize) -> Option<&WaitingJob> {
        k.checked_sub(1).and_then(|i| self.queue.get(i)).and_then(|s| s.as_ref())
    }

    pub fn backlog(&self) -> &VecDeque<WaitingJob> {
        &self.backlog
    }

    pub fn active(&self) -> &[ActiveJob] {
        &self.active
    }

    pub fn completed(&self) -> &[CompletedJob] {
        &self.completed
    }

    pub fn pending(&self) -> &VecDeque<Arc<JobSpec>> {
        &self.pending
    }

    pub fn arrived(&self) -> u64 {
        self.arrived
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    /// Every schedule committed so far, in commit order.
    pub fn schedule_log(&self) -> &[Schedule] {
        &self.log
    }

    pub fn queue_len(&self) -> usize {
        self.queue.iter().filter(|s| s.is_some()).count()
    }

    /// Jobs counted by the reward: queued, backlogged or running.
    pub fn remaining(&self) -> impl Iterator<Item = (JobId, u64)> + '_ {
        self.queue
            .iter()
            .flatten()
            .chain(self.backlog.iter())
            .map(|w| (w.spec.job_id, w.base_time))
            .chain(self.active.iter().map(|a| (a.spec.job_id, a.base_time)))
    }

    pub fn is_done(&self) -> bool {
        let drained = self.pending.is_empty()
            && self.backlog.is_empty()
            && self.active.is_empty()
            && self.queue.iter().all(|s| s.is_none());
        drained || self.cutoff_reached()
    }

    pub fn cutoff_reached(&self) -> bool {
        self.config.max_slots.is_some_and(|m| self.clock >= m)
    }

    /// Puts an arrived job into the first empty queue slot, else the
    /// backlog. Used for arrivals and for hand-built scenarios.
    pub fn admit(&mut self, job: JobSpec) -> Result<(), SimError> {
        job.validate(&self.topology)?;
        self.admit_arc(Arc::new(job))
    }

    fn admit_arc(&mut self, spec: Arc<JobSpec>) -> Result<(), SimError> {
        let base_time = job_base_time(&spec, &self.topology)?;
        let job = WaitingJob { spec, base_time };
        self.arrived += 1;
        if let Some(slot) = self.queue.iter_mut().find(|s| s.is_none()) {
            *slot = Some(job);
        } else if self.backlog.len() < self.config.backlog_cap {
            self.backlog.push_back(job);
        } else {
            match self.config.overflow {
                OverflowPolicy::Drop => self.dropped += 1,
                OverflowPolicy::Error => {
                    return Err(SimError::BacklogOverflow {
                        slot: self.clock,
                        cap: self.config.backlog_cap,
                    })
                }
            }
        }
        Ok(())
    }

    fn admit_due(&mut self) -> Result<(), SimError> {
        for slot in self.queue.iter_mut().filter(|s| s.is_none()) {
            match self.backlog.pop_front() {
                Some(j) => *slot = Some(j),
                None => break,
            }
        }
        while self.pending.front().is_some_and(|j| j.arrival_slot <= self.clock) {
            let j = self.pending.pop_front().expect("front checked");
            self.admit_arc(j)?;
        }
        Ok(())
    }

    fn link_of(&self, from: usize, to: usize) -> usize {
        let n = self.node_grids.len();
        self.link_lookup[from * n + to].expect("full mesh")
    }

    fn link_row_free(&self, link: usize, src: usize, row: usize) -> bool {
        match self.config.link_exclusivity {
            LinkExclusivity::PerLink => self.link_grids[link].rows[row].is_none(),
            LinkExclusivity::PerSourceNode => {
                let n = self.node_grids.len();
                (0..n)
                    .filter(|&v| v != src)
                    .all(|v| self.link_grids[self.link_of(src, v)].rows[row].is_none())
            }
        }
    }

    fn earliest_transfer(&self, link: usize, src: usize, from: usize, slots: usize) -> Option<usize> {
        let horizon = self.config.link_horizon;
        let mut s = from;
        'outer: while s + slots <= horizon {
            for r in s..s + slots {
                if !self.link_row_free(link, src, r) {
                    s = r + 1;
                    continue 'outer;
                }
            }
            return Some(s);
        }
        None
    }

    /// Earliest-feasible placement of `job` against the current grids,
    /// without touching them.
    pub fn plan(&self, job: &JobSpec) -> Option<Schedule> {
        let t = self.clock;
        let mut ready = job.arrival_slot.max(t) - t;
        let mut component_starts = Vec::with_capacity(job.components.len());
        let mut transfers = Vec::with_capacity(job.components.len().saturating_sub(1));
        let delays = job.transfer_delays(&self.topology).ok()?;
        for (i, c) in job.components.iter().enumerate() {
            let node = self.topology.node_index(c.assigned_node)?;
            let start = self.node_grids[node].earliest_fit(ready as usize, c.duration as usize, c.resource)?;
            component_starts.push(t + start as u64);
            let finish = start as u64 + c.duration as u64;
            ready = finish;
            if let Some(next) = job.components.get(i + 1) {
                let next_node = self.topology.node_index(next.assigned_node)?;
                let delay = delays[i];
                if next_node == node || delay == 0 {
                    transfers.push(None);
                } else {
                    let link = self.link_of(node, next_node);
                    let ts = self.earliest_transfer(link, node, finish as usize, delay as usize)?;
                    transfers.push(Some(TransferSlot {
                        start: t + ts as u64,
                        slots: delay,
                    }));
                    ready = ts as u64 + delay;
                }
            }
        }
        Some(Schedule {
            job_id: job.job_id,
            component_starts,
            transfers,
        })
    }

    /// Dry run of [`SimState::try_schedule_job`].
    pub fn probe(&self, k: usize) -> Result<Schedule, NotScheduled> {
        if k == 0 {
            return Err(NotScheduled::Void);
        }
        if k > self.config.queue_slots {
            return Err(NotScheduled::OutOfRange);
        }
        let job = self.queued(k).ok_or(NotScheduled::EmptySlot)?;
        self.plan(&job.spec).ok_or(NotScheduled::Infeasible)
    }

    /// 1-based queue slots whose job can be scheduled right now.
    pub fn feasible_slots(&self) -> Vec<usize> {
        (1..=self.config.queue_slots).filter(|&k| self.probe(k).is_ok()).collect()
    }

    fn commit(&mut self, job: &JobSpec, sched: &Schedule) {
        let t = self.clock;
        for (i, c) in job.components.iter().enumerate() {
            let node = self.topology.node_index(c.assigned_node).expect("validated");
            let who = Occupant {
                job: job.job_id,
                component: c.index,
            };
            let start = (sched.component_starts[i] - t) as usize;
            self.node_grids[node].place(start, c.duration as usize, c.resource, who);
            if let Some(Some(tr)) = sched.transfers.get(i) {
                let next = self
                    .topology
                    .node_index(job.components[i + 1].assigned_node)
                    .expect("validated");
                let link = self.link_of(node, next);
                let s = (tr.start - t) as usize;
                for r in s..s + tr.slots as usize {
                    debug_assert!(self.link_grids[link].rows[r].is_none());
                    self.link_grids[link].rows[r] = Some(who);
                }
            }
        }
    }

    /// Schedules the job in 1-based queue slot `k` at its earliest feasible
    /// slots. On failure nothing changes.
    pub fn try_schedule_job(&mut self, k: usize) -> Result<Schedule, NotScheduled> {
        let sched = self.probe(k)?;
        let job = self.queue[k - 1].take().expect("probe saw a job");
        self.commit(&job.spec, &sched);
        self.log.push(sched.clone());
        self.active.push(ActiveJob {
            spec: job.spec,
            base_time: job.base_time,
            schedule: sched.clone(),
        });
        Ok(sched)
    }

    /// Sub-action `a`: 0 is the void action, `k` tries queue slot `k`.
    pub fn apply_subaction(&mut self, a: usize) -> SubactionOutcome {
        match self.try_schedule_job(a) {
            Ok(s) => SubactionOutcome::Scheduled(s),
            Err(why) => SubactionOutcome::Invalid(why),
        }
    }

    /// Ends the current slot: returns its reward, then moves the clock,
    /// retires finished jobs and admits the next arrivals.
    pub fn advance_time(&mut self) -> Result<f64, SimError> {
        let reward = -self.remaining().map(|(_, base)| 1.0 / base as f64).sum::<f64>();
        self.clock += 1;
        for g in &mut self.node_grids {
            g.shift();
        }
        for l in &mut self.link_grids {
            l.shift();
        }
        let now = self.clock;
        let mut still = Vec::with_capacity(self.active.len());
        for a in self.active.drain(..) {
            if a.finish() <= now {
                let completion_time = a.schedule.completion_time(&a.spec);
                job_slowdown(completion_time, a.base_time)?;
                self.completed.push(CompletedJob {
                    job_id: a.spec.job_id,
                    arrival_slot: a.spec.arrival_slot,
                    completion_time,
                    base_time: a.base_time,
                });
            } else {
                still.push(a);
            }
        }
        self.active = still;
        self.admit_due()?;
        Ok(reward)
    }

    /// One environment step. An invalid sub-action advances time and
    /// carries that slot's reward.
    pub fn step(&mut self, a: usize) -> Result<StepOutcome, SimError> {
        if self.apply_subaction(a).is_valid() {
            return Ok(StepOutcome {
                scheduled: true,
                reward: 0.0,
                done: false,
            });
        }
        let reward = self.advance_time()?;
        Ok(StepOutcome {
            scheduled: false,
            reward,
            done: self.is_done(),
        })
    }

    /// T-bar and phi-bar over completed jobs. Jobs still in the system are
    /// reported as censored with T_g = clock - arrival.
    pub fn episode_metrics(&self) -> Result<EpisodeMetrics, SimError> {
        let n = self.completed.len() as f64;
        let mean_completion = self.completed.iter().map(|c| c.completion_time as f64).sum::<f64>() / n;
        let mean_slowdown = self.completed.iter().map(|c| c.slowdown()).sum::<f64>() / n;
        let censored: Vec<(u64, u64)> = self
            .queue
            .iter()
            .flatten()
            .chain(self.backlog.iter())
            .map(|w| (w.spec.arrival_slot, w.base_time))
            .chain(self.active.iter().map(|a| (a.spec.arrival_slot, a.base_time)))
            .map(|(arr, base)| (self.clock - arr, base))
            .collect();
        if self.completed.is_empty() && censored.is_empty() {
            return Err(SimError::NoCompletedJobs);
        }
        let (cm, cs) = if censored.is_empty() {
            (None, None)
        } else {
            let m = censored.len() as f64;
            (
                Some(censored.iter().map(|&(t, _)| t as f64).sum::<f64>() / m),
                Some(censored.iter().map(|&(t, b)| t as f64 / b as f64).sum::<f64>() / m),
            )
        };
        Ok(EpisodeMetrics {
            mean_completion,
            mean_slowdown,
            completed: self.completed.len(),
            censored: censored.len(),
            censored_mean_completion: cm,
            censored_mean_slowdown: cs,
            dropped: self.dropped,
            slots: self.clock,
        })
    }

    /// Resource use per node for rows `0..horizon`, derived from the grid
    /// cells.
    pub fn node_usage(&self) -> Vec<Vec<u32>> {
        self.node_grids
            .iter()
            .map(|g| {
                (0..g.horizon())
                    .map(|r| g.row(r).iter().filter(|c| c.is_some()).count() as u32)
                    .collect()
            })
            .collect()
    }

    /// Checks that the grid contents agree with the schedules of active
    /// jobs, capacity and link exclusivity. Returns a description of the
    /// first disagreement.
    pub fn check_consistency(&self) -> Result<(), String> {
        let t = self.clock;
        let mut expected: Vec<Vec<u32>> = self.node_grids.iter().map(|g| vec![0; g.horizon()]).collect();
        let mut expected_links: Vec<Vec<Option<JobId>>> =
            self.link_grids.iter().map(|l| vec![None; l.horizon()]).collect();
        for a in &self.active {
            for (i, c) in a.spec.components.iter().enumerate() {
                let node = self.topology.node_index(c.assigned_node).unwrap();
                let s = a.schedule.component_starts[i];
                for abs in s..s + c.duration as u64 {
                    if abs >= t {
                        let row = (abs - t) as usize;
                        expected[node][row] += c.resource;
                        let held = self.node_grids[node]
                            .row(row)
                            .iter()
                            .filter(|o| **o == Some(Occupant { job: a.spec.job_id, component: c.index }))
                            .count() as u32;
                        if held != c.resource {
                            return Err(format!(
                                "{} component {} holds {held} cells at slot {abs}, expected {}",
                                a.spec.job_id, c.index, c.resource
                            ));
                        }
                    }
                }
                if let Some(Some(tr)) = a.schedule.transfers.get(i) {
                    let next = self.topology.node_index(a.spec.components[i + 1].assigned_node).unwrap();
                    let link = self.link_of(node, next);
                    for abs in tr.start..tr.end() {
                        if abs >= t {
                            let row = (abs - t) as usize;
                            if expected_links[link][row].replace(a.spec.job_id).is_some() {
                                return Err(format!("link {link} double-booked at slot {abs}"));
                            }
                        }
                    }
                }
            }
        }
        for (n, g) in self.node_grids.iter().enumerate() {
            for r in 0..g.horizon() {
                let cells = g.row(r).iter().filter(|c| c.is_some()).count() as u32;
                if cells != expected[n][r] || g.used(r) != cells {
                    return Err(format!(
                        "{} slot {}: {} cells occupied, counter {}, schedules say {}",
                        g.node,
                        t + r as u64,
                        cells,
                        g.used(r),
                        expected[n][r]
                    ));
                }
                if cells > g.capacity {
                    return Err(format!("{} over capacity at slot {}", g.node, t + r as u64));
                }
            }
        }
        for (i, l) in self.link_grids.iter().enumerate() {
            for r in 0..l.horizon() {
                if l.row(r).map(|o| o.job) != expected_links[i][r] {
                    return Err(format!("link {}->{} slot {} disagrees with schedules", l.from, l.to, t + r as u64));
                }
            }
        }
        let total = self.queue_len() as u64
            + self.backlog.len() as u64
            + self.active.len() as u64
            + self.completed.len() as u64
            + self.dropped;
        if total != self.arrived {
            return Err(format!("conservation: arrived {} but accounted {total}", self.arrived));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NodeId;

    fn topo(n: u32, cap: u32) -> Arc<Topology> {
        Arc::new(Topology::uniform(n, cap, 1).unwrap())
    }

    fn cfg(k: usize, horizon: usize) -> SimConfig {
        SimConfig {
            queue_slots: k,
            horizon,
            link_horizon: horizon,
            backlog_cap: 10,
            ..SimConfig::default()
        }
    }

    fn job(id: u64, arrival: u64, parts: &[(u32, u32, u32)]) -> JobSpec {
        let n = parts.len();
        JobSpec::from_parts(
            JobId(id),
            arrival,
            parts
                .iter()
                .enumerate()
                .map(|(i, &(d, r, node))| (d, r, NodeId(node), if i + 1 < n { 1 } else { 0 })),
        )
    }

    #[test]
    fn void_and_empty_subactions_are_invalid() {
        let mut s = SimState::new(topo(2, 4), cfg(3, 10), vec![job(1, 0, &[(2, 1, 1)])]).unwrap();
        assert_eq!(s.apply_subaction(0), SubactionOutcome::Invalid(NotScheduled::Void));
        assert_eq!(s.apply_subaction(2), SubactionOutcome::Invalid(NotScheduled::EmptySlot));
        assert_eq!(s.apply_subaction(4), SubactionOutcome::Invalid(NotScheduled::OutOfRange));
        assert!(s.apply_subaction(1).is_valid());
        assert!(s.queued(1).is_none());
    }

    #[test]
    fn full_node_is_infeasible_and_untouched() {
        let mut s = SimState::new(topo(1, 4), cfg(2, 6), vec![job(1, 0, &[(6, 4, 1)]), job(2, 0, &[(5, 1, 1)])])
            .unwrap();
        s.try_schedule_job(1).unwrap();
        let before = s.node_usage();
        assert_eq!(s.try_schedule_job(2), Err(NotScheduled::Infeasible));
        assert_eq!(s.node_usage(), before);
        assert!(s.queued(2).is_some());
    }

    #[test]
    fn reward_counts_remaining_jobs() {
        let j1 = job(1, 0, &[(4, 1, 1)]);
        let j2 = job(2, 0, &[(2, 1, 1), (2, 1, 2)]);
        let mut s = SimState::new(topo(2, 4), cfg(2, 10), vec![j1, j2]).unwrap();
        let r = s.advance_time().unwrap();
        assert!((r - (-(1.0 / 4.0 + 1.0 / 5.0))).abs() < 1e-15);
        assert!((r + 0.45).abs() < 1e-12);

        let mut empty = SimState::new(topo(2, 4), cfg(2, 10), vec![]).unwrap();
        assert_eq!(empty.advance_time().unwrap(), 0.0);
    }

    #[test]
    fn single_job_completes_at_finish_plus_one() {
        // last component runs in slot 3, so T_g = 4 = base time
        let j = job(1, 0, &[(2, 1, 1), (1, 1, 2)]);
        let base = job_base_time(&j, &topo(2, 4)).unwrap();
        let mut s = SimState::new(topo(2, 4), cfg(2, 10), vec![j]).unwrap();
        s.try_schedule_job(1).unwrap();
        let mut slots = 0;
        while !s.is_done() {
            s.advance_time().unwrap();
            slots += 1;
        }
        assert_eq!(slots, 4);
        assert_eq!(s.completed()[0].completion_time, 4);
        assert_eq!(base, 4);
        let m = s.episode_metrics().unwrap();
        assert_eq!(m.mean_slowdown, 1.0);
    }

    #[test]
    fn total_reward_is_minus_total_slowdown() {
        let jobs = vec![job(1, 0, &[(3, 4, 1)]), job(2, 0, &[(2, 4, 1)]), job(3, 1, &[(1, 2, 1), (2, 2, 2)])];
        let mut s = SimState::new(topo(2, 4), cfg(3, 20), jobs).unwrap();
        let mut total = 0.0;
        while !s.is_done() {
            let a = s.feasible_slots().first().copied().unwrap_or(0);
            total += s.step(a).unwrap().reward;
        }
        let phi: f64 = s.completed().iter().map(|c| c.slowdown()).sum();
        assert!((total + phi).abs() < 1e-12, "{total} vs {phi}");
    }

    #[test]
    fn backlog_overflow_error_and_drop() {
        let jobs: Vec<_> = (0..4).map(|i| job(i, 0, &[(1, 1, 1)])).collect();
        let mut c = cfg(1, 5);
        c.backlog_cap = 2;
        assert!(matches!(
            SimState::new(topo(1, 4), c.clone(), jobs.clone()),
            Err(SimError::BacklogOverflow { .. })
        ));
        c.overflow = OverflowPolicy::Drop;
        let s = SimState::new(topo(1, 4), c, jobs).unwrap();
        assert_eq!(s.dropped(), 1);
        assert_eq!(s.backlog().len(), 2);
        s.check_consistency().unwrap();
    }

    #[test]
    fn backlog_promotes_fifo_before_new_arrivals() {
        let jobs = vec![
            job(1, 0, &[(1, 1, 1)]),
            job(2, 0, &[(1, 1, 1)]),
            job(3, 0, &[(1, 1, 1)]),
            job(4, 1, &[(1, 1, 1)]),
        ];
        let mut s = SimState::new(topo(1, 4), cfg(1, 5), jobs).unwrap();
        assert_eq!(s.backlog().len(), 2);
        s.try_schedule_job(1).unwrap();
        s.advance_time().unwrap();
        assert_eq!(s.queued(1).unwrap().spec.job_id, JobId(2));
        let order: Vec<_> = s.backlog().iter().map(|w| w.spec.job_id).collect();
        assert_eq!(order, vec![JobId(3), JobId(4)]);
    }

    #[test]
    fn cutoff_censors_remaining() {
        let jobs = vec![job(1, 0, &[(2, 4, 1)]), job(2, 0, &[(5, 4, 1)])];
        let mut c = cfg(2, 10);
        c.max_slots = Some(3);
        let mut s = SimState::new(topo(1, 4), c, jobs).unwrap();
        while !s.is_done() {
            let a = s.feasible_slots().first().copied().unwrap_or(0);
            s.step(a).unwrap();
        }
        let m = s.episode_metrics().unwrap();
        assert_eq!(m.completed, 1);
        assert_eq!(m.censored, 1);
        assert_eq!(m.censored_mean_completion, Some(3.0));
        assert_eq!(m.mean_slowdown, 1.0);
    }

    #[test]
    fn metrics_need_completions() {
        let s = SimState::new(topo(1, 4), cfg(1, 5), vec![]).unwrap();
        assert!(matches!(s.episode_metrics(), Err(SimError::NoCompletedJobs)));
    }

    #[test]
    fn per_source_node_mode_blocks_other_links() {
        // both jobs send from node 1 right after slot 0, to different nodes
        let jobs = vec![job(1, 0, &[(1, 1, 1), (1, 1, 2)]), job(2, 0, &[(1, 1, 1), (1, 1, 3)])];
        let mut per_link = SimState::new(topo(3, 4), cfg(2, 10), jobs.clone()).unwrap();
        per_link.try_schedule_job(1).unwrap();
        let s = per_link.try_schedule_job(2).unwrap();
        assert_eq!(s.transfers[0].unwrap().start, 1);

        let mut c = cfg(2, 10);
        c.link_exclusivity = LinkExclusivity::PerSourceNode;
        let mut strict = SimState::new(topo(3, 4), c, jobs).unwrap();
        strict.try_schedule_job(1).unwrap();
        let s = strict.try_schedule_job(2).unwrap();
        assert_eq!(s.transfers[0].unwrap().start, 2);
        assert_eq!(s.component_starts[1], 3);
    }

    #[test]
    fn oversized_jobs_rejected() {
        let j = job(1, 0, &[(6, 1, 1), (6, 1, 2)]);
        assert!(matches!(
            SimState::new(topo(2, 4), cfg(1, 10), vec![j]),
            Err(SimError::JobTooLarge { .. })
        ));
    }

    mod props {
        use super::*;
        use crate::oracle::check_schedules;
        use crate::policies::{run_episode, Sjf};
        use proptest::prelude::*;

        fn arb_job(id: u64) -> impl Strategy<Value = JobSpec> {
            (0u64..8, prop::collection::vec((1u32..=3, 1u32..=4, 1u32..=3, 1u64..=2), 1..=3)).prop_map(
                move |(arrival, parts)| {
                    let m = parts.len();
                    JobSpec::from_parts(
                        JobId(id),
                        arrival,
                        parts
                            .into_iter()
                            .enumerate()
                            .map(|(i, (d, r, n, h))| (d, r, NodeId(n), if i + 1 < m { h } else { 0 })),
                    )
                },
            )
        }

        fn arb_jobs() -> impl Strategy<Value = Vec<JobSpec>> {
            (1usize..=6).prop_flat_map(|n| (0..n as u64).map(arb_job).collect::<Vec<_>>())
        }

        fn rollout(jobs: &[JobSpec], actions: &[usize]) -> (SimState, Vec<f64>, Result<(), String>) {
            let mut s = SimState::new(topo(3, 4), cfg(2, 16), jobs.to_vec()).unwrap();
            let mut rewards = Vec::new();
            let mut check = s.check_consistency();
            for &a in actions {
                if s.is_done() || check.is_err() {
                    break;
                }
                rewards.push(s.step(a).unwrap().reward);
                check = s.check_consistency();
            }
            (s, rewards, check)
        }

        proptest! {
            #[test]
            fn random_trajectories_keep_invariants(jobs in arb_jobs(), actions in prop::collection::vec(0usize..=3, 0..60)) {
                let (mut s, _, check) = rollout(&jobs, &actions);
                prop_assert!(check.is_ok(), "{:?}", check);
                run_episode(&mut s, &mut Sjf).unwrap();
                prop_assert!(s.check_consistency().is_ok());
                prop_assert_eq!(s.completed().len(), jobs.len());
                let report = check_schedules(s.topology(), &jobs, s.schedule_log(), None, s.config().link_exclusivity);
                prop_assert!(report.passed(), "{:?}", report.violations);
                for c in s.completed() {
                    prop_assert!(c.slowdown() >= 1.0);
                }
            }

            #[test]
            fn trajectories_are_deterministic(jobs in arb_jobs(), actions in prop::collection::vec(0usize..=3, 0..60)) {
                let (a, ra, _) = rollout(&jobs, &actions);
                let (b, rb, _) = rollout(&jobs, &actions);
                prop_assert_eq!(a.schedule_log(), b.schedule_log());
                prop_assert_eq!(a.node_usage(), b.node_usage());
                prop_assert_eq!(
                    ra.iter().map(|r| r.to_bits()).collect::<Vec<_>>(),
                    rb.iter().map(|r| r.to_bits()).collect::<Vec<_>>()
                );
            }

            #[test]
            fn lone_job_has_unit_slowdown(job in arb_job(0)) {
                let mut s = SimState::new(topo(3, 4), cfg(2, 16), vec![job.clone()]).unwrap();
                run_episode(&mut s, &mut Sjf).unwrap();
                let done = s.completed()[0];
                prop_assert_eq!(done.slowdown(), 1.0);
                prop_assert_eq!(done.completion_time, crate::model::job_base_time(&job, s.topology()).unwrap());
            }
        }
    }
}
