//! Exact minimum total slowdown for tiny instances, and an independent
//! checker for schedules produced by the simulator.
//!
//! Nothing here uses the simulator's grids: occupancy is rebuilt from the
//! schedules alone.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{job_base_time, transfer_delay, JobId, JobSpec, ModelError, NodeId, Schedule, Topology, TransferSlot};
use crate::policies::Policy;
use crate::sim::{LinkExclusivity, SimConfig, SimError, SimState};

pub const MAX_JOBS: usize = 3;
pub const MAX_NODES: usize = 3;
pub const MAX_HORIZON: u64 = 24;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("instance exceeds the exhaustive-search bounds: {0}")]
    TooLarge(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyInstance {
    pub topology: Topology,
    /// Absolute slots `0..horizon` available to every component and transfer.
    pub horizon: u64,
    pub link_exclusivity: LinkExclusivity,
    pub jobs: Vec<JobSpec>,
}

impl TinyInstance {
    pub fn new(topology: Topology, horizon: u64, jobs: Vec<JobSpec>) -> Result<Self, OracleError> {
        let inst = TinyInstance {
            topology,
            horizon,
            link_exclusivity: LinkExclusivity::default(),
            jobs,
        };
        inst.check()?;
        Ok(inst)
    }

    /// A simulator whose lookahead windows span the whole instance and which
    /// cuts the episode off at the horizon.
    pub fn simulator(&self) -> Result<SimState, SimError> {
        let cfg = SimConfig {
            queue_slots: MAX_JOBS,
            horizon: self.horizon as usize,
            link_horizon: self.horizon as usize,
            backlog_cap: MAX_JOBS,
            link_exclusivity: self.link_exclusivity,
            max_slots: Some(self.horizon),
            ..SimConfig::default()
        };
        SimState::new(Arc::new(self.topology.clone()), cfg, self.jobs.clone())
    }

    pub fn check(&self) -> Result<(), OracleError> {
        if self.jobs.len() > MAX_JOBS {
            return Err(OracleError::TooLarge(format!("{} jobs > {MAX_JOBS}", self.jobs.len())));
        }
        if self.topology.node_count() > MAX_NODES {
            return Err(OracleError::TooLarge(format!("{} nodes > {MAX_NODES}", self.topology.node_count())));
        }
        if self.horizon == 0 || self.horizon > MAX_HORIZON {
            return Err(OracleError::TooLarge(format!("horizon {} not in 1..={MAX_HORIZON}", self.horizon)));
        }
        for j in &self.jobs {
            j.validate(&self.topology)?;
        }
        Ok(())
    }

    fn lane_count(&self) -> usize {
        match self.link_exclusivity {
            LinkExclusivity::PerLink => self.topology.link_count(),
            LinkExclusivity::PerSourceNode => self.topology.node_count(),
        }
    }

    fn lane(&self, from: NodeId, to: NodeId) -> usize {
        match self.link_exclusivity {
            LinkExclusivity::PerLink => self.topology.link_index(from, to).expect("validated"),
            LinkExclusivity::PerSourceNode => self.topology.node_index(from).expect("validated"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub total_slowdown: f64,
    /// One schedule per job, in instance order.
    pub schedules: Vec<Schedule>,
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Comp(usize),
    Transfer(usize),
}

struct JobPlan {
    arrival: u64,
    base: u64,
    ops: Vec<Op>,
    /// Length of op `k`.
    len: Vec<u64>,
    /// Total length of ops after `k`.
    rest: Vec<u64>,
    node: Vec<usize>,
    resource: Vec<u32>,
    lane: Vec<Option<usize>>,
}

struct Search<'a> {
    inst: &'a TinyInstance,
    plans: Vec<JobPlan>,
    capacity: Vec<u32>,
    used: Vec<Vec<u32>>,
    lanes: Vec<Vec<bool>>,
    starts: Vec<Vec<u64>>,
    best: f64,
    best_starts: Option<Vec<Vec<u64>>>,
}

impl Search<'_> {
    fn fits(&self, node: usize, s: u64, d: u64, r: u32) -> bool {
        (s..s + d).all(|t| self.used[node][t as usize] + r <= self.capacity[node])
    }

    fn lane_free(&self, lane: usize, s: u64, d: u64) -> bool {
        (s..s + d).all(|t| !self.lanes[lane][t as usize])
    }

    fn dfs(&mut self, job: usize, op: usize, ready: u64, acc: f64) {
        let n = self.plans.len();
        if job == n {
            if acc < self.best {
                self.best = acc;
                self.best_starts = Some(self.starts.clone());
            }
            return;
        }
        let remaining_jobs = (n - job - 1) as f64;
        let (arrival, base, len, rest, kind, node, res, lane) = {
            let p = &self.plans[job];
            (p.arrival, p.base, p.len[op], p.rest[op], p.ops[op], p.node[op], p.resource[op], p.lane[op])
        };
        let last_op = op + 1 == self.plans[job].ops.len();
        let h = self.inst.horizon;
        let mut s = ready;
        while s + len + rest <= h {
            let finish_lb = s + len + rest;
            let lb = acc + (finish_lb - arrival) as f64 / base as f64 + remaining_jobs;
            if lb >= self.best - 1e-12 {
                break;
            }
            let ok = match kind {
                Op::Comp(_) => self.fits(node, s, len, res),
                Op::Transfer(_) => self.lane_free(lane.expect("transfer lane"), s, len),
            };
            if ok {
                match kind {
                    Op::Comp(_) => (s..s + len).for_each(|t| self.used[node][t as usize] += res),
                    Op::Transfer(_) => (s..s + len).for_each(|t| self.lanes[lane.unwrap()][t as usize] = true),
                }
                self.starts[job][op] = s;
                if last_op {
                    let phi = (s + len - arrival) as f64 / base as f64;
                    self.dfs(job + 1, 0, self.plans.get(job + 1).map_or(0, |p| p.arrival), acc + phi);
                } else {
                    self.dfs(job, op + 1, s + len, acc);
                }
                match kind {
                    Op::Comp(_) => (s..s + len).for_each(|t| self.used[node][t as usize] -= res),
                    Op::Transfer(_) => (s..s + len).for_each(|t| self.lanes[lane.unwrap()][t as usize] = false),
                }
            }
            s += 1;
        }
    }
}

/// Minimum of the summed slowdowns over every feasible joint assignment of
/// component and transfer start slots inside the horizon. `Ok(None)` when no
/// assignment fits.
pub fn exact_min_slowdown(inst: &TinyInstance) -> Result<Option<OracleSolution>, OracleError> {
    inst.check()?;
    let topo = &inst.topology;
    let mut plans = Vec::new();
    for job in &inst.jobs {
        let delays = job.transfer_delays(topo)?;
        let mut ops = Vec::new();
        let mut len = Vec::new();
        let mut node = Vec::new();
        let mut resource = Vec::new();
        let mut lane = Vec::new();
        for (i, c) in job.components.iter().enumerate() {
            let ni = topo.node_index(c.assigned_node).expect("validated");
            ops.push(Op::Comp(i));
            len.push(c.duration as u64);
            node.push(ni);
            resource.push(c.resource);
            lane.push(None);
            if delays.get(i).copied().unwrap_or(0) > 0 {
                let next = job.components[i + 1].assigned_node;
                ops.push(Op::Transfer(i));
                len.push(delays[i]);
                node.push(ni);
                resource.push(0);
                lane.push(Some(inst.lane(c.assigned_node, next)));
            }
        }
        let mut rest = vec![0; len.len()];
        for k in (0..len.len().saturating_sub(1)).rev() {
            rest[k] = rest[k + 1] + len[k + 1];
        }
        plans.push(JobPlan {
            arrival: job.arrival_slot,
            base: job_base_time(job, topo)?,
            ops,
            len,
            rest,
            node,
            resource,
            lane,
        });
    }
    let h = inst.horizon as usize;
    let mut search = Search {
        inst,
        capacity: topo.nodes().iter().map(|n| n.capacity).collect(),
        used: vec![vec![0; h]; topo.node_count()],
        lanes: vec![vec![false; h]; inst.lane_count()],
        starts: plans.iter().map(|p| vec![0; p.ops.len()]).collect(),
        plans,
        best: f64::INFINITY,
        best_starts: None,
    };
    if inst.jobs.is_empty() {
        return Ok(Some(OracleSolution {
            total_slowdown: 0.0,
            schedules: Vec::new(),
        }));
    }
    let first_arrival = search.plans[0].arrival;
    search.dfs(0, 0, first_arrival, 0.0);
    let Some(starts) = search.best_starts else {
        return Ok(None);
    };
    let schedules = inst
        .jobs
        .iter()
        .zip(&search.plans)
        .zip(&starts)
        .map(|((job, plan), st)| {
            let mut component_starts = vec![0; job.components.len()];
            let mut transfers = vec![None; job.components.len() - 1];
            for (k, op) in plan.ops.iter().enumerate() {
                match *op {
                    Op::Comp(i) => component_starts[i] = st[k],
                    Op::Transfer(i) => {
                        transfers[i] = Some(TransferSlot {
                            start: st[k],
                            slots: plan.len[k],
                        })
                    }
                }
            }
            Schedule {
                job_id: job.job_id,
                component_starts,
                transfers,
            }
        })
        .collect();
    Ok(Some(OracleSolution {
        total_slowdown: search.best,
        schedules,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Constraint {
    MissingSchedule,
    Shape,
    Arrival,
    Precedence,
    TransferLength,
    Capacity,
    LinkExclusivity,
    Horizon,
    Bookkeeping,
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Constraint::MissingSchedule => "missing-schedule",
            Constraint::Shape => "shape",
            Constraint::Arrival => "arrival",
            Constraint::Precedence => "precedence",
            Constraint::TransferLength => "transfer-length",
            Constraint::Capacity => "capacity",
            Constraint::LinkExclusivity => "link-exclusivity",
            Constraint::Horizon => "horizon",
            Constraint::Bookkeeping => "bookkeeping",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub constraint: Constraint,
    pub job: Option<JobId>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.job {
            Some(j) => write!(f, "{} (job {j}): {}", self.constraint, self.detail),
            None => write!(f, "{}: {}", self.constraint, self.detail),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobOutcome {
    pub job_id: JobId,
    pub completion_time: u64,
    pub base_time: u64,
    pub slowdown: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplayReport {
    pub violations: Vec<Violation>,
    pub jobs: Vec<JobOutcome>,
    pub total_slowdown: f64,
}

impl ReplayReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Re-verifies every constraint of `schedules` against the instance and
/// recomputes completion times and slowdowns.
pub fn replay_check(inst: &TinyInstance, schedules: &[Schedule]) -> ReplayReport {
    check_schedules(&inst.topology, &inst.jobs, schedules, Some(inst.horizon), inst.link_exclusivity)
}

/// Runs `policy` on the instance, comparing the live grids with the
/// schedule log after every step, then replays the final schedules. Grid
/// mismatches are reported with the replay violations.
pub fn audit_policy(inst: &TinyInstance, policy: &mut dyn Policy) -> Result<ReplayReport, OracleError> {
    let mut sim = inst.simulator()?;
    let mut live = Vec::new();
    while !sim.is_done() {
        let d = policy.decide(&sim);
        sim.step(d.sub_action)?;
        if live.is_empty() {
            live = compare_with_sim(&sim);
        }
    }
    let mut report = replay_check(inst, sim.schedule_log());
    report.violations.extend(live);
    Ok(report)
}

/// As [`replay_check`] without the instance size bounds; `horizon` of
/// `None` skips the horizon constraint.
pub fn check_schedules(
    topo: &Topology,
    jobs: &[JobSpec],
    schedules: &[Schedule],
    horizon: Option<u64>,
    exclusivity: LinkExclusivity,
) -> ReplayReport {
    let mut report = ReplayReport::default();
    let mut push = |c: Constraint, job: Option<JobId>, detail: String| {
        report.violations.push(Violation {
            constraint: c,
            job,
            detail,
        })
    };
    let by_id: BTreeMap<JobId, &Schedule> = schedules.iter().map(|s| (s.job_id, s)).collect();
    let mut node_use: BTreeMap<(NodeId, u64), u64> = BTreeMap::new();
    let mut lane_use: BTreeMap<(NodeId, Option<NodeId>, u64), Vec<JobId>> = BTreeMap::new();
    let mut outcomes = Vec::new();

    for job in jobs {
        let id = Some(job.job_id);
        let Some(sched) = by_id.get(&job.job_id) else {
            push(Constraint::MissingSchedule, id, "no schedule".into());
            continue;
        };
        let m = job.components.len();
        if sched.component_starts.len() != m || sched.transfers.len() + 1 != m {
            push(Constraint::Shape, id, format!("{m} components, schedule has {}", sched.component_starts.len()));
            continue;
        }
        if sched.component_starts[0] < job.arrival_slot {
            push(
                Constraint::Arrival,
                id,
                format!("starts at {} before arrival {}", sched.component_starts[0], job.arrival_slot),
            );
        }
        for (i, c) in job.components.iter().enumerate() {
            let start = sched.component_starts[i];
            let finish = start + c.duration as u64;
            for t in start..finish {
                *node_use.entry((c.assigned_node, t)).or_default() += c.resource as u64;
            }
            if horizon.is_some_and(|h| finish > h) {
                push(Constraint::Horizon, id, format!("component {} ends at {finish}", c.index));
            }
            if i + 1 == m {
                continue;
            }
            let next = &job.components[i + 1];
            let next_start = sched.component_starts[i + 1];
            let delay = match topo.bandwidth(c.assigned_node, next.assigned_node) {
                Some(b) => transfer_delay(c.output_bytes, b).unwrap_or(0),
                None => 0,
            };
            let ready = match (delay, sched.transfers[i]) {
                (0, None) => finish,
                (0, Some(_)) => {
                    push(Constraint::Shape, id, format!("component {} has a transfer but no delay", c.index));
                    finish
                }
                (_, None) => {
                    push(Constraint::TransferLength, id, format!("component {} lacks its transfer", c.index));
                    finish + delay
                }
                (d, Some(tr)) => {
                    if tr.slots != d {
                        push(
                            Constraint::TransferLength,
                            id,
                            format!("transfer after component {} takes {} slots, needs {d}", c.index, tr.slots),
                        );
                    }
                    if tr.start < finish {
                        push(
                            Constraint::Precedence,
                            id,
                            format!("transfer starts at {} before component {} ends at {finish}", tr.start, c.index),
                        );
                    }
                    if horizon.is_some_and(|h| tr.end() > h) {
                        push(Constraint::Horizon, id, format!("transfer ends at {}", tr.end()));
                    }
                    let key_to = match exclusivity {
                        LinkExclusivity::PerLink => Some(next.assigned_node),
                        LinkExclusivity::PerSourceNode => None,
                    };
                    for t in tr.start..tr.end() {
                        lane_use.entry((c.assigned_node, key_to, t)).or_default().push(job.job_id);
                    }
                    tr.end()
                }
            };
            if next_start < ready {
                push(
                    Constraint::Precedence,
                    id,
                    format!("component {} starts at {next_start}, input ready at {ready}", next.index),
                );
            }
        }
        if let Ok(base) = job_base_time(job, topo) {
            let completion = sched.completion_time(job);
            outcomes.push(JobOutcome {
                job_id: job.job_id,
                completion_time: completion,
                base_time: base,
                slowdown: completion as f64 / base as f64,
            });
        }
    }
    for ((node, t), used) in node_use {
        let cap = topo.capacity(node).unwrap_or(0) as u64;
        if used > cap {
            push(Constraint::Capacity, None, format!("node {node} slot {t}: {used} > {cap}"));
        }
    }
    for ((from, to, t), users) in lane_use {
        if users.len() > 1 {
            let lane = to.map_or(format!("{from}->*"), |to| format!("{from}->{to}"));
            push(Constraint::LinkExclusivity, None, format!("link {lane} slot {t}: {users:?}"));
        }
    }
    report.total_slowdown = outcomes.iter().map(|o| o.slowdown).sum();
    report.jobs = outcomes;
    report
}

/// Compares the simulator's live grids and completion records with the
/// occupancy implied by its schedule log, cell by cell.
pub fn compare_with_sim(state: &SimState) -> Vec<Violation> {
    let mut out = Vec::new();
    let topo = state.topology();
    let clock = state.clock();
    let horizon = state.config().horizon;
    let mut specs: BTreeMap<JobId, &JobSpec> = BTreeMap::new();
    for a in state.active() {
        specs.insert(a.spec.job_id, &a.spec);
    }
    let mut expect_node: BTreeMap<(usize, u64), BTreeMap<(JobId, u32), u32>> = BTreeMap::new();
    let mut expect_link: BTreeMap<(usize, u64), (JobId, u32)> = BTreeMap::new();
    for a in state.active() {
        let job = &a.spec;
        for (i, c) in job.components.iter().enumerate() {
            let n = topo.node_index(c.assigned_node).expect("validated");
            let s = a.schedule.component_starts[i];
            for t in s.max(clock)..s + c.duration as u64 {
                *expect_node.entry((n, t)).or_default().entry((job.job_id, c.index)).or_default() += c.resource;
            }
            if let Some(Some(tr)) = a.schedule.transfers.get(i) {
                let next = job.components[i + 1].assigned_node;
                let l = topo.link_index(c.assigned_node, next).expect("validated");
                for t in tr.start.max(clock)..tr.end() {
                    expect_link.insert((l, t), (job.job_id, c.index));
                }
            }
        }
    }
    for (n, grid) in state.node_grids().iter().enumerate() {
        for r in 0..horizon {
            let t = clock + r as u64;
            let mut got: BTreeMap<(JobId, u32), u32> = BTreeMap::new();
            for o in grid.row(r).iter().flatten() {
                *got.entry((o.job, o.component)).or_default() += 1;
            }
            let want = expect_node.remove(&(n, t)).unwrap_or_default();
            if got != want {
                out.push(Violation {
                    constraint: Constraint::Bookkeeping,
                    job: None,
                    detail: format!("node {} slot {t}: grid {got:?}, schedules {want:?}", topo.nodes()[n].id),
                });
            }
        }
    }
    for (l, grid) in state.link_grids().iter().enumerate() {
        for r in 0..state.config().link_horizon {
            let t = clock + r as u64;
            let got = grid.row(r).map(|o| (o.job, o.component));
            let want = expect_link.remove(&(l, t));
            if got != want {
                out.push(Violation {
                    constraint: Constraint::Bookkeeping,
                    job: None,
                    detail: format!("link {}->{} slot {t}: grid {got:?}, schedules {want:?}", grid.from, grid.to),
                });
            }
        }
    }
    for ((n, t), left) in expect_node {
        out.push(Violation {
            constraint: Constraint::Bookkeeping,
            job: None,
            detail: format!("node index {n} slot {t} outside the grid: {left:?}"),
        });
    }
    for c in state.completed() {
        if c.completion_time < c.base_time {
            out.push(Violation {
                constraint: Constraint::Bookkeeping,
                job: Some(c.job_id),
                detail: format!("completion {} below base {}", c.completion_time, c.base_time),
            });
        }
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceHeader {
    topology: Topology,
    horizon: u64,
    #[serde(default)]
    link_exclusivity: LinkExclusivity,
}

/// Header record with topology and horizon, then one job per line.
pub fn write_instance<W: Write>(mut out: W, inst: &TinyInstance) -> std::io::Result<()> {
    let header = InstanceHeader {
        topology: inst.topology.clone(),
        horizon: inst.horizon,
        link_exclusivity: inst.link_exclusivity,
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    crate::workloads::write_jobs_jsonl(out, &inst.jobs)
}

pub fn read_instance<R: BufRead>(input: R) -> Result<TinyInstance, OracleError> {
    let mut lines = input.lines().enumerate().filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()));
    let (i, first) = lines.next().ok_or(OracleError::Parse {
        line: 1,
        msg: "missing header".into(),
    })?;
    let header: InstanceHeader = serde_json::from_str(&first?).map_err(|e| OracleError::Parse {
        line: i as u64 + 1,
        msg: e.to_string(),
    })?;
    let mut jobs = Vec::new();
    for (i, line) in lines {
        let job: JobSpec = serde_json::from_str(&line?).map_err(|e| OracleError::Parse {
            line: i as u64 + 1,
            msg: e.to_string(),
        })?;
        jobs.push(job);
    }
    let inst = TinyInstance {
        topology: header.topology,
        horizon: header.horizon,
        link_exclusivity: header.link_exclusivity,
        jobs,
    };
    inst.check()?;
    Ok(inst)
}

/// Random instance within the bounds whose jobs, run back to back after the
/// last arrival, fit in half the horizon.
pub fn random_tiny_instance<R: Rng + ?Sized>(rng: &mut R) -> TinyInstance {
    loop {
        let n = rng.gen_range(1..=MAX_NODES as u32);
        let cap = rng.gen_range(2..=4);
        let bw = rng.gen_range(1..=3);
        let topo = Topology::uniform(n, cap, bw).expect("valid uniform topology");
        let count = rng.gen_range(1..=MAX_JOBS);
        let jobs: Vec<JobSpec> = (0..count)
            .map(|j| {
                let comps = rng.gen_range(1..=3usize);
                let parts: Vec<(u32, u32, NodeId, u64)> = (0..comps)
                    .map(|i| {
                        let h = if i + 1 == comps { 0 } else { rng.gen_range(1..=4) };
                        (rng.gen_range(1..=3), rng.gen_range(1..=cap), NodeId(rng.gen_range(1..=n)), h)
                    })
                    .collect();
                JobSpec::from_parts(JobId(j as u64), rng.gen_range(0..=3), parts)
            })
            .collect();
        let total: u64 = jobs.iter().map(|j| job_base_time(j, &topo).expect("valid")).sum();
        let last = jobs.iter().map(|j| j.arrival_slot).max().unwrap_or(0);
        if last + total <= MAX_HORIZON / 2 {
            return TinyInstance::new(topo, MAX_HORIZON, jobs).expect("within bounds");
        }
    }
}
