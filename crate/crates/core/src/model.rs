//! Domain types for jobs, components and the edge topology, plus the
//! closed-form schedule arithmetic (transfer delay, base time, slowdown,
//! total bytes) that every other module builds on.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JobId(pub u64);

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "job{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("invalid job {job}: {reason}")]
    InvalidJob { job: JobId, reason: String },
    #[error("internal consistency violated: {0}")]
    Inconsistent(String),
}

/// One stage of a job. Placement is fixed: the component always runs on
/// `assigned_node`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub job_id: JobId,
    /// 1-based position within the job.
    pub index: u32,
    /// Execution time in slots.
    pub duration: u32,
    /// Resource slots held during every slot of execution.
    pub resource: u32,
    pub assigned_node: NodeId,
    /// Data units handed to the next component; zero only for the last one.
    pub output_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobSpec {
    pub job_id: JobId,
    pub arrival_slot: u64,
    pub components: Vec<ComponentSpec>,
}

impl JobSpec {
    /// Builds a job from `(duration, resource, node, output_bytes)` tuples,
    /// numbering components in order.
    pub fn from_parts(
        job_id: JobId,
        arrival_slot: u64,
        parts: impl IntoIterator<Item = (u32, u32, NodeId, u64)>,
    ) -> Self {
        let components = parts
            .into_iter()
            .enumerate()
            .map(|(i, (duration, resource, assigned_node, output_bytes))| ComponentSpec {
                job_id,
                index: i as u32 + 1,
                duration,
                resource,
                assigned_node,
                output_bytes,
            })
            .collect();
        JobSpec {
            job_id,
            arrival_slot,
            components,
        }
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Checks the structural invariants and that every component fits on
    /// its node.
    pub fn validate(&self, topo: &Topology) -> Result<(), ModelError> {
        let bad = |reason: String| ModelError::InvalidJob {
            job: self.job_id,
            reason,
        };
        if self.components.is_empty() {
            return Err(bad("no components".into()));
        }
        let last = self.components.len();
        for (pos, c) in self.components.iter().enumerate() {
            if c.job_id != self.job_id {
                return Err(bad(format!("component {} carries job id {}", c.index, c.job_id)));
            }
            if c.index as usize != pos + 1 {
                return Err(bad(format!(
                    "component at position {} has index {}",
                    pos + 1,
                    c.index
                )));
            }
            if c.duration == 0 {
                return Err(bad(format!("component {} has zero duration", c.index)));
            }
            if c.resource == 0 {
                return Err(bad(format!("component {} has zero resource", c.index)));
            }
            let cap = topo
                .capacity(c.assigned_node)
                .ok_or_else(|| bad(format!("component {} on unknown node {}", c.index, c.assigned_node)))?;
            if c.resource > cap {
                return Err(bad(format!(
                    "component {} needs {} resource slots but {} has {}",
                    c.index, c.resource, c.assigned_node, cap
                )));
            }
            let is_last = pos + 1 == last;
            if is_last != (c.output_bytes == 0) {
                return Err(bad(format!(
                    "component {} has output_bytes {} (must be zero exactly for the last component)",
                    c.index, c.output_bytes
                )));
            }
        }
        Ok(())
    }

    /// Transfer delay, in slots, of every hand-off `i -> i+1`. Same-node
    /// hand-offs cost nothing.
    pub fn transfer_delays(&self, topo: &Topology) -> Result<Vec<u64>, ModelError> {
        self.components
            .windows(2)
            .map(|w| {
                let (from, to) = (w[0].assigned_node, w[1].assigned_node);
                if from == to {
                    return Ok(0);
                }
                let b = topo.bandwidth(from, to).ok_or_else(|| ModelError::InvalidJob {
                    job: self.job_id,
                    reason: format!("no link {from}->{to}"),
                })?;
                transfer_delay(w[0].output_bytes, b)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    /// Resource slots available per time slot.
    pub capacity: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Link {
    pub from: NodeId,
    pub to: NodeId,
    /// Data units per slot.
    pub bandwidth: u64,
}

/// Edge nodes joined by a full mesh of directed links.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TopologyRepr", into = "TopologyRepr")]
pub struct Topology {
    nodes: Vec<Node>,
    links: BTreeMap<(NodeId, NodeId), u64>,
}

#[derive(Serialize, Deserialize)]
struct TopologyRepr {
    nodes: Vec<Node>,
    links: Vec<Link>,
}

impl TryFrom<TopologyRepr> for Topology {
    type Error = ModelError;
    fn try_from(r: TopologyRepr) -> Result<Self, Self::Error> {
        Topology::new(r.nodes, r.links)
    }
}

impl From<Topology> for TopologyRepr {
    fn from(t: Topology) -> Self {
        TopologyRepr {
            links: t.links().collect(),
            nodes: t.nodes,
        }
    }
}

impl Topology {
    pub fn new(nodes: Vec<Node>, links: impl IntoIterator<Item = Link>) -> Result<Self, ModelError> {
        if nodes.is_empty() {
            return Err(ModelError::InvalidTopology("no nodes".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for n in &nodes {
            if n.capacity == 0 {
                return Err(ModelError::InvalidTopology(format!("node {} has zero capacity", n.id)));
            }
            if !seen.insert(n.id) {
                return Err(ModelError::InvalidTopology(format!("duplicate node {}", n.id)));
            }
        }
        let mut map = BTreeMap::new();
        for l in links {
            if l.from == l.to {
                return Err(ModelError::InvalidTopology(format!("self link on {}", l.from)));
            }
            if !seen.contains(&l.from) || !seen.contains(&l.to) {
                return Err(ModelError::InvalidTopology(format!(
                    "link {}->{} references an unknown node",
                    l.from, l.to
                )));
            }
            if l.bandwidth == 0 {
                return Err(ModelError::InvalidTopology(format!(
                    "link {}->{} has zero bandwidth",
                    l.from, l.to
                )));
            }
            if map.insert((l.from, l.to), l.bandwidth).is_some() {
                return Err(ModelError::InvalidTopology(format!("duplicate link {}->{}", l.from, l.to)));
            }
        }
        for a in &nodes {
            for b in &nodes {
                if a.id != b.id && !map.contains_key(&(a.id, b.id)) {
                    return Err(ModelError::InvalidTopology(format!("missing link {}->{}", a.id, b.id)));
                }
            }
        }
        Ok(Topology { nodes, links: map })
    }

    /// Nodes `1..=n`, all with the same capacity, fully meshed with one
    /// bandwidth.
    pub fn uniform(n: u32, capacity: u32, bandwidth: u64) -> Result<Self, ModelError> {
        let nodes: Vec<Node> = (1..=n).map(|i| Node { id: NodeId(i), capacity }).collect();
        let links: Vec<Link> = nodes
            .iter()
            .flat_map(|a| nodes.iter().map(move |b| (a.id, b.id)))
            .filter(|(a, b)| a != b)
            .map(|(from, to)| Link { from, to, bandwidth })
            .collect();
        Topology::new(nodes, links)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_index(&self, id: NodeId) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn capacity(&self, id: NodeId) -> Option<u32> {
        self.nodes.iter().find(|n| n.id == id).map(|n| n.capacity)
    }

    pub fn bandwidth(&self, from: NodeId, to: NodeId) -> Option<u64> {
        self.links.get(&(from, to)).copied()
    }

    /// Directed links in ascending `(from, to)` order.
    pub fn links(&self) -> impl Iterator<Item = Link> + '_ {
        self.links.iter().map(|(&(from, to), &bandwidth)| Link { from, to, bandwidth })
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    /// Position of `(from, to)` in [`Topology::links`] order.
    pub fn link_index(&self, from: NodeId, to: NodeId) -> Option<usize> {
        self.links.keys().position(|&k| k == (from, to))
    }

    pub fn max_capacity(&self) -> u32 {
        self.nodes.iter().map(|n| n.capacity).max().unwrap_or(0)
    }

    pub fn min_capacity(&self) -> u32 {
        self.nodes.iter().map(|n| n.capacity).min().unwrap_or(0)
    }

    /// Same topology with every capacity multiplied by `factor`.
    pub fn scale_capacity(&self, factor: u32) -> Result<Self, ModelError> {
        let nodes = self
            .nodes
            .iter()
            .map(|n| Node {
                id: n.id,
                capacity: n.capacity * factor,
            })
            .collect();
        Topology::new(nodes, self.links())
    }
}

/// Slots needed to push `data` units over a link of `bandwidth` units per
/// slot. Partial slots round up.
pub fn transfer_delay(data: u64, bandwidth: u64) -> Result<u64, ModelError> {
    if bandwidth == 0 {
        return Err(ModelError::InvalidTopology("nonpositive bandwidth".into()));
    }
    Ok(data.div_ceil(bandwidth))
}

/// Ideal time in system for a job that never waits: all durations plus all
/// cross-node transfer delays.
pub fn job_base_time(job: &JobSpec, topo: &Topology) -> Result<u64, ModelError> {
    for c in &job.components {
        if topo.capacity(c.assigned_node).is_none() {
            return Err(ModelError::InvalidJob {
                job: job.job_id,
                reason: format!("component {} on unknown node {}", c.index, c.assigned_node),
            });
        }
    }
    let exec: u64 = job.components.iter().map(|c| c.duration as u64).sum();
    let transfers: u64 = job.transfer_delays(topo)?.iter().sum();
    Ok(exec + transfers)
}

pub fn job_slowdown(completion: u64, base: u64) -> Result<f64, ModelError> {
    if base == 0 {
        return Err(ModelError::Inconsistent("zero base time".into()));
    }
    if completion < base {
        return Err(ModelError::Inconsistent(format!(
            "completion time {completion} below base time {base}"
        )));
    }
    Ok(completion as f64 / base as f64)
}

/// Compute size (resource x duration per component) plus all data handed
/// between components. Sort key of the least-bytes-first baseline.
pub fn job_total_bytes(job: &JobSpec) -> u64 {
    job.components
        .iter()
        .map(|c| c.resource as u64 * c.duration as u64 + c.output_bytes)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferSlot {
    pub start: u64,
    pub slots: u64,
}

impl TransferSlot {
    pub fn end(&self) -> u64 {
        self.start + self.slots
    }
}

/// Absolute start slots of a job's components, and of each cross-node
/// transfer (`None` for same-node hand-offs).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub job_id: JobId,
    pub component_starts: Vec<u64>,
    pub transfers: Vec<Option<TransferSlot>>,
}

impl Schedule {
    /// First slot after the last component finishes.
    pub fn finish(&self, job: &JobSpec) -> u64 {
        let last = job.components.len() - 1;
        self.component_starts[last] + job.components[last].duration as u64
    }

    /// T_g: finish of the last component minus the arrival slot.
    pub fn completion_time(&self, job: &JobSpec) -> u64 {
        self.finish(job) - job.arrival_slot
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn topo3() -> Topology {
        Topology::uniform(3, 4, 1).unwrap()
    }

    #[test]
    fn transfer_delay_examples() {
        assert_eq!(transfer_delay(10, 5).unwrap(), 2);
        assert_eq!(transfer_delay(0, 3).unwrap(), 0);
        assert_eq!(transfer_delay(7, 2).unwrap(), 4);
        assert!(matches!(transfer_delay(1, 0), Err(ModelError::InvalidTopology(_))));
    }

    /// Moves data one slot at a time; the delay is the first slot count whose
    /// cumulative capacity covers the payload.
    fn slot_quantized_oracle(h: u64, b: u64) -> u64 {
        let mut moved = 0;
        let mut slots = 0;
        while moved < h {
            moved += b;
            slots += 1;
        }
        slots
    }

    #[test]
    fn transfer_delay_matches_slot_oracle() {
        assert_eq!(slot_quantized_oracle(7, 2), 4);
        assert!(3 * 2 < 7);
        for h in 0..60 {
            for b in 1..12 {
                assert_eq!(transfer_delay(h, b).unwrap(), slot_quantized_oracle(h, b), "h={h} b={b}");
            }
        }
    }

    #[test]
    fn base_time_examples() {
        let t = topo3();
        let two = JobSpec::from_parts(JobId(1), 0, [(2, 1, NodeId(1), 1), (3, 1, NodeId(2), 0)]);
        assert_eq!(job_base_time(&two, &t).unwrap(), 6);
        let one = JobSpec::from_parts(JobId(2), 0, [(9, 1, NodeId(1), 0)]);
        assert_eq!(job_base_time(&one, &t).unwrap(), 9);
        let blue = JobSpec::from_parts(
            JobId(3),
            0,
            [(1, 1, NodeId(3), 1), (1, 2, NodeId(1), 1), (1, 2, NodeId(2), 0)],
        );
        assert_eq!(job_base_time(&blue, &t).unwrap(), 5);
    }

    #[test]
    fn same_node_handoff_is_free() {
        let t = topo3();
        let j = JobSpec::from_parts(JobId(1), 0, [(2, 1, NodeId(1), 50), (3, 1, NodeId(1), 0)]);
        assert_eq!(job_base_time(&j, &t).unwrap(), 5);
    }

    #[test]
    fn base_time_unknown_node() {
        let j = JobSpec::from_parts(JobId(1), 0, [(2, 1, NodeId(9), 0)]);
        assert!(matches!(job_base_time(&j, &topo3()), Err(ModelError::InvalidJob { .. })));
    }

    #[test]
    fn slowdown_examples() {
        assert_eq!(job_slowdown(12, 6).unwrap(), 2.0);
        assert_eq!(job_slowdown(5, 5).unwrap(), 1.0);
        assert_eq!(job_slowdown(7, 5).unwrap(), 1.4);
        assert!(matches!(job_slowdown(4, 5), Err(ModelError::Inconsistent(_))));
    }

    #[test]
    fn total_bytes_examples() {
        let a = JobSpec::from_parts(JobId(1), 0, [(3, 2, NodeId(1), 4), (2, 1, NodeId(2), 0)]);
        assert_eq!(job_total_bytes(&a), 12);
        let b = JobSpec::from_parts(JobId(2), 0, [(9, 9, NodeId(1), 0)]);
        assert_eq!(job_total_bytes(&b), 81);
        let c = JobSpec::from_parts(JobId(3), 0, [(1, 1, NodeId(1), 0), (1, 1, NodeId(2), 0)]);
        assert_eq!(job_total_bytes(&c), 2);
    }

    #[test]
    fn validate_rejects_bad_jobs() {
        let t = topo3();
        let ok = JobSpec::from_parts(JobId(1), 0, [(1, 4, NodeId(1), 2), (1, 1, NodeId(2), 0)]);
        ok.validate(&t).unwrap();
        let too_big = JobSpec::from_parts(JobId(1), 0, [(1, 5, NodeId(1), 0)]);
        assert!(too_big.validate(&t).is_err());
        let bytes_on_last = JobSpec::from_parts(JobId(1), 0, [(1, 1, NodeId(1), 3)]);
        assert!(bytes_on_last.validate(&t).is_err());
        let missing_bytes = JobSpec::from_parts(JobId(1), 0, [(1, 1, NodeId(1), 0), (1, 1, NodeId(2), 0)]);
        assert!(missing_bytes.validate(&t).is_err());
        let empty = JobSpec {
            job_id: JobId(1),
            arrival_slot: 0,
            components: vec![],
        };
        assert!(empty.validate(&t).is_err());
        let mut renumbered = ok.clone();
        renumbered.components[1].index = 3;
        assert!(renumbered.validate(&t).is_err());
    }

    #[test]
    fn topology_requires_full_mesh() {
        let nodes = vec![
            Node { id: NodeId(1), capacity: 2 },
            Node { id: NodeId(2), capacity: 2 },
        ];
        let one_way = [Link {
            from: NodeId(1),
            to: NodeId(2),
            bandwidth: 1,
        }];
        assert!(Topology::new(nodes.clone(), one_way).is_err());
        let zero_bw = [
            Link { from: NodeId(1), to: NodeId(2), bandwidth: 1 },
            Link { from: NodeId(2), to: NodeId(1), bandwidth: 0 },
        ];
        assert!(Topology::new(nodes, zero_bw).is_err());
    }

    #[test]
    fn topology_serde_round_trip() {
        let t = topo3();
        let s = serde_json::to_string(&t).unwrap();
        let back: Topology = serde_json::from_str(&s).unwrap();
        assert_eq!(t, back);
        assert_eq!(t.link_index(NodeId(1), NodeId(2)), Some(0));
        assert_eq!(t.link_index(NodeId(3), NodeId(2)), Some(5));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn transfer_delay_monotone(h in 0u64..10_000, dh in 0u64..100, b in 1u64..500, db in 0u64..100) {
                let base = transfer_delay(h, b).unwrap();
                prop_assert!(transfer_delay(h + dh, b).unwrap() >= base);
                prop_assert!(transfer_delay(h, b + db).unwrap() <= base);
            }

            #[test]
            fn transfer_delay_exact_multiple(k in 0u64..1000, b in 1u64..1000) {
                prop_assert_eq!(transfer_delay(k * b, b).unwrap(), k);
            }
        }
    }
}
