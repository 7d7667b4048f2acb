//! Flattened image encoding of a [`SimState`].
//!
//! Layout, in order:
//! 1. one `horizon x width` binary occupancy image per node (row-major,
//!    row 0 = current slot; columns past a node's capacity stay 0),
//! 2. one `link_horizon` binary column per directed link, in ascending
//!    `(from, to)` order,
//! 3. for each queue slot, `max_components` blocks of
//!    `[duration / horizon, resource / width, index / max_components,
//!    node one-hot...]`, zero-padded,
//! 4. the backlog length divided by `backlog_cap`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Topology;
use crate::sim::{SimConfig, SimState};

#[derive(Debug, Error, PartialEq)]
pub enum EncodeError {
    #[error("state does not match encoding: {0}")]
    Mismatch(String),
    #[error("job has {got} components, encoding allows {max}")]
    TooManyComponents { got: usize, max: usize },
    #[error("invalid encoding spec: {0}")]
    Spec(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingSpec {
    /// Node image width (resource slots).
    pub width: usize,
    /// Node image height (slots).
    pub horizon: usize,
    pub link_horizon: usize,
    pub queue_slots: usize,
    pub max_components: usize,
    pub backlog_cap: usize,
    pub nodes: usize,
    pub links: usize,
}

impl EncodingSpec {
    pub fn new(width: usize, max_components: usize, sim: &SimConfig, topo: &Topology) -> Result<Self, EncodeError> {
        let spec = EncodingSpec {
            width,
            horizon: sim.horizon,
            link_horizon: sim.link_horizon,
            queue_slots: sim.queue_slots,
            max_components,
            backlog_cap: sim.backlog_cap,
            nodes: topo.node_count(),
            links: topo.link_count(),
        };
        if [spec.width, spec.horizon, spec.link_horizon, spec.queue_slots, spec.max_components, spec.backlog_cap, spec.nodes]
            .contains(&0)
        {
            return Err(EncodeError::Spec("all dimensions must be positive".into()));
        }
        if topo.max_capacity() as usize > width {
            return Err(EncodeError::Spec(format!(
                "node capacity {} exceeds image width {width}",
                topo.max_capacity()
            )));
        }
        Ok(spec)
    }

    /// Features per component block.
    pub fn block_width(&self) -> usize {
        3 + self.nodes
    }

    pub fn node_section(&self) -> usize {
        self.nodes * self.horizon * self.width
    }

    pub fn link_section(&self) -> usize {
        self.links * self.link_horizon
    }

    pub fn queue_section(&self) -> usize {
        self.queue_slots * self.max_components * self.block_width()
    }

    pub fn len(&self) -> usize {
        self.node_section() + self.link_section() + self.queue_section() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn node_cell(&self, node: usize, row: usize, col: usize) -> usize {
        node * self.horizon * self.width + row * self.width + col
    }

    pub fn link_cell(&self, link: usize, row: usize) -> usize {
        self.node_section() + link * self.link_horizon + row
    }

    /// Offset of the block for 0-based queue slot `slot`, component `comp`.
    pub fn queue_block(&self, slot: usize, comp: usize) -> usize {
        self.node_section() + self.link_section() + (slot * self.max_components + comp) * self.block_width()
    }

    /// Length of the leading section whose entries are always 0 or 1.
    pub fn binary_len(&self) -> usize {
        self.node_section() + self.link_section()
    }

    pub fn backlog_cell(&self) -> usize {
        self.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedState(pub Vec<f64>);

impl EncodedState {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Lossless compact form: the binary image sections as bits, the rest as
/// floats.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedState {
    bits: Vec<u64>,
    binary_len: usize,
    tail: Vec<f64>,
}

impl PackedState {
    /// Packs the first `binary_len` entries, which must all be 0 or 1.
    pub fn pack(state: &EncodedState, binary_len: usize) -> Result<Self, EncodeError> {
        if binary_len > state.len() {
            return Err(EncodeError::Mismatch(format!("binary prefix {binary_len} > length {}", state.len())));
        }
        let mut bits = vec![0u64; binary_len.div_ceil(64)];
        for (i, &v) in state.0[..binary_len].iter().enumerate() {
            if v == 1.0 {
                bits[i / 64] |= 1 << (i % 64);
            } else if v != 0.0 {
                return Err(EncodeError::Mismatch(format!("entry {i} = {v} is not binary")));
            }
        }
        Ok(PackedState {
            bits,
            binary_len,
            tail: state.0[binary_len..].to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.binary_len + self.tail.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes the dense vector into `out`, which must have length `len()`.
    pub fn unpack_into(&self, out: &mut [f64]) {
        assert_eq!(out.len(), self.len(), "unpack target length");
        let (head, tail) = out.split_at_mut(self.binary_len);
        for (i, v) in head.iter_mut().enumerate() {
            *v = ((self.bits[i / 64] >> (i % 64)) & 1) as f64;
        }
        tail.copy_from_slice(&self.tail);
    }

    pub fn unpack(&self) -> EncodedState {
        let mut out = vec![0.0; self.len()];
        self.unpack_into(&mut out);
        EncodedState(out)
    }
}

pub fn encode_state(state: &SimState, spec: &EncodingSpec) -> Result<EncodedState, EncodeError> {
    let cfg = state.config();
    let topo = state.topology();
    if cfg.horizon != spec.horizon
        || cfg.link_horizon != spec.link_horizon
        || cfg.queue_slots != spec.queue_slots
        || cfg.backlog_cap != spec.backlog_cap
        || topo.node_count() != spec.nodes
        || topo.link_count() != spec.links
    {
        return Err(EncodeError::Mismatch(format!("{spec:?} vs {cfg:?}")));
    }
    if topo.max_capacity() as usize > spec.width {
        return Err(EncodeError::Mismatch("node wider than image".into()));
    }
    let mut out = vec![0.0; spec.len()];
    for (n, grid) in state.node_grids().iter().enumerate() {
        for r in 0..spec.horizon {
            for (c, cell) in grid.row(r).iter().enumerate() {
                if cell.is_some() {
                    out[spec.node_cell(n, r, c)] = 1.0;
                }
            }
        }
    }
    for (l, link) in state.link_grids().iter().enumerate() {
        for r in 0..spec.link_horizon {
            if link.row(r).is_some() {
                out[spec.link_cell(l, r)] = 1.0;
            }
        }
    }
    for (k, slot) in state.queue().iter().enumerate() {
        let Some(w) = slot else { continue };
        let comps = &w.spec.components;
        if comps.len() > spec.max_components {
            return Err(EncodeError::TooManyComponents {
                got: comps.len(),
                max: spec.max_components,
            });
        }
        for (j, c) in comps.iter().enumerate() {
            let node = topo
                .node_index(c.assigned_node)
                .ok_or_else(|| EncodeError::Mismatch(format!("unknown node {}", c.assigned_node)))?;
            let at = spec.queue_block(k, j);
            out[at] = c.duration as f64 / spec.horizon as f64;
            out[at + 1] = c.resource as f64 / spec.width as f64;
            out[at + 2] = c.index as f64 / spec.max_components as f64;
            out[at + 3 + node] = 1.0;
        }
    }
    out[spec.backlog_cell()] = state.backlog().len() as f64 / spec.backlog_cap as f64;
    Ok(EncodedState(out))
}

/// Integer profile recovered from one queue block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodedComponent {
    pub duration: u32,
    pub resource: u32,
    pub index: u32,
    pub node: usize,
}

/// Inverse of the queue-block features; `None` for a padding block.
pub fn decode_queue_block(block: &[f64], spec: &EncodingSpec) -> Option<DecodedComponent> {
    if block.iter().all(|&v| v == 0.0) {
        return None;
    }
    let node = block[3..3 + spec.nodes].iter().position(|&v| v == 1.0)?;
    Some(DecodedComponent {
        duration: (block[0] * spec.horizon as f64).round() as u32,
        resource: (block[1] * spec.width as f64).round() as u32,
        index: (block[2] * spec.max_components as f64).round() as u32,
        node,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{JobId, JobSpec, NodeId};
    use std::sync::Arc;

    fn setup(jobs: Vec<JobSpec>) -> (SimState, EncodingSpec) {
        let topo = Arc::new(Topology::uniform(3, 4, 1).unwrap());
        let cfg = SimConfig {
            queue_slots: 2,
            horizon: 6,
            link_horizon: 6,
            backlog_cap: 4,
            ..SimConfig::default()
        };
        let spec = EncodingSpec::new(5, 3, &cfg, &topo).unwrap();
        (SimState::new(topo, cfg, jobs).unwrap(), spec)
    }

    #[test]
    fn empty_state_is_all_zero() {
        let (s, spec) = setup(vec![]);
        let e = encode_state(&s, &spec).unwrap();
        assert_eq!(e.len(), 3 * 6 * 5 + 6 * 6 + 2 * 3 * 6 + 1);
        assert!(e.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn padding_block_is_zero() {
        let j = JobSpec::from_parts(JobId(1), 0, [(2, 3, NodeId(2), 1), (1, 1, NodeId(3), 0)]);
        let (s, spec) = setup(vec![j]);
        let e = encode_state(&s, &spec).unwrap();
        let third = spec.queue_block(0, 2);
        assert!(e.0[third..third + spec.block_width()].iter().all(|&v| v == 0.0));
        let first = spec.queue_block(0, 0);
        let d = decode_queue_block(&e.0[first..first + spec.block_width()], &spec).unwrap();
        assert_eq!(d, DecodedComponent { duration: 2, resource: 3, index: 1, node: 1 });
    }

    #[test]
    fn too_many_components() {
        let j = JobSpec::from_parts(
            JobId(1),
            0,
            [(1, 1, NodeId(1), 1), (1, 1, NodeId(1), 1), (1, 1, NodeId(1), 1), (1, 1, NodeId(1), 0)],
        );
        let (s, spec) = setup(vec![j]);
        assert!(matches!(encode_state(&s, &spec), Err(EncodeError::TooManyComponents { got: 4, max: 3 })));
    }

    #[test]
    fn occupancy_and_backlog_show_up() {
        let jobs: Vec<JobSpec> = (0..4)
            .map(|i| JobSpec::from_parts(JobId(i), 0, [(2, 3, NodeId(1), 1), (1, 2, NodeId(2), 0)]))
            .collect();
        let (mut s, spec) = setup(jobs);
        s.try_schedule_job(1).unwrap();
        let e = encode_state(&s, &spec).unwrap();
        assert_eq!(e.0[spec.backlog_cell()], 0.5);
        let row0: f64 = (0..5).map(|c| e.0[spec.node_cell(0, 0, c)]).sum();
        assert_eq!(row0, 3.0);
        // transfer 1 -> 2 at slot 2 is link index 0
        assert_eq!(e.0[spec.link_cell(0, 2)], 1.0);
        assert_eq!(e.0[spec.link_cell(0, 1)], 0.0);
        assert!(e.0.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn packing_round_trips() {
        let jobs: Vec<JobSpec> = (0..4)
            .map(|i| JobSpec::from_parts(JobId(i), 0, [(2, 3, NodeId(1), 1), (1, 2, NodeId(2), 0)]))
            .collect();
        let (mut s, spec) = setup(jobs);
        s.try_schedule_job(1).unwrap();
        let e = encode_state(&s, &spec).unwrap();
        let p = PackedState::pack(&e, spec.binary_len()).unwrap();
        assert_eq!(p.unpack(), e);
        assert!(PackedState::pack(&e, spec.len()).is_err());
    }

    #[test]
    fn rejects_mismatched_state() {
        let (s, mut spec) = setup(vec![]);
        spec.horizon = 7;
        assert!(matches!(encode_state(&s, &spec), Err(EncodeError::Mismatch(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_jobs() -> impl Strategy<Value = Vec<JobSpec>> {
            prop::collection::vec(
                (0u64..6, prop::collection::vec((1u32..=4, 1u32..=4, 1u32..=3, 1u64..=2), 1..=3)),
                0..8,
            )
            .prop_map(|raw| {
                raw.into_iter()
                    .enumerate()
                    .map(|(id, (arrival, parts))| {
                        let m = parts.len();
                        JobSpec::from_parts(
                            JobId(id as u64),
                            arrival,
                            parts
                                .into_iter()
                                .enumerate()
                                .map(|(i, (d, r, n, h))| (d, r, NodeId(n), if i + 1 < m { h } else { 0 })),
                        )
                    })
                    .collect()
            })
        }

        fn sim(jobs: Vec<JobSpec>) -> (SimState, EncodingSpec) {
            let topo = Arc::new(Topology::uniform(3, 4, 1).unwrap());
            let cfg = SimConfig {
                queue_slots: 3,
                horizon: 18,
                link_horizon: 18,
                backlog_cap: 8,
                ..SimConfig::default()
            };
            let spec = EncodingSpec::new(4, 3, &cfg, &topo).unwrap();
            (SimState::new(topo, cfg, jobs).unwrap(), spec)
        }

        proptest! {
            #[test]
            fn entries_bounded_and_length_fixed(jobs in arb_jobs(), actions in prop::collection::vec(0usize..=3, 0..40)) {
                let (mut s, spec) = sim(jobs);
                for a in actions {
                    let e = encode_state(&s, &spec).unwrap();
                    prop_assert_eq!(e.len(), spec.len());
                    prop_assert!(e.0.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
                    prop_assert!(e.0[..spec.binary_len()].iter().all(|&v| v == 0.0 || v == 1.0));
                    prop_assert_eq!(PackedState::pack(&e, spec.binary_len()).unwrap().unpack(), e);
                    if s.is_done() {
                        break;
                    }
                    s.step(a).unwrap();
                }
            }

            #[test]
            fn queue_blocks_decode_to_profiles(jobs in arb_jobs()) {
                let (s, spec) = sim(jobs);
                let e = encode_state(&s, &spec).unwrap();
                for (slot, w) in s.queue().iter().enumerate() {
                    for comp in 0..spec.max_components {
                        let at = spec.queue_block(slot, comp);
                        let got = decode_queue_block(&e.0[at..at + spec.block_width()], &spec);
                        let want = w.as_ref().and_then(|w| w.spec.components.get(comp)).map(|c| DecodedComponent {
                            duration: c.duration,
                            resource: c.resource,
                            index: c.index,
                            node: s.topology().node_index(c.assigned_node).unwrap(),
                        });
                        prop_assert_eq!(got, want);
                    }
                }
            }
        }
    }
}
