//! Job streams: the two synthetic datasets, CSV trace ingestion, JSON-lines
//! dumps and offered-load computation.

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ComponentSpec, JobId, JobSpec, NodeId, Topology};

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid workload configuration: {0}")]
    Config(String),
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Long-job component profile of dataset 1: (duration, resource).
pub const D1_LONG: (u32, u32) = (9, 9);
/// Short-job component profile of dataset 1: (duration, resource).
pub const D1_SHORT: (u32, u32) = (8, 18);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    D1,
    D2,
    Trace,
}

/// Inclusive integer range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub min: u32,
    pub max: u32,
}

impl Span {
    pub const fn new(min: u32, max: u32) -> Self {
        Span { min, max }
    }

    fn draw<R: Rng + ?Sized>(self, rng: &mut R) -> u32 {
        rng.gen_range(self.min..=self.max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Dataset2Ranges {
    pub long_duration: Span,
    pub short_duration: Span,
    pub resource: Span,
}

impl Default for Dataset2Ranges {
    fn default() -> Self {
        Dataset2Ranges {
            long_duration: Span::new(7, 12),
            short_duration: Span::new(2, 6),
            resource: Span::new(5, 18),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    pub variant: Variant,
    /// Per-slot Bernoulli arrival probability.
    pub arrival_rate: f64,
    pub long_fraction: f64,
    /// Jobs per episode.
    pub jobs: usize,
    pub max_components: usize,
    pub seed: u64,
    pub d2: Dataset2Ranges,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            variant: Variant::D1,
            arrival_rate: 0.5,
            long_fraction: 0.5,
            jobs: 30,
            max_components: 3,
            seed: 0,
            d2: Dataset2Ranges::default(),
        }
    }
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: String| Err(WorkloadError::Config(m));
        if !(self.arrival_rate > 0.0 && self.arrival_rate <= 1.0) {
            return bad(format!("arrival_rate {} not in (0, 1]", self.arrival_rate));
        }
        if !(0.0..=1.0).contains(&self.long_fraction) {
            return bad(format!("long_fraction {} not in [0, 1]", self.long_fraction));
        }
        if self.jobs == 0 {
            return bad("jobs must be at least 1".into());
        }
        if self.max_components == 0 {
            return bad("max_components must be at least 1".into());
        }
        let r = &self.d2;
        for (name, s) in [
            ("long_duration", r.long_duration),
            ("short_duration", r.short_duration),
            ("resource", r.resource),
        ] {
            if s.min == 0 || s.min > s.max {
                return bad(format!("d2.{name} range [{}, {}] is empty or contains 0", s.min, s.max));
            }
        }
        if r.long_duration.min <= r.short_duration.max {
            return bad("d2 long durations must all exceed short durations".into());
        }
        Ok(())
    }

    /// Largest (duration, resource) a generated component can have.
    pub fn max_profile(&self) -> (u32, u32) {
        match self.variant {
            Variant::D1 => (D1_LONG.0.max(D1_SHORT.0), D1_LONG.1.max(D1_SHORT.1)),
            Variant::D2 => (self.d2.long_duration.max, self.d2.resource.max),
            Variant::Trace => (0, 0),
        }
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Arrival slots of `n` jobs under per-slot Bernoulli(p). The uniform draw
/// for each slot does not depend on `p`, so raising `p` only adds arrivals.
fn bernoulli_arrivals(n: usize, p: f64, seed: u64) -> Vec<u64> {
    let mut rng = stream_rng(seed, 0);
    let mut out = Vec::with_capacity(n);
    let mut t = 0u64;
    while out.len() < n {
        if rng.gen::<f64>() < p {
            out.push(t);
        }
        t += 1;
    }
    out
}

/// Builds a job whose consecutive components sit on distinct nodes, with
/// output sizes set to one slot of transfer on the link used.
fn assemble(
    id: u64,
    arrival: u64,
    profiles: &[(u32, u32)],
    nodes: &[NodeId],
    topo: &Topology,
) -> JobSpec {
    let m = profiles.len();
    let parts: Vec<(u32, u32, NodeId, u64)> = profiles
        .iter()
        .enumerate()
        .map(|(i, &(d, r))| {
            let node = nodes[i % nodes.len()];
            let h = if i + 1 == m {
                0
            } else {
                let next = nodes[(i + 1) % nodes.len()];
                topo.bandwidth(node, next).unwrap_or(1)
            };
            (d, r, node, h)
        })
        .collect();
    JobSpec::from_parts(JobId(id), arrival, parts)
}

fn generate(
    cfg: &WorkloadConfig,
    topo: &Topology,
    width: u32,
    mut profile: impl FnMut(bool, &mut ChaCha8Rng) -> (u32, u32),
) -> Result<Vec<JobSpec>, WorkloadError> {
    cfg.validate()?;
    let (_, r_max) = cfg.max_profile();
    if r_max > width || r_max > topo.min_capacity() {
        return Err(WorkloadError::Config(format!(
            "resource {r_max} exceeds image width {width} or node capacity {}",
            topo.min_capacity()
        )));
    }
    let arrivals = bernoulli_arrivals(cfg.jobs, cfg.arrival_rate, cfg.seed);
    let mut rng = stream_rng(cfg.seed, 1);
    let all: Vec<NodeId> = topo.nodes().iter().map(|n| n.id).collect();
    let mut jobs = Vec::with_capacity(cfg.jobs);
    for (i, &arrival) in arrivals.iter().enumerate() {
        let long = rng.gen::<f64>() < cfg.long_fraction;
        let count = rng.gen_range(1..=cfg.max_components);
        let profiles: Vec<(u32, u32)> = (0..count).map(|_| profile(long, &mut rng)).collect();
        let mut order = all.clone();
        order.shuffle(&mut rng);
        jobs.push(assemble(i as u64, arrival, &profiles, &order, topo));
    }
    Ok(jobs)
}

/// Dataset 1: every long component is (9, 9), every short one (8, 18).
pub fn gen_dataset1(cfg: &WorkloadConfig, topo: &Topology, width: u32) -> Result<Vec<JobSpec>, WorkloadError> {
    if cfg.variant != Variant::D1 {
        return Err(WorkloadError::Config("dataset 1 generator needs variant d1".into()));
    }
    generate(cfg, topo, width, |long, _| if long { D1_LONG } else { D1_SHORT })
}

/// Dataset 2: per-component durations and resources drawn uniformly, with
/// long durations strictly above short ones.
pub fn gen_dataset2(cfg: &WorkloadConfig, topo: &Topology, width: u32) -> Result<Vec<JobSpec>, WorkloadError> {
    if cfg.variant != Variant::D2 {
        return Err(WorkloadError::Config("dataset 2 generator needs variant d2".into()));
    }
    let r = cfg.d2.clone();
    generate(cfg, topo, width, move |long, rng| {
        let d = if long { r.long_duration } else { r.short_duration }.draw(rng);
        (d, r.resource.draw(rng))
    })
}

/// Synthetic stream for `cfg.variant`.
pub fn generate_stream(cfg: &WorkloadConfig, topo: &Topology, width: u32) -> Result<Vec<JobSpec>, WorkloadError> {
    match cfg.variant {
        Variant::D1 => gen_dataset1(cfg, topo, width),
        Variant::D2 => gen_dataset2(cfg, topo, width),
        Variant::Trace => Err(WorkloadError::Config("trace streams come from parse_trace".into())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceOptions {
    /// Time units per slot.
    pub slot_len: u64,
    /// Resource slots per node image row; fractions are scaled by this.
    pub width: u32,
}

impl Default for TraceOptions {
    fn default() -> Self {
        TraceOptions {
            slot_len: 100,
            width: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct TraceRecord {
    pub job_id: u64,
    pub component_index: u32,
    pub schedule_ts: u64,
    pub finish_ts: u64,
    pub cpu_frac: f64,
    pub mem_frac: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedTrace {
    pub jobs: Vec<JobSpec>,
    /// Jobs dropped because their component times were not monotone.
    pub skipped: usize,
}

/// Reads the trace CSV (header row required). Durations are rounded up to
/// whole slots, resources to whole resource slots of `max(cpu, mem)`.
pub fn parse_trace<R: Read>(input: R, opts: &TraceOptions, topo: &Topology) -> Result<ParsedTrace, WorkloadError> {
    if opts.slot_len == 0 || opts.width == 0 {
        return Err(WorkloadError::Config("slot_len and width must be positive".into()));
    }
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = reader
        .headers()
        .map_err(|e| WorkloadError::Parse {
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    let mut by_job: BTreeMap<u64, Vec<TraceRecord>> = BTreeMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| WorkloadError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let fail = |msg: String| Err(WorkloadError::Parse { line, msg });
        let rec: TraceRecord = match row.deserialize(Some(&headers)) {
            Ok(r) => r,
            Err(e) => return fail(e.to_string()),
        };
        if rec.finish_ts <= rec.schedule_ts {
            return fail(format!("finish {} not after schedule {}", rec.finish_ts, rec.schedule_ts));
        }
        if rec.component_index == 0 {
            return fail("component_index starts at 1".into());
        }
        for (name, v) in [("cpu_frac", rec.cpu_frac), ("mem_frac", rec.mem_frac)] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} {v} outside [0, 1]"));
            }
        }
        by_job.entry(rec.job_id).or_default().push(rec);
    }

    let mut skipped = 0;
    let mut kept: Vec<(u64, Vec<TraceRecord>)> = Vec::new();
    for (id, mut recs) in by_job {
        recs.sort_by_key(|r| r.component_index);
        let contiguous = recs.iter().enumerate().all(|(i, r)| r.component_index as usize == i + 1);
        let monotone = recs.windows(2).all(|w| w[0].schedule_ts <= w[1].schedule_ts);
        if contiguous && monotone {
            kept.push((id, recs));
        } else {
            log::warn!("trace job {id}: components out of order, skipped");
            skipped += 1;
        }
    }
    let origin = kept.iter().map(|(_, r)| r[0].schedule_ts).min().unwrap_or(0);
    let mut staged: Vec<(u64, u64, Vec<(u32, u32)>)> = kept
        .into_iter()
        .map(|(id, recs)| {
            let arrival = (recs[0].schedule_ts - origin) / opts.slot_len;
            let profiles = recs
                .iter()
                .map(|r| {
                    let d = (r.finish_ts - r.schedule_ts).div_ceil(opts.slot_len).max(1) as u32;
                    let frac = r.cpu_frac.max(r.mem_frac);
                    let res = ((frac * opts.width as f64 - 1e-9).ceil().max(1.0)) as u32;
                    (d, res)
                })
                .collect();
            (arrival, id, profiles)
        })
        .collect();
    staged.sort_by_key(|(arrival, id, _)| (*arrival, *id));

    let nodes: Vec<NodeId> = topo.nodes().iter().map(|n| n.id).collect();
    let jobs = staged
        .into_iter()
        .enumerate()
        .map(|(ordinal, (arrival, id, profiles))| {
            let order: Vec<NodeId> = (0..nodes.len()).map(|k| nodes[(ordinal + k) % nodes.len()]).collect();
            assemble(id, arrival, &profiles, &order, topo)
        })
        .collect();
    Ok(ParsedTrace { jobs, skipped })
}

pub fn parse_trace_file(path: &Path, opts: &TraceOptions, topo: &Topology) -> Result<ParsedTrace, WorkloadError> {
    parse_trace(std::fs::File::open(path)?, opts, topo)
}

/// Compute, network and combined load ratios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LoadReport {
    pub compute: f64,
    pub network: f64,
    /// Mean of compute and network load.
    pub combined: f64,
}

/// Demand over capacity across `horizon` slots. Compute demand is
/// `sum(r * d)` against `sum(c) * horizon`; network demand is the data moved
/// between distinct nodes against `sum(b) * horizon`.
pub fn compute_load(jobs: &[JobSpec], topo: &Topology, horizon: u64) -> Result<LoadReport, WorkloadError> {
    if horizon == 0 {
        return Err(WorkloadError::Config("load horizon must be positive".into()));
    }
    let mut work = 0u128;
    let mut data = 0u128;
    for job in jobs {
        for (i, c) in job.components.iter().enumerate() {
            work += c.resource as u128 * c.duration as u128;
            if let Some(next) = job.components.get(i + 1) {
                if next.assigned_node != c.assigned_node {
                    data += c.output_bytes as u128;
                }
            }
        }
    }
    let cap: u128 = topo.nodes().iter().map(|n| n.capacity as u128).sum::<u128>() * horizon as u128;
    let bw: u128 = topo.links().map(|l| l.bandwidth as u128).sum::<u128>() * horizon as u128;
    let compute = work as f64 / cap as f64;
    let network = if bw == 0 { 0.0 } else { data as f64 / bw as f64 };
    Ok(LoadReport {
        compute,
        network,
        combined: (compute + network) / 2.0,
    })
}

/// Slots from 0 through the last arrival.
pub fn arrival_window(jobs: &[JobSpec]) -> u64 {
    jobs.iter().map(|j| j.arrival_slot + 1).max().unwrap_or(0)
}

/// One JSON object per line.
pub fn write_jobs_jsonl<W: Write>(mut out: W, jobs: &[JobSpec]) -> std::io::Result<()> {
    for j in jobs {
        serde_json::to_writer(&mut out, j)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Inverse of [`write_jobs_jsonl`]; blank lines are ignored.
pub fn read_jobs_jsonl<R: BufRead>(input: R) -> Result<Vec<JobSpec>, WorkloadError> {
    let mut jobs = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let job: JobSpec = serde_json::from_str(&line).map_err(|e| WorkloadError::Parse {
            line: i as u64 + 1,
            msg: e.to_string(),
        })?;
        jobs.push(job);
    }
    Ok(jobs)
}

/// Shortcut used by tests and fixtures.
pub fn component(job: u64, index: u32, d: u32, r: u32, node: u32, h: u64) -> ComponentSpec {
    ComponentSpec {
        job_id: JobId(job),
        index,
        duration: d,
        resource: r,
        assigned_node: NodeId(node),
        output_bytes: h,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::job_base_time;

    fn topo() -> Topology {
        Topology::uniform(3, 20, 5).unwrap()
    }

    fn d1(p: f64, n: usize, seed: u64) -> Vec<JobSpec> {
        let cfg = WorkloadConfig {
            arrival_rate: p,
            jobs: n,
            seed,
            ..WorkloadConfig::default()
        };
        gen_dataset1(&cfg, &topo(), 20).unwrap()
    }

    #[test]
    fn dataset1_profiles() {
        let t = topo();
        let jobs = d1(0.5, 200, 1);
        assert_eq!(jobs.len(), 200);
        let mut saw_long_pair = false;
        for j in &jobs {
            j.validate(&t).unwrap();
            let first = (j.components[0].duration, j.components[0].resource);
            assert!(first == D1_LONG || first == D1_SHORT);
            for c in &j.components {
                assert_eq!((c.duration, c.resource), first);
            }
            for w in j.components.windows(2) {
                assert_ne!(w[0].assigned_node, w[1].assigned_node);
                assert_eq!(w[0].output_bytes, 5);
            }
            if first == D1_LONG && j.len() == 2 {
                assert_eq!(job_base_time(j, &t).unwrap(), 19);
                saw_long_pair = true;
            }
        }
        assert!(saw_long_pair);
    }

    #[test]
    fn certain_arrivals_fill_consecutive_slots() {
        let arrivals: Vec<u64> = d1(1.0, 5, 3).iter().map(|j| j.arrival_slot).collect();
        assert_eq!(arrivals, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn generators_are_seed_deterministic() {
        assert_eq!(d1(0.7, 50, 9), d1(0.7, 50, 9));
        assert_ne!(d1(0.7, 50, 9), d1(0.7, 50, 10));
        let cfg = WorkloadConfig {
            variant: Variant::D2,
            jobs: 40,
            seed: 4,
            ..WorkloadConfig::default()
        };
        assert_eq!(gen_dataset2(&cfg, &topo(), 20).unwrap(), gen_dataset2(&cfg, &topo(), 20).unwrap());
    }

    #[test]
    fn profiles_do_not_depend_on_rate() {
        let slow = d1(0.3, 40, 2);
        let fast = d1(0.9, 40, 2);
        for (a, b) in slow.iter().zip(&fast) {
            assert_eq!(a.components, b.components);
            assert!(b.arrival_slot <= a.arrival_slot);
        }
    }

    #[test]
    fn dataset2_ranges_and_uniformity() {
        let cfg = WorkloadConfig {
            variant: Variant::D2,
            jobs: 5000,
            seed: 12,
            ..WorkloadConfig::default()
        };
        let jobs = gen_dataset2(&cfg, &topo(), 20).unwrap();
        let mut hist = BTreeMap::new();
        let mut total = 0;
        for j in &jobs {
            let long = j.components[0].duration >= 7;
            for c in &j.components {
                if long {
                    assert!((7..=12).contains(&c.duration));
                    *hist.entry(c.duration).or_insert(0usize) += 1;
                    total += 1;
                } else {
                    assert!((2..=6).contains(&c.duration));
                }
                assert!((5..=18).contains(&c.resource));
            }
        }
        // chi-square over 6 equiprobable long durations, 5 dof, p = 0.001
        let expected = total as f64 / 6.0;
        let chi2: f64 = hist.values().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        assert_eq!(hist.len(), 6);
        assert!(chi2 < 20.515, "chi2 {chi2}");
    }

    #[test]
    fn config_errors() {
        let bad_rate = WorkloadConfig {
            arrival_rate: 0.0,
            ..WorkloadConfig::default()
        };
        assert!(bad_rate.validate().is_err());
        let overlap = WorkloadConfig {
            variant: Variant::D2,
            d2: Dataset2Ranges {
                long_duration: Span::new(5, 9),
                ..Dataset2Ranges::default()
            },
            ..WorkloadConfig::default()
        };
        assert!(overlap.validate().is_err());
        let narrow = gen_dataset1(&WorkloadConfig::default(), &topo(), 16);
        assert!(matches!(narrow, Err(WorkloadError::Config(_))));
    }

    #[test]
    fn load_examples() {
        let one = Topology::uniform(1, 20, 1).unwrap();
        let job = JobSpec::from_parts(JobId(0), 0, [(9, 9, NodeId(1), 0)]);
        let l = compute_load(&[job], &one, 100).unwrap();
        assert_eq!(l.compute, 81.0 / 2000.0);
        assert_eq!(compute_load(&[], &topo(), 100).unwrap().combined, 0.0);
        assert!(compute_load(&[], &topo(), 0).is_err());
    }

    #[test]
    fn load_hand_computed_fixture() {
        // two jobs on 3 nodes (c = 20), 6 links (b = 5), horizon 10
        let t = topo();
        let a = JobSpec::from_parts(JobId(0), 0, [(2, 3, NodeId(1), 7), (4, 5, NodeId(2), 0)]);
        let b = JobSpec::from_parts(JobId(1), 4, [(1, 20, NodeId(3), 0)]);
        let l = compute_load(&[a, b], &t, 10).unwrap();
        // work = 6 + 20 + 20 = 46 over 600; data = 7 over 300
        assert!((l.compute - 46.0 / 600.0).abs() < 1e-12);
        assert!((l.network - 7.0 / 300.0).abs() < 1e-12);
        assert!((l.combined - (46.0 / 600.0 + 7.0 / 300.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn doubling_capacity_halves_compute_load() {
        let jobs = d1(0.5, 30, 1);
        let t = topo();
        let h = arrival_window(&jobs);
        let base = compute_load(&jobs, &t, h).unwrap();
        let doubled = compute_load(&jobs, &t.scale_capacity(2).unwrap(), h).unwrap();
        assert!((doubled.compute - base.compute / 2.0).abs() < 1e-12);
    }

    #[test]
    fn load_increases_with_rate() {
        let t = topo();
        for seed in 0..5 {
            let loads: Vec<f64> = [0.5, 0.7, 0.9]
                .iter()
                .map(|&p| {
                    let jobs = d1(p, 60, seed);
                    compute_load(&jobs, &t, arrival_window(&jobs)).unwrap().combined
                })
                .collect();
            assert!(loads[0] < loads[1] && loads[1] < loads[2], "{loads:?}");
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let jobs = d1(0.6, 12, 5);
        let mut buf = Vec::new();
        write_jobs_jsonl(&mut buf, &jobs).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 12);
        assert_eq!(read_jobs_jsonl(buf.as_slice()).unwrap(), jobs);
        let broken = b"{\"job_id\": 1}\n";
        assert!(matches!(read_jobs_jsonl(&broken[..]), Err(WorkloadError::Parse { line: 1, .. })));
    }

    const FIXTURE: &str = include_str!("../tests/fixtures/trace10.csv");

    #[test]
    fn trace_fixture_parses_to_hand_computed_jobs() {
        let t = topo();
        let parsed = parse_trace(FIXTURE.as_bytes(), &TraceOptions::default(), &t).unwrap();
        assert_eq!(parsed.skipped, 1);
        let expected = vec![
            JobSpec {
                job_id: JobId(7),
                arrival_slot: 0,
                components: vec![
                    component(7, 1, 3, 50, 1, 5),
                    component(7, 2, 1, 25, 2, 5),
                    component(7, 3, 3, 34, 3, 0),
                ],
            },
            JobSpec {
                job_id: JobId(3),
                arrival_slot: 5,
                components: vec![component(3, 1, 2, 1, 2, 5), component(3, 2, 2, 95, 3, 0)],
            },
            JobSpec {
                job_id: JobId(12),
                arrival_slot: 10,
                components: vec![
                    component(12, 1, 1, 100, 3, 5),
                    component(12, 2, 1, 5, 1, 5),
                    component(12, 3, 3, 40, 2, 0),
                ],
            },
        ];
        assert_eq!(parsed.jobs, expected);
    }

    #[test]
    fn trace_quantization_examples() {
        let csv = "job_id,component_index,schedule_ts,finish_ts,cpu_frac,mem_frac\n1,1,100,400,0.5,0.3\n";
        let parsed = parse_trace(csv.as_bytes(), &TraceOptions::default(), &topo()).unwrap();
        let c = &parsed.jobs[0].components[0];
        assert_eq!((c.duration, c.resource), (3, 50));
    }

    #[test]
    fn malformed_rows_report_their_line() {
        let header = "job_id,component_index,schedule_ts,finish_ts,cpu_frac,mem_frac\n";
        let cases = [
            ("1,1,100,400,0.5,0.3\n2,1,500,500,0.1,0.1\n", 3),
            ("1,1,100,400,0.5,0.3\n1,2,500,600,0.1\n", 3),
            ("1,1,100,400,abc,0.3\n", 2),
            ("1,1,100,400,0.5,0.3\n1,2,400,500,0.5,0.3\n3,1,1,5,1.5,0.0\n", 4),
        ];
        for (body, line) in cases {
            let err = parse_trace(format!("{header}{body}").as_bytes(), &TraceOptions::default(), &topo()).unwrap_err();
            match err {
                WorkloadError::Parse { line: l, .. } => assert_eq!(l, line, "{body}"),
                other => panic!("{other}"),
            }
        }
    }
}
