//! Experiment runner: training, paired evaluation, load calibration, oracle
//! checks and workload generation, all driven by one TOML config.

pub mod config;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use edgesched::agent::{run_training, Agent, AgentError, AgentPolicy, TrainingConfig};
use edgesched::oracle::{self, audit_policy, exact_min_slowdown, OracleError, TinyInstance};
use edgesched::workloads::{
    arrival_window, compute_load, generate_stream, parse_trace_file, write_jobs_jsonl, LoadReport, TraceOptions,
    Variant, WorkloadError,
};
use edgesched::{run_episode, EncodingSpec, JobSpec, Lbf, Policy, RandomPolicy, SimConfig, SimError, SimState, Sjf, Topology};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

pub use config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("check failed: {0}")]
    CheckFailed(String),
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Parse(_) => 4,
            _ => 1,
        }
    }
}

impl From<AgentError> for CliError {
    fn from(e: AgentError) -> Self {
        match e {
            AgentError::Divergence(m) => CliError::Divergence(m),
            AgentError::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(m) => CliError::Config(format!("sim: {m}")),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<WorkloadError> for CliError {
    fn from(e: WorkloadError) -> Self {
        match e {
            WorkloadError::Config(m) => CliError::Config(format!("workload: {m}")),
            WorkloadError::Parse { .. } => CliError::Parse(e.to_string()),
            WorkloadError::Io(e) => CliError::Io(e),
        }
    }
}

/// Seed domains keep training, validation, evaluation and policy
/// randomness on disjoint streams.
const TRAIN_DOMAIN: u64 = 1;
const VALIDATION_DOMAIN: u64 = 2;
const RANDOM_POLICY_DOMAIN: u64 = 3;
const EVAL_DOMAIN: u64 = 16;

pub fn stream_seed(base: u64, domain: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(domain);
    rng.set_word_pos(u128::from(index) * 2);
    rng.next_u64()
}

/// Topology, simulator settings and job streams derived from one config.
pub struct Workbench {
    pub config: ExperimentConfig,
    pub topology: Arc<Topology>,
    pub sim: SimConfig,
    pub encoding: EncodingSpec,
    trace_windows: Vec<Vec<JobSpec>>,
}

impl Workbench {
    pub fn new(config: &ExperimentConfig) -> Result<Self, CliError> {
        config.validate()?;
        let topology = Arc::new(config.topology()?);
        let mut trace_windows = Vec::new();
        if config.workload.variant == Variant::Trace {
            let t = config.trace.as_ref().expect("validated");
            let opts = TraceOptions {
                slot_len: t.slot_len,
                width: t.width,
            };
            let parsed = parse_trace_file(&t.path, &opts, &topology)?;
            if parsed.jobs.is_empty() {
                return Err(CliError::Parse(format!("{}: no complete jobs", t.path.display())));
            }
            trace_windows = parsed
                .jobs
                .chunks(config.workload.jobs)
                .map(|w| {
                    let start = w[0].arrival_slot;
                    w.iter()
                        .cloned()
                        .map(|mut j| {
                            j.arrival_slot -= start;
                            j
                        })
                        .collect()
                })
                .collect();
        }
        Ok(Workbench {
            config: config.clone(),
            sim: config.sim_config(),
            encoding: config.encoding()?,
            topology,
            trace_windows,
        })
    }

    /// Rates evaluated per cell; a trace has a single, unnamed level.
    pub fn levels(&self) -> Vec<Option<f64>> {
        match self.config.workload.variant {
            Variant::Trace => vec![None],
            _ => self.config.eval.arrival_rates.iter().copied().map(Some).collect(),
        }
    }

    /// Job stream `index` of `domain`. Synthetic streams depend only on the
    /// seed, domain, index and rate; trace streams cycle through windows of
    /// the parsed trace.
    pub fn jobs(&self, rate: Option<f64>, domain: u64, index: u64) -> Result<Vec<JobSpec>, CliError> {
        if !self.trace_windows.is_empty() {
            return Ok(self.trace_windows[index as usize % self.trace_windows.len()].clone());
        }
        let mut w = self.config.workload.clone();
        w.seed = stream_seed(self.config.workload.seed, domain, index);
        if let Some(p) = rate {
            w.arrival_rate = p;
        }
        Ok(generate_stream(&w, &self.topology, self.encoding.width as u32)?)
    }

    /// Evaluation stream `index` at level `level` of [`Workbench::levels`].
    pub fn eval_jobs(&self, level: usize, index: u64) -> Result<Vec<JobSpec>, CliError> {
        let rate = self.levels()[level];
        self.jobs(rate, EVAL_DOMAIN + level as u64, index)
    }

    pub fn env(&self, jobs: Vec<JobSpec>) -> Result<SimState, CliError> {
        Ok(SimState::new(Arc::clone(&self.topology), self.sim.clone(), jobs)?)
    }

    fn training_rate(&self) -> Option<f64> {
        (self.config.workload.variant != Variant::Trace).then_some(self.config.workload.arrival_rate)
    }
}

fn csv_with_header(path: &Path, cfg: &ExperimentConfig, kind: &str) -> Result<csv::Writer<BufWriter<File>>, CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "# edgesched {kind}")?;
    writeln!(out, "# config-sha256: {}", cfg.hash())?;
    writeln!(out, "# seed: {}", cfg.seed)?;
    Ok(csv::Writer::from_writer(out))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub episode: usize,
    pub reward: f64,
    pub epsilon: f64,
    pub critic_loss: f64,
    pub mean_slowdown: f64,
    pub transitions: usize,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub curve: Vec<CurveRow>,
    pub curve_path: PathBuf,
    pub checkpoint: PathBuf,
    pub agent: Agent,
    pub best_episode: Option<usize>,
}

/// Mean of the first and last tenth of the episode rewards.
pub fn decile_means(curve: &[CurveRow]) -> Option<(f64, f64)> {
    let d = curve.len() / 10;
    if d == 0 {
        return None;
    }
    let mean = |rows: &[CurveRow]| rows.iter().map(|r| r.reward).sum::<f64>() / rows.len() as f64;
    Some((mean(&curve[..d]), mean(&curve[curve.len() - d..])))
}

fn greedy_slowdown(bench: &Workbench, agent: &Agent, rate: Option<f64>, domain: u64, episodes: usize) -> Result<f64, CliError> {
    let shared = Arc::new(agent.clone());
    let mut total = 0.0;
    for i in 0..episodes {
        let mut sim = bench.env(bench.jobs(rate, domain, i as u64)?)?;
        let mut policy = AgentPolicy::new(Arc::clone(&shared));
        let (m, _) = run_episode(&mut sim, &mut policy)?;
        total += m.slowdown_with_censored();
    }
    Ok(total / episodes as f64)
}

/// Trains an agent and writes `train.csv` plus a checkpoint directory under
/// `cfg.out`. On divergence the curve and the last good agent are still
/// written before the error is returned.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutcome, CliError> {
    let bench = Workbench::new(cfg)?;
    let mut agent = Agent::new(bench.encoding.clone(), cfg.agent.clone(), cfg.seed)?;
    let tcfg = TrainingConfig {
        episodes: cfg.train.episodes,
        eval_every: cfg.train.eval_every,
        seed: stream_seed(cfg.seed, TRAIN_DOMAIN, u64::MAX),
    };
    let rate = bench.training_rate();
    let streams = cfg.train.streams;
    let report = run_training(
        &mut agent,
        &tcfg,
        |e| {
            let index = if streams > 0 { e % streams } else { e } as u64;
            let jobs = bench.jobs(rate, TRAIN_DOMAIN, index).map_err(|e| AgentError::Config(e.to_string()))?;
            bench.env(jobs).map_err(|e| AgentError::Config(e.to_string()))
        },
        |a| {
            greedy_slowdown(&bench, a, rate, VALIDATION_DOMAIN, cfg.train.eval_episodes)
                .map_err(|e| AgentError::Config(e.to_string()))
        },
    )?;
    let curve: Vec<CurveRow> = report
        .curve
        .iter()
        .map(|r| CurveRow {
            episode: r.episode,
            reward: r.total_reward,
            epsilon: r.epsilon,
            critic_loss: r.critic_loss,
            mean_slowdown: r.mean_slowdown,
            transitions: r.transitions,
        })
        .collect();
    let curve_path = cfg.out.join("train.csv");
    let mut w = csv_with_header(&curve_path, cfg, "train")?;
    for row in &curve {
        w.serialize(row)?;
    }
    w.flush()?;
    let checkpoint = cfg.out.join("checkpoint");
    report.best.save(&checkpoint)?;
    if let Some((first, last)) = decile_means(&curve) {
        log::info!("reward first decile {first:.4}, final decile {last:.4}");
    }
    if let Some(msg) = report.diverged {
        return Err(CliError::Divergence(format!(
            "{msg}; curve and last good agent written to {}",
            cfg.out.display()
        )));
    }
    Ok(TrainOutcome {
        curve,
        curve_path,
        checkpoint,
        agent: report.best,
        best_episode: report.best_episode,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeRow {
    pub policy: String,
    pub arrival_rate: Option<f64>,
    pub episode: usize,
    pub load: f64,
    pub completion: f64,
    pub slowdown: f64,
    pub completed: usize,
    pub censored: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub policy: String,
    pub arrival_rate: Option<f64>,
    pub load: f64,
    pub episodes: usize,
    pub completion_mean: f64,
    pub completion_stderr: f64,
    pub slowdown_mean: f64,
    pub slowdown_stderr: f64,
    pub censored: usize,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub rows: Vec<EvalRow>,
    pub episodes: Vec<EpisodeRow>,
}

impl EvalOutcome {
    pub fn row(&self, policy: &str, rate: Option<f64>) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.policy == policy && r.arrival_rate == rate)
    }
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub const KNOWN_POLICIES: [&str; 4] = ["sjf", "lbf", "random", "drl"];

/// Parses a comma-separated policy list, rejecting unknown names.
pub fn parse_policies(list: &str) -> Result<Vec<String>, CliError> {
    let names: Vec<String> = list.split(',').map(|s| s.trim().to_lowercase()).filter(|s| !s.is_empty()).collect();
    if names.is_empty() {
        return Err(CliError::Config("--policies: empty list".into()));
    }
    if let Some(bad) = names.iter().find(|n| !KNOWN_POLICIES.contains(&n.as_str())) {
        return Err(CliError::Config(format!("--policies: unknown policy {bad:?}")));
    }
    Ok(names)
}

/// Runs every policy on the same evaluation streams at every level and
/// writes `eval.csv` (cell summaries) and `eval_episodes.csv`. Slowdown and
/// completion include jobs still in the system at the cutoff, counted at
/// their time so far.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>, policies: &[String]) -> Result<EvalOutcome, CliError> {
    let bench = Workbench::new(cfg)?;
    let wants_drl = policies.iter().any(|p| p == "drl");
    let agent = match (wants_drl, checkpoint) {
        (true, None) => return Err(CliError::Config("policy drl needs --checkpoint".into())),
        (true, Some(dir)) => {
            let a = Agent::load(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
            if a.encoding != bench.encoding {
                return Err(CliError::Config(format!(
                    "checkpoint {} was trained with a different encoding",
                    dir.display()
                )));
            }
            Some(Arc::new(a))
        }
        (false, _) => None,
    };
    let mut rows = Vec::new();
    let mut episodes = Vec::new();
    for (level, rate) in bench.levels().into_iter().enumerate() {
        let streams: Vec<Vec<JobSpec>> = (0..cfg.eval.episodes)
            .map(|i| bench.eval_jobs(level, i as u64))
            .collect::<Result<_, _>>()?;
        let loads: Vec<f64> = streams
            .iter()
            .map(|jobs| Ok(compute_load(jobs, &bench.topology, arrival_window(jobs))?.combined))
            .collect::<Result<_, CliError>>()?;
        let load = loads.iter().sum::<f64>() / loads.len() as f64;
        for name in policies {
            let mut cell = Vec::with_capacity(streams.len());
            for (i, jobs) in streams.iter().enumerate() {
                let mut policy: Box<dyn Policy> = match name.as_str() {
                    "sjf" => Box::new(Sjf),
                    "lbf" => Box::new(Lbf),
                    "random" => Box::new(RandomPolicy::new(stream_seed(cfg.seed, RANDOM_POLICY_DOMAIN, i as u64))),
                    "drl" => Box::new(AgentPolicy::new(Arc::clone(agent.as_ref().expect("loaded above")))),
                    other => return Err(CliError::Config(format!("unknown policy {other:?}"))),
                };
                let mut sim = bench.env(jobs.clone())?;
                let (m, _) = run_episode(&mut sim, policy.as_mut())?;
                cell.push(EpisodeRow {
                    policy: name.clone(),
                    arrival_rate: rate,
                    episode: i,
                    load: loads[i],
                    completion: m.completion_with_censored(),
                    slowdown: m.slowdown_with_censored(),
                    completed: m.completed,
                    censored: m.censored,
                });
            }
            let (completion_mean, completion_stderr) = mean_stderr(&cell.iter().map(|r| r.completion).collect::<Vec<_>>());
            let (slowdown_mean, slowdown_stderr) = mean_stderr(&cell.iter().map(|r| r.slowdown).collect::<Vec<_>>());
            rows.push(EvalRow {
                policy: name.clone(),
                arrival_rate: rate,
                load,
                episodes: cell.len(),
                completion_mean,
                completion_stderr,
                slowdown_mean,
                slowdown_stderr,
                censored: cell.iter().map(|r| r.censored).sum(),
            });
            episodes.extend(cell);
        }
    }
    let mut w = csv_with_header(&cfg.out.join("eval.csv"), cfg, "eval")?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut w = csv_with_header(&cfg.out.join("eval_episodes.csv"), cfg, "eval episodes")?;
    for r in &episodes {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(EvalOutcome { rows, episodes })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadRow {
    pub arrival_rate: Option<f64>,
    pub streams: usize,
    pub compute: f64,
    pub network: f64,
    pub combined: f64,
}

/// Mean offered load of the evaluation streams at each level, over each
/// stream's arrival window. Writes `load.csv`.
pub fn cmd_calibrate_load(cfg: &ExperimentConfig) -> Result<Vec<LoadRow>, CliError> {
    let bench = Workbench::new(cfg)?;
    let mut rows = Vec::new();
    for (level, rate) in bench.levels().into_iter().enumerate() {
        let mut acc = LoadReport {
            compute: 0.0,
            network: 0.0,
            combined: 0.0,
        };
        let n = cfg.eval.episodes;
        for i in 0..n {
            let jobs = bench.eval_jobs(level, i as u64)?;
            let l = compute_load(&jobs, &bench.topology, arrival_window(&jobs))?;
            acc.compute += l.compute;
            acc.network += l.network;
            acc.combined += l.combined;
        }
        rows.push(LoadRow {
            arrival_rate: rate,
            streams: n,
            compute: acc.compute / n as f64,
            network: acc.network / n as f64,
            combined: acc.combined / n as f64,
        });
    }
    let mut w = csv_with_header(&cfg.out.join("load.csv"), cfg, "calibrate-load")?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleRow {
    pub instance: usize,
    pub policy: String,
    pub total_slowdown: f64,
    pub optimum: Option<f64>,
    pub replay_passed: bool,
    pub violations: String,
}

#[derive(Debug, Clone)]
pub struct OracleSummary {
    pub instances: usize,
    pub rows: Vec<OracleRow>,
}

impl OracleSummary {
    pub fn replay_failures(&self) -> usize {
        self.rows.iter().filter(|r| !r.replay_passed).count()
    }

    /// Policy results that beat the supposed optimum.
    pub fn bound_failures(&self) -> usize {
        self.rows
            .iter()
            .filter(|r| r.optimum.is_some_and(|o| r.replay_passed && r.total_slowdown < o - 1e-9))
            .count()
    }

    pub fn passed(&self) -> bool {
        self.replay_failures() == 0 && self.bound_failures() == 0
    }
}

fn oracle_error(e: OracleError) -> CliError {
    match e {
        OracleError::Parse { .. } | OracleError::TooLarge(_) | OracleError::Model(_) => CliError::Parse(e.to_string()),
        OracleError::Io(e) => CliError::Io(e),
        OracleError::Sim(e) => e.into(),
    }
}

/// Checks the baselines against the exhaustive optimum on `instances`,
/// writing `oracle.csv` under `out`.
pub fn oracle_check(instances: &[TinyInstance], seed: u64, out: &Path) -> Result<OracleSummary, CliError> {
    let mut rows = Vec::new();
    for (i, inst) in instances.iter().enumerate() {
        let optimum = exact_min_slowdown(inst).map_err(oracle_error)?.map(|s| s.total_slowdown);
        let mut policies: Vec<Box<dyn Policy>> = vec![
            Box::new(Sjf),
            Box::new(Lbf),
            Box::new(RandomPolicy::new(stream_seed(seed, RANDOM_POLICY_DOMAIN, i as u64))),
        ];
        for p in policies.iter_mut() {
            let report = audit_policy(inst, p.as_mut()).map_err(oracle_error)?;
            rows.push(OracleRow {
                instance: i,
                policy: p.name().to_string(),
                total_slowdown: report.total_slowdown,
                optimum,
                replay_passed: report.passed(),
                violations: report.violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "),
            });
        }
    }
    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("oracle.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(OracleSummary {
        instances: instances.len(),
        rows,
    })
}

/// `count` random tiny instances from `seed`.
pub fn random_instances(seed: u64, count: usize) -> Vec<TinyInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| oracle::random_tiny_instance(&mut rng)).collect()
}

pub fn read_instance_file(path: &Path) -> Result<TinyInstance, CliError> {
    let file = File::open(path)?;
    oracle::read_instance(BufReader::new(file)).map_err(|e| match e {
        OracleError::Io(e) => CliError::Io(e),
        other => CliError::Parse(format!("{}: {}", path.display(), oracle_error(other))),
    })
}

/// Writes the first `count` training streams as JSON lines under `out` and
/// returns their paths with their offered load.
pub fn cmd_gen_workload(cfg: &ExperimentConfig, count: usize) -> Result<Vec<(PathBuf, LoadReport)>, CliError> {
    let bench = Workbench::new(cfg)?;
    fs::create_dir_all(&cfg.out)?;
    let mut written = Vec::new();
    for i in 0..count {
        let jobs = bench.jobs(bench.training_rate(), TRAIN_DOMAIN, i as u64)?;
        let path = cfg.out.join(format!("stream-{i:03}.jsonl"));
        let mut out = BufWriter::new(File::create(&path)?);
        write_jobs_jsonl(&mut out, &jobs)?;
        out.flush()?;
        let load = compute_load(&jobs, &bench.topology, arrival_window(&jobs))?;
        written.push((path, load));
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_seeds_differ_across_domains_and_indices() {
        let a = stream_seed(1, TRAIN_DOMAIN, 0);
        assert_eq!(a, stream_seed(1, TRAIN_DOMAIN, 0));
        assert_ne!(a, stream_seed(1, TRAIN_DOMAIN, 1));
        assert_ne!(a, stream_seed(1, EVAL_DOMAIN, 0));
        assert_ne!(a, stream_seed(2, TRAIN_DOMAIN, 0));
    }

    #[test]
    fn policy_list_parsing() {
        assert_eq!(parse_policies("sjf, LBF,random").unwrap(), ["sjf", "lbf", "random"]);
        assert!(matches!(parse_policies("sjf,fifo"), Err(CliError::Config(_))));
        assert!(parse_policies(",").is_err());
    }

    #[test]
    fn stderr_of_constant_is_zero() {
        assert_eq!(mean_stderr(&[2.0, 2.0, 2.0]), (2.0, 0.0));
        let (m, s) = mean_stderr(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decile_means_need_ten_episodes() {
        let row = |episode, reward| CurveRow {
            episode,
            reward,
            epsilon: 0.0,
            critic_loss: 0.0,
            mean_slowdown: 1.0,
            transitions: 1,
        };
        assert!(decile_means(&[row(0, 1.0)]).is_none());
        let curve: Vec<_> = (0..20).map(|i| row(i, i as f64)).collect();
        assert_eq!(decile_means(&curve), Some((0.5, 18.5)));
    }
}
