use std::path::Path;
use std::process::{Command, Output};

use edgesched::oracle::{check_schedules, random_tiny_instance, write_instance};
use edgesched::workloads::read_jobs_jsonl;
use edgesched::{run_episode, Lbf, Policy, RandomPolicy, Sjf};
use edgesched_cli::{cmd_eval, cmd_train, CliError, ExperimentConfig, Workbench};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn edgesched(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edgesched")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("exp.toml");
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

const SMOKE: &str = "[train]\nepisodes = 5\nstreams = 2\n[workload]\njobs = 6\n[agent]\nhidden = [8]\nwarmup = 16\n\
                     [eval]\nepisodes = 2\narrival_rates = [0.5]\n";

fn smoke(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml(SMOKE).unwrap();
    cfg.out = out.to_path_buf();
    cfg
}

#[test]
fn train_smoke_writes_one_row_per_episode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMOKE);
    let out = dir.path().join("run");
    let o = edgesched(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("train.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("# edgesched train"));
    assert!(lines[1].starts_with("# config-sha256: ") && lines[1].len() == "# config-sha256: ".len() + 64);
    assert_eq!(lines[3], "episode,reward,epsilon,critic_loss,mean_slowdown,transitions");
    assert_eq!(lines.len() - 4, 5);
    assert!(out.join("checkpoint/manifest.json").exists());
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[agent]\nlearning_rate = 0.1\n");
    let o = edgesched(&["calibrate-load", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn drl_without_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMOKE);
    let o = edgesched(&["eval", "--config", &cfg, "--policies", "sjf,drl", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--checkpoint"));
}

#[test]
fn malformed_inputs_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let bad_instance = dir.path().join("bad.jsonl");
    std::fs::write(&bad_instance, "{\"topology\": 3}\n").unwrap();
    let o = edgesched(&["oracle-check", "--instance", bad_instance.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));

    let trace = dir.path().join("trace.csv");
    std::fs::write(&trace, "job_id,component_index,schedule_ts,finish_ts,cpu_frac,mem_frac\n1,1,100,50,0.5,0.5\n").unwrap();
    let cfg = write_config(
        dir.path(),
        &format!(
            "[topology]\ncapacity = 100\n[encoding]\nwidth = 100\n[sim]\nhorizon = 200\n\
             [workload]\nvariant = \"trace\"\n[trace]\npath = {:?}\n",
            trace.to_str().unwrap()
        ),
    );
    let o = edgesched(&["gen-workload", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

#[test]
fn exploding_learning_rate_exits_3_with_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[train]\nepisodes = 20\nstreams = 1\n[workload]\njobs = 10\n\
         [agent]\nhidden = [8]\nwarmup = 16\ntrain_every = 1\ncritic_lr = 1e300\nactor_lr = 1e300\n",
    );
    let out = dir.path().join("run");
    let o = edgesched(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("train.csv").exists());
    assert!(out.join("checkpoint/manifest.json").exists());
}

#[test]
fn oracle_check_and_instance_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let o = edgesched(&["oracle-check", "--count", "5", "--seed", "3", "--out", d]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("0 replay failures, 0 below the optimum"));

    let inst = random_tiny_instance(&mut ChaCha8Rng::seed_from_u64(9));
    let path = dir.path().join("inst.jsonl");
    let mut buf = Vec::new();
    write_instance(&mut buf, &inst).unwrap();
    std::fs::write(&path, buf).unwrap();
    let o = edgesched(&["oracle-check", "--instance", path.to_str().unwrap(), "--out", d]);
    assert!(o.status.success());
    let csv = std::fs::read_to_string(dir.path().join("oracle.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn gen_workload_streams_read_back() {
    let dir = tempfile::tempdir().unwrap();
    let o = edgesched(&["gen-workload", "--count", "2", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    for i in 0..2 {
        let file = std::fs::File::open(dir.path().join(format!("stream-{i:03}.jsonl"))).unwrap();
        let jobs = read_jobs_jsonl(std::io::BufReader::new(file)).unwrap();
        assert_eq!(jobs.len(), ExperimentConfig::default().workload.jobs);
    }
}

#[test]
fn eval_matches_an_independent_replay() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke(dir.path());
    cfg.workload.jobs = 4;
    cfg.eval.episodes = 1;
    let names: Vec<String> = ["sjf", "lbf", "random"].iter().map(|s| s.to_string()).collect();
    let outcome = cmd_eval(&cfg, None, &names).unwrap();
    let bench = Workbench::new(&cfg).unwrap();
    let jobs = bench.eval_jobs(0, 0).unwrap();
    for row in &outcome.episodes {
        let mut policy: Box<dyn Policy> = match row.policy.as_str() {
            "sjf" => Box::new(Sjf),
            "lbf" => Box::new(Lbf),
            _ => Box::new(RandomPolicy::new(edgesched_cli::stream_seed(cfg.seed, 3, 0))),
        };
        let mut sim = bench.env(jobs.clone()).unwrap();
        run_episode(&mut sim, policy.as_mut()).unwrap();
        let replay = check_schedules(&bench.topology, &jobs, sim.schedule_log(), None, cfg.sim.link_exclusivity);
        assert!(replay.passed(), "{:?}", replay.violations);
        let n = jobs.len() as f64;
        let slowdown = replay.total_slowdown / n;
        let completion = replay.jobs.iter().map(|j| j.completion_time as f64).sum::<f64>() / n;
        assert!((row.slowdown - slowdown).abs() < 1e-12, "{}: {} vs {slowdown}", row.policy, row.slowdown);
        assert!((row.completion - completion).abs() < 1e-12);
        assert_eq!(row.censored, 0);
    }
}

#[test]
fn single_job_streams_have_unit_slowdown() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke(dir.path());
    cfg.workload.jobs = 1;
    cfg.eval.episodes = 4;
    cfg.eval.arrival_rates = vec![0.5, 0.9];
    let names: Vec<String> = ["sjf", "lbf", "random"].iter().map(|s| s.to_string()).collect();
    let outcome = cmd_eval(&cfg, None, &names).unwrap();
    assert_eq!(outcome.rows.len(), 6);
    for r in &outcome.rows {
        assert_eq!(r.slowdown_mean, 1.0, "{r:?}");
        assert_eq!(r.slowdown_stderr, 0.0);
    }
}

#[test]
fn random_is_no_better_than_sjf_at_high_load() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.out = dir.path().to_path_buf();
    cfg.eval.arrival_rates = vec![0.9];
    let names: Vec<String> = ["sjf", "random"].iter().map(|s| s.to_string()).collect();
    let outcome = cmd_eval(&cfg, None, &names).unwrap();
    let sjf = outcome.row("sjf", Some(0.9)).unwrap();
    let random = outcome.row("random", Some(0.9)).unwrap();
    assert_eq!(sjf.episodes, 30);
    assert!(random.slowdown_mean >= sjf.slowdown_mean, "random {random:?} sjf {sjf:?}");
}

#[test]
fn checkpoint_encoding_must_match_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke(&dir.path().join("a"));
    let trained = cmd_train(&cfg).unwrap();
    let mut other = cfg.clone();
    other.sim.queue_slots = 4;
    let names = vec!["drl".to_string()];
    let err = cmd_eval(&other, Some(&trained.checkpoint), &names).unwrap_err();
    assert!(matches!(err, CliError::Config(_)), "{err}");
    assert_eq!(trained.agent.encoding, Workbench::new(&cfg).unwrap().encoding);
}
