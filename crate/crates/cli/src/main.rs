use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use edgesched_cli::{
    cmd_calibrate_load, cmd_eval, cmd_gen_workload, cmd_train, decile_means, oracle_check, parse_policies,
    random_instances, read_instance_file, CliError, ExperimentConfig,
};

#[derive(Parser)]
#[command(name = "edgesched", version, about = "Edge job scheduling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the actor-critic agent; writes train.csv and a checkpoint.
    Train,
    /// Evaluate policies on paired job streams; writes eval.csv.
    Eval {
        /// Checkpoint directory written by `train`; needed for drl.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated subset of sjf,lbf,random,drl.
        #[arg(long)]
        policies: Option<String>,
    },
    /// Report offered compute, network and combined load per arrival rate.
    CalibrateLoad,
    /// Check the baselines against the exhaustive optimum on tiny instances.
    OracleCheck {
        /// Instance file to check instead of random instances.
        #[arg(long)]
        instance: Option<PathBuf>,
        /// Number of random instances.
        #[arg(long, default_value_t = 100)]
        count: usize,
    },
    /// Write generated job streams as JSON lines.
    GenWorkload {
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
}

fn fmt_rate(rate: Option<f64>) -> String {
    rate.map_or_else(|| "trace".to_string(), |p| format!("{p}"))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    if let Some(out) = cli.out {
        cfg.out = out;
    }
    match cli.command {
        Command::Train => {
            let outcome = cmd_train(&cfg)?;
            println!("wrote {} ({} episodes)", outcome.curve_path.display(), outcome.curve.len());
            println!("checkpoint {}", outcome.checkpoint.display());
            if let Some((first, last)) = decile_means(&outcome.curve) {
                println!("mean reward: first decile {first:.4}, final decile {last:.4}");
            }
        }
        Command::Eval { checkpoint, policies } => {
            let default = if checkpoint.is_some() { "sjf,lbf,random,drl" } else { "sjf,lbf,random" };
            let names = parse_policies(policies.as_deref().unwrap_or(default))?;
            let outcome = cmd_eval(&cfg, checkpoint.as_deref(), &names)?;
            println!(
                "{:<8} {:>6} {:>7} {:>18} {:>16} {:>8}",
                "policy", "rate", "load", "completion", "slowdown", "censored"
            );
            for r in &outcome.rows {
                println!(
                    "{:<8} {:>6} {:>7.4} {:>10.3} ± {:<5.3} {:>8.4} ± {:<5.3} {:>8}",
                    r.policy,
                    fmt_rate(r.arrival_rate),
                    r.load,
                    r.completion_mean,
                    r.completion_stderr,
                    r.slowdown_mean,
                    r.slowdown_stderr,
                    r.censored
                );
            }
        }
        Command::CalibrateLoad => {
            println!("{:>6} {:>9} {:>9} {:>9}", "rate", "compute", "network", "combined");
            for r in cmd_calibrate_load(&cfg)? {
                println!(
                    "{:>6} {:>9.4} {:>9.4} {:>9.4}",
                    fmt_rate(r.arrival_rate),
                    r.compute,
                    r.network,
                    r.combined
                );
            }
        }
        Command::OracleCheck { instance, count } => {
            let instances = match instance {
                Some(path) => vec![read_instance_file(&path)?],
                None => random_instances(cfg.seed, count),
            };
            let summary = oracle_check(&instances, cfg.seed, &cfg.out)?;
            let runs = summary.rows.len();
            println!(
                "{} instances, {} policy runs: {} replay failures, {} below the optimum",
                summary.instances,
                runs,
                summary.replay_failures(),
                summary.bound_failures()
            );
            for r in summary.rows.iter().filter(|r| !r.replay_passed) {
                println!("instance {} {}: {}", r.instance, r.policy, r.violations);
            }
            if !summary.passed() {
                return Err(CliError::CheckFailed(format!("see {}", cfg.out.join("oracle.csv").display())));
            }
        }
        Command::GenWorkload { count } => {
            for (path, load) in cmd_gen_workload(&cfg, count)? {
                println!(
                    "{} compute {:.4} network {:.4} combined {:.4}",
                    path.display(),
                    load.compute,
                    load.network,
                    load.combined
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("edgesched: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
