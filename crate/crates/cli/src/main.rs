//! `aigc-edge`: generate workloads, run policy suites, verify event logs and
//! summarize results.
//!
//! Any configuration key can be overridden with `--key=value`, for example
//! `aigc-edge run --policy=sac --train_episodes=20 --gamma=0.9`.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aigc_edge::experiment::{self, ExperimentConfig, SummaryRow};
use aigc_edge::policies::PolicyKind;
use aigc_edge::quality::{fit_profile, read_samples_csv, MetricOrientation};
use aigc_edge::replay::replay_check_file;
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "aigc-edge",
    version,
    about = "Edge AIGC service-provider selection simulator",
    after_help = "Every configuration key can also be set as --key=value (e.g. --train_episodes=50)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// TOML configuration file (flat key = value table).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed; a sweep uses seed, seed+1, ...
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Freeze one workload (providers and tasks) to a JSON-lines file.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Output file; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the policy suite over the seed sweep and write all result files.
    Run {
        #[command(flatten)]
        common: Common,
        /// Policies to run (repeatable or comma-separated); all by default.
        #[arg(long, value_delimiter = ',')]
        policy: Vec<PolicyKind>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify an event log, or every log in a results directory.
    Check {
        path: PathBuf,
    },
    /// Recompute summary.csv from a results directory's runs.csv and print it.
    Report {
        dir: PathBuf,
    },
    /// Fit a four-parameter quality profile to `steps,value` samples.
    Fit {
        csv: PathBuf,
        #[arg(long, value_enum, default_value_t = Orientation::Higher)]
        orientation: Orientation,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Orientation {
    Higher,
    Lower,
}

/// Flags clap handles itself; every other `--key=value` is a config override.
const CLAP_FLAGS: [&str; 7] = ["config", "seed", "policy", "out", "orientation", "help", "version"];

fn split_overrides(args: impl IntoIterator<Item = String>) -> (Vec<String>, Vec<String>) {
    let mut passthrough = Vec::new();
    let mut overrides = Vec::new();
    for arg in args {
        match arg.strip_prefix("--").and_then(|rest| rest.split_once('=')) {
            Some((key, _)) if !CLAP_FLAGS.contains(&key) => overrides.push(arg[2..].to_string()),
            _ => passthrough.push(arg),
        }
    }
    (passthrough, overrides)
}

fn load_config(common: &Common, mut overrides: Vec<String>) -> Result<ExperimentConfig> {
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = match &common.config {
        Some(path) => ExperimentConfig::from_file(path, &overrides),
        None => ExperimentConfig::resolve(None, &overrides),
    }?;
    Ok(cfg)
}

fn toml_string(s: &str) -> String {
    serde_json::to_string(s).expect("strings serialize")
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args());
    let cli = Cli::parse_from(args);
    match dispatch(cli.command, overrides) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Returns `Ok(false)` when an invariant violation was found.
fn dispatch(command: Command, overrides: Vec<String>) -> Result<bool> {
    match command {
        Command::Generate { common, out } => {
            let cfg = load_config(&common, overrides)?;
            let workload = experiment::frozen_workload(&cfg, cfg.seed)?;
            match out {
                Some(path) => {
                    let mut buf = Vec::new();
                    workload.write_jsonl(&mut buf)?;
                    experiment::write_atomic(&path, &buf)?;
                    eprintln!(
                        "wrote {} providers and {} tasks to {}",
                        workload.asps.len(),
                        workload.tasks.len(),
                        path.display()
                    );
                }
                None => {
                    let stdout = io::stdout();
                    let mut w = BufWriter::new(stdout.lock());
                    workload.write_jsonl(&mut w)?;
                    w.flush()?;
                }
            }
            Ok(true)
        }
        Command::Run { common, policy, out } => {
            let mut overrides = overrides;
            if !policy.is_empty() {
                let names: Vec<&str> = policy.iter().map(|p| p.name()).collect();
                overrides.push(format!("policies={}", toml_string(&names.join(","))));
            }
            if let Some(out) = out {
                overrides.push(format!("out={}", toml_string(&out.to_string_lossy())));
            }
            let cfg = load_config(&common, overrides)?;
            let outcome = experiment::run_suite(&cfg, &mut |line| eprintln!("{line}"))?;
            print_summary(&outcome.summary);
            eprintln!("results in {}", cfg.out.display());
            check_dir(&cfg.out)
        }
        Command::Check { path } => {
            if !overrides.is_empty() {
                bail!("check takes no configuration overrides");
            }
            if path.is_dir() {
                check_dir(&path)
            } else {
                let report = replay_check_file(&path).with_context(|| format!("checking {}", path.display()))?;
                match &report.violation {
                    None => {
                        println!(
                            "{}: ok ({} decisions, {} finished, {} crashed, reward {:.4})",
                            path.display(),
                            report.decisions,
                            report.finished,
                            report.crashed,
                            report.episodic_reward
                        );
                        Ok(true)
                    }
                    Some(v) => {
                        println!("{}: {v}", path.display());
                        Ok(false)
                    }
                }
            }
        }
        Command::Report { dir } => {
            if !overrides.is_empty() {
                bail!("report takes no configuration overrides");
            }
            let summary = experiment::report(&dir)?;
            print_summary(&summary);
            Ok(true)
        }
        Command::Fit { csv, orientation } => {
            if !overrides.is_empty() {
                bail!("fit takes no configuration overrides");
            }
            let file = File::open(&csv).with_context(|| format!("opening {}", csv.display()))?;
            let samples = read_samples_csv(file)?;
            let orientation = match orientation {
                Orientation::Higher => MetricOrientation::HigherIsBetter,
                Orientation::Lower => MetricOrientation::LowerIsBetter,
            };
            let profile = fit_profile(&samples, orientation)?;
            println!("{}", serde_json::to_string_pretty(&profile)?);
            Ok(true)
        }
    }
}

fn check_dir(dir: &Path) -> Result<bool> {
    let checks = experiment::check_dir(dir)?;
    let mut clean = true;
    for c in &checks {
        if let Some(v) = &c.report.violation {
            clean = false;
            println!("{}: {v}", c.path.display());
        } else if let Some(m) = &c.record_mismatch {
            clean = false;
            println!("{}: {m}", c.path.display());
        }
    }
    println!(
        "checked {} event logs: {}",
        checks.len(),
        if clean { "all clean" } else { "VIOLATIONS FOUND" }
    );
    Ok(clean)
}

fn print_summary(rows: &[SummaryRow]) {
    println!(
        "{:<14} {:>5} {:>22} {:>22} {:>18}",
        "policy", "seeds", "episodic reward", "avg finished reward", "crashed tasks"
    );
    for r in rows {
        let q = match (r.avg_finished_task_reward_mean, r.avg_finished_task_reward_std) {
            (Some(m), Some(s)) => format!("{m:.4} ± {s:.4}"),
            _ => "-".to_string(),
        };
        println!(
            "{:<14} {:>5} {:>22} {:>22} {:>18}",
            r.policy.name(),
            r.n_seeds,
            format!("{:.2} ± {:.2}", r.episodic_reward_mean, r.episodic_reward_std),
            q,
            format!("{:.1} ± {:.1}", r.crashed_tasks_mean, r.crashed_tasks_std),
        );
    }
}
