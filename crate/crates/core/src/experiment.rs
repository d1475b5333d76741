//! Experiment configuration, seed sweeps and result files.
//!
//! A suite freezes one evaluation workload per seed, runs every requested
//! policy on it (training the agent first), and writes:
//!
//! ```text
//! <out>/config.toml                  resolved configuration
//! <out>/runs.csv                     one row per (policy, seed)
//! <out>/timings.csv                  wall time per (policy, seed)
//! <out>/summary.csv                  mean and standard deviation per policy
//! <out>/workloads/seed_<s>.jsonl     frozen evaluation workloads
//! <out>/events/<policy>_seed_<s>.jsonl
//! <out>/curves/sac_seed_<s>.csv      per-episode training curve
//! <out>/curves/sac_seed_<s>_validation.csv
//! <out>/checkpoints/sac_seed_<s>.json (+ .meta.json)
//! ```
//!
//! Everything except `timings.csv` is a deterministic function of the
//! configuration.

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::env::{run_episode, CrashMode, EpisodeRecord, Event, PenaltyConfig};
use crate::policies::{GreedyOracle, OverloadAvoid, PolicyKind, RandomPolicy, RoundRobin};
use crate::replay::{replay_check_file, ReplayError, ReplayReport};
use crate::sac::{self, EpisodeStats, EvalPoint, SacCheckpoint, SacConfig, SacError};
use crate::workload::{derive_seed, QualityLayout, Workload, WorkloadConfig, WorkloadError};

/// Label mixed into the evaluation seed for training episode `e`: `TRAIN_LABEL + e`.
pub const TRAIN_LABEL: u64 = 1_000;
/// Label for validation workload `k` (checkpoint selection): `VALIDATION_LABEL + k`.
pub const VALIDATION_LABEL: u64 = 100;
/// Upper bound on validation workloads, keeping their labels below `TRAIN_LABEL`.
pub const MAX_VALIDATION: usize = 100;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Csv { path: PathBuf, msg: String },
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Env(#[from] crate::env::EnvError),
    #[error(transparent)]
    Sac(#[from] SacError),
    #[error("{path}: {source}")]
    Replay {
        path: PathBuf,
        source: ReplayError,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Every tunable of a suite as one flat table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    // workload
    pub n_asps: usize,
    pub n_tasks: usize,
    pub horizon: f64,
    pub mean_interarrival: f64,
    pub demand_min: u32,
    pub demand_max: u32,
    pub capacity_min: u32,
    pub capacity_max: u32,
    pub step_time: f64,
    // provider quality curves
    pub quality_a_x: u32,
    pub quality_b_x: u32,
    pub quality_floor: f64,
    pub quality_peak_min: f64,
    pub quality_peak_max: f64,
    // crash penalty
    pub fixed_penalty: f64,
    pub progress_weight: f64,
    pub crash_mode: CrashMode,
    // agent
    pub gamma: f64,
    pub tau: f64,
    pub alpha: f64,
    pub auto_alpha: bool,
    pub target_entropy_ratio: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub update_every: usize,
    pub warmup_steps: usize,
    pub train_episodes: usize,
    #[serde(deserialize_with = "list_or_csv")]
    pub hidden: Vec<usize>,
    pub grad_clip: f64,
    pub normalize_inputs: bool,
    pub input_gain: f64,
    pub lr_final_ratio: f64,
    pub headroom_features: bool,
    pub keep_best: bool,
    pub eval_interval: usize,
    pub validation_episodes: usize,
    // suite
    #[serde(deserialize_with = "list_or_csv")]
    pub policies: Vec<PolicyKind>,
    /// Number of evaluation seeds; seed `k` of the sweep is `seed + k`.
    pub seeds: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub write_events: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let w = WorkloadConfig::default();
        let q = QualityLayout::default();
        let p = PenaltyConfig::default();
        let s = SacConfig::default();
        Self {
            n_asps: w.n_asps,
            n_tasks: w.n_tasks,
            horizon: w.horizon,
            mean_interarrival: w.mean_interarrival,
            demand_min: w.demand_range.0,
            demand_max: w.demand_range.1,
            capacity_min: w.capacity_range.0,
            capacity_max: w.capacity_range.1,
            step_time: w.step_time,
            quality_a_x: q.a_x,
            quality_b_x: q.b_x,
            quality_floor: q.floor,
            quality_peak_min: q.peak_range.0,
            quality_peak_max: q.peak_range.1,
            fixed_penalty: p.fixed_penalty,
            progress_weight: p.progress_weight,
            crash_mode: p.crash_mode,
            gamma: s.gamma,
            tau: s.tau,
            alpha: s.alpha,
            auto_alpha: s.auto_alpha,
            target_entropy_ratio: s.target_entropy_ratio,
            batch_size: s.batch_size,
            buffer_capacity: s.buffer_capacity,
            actor_lr: s.actor_lr,
            critic_lr: s.critic_lr,
            alpha_lr: s.alpha_lr,
            update_every: s.update_every,
            warmup_steps: s.warmup_steps,
            train_episodes: s.train_episodes,
            hidden: s.hidden,
            grad_clip: s.grad_clip,
            normalize_inputs: s.normalize_inputs,
            input_gain: s.input_gain,
            lr_final_ratio: s.lr_final_ratio,
            headroom_features: s.headroom_features,
            keep_best: s.keep_best,
            eval_interval: s.eval_interval,
            validation_episodes: 3,
            policies: PolicyKind::ALL.to_vec(),
            seeds: 5,
            seed: 0,
            out: PathBuf::from("results"),
            write_events: true,
        }
    }
}

/// Accepts either a TOML array or a comma-separated string.
fn list_or_csv<'de, D, T>(de: D) -> Result<Vec<T>, D::Error>
where
    D: Deserializer<'de>,
    T: std::str::FromStr + Deserialize<'de>,
    T::Err: std::fmt::Display,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Either<T> {
        List(Vec<T>),
        Text(String),
    }
    match Either::<T>::deserialize(de)? {
        Either::List(v) => Ok(v),
        Either::Text(s) => s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| p.trim().parse::<T>().map_err(serde::de::Error::custom))
            .collect(),
    }
}

impl ExperimentConfig {
    /// Builds a config from optional TOML text plus `key=value` overrides,
    /// applied in order. Values are read as TOML literals, falling back to
    /// plain strings.
    pub fn resolve<S: AsRef<str>>(toml_text: Option<&str>, overrides: &[S]) -> Result<Self, ExperimentError> {
        let mut table: toml::Table = match toml_text {
            Some(t) => toml::from_str(t).map_err(|e| ExperimentError::Config(e.to_string()))?,
            None => toml::Table::new(),
        };
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| ExperimentError::Config(format!("override `{o}` is not key=value")))?;
            let key = key.trim().trim_start_matches("--").replace('-', "_");
            table.insert(key, parse_literal(raw.trim()));
        }
        let cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| ExperimentError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::resolve(Some(&text), overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn workload(&self) -> WorkloadConfig {
        WorkloadConfig {
            n_asps: self.n_asps,
            n_tasks: self.n_tasks,
            horizon: self.horizon,
            mean_interarrival: self.mean_interarrival,
            demand_range: (self.demand_min, self.demand_max),
            capacity_range: (self.capacity_min, self.capacity_max),
            step_time: self.step_time,
            seed: self.seed,
        }
    }

    pub fn layout(&self) -> QualityLayout {
        QualityLayout {
            a_x: self.quality_a_x,
            b_x: self.quality_b_x,
            floor: self.quality_floor,
            peak_range: (self.quality_peak_min, self.quality_peak_max),
        }
    }

    pub fn penalties(&self) -> PenaltyConfig {
        PenaltyConfig {
            fixed_penalty: self.fixed_penalty,
            progress_weight: self.progress_weight,
            crash_mode: self.crash_mode,
        }
    }

    pub fn sac(&self, seed: u64) -> SacConfig {
        SacConfig {
            gamma: self.gamma,
            tau: self.tau,
            alpha: self.alpha,
            auto_alpha: self.auto_alpha,
            target_entropy_ratio: self.target_entropy_ratio,
            batch_size: self.batch_size,
            buffer_capacity: self.buffer_capacity,
            actor_lr: self.actor_lr,
            critic_lr: self.critic_lr,
            alpha_lr: self.alpha_lr,
            update_every: self.update_every,
            warmup_steps: self.warmup_steps,
            train_episodes: self.train_episodes,
            hidden: self.hidden.clone(),
            grad_clip: self.grad_clip,
            normalize_inputs: self.normalize_inputs,
            input_gain: self.input_gain,
            lr_final_ratio: self.lr_final_ratio,
            headroom_features: self.headroom_features,
            keep_best: self.keep_best,
            eval_interval: self.eval_interval,
            seed,
        }
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|k| self.seed + k).collect()
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.workload().validate()?;
        self.layout().validate()?;
        self.penalties()
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        if self.policies.is_empty() {
            return Err(ExperimentError::Config("at least one policy is required".into()));
        }
        if self.seeds == 0 {
            return Err(ExperimentError::Config("seeds must be >= 1".into()));
        }
        if self.policies.contains(&PolicyKind::Sac) {
            self.sac(self.seed).validate()?;
            if self.validation_episodes == 0 || self.validation_episodes > MAX_VALIDATION {
                return Err(ExperimentError::Config(format!(
                    "validation_episodes must be in 1..={MAX_VALIDATION}"
                )));
            }
            if self.train_episodes == 0 {
                return Err(ExperimentError::Config("train_episodes must be >= 1".into()));
            }
        }
        Ok(())
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Outcome of one policy on one evaluation seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub policy: PolicyKind,
    pub seed: u64,
    pub episodic_reward: f64,
    /// Mean quality of finished tasks; empty when no task finished.
    pub avg_finished_task_reward: Option<f64>,
    pub crashed_tasks: usize,
    pub finished_tasks: usize,
    #[serde(skip)]
    pub wall_time: f64,
}

impl RunRecord {
    fn from_episode(policy: PolicyKind, seed: u64, rec: &EpisodeRecord, wall_time: f64) -> Self {
        Self {
            policy,
            seed,
            episodic_reward: rec.episodic_reward,
            avg_finished_task_reward: rec.avg_finished_reward,
            crashed_tasks: rec.crashed,
            finished_tasks: rec.finished,
            wall_time,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub policy: PolicyKind,
    pub n_seeds: usize,
    pub episodic_reward_mean: f64,
    pub episodic_reward_std: f64,
    pub avg_finished_task_reward_mean: Option<f64>,
    pub avg_finished_task_reward_std: Option<f64>,
    pub crashed_tasks_mean: f64,
    pub crashed_tasks_std: f64,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One row per policy, in first-appearance order.
pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut order: Vec<PolicyKind> = Vec::new();
    for r in records {
        if !order.contains(&r.policy) {
            order.push(r.policy);
        }
    }
    order
        .into_iter()
        .map(|policy| {
            let rs: Vec<&RunRecord> = records.iter().filter(|r| r.policy == policy).collect();
            let rewards: Vec<f64> = rs.iter().map(|r| r.episodic_reward).collect();
            let quality: Vec<f64> = rs.iter().filter_map(|r| r.avg_finished_task_reward).collect();
            let crashes: Vec<f64> = rs.iter().map(|r| r.crashed_tasks as f64).collect();
            let (rm, rsd) = mean_std(&rewards);
            let (cm, csd) = mean_std(&crashes);
            let q = (!quality.is_empty()).then(|| mean_std(&quality));
            SummaryRow {
                policy,
                n_seeds: rs.len(),
                episodic_reward_mean: rm,
                episodic_reward_std: rsd,
                avg_finished_task_reward_mean: q.map(|q| q.0),
                avg_finished_task_reward_std: q.map(|q| q.1),
                crashed_tasks_mean: cm,
                crashed_tasks_std: csd,
            }
        })
        .collect()
}

/// Learning-curve row as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub episode: usize,
    pub episodic_reward: f64,
    pub avg_task_reward: Option<f64>,
    pub crashes: usize,
    pub actor_loss: Option<f64>,
    pub critic_loss: Option<f64>,
    pub entropy: Option<f64>,
}

impl From<&EpisodeStats> for CurveRow {
    fn from(s: &EpisodeStats) -> Self {
        let finite = |x: f64| x.is_finite().then_some(x);
        Self {
            episode: s.episode,
            episodic_reward: s.episodic_reward,
            avg_task_reward: s.avg_task_reward,
            crashes: s.crashes,
            actor_loss: finite(s.actor_loss),
            critic_loss: finite(s.critic_loss),
            entropy: finite(s.entropy),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub evaluation_seed: u64,
    pub validation_seeds: Vec<u64>,
    /// Training episode `e` draws its tasks from `derive_seed(seed, first_label + e)`.
    pub training_seed_first_label: u64,
    pub train_episodes: usize,
    pub selected_episode: usize,
    pub updates: usize,
    pub n_asps: usize,
    pub sac: SacConfig,
    pub workload: WorkloadConfig,
    pub penalties: PenaltyConfig,
}

/// Paths inside an output directory.
#[derive(Debug, Clone)]
pub struct OutputLayout {
    pub root: PathBuf,
}

impl OutputLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn runs(&self) -> PathBuf {
        self.root.join("runs.csv")
    }
    pub fn timings(&self) -> PathBuf {
        self.root.join("timings.csv")
    }
    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.csv")
    }
    pub fn workload(&self, seed: u64) -> PathBuf {
        self.root.join("workloads").join(format!("seed_{seed}.jsonl"))
    }
    pub fn events(&self, policy: PolicyKind, seed: u64) -> PathBuf {
        self.root.join("events").join(format!("{policy}_seed_{seed}.jsonl"))
    }
    pub fn curve(&self, seed: u64) -> PathBuf {
        self.root.join("curves").join(format!("sac_seed_{seed}.csv"))
    }
    pub fn validation_curve(&self, seed: u64) -> PathBuf {
        self.root.join("curves").join(format!("sac_seed_{seed}_validation.csv"))
    }
    pub fn checkpoint(&self, seed: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("sac_seed_{seed}.json"))
    }
    pub fn metadata(&self, seed: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("sac_seed_{seed}.meta.json"))
    }
}

/// Writes to a sibling temporary file, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(io_err(path))
}

pub fn csv_bytes<T: Serialize>(rows: &[T], path: &Path) -> Result<Vec<u8>, ExperimentError> {
    let csv_err = |e: csv::Error| ExperimentError::Csv {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| ExperimentError::Csv {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ExperimentError> {
    write_atomic(path, &csv_bytes(rows, path)?)
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, ExperimentError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    csv::Reader::from_reader(BufReader::new(file))
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| ExperimentError::Csv {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
}

fn events_bytes(events: &[Event]) -> Vec<u8> {
    let mut out = Vec::new();
    for e in events {
        serde_json::to_writer(&mut out, e).expect("events serialize");
        out.push(b'\n');
    }
    out
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("value serializes");
    v.push(b'\n');
    v
}

#[derive(Debug, Clone)]
pub struct SacRun {
    pub seed: u64,
    pub curve: Vec<EpisodeStats>,
    pub validation: Vec<EvalPoint>,
    pub selected_episode: usize,
}

#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub records: Vec<RunRecord>,
    pub summary: Vec<SummaryRow>,
    pub sac_runs: Vec<SacRun>,
}

/// Evaluation workload for one sweep seed.
pub fn frozen_workload(cfg: &ExperimentConfig, seed: u64) -> Result<Workload, ExperimentError> {
    Ok(Workload::generate(&cfg.workload().with_seed(seed), &cfg.layout())?)
}

/// Validation and training-episode task seeds for evaluation seed `seed`,
/// checked to be pairwise distinct and disjoint from it.
fn training_seeds(seed: u64, validation: usize, episodes: usize) -> Result<(Vec<u64>, Vec<u64>), ExperimentError> {
    let val: Vec<u64> = (0..validation as u64).map(|k| derive_seed(seed, VALIDATION_LABEL + k)).collect();
    let train: Vec<u64> = (0..episodes as u64).map(|e| derive_seed(seed, TRAIN_LABEL + e)).collect();
    let mut all: Vec<u64> = val.iter().chain(&train).copied().chain([seed]).collect();
    all.sort_unstable();
    all.dedup();
    if all.len() != validation + episodes + 1 {
        return Err(ExperimentError::Config(format!(
            "derived training seeds collide with evaluation seed {seed}"
        )));
    }
    Ok((val, train))
}

/// Training artifacts of one agent cell.
pub type SacArtifacts = (SacRun, SacCheckpoint, TrainingMetadata);

/// Runs a single policy on one frozen workload, training first for `sac`.
pub fn run_cell(
    cfg: &ExperimentConfig,
    policy: PolicyKind,
    seed: u64,
    workload: &Workload,
) -> Result<(RunRecord, EpisodeRecord, Option<SacArtifacts>), ExperimentError> {
    let pen = cfg.penalties();
    let start = Instant::now();
    let mut sac_out = None;
    let episode = match policy {
        PolicyKind::Random => run_episode(&mut RandomPolicy::new(seed), workload, pen)?,
        PolicyKind::RoundRobin => run_episode(&mut RoundRobin::new(), workload, pen)?,
        PolicyKind::OverloadAvoid => run_episode(&mut OverloadAvoid, workload, pen)?,
        PolicyKind::GreedyOracle => {
            let table = workload.asps.iter().map(|a| a.quality).collect();
            run_episode(&mut GreedyOracle::with_quality_table(table, workload.scale()), workload, pen)?
        }
        PolicyKind::Sac => {
            let sac_cfg = cfg.sac(seed);
            let (validation_seeds, train_seeds) =
                training_seeds(seed, cfg.validation_episodes, sac_cfg.train_episodes)?;
            let validation = validation_seeds
                .iter()
                .map(|&s| workload.with_task_seed(s))
                .collect::<Result<Vec<_>, _>>()?;
            let mut outcome = sac::train(
                |e| workload.with_task_seed(train_seeds[e]),
                &validation,
                pen,
                sac_cfg.clone(),
            )?;
            let rec = sac::evaluate(&mut outcome.agent, workload, pen)?;
            let meta = TrainingMetadata {
                seed,
                evaluation_seed: seed,
                validation_seeds,
                training_seed_first_label: TRAIN_LABEL,
                train_episodes: sac_cfg.train_episodes,
                selected_episode: outcome.selected_episode,
                updates: outcome.curve.iter().map(|c| c.updates).sum(),
                n_asps: workload.asps.len(),
                sac: sac_cfg,
                workload: workload.config,
                penalties: pen,
            };
            sac_out = Some((
                SacRun {
                    seed,
                    curve: outcome.curve,
                    validation: outcome.evals,
                    selected_episode: outcome.selected_episode,
                },
                outcome.agent.checkpoint(),
                meta,
            ));
            rec
        }
    };
    let record = RunRecord::from_episode(policy, seed, &episode, start.elapsed().as_secs_f64());
    Ok((record, episode, sac_out))
}

/// Runs every (seed, policy) cell and writes all result files under `cfg.out`.
/// `progress` receives one line per finished cell.
pub fn run_suite(cfg: &ExperimentConfig, progress: &mut dyn FnMut(&str)) -> Result<SuiteOutcome, ExperimentError> {
    cfg.validate()?;
    let out = OutputLayout::new(&cfg.out);
    fs::create_dir_all(&out.root).map_err(io_err(&out.root))?;
    write_atomic(&out.config(), cfg.to_toml().as_bytes())?;

    let mut records = Vec::new();
    let mut sac_runs = Vec::new();
    for seed in cfg.seed_list() {
        let workload = frozen_workload(cfg, seed)?;
        let mut buf = Vec::new();
        workload.write_jsonl(&mut buf)?;
        write_atomic(&out.workload(seed), &buf)?;
        for &policy in &cfg.policies {
            let (record, episode, sac_out) = run_cell(cfg, policy, seed, &workload)?;
            if cfg.write_events {
                write_atomic(&out.events(policy, seed), &events_bytes(&episode.events))?;
            }
            if let Some((run, checkpoint, meta)) = sac_out {
                let rows: Vec<CurveRow> = run.curve.iter().map(CurveRow::from).collect();
                write_csv(&out.curve(seed), &rows)?;
                write_csv(&out.validation_curve(seed), &run.validation)?;
                write_atomic(&out.checkpoint(seed), &json_bytes(&checkpoint))?;
                write_atomic(&out.metadata(seed), &json_bytes(&meta))?;
                sac_runs.push(run);
            }
            progress(&format!(
                "{:<14} seed {:<4} reward {:>9.2}  avg finished {:>6}  crashed {:>4}  ({:.1}s)",
                record.policy.name(),
                record.seed,
                record.episodic_reward,
                record
                    .avg_finished_task_reward
                    .map_or_else(|| "-".to_string(), |q| format!("{q:.4}")),
                record.crashed_tasks,
                record.wall_time,
            ));
            records.push(record);
        }
    }

    write_csv(&out.runs(), &records)?;
    let timings: Vec<Timing> = records
        .iter()
        .map(|r| Timing {
            policy: r.policy,
            seed: r.seed,
            wall_time: r.wall_time,
        })
        .collect();
    write_csv(&out.timings(), &timings)?;
    let summary = summarize(&records);
    write_csv(&out.summary(), &summary)?;
    Ok(SuiteOutcome {
        records,
        summary,
        sac_runs,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Timing {
    policy: PolicyKind,
    seed: u64,
    wall_time: f64,
}

/// Re-reads `runs.csv` from an output directory and writes `summary.csv`.
pub fn report(dir: &Path) -> Result<Vec<SummaryRow>, ExperimentError> {
    let out = OutputLayout::new(dir);
    let records: Vec<RunRecord> = read_csv(&out.runs())?;
    let summary = summarize(&records);
    write_csv(&out.summary(), &summary)?;
    Ok(summary)
}

/// Verdict on one event log inside an output directory.
#[derive(Debug, Clone)]
pub struct LogCheck {
    pub path: PathBuf,
    pub report: ReplayReport,
    /// Disagreement between the replayed metrics and the matching `runs.csv` row.
    pub record_mismatch: Option<String>,
}

impl LogCheck {
    pub fn is_clean(&self) -> bool {
        self.report.is_clean() && self.record_mismatch.is_none()
    }
}

fn compare_record(r: &RunRecord, rep: &ReplayReport) -> Option<String> {
    let tol = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0);
    if r.crashed_tasks != rep.crashed {
        return Some(format!("runs.csv crashed_tasks {} vs log {}", r.crashed_tasks, rep.crashed));
    }
    if r.finished_tasks != rep.finished {
        return Some(format!("runs.csv finished_tasks {} vs log {}", r.finished_tasks, rep.finished));
    }
    if !tol(r.episodic_reward, rep.episodic_reward) {
        return Some(format!(
            "runs.csv episodic_reward {} vs log {}",
            r.episodic_reward, rep.episodic_reward
        ));
    }
    match (r.avg_finished_task_reward, rep.avg_finished_reward) {
        (None, None) => None,
        (Some(a), Some(b)) if tol(a, b) => None,
        (a, b) => Some(format!("runs.csv avg_finished_task_reward {a:?} vs log {b:?}")),
    }
}

/// Replays every event log in an output directory and cross-checks the
/// recomputed metrics against `runs.csv` when it is present.
pub fn check_dir(dir: &Path) -> Result<Vec<LogCheck>, ExperimentError> {
    let out = OutputLayout::new(dir);
    let records: Vec<RunRecord> = if out.runs().exists() {
        read_csv(&out.runs())?
    } else {
        Vec::new()
    };
    let events_dir = dir.join("events");
    let mut paths: Vec<PathBuf> = fs::read_dir(&events_dir)
        .map_err(io_err(&events_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    let mut checks = Vec::with_capacity(paths.len());
    for path in paths {
        let report = replay_check_file(&path).map_err(|source| ExperimentError::Replay {
            path: path.clone(),
            source,
        })?;
        let record_mismatch = records
            .iter()
            .find(|r| out.events(r.policy, r.seed) == path)
            .and_then(|r| compare_record(r, &report));
        checks.push(LogCheck {
            path,
            report,
            record_mismatch,
        });
    }
    Ok(checks)
}
