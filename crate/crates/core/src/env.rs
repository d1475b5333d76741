//! Discrete-event environment for provider selection.
//!
//! Each decision point is a task arrival. Between arrivals the only events are
//! task completions, so the environment advances the clock arrival by
//! arrival and releases whatever finished in between (release-then-decide).
//!
//! Capacity is a concurrency budget: the demands of all in-flight tasks on a
//! provider never exceed its total capacity. Assigning a task that does not
//! fit crashes the provider.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policies::Policy;
use crate::quality::{QualityError, QualityProfile, QualityScale};
use crate::workload::{AspSpec, Task, Workload};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("workload has no tasks or no providers")]
    EmptyWorkload,
    #[error("action {action} out of range for {n_asps} providers")]
    ActionOutOfRange { action: usize, n_asps: usize },
    #[error("step called after the episode finished")]
    StepAfterDone,
    #[error("invalid penalty config: {0}")]
    Penalty(String),
    #[error(transparent)]
    Quality(#[from] QualityError),
}

/// What happens to a provider when it is handed a task it cannot fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrashMode {
    /// Every in-flight task is killed and the provider restarts empty.
    #[default]
    Reset,
    /// Only the incoming task is dropped.
    RejectOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub fixed_penalty: f64,
    pub progress_weight: f64,
    #[serde(default)]
    pub crash_mode: CrashMode,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            fixed_penalty: 2.0,
            progress_weight: 1.0,
            crash_mode: CrashMode::Reset,
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        for (name, v) in [
            ("fixed_penalty", self.fixed_penalty),
            ("progress_weight", self.progress_weight),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(EnvError::Penalty(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Penalty for crashing a provider whose running tasks have the given
    /// progress fractions.
    pub fn crash_penalty(&self, progress: impl IntoIterator<Item = f64>) -> f64 {
        self.fixed_penalty + self.progress_weight * progress.into_iter().sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InFlightTask {
    pub task: Task,
    pub asp_id: usize,
    pub start_time: f64,
    pub finish_time: f64,
    pub quality: f64,
}

impl InFlightTask {
    /// Elapsed fraction of the service time at `clock`, within `[0, 1]`.
    pub fn progress(&self, clock: f64) -> f64 {
        ((clock - self.start_time) / self.task.duration).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AspState {
    pub spec: AspSpec,
    pub available: u32,
    pub in_flight: Vec<InFlightTask>,
}

impl AspState {
    fn new(spec: AspSpec) -> Self {
        Self {
            spec,
            available: spec.total_capacity,
            in_flight: Vec::new(),
        }
    }

    pub fn in_flight_demand(&self) -> u32 {
        self.in_flight.iter().map(|t| t.task.demand).sum()
    }
}

/// Observation features, every entry in `[0, 1]`:
/// `[demand, completion time, (total_i, available_i) for each provider]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateVector(pub Vec<f64>);

impl StateVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn n_asps(&self) -> usize {
        self.0.len().saturating_sub(2) / 2
    }

    pub fn available(&self, asp: usize) -> f64 {
        self.0[2 + 2 * asp + 1]
    }

    pub fn total(&self, asp: usize) -> f64 {
        self.0[2 + 2 * asp]
    }
}

/// Constants that scale raw quantities into the state vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub max_demand: u32,
    pub step_time: f64,
    pub max_total: u32,
}

impl Normalizer {
    pub fn for_workload(w: &Workload) -> Self {
        Self {
            max_demand: w.config.demand_range.1,
            step_time: w.config.step_time,
            max_total: w.asps.iter().map(|a| a.total_capacity).max().unwrap_or(1),
        }
    }
}

pub fn encode_state(pending: Option<&Task>, asps: &[AspState], norm: &Normalizer) -> StateVector {
    let max_demand = f64::from(norm.max_demand);
    let max_total = f64::from(norm.max_total);
    let mut v = Vec::with_capacity(2 + 2 * asps.len());
    match pending {
        Some(t) => {
            v.push((f64::from(t.demand) / max_demand).min(1.0));
            v.push((t.duration / (max_demand * norm.step_time)).min(1.0));
        }
        None => v.extend([0.0, 0.0]),
    }
    for a in asps {
        v.push(f64::from(a.spec.total_capacity) / max_total);
        v.push(f64::from(a.available) / max_total);
    }
    StateVector(v)
}

/// Everything a selection policy may look at for one decision. Provider
/// quality profiles are deliberately absent.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub state: StateVector,
    pub demand: u32,
    pub available: Vec<u32>,
    pub total: Vec<u32>,
}

impl Observation {
    pub fn n_asps(&self) -> usize {
        self.available.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub quality_component: f64,
    pub penalty_component: f64,
    pub crashed_now: usize,
    pub finished_since_last: Vec<(u32, f64)>,
    pub next_state: StateVector,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AspHeader {
    pub id: usize,
    pub total_capacity: u32,
    pub quality: QualityProfile,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interrupted {
    pub task_id: u32,
    pub demand: u32,
    pub start_time: f64,
    pub duration: f64,
    pub progress: f64,
}

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Start {
        time: f64,
        asps: Vec<AspHeader>,
        scale: QualityScale,
        penalties: PenaltyConfig,
        n_tasks: usize,
    },
    Arrival {
        time: f64,
        task: Task,
    },
    Assign {
        time: f64,
        task_id: u32,
        asp: usize,
        demand: u32,
        duration: f64,
        quality: f64,
        reward: f64,
        available_after: u32,
    },
    Finish {
        time: f64,
        task_id: u32,
        asp: usize,
        demand: u32,
        quality: f64,
        available_after: u32,
    },
    Crash {
        time: f64,
        task_id: u32,
        asp: usize,
        demand: u32,
        interrupted: Vec<Interrupted>,
        reward: f64,
        available_after: u32,
    },
    End {
        time: f64,
        episodic_reward: f64,
        quality_total: f64,
        penalty_total: f64,
        finished: usize,
        crashed: usize,
    },
}

impl Event {
    pub fn time(&self) -> f64 {
        match self {
            Event::Start { time, .. }
            | Event::Arrival { time, .. }
            | Event::Assign { time, .. }
            | Event::Finish { time, .. }
            | Event::Crash { time, .. }
            | Event::End { time, .. } => *time,
        }
    }
}

pub struct EdgeEnv {
    tasks: Vec<Task>,
    specs: Vec<AspSpec>,
    scale: QualityScale,
    penalties: PenaltyConfig,
    norm: Normalizer,
    asps: Vec<AspState>,
    cursor: usize,
    clock: f64,
    done: bool,
    logging: bool,
    events: Vec<Event>,
    tally: Tally,
}

#[derive(Debug, Clone, Copy, Default)]
struct Tally {
    episodic_reward: f64,
    quality_total: f64,
    penalty_total: f64,
    finished: usize,
    finished_quality: f64,
    crashed: usize,
}

impl EdgeEnv {
    pub fn new(workload: &Workload, penalties: PenaltyConfig) -> Result<Self, EnvError> {
        if workload.tasks.is_empty() || workload.asps.is_empty() {
            return Err(EnvError::EmptyWorkload);
        }
        penalties.validate()?;
        Ok(Self {
            tasks: workload.tasks.clone(),
            specs: workload.asps.clone(),
            scale: workload.scale(),
            penalties,
            norm: Normalizer::for_workload(workload),
            asps: Vec::new(),
            cursor: 0,
            clock: 0.0,
            done: true,
            logging: true,
            events: Vec::new(),
            tally: Tally::default(),
        })
    }

    /// Disables the event log; used for training episodes.
    pub fn without_log(mut self) -> Self {
        self.logging = false;
        self
    }

    pub fn n_asps(&self) -> usize {
        self.specs.len()
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn state_dim(&self) -> usize {
        2 + 2 * self.specs.len()
    }

    pub fn asps(&self) -> &[AspState] {
        &self.asps
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.norm
    }

    pub fn pending(&self) -> Option<&Task> {
        (!self.done).then(|| &self.tasks[self.cursor])
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn take_events(&mut self) -> Vec<Event> {
        std::mem::take(&mut self.events)
    }

    pub fn reset(&mut self) -> StateVector {
        self.asps = self.specs.iter().copied().map(AspState::new).collect();
        self.cursor = 0;
        self.clock = self.tasks[0].arrival_time;
        self.done = false;
        self.tally = Tally::default();
        self.events.clear();
        if self.logging {
            self.events.push(Event::Start {
                time: 0.0,
                asps: self
                    .specs
                    .iter()
                    .map(|s| AspHeader {
                        id: s.id,
                        total_capacity: s.total_capacity,
                        quality: s.quality,
                    })
                    .collect(),
                scale: self.scale,
                penalties: self.penalties,
                n_tasks: self.tasks.len(),
            });
            self.events.push(Event::Arrival {
                time: self.clock,
                task: self.tasks[0],
            });
        }
        self.state()
    }

    pub fn state(&self) -> StateVector {
        encode_state(self.pending(), &self.asps, &self.norm)
    }

    pub fn observation(&self) -> Observation {
        Observation {
            state: self.state(),
            demand: self.pending().map_or(0, |t| t.demand),
            available: self.asps.iter().map(|a| a.available).collect(),
            total: self.asps.iter().map(|a| a.spec.total_capacity).collect(),
        }
    }

    /// Quality score a task of `demand` steps would get on provider `asp`.
    pub fn quality_of(&self, asp: usize, demand: u32) -> Result<f64, EnvError> {
        Ok(self.specs[asp].quality.eval_relative(demand, &self.scale)?)
    }

    pub fn step(&mut self, action: usize) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::StepAfterDone);
        }
        if action >= self.asps.len() {
            return Err(EnvError::ActionOutOfRange {
                action,
                n_asps: self.asps.len(),
            });
        }
        let task = self.tasks[self.cursor];
        let clock = self.clock;
        let (quality_component, penalty_component, crashed_now);

        if task.demand <= self.asps[action].available {
            let quality = self.quality_of(action, task.demand)?;
            let asp = &mut self.asps[action];
            asp.available -= task.demand;
            asp.in_flight.push(InFlightTask {
                task,
                asp_id: action,
                start_time: clock,
                finish_time: clock + task.duration,
                quality,
            });
            quality_component = quality;
            penalty_component = 0.0;
            crashed_now = 0;
            if self.logging {
                self.events.push(Event::Assign {
                    time: clock,
                    task_id: task.id,
                    asp: action,
                    demand: task.demand,
                    duration: task.duration,
                    quality,
                    reward: quality,
                    available_after: asp.available,
                });
            }
        } else {
            let asp = &mut self.asps[action];
            let interrupted: Vec<Interrupted> = match self.penalties.crash_mode {
                CrashMode::Reset => asp
                    .in_flight
                    .drain(..)
                    .map(|f| Interrupted {
                        task_id: f.task.id,
                        demand: f.task.demand,
                        start_time: f.start_time,
                        duration: f.task.duration,
                        progress: f.progress(clock),
                    })
                    .collect(),
                CrashMode::RejectOnly => Vec::new(),
            };
            asp.available = asp.spec.total_capacity - asp.in_flight_demand();
            quality_component = 0.0;
            penalty_component = self.penalties.crash_penalty(interrupted.iter().map(|i| i.progress));
            crashed_now = 1 + interrupted.len();
            if self.logging {
                self.events.push(Event::Crash {
                    time: clock,
                    task_id: task.id,
                    asp: action,
                    demand: task.demand,
                    interrupted,
                    reward: -penalty_component,
                    available_after: asp.available,
                });
            }
        }

        let reward = quality_component - penalty_component;
        self.tally.episodic_reward += reward;
        self.tally.quality_total += quality_component;
        self.tally.penalty_total += penalty_component;
        self.tally.crashed += crashed_now;

        self.cursor += 1;
        let (finished_since_last, next_state);
        if self.cursor < self.tasks.len() {
            self.clock = self.tasks[self.cursor].arrival_time;
            finished_since_last = self.release(Some(self.clock));
            if self.logging {
                self.events.push(Event::Arrival {
                    time: self.clock,
                    task: self.tasks[self.cursor],
                });
            }
            next_state = self.state();
        } else {
            self.done = true;
            next_state = encode_state(None, &self.asps, &self.norm);
            finished_since_last = self.release(None);
            if self.logging {
                let t = &self.tally;
                self.events.push(Event::End {
                    time: self.clock,
                    episodic_reward: t.episodic_reward,
                    quality_total: t.quality_total,
                    penalty_total: t.penalty_total,
                    finished: t.finished,
                    crashed: t.crashed,
                });
            }
        }

        Ok(StepOutcome {
            reward,
            quality_component,
            penalty_component,
            crashed_now,
            finished_since_last,
            next_state,
            done: self.done,
        })
    }

    /// Completes every in-flight task finishing at or before `until`
    /// (all of them when `None`), in finish-time order.
    fn release(&mut self, until: Option<f64>) -> Vec<(u32, f64)> {
        let mut done: Vec<InFlightTask> = Vec::new();
        for asp in &mut self.asps {
            let mut i = 0;
            while i < asp.in_flight.len() {
                let f = asp.in_flight[i];
                if until.is_none_or(|t| f.finish_time <= t) {
                    asp.in_flight.swap_remove(i);
                    done.push(f);
                } else {
                    i += 1;
                }
            }
        }
        done.sort_by(|a, b| {
            a.finish_time
                .total_cmp(&b.finish_time)
                .then(a.task.id.cmp(&b.task.id))
        });
        let mut out = Vec::with_capacity(done.len());
        for f in done {
            let asp = &mut self.asps[f.asp_id];
            asp.available += f.task.demand;
            self.tally.finished += 1;
            self.tally.finished_quality += f.quality;
            if f.finish_time > self.clock {
                self.clock = f.finish_time;
            }
            if self.logging {
                self.events.push(Event::Finish {
                    time: f.finish_time,
                    task_id: f.task.id,
                    asp: f.asp_id,
                    demand: f.task.demand,
                    quality: f.quality,
                    available_after: asp.available,
                });
            }
            out.push((f.task.id, f.quality));
        }
        out
    }

    fn record(&self) -> EpisodeRecord {
        let t = &self.tally;
        EpisodeRecord {
            episodic_reward: t.episodic_reward,
            avg_finished_reward: (t.finished > 0).then(|| t.finished_quality / t.finished as f64),
            finished: t.finished,
            crashed: t.crashed,
            quality_total: t.quality_total,
            penalty_total: t.penalty_total,
            rewards: Vec::new(),
            events: Vec::new(),
        }
    }
}

/// Per-episode metrics plus the full log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub episodic_reward: f64,
    /// Mean quality over tasks that ran to completion; `None` when none did.
    pub avg_finished_reward: Option<f64>,
    pub finished: usize,
    pub crashed: usize,
    pub quality_total: f64,
    pub penalty_total: f64,
    pub rewards: Vec<f64>,
    pub events: Vec<Event>,
}

pub fn run_episode(
    policy: &mut dyn Policy,
    workload: &Workload,
    penalties: PenaltyConfig,
) -> Result<EpisodeRecord, EnvError> {
    let mut env = EdgeEnv::new(workload, penalties)?;
    run_on(&mut env, policy)
}

/// Runs one episode on an existing environment.
pub fn run_on(env: &mut EdgeEnv, policy: &mut dyn Policy) -> Result<EpisodeRecord, EnvError> {
    env.reset();
    let mut rewards = Vec::with_capacity(env.n_tasks());
    while !env.is_done() {
        let obs = env.observation();
        let action = policy.select(&obs);
        rewards.push(env.step(action)?.reward);
    }
    let mut rec = env.record();
    rec.rewards = rewards;
    rec.events = env.take_events();
    Ok(rec)
}
