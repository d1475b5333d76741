//! Seeded task stream and provider population.
//!
//! Every random quantity comes from its own ChaCha stream derived from the
//! workload seed, so e.g. generating more tasks never changes the capacities
//! drawn for the providers.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quality::{MetricOrientation, QualityError, QualityProfile, QualityScale};

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid workload config: {0}")]
    Config(String),
    #[error(transparent)]
    Quality(#[from] QualityError),
    #[error("workload file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Independent random streams carved out of one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Arrivals = 1,
    Demands = 2,
    Capacities = 3,
    Qualities = 4,
    Policy = 5,
    Agent = 6,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Mixes a base seed with a label so derived seeds do not collide with the
/// small integers used for experiment seeds.
pub fn derive_seed(base: u64, label: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = base ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkloadConfig {
    pub n_asps: usize,
    pub n_tasks: usize,
    /// Nominal observation period, hours.
    pub horizon: f64,
    /// Mean gap between arrivals, hours.
    pub mean_interarrival: f64,
    pub demand_range: (u32, u32),
    pub capacity_range: (u32, u32),
    /// Service time per diffusion timestep, hours.
    pub step_time: f64,
    pub seed: u64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            n_asps: 20,
            n_tasks: 1000,
            horizon: 288.0,
            mean_interarrival: 0.288,
            demand_range: (100, 250),
            capacity_range: (600, 1500),
            step_time: 0.08,
            seed: 0,
        }
    }
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: &str| Err(WorkloadError::Config(m.to_string()));
        if self.n_asps == 0 {
            return bad("n_asps must be >= 1");
        }
        if self.n_tasks == 0 {
            return bad("n_tasks must be >= 1");
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return bad("horizon must be > 0");
        }
        if !(self.mean_interarrival.is_finite() && self.mean_interarrival > 0.0) {
            return bad("mean_interarrival must be > 0");
        }
        if !(self.step_time.is_finite() && self.step_time > 0.0) {
            return bad("step_time must be > 0");
        }
        let (dmin, dmax) = self.demand_range;
        if dmin == 0 || dmin > dmax {
            return bad("demand_range must satisfy 1 <= min <= max");
        }
        let (cmin, cmax) = self.capacity_range;
        if cmin == 0 || cmin > cmax {
            return bad("capacity_range must satisfy 1 <= min <= max");
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..*self }
    }
}

/// How per-provider quality profiles are drawn: a shared breakpoint layout
/// and floor, with the peak sampled per provider.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityLayout {
    pub a_x: u32,
    pub b_x: u32,
    pub floor: f64,
    pub peak_range: (f64, f64),
}

impl Default for QualityLayout {
    fn default() -> Self {
        Self {
            a_x: 50,
            b_x: 250,
            floor: 0.0,
            peak_range: (0.4, 1.0),
        }
    }
}

impl QualityLayout {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let (lo, hi) = self.peak_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(WorkloadError::Config("peak_range must satisfy min <= max".into()));
        }
        if !(self.floor.is_finite() && self.floor < lo) {
            return Err(WorkloadError::Config("quality floor must be below peak_range".into()));
        }
        if hi > 1.0 || self.floor < 0.0 {
            return Err(WorkloadError::Config(
                "floor and peaks must lie on the unit quality scale".into(),
            ));
        }
        // surfaces breakpoint errors early
        QualityProfile::new(self.a_x, self.floor, self.b_x, lo, MetricOrientation::HigherIsBetter)?;
        Ok(())
    }

    /// Profiles are expressed on this scale; rewards are read off it.
    pub fn scale(&self) -> QualityScale {
        QualityScale::unit()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: u32,
    pub arrival_time: f64,
    pub demand: u32,
    pub duration: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AspSpec {
    pub id: usize,
    pub total_capacity: u32,
    pub quality: QualityProfile,
}

pub fn generate_tasks(config: &WorkloadConfig) -> Result<Vec<Task>, WorkloadError> {
    config.validate()?;
    let gaps = Exp::new(1.0 / config.mean_interarrival)
        .map_err(|e| WorkloadError::Config(e.to_string()))?;
    let mut arrivals = stream_rng(config.seed, Stream::Arrivals);
    let mut demands = stream_rng(config.seed, Stream::Demands);
    let (dmin, dmax) = config.demand_range;

    let mut clock = 0.0f64;
    let mut tasks = Vec::with_capacity(config.n_tasks);
    for id in 0..config.n_tasks {
        let gap = loop {
            let g: f64 = gaps.sample(&mut arrivals);
            if g > 0.0 {
                break g;
            }
        };
        clock += gap;
        let demand = demands.random_range(dmin..=dmax);
        tasks.push(Task {
            id: id as u32,
            arrival_time: clock,
            demand,
            duration: f64::from(demand) * config.step_time,
        });
    }
    Ok(tasks)
}

pub fn generate_asps(
    config: &WorkloadConfig,
    layout: &QualityLayout,
) -> Result<Vec<AspSpec>, WorkloadError> {
    config.validate()?;
    layout.validate()?;
    let mut caps = stream_rng(config.seed, Stream::Capacities);
    let mut quals = stream_rng(config.seed, Stream::Qualities);
    let (cmin, cmax) = config.capacity_range;
    let (pmin, pmax) = layout.peak_range;

    (0..config.n_asps)
        .map(|id| {
            let total_capacity = caps.random_range(cmin..=cmax);
            let peak = if pmin == pmax {
                pmin
            } else {
                quals.random_range(pmin..=pmax)
            };
            let quality = QualityProfile::new(
                layout.a_x,
                layout.floor,
                layout.b_x,
                peak,
                MetricOrientation::HigherIsBetter,
            )?;
            Ok(AspSpec {
                id,
                total_capacity,
                quality,
            })
        })
        .collect()
}

/// A frozen task stream together with the providers that serve it.
#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub config: WorkloadConfig,
    pub layout: QualityLayout,
    pub asps: Vec<AspSpec>,
    pub tasks: Vec<Task>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum WorkloadLine {
    Config {
        config: WorkloadConfig,
        layout: QualityLayout,
    },
    Asp(AspSpec),
    Task(Task),
}

impl Workload {
    pub fn generate(config: &WorkloadConfig, layout: &QualityLayout) -> Result<Self, WorkloadError> {
        Ok(Self {
            config: *config,
            layout: *layout,
            asps: generate_asps(config, layout)?,
            tasks: generate_tasks(config)?,
        })
    }

    /// Same providers, fresh tasks drawn from `task_seed`.
    pub fn with_task_seed(&self, task_seed: u64) -> Result<Self, WorkloadError> {
        let cfg = self.config.with_seed(task_seed);
        Ok(Self {
            config: self.config,
            layout: self.layout,
            asps: self.asps.clone(),
            tasks: generate_tasks(&cfg)?,
        })
    }

    /// Arrivals past the nominal horizon. They are kept in the stream.
    pub fn overrun_count(&self) -> usize {
        self.tasks
            .iter()
            .filter(|t| t.arrival_time > self.config.horizon)
            .count()
    }

    pub fn scale(&self) -> QualityScale {
        self.layout.scale()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), WorkloadError> {
        let mut emit = |line: &WorkloadLine| -> Result<(), WorkloadError> {
            serde_json::to_writer(&mut w, line).map_err(std::io::Error::other)?;
            w.write_all(b"\n")?;
            Ok(())
        };
        emit(&WorkloadLine::Config {
            config: self.config,
            layout: self.layout,
        })?;
        for a in &self.asps {
            emit(&WorkloadLine::Asp(*a))?;
        }
        for t in &self.tasks {
            emit(&WorkloadLine::Task(*t))?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, WorkloadError> {
        let mut header = None;
        let mut asps = Vec::new();
        let mut tasks = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: WorkloadLine = serde_json::from_str(&line).map_err(|e| WorkloadError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            match parsed {
                WorkloadLine::Config { config, layout } => {
                    if header.is_some() {
                        return Err(WorkloadError::Parse {
                            line: i + 1,
                            msg: "duplicate config line".into(),
                        });
                    }
                    header = Some((config, layout));
                }
                WorkloadLine::Asp(a) => asps.push(a),
                WorkloadLine::Task(t) => tasks.push(t),
            }
        }
        let (config, layout) = header.ok_or(WorkloadError::Parse {
            line: 0,
            msg: "missing config line".into(),
        })?;
        for (i, a) in asps.iter().enumerate() {
            if a.id != i {
                return Err(WorkloadError::Parse {
                    line: 0,
                    msg: format!("asp ids must be 0..n in order, found {} at position {i}", a.id),
                });
            }
        }
        if tasks.windows(2).any(|w| w[1].arrival_time < w[0].arrival_time) {
            return Err(WorkloadError::Parse {
                line: 0,
                msg: "task arrivals out of order".into(),
            });
        }
        Ok(Self {
            config,
            layout,
            asps,
            tasks,
        })
    }
}
