//! Independent verification of event logs.
//!
//! The checker reads the raw JSON lines without going through the simulator's
//! own types, rebuilds every provider's in-flight set from the log alone, and
//! recomputes availability, task quality, crash penalties and episode totals.
//! The first inconsistency is reported together with its line number.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

/// Absolute slack for recomputed per-event quantities.
const EVENT_TOL: f64 = 1e-9;
/// Relative slack for episode totals, which accumulate rounding.
const TOTAL_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("reading event log: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// Available capacity plus in-flight demand differs from the total.
    Conservation,
    NegativeAvailability,
    /// A reward, quality or total that does not match its recomputation.
    Reward,
    CrashPenalty,
    /// Events out of order in time or inconsistent with the arrival stream.
    Sequence,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViolationKind::Conservation => "conservation",
            ViolationKind::NegativeAvailability => "negative availability",
            ViolationKind::Reward => "reward",
            ViolationKind::CrashPenalty => "crash penalty",
            ViolationKind::Sequence => "sequence",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub line: usize,
    pub kind: ViolationKind,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {} violation: {}", self.line, self.kind, self.message)
    }
}

/// Episode metrics recomputed from the log, plus the first violation if any.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayReport {
    pub lines: usize,
    pub decisions: usize,
    pub finished: usize,
    pub crashed: usize,
    pub episodic_reward: f64,
    pub quality_total: f64,
    pub penalty_total: f64,
    /// Mean quality of finished tasks; `None` when nothing finished.
    pub avg_finished_reward: Option<f64>,
    pub violation: Option<Violation>,
}

impl ReplayReport {
    pub fn is_clean(&self) -> bool {
        self.violation.is_none()
    }
}

pub fn replay_check_file(path: &Path) -> Result<ReplayReport, ReplayError> {
    replay_check(BufReader::new(File::open(path)?))
}

pub fn replay_check<R: BufRead>(reader: R) -> Result<ReplayReport, ReplayError> {
    let mut replay = Replay::default();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| ReplayError::Malformed {
            line: line_no,
            msg: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| ReplayError::Malformed {
            line: line_no,
            msg: "expected a JSON object".into(),
        })?;
        replay.lines = line_no;
        if replay.violation.is_some() {
            // keep validating syntax, stop judging semantics
            let _ = Fields::new(obj, line_no).str("event")?;
            continue;
        }
        if let Err(v) = replay.apply(obj, line_no)? {
            replay.violation = Some(v);
        }
    }
    replay.finish()
}

#[derive(Debug, Clone, Copy)]
struct Curve {
    a_x: u32,
    a_y: f64,
    b_x: u32,
    b_y: f64,
}

impl Curve {
    fn raw(&self, steps: u32) -> f64 {
        if steps <= self.a_x {
            self.a_y
        } else if steps >= self.b_x {
            self.b_y
        } else {
            let frac = f64::from(steps - self.a_x) / f64::from(self.b_x - self.a_x);
            self.a_y * (1.0 - frac) + self.b_y * frac
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Running {
    demand: u32,
    start: f64,
    duration: f64,
    quality: f64,
}

#[derive(Debug, Clone)]
struct Provider {
    total: u32,
    available: i64,
    curve: Curve,
    running: BTreeMap<u32, Running>,
}

impl Provider {
    fn running_demand(&self) -> i64 {
        self.running.values().map(|r| i64::from(r.demand)).sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct Pending {
    id: u32,
    time: f64,
    demand: u32,
    duration: f64,
}

#[derive(Debug, Default)]
struct Replay {
    lines: usize,
    started: bool,
    ended: bool,
    providers: Vec<Provider>,
    worst: f64,
    best: f64,
    fixed_penalty: f64,
    progress_weight: f64,
    reset_on_crash: bool,
    n_tasks: usize,
    clock: f64,
    pending: Option<Pending>,
    decisions: usize,
    finished: usize,
    finished_quality: f64,
    crashed: usize,
    reward_sum: f64,
    quality_sum: f64,
    penalty_sum: f64,
    violation: Option<Violation>,
}

type Judged = Result<Result<(), Violation>, ReplayError>;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

impl Replay {
    fn apply(&mut self, obj: &Map<String, Value>, line: usize) -> Judged {
        let f = Fields::new(obj, line);
        let kind = f.str("event")?;
        let fail = |kind: ViolationKind, message: String| Ok(Err(Violation { line, kind, message }));
        if self.ended {
            return fail(ViolationKind::Sequence, "event after end".into());
        }
        if !self.started && kind != "start" {
            return fail(ViolationKind::Sequence, "log must begin with a start event".into());
        }
        let time = f.num("time")?;
        if time + EVENT_TOL < self.clock {
            return fail(
                ViolationKind::Sequence,
                format!("time {time} precedes previous event time {}", self.clock),
            );
        }
        self.clock = self.clock.max(time);
        match kind {
            "start" => self.on_start(&f),
            "arrival" => self.on_arrival(&f, time),
            "assign" => self.on_assign(&f, time),
            "finish" => self.on_finish(&f, time),
            "crash" => self.on_crash(&f, time),
            "end" => self.on_end(&f),
            other => Err(f.malformed(format!("unknown event kind `{other}`"))),
        }
    }

    fn on_start(&mut self, f: &Fields) -> Judged {
        if self.started {
            return f.violation(ViolationKind::Sequence, "second start event".into());
        }
        self.started = true;
        for (i, asp) in f.array("asps")?.iter().enumerate() {
            let a = f.nested(asp, "asps[]")?;
            if a.uint("id")? as usize != i {
                return Err(f.malformed(format!("provider {i} listed out of order")));
            }
            let q = f.nested(a.value("quality")?, "quality")?;
            let curve = Curve {
                a_x: q.u32("a_x")?,
                a_y: q.num("a_y")?,
                b_x: q.u32("b_x")?,
                b_y: q.num("b_y")?,
            };
            if curve.a_x >= curve.b_x {
                return Err(f.malformed("quality breakpoints out of order".into()));
            }
            let total = a.u32("total_capacity")?;
            self.providers.push(Provider {
                total,
                available: i64::from(total),
                curve,
                running: BTreeMap::new(),
            });
        }
        if self.providers.is_empty() {
            return Err(f.malformed("no providers".into()));
        }
        let scale = f.nested(f.value("scale")?, "scale")?;
        self.worst = scale.num("worst")?;
        self.best = scale.num("best")?;
        if self.worst == self.best {
            return Err(f.malformed("degenerate quality scale".into()));
        }
        let pen = f.nested(f.value("penalties")?, "penalties")?;
        self.fixed_penalty = pen.num("fixed_penalty")?;
        self.progress_weight = pen.num("progress_weight")?;
        self.reset_on_crash = match pen.opt_str("crash_mode")? {
            None | Some("reset") => true,
            Some("reject_only") => false,
            Some(other) => return Err(f.malformed(format!("unknown crash mode `{other}`"))),
        };
        self.n_tasks = f.uint("n_tasks")? as usize;
        Ok(Ok(()))
    }

    fn on_arrival(&mut self, f: &Fields, time: f64) -> Judged {
        if let Some(p) = self.pending {
            return f.violation(
                ViolationKind::Sequence,
                format!("task {} arrived but task {} was never placed", f.nested(f.value("task")?, "task")?.u32("id")?, p.id),
            );
        }
        let t = f.nested(f.value("task")?, "task")?;
        let arrival = t.num("arrival_time")?;
        if !close(arrival, time, EVENT_TOL) {
            return f.violation(
                ViolationKind::Sequence,
                format!("arrival logged at {time} but task arrives at {arrival}"),
            );
        }
        self.pending = Some(Pending {
            id: t.u32("id")?,
            time,
            demand: t.u32("demand")?,
            duration: t.num("duration")?,
        });
        Ok(Ok(()))
    }

    /// The pending arrival that an assign or crash event must refer to.
    fn take_pending(&mut self, f: &Fields, time: f64) -> Result<Result<Pending, Violation>, ReplayError> {
        let id = f.u32("task_id")?;
        let demand = f.u32("demand")?;
        let Some(p) = self.pending.take() else {
            return Ok(Err(f.make(ViolationKind::Sequence, format!("task {id} placed without an arrival"))));
        };
        if p.id != id || p.demand != demand {
            return Ok(Err(f.make(
                ViolationKind::Sequence,
                format!("placed task {id} (demand {demand}) but task {} (demand {}) is waiting", p.id, p.demand),
            )));
        }
        if !close(p.time, time, EVENT_TOL) {
            return Ok(Err(f.make(
                ViolationKind::Sequence,
                format!("task {id} placed at {time}, arrived at {}", p.time),
            )));
        }
        self.decisions += 1;
        Ok(Ok(p))
    }

    fn provider_index(&self, f: &Fields) -> Result<usize, ReplayError> {
        let i = f.uint("asp")? as usize;
        if i >= self.providers.len() {
            return Err(f.malformed(format!("provider {i} out of range")));
        }
        Ok(i)
    }

    /// Tasks on provider `i` that should have completed before `time` but
    /// have no finish event.
    fn overdue(&self, i: usize, time: f64) -> Option<u32> {
        self.providers[i]
            .running
            .iter()
            .find(|(_, r)| r.start + r.duration < time - EVENT_TOL)
            .map(|(id, _)| *id)
    }

    fn check_level(&self, f: &Fields, i: usize, reported: i64) -> Result<(), Violation> {
        let p = &self.providers[i];
        let expected = i64::from(p.total) - p.running_demand();
        if reported != expected || p.available != expected {
            let mut msg = format!(
                "provider {i} reports {reported} available, total {} minus in-flight {} gives {expected}",
                p.total,
                p.running_demand()
            );
            if let Some(id) = self.overdue(i, f.num("time").unwrap_or(self.clock)) {
                msg.push_str(&format!("; task {id} is past its finish time without a finish event"));
            }
            return Err(f.make(ViolationKind::Conservation, msg));
        }
        if expected < 0 {
            return Err(f.make(
                ViolationKind::NegativeAvailability,
                format!("provider {i} availability {expected} < 0"),
            ));
        }
        Ok(())
    }

    fn on_assign(&mut self, f: &Fields, time: f64) -> Judged {
        let p = match self.take_pending(f, time)? {
            Ok(p) => p,
            Err(v) => return Ok(Err(v)),
        };
        let i = self.provider_index(f)?;
        let duration = f.num("duration")?;
        if !close(duration, p.duration, EVENT_TOL) {
            return f.violation(ViolationKind::Sequence, format!("duration {duration} differs from arrival {}", p.duration));
        }
        let reported = i64::from(f.u32("available_after")?);
        let prov = &self.providers[i];
        let expected_quality =
            ((prov.curve.raw(p.demand) - self.worst) / (self.best - self.worst)).clamp(0.0, 1.0);
        let quality = f.num("quality")?;
        let reward = f.num("reward")?;
        if !close(quality, expected_quality, EVENT_TOL) {
            return f.violation(
                ViolationKind::Reward,
                format!("quality {quality} but provider {i} at {} steps gives {expected_quality}", p.demand),
            );
        }
        if !close(reward, expected_quality, EVENT_TOL) {
            return f.violation(
                ViolationKind::Reward,
                format!("assign reward {reward} but quality is {expected_quality}"),
            );
        }
        let prov = &mut self.providers[i];
        prov.available -= i64::from(p.demand);
        prov.running.insert(
            p.id,
            Running {
                demand: p.demand,
                start: time,
                duration: p.duration,
                quality: expected_quality,
            },
        );
        self.reward_sum += reward;
        self.quality_sum += expected_quality;
        // a mismatch in the reported level is a conservation problem first;
        // a consistent but negative level means the task did not fit
        Ok(self.check_level(f, i, reported))
    }

    fn on_finish(&mut self, f: &Fields, time: f64) -> Judged {
        let i = self.provider_index(f)?;
        let id = f.u32("task_id")?;
        let reported = i64::from(f.u32("available_after")?);
        let Some(r) = self.providers[i].running.remove(&id) else {
            return f.violation(
                ViolationKind::Conservation,
                format!("task {id} finished on provider {i} but is not running there"),
            );
        };
        if f.u32("demand")? != r.demand {
            return f.violation(ViolationKind::Conservation, format!("task {id} finished with a different demand"));
        }
        if !close(time, r.start + r.duration, EVENT_TOL) {
            return f.violation(
                ViolationKind::Sequence,
                format!("task {id} finished at {time}, expected {}", r.start + r.duration),
            );
        }
        let quality = f.num("quality")?;
        if !close(quality, r.quality, EVENT_TOL) {
            return f.violation(
                ViolationKind::Reward,
                format!("task {id} finished with quality {quality}, assigned with {}", r.quality),
            );
        }
        self.providers[i].available += i64::from(r.demand);
        self.finished += 1;
        self.finished_quality += r.quality;
        Ok(self.check_level(f, i, reported))
    }

    fn on_crash(&mut self, f: &Fields, time: f64) -> Judged {
        let p = match self.take_pending(f, time)? {
            Ok(p) => p,
            Err(v) => return Ok(Err(v)),
        };
        let i = self.provider_index(f)?;
        if i64::from(p.demand) <= self.providers[i].available {
            return f.violation(
                ViolationKind::CrashPenalty,
                format!(
                    "crash on provider {i} although {} >= demand {}",
                    self.providers[i].available, p.demand
                ),
            );
        }
        let mut logged: BTreeMap<u32, f64> = BTreeMap::new();
        for item in f.array("interrupted")? {
            let it = f.nested(item, "interrupted[]")?;
            logged.insert(it.u32("task_id")?, it.num("progress")?);
        }
        let mut killed = 0usize;
        let mut progress_sum = 0.0;
        if self.reset_on_crash {
            let prov = &self.providers[i];
            let ours: Vec<u32> = prov.running.keys().copied().collect();
            let theirs: Vec<u32> = logged.keys().copied().collect();
            if ours != theirs {
                return f.violation(
                    ViolationKind::CrashPenalty,
                    format!("interrupted tasks {theirs:?} but provider {i} was running {ours:?}"),
                );
            }
            for (id, r) in &prov.running {
                let progress = ((time - r.start) / r.duration).clamp(0.0, 1.0);
                if !close(progress, logged[id], EVENT_TOL) {
                    return f.violation(
                        ViolationKind::CrashPenalty,
                        format!("task {id} progress logged as {}, recomputed {progress}", logged[id]),
                    );
                }
                progress_sum += progress;
            }
            killed = prov.running.len();
        } else if !logged.is_empty() {
            return f.violation(ViolationKind::CrashPenalty, "reject-only crash interrupted tasks".into());
        }
        let penalty = self.fixed_penalty + self.progress_weight * progress_sum;
        let reward = f.num("reward")?;
        if !close(reward, -penalty, EVENT_TOL) {
            return f.violation(
                ViolationKind::CrashPenalty,
                format!("crash reward {reward} but penalty recomputes to {penalty}"),
            );
        }
        let prov = &mut self.providers[i];
        if self.reset_on_crash {
            prov.running.clear();
            prov.available = i64::from(prov.total);
        }
        self.crashed += 1 + killed;
        self.reward_sum += reward;
        self.penalty_sum += penalty;
        let reported = i64::from(f.u32("available_after")?);
        Ok(self.check_level(f, i, reported))
    }

    fn on_end(&mut self, f: &Fields) -> Judged {
        self.ended = true;
        if let Some(p) = self.pending {
            return f.violation(ViolationKind::Sequence, format!("task {} was never placed", p.id));
        }
        if self.decisions != self.n_tasks {
            return f.violation(
                ViolationKind::Sequence,
                format!("{} decisions for {} tasks", self.decisions, self.n_tasks),
            );
        }
        for (i, p) in self.providers.iter().enumerate() {
            if let Some((id, _)) = p.running.iter().next() {
                return f.violation(
                    ViolationKind::Conservation,
                    format!("episode ended with task {id} still running on provider {i}"),
                );
            }
            if p.available != i64::from(p.total) {
                return f.violation(
                    ViolationKind::Conservation,
                    format!("provider {i} ends with {} of {} available", p.available, p.total),
                );
            }
        }
        let counts = [
            ("finished", f.uint("finished")? as usize, self.finished),
            ("crashed", f.uint("crashed")? as usize, self.crashed),
        ];
        for (name, logged, ours) in counts {
            if logged != ours {
                return f.violation(ViolationKind::Reward, format!("{name} = {logged}, log contains {ours}"));
            }
        }
        let sums = [
            ("episodic_reward", f.num("episodic_reward")?, self.reward_sum),
            ("quality_total", f.num("quality_total")?, self.quality_sum),
            ("penalty_total", f.num("penalty_total")?, self.penalty_sum),
        ];
        for (name, logged, ours) in sums {
            if !close(logged, ours, TOTAL_TOL) {
                return f.violation(ViolationKind::Reward, format!("{name} = {logged}, events sum to {ours}"));
            }
        }
        if !close(self.quality_sum - self.penalty_sum, self.reward_sum, TOTAL_TOL) {
            return f.violation(
                ViolationKind::Reward,
                "episodic reward is not quality minus penalties".into(),
            );
        }
        Ok(Ok(()))
    }

    fn finish(self) -> Result<ReplayReport, ReplayError> {
        let mut violation = self.violation;
        if violation.is_none() && !self.ended {
            violation = Some(Violation {
                line: self.lines,
                kind: ViolationKind::Sequence,
                message: "log has no end event".into(),
            });
        }
        Ok(ReplayReport {
            lines: self.lines,
            decisions: self.decisions,
            finished: self.finished,
            crashed: self.crashed,
            episodic_reward: self.reward_sum,
            quality_total: self.quality_sum,
            penalty_total: self.penalty_sum,
            avg_finished_reward: (self.finished > 0).then(|| self.finished_quality / self.finished as f64),
            violation,
        })
    }
}

/// Typed field access on one JSON object with line-numbered errors.
struct Fields<'a> {
    obj: &'a Map<String, Value>,
    line: usize,
}

impl<'a> Fields<'a> {
    fn new(obj: &'a Map<String, Value>, line: usize) -> Self {
        Self { obj, line }
    }

    fn malformed(&self, msg: String) -> ReplayError {
        ReplayError::Malformed { line: self.line, msg }
    }

    fn make(&self, kind: ViolationKind, message: String) -> Violation {
        Violation {
            line: self.line,
            kind,
            message,
        }
    }

    fn violation(&self, kind: ViolationKind, message: String) -> Judged {
        Ok(Err(self.make(kind, message)))
    }

    fn nested(&self, v: &'a Value, what: &str) -> Result<Fields<'a>, ReplayError> {
        v.as_object()
            .map(|obj| Fields::new(obj, self.line))
            .ok_or_else(|| self.malformed(format!("`{what}` must be an object")))
    }

    fn value(&self, key: &str) -> Result<&'a Value, ReplayError> {
        self.obj
            .get(key)
            .ok_or_else(|| self.malformed(format!("missing field `{key}`")))
    }

    fn str(&self, key: &str) -> Result<&'a str, ReplayError> {
        self.value(key)?
            .as_str()
            .ok_or_else(|| self.malformed(format!("`{key}` must be a string")))
    }

    fn opt_str(&self, key: &str) -> Result<Option<&'a str>, ReplayError> {
        match self.obj.get(key) {
            None => Ok(None),
            Some(_) => self.str(key).map(Some),
        }
    }

    fn num(&self, key: &str) -> Result<f64, ReplayError> {
        self.value(key)?
            .as_f64()
            .filter(|x| x.is_finite())
            .ok_or_else(|| self.malformed(format!("`{key}` must be a finite number")))
    }

    fn uint(&self, key: &str) -> Result<u64, ReplayError> {
        self.value(key)?
            .as_u64()
            .ok_or_else(|| self.malformed(format!("`{key}` must be a non-negative integer")))
    }

    fn u32(&self, key: &str) -> Result<u32, ReplayError> {
        u32::try_from(self.uint(key)?).map_err(|_| self.malformed(format!("`{key}` out of range")))
    }

    fn array(&self, key: &str) -> Result<&'a Vec<Value>, ReplayError> {
        self.value(key)?
            .as_array()
            .ok_or_else(|| self.malformed(format!("`{key}` must be an array")))
    }
}
