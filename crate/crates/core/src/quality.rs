//! Four-parameter perceived-quality model.
//!
//! A diffusion model's output quality, measured by some image metric, is flat
//! below a minimum number of inference steps, changes linearly as steps are
//! added, and saturates once the model's capability is reached:
//!
//! ```text
//!  value
//!    |            (b_x, b_y) ____________
//!    |                     /
//!    |                    /
//!    | ________________ /
//!    |     (a_x, a_y)
//!    +------------------------------------ steps
//! ```
//!
//! Some metrics grow with quality (VIF, HaarPSI), others shrink (TV, BRISQUE);
//! [`MetricOrientation`] records which, so scores can be normalized to `[0, 1]`
//! with 1 always meaning "best".

use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QualityError {
    #[error("inference steps must be >= 1, got {0}")]
    ZeroSteps(u32),
    #[error("breakpoints must satisfy 1 <= a_x < b_x, got a_x={a_x}, b_x={b_x}")]
    Breakpoints { a_x: u32, b_x: u32 },
    #[error("profile values must be finite")]
    NonFinite,
    #[error("degenerate profile: a_y == b_y == {0}")]
    Degenerate(f64),
    #[error("a_y={a_y}, b_y={b_y} contradict orientation {orientation:?}")]
    Orientation {
        a_y: f64,
        b_y: f64,
        orientation: MetricOrientation,
    },
    #[error("reference scale worst == best == {0}")]
    DegenerateScale(f64),
    #[error("too few samples: need at least 4, got {0}")]
    TooFewSamples(usize),
    #[error("samples span {0} distinct step values, need at least 3")]
    TooFewDistinctSteps(usize),
    #[error("best fit violates the metric orientation: {0:?}")]
    FitFailure(RawFit),
    #[error("sample csv: {0}")]
    Csv(String),
}

/// Whether a larger raw metric value means better perceived quality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricOrientation {
    HigherIsBetter,
    LowerIsBetter,
}

impl MetricOrientation {
    /// True when moving from `from` to `to` does not make quality worse.
    fn non_worsening(self, from: f64, to: f64) -> bool {
        match self {
            MetricOrientation::HigherIsBetter => from <= to,
            MetricOrientation::LowerIsBetter => from >= to,
        }
    }
}

/// The (A_x, A_y, B_x, B_y) curve plus metric orientation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawProfile", into = "RawProfile")]
pub struct QualityProfile {
    a_x: u32,
    a_y: f64,
    b_x: u32,
    b_y: f64,
    orientation: MetricOrientation,
}

#[derive(Serialize, Deserialize)]
struct RawProfile {
    a_x: u32,
    a_y: f64,
    b_x: u32,
    b_y: f64,
    orientation: MetricOrientation,
}

impl TryFrom<RawProfile> for QualityProfile {
    type Error = QualityError;

    fn try_from(r: RawProfile) -> Result<Self, Self::Error> {
        QualityProfile::new(r.a_x, r.a_y, r.b_x, r.b_y, r.orientation)
    }
}

impl From<QualityProfile> for RawProfile {
    fn from(p: QualityProfile) -> Self {
        RawProfile {
            a_x: p.a_x,
            a_y: p.a_y,
            b_x: p.b_x,
            b_y: p.b_y,
            orientation: p.orientation,
        }
    }
}

impl QualityProfile {
    pub fn new(
        a_x: u32,
        a_y: f64,
        b_x: u32,
        b_y: f64,
        orientation: MetricOrientation,
    ) -> Result<Self, QualityError> {
        if a_x == 0 || a_x >= b_x {
            return Err(QualityError::Breakpoints { a_x, b_x });
        }
        if !a_y.is_finite() || !b_y.is_finite() {
            return Err(QualityError::NonFinite);
        }
        if a_y == b_y {
            return Err(QualityError::Degenerate(a_y));
        }
        if !orientation.non_worsening(a_y, b_y) {
            return Err(QualityError::Orientation {
                a_y,
                b_y,
                orientation,
            });
        }
        Ok(Self {
            a_x,
            a_y,
            b_x,
            b_y,
            orientation,
        })
    }

    pub fn a_x(&self) -> u32 {
        self.a_x
    }

    pub fn a_y(&self) -> f64 {
        self.a_y
    }

    pub fn b_x(&self) -> u32 {
        self.b_x
    }

    pub fn b_y(&self) -> f64 {
        self.b_y
    }

    pub fn orientation(&self) -> MetricOrientation {
        self.orientation
    }

    /// Fraction of the way from the lower plateau to the upper one.
    fn ramp(&self, steps: u32) -> f64 {
        if steps <= self.a_x {
            0.0
        } else if steps >= self.b_x {
            1.0
        } else {
            f64::from(steps - self.a_x) / f64::from(self.b_x - self.a_x)
        }
    }

    /// Raw metric value after `steps` inference steps.
    pub fn eval_raw(&self, steps: u32) -> Result<f64, QualityError> {
        if steps == 0 {
            return Err(QualityError::ZeroSteps(steps));
        }
        let t = self.ramp(steps);
        Ok(if t == 0.0 {
            self.a_y
        } else if t == 1.0 {
            self.b_y
        } else {
            self.a_y + (self.b_y - self.a_y) * t
        })
    }

    /// Quality in `[0, 1]` relative to this profile's own plateaus: 0 at or
    /// below `a_x`, 1 at or above `b_x`.
    pub fn eval_normalized(&self, steps: u32) -> Result<f64, QualityError> {
        let r = self.eval_raw(steps)?;
        let q = match self.orientation {
            MetricOrientation::HigherIsBetter => (r - self.a_y) / (self.b_y - self.a_y),
            MetricOrientation::LowerIsBetter => (self.a_y - r) / (self.a_y - self.b_y),
        };
        Ok(q.clamp(0.0, 1.0))
    }

    /// Quality in `[0, 1]` on a scale shared by several profiles, so that
    /// providers whose peaks differ produce comparable scores.
    pub fn eval_relative(&self, steps: u32, scale: &QualityScale) -> Result<f64, QualityError> {
        Ok(scale.normalize(self.eval_raw(steps)?))
    }
}

/// A common `[worst, best]` metric range used to compare profiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityScale {
    pub worst: f64,
    pub best: f64,
}

impl QualityScale {
    pub fn new(worst: f64, best: f64) -> Result<Self, QualityError> {
        if !worst.is_finite() || !best.is_finite() {
            return Err(QualityError::NonFinite);
        }
        if worst == best {
            return Err(QualityError::DegenerateScale(worst));
        }
        Ok(Self { worst, best })
    }

    /// Unit scale for metrics already expressed as a `[0, 1]` score.
    pub fn unit() -> Self {
        Self {
            worst: 0.0,
            best: 1.0,
        }
    }

    pub fn normalize(&self, raw: f64) -> f64 {
        ((raw - self.worst) / (self.best - self.worst)).clamp(0.0, 1.0)
    }
}

/// One `(steps, metric value)` measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveSample {
    pub steps: u32,
    pub value: f64,
}

impl CurveSample {
    pub fn new(steps: u32, value: f64) -> Result<Self, QualityError> {
        if steps == 0 {
            return Err(QualityError::ZeroSteps(steps));
        }
        if !value.is_finite() {
            return Err(QualityError::NonFinite);
        }
        Ok(Self { steps, value })
    }
}

/// Unvalidated fit result, reported when it cannot form a [`QualityProfile`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawFit {
    pub a_x: u32,
    pub a_y: f64,
    pub b_x: u32,
    pub b_y: f64,
    pub sse: f64,
}

/// Least-squares fit of the two-plateau piecewise-linear model.
///
/// Breakpoints are searched exhaustively over pairs of observed step values;
/// for each pair the plateau heights have a closed-form solution. Ties in the
/// residual go to the smallest `a_x`, then the smallest `b_x`.
pub fn fit_profile(
    samples: &[CurveSample],
    orientation: MetricOrientation,
) -> Result<QualityProfile, QualityError> {
    if samples.len() < 4 {
        return Err(QualityError::TooFewSamples(samples.len()));
    }
    let mut grid: Vec<u32> = samples.iter().map(|s| s.steps).collect();
    grid.sort_unstable();
    grid.dedup();
    if grid.len() < 3 {
        return Err(QualityError::TooFewDistinctSteps(grid.len()));
    }

    let mut best: Option<RawFit> = None;
    for (i, &a_x) in grid.iter().enumerate() {
        for &b_x in &grid[i + 1..] {
            let Some((a_y, b_y)) = plateau_heights(samples, a_x, b_x) else {
                continue;
            };
            let sse = sum_squared_residuals(samples, a_x, a_y, b_x, b_y);
            let improves = match &best {
                None => true,
                Some(b) => sse < b.sse - 1e-12 * (1.0 + b.sse),
            };
            if improves {
                best = Some(RawFit {
                    a_x,
                    a_y,
                    b_x,
                    b_y,
                    sse,
                });
            }
        }
    }

    // grid has >= 3 entries, and a pair always has samples on both plateaus
    let fit = best.expect("at least one breakpoint pair");
    QualityProfile::new(fit.a_x, fit.a_y, fit.b_x, fit.b_y, orientation)
        .map_err(|_| QualityError::FitFailure(fit))
}

fn ramp(steps: u32, a_x: u32, b_x: u32) -> f64 {
    if steps <= a_x {
        0.0
    } else if steps >= b_x {
        1.0
    } else {
        f64::from(steps - a_x) / f64::from(b_x - a_x)
    }
}

/// Solves min Σ (v − a·(1−t) − b·t)² for (a, b) given fixed breakpoints.
fn plateau_heights(samples: &[CurveSample], a_x: u32, b_x: u32) -> Option<(f64, f64)> {
    let (mut uu, mut ut, mut tt, mut uv, mut tv) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for s in samples {
        let t = ramp(s.steps, a_x, b_x);
        let u = 1.0 - t;
        uu += u * u;
        ut += u * t;
        tt += t * t;
        uv += u * s.value;
        tv += t * s.value;
    }
    let det = uu * tt - ut * ut;
    if det.abs() <= 1e-12 * (uu * tt).max(1.0) {
        return None;
    }
    Some(((uv * tt - tv * ut) / det, (tv * uu - uv * ut) / det))
}

fn sum_squared_residuals(samples: &[CurveSample], a_x: u32, a_y: f64, b_x: u32, b_y: f64) -> f64 {
    samples
        .iter()
        .map(|s| {
            let t = ramp(s.steps, a_x, b_x);
            let r = s.value - (a_y + (b_y - a_y) * t);
            r * r
        })
        .sum()
}

/// Reads `steps,value` rows; the header row is mandatory.
pub fn read_samples_csv<R: Read>(reader: R) -> Result<Vec<CurveSample>, QualityError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| QualityError::Csv(e.to_string()))?
        .clone();
    if headers.len() != 2 || &headers[0] != "steps" || &headers[1] != "value" {
        return Err(QualityError::Csv(format!(
            "expected header `steps,value`, got `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<(u32, f64)>().enumerate() {
        let (steps, value) = rec.map_err(|e| QualityError::Csv(format!("row {}: {e}", i + 2)))?;
        out.push(CurveSample::new(steps, value)?);
    }
    Ok(out)
}
