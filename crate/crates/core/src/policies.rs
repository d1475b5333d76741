//! Baseline provider-selection policies.
//!
//! All policies, including the learned agent, implement [`Policy`] and see
//! only an [`Observation`]. The greedy upper bound is the single exception
//! that knows provider quality, and it can only be built by handing it the
//! quality table explicitly.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Observation, StateVector};
use crate::quality::{QualityProfile, QualityScale};
use crate::workload::{stream_rng, Stream};

pub trait Policy {
    fn select(&mut self, obs: &Observation) -> usize;
}

impl<F: FnMut(&Observation) -> usize> Policy for F {
    fn select(&mut self, obs: &Observation) -> usize {
        self(obs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Random,
    RoundRobin,
    OverloadAvoid,
    GreedyOracle,
    Sac,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::Random,
        PolicyKind::RoundRobin,
        PolicyKind::OverloadAvoid,
        PolicyKind::GreedyOracle,
        PolicyKind::Sac,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Random => "random",
            PolicyKind::RoundRobin => "round_robin",
            PolicyKind::OverloadAvoid => "overload_avoid",
            PolicyKind::GreedyOracle => "greedy_oracle",
            PolicyKind::Sac => "sac",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| {
                format!("unknown policy `{s}` (expected random | round_robin | overload_avoid | greedy_oracle | sac)")
            })
    }
}

/// Uniform choice from a dedicated random stream.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: stream_rng(seed, Stream::Policy),
        }
    }
}

pub fn random_select(n_asps: usize, rng: &mut impl Rng) -> usize {
    rng.random_range(0..n_asps)
}

impl Policy for RandomPolicy {
    fn select(&mut self, obs: &Observation) -> usize {
        random_select(obs.n_asps(), &mut self.rng)
    }
}

/// Cycles through providers, ignoring their load.
#[derive(Debug, Clone, Default)]
pub struct RoundRobin {
    counter: usize,
}

impl RoundRobin {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_index(&mut self, n_asps: usize) -> usize {
        let i = self.counter % n_asps;
        self.counter = self.counter.wrapping_add(1);
        i
    }
}

impl Policy for RoundRobin {
    fn select(&mut self, obs: &Observation) -> usize {
        self.next_index(obs.n_asps())
    }
}

/// Index of the provider with the most available capacity, lowest index on ties.
pub fn overload_avoid_select(state: &StateVector) -> usize {
    let mut best = 0;
    for i in 1..state.n_asps() {
        if state.available(i) > state.available(best) {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OverloadAvoid;

impl Policy for OverloadAvoid {
    fn select(&mut self, obs: &Observation) -> usize {
        overload_avoid_select(&obs.state)
    }
}

/// Highest-quality provider that can fit the task; falls back to the most
/// available one when none can.
pub fn greedy_upper_bound_select(
    obs: &Observation,
    qualities: &[QualityProfile],
    scale: &QualityScale,
) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for (i, &avail) in obs.available.iter().enumerate() {
        if avail < obs.demand {
            continue;
        }
        let q = qualities[i]
            .eval_relative(obs.demand.max(1), scale)
            .expect("steps clamped to >= 1");
        if best.is_none_or(|(_, bq)| q > bq) {
            best = Some((i, q));
        }
    }
    match best {
        Some((i, _)) => i,
        None => overload_avoid_select(&obs.state),
    }
}

/// Greedy policy with privileged access to every provider's quality profile.
#[derive(Debug, Clone)]
pub struct GreedyOracle {
    qualities: Vec<QualityProfile>,
    scale: QualityScale,
}

impl GreedyOracle {
    pub fn with_quality_table(qualities: Vec<QualityProfile>, scale: QualityScale) -> Self {
        Self { qualities, scale }
    }
}

impl Policy for GreedyOracle {
    fn select(&mut self, obs: &Observation) -> usize {
        greedy_upper_bound_select(obs, &self.qualities, &self.scale)
    }
}
