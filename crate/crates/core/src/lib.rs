//! Simulation of AIGC service-provider selection at the wireless edge.
//!
//! - [`quality`]: four-parameter inference-steps → perceived-quality curve and its fitting.
//! - [`workload`]: seeded Poisson task stream and provider population.
//! - [`env`]: discrete-event environment with crash penalties and an event log.
//! - [`policies`]: random, round-robin, overload-avoidance and greedy upper-bound baselines.
//! - [`nn`]: dense networks, backprop and Adam.
//! - [`sac`]: discrete soft actor-critic agent.
//! - [`experiment`]: configuration, seed sweeps and result files.
//! - [`replay`]: independent invariant checker for event logs.

pub mod env;
pub mod experiment;
pub mod nn;
pub mod policies;
pub mod quality;
pub mod replay;
pub mod sac;
pub mod workload;
