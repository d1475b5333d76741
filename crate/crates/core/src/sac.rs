//! Discrete-action soft actor-critic.
//!
//! The actor maps a state to one logit per provider; the twin critics map a
//! state to one Q value per provider. Because the action set is finite, every
//! expectation over the policy is computed exactly by summing over actions
//! instead of sampling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EdgeEnv, EnvError, EpisodeRecord, Observation, PenaltyConfig, StateVector};
use crate::nn::{adam_step, argmax, log_softmax, softmax, AdamState, Checkpoint, Grads, Mlp, NnError};
use crate::policies::Policy;
use crate::workload::{stream_rng, Stream, Workload, WorkloadError};

#[derive(Debug, Error)]
pub enum SacError {
    #[error("invalid sac config: {0}")]
    Config(String),
    #[error("state has length {got}, agent expects {expected}")]
    StateDim { expected: usize, got: usize },
    #[error("replay buffer holds {len} transitions, batch needs {batch}")]
    BufferUnderfull { len: usize, batch: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SacConfig {
    pub gamma: f64,
    pub tau: f64,
    pub alpha: f64,
    pub auto_alpha: bool,
    /// Target entropy as a fraction of `ln(n_actions)`.
    pub target_entropy_ratio: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    /// Environment steps between gradient updates.
    pub update_every: usize,
    pub warmup_steps: usize,
    pub train_episodes: usize,
    pub hidden: Vec<usize>,
    pub grad_clip: f64,
    /// Standardize network inputs with per-feature statistics frozen at the
    /// end of warmup.
    pub normalize_inputs: bool,
    /// Multiplier applied to standardized inputs.
    pub input_gain: f64,
    /// Final actor/critic learning rate as a fraction of the initial one;
    /// the rate decays linearly over training. 1.0 keeps it constant.
    pub lr_final_ratio: f64,
    /// Append one clipped capacity-headroom feature per provider, computed
    /// from the demand and availability entries of the state.
    pub headroom_features: bool,
    /// Return the periodic checkpoint with the best validation reward
    /// instead of the last one.
    pub keep_best: bool,
    /// Greedy evaluation on the held-out workload every this many episodes.
    pub eval_interval: usize,
    pub seed: u64,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.8,
            tau: 0.05,
            alpha: 0.05,
            auto_alpha: false,
            target_entropy_ratio: 0.6,
            batch_size: 64,
            buffer_capacity: 100_000,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            alpha_lr: 3e-4,
            update_every: 2,
            warmup_steps: 1000,
            train_episodes: 60,
            hidden: vec![64, 64],
            grad_clip: 10.0,
            normalize_inputs: true,
            input_gain: 1.0,
            lr_final_ratio: 1.0,
            headroom_features: true,
            keep_best: true,
            eval_interval: 5,
            seed: 0,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<(), SacError> {
        let bad = |m: String| Err(SacError::Config(m));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must be in (0, 1), got {}", self.gamma));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau must be in (0, 1], got {}", self.tau));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if self.auto_alpha && self.alpha <= 0.0 {
            return bad("auto_alpha needs a positive initial alpha".into());
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return bad("need 0 < batch_size <= buffer_capacity".into());
        }
        if self.update_every == 0 || self.eval_interval == 0 {
            return bad("update_every and eval_interval must be >= 1".into());
        }
        if !(self.lr_final_ratio > 0.0 && self.lr_final_ratio <= 1.0) {
            return bad(format!("lr_final_ratio must be in (0, 1], got {}", self.lr_final_ratio));
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer sizes must be > 0".into());
        }
        for (k, v) in [
            ("actor_lr", self.actor_lr),
            ("critic_lr", self.critic_lr),
            ("alpha_lr", self.alpha_lr),
            ("grad_clip", self.grad_clip),
            ("input_gain", self.input_gain),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{k} must be > 0, got {v}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: StateVector,
    pub action: usize,
    pub reward: f64,
    pub next_state: StateVector,
    pub done: bool,
}

/// Fixed-size ring of transitions; the oldest entry is overwritten first.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be > 0");
        Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            cursor: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Uniform sample with replacement.
    pub fn sample<'a>(
        &'a self,
        batch: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<&'a Transition>, SacError> {
        if self.items.len() < batch {
            return Err(SacError::BufferUnderfull {
                len: self.items.len(),
                batch,
            });
        }
        Ok((0..batch)
            .map(|_| &self.items[rng.random_range(0..self.items.len())])
            .collect())
    }
}

/// Headroom of one demand-unit maps to this many feature units before clipping.
pub const HEADROOM_SHARPNESS: f64 = 4.0;

/// Fixed map from states to network inputs: `(x - mean) / std`, optionally
/// followed by per-provider headroom features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Capacity normalizer over demand normalizer. When set, each provider
    /// `i` adds `clamp(SHARPNESS · (available_i − demand) / max_demand, ±1)`.
    #[serde(default)]
    pub headroom: Option<f64>,
}

impl InputScaler {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
            headroom: None,
        }
    }

    pub fn with_headroom(mut self, ratio: Option<f64>) -> Self {
        self.headroom = ratio;
        self
    }

    pub fn state_dim(&self) -> usize {
        self.mean.len()
    }

    /// Width of the produced network input.
    pub fn output_dim(&self) -> usize {
        let d = self.mean.len();
        d + self.headroom.map_or(0, |_| d.saturating_sub(2) / 2)
    }

    /// Per-feature mean and standard deviation over the stored states.
    /// Features with (near) zero spread are only centered.
    pub fn fit<'a>(states: impl Iterator<Item = &'a StateVector>, dim: usize) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for s in states {
            n += 1;
            for ((a, b), x) in sum.iter_mut().zip(sq.iter_mut()).zip(&s.0) {
                *a += x;
                *b += x * x;
            }
        }
        if n == 0 {
            return Self::identity(dim);
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|a| a / nf).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(b, m)| {
                let sd = (b / nf - m * m).max(0.0).sqrt();
                if sd < 1e-3 {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Self {
            mean,
            std,
            headroom: None,
        }
    }

    pub fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.extend(
            x.iter()
                .zip(self.mean.iter().zip(&self.std))
                .map(|(x, (m, s))| (x - m) / s),
        );
        if let Some(ratio) = self.headroom {
            let demand = x[0];
            out.extend(x[2..].chunks_exact(2).map(|pair| {
                ((pair[1] * ratio - demand) * HEADROOM_SHARPNESS).clamp(-1.0, 1.0)
            }));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    Greedy,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub critic1: f64,
    pub critic2: f64,
    pub actor: f64,
    pub entropy: f64,
    pub alpha: f64,
}

/// Policy probabilities and log-probabilities from logits, row by row.
fn policy_rows(logits: &[f64], n_actions: usize) -> (Vec<f64>, Vec<f64>) {
    let mut probs = Vec::with_capacity(logits.len());
    let mut logp = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(n_actions) {
        probs.extend(softmax(row));
        logp.extend(log_softmax(row));
    }
    (probs, logp)
}

fn flatten<'a>(states: impl Iterator<Item = &'a StateVector>, scaler: &InputScaler) -> Vec<f64> {
    let mut out = Vec::new();
    for s in states {
        scaler.apply(&s.0, &mut out);
    }
    out
}

/// Soft Bellman targets
/// `y = r + γ (1 − done) Σ_a π(a|s') [min(Q1'(s',a), Q2'(s',a)) − α log π(a|s')]`.
pub fn critic_targets(
    batch: &[&Transition],
    actor: &Mlp,
    target1: &Mlp,
    target2: &Mlp,
    alpha: f64,
    gamma: f64,
) -> Result<Vec<f64>, SacError> {
    let dim = actor.input_dim();
    critic_targets_scaled(batch, &InputScaler::identity(dim), actor, target1, target2, alpha, gamma)
}

fn critic_targets_scaled(
    batch: &[&Transition],
    scaler: &InputScaler,
    actor: &Mlp,
    target1: &Mlp,
    target2: &Mlp,
    alpha: f64,
    gamma: f64,
) -> Result<Vec<f64>, SacError> {
    let n = batch.len();
    let n_actions = actor.output_dim();
    if target1.output_dim() != n_actions || target2.output_dim() != n_actions {
        return Err(NnError::Shape("critic and actor action counts differ".into()).into());
    }
    let next = flatten(batch.iter().map(|t| &t.next_state), scaler);
    let logits = actor.forward_batch(&next, n)?;
    let (probs, logp) = policy_rows(logits.output(), n_actions);
    let q1 = target1.forward_batch(&next, n)?;
    let q2 = target2.forward_batch(&next, n)?;
    Ok(batch
        .iter()
        .enumerate()
        .map(|(k, t)| {
            if t.done {
                return t.reward;
            }
            let r = k * n_actions..(k + 1) * n_actions;
            let soft_value: f64 = r
                .map(|j| probs[j] * (q1.output()[j].min(q2.output()[j]) - alpha * logp[j]))
                .sum();
            t.reward + gamma * soft_value
        })
        .collect())
}

/// Actor objective `mean_s Σ_a π(a|s) (α log π(a|s) − min Q(s,a))` and its
/// gradient with respect to the logits.
pub fn actor_loss_and_logit_grad(
    logits: &[f64],
    min_q: &[f64],
    alpha: f64,
    n_actions: usize,
) -> (f64, Vec<f64>, f64) {
    let n = logits.len() / n_actions;
    let (probs, logp) = policy_rows(logits, n_actions);
    let mut loss = 0.0;
    let mut entropy = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for k in 0..n {
        let r = k * n_actions..(k + 1) * n_actions;
        let h: Vec<f64> = r.clone().map(|j| alpha * logp[j] - min_q[j]).collect();
        let p = &probs[r.clone()];
        let mean_h: f64 = p.iter().zip(&h).map(|(p, h)| p * h).sum();
        loss += mean_h;
        entropy -= p.iter().zip(&logp[r.clone()]).map(|(p, l)| p * l).sum::<f64>();
        for (j, g) in grad[r].iter_mut().enumerate() {
            *g = p[j] * (h[j] - mean_h) / n as f64;
        }
    }
    (loss / n as f64, grad, entropy / n as f64)
}

#[derive(Debug, Clone)]
pub struct SacAgent {
    config: SacConfig,
    n_actions: usize,
    state_dim: usize,
    scaler: InputScaler,
    pub actor: Mlp,
    pub critic1: Mlp,
    pub critic2: Mlp,
    pub target1: Mlp,
    pub target2: Mlp,
    actor_opt: AdamState,
    critic1_opt: AdamState,
    critic2_opt: AdamState,
    log_alpha: f64,
    alpha_opt: AdamState,
    rng: ChaCha8Rng,
}

/// Networks needed to resume acting or evaluating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SacCheckpoint {
    pub actor: Checkpoint,
    pub critic1: Checkpoint,
    pub critic2: Checkpoint,
    pub alpha: f64,
    pub scaler: InputScaler,
}

impl SacAgent {
    pub fn new(state_dim: usize, n_actions: usize, config: SacConfig) -> Result<Self, SacError> {
        Self::with_encoder(InputScaler::identity(state_dim), n_actions, config)
    }

    /// Builds networks sized for the encoder's output.
    pub fn with_encoder(scaler: InputScaler, n_actions: usize, config: SacConfig) -> Result<Self, SacError> {
        config.validate()?;
        let state_dim = scaler.state_dim();
        if scaler.std.len() != state_dim {
            return Err(SacError::Config("input scaler mean/std lengths differ".into()));
        }
        if let Some(r) = scaler.headroom {
            if !(r.is_finite() && r > 0.0) || state_dim != 2 + 2 * n_actions {
                return Err(SacError::Config(format!(
                    "headroom features need a positive ratio and a state of length 2 + 2·{n_actions}"
                )));
            }
        }
        let mut init = stream_rng(config.seed, Stream::Agent);
        let mut sizes = vec![scaler.output_dim()];
        sizes.extend(&config.hidden);
        sizes.push(n_actions);
        let actor = Mlp::new(&sizes, &mut init)?;
        let critic1 = Mlp::new(&sizes, &mut init)?;
        let critic2 = Mlp::new(&sizes, &mut init)?;
        let n_params = actor.params().len();
        let clip = config.grad_clip;
        let mut rng = stream_rng(config.seed, Stream::Agent);
        // keep acting draws apart from initialization draws
        rng.set_word_pos(1 << 40);
        Ok(Self {
            n_actions,
            state_dim,
            scaler,
            target1: critic1.clone(),
            target2: critic2.clone(),
            actor_opt: AdamState::new(n_params, config.actor_lr).with_clip(clip),
            critic1_opt: AdamState::new(n_params, config.critic_lr).with_clip(clip),
            critic2_opt: AdamState::new(n_params, config.critic_lr).with_clip(clip),
            log_alpha: config.alpha.max(f64::MIN_POSITIVE).ln(),
            alpha_opt: AdamState::new(1, config.alpha_lr),
            actor,
            critic1,
            critic2,
            rng,
            config,
        })
    }

    pub fn config(&self) -> &SacConfig {
        &self.config
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn alpha(&self) -> f64 {
        if self.config.auto_alpha {
            self.log_alpha.exp()
        } else {
            self.config.alpha
        }
    }

    pub fn scaler(&self) -> &InputScaler {
        &self.scaler
    }

    pub fn set_scaler(&mut self, scaler: InputScaler) {
        assert_eq!(scaler.output_dim(), self.scaler.output_dim(), "scaler dimension");
        self.scaler = scaler;
    }

    /// The state as the networks see it.
    pub fn network_input(&self, state: &StateVector) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.scaler.output_dim());
        self.scaler.apply(&state.0, &mut out);
        out
    }

    /// Scales the configured actor and critic learning rates by `factor`.
    pub fn set_lr_factor(&mut self, factor: f64) {
        self.actor_opt.lr = self.config.actor_lr * factor;
        self.critic1_opt.lr = self.config.critic_lr * factor;
        self.critic2_opt.lr = self.config.critic_lr * factor;
    }

    pub fn target_entropy(&self) -> f64 {
        self.config.target_entropy_ratio * (self.n_actions as f64).ln()
    }

    fn check_state(&self, state: &[f64]) -> Result<(), SacError> {
        if state.len() != self.state_dim {
            return Err(SacError::StateDim {
                expected: self.state_dim,
                got: state.len(),
            });
        }
        Ok(())
    }

    pub fn action_probs(&self, state: &StateVector) -> Result<Vec<f64>, SacError> {
        self.check_state(&state.0)?;
        Ok(softmax(&self.actor.forward(&self.network_input(state))?))
    }

    pub fn act(&mut self, state: &StateVector, mode: ActMode) -> Result<usize, SacError> {
        self.check_state(&state.0)?;
        let logits = self.actor.forward(&self.network_input(state))?;
        Ok(match mode {
            ActMode::Greedy => argmax(&logits),
            ActMode::Sample => {
                let probs = softmax(&logits);
                let u: f64 = self.rng.random();
                let mut acc = 0.0;
                let mut pick = probs.len() - 1;
                for (i, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                pick
            }
        })
    }

    /// Uniform action from the agent's stream, used before learning starts.
    pub fn act_uniform(&mut self) -> usize {
        self.rng.random_range(0..self.n_actions)
    }

    /// One gradient step on both critics, the actor and (optionally) the
    /// temperature, followed by Polyak averaging of the target critics.
    pub fn update(&mut self, buffer: &ReplayBuffer) -> Result<LossReport, SacError> {
        let batch = buffer.sample(self.config.batch_size, &mut self.rng)?;
        self.update_on(&batch)
    }

    pub fn update_on(&mut self, batch: &[&Transition]) -> Result<LossReport, SacError> {
        let n = batch.len();
        let na = self.n_actions;
        let alpha = self.alpha();
        let y = critic_targets_scaled(
            batch,
            &self.scaler,
            &self.actor,
            &self.target1,
            &self.target2,
            alpha,
            self.config.gamma,
        )?;
        let states = flatten(batch.iter().map(|t| &t.state), &self.scaler);

        let mut critic_losses = [0.0; 2];
        for (c, loss_out) in critic_losses.iter_mut().enumerate() {
            let (net, opt) = match c {
                0 => (&mut self.critic1, &mut self.critic1_opt),
                _ => (&mut self.critic2, &mut self.critic2_opt),
            };
            let acts = net.forward_batch(&states, n)?;
            let q = acts.output();
            let mut d_out = vec![0.0; n * na];
            let mut loss = 0.0;
            for (k, t) in batch.iter().enumerate() {
                let err = q[k * na + t.action] - y[k];
                loss += 0.5 * err * err;
                d_out[k * na + t.action] = err / n as f64;
            }
            *loss_out = loss / n as f64;
            let mut g = Grads::zeros_like(net);
            net.accumulate_grads(&acts, &d_out, &mut g)?;
            adam_step(opt, net.params_mut(), &g.values)?;
        }

        let q1 = self.critic1.forward_batch(&states, n)?;
        let q2 = self.critic2.forward_batch(&states, n)?;
        let min_q: Vec<f64> = q1
            .output()
            .iter()
            .zip(q2.output())
            .map(|(a, b)| a.min(*b))
            .collect();
        let acts = self.actor.forward_batch(&states, n)?;
        let (actor_loss, d_logits, entropy) = actor_loss_and_logit_grad(acts.output(), &min_q, alpha, na);
        let mut g = Grads::zeros_like(&self.actor);
        self.actor.accumulate_grads(&acts, &d_logits, &mut g)?;
        adam_step(&mut self.actor_opt, self.actor.params_mut(), &g.values)?;

        if self.config.auto_alpha {
            // d/d(log α) of log α · (H − H_target)
            let grad = entropy - self.target_entropy();
            let mut la = [self.log_alpha];
            adam_step(&mut self.alpha_opt, &mut la, &[grad])?;
            self.log_alpha = la[0];
        }

        let tau = self.config.tau;
        self.target1.soft_update_from(&self.critic1, tau);
        self.target2.soft_update_from(&self.critic2, tau);

        Ok(LossReport {
            critic1: critic_losses[0],
            critic2: critic_losses[1],
            actor: actor_loss,
            entropy,
            alpha,
        })
    }

    pub fn checkpoint(&self) -> SacCheckpoint {
        SacCheckpoint {
            actor: self.actor.to_checkpoint(),
            critic1: self.critic1.to_checkpoint(),
            critic2: self.critic2.to_checkpoint(),
            alpha: self.alpha(),
            scaler: self.scaler.clone(),
        }
    }

    /// Rebuilds an agent from saved networks. Optimizer moments start fresh.
    pub fn from_checkpoint(ck: &SacCheckpoint, mut config: SacConfig) -> Result<Self, SacError> {
        let actor = Mlp::from_checkpoint(&ck.actor)?;
        let n_actions = actor.output_dim();
        if ck.scaler.output_dim() != actor.input_dim() {
            return Err(NnError::Shape("input scaler does not match actor input".into()).into());
        }
        config.hidden = actor.sizes()[1..actor.sizes().len() - 1].to_vec();
        config.alpha = ck.alpha;
        config.headroom_features = ck.scaler.headroom.is_some();
        let mut agent = Self::with_encoder(ck.scaler.clone(), n_actions, config)?;
        agent.critic1 = Mlp::from_checkpoint(&ck.critic1)?;
        agent.critic2 = Mlp::from_checkpoint(&ck.critic2)?;
        if agent.critic1.sizes() != actor.sizes() || agent.critic2.sizes() != actor.sizes() {
            return Err(NnError::Shape("critic shapes differ from actor".into()).into());
        }
        agent.target1 = agent.critic1.clone();
        agent.target2 = agent.critic2.clone();
        agent.actor = actor;
        Ok(agent)
    }

    /// Borrow the agent as a [`Policy`].
    pub fn policy(&mut self, mode: ActMode) -> AgentPolicy<'_> {
        AgentPolicy { agent: self, mode }
    }
}

pub struct AgentPolicy<'a> {
    agent: &'a mut SacAgent,
    mode: ActMode,
}

impl Policy for AgentPolicy<'_> {
    fn select(&mut self, obs: &Observation) -> usize {
        self.agent
            .act(&obs.state, self.mode)
            .expect("environment state matches agent input size")
    }
}

/// One row of the learning curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub episode: usize,
    pub episodic_reward: f64,
    pub avg_task_reward: Option<f64>,
    pub crashes: usize,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub entropy: f64,
    pub alpha: f64,
    pub updates: usize,
}

/// Greedy performance over the validation workloads after one episode:
/// mean episodic reward, mean finished-task reward, total crashed tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub episode: usize,
    pub episodic_reward: f64,
    pub avg_task_reward: Option<f64>,
    pub crashes: usize,
}

fn evaluate_all(
    agent: &mut SacAgent,
    episode: usize,
    workloads: &[Workload],
    penalties: PenaltyConfig,
) -> Result<EvalPoint, SacError> {
    let (mut reward, mut quality, mut n_quality, mut crashes) = (0.0, 0.0, 0usize, 0usize);
    for w in workloads {
        let rec = evaluate(agent, w, penalties)?;
        reward += rec.episodic_reward;
        crashes += rec.crashed;
        if let Some(q) = rec.avg_finished_reward {
            quality += q;
            n_quality += 1;
        }
    }
    Ok(EvalPoint {
        episode,
        episodic_reward: reward / workloads.len() as f64,
        avg_task_reward: (n_quality > 0).then(|| quality / n_quality as f64),
        crashes,
    })
}

pub struct TrainOutcome {
    pub curve: Vec<EpisodeStats>,
    /// Periodic greedy runs on the validation workloads.
    pub evals: Vec<EvalPoint>,
    /// Episode whose checkpoint `agent` holds.
    pub selected_episode: usize,
    pub agent: SacAgent,
}

/// Trains a fresh agent. `make_workload(e)` supplies the workload for
/// training episode `e`; `validation` is only used for periodic greedy
/// evaluation and, with `keep_best`, checkpoint selection. Keep it disjoint
/// from any workload used to report final results.
pub fn train<F>(
    mut make_workload: F,
    validation: &[Workload],
    penalties: PenaltyConfig,
    config: SacConfig,
) -> Result<TrainOutcome, SacError>
where
    F: FnMut(usize) -> Result<Workload, WorkloadError>,
{
    config.validate()?;
    let Some(first) = validation.first() else {
        return Err(SacError::Config("at least one validation workload is required".into()));
    };
    let n_asps = first.asps.len();
    let headroom = config.headroom_features.then(|| {
        let max_total = first.asps.iter().map(|a| a.total_capacity).max().unwrap_or(1);
        f64::from(max_total) / f64::from(first.config.demand_range.1)
    });
    let encoder = InputScaler::identity(2 + 2 * n_asps).with_headroom(headroom);
    let mut agent = SacAgent::with_encoder(encoder, n_asps, config.clone())?;
    let mut buffer = ReplayBuffer::new(config.buffer_capacity);
    let mut curve = Vec::with_capacity(config.train_episodes);
    let mut evals = Vec::new();
    let mut total_steps = 0usize;
    let mut best: Option<(f64, usize, SacAgent)> = None;

    for episode in 0..config.train_episodes {
        let progress = episode as f64 / config.train_episodes as f64;
        agent.set_lr_factor(1.0 - (1.0 - config.lr_final_ratio) * progress);
        let workload = make_workload(episode)?;
        let mut env = EdgeEnv::new(&workload, penalties)?.without_log();
        let mut state = env.reset();
        let (mut ep_reward, mut crashes) = (0.0, 0usize);
        let (mut finished, mut finished_quality) = (0usize, 0.0);
        let mut sums = LossReport::default();
        let mut updates = 0usize;
        while !env.is_done() {
            let action = if total_steps < config.warmup_steps {
                agent.act_uniform()
            } else {
                agent.act(&state, ActMode::Sample)?
            };
            let out = env.step(action)?;
            ep_reward += out.reward;
            crashes += out.crashed_now;
            finished += out.finished_since_last.len();
            finished_quality += out.finished_since_last.iter().map(|(_, q)| q).sum::<f64>();
            buffer.push(Transition {
                state: std::mem::replace(&mut state, out.next_state.clone()),
                action,
                reward: out.reward,
                next_state: out.next_state,
                done: out.done,
            });
            total_steps += 1;
            if config.normalize_inputs && total_steps == config.warmup_steps.max(1) {
                let dim = agent.state_dim;
                let mut scaler =
                    InputScaler::fit(buffer.iter().map(|t| &t.state), dim).with_headroom(headroom);
                scaler.std.iter_mut().for_each(|s| *s /= config.input_gain);
                agent.set_scaler(scaler);
            }
            if total_steps >= config.warmup_steps
                && buffer.len() >= config.batch_size
                && total_steps.is_multiple_of(config.update_every)
            {
                let r = agent.update(&buffer)?;
                sums.critic1 += 0.5 * (r.critic1 + r.critic2);
                sums.actor += r.actor;
                sums.entropy += r.entropy;
                updates += 1;
            }
        }
        let per = |x: f64| if updates > 0 { x / updates as f64 } else { f64::NAN };
        curve.push(EpisodeStats {
            episode,
            episodic_reward: ep_reward,
            avg_task_reward: (finished > 0).then(|| finished_quality / finished as f64),
            crashes,
            actor_loss: per(sums.actor),
            critic_loss: per(sums.critic1),
            entropy: per(sums.entropy),
            alpha: agent.alpha(),
            updates,
        });
        if (episode + 1) % config.eval_interval == 0 || episode + 1 == config.train_episodes {
            let point = evaluate_all(&mut agent, episode, validation, penalties)?;
            evals.push(point);
            if config.keep_best && best.as_ref().is_none_or(|(r, _, _)| point.episodic_reward > *r) {
                best = Some((point.episodic_reward, episode, agent.clone()));
            }
        }
    }
    let last = config.train_episodes.saturating_sub(1);
    let (selected_episode, agent) = match best {
        Some((_, e, a)) => (e, a),
        None => (last, agent),
    };
    Ok(TrainOutcome {
        curve,
        evals,
        selected_episode,
        agent,
    })
}

/// Greedy-mode episode on `workload`, with the full event log.
pub fn evaluate(
    agent: &mut SacAgent,
    workload: &Workload,
    penalties: PenaltyConfig,
) -> Result<EpisodeRecord, SacError> {
    Ok(crate::env::run_episode(
        &mut agent.policy(ActMode::Greedy),
        workload,
        penalties,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> SacConfig {
        SacConfig {
            batch_size: 4,
            buffer_capacity: 16,
            hidden: vec![5],
            ..Default::default()
        }
    }

    fn transition(k: usize, dim: usize, n_actions: usize, done: bool) -> Transition {
        let s: Vec<f64> = (0..dim).map(|i| ((k * 7 + i) as f64 * 0.31).sin().abs()).collect();
        let s2: Vec<f64> = (0..dim).map(|i| ((k * 5 + i) as f64 * 0.17).cos().abs()).collect();
        Transition {
            state: StateVector(s),
            action: k % n_actions,
            reward: (k as f64 * 0.7).sin(),
            next_state: StateVector(s2),
            done,
        }
    }

    #[test]
    fn config_validation() {
        assert!(SacConfig::default().validate().is_ok());
        for bad in [
            SacConfig { gamma: 1.0, ..Default::default() },
            SacConfig { tau: 0.0, ..Default::default() },
            SacConfig { alpha: -0.1, ..Default::default() },
            SacConfig { batch_size: 0, ..Default::default() },
            SacConfig { buffer_capacity: 10, ..Default::default() },
            SacConfig { hidden: vec![0], ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn replay_ring_keeps_most_recent() {
        let mut buf = ReplayBuffer::new(5);
        for k in 0..13 {
            buf.push(transition(k, 4, 3, false));
        }
        assert_eq!(buf.len(), 5);
        let mut rewards: Vec<f64> = buf.iter().map(|t| t.reward).collect();
        let mut want: Vec<f64> = (8..13).map(|k| transition(k, 4, 3, false).reward).collect();
        rewards.sort_by(f64::total_cmp);
        want.sort_by(f64::total_cmp);
        assert_eq!(rewards, want);
    }

    #[test]
    fn underfull_buffer_rejected() {
        let mut agent = SacAgent::new(4, 3, tiny_config()).unwrap();
        let mut buf = ReplayBuffer::new(16);
        buf.push(transition(0, 4, 3, false));
        assert!(matches!(agent.update(&buf), Err(SacError::BufferUnderfull { len: 1, batch: 4 })));
    }

    #[test]
    fn zero_actor_is_uniform() {
        let mut agent = SacAgent::new(42, 20, SacConfig::default()).unwrap();
        agent.actor = Mlp::zeros(agent.actor.sizes()).unwrap();
        let p = agent.action_probs(&StateVector(vec![0.5; 42])).unwrap();
        assert!(p.iter().all(|x| (x - 0.05).abs() < 1e-15));
    }

    #[test]
    fn greedy_act_is_argmax() {
        let mut agent = SacAgent::new(3, 10, tiny_config()).unwrap();
        let mut actor = Mlp::zeros(&[3, 10]).unwrap();
        actor.set_bias(0, 7, 2.0);
        actor.set_bias(0, 2, 1.0);
        agent.actor = actor;
        assert_eq!(agent.act(&StateVector(vec![0.1, 0.2, 0.3]), ActMode::Greedy).unwrap(), 7);
        assert!(matches!(
            agent.act(&StateVector(vec![0.1]), ActMode::Greedy),
            Err(SacError::StateDim { .. })
        ));
    }

    #[test]
    fn terminal_target_is_reward() {
        let agent = SacAgent::new(4, 3, tiny_config()).unwrap();
        let t = transition(3, 4, 3, true);
        let y = critic_targets(&[&t], &agent.actor, &agent.target1, &agent.target2, 0.2, 0.99).unwrap();
        assert_eq!(y, vec![t.reward]);
    }

    #[test]
    fn one_hot_policy_without_entropy() {
        let agent = SacAgent::new(4, 3, tiny_config()).unwrap();
        let mut actor = Mlp::zeros(&[4, 3]).unwrap();
        actor.set_bias(0, 1, 1e4);
        let t = transition(2, 4, 3, false);
        let y = critic_targets(&[&t], &actor, &agent.target1, &agent.target2, 0.0, 0.9).unwrap();
        let q1 = agent.target1.forward(&t.next_state.0).unwrap();
        let q2 = agent.target2.forward(&t.next_state.0).unwrap();
        let want = t.reward + 0.9 * q1[1].min(q2[1]);
        assert!((y[0] - want).abs() < 1e-12);
    }

    #[test]
    fn tau_one_copies_critics() {
        let cfg = SacConfig { tau: 1.0, ..tiny_config() };
        let mut agent = SacAgent::new(4, 3, cfg).unwrap();
        let mut buf = ReplayBuffer::new(16);
        for k in 0..8 {
            buf.push(transition(k, 4, 3, k == 7));
        }
        agent.update(&buf).unwrap();
        assert_eq!(agent.target1.params(), agent.critic1.params());
        assert_eq!(agent.target2.params(), agent.critic2.params());
    }

    #[test]
    fn target_lag_is_exact_polyak() {
        let cfg = SacConfig { tau: 0.1, ..tiny_config() };
        let mut agent = SacAgent::new(4, 3, cfg).unwrap();
        let mut buf = ReplayBuffer::new(16);
        for k in 0..8 {
            buf.push(transition(k, 4, 3, false));
        }
        for _ in 0..3 {
            let prev = agent.target1.clone();
            agent.update(&buf).unwrap();
            for ((t, o), p) in agent.target1.params().iter().zip(agent.critic1.params()).zip(prev.params()) {
                assert_eq!(*t, 0.1 * o + (1.0 - 0.1) * p);
            }
        }
    }

    #[test]
    fn updates_are_deterministic() {
        let mut buf = ReplayBuffer::new(16);
        for k in 0..10 {
            buf.push(transition(k, 4, 3, k % 4 == 0));
        }
        let run = || {
            let mut a = SacAgent::new(4, 3, SacConfig { auto_alpha: true, ..tiny_config() }).unwrap();
            (0..5).map(|_| a.update(&buf).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn auto_alpha_moves_toward_target_entropy() {
        // a near-uniform actor has entropy above target, so alpha must drop
        let cfg = SacConfig {
            auto_alpha: true,
            alpha_lr: 0.05,
            ..tiny_config()
        };
        let mut agent = SacAgent::new(4, 3, cfg).unwrap();
        agent.actor = Mlp::zeros(agent.actor.sizes()).unwrap();
        let mut buf = ReplayBuffer::new(16);
        for k in 0..8 {
            buf.push(transition(k, 4, 3, false));
        }
        let before = agent.alpha();
        agent.update(&buf).unwrap();
        assert!(agent.alpha() < before);
    }

    #[test]
    fn checkpoint_restores_policy() {
        let mut agent = SacAgent::new(4, 3, tiny_config()).unwrap();
        let ck = agent.checkpoint();
        let json = serde_json::to_string(&ck).unwrap();
        let mut back =
            SacAgent::from_checkpoint(&serde_json::from_str(&json).unwrap(), SacConfig::default()).unwrap();
        let s = StateVector(vec![0.3, 0.1, 0.9, 0.4]);
        assert_eq!(back.action_probs(&s).unwrap(), agent.action_probs(&s).unwrap());
        assert_eq!(
            back.act(&s, ActMode::Greedy).unwrap(),
            agent.act(&s, ActMode::Greedy).unwrap()
        );
    }

    #[test]
    fn headroom_features_follow_slack() {
        // two providers, capacity normalizer 1000, demand normalizer 250
        let enc = InputScaler::identity(6).with_headroom(Some(4.0));
        assert_eq!(enc.output_dim(), 8);
        let demand = 200.0 / 250.0;
        let state = [demand, 0.5, 1.0, 210.0 / 1000.0, 0.8, 190.0 / 1000.0];
        let mut out = Vec::new();
        enc.apply(&state, &mut out);
        assert_eq!(&out[..6], &state);
        let slack = |avail: f64| ((avail - 200.0) / 250.0 * HEADROOM_SHARPNESS).clamp(-1.0, 1.0);
        assert!((out[6] - slack(210.0)).abs() < 1e-12 && out[6] > 0.0);
        assert!((out[7] - slack(190.0)).abs() < 1e-12 && out[7] < 0.0);
    }

    #[test]
    fn headroom_checkpoint_round_trip() {
        let enc = InputScaler::identity(8).with_headroom(Some(5.5));
        let agent = SacAgent::with_encoder(enc, 3, tiny_config()).unwrap();
        assert_eq!(agent.actor.input_dim(), 11);
        let json = serde_json::to_string(&agent.checkpoint()).unwrap();
        let back = SacAgent::from_checkpoint(&serde_json::from_str(&json).unwrap(), tiny_config()).unwrap();
        let s = StateVector(vec![0.6, 0.2, 1.0, 0.3, 0.7, 0.1, 0.5, 0.5]);
        assert_eq!(back.action_probs(&s).unwrap(), agent.action_probs(&s).unwrap());
        assert!(back.config().headroom_features);
    }

    #[test]
    fn headroom_needs_provider_layout() {
        let enc = InputScaler::identity(7).with_headroom(Some(4.0));
        assert!(SacAgent::with_encoder(enc, 3, tiny_config()).is_err());
    }
}
