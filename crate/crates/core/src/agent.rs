//! Actor-critic learner over the discrete sub-action space.
//!
//! The actor maps an encoded state to a softmax over the `K + 1`
//! sub-actions. The critic scores a state together with such a vector, so
//! the action gradient of the critic is defined and the actor can follow it.
//! Acting takes the argmax. With masking on, the softmax runs over slot 0
//! and the schedulable slots only, both when acting and when training.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encode::{encode_state, EncodeError, EncodedState, EncodingSpec, PackedState};
use crate::nn::{adam_step, Gradients, MlpNet, NnError, OptState, OutputActivation};
use crate::policies::{Policy, PolicyDecision};
use crate::sim::{EpisodeMetrics, SimError, SimState};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("invalid agent configuration: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Transitions collected before the first training step.
    pub warmup: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of the episodes over which epsilon is annealed.
    pub epsilon_decay_fraction: f64,
    /// Environment steps per training step.
    pub train_every: usize,
    /// Restrict the actor's distribution to slot 0 and the schedulable
    /// slots.
    pub mask_invalid: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            hidden: vec![64, 64],
            gamma: 0.99,
            tau: 0.01,
            actor_lr: 1e-4,
            critic_lr: 1e-4,
            batch_size: 32,
            buffer_capacity: 20_000,
            warmup: 1_000,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.5,
            train_every: 4,
            mask_invalid: true,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: &str| Err(AgentError::Config(m.into()));
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must be in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must be in [0, 1)");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layer sizes must be positive");
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return bad("need 0 < batch_size <= buffer_capacity");
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..=1.0).contains(&self.epsilon_start) || !(0.0..=1.0).contains(&self.epsilon_end) {
            return bad("epsilon bounds must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.epsilon_decay_fraction) {
            return bad("epsilon_decay_fraction must lie in [0, 1]");
        }
        if self.train_every == 0 {
            return bad("train_every must be at least 1");
        }
        Ok(())
    }

    /// Linear anneal from `epsilon_start` to `epsilon_end`, then flat.
    pub fn epsilon(&self, episode: usize, episodes: usize) -> f64 {
        let span = self.epsilon_decay_fraction * episodes as f64;
        if span <= 0.0 {
            return self.epsilon_end;
        }
        let frac = (episode as f64 / span).min(1.0);
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Arc<PackedState>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Arc<PackedState>,
    pub terminal: bool,
    /// Slots the actor could choose in `s` and in `s_next`.
    pub allowed: Vec<bool>,
    pub allowed_next: Vec<bool>,
}

/// Fixed-capacity ring; the oldest entry is overwritten when full.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            capacity,
            items: Vec::new(),
            cursor: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    /// Oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity { 0 } else { self.cursor };
        self.items[split..].iter().chain(self.items[..split].iter())
    }

    /// `m` distinct transitions drawn uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Vec<&Transition> {
        index::sample(rng, self.items.len(), m.min(self.items.len()))
            .into_iter()
            .map(|i| &self.items[i])
            .collect()
    }
}

/// Result of one decision by the actor.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorChoice {
    /// Stored as the transition action: one-hot when exploring, else the
    /// actor's distribution.
    pub action: Vec<f64>,
    pub sub_action: usize,
    pub explored: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainStats {
    pub critic_loss: f64,
    /// Mean critic value of the actor's own actions before the update.
    pub actor_objective: f64,
}

/// Softmax over the entries with `allowed` set; the others get 0. At least
/// one entry must be allowed.
pub fn masked_softmax(logits: &[f64], allowed: &[bool]) -> Vec<f64> {
    let top = logits
        .iter()
        .zip(allowed)
        .filter(|(_, &ok)| ok)
        .map(|(&z, _)| z)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().zip(allowed).map(|(&z, &ok)| if ok { (z - top).exp() } else { 0.0 }).collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    p
}

fn argmax(v: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in v.into_iter().enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

/// Online and target actor/critic pairs with their optimizers.
#[derive(Debug, Clone)]
pub struct Agent {
    pub config: AgentConfig,
    pub encoding: EncodingSpec,
    actor: MlpNet,
    critic: MlpNet,
    target_actor: MlpNet,
    target_critic: MlpNet,
    actor_opt: OptState,
    critic_opt: OptState,
}

impl Agent {
    pub fn new(encoding: EncodingSpec, config: AgentConfig, seed: u64) -> Result<Self, AgentError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ds = encoding.len();
        let da = encoding.queue_slots + 1;
        let mut actor_sizes = vec![ds];
        actor_sizes.extend(&config.hidden);
        actor_sizes.push(da);
        let mut critic_sizes = vec![ds + da];
        critic_sizes.extend(&config.hidden);
        critic_sizes.push(1);
        let actor = MlpNet::new(&actor_sizes, OutputActivation::Identity, &mut rng);
        let critic = MlpNet::new(&critic_sizes, OutputActivation::Identity, &mut rng);
        Ok(Self::from_nets(encoding, config, actor, critic))
    }

    /// Targets start as exact copies of the online networks. The actor
    /// network emits logits.
    pub fn from_nets(encoding: EncodingSpec, config: AgentConfig, actor: MlpNet, critic: MlpNet) -> Self {
        let actor_opt = OptState::new(&actor, config.actor_lr);
        let critic_opt = OptState::new(&critic, config.critic_lr);
        Agent {
            target_actor: actor.clone(),
            target_critic: critic.clone(),
            actor,
            critic,
            actor_opt,
            critic_opt,
            config,
            encoding,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.encoding.len()
    }

    pub fn action_dim(&self) -> usize {
        self.encoding.queue_slots + 1
    }

    pub fn actor(&self) -> &MlpNet {
        &self.actor
    }

    pub fn critic(&self) -> &MlpNet {
        &self.critic
    }

    pub fn target_actor(&self) -> &MlpNet {
        &self.target_actor
    }

    pub fn target_critic(&self) -> &MlpNet {
        &self.target_critic
    }

    pub fn actor_mut(&mut self) -> &mut MlpNet {
        &mut self.actor
    }

    pub fn critic_mut(&mut self) -> &mut MlpNet {
        &mut self.critic
    }

    fn check_state(&self, s: &EncodedState) -> Result<(), AgentError> {
        if s.len() != self.state_dim() {
            return Err(NnError::Shape(format!("state length {} != {}", s.len(), self.state_dim())).into());
        }
        Ok(())
    }

    /// Slots the actor may choose: all of them, or with masking slot 0 and
    /// the schedulable slots in `valid`.
    pub fn allowed(&self, valid: &[usize]) -> Vec<bool> {
        let da = self.action_dim();
        if !self.config.mask_invalid {
            return vec![true; da];
        }
        let mut m = vec![false; da];
        m[0] = true;
        for &k in valid.iter().filter(|&&k| k < da) {
            m[k] = true;
        }
        m
    }

    pub fn action_distribution(&self, s: &EncodedState, allowed: &[bool]) -> Result<Vec<f64>, AgentError> {
        self.check_state(s)?;
        if allowed.len() != self.action_dim() || !allowed[0] {
            return Err(AgentError::Config("action mask must cover every slot and allow slot 0".into()));
        }
        let x = ArrayView2::from_shape((1, s.len()), s.as_slice()).expect("row view");
        let logits = self.actor.predict(x)?;
        Ok(masked_softmax(&logits.row(0).to_vec(), allowed))
    }

    /// `valid` lists the schedulable slots. Exploration picks uniformly among
    /// the allowed slots, so it also tries waiting; otherwise the argmax is
    /// taken.
    pub fn act<R: Rng + ?Sized>(
        &self,
        s: &EncodedState,
        valid: &[usize],
        epsilon: f64,
        rng: &mut R,
    ) -> Result<ActorChoice, AgentError> {
        let allowed = self.allowed(valid);
        let probs = self.action_distribution(s, &allowed)?;
        if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
            let options: Vec<usize> = (0..allowed.len()).filter(|&k| allowed[k]).collect();
            let sub_action = *options.choose(rng).expect("slot 0 is always allowed");
            let mut action = vec![0.0; probs.len()];
            action[sub_action] = 1.0;
            return Ok(ActorChoice {
                action,
                sub_action,
                explored: true,
            });
        }
        Ok(ActorChoice {
            sub_action: argmax(probs.iter().copied()),
            action: probs,
            explored: false,
        })
    }

    pub fn critic_q(&self, s: &EncodedState, a: &[f64]) -> Result<f64, AgentError> {
        self.check_state(s)?;
        if a.len() != self.action_dim() {
            return Err(NnError::Shape(format!("action length {} != {}", a.len(), self.action_dim())).into());
        }
        let mut x = Array2::zeros((1, s.len() + a.len()));
        x.slice_mut(s![0, ..s.len()]).assign(&ndarray::aview1(s.as_slice()));
        x.slice_mut(s![0, s.len()..]).assign(&ndarray::aview1(a));
        Ok(self.critic.predict(x.view())?[[0, 0]])
    }

    /// Bootstrapped regression target.
    pub fn td_target(r: f64, gamma: f64, q_next: f64, terminal: bool) -> f64 {
        if terminal {
            r
        } else {
            r + gamma * q_next
        }
    }

    /// One minibatch update of critic and actor followed by the soft target
    /// update. `Ok(None)` while the buffer holds fewer than a batch.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        buffer: &ReplayBuffer,
        rng: &mut R,
    ) -> Result<Option<TrainStats>, AgentError> {
        let m = self.config.batch_size;
        if buffer.len() < m {
            return Ok(None);
        }
        let batch = buffer.sample(m, rng);
        let (ds, da) = (self.state_dim(), self.action_dim());
        // critic input rows: [s, a]; the state part doubles as the actor input
        let mut sa = Array2::zeros((m, ds + da));
        let mut next = Array2::zeros((m, ds + da));
        for (i, t) in batch.iter().enumerate() {
            if t.s.len() != ds || t.s_next.len() != ds || t.a.len() != da || t.allowed.len() != da || t.allowed_next.len() != da
            {
                return Err(NnError::Shape("transition does not match encoding".into()).into());
            }
            t.s.unpack_into(sa.slice_mut(s![i, ..ds]).as_slice_mut().expect("contiguous row"));
            sa.slice_mut(s![i, ds..]).assign(&ndarray::aview1(&t.a));
            t.s_next.unpack_into(next.slice_mut(s![i, ..ds]).as_slice_mut().expect("contiguous row"));
        }

        let next_logits = self.target_actor.predict(next.slice(s![.., ..ds]))?;
        for (i, t) in batch.iter().enumerate() {
            let a_next = masked_softmax(&next_logits.row(i).to_vec(), &t.allowed_next);
            next.slice_mut(s![i, ds..]).assign(&ndarray::aview1(&a_next));
        }
        let q_next = self.target_critic.predict(next.view())?;
        let y: Vec<f64> = batch
            .iter()
            .enumerate()
            .map(|(i, t)| Self::td_target(t.r, self.config.gamma, q_next[[i, 0]], t.terminal))
            .collect();

        let critic_cache = self.critic.forward(sa.view())?;
        let q = critic_cache.output();
        let mut dq = Array2::zeros((m, 1));
        let mut loss = 0.0;
        for i in 0..m {
            let e = q[[i, 0]] - y[i];
            loss += e * e;
            dq[[i, 0]] = 2.0 * e / m as f64;
        }
        loss /= m as f64;
        if !loss.is_finite() {
            return Err(AgentError::Divergence(format!("critic loss {loss}")));
        }
        let critic_grads = self.critic.backward(&critic_cache, &dq, None)?;

        // actor gradient through the critic as it was before this update
        let allowed: Vec<&[bool]> = batch.iter().map(|t| t.allowed.as_slice()).collect();
        let (objective, actor_grads) = self.actor_gradient(sa.slice(s![.., ..ds]), &allowed)?;

        adam_step(&mut self.critic, &critic_grads, &mut self.critic_opt)
            .map_err(|e| AgentError::Divergence(e.to_string()))?;
        adam_step(&mut self.actor, &actor_grads, &mut self.actor_opt)
            .map_err(|e| AgentError::Divergence(e.to_string()))?;
        self.soft_update();
        if !(self.actor.is_finite() && self.critic.is_finite()) {
            return Err(AgentError::Divergence("non-finite parameters".into()));
        }
        Ok(Some(TrainStats {
            critic_loss: loss,
            actor_objective: objective,
        }))
    }

    /// Mean critic value of the actor's own actions over a batch of states,
    /// and the gradient of its negation with respect to the actor
    /// parameters.
    pub fn actor_gradient(&self, states: ArrayView2<f64>, allowed: &[&[bool]]) -> Result<(f64, Gradients), AgentError> {
        let (m, ds) = states.dim();
        let da = self.action_dim();
        if ds != self.state_dim() || allowed.len() != m || allowed.iter().any(|a| a.len() != da) {
            return Err(NnError::Shape("actor batch does not match encoding".into()).into());
        }
        let cache = self.actor.forward(states)?;
        let mut sa = Array2::zeros((m, ds + da));
        sa.slice_mut(s![.., ..ds]).assign(&states);
        for (i, mask) in allowed.iter().enumerate() {
            let p = masked_softmax(&cache.output().row(i).to_vec(), mask);
            sa.slice_mut(s![i, ds..]).assign(&ndarray::aview1(&p));
        }
        let q_cache = self.critic.forward(sa.view())?;
        let objective = q_cache.output().mean().unwrap_or(0.0);
        let ones = Array2::from_elem((m, 1), 1.0 / m as f64);
        let dq_da = self.critic.input_gradient(&q_cache, &ones, ds..ds + da)?;
        // back through the softmax: dz_j = p_j (g_j - p.g), negated to ascend
        let probs = sa.slice(s![.., ds..]);
        let mut dz = Array2::zeros((m, da));
        for i in 0..m {
            let dot = probs.row(i).dot(&dq_da.row(i));
            for j in 0..da {
                dz[[i, j]] = -probs[[i, j]] * (dq_da[[i, j]] - dot);
            }
        }
        Ok((objective, self.actor.backward(&cache, &dz, None)?))
    }

    /// Critic-only regression step on explicit targets.
    pub fn critic_regression_step(&mut self, inputs: &Array2<f64>, targets: &[f64]) -> Result<f64, AgentError> {
        let m = targets.len();
        let cache = self.critic.forward(inputs.view())?;
        let mut dq = Array2::zeros((m, 1));
        let mut loss = 0.0;
        for i in 0..m {
            let e = cache.output()[[i, 0]] - targets[i];
            loss += e * e;
            dq[[i, 0]] = 2.0 * e / m as f64;
        }
        let g = self.critic.backward(&cache, &dq, None)?;
        adam_step(&mut self.critic, &g, &mut self.critic_opt)?;
        Ok(loss / m as f64)
    }

    pub fn soft_update(&mut self) {
        let tau = self.config.tau;
        self.target_actor.soft_update_from(&self.actor, tau);
        self.target_critic.soft_update_from(&self.critic, tau);
    }

    /// Writes the four networks and a manifest into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), AgentError> {
        fs::create_dir_all(dir)?;
        let nets = [
            ("actor", &self.actor),
            ("critic", &self.critic),
            ("target_actor", &self.target_actor),
            ("target_critic", &self.target_critic),
        ];
        let mut files = Vec::new();
        for (name, net) in nets {
            let file = format!("{name}.bin");
            let mut buf = Vec::new();
            net.write_checkpoint(&mut buf)?;
            fs::write(dir.join(&file), buf)?;
            files.push((name.to_string(), file));
        }
        let manifest = Manifest {
            format_version: MANIFEST_VERSION,
            networks: files.into_iter().collect(),
            config: self.config.clone(),
            encoding: self.encoding.clone(),
        };
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Restores networks from a directory written by [`Agent::save`].
    /// Optimizer moments start fresh.
    pub fn load(dir: &Path) -> Result<Self, AgentError> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(AgentError::Checkpoint(format!("unsupported manifest version {}", manifest.format_version)));
        }
        let read = |name: &str| -> Result<MlpNet, AgentError> {
            let file = manifest
                .networks
                .get(name)
                .ok_or_else(|| AgentError::Checkpoint(format!("manifest lacks {name}")))?;
            Ok(MlpNet::read_checkpoint(fs::read(dir.join(file))?.as_slice())?)
        };
        let mut agent = Agent::from_nets(manifest.encoding, manifest.config, read("actor")?, read("critic")?);
        agent.target_actor = read("target_actor")?;
        agent.target_critic = read("target_critic")?;
        let ds = agent.state_dim();
        let da = agent.action_dim();
        if agent.actor.output_activation() != OutputActivation::Identity {
            return Err(AgentError::Checkpoint("actor network must emit logits".into()));
        }
        if agent.actor.input_size() != ds
            || agent.actor.output_size() != da
            || agent.critic.input_size() != ds + da
            || agent.critic.output_size() != 1
            || agent.target_actor.sizes() != agent.actor.sizes()
            || agent.target_critic.sizes() != agent.critic.sizes()
        {
            return Err(AgentError::Checkpoint("network shapes do not match the encoding".into()));
        }
        Ok(agent)
    }
}

const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 2;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    networks: std::collections::BTreeMap<String, String>,
    config: AgentConfig,
    encoding: EncodingSpec,
}

/// Greedy policy backed by a trained actor.
#[derive(Debug, Clone)]
pub struct AgentPolicy {
    agent: Arc<Agent>,
}

impl AgentPolicy {
    pub fn new(agent: Arc<Agent>) -> Self {
        AgentPolicy { agent }
    }
}

impl Policy for AgentPolicy {
    fn name(&self) -> &str {
        "drl"
    }

    fn decide(&mut self, state: &SimState) -> PolicyDecision {
        let valid = if self.agent.config.mask_invalid { state.feasible_slots() } else { Vec::new() };
        let sub_action = encode_state(state, &self.agent.encoding)
            .map_err(AgentError::from)
            .and_then(|s| self.agent.act(&s, &valid, 0.0, &mut rand::rngs::mock::StepRng::new(0, 0)))
            .map_or(0, |c| c.sub_action);
        PolicyDecision { sub_action }
    }
}

/// Training loop settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub episodes: usize,
    /// Evaluate greedily every this many episodes (0 = never).
    pub eval_every: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub total_reward: f64,
    pub epsilon: f64,
    /// Mean over the episode's training steps; NaN when none ran.
    pub critic_loss: f64,
    pub mean_slowdown: f64,
    pub transitions: usize,
}

#[derive(Debug)]
pub struct TrainingReport {
    pub curve: Vec<EpisodeRecord>,
    /// Agent with the lowest evaluation slowdown, or the final agent.
    pub best: Agent,
    pub best_episode: Option<usize>,
    pub best_score: Option<f64>,
    /// Set when training stopped early on divergence; `best` is then the
    /// last good agent.
    pub diverged: Option<String>,
}

/// Runs `cfg.episodes` episodes. `make_env(e)` builds the environment for
/// episode `e`; `evaluate(agent)` returns a score where lower is better.
pub fn run_training(
    agent: &mut Agent,
    cfg: &TrainingConfig,
    mut make_env: impl FnMut(usize) -> Result<SimState, AgentError>,
    mut evaluate: impl FnMut(&Agent) -> Result<f64, AgentError>,
) -> Result<TrainingReport, AgentError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut buffer = ReplayBuffer::new(agent.config.buffer_capacity);
    let mut curve = Vec::with_capacity(cfg.episodes);
    let mut best: Option<(Agent, usize, f64)> = None;
    let mut steps = 0usize;
    let binary_len = agent.encoding.binary_len();

    for episode in 0..cfg.episodes {
        let eps = agent.config.epsilon(episode, cfg.episodes);
        let mut sim = make_env(episode)?;
        let mut dense = encode_state(&sim, &agent.encoding)?;
        let mut packed = Arc::new(PackedState::pack(&dense, binary_len)?);
        let mut total = 0.0;
        let mut losses = Vec::new();
        let mut transitions = 0;
        let mut failure = None;
        let mut valid = sim.feasible_slots();
        while !sim.is_done() {
            let choice = agent.act(&dense, &valid, eps, &mut rng)?;
            let allowed = agent.allowed(&valid);
            let out = sim.step(choice.sub_action)?;
            total += out.reward;
            dense = encode_state(&sim, &agent.encoding)?;
            valid = sim.feasible_slots();
            let next = Arc::new(PackedState::pack(&dense, binary_len)?);
            buffer.push(Transition {
                s: packed,
                a: choice.action,
                r: out.reward,
                s_next: Arc::clone(&next),
                terminal: sim.is_done() && !sim.cutoff_reached(),
                allowed,
                allowed_next: agent.allowed(&valid),
            });
            packed = next;
            transitions += 1;
            steps += 1;
            if buffer.len() >= agent.config.warmup.max(agent.config.batch_size) && steps.is_multiple_of(agent.config.train_every) {
                match agent.train_step(&buffer, &mut rng) {
                    Ok(Some(stats)) => losses.push(stats.critic_loss),
                    Ok(None) => {}
                    Err(AgentError::Divergence(msg)) => {
                        failure = Some(msg);
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        if let Some(msg) = failure {
            log::warn!("episode {episode}: {msg}");
            let (best_agent, best_episode, best_score) = match best {
                Some((a, e, s)) => (a, Some(e), Some(s)),
                None => (agent.clone(), None, None),
            };
            return Ok(TrainingReport {
                curve,
                best: best_agent,
                best_episode,
                best_score,
                diverged: Some(msg),
            });
        }
        let metrics: Option<EpisodeMetrics> = sim.episode_metrics().ok();
        let critic_loss = if losses.is_empty() {
            f64::NAN
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        curve.push(EpisodeRecord {
            episode,
            total_reward: total,
            epsilon: eps,
            critic_loss,
            mean_slowdown: metrics.map_or(f64::NAN, |m| m.mean_slowdown),
            transitions,
        });
        log::debug!("episode {episode}: reward {total:.4} eps {eps:.3} loss {critic_loss:.5}");
        let last = episode + 1 == cfg.episodes;
        if cfg.eval_every > 0 && ((episode + 1) % cfg.eval_every == 0 || last) {
            let score = evaluate(agent)?;
            log::info!("episode {episode}: eval score {score:.4}");
            if best.as_ref().is_none_or(|b| score < b.2) {
                best = Some((agent.clone(), episode, score));
            }
        }
    }
    let (best_agent, best_episode, best_score) = match best {
        Some((a, e, s)) => (a, Some(e), Some(s)),
        None => (agent.clone(), None, None),
    };
    Ok(TrainingReport {
        curve,
        best: best_agent,
        best_episode,
        best_score,
        diverged: None,
    })
}
