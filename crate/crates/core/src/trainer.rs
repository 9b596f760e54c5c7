//! PPO over whole worlds: per-limb GAE, a joint-likelihood surrogate and
//! RMSProp updates, with rollouts and evaluation fanned out over threads.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgn::{LimbAction, LimbDist, ObsNorm, Policy, PolicyKind};
use crate::morphology::MorphGraph;
use crate::sensing::OBS_DIM;
use crate::tasks::{run_episode, Env, EpisodeStats, Mode, ScenarioSpec, TaskError};

/// Samples per gradient chunk; chunks are reduced in a fixed order so
/// results do not depend on the thread count.
const GRAD_CHUNK: usize = 32;
const MAX_LOG_RATIO: f64 = 20.0;
const OBS_STD_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Surrogate {
    Clip { epsilon: f64 },
    KlPenalty { beta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub learning_rate: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub entropy_coeff: f64,
    pub value_coeff: f64,
    /// Control steps per update, summed over worlds.
    pub batch_size: usize,
    pub num_worlds: usize,
    pub epochs: usize,
    pub minibatches: usize,
    pub surrogate: Surrogate,
    pub rmsprop_decay: f64,
    pub rmsprop_eps: f64,
    /// Global gradient norm limit; zero disables clipping.
    pub max_grad_norm: f64,
    /// Scale rewards by a running estimate of the discounted-return spread.
    pub normalize_rewards: bool,
    /// Standardize policy inputs with running per-feature statistics.
    pub normalize_observations: bool,
    pub message_dim: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            learning_rate: 3e-4,
            gamma: 0.995,
            gae_lambda: 0.95,
            entropy_coeff: 0.01,
            value_coeff: 0.5,
            batch_size: 2048,
            num_worlds: 8,
            epochs: 4,
            minibatches: 4,
            surrogate: Surrogate::Clip { epsilon: 0.2 },
            rmsprop_decay: 0.99,
            rmsprop_eps: 1e-5,
            max_grad_norm: 0.5,
            normalize_rewards: true,
            normalize_observations: false,
            message_dim: crate::dgn::MSG_DIM,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), String> {
        let nonneg = [
            ("learning_rate", self.learning_rate),
            ("entropy_coeff", self.entropy_coeff),
            ("value_coeff", self.value_coeff),
            ("rmsprop_eps", self.rmsprop_eps),
            ("max_grad_norm", self.max_grad_norm),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) {
                return Err(format!("{name} must be non-negative"));
            }
        }
        for (name, v) in [("gamma", self.gamma), ("gae_lambda", self.gae_lambda)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(format!("{name} must lie in (0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.rmsprop_decay) {
            return Err("rmsprop_decay must lie in [0, 1)".into());
        }
        match self.surrogate {
            Surrogate::Clip { epsilon } if !(epsilon >= 0.0) => return Err("surrogate.epsilon must be non-negative".into()),
            Surrogate::KlPenalty { beta } if !(beta >= 0.0) => return Err("surrogate.beta must be non-negative".into()),
            _ => {}
        }
        if self.num_worlds == 0 || self.epochs == 0 || self.minibatches == 0 {
            return Err("num_worlds, epochs and minibatches must be positive".into());
        }
        if self.batch_size < self.num_worlds || !self.batch_size.is_multiple_of(self.num_worlds) {
            return Err("batch_size must be a positive multiple of num_worlds".into());
        }
        if self.batch_size < self.minibatches {
            return Err("batch_size must be at least minibatches".into());
        }
        if self.message_dim != crate::dgn::MSG_DIM {
            return Err(format!("message_dim is fixed at {}", crate::dgn::MSG_DIM));
        }
        Ok(())
    }

    pub fn steps_per_world(&self) -> usize {
        self.batch_size / self.num_worlds
    }
}

/// Generalized advantage estimation over one stream. `dones[t]` marks the
/// last step of an episode; `last_value` bootstraps past the final step.
/// Returns `(advantages, returns)`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && dones.len() == n);
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = last_value;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmsProp {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    acc: Vec<f64>,
}

impl RmsProp {
    pub fn new(num_params: usize, lr: f64, decay: f64, eps: f64) -> Self {
        RmsProp {
            lr,
            decay,
            eps,
            acc: vec![0.0; num_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.acc.len());
        assert_eq!(grads.len(), self.acc.len());
        for ((p, a), g) in params.iter_mut().zip(&mut self.acc).zip(grads) {
            *a = self.decay * *a + (1.0 - self.decay) * g * g;
            *p -= self.lr * g / (a.sqrt() + self.eps);
        }
    }
}

/// Streaming mean and variance (parallel Welford merge).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub count: f64,
    pub mean: f64,
    m2: f64,
}

impl Default for RunningStats {
    fn default() -> Self {
        RunningStats {
            count: 0.0,
            mean: 0.0,
            m2: 0.0,
        }
    }
}

impl RunningStats {
    pub fn update(&mut self, xs: &[f64]) {
        if xs.is_empty() {
            return;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let m2: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
        let total = self.count + n;
        let d = mean - self.mean;
        self.mean += d * n / total;
        self.m2 += m2 + d * d * self.count * n / total;
        self.count = total;
    }

    pub fn variance(&self) -> f64 {
        if self.count < 1.0 {
            1.0
        } else {
            self.m2 / self.count
        }
    }
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub graph: MorphGraph,
    pub actions: Vec<LimbAction>,
    /// Distributions the actions were drawn from.
    pub dists: Vec<LimbDist>,
    /// Joint log-probability under the behavior policy.
    pub log_prob: f64,
    pub values: Vec<f64>,
    /// Per-limb rewards used for learning (possibly normalized).
    pub rewards: Vec<f64>,
    pub raw_rewards: Vec<f64>,
    pub done: bool,
}

#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    /// One stream of consecutive transitions per world.
    pub worlds: Vec<Vec<Transition>>,
    /// Per-limb value estimates of the state following each stream.
    pub bootstrap: Vec<Vec<f64>>,
    pub morph: bool,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.worlds.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-limb GAE. Returns per-world world-level advantages (sum over
    /// limbs) and per-limb returns, indexed `[world][step]`.
    pub fn advantages(&self, gamma: f64, lambda: f64) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
        let mut adv_out = Vec::with_capacity(self.worlds.len());
        let mut ret_out = Vec::with_capacity(self.worlds.len());
        for (stream, boot) in self.worlds.iter().zip(&self.bootstrap) {
            let t_len = stream.len();
            let n = stream.first().map_or(0, |t| t.values.len());
            let mut adv = vec![0.0; t_len];
            let mut ret = vec![vec![0.0; n]; t_len];
            let dones: Vec<bool> = stream.iter().map(|t| t.done).collect();
            for i in 0..n {
                let r: Vec<f64> = stream.iter().map(|t| t.rewards[i]).collect();
                let v: Vec<f64> = stream.iter().map(|t| t.values[i]).collect();
                let (a, rt) = compute_gae(&r, &v, &dones, boot[i], gamma, lambda);
                for t in 0..t_len {
                    adv[t] += a[t];
                    ret[t][i] = rt[t];
                }
            }
            adv_out.push(adv);
            ret_out.push(ret);
        }
        (adv_out, ret_out)
    }
}

/// One training sample: a world state with its normalized advantage.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub transition: &'a Transition,
    pub advantage: f64,
    pub returns: &'a [f64],
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
}

impl LossParts {
    fn add(&mut self, o: &LossParts) {
        self.policy += o.policy;
        self.value += o.value;
        self.entropy += o.entropy;
        self.approx_kl += o.approx_kl;
        self.clip_fraction += o.clip_fraction;
        self.mean_ratio += o.mean_ratio;
    }

    fn scale(&mut self, s: f64) {
        self.policy *= s;
        self.value *= s;
        self.entropy *= s;
        self.approx_kl *= s;
        self.clip_fraction *= s;
        self.mean_ratio *= s;
    }

    /// The scalar actually minimized.
    pub fn total(&self, cfg: &PpoConfig) -> f64 {
        self.policy + cfg.value_coeff * self.value - cfg.entropy_coeff * self.entropy
    }
}

fn sample_grad(policy: &Policy, s: &Sample, cfg: &PpoConfig, morph: bool, weight: f64, grads: &mut [f64]) -> LossParts {
    let t = s.transition;
    let out = policy
        .forward(&t.obs, &t.graph)
        .expect("stored transitions match the policy");
    let n = out.dists.len();
    let inv_n = 1.0 / n as f64;
    let log_prob: f64 = out.dists.iter().zip(&t.actions).map(|(d, a)| d.log_prob(a, morph)).sum();
    let log_ratio = (log_prob - t.log_prob).min(MAX_LOG_RATIO);
    let ratio = log_ratio.exp();
    let a = s.advantage;
    let mut parts = LossParts {
        approx_kl: t.log_prob - log_prob,
        mean_ratio: ratio,
        ..LossParts::default()
    };
    let d_logp = match cfg.surrogate {
        Surrogate::Clip { epsilon } => {
            let unclipped = ratio * a;
            let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * a;
            parts.policy = -unclipped.min(clipped);
            if clipped < unclipped {
                parts.clip_fraction = 1.0;
                0.0
            } else {
                -a * ratio
            }
        }
        Surrogate::KlPenalty { beta } => {
            let kl: f64 = out.dists.iter().zip(&t.dists).map(|(d, o)| d.kl_from(o, morph)).sum();
            parts.policy = -ratio * a + beta * kl;
            -a * ratio
        }
    };
    let mut upstream = Vec::with_capacity(n);
    for (i, d) in out.dists.iter().enumerate() {
        let mut g = d.log_prob_grad(&t.actions[i], morph);
        g.scale(d_logp);
        if let Surrogate::KlPenalty { beta } = cfg.surrogate {
            g.add_scaled(&d.kl_grad(&t.dists[i], morph), beta);
        }
        g.add_scaled(&d.entropy_grad(morph), -cfg.entropy_coeff * inv_n);
        parts.entropy += d.entropy(morph) * inv_n;
        let err = out.values[i] - s.returns[i];
        parts.value += err * err * inv_n;
        g.value = cfg.value_coeff * 2.0 * err * inv_n;
        g.scale(weight);
        upstream.push(g);
    }
    policy
        .backward(&out, &upstream, grads)
        .expect("upstream matches forward output");
    parts
}

/// Mean loss components and the gradient of the total loss over `samples`.
pub fn minibatch_gradient(policy: &Policy, samples: &[Sample], cfg: &PpoConfig, morph: bool) -> (LossParts, Vec<f64>) {
    let weight = 1.0 / samples.len() as f64;
    let p = policy.num_params();
    let partials: Vec<(LossParts, Vec<f64>)> = samples
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = vec![0.0; p];
            let mut parts = LossParts::default();
            for s in chunk {
                parts.add(&sample_grad(policy, s, cfg, morph, weight, &mut g));
            }
            (parts, g)
        })
        .collect();
    let mut grads = vec![0.0; p];
    let mut parts = LossParts::default();
    for (lp, g) in &partials {
        parts.add(lp);
        for (a, b) in grads.iter_mut().zip(g) {
            *a += b;
        }
    }
    parts.scale(weight);
    (parts, grads)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub explained_variance: f64,
    pub grad_norm: f64,
    pub skipped_steps: usize,
}

/// Tracks whether the one-time learning-rate halving after a non-finite
/// loss has already happened.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FaultPolicy {
    pub lr_halved: bool,
}

fn explained_variance(pred: &[f64], target: &[f64]) -> f64 {
    let n = target.len() as f64;
    if target.is_empty() {
        return 0.0;
    }
    let mean = target.iter().sum::<f64>() / n;
    let var: f64 = target.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
    let res: Vec<f64> = target.iter().zip(pred).map(|(y, p)| y - p).collect();
    let rm = res.iter().sum::<f64>() / n;
    let rvar: f64 = res.iter().map(|r| (r - rm).powi(2)).sum::<f64>() / n;
    if var <= 0.0 {
        0.0
    } else {
        1.0 - rvar / var
    }
}

/// Several epochs of minibatch PPO over `buffer`. Advantages are computed
/// before any parameter changes.
pub fn ppo_update(
    policy: &mut Policy,
    opt: &mut RmsProp,
    buffer: &RolloutBuffer,
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
    faults: &mut FaultPolicy,
) -> UpdateStats {
    let (adv, ret) = buffer.advantages(cfg.gamma, cfg.gae_lambda);
    let flat_adv: Vec<f64> = adv.iter().flatten().copied().collect();
    let n = flat_adv.len() as f64;
    let mean = flat_adv.iter().sum::<f64>() / n;
    let std = (flat_adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut samples = Vec::with_capacity(buffer.len());
    let (mut preds, mut targets) = (Vec::new(), Vec::new());
    for (w, stream) in buffer.worlds.iter().enumerate() {
        for (t, tr) in stream.iter().enumerate() {
            samples.push(Sample {
                transition: tr,
                advantage: (adv[w][t] - mean) / (std + 1e-8),
                returns: &ret[w][t],
            });
            preds.extend_from_slice(&tr.values);
            targets.extend_from_slice(&ret[w][t]);
        }
    }
    let mut stats = UpdateStats {
        explained_variance: explained_variance(&preds, &targets),
        ..UpdateStats::default()
    };
    let mut acc = LossParts::default();
    let mut steps = 0usize;
    let mb = samples.len().div_ceil(cfg.minibatches);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for idx in order.chunks(mb) {
            let batch: Vec<Sample> = idx.iter().map(|&k| samples[k]).collect();
            let (parts, mut grads) = minibatch_gradient(policy, &batch, cfg, buffer.morph);
            let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !parts.total(cfg).is_finite() || !norm.is_finite() {
                stats.skipped_steps += 1;
                if !faults.lr_halved {
                    opt.lr *= 0.5;
                    faults.lr_halved = true;
                }
                continue;
            }
            if cfg.max_grad_norm > 0.0 && norm > cfg.max_grad_norm {
                let s = cfg.max_grad_norm / norm;
                grads.iter_mut().for_each(|g| *g *= s);
            }
            opt.step(&mut policy.params, &grads);
            acc.add(&parts);
            stats.grad_norm += norm;
            steps += 1;
        }
    }
    if steps > 0 {
        let s = 1.0 / steps as f64;
        acc.scale(s);
        stats.grad_norm *= s;
    }
    stats.policy_loss = acc.policy;
    stats.value_loss = acc.value;
    stats.entropy = acc.entropy;
    stats.approx_kl = acc.approx_kl;
    stats.clip_fraction = acc.clip_fraction;
    stats
}

/// SplitMix64 finalizer over a combination of seed components.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_ENV: u64 = 1;
const STREAM_ACTIONS: u64 = 2;
const STREAM_POLICY: u64 = 3;
const STREAM_SHUFFLE: u64 = 4;

#[derive(Debug, Clone)]
struct Worker {
    index: u64,
    run_seed: u64,
    episode: u64,
    env: Env,
    rng: ChaCha8Rng,
    episode_reward: f64,
}

impl Worker {
    fn new(scenario: &ScenarioSpec, kind: PolicyKind, run_seed: u64, index: u64) -> Result<Self, TaskError> {
        let mut w = Worker {
            index,
            run_seed,
            episode: 0,
            env: Env::new(scenario, kind)?,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(run_seed, STREAM_ACTIONS, index)),
            episode_reward: 0.0,
        };
        w.reset(scenario, kind)?;
        Ok(w)
    }

    fn reset(&mut self, scenario: &ScenarioSpec, kind: PolicyKind) -> Result<(), TaskError> {
        let mut spec = scenario.clone();
        spec.seed = derive_seed(self.run_seed, STREAM_ENV, (self.index << 32) | self.episode);
        self.env = Env::new(&spec, kind)?;
        self.episode += 1;
        self.episode_reward = 0.0;
        Ok(())
    }

    /// Collects `steps` transitions; returns them with finished-episode
    /// rewards and the number of discarded faulting episodes.
    fn collect(&mut self, policy: &Policy, steps: usize) -> Result<Collected, TaskError> {
        let scenario = self.env.spec.clone();
        let kind = self.env.kind;
        let morph = kind.morph_actions();
        let mut out: Vec<Transition> = Vec::with_capacity(steps);
        let mut finished = Vec::new();
        let mut faults = 0;
        let mut episode_start = 0;
        let mut raw_obs = Vec::new();
        while out.len() < steps {
            match self.env.policy_step(policy, &mut self.rng, Mode::Train) {
                Ok(step) => {
                    self.episode_reward += step.rewards.total();
                    let log_prob = step.dists.iter().zip(&step.actions).map(|(d, a)| d.log_prob(a, morph)).sum();
                    let done = self.env.done();
                    raw_obs.push(step.raw_obs);
                    out.push(Transition {
                        obs: step.obs,
                        graph: step.graph,
                        actions: step.actions,
                        dists: step.dists,
                        log_prob,
                        values: step.values,
                        rewards: step.rewards.per_limb.clone(),
                        raw_rewards: step.rewards.per_limb,
                        done,
                    });
                    if done {
                        finished.push(self.episode_reward);
                        self.reset(&scenario, kind)?;
                        episode_start = out.len();
                    }
                }
                Err(TaskError::Sim(_)) => {
                    out.truncate(episode_start);
                    raw_obs.truncate(episode_start);
                    if let Some(last) = out.last_mut() {
                        last.done = true;
                    }
                    faults += 1;
                    self.reset(&scenario, kind)?;
                }
                Err(e) => return Err(e),
            }
        }
        Ok(Collected {
            transitions: out,
            finished,
            faults,
            raw_obs,
        })
    }
}

struct Collected {
    transitions: Vec<Transition>,
    finished: Vec<f64>,
    faults: usize,
    raw_obs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub update: usize,
    pub env_steps: u64,
    pub stats: UpdateStats,
    /// Mean total reward of training episodes that finished during the rollout.
    pub train_episode_reward: Option<f64>,
    pub faulted_episodes: usize,
}

/// Alternates parallel rollouts with PPO updates.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub policy: Policy,
    pub opt: RmsProp,
    pub cfg: PpoConfig,
    pub update: usize,
    pub env_steps: u64,
    workers: Vec<Worker>,
    reward_stats: RunningStats,
    obs_stats: Vec<RunningStats>,
    returns: Vec<Vec<f64>>,
    rng: ChaCha8Rng,
    faults: FaultPolicy,
    pending_obs: Vec<Vec<f64>>,
}

impl Trainer {
    pub fn new(scenario: &ScenarioSpec, kind: PolicyKind, hidden: usize, cfg: &PpoConfig, seed: u64) -> Result<Self, TaskError> {
        cfg.validate().map_err(TaskError::InvalidSpec)?;
        scenario.validate()?;
        let policy = Policy::new(kind, scenario.num_limbs, hidden, derive_seed(seed, STREAM_POLICY, 0));
        let workers = (0..cfg.num_worlds as u64)
            .map(|i| Worker::new(scenario, kind, seed, i))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Trainer {
            opt: RmsProp::new(policy.num_params(), cfg.learning_rate, cfg.rmsprop_decay, cfg.rmsprop_eps),
            policy,
            cfg: cfg.clone(),
            update: 0,
            env_steps: 0,
            returns: vec![vec![0.0; scenario.num_limbs]; cfg.num_worlds],
            workers,
            reward_stats: RunningStats::default(),
            obs_stats: vec![RunningStats::default(); OBS_DIM],
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SHUFFLE, 0)),
            faults: FaultPolicy::default(),
            pending_obs: Vec::new(),
        })
    }

    /// Runs every world for its share of the batch with a frozen policy.
    pub fn collect(&mut self) -> Result<(RolloutBuffer, Vec<f64>, usize), TaskError> {
        let (buffer, finished, faults, raw) = self.collect_raw()?;
        if self.cfg.normalize_observations {
            self.pending_obs = raw;
        }
        Ok((buffer, finished, faults))
    }

    fn collect_raw(&mut self) -> Result<(RolloutBuffer, Vec<f64>, usize, Vec<Vec<f64>>), TaskError> {
        let steps = self.cfg.steps_per_world();
        let policy = &self.policy;
        let results: Vec<_> = self
            .workers
            .par_iter_mut()
            .map(|w| w.collect(policy, steps))
            .collect();
        let mut worlds = Vec::with_capacity(results.len());
        let mut finished = Vec::new();
        let mut faults = 0;
        let mut raw = Vec::new();
        for r in results {
            let c = r?;
            worlds.push(c.transitions);
            finished.extend(c.finished);
            faults += c.faults;
            raw.extend(c.raw_obs);
        }
        if self.cfg.normalize_rewards {
            self.normalize(&mut worlds);
        }
        let bootstrap = self
            .workers
            .iter()
            .map(|w| {
                let obs = w.env.observations();
                self.policy.forward(&obs, &w.env.graph).map(|o| o.values)
            })
            .collect::<Result<Vec<_>, _>>()?;
        self.env_steps += (steps * self.cfg.num_worlds) as u64;
        Ok((
            RolloutBuffer {
                worlds,
                bootstrap,
                morph: self.policy.kind.morph_actions(),
            },
            finished,
            faults,
            raw,
        ))
    }

    /// Folds the observations of the last rollout into the input
    /// normalizer. Runs after the update so stored log-probabilities stay
    /// consistent with the inputs the policy saw.
    fn refresh_obs_norm(&mut self) {
        let rows = std::mem::take(&mut self.pending_obs);
        if rows.is_empty() {
            return;
        }
        let mut column = Vec::new();
        for (k, stats) in self.obs_stats.iter_mut().enumerate() {
            column.clear();
            for row in &rows {
                column.extend(row.iter().skip(k).step_by(OBS_DIM));
            }
            stats.update(&column);
        }
        self.policy.obs_norm = ObsNorm {
            mean: self.obs_stats.iter().map(|s| s.mean).collect(),
            inv_std: self.obs_stats.iter().map(|s| 1.0 / s.variance().sqrt().max(OBS_STD_FLOOR)).collect(),
        };
    }

    fn normalize(&mut self, worlds: &mut [Vec<Transition>]) {
        let len = worlds.iter().map(Vec::len).max().unwrap_or(0);
        for t in 0..len {
            let mut batch = Vec::new();
            for (w, stream) in worlds.iter().enumerate() {
                if let Some(tr) = stream.get(t) {
                    for (i, r) in tr.raw_rewards.iter().enumerate() {
                        self.returns[w][i] = self.returns[w][i] * self.cfg.gamma + r;
                        batch.push(self.returns[w][i]);
                    }
                }
            }
            self.reward_stats.update(&batch);
            let scale = 1.0 / (self.reward_stats.variance() + 1e-8).sqrt();
            for (w, stream) in worlds.iter_mut().enumerate() {
                if let Some(tr) = stream.get_mut(t) {
                    for (r, raw) in tr.rewards.iter_mut().zip(&tr.raw_rewards) {
                        *r = raw * scale;
                    }
                    if tr.done {
                        self.returns[w].iter_mut().for_each(|x| *x = 0.0);
                    }
                }
            }
        }
    }

    /// One rollout followed by one PPO update.
    pub fn iterate(&mut self) -> Result<UpdateReport, TaskError> {
        let (buffer, finished, faulted_episodes) = self.collect()?;
        let stats = ppo_update(&mut self.policy, &mut self.opt, &buffer, &self.cfg, &mut self.rng, &mut self.faults);
        self.refresh_obs_norm();
        self.update += 1;
        Ok(UpdateReport {
            update: self.update,
            env_steps: self.env_steps,
            stats,
            train_episode_reward: (!finished.is_empty()).then(|| finished.iter().sum::<f64>() / finished.len() as f64),
            faulted_episodes,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mean: f64,
    pub std: f64,
    pub episodes: Vec<EpisodeStats>,
}

/// Deterministic-action evaluation over `episodes` spawns seeded
/// `base_seed, base_seed + 1, ...`.
pub fn evaluate(
    policy: &Policy,
    scenario: &ScenarioSpec,
    episodes: usize,
    episode_len: usize,
    base_seed: u64,
    mode: Mode,
) -> Result<EvalSummary, TaskError> {
    let results: Vec<_> = (0..episodes as u64)
        .into_par_iter()
        .map(|k| {
            let mut spec = scenario.clone();
            spec.episode_len = episode_len;
            spec.seed = base_seed.wrapping_add(k);
            run_episode(&spec, policy, mode, derive_seed(base_seed, STREAM_ACTIONS, k), false).map(|(s, _)| s)
        })
        .collect();
    let episodes = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let n = episodes.len().max(1) as f64;
    let mean = episodes.iter().map(|e| e.total_reward).sum::<f64>() / n;
    let var = episodes.iter().map(|e| (e.total_reward - mean).powi(2)).sum::<f64>() / n;
    Ok(EvalSummary {
        mean,
        std: var.sqrt(),
        episodes,
    })
}
