//! PPO oracles: advantage double loop, random rollouts and the bandit.

use assemblies_core::dgn::{joint_log_prob, LimbDist, Policy, PolicyKind};
use assemblies_core::morphology::MorphGraph;
use assemblies_core::sensing::OBS_DIM;
use assemblies_core::trainer::{
    compute_gae, minibatch_gradient, ppo_update, FaultPolicy, PpoConfig, RmsProp, RolloutBuffer, Sample, Transition,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct double sum: A_t = sum_k (gamma lambda)^k delta_{t+k}, truncated at
/// episode ends.
pub fn gae_oracle(r: &[f64], v: &[f64], done: &[bool], last: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = r.len();
    let next_v = |t: usize| if t + 1 < n { v[t + 1] } else { last };
    let delta: Vec<f64> = (0..n)
        .map(|t| r[t] + if done[t] { 0.0 } else { gamma * next_v(t) } - v[t])
        .collect();
    let mut out = vec![0.0; n];
    for t in 0..n {
        let mut s = 0.0;
        let mut w = 1.0;
        for k in t..n {
            s += w * delta[k];
            if done[k] {
                break;
            }
            w *= gamma * lambda;
        }
        out[t] = s;
    }
    out
}

pub fn random_buffer(policy: &Policy, worlds: usize, steps: usize, limbs: usize, seed: u64) -> RolloutBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buffer = RolloutBuffer {
        morph: true,
        ..RolloutBuffer::default()
    };
    for _ in 0..worlds {
        let mut stream = Vec::new();
        for t in 0..steps {
            let obs: Vec<f64> = (0..limbs * OBS_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
            let graph = MorphGraph::chain(limbs);
            let out = policy.forward(&obs, &graph).unwrap();
            let actions: Vec<_> = out.dists.iter().map(|d| d.sample(&mut rng, 30.0)).collect();
            let rewards: Vec<f64> = (0..limbs).map(|_| rng.random_range(-1.0..1.0)).collect();
            stream.push(Transition {
                log_prob: joint_log_prob(&out.dists, &actions, true),
                obs,
                graph,
                actions,
                dists: out.dists.clone(),
                values: out.values.clone(),
                raw_rewards: rewards.clone(),
                rewards,
                done: t + 1 == steps,
            });
        }
        buffer.worlds.push(stream);
        buffer.bootstrap.push(vec![0.0; limbs]);
    }
    buffer
}

/// The bandit's only state.
pub fn bandit_obs() -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    (0..OBS_DIM).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn link_probability(policy: &Policy) -> f64 {
    let out = policy.forward(&bandit_obs(), &MorphGraph::new(1)).unwrap();
    let d: &LimbDist = &out.dists[0];
    1.0 / (1.0 + (-d.link_logit).exp())
}

/// One limb, no physics: each step is a one-shot episode paying 1 for
/// choosing to link.
pub fn bandit_updates_to_converge(max_updates: usize) -> (f64, f64, Option<usize>) {
    let cfg = PpoConfig {
        batch_size: 256,
        num_worlds: 4,
        ..PpoConfig::default()
    };
    let mut policy = Policy::new(PolicyKind::Dgn, 1, 16, 3);
    let mut opt = RmsProp::new(policy.num_params(), cfg.learning_rate, cfg.rmsprop_decay, cfg.rmsprop_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut faults = FaultPolicy::default();
    let p0 = link_probability(&policy);
    let mut reached = None;
    for update in 1..=max_updates {
        let mut buffer = RolloutBuffer {
            morph: true,
            ..RolloutBuffer::default()
        };
        for _ in 0..cfg.num_worlds {
            let mut stream = Vec::new();
            for _ in 0..cfg.batch_size / cfg.num_worlds {
                let obs = bandit_obs();
                let graph = MorphGraph::new(1);
                let out = policy.forward(&obs, &graph).unwrap();
                let actions = vec![out.dists[0].sample(&mut rng, 30.0)];
                let r = if actions[0].link { 1.0 } else { 0.0 };
                stream.push(Transition {
                    log_prob: joint_log_prob(&out.dists, &actions, true),
                    obs,
                    graph,
                    actions,
                    dists: out.dists.clone(),
                    values: out.values.clone(),
                    rewards: vec![r],
                    raw_rewards: vec![r],
                    done: true,
                });
            }
            buffer.worlds.push(stream);
            buffer.bootstrap.push(vec![0.0]);
        }
        ppo_update(&mut policy, &mut opt, &buffer, &cfg, &mut rng, &mut faults);
        if link_probability(&policy) > 0.9 {
            reached = Some(update);
            break;
        }
    }
    (p0, link_probability(&policy), reached)
}

/// Worst deviation of `compute_gae` from the double loop over random streams.
pub fn gae_worst_error(streams: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..streams {
        let n = 20;
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let done: Vec<bool> = (0..n).map(|_| rng.random_bool(0.1)).collect();
        let last = rng.random_range(-5.0..5.0);
        let (gamma, lambda) = (rng.random_range(0.8..1.0), rng.random_range(0.5..1.0));
        let (adv, ret) = compute_gae(&r, &v, &done, last, gamma, lambda);
        let oracle = gae_oracle(&r, &v, &done, last, gamma, lambda);
        for t in 0..n {
            worst = worst.max((adv[t] - oracle[t]).abs()).max((ret[t] - oracle[t] - v[t]).abs());
        }
    }
    worst
}

/// Largest `|ratio - 1|` and `|approx_kl|` when the current policy is the
/// one that collected the data.
pub fn ratio_at_behavior_policy(seed: u64) -> (f64, f64) {
    let policy = Policy::new(PolicyKind::Dgn, 3, 16, seed);
    let buffer = random_buffer(&policy, 2, 6, 3, seed + 1);
    let (_, ret) = buffer.advantages(0.99, 0.95);
    let mut worst = (0.0f64, 0.0f64);
    for (w, stream) in buffer.worlds.iter().enumerate() {
        for (t, tr) in stream.iter().enumerate() {
            let s = Sample {
                transition: tr,
                advantage: 1.0,
                returns: &ret[w][t],
            };
            let (parts, _) = minibatch_gradient(&policy, &[s], &PpoConfig::default(), true);
            worst.0 = worst.0.max((parts.mean_ratio - 1.0).abs());
            worst.1 = worst.1.max(parts.approx_kl.abs());
        }
    }
    worst
}

/// Final value of `3 (x - 1.5)^2` after 10^4 RMSProp steps from x = -4.
pub fn rmsprop_quadratic() -> f64 {
    let mut opt = RmsProp::new(1, 1e-2, 0.99, 1e-8);
    let mut x = vec![-4.0];
    for _ in 0..10_000 {
        let g = vec![6.0 * (x[0] - 1.5)];
        opt.step(&mut x, &g);
    }
    3.0 * (x[0] - 1.5f64).powi(2)
}
