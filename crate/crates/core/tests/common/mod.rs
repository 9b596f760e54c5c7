//! Oracles and measurements shared by the integration tests and the
//! acceptance report.
#![allow(dead_code)]

pub mod ppo;

use std::collections::{BTreeSet, VecDeque};
use std::sync::Arc;

use assemblies_core::dgn::{LimbGrad, Policy, PolicyKind, PolicyOutput, MSG_DIM};
use assemblies_core::morphology::{attach, detach, joints_match_graph, nearest_attachable, MorphGraph};
use assemblies_core::sensing::OBS_DIM;
use assemblies_core::sim::{EnvModifiers, Quat, SimConfig, Vec3, WorldState};
use assemblies_core::terrain::TerrainSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn world(config: SimConfig, modifiers: EnvModifiers) -> WorldState {
    WorldState::new(config, Arc::new(TerrainSpec::flat_default()), modifiers, 0)
}

pub fn random_quat(rng: &mut ChaCha8Rng) -> Quat {
    let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    Quat::from_scaled_axis(axis.normalize() * rng.random_range(0.0..std::f64::consts::PI))
}

/// Worst relative error of the fall distance against `g t^2 / 2` at 2 s.
pub fn free_fall_error() -> f64 {
    let cfg = SimConfig::default();
    let g = cfg.gravity;
    let dt = cfg.dt;
    let mut w = world(cfg, EnvModifiers::default());
    let y0 = 40.0;
    w.add_limb(Vec3::new(0.0, y0, 0.0), Quat::identity());
    let steps = 200;
    for _ in 0..steps {
        w.step(dt).unwrap();
    }
    let t = steps as f64 * dt;
    let exact = 0.5 * g * t * t;
    ((y0 - w.limbs[0].position.y) - exact).abs() / exact
}

/// Two jointed limbs plus a free one, far above the ground with gravity
/// off. Returns the largest relative change of any component's momentum
/// over 1000 substeps.
pub fn momentum_drift(seed: u64) -> f64 {
    let cfg = SimConfig {
        gravity: 0.0,
        ..SimConfig::default()
    };
    let dt = cfg.dt;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = world(cfg, EnvModifiers::default());
    let mut g = MorphGraph::new(3);
    w.add_limb(Vec3::new(0.0, 50.0, 0.0), Quat::identity());
    let above = w.limbs[0].parent_anchor() + Vec3::new(0.0, 0.0, 0.5);
    w.add_limb(above, Quat::identity());
    w.add_limb(Vec3::new(5.0, 50.0, 0.0), random_quat(&mut rng));
    assemblies_core::morphology::link_prebuilt(&mut w, &mut g, 1, 0).unwrap();
    for l in w.limbs.iter_mut() {
        l.lin_vel = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        l.ang_vel = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    }
    let groups: [&[usize]; 2] = [&[0, 1], &[2]];
    let p0: Vec<Vec3> = groups.iter().map(|m| w.linear_momentum(m)).collect();
    for _ in 0..1000 {
        w.step(dt).unwrap();
    }
    groups
        .iter()
        .zip(&p0)
        .map(|(m, p)| (w.linear_momentum(m) - p).norm() / p.norm())
        .fold(0.0, f64::max)
}

/// A three-limb chain on the ground driven by saturating random torques
/// that change every control step. Returns the largest anchor separation
/// seen over 1000 substeps.
pub fn joint_drift_under_max_torque(seed: u64) -> f64 {
    let cfg = SimConfig::default();
    let (dt, tau, k) = (cfg.dt, cfg.max_torque, cfg.substeps_per_control);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = world(cfg, EnvModifiers::default());
    let mut g = MorphGraph::new(3);
    let lying = Quat::from_axis_angle(&Vec3::y_axis(), std::f64::consts::FRAC_PI_2);
    for i in 0..3 {
        w.add_limb(Vec3::new(i as f64, 0.1, 0.0), lying);
    }
    assemblies_core::morphology::link_prebuilt(&mut w, &mut g, 1, 0).unwrap();
    assemblies_core::morphology::link_prebuilt(&mut w, &mut g, 2, 1).unwrap();
    let mut worst: f64 = w.max_joint_separation();
    let mut torques = [Vec3::zeros(); 3];
    for s in 0..1000 {
        if s % k == 0 {
            for t in torques.iter_mut() {
                *t = Vec3::from_fn(|_, _| if rng.random_bool(0.5) { tau } else { -tau });
            }
        }
        for (i, t) in torques.iter().enumerate() {
            w.apply_torque(i, *t).unwrap();
        }
        w.step(dt).unwrap();
        worst = worst.max(w.max_joint_separation());
    }
    worst
}

/// Connected components by breadth-first search over `(child, parent)` edges.
pub fn components_oracle(n: usize, edges: &[(usize, usize)]) -> BTreeSet<BTreeSet<usize>> {
    let mut adj = vec![Vec::new(); n];
    for &(c, p) in edges {
        adj[p].push(c);
        adj[c].push(p);
    }
    let mut seen = vec![false; n];
    let mut out = BTreeSet::new();
    for s in 0..n {
        if seen[s] {
            continue;
        }
        let mut comp = BTreeSet::new();
        let mut q = VecDeque::from([s]);
        seen[s] = true;
        while let Some(u) = q.pop_front() {
            comp.insert(u);
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    q.push_back(v);
                }
            }
        }
        out.insert(comp);
    }
    out
}

/// An undirected edge set on n nodes is a forest iff it has n - c edges.
pub fn is_forest_oracle(n: usize, edges: &[(usize, usize)]) -> bool {
    edges.len() + components_oracle(n, edges).len() == n
}

/// Scans every pair for the closest eligible free child-end.
pub fn nearest_oracle(w: &WorldState, g: &MorphGraph, limb: usize) -> Option<usize> {
    if w.limbs[limb].position.y < w.config.kill_depth {
        return None;
    }
    let comps = components_oracle(g.num_limbs(), &g.edges());
    let comp_of = |i: usize| comps.iter().position(|c| c.contains(&i)).unwrap();
    let anchor = w.limbs[limb].parent_anchor();
    let range = 1.33 * w.config.limb_length;
    let mut best: Option<(f64, usize)> = None;
    for j in 0..w.limbs.len() {
        let eligible = j != limb
            && g.parent_of(j).is_none()
            && comp_of(j) != comp_of(limb)
            && w.limbs[j].position.y >= w.config.kill_depth;
        if !eligible {
            continue;
        }
        let d = (w.limbs[j].child_anchor() - anchor).norm();
        if d <= range && best.is_none_or(|(bd, bj)| d < bd || (d == bd && j < bj)) {
            best = Some((d, j));
        }
    }
    best.map(|(_, j)| j)
}

pub fn scatter(w: &mut WorldState, rng: &mut ChaCha8Rng, half: f64) {
    for l in w.limbs.iter_mut() {
        l.position = Vec3::new(rng.random_range(-half..half), rng.random_range(0.2..1.5), rng.random_range(-half..half));
        l.orientation = random_quat(rng);
    }
}

#[derive(Debug, Default)]
pub struct FuzzReport {
    pub ops: usize,
    pub attaches: usize,
    pub detaches: usize,
    pub violations: Vec<String>,
}

/// Random attach/detach operations with every invariant re-checked after
/// each one against the independent oracles above.
pub fn morphology_fuzz(ops: usize, limbs: usize, seed: u64) -> FuzzReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = world(SimConfig::default(), EnvModifiers::default());
    for _ in 0..limbs {
        w.add_limb(Vec3::zeros(), Quat::identity());
    }
    scatter(&mut w, &mut rng, 1.5);
    let mut g = MorphGraph::new(limbs);
    let mut rep = FuzzReport::default();
    for op in 0..ops {
        let limb = rng.random_range(0..limbs);
        match rng.random_range(0..10) {
            0..=4 => {
                let expect = nearest_oracle(&w, &g, limb);
                let got = attach(&mut w, &mut g, limb);
                if got != expect {
                    rep.violations.push(format!("op {op}: attach({limb}) gave {got:?}, oracle {expect:?}"));
                }
                rep.attaches += got.is_some() as usize;
            }
            5..=7 => {
                let had = g.parent_of(limb);
                let got = detach(&mut w, &mut g, limb);
                if got != had {
                    rep.violations.push(format!("op {op}: detach({limb}) gave {got:?}, parent was {had:?}"));
                }
                rep.detaches += got.is_some() as usize;
            }
            8 => scatter(&mut w, &mut rng, 1.5),
            _ => {
                for _ in 0..3 {
                    let _ = w.step(w.config.dt);
                }
            }
        }
        let edges = g.edges();
        if !is_forest_oracle(limbs, &edges) {
            rep.violations.push(format!("op {op}: not a forest: {edges:?}"));
        }
        let mut children: Vec<usize> = edges.iter().map(|&(c, _)| c).collect();
        children.sort_unstable();
        children.dedup();
        if children.len() != edges.len() {
            rep.violations.push(format!("op {op}: a limb has two parents"));
        }
        let joints: BTreeSet<(usize, usize)> = w.joints.iter().map(|j| (j.child_limb, j.parent_limb)).collect();
        let graph_edges: BTreeSet<(usize, usize)> = edges.iter().copied().collect();
        if joints != graph_edges || w.joints.len() != edges.len() || !joints_match_graph(&w, &g) {
            rep.violations.push(format!("op {op}: joints {joints:?} vs edges {graph_edges:?}"));
        }
        let comps: BTreeSet<BTreeSet<usize>> = g.connected_components().into_iter().map(|c| c.into_iter().collect()).collect();
        if comps != components_oracle(limbs, &edges) {
            rep.violations.push(format!("op {op}: components disagree"));
        }
        rep.ops += 1;
        if rep.violations.len() > 20 {
            break;
        }
    }
    rep
}

/// Compares `nearest_attachable` against the pair scan over random
/// configurations; returns the number of mismatches.
pub fn nearest_mismatches(configs: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..configs {
        let n = rng.random_range(2..10);
        let mut w = world(SimConfig::default(), EnvModifiers::default());
        for _ in 0..n {
            w.add_limb(Vec3::zeros(), Quat::identity());
        }
        scatter(&mut w, &mut rng, 2.0);
        let mut g = MorphGraph::new(n);
        for _ in 0..rng.random_range(0..n) {
            let _ = attach(&mut w, &mut g, rng.random_range(0..n));
        }
        for limb in 0..n {
            if nearest_attachable(&w, &g, limb) != nearest_oracle(&w, &g, limb) {
                bad += 1;
            }
        }
    }
    bad
}

/// Per-limb outputs from the oracle.
#[derive(Debug, Clone)]
pub struct OracleOut {
    pub mu: [f64; 3],
    pub link: f64,
    pub unlink: f64,
    pub msg: [f64; MSG_DIM],
    pub value: f64,
}

/// Dense forward pass written directly against the flat parameter layout.
fn dense(params: &[f64], sizes: &[usize], x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    let mut off = 0;
    for k in 0..sizes.len() - 1 {
        let (ni, no) = (sizes[k], sizes[k + 1]);
        let w = &params[off..off + ni * no];
        let b = &params[off + ni * no..off + ni * no + no];
        let mut y = vec![0.0; no];
        for j in 0..no {
            let mut s = b[j];
            for i in 0..ni {
                s += w[j * ni + i] * a[i];
            }
            y[j] = if k + 2 < sizes.len() { s.max(0.0) } else { s };
        }
        off += ni * no + no;
        a = y;
    }
    a
}

/// Recursive evaluation: a limb's message is computed from its own
/// observation and the sum of its children's messages.
pub fn dgn_oracle(policy: &Policy, obs: &[f64], parents: &[Option<usize>]) -> Vec<OracleOut> {
    let h = policy.hidden;
    let sizes = [OBS_DIM + MSG_DIM, h, h, h, 5 + MSG_DIM + 1];
    let use_msgs = matches!(policy.kind, PolicyKind::Dgn | PolicyKind::DgnStatic);
    fn eval(
        i: usize,
        policy: &Policy,
        sizes: &[usize],
        obs: &[f64],
        parents: &[Option<usize>],
        use_msgs: bool,
        memo: &mut Vec<Option<OracleOut>>,
    ) -> OracleOut {
        if let Some(o) = &memo[i] {
            return o.clone();
        }
        let mut input = obs[i * OBS_DIM..(i + 1) * OBS_DIM].to_vec();
        let mut agg = [0.0; MSG_DIM];
        if use_msgs {
            for c in (0..parents.len()).filter(|&c| parents[c] == Some(i)) {
                let m = eval(c, policy, sizes, obs, parents, use_msgs, memo).msg;
                for k in 0..MSG_DIM {
                    agg[k] += m[k];
                }
            }
        }
        input.extend_from_slice(&agg);
        let y = dense(&policy.params, sizes, &input);
        let mut msg = [0.0; MSG_DIM];
        for k in 0..MSG_DIM {
            msg[k] = y[5 + k].tanh();
        }
        let o = OracleOut {
            mu: [y[0], y[1], y[2]],
            link: y[3],
            unlink: y[4],
            msg,
            value: y[5 + MSG_DIM],
        };
        memo[i] = Some(o.clone());
        o
    }
    let mut memo = vec![None; parents.len()];
    (0..parents.len())
        .map(|i| eval(i, policy, &sizes, obs, parents, use_msgs, &mut memo))
        .collect()
}

/// A uniformly labeled random forest: each node after the first picks a
/// parent among earlier nodes or stays a root, then labels are shuffled.
pub fn random_forest(rng: &mut ChaCha8Rng, n: usize) -> Vec<Option<usize>> {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let mut parents = vec![None; n];
    for k in 1..n {
        if rng.random_bool(0.85) {
            parents[perm[k]] = Some(perm[rng.random_range(0..k)]);
        }
    }
    parents
}

/// A modular policy with every parameter drawn at random, so no head is
/// trivially zero.
pub fn random_policy(kind: PolicyKind, hidden: usize, rng: &mut ChaCha8Rng) -> Policy {
    let n = Policy::new(kind, 1, hidden, 0).num_params();
    let params = (0..n).map(|_| rng.random_range(-0.3..0.3)).collect();
    Policy::from_params(kind, hidden, None, params).unwrap()
}

pub fn random_obs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n * OBS_DIM).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Worst absolute difference between the policy and the recursive oracle
/// over `trees` random forests of up to 12 limbs.
pub fn oracle_error(kind: PolicyKind, trees: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trees {
        let policy = random_policy(kind, 16, &mut rng);
        let n = rng.random_range(1..=12);
        let parents = random_forest(&mut rng, n);
        let obs = random_obs(&mut rng, n);
        let out = policy.forward(&obs, &MorphGraph::from_parents(parents.clone()).unwrap()).unwrap();
        for (i, o) in dgn_oracle(&policy, &obs, &parents).iter().enumerate() {
            let d = &out.dists[i];
            let mut diffs = vec![d.link_logit - o.link, d.unlink_logit - o.unlink, out.values[i] - o.value];
            diffs.extend((0..3).map(|k| d.mu[k] - o.mu[k]));
            diffs.extend((0..o.msg.len()).map(|k| out.messages[i][k] - o.msg[k]));
            worst = diffs.iter().fold(worst, |w, x| w.max(x.abs()));
        }
    }
    worst
}

fn weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<LimbGrad> {
    (0..n)
        .map(|_| LimbGrad {
            mu: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            log_std: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            link: rng.random_range(-1.0..1.0),
            unlink: rng.random_range(-1.0..1.0),
            value: rng.random_range(-1.0..1.0),
        })
        .collect()
}

/// A fixed linear functional of every per-limb output.
fn scalar(out: &PolicyOutput, w: &[LimbGrad]) -> f64 {
    out.dists
        .iter()
        .zip(&out.values)
        .zip(w)
        .map(|((d, v), w)| {
            (0..3).map(|k| w.mu[k] * d.mu[k] + w.log_std[k] * d.log_std[k]).sum::<f64>()
                + w.link * d.link_logit
                + w.unlink * d.unlink_logit
                + w.value * v
        })
        .sum()
}

/// Worst relative disagreement between backprop and central differences.
pub fn gradient_error(kind: PolicyKind, trees: usize, params_per_tree: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..trees {
        let n = 5;
        let mut policy = if kind.is_modular() {
            random_policy(kind, 16, &mut rng)
        } else {
            let p = Policy::new(kind, n, 16, 0);
            let params = (0..p.num_params()).map(|_| rng.random_range(-0.3..0.3)).collect();
            Policy::from_params(kind, 16, Some(n), params).unwrap()
        };
        let graph = MorphGraph::from_parents(random_forest(&mut rng, n)).unwrap();
        let obs = random_obs(&mut rng, n);
        let w = weights(&mut rng, n);
        let out = policy.forward(&obs, &graph).unwrap();
        let mut grads = vec![0.0; policy.num_params()];
        policy.backward(&out, &w, &mut grads).unwrap();
        let total = policy.num_params();
        let picks: Vec<usize> = if params_per_tree >= total {
            (0..total).collect()
        } else {
            // Always include the log-std tail.
            let mut v: Vec<usize> = (0..params_per_tree).map(|_| rng.random_range(0..total)).collect();
            v.extend(total - 3..total);
            v
        };
        for k in picks {
            let orig = policy.params[k];
            policy.params[k] = orig + eps;
            let up = scalar(&policy.forward(&obs, &graph).unwrap(), &w);
            policy.params[k] = orig - eps;
            let down = scalar(&policy.forward(&obs, &graph).unwrap(), &w);
            policy.params[k] = orig;
            let fd = (up - down) / (2.0 * eps);
            let err = (fd - grads[k]).abs() / (fd.abs().max(grads[k].abs()) + 1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

/// Relabels limbs by `perm` (old index -> new index) and checks every output
/// moves with its limb, bit for bit.
pub fn equivariance_holds(policy: &Policy, parents: &[Option<usize>], obs: &[f64], perm: &[usize]) -> bool {
    let n = parents.len();
    let mut new_parents = vec![None; n];
    let mut new_obs = vec![0.0; obs.len()];
    for old in 0..n {
        new_parents[perm[old]] = parents[old].map(|p| perm[p]);
        new_obs[perm[old] * OBS_DIM..(perm[old] + 1) * OBS_DIM].copy_from_slice(&obs[old * OBS_DIM..(old + 1) * OBS_DIM]);
    }
    let a = policy.forward(obs, &MorphGraph::from_parents(parents.to_vec()).unwrap()).unwrap();
    let b = policy.forward(&new_obs, &MorphGraph::from_parents(new_parents).unwrap()).unwrap();
    (0..n).all(|old| {
        let new = perm[old];
        a.dists[old] == b.dists[new] && a.values[old] == b.values[new] && a.messages[old] == b.messages[new]
    })
}

pub fn shuffled(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.random_range(0..=i));
    }
    p
}
