//! Scenarios, spawning, per-component rewards and the control loop.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dgn::{DgnError, LimbAction, LimbDist, Policy, PolicyKind};
use crate::morphology::{attach, detach, link_prebuilt, MorphGraph};
use crate::sensing::{observe, OBS_DIM};
use crate::sim::{closest_points_on_segments, EnvModifiers, Quat, SimConfig, SimError, Vec3, WorldState};
use crate::terrain::{generate, TerrainError, TerrainParams, TerrainVariant};

pub const TRACE_VERSION: u32 = 1;
const SPAWN_ATTEMPTS: usize = 10_000;
const WIND_STREAM: u64 = 0x5749_4e44;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("could not place limb {placed} of {requested} without overlap")]
    Spawn { placed: usize, requested: usize },
    #[error("invalid scenario: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Terrain(#[from] TerrainError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Policy(#[from] DgnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Standing,
    StandingWind,
    Locomotion,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Standing, Task::StandingWind, Task::Locomotion];

    pub fn name(self) -> &'static str {
        match self {
            Task::Standing => "standing",
            Task::StandingWind => "standing_wind",
            Task::Locomotion => "locomotion",
        }
    }

    /// Terrain the task trains on.
    pub fn default_terrain(self) -> TerrainVariant {
        match self {
            Task::Locomotion => TerrainVariant::Bumpy,
            _ => TerrainVariant::Flat,
        }
    }

    /// Training terrain. Standing tasks get a wide square arena centered on
    /// the spawn region; locomotion keeps the long strip running along +X.
    pub fn default_terrain_params(self) -> TerrainParams {
        match self {
            Task::Locomotion => TerrainParams::with_variant(self.default_terrain()),
            _ => TerrainParams {
                rows: 96,
                cols: 96,
                origin_x: -24.0,
                origin_z: -24.0,
                ..TerrainParams::with_variant(self.default_terrain())
            },
        }
    }
}

fn default_limbs() -> usize {
    6
}
fn default_episode_len() -> usize {
    5000
}
fn default_spawn_half_extent() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub task: Task,
    /// Defaults to the task's training terrain.
    #[serde(default)]
    pub terrain: Option<TerrainParams>,
    #[serde(default)]
    pub modifiers: EnvModifiers,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default = "default_limbs")]
    pub num_limbs: usize,
    /// Control steps per episode.
    #[serde(default = "default_episode_len")]
    pub episode_len: usize,
    #[serde(default)]
    pub seed: u64,
    /// Limbs spawn with `|x|, |z|` at most this far from the origin.
    #[serde(default = "default_spawn_half_extent")]
    pub spawn_half_extent: f64,
}

impl ScenarioSpec {
    pub fn new(task: Task) -> Self {
        ScenarioSpec {
            task,
            terrain: None,
            modifiers: EnvModifiers::default(),
            sim: SimConfig::default(),
            num_limbs: default_limbs(),
            episode_len: default_episode_len(),
            seed: 0,
            spawn_half_extent: default_spawn_half_extent(),
        }
    }

    pub fn terrain_params(&self) -> TerrainParams {
        self.terrain
            .clone()
            .unwrap_or_else(|| self.task.default_terrain_params())
    }

    /// Modifiers actually in force; the wind task always has wind.
    pub fn effective_modifiers(&self) -> EnvModifiers {
        let mut m = self.modifiers.clone();
        if self.task == Task::StandingWind {
            m.wind.active = true;
        }
        m
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        if self.num_limbs < 1 {
            return Err(TaskError::InvalidSpec("num_limbs must be at least 1".into()));
        }
        if self.episode_len < 1 {
            return Err(TaskError::InvalidSpec("episode_len must be at least 1".into()));
        }
        if !(self.spawn_half_extent > 0.0) {
            return Err(TaskError::InvalidSpec("spawn_half_extent must be positive".into()));
        }
        self.modifiers.validate().map_err(TaskError::InvalidSpec)?;
        self.terrain_params().validate()?;
        Ok(())
    }
}

/// Per-step rewards, one entry per limb, plus the component breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub per_limb: Vec<f64>,
    pub components: Vec<ComponentReward>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentReward {
    pub members: Vec<usize>,
    pub reward: f64,
}

impl RewardRecord {
    pub fn total(&self) -> f64 {
        self.per_limb.iter().sum()
    }
}

/// Height of the highest capsule tip of each component, shared by its members.
pub fn standing_reward(world: &WorldState, graph: &MorphGraph) -> RewardRecord {
    let mut per_limb = vec![0.0; world.num_limbs()];
    let mut components = Vec::new();
    for members in graph.connected_components() {
        let top = members
            .iter()
            .map(|&i| {
                let l = &world.limbs[i];
                l.parent_anchor().y.max(l.child_anchor().y)
            })
            .fold(f64::NEG_INFINITY, f64::max);
        for &i in &members {
            per_limb[i] = top;
        }
        components.push(ComponentReward { members, reward: top });
    }
    RewardRecord { per_limb, components }
}

/// Component layout and limb X positions at the previous control step.
#[derive(Debug, Clone, PartialEq)]
pub struct LocomotionState {
    pub x: Vec<f64>,
    pub components: Vec<Vec<usize>>,
}

impl LocomotionState {
    pub fn capture(world: &WorldState, graph: &MorphGraph) -> Self {
        LocomotionState {
            x: world.limbs.iter().map(|l| l.position.x).collect(),
            components: graph.connected_components(),
        }
    }
}

/// Forward progress along +X. A component that existed unchanged at the
/// previous step shares its centroid displacement; limbs of a component
/// that just merged or split are rewarded with their own displacement.
pub fn locomotion_reward(world: &WorldState, graph: &MorphGraph, prev: &LocomotionState) -> RewardRecord {
    let mut per_limb = vec![0.0; world.num_limbs()];
    let mut components = Vec::new();
    for members in graph.connected_components() {
        let stable = prev.components.contains(&members);
        let deltas: Vec<f64> = members.iter().map(|&i| world.limbs[i].position.x - prev.x[i]).collect();
        let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
        for (&i, &d) in members.iter().zip(&deltas) {
            per_limb[i] = if stable { mean } else { d };
        }
        components.push(ComponentReward { members, reward: mean });
    }
    RewardRecord { per_limb, components }
}

fn random_orientation<R: Rng + ?Sized>(rng: &mut R) -> Quat {
    // Shoemake's uniform sampling of SO(3).
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let tau = std::f64::consts::TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    Quat::from_quaternion(nalgebra::Quaternion::new(
        b * (tau * u3).cos(),
        a * (tau * u2).sin(),
        a * (tau * u2).cos(),
        b * (tau * u3).sin(),
    ))
}

fn segment_ends(p: Vec3, q: Quat, half: f64) -> (Vec3, Vec3) {
    let axis = q * Vec3::z();
    (p - axis * half, p + axis * half)
}

/// Drops `spec.num_limbs` disconnected limbs at random poses, one limb
/// length above the local terrain, with no two capsules overlapping.
pub fn spawn(spec: &ScenarioSpec) -> Result<(WorldState, MorphGraph), TaskError> {
    spec.validate()?;
    let terrain = Arc::new(generate(&spec.terrain_params(), spec.seed)?);
    let mut world = WorldState::new(
        spec.sim.clone(),
        terrain.clone(),
        spec.effective_modifiers(),
        spec.seed ^ WIND_STREAM,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (len, r) = (spec.sim.limb_length, spec.sim.limb_radius);
    let e = spec.spawn_half_extent;
    let mut placed: Vec<(Vec3, Vec3)> = Vec::new();
    for k in 0..spec.num_limbs {
        let mut ok = false;
        for _ in 0..SPAWN_ATTEMPTS {
            let x = rng.random_range(-e..=e);
            let z = rng.random_range(-e..=e);
            let q = random_orientation(&mut rng);
            let Some(ground) = terrain.height_query(x, z).filter(|h| *h > -1e3) else {
                continue;
            };
            let p = Vec3::new(x, ground + len, z);
            let seg = segment_ends(p, q, len / 2.0);
            let clear = placed.iter().all(|&(a, b)| {
                let (c1, c2) = closest_points_on_segments(seg.0, seg.1, a, b);
                (c1 - c2).norm() >= 2.0 * r
            });
            if clear {
                placed.push(seg);
                world.add_limb(p, q);
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(TaskError::Spawn {
                placed: k,
                requested: spec.num_limbs,
            });
        }
    }
    Ok((world, MorphGraph::new(spec.num_limbs)))
}

/// A pre-assembled straight chain lying along a random heading, one limb
/// length above the highest terrain beneath it.
pub fn spawn_chain(spec: &ScenarioSpec) -> Result<(WorldState, MorphGraph), TaskError> {
    spec.validate()?;
    let terrain = Arc::new(generate(&spec.terrain_params(), spec.seed)?);
    let mut world = WorldState::new(
        spec.sim.clone(),
        terrain.clone(),
        spec.effective_modifiers(),
        spec.seed ^ WIND_STREAM,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.num_limbs;
    let len = spec.sim.limb_length;
    let e = spec.spawn_half_extent;
    let yaw = rng.random_range(0.0..std::f64::consts::TAU);
    let dir = Vec3::new(yaw.cos(), 0.0, -yaw.sin());
    // Rotating body z onto `dir` about the vertical axis.
    let q = Quat::from_axis_angle(&Vec3::y_axis(), yaw + std::f64::consts::FRAC_PI_2);
    let cx = rng.random_range(-e..=e);
    let cz = rng.random_range(-e..=e);
    let start = Vec3::new(cx, 0.0, cz) - dir * (len * (n as f64 - 1.0) / 2.0);
    let centers: Vec<Vec3> = (0..n).map(|k| start + dir * (len * k as f64)).collect();
    let mut ground = f64::NEG_INFINITY;
    for c in &centers {
        for s in [-0.5, 0.0, 0.5] {
            let p = c + dir * (s * len);
            if let Some(h) = terrain.height_query(p.x, p.z).filter(|h| *h > -1e3) {
                ground = ground.max(h);
            }
        }
    }
    if !ground.is_finite() {
        return Err(TaskError::Spawn { placed: 0, requested: n });
    }
    let mut graph = MorphGraph::new(n);
    for c in centers {
        world.add_limb(Vec3::new(c.x, ground + len, c.z), q);
    }
    for k in 1..n {
        link_prebuilt(&mut world, &mut graph, k, k - 1).map_err(|e| TaskError::InvalidSpec(e.to_string()))?;
    }
    Ok((world, graph))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Sample actions from the policy distributions.
    Train,
    /// Mean torques and thresholded link/unlink.
    Eval,
}

/// Everything produced by one control step.
#[derive(Debug, Clone)]
pub struct StepData {
    /// Row-major per-limb observations as seen by the policy (normalized).
    pub obs: Vec<f64>,
    pub raw_obs: Vec<f64>,
    /// Morphology the policy was evaluated on.
    pub graph: MorphGraph,
    pub dists: Vec<LimbDist>,
    pub values: Vec<f64>,
    pub actions: Vec<LimbAction>,
    pub rewards: RewardRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimbPose {
    pub position: [f64; 3],
    /// `(x, y, z, w)`.
    pub orientation: [f64; 4],
}

/// One line of an episode trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub version: u32,
    pub step: usize,
    pub time: f64,
    pub poses: Vec<LimbPose>,
    /// `(child, parent)` pairs after this step's morphology changes.
    pub edges: Vec<(usize, usize)>,
    pub actions: Vec<LimbAction>,
    pub rewards: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub records: Vec<TraceRecord>,
}

impl EpisodeTrace {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    /// Sum over steps and limbs of the per-limb rewards.
    pub total_reward: f64,
    pub step_count: usize,
    /// Largest connected component at the final step.
    pub final_largest_component: usize,
    pub max_largest_component: usize,
}

/// A running episode: world, morphology and reward bookkeeping.
#[derive(Debug, Clone)]
pub struct Env {
    pub spec: ScenarioSpec,
    pub kind: PolicyKind,
    pub world: WorldState,
    pub graph: MorphGraph,
    pub step_count: usize,
    loco: LocomotionState,
}

impl Env {
    pub fn new(spec: &ScenarioSpec, kind: PolicyKind) -> Result<Self, TaskError> {
        let (world, graph) = if kind.fixed_morphology() {
            spawn_chain(spec)?
        } else {
            spawn(spec)?
        };
        let loco = LocomotionState::capture(&world, &graph);
        Ok(Env {
            spec: spec.clone(),
            kind,
            world,
            graph,
            step_count: 0,
            loco,
        })
    }

    pub fn num_limbs(&self) -> usize {
        self.world.num_limbs()
    }

    pub fn done(&self) -> bool {
        self.step_count >= self.spec.episode_len
    }

    pub fn observations(&self) -> Vec<f64> {
        let n = self.num_limbs();
        let mut out = vec![0.0; n * OBS_DIM];
        for i in 0..n {
            observe(&self.world, &self.graph, i).write_to(&mut out[i * OBS_DIM..(i + 1) * OBS_DIM]);
        }
        out
    }

    /// Applies one control step of actions: morphology changes in ascending
    /// limb order (link before unlink), then torques held over every substep.
    pub fn step(&mut self, actions: &[LimbAction]) -> Result<RewardRecord, TaskError> {
        assert_eq!(actions.len(), self.num_limbs());
        if self.kind.morph_actions() {
            for (i, a) in actions.iter().enumerate() {
                if a.link {
                    attach(&mut self.world, &mut self.graph, i);
                }
                if a.unlink {
                    detach(&mut self.world, &mut self.graph, i);
                }
            }
        }
        let dt = self.world.config.dt;
        for _ in 0..self.world.config.substeps_per_control {
            for (i, a) in actions.iter().enumerate() {
                self.world.apply_torque(i, Vec3::from(a.torque))?;
            }
            self.world.step(dt)?;
        }
        self.step_count += 1;
        let rewards = match self.spec.task {
            Task::Standing | Task::StandingWind => standing_reward(&self.world, &self.graph),
            Task::Locomotion => locomotion_reward(&self.world, &self.graph, &self.loco),
        };
        self.loco = LocomotionState::capture(&self.world, &self.graph);
        Ok(rewards)
    }

    /// Wind, observation, policy evaluation, action selection and one step.
    pub fn policy_step<R: Rng + ?Sized>(&mut self, policy: &Policy, rng: &mut R, mode: Mode) -> Result<StepData, TaskError> {
        self.world.apply_wind();
        let raw_obs = self.observations();
        let obs = policy.obs_norm.apply(&raw_obs);
        let graph = self.graph.clone();
        let out = policy.forward(&obs, &graph)?;
        let tau = self.world.config.max_torque;
        let actions: Vec<LimbAction> = out
            .dists
            .iter()
            .map(|d| match mode {
                Mode::Train => d.sample(rng, tau),
                Mode::Eval => d.mode(tau),
            })
            .collect();
        let rewards = self.step(&actions)?;
        Ok(StepData {
            obs,
            raw_obs,
            graph,
            dists: out.dists,
            values: out.values,
            actions,
            rewards,
        })
    }

    pub fn largest_component(&self) -> usize {
        self.graph.connected_components().iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn trace_record(&self, actions: &[LimbAction], rewards: &RewardRecord) -> TraceRecord {
        TraceRecord {
            version: TRACE_VERSION,
            step: self.step_count,
            time: self.world.time,
            poses: self
                .world
                .limbs
                .iter()
                .map(|l| {
                    let q = l.orientation.coords;
                    LimbPose {
                        position: l.position.into(),
                        orientation: [q.x, q.y, q.z, q.w],
                    }
                })
                .collect(),
            edges: self.graph.edges(),
            actions: actions.to_vec(),
            rewards: rewards.per_limb.clone(),
        }
    }
}

/// Runs a full episode with fresh spawns from `spec.seed`; `action_seed`
/// drives stochastic action sampling in training mode.
pub fn run_episode(
    spec: &ScenarioSpec,
    policy: &Policy,
    mode: Mode,
    action_seed: u64,
    record: bool,
) -> Result<(EpisodeStats, Option<EpisodeTrace>), TaskError> {
    if !policy.accepts_limbs(spec.num_limbs) {
        return Err(DgnError::LimbCount {
            expected: policy.mono_limbs.unwrap_or(0),
            got: spec.num_limbs,
        }
        .into());
    }
    let mut env = Env::new(spec, policy.kind)?;
    let mut rng = ChaCha8Rng::seed_from_u64(action_seed);
    let mut trace = record.then(EpisodeTrace::default);
    let mut total = 0.0;
    let mut max_comp = env.largest_component();
    while !env.done() {
        let step = env.policy_step(policy, &mut rng, mode)?;
        total += step.rewards.total();
        max_comp = max_comp.max(env.largest_component());
        if let Some(t) = trace.as_mut() {
            t.records.push(env.trace_record(&step.actions, &step.rewards));
        }
    }
    Ok((
        EpisodeStats {
            total_reward: total,
            step_count: env.step_count,
            final_largest_component: env.largest_component(),
            max_largest_component: max_comp,
        },
        trace,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgn::DEFAULT_HIDDEN;
    use crate::terrain::TerrainSpec;

    fn spec(task: Task) -> ScenarioSpec {
        let mut s = ScenarioSpec::new(task);
        s.episode_len = 20;
        s.seed = 11;
        s
    }

    #[test]
    fn spawn_is_deterministic_and_disconnected() {
        let s = spec(Task::Standing);
        let (a, ga) = spawn(&s).unwrap();
        let (b, _) = spawn(&s).unwrap();
        assert_eq!(a.limbs, b.limbs);
        assert_eq!(ga.connected_components().len(), 6);
        assert!(a.joints.is_empty());
        for l in &a.limbs {
            assert!((l.position.y - 1.0).abs() < 1e-12);
            assert!(l.position.x.abs() <= 2.0 && l.position.z.abs() <= 2.0);
        }
    }

    #[test]
    fn crowded_spawn_fails_cleanly() {
        let mut s = spec(Task::Standing);
        s.spawn_half_extent = 0.05;
        s.num_limbs = 40;
        assert!(matches!(spawn(&s), Err(TaskError::Spawn { .. })));
    }

    #[test]
    fn chain_spawn_is_straight_and_jointed() {
        let s = spec(Task::Standing);
        let (w, g) = spawn_chain(&s).unwrap();
        assert_eq!(g, MorphGraph::chain(6));
        assert!(w.max_joint_separation() < 1e-9);
        for l in &w.limbs {
            assert!(l.axis().y.abs() < 1e-12);
        }
    }

    #[test]
    fn lying_limb_scores_its_radius() {
        let mut w = WorldState::new(
            SimConfig::default(),
            Arc::new(TerrainSpec::flat_default()),
            EnvModifiers::default(),
            0,
        );
        w.add_limb(Vec3::new(0.0, 0.1, 0.0), Quat::from_axis_angle(&Vec3::y_axis(), 1.0));
        let r = standing_reward(&w, &MorphGraph::new(1));
        assert!((r.per_limb[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn stationary_world_earns_no_progress() {
        let (w, g) = spawn(&spec(Task::Locomotion)).unwrap();
        let prev = LocomotionState::capture(&w, &g);
        assert!(locomotion_reward(&w, &g, &prev).per_limb.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn untrained_eval_episode_runs_full_length() {
        let s = spec(Task::Standing);
        let p = Policy::new(PolicyKind::Dgn, 6, DEFAULT_HIDDEN, 0);
        let (stats, trace) = run_episode(&s, &p, Mode::Eval, 0, true).unwrap();
        assert_eq!(stats.step_count, 20);
        let trace = trace.unwrap();
        assert_eq!(trace.records.len(), 20);
        assert!(trace.records.iter().all(|r| r.version == TRACE_VERSION));
    }

    #[test]
    fn fixed_kinds_never_change_morphology() {
        let s = spec(Task::Standing);
        let p = Policy::new(PolicyKind::MonoFixed, 6, 16, 1);
        let (_, trace) = run_episode(&s, &p, Mode::Train, 3, true).unwrap();
        for r in trace.unwrap().records {
            assert_eq!(r.edges, MorphGraph::chain(6).edges());
        }
    }

    #[test]
    fn wind_task_forces_wind_on() {
        assert!(spec(Task::StandingWind).effective_modifiers().wind.active);
        assert!(!spec(Task::Standing).effective_modifiers().wind.active);
    }
}
