//! Self-assembling limb agents: a capsule-limb simulator, the dynamic graph
//! network policy, a PPO trainer and the zero-shot evaluation harness.

// Validation uses `!(x > 0.0)` on purpose so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod dgn;
pub mod harness;
pub mod morphology;
pub mod nn;
pub mod sensing;
pub mod sim;
pub mod terrain;
pub mod tasks;
pub mod trainer;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use dgn::{LimbAction, LimbDist, Policy, PolicyKind, MSG_DIM};
pub use harness::{EvalConfig, HarnessError, RunConfig, Variant};
pub use morphology::{MorphError, MorphGraph};
pub use sensing::{Observation, OBS_DIM};
pub use sim::{EnvModifiers, LimbBody, Quat, SimConfig, SimError, Vec3, WindConfig, WorldState};
pub use tasks::{Env, EpisodeStats, Mode, RewardRecord, ScenarioSpec, Task, TaskError};
pub use terrain::{TerrainParams, TerrainSpec, TerrainVariant};
pub use trainer::{EvalSummary, PpoConfig, Surrogate, Trainer};
