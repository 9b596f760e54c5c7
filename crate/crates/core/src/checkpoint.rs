//! Policy checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` manifest length, the
//! manifest as JSON, then every parameter as a little-endian `f64`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dgn::{DgnError, ObsNorm, Policy, PolicyKind};
use crate::tasks::ScenarioSpec;

const MAGIC: &[u8; 8] = b"ASMBCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("checkpoint parameters: {0}")]
    Policy(#[from] DgnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: PolicyKind,
    pub hidden: usize,
    pub mono_limbs: Option<usize>,
    pub num_params: usize,
    pub obs_norm: ObsNorm,
    /// Scenario the policy was trained on.
    pub scenario: ScenarioSpec,
    pub seed: u64,
    pub update: usize,
    pub env_steps: u64,
    /// Eval mean on the training scenario when the checkpoint was taken.
    pub eval_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub policy: Policy,
}

impl Checkpoint {
    pub fn new(policy: &Policy, scenario: &ScenarioSpec, seed: u64, update: usize, env_steps: u64, eval_mean: Option<f64>) -> Self {
        Checkpoint {
            manifest: Manifest {
                kind: policy.kind,
                hidden: policy.hidden,
                mono_limbs: policy.mono_limbs,
                num_params: policy.params.len(),
                obs_norm: policy.obs_norm.clone(),
                scenario: scenario.clone(),
                seed,
                update,
                env_steps,
                eval_mean,
            },
            policy: policy.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::with_capacity(20 + manifest.len() + 8 * self.policy.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for p in &self.policy.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 20 {
            return Err(if bytes.starts_with(MAGIC) || bytes.len() < 8 { CheckpointError::Truncated } else { CheckpointError::BadMagic });
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < len {
            return Err(CheckpointError::Truncated);
        }
        let manifest: Manifest = serde_json::from_slice(&body[..len])?;
        let raw = &body[len..];
        if raw.len() != 8 * manifest.num_params {
            return Err(CheckpointError::Truncated);
        }
        let params = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let mut policy = Policy::from_params(manifest.kind, manifest.hidden, manifest.mono_limbs, params)?;
        policy.obs_norm = manifest.obs_norm.clone();
        Ok(Checkpoint { manifest, policy })
    }

    /// Writes through a temporary sibling so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
