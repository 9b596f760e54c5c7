//! Shared-parameter limb policies with bottom-up message passing, and the
//! monolithic baselines.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::morphology::MorphGraph;
use crate::nn::{MlpShape, MlpTrace};
use crate::sensing::OBS_DIM;

pub const MSG_DIM: usize = 32;
pub const TORQUE_DIM: usize = 3;
pub const DEFAULT_HIDDEN: usize = 64;
/// Fully-connected layers in every policy network.
pub const NUM_LAYERS: usize = 4;

const OUT_LINK: usize = 3;
const OUT_UNLINK: usize = 4;
const OUT_MSG: usize = 5;
const OUT_VALUE: usize = OUT_MSG + MSG_DIM;
const MODULAR_OUT: usize = OUT_VALUE + 1;
const MONO_PER_LIMB: usize = 6;
const MONO_VALUE: usize = 5;

const HIDDEN_GAIN: f64 = std::f64::consts::SQRT_2;
/// Torque and link/unlink heads start at zero: an untrained policy is passive.
const POLICY_HEAD_GAIN: f64 = 0.0;
/// Normalized observations are clipped to this magnitude.
pub const OBS_CLIP: f64 = 10.0;

#[derive(Debug, Error, PartialEq)]
pub enum DgnError {
    #[error("morphology graph is not a forest")]
    NotForest,
    #[error("fixed dimensionality: network expects {expected} limbs, got {got}")]
    LimbCount { expected: usize, got: usize },
    #[error("observation buffer has {got} values, expected {expected}")]
    ObservationLength { expected: usize, got: usize },
    #[error("parameter vector has {got} entries, expected {expected}")]
    ParamLength { expected: usize, got: usize },
    #[error("{0} upstream gradients for {1} limbs")]
    GradientCount(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Dgn,
    DgnNomsg,
    DgnStatic,
    MonoDynamic,
    MonoFixed,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::Dgn,
        PolicyKind::DgnNomsg,
        PolicyKind::DgnStatic,
        PolicyKind::MonoDynamic,
        PolicyKind::MonoFixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Dgn => "dgn",
            PolicyKind::DgnNomsg => "dgn_nomsg",
            PolicyKind::DgnStatic => "dgn_static",
            PolicyKind::MonoDynamic => "mono_dynamic",
            PolicyKind::MonoFixed => "mono_fixed",
        }
    }

    pub fn is_modular(self) -> bool {
        matches!(self, PolicyKind::Dgn | PolicyKind::DgnNomsg | PolicyKind::DgnStatic)
    }

    pub fn uses_messages(self) -> bool {
        matches!(self, PolicyKind::Dgn | PolicyKind::DgnStatic)
    }

    /// Whether link/unlink outputs drive the morphology.
    pub fn morph_actions(self) -> bool {
        matches!(self, PolicyKind::Dgn | PolicyKind::DgnNomsg | PolicyKind::MonoDynamic)
    }

    /// Starts every episode as a pre-built straight chain that never changes.
    pub fn fixed_morphology(self) -> bool {
        !self.morph_actions()
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
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown policy kind `{s}`"))
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(z))` without overflow.
fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

fn bernoulli_log_mass(z: f64, taken: bool) -> f64 {
    if taken {
        log_sigmoid(z)
    } else {
        log_sigmoid(-z)
    }
}

fn bernoulli_entropy(z: f64) -> f64 {
    let p = sigmoid(z);
    -(p * log_sigmoid(z) + (1.0 - p) * log_sigmoid(-z))
}

fn bernoulli_kl(z_old: f64, z_new: f64) -> f64 {
    let p = sigmoid(z_old);
    p * (log_sigmoid(z_old) - log_sigmoid(z_new)) + (1.0 - p) * (log_sigmoid(-z_old) - log_sigmoid(-z_new))
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// One limb's action distribution: diagonal Gaussian over pre-squash torques
/// and two independent Bernoullis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimbDist {
    pub mu: [f64; TORQUE_DIM],
    pub log_std: [f64; TORQUE_DIM],
    pub link_logit: f64,
    pub unlink_logit: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimbAction {
    /// Pre-squash Gaussian sample.
    pub raw: [f64; TORQUE_DIM],
    /// `tanh(raw) * max_torque`.
    pub torque: [f64; TORQUE_DIM],
    pub link: bool,
    pub unlink: bool,
}

impl LimbAction {
    pub fn from_raw(raw: [f64; TORQUE_DIM], link: bool, unlink: bool, max_torque: f64) -> Self {
        LimbAction {
            raw,
            torque: raw.map(|u| u.tanh() * max_torque),
            link,
            unlink,
        }
    }
}

/// Gradient of a scalar with respect to one limb's distribution parameters
/// and value estimate.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LimbGrad {
    pub mu: [f64; TORQUE_DIM],
    pub log_std: [f64; TORQUE_DIM],
    pub link: f64,
    pub unlink: f64,
    pub value: f64,
}

impl LimbGrad {
    pub fn scale(&mut self, s: f64) {
        for k in 0..TORQUE_DIM {
            self.mu[k] *= s;
            self.log_std[k] *= s;
        }
        self.link *= s;
        self.unlink *= s;
        self.value *= s;
    }

    pub fn add_scaled(&mut self, other: &LimbGrad, s: f64) {
        for k in 0..TORQUE_DIM {
            self.mu[k] += s * other.mu[k];
            self.log_std[k] += s * other.log_std[k];
        }
        self.link += s * other.link;
        self.unlink += s * other.unlink;
        self.value += s * other.value;
    }
}

impl LimbDist {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, max_torque: f64) -> LimbAction {
        let mut raw = [0.0; TORQUE_DIM];
        for k in 0..TORQUE_DIM {
            let eps: f64 = rng.sample(StandardNormal);
            raw[k] = self.mu[k] + self.log_std[k].exp() * eps;
        }
        let link = rng.random::<f64>() < sigmoid(self.link_logit);
        let unlink = rng.random::<f64>() < sigmoid(self.unlink_logit);
        LimbAction::from_raw(raw, link, unlink, max_torque)
    }

    /// Mean torques; link/unlink taken when their probability exceeds one half.
    pub fn mode(&self, max_torque: f64) -> LimbAction {
        LimbAction::from_raw(self.mu, self.link_logit > 0.0, self.unlink_logit > 0.0, max_torque)
    }

    pub fn link_prob(&self) -> f64 {
        sigmoid(self.link_logit)
    }

    pub fn unlink_prob(&self) -> f64 {
        sigmoid(self.unlink_logit)
    }

    /// Log-density of `a`; link/unlink masses are included when `morph`.
    pub fn log_prob(&self, a: &LimbAction, morph: bool) -> f64 {
        let mut lp = 0.0;
        for k in 0..TORQUE_DIM {
            let z = (a.raw[k] - self.mu[k]) * (-self.log_std[k]).exp();
            lp += -0.5 * z * z - self.log_std[k] - HALF_LN_2PI;
        }
        if morph {
            lp += bernoulli_log_mass(self.link_logit, a.link) + bernoulli_log_mass(self.unlink_logit, a.unlink);
        }
        lp
    }

    pub fn log_prob_grad(&self, a: &LimbAction, morph: bool) -> LimbGrad {
        let mut g = LimbGrad::default();
        for k in 0..TORQUE_DIM {
            let inv_var = (-2.0 * self.log_std[k]).exp();
            let d = a.raw[k] - self.mu[k];
            g.mu[k] = d * inv_var;
            g.log_std[k] = d * d * inv_var - 1.0;
        }
        if morph {
            g.link = f64::from(u8::from(a.link)) - sigmoid(self.link_logit);
            g.unlink = f64::from(u8::from(a.unlink)) - sigmoid(self.unlink_logit);
        }
        g
    }

    pub fn entropy(&self, morph: bool) -> f64 {
        let mut h: f64 = self.log_std.iter().map(|s| s + 0.5 + HALF_LN_2PI).sum();
        if morph {
            h += bernoulli_entropy(self.link_logit) + bernoulli_entropy(self.unlink_logit);
        }
        h
    }

    pub fn entropy_grad(&self, morph: bool) -> LimbGrad {
        let mut g = LimbGrad {
            log_std: [1.0; TORQUE_DIM],
            ..LimbGrad::default()
        };
        if morph {
            let dz = |z: f64| {
                let p = sigmoid(z);
                -z * p * (1.0 - p)
            };
            g.link = dz(self.link_logit);
            g.unlink = dz(self.unlink_logit);
        }
        g
    }

    /// `KL(old || self)`.
    pub fn kl_from(&self, old: &LimbDist, morph: bool) -> f64 {
        let mut kl = 0.0;
        for k in 0..TORQUE_DIM {
            let var_old = (2.0 * old.log_std[k]).exp();
            let var_new = (2.0 * self.log_std[k]).exp();
            let dm = old.mu[k] - self.mu[k];
            kl += self.log_std[k] - old.log_std[k] + (var_old + dm * dm) / (2.0 * var_new) - 0.5;
        }
        if morph {
            kl += bernoulli_kl(old.link_logit, self.link_logit) + bernoulli_kl(old.unlink_logit, self.unlink_logit);
        }
        kl
    }

    /// Gradient of `KL(old || self)` with respect to `self`.
    pub fn kl_grad(&self, old: &LimbDist, morph: bool) -> LimbGrad {
        let mut g = LimbGrad::default();
        for k in 0..TORQUE_DIM {
            let var_old = (2.0 * old.log_std[k]).exp();
            let inv_var_new = (-2.0 * self.log_std[k]).exp();
            let dm = self.mu[k] - old.mu[k];
            g.mu[k] = dm * inv_var_new;
            g.log_std[k] = 1.0 - (var_old + dm * dm) * inv_var_new;
        }
        if morph {
            g.link = sigmoid(self.link_logit) - sigmoid(old.link_logit);
            g.unlink = sigmoid(self.unlink_logit) - sigmoid(old.unlink_logit);
        }
        g
    }
}

/// Sum of per-limb log-probabilities: the joint policy over one world.
pub fn joint_log_prob(dists: &[LimbDist], actions: &[LimbAction], morph: bool) -> f64 {
    assert_eq!(dists.len(), actions.len());
    dists.iter().zip(actions).map(|(d, a)| d.log_prob(a, morph)).sum()
}

#[derive(Debug, Clone)]
enum Trace {
    Modular {
        order: Vec<usize>,
        children: Vec<Vec<usize>>,
        nets: Vec<MlpTrace>,
    },
    Mono(MlpTrace),
}

/// Result of one forward pass over a world.
#[derive(Debug, Clone)]
pub struct PolicyOutput {
    pub dists: Vec<LimbDist>,
    pub values: Vec<f64>,
    /// Outgoing message of each limb (empty for monolithic policies).
    pub messages: Vec<[f64; MSG_DIM]>,
    /// Aggregated incoming message of each limb (empty for monolithic policies).
    pub incoming: Vec<[f64; MSG_DIM]>,
    trace: Trace,
}

/// Per-feature affine input normalization shared by every limb.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsNorm {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl Default for ObsNorm {
    fn default() -> Self {
        ObsNorm {
            mean: vec![0.0; OBS_DIM],
            inv_std: vec![1.0; OBS_DIM],
        }
    }
}

impl ObsNorm {
    /// Normalizes row-major per-limb observations.
    pub fn apply(&self, raw: &[f64]) -> Vec<f64> {
        raw.chunks(OBS_DIM)
            .flat_map(|row| {
                row.iter()
                    .zip(self.mean.iter().zip(&self.inv_std))
                    .map(|(x, (m, s))| ((x - m) * s).clamp(-OBS_CLIP, OBS_CLIP))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub kind: PolicyKind,
    pub hidden: usize,
    /// Limb count baked into a monolithic network.
    pub mono_limbs: Option<usize>,
    pub params: Vec<f64>,
    /// Applied by the control loop before [`Policy::forward`].
    pub obs_norm: ObsNorm,
    shape: MlpShape,
}

impl Policy {
    pub fn shape_for(kind: PolicyKind, hidden: usize, mono_limbs: Option<usize>) -> MlpShape {
        let (n_in, n_out) = if kind.is_modular() {
            (OBS_DIM + MSG_DIM, MODULAR_OUT)
        } else {
            let n = mono_limbs.expect("monolithic policies need a limb count");
            (OBS_DIM * n, MONO_PER_LIMB * n)
        };
        let mut sizes = vec![n_in];
        sizes.extend(std::iter::repeat_n(hidden, NUM_LAYERS - 1));
        sizes.push(n_out);
        MlpShape::new(sizes)
    }

    /// Freshly initialized policy. `num_limbs` only matters for monolithic kinds.
    pub fn new(kind: PolicyKind, num_limbs: usize, hidden: usize, seed: u64) -> Self {
        let mono_limbs = (!kind.is_modular()).then_some(num_limbs);
        let shape = Self::shape_for(kind, hidden, mono_limbs);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = shape.init(&mut rng, HIDDEN_GAIN, 1.0);
        let last = shape.num_layers() - 1;
        let off = shape.layer_offset(last);
        let n_in = shape.sizes[last];
        for row in 0..shape.output_dim() {
            let head = if kind.is_modular() {
                row
            } else {
                row % MONO_PER_LIMB
            };
            let is_policy_head = if kind.is_modular() {
                head < OUT_MSG
            } else {
                head < MONO_VALUE
            };
            if is_policy_head {
                for w in &mut params[off + row * n_in..off + (row + 1) * n_in] {
                    *w *= POLICY_HEAD_GAIN;
                }
            }
        }
        params.extend([0.5f64.ln(); TORQUE_DIM]);
        Policy {
            kind,
            hidden,
            mono_limbs,
            params,
            obs_norm: ObsNorm::default(),
            shape,
        }
    }

    pub fn from_params(
        kind: PolicyKind,
        hidden: usize,
        mono_limbs: Option<usize>,
        params: Vec<f64>,
    ) -> Result<Self, DgnError> {
        let shape = Self::shape_for(kind, hidden, if kind.is_modular() { None } else { mono_limbs });
        let expected = shape.num_params() + TORQUE_DIM;
        if params.len() != expected {
            return Err(DgnError::ParamLength {
                expected,
                got: params.len(),
            });
        }
        Ok(Policy {
            kind,
            hidden,
            mono_limbs: if kind.is_modular() { None } else { mono_limbs },
            params,
            obs_norm: ObsNorm::default(),
            shape,
        })
    }

    pub fn net_shape(&self) -> &MlpShape {
        &self.shape
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn log_std_offset(&self) -> usize {
        self.shape.num_params()
    }

    pub fn log_std(&self) -> [f64; TORQUE_DIM] {
        let o = self.log_std_offset();
        [self.params[o], self.params[o + 1], self.params[o + 2]]
    }

    /// Whether this policy can act in a world of `n` limbs.
    pub fn accepts_limbs(&self, n: usize) -> bool {
        self.mono_limbs.is_none_or(|m| m == n)
    }

    /// Evaluates every limb. `obs` is the row-major concatenation of the
    /// per-limb observations.
    pub fn forward(&self, obs: &[f64], graph: &MorphGraph) -> Result<PolicyOutput, DgnError> {
        let n = graph.num_limbs();
        if obs.len() != n * OBS_DIM {
            return Err(DgnError::ObservationLength {
                expected: n * OBS_DIM,
                got: obs.len(),
            });
        }
        if self.kind.is_modular() {
            self.forward_modular(obs, graph)
        } else {
            self.forward_mono(obs, n)
        }
    }

    fn forward_modular(&self, obs: &[f64], graph: &MorphGraph) -> Result<PolicyOutput, DgnError> {
        let n = graph.num_limbs();
        let order = graph.forest_order().map_err(|_| DgnError::NotForest)?;
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
        if self.kind.uses_messages() {
            for (c, p) in graph.parents().iter().enumerate() {
                if let Some(p) = *p {
                    children[p].push(c);
                }
            }
        }
        let log_std = self.log_std();
        let net = &self.params[..self.shape.num_params()];
        let mut messages = vec![[0.0; MSG_DIM]; n];
        let mut incoming = vec![[0.0; MSG_DIM]; n];
        let mut nets: Vec<Option<MlpTrace>> = vec![None; n];
        let mut dists = vec![
            LimbDist {
                mu: [0.0; TORQUE_DIM],
                log_std,
                link_logit: 0.0,
                unlink_logit: 0.0,
            };
            n
        ];
        let mut values = vec![0.0; n];
        let mut input = vec![0.0; OBS_DIM + MSG_DIM];
        for &i in &order {
            // Summing in a canonical order keeps relabeled graphs bit-identical.
            let mut msgs: Vec<&[f64; MSG_DIM]> = children[i].iter().map(|&c| &messages[c]).collect();
            msgs.sort_by(|a, b| {
                a.iter()
                    .zip(b.iter())
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            let mut agg = [0.0; MSG_DIM];
            for m in msgs {
                for k in 0..MSG_DIM {
                    agg[k] += m[k];
                }
            }
            input[..OBS_DIM].copy_from_slice(&obs[i * OBS_DIM..(i + 1) * OBS_DIM]);
            input[OBS_DIM..].copy_from_slice(&agg);
            incoming[i] = agg;
            let t = self.shape.forward(net, &input);
            let y = t.output();
            let d = &mut dists[i];
            d.mu.copy_from_slice(&y[..TORQUE_DIM]);
            d.link_logit = y[OUT_LINK];
            d.unlink_logit = y[OUT_UNLINK];
            for k in 0..MSG_DIM {
                messages[i][k] = y[OUT_MSG + k].tanh();
            }
            values[i] = y[OUT_VALUE];
            nets[i] = Some(t);
        }
        Ok(PolicyOutput {
            dists,
            values,
            messages,
            incoming,
            trace: Trace::Modular {
                order,
                children,
                nets: nets.into_iter().map(|t| t.expect("every limb evaluated")).collect(),
            },
        })
    }

    fn forward_mono(&self, obs: &[f64], n: usize) -> Result<PolicyOutput, DgnError> {
        let expected = self.mono_limbs.expect("monolithic policy has a limb count");
        if n != expected {
            return Err(DgnError::LimbCount { expected, got: n });
        }
        let log_std = self.log_std();
        let t = self.shape.forward(&self.params[..self.shape.num_params()], obs);
        let y = t.output();
        let mut dists = Vec::with_capacity(n);
        let mut values = Vec::with_capacity(n);
        for i in 0..n {
            let o = &y[i * MONO_PER_LIMB..(i + 1) * MONO_PER_LIMB];
            dists.push(LimbDist {
                mu: [o[0], o[1], o[2]],
                log_std,
                link_logit: o[OUT_LINK],
                unlink_logit: o[OUT_UNLINK],
            });
            values.push(o[MONO_VALUE]);
        }
        Ok(PolicyOutput {
            dists,
            values,
            messages: Vec::new(),
            incoming: Vec::new(),
            trace: Trace::Mono(t),
        })
    }

    /// Reverse-mode pass: accumulates into `grads` the gradient of a scalar
    /// whose partial derivatives with respect to each limb's outputs are
    /// `upstream`. Message gradients flow from parents into their subtrees.
    pub fn backward(&self, out: &PolicyOutput, upstream: &[LimbGrad], grads: &mut [f64]) -> Result<(), DgnError> {
        let n = out.dists.len();
        if upstream.len() != n {
            return Err(DgnError::GradientCount(upstream.len(), n));
        }
        if grads.len() != self.params.len() {
            return Err(DgnError::ParamLength {
                expected: self.params.len(),
                got: grads.len(),
            });
        }
        let net = &self.params[..self.shape.num_params()];
        let ls_off = self.log_std_offset();
        {
            let (g_net, g_ls) = grads.split_at_mut(ls_off);
            match &out.trace {
                Trace::Modular { order, children, nets } => {
                    let mut d_msg = vec![[0.0; MSG_DIM]; n];
                    let mut d_out = vec![0.0; MODULAR_OUT];
                    for &i in order.iter().rev() {
                        let u = &upstream[i];
                        d_out[..TORQUE_DIM].copy_from_slice(&u.mu);
                        d_out[OUT_LINK] = u.link;
                        d_out[OUT_UNLINK] = u.unlink;
                        for k in 0..MSG_DIM {
                            let m = out.messages[i][k];
                            d_out[OUT_MSG + k] = d_msg[i][k] * (1.0 - m * m);
                        }
                        d_out[OUT_VALUE] = u.value;
                        let d_in = self.shape.backward(net, &nets[i], &d_out, g_net);
                        for &c in &children[i] {
                            for k in 0..MSG_DIM {
                                d_msg[c][k] += d_in[OBS_DIM + k];
                            }
                        }
                    }
                }
                Trace::Mono(t) => {
                    let mut d_out = vec![0.0; MONO_PER_LIMB * n];
                    for (i, u) in upstream.iter().enumerate() {
                        let o = &mut d_out[i * MONO_PER_LIMB..(i + 1) * MONO_PER_LIMB];
                        o[..TORQUE_DIM].copy_from_slice(&u.mu);
                        o[OUT_LINK] = u.link;
                        o[OUT_UNLINK] = u.unlink;
                        o[MONO_VALUE] = u.value;
                    }
                    self.shape.backward(net, t, &d_out, g_net);
                }
            }
            for u in upstream {
                for k in 0..TORQUE_DIM {
                    g_ls[k] += u.log_std[k];
                }
            }
        }
        Ok(())
    }
}
