//! Deterministic rigid-body dynamics for capsule limbs.
//!
//! Each substep integrates external forces with semi-implicit Euler, then
//! projects ball-joint and terrain-contact constraints on positions
//! (Gauss-Seidel, a fixed number of iterations), derives velocities from the
//! position change of every corrected body, and finally applies contact
//! friction and inelastic normal response at the velocity level.
//!
//! Conventions: Y is up. A limb's axis is its body z axis; the parent-end
//! (motor) sits at `+L/2` and the child-end (free tip) at `-L/2`.

use std::sync::Arc;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::terrain::TerrainSpec;

pub type Vec3 = Vector3<f64>;
pub type Quat = UnitQuaternion<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("unknown limb index {0}")]
    UnknownLimb(usize),
    #[error("simulation fault at limb {limb}: non-finite {field}")]
    Fault { limb: usize, field: &'static str },
    #[error("timestep {got} does not match the configured substep {expected}")]
    Timestep { got: f64, expected: f64 },
}

/// Physical constants and solver settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Physics substep, seconds.
    pub dt: f64,
    /// Substeps per policy decision.
    pub substeps_per_control: usize,
    pub gravity: f64,
    /// Coulomb friction coefficient against the terrain.
    pub friction: f64,
    /// Per-axis torque limit, N*m.
    pub max_torque: f64,
    pub solver_iterations: usize,
    /// Largest anchor separation tolerated on an established joint, meters.
    pub joint_tolerance: f64,
    /// Angular speed clamp, rad/s.
    pub max_angular_speed: f64,
    /// Substeps over which a newly attached child is drawn onto the anchor.
    pub docking_substeps: u32,
    pub limb_collisions: bool,
    /// Angular drag as a fraction of the linear drag coefficient.
    pub angular_drag_ratio: f64,
    pub limb_length: f64,
    pub limb_radius: f64,
    pub limb_mass: f64,
    /// Sphere samples along each capsule axis used for terrain contact.
    pub contact_samples: usize,
    /// Rolling resistance: resisting torque per unit normal force, in limb radii.
    pub rolling_resistance: f64,
    /// Limbs whose center drops below this height are out of the world and
    /// come to rest there.
    pub kill_depth: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 0.01,
            substeps_per_control: 5,
            gravity: 9.81,
            friction: 0.8,
            max_torque: 30.0,
            solver_iterations: 10,
            joint_tolerance: 1e-3,
            max_angular_speed: 7.0,
            docking_substeps: 5,
            limb_collisions: false,
            angular_drag_ratio: 0.2,
            limb_length: 1.0,
            limb_radius: 0.1,
            limb_mass: 1.0,
            contact_samples: 11,
            rolling_resistance: 0.1,
            kill_depth: -2.0,
        }
    }
}

impl SimConfig {
    pub fn control_interval(&self) -> f64 {
        self.dt * self.substeps_per_control as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindConfig {
    pub active: bool,
    /// Upper bound of the gust magnitude, N.
    pub force_max: f64,
    pub probability_per_step: f64,
}

impl Default for WindConfig {
    fn default() -> Self {
        WindConfig {
            active: false,
            force_max: 5.0,
            probability_per_step: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvModifiers {
    pub wind: WindConfig,
    /// Linear drag, N*s/m. Zero in air.
    pub drag_coeff: f64,
}

pub const WATER_DRAG: f64 = 2.0;

impl EnvModifiers {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.drag_coeff >= 0.0) {
            return Err("drag_coeff must be non-negative".into());
        }
        if !(self.wind.force_max >= 0.0) {
            return Err("wind.force_max must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.wind.probability_per_step) {
            return Err("wind.probability_per_step must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// Rigid capsule state.
#[derive(Debug, Clone, PartialEq)]
pub struct LimbBody {
    pub id: usize,
    pub position: Vec3,
    pub orientation: Quat,
    pub lin_vel: Vec3,
    pub ang_vel: Vec3,
    pub length: f64,
    pub radius: f64,
    pub mass: f64,
    /// Principal moments in the body frame.
    pub inertia: Vec3,
}

impl LimbBody {
    pub fn new(id: usize, position: Vec3, orientation: Quat, length: f64, radius: f64, mass: f64) -> Self {
        assert!(length > 0.0 && radius > 0.0 && mass > 0.0, "limb dimensions must be positive");
        // Solid cylinder about its center.
        let transverse = mass * (3.0 * radius * radius + length * length) / 12.0;
        let axial = 0.5 * mass * radius * radius;
        LimbBody {
            id,
            position,
            orientation,
            lin_vel: Vec3::zeros(),
            ang_vel: Vec3::zeros(),
            length,
            radius,
            mass,
            inertia: Vec3::new(transverse, transverse, axial),
        }
    }

    pub fn axis(&self) -> Vec3 {
        self.orientation * Vec3::z()
    }

    /// Center-relative offset of a point at axial coordinate `s`.
    pub fn axial_offset(&self, s: f64) -> Vec3 {
        self.orientation * Vec3::new(0.0, 0.0, s)
    }

    pub fn parent_anchor(&self) -> Vec3 {
        self.position + self.axial_offset(0.5 * self.length)
    }

    pub fn child_anchor(&self) -> Vec3 {
        self.position + self.axial_offset(-0.5 * self.length)
    }

    pub fn inertia_world(&self) -> Matrix3<f64> {
        let r = self.orientation.to_rotation_matrix();
        r.matrix() * Matrix3::from_diagonal(&self.inertia) * r.matrix().transpose()
    }

    pub fn inv_inertia_world(&self) -> Matrix3<f64> {
        let r = self.orientation.to_rotation_matrix();
        let inv = Vec3::new(1.0 / self.inertia.x, 1.0 / self.inertia.y, 1.0 / self.inertia.z);
        r.matrix() * Matrix3::from_diagonal(&inv) * r.matrix().transpose()
    }

    /// Effective inverse mass of the body at lever arm `arm` along `dir`.
    fn generalized_inverse_mass(&self, arm: &Vec3, dir: &Vec3) -> f64 {
        let rn = arm.cross(dir);
        1.0 / self.mass + rn.dot(&(self.inv_inertia_world() * rn))
    }

    fn apply_position_impulse(&mut self, p: &Vec3, arm: &Vec3) {
        self.position += p / self.mass;
        let dtheta = self.inv_inertia_world() * arm.cross(p);
        let q = self.orientation.quaternion();
        let dq = Quaternion::from_imag(dtheta * 0.5) * q;
        self.orientation = UnitQuaternion::new_normalize(q + dq);
    }

    fn apply_velocity_impulse(&mut self, p: &Vec3, arm: &Vec3) {
        self.lin_vel += p / self.mass;
        self.ang_vel += self.inv_inertia_world() * arm.cross(p);
    }

    pub fn point_velocity(&self, arm: &Vec3) -> Vec3 {
        self.lin_vel + self.ang_vel.cross(arm)
    }

    pub fn kinetic_energy(&self) -> f64 {
        0.5 * self.mass * self.lin_vel.norm_squared()
            + 0.5 * self.ang_vel.dot(&(self.inertia_world() * self.ang_vel))
    }
}

/// Ball joint between the parent's motor end and the child's free end.
#[derive(Debug, Clone, PartialEq)]
pub struct JointConstraint {
    pub parent_limb: usize,
    pub child_limb: usize,
    pub compliance: f64,
    /// Substeps left before the child reaches the anchor; zero once docked.
    pub docking: u32,
}

/// A wind gust held for one control interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gust {
    /// World-frame horizontal force, N.
    pub force: Vec3,
    /// Axial coordinate of the application point.
    pub offset: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct ContactSlot {
    active: bool,
    lambda: f64,
    normal: Vec3,
}

#[derive(Debug, Clone)]
pub struct WorldState {
    pub config: SimConfig,
    pub limbs: Vec<LimbBody>,
    pub joints: Vec<JointConstraint>,
    pub terrain: Arc<TerrainSpec>,
    pub time: f64,
    pub rng: ChaCha8Rng,
    pub modifiers: EnvModifiers,
    pub gusts: Vec<Option<Gust>>,
    force_acc: Vec<Vec3>,
    torque_acc: Vec<Vec3>,
    /// Terrain contact recorded during the last substep, `[parent_end, child_end]`.
    pub end_contacts: Vec<[bool; 2]>,
}

impl WorldState {
    pub fn new(config: SimConfig, terrain: Arc<TerrainSpec>, modifiers: EnvModifiers, seed: u64) -> Self {
        WorldState {
            config,
            limbs: Vec::new(),
            joints: Vec::new(),
            terrain,
            time: 0.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            modifiers,
            gusts: Vec::new(),
            force_acc: Vec::new(),
            torque_acc: Vec::new(),
            end_contacts: Vec::new(),
        }
    }

    /// Adds a limb with the configured geometry and returns its index.
    pub fn add_limb(&mut self, position: Vec3, orientation: Quat) -> usize {
        let id = self.limbs.len();
        let c = &self.config;
        self.limbs
            .push(LimbBody::new(id, position, orientation, c.limb_length, c.limb_radius, c.limb_mass));
        self.gusts.push(None);
        self.force_acc.push(Vec3::zeros());
        self.torque_acc.push(Vec3::zeros());
        self.end_contacts.push([false; 2]);
        id
    }

    pub fn num_limbs(&self) -> usize {
        self.limbs.len()
    }

    /// True once a limb has fallen below the kill depth; it is frozen there.
    pub fn is_lost(&self, i: usize) -> bool {
        self.limbs[i].position.y < self.config.kill_depth
    }

    pub fn limb(&self, i: usize) -> Result<&LimbBody, SimError> {
        self.limbs.get(i).ok_or(SimError::UnknownLimb(i))
    }

    pub fn joint_index(&self, parent: usize, child: usize) -> Option<usize> {
        self.joints
            .iter()
            .position(|j| j.parent_limb == parent && j.child_limb == child)
    }

    /// Adds a torque expressed in the limb's body frame, clamped per axis to
    /// the motor limit. Returns the body-frame torque actually applied.
    pub fn apply_torque(&mut self, limb: usize, torque: Vec3) -> Result<Vec3, SimError> {
        let body = self.limbs.get(limb).ok_or(SimError::UnknownLimb(limb))?;
        let m = self.config.max_torque;
        let clamped = torque.map(|t| t.clamp(-m, m));
        self.torque_acc[limb] += body.orientation * clamped;
        Ok(clamped)
    }

    /// Adds an external world-frame force at the center of mass for the next substep.
    pub fn apply_force(&mut self, limb: usize, force: Vec3) -> Result<(), SimError> {
        if limb >= self.limbs.len() {
            return Err(SimError::UnknownLimb(limb));
        }
        self.force_acc[limb] += force;
        Ok(())
    }

    /// Samples fresh gusts for the coming control interval. No-op when wind is off.
    pub fn apply_wind(&mut self) {
        let wind = &self.modifiers.wind;
        if !wind.active {
            return;
        }
        let (p, fmax) = (wind.probability_per_step, wind.force_max);
        for i in 0..self.limbs.len() {
            self.gusts[i] = None;
            if self.rng.random::<f64>() < p {
                let magnitude = self.rng.random::<f64>() * fmax;
                let heading = self.rng.random::<f64>() * std::f64::consts::TAU;
                let offset = (self.rng.random::<f64>() - 0.5) * self.limbs[i].length;
                self.gusts[i] = Some(Gust {
                    force: Vec3::new(heading.cos(), 0.0, heading.sin()) * magnitude,
                    offset,
                });
            }
        }
    }

    /// Accumulates linear and angular drag for the next substep.
    pub fn apply_drag(&mut self) {
        let c = self.modifiers.drag_coeff;
        if c == 0.0 {
            return;
        }
        let ca = c * self.config.angular_drag_ratio;
        for (i, l) in self.limbs.iter().enumerate() {
            self.force_acc[i] -= l.lin_vel * c;
            self.torque_acc[i] -= l.ang_vel * ca;
        }
    }

    pub fn total_energy(&self) -> f64 {
        self.limbs
            .iter()
            .map(|l| l.kinetic_energy() + l.mass * self.config.gravity * l.position.y)
            .sum()
    }

    pub fn linear_momentum(&self, members: &[usize]) -> Vec3 {
        members
            .iter()
            .map(|&i| self.limbs[i].lin_vel * self.limbs[i].mass)
            .sum()
    }

    pub fn max_joint_separation(&self) -> f64 {
        self.joints
            .iter()
            .filter(|j| j.docking == 0)
            .map(|j| (self.limbs[j.parent_limb].parent_anchor() - self.limbs[j.child_limb].child_anchor()).norm())
            .fold(0.0, f64::max)
    }

    /// Advances the world by one physics substep.
    pub fn step(&mut self, dt: f64) -> Result<(), SimError> {
        if (dt - self.config.dt).abs() > 1e-12 {
            return Err(SimError::Timestep {
                got: dt,
                expected: self.config.dt,
            });
        }
        let h = dt;
        self.apply_drag();
        let prev: Vec<(Vec3, Quat)> = self.limbs.iter().map(|l| (l.position, l.orientation)).collect();
        self.integrate(h);
        let mut prev = prev;
        let docking = self.advance_docking(&mut prev);

        let n = self.limbs.len();
        let samples = self.config.contact_samples.max(2);
        let mut corrected = vec![false; n];
        let mut slots = vec![ContactSlot::default(); n * samples];
        for _ in 0..self.config.solver_iterations {
            self.solve_joints(h, &mut corrected);
            self.resolve_contacts(&mut slots, &mut corrected);
            if self.config.limb_collisions {
                self.solve_limb_collisions(&mut corrected);
            }
        }

        for (i, l) in self.limbs.iter_mut().enumerate() {
            if !corrected[i] {
                continue;
            }
            let (p0, q0) = prev[i];
            l.lin_vel = (l.position - p0) / h;
            let dq = l.orientation * q0.inverse();
            l.ang_vel = dq.scaled_axis() / h;
        }
        self.contact_velocities(&slots, h);
        self.match_docking_velocities(&docking);
        self.record_end_contacts(&slots);

        let max_w = self.config.max_angular_speed;
        for l in &mut self.limbs {
            let w = l.ang_vel.norm();
            if w > max_w {
                l.ang_vel *= max_w / w;
            }
        }
        for a in self.force_acc.iter_mut().chain(self.torque_acc.iter_mut()) {
            *a = Vec3::zeros();
        }
        self.time += h;
        self.check_finite()
    }

    fn integrate(&mut self, h: f64) {
        let g = Vec3::new(0.0, -self.config.gravity, 0.0);
        let max_w = self.config.max_angular_speed;
        let kill = self.config.kill_depth;
        for (i, l) in self.limbs.iter_mut().enumerate() {
            if l.position.y < kill {
                l.lin_vel = Vec3::zeros();
                l.ang_vel = Vec3::zeros();
                continue;
            }
            let mut force = self.force_acc[i];
            let mut torque = self.torque_acc[i];
            if let Some(gust) = self.gusts[i] {
                force += gust.force;
                torque += l.axial_offset(gust.offset).cross(&gust.force);
            }
            l.lin_vel += (force / l.mass + g) * h;
            l.position += l.lin_vel * h;

            let iw = l.inertia_world();
            let gyro = l.ang_vel.cross(&(iw * l.ang_vel));
            l.ang_vel += l.inv_inertia_world() * (torque - gyro) * h;
            let w = l.ang_vel.norm();
            if w > max_w {
                l.ang_vel *= max_w / w;
            }
            if w > 0.0 {
                l.orientation = Quat::from_scaled_axis(l.ang_vel * h) * l.orientation;
            }
        }
    }

    fn subtree(&self, root: usize) -> Vec<usize> {
        let mut out = vec![root];
        let mut k = 0;
        while k < out.len() {
            let p = out[k];
            for j in &self.joints {
                if j.parent_limb == p {
                    out.push(j.child_limb);
                }
            }
            k += 1;
        }
        out
    }

    /// Translates docking subtrees a fraction of the remaining gap. The
    /// shift is applied to the previous pose too, so it carries no velocity.
    /// Returns the `(parent, child)` pairs that moved.
    fn advance_docking(&mut self, prev: &mut [(Vec3, Quat)]) -> Vec<(usize, usize)> {
        let mut moved = Vec::new();
        for ji in 0..self.joints.len() {
            let j = self.joints[ji].clone();
            if j.docking == 0 {
                continue;
            }
            self.joints[ji].docking -= 1;
            let subtree = self.subtree(j.child_limb);
            if self.is_lost(j.parent_limb) || subtree.iter().any(|&k| self.is_lost(k)) {
                continue;
            }
            let gap = self.limbs[j.parent_limb].parent_anchor() - self.limbs[j.child_limb].child_anchor();
            let shift = gap / j.docking as f64;
            for k in subtree {
                self.limbs[k].position += shift;
                prev[k].0 += shift;
            }
            moved.push((j.parent_limb, j.child_limb));
        }
        moved
    }

    /// Docking is an inelastic capture: the incoming subtree takes on the
    /// motion of the parent's anchor, discarding whatever the contact solver
    /// made of the non-physical shift.
    fn match_docking_velocities(&mut self, docking: &[(usize, usize)]) {
        for &(p, c) in docking {
            let parent = &self.limbs[p];
            let v = parent.point_velocity(&parent.axial_offset(0.5 * parent.length));
            let w = parent.ang_vel;
            for k in self.subtree(c) {
                self.limbs[k].lin_vel = v;
                self.limbs[k].ang_vel = w;
            }
        }
    }

    fn solve_joints(&mut self, h: f64, corrected: &mut [bool]) {
        for ji in 0..self.joints.len() {
            let j = &self.joints[ji];
            if j.docking > 0 {
                continue;
            }
            let (pi, ci) = (j.parent_limb, j.child_limb);
            if self.is_lost(pi) || self.is_lost(ci) {
                continue;
            }
            let alpha = j.compliance / (h * h);
            let (a, b) = pair_mut(&mut self.limbs, pi, ci);
            let ra = a.axial_offset(0.5 * a.length);
            let rb = b.axial_offset(-0.5 * b.length);
            let violation = (a.position + ra) - (b.position + rb);
            if positional_correction(a, Some((b, rb)), ra, violation, alpha) > 0.0 {
                corrected[pi] = true;
                corrected[ci] = true;
            }
        }
    }

    fn sample_offsets(&self, l: &LimbBody) -> impl Iterator<Item = f64> + use<> {
        let n = self.config.contact_samples.max(2);
        let len = l.length;
        (0..n).map(move |s| -0.5 * len + len * s as f64 / (n - 1) as f64)
    }

    /// Projects capsule sample spheres out of the terrain.
    fn resolve_contacts(&mut self, slots: &mut [ContactSlot], corrected: &mut [bool]) {
        let samples = self.config.contact_samples.max(2);
        let terrain = Arc::clone(&self.terrain);
        for i in 0..self.limbs.len() {
            let offsets: Vec<f64> = self.sample_offsets(&self.limbs[i]).collect();
            let l = &mut self.limbs[i];
            for (s, off) in offsets.into_iter().enumerate() {
                let center = l.position + l.axial_offset(off);
                let Some(surface) = terrain.closest_surface(center, l.radius) else {
                    continue;
                };
                let penetration = l.radius - surface.distance;
                if penetration <= 0.0 {
                    continue;
                }
                let n = surface.normal;
                let arm = center - n * l.radius - l.position;
                let dl = positional_correction(l, None, arm, -n * penetration, 0.0);
                let slot = &mut slots[i * samples + s];
                slot.active = true;
                slot.lambda += dl;
                slot.normal = n;
                corrected[i] = true;
            }
        }
    }

    fn solve_limb_collisions(&mut self, corrected: &mut [bool]) {
        let n = self.limbs.len();
        for a in 0..n {
            for b in (a + 1)..n {
                let jointed = self.joints.iter().any(|j| {
                    (j.parent_limb == a && j.child_limb == b) || (j.parent_limb == b && j.child_limb == a)
                });
                if jointed {
                    continue;
                }
                let (la, lb) = pair_mut(&mut self.limbs, a, b);
                let (pa, pb) = closest_points_on_segments(
                    la.child_anchor(),
                    la.parent_anchor(),
                    lb.child_anchor(),
                    lb.parent_anchor(),
                );
                let d = (pa - pb).norm();
                let min_d = la.radius + lb.radius;
                if d >= min_d || d == 0.0 {
                    continue;
                }
                let n = (pa - pb) / d;
                let ra = pa - la.position;
                let rb = pb - lb.position;
                positional_correction(la, Some((lb, rb)), ra, -n * (min_d - d), 0.0);
                corrected[a] = true;
                corrected[b] = true;
            }
        }
    }

    fn contact_velocities(&mut self, slots: &[ContactSlot], h: f64) {
        let samples = self.config.contact_samples.max(2);
        let mu = self.config.friction;
        let rolling = self.config.rolling_resistance;
        for i in 0..self.limbs.len() {
            let offsets: Vec<f64> = self.sample_offsets(&self.limbs[i]).collect();
            let l = &mut self.limbs[i];
            for (s, off) in offsets.into_iter().enumerate() {
                let slot = slots[i * samples + s];
                if !slot.active {
                    continue;
                }
                let n = slot.normal;
                let arm = l.axial_offset(off) - n * l.radius;
                let mut normal_impulse = slot.lambda / h;
                let vn = n.dot(&l.point_velocity(&arm));
                if vn < 0.0 {
                    let j = -vn / l.generalized_inverse_mass(&arm, &n);
                    l.apply_velocity_impulse(&(n * j), &arm);
                    normal_impulse += j;
                }
                let vc = l.point_velocity(&arm);
                let vt = vc - n * n.dot(&vc);
                let speed = vt.norm();
                if speed > 1e-12 && mu > 0.0 {
                    let t = vt / speed;
                    let stop = speed / l.generalized_inverse_mass(&arm, &t);
                    let j = (mu * normal_impulse).min(stop);
                    l.apply_velocity_impulse(&(-t * j), &arm);
                }
                let w_t = l.ang_vel - n * n.dot(&l.ang_vel);
                let spin = w_t.norm();
                if spin > 1e-12 && rolling > 0.0 {
                    let axis = w_t / spin;
                    let inv_i = l.inv_inertia_world();
                    let stop = spin / axis.dot(&(inv_i * axis));
                    let j = (rolling * l.radius * normal_impulse).min(stop);
                    l.ang_vel -= inv_i * axis * j;
                }
            }
        }
    }

    fn record_end_contacts(&mut self, slots: &[ContactSlot]) {
        let samples = self.config.contact_samples.max(2);
        for i in 0..self.limbs.len() {
            // Sample 0 is the child end, the last sample the parent end.
            self.end_contacts[i] = [slots[i * samples + samples - 1].active, slots[i * samples].active];
        }
    }

    fn check_finite(&self) -> Result<(), SimError> {
        for l in &self.limbs {
            let checks: [(&'static str, bool); 4] = [
                ("position", l.position.iter().all(|v| v.is_finite())),
                ("orientation", l.orientation.coords.iter().all(|v| v.is_finite())),
                ("lin_vel", l.lin_vel.iter().all(|v| v.is_finite())),
                ("ang_vel", l.ang_vel.iter().all(|v| v.is_finite())),
            ];
            if let Some((field, _)) = checks.iter().find(|(_, ok)| !ok) {
                return Err(SimError::Fault { limb: l.id, field });
            }
        }
        Ok(())
    }
}

/// XPBD positional correction driving `violation` (anchor of `a` minus the
/// target point) to zero. Returns the magnitude of the Lagrange multiplier
/// increment.
fn positional_correction(
    a: &mut LimbBody,
    b: Option<(&mut LimbBody, Vec3)>,
    ra: Vec3,
    violation: Vec3,
    alpha_tilde: f64,
) -> f64 {
    let c = violation.norm();
    if c < 1e-15 {
        return 0.0;
    }
    let n = violation / c;
    let wa = a.generalized_inverse_mass(&ra, &n);
    let wb = b.as_ref().map_or(0.0, |(b, rb)| b.generalized_inverse_mass(rb, &n));
    let dl = -c / (wa + wb + alpha_tilde);
    let p = n * dl;
    a.apply_position_impulse(&p, &ra);
    if let Some((b, rb)) = b {
        b.apply_position_impulse(&(-p), &rb);
    }
    -dl
}

fn pair_mut<T>(v: &mut [T], i: usize, j: usize) -> (&mut T, &mut T) {
    assert_ne!(i, j);
    if i < j {
        let (lo, hi) = v.split_at_mut(j);
        (&mut lo[i], &mut hi[0])
    } else {
        let (lo, hi) = v.split_at_mut(i);
        (&mut hi[0], &mut lo[j])
    }
}

/// Closest points between segments `p0-p1` and `q0-q1`.
pub fn closest_points_on_segments(p0: Vec3, p1: Vec3, q0: Vec3, q1: Vec3) -> (Vec3, Vec3) {
    let d1 = p1 - p0;
    let d2 = q1 - q0;
    let r = p0 - q0;
    let a = d1.dot(&d1);
    let e = d2.dot(&d2);
    let f = d2.dot(&r);
    let (s, t);
    if a <= 1e-15 && e <= 1e-15 {
        return (p0, q0);
    }
    if a <= 1e-15 {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = d1.dot(&r);
        if e <= 1e-15 {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let mut s0 = if denom > 1e-15 { ((b * f - c * e) / denom).clamp(0.0, 1.0) } else { 0.0 };
            let mut t0 = (b * s0 + f) / e;
            if t0 < 0.0 {
                t0 = 0.0;
                s0 = (-c / a).clamp(0.0, 1.0);
            } else if t0 > 1.0 {
                t0 = 1.0;
                s0 = ((b - c) / a).clamp(0.0, 1.0);
            }
            s = s0;
            t = t0;
        }
    }
    (p0 + d1 * s, q0 + d2 * t)
}
