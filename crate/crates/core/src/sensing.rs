//! Per-limb local observations.

use crate::morphology::{nearest_attachable, MorphGraph};
use crate::sim::{Vec3, WorldState};

pub const DEPTH_GRID: usize = 9;
pub const DEPTH_SPACING: f64 = 0.5;
pub const DEPTH_CAP: f64 = 5.0;
/// Distance from a surface under which a capsule end counts as touching it.
pub const TOUCH_THRESHOLD: f64 = 1e-2;
pub const OBS_DIM: usize = 3 + 3 + 4 + 3 + 3 + 3 + 3 + DEPTH_GRID * DEPTH_GRID;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Touch {
    Floor,
    Limb,
    Nothing,
}

impl Touch {
    pub fn one_hot(self) -> [f64; 3] {
        match self {
            Touch::Floor => [1.0, 0.0, 0.0],
            Touch::Limb => [0.0, 1.0, 0.0],
            Touch::Nothing => [0.0, 0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub position: [f64; 3],
    pub lin_vel: [f64; 3],
    /// Unit quaternion `(x, y, z, w)` with `w >= 0`.
    pub orientation: [f64; 4],
    pub ang_vel: [f64; 3],
    /// Offset from this limb's parent-end to the nearest attachable child-end.
    pub nearest_rel: [f64; 3],
    pub touch_parent: Touch,
    pub touch_child: Touch,
    /// Row-major over (x, z) offsets; surface height relative to the limb
    /// center divided by `DEPTH_CAP`, `-1` where there is no surface.
    pub depth: [f64; DEPTH_GRID * DEPTH_GRID],
}

impl Observation {
    pub fn write_to(&self, out: &mut [f64]) {
        assert_eq!(out.len(), OBS_DIM);
        let mut k = 0;
        let mut put = |vals: &[f64]| {
            out[k..k + vals.len()].copy_from_slice(vals);
            k += vals.len();
        };
        put(&self.position);
        put(&self.lin_vel);
        put(&self.orientation);
        put(&self.ang_vel);
        put(&self.nearest_rel);
        put(&self.touch_parent.one_hot());
        put(&self.touch_child.one_hot());
        put(&self.depth);
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![0.0; OBS_DIM];
        self.write_to(&mut v);
        v
    }
}

fn end_touch(world: &WorldState, end: Vec3, recorded: bool, docked: bool) -> Touch {
    if docked {
        return Touch::Limb;
    }
    if recorded {
        return Touch::Floor;
    }
    let r = world.config.limb_radius;
    match world.terrain.closest_surface(end, r + TOUCH_THRESHOLD) {
        Some(s) if s.distance - r <= TOUCH_THRESHOLD => Touch::Floor,
        _ => Touch::Nothing,
    }
}

/// Local sensor reading of one limb.
pub fn observe(world: &WorldState, graph: &MorphGraph, limb: usize) -> Observation {
    let l = &world.limbs[limb];
    let q = l.orientation.coords;
    let sign = if q.w < 0.0 { -1.0 } else { 1.0 };

    let nearest_rel = nearest_attachable(world, graph, limb)
        .map(|j| world.limbs[j].child_anchor() - l.parent_anchor())
        .unwrap_or_else(Vec3::zeros);

    let has_children = world.joints.iter().any(|j| j.parent_limb == limb);
    let has_parent = graph.parent_of(limb).is_some();
    let [floor_parent, floor_child] = world.end_contacts[limb];

    let mut depth = [0.0; DEPTH_GRID * DEPTH_GRID];
    let half = (DEPTH_GRID / 2) as f64;
    for a in 0..DEPTH_GRID {
        for b in 0..DEPTH_GRID {
            let x = l.position.x + (a as f64 - half) * DEPTH_SPACING;
            let z = l.position.z + (b as f64 - half) * DEPTH_SPACING;
            let rel = match world.terrain.height_query(x, z) {
                Some(h) => (h - l.position.y).clamp(-DEPTH_CAP, DEPTH_CAP),
                None => -DEPTH_CAP,
            };
            depth[a * DEPTH_GRID + b] = rel / DEPTH_CAP;
        }
    }

    Observation {
        position: l.position.into(),
        lin_vel: l.lin_vel.into(),
        orientation: [sign * q.x, sign * q.y, sign * q.z, sign * q.w],
        ang_vel: l.ang_vel.into(),
        nearest_rel: nearest_rel.into(),
        touch_parent: end_touch(world, l.parent_anchor(), floor_parent, has_children),
        touch_child: end_touch(world, l.child_anchor(), floor_child, has_parent),
        depth,
    }
}

pub fn observe_all(world: &WorldState, graph: &MorphGraph) -> Vec<Observation> {
    (0..world.num_limbs()).map(|i| observe(world, graph, i)).collect()
}
