//! The attachment forest and the link/unlink actions that mutate it.
//!
//! An edge `(child, parent)` means the child's free end is docked onto the
//! parent's motor end. Every edge has exactly one matching
//! [`JointConstraint`] in the physics world.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{JointConstraint, WorldState};

/// Attachment radius around a parent-end, in limb lengths.
pub const MAGNETIC_RANGE_FACTOR: f64 = 1.33;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MorphError {
    #[error("unknown limb index {0}")]
    UnknownLimb(usize),
    #[error("morphology contains a cycle through limb {0}")]
    Cycle(usize),
    #[error("limb count mismatch: graph has {graph}, world has {world}")]
    CountMismatch { graph: usize, world: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MorphGraph {
    parent: Vec<Option<usize>>,
}

impl MorphGraph {
    pub fn new(num_limbs: usize) -> Self {
        MorphGraph {
            parent: vec![None; num_limbs],
        }
    }

    /// Builds a graph from a parent table, rejecting cycles and bad indices.
    pub fn from_parents(parent: Vec<Option<usize>>) -> Result<Self, MorphError> {
        let n = parent.len();
        if let Some(&bad) = parent.iter().flatten().find(|&&p| p >= n) {
            return Err(MorphError::UnknownLimb(bad));
        }
        let g = MorphGraph { parent };
        g.forest_order()?;
        Ok(g)
    }

    /// A straight chain where limb `k + 1` hangs off limb `k`.
    pub fn chain(num_limbs: usize) -> Self {
        MorphGraph {
            parent: (0..num_limbs).map(|k| k.checked_sub(1)).collect(),
        }
    }

    pub fn num_limbs(&self) -> usize {
        self.parent.len()
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parent
    }

    pub fn parent_of(&self, limb: usize) -> Option<usize> {
        self.parent[limb]
    }

    pub fn children_of(&self, limb: usize) -> Vec<usize> {
        (0..self.parent.len()).filter(|&c| self.parent[c] == Some(limb)).collect()
    }

    /// Edges as `(child, parent)`, ordered by child index.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.parent
            .iter()
            .enumerate()
            .filter_map(|(c, p)| p.map(|p| (c, p)))
            .collect()
    }

    pub fn num_edges(&self) -> usize {
        self.parent.iter().flatten().count()
    }

    pub fn root_of(&self, mut limb: usize) -> usize {
        let mut hops = 0;
        while let Some(p) = self.parent[limb] {
            limb = p;
            hops += 1;
            assert!(hops <= self.parent.len(), "cycle in morphology");
        }
        limb
    }

    /// Component label per limb: the root index of its tree.
    pub fn component_labels(&self) -> Vec<usize> {
        (0..self.parent.len()).map(|i| self.root_of(i)).collect()
    }

    pub fn same_component(&self, a: usize, b: usize) -> bool {
        self.root_of(a) == self.root_of(b)
    }

    /// Partition of all limbs. Members ascend; components are ordered by
    /// their smallest member.
    pub fn connected_components(&self) -> Vec<Vec<usize>> {
        let labels = self.component_labels();
        let mut by_root: Vec<Option<usize>> = vec![None; self.parent.len()];
        let mut out: Vec<Vec<usize>> = Vec::new();
        for (i, &root) in labels.iter().enumerate() {
            match by_root[root] {
                Some(k) => out[k].push(i),
                None => {
                    by_root[root] = Some(out.len());
                    out.push(vec![i]);
                }
            }
        }
        out
    }

    /// Every limb, ordered so that each appears after all of its children.
    pub fn forest_order(&self) -> Result<Vec<usize>, MorphError> {
        let n = self.parent.len();
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (c, p) in self.parent.iter().enumerate() {
            if let Some(p) = *p {
                children[p].push(c);
            }
        }
        let mut order = Vec::with_capacity(n);
        let mut stack: Vec<(usize, bool)> = Vec::new();
        for root in (0..n).filter(|&i| self.parent[i].is_none()) {
            stack.push((root, false));
            while let Some((node, expanded)) = stack.pop() {
                if expanded {
                    order.push(node);
                    continue;
                }
                stack.push((node, true));
                for &c in children[node].iter().rev() {
                    stack.push((c, false));
                }
            }
        }
        if order.len() != n {
            let mut seen = vec![false; n];
            for &i in &order {
                seen[i] = true;
            }
            let culprit = (0..n).find(|&i| !seen[i]).unwrap_or(0);
            return Err(MorphError::Cycle(culprit));
        }
        Ok(order)
    }

    /// Limbs of `component` ordered leaves first, root last.
    pub fn topological_order(&self, component: &[usize]) -> Result<Vec<usize>, MorphError> {
        let order = self.forest_order()?;
        let mut member = vec![false; self.parent.len()];
        for &i in component {
            *member.get_mut(i).ok_or(MorphError::UnknownLimb(i))? = true;
        }
        Ok(order.into_iter().filter(|&i| member[i]).collect())
    }

    pub fn is_forest(&self) -> bool {
        self.forest_order().is_ok()
    }

    fn link(&mut self, child: usize, parent: usize) {
        debug_assert!(self.parent[child].is_none());
        self.parent[child] = Some(parent);
    }

    fn unlink(&mut self, child: usize) -> Option<usize> {
        self.parent[child].take()
    }
}

pub fn magnetic_range(world: &WorldState) -> f64 {
    MAGNETIC_RANGE_FACTOR * world.config.limb_length
}

/// The limb whose free child-end is closest to `limb`'s parent-end within
/// magnetic range, excluding limbs already docked, limbs in the same
/// component and limbs lost below the kill depth. Ties go to the lower index.
pub fn nearest_attachable(world: &WorldState, graph: &MorphGraph, limb: usize) -> Option<usize> {
    if world.is_lost(limb) {
        return None;
    }
    let anchor = world.limbs[limb].parent_anchor();
    let range = magnetic_range(world);
    let root = graph.root_of(limb);
    let mut best: Option<(f64, usize)> = None;
    for (j, other) in world.limbs.iter().enumerate() {
        if j == limb || graph.parent_of(j).is_some() || graph.root_of(j) == root || world.is_lost(j) {
            continue;
        }
        let d = (other.child_anchor() - anchor).norm();
        if d <= range && best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, j));
        }
    }
    best.map(|(_, j)| j)
}

/// Docks the nearest eligible child onto `parent_limb`'s motor end. The new
/// joint starts in the docking phase, so the child is drawn in over the
/// next few substeps instead of teleporting.
pub fn attach(world: &mut WorldState, graph: &mut MorphGraph, parent_limb: usize) -> Option<usize> {
    if parent_limb >= graph.num_limbs() {
        return None;
    }
    let child = nearest_attachable(world, graph, parent_limb)?;
    if graph.same_component(child, parent_limb) {
        return None;
    }
    graph.link(child, parent_limb);
    world.joints.push(JointConstraint {
        parent_limb,
        child_limb: child,
        compliance: 0.0,
        docking: world.config.docking_substeps,
    });
    Some(child)
}

/// Undocks `child_limb` from its parent, if any. Velocities are untouched.
pub fn detach(world: &mut WorldState, graph: &mut MorphGraph, child_limb: usize) -> Option<usize> {
    if child_limb >= graph.num_limbs() {
        return None;
    }
    let parent = graph.unlink(child_limb)?;
    let idx = world
        .joint_index(parent, child_limb)
        .expect("graph edge without a physics joint");
    world.joints.remove(idx);
    Some(parent)
}

/// Builds a docked (non-docking) joint for an existing edge; used when a
/// morphology is constructed rather than assembled.
pub fn link_prebuilt(world: &mut WorldState, graph: &mut MorphGraph, child: usize, parent: usize) -> Result<(), MorphError> {
    let n = graph.num_limbs();
    if child >= n || parent >= n {
        return Err(MorphError::UnknownLimb(child.max(parent)));
    }
    if graph.parent_of(child).is_some() || graph.same_component(child, parent) {
        return Err(MorphError::Cycle(child));
    }
    graph.link(child, parent);
    world.joints.push(JointConstraint {
        parent_limb: parent,
        child_limb: child,
        compliance: 0.0,
        docking: 0,
    });
    Ok(())
}

/// True when graph edges and physics joints correspond one-to-one.
pub fn joints_match_graph(world: &WorldState, graph: &MorphGraph) -> bool {
    if world.joints.len() != graph.num_edges() {
        return false;
    }
    let mut seen = vec![false; graph.num_limbs()];
    for j in &world.joints {
        if j.child_limb >= seen.len() || seen[j.child_limb] || graph.parent_of(j.child_limb) != Some(j.parent_limb) {
            return false;
        }
        seen[j.child_limb] = true;
    }
    true
}
