use std::collections::VecDeque;

use num_complex::Complex64;

use super::{Branch, Cycle};
use crate::error::{Error, Result};

/// BFS spanning tree rooted at the lowest-index bus. Incident branches are
/// visited in branch-id order, so the tree (and therefore the cycle basis
/// and angle reconstruction) is fully determined by the branch list.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanningTree {
    pub root: usize,
    /// Buses in BFS discovery order, starting with `root`.
    pub order: Vec<usize>,
    /// `(parent bus, branch id)` for every bus except the root.
    pub parent: Vec<Option<(usize, usize)>>,
    pub in_tree: Vec<bool>,
    pub depth: Vec<usize>,
}

impl SpanningTree {
    pub fn build(n_buses: usize, branches: &[Branch]) -> Result<Self> {
        let mut incident: Vec<Vec<usize>> = vec![Vec::new(); n_buses];
        for br in branches {
            incident[br.from].push(br.id);
            incident[br.to].push(br.id);
        }
        for list in &mut incident {
            list.sort_unstable();
        }

        let mut parent = vec![None; n_buses];
        let mut depth = vec![0; n_buses];
        let mut seen = vec![false; n_buses];
        let mut in_tree = vec![false; branches.len()];
        let mut order = Vec::with_capacity(n_buses);
        let mut queue = VecDeque::new();

        if n_buses == 0 {
            return Err(Error::Validation("network has no buses".into()));
        }
        seen[0] = true;
        queue.push_back(0);
        while let Some(bus) = queue.pop_front() {
            order.push(bus);
            for &k in &incident[bus] {
                let other = branches[k].other_end(bus);
                if !seen[other] {
                    seen[other] = true;
                    parent[other] = Some((bus, k));
                    depth[other] = depth[bus] + 1;
                    in_tree[k] = true;
                    queue.push_back(other);
                }
            }
        }
        if let Some(lost) = seen.iter().position(|s| !s) {
            return Err(Error::Validation(format!(
                "graph is disconnected: bus index {lost} is unreachable"
            )));
        }
        Ok(Self {
            root: 0,
            order,
            parent,
            in_tree,
            depth,
        })
    }

    /// Tree path from `bus` up to (excluding) `ancestor`, as (branch, bus moved from).
    fn climb(&self, mut bus: usize, ancestor: usize) -> Vec<(usize, usize)> {
        let mut path = Vec::new();
        while bus != ancestor {
            let (up, k) = self.parent[bus].expect("non-root bus has a parent");
            path.push((k, bus));
            bus = up;
        }
        path
    }

    fn lowest_common_ancestor(&self, mut a: usize, mut b: usize) -> usize {
        while self.depth[a] > self.depth[b] {
            a = self.parent[a].unwrap().0;
        }
        while self.depth[b] > self.depth[a] {
            b = self.parent[b].unwrap().0;
        }
        while a != b {
            a = self.parent[a].unwrap().0;
            b = self.parent[b].unwrap().0;
        }
        a
    }
}

/// Fundamental cycles of `tree`: one per non-tree branch, in branch-id order.
///
/// Each cycle starts with its generating branch traversed from → to and
/// returns to the start through the tree.
pub fn fundamental_cycles(tree: &SpanningTree, branches: &[Branch]) -> Result<Vec<Cycle>> {
    let mut cycles = Vec::new();
    for br in branches.iter().filter(|b| !tree.in_tree[b.id]) {
        let (start, end) = (br.from, br.to);
        let lca = tree.lowest_common_ancestor(start, end);

        let mut branch_ids = vec![br.id];
        let mut orientations = vec![1i8];
        // end -> lca: moving from child to parent
        for (k, from_bus) in tree.climb(end, lca) {
            branch_ids.push(k);
            orientations.push(if branches[k].from == from_bus { 1 } else { -1 });
        }
        // lca -> start: reverse of climbing from start
        let mut down = tree.climb(start, lca);
        down.reverse();
        for (k, child) in down {
            branch_ids.push(k);
            // moving parent -> child
            orientations.push(if branches[k].to == child { 1 } else { -1 });
        }

        let id = cycles.len();
        let y_scale = cycle_scaling(id, &branch_ids, branches)?;
        cycles.push(Cycle {
            id,
            branch_ids,
            orientations,
            y_scale,
        });
    }
    Ok(cycles)
}

/// Imaginary part of the combined admittance of a cycle's branches,
/// `Im(1 / Σ (r_k + j x_k))`.
pub fn cycle_scaling(cycle: usize, branch_ids: &[usize], branches: &[Branch]) -> Result<f64> {
    let z: Complex64 = branch_ids
        .iter()
        .map(|&k| Complex64::new(branches[k].r, branches[k].x))
        .sum();
    if z.norm_sqr() == 0.0 {
        return Err(Error::DegenerateCycle { cycle });
    }
    Ok(z.inv().im)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: usize, from: usize, to: usize, r: f64, x: f64) -> Branch {
        Branch::new(id, from, to, r, x, 0.0, 1.0, None)
    }

    #[test]
    fn scaling_of_three_reactances() {
        let branches: Vec<_> = (0..3).map(|k| line(k, k, (k + 1) % 3, 0.0, 0.1)).collect();
        let y = cycle_scaling(0, &[0, 1, 2], &branches).unwrap();
        assert!((y - (-10.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn scaling_of_single_branch() {
        let branches = vec![line(0, 0, 1, 0.3, 0.4)];
        let y = cycle_scaling(0, &[0], &branches).unwrap();
        assert!((y - (-1.6)).abs() < 1e-12);
    }

    #[test]
    fn scaling_of_zero_impedance_is_degenerate() {
        let branches = vec![line(0, 0, 1, 0.0, 0.1), line(1, 1, 0, 0.0, -0.1)];
        assert!(matches!(
            cycle_scaling(3, &[0, 1], &branches),
            Err(Error::DegenerateCycle { cycle: 3 })
        ));
    }

    #[test]
    fn triangle_has_one_closed_cycle() {
        let branches = vec![line(0, 0, 1, 0.0, 0.1), line(1, 1, 2, 0.0, 0.1), line(2, 0, 2, 0.0, 0.1)];
        let tree = SpanningTree::build(3, &branches).unwrap();
        let cycles = fundamental_cycles(&tree, &branches).unwrap();
        assert_eq!(cycles.len(), 1);
        assert_eq!(cycles[0].branch_ids.len(), 3);
        assert!(cycles[0].is_closed(&branches));
    }

    #[test]
    fn star_has_no_cycles() {
        let branches = vec![line(0, 0, 1, 0.0, 0.1), line(1, 0, 2, 0.0, 0.1), line(2, 0, 3, 0.0, 0.1)];
        let tree = SpanningTree::build(4, &branches).unwrap();
        assert!(fundamental_cycles(&tree, &branches).unwrap().is_empty());
    }

    #[test]
    fn disconnected_graph_rejected() {
        let branches = vec![line(0, 0, 1, 0.0, 0.1), line(1, 2, 3, 0.0, 0.1)];
        assert!(matches!(SpanningTree::build(4, &branches), Err(Error::Validation(_))));
    }
}
