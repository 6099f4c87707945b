//! Graded quadtree/octree over a cubic domain `[-M, M]^n`.
//!
//! Leaves tile the domain exactly. Point location follows a half-open
//! convention (lower-closed, upper-open) with the domain's top faces
//! closed, so every in-domain point belongs to exactly one leaf.

use std::fmt;
use std::io::Write;

use crate::error::GridError;

/// Index of a node in the forest arena. Stable across refinement;
/// invalidated only by [`Forest::compact`].
pub type NodeId = u32;

const NO_NODE: u32 = u32::MAX;

/// The cubic computational domain `[-M, M]^n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Domain {
    dim: usize,
    half_width: f64,
    max_level: u32,
}

impl Domain {
    pub fn new(dim: usize, half_width: f64, max_level: u32) -> Result<Self, GridError> {
        if dim != 2 && dim != 3 {
            return Err(GridError::BadDimension(dim));
        }
        if !(half_width > 1.0) {
            return Err(GridError::BadHalfWidth(half_width));
        }
        Ok(Domain {
            dim,
            half_width,
            max_level,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn max_level(&self) -> u32 {
        self.max_level
    }

    /// Edge length of the whole domain.
    pub fn extent(&self) -> f64 {
        2.0 * self.half_width
    }

    /// Edge length of a cell at `level`.
    pub fn edge_at(&self, level: u32) -> f64 {
        self.extent() / (1u64 << level) as f64
    }

    /// Minimum edge length at the maximum refinement level.
    pub fn dx_min(&self) -> f64 {
        self.edge_at(self.max_level)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x[..self.dim]
            .iter()
            .all(|&c| -self.half_width <= c && c <= self.half_width)
    }

    pub fn children_per_node(&self) -> usize {
        1 << self.dim
    }
}

#[derive(Debug, Clone)]
struct Node {
    level: u8,
    center: [f64; 3],
    parent: u32,
    /// Index of the first of `2^n` contiguous children, or `NO_NODE`.
    first_child: u32,
    alive: bool,
}

impl Node {
    fn is_leaf(&self) -> bool {
        self.alive && self.first_child == NO_NODE
    }
}

/// Outcome of a refinement request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Refined {
    /// Ids of the new children (first `2^n` entries valid).
    Children([NodeId; 8]),
    /// The leaf was already at the maximum level; nothing happened.
    AtMaxLevel,
}

/// Neighbor adjacency mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Adjacency {
    /// Leaves sharing a face (an edge in 2D).
    EdgeOnly,
    /// Leaves sharing any boundary point.
    EdgeCorner,
}

/// Flat CSR snapshot of neighbor lists, built by
/// [`Forest::neighbor_table`]. Valid until the forest changes shape.
#[derive(Debug, Clone)]
pub struct NeighborTable {
    /// `(start, len)` into `flat` per node id; `start == NO_NODE` marks
    /// ids the table was not built for.
    spans: Vec<(u32, u32)>,
    flat: Vec<NodeId>,
}

impl NeighborTable {
    /// The precomputed list, or `None` when `id` was not requested.
    pub fn get(&self, id: NodeId) -> Option<&[NodeId]> {
        let (s, l) = self.spans[id as usize];
        (s != NO_NODE).then(|| &self.flat[s as usize..(s + l) as usize])
    }
}

/// Arena-backed quadtree (2D) / octree (3D).
#[derive(Debug, Clone)]
pub struct Forest {
    domain: Domain,
    nodes: Vec<Node>,
}

impl Forest {
    /// A forest consisting of the single root cell covering the domain.
    pub fn new(domain: Domain) -> Self {
        Forest {
            domain,
            nodes: vec![Node {
                level: 0,
                center: [0.0; 3],
                parent: NO_NODE,
                first_child: NO_NODE,
                alive: true,
            }],
        }
    }

    /// Uniformly refined forest at `level`.
    pub fn uniform(domain: Domain, level: u32) -> Self {
        let mut f = Forest::new(domain);
        for _ in 0..level {
            let leaves = f.leaves();
            for id in leaves {
                f.refine_structural(id).unwrap();
            }
        }
        f
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn dim(&self) -> usize {
        self.domain.dim
    }

    /// Total arena size (including internal and dead nodes). Fields
    /// indexed by `NodeId` must have at least this length.
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.nodes[id as usize].is_leaf()
    }

    pub fn level(&self, id: NodeId) -> u32 {
        self.nodes[id as usize].level as u32
    }

    pub fn center(&self, id: NodeId) -> [f64; 3] {
        self.nodes[id as usize].center
    }

    pub fn edge(&self, id: NodeId) -> f64 {
        self.domain.edge_at(self.level(id))
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        let p = self.nodes[id as usize].parent;
        (p != NO_NODE).then_some(p)
    }

    /// Children of an internal node, in Z-order.
    pub fn children(&self, id: NodeId) -> Option<Vec<NodeId>> {
        let fc = self.nodes[id as usize].first_child;
        (fc != NO_NODE).then(|| {
            (0..self.domain.children_per_node() as u32)
                .map(|k| fc + k)
                .collect()
        })
    }

    /// Sequence of child indices from the root down to `id`.
    pub fn path(&self, id: NodeId) -> Vec<u8> {
        let mut rev = Vec::new();
        let mut cur = id;
        while let Some(p) = self.parent(cur) {
            let fc = self.nodes[p as usize].first_child;
            rev.push((cur - fc) as u8);
            cur = p;
        }
        rev.reverse();
        rev
    }

    /// All leaves in deterministic Z-order (depth-first child order).
    pub fn leaves(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![0u32];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id as usize];
            if !node.alive {
                continue;
            }
            if node.first_child == NO_NODE {
                out.push(id);
            } else {
                let m = self.domain.children_per_node() as u32;
                for k in (0..m).rev() {
                    stack.push(node.first_child + k);
                }
            }
        }
        out
    }

    /// Finest and coarsest leaf level currently present.
    pub fn level_bounds(&self) -> (u32, u32) {
        let mut lo = u32::MAX;
        let mut hi = 0;
        for id in self.leaves() {
            let l = self.level(id);
            lo = lo.min(l);
            hi = hi.max(l);
        }
        (lo, hi)
    }

    /// The unique leaf whose half-open cell contains `x`.
    pub fn locate_point(&self, x: &[f64]) -> Result<NodeId, GridError> {
        if !self.domain.contains(x) {
            return Err(GridError::OutOfDomain {
                point: [
                    x[0],
                    x[1],
                    if self.domain.dim == 3 { x[2] } else { 0.0 },
                ],
            });
        }
        let mut id = 0u32;
        loop {
            let node = &self.nodes[id as usize];
            if node.first_child == NO_NODE {
                return Ok(id);
            }
            let mut k = 0u32;
            for a in 0..self.domain.dim {
                if x[a] >= node.center[a] {
                    k |= 1 << a;
                }
            }
            id = node.first_child + k;
        }
    }

    /// Structural refinement: replaces the leaf by `2^n` children.
    /// Caller is responsible for growing any fields to `node_count()`
    /// and assigning child values.
    pub fn refine_structural(&mut self, id: NodeId) -> Result<Refined, GridError> {
        if !self.is_leaf(id) {
            return Err(GridError::NotALeaf(id));
        }
        let level = self.level(id);
        if level >= self.domain.max_level {
            return Ok(Refined::AtMaxLevel);
        }
        let m = self.domain.children_per_node();
        let child_edge = self.domain.edge_at(level + 1);
        let center = self.center(id);
        let first = self.nodes.len() as u32;
        for k in 0..m {
            let mut c = center;
            for a in 0..self.domain.dim {
                let s = if (k >> a) & 1 == 1 { 0.5 } else { -0.5 };
                c[a] += s * child_edge;
            }
            self.nodes.push(Node {
                level: (level + 1) as u8,
                center: c,
                parent: id,
                first_child: NO_NODE,
                alive: true,
            });
        }
        self.nodes[id as usize].first_child = first;
        let mut ids = [NO_NODE; 8];
        for (k, slot) in ids.iter_mut().enumerate().take(m) {
            *slot = first + k as u32;
        }
        Ok(Refined::Children(ids))
    }

    /// Glues a complete sibling family back into its parent. Field
    /// values at the parent are set to the mean of the children values.
    pub fn coarsen_family(
        &mut self,
        children: &[NodeId],
        fields: &mut [&mut Vec<f64>],
    ) -> Result<NodeId, GridError> {
        let m = self.domain.children_per_node();
        if children.len() != m {
            return Err(GridError::IncompleteFamily);
        }
        let parent = self.nodes[children[0] as usize].parent;
        if parent == NO_NODE {
            return Err(GridError::IncompleteFamily);
        }
        let first = self.nodes[parent as usize].first_child;
        let mut sorted = children.to_vec();
        sorted.sort_unstable();
        for (k, &c) in sorted.iter().enumerate() {
            if c != first + k as u32 || !self.is_leaf(c) {
                return Err(GridError::IncompleteFamily);
            }
        }
        for f in fields.iter_mut() {
            let mean = sorted.iter().map(|&c| f[c as usize]).sum::<f64>() / m as f64;
            f[parent as usize] = mean;
        }
        for &c in &sorted {
            self.nodes[c as usize].alive = false;
        }
        self.nodes[parent as usize].first_child = NO_NODE;
        Ok(parent)
    }

    /// Leaves adjacent to `id`. With 2:1 balance in effect the result
    /// is exhaustive; `id` itself is never included.
    pub fn neighbors(&self, id: NodeId, mode: Adjacency) -> Vec<NodeId> {
        let dim = self.domain.dim;
        let center = self.center(id);
        let edge = self.edge(id);
        let depth = 0.25 * self.domain.dx_min();
        let mut out: Vec<NodeId> = Vec::with_capacity(32);

        let dirs: &[[i32; 3]] = match dim {
            2 => &DIRS_2D,
            _ => &DIRS_3D,
        };
        let mut probe = [0.0f64; 3];
        for d in dirs {
            let nz = (0..dim).filter(|&a| d[a] != 0).count();
            if mode == Adjacency::EdgeOnly && nz != 1 {
                continue;
            }
            // Tangential quarter-point probes cover half-size neighbors.
            let mut zero_axes = [0usize; 3];
            let mut nzero = 0;
            for a in 0..dim {
                if d[a] == 0 {
                    zero_axes[nzero] = a;
                    nzero += 1;
                }
            }
            let combos = 1usize << nzero;
            for c in 0..combos {
                for a in 0..dim {
                    probe[a] = center[a];
                }
                for a in 0..dim {
                    if d[a] != 0 {
                        probe[a] = center[a] + d[a] as f64 * (0.5 * edge + depth);
                    }
                }
                for (bit, &a) in zero_axes[..nzero].iter().enumerate() {
                    let s = if (c >> bit) & 1 == 1 { 0.25 } else { -0.25 };
                    probe[a] = center[a] + s * edge;
                }
                if let Ok(n) = self.locate_point(&probe[..dim]) {
                    if n != id && !out.contains(&n) {
                        out.push(n);
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Leaves whose level is more than one below that of some adjacent
    /// leaf (edge+corner adjacency). Refining these (repeatedly) is
    /// exactly the 2:1 balancing operation.
    pub fn balance_violations(&self) -> Vec<NodeId> {
        let dim = self.domain.dim;
        let dirs: &[[i32; 3]] = match dim {
            2 => &DIRS_2D,
            _ => &DIRS_3D,
        };
        let mut marked = Vec::new();
        let mut probe = [0.0f64; 3];
        for id in self.leaves() {
            let level = self.level(id);
            if level < 2 {
                continue; // a level-0/1 leaf cannot see a 2-coarser one
            }
            let center = self.center(id);
            let edge = self.edge(id);
            for d in dirs {
                for a in 0..dim {
                    probe[a] = center[a] + d[a] as f64 * 0.75 * edge;
                }
                if let Ok(n) = self.locate_point(&probe[..dim]) {
                    if self.level(n) + 1 < level && !marked.contains(&n) {
                        marked.push(n);
                    }
                }
            }
        }
        marked.sort_unstable();
        marked
    }

    /// Exhaustive 2:1 balance check over all adjacent leaf pairs.
    pub fn is_balanced(&self, mode: Adjacency) -> bool {
        for id in self.leaves() {
            let l = self.level(id);
            for n in self.neighbors_unbalanced(id, mode) {
                if self.level(n).abs_diff(l) > 1 {
                    return false;
                }
            }
        }
        true
    }

    /// Adjacency scan valid on arbitrary (possibly unbalanced) forests:
    /// probes at `dx_min / 2` spacing along the whole leaf boundary.
    /// Exhaustive but slower than [`Forest::neighbors`]; meant for
    /// verification.
    pub fn neighbors_unbalanced(&self, id: NodeId, mode: Adjacency) -> Vec<NodeId> {
        let dim = self.domain.dim;
        let center = self.center(id);
        let edge = self.edge(id);
        let depth = 0.25 * self.domain.dx_min();
        let step = 0.5 * self.domain.dx_min();
        let m = (edge / step).round() as usize;
        let dirs: &[[i32; 3]] = match dim {
            2 => &DIRS_2D,
            _ => &DIRS_3D,
        };
        let mut out = Vec::new();
        let mut probe = [0.0f64; 3];
        for d in dirs {
            let nz = (0..dim).filter(|&a| d[a] != 0).count();
            if mode == Adjacency::EdgeOnly && nz != 1 {
                continue;
            }
            let zero_axes: Vec<usize> = (0..dim).filter(|&a| d[a] == 0).collect();
            let combos = m.pow(zero_axes.len() as u32);
            for c in 0..combos {
                for a in 0..dim {
                    if d[a] != 0 {
                        probe[a] = center[a] + d[a] as f64 * (0.5 * edge + depth);
                    }
                }
                let mut rem = c;
                for &a in &zero_axes {
                    let k = rem % m;
                    rem /= m;
                    probe[a] = center[a] - 0.5 * edge + (k as f64 + 0.5) * step;
                }
                if let Ok(n) = self.locate_point(&probe[..dim]) {
                    if n != id && !out.contains(&n) {
                        out.push(n);
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Precomputed neighbor lists for `leaves` in flat CSR layout; a
    /// loop that requeries adjacency (e.g. propagation sweeps) builds
    /// this once per grid instead of paying the probe cost repeatedly.
    pub fn neighbor_table(&self, leaves: &[NodeId], mode: Adjacency) -> NeighborTable {
        use rayon::prelude::*;
        let lists: Vec<Vec<NodeId>> = leaves
            .par_iter()
            .map(|&id| self.neighbors(id, mode))
            .collect();
        let mut spans = vec![(NO_NODE, 0u32); self.node_count()];
        let mut flat = Vec::with_capacity(lists.iter().map(Vec::len).sum());
        for (&id, l) in leaves.iter().zip(&lists) {
            spans[id as usize] = (flat.len() as u32, l.len() as u32);
            flat.extend_from_slice(l);
        }
        NeighborTable { spans, flat }
    }

    /// Sum of leaf volumes; equals `(2M)^n` exactly up to roundoff.
    pub fn total_volume(&self) -> f64 {
        self.leaves()
            .iter()
            .map(|&id| self.edge(id).powi(self.domain.dim as i32))
            .sum()
    }

    /// Rebuilds the arena dropping dead nodes and remaps the given
    /// fields. Returns the old-id -> new-id map (dead entries `NO_NODE`).
    pub fn compact(&mut self, fields: &mut [&mut Vec<f64>]) -> Vec<u32> {
        let mut map = vec![NO_NODE; self.nodes.len()];
        let mut new_nodes: Vec<Node> = Vec::new();
        // BFS keeps sibling families contiguous.
        let mut queue = std::collections::VecDeque::from([0u32]);
        map[0] = 0;
        new_nodes.push(self.nodes[0].clone());
        while let Some(old) = queue.pop_front() {
            let fc = self.nodes[old as usize].first_child;
            if fc == NO_NODE {
                continue;
            }
            let m = self.domain.children_per_node() as u32;
            let new_first = new_nodes.len() as u32;
            for k in 0..m {
                map[(fc + k) as usize] = new_first + k;
                new_nodes.push(self.nodes[(fc + k) as usize].clone());
                queue.push_back(fc + k);
            }
            let new_self = map[old as usize];
            new_nodes[new_self as usize].first_child = new_first;
        }
        for node in new_nodes.iter_mut() {
            if node.parent != NO_NODE {
                node.parent = map[node.parent as usize];
            }
        }
        for f in fields.iter_mut() {
            let mut nf = vec![f64::INFINITY; new_nodes.len()];
            for (old, &new) in map.iter().enumerate() {
                if new != NO_NODE {
                    nf[new as usize] = f[old];
                }
            }
            **f = nf;
        }
        self.nodes = new_nodes;
        map
    }

    /// Debug dump as a VTK legacy unstructured grid, one cell per leaf.
    pub fn write_vtk<W: Write>(
        &self,
        w: &mut W,
        fields: &[(&str, &[f64])],
    ) -> std::io::Result<()> {
        let dim = self.domain.dim;
        let leaves = self.leaves();
        let corners = 1usize << dim;
        writeln!(w, "# vtk DataFile Version 3.0")?;
        writeln!(w, "adaptive forest")?;
        writeln!(w, "ASCII")?;
        writeln!(w, "DATASET UNSTRUCTURED_GRID")?;
        writeln!(w, "POINTS {} double", leaves.len() * corners)?;
        for &id in &leaves {
            let c = self.center(id);
            let h = 0.5 * self.edge(id);
            for k in 0..corners {
                let mut p = [0.0f64; 3];
                for a in 0..dim {
                    p[a] = c[a] + if (k >> a) & 1 == 1 { h } else { -h };
                }
                writeln!(w, "{} {} {}", p[0], p[1], p[2])?;
            }
        }
        writeln!(w, "CELLS {} {}", leaves.len(), leaves.len() * (corners + 1))?;
        for (i, _) in leaves.iter().enumerate() {
            write!(w, "{}", corners)?;
            for k in 0..corners {
                write!(w, " {}", i * corners + k)?;
            }
            writeln!(w)?;
        }
        writeln!(w, "CELL_TYPES {}", leaves.len())?;
        let cell_type = if dim == 2 { 8 } else { 11 }; // VTK_PIXEL / VTK_VOXEL
        for _ in &leaves {
            writeln!(w, "{}", cell_type)?;
        }
        writeln!(w, "CELL_DATA {}", leaves.len())?;
        writeln!(w, "SCALARS level int 1")?;
        writeln!(w, "LOOKUP_TABLE default")?;
        for &id in &leaves {
            writeln!(w, "{}", self.level(id))?;
        }
        for (name, data) in fields {
            writeln!(w, "SCALARS {} double 1", name)?;
            writeln!(w, "LOOKUP_TABLE default")?;
            for &id in &leaves {
                writeln!(w, "{}", data[id as usize])?;
            }
        }
        Ok(())
    }
}

impl fmt::Display for Forest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (lo, hi) = self.level_bounds();
        write!(
            f,
            "Forest({}D, M={}, leaves={}, levels {}..={})",
            self.domain.dim,
            self.domain.half_width,
            self.leaves().len(),
            lo,
            hi
        )
    }
}

const DIRS_2D: [[i32; 3]; 8] = [
    [-1, -1, 0],
    [0, -1, 0],
    [1, -1, 0],
    [-1, 0, 0],
    [1, 0, 0],
    [-1, 1, 0],
    [0, 1, 0],
    [1, 1, 0],
];

const DIRS_3D: [[i32; 3]; 26] = {
    let mut dirs = [[0i32; 3]; 26];
    let mut i = 0;
    let mut k = 0;
    while k < 27 {
        let d = [(k % 3) as i32 - 1, ((k / 3) % 3) as i32 - 1, (k / 9) as i32 - 1];
        if d[0] != 0 || d[1] != 0 || d[2] != 0 {
            dirs[i] = d;
            i += 1;
        }
        k += 1;
    }
    dirs
};

#[cfg(test)]
mod tests {
    use super::*;

    fn grid2(level: u32) -> Forest {
        Forest::uniform(Domain::new(2, 1.2, 6).unwrap(), level)
    }

    #[test]
    fn locate_uniform_level2() {
        let f = grid2(2);
        let id = f.locate_point(&[0.01, 0.01]).unwrap();
        let c = f.center(id);
        // quadrant centers sit at odd multiples of M/4
        assert!((c[0] - 0.3).abs() < 1e-14 && (c[1] - 0.3).abs() < 1e-14);
    }

    #[test]
    fn locate_face_tiebreak() {
        let f = grid2(2);
        // exactly on the internal face x = 0: non-negative side wins
        let id = f.locate_point(&[0.0, 0.1]).unwrap();
        assert!(f.center(id)[0] > 0.0);
    }

    #[test]
    fn locate_out_of_domain() {
        let f = grid2(1);
        assert!(matches!(
            f.locate_point(&[2.4, 0.0]),
            Err(GridError::OutOfDomain { .. })
        ));
        // domain upper corner is closed
        assert!(f.locate_point(&[1.2, 1.2]).is_ok());
    }

    #[test]
    fn tiling_random_points() {
        let f = grid2(3);
        let vol = f.total_volume();
        assert!((vol - 2.4f64.powi(2)).abs() / vol.abs() < 1e-12);
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let x = [rng.random_range(-1.2..1.2), rng.random_range(-1.2..1.2)];
            f.locate_point(&x).unwrap();
        }
    }

    #[test]
    fn neighbor_counts_uniform() {
        let f = grid2(2);
        // interior leaf
        let id = f.locate_point(&[0.01, 0.01]).unwrap();
        assert_eq!(f.neighbors(id, Adjacency::EdgeCorner).len(), 8);
        assert_eq!(f.neighbors(id, Adjacency::EdgeOnly).len(), 4);
        // corner leaf
        let id = f.locate_point(&[-1.19, -1.19]).unwrap();
        assert_eq!(f.neighbors(id, Adjacency::EdgeCorner).len(), 3);
    }

    #[test]
    fn neighbors_mixed_levels() {
        // refine one quadrant of a level-1 grid: its half-size children
        // are both neighbors of the coarse leaf across the face
        let mut f = grid2(1);
        let fine = f.locate_point(&[0.6, 0.6]).unwrap();
        f.refine_structural(fine).unwrap();
        let coarse = f.locate_point(&[-0.6, 0.6]).unwrap();
        let n = f.neighbors(coarse, Adjacency::EdgeCorner);
        // expects: two half-size leaves on the east face, the two coarse
        // leaves below, = 4 total
        assert_eq!(n.len(), 4);
        let east: Vec<_> = n
            .iter()
            .filter(|&&i| f.center(i)[0] > 0.0 && f.center(i)[1] > 0.0)
            .collect();
        assert_eq!(east.len(), 2);
        for &&i in &east {
            assert_eq!(f.level(i), 2);
        }
    }

    #[test]
    fn neighbors_symmetric() {
        let mut f = grid2(2);
        let id = f.locate_point(&[0.6, 0.6]).unwrap();
        f.refine_structural(id).unwrap();
        for mode in [Adjacency::EdgeOnly, Adjacency::EdgeCorner] {
            for id in f.leaves() {
                for n in f.neighbors(id, mode) {
                    assert!(
                        f.neighbors(n, mode).contains(&id),
                        "asymmetric: {id} -> {n}"
                    );
                }
            }
        }
    }

    #[test]
    fn refine_and_coarsen_roundtrip() {
        let mut f = grid2(2);
        let id = f.locate_point(&[0.01, 0.01]).unwrap();
        let mut field = vec![3.5f64; f.node_count()];
        let children = match f.refine_structural(id).unwrap() {
            Refined::Children(c) => c,
            _ => panic!(),
        };
        field.resize(f.node_count(), 3.5);
        let kids: Vec<NodeId> = children[..4].to_vec();
        // sibling centers average back to the parent center
        let mean: Vec<f64> = (0..2)
            .map(|a| kids.iter().map(|&c| f.center(c)[a]).sum::<f64>() / 4.0)
            .collect();
        let pc = f.center(id);
        assert!((mean[0] - pc[0]).abs() < 1e-15 && (mean[1] - pc[1]).abs() < 1e-15);
        // values (1,2,3,4) -> parent 2.5
        for (i, &c) in kids.iter().enumerate() {
            field[c as usize] = (i + 1) as f64;
        }
        let parent = f.coarsen_family(&kids, &mut [&mut field]).unwrap();
        assert_eq!(parent, id);
        assert_eq!(field[parent as usize], 2.5);
        assert!(f.is_leaf(parent));
    }

    #[test]
    fn coarsen_incomplete_family_rejected() {
        let mut f = grid2(2);
        let a = f.locate_point(&[0.01, 0.01]).unwrap();
        let b = f.locate_point(&[-0.9, -0.9]).unwrap();
        let mut field = vec![0.0; f.node_count()];
        assert!(matches!(
            f.coarsen_family(&[a, b, a, b], &mut [&mut field]),
            Err(GridError::IncompleteFamily)
        ));
    }

    #[test]
    fn refine_past_max_level() {
        let mut f = Forest::uniform(Domain::new(2, 1.2, 2).unwrap(), 2);
        let id = f.leaves()[0];
        assert_eq!(f.refine_structural(id).unwrap(), Refined::AtMaxLevel);
    }

    #[test]
    fn balance_violation_scan() {
        // refine one cell down to level 5 next to level-2 leaves
        let mut f = grid2(2);
        let mut id = f.locate_point(&[0.9, 0.9]).unwrap();
        for _ in 0..3 {
            f.refine_structural(id).unwrap();
            id = f.locate_point(&[0.9, 0.9]).unwrap();
        }
        assert!(!f.is_balanced(Adjacency::EdgeCorner));
        let mut guard = 0;
        loop {
            let v = f.balance_violations();
            if v.is_empty() {
                break;
            }
            for id in v {
                f.refine_structural(id).unwrap();
            }
            guard += 1;
            assert!(guard < 16);
        }
        assert!(f.is_balanced(Adjacency::EdgeCorner));
        // idempotent
        assert!(f.balance_violations().is_empty());
        let vol = f.total_volume();
        assert!((vol - 2.4f64.powi(2)).abs() / vol < 1e-12);
    }

    #[test]
    fn compact_preserves_geometry() {
        let mut f = grid2(2);
        let id = f.locate_point(&[0.01, 0.01]).unwrap();
        let mut field: Vec<f64> = (0..f.node_count()).map(|i| i as f64).collect();
        let kids = match f.refine_structural(id).unwrap() {
            Refined::Children(c) => c[..4].to_vec(),
            _ => panic!(),
        };
        field.resize(f.node_count(), -1.0);
        f.coarsen_family(&kids, &mut [&mut field]).unwrap();
        let before: Vec<([f64; 3], f64)> = f
            .leaves()
            .iter()
            .map(|&l| (f.center(l), field[l as usize]))
            .collect();
        f.compact(&mut [&mut field]);
        let after: Vec<([f64; 3], f64)> = f
            .leaves()
            .iter()
            .map(|&l| (f.center(l), field[l as usize]))
            .collect();
        assert_eq!(before, after);
        assert_eq!(f.node_count(), 1 + 4 + 16);
    }

    #[test]
    fn locate_3d_and_volume() {
        let f = Forest::uniform(Domain::new(3, 1.2, 4).unwrap(), 2);
        let id = f.locate_point(&[0.01, -0.5, 1.0]).unwrap();
        let c = f.center(id);
        assert!(c[0] > 0.0 && c[1] < 0.0 && c[2] > 0.0);
        let interior = f.locate_point(&[0.01, 0.01, 0.01]).unwrap();
        assert_eq!(f.neighbors(interior, Adjacency::EdgeCorner).len(), 26);
        assert_eq!(f.neighbors(interior, Adjacency::EdgeOnly).len(), 6);
        let vol = f.total_volume();
        assert!((vol - 2.4f64.powi(3)).abs() / vol < 1e-12);
    }
}
