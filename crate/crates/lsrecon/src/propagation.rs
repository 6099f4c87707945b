//! Layer-by-layer front propagation of a minimized quantity carrying
//! reference points, specialized to (a) the unsigned distance to the
//! point cloud and (b) spreading reinitialized signed values.
//!
//! Each initialized leaf stores a reference point `q_j`; a sweep offers
//! every neighbor `i` of the frontier the candidate `|x_i - q_k|` and
//! commits improvements, inheriting the winning reference point. Values
//! can only decrease (in magnitude), so the sweep count is bounded by
//! the grid diameter.

use rayon::prelude::*;
use std::collections::HashSet;

use crate::cloud::{LeafBins, PointCloud};
use crate::error::PropagationError;
use crate::grid::{Adjacency, Forest, NeighborTable, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropagationMode {
    /// Unsigned distance; every leaf stays updatable.
    Distance,
    /// Signed values from frozen seeds; magnitudes compete, signs are
    /// pinned to the sign recorded at initialization where available.
    SignedReinit,
}

#[derive(Debug, Clone)]
pub struct PropagationState {
    pub mode: PropagationMode,
    /// `g_j` per node id; uninitialized leaves hold `+∞`.
    pub value: Vec<f64>,
    /// Reference point `q_j` per initialized leaf.
    pub reference: Vec<[f64; 3]>,
    /// Current frontier `D^m`.
    pub frontier: Vec<NodeId>,
    /// Leaves excluded from updates (signed-reinit mode).
    pub frozen: Vec<bool>,
    /// Sign pinned per leaf (`0` = free, takes the propagating side's sign).
    sign0: Vec<i8>,
}

impl PropagationState {
    fn empty(forest: &Forest, mode: PropagationMode) -> Self {
        let n = forest.node_count();
        PropagationState {
            mode,
            value: vec![f64::INFINITY; n],
            reference: vec![[f64::NAN; 3]; n],
            frontier: Vec::new(),
            frozen: vec![false; n],
            sign0: vec![0; n],
        }
    }

    /// Exact distance in the leaves that contain cloud points: `g_j` is
    /// the distance from the leaf center to its nearest contained point.
    pub fn init_distance_exact(
        forest: &Forest,
        bins: &LeafBins,
        cloud: &PointCloud,
    ) -> Result<Self, PropagationError> {
        let mut st = PropagationState::empty(forest, PropagationMode::Distance);
        let dim = forest.dim();
        for (leaf, idxs) in bins.occupied() {
            let c = forest.center(leaf);
            let mut best = f64::INFINITY;
            let mut bq = [f64::NAN; 3];
            for &pi in idxs {
                let q = cloud.point(pi);
                let d = dist(&c, &q, dim);
                if d < best {
                    best = d;
                    bq = q;
                }
            }
            st.value[leaf as usize] = best;
            st.reference[leaf as usize] = bq;
            st.frontier.push(leaf);
        }
        if st.frontier.is_empty() {
            return Err(PropagationError::EmptySeed);
        }
        st.frontier.sort_unstable();
        Ok(st)
    }

    /// Signed seeds with reference points; `sign_hints` pins the sign of
    /// not-yet-initialized leaves (entries may be 0 = free).
    pub fn init_signed(
        forest: &Forest,
        seeds: &[(NodeId, f64, [f64; 3])],
        sign_hints: &[i8],
    ) -> Result<Self, PropagationError> {
        if seeds.is_empty() {
            return Err(PropagationError::EmptySeed);
        }
        let mut st = PropagationState::empty(forest, PropagationMode::SignedReinit);
        let n = st.sign0.len();
        st.sign0.copy_from_slice(&sign_hints[..n]);
        for &(leaf, v, q) in seeds {
            st.value[leaf as usize] = v;
            st.reference[leaf as usize] = q;
            st.frozen[leaf as usize] = true;
            st.sign0[leaf as usize] = if v < 0.0 { -1 } else { 1 };
            st.frontier.push(leaf);
        }
        st.frontier.sort_unstable();
        st.frontier.dedup();
        Ok(st)
    }

    /// One layer-synchronous sweep. Returns the number of updated
    /// leaves; the frontier is replaced by the updated set.
    pub fn sweep(&mut self, forest: &Forest, mask: Option<&[bool]>) -> usize {
        self.sweep_with(forest, mask, None)
    }

    fn sweep_with(
        &mut self,
        forest: &Forest,
        mask: Option<&[bool]>,
        table: Option<&NeighborTable>,
    ) -> usize {
        let dim = forest.dim();
        let nbrs = |id: NodeId| nbrs_of(forest, table, id);
        let in_frontier: HashSet<NodeId> = self.frontier.iter().copied().collect();
        let mut closure: Vec<NodeId> = Vec::new();
        let mut seen = HashSet::new();
        for &k in &self.frontier {
            for &i in nbrs(k).iter() {
                if self.frozen[i as usize] {
                    continue;
                }
                if let Some(m) = mask {
                    if !m[i as usize] {
                        continue;
                    }
                }
                if seen.insert(i) {
                    closure.push(i);
                }
            }
        }
        closure.sort_unstable();

        // candidate pass over an immutable snapshot
        let cands: Vec<(NodeId, f64, [f64; 3], i8)> = closure
            .par_iter()
            .filter_map(|&i| {
                let xi = forest.center(i);
                let mut best = f64::INFINITY;
                let mut bq = [f64::NAN; 3];
                let mut bsign = 0i8;
                for &k in nbrs(i).iter() {
                    if !in_frontier.contains(&k) {
                        continue;
                    }
                    let q = self.reference[k as usize];
                    let d = dist(&xi, &q, dim);
                    if d < best {
                        best = d;
                        bq = q;
                        bsign = if self.value[k as usize] < 0.0 { -1 } else { 1 };
                    }
                }
                best.is_finite().then_some((i, best, bq, bsign))
            })
            .collect();

        let mut next = Vec::new();
        for (i, g, q, src_sign) in cands {
            let ii = i as usize;
            let improved = match self.mode {
                PropagationMode::Distance => g < self.value[ii],
                PropagationMode::SignedReinit => g < self.value[ii].abs(),
            };
            if improved {
                self.value[ii] = match self.mode {
                    PropagationMode::Distance => g,
                    PropagationMode::SignedReinit => {
                        let s = if self.sign0[ii] != 0 {
                            self.sign0[ii]
                        } else {
                            src_sign
                        };
                        if s < 0 {
                            -g
                        } else {
                            g
                        }
                    }
                };
                self.reference[ii] = q;
                next.push(i);
            }
        }
        let updated = next.len();
        self.frontier = next;
        updated
    }

    /// Sweeps until the frontier empties. `mask`, when given, restricts
    /// which leaves may receive values.
    pub fn propagate(
        &mut self,
        forest: &Forest,
        mask: Option<&[bool]>,
    ) -> Result<(), PropagationError> {
        let leaves = forest.leaves();
        // sweeps requery the same adjacencies over and over; one CSR
        // table over the reachable set amortizes the probe cost
        let reachable: Vec<NodeId> = match mask {
            None => leaves,
            Some(m) => {
                let mut v: Vec<NodeId> = leaves
                    .into_iter()
                    .filter(|&id| m[id as usize])
                    .collect();
                v.extend(self.frontier.iter().copied().filter(|&id| !m[id as usize]));
                v
            }
        };
        let table = forest.neighbor_table(&reachable, Adjacency::EdgeCorner);
        self.propagate_with(forest, mask, &table)
    }

    /// [`PropagationState::propagate`] with a caller-provided table
    /// covering (at least) the seeds and every maskable leaf.
    pub fn propagate_with(
        &mut self,
        forest: &Forest,
        mask: Option<&[bool]>,
        table: &NeighborTable,
    ) -> Result<(), PropagationError> {
        let limit = forest.leaves().len() + 1;
        let mut sweeps = 0;
        while !self.frontier.is_empty() {
            self.sweep_with(forest, mask, Some(table));
            sweeps += 1;
            if sweeps > limit {
                return Err(PropagationError::NonTermination(sweeps));
            }
        }
        Ok(())
    }
}

fn nbrs_of<'a>(
    forest: &'a Forest,
    table: Option<&'a NeighborTable>,
    id: NodeId,
) -> std::borrow::Cow<'a, [NodeId]> {
    match table.and_then(|t| t.get(id)) {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(forest.neighbors(id, Adjacency::EdgeCorner)),
    }
}

fn dist(a: &[f64; 3], b: &[f64; 3], dim: usize) -> f64 {
    (0..dim).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt()
}

/// Convenience: full unsigned-distance field to the cloud, plus the
/// final reference points.
pub fn distance_field(
    forest: &Forest,
    cloud: &PointCloud,
) -> Result<PropagationState, PropagationError> {
    let bins = cloud
        .bin_points(forest)
        .map_err(|_| PropagationError::EmptySeed)?;
    let mut st = PropagationState::init_distance_exact(forest, &bins, cloud)?;
    st.propagate(forest, None)?;
    Ok(st)
}

/// [`distance_field`] with a caller-provided table over all leaves.
pub fn distance_field_with(
    forest: &Forest,
    cloud: &PointCloud,
    table: &NeighborTable,
) -> Result<PropagationState, PropagationError> {
    let bins = cloud
        .bin_points(forest)
        .map_err(|_| PropagationError::EmptySeed)?;
    let mut st = PropagationState::init_distance_exact(forest, &bins, cloud)?;
    st.propagate_with(forest, None, table)?;
    Ok(st)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::PointCloud;
    use crate::grid::{Domain, Forest};

    fn cloud2(pts: &[[f64; 2]]) -> PointCloud {
        PointCloud::from_scaled(2, pts.iter().map(|p| [p[0], p[1], 0.0]).collect())
    }

    #[test]
    fn single_point_exact_everywhere() {
        let f = Forest::uniform(Domain::new(2, 1.2, 6).unwrap(), 4);
        let q = [0.31, -0.17];
        let cloud = cloud2(&[q]);
        let st = distance_field(&f, &cloud).unwrap();
        for id in f.leaves() {
            let c = f.center(id);
            let want = dist(&c, &[q[0], q[1], 0.0], 2);
            assert!(
                (st.value[id as usize] - want).abs() < 1e-12,
                "leaf {id}: {} vs {}",
                st.value[id as usize],
                want
            );
        }
    }

    #[test]
    fn two_points_brute_force_oracle() {
        let f = Forest::uniform(Domain::new(2, 1.2, 6).unwrap(), 5);
        let pts = [[-0.62, 0.4], [0.55, -0.3]];
        let cloud = cloud2(&pts);
        let st = distance_field(&f, &cloud).unwrap();
        let dx_min = f.domain().dx_min();
        let mut exact_hits = 0usize;
        let leaves = f.leaves();
        for &id in &leaves {
            let c = f.center(id);
            let brute = pts
                .iter()
                .map(|p| dist(&c, &[p[0], p[1], 0.0], 2))
                .fold(f64::INFINITY, f64::min);
            let g = st.value[id as usize];
            assert!(g >= brute - 1e-12, "lower bound violated");
            assert!(g - brute <= dx_min, "leaf {id}: g {g} brute {brute}");
            if (g - brute).abs() < 1e-12 {
                exact_hits += 1;
            }
        }
        assert!(exact_hits as f64 >= 0.99 * leaves.len() as f64);
    }

    #[test]
    fn one_sweep_reaches_only_the_neighbor_closure() {
        let f = Forest::uniform(Domain::new(2, 1.2, 6).unwrap(), 4);
        let cloud = cloud2(&[[0.0, 0.0], [0.02, 0.0]]);
        let bins = cloud.bin_points(&f).unwrap();
        let mut st = PropagationState::init_distance_exact(&f, &bins, &cloud).unwrap();
        let seeds: HashSet<NodeId> = st.frontier.iter().copied().collect();
        let mut closure: HashSet<NodeId> = seeds.clone();
        for &s in &seeds {
            closure.extend(f.neighbors(s, Adjacency::EdgeCorner));
        }
        st.sweep(&f, None);
        for id in f.leaves() {
            let finite = st.value[id as usize].is_finite();
            assert_eq!(finite, closure.contains(&id), "leaf {id}");
        }
    }

    #[test]
    fn monotone_and_terminates() {
        let f = Forest::uniform(Domain::new(2, 1.2, 6).unwrap(), 5);
        let cloud = cloud2(&[[0.9, 0.9], [-0.9, -0.9], [0.9, -0.9]]);
        let bins = cloud.bin_points(&f).unwrap();
        let mut st = PropagationState::init_distance_exact(&f, &bins, &cloud).unwrap();
        let mut prev = st.value.clone();
        let mut sweeps = 0;
        while !st.frontier.is_empty() {
            st.sweep(&f, None);
            for (a, b) in st.value.iter().zip(&prev) {
                assert!(a <= b, "distance increased");
            }
            prev = st.value.clone();
            sweeps += 1;
            assert!(sweeps < 100);
        }
        for id in f.leaves() {
            assert!(st.value[id as usize].is_finite());
        }
    }

    #[test]
    fn signed_mode_freezes_seeds_and_keeps_signs() {
        let f = Forest::uniform(Domain::new(2, 1.2, 6).unwrap(), 4);
        // seed plane x = 0: negative west, positive east
        let mut seeds = Vec::new();
        let mut hints = vec![0i8; f.node_count()];
        for id in f.leaves() {
            let c = f.center(id);
            hints[id as usize] = if c[0] < 0.0 { -1 } else { 1 };
            if c[0].abs() < 0.2 {
                let v = c[0]; // exact signed distance to the plane
                seeds.push((id, v, [0.0, c[1], 0.0]));
            }
        }
        let seed_vals: Vec<(NodeId, f64)> = seeds.iter().map(|&(i, v, _)| (i, v)).collect();
        let mut st = PropagationState::init_signed(&f, &seeds, &hints).unwrap();
        st.propagate(&f, None).unwrap();
        for (id, v) in seed_vals {
            assert_eq!(st.value[id as usize].to_bits(), v.to_bits(), "seed moved");
        }
        for id in f.leaves() {
            let c = f.center(id);
            let v = st.value[id as usize];
            assert!(v.is_finite());
            assert_eq!(v < 0.0, c[0] < 0.0, "sign flipped at {c:?}");
            assert!((v.abs() - c[0].abs()).abs() < f.domain().dx_min() + 1e-12);
        }
    }

    #[test]
    fn masked_propagation_stays_inside_mask() {
        let f = Forest::uniform(Domain::new(2, 1.2, 6).unwrap(), 4);
        let cloud = cloud2(&[[0.0, 0.0], [0.05, 0.0]]);
        let bins = cloud.bin_points(&f).unwrap();
        let mut st = PropagationState::init_distance_exact(&f, &bins, &cloud).unwrap();
        let mut mask = vec![false; f.node_count()];
        for id in f.leaves() {
            let c = f.center(id);
            if c[0].abs() < 0.5 && c[1].abs() < 0.5 {
                mask[id as usize] = true;
            }
        }
        st.propagate(&f, Some(&mask)).unwrap();
        for id in f.leaves() {
            let c = f.center(id);
            if c[0].abs() > 0.6 || c[1].abs() > 0.6 {
                assert!(st.value[id as usize].is_infinite());
            }
        }
    }

    #[test]
    fn empty_seed_errors() {
        let f = Forest::uniform(Domain::new(2, 1.2, 4).unwrap(), 2);
        assert!(matches!(
            PropagationState::init_signed(&f, &[], &vec![0; f.node_count()]),
            Err(PropagationError::EmptySeed)
        ));
    }

    #[test]
    fn single_point_exact_3d() {
        let f = Forest::uniform(Domain::new(3, 1.2, 4).unwrap(), 3);
        let q = [0.2, -0.1, 0.4];
        let cloud = PointCloud::from_scaled(3, vec![q]);
        let st = distance_field(&f, &cloud).unwrap();
        for id in f.leaves() {
            let c = f.center(id);
            let want = dist(&c, &q, 3);
            assert!((st.value[id as usize] - want).abs() < 1e-12);
        }
    }
}
