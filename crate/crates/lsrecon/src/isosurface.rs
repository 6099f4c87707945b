//! Zero-isosurface extraction: the field is resampled through the leaf
//! polynomials onto a uniform virtual grid at `Δx_min` over the band's
//! bounding box, then contoured by marching squares (2D polylines) or
//! marching cubes (3D triangles). Vertices are welded per grid edge, so
//! closed surfaces come out watertight.

use std::collections::HashMap;
use std::io::Write;

use rayon::prelude::*;

use crate::cloud::ScaleTransform;
use crate::grid::{Forest, NodeId};
use crate::mc_tables::{EDGE_TABLE, TRI_TABLE};
use crate::recon::{CwenoParams, Operator, PolyCache};

/// Triangle mesh in original (pre-rescale) coordinates.
#[derive(Debug, Clone, Default)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

impl Mesh {
    /// Undirected edge -> number of incident triangles.
    pub fn edge_counts(&self) -> HashMap<(u32, u32), usize> {
        let mut counts = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                *counts.entry(key).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Every edge shared by exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        !self.triangles.is_empty() && self.edge_counts().values().all(|&c| c == 2)
    }

    pub fn write_obj<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for v in &self.vertices {
            writeln!(w, "v {} {} {}", v[0], v[1], v[2])?;
        }
        for t in &self.triangles {
            writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
        Ok(())
    }
}

/// Closed/open polylines in original coordinates; closed loops repeat
/// their first point at the end.
#[derive(Debug, Clone, Default)]
pub struct Polylines {
    pub loops: Vec<Vec<[f64; 2]>>,
}

impl Polylines {
    pub fn all_closed(&self) -> bool {
        !self.loops.is_empty() && self.loops.iter().all(|l| l.len() > 2 && l[0] == *l.last().unwrap())
    }

    /// CSV with `x,y` columns, loops separated by blank lines.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "x,y")?;
        for (i, l) in self.loops.iter().enumerate() {
            if i > 0 {
                writeln!(w)?;
            }
            for p in l {
                writeln!(w, "{},{}", p[0], p[1])?;
            }
        }
        Ok(())
    }
}

/// Uniform virtual sampling grid covering the given leaves.
struct VirtualGrid {
    lo: [f64; 3],
    dx: f64,
    n: [usize; 3],
    values: Vec<f64>,
}

impl VirtualGrid {
    fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.n[1] + j) * self.n[0] + i
    }

    fn node_pos(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.lo[0] + i as f64 * self.dx,
            self.lo[1] + j as f64 * self.dx,
            self.lo[2] + k as f64 * self.dx,
        ]
    }

    fn value(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.node_index(i, j, k)]
    }
}

fn resample(forest: &Forest, field: &[f64], leaves: &[NodeId], operator: Operator) -> VirtualGrid {
    let dim = forest.dim();
    let m = forest.domain().half_width();
    let dx = forest.domain().dx_min();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &id in leaves {
        let c = forest.center(id);
        let h = 0.5 * forest.edge(id);
        for a in 0..dim {
            lo[a] = lo[a].min(c[a] - h);
            hi[a] = hi[a].max(c[a] + h);
        }
    }
    for a in 0..dim {
        lo[a] = (lo[a] - dx).max(-m);
        hi[a] = (hi[a] + dx).min(m);
    }
    let mut n = [1usize; 3];
    for a in 0..dim {
        n[a] = ((hi[a] - lo[a]) / dx).ceil() as usize + 1;
    }

    let cache = PolyCache::build(forest, field, leaves, operator, CwenoParams::default());
    let grid = VirtualGrid {
        lo,
        dx,
        n,
        values: Vec::new(),
    };
    let total = n[0] * n[1] * n[2];
    let values: Vec<f64> = (0..total)
        .into_par_iter()
        .map(|idx| {
            let i = idx % n[0];
            let j = (idx / n[0]) % n[1];
            let k = idx / (n[0] * n[1]);
            let mut x = grid.node_pos(i, j, k);
            for xa in x.iter_mut().take(dim) {
                *xa = xa.clamp(-m, m);
            }
            let leaf = forest.locate_point(&x[..dim]).expect("node in domain");
            // polynomial accuracy only matters near the front, which is
            // covered by the cache; elsewhere the cell value suffices
            match cache.cached(leaf) {
                Some(p) => p.evaluate(&x),
                None => field[leaf as usize],
            }
        })
        .collect();
    VirtualGrid { values, ..grid }
}

/// Marching squares over the resampled band. Output in original
/// coordinates via `transform`.
pub fn extract_contour_2d(
    forest: &Forest,
    field: &[f64],
    leaves: &[NodeId],
    operator: Operator,
    transform: &ScaleTransform,
) -> Polylines {
    let g = resample(forest, field, leaves, operator);
    let (nx, ny) = (g.n[0], g.n[1]);
    let inside = |v: f64| v > 0.0;

    // welded vertices keyed by the crossed grid edge
    let mut verts: Vec<[f64; 2]> = Vec::new();
    let mut edge_vert: HashMap<(usize, usize), u32> = HashMap::new();
    let mut vertex_on = |a: (usize, usize, f64, [f64; 3]), b: (usize, usize, f64, [f64; 3])| -> u32 {
        let ka = a.1 * nx + a.0;
        let kb = b.1 * nx + b.0;
        let key = (ka.min(kb), ka.max(kb));
        if let Some(&v) = edge_vert.get(&key) {
            return v;
        }
        let t = a.2 / (a.2 - b.2);
        let p = [
            a.3[0] + t * (b.3[0] - a.3[0]),
            a.3[1] + t * (b.3[1] - a.3[1]),
        ];
        verts.push(p);
        let id = (verts.len() - 1) as u32;
        edge_vert.insert(key, id);
        id
    };

    let mut segments: Vec<(u32, u32)> = Vec::new();
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            // corners counterclockwise from lower-left
            let c = [
                (i, j, g.value(i, j, 0), g.node_pos(i, j, 0)),
                (i + 1, j, g.value(i + 1, j, 0), g.node_pos(i + 1, j, 0)),
                (i + 1, j + 1, g.value(i + 1, j + 1, 0), g.node_pos(i + 1, j + 1, 0)),
                (i, j + 1, g.value(i, j + 1, 0), g.node_pos(i, j + 1, 0)),
            ];
            let mut idx = 0usize;
            for (b, corner) in c.iter().enumerate() {
                if inside(corner.2) {
                    idx |= 1 << b;
                }
            }
            if idx == 0 || idx == 15 {
                continue;
            }
            // cell edges with a sign change
            let sides = [(0usize, 1usize), (1, 2), (2, 3), (3, 0)];
            let mut crossings: Vec<(usize, u32)> = Vec::new();
            for (s, &(a, b)) in sides.iter().enumerate() {
                if inside(c[a].2) != inside(c[b].2) {
                    crossings.push((s, vertex_on(c[a], c[b])));
                }
            }
            match crossings.len() {
                2 => segments.push((crossings[0].1, crossings[1].1)),
                4 => {
                    // ambiguous saddle: split by the center average
                    let center = (c[0].2 + c[1].2 + c[2].2 + c[3].2) / 4.0;
                    // crossings are on sides 0,1,2,3 in order
                    let pair = |s1: usize, s2: usize, list: &[(usize, u32)]| {
                        let f = |s: usize| list.iter().find(|e| e.0 == s).unwrap().1;
                        (f(s1), f(s2))
                    };
                    if inside(center) == inside(c[0].2) {
                        segments.push(pair(0, 3, &crossings));
                        segments.push(pair(1, 2, &crossings));
                    } else {
                        segments.push(pair(0, 1, &crossings));
                        segments.push(pair(2, 3, &crossings));
                    }
                }
                _ => unreachable!("marching squares: odd crossing count"),
            }
        }
    }

    // chain segments into polylines
    let mut adj: HashMap<u32, Vec<(u32, usize)>> = HashMap::new();
    for (s, &(a, b)) in segments.iter().enumerate() {
        adj.entry(a).or_default().push((b, s));
        adj.entry(b).or_default().push((a, s));
    }
    let mut used = vec![false; segments.len()];
    let mut loops = Vec::new();
    for start_seg in 0..segments.len() {
        if used[start_seg] {
            continue;
        }
        used[start_seg] = true;
        let (a, b) = segments[start_seg];
        let mut chain = vec![a, b];
        let mut cur = b;
        loop {
            let next = adj
                .get(&cur)
                .and_then(|es| es.iter().find(|&&(_, s)| !used[s]).copied());
            match next {
                Some((v, s)) => {
                    used[s] = true;
                    chain.push(v);
                    cur = v;
                    if v == a {
                        break;
                    }
                }
                None => break, // open chain (touches the sampling box)
            }
        }
        loops.push(
            chain
                .into_iter()
                .map(|v| {
                    let p = verts[v as usize];
                    let o = transform.invert(&[p[0], p[1], 0.0]);
                    [o[0], o[1]]
                })
                .collect(),
        );
    }
    Polylines { loops }
}

/// Marching cubes over the resampled band. Output in original
/// coordinates via `transform`.
pub fn extract_mesh_3d(
    forest: &Forest,
    field: &[f64],
    leaves: &[NodeId],
    operator: Operator,
    transform: &ScaleTransform,
) -> Mesh {
    let g = resample(forest, field, leaves, operator);
    let (nx, ny, nz) = (g.n[0], g.n[1], g.n[2]);

    // corner offsets of the classic numbering
    const DX: [usize; 8] = [0, 0, 1, 1, 0, 0, 1, 1];
    const DY: [usize; 8] = [0, 1, 1, 0, 0, 1, 1, 0];
    const DZ: [usize; 8] = [0, 0, 0, 0, 1, 1, 1, 1];
    // the 12 edges as corner pairs
    const EDGES: [(usize, usize); 12] = [
        (0, 1),
        (1, 2),
        (2, 3),
        (3, 0),
        (4, 5),
        (5, 6),
        (6, 7),
        (7, 4),
        (0, 4),
        (1, 5),
        (2, 6),
        (3, 7),
    ];

    let mut verts: Vec<[f64; 3]> = Vec::new();
    let mut edge_vert: HashMap<(usize, usize), u32> = HashMap::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();

    let node_id = |i: usize, j: usize, k: usize| (k * ny + j) * nx + i;

    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let mut corner_v = [0.0f64; 8];
                let mut corner_n = [0usize; 8];
                let mut cube = 0usize;
                for c in 0..8 {
                    let (ci, cj, ck) = (i + DX[c], j + DY[c], k + DZ[c]);
                    corner_v[c] = g.value(ci, cj, ck);
                    corner_n[c] = node_id(ci, cj, ck);
                    if corner_v[c] > 0.0 {
                        cube |= 1 << c;
                    }
                }
                if EDGE_TABLE[cube] == 0 {
                    continue;
                }
                let mut vlist = [u32::MAX; 12];
                for (e, &(a, b)) in EDGES.iter().enumerate() {
                    if EDGE_TABLE[cube] & (1 << e) == 0 {
                        continue;
                    }
                    let (na, nb) = (corner_n[a], corner_n[b]);
                    let key = (na.min(nb), na.max(nb));
                    vlist[e] = *edge_vert.entry(key).or_insert_with(|| {
                        let pa = g.node_pos(i + DX[a], j + DY[a], k + DZ[a]);
                        let pb = g.node_pos(i + DX[b], j + DY[b], k + DZ[b]);
                        let t = corner_v[a] / (corner_v[a] - corner_v[b]);
                        let p = [
                            pa[0] + t * (pb[0] - pa[0]),
                            pa[1] + t * (pb[1] - pa[1]),
                            pa[2] + t * (pb[2] - pa[2]),
                        ];
                        verts.push(p);
                        (verts.len() - 1) as u32
                    });
                }
                let tri = &TRI_TABLE[cube];
                let mut t = 0;
                while tri[t] != -1 {
                    let (a, b, c) = (
                        vlist[tri[t] as usize],
                        vlist[tri[t + 1] as usize],
                        vlist[tri[t + 2] as usize],
                    );
                    // degenerate slivers (repeated welded vertex) would
                    // break edge-count parity
                    if a != b && b != c && a != c {
                        triangles.push([a, b, c]);
                    }
                    t += 3;
                }
            }
        }
    }

    let vertices = verts.iter().map(|p| transform.invert(p)).collect();
    Mesh {
        vertices,
        triangles,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Domain;

    fn sample(forest: &Forest, f: impl Fn(&[f64; 3]) -> f64) -> Vec<f64> {
        let mut field = vec![f64::NAN; forest.node_count()];
        for id in forest.leaves() {
            field[id as usize] = f(&forest.center(id));
        }
        field
    }

    #[test]
    fn circle_contour_closed_and_accurate() {
        let f = Forest::uniform(Domain::new(2, 1.2, 6).unwrap(), 6);
        let phi = sample(&f, |x| (x[0] * x[0] + x[1] * x[1]).sqrt() - 0.5);
        let leaves = f.leaves();
        let lines = extract_contour_2d(
            &f,
            &phi,
            &leaves,
            Operator::P1,
            &ScaleTransform::identity(),
        );
        assert_eq!(lines.loops.len(), 1);
        assert!(lines.all_closed());
        let dx = f.domain().dx_min();
        for p in &lines.loops[0] {
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            assert!((r - 0.5).abs() < dx, "radius {r}");
        }
        assert!(lines.loops[0].len() > 20);
    }

    #[test]
    fn contour_respects_transform() {
        let f = Forest::uniform(Domain::new(2, 1.2, 6).unwrap(), 5);
        let phi = sample(&f, |x| (x[0] * x[0] + x[1] * x[1]).sqrt() - 0.5);
        let t = ScaleTransform {
            scale: 0.5,
            offset: [10.0, -3.0, 0.0],
        };
        let leaves = f.leaves();
        let lines = extract_contour_2d(&f, &phi, &leaves, Operator::P1, &t);
        // circle of radius 0.5 maps back to radius 1 around (10, -3)
        for p in &lines.loops[0] {
            let r = ((p[0] - 10.0).powi(2) + (p[1] + 3.0).powi(2)).sqrt();
            assert!((r - 1.0).abs() < 2.0 * f.domain().dx_min() / t.scale);
        }
    }

    #[test]
    fn sphere_mesh_watertight() {
        let f = Forest::uniform(Domain::new(3, 1.2, 5).unwrap(), 5);
        let phi = sample(&f, |x| {
            (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt() - 0.5
        });
        let leaves = f.leaves();
        let mesh = extract_mesh_3d(
            &f,
            &phi,
            &leaves,
            Operator::P1,
            &ScaleTransform::identity(),
        );
        assert!(mesh.triangles.len() > 100);
        assert!(mesh.is_watertight(), "open edges present");
        let dx = f.domain().dx_min();
        for v in &mesh.vertices {
            let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            assert!((r - 0.5).abs() < dx, "vertex radius {r}");
        }
    }

    #[test]
    fn obj_and_csv_writers() {
        let mesh = Mesh {
            vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            triangles: vec![[0, 1, 2]],
        };
        let mut buf = Vec::new();
        mesh.write_obj(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), 3);
        assert!(text.contains("f 1 2 3"));

        let lines = Polylines {
            loops: vec![
                vec![[0.0, 0.0], [1.0, 0.0], [0.0, 0.0]],
                vec![[5.0, 5.0], [6.0, 5.0], [5.0, 5.0]],
            ],
        };
        let mut buf = Vec::new();
        lines.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x,y\n"));
        assert_eq!(text.matches("\n\n").count(), 1, "one blank separator");
    }

    #[test]
    fn two_components_give_two_loops() {
        let f = Forest::uniform(Domain::new(2, 1.2, 6).unwrap(), 6);
        let phi = sample(&f, |x| {
            let d1 = ((x[0] - 0.5).powi(2) + x[1] * x[1]).sqrt() - 0.2;
            let d2 = ((x[0] + 0.5).powi(2) + x[1] * x[1]).sqrt() - 0.2;
            d1.min(d2)
        });
        let leaves = f.leaves();
        let lines = extract_contour_2d(
            &f,
            &phi,
            &leaves,
            Operator::P1,
            &ScaleTransform::identity(),
        );
        assert_eq!(lines.loops.len(), 2);
        assert!(lines.all_closed());
    }
}
