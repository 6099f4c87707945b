//! Point cloud ingestion: parsing, rescaling to the computational box,
//! resolution estimation and per-leaf binning.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::CloudError;
use crate::grid::{Forest, NodeId};

/// Uniform scale + translation mapping original coordinates to the
/// computational box (longest bounding-box side onto `[-1, 1]`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleTransform {
    pub scale: f64,
    pub offset: [f64; 3],
}

impl ScaleTransform {
    pub fn identity() -> Self {
        ScaleTransform {
            scale: 1.0,
            offset: [0.0; 3],
        }
    }

    pub fn apply(&self, x: &[f64; 3]) -> [f64; 3] {
        [
            (x[0] - self.offset[0]) * self.scale,
            (x[1] - self.offset[1]) * self.scale,
            (x[2] - self.offset[2]) * self.scale,
        ]
    }

    pub fn invert(&self, x: &[f64; 3]) -> [f64; 3] {
        [
            x[0] / self.scale + self.offset[0],
            x[1] / self.scale + self.offset[1],
            x[2] / self.scale + self.offset[2],
        ]
    }
}

/// Rescaled point cloud. Points live in `[-1, 1]^n`.
#[derive(Debug, Clone)]
pub struct PointCloud {
    dim: usize,
    points: Vec<[f64; 3]>,
    transform: ScaleTransform,
}

/// Input file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    Xyz,
    Ply,
}

impl PointCloud {
    /// Builds a cloud from raw (original-coordinate) points, rescaling
    /// so the longest bounding-box side maps to exactly `[-1, 1]` and
    /// the bounding-box centroid to the origin.
    pub fn from_points(dim: usize, raw: Vec<[f64; 3]>) -> Result<Self, CloudError> {
        let distinct = {
            let mut seen = raw.clone();
            seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
            seen.dedup();
            seen.len()
        };
        if distinct < 2 {
            return Err(CloudError::Degenerate(format!(
                "need at least 2 distinct points, got {distinct}"
            )));
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &raw {
            for a in 0..dim {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let longest = (0..dim).map(|a| hi[a] - lo[a]).fold(0.0f64, f64::max);
        if longest <= 0.0 {
            return Err(CloudError::Degenerate(
                "bounding box has zero extent".into(),
            ));
        }
        let mut offset = [0.0; 3];
        for a in 0..dim {
            offset[a] = 0.5 * (lo[a] + hi[a]);
        }
        let transform = ScaleTransform {
            scale: 2.0 / longest,
            offset,
        };
        let points = raw.iter().map(|p| transform.apply(p)).collect();
        Ok(PointCloud {
            dim,
            points,
            transform,
        })
    }

    /// Wraps points that already live in the computational box, with an
    /// identity transform. Intended for synthetic clouds.
    pub fn from_scaled(dim: usize, points: Vec<[f64; 3]>) -> Self {
        PointCloud {
            dim,
            points,
            transform: ScaleTransform::identity(),
        }
    }

    pub fn load(path: &Path, format: CloudFormat) -> Result<Self, CloudError> {
        let mut text = String::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_string(&mut text))
            .map_err(|source| CloudError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        let (dim, raw) = match format {
            CloudFormat::Xyz => parse_xyz(path, &text)?,
            CloudFormat::Ply => parse_ply(path, &text)?,
        };
        Self::from_points(dim, raw)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Rescaled points.
    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        self.points[i]
    }

    pub fn transform(&self) -> &ScaleTransform {
        &self.transform
    }

    /// Mean nearest-other-point distance over a random sample of the
    /// (deduplicated) cloud. `fraction = 1` uses every point and is
    /// independent of the seed.
    pub fn estimate_resolution(&self, sample_fraction: f64, seed: u64) -> f64 {
        let mut unique = self.points.clone();
        unique.sort_by(|a, b| a.partial_cmp(b).unwrap());
        unique.dedup();
        let n = unique.len();
        let k = ((sample_fraction * n as f64).ceil() as usize).clamp(1, n);
        let mut idx: Vec<usize> = (0..n).collect();
        if k < n {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            idx.shuffle(&mut rng);
            idx.truncate(k);
            idx.sort_unstable();
        }
        let buckets = BucketGrid::build(self.dim, &unique);
        let mut total = 0.0;
        for &i in &idx {
            total += buckets.nearest_other(&unique, i).sqrt();
        }
        total / idx.len() as f64
    }

    /// Partitions point indices by containing leaf.
    pub fn bin_points(&self, forest: &Forest) -> Result<LeafBins, CloudError> {
        let mut bins: HashMap<NodeId, Vec<usize>> = HashMap::new();
        for (i, p) in self.points.iter().enumerate() {
            let leaf = forest.locate_point(&p[..self.dim])?;
            bins.entry(leaf).or_default().push(i);
        }
        Ok(LeafBins { bins })
    }
}

/// Map from leaf id to indices of the points it contains.
#[derive(Debug, Clone, Default)]
pub struct LeafBins {
    bins: HashMap<NodeId, Vec<usize>>,
}

impl LeafBins {
    pub fn get(&self, leaf: NodeId) -> Option<&[usize]> {
        self.bins.get(&leaf).map(|v| v.as_slice())
    }

    pub fn occupied(&self) -> impl Iterator<Item = (NodeId, &[usize])> {
        self.bins.iter().map(|(&k, v)| (k, v.as_slice()))
    }

    pub fn total_points(&self) -> usize {
        self.bins.values().map(|v| v.len()).sum()
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }
}

fn dist2(dim: usize, a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..dim).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum()
}

/// Uniform background bucket grid for nearest-neighbor queries,
/// spacing ~ diagonal / cbrt(N).
struct BucketGrid {
    dim: usize,
    cell: f64,
    origin: [f64; 3],
    buckets: HashMap<[i64; 3], Vec<usize>>,
}

impl BucketGrid {
    fn build(dim: usize, pts: &[[f64; 3]]) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in pts {
            for a in 0..dim {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let diag = (0..dim)
            .map(|a| (hi[a] - lo[a]).powi(2))
            .sum::<f64>()
            .sqrt();
        let cell = (diag / (pts.len() as f64).cbrt()).max(1e-300);
        let mut grid = BucketGrid {
            dim,
            cell,
            origin: lo,
            buckets: HashMap::new(),
        };
        for (i, p) in pts.iter().enumerate() {
            let key = grid.key(p);
            grid.buckets.entry(key).or_default().push(i);
        }
        grid
    }

    fn key(&self, p: &[f64; 3]) -> [i64; 3] {
        let mut k = [0i64; 3];
        for a in 0..self.dim {
            k[a] = ((p[a] - self.origin[a]) / self.cell).floor() as i64;
        }
        k
    }

    /// Squared distance from `pts[i]` to its nearest other point.
    fn nearest_other(&self, pts: &[[f64; 3]], i: usize) -> f64 {
        let p = &pts[i];
        let key = self.key(p);
        let mut best = f64::INFINITY;
        let mut ring = 0i64;
        loop {
            let mut found_any = false;
            for k in self.ring_keys(key, ring) {
                if let Some(ids) = self.buckets.get(&k) {
                    found_any = true;
                    for &j in ids {
                        if j != i {
                            best = best.min(dist2(self.dim, p, &pts[j]));
                        }
                    }
                }
            }
            // once a candidate exists, one extra ring guarantees the
            // true nearest is not in a farther bucket
            if best.is_finite() {
                let safe = (best.sqrt() / self.cell).ceil() as i64 + 1;
                if ring >= safe {
                    return best;
                }
            }
            ring += 1;
            if !found_any && ring > 2 * (pts.len() as i64) {
                return best; // unreachable for valid inputs
            }
        }
    }

    fn ring_keys(&self, center: [i64; 3], ring: i64) -> Vec<[i64; 3]> {
        let mut out = Vec::new();
        let r = ring;
        if self.dim == 2 {
            for dx in -r..=r {
                for dy in -r..=r {
                    if dx.abs().max(dy.abs()) == r {
                        out.push([center[0] + dx, center[1] + dy, 0]);
                    }
                }
            }
        } else {
            for dx in -r..=r {
                for dy in -r..=r {
                    for dz in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) == r {
                            out.push([center[0] + dx, center[1] + dy, center[2] + dz]);
                        }
                    }
                }
            }
        }
        out
    }
}

fn parse_xyz(path: &Path, text: &str) -> Result<(usize, Vec<[f64; 3]>), CloudError> {
    let mut dim = None;
    let mut pts = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        let n = cols.len();
        if n != 2 && n != 3 {
            return Err(CloudError::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("expected 2 or 3 columns, got {n}"),
            });
        }
        let d = *dim.get_or_insert(n);
        if n != d {
            return Err(CloudError::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("inconsistent column count: {n} vs {d}"),
            });
        }
        let mut p = [0.0f64; 3];
        for (a, c) in cols.iter().enumerate() {
            p[a] = c.parse().map_err(|_| CloudError::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("invalid float {c:?}"),
            })?;
        }
        pts.push(p);
    }
    let dim = dim.ok_or_else(|| CloudError::Degenerate("empty file".into()))?;
    Ok((dim, pts))
}

fn parse_ply(path: &Path, text: &str) -> Result<(usize, Vec<[f64; 3]>), CloudError> {
    let err = |line: usize, message: String| CloudError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(err(1, "missing 'ply' magic".into())),
    }
    let mut vertex_count = None;
    let mut in_vertex_element = false;
    let mut vertex_props: Vec<String> = Vec::new();
    let mut header_end = 0;
    for (lineno, line) in lines.by_ref() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", fmt, ..] => {
                if *fmt != "ascii" {
                    return Err(err(lineno + 1, format!("unsupported ply format {fmt:?}")));
                }
            }
            ["element", "vertex", n] => {
                vertex_count = Some(n.parse::<usize>().map_err(|_| {
                    err(lineno + 1, format!("bad vertex count {n:?}"))
                })?);
                in_vertex_element = true;
            }
            ["element", ..] => in_vertex_element = false,
            ["property", _ty, name] if in_vertex_element => {
                vertex_props.push((*name).to_string());
            }
            ["end_header"] => {
                header_end = lineno + 1;
                break;
            }
            _ => {}
        }
    }
    let count = vertex_count.ok_or_else(|| err(header_end, "no vertex element".into()))?;
    let ix = vertex_props.iter().position(|p| p == "x");
    let iy = vertex_props.iter().position(|p| p == "y");
    let iz = vertex_props.iter().position(|p| p == "z");
    let (ix, iy) = match (ix, iy) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(err(header_end, "vertex element lacks x/y properties".into())),
    };
    let mut pts = Vec::with_capacity(count);
    for (lineno, line) in lines.take(count) {
        let cols: Vec<&str> = line.split_whitespace().collect();
        let parse = |i: usize| -> Result<f64, CloudError> {
            cols.get(i)
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| err(lineno + 1, "bad vertex row".into()))
        };
        let mut p = [0.0f64; 3];
        p[0] = parse(ix)?;
        p[1] = parse(iy)?;
        if let Some(i) = iz {
            p[2] = parse(i)?;
        }
        pts.push(p);
    }
    if pts.len() != count {
        return Err(err(0, format!("expected {count} vertices, got {}", pts.len())));
    }
    Ok((if iz.is_some() { 3 } else { 2 }, pts))
}
