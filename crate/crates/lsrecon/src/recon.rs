//! Local polynomial reconstruction on a leaf from its neighbor stencil:
//! constrained least-squares P1 and third-order CWENO, in 2D and 3D.
//!
//! All polynomials use the scaled local basis of the owner leaf,
//! `x̂ = (x - x_j) / Δx_j`, with the constant coefficient pinned to the
//! owner's field value so the reconstruction interpolates the center.

use nalgebra::{DMatrix, DVector};

use crate::grid::{Adjacency, Forest, NeighborTable, NodeId};

pub const MAX_COEFFS: usize = 10;

/// Basis layout, degree-2 entries after degree-1 ones:
/// 2D `{1, x̂, ŷ, x̂², x̂ŷ, ŷ²}`, 3D `{1, x̂, ŷ, ẑ, x̂², x̂ŷ, ŷ², ẑ², x̂ẑ, ŷẑ}`.
pub fn basis_size(dim: usize, degree: usize) -> usize {
    match (dim, degree) {
        (2, 1) => 3,
        (2, 2) => 6,
        (3, 1) => 4,
        (3, 2) => 10,
        _ => unreachable!("degree must be 1 or 2, dim 2 or 3"),
    }
}

fn eval_basis(dim: usize, s: usize, x: &[f64; 3]) -> f64 {
    match (dim, s) {
        (_, 0) => 1.0,
        (_, 1) => x[0],
        (_, 2) => x[1],
        (2, 3) => x[0] * x[0],
        (2, 4) => x[0] * x[1],
        (2, 5) => x[1] * x[1],
        (3, 3) => x[2],
        (3, 4) => x[0] * x[0],
        (3, 5) => x[0] * x[1],
        (3, 6) => x[1] * x[1],
        (3, 7) => x[2] * x[2],
        (3, 8) => x[0] * x[2],
        (3, 9) => x[1] * x[2],
        _ => unreachable!(),
    }
}

fn basis_gradient(dim: usize, s: usize, x: &[f64; 3]) -> [f64; 3] {
    match (dim, s) {
        (_, 0) => [0.0, 0.0, 0.0],
        (_, 1) => [1.0, 0.0, 0.0],
        (_, 2) => [0.0, 1.0, 0.0],
        (2, 3) => [2.0 * x[0], 0.0, 0.0],
        (2, 4) => [x[1], x[0], 0.0],
        (2, 5) => [0.0, 2.0 * x[1], 0.0],
        (3, 3) => [0.0, 0.0, 1.0],
        (3, 4) => [2.0 * x[0], 0.0, 0.0],
        (3, 5) => [x[1], x[0], 0.0],
        (3, 6) => [0.0, 2.0 * x[1], 0.0],
        (3, 7) => [0.0, 0.0, 2.0 * x[2]],
        (3, 8) => [x[2], 0.0, x[0]],
        (3, 9) => [0.0, x[2], x[1]],
        _ => unreachable!(),
    }
}

fn basis_hessian(dim: usize, s: usize) -> [[f64; 3]; 3] {
    let mut h = [[0.0; 3]; 3];
    match (dim, s) {
        (2, 3) | (3, 4) => h[0][0] = 2.0,
        (2, 4) | (3, 5) => {
            h[0][1] = 1.0;
            h[1][0] = 1.0;
        }
        (2, 5) | (3, 6) => h[1][1] = 2.0,
        (3, 7) => h[2][2] = 2.0,
        (3, 8) => {
            h[0][2] = 1.0;
            h[2][0] = 1.0;
        }
        (3, 9) => {
            h[1][2] = 1.0;
            h[2][1] = 1.0;
        }
        _ => {}
    }
    h
}

/// Diagonal of the oscillation-indicator quadratic form `I = cᵀ M c`.
fn indicator_diag(dim: usize) -> &'static [f64] {
    const D2: [f64; 6] = [0.0, 1.0, 1.0, 13.0 / 3.0, 7.0 / 6.0, 13.0 / 3.0];
    const D3: [f64; 10] = [
        0.0,
        1.0,
        1.0,
        1.0,
        13.0 / 3.0,
        7.0 / 6.0,
        13.0 / 3.0,
        13.0 / 3.0,
        7.0 / 6.0,
        7.0 / 6.0,
    ];
    if dim == 2 {
        &D2
    } else {
        &D3
    }
}

/// `I = cᵀ M c` over the degree-2 coefficient vector; degree-1
/// polynomials are zero-padded.
pub fn oscillation_indicator(dim: usize, coeffs: &[f64]) -> f64 {
    indicator_diag(dim)
        .iter()
        .zip(coeffs)
        .map(|(m, c)| m * c * c)
        .sum()
}

/// Degree-1 or degree-2 polynomial in the scaled local basis of one leaf.
#[derive(Debug, Clone)]
pub struct LocalPolynomial {
    pub owner: NodeId,
    pub dim: usize,
    pub degree: usize,
    pub coeffs: [f64; MAX_COEFFS],
    pub center: [f64; 3],
    pub edge: f64,
    /// Set when a least-squares sub-problem was rank deficient or an
    /// empty substencil forced a fallback.
    pub degenerate: bool,
}

impl LocalPolynomial {
    fn scaled(&self, x: &[f64; 3]) -> [f64; 3] {
        [
            (x[0] - self.center[0]) / self.edge,
            (x[1] - self.center[1]) / self.edge,
            (x[2] - self.center[2]) / self.edge,
        ]
    }

    pub fn evaluate(&self, x: &[f64; 3]) -> f64 {
        let s = self.scaled(x);
        let m = basis_size(self.dim, self.degree);
        (0..m).map(|k| self.coeffs[k] * eval_basis(self.dim, k, &s)).sum()
    }

    /// Analytic gradient in physical units.
    pub fn gradient(&self, x: &[f64; 3]) -> [f64; 3] {
        let s = self.scaled(x);
        let m = basis_size(self.dim, self.degree);
        let mut g = [0.0; 3];
        for k in 0..m {
            let bg = basis_gradient(self.dim, k, &s);
            for a in 0..self.dim {
                g[a] += self.coeffs[k] * bg[a];
            }
        }
        for ga in g.iter_mut() {
            *ga /= self.edge;
        }
        g
    }

    /// Analytic Hessian in physical units (constant for degree 2).
    pub fn hessian(&self) -> [[f64; 3]; 3] {
        let m = basis_size(self.dim, self.degree);
        let mut h = [[0.0; 3]; 3];
        for k in 0..m {
            let bh = basis_hessian(self.dim, k);
            for a in 0..self.dim {
                for b in 0..self.dim {
                    h[a][b] += self.coeffs[k] * bh[a][b];
                }
            }
        }
        let e2 = self.edge * self.edge;
        for row in h.iter_mut() {
            for v in row.iter_mut() {
                *v /= e2;
            }
        }
        h
    }

    pub fn indicator(&self) -> f64 {
        oscillation_indicator(self.dim, &self.coeffs)
    }
}

/// Reconstruction operator selection for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Operator {
    P1,
    Cweno,
}

impl Operator {
    pub fn fit(
        self,
        forest: &Forest,
        field: &[f64],
        leaf: NodeId,
        params: &CwenoParams,
    ) -> LocalPolynomial {
        match self {
            Operator::P1 => fit_p1(forest, field, leaf),
            Operator::Cweno => fit_cweno(forest, field, leaf, params).0,
        }
    }

    /// Like [`Operator::fit`] with the leaf's edge+corner stencil
    /// already at hand (e.g. from a [`NeighborTable`]).
    pub fn fit_on(
        self,
        forest: &Forest,
        field: &[f64],
        leaf: NodeId,
        params: &CwenoParams,
        stencil: &[NodeId],
    ) -> LocalPolynomial {
        match self {
            Operator::P1 => constrained_ls(forest, field, leaf, stencil, 1),
            Operator::Cweno => fit_cweno_on(forest, field, leaf, params, stencil).0,
        }
    }
}

/// CWENO blending parameters (`d₀` for the optimal polynomial, the
/// rest split evenly over the laterals; `ε = Δx_j²`).
#[derive(Debug, Clone, Copy)]
pub struct CwenoParams {
    pub d0: f64,
    pub exponent: i32,
}

impl Default for CwenoParams {
    fn default() -> Self {
        CwenoParams {
            d0: 0.75,
            exponent: 2,
        }
    }
}

/// Linear and nonlinear CWENO weights plus indicators, index 0 first.
#[derive(Debug, Clone)]
pub struct CwenoWeights {
    pub linear: Vec<f64>,
    pub omega: Vec<f64>,
    pub indicators: Vec<f64>,
    pub epsilon: f64,
    pub exponent: i32,
}

/// Relative eigenvalue cutoff of the normal equations; eigenvalues are
/// squared singular values, but the floor stays above the O(1e-16)
/// eigensolver noise so near-singular stencils are flagged, not solved.
const RANK_TOL_EIG: f64 = 1e-14;

/// Relative pivot² cutoff below which the fast Cholesky path defers to
/// the rank-revealing eigendecomposition. Deliberately much looser than
/// [`RANK_TOL_EIG`]: anything in between is full rank for both paths
/// and only the (well-conditioned) solve differs, by roundoff.
const CHOL_TOL: f64 = 1e-10;

/// Stack row capacity of the allocation-free LS path; graded 3D
/// edge+corner stencils stay well below this.
const MAX_ROWS: usize = 96;

/// In-place Cholesky solve of the (scaled) normal equations
/// `ata · sol = atb`, sizes ≤ MAX_COEFFS − 1. Returns `None` when a
/// pivot² drops under `CHOL_TOL` relative to the largest diagonal —
/// the caller then falls back to the rank-revealing eigen path.
fn cholesky_solve(
    ata: &[[f64; MAX_COEFFS - 1]; MAX_COEFFS - 1],
    atb: &[f64; MAX_COEFFS - 1],
    n: usize,
) -> Option<[f64; MAX_COEFFS - 1]> {
    let mut l = *ata;
    let dmax = (0..n).fold(0.0f64, |m, k| m.max(ata[k][k]));
    if dmax <= 0.0 {
        return None;
    }
    for j in 0..n {
        let mut d = l[j][j];
        for k in 0..j {
            d -= l[j][k] * l[j][k];
        }
        if d <= CHOL_TOL * dmax {
            return None;
        }
        let d = d.sqrt();
        l[j][j] = d;
        for i in j + 1..n {
            let mut v = l[i][j];
            for k in 0..j {
                v -= l[i][k] * l[j][k];
            }
            l[i][j] = v / d;
        }
    }
    let mut y = [0.0f64; MAX_COEFFS - 1];
    for i in 0..n {
        let mut v = atb[i];
        for k in 0..i {
            v -= l[i][k] * y[k];
        }
        y[i] = v / l[i][i];
    }
    let mut x = [0.0f64; MAX_COEFFS - 1];
    for i in (0..n).rev() {
        let mut v = y[i];
        for k in i + 1..n {
            v -= l[k][i] * x[k];
        }
        x[i] = v / l[i][i];
    }
    Some(x)
}

/// Constrained least-squares fit over `stencil` (the owner excluded):
/// `c₀` is pinned to the owner's value, the rest solve
/// `Σ c_s ψ_s(x̂_i) = φ_i − φ_j` in the least-squares sense, minimum-norm
/// when rank deficient.
fn constrained_ls(
    forest: &Forest,
    field: &[f64],
    leaf: NodeId,
    stencil: &[NodeId],
    degree: usize,
) -> LocalPolynomial {
    let dim = forest.dim();
    let center = forest.center(leaf);
    let edge = forest.edge(leaf);
    let m = basis_size(dim, degree);
    let phi_j = field[leaf as usize];

    let rows = stencil.len();
    let n = m - 1;
    // basis rows on the stack; very large stencils (never seen on 2:1
    // balanced grids) spill to the heap
    let mut stack_rows = [[0.0f64; MAX_COEFFS - 1]; MAX_ROWS];
    let mut heap_rows: Vec<[f64; MAX_COEFFS - 1]> = Vec::new();
    let basis: &mut [[f64; MAX_COEFFS - 1]] = if rows <= MAX_ROWS {
        &mut stack_rows[..rows]
    } else {
        heap_rows.resize(rows, [0.0; MAX_COEFFS - 1]);
        &mut heap_rows[..]
    };
    let mut rhs = [0.0f64; MAX_ROWS];
    let mut heap_rhs: Vec<f64> = Vec::new();
    let rhs: &mut [f64] = if rows <= MAX_ROWS {
        &mut rhs[..rows]
    } else {
        heap_rhs.resize(rows, 0.0);
        &mut heap_rhs[..]
    };
    for (r, &i) in stencil.iter().enumerate() {
        let xc = forest.center(i);
        let s = [
            (xc[0] - center[0]) / edge,
            (xc[1] - center[1]) / edge,
            (xc[2] - center[2]) / edge,
        ];
        for k in 1..m {
            basis[r][k - 1] = eval_basis(dim, k, &s);
        }
        rhs[r] = field[i as usize] - phi_j;
    }

    // column scaling for conditioning
    let mut col_norm = [1.0f64; MAX_COEFFS - 1];
    for k in 0..n {
        let nk = basis.iter().map(|row| row[k] * row[k]).sum::<f64>().sqrt();
        if nk > 0.0 {
            col_norm[k] = nk;
            for row in basis.iter_mut() {
                row[k] /= nk;
            }
        }
    }

    // minimum-norm least squares through the normal equations: with the
    // column scaling above the non-degenerate systems are well
    // conditioned. The common case solves the (m-1)x(m-1) system by a
    // stack Cholesky; near-singular systems (structurally degenerate
    // stencils with exactly repeated directions) defer to a
    // rank-revealing symmetric eigendecomposition, itself an order of
    // magnitude cheaper than an SVD of the full row matrix.
    let mut ata = [[0.0f64; MAX_COEFFS - 1]; MAX_COEFFS - 1];
    let mut atb = [0.0f64; MAX_COEFFS - 1];
    for (row, &bi) in basis.iter().zip(rhs.iter()) {
        for j in 0..n {
            let rj = row[j];
            if rj == 0.0 {
                continue;
            }
            for k in j..n {
                ata[j][k] += rj * row[k];
            }
            atb[j] += rj * bi;
        }
    }
    for j in 0..n {
        for k in 0..j {
            ata[j][k] = ata[k][j];
        }
    }

    let mut degenerate = false;
    let sol: [f64; MAX_COEFFS - 1] = match cholesky_solve(&ata, &atb, n) {
        Some(x) => x,
        None => {
            let nat = DMatrix::<f64>::from_fn(n, n, |i, j| ata[i][j]);
            let nab = DVector::<f64>::from_fn(n, |i, _| atb[i]);
            let eig = nat.symmetric_eigen();
            let lmax = eig
                .eigenvalues
                .iter()
                .cloned()
                .fold(0.0f64, f64::max)
                .max(f64::MIN_POSITIVE);
            let eps = RANK_TOL_EIG * lmax;
            let rank = eig.eigenvalues.iter().filter(|&&l| l > eps).count();
            degenerate = rank < n;
            let mut sol = [0.0f64; MAX_COEFFS - 1];
            for k in 0..n {
                let l = eig.eigenvalues[k];
                if l > eps {
                    let vk = eig.eigenvectors.column(k);
                    let c = vk.dot(&nab) / l;
                    for (s, v) in sol.iter_mut().zip(vk.iter()) {
                        *s += c * v;
                    }
                }
            }
            sol
        }
    };

    let mut coeffs = [0.0; MAX_COEFFS];
    coeffs[0] = phi_j;
    for k in 0..n {
        coeffs[k + 1] = sol[k] / col_norm[k];
    }
    LocalPolynomial {
        owner: leaf,
        dim,
        degree,
        coeffs,
        center,
        edge,
        degenerate,
    }
}

/// Degree-1 constrained least-squares fit on the full edge+corner stencil.
pub fn fit_p1(forest: &Forest, field: &[f64], leaf: NodeId) -> LocalPolynomial {
    let stencil = forest.neighbors(leaf, Adjacency::EdgeCorner);
    constrained_ls(forest, field, leaf, &stencil, 1)
}

/// Lateral (directional) degree-1 fit. `signs` holds one `±1` per
/// axis; neighbors whose *cell* overlaps the closed quadrant
/// `{signs·(x - center) >= 0}` are kept. On uniform grids this matches
/// the center-sign rule (axis-aligned neighbors count for both sides);
/// on graded stencils it keeps the coarse edge neighbors whose centers
/// stick out past the owner, which the substencil needs for full rank.
/// Falls back to the full stencil (flagged) when the substencil is
/// empty.
pub fn fit_lateral(
    forest: &Forest,
    field: &[f64],
    leaf: NodeId,
    signs: [i8; 3],
) -> LocalPolynomial {
    let stencil = forest.neighbors(leaf, Adjacency::EdgeCorner);
    fit_lateral_on(forest, field, leaf, signs, &stencil)
}

fn fit_lateral_on(
    forest: &Forest,
    field: &[f64],
    leaf: NodeId,
    signs: [i8; 3],
    stencil: &[NodeId],
) -> LocalPolynomial {
    let dim = forest.dim();
    let center = forest.center(leaf);
    let tol = 1e-9 * forest.edge(leaf);
    let sub: Vec<NodeId> = stencil
        .iter()
        .copied()
        .filter(|&i| {
            let c = forest.center(i);
            let half = 0.5 * forest.edge(i);
            (0..dim).all(|a| {
                if signs[a] > 0 {
                    c[a] + half >= center[a] - tol
                } else {
                    c[a] - half <= center[a] + tol
                }
            })
        })
        .collect();
    if sub.is_empty() {
        let mut p = constrained_ls(forest, field, leaf, stencil, 1);
        p.degenerate = true;
        return p;
    }
    constrained_ls(forest, field, leaf, &sub, 1)
}

fn lateral_signs(dim: usize) -> Vec<[i8; 3]> {
    let m = 1usize << dim;
    (0..m)
        .map(|k| {
            let mut s = [1i8; 3];
            for a in 0..dim {
                s[a] = if (k >> a) & 1 == 1 { 1 } else { -1 };
            }
            s
        })
        .collect()
}

/// Third-order CWENO reconstruction: blends the constrained degree-2
/// fit on the full stencil with the `2^n` lateral degree-1 fits via
/// oscillation-indicator weights.
pub fn fit_cweno(
    forest: &Forest,
    field: &[f64],
    leaf: NodeId,
    params: &CwenoParams,
) -> (LocalPolynomial, CwenoWeights) {
    let stencil = forest.neighbors(leaf, Adjacency::EdgeCorner);
    fit_cweno_on(forest, field, leaf, params, &stencil)
}

/// [`fit_cweno`] with the edge+corner stencil already at hand.
pub fn fit_cweno_on(
    forest: &Forest,
    field: &[f64],
    leaf: NodeId,
    params: &CwenoParams,
    stencil: &[NodeId],
) -> (LocalPolynomial, CwenoWeights) {
    let dim = forest.dim();
    let p_opt = constrained_ls(forest, field, leaf, stencil, 2);

    let laterals: Vec<LocalPolynomial> = lateral_signs(dim)
        .into_iter()
        .map(|s| fit_lateral_on(forest, field, leaf, s, &stencil))
        .collect();
    let m = laterals.len();
    let d0 = params.d0;
    let dk = (1.0 - d0) / m as f64;

    let nc = basis_size(dim, 2);
    // P0 = (P_opt - Σ d_k P_k) / d0, laterals zero-padded to degree 2
    let mut p0 = [0.0f64; MAX_COEFFS];
    for k in 0..nc {
        let mut v = p_opt.coeffs[k];
        for lat in &laterals {
            v -= dk * lat.coeffs[k];
        }
        p0[k] = v / d0;
    }

    let epsilon = forest.edge(leaf).powi(2);
    let mut indicators = Vec::with_capacity(m + 1);
    indicators.push(p_opt.indicator());
    for lat in &laterals {
        indicators.push(lat.indicator());
    }
    let mut linear = Vec::with_capacity(m + 1);
    linear.push(d0);
    linear.extend(std::iter::repeat(dk).take(m));

    let alpha: Vec<f64> = linear
        .iter()
        .zip(&indicators)
        .map(|(d, i)| d / (i + epsilon).powi(params.exponent))
        .collect();
    let total: f64 = alpha.iter().sum();
    let omega: Vec<f64> = alpha.iter().map(|a| a / total).collect();

    let mut coeffs = [0.0f64; MAX_COEFFS];
    for k in 0..nc {
        coeffs[k] += omega[0] * p0[k];
        for (w, lat) in omega[1..].iter().zip(&laterals) {
            coeffs[k] += w * lat.coeffs[k];
        }
    }
    let degenerate = p_opt.degenerate || laterals.iter().any(|l| l.degenerate);
    (
        LocalPolynomial {
            owner: leaf,
            dim,
            degree: 2,
            coeffs,
            center: p_opt.center,
            edge: p_opt.edge,
            degenerate,
        },
        CwenoWeights {
            linear,
            omega,
            indicators,
            epsilon,
            exponent: params.exponent,
        },
    )
}

/// Per-node cache of fitted polynomials for one field snapshot.
/// Entries are computed up front for a chosen set of leaves; lookups
/// outside that set fall back to an on-the-fly fit.
pub struct PolyCache {
    pub operator: Operator,
    pub params: CwenoParams,
    polys: Vec<Option<LocalPolynomial>>,
}

impl PolyCache {
    pub fn build(
        forest: &Forest,
        field: &[f64],
        leaves: &[NodeId],
        operator: Operator,
        params: CwenoParams,
    ) -> Self {
        Self::build_with(forest, field, leaves, operator, params, None)
    }

    /// [`PolyCache::build`] reusing precomputed stencils where present.
    pub fn build_with(
        forest: &Forest,
        field: &[f64],
        leaves: &[NodeId],
        operator: Operator,
        params: CwenoParams,
        table: Option<&NeighborTable>,
    ) -> Self {
        let mut polys: Vec<Option<LocalPolynomial>> = vec![None; forest.node_count()];
        use rayon::prelude::*;
        let fitted: Vec<(NodeId, LocalPolynomial)> = leaves
            .par_iter()
            .map(|&id| {
                let p = match table.and_then(|t| t.get(id)) {
                    Some(s) => operator.fit_on(forest, field, id, &params, s),
                    None => operator.fit(forest, field, id, &params),
                };
                (id, p)
            })
            .collect();
        for (id, p) in fitted {
            polys[id as usize] = Some(p);
        }
        PolyCache {
            operator,
            params,
            polys,
        }
    }

    pub fn get(&self, forest: &Forest, field: &[f64], leaf: NodeId) -> LocalPolynomial {
        match &self.polys[leaf as usize] {
            Some(p) => p.clone(),
            None => self.operator.fit(forest, field, leaf, &self.params),
        }
    }

    pub fn cached(&self, leaf: NodeId) -> Option<&LocalPolynomial> {
        self.polys.get(leaf as usize).and_then(|p| p.as_ref())
    }
}
