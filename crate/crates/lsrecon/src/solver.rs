//! One semi-Lagrangian timestep of the localized level-set PDE:
//! characteristic feet, tangential diffusion displacements,
//! degenerate-gradient fallback, energy functional, cavity-mode
//! velocity switch, and the narrow-band bookkeeping.

use rayon::prelude::*;

use crate::error::SolverError;
use crate::grid::{Adjacency, Forest, NeighborTable, NodeId};
use crate::recon::{CwenoParams, Operator, PolyCache};

#[derive(Debug, Clone, Copy)]
pub struct SolverParams {
    /// Fidelity exponent of the energy (1 or 2).
    pub p: u32,
    /// Curvature weight.
    pub mu: f64,
    pub dt: f64,
    /// Degenerate-gradient threshold `D Δt^α`.
    pub degenerate_d: f64,
    pub degenerate_alpha: f64,
    pub cavity_mode: bool,
    /// Cavity switch fires where `d > cavity_dist_mult · Δx_min` …
    pub cavity_dist_mult: f64,
    /// … and `|∇d| < cavity_grad_tol`.
    pub cavity_grad_tol: f64,
}

impl SolverParams {
    pub fn new(p: u32, mu: f64, dt: f64) -> Self {
        SolverParams {
            p,
            mu,
            dt,
            degenerate_d: 1e-3,
            degenerate_alpha: 1.0,
            cavity_mode: false,
            cavity_dist_mult: 4.0,
            cavity_grad_tol: 0.9,
        }
    }

    pub fn gradient_floor(&self) -> f64 {
        self.degenerate_d * self.dt.powf(self.degenerate_alpha)
    }
}

/// Narrow band: the active set `Q̃ = {|φ| < γ}` and its dilation `Q̄`
/// on which reconstruction/reinitialization data must stay valid.
#[derive(Debug, Clone)]
pub struct BandState {
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    /// `Q̃`, sorted.
    pub active: Vec<NodeId>,
    pub active_mask: Vec<bool>,
    /// `Q̄ ⊇ Q̃`, sorted.
    pub band: Vec<NodeId>,
    pub band_mask: Vec<bool>,
}

/// Builds the band for the given timestep: `β = 2λΔx_min`,
/// `γ = 4λΔx_min` with `λ = Δt/Δx_min`; `Q̄` is `Q̃` dilated by
/// `ceil(2λ)` neighbor layers.
pub fn select_band(forest: &Forest, field: &[f64], dt: f64) -> Result<BandState, SolverError> {
    select_band_with(forest, field, dt, None)
}

/// [`select_band`] reusing precomputed stencils where present.
pub fn select_band_with(
    forest: &Forest,
    field: &[f64],
    dt: f64,
    table: Option<&NeighborTable>,
) -> Result<BandState, SolverError> {
    let dx_min = forest.domain().dx_min();
    let lambda = dt / dx_min;
    let beta = 2.0 * lambda * dx_min;
    let gamma = 4.0 * lambda * dx_min;

    let n = forest.node_count();
    let mut active = Vec::new();
    let mut active_mask = vec![false; n];
    for id in forest.leaves() {
        if field[id as usize].abs() < gamma {
            active.push(id);
            active_mask[id as usize] = true;
        }
    }
    if active.is_empty() {
        return Err(SolverError::EmptyBand);
    }

    let mut band_mask = active_mask.clone();
    let mut layer = active.clone();
    let layers = (2.0 * lambda).ceil() as usize;
    for _ in 0..layers {
        let mut next = Vec::new();
        for &id in &layer {
            let owned;
            let nbs: &[NodeId] = match table.and_then(|t| t.get(id)) {
                Some(s) => s,
                None => {
                    owned = forest.neighbors(id, Adjacency::EdgeCorner);
                    &owned
                }
            };
            for &nb in nbs {
                if !band_mask[nb as usize] {
                    band_mask[nb as usize] = true;
                    next.push(nb);
                }
            }
        }
        layer = next;
    }
    let mut band: Vec<NodeId> = band_mask
        .iter()
        .enumerate()
        .filter_map(|(i, &b)| b.then_some(i as NodeId))
        .collect();
    band.sort_unstable();
    Ok(BandState {
        beta,
        gamma,
        lambda,
        active,
        active_mask,
        band,
        band_mask,
    })
}

/// Clamps the field to `±γ` everywhere (Eq.-(27)-style cut).
pub fn cut(field: &mut [f64], forest: &Forest, gamma: f64) {
    for id in forest.leaves() {
        let v = &mut field[id as usize];
        if v.abs() > gamma {
            *v = gamma.copysign(*v);
        }
    }
}

/// Smooth cutoff `c(φ) ∈ [0,1]`: 1 inside `|φ| ≤ β`, 0 outside
/// `|φ| > γ`, C¹ blend in between.
pub fn cutoff(phi: f64, beta: f64, gamma: f64) -> f64 {
    let a = phi.abs();
    if a <= beta {
        1.0
    } else if a <= gamma {
        (a - gamma).powi(2) * (2.0 * a + gamma - 3.0 * beta) / (gamma - beta).powi(3)
    } else {
        0.0
    }
}

/// Tangent frame spanning the plane orthogonal to `g`; the second
/// vector is meaningful only in 3D.
pub fn tangent_frame(g: &[f64; 3], dim: usize) -> [[f64; 3]; 2] {
    let norm = |v: &[f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let n = norm(g);
    assert!(n > 0.0, "tangent frame of a zero gradient");
    if dim == 2 {
        [[g[1] / n, -g[0] / n, 0.0], [0.0; 3]]
    } else {
        // axis least aligned with g, ties to the smallest index
        let mut k = 0;
        for a in 1..3 {
            if g[a].abs() < g[k].abs() {
                k = a;
            }
        }
        let mut e = [0.0; 3];
        e[k] = 1.0;
        let cross = |a: &[f64; 3], b: &[f64; 3]| {
            [
                a[1] * b[2] - a[2] * b[1],
                a[2] * b[0] - a[0] * b[2],
                a[0] * b[1] - a[1] * b[0],
            ]
        };
        let mut s1 = cross(g, &e);
        let n1 = norm(&s1);
        for v in s1.iter_mut() {
            *v /= n1;
        }
        let mut s2 = cross(g, &s1);
        let n2 = norm(&s2);
        for v in s2.iter_mut() {
            *v /= n2;
        }
        [s1, s2]
    }
}

/// Front set `Q₀`: leaves with a sign change against some neighbor.
pub fn detect_front(forest: &Forest, field: &[f64]) -> Result<Vec<NodeId>, SolverError> {
    detect_front_with(forest, field, None)
}

/// [`detect_front`] reusing precomputed stencils where present.
pub fn detect_front_with(
    forest: &Forest,
    field: &[f64],
    table: Option<&NeighborTable>,
) -> Result<Vec<NodeId>, SolverError> {
    let leaves = forest.leaves();
    let front: Vec<NodeId> = leaves
        .par_iter()
        .filter_map(|&j| {
            let pj = field[j as usize];
            let sign_change = match table.and_then(|t| t.get(j)) {
                Some(s) => s.iter().any(|&i| field[i as usize] * pj <= 0.0),
                None => forest
                    .neighbors(j, Adjacency::EdgeCorner)
                    .iter()
                    .any(|&i| field[i as usize] * pj <= 0.0),
            };
            sign_change.then_some(j)
        })
        .collect();
    if front.is_empty() {
        return Err(SolverError::LostInterface);
    }
    Ok(front)
}

/// `E_p = (Σ_{j∈Q₀} |d_j|^p Δx_min^{n−1})^{1/p}` over the given front
/// set, summed in the given (sorted) order for reproducibility.
pub fn compute_energy(forest: &Forest, distance: &[f64], front: &[NodeId], p: u32) -> f64 {
    let dx = forest.domain().dx_min();
    let area = dx.powi(forest.dim() as i32 - 1);
    let sum: f64 = front
        .iter()
        .map(|&j| distance[j as usize].abs().powi(p as i32) * area)
        .sum();
    sum.powf(1.0 / p as f64)
}

/// §4.6 velocity switch: far from the data with a flat distance
/// gradient the front keeps moving along `∇φ` instead of `∇d`.
/// Returns the chosen velocity and whether the switch fired.
pub fn effective_velocity(
    d: f64,
    grad_d: &[f64; 3],
    grad_phi: &[f64; 3],
    dx_min: f64,
    params: &SolverParams,
) -> ([f64; 3], bool) {
    if params.cavity_mode {
        let gd = (grad_d[0] * grad_d[0] + grad_d[1] * grad_d[1] + grad_d[2] * grad_d[2]).sqrt();
        if d > params.cavity_dist_mult * dx_min && gd < params.cavity_grad_tol {
            return (*grad_phi, true);
        }
    }
    (*grad_d, false)
}

/// Displaced sample points of the tangential-diffusion stencil around
/// the advective foot: 2 points (±hσ) in 2D, 4 points
/// (h(λ¹σ₁+λ²σ₂), λ ∈ {±1}²) in 3D.
pub fn diffusion_sample_points(
    foot: &[f64; 3],
    h: f64,
    frame: &[[f64; 3]; 2],
    dim: usize,
) -> Vec<[f64; 3]> {
    if dim == 2 {
        [1.0f64, -1.0]
            .iter()
            .map(|&l| {
                [
                    foot[0] + h * l * frame[0][0],
                    foot[1] + h * l * frame[0][1],
                    0.0,
                ]
            })
            .collect()
    } else {
        let mut out = Vec::with_capacity(4);
        for &l1 in &[1.0f64, -1.0] {
            for &l2 in &[1.0f64, -1.0] {
                let mut x = *foot;
                for a in 0..3 {
                    x[a] += h * (l1 * frame[0][a] + l2 * frame[1][a]);
                }
                out.push(x);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SlStepStats {
    pub fallback_count: usize,
    pub cavity_switches: usize,
    pub clamped_feet: usize,
}

/// One explicit SL update of `φ` on the active set. `grad_d` is the
/// cached per-leaf P1 gradient of the distance field; `energy` is
/// `E_p(φⁿ)` (unused when `p = 1`).
pub fn sl_step(
    forest: &Forest,
    phi: &[f64],
    d: &[f64],
    grad_d: &[[f64; 3]],
    params: &SolverParams,
    band: &BandState,
    energy: f64,
    operator: Operator,
) -> Result<(Vec<f64>, SlStepStats), SolverError> {
    sl_step_with(forest, phi, d, grad_d, params, band, energy, operator, None)
}

/// [`sl_step`] reusing precomputed stencils where present.
#[allow(clippy::too_many_arguments)]
pub fn sl_step_with(
    forest: &Forest,
    phi: &[f64],
    d: &[f64],
    grad_d: &[[f64; 3]],
    params: &SolverParams,
    band: &BandState,
    energy: f64,
    operator: Operator,
    table: Option<&NeighborTable>,
) -> Result<(Vec<f64>, SlStepStats), SolverError> {
    let dim = forest.dim();
    let dx_min = forest.domain().dx_min();
    let m = forest.domain().half_width();
    let floor = params.gradient_floor();
    let cache = PolyCache::build_with(
        forest,
        phi,
        &band.band,
        operator,
        CwenoParams::default(),
        table,
    );

    let clamp_dom = |x: &mut [f64; 3]| -> bool {
        let mut hit = false;
        for xa in x.iter_mut().take(dim) {
            if xa.abs() > m {
                *xa = m.copysign(*xa);
                hit = true;
            }
        }
        hit
    };

    let eval = |x: &[f64; 3]| -> f64 {
        let leaf = forest
            .locate_point(&x[..dim])
            .expect("sample point clamped into the domain");
        match cache.cached(leaf) {
            Some(p) => p.evaluate(x),
            None => cache.get(forest, phi, leaf).evaluate(x),
        }
    };

    let updates: Vec<(NodeId, f64, bool, bool, bool)> = band
        .active
        .par_iter()
        .map(|&j| {
            let jj = j as usize;
            let xj = forest.center(j);
            let pj = cache.get(forest, phi, j);
            let g = pj.gradient(&xj);
            let gnorm = (0..dim).map(|a| g[a] * g[a]).sum::<f64>().sqrt();

            if gnorm < floor {
                // degenerate gradient: plain neighbor average
                let owned;
                let nbs: &[NodeId] = match table.and_then(|t| t.get(j)) {
                    Some(s) => s,
                    None => {
                        owned = forest.neighbors(j, Adjacency::EdgeCorner);
                        &owned
                    }
                };
                let mean =
                    nbs.iter().map(|&i| phi[i as usize]).sum::<f64>() / nbs.len() as f64;
                return (j, mean, true, false, false);
            }

            let dj = d[jj];
            let c_scale = if params.p == 1 {
                1.0
            } else {
                (dj / energy).powi(params.p as i32 - 1)
            };
            let (vel, switched) =
                effective_velocity(dj, &grad_d[jj], &g, dx_min, params);
            let mut foot = xj;
            for a in 0..dim {
                foot[a] += c_scale * params.dt * vel[a];
            }
            let mut clamped = clamp_dom(&mut foot);
            let h = (2.0 * c_scale * params.mu * dj * params.dt / params.p as f64)
                .max(0.0)
                .sqrt();
            let value = if h == 0.0 {
                eval(&foot)
            } else {
                let frame = tangent_frame(&g, dim);
                let pts = diffusion_sample_points(&foot, h, &frame, dim);
                let mut sum = 0.0;
                for mut x in pts.clone() {
                    clamped |= clamp_dom(&mut x);
                    sum += eval(&x);
                }
                sum / pts.len() as f64
            };
            (j, value, false, switched, clamped)
        })
        .collect();

    let mut out = phi.to_vec();
    let mut stats = SlStepStats::default();
    for (j, tentative, fallback, switched, clamped) in updates {
        let jj = j as usize;
        let c = cutoff(phi[jj], band.beta, band.gamma);
        out[jj] = phi[jj] + c * (tentative - phi[jj]);
        stats.fallback_count += fallback as usize;
        stats.cavity_switches += switched as usize;
        stats.clamped_feet += clamped as usize;
    }
    Ok((out, stats))
}

/// Per-leaf P1 gradient of a field, cached over the given leaves.
pub fn gradient_field(forest: &Forest, field: &[f64], leaves: &[NodeId]) -> Vec<[f64; 3]> {
    gradient_field_with(forest, field, leaves, None)
}

/// [`gradient_field`] reusing precomputed stencils where present.
pub fn gradient_field_with(
    forest: &Forest,
    field: &[f64],
    leaves: &[NodeId],
    table: Option<&NeighborTable>,
) -> Vec<[f64; 3]> {
    let mut out = vec![[0.0; 3]; forest.node_count()];
    let fitted: Vec<(NodeId, [f64; 3])> = leaves
        .par_iter()
        .map(|&id| {
            let p = match table.and_then(|t| t.get(id)) {
                Some(s) => Operator::P1.fit_on(forest, field, id, &CwenoParams::default(), s),
                None => crate::recon::fit_p1(forest, field, id),
            };
            (id, p.gradient(&forest.center(id)))
        })
        .collect();
    for (id, g) in fitted {
        out[id as usize] = g;
    }
    out
}
