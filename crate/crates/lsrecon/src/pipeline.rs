//! Batch orchestration: R consecutive runs of the reconstruction
//! algorithm at doubling resolution, with the operator/p/μ schedules,
//! the energy stopping rule, error metrics and all file exports.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cloud::{CloudFormat, PointCloud};
use crate::error::PipelineError;
use crate::grid::{Adjacency, Domain, Forest, NeighborTable, NodeId};
use crate::isosurface::{extract_contour_2d, extract_mesh_3d};
use crate::propagation::{distance_field, distance_field_with};
use crate::recon::{CwenoParams, Operator, PolyCache};
use crate::reinit::reinitialize_with;
use crate::shapes::ExactSdf;
use crate::solver::{
    compute_energy, cut, detect_front_with, gradient_field_with, select_band_with, sl_step_with,
    SolverParams,
};

/// Flat configuration, loadable from a JSON object. Unknown keys are
/// rejected; every CLI flag overrides the matching key.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Point-cloud file; required unless the cloud is injected
    /// programmatically via [`run_with_cloud`].
    pub input: Option<PathBuf>,
    /// "xyz" or "ply"; inferred from the extension when absent.
    pub format: Option<String>,
    /// Output directory; no files are written when absent.
    pub outdir: Option<PathBuf>,
    /// Number of consecutive runs R.
    pub runs: u32,
    /// Grid-size constant: the first run targets Δx ≈ cs · h_S.
    pub cs: f64,
    /// Domain half-width M (domain is `[-M, M]^n`).
    pub domain_half_width: f64,
    /// Keep the front moving through flat-distance regions (tunnels).
    pub cavity_mode: bool,
    pub seed: u64,
    /// Worker threads; 0 = library default.
    pub workers: usize,
    /// Any of "vtk", "csv", "obj".
    pub exports: Vec<String>,
    /// Exact SDF id for synthetic error reporting:
    /// circle | sphere | square | cube-spheres.
    pub exact: Option<String>,
    /// Relative energy-stationarity threshold.
    pub stop_threshold: f64,
    pub max_iterations: u32,
    pub min_iterations: u32,
    /// Reinitialize every k steps (0 = never).
    pub reinit_every: u32,
    /// Δt = dt_factor · Δx_min.
    pub dt_factor: f64,
    /// Overrides of the per-run schedules, mostly for experiments.
    pub mu: Option<f64>,
    pub p: Option<u32>,
    /// "p1" or "cweno"; overrides the operator schedule for all runs.
    pub operator: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input: None,
            format: None,
            outdir: None,
            runs: 3,
            cs: 1.0,
            domain_half_width: 1.2,
            cavity_mode: false,
            seed: 0,
            workers: 0,
            exports: vec!["vtk".into(), "csv".into(), "obj".into()],
            exact: None,
            stop_threshold: 1e-4,
            max_iterations: 100,
            min_iterations: 10,
            reinit_every: 1,
            dt_factor: 1.5,
            mu: None,
            p: None,
            operator: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| PipelineError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.runs < 1 {
            return Err(PipelineError::Config("runs must be >= 1".into()));
        }
        if !(self.cs > 0.0) {
            return Err(PipelineError::Config("cs must be > 0".into()));
        }
        if !(self.domain_half_width > 1.0) {
            return Err(PipelineError::Config(
                "domain_half_width must be > 1".into(),
            ));
        }
        if !(self.dt_factor > 0.0) {
            return Err(PipelineError::Config("dt_factor must be > 0".into()));
        }
        if let Some(s) = &self.exact {
            if ExactSdf::parse(s).is_none() {
                return Err(PipelineError::Config(format!(
                    "unknown exact SDF id: {s}"
                )));
            }
        }
        if let Some(op) = &self.operator {
            if parse_operator(op).is_none() {
                return Err(PipelineError::Config(format!("unknown operator: {op}")));
            }
        }
        for e in &self.exports {
            if !matches!(e.as_str(), "vtk" | "csv" | "obj") {
                return Err(PipelineError::Config(format!("unknown export: {e}")));
            }
        }
        Ok(())
    }

    fn operator_for_run(&self, r: u32) -> Operator {
        if let Some(op) = self.operator.as_deref().and_then(parse_operator) {
            return op;
        }
        if r < self.runs {
            Operator::P1
        } else {
            Operator::Cweno
        }
    }

    fn p_for_run(&self, r: u32) -> u32 {
        self.p.unwrap_or(if r == 1 { 1 } else { 2 })
    }

    fn mu_for_run(&self, r: u32) -> f64 {
        self.mu.unwrap_or(if r < self.runs { 0.05 } else { 1.0 })
    }
}

fn parse_operator(s: &str) -> Option<Operator> {
    match s {
        "p1" => Some(Operator::P1),
        "cweno" => Some(Operator::Cweno),
        _ => None,
    }
}

/// One row of `run_log.csv`.
#[derive(Debug, Clone, Serialize)]
pub struct IterationRow {
    pub r: u32,
    pub n: u32,
    pub e2: f64,
    pub delta_e: f64,
    pub band_size: usize,
    pub err_s: f64,
    pub err_1: Option<f64>,
    pub wall_ms: f64,
}

/// Per-run summary.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub r: u32,
    pub iterations: u32,
    pub dx_min: f64,
    pub stop_reason: String,
    pub err_s: f64,
    pub err_1: Option<f64>,
    pub final_e2: f64,
}

/// Full report of a pipeline invocation. The final forest and field
/// are kept for programmatic consumers and skipped in JSON output.
#[derive(Debug, Serialize)]
pub struct RunReport {
    pub rows: Vec<IterationRow>,
    pub runs: Vec<RunSummary>,
    pub total_iterations: u32,
    pub err_s: f64,
    pub err_1: Option<f64>,
    #[serde(skip)]
    pub final_forest: Forest,
    #[serde(skip)]
    pub final_phi: Vec<f64>,
    #[serde(skip)]
    pub cloud: PointCloud,
    pub final_operator: Operator,
}

/// The resolution schedule of run `r` (1-based): the first run uses the
/// smallest level with `2M/2^L <= cs·h_S`, later runs halve Δx.
pub fn resolution_schedule(h_s: f64, cs: f64, m: f64, r: u32) -> (u32, f64, f64) {
    let target = cs * h_s;
    let mut level = 1u32;
    while 2.0 * m / (1u64 << level) as f64 > target {
        level += 1;
    }
    level += r - 1;
    let dx = 2.0 * m / (1u64 << level) as f64;
    (level, dx, 1.5 * dx)
}

/// Exact SDF of the enclosing sphere used as initial data: centred at
/// the cloud bounding-box centre, radius = max point distance + 4Δx.
pub fn initial_sphere(
    cloud: &PointCloud,
    m: f64,
    dx_min: f64,
) -> Result<(([f64; 3], f64), impl Fn(&[f64; 3]) -> f64), PipelineError> {
    let dim = cloud.dim();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in cloud.points() {
        for a in 0..dim {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let mut c = [0.0; 3];
    for a in 0..dim {
        c[a] = 0.5 * (lo[a] + hi[a]);
    }
    let rmax = cloud
        .points()
        .iter()
        .map(|p| {
            (0..dim)
                .map(|a| (p[a] - c[a]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0f64, f64::max);
    let radius = rmax + 4.0 * dx_min;
    for a in 0..dim {
        if c[a].abs() + radius > m + 1e-9 {
            return Err(PipelineError::Config(format!(
                "initial sphere (radius {radius:.4}) exceeds the domain; \
                 increase domain_half_width beyond {:.4}",
                c[a].abs() + radius
            )));
        }
    }
    let center = c;
    let f = move |x: &[f64; 3]| {
        (0..dim)
            .map(|a| (x[a] - center[a]).powi(2))
            .sum::<f64>()
            .sqrt()
            - radius
    };
    Ok(((c, radius), f))
}

/// Builds a fresh forest adapted to `|φ| < γ` (with 2:1 balance),
/// sampling φ from the given evaluator.
pub fn build_adapted(
    domain: Domain,
    eval: &dyn Fn(&[f64; 3]) -> f64,
    gamma: f64,
) -> (Forest, Vec<f64>) {
    let cap = domain.max_level();
    let base = cap.min(2);
    let mut forest = Forest::uniform(domain, base);
    let mut phi: Vec<f64> = Vec::new();
    let resample = |forest: &Forest, phi: &mut Vec<f64>| {
        phi.resize(forest.node_count(), f64::NAN);
        for id in forest.leaves() {
            if phi[id as usize].is_nan() {
                phi[id as usize] = eval(&forest.center(id));
            }
        }
    };
    resample(&forest, &mut phi);
    // Lipschitz slack: a coarse cell may straddle the interface while
    // its centre value exceeds γ, so widen the criterion by the cell
    // half-diagonal (φ is SDF-like, hence 1-Lipschitz near the front).
    let slack = 0.5 * (forest.dim() as f64).sqrt();
    loop {
        let mut changed = false;
        for id in forest.leaves() {
            if phi[id as usize].abs() < gamma + slack * forest.edge(id)
                && forest.level(id) < cap
            {
                forest.refine_structural(id).expect("leaf below cap");
                changed = true;
            }
        }
        if !changed {
            break;
        }
        resample(&forest, &mut phi);
    }
    loop {
        let viol = forest.balance_violations();
        if viol.is_empty() {
            break;
        }
        for id in viol {
            let _ = forest.refine_structural(id);
        }
        resample(&forest, &mut phi);
    }
    (forest, phi)
}

/// In-place grid adaptation: refine `|φ| < γ` leaves below the cap
/// (children valued by the leaf's reconstruction), coarsen families
/// with no child inside the band (mean transfer), restore 2:1 balance.
/// Returns whether the forest changed. Node ids are *not* compacted.
pub fn adapt_band(
    forest: &mut Forest,
    phi: &mut Vec<f64>,
    gamma: f64,
    operator: Operator,
) -> bool {
    let cap = forest.domain().max_level();
    let params = CwenoParams::default();
    let mut changed_any = false;

    let refine_with_poly = |forest: &mut Forest, phi: &mut Vec<f64>, id: NodeId| {
        // plateau cells hold the clamped constant ±γ: reconstructing
        // through them would leak sub-γ noise into the band criterion
        let parent_value = phi[id as usize];
        let poly = (parent_value.abs() < gamma)
            .then(|| operator.fit(forest, phi, id, &params));
        if let Ok(crate::grid::Refined::Children(kids)) = forest.refine_structural(id) {
            phi.resize(forest.node_count(), 0.0);
            let m = forest.domain().children_per_node();
            for &c in kids.iter().take(m) {
                phi[c as usize] = match &poly {
                    Some(p) => p.evaluate(&forest.center(c)),
                    None => parent_value,
                };
            }
            true
        } else {
            false
        }
    };

    loop {
        let mut changed = false;
        for id in forest.leaves() {
            if phi[id as usize].abs() < gamma && forest.level(id) < cap {
                changed |= refine_with_poly(forest, phi, id);
            }
        }
        if !changed {
            break;
        }
        changed_any = true;
    }

    loop {
        let mut changed = false;
        let leaves = forest.leaves();
        let mut families: std::collections::HashMap<NodeId, Vec<NodeId>> =
            std::collections::HashMap::new();
        for &id in &leaves {
            if let Some(p) = forest.parent(id) {
                families.entry(p).or_default().push(id);
            }
        }
        let m = forest.domain().children_per_node();
        let mut parents: Vec<NodeId> = families.keys().copied().collect();
        parents.sort_unstable();
        for p in parents {
            let kids = &families[&p];
            if kids.len() != m {
                continue;
            }
            let all_outside = kids.iter().all(|&c| phi[c as usize].abs() >= gamma);
            // families straddling a clamped sign change stay refined
            let same_sign = kids
                .iter()
                .all(|&c| phi[c as usize].signum() == phi[kids[0] as usize].signum());
            if all_outside && same_sign {
                let mut sorted = kids.clone();
                sorted.sort_unstable();
                if forest.coarsen_family(&sorted, &mut [phi]).is_ok() {
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
        changed_any = true;
    }

    loop {
        let viol = forest.balance_violations();
        if viol.is_empty() {
            break;
        }
        for id in viol {
            if forest.is_leaf(id) {
                changed_any |= refine_with_poly(forest, phi, id);
            }
        }
    }
    changed_any
}

/// Mean `|R[Φ](q)|` over the cloud, each point evaluated with its
/// containing leaf's polynomial (degenerate fits fall back to the
/// first sound neighbor polynomial).
pub fn err_cloud(
    forest: &Forest,
    phi: &[f64],
    cloud: &PointCloud,
    operator: Operator,
) -> f64 {
    let params = CwenoParams::default();
    let dim = forest.dim();
    let sum: f64 = cloud
        .points()
        .iter()
        .map(|q| {
            let leaf = match forest.locate_point(&q[..dim]) {
                Ok(l) => l,
                Err(_) => return 0.0,
            };
            let mut poly = operator.fit(forest, phi, leaf, &params);
            if poly.degenerate {
                for nb in forest.neighbors(leaf, crate::grid::Adjacency::EdgeCorner) {
                    let p = operator.fit(forest, phi, nb, &params);
                    if !p.degenerate {
                        poly = p;
                        break;
                    }
                }
            }
            poly.evaluate(q).abs()
        })
        .sum();
    sum / cloud.len() as f64
}

/// Volume-weighted mean `|φ - φ*|` over the band `{|φ| < γ}`.
pub fn err_l1(
    forest: &Forest,
    phi: &[f64],
    gamma: f64,
    exact: &dyn Fn(&[f64; 3]) -> f64,
) -> f64 {
    let dim = forest.dim() as i32;
    let mut num = 0.0;
    let mut den = 0.0;
    for id in forest.leaves() {
        let v = phi[id as usize];
        if v.abs() < gamma {
            let vol = forest.edge(id).powi(dim);
            num += vol * (v - exact(&forest.center(id))).abs();
            den += vol;
        }
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

fn delta_e(history: &[f64], threshold_k: usize) -> f64 {
    let n = history.len();
    if n < 2 {
        return f64::INFINITY;
    }
    let mean_last = |upto: usize| -> f64 {
        let k = upto.min(threshold_k);
        history[upto - k..upto].iter().sum::<f64>() / k as f64
    };
    let e_n = mean_last(n);
    let e_prev = mean_last(n - 1);
    if e_n == 0.0 {
        return 0.0;
    }
    (e_prev - e_n).abs() / e_n
}

struct RunOutcome {
    forest: Forest,
    phi: Vec<f64>,
    iterations: u32,
    stop_reason: String,
    final_e2: f64,
}

/// Loads the cloud named in the config and executes the pipeline.
pub fn run(config: &RunConfig) -> Result<RunReport, PipelineError> {
    let path = config
        .input
        .clone()
        .ok_or_else(|| PipelineError::Config("no input cloud given".into()))?;
    let format = match config.format.as_deref() {
        Some("xyz") => CloudFormat::Xyz,
        Some("ply") => CloudFormat::Ply,
        Some(other) => {
            return Err(PipelineError::Config(format!("unknown format: {other}")))
        }
        None => match path.extension().and_then(|e| e.to_str()) {
            Some("ply") => CloudFormat::Ply,
            _ => CloudFormat::Xyz,
        },
    };
    let cloud = PointCloud::load(&path, format)?;
    run_with_cloud(config, cloud)
}

/// Executes the pipeline on an already-built cloud.
pub fn run_with_cloud(
    config: &RunConfig,
    cloud: PointCloud,
) -> Result<RunReport, PipelineError> {
    config.validate()?;
    if config.workers > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| PipelineError::Config(format!("worker pool: {e}")))?;
        pool.install(|| run_inner(config, &cloud))
    } else {
        run_inner(config, &cloud)
    }
}

fn run_inner(config: &RunConfig, cloud: &PointCloud) -> Result<RunReport, PipelineError> {
    let dim = cloud.dim();
    let m = config.domain_half_width;
    let exact = config.exact.as_deref().and_then(ExactSdf::parse);
    if let Some(e) = exact {
        if e.dim() != dim {
            return Err(PipelineError::Config(format!(
                "exact SDF is {}D but the cloud is {}D",
                e.dim(),
                dim
            )));
        }
    }
    let transform = *cloud.transform();
    let exact_fn = exact.map(|e| move |x: &[f64; 3]| e.eval_scaled(x, &transform));

    let h_s = cloud.estimate_resolution(0.1, config.seed);
    if !(h_s > 0.0) {
        return Err(PipelineError::Config(
            "could not estimate cloud resolution".into(),
        ));
    }

    let mut rows: Vec<IterationRow> = Vec::new();
    let mut summaries: Vec<RunSummary> = Vec::new();
    let mut prev: Option<(Forest, Vec<f64>, f64, Operator)> = None;

    for r in 1..=config.runs {
        let (level, dx, dt) = resolution_schedule(h_s, config.cs, m, r);
        let gamma = 4.0 * dt;
        let operator = config.operator_for_run(r);
        let domain = Domain::new(dim, m, level)
            .map_err(|e| PipelineError::Config(e.to_string()))?;

        let (forest, mut phi) = match &prev {
            None => {
                let (_, sphere) = initial_sphere(cloud, m, dx)?;
                build_adapted(domain, &sphere, gamma)
            }
            Some((old_forest, old_phi, old_gamma, _)) => {
                // carry the previous run's field, reconstructed with
                // the newly active operator, onto the finer grid
                let band: Vec<NodeId> = old_forest
                    .leaves()
                    .into_iter()
                    .filter(|&id| old_phi[id as usize].abs() < *old_gamma)
                    .collect();
                let cache = PolyCache::build(
                    old_forest,
                    old_phi,
                    &band,
                    operator,
                    CwenoParams::default(),
                );
                let og = *old_gamma;
                let eval = move |x: &[f64; 3]| {
                    let leaf = old_forest
                        .locate_point(&x[..dim])
                        .expect("handoff point inside the domain");
                    let v = old_phi[leaf as usize];
                    if v.abs() < og {
                        match cache.cached(leaf) {
                            Some(p) => p.evaluate(x),
                            None => cache.get(old_forest, old_phi, leaf).evaluate(x),
                        }
                    } else {
                        v
                    }
                };
                build_adapted(domain, &eval, gamma)
            }
        };
        cut(&mut phi, &forest, gamma);

        let out = run_single(
            config, cloud, forest, phi, r, dt, gamma, operator, &exact_fn, &mut rows,
        )?;
        let forest = out.forest;
        let phi = out.phi;

        let err_s = err_cloud(&forest, &phi, cloud, operator);
        let err_1 = exact_fn
            .as_ref()
            .map(|f| err_l1(&forest, &phi, gamma, f));
        summaries.push(RunSummary {
            r,
            iterations: out.iterations,
            dx_min: dx,
            stop_reason: out.stop_reason,
            err_s,
            err_1,
            final_e2: out.final_e2,
        });

        if let Some(dir) = &config.outdir {
            if config.exports.iter().any(|e| e == "vtk") {
                export_grid_vtk(dir, r, &forest, &phi, cloud)?;
            }
        }
        prev = Some((forest, phi, gamma, operator));
    }

    let (final_forest, final_phi, final_gamma, final_operator) = prev.unwrap();
    let total_iterations = summaries.iter().map(|s| s.iterations).sum();
    let last = summaries.last().unwrap();
    let report = RunReport {
        rows,
        total_iterations,
        err_s: last.err_s,
        err_1: last.err_1,
        runs: summaries,
        final_forest,
        final_phi,
        cloud: cloud.clone(),
        final_operator,
    };

    if let Some(dir) = &config.outdir {
        export_outputs(dir, config, &report, final_gamma)?;
    }
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn run_single(
    config: &RunConfig,
    cloud: &PointCloud,
    mut forest: Forest,
    mut phi: Vec<f64>,
    r: u32,
    dt: f64,
    gamma: f64,
    operator: Operator,
    exact_fn: &Option<impl Fn(&[f64; 3]) -> f64>,
    rows: &mut Vec<IterationRow>,
) -> Result<RunOutcome, PipelineError> {
    let p = config.p_for_run(r);
    let mu = config.mu_for_run(r);
    let mut params = SolverParams::new(p, mu, dt);
    params.cavity_mode = config.cavity_mode;

    let numerical = |n: u32, e: crate::error::SolverError| PipelineError::Numerical {
        run: r,
        iteration: n,
        source: e,
    };

    // ∇d is only read on the active set {|φ| < γ}; skipping the far
    // leaves saves a full pass of P1 fits per rebuild
    let rebuild_distance = |forest: &Forest,
                            phi: &[f64],
                            table: &NeighborTable|
     -> Result<(Vec<f64>, Vec<[f64; 3]>), PipelineError> {
        let st = distance_field_with(forest, cloud, table)
            .map_err(|e| numerical(0, crate::error::SolverError::Propagation(e)))?;
        let near: Vec<NodeId> = forest
            .leaves()
            .into_iter()
            .filter(|&id| phi[id as usize].abs() < gamma)
            .collect();
        let grad = gradient_field_with(forest, &st.value, &near, Some(table));
        Ok((st.value, grad))
    };
    // adjacency is static between grid adaptations; every per-iteration
    // consumer shares this one table
    let mut table = forest.neighbor_table(&forest.leaves(), Adjacency::EdgeCorner);
    let (mut d, mut grad_d) = rebuild_distance(&forest, &phi, &table)?;

    let mut energies: Vec<f64> = Vec::new();
    let mut stop_reason = String::new();
    let mut n = 0u32;
    let mut final_e2 = 0.0;

    while n < config.max_iterations {
        n += 1;
        let t0 = Instant::now();

        let band =
            select_band_with(&forest, &phi, dt, Some(&table)).map_err(|e| numerical(n, e))?;
        let front =
            detect_front_with(&forest, &phi, Some(&table)).map_err(|e| numerical(n, e))?;
        let e2 = compute_energy(&forest, &d, &front, 2);
        let e_p = if p == 2 {
            e2
        } else {
            compute_energy(&forest, &d, &front, p)
        };
        final_e2 = e2;

        let (next, _stats) = sl_step_with(
            &forest, &phi, &d, &grad_d, &params, &band, e_p, operator, Some(&table),
        )
        .map_err(|e| numerical(n, e))?;
        phi = next;
        if config.reinit_every > 0 && n % config.reinit_every == 0 {
            let (re, _) = reinitialize_with(&forest, &phi, &band, operator, Some(&table))
                .map_err(|e| numerical(n, e))?;
            phi = re;
        }
        cut(&mut phi, &forest, gamma);

        if adapt_band(&mut forest, &mut phi, gamma, operator) {
            forest.compact(&mut [&mut phi]);
            table = forest.neighbor_table(&forest.leaves(), Adjacency::EdgeCorner);
            let (nd, ng) = rebuild_distance(&forest, &phi, &table)?;
            d = nd;
            grad_d = ng;
        }

        energies.push(e2);
        let de = delta_e(&energies, 10);
        let band_size = forest
            .leaves()
            .iter()
            .filter(|&&id| phi[id as usize].abs() < gamma)
            .count();
        let err_s = err_cloud(&forest, &phi, cloud, operator);
        let err_1 = exact_fn.as_ref().map(|f| err_l1(&forest, &phi, gamma, f));
        rows.push(IterationRow {
            r,
            n,
            e2,
            delta_e: de,
            band_size,
            err_s,
            err_1,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });

        if n >= config.min_iterations && de < config.stop_threshold {
            stop_reason = "energy-stationary".into();
            break;
        }
    }
    if stop_reason.is_empty() {
        stop_reason = "max-iterations".into();
    }

    Ok(RunOutcome {
        forest,
        phi,
        iterations: n,
        stop_reason,
        final_e2,
    })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn export_grid_vtk(
    dir: &Path,
    r: u32,
    forest: &Forest,
    phi: &[f64],
    cloud: &PointCloud,
) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(format!("grid_r{r}_final.vtk"));
    let st = distance_field(forest, cloud)
        .map_err(|e| PipelineError::Numerical {
            run: r,
            iteration: 0,
            source: crate::error::SolverError::Propagation(e),
        })?;
    let level: Vec<f64> = (0..forest.node_count() as u32)
        .map(|id| forest.level(id) as f64)
        .collect();
    let mut f = std::fs::File::create(&path).map_err(io_err(&path))?;
    forest
        .write_vtk(
            &mut f,
            &[("phi", phi), ("d", &st.value), ("level", &level)],
        )
        .map_err(io_err(&path))?;
    Ok(())
}

fn export_outputs(
    dir: &Path,
    config: &RunConfig,
    report: &RunReport,
    gamma: f64,
) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;

    if config.exports.iter().any(|e| e == "csv") {
        let path = dir.join("run_log.csv");
        let mut f = std::fs::File::create(&path).map_err(io_err(&path))?;
        writeln!(f, "r,n,E2,deltaE,band_size,ErrS,Err1,wall_ms").map_err(io_err(&path))?;
        for row in &report.rows {
            let err1 = row
                .err_1
                .map(|v| format!("{v:.8e}"))
                .unwrap_or_default();
            writeln!(
                f,
                "{},{},{:.8e},{:.8e},{},{:.8e},{},{:.3}",
                row.r, row.n, row.e2, row.delta_e, row.band_size, row.err_s, err1, row.wall_ms
            )
            .map_err(io_err(&path))?;
        }
    }

    let forest = &report.final_forest;
    let phi = &report.final_phi;
    let band: Vec<NodeId> = forest
        .leaves()
        .into_iter()
        .filter(|&id| phi[id as usize].abs() < gamma)
        .collect();
    if forest.dim() == 2 {
        if config.exports.iter().any(|e| e == "csv") {
            let lines = extract_contour_2d(
                forest,
                phi,
                &band,
                report.final_operator,
                report.cloud.transform(),
            );
            let path = dir.join("contour_final.csv");
            let mut f = std::fs::File::create(&path).map_err(io_err(&path))?;
            lines.write_csv(&mut f).map_err(io_err(&path))?;
        }
    } else if config.exports.iter().any(|e| e == "obj") {
        let mesh = extract_mesh_3d(
            forest,
            phi,
            &band,
            report.final_operator,
            report.cloud.transform(),
        );
        let path = dir.join("surface_final.obj");
        let mut f = std::fs::File::create(&path).map_err(io_err(&path))?;
        mesh.write_obj(&mut f).map_err(io_err(&path))?;
    }

    let path = dir.join("report.json");
    let body = serde_json::json!({
        "config": config,
        "stop_reasons": report.runs.iter().map(|s| s.stop_reason.clone()).collect::<Vec<_>>(),
        "runs": report.runs,
        "final": {
            "err_s": report.err_s,
            "err_1": report.err_1,
            "total_iterations": report.total_iterations,
        },
    });
    std::fs::write(&path, serde_json::to_string_pretty(&body).unwrap())
        .map_err(io_err(&path))?;
    Ok(())
}
