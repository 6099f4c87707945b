//! End-to-end acceptance suite: benchmark reproductions, analytic
//! oracles and structural invariants. Each test prints a single
//! `criterion N (...): PASS` line on success (visible with
//! `cargo test --test acceptance -- --nocapture`).

use std::time::Instant;

use lsrecon::cloud::ScaleTransform;
use lsrecon::grid::{Adjacency, Domain, Forest};
use lsrecon::isosurface::extract_mesh_3d;
use lsrecon::pipeline::{self, RunConfig};
use lsrecon::propagation::distance_field;
use lsrecon::recon::{fit_cweno, fit_p1, CwenoParams, Operator};
use lsrecon::reinit::reinitialize;
use lsrecon::shapes;
use lsrecon::solver::{select_band, sl_step, SolverParams};
use lsrecon::PointCloud;

fn pass(n: u32, name: &str) {
    println!("criterion {n} ({name}): PASS");
}

/// Deterministic uniform samples in [0, 1).
fn lcg(seed: u64) -> impl FnMut() -> f64 {
    let mut s = seed.wrapping_add(0x9e3779b97f4a7c15);
    move || {
        s = s
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (s >> 11) as f64 / (1u64 << 53) as f64
    }
}

fn uniform_with_field(
    dim: usize,
    m: f64,
    level: u32,
    f: &dyn Fn(&[f64; 3]) -> f64,
) -> (Forest, Vec<f64>) {
    let domain = Domain::new(dim, m, level).unwrap();
    let forest = Forest::uniform(domain, level);
    let phi: Vec<f64> = (0..forest.node_count() as u32)
        .map(|id| f(&forest.center(id)))
        .collect();
    (forest, phi)
}

#[test]
fn criterion_01_square_benchmark() {
    let cloud = PointCloud::from_points(2, shapes::square_cloud()).unwrap();
    let cfg = RunConfig {
        runs: 3,
        cs: 0.5,
        domain_half_width: 2.4,
        exact: Some("square".into()),
        exports: vec![],
        workers: 1,
        ..Default::default()
    };
    let t0 = Instant::now();
    let rep = pipeline::run_with_cloud(&cfg, cloud).unwrap();
    let wall = t0.elapsed().as_secs_f64();

    assert!(
        (rep.runs[0].dx_min - 0.15).abs() < 1e-12,
        "first-run dx {} != 0.15",
        rep.runs[0].dx_min
    );
    let err1 = rep.err_1.unwrap();
    assert!(
        (0.5e-3..=4.4e-3).contains(&err1),
        "Err1 {err1:.4e} outside [0.5e-3, 4.4e-3]"
    );
    assert!(
        (2e-3..=1.8e-2).contains(&rep.err_s),
        "ErrS {:.4e} outside [2e-3, 1.8e-2]",
        rep.err_s
    );
    assert!(rep.total_iterations <= 100, "{} iterations", rep.total_iterations);
    assert!(wall < 60.0, "took {wall:.1}s single-threaded");
    pass(1, "square 2D benchmark");
}

#[test]
fn criterion_02_cube_spheres_benchmark() {
    let pts = shapes::cube_spheres_cloud();
    assert_eq!(pts.len(), 2346);
    let cloud = PointCloud::from_points(3, pts).unwrap();
    let cfg = RunConfig {
        runs: 3,
        cs: 2.0,
        domain_half_width: 2.2,
        exact: Some("cube-spheres".into()),
        exports: vec![],
        ..Default::default()
    };
    let t0 = Instant::now();
    let rep = pipeline::run_with_cloud(&cfg, cloud).unwrap();
    let wall = t0.elapsed().as_secs_f64();

    let err1 = rep.err_1.unwrap();
    let (lo1, hi1) = (2.48e-3 / 3.0, 2.48e-3 * 3.0);
    assert!(
        (lo1..=hi1).contains(&err1),
        "Err1 {err1:.4e} outside [{lo1:.2e}, {hi1:.2e}]"
    );
    let (los, his) = (5.22e-3 / 3.0, 5.22e-3 * 3.0);
    assert!(
        (los..=his).contains(&rep.err_s),
        "ErrS {:.4e} outside [{los:.2e}, {his:.2e}]",
        rep.err_s
    );
    assert!(wall < 1800.0, "took {wall:.0}s");
    pass(2, "cube & spheres 3D benchmark");
}

/// Runs pure curvature flow (`d` constant, `∇d = 0`, `p = 1`) on a
/// circle/sphere SDF and returns (measured radius, expected radius).
fn curvature_shrink(dim: usize, level: u32, mu: f64, d0: f64, t_target: f64) -> (f64, f64, f64) {
    let m = 1.2;
    let r0 = 0.8;
    let sdf = |x: &[f64; 3]| {
        (0..dim).map(|a| x[a] * x[a]).sum::<f64>().sqrt() - r0
    };
    let (forest, mut phi) = uniform_with_field(dim, m, level, &sdf);
    let dx = forest.domain().dx_min();
    let dt = 1.5 * dx;
    let steps = (t_target / dt).ceil() as u32;
    let t = steps as f64 * dt;

    let n = forest.node_count();
    let d = vec![d0; n];
    let grad_d = vec![[0.0; 3]; n];
    let params = SolverParams::new(1, mu, dt);
    for _ in 0..steps {
        let band = select_band(&forest, &phi, dt).unwrap();
        let (next, _) =
            sl_step(&forest, &phi, &d, &grad_d, &params, &band, 1.0, Operator::Cweno).unwrap();
        phi = next;
    }

    // zero crossing of φ along the +x axis by bisection
    let cw = CwenoParams::default();
    let eval = |x: f64| {
        let p = [x, 0.0, 0.0];
        let leaf = forest.locate_point(&p[..dim]).unwrap();
        Operator::Cweno.fit(&forest, &phi, leaf, &cw).evaluate(&p)
    };
    let (mut a, mut b) = (0.3, r0 + 2.0 * dx);
    assert!(eval(a) < 0.0 && eval(b) > 0.0, "front left the bracket");
    for _ in 0..60 {
        let mid = 0.5 * (a + b);
        if eval(mid) < 0.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    // mean-curvature speed μ d κ: dR/dt = -μ d₀ (n-1)/R
    let factor = 2.0 * (dim - 1) as f64;
    let expected = (r0 * r0 - factor * mu * d0 * t).sqrt();
    (0.5 * (a + b), expected, dx)
}

#[test]
fn criterion_03_curvature_flow_oracle() {
    for level in [5u32, 6, 7] {
        let (got, want, dx) = curvature_shrink(2, level, 0.25, 0.5, 0.35);
        assert!(
            (got - want).abs() < 2.0 * dx,
            "2D level {level}: radius {got:.4} vs {want:.4} (2dx = {:.4})",
            2.0 * dx
        );
    }
    for level in [4u32, 5] {
        let (got, want, dx) = curvature_shrink(3, level, 0.25, 0.5, 0.2);
        assert!(
            (got - want).abs() < 2.0 * dx,
            "3D level {level}: radius {got:.4} vs {want:.4} (2dx = {:.4})",
            2.0 * dx
        );
    }
    pass(3, "curvature-flow radius law");
}

#[test]
fn criterion_04_reconstruction_order() {
    let f = |x: &[f64; 3]| (1.3 * x[0] + 0.7 * x[1]).sin() + 0.3 * (2.0 * x[0] - x[1]).cos();
    let cw = CwenoParams::default();
    let mut errs_p1 = Vec::new();
    let mut errs_cw = Vec::new();
    for level in [4u32, 5, 6] {
        let (forest, phi) = uniform_with_field(2, 1.2, level, &f);
        let (mut e1, mut e3) = (0.0f64, 0.0f64);
        for id in forest.leaves() {
            let c = forest.center(id);
            if c[0].abs() > 0.5 || c[1].abs() > 0.5 {
                continue;
            }
            let h = forest.edge(id);
            let q = [c[0] + 0.3 * h, c[1] + 0.3 * h, 0.0];
            let exact = f(&q);
            e1 = e1.max((fit_p1(&forest, &phi, id).evaluate(&q) - exact).abs());
            let (p, _) = fit_cweno(&forest, &phi, id, &cw);
            e3 = e3.max((p.evaluate(&q) - exact).abs());
        }
        errs_p1.push(e1);
        errs_cw.push(e3);
    }
    for w in errs_p1.windows(2) {
        let order = (w[0] / w[1]).log2();
        assert!(order >= 1.7, "P1 order {order:.2} < 1.7 ({errs_p1:?})");
    }
    for w in errs_cw.windows(2) {
        let order = (w[0] / w[1]).log2();
        assert!(order >= 2.5, "CWENO order {order:.2} < 2.5 ({errs_cw:?})");
    }

    // exact affine reproduction on a graded (2:1) stencil
    let lin = |x: &[f64; 3]| 0.3 + 1.7 * x[0] - 0.9 * x[1];
    let domain = Domain::new(2, 1.2, 4).unwrap();
    let mut forest = Forest::uniform(domain, 3);
    for id in forest.leaves() {
        let c = forest.center(id);
        if c[0] > 0.0 && c[1] > 0.0 {
            forest.refine_structural(id).unwrap();
        }
    }
    loop {
        let viol = forest.balance_violations();
        if viol.is_empty() {
            break;
        }
        for id in viol {
            let _ = forest.refine_structural(id);
        }
    }
    let phi: Vec<f64> = (0..forest.node_count() as u32)
        .map(|id| lin(&forest.center(id)))
        .collect();
    for id in forest.leaves() {
        let c = forest.center(id);
        let h = forest.edge(id);
        // boundary cells have one-sided stencils with degenerate
        // laterals; affine exactness is an interior-stencil property
        if c[0].abs() + 0.51 * h > 1.2 || c[1].abs() + 0.51 * h > 1.2 {
            continue;
        }
        let q = [c[0] + 0.4 * h, c[1] - 0.4 * h, 0.0];
        let (p, _) = fit_cweno(&forest, &phi, id, &cw);
        assert!(
            (p.evaluate(&q) - lin(&q)).abs() < 1e-12,
            "affine reproduction broke at {c:?}"
        );
        assert!((fit_p1(&forest, &phi, id).evaluate(&q) - lin(&q)).abs() < 1e-12);
    }
    pass(4, "reconstruction order and affine exactness");
}

#[test]
fn criterion_05_cweno_non_oscillation() {
    // step data with the jump at x = 0 on dx = 1/64
    let step = |x: &[f64; 3]| if x[0] < 0.0 { 0.0 } else { 1.0 };
    let (forest, phi) = uniform_with_field(2, 1.2, 8, &step);
    let dx = forest.domain().dx_min();
    assert!(dx <= 1.0 / 64.0 + 1e-15);

    let leaf = forest.locate_point(&[-0.5 * dx, 0.5 * dx]).unwrap();
    let (_, w) = fit_cweno(&forest, &phi, leaf, &CwenoParams::default());
    // omega[0] is the optimal weight; laterals follow in sign order
    // (-,-), (+,-), (-,+), (+,+) — those reaching across the jump
    // (positive x sign) are polluted.
    let max_w = w.omega.iter().cloned().fold(0.0f64, f64::max);
    for &k in &[2usize, 4] {
        assert!(
            w.omega[k] < 1e-2 * max_w,
            "polluted lateral weight {:.3e} vs max {:.3e}",
            w.omega[k],
            max_w
        );
    }
    pass(5, "CWENO step-data weight suppression");
}

fn random_cloud_distance_check(dim: usize, target_level: u32, seed: u64) {
    let mut rng = lcg(seed);
    let npts = if dim == 2 { 30 } else { 25 };
    let pts: Vec<[f64; 3]> = (0..npts)
        .map(|_| {
            let mut p = [0.0; 3];
            for a in p.iter_mut().take(dim) {
                *a = 1.8 * rng() - 0.9;
            }
            p
        })
        .collect();
    let cloud = PointCloud::from_scaled(dim, pts);

    let domain = Domain::new(dim, 1.2, target_level).unwrap();
    let mut forest = Forest::uniform(domain, if dim == 2 { 3 } else { 2 });
    loop {
        let mut changed = false;
        for p in cloud.points() {
            let leaf = forest.locate_point(&p[..dim]).unwrap();
            if forest.level(leaf) < target_level {
                forest.refine_structural(leaf).unwrap();
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    loop {
        let viol = forest.balance_violations();
        if viol.is_empty() {
            break;
        }
        for id in viol {
            let _ = forest.refine_structural(id);
        }
    }

    let st = distance_field(&forest, &cloud).unwrap();
    let dx_min = forest.domain().dx_min();
    let leaves = forest.leaves();
    let mut exact = 0usize;
    for &id in &leaves {
        let c = forest.center(id);
        let brute = cloud
            .points()
            .iter()
            .map(|q| {
                (0..dim)
                    .map(|a| (q[a] - c[a]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(f64::INFINITY, f64::min);
        let g = st.value[id as usize];
        assert!(g >= brute - 1e-12, "distance below the true minimum");
        assert!(
            g - brute <= dx_min,
            "leaf {id}: propagated {g:.5} vs brute {brute:.5}"
        );
        if (g - brute).abs() < 1e-12 {
            exact += 1;
        }
    }
    assert!(
        exact as f64 >= 0.99 * leaves.len() as f64,
        "only {exact}/{} leaves exact (seed {seed})",
        leaves.len()
    );
}

#[test]
fn criterion_06_distance_oracle() {
    for seed in 0..5u64 {
        random_cloud_distance_check(2, 6, seed);
    }
    for seed in 0..2u64 {
        random_cloud_distance_check(3, 5, 100 + seed);
    }
    pass(6, "propagated distance vs brute force");
}

#[test]
fn criterion_07_reinitialization() {
    // ×2-scaled circle SDF on an adapted band grid
    let scaled = |x: &[f64; 3]| 2.0 * ((x[0] * x[0] + x[1] * x[1]).sqrt() - 0.6);
    let domain = Domain::new(2, 1.2, 7).unwrap();
    let dx = domain.dx_min();
    let dt = 1.5 * dx;
    let gamma = 4.0 * dt;
    let (forest, phi0) = pipeline::build_adapted(domain, &scaled, gamma);

    let band = select_band(&forest, &phi0, dt).unwrap();
    let (phi1, _) = reinitialize(&forest, &phi0, &band, Operator::Cweno).unwrap();

    // gradient norm restored to 1 on the active set
    for &id in &band.active {
        let g = fit_p1(&forest, &phi1, id).gradient(&forest.center(id));
        let gn = (g[0] * g[0] + g[1] * g[1]).sqrt();
        assert!(
            (gn - 1.0).abs() < 0.1,
            "|grad phi| = {gn:.4} at leaf {id}"
        );
    }

    // sign preservation is exact
    for id in forest.leaves() {
        assert_eq!(
            phi1[id as usize].signum(),
            phi0[id as usize].signum(),
            "sign flipped at leaf {id}"
        );
    }

    // idempotence: exact on flat data, curvature-limited on the circle
    let band1 = select_band(&forest, &phi1, dt).unwrap();
    let (phi2, _) = reinitialize(&forest, &phi1, &band1, Operator::Cweno).unwrap();
    let drift = band1
        .active
        .iter()
        .map(|&id| (phi2[id as usize] - phi1[id as usize]).abs())
        .fold(0.0f64, f64::max);
    assert!(
        drift < 4.0 * dx.powi(3),
        "circle drift {drift:.3e} vs 4dx^3 = {:.3e}",
        4.0 * dx.powi(3)
    );

    let plane = |x: &[f64; 3]| x[0] + 0.3;
    let (pf, pphi0) = uniform_with_field(2, 1.2, 5, &plane);
    let pdx = pf.domain().dx_min();
    let pband = select_band(&pf, &pphi0, 1.5 * pdx).unwrap();
    let (pphi1, _) = reinitialize(&pf, &pphi0, &pband, Operator::Cweno).unwrap();
    let pband1 = select_band(&pf, &pphi1, 1.5 * pdx).unwrap();
    let (pphi2, _) = reinitialize(&pf, &pphi1, &pband1, Operator::Cweno).unwrap();
    let pdrift = pband1
        .active
        .iter()
        .map(|&id| (pphi2[id as usize] - pphi1[id as usize]).abs())
        .fold(0.0f64, f64::max);
    assert!(
        pdrift < 1e-6 * pdx,
        "plane drift {pdrift:.3e} vs 1e-6 dx = {:.3e}",
        1e-6 * pdx
    );
    pass(7, "reinitialization accuracy and idempotence");
}

#[test]
fn criterion_08_grid_invariants() {
    let m = 1.2;
    let domain = Domain::new(2, m, 6).unwrap();
    let dt = 1.5 * domain.dx_min();
    let gamma = 4.0 * dt;
    let circle = |r: f64| move |x: &[f64; 3]| (x[0] * x[0] + x[1] * x[1]).sqrt() - r;
    let (mut forest, mut phi) = pipeline::build_adapted(domain, &circle(0.5), gamma);
    let vol_exact = (2.0 * m).powi(2);

    for k in 1..=5u32 {
        // move the interface and re-adapt; balance and the volume
        // partition must hold after every step
        let r = 0.5 + 0.08 * k as f64;
        let f = circle(r);
        phi.resize(forest.node_count(), 0.0);
        for id in forest.leaves() {
            phi[id as usize] = f(&forest.center(id));
        }
        pipeline::adapt_band(&mut forest, &mut phi, gamma, Operator::P1);
        assert!(
            forest.is_balanced(Adjacency::EdgeCorner),
            "balance broken after adapt {k}"
        );
        let vol = forest.total_volume();
        assert!(
            ((vol - vol_exact) / vol_exact).abs() < 1e-12,
            "volume {vol} != {vol_exact} after adapt {k}"
        );
    }

    // refine/coarsen round trip is exact on linear data
    let lin = |x: &[f64; 3]| 0.2 + 0.7 * x[0] - 1.3 * x[1];
    let mut f2 = Forest::uniform(Domain::new(2, 1.2, 4).unwrap(), 3);
    let mut phi2: Vec<f64> = (0..f2.node_count() as u32)
        .map(|id| lin(&f2.center(id)))
        .collect();
    let leaf = f2.locate_point(&[0.3, -0.4]).unwrap();
    let before = phi2[leaf as usize];
    let poly = fit_p1(&f2, &phi2, leaf);
    if let lsrecon::grid::Refined::Children(kids) = f2.refine_structural(leaf).unwrap() {
        phi2.resize(f2.node_count(), 0.0);
        let mut fam: Vec<_> = kids.iter().take(4).copied().collect();
        for &c in &fam {
            phi2[c as usize] = poly.evaluate(&f2.center(c));
        }
        fam.sort_unstable();
        f2.coarsen_family(&fam, &mut [&mut phi2]).unwrap();
    } else {
        panic!("refine produced no children");
    }
    assert!(
        (phi2[leaf as usize] - before).abs() < 1e-14,
        "round trip changed a linear value"
    );
    pass(8, "grid balance, volume partition, round trip");
}

#[test]
fn criterion_09_tunnel_cavity_detection() {
    // two point rows at y = ±0.15 spanning x ∈ [-0.75, 0.75]
    let pts = shapes::tunnel_cloud(1.5, 0.3, 0.05);
    // single run at dx = 0.01875 so the switch threshold 4dx sits well
    // inside the gap half-width; p = 2 pins the walls (the advective
    // speed scales with d), mu = 0.05 keeps the entering finger from
    // eroding; the run ends when the energy freezes at the steady state
    let mk = |cavity: bool| RunConfig {
        runs: 1,
        cs: 0.4,
        domain_half_width: 1.2,
        cavity_mode: cavity,
        exports: vec![],
        p: Some(2),
        mu: Some(0.05),
        stop_threshold: 1e-6,
        max_iterations: 200,
        ..Default::default()
    };
    let run = |cavity: bool| {
        let cloud = PointCloud::from_scaled(2, pts.clone());
        pipeline::run_with_cloud(&mk(cavity), cloud).unwrap()
    };

    let off = run(false);
    let leaf = off.final_forest.locate_point(&[0.0, 0.0]).unwrap();
    let phi_off = off.final_phi[leaf as usize];
    assert!(
        phi_off < -1e-3,
        "front entered the tunnel with the switch off (phi {phi_off:.4})"
    );

    let on = run(true);
    let leaf = on.final_forest.locate_point(&[0.0, 0.0]).unwrap();
    let phi_on = on.final_phi[leaf as usize];
    assert!(
        phi_on > 1e-3,
        "front never carved the tunnel with the switch on (phi {phi_on:.4})"
    );

    // interior wall fidelity, away from the open ends
    let dx_min = on.final_forest.domain().dx_min();
    let cw = CwenoParams::default();
    for q in pts.iter().filter(|q| q[0].abs() <= 0.45) {
        let leaf = on.final_forest.locate_point(&q[..2]).unwrap();
        let p = on
            .final_operator
            .fit(&on.final_forest, &on.final_phi, leaf, &cw);
        let r = p.evaluate(q).abs();
        assert!(
            r < 2.0 * dx_min,
            "wall point {q:?}: |R[phi]| = {r:.4e} vs 2dx = {:.4e}",
            2.0 * dx_min
        );
    }
    pass(9, "tunnel cavity switch");
}

#[test]
fn criterion_10_watertight_meshes() {
    let sphere = |x: &[f64; 3]| (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt() - 0.7;
    let blob = |x: &[f64; 3]| {
        ((x[0] / 0.7).powi(2) + (x[1] / 0.5).powi(2) + (x[2] / 0.6).powi(2)).sqrt() - 1.0
    };
    let fields: [&dyn Fn(&[f64; 3]) -> f64; 2] = [&sphere, &blob];
    for (fi, f) in fields.iter().enumerate() {
        for level in [4u32, 5] {
            let (forest, phi) = uniform_with_field(3, 1.2, level, f);
            let band: Vec<_> = forest
                .leaves()
                .into_iter()
                .filter(|&id| phi[id as usize].abs() < 0.25)
                .collect();
            let mesh = extract_mesh_3d(
                &forest,
                &phi,
                &band,
                Operator::Cweno,
                &ScaleTransform::identity(),
            );
            assert!(
                !mesh.triangles.is_empty(),
                "field {fi} level {level}: empty mesh"
            );
            assert!(
                mesh.is_watertight(),
                "field {fi} level {level}: open edges"
            );
        }
    }
    pass(10, "watertight surface extraction");
}
