//! Synthetic benchmark shapes: point-cloud generators and the exact
//! signed distance functions used for error reporting.

use crate::cloud::ScaleTransform;

/// Named exact SDF selectable from configuration (`--exact`). The
/// fields are evaluated in original (pre-rescale) coordinates and
/// transformed through the cloud's [`ScaleTransform`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExactSdf {
    /// Unit circle `|x| - 1` (2D).
    Circle,
    /// Unit sphere `|x| - 1` (3D).
    Sphere,
    /// Square `[-1, 1]^2`.
    Square,
    /// The axis-aligned Cube&Spheres solid of [`cube_spheres_sdf`].
    CubeSpheres,
}

impl ExactSdf {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "circle" => Some(ExactSdf::Circle),
            "sphere" => Some(ExactSdf::Sphere),
            "square" => Some(ExactSdf::Square),
            "cube-spheres" => Some(ExactSdf::CubeSpheres),
            _ => None,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ExactSdf::Circle | ExactSdf::Square => 2,
            ExactSdf::Sphere | ExactSdf::CubeSpheres => 3,
        }
    }

    /// SDF in original coordinates.
    pub fn eval(&self, x: &[f64; 3]) -> f64 {
        match self {
            ExactSdf::Circle => (x[0] * x[0] + x[1] * x[1]).sqrt() - 1.0,
            ExactSdf::Sphere => {
                (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt() - 1.0
            }
            ExactSdf::Square => box_sdf(x, 2, 1.0),
            ExactSdf::CubeSpheres => cube_spheres_sdf(x),
        }
    }

    /// SDF in computational (rescaled) coordinates: distances scale by
    /// the same uniform factor as the points.
    pub fn eval_scaled(&self, x: &[f64; 3], t: &ScaleTransform) -> f64 {
        t.scale * self.eval(&t.invert(x))
    }
}

/// SDF of the axis-aligned box `[-h, h]^dim`.
pub fn box_sdf(x: &[f64; 3], dim: usize, h: f64) -> f64 {
    let mut outside = 0.0f64;
    let mut inside = f64::NEG_INFINITY;
    for &xa in x.iter().take(dim) {
        let q = xa.abs() - h;
        if q > 0.0 {
            outside += q * q;
        }
        inside = inside.max(q);
    }
    if outside > 0.0 {
        outside.sqrt()
    } else {
        inside
    }
}

/// 24 points on the perimeter of the square `[-1, 1]^2` at spacing 1/3
/// (corners included once), walked counterclockwise.
pub fn square_cloud() -> Vec<[f64; 3]> {
    let mut pts = Vec::with_capacity(24);
    let step = 1.0 / 3.0;
    for k in 0..6 {
        pts.push([-1.0 + k as f64 * step, -1.0, 0.0]);
    }
    for k in 0..6 {
        pts.push([1.0, -1.0 + k as f64 * step, 0.0]);
    }
    for k in 0..6 {
        pts.push([1.0 - k as f64 * step, 1.0, 0.0]);
    }
    for k in 0..6 {
        pts.push([-1.0, 1.0 - k as f64 * step, 0.0]);
    }
    pts
}

// Cube&Spheres: cube of edge 0.8 joined with a sphere of radius 0.25
// centred at the middle of one edge and two spheres of radius 0.15
// centred at the vertices of the opposite edge (axis-aligned variant).
const CS_A: f64 = 0.4;
const CS_R0: f64 = 0.25;
const CS_R1: f64 = 0.15;

fn cs_spheres() -> [([f64; 3], f64); 3] {
    [
        ([CS_A, CS_A, 0.0], CS_R0),
        ([-CS_A, -CS_A, CS_A], CS_R1),
        ([-CS_A, -CS_A, -CS_A], CS_R1),
    ]
}

fn norm3(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn dist3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    norm3(&[a[0] - b[0], a[1] - b[1], a[2] - b[2]])
}

/// Junction circle between a sphere and a cube face plane: the circle
/// has `center`, `radius` and lies in the plane `x[axis] = center[axis]`.
struct JunctionArc {
    center: [f64; 3],
    radius: f64,
    axis: usize,
    /// Arc endpoints (where the circle leaves the face rectangle).
    ends: [[f64; 3]; 2],
}

fn cs_arcs() -> Vec<JunctionArc> {
    let mut arcs = Vec::new();
    let (a, r0, r1) = (CS_A, CS_R0, CS_R1);
    // big sphere, centred on the edge x = y = a: circles on faces
    // x = a and y = a, each clipped to the half on the cube
    arcs.push(JunctionArc {
        center: [a, a, 0.0],
        radius: r0,
        axis: 0,
        ends: [[a, a, r0], [a, a, -r0]],
    });
    arcs.push(JunctionArc {
        center: [a, a, 0.0],
        radius: r0,
        axis: 1,
        ends: [[a, a, r0], [a, a, -r0]],
    });
    // vertex spheres: quarter circles on the three adjacent faces
    for s in [1.0f64, -1.0] {
        let v = [-a, -a, s * a];
        arcs.push(JunctionArc {
            center: v,
            radius: r1,
            axis: 0,
            ends: [[-a, -a + r1, s * a], [-a, -a, s * (a - r1)]],
        });
        arcs.push(JunctionArc {
            center: v,
            radius: r1,
            axis: 1,
            ends: [[-a + r1, -a, s * a], [-a, -a, s * (a - r1)]],
        });
        arcs.push(JunctionArc {
            center: v,
            radius: r1,
            axis: 2,
            ends: [[-a + r1, -a, s * a], [-a, -a + r1, s * a]],
        });
    }
    arcs
}

fn inside_any_sphere(x: &[f64; 3], tol: f64) -> bool {
    cs_spheres().iter().any(|(c, r)| dist3(x, c) < r - tol)
}

fn inside_cube(x: &[f64; 3], tol: f64) -> bool {
    x.iter().all(|&v| v.abs() < CS_A - tol)
}

/// Exact SDF of the Cube&Spheres union, assembled from the closest
/// point on each boundary patch (cube faces minus the sphere caps,
/// exposed sphere parts, junction arcs).
pub fn cube_spheres_sdf(x: &[f64; 3]) -> f64 {
    const TOL: f64 = 1e-12;
    let a = CS_A;
    let mut best = f64::INFINITY;

    // feet on the six face rectangles, valid unless swallowed by a sphere
    for axis in 0..3 {
        for s in [1.0f64, -1.0] {
            let mut foot = *x;
            foot[axis] = s * a;
            for b in 0..3 {
                if b != axis {
                    foot[b] = foot[b].clamp(-a, a);
                }
            }
            if !inside_any_sphere(&foot, TOL) {
                best = best.min(dist3(x, &foot));
            }
        }
    }

    // radial feet on the spheres, valid unless swallowed by the cube
    for (c, r) in cs_spheres() {
        let d = dist3(x, &c);
        if d > TOL {
            let foot = [
                c[0] + r * (x[0] - c[0]) / d,
                c[1] + r * (x[1] - c[1]) / d,
                c[2] + r * (x[2] - c[2]) / d,
            ];
            if !inside_cube(&foot, TOL) {
                best = best.min(dist3(x, &foot));
            }
        } else {
            best = best.min(r);
        }
    }

    // junction arcs: closest point on the full circle when it falls on
    // the face rectangle, otherwise the arc endpoints
    for arc in cs_arcs() {
        let mut q = [
            x[0] - arc.center[0],
            x[1] - arc.center[1],
            x[2] - arc.center[2],
        ];
        q[arc.axis] = 0.0;
        let qn = norm3(&q);
        if qn > TOL {
            let y = [
                arc.center[0] + arc.radius * q[0] / qn,
                arc.center[1] + arc.radius * q[1] / qn,
                arc.center[2] + arc.radius * q[2] / qn,
            ];
            if y.iter().all(|&v| v.abs() <= a + TOL) {
                best = best.min(dist3(x, &y));
            }
        }
        for e in &arc.ends {
            best = best.min(dist3(x, e));
        }
    }

    let inside = inside_cube(x, 0.0) || inside_any_sphere(x, 0.0);
    if inside {
        -best
    } else {
        best
    }
}

/// Spherical Fibonacci lattice of `n` points on the sphere
/// `(center, radius)`.
fn fibonacci_sphere(center: &[f64; 3], radius: f64, n: usize) -> Vec<[f64; 3]> {
    let golden = (1.0 + 5.0f64.sqrt()) / 2.0;
    (0..n)
        .map(|i| {
            let t = (i as f64 + 0.5) / n as f64;
            let z = 1.0 - 2.0 * t;
            let rho = (1.0 - z * z).sqrt();
            let theta = 2.0 * std::f64::consts::PI * i as f64 / golden;
            [
                center[0] + radius * rho * theta.cos(),
                center[1] + radius * rho * theta.sin(),
                center[2] + radius * z,
            ]
        })
        .collect()
}

/// Structured sampling of the Cube&Spheres surface: face-grid points
/// outside the sphere caps plus Fibonacci points on the exposed sphere
/// parts. The counts are fixed so the cloud has exactly 2346 points.
pub fn cube_spheres_cloud() -> Vec<[f64; 3]> {
    let a = CS_A;
    let n = CS_FACE_N;
    let mut pts = Vec::new();
    for axis in 0..3 {
        for s in [1.0f64, -1.0] {
            for i in 0..n {
                for j in 0..n {
                    let u = -a + (i as f64 + 0.5) * 2.0 * a / n as f64;
                    let v = -a + (j as f64 + 0.5) * 2.0 * a / n as f64;
                    let mut p = [0.0; 3];
                    p[axis] = s * a;
                    p[(axis + 1) % 3] = u;
                    p[(axis + 2) % 3] = v;
                    if !inside_any_sphere(&p, 1e-12) {
                        pts.push(p);
                    }
                }
            }
        }
    }
    for (k, (c, r)) in cs_spheres().into_iter().enumerate() {
        let n_full = if k == 0 { CS_BIG_N } else { CS_SMALL_N };
        for p in fibonacci_sphere(&c, r, n_full) {
            if !inside_cube(&p, 1e-12) {
                pts.push(p);
            }
        }
    }
    pts
}

// Tuned so `cube_spheres_cloud` yields exactly 2346 points.
const CS_FACE_N: usize = 18;
const CS_BIG_N: usize = 388;
const CS_SMALL_N: usize = 146;

/// 2D "tunnel" cloud: two parallel horizontal point rows at `y = ±gap/2`
/// spanning `x ∈ [-len/2, len/2]` with the given spacing.
pub fn tunnel_cloud(len: f64, gap: f64, spacing: f64) -> Vec<[f64; 3]> {
    let n = (len / spacing).round() as usize;
    let mut pts = Vec::new();
    for &y in &[-0.5 * gap, 0.5 * gap] {
        for k in 0..=n {
            pts.push([-0.5 * len + k as f64 * spacing, y, 0.0]);
        }
    }
    pts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_cloud_has_24_points_on_the_square() {
        let pts = square_cloud();
        assert_eq!(pts.len(), 24);
        for p in &pts {
            assert!(ExactSdf::Square.eval(p).abs() < 1e-12);
        }
        let mut sorted = pts.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sorted.dedup_by(|a, b| dist3(a, b) < 1e-12);
        assert_eq!(sorted.len(), 24);
    }

    #[test]
    fn cube_spheres_cloud_count_and_surface() {
        let pts = cube_spheres_cloud();
        assert_eq!(pts.len(), 2346);
        for p in &pts {
            assert!(
                cube_spheres_sdf(p).abs() < 1e-10,
                "point off surface: {p:?} -> {}",
                cube_spheres_sdf(p)
            );
        }
    }

    #[test]
    fn cube_spheres_sdf_matches_brute_force_sampling() {
        // dense surface sampling as an independent distance oracle
        let mut surf = Vec::new();
        let a = CS_A;
        let n = 160usize;
        for axis in 0..3 {
            for s in [1.0f64, -1.0] {
                for i in 0..n {
                    for j in 0..n {
                        let u = -a + (i as f64 + 0.5) * 2.0 * a / n as f64;
                        let v = -a + (j as f64 + 0.5) * 2.0 * a / n as f64;
                        let mut p = [0.0; 3];
                        p[axis] = s * a;
                        p[(axis + 1) % 3] = u;
                        p[(axis + 2) % 3] = v;
                        if !inside_any_sphere(&p, 0.0) {
                            surf.push(p);
                        }
                    }
                }
            }
        }
        for (c, r) in cs_spheres() {
            for p in fibonacci_sphere(&c, r, 40000) {
                if !inside_cube(&p, 0.0) {
                    surf.push(p);
                }
            }
        }
        let spacing = 0.01;
        let mut rng = 987654321u64;
        for _ in 0..300 {
            // cheap deterministic pseudo-random probe points
            let mut x = [0.0; 3];
            for xa in &mut x {
                rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                *xa = ((rng >> 11) as f64 / (1u64 << 53) as f64) * 1.6 - 0.8;
            }
            let brute = surf
                .iter()
                .map(|p| dist3(&x, p))
                .fold(f64::INFINITY, f64::min);
            let sdf = cube_spheres_sdf(&x).abs();
            assert!(
                (sdf - brute).abs() < spacing,
                "x = {x:?}: sdf {sdf} vs brute {brute}"
            );
        }
    }

    #[test]
    fn box_sdf_is_exact() {
        assert!((box_sdf(&[2.0, 0.0, 0.0], 2, 1.0) - 1.0).abs() < 1e-15);
        assert!((box_sdf(&[0.0, 0.0, 0.0], 2, 1.0) + 1.0).abs() < 1e-15);
        assert!((box_sdf(&[2.0, 2.0, 0.0], 2, 1.0) - 2f64.sqrt()).abs() < 1e-15);
        assert!((box_sdf(&[0.5, 0.9, 0.0], 2, 1.0) + 0.1).abs() < 1e-15);
    }
}
