//! Degree by signed preimage counting at a regular value.
//!
//! The domain is triangulated with a latitude-longitude mesh plus polar meshes
//! around every patch cap. A triangle is a candidate when the gnomonic image
//! of its vertices around `y` surrounds the origin; each candidate seeds a
//! damped Newton solve of `m(x) = y` in a tangent chart of the domain.

use std::f64::consts::{PI, TAU};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::maps::{CapResolution, SphereMap};
use crate::sphere::{rotate_taking, Rotation, SphericalCap, SphericalPoint, UnitVec3, Vec3};

const NEWTON_ITERS: usize = 20;
const ROOT_TOL: f64 = 1e-12;
/// Residual floor per unit of map stretch: where `|dm|` is large, the image of
/// a point is only known to about `|dm|` ulps.
const STRETCH_FLOOR: f64 = 64.0 * f64::EPSILON;
const MIN_DET: f64 = 1e-6;
const DEDUP_DIST: f64 = 1e-9;
/// Barycentric slack for seeding Newton from triangles whose flat image just
/// misses `y`; failures from these seeds are ignored.
const SEED_SLACK: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preimage {
    pub point: Vec3,
    pub sign: i32,
    pub det: f64,
}

struct Mesh {
    vertices: Vec<Vec3>,
    triangles: Vec<[usize; 3]>,
}

impl Mesh {
    /// Polar mesh in frame `rot`: the frame center, then rings at `radii`
    /// (increasing, in radians), each with `n_az` vertices; an end vertex at
    /// the antipode closes the mesh when the last radius is below π and
    /// `closed` is set.
    fn polar(rot: &Rotation, radii: &[f64], n_az: usize, closed: bool) -> Mesh {
        let mut vertices = vec![rot * Vec3::z()];
        for (i, &t) in radii.iter().enumerate() {
            // stagger alternate rings to avoid long thin triangles
            let offset = if i % 2 == 0 { 0.0 } else { 0.5 };
            for l in 0..n_az {
                let p = SphericalPoint::new(t, (l as f64 + offset) * TAU / n_az as f64);
                vertices.push(rot * p.to_vec());
            }
        }
        let ring = |i: usize, l: usize| 1 + i * n_az + (l % n_az);
        let mut triangles = Vec::new();
        for l in 0..n_az {
            triangles.push([0, ring(0, l), ring(0, l + 1)]);
        }
        for i in 0..radii.len().saturating_sub(1) {
            for l in 0..n_az {
                let (a, b) = (ring(i, l), ring(i, l + 1));
                let (c, d) = if i % 2 == 0 {
                    (ring(i + 1, l), ring(i + 1, l + n_az - 1))
                } else {
                    (ring(i + 1, l + 1), ring(i + 1, l))
                };
                if i % 2 == 0 {
                    triangles.push([a, c, b]);
                    triangles.push([a, d, c]);
                } else {
                    triangles.push([a, d, b]);
                    triangles.push([b, d, c]);
                }
            }
        }
        if closed {
            let end = vertices.len();
            vertices.push(rot * -Vec3::z());
            let last = radii.len() - 1;
            for l in 0..n_az {
                triangles.push([ring(last, l), end, ring(last, l + 1)]);
            }
        }
        Mesh { vertices, triangles }
    }
}

fn any_orthogonal(c: &Vec3) -> Vec3 {
    let a = if c.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    (a - c * c.dot(&a)).normalize()
}

/// Orthonormal `(e1, e2)` at `x` with `e1 × e2 = x`.
fn chart(x: &Vec3) -> (Vec3, Vec3) {
    let e1 = any_orthogonal(x);
    (e1, x.cross(&e1))
}

struct Target {
    y: Vec3,
    e1: Vec3,
    e2: Vec3,
}

impl Target {
    fn new(y: &UnitVec3) -> Self {
        let (e1, e2) = chart(&y.vec());
        Target { y: y.vec(), e1, e2 }
    }

    /// Gnomonic coordinates about `y`; `None` on the far hemisphere.
    fn project(&self, z: &Vec3) -> Option<[f64; 2]> {
        let c = z.dot(&self.y);
        if c <= 1e-3 {
            return None;
        }
        Some([z.dot(&self.e1) / c, z.dot(&self.e2) / c])
    }

    fn project_deriv(&self, z: &Vec3, w: &Vec3) -> [f64; 2] {
        let c = z.dot(&self.y);
        let cw = w.dot(&self.y);
        [
            w.dot(&self.e1) / c - z.dot(&self.e1) * cw / (c * c),
            w.dot(&self.e2) / c - z.dot(&self.e2) * cw / (c * c),
        ]
    }
}

/// Barycentric coordinates of the origin in the planar triangle `abc`.
fn barycentric(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> Option<[f64; 3]> {
    let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
    if det.abs() < 1e-300 {
        return None;
    }
    let l1 = ((-a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (-a[1])) / det;
    let l2 = ((b[0] - a[0]) * (-a[1]) - (-a[0]) * (b[1] - a[1])) / det;
    Some([1.0 - l1 - l2, l1, l2])
}

enum Solve {
    Root(Preimage),
    Failed,
}

fn newton(m: &SphereMap, target: &Target, start: Vec3) -> Solve {
    let mut x = start.normalize();
    let residual = |x: &Vec3| -> Option<[f64; 2]> { target.project(&m.eval(x)) };
    let Some(mut g) = residual(&x) else {
        return Solve::Failed;
    };
    for _ in 0..NEWTON_ITERS {
        let gn = g[0].hypot(g[1]);
        let (u1, u2) = chart(&x);
        let jet = m.jet(&x, &[u1, u2]);
        if gn < ROOT_TOL.max(STRETCH_FLOOR * jet.grad_sq().sqrt()) {
            let det = jet.jacobian();
            return Solve::Root(Preimage {
                point: x,
                sign: if det > 0.0 { 1 } else { -1 },
                det,
            });
        }
        let c0 = target.project_deriv(&jet.value, &jet.d[0]);
        let c1 = target.project_deriv(&jet.value, &jet.d[1]);
        let det = c0[0] * c1[1] - c1[0] * c0[1];
        if det.abs() < 1e-300 {
            return Solve::Failed;
        }
        let da = -(g[0] * c1[1] - c1[0] * g[1]) / det;
        let db = -(c0[0] * g[1] - g[0] * c0[1]) / det;
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = (x + (u1 * da + u2 * db) * step).normalize();
            if let Some(gc) = residual(&cand) {
                if gc[0].hypot(gc[1]) < gn {
                    x = cand;
                    g = gc;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            return Solve::Failed;
        }
    }
    if g[0].hypot(g[1]) < ROOT_TOL {
        let (u1, u2) = chart(&x);
        let det = m.jet(&x, &[u1, u2]).jacobian();
        return Solve::Root(Preimage {
            point: x,
            sign: if det > 0.0 { 1 } else { -1 },
            det,
        });
    }
    Solve::Failed
}

fn build_meshes(m: &SphereMap, res: usize) -> Vec<(Mesh, Vec<SphericalCap>, Option<SphericalCap>)> {
    let n_phi = res.max(8);
    let n_theta = 2 * n_phi;
    let specs = m.refinement_caps(&CapResolution {
        radial: (res / 4).max(6),
        azimuthal: (res / 2).max(16),
    });
    let caps: Vec<SphericalCap> = specs.iter().map(|s| s.cap).collect();
    let global_radii: Vec<f64> = (1..n_phi).map(|k| k as f64 * PI / n_phi as f64).collect();
    let mut meshes = vec![(Mesh::polar(&Rotation::identity(), &global_radii, n_theta, true), caps.clone(), None)];
    for spec in &specs {
        let mut radii: Vec<f64> = Vec::new();
        for seg in &spec.segments {
            for e in seg.edges().into_iter().skip(1) {
                radii.push(e);
            }
        }
        let t_cap = spec.cap.angular_radius();
        let t_ext = (1.25 * t_cap).min(PI - 1e-3);
        let extra = (spec.segments.last().map_or(4, |s| s.rings)).max(4);
        for k in 1..=extra {
            radii.push(t_cap + (t_ext - t_cap) * k as f64 / extra as f64);
        }
        radii.retain(|&t| t > 0.0);
        radii.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
        let rot = rotate_taking(&UnitVec3::NORTH, &spec.cap.center);
        let smaller: Vec<SphericalCap> = caps
            .iter()
            .filter(|c| c.chordal_radius < spec.cap.chordal_radius)
            .copied()
            .collect();
        let ext = SphericalCap {
            center: spec.cap.center,
            chordal_radius: 2.0 * (0.5 * t_ext).sin(),
        };
        meshes.push((Mesh::polar(&rot, &radii, spec.n_theta, false), smaller, Some(ext)));
    }
    meshes
}

fn count_once(m: &SphereMap, y: &UnitVec3, res: usize) -> std::result::Result<Vec<Preimage>, String> {
    let target = Target::new(y);
    let meshes = build_meshes(m, res);
    let mut seeds: Vec<(Vec3, bool)> = Vec::new();
    for (mesh, exclude, within) in &meshes {
        let images: Vec<Option<[f64; 2]>> = mesh
            .vertices
            .par_iter()
            .map(|v| target.project(&m.eval(v)))
            .collect();
        for tri in &mesh.triangles {
            let centroid = (mesh.vertices[tri[0]] + mesh.vertices[tri[1]] + mesh.vertices[tri[2]]).normalize();
            if exclude.iter().any(|c| c.contains(&centroid)) {
                continue;
            }
            if let Some(w) = within {
                if !w.contains(&centroid) {
                    continue;
                }
            }
            let (Some(a), Some(b), Some(c)) = (images[tri[0]], images[tri[1]], images[tri[2]]) else {
                continue;
            };
            let Some(l) = barycentric(a, b, c) else {
                continue;
            };
            let min = l[0].min(l[1]).min(l[2]);
            if min >= -SEED_SLACK {
                let x = mesh.vertices[tri[0]] * l[0].max(0.0)
                    + mesh.vertices[tri[1]] * l[1].max(0.0)
                    + mesh.vertices[tri[2]] * l[2].max(0.0);
                let x = if x.norm() > 1e-12 { x } else { centroid };
                seeds.push((x, min >= -1e-9));
            }
        }
    }
    let solved: Vec<(Solve, bool)> = seeds.par_iter().map(|(x, strict)| (newton(m, &target, *x), *strict)).collect();
    let mut roots: Vec<Preimage> = Vec::new();
    for (s, strict) in solved {
        match s {
            Solve::Root(r) => {
                if !roots.iter().any(|o| (o.point - r.point).norm() < DEDUP_DIST) {
                    roots.push(r);
                }
            }
            Solve::Failed if strict => return Err("Newton did not converge from a containing triangle".into()),
            Solve::Failed => {}
        }
    }
    if let Some(r) = roots.iter().find(|r| r.det.abs() <= MIN_DET) {
        return Err(format!("preimage at {:?} has |det| = {:.3e}", r.point, r.det.abs()));
    }
    Ok(roots)
}

/// Preimages of `y` with orientation signs; `res` is the number of latitude
/// rows of the global mesh. One escalation to `2 res` is attempted before
/// reporting failure.
pub fn preimages(m: &SphereMap, y: &UnitVec3, res: usize) -> Result<Vec<Preimage>> {
    match count_once(m, y, res) {
        Ok(r) => Ok(r),
        Err(first) => {
            log::debug!("regular-value count at resolution {res} failed ({first}); escalating");
            count_once(m, y, 2 * res).map_err(Error::NotRegular)
        }
    }
}

/// Signed count of preimages of the regular value `y`.
pub fn degree_regular_value(m: &SphereMap, y: &UnitVec3, res: usize) -> Result<i64> {
    Ok(preimages(m, y, res)?.iter().map(|p| p.sign as i64).sum())
}
