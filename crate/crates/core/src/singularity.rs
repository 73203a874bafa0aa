//! Point defects of lattice fields by cell-wise degree, and fiber lengths of
//! the piecewise-linear interpolant for the co-area inequality.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{dirichlet_energy, BallField, BallLattice};
use crate::quadrature::{pairwise_sum, SphereQuadGrid};
use crate::sphere::{UnitVec3, Vec3};

/// Largest accepted distance of a raw cell degree from its rounding.
pub const ROUNDING_GAP: f64 = 0.2;
/// Largest fraction of degenerate tetrahedra in a valid fiber sample.
pub const MAX_SKIPPED_FRACTION: f64 = 1e-3;

/// Cubes of the lattice whose eight corners are all nodes, as corner node
/// ids indexed by the bit pattern `x | y << 1 | z << 2`.
#[derive(Clone, Debug)]
pub struct CellComplex {
    pub origins: Vec<[i32; 3]>,
    pub corners: Vec<[u32; 8]>,
}

impl CellComplex {
    pub fn new(lat: &BallLattice) -> Self {
        let k = lat.half_extent();
        let mut origins = Vec::new();
        let mut corners = Vec::new();
        for z in -k..k {
            for y in -k..k {
                for x in -k..k {
                    let ids: Option<Vec<u32>> = (0..8)
                        .map(|b| lat.node_at([x + (b & 1), y + ((b >> 1) & 1), z + ((b >> 2) & 1)]).map(|n| n as u32))
                        .collect();
                    if let Some(ids) = ids {
                        origins.push([x, y, z]);
                        corners.push(ids.try_into().expect("eight corners"));
                    }
                }
            }
        }
        CellComplex { origins, corners }
    }

    pub fn len(&self) -> usize {
        self.corners.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corners.is_empty()
    }
}

/// Corner bit patterns of the two outward triangles on each cube face.
fn surface_triangles() -> [[usize; 3]; 12] {
    let mut out = [[0; 3]; 12];
    let mut t = 0;
    for a in 0..3 {
        let (b, c) = ((a + 1) % 3, (a + 2) % 3);
        for side in 0..2 {
            let corner = |u: usize, v: usize| (side << a) | (u << b) | (v << c);
            // both cubes sharing a face split it along the same diagonal
            let q = [corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)];
            if side == 1 {
                out[t] = [q[0], q[1], q[2]];
                out[t + 1] = [q[0], q[2], q[3]];
            } else {
                out[t] = [q[0], q[2], q[1]];
                out[t + 1] = [q[0], q[3], q[2]];
            }
            t += 2;
        }
    }
    out
}

/// Signed solid angle of the geodesic triangle `abc`.
pub fn solid_angle(a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    let num = a.dot(&b.cross(c));
    let den = 1.0 + a.dot(b) + b.dot(c) + c.dot(a);
    2.0 * num.atan2(den)
}

/// Unrounded degree of the field on the surface of one cube.
pub fn raw_cell_degree(u: &BallField, corners: &[u32; 8]) -> f64 {
    let v = |b: usize| u.value(corners[b] as usize);
    surface_triangles()
        .iter()
        .map(|t| solid_angle(&v(t[0]), &v(t[1]), &v(t[2])))
        .sum::<f64>()
        / (4.0 * PI)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CellDegree {
    Resolved(i64),
    Unresolved(f64),
}

pub fn cell_degree(u: &BallField, corners: &[u32; 8]) -> CellDegree {
    let raw = raw_cell_degree(u, corners);
    let r = raw.round();
    if (raw - r).abs() < ROUNDING_GAP {
        CellDegree::Resolved(r as i64)
    } else {
        CellDegree::Unresolved(raw)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingularCell {
    pub center: [f64; 3],
    pub degree: i64,
    /// Energy of the twelve cube edges, each shared by four cells.
    pub local_energy: f64,
    /// Some corner lies in the boundary shell.
    pub touches_boundary: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnresolvedCell {
    pub center: [f64; 3],
    pub raw_degree: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingularityReport {
    pub h: f64,
    pub cells: Vec<SingularCell>,
    pub unresolved: Vec<UnresolvedCell>,
    pub total_cell_degree: i64,
    pub total_boundary_degree: Option<i64>,
    /// Cell degrees add up to the boundary degree; unknown when a cell is
    /// unresolved or no boundary degree was supplied.
    pub conserved: Option<bool>,
}

impl SingularityReport {
    pub fn degrees(&self) -> Vec<i64> {
        self.cells.iter().map(|c| c.degree).collect()
    }

    /// Cells away from the boundary shell.
    pub fn interior_cells(&self) -> impl Iterator<Item = &SingularCell> {
        self.cells.iter().filter(|c| !c.touches_boundary)
    }
}

const CUBE_EDGES: [(usize, usize); 12] = [
    (0, 1), (2, 3), (4, 5), (6, 7),
    (0, 2), (1, 3), (4, 6), (5, 7),
    (0, 4), (1, 5), (2, 6), (3, 7),
];

fn cell_center(lat: &BallLattice, origin: [i32; 3]) -> [f64; 3] {
    origin.map(|a| (a as f64 + 0.5) * lat.h())
}

/// Scans every cube for nonzero degree. `boundary_degree` is the degree of
/// the boundary trace, for the conservation check.
pub fn detect_singularities(u: &BallField, boundary_degree: Option<i64>) -> SingularityReport {
    let lat = u.lattice();
    let complex = CellComplex::new(lat);
    let found: Vec<(usize, CellDegree)> = complex
        .corners
        .par_iter()
        .enumerate()
        .filter_map(|(i, c)| match cell_degree(u, c) {
            CellDegree::Resolved(0) => None,
            d => Some((i, d)),
        })
        .collect();
    let mut cells = Vec::new();
    let mut unresolved = Vec::new();
    let mut total = 0;
    for (i, d) in found {
        let corners = &complex.corners[i];
        let center = cell_center(lat, complex.origins[i]);
        match d {
            CellDegree::Resolved(degree) => {
                let local_energy = CUBE_EDGES
                    .iter()
                    .map(|&(a, b)| (u.value(corners[a] as usize) - u.value(corners[b] as usize)).norm_squared())
                    .sum::<f64>()
                    * lat.h()
                    / 4.0;
                total += degree;
                cells.push(SingularCell {
                    center,
                    degree,
                    local_energy,
                    touches_boundary: corners.iter().any(|&n| !lat.is_interior(n as usize)),
                });
            }
            CellDegree::Unresolved(raw_degree) => unresolved.push(UnresolvedCell { center, raw_degree }),
        }
    }
    let conserved = match (boundary_degree, unresolved.is_empty()) {
        (Some(b), true) => Some(b == total),
        _ => None,
    };
    SingularityReport {
        h: lat.h(),
        cells,
        unresolved,
        total_cell_degree: total,
        total_boundary_degree: boundary_degree,
        conserved,
    }
}

/// Orthonormal frame of the tangent plane at `w`, from the two coordinate
/// axes least aligned with `w`.
pub fn tangent_frame(w: &Vec3) -> (Vec3, Vec3) {
    let mut axes = [0usize, 1, 2];
    axes.sort_by(|&a, &b| w[a].abs().total_cmp(&w[b].abs()));
    let e = |i: usize| {
        let mut v = Vec3::zeros();
        v[i] = 1.0;
        v
    };
    let t1 = (e(axes[0]) - w * w[axes[0]]).normalize();
    let raw = e(axes[1]) - w * w[axes[1]];
    let t2 = (raw - t1 * t1.dot(&raw)).normalize();
    (t1, t2)
}

/// The six tetrahedra of a cube around the main diagonal, as corner bit patterns.
fn kuhn_tets() -> [[usize; 4]; 6] {
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    perms.map(|p| {
        let v1 = 1 << p[0];
        let v2 = v1 | (1 << p[1]);
        [0, v1, v2, 7]
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiberSample {
    pub length: f64,
    /// Degenerate tetrahedra left out of `length`.
    pub skipped: usize,
    /// Tetrahedra whose vertex values do not rule out a crossing.
    pub total: usize,
}

enum TetFiber {
    Miss,
    Hit(f64),
    Degenerate,
}

/// Per-node projections `(t1·u, t2·u, w·u)`.
type Projected = [f64; 3];

/// Parameter interval of `t ∈ [0, 1]` with `|a + t (b - a)| <= 1`.
fn inside_unit_ball(a: &Vec3, b: &Vec3) -> (f64, f64) {
    let d = b - a;
    let (qa, qb, qc) = (d.norm_squared(), 2.0 * a.dot(&d), a.norm_squared() - 1.0);
    if qa == 0.0 {
        return if qc <= 0.0 { (0.0, 1.0) } else { (1.0, 0.0) };
    }
    let disc = qb * qb - 4.0 * qa * qc;
    if disc <= 0.0 {
        return (1.0, 0.0);
    }
    let r = disc.sqrt();
    (((-qb - r) / (2.0 * qa)).max(0.0), ((-qb + r) / (2.0 * qa)).min(1.0))
}

/// The tangent projections of the four corners are collinear: the tet maps
/// onto a segment, which misses `w` unless it passes through the origin.
fn collapsed_image_misses(p: &[Projected; 4], scale: f64) -> bool {
    let (mut i0, mut i1, mut far) = (0, 0, 0.0);
    for i in 0..4 {
        for k in i + 1..4 {
            let d = (p[i][0] - p[k][0]).hypot(p[i][1] - p[k][1]);
            if d > far {
                (i0, i1, far) = (i, k, d);
            }
        }
    }
    if far == 0.0 {
        return p[0][0].hypot(p[0][1]) > 1e-9 * scale;
    }
    let (a, b) = (p[i0], p[i1]);
    let d = [b[0] - a[0], b[1] - a[1]];
    let t = -(a[0] * d[0] + a[1] * d[1]) / (far * far);
    let gap = if t <= 0.0 {
        a[0].hypot(a[1])
    } else if t >= 1.0 {
        b[0].hypot(b[1])
    } else {
        (a[0] * d[1] - a[1] * d[0]).abs() / far
    };
    gap > 1e-9 * scale
}

/// Fiber length inside one tetrahedron, clipped to the unit ball; `Err` when
/// the linear system is degenerate.
fn tet_fiber(p: [Projected; 4], x: [Vec3; 4], h: f64) -> TetFiber {
    if p.iter().all(|v| v[2] <= 0.0) {
        return TetFiber::Miss;
    }
    let scale = p.iter().flat_map(|v| [v[0].abs(), v[1].abs()]).fold(0.0, f64::max);
    if scale < 1e-9 {
        return TetFiber::Degenerate;
    }
    for k in 0..2 {
        if p.iter().all(|v| v[k] > 0.0) || p.iter().all(|v| v[k] < 0.0) {
            return TetFiber::Miss;
        }
    }
    let mut points: Vec<(Vec3, f64, [f64; 4])> = Vec::with_capacity(4);
    let mut any_regular = false;
    for drop in 0..4 {
        let f: Vec<usize> = (0..4).filter(|&i| i != drop).collect();
        let (a, b, c) = (p[f[0]], p[f[1]], p[f[2]]);
        // columns (a, b, c), rows (t1, t2, 1); right-hand side (0, 0, 1)
        let det = a[0] * (b[1] - c[1]) - b[0] * (a[1] - c[1]) + c[0] * (a[1] - b[1]);
        if det.abs() < 1e-13 * scale * scale {
            continue;
        }
        any_regular = true;
        let mu = [
            (b[0] * c[1] - c[0] * b[1]) / det,
            (c[0] * a[1] - a[0] * c[1]) / det,
            (a[0] * b[1] - b[0] * a[1]) / det,
        ];
        if mu.iter().all(|&m| m >= -1e-12) {
            let pos = x[f[0]] * mu[0] + x[f[1]] * mu[1] + x[f[2]] * mu[2];
            let s = a[2] * mu[0] + b[2] * mu[1] + c[2] * mu[2];
            let mut bary = [0.0; 4];
            for (k, &i) in f.iter().enumerate() {
                bary[i] = mu[k].max(0.0);
            }
            if !points.iter().any(|(q, _, _)| (q - pos).norm() < 1e-12 * h) {
                points.push((pos, s, bary));
            }
        }
    }
    if !any_regular {
        return if collapsed_image_misses(&p, scale) {
            TetFiber::Miss
        } else {
            TetFiber::Degenerate
        };
    }
    if points.len() < 2 {
        return TetFiber::Hit(0.0);
    }
    let (mut i0, mut i1, mut far) = (0, 1, 0.0);
    for i in 0..points.len() {
        for k in i + 1..points.len() {
            let d = (points[i].0 - points[k].0).norm();
            if d > far {
                (i0, i1, far) = (i, k, d);
            }
        }
    }
    let ((x0, s0, b0), (x1, s1, b1)) = (points[i0], points[i1]);
    // a segment inside a face is shared with a neighbor: `w` is not regular
    if (0..4).any(|k| b0[k] < 1e-9 && b1[k] < 1e-9) {
        return TetFiber::Degenerate;
    }
    let (mut lo, mut hi) = inside_unit_ball(&x0, &x1);
    // the branch with w·u > 0, where s(t) = s0 + t (s1 - s0)
    match (s0 > 0.0, s1 > 0.0) {
        (true, true) => {}
        (false, false) => return TetFiber::Hit(0.0),
        (true, false) => hi = hi.min(s0 / (s0 - s1)),
        (false, true) => lo = lo.max(s0 / (s0 - s1)),
    }
    TetFiber::Hit(far * (hi - lo).max(0.0))
}

fn fiber_on(u: &BallField, complex: &CellComplex, w: &Vec3) -> FiberSample {
    let lat = u.lattice();
    let (t1, t2) = tangent_frame(w);
    let proj: Vec<Projected> = u.values().iter().map(|v| [t1.dot(v), t2.dot(v), w.dot(v)]).collect();
    let tets = kuhn_tets();
    let mut lengths = Vec::with_capacity(complex.len());
    let (mut skipped, mut total) = (0, 0);
    for corners in &complex.corners {
        let mut cell = 0.0;
        for t in &tets {
            let ids = t.map(|b| corners[b] as usize);
            match tet_fiber(ids.map(|n| proj[n]), ids.map(|n| lat.position(n)), lat.h()) {
                TetFiber::Miss => continue,
                TetFiber::Hit(l) => cell += l,
                TetFiber::Degenerate => skipped += 1,
            }
            total += 1;
        }
        lengths.push(cell);
    }
    FiberSample {
        length: pairwise_sum(&lengths),
        skipped,
        total,
    }
}

/// Length inside the unit ball of the preimage of `w` under the
/// piecewise-linear interpolant.
pub fn fiber_sample(u: &BallField, w: &UnitVec3) -> FiberSample {
    fiber_on(u, &CellComplex::new(u.lattice()), &w.vec())
}

pub fn fiber_length(u: &BallField, w: &UnitVec3) -> Result<f64> {
    checked(fiber_sample(u, w))
}

fn checked(s: FiberSample) -> Result<f64> {
    if s.skipped as f64 > MAX_SKIPPED_FRACTION * s.total as f64 {
        log::warn!("fiber sample rejected: {} of {} tetrahedra degenerate", s.skipped, s.total);
        return Err(Error::IrregularFiber {
            skipped: s.skipped,
            total: s.total,
        });
    }
    Ok(s.length)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoareaCheck {
    /// Lattice Dirichlet energy.
    pub lhs: f64,
    /// Twice the integral of fiber length over the target sphere.
    pub rhs: f64,
}

pub fn coarea_check(u: &BallField, grid: &SphereQuadGrid) -> Result<CoareaCheck> {
    let complex = CellComplex::new(u.lattice());
    let samples: Vec<Result<f64>> = grid
        .nodes()
        .par_iter()
        .map(|n| checked(fiber_on(u, &complex, &n.pos)).map(|l| l * n.weight))
        .collect();
    let terms = samples.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(CoareaCheck {
        lhs: dirichlet_energy(u),
        rhs: 2.0 * pairwise_sum(&terms),
    })
}
