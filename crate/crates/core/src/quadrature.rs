//! Quadrature on S² and on intervals.
//!
//! Sphere grids are flat lists of weighted nodes, each carrying an
//! orthonormal tangent frame `(e1, e2)` with `e1 × e2` pointing outward.
//! Integrands that depend on tangential derivatives are evaluated in that
//! frame, so global latitude-longitude nodes and cap-local polar nodes can be
//! mixed in one grid.

use std::f64::consts::{PI, TAU};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sphere::{rotate_taking, Rotation, SphericalCap, SphericalPoint, UnitVec3, Vec3};

/// Sum with pairwise (cascade) splitting; result depends only on the order of `xs`.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 64;
    if xs.len() <= BLOCK {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Adaptive Simpson quadrature with Richardson correction.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, max_depth: u32) -> f64 {
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_rec(f, a, b, fa, fm, fb, whole, tol, max_depth)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadNode {
    pub pos: Vec3,
    pub e1: Vec3,
    pub e2: Vec3,
    pub weight: f64,
}

impl QuadNode {
    pub fn spherical(&self) -> SphericalPoint {
        SphericalPoint::from_vec(&self.pos)
    }
}

/// One radial band `[start, end]` of geodesic radius around a cap center,
/// split into `rings` rings either uniformly or geometrically.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadialSegment {
    pub start: f64,
    pub end: f64,
    pub rings: usize,
    pub geometric: bool,
}

impl RadialSegment {
    pub fn uniform(start: f64, end: f64, rings: usize) -> Self {
        RadialSegment {
            start,
            end,
            rings,
            geometric: false,
        }
    }

    pub fn geometric(start: f64, end: f64, rings: usize) -> Self {
        RadialSegment {
            start,
            end,
            rings,
            geometric: true,
        }
    }

    /// Ring edges, `rings + 1` values from `start` to `end`.
    pub fn edges(&self) -> Vec<f64> {
        let n = self.rings.max(1);
        (0..=n)
            .map(|k| {
                if k == 0 {
                    self.start
                } else if k == n {
                    self.end
                } else if self.geometric {
                    self.start * (self.end / self.start).powf(k as f64 / n as f64)
                } else {
                    self.start + (self.end - self.start) * k as f64 / n as f64
                }
            })
            .collect()
    }
}

/// Polar refinement of a cap: radial bands plus the azimuthal count.
#[derive(Clone, Debug, PartialEq)]
pub struct CapGridSpec {
    pub cap: SphericalCap,
    pub segments: Vec<RadialSegment>,
    pub n_theta: usize,
}

#[derive(Clone, Debug)]
pub struct SphereQuadGrid {
    nodes: Vec<QuadNode>,
    resolution: Option<(usize, usize)>,
}

impl SphereQuadGrid {
    /// Latitude-longitude product grid with nodes at cell midpoints.
    ///
    /// The weight of a node is the exact area of its cell,
    /// `2 sin(phi) sin(Δphi/2) Δtheta`, so the weights sum to 4π up to rounding.
    pub fn global(n_phi: usize, n_theta: usize) -> Result<Self> {
        check_resolution(n_phi, n_theta)?;
        let nodes = global_cells(n_phi, n_theta)
            .iter()
            .filter_map(|c| c.clip(&[]))
            .collect();
        Ok(SphereQuadGrid {
            nodes,
            resolution: Some((n_phi, n_theta)),
        })
    }

    /// Polar grid covering `spec.cap`; weights are exact ring-sector areas.
    pub fn cap(spec: &CapGridSpec) -> Result<Self> {
        let nodes = cap_cells(spec)?
            .iter()
            .filter_map(|c| c.clip(&[]))
            .collect();
        Ok(SphereQuadGrid {
            nodes,
            resolution: None,
        })
    }

    /// Global grid refined on a family of caps.
    ///
    /// Every cell is clipped against the caps that take precedence over it: all
    /// caps for a global cell, and the strictly smaller caps for a cell of a cap
    /// grid. A cell straddling a rim keeps the sub-sampled fraction of its area
    /// that survives, with its node moved to the centroid of that part. Caps must
    /// be pairwise disjoint or nested.
    pub fn composite(n_phi: usize, n_theta: usize, caps: &[CapGridSpec]) -> Result<Self> {
        check_resolution(n_phi, n_theta)?;
        let mut jobs: Vec<(Cell, Vec<SphericalCap>)> = Vec::new();
        let all: Vec<SphericalCap> = caps.iter().map(|c| c.cap).collect();
        jobs.extend(global_cells(n_phi, n_theta).into_iter().map(|c| (c, all.clone())));
        for (i, spec) in caps.iter().enumerate() {
            let r = spec.cap.chordal_radius;
            let inner: Vec<SphericalCap> = caps
                .iter()
                .enumerate()
                .filter(|(k, c)| *k != i && c.cap.chordal_radius < r)
                .map(|(_, c)| c.cap)
                .collect();
            jobs.extend(cap_cells(spec)?.into_iter().map(|c| (c, inner.clone())));
        }
        let nodes: Vec<Option<QuadNode>> = jobs.par_iter().map(|(c, ex)| c.clip(ex)).collect();
        Ok(SphereQuadGrid {
            nodes: nodes.into_iter().flatten().collect(),
            resolution: Some((n_phi, n_theta)),
        })
    }

    pub fn nodes(&self) -> &[QuadNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `(n_phi, n_theta)` of the underlying global grid, if any.
    pub fn resolution(&self) -> Option<(usize, usize)> {
        self.resolution
    }

    pub fn total_weight(&self) -> f64 {
        let w: Vec<f64> = self.nodes.iter().map(|n| n.weight).collect();
        pairwise_sum(&w)
    }

    /// `∫ f dσ`, evaluated in parallel and summed pairwise in node order.
    pub fn integrate<F>(&self, f: F) -> f64
    where
        F: Fn(&QuadNode) -> f64 + Sync,
    {
        let vals: Vec<f64> = self.nodes.par_iter().map(|n| n.weight * f(n)).collect();
        pairwise_sum(&vals)
    }

    /// Like [`integrate`](Self::integrate) but restricted to nodes inside `region`.
    pub fn integrate_over<F>(&self, region: Option<&SphericalCap>, f: F) -> f64
    where
        F: Fn(&QuadNode) -> f64 + Sync,
    {
        match region {
            None => self.integrate(f),
            Some(cap) => self.integrate(|n| if cap.contains(&n.pos) { f(n) } else { 0.0 }),
        }
    }
}

fn check_resolution(n_phi: usize, n_theta: usize) -> Result<()> {
    if n_phi < 4 || n_theta < 8 {
        return Err(Error::param(
            "resolution",
            format!("need n_phi >= 4 and n_theta >= 8, got {n_phi}x{n_theta}"),
        ));
    }
    Ok(())
}

const CLIP_DEPTH: u32 = 10;

/// A polar cell `[t0, t1] × [th0, th1]` in the frame `rot` (north pole at the
/// frame center), with its node at polar angle `node_t`.
#[derive(Clone, Copy, Debug)]
struct Cell {
    rot: Rotation,
    t0: f64,
    t1: f64,
    th0: f64,
    th1: f64,
    node_t: f64,
}

impl Cell {
    fn area(&self) -> f64 {
        2.0 * (0.5 * (self.t0 + self.t1)).sin() * (0.5 * (self.t1 - self.t0)).sin() * (self.th1 - self.th0)
    }

    fn node_at(&self, t: f64, th: f64) -> (Vec3, Vec3, Vec3) {
        let p = SphericalPoint::new(t, th);
        let (e1, e2) = p.frame();
        (self.rot * p.to_vec(), self.rot * e1, self.rot * e2)
    }

    fn clip(&self, exclude: &[SphericalCap]) -> Option<QuadNode> {
        let mid_th = 0.5 * (self.th0 + self.th1);
        let (pos, e1, e2) = self.node_at(self.node_t, mid_th);
        let weight = self.area();
        match self.classify(self.t0, self.t1, self.th0, self.th1, exclude) {
            Coverage::Outside => return Some(QuadNode { pos, e1, e2, weight }),
            Coverage::Inside => return None,
            Coverage::Straddles => {}
        }
        let mut centroid = Vec3::zeros();
        let kept = self.kept_area(self.t0, self.t1, self.th0, self.th1, exclude, CLIP_DEPTH, &mut centroid);
        if kept <= 0.0 {
            return None;
        }
        let local = SphericalPoint::from_vec(&(self.rot.inverse() * centroid));
        let (pos, e1, e2) = self.node_at(local.phi, local.theta);
        Some(QuadNode {
            pos,
            e1,
            e2,
            weight: kept,
        })
    }

    fn classify(&self, t0: f64, t1: f64, th0: f64, th1: f64, exclude: &[SphericalCap]) -> Coverage {
        let mid = UnitVec3::normalize(self.node_at(0.5 * (t0 + t1), 0.5 * (th0 + th1)).0);
        let half_diag = 0.5 * ((t1 - t0) + (th1 - th0) * t0.sin().max(t1.sin()));
        let mut straddles = false;
        for cap in exclude {
            let dist = mid.angle_to(&cap.center);
            let t = cap.angular_radius();
            if dist + half_diag < t {
                return Coverage::Inside;
            }
            if dist < t + half_diag {
                straddles = true;
            }
        }
        if straddles {
            Coverage::Straddles
        } else {
            Coverage::Outside
        }
    }

    /// Area of the part of the rectangle outside all excluded caps, by
    /// quadtree bisection of straddling pieces; accumulates the area-weighted
    /// centroid into `centroid`.
    #[allow(clippy::too_many_arguments)]
    fn kept_area(
        &self,
        t0: f64,
        t1: f64,
        th0: f64,
        th1: f64,
        exclude: &[SphericalCap],
        depth: u32,
        centroid: &mut Vec3,
    ) -> f64 {
        let area = 2.0 * (0.5 * (t0 + t1)).sin() * (0.5 * (t1 - t0)).sin() * (th1 - th0);
        let mid = self.node_at(0.5 * (t0 + t1), 0.5 * (th0 + th1)).0;
        let keep = match self.classify(t0, t1, th0, th1, exclude) {
            Coverage::Outside => true,
            Coverage::Inside => false,
            Coverage::Straddles if depth == 0 => !exclude.iter().any(|c| c.contains(&mid)),
            Coverage::Straddles => {
                let tm = 0.5 * (t0 + t1);
                let thm = 0.5 * (th0 + th1);
                return self.kept_area(t0, tm, th0, thm, exclude, depth - 1, centroid)
                    + self.kept_area(t0, tm, thm, th1, exclude, depth - 1, centroid)
                    + self.kept_area(tm, t1, th0, thm, exclude, depth - 1, centroid)
                    + self.kept_area(tm, t1, thm, th1, exclude, depth - 1, centroid);
            }
        };
        if keep {
            *centroid += area * mid;
            area
        } else {
            0.0
        }
    }
}

enum Coverage {
    Outside,
    Inside,
    Straddles,
}

fn global_cells(n_phi: usize, n_theta: usize) -> Vec<Cell> {
    let dphi = PI / n_phi as f64;
    let dtheta = TAU / n_theta as f64;
    let rot = Rotation::identity();
    (0..n_phi)
        .flat_map(|k| {
            (0..n_theta).map(move |l| Cell {
                rot,
                t0: k as f64 * dphi,
                t1: (k + 1) as f64 * dphi,
                th0: l as f64 * dtheta,
                th1: (l + 1) as f64 * dtheta,
                node_t: (k as f64 + 0.5) * dphi,
            })
        })
        .collect()
}

fn cap_cells(spec: &CapGridSpec) -> Result<Vec<Cell>> {
    if spec.n_theta < 1 || spec.segments.is_empty() {
        return Err(Error::param("cap grid", "needs at least one segment and one azimuthal node"));
    }
    let rot = rotate_taking(&UnitVec3::NORTH, &spec.cap.center);
    let dtheta = TAU / spec.n_theta as f64;
    let mut cells = Vec::new();
    for seg in &spec.segments {
        if seg.geometric && seg.start <= 0.0 {
            return Err(Error::param("cap grid", "geometric segment must start above 0"));
        }
        if !(seg.end > seg.start && seg.end <= PI) {
            return Err(Error::param("cap grid", format!("bad segment {seg:?}")));
        }
        for w in seg.edges().windows(2) {
            let node_t = if seg.geometric { (w[0] * w[1]).sqrt() } else { 0.5 * (w[0] + w[1]) };
            cells.extend((0..spec.n_theta).map(|l| Cell {
                rot,
                t0: w[0],
                t1: w[1],
                th0: l as f64 * dtheta,
                th1: (l + 1) as f64 * dtheta,
                node_t,
            }));
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn pairwise_matches_naive_sum() {
        let xs: Vec<f64> = (0..1000).map(|i| 1.0 / (i as f64 + 1.0)).collect();
        let naive: f64 = xs.iter().sum();
        assert_abs_diff_eq!(pairwise_sum(&xs), naive, epsilon = 1e-12);
    }

    #[test]
    fn simpson_integrates_sine() {
        let v = adaptive_simpson(&|x: f64| x.sin(), 0.0, PI, 1e-12, 50);
        assert_abs_diff_eq!(v, 2.0, epsilon = 1e-10);
    }

    #[test]
    fn global_grid_weights() {
        let g = SphereQuadGrid::global(180, 360).unwrap();
        assert_abs_diff_eq!(g.total_weight(), 4.0 * PI, epsilon = 1e-10);
        assert!(g.nodes().iter().all(|n| n.weight > 0.0));
        assert!(g
            .nodes()
            .iter()
            .all(|n| n.pos.z.abs() < 1.0 && n.spherical().phi > 0.0));
    }

    #[test]
    fn rejects_small_resolution() {
        assert!(SphereQuadGrid::global(3, 16).is_err());
        assert!(SphereQuadGrid::global(8, 7).is_err());
    }

    #[test]
    fn quadrature_consistency_high_res() {
        let g = SphereQuadGrid::global(360, 720).unwrap();
        assert_abs_diff_eq!(g.integrate(|_| 1.0), 4.0 * PI, epsilon = 1e-5);
        assert_abs_diff_eq!(g.integrate(|n| n.pos.z), 0.0, epsilon = 1e-5);
    }

    #[test]
    fn cap_area_by_indicator() {
        let g = SphereQuadGrid::global(360, 720).unwrap();
        let cap = SphericalCap::new(UnitVec3::from_xyz(0.2, 0.5, 0.7).unwrap(), 0.5).unwrap();
        let area = g.integrate_over(Some(&cap), |_| 1.0);
        // exact chordal-cap area 2πh with h = ε²/2
        let exact = 2.0 * PI * 0.5 * 0.5 / 2.0;
        assert!((area - exact).abs() / exact < 0.02, "{area} vs {exact}");
    }

    #[test]
    fn cap_grid_area_is_exact() {
        let cap = SphericalCap::new(UnitVec3::from_xyz(-0.4, 0.1, 0.3).unwrap(), 0.3).unwrap();
        let t = cap.angular_radius();
        let spec = CapGridSpec {
            cap,
            segments: vec![
                RadialSegment::uniform(0.0, 1e-6 * t, 2),
                RadialSegment::geometric(1e-6 * t, 0.5 * t, 30),
                RadialSegment::uniform(0.5 * t, t, 10),
            ],
            n_theta: 12,
        };
        let g = SphereQuadGrid::cap(&spec).unwrap();
        assert_abs_diff_eq!(g.total_weight(), cap.area(), epsilon = 1e-14);
        for n in g.nodes() {
            assert!(cap.contains(&n.pos));
            assert_abs_diff_eq!(n.e1.cross(&n.e2), n.pos, epsilon = 1e-12);
        }
    }

    #[test]
    fn composite_keeps_total_area() {
        let big = SphericalCap::new(UnitVec3::NORTH, 0.4).unwrap();
        let small = SphericalCap::new(UnitVec3::from_xyz(0.05, 0.0, 1.0).unwrap(), 0.1).unwrap();
        let other = SphericalCap::new(UnitVec3::SOUTH, 0.4).unwrap();
        let spec = |cap: SphericalCap| CapGridSpec {
            cap,
            segments: vec![RadialSegment::uniform(0.0, cap.angular_radius(), 40)],
            n_theta: 48,
        };
        let g = SphereQuadGrid::composite(90, 180, &[spec(big), spec(small), spec(other)]).unwrap();
        assert!((g.total_weight() - 4.0 * PI).abs() < 1e-4, "{}", g.total_weight() - 4.0 * PI);
        let in_small = g.integrate_over(Some(&small), |_| 1.0);
        assert!((in_small - small.area()).abs() / small.area() < 2e-2);
    }
}
