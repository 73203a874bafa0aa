//! Integral functionals of boundary maps: energy, Sobolev distances,
//! difference support and the degree integral.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{CapResolution, Jet, SphereMap};
use crate::quadrature::{pairwise_sum, CapGridSpec, QuadNode, SphereQuadGrid};
use crate::sphere::SphericalCap;

fn node_jet(m: &SphereMap, n: &QuadNode) -> Jet {
    m.jet(&n.pos, &[n.e1, n.e2])
}

/// Global grid refined on the patch caps of every map in `maps`.
///
/// Caps shared by several maps are refined once, with the layout that has the
/// most radial segments.
pub fn adapted_grid(maps: &[&SphereMap], n_phi: usize, n_theta: usize, res: &CapResolution) -> Result<SphereQuadGrid> {
    let mut caps: Vec<CapGridSpec> = Vec::new();
    for m in maps {
        for spec in m.refinement_caps(res) {
            match caps.iter_mut().find(|c| c.cap == spec.cap) {
                Some(existing) if existing.segments.len() < spec.segments.len() => *existing = spec,
                Some(_) => {}
                None => caps.push(spec),
            }
        }
    }
    SphereQuadGrid::composite(n_phi, n_theta, &caps)
}

/// `∫ |∇_T m|² dσ` over `region`, or over the whole sphere.
pub fn boundary_energy(m: &SphereMap, grid: &SphereQuadGrid, region: Option<&SphericalCap>) -> f64 {
    grid.integrate_over(region, |n| node_jet(m, n).grad_sq())
}

/// `∫ |det dm| dσ` over `region`: the image area counted with multiplicity.
pub fn image_area(m: &SphereMap, grid: &SphereQuadGrid, region: Option<&SphericalCap>) -> f64 {
    grid.integrate_over(region, |n| node_jet(m, n).jacobian().abs())
}

/// Largest `|∇_T m|²` over the grid nodes.
pub fn max_grad_sq(m: &SphereMap, grid: &SphereQuadGrid) -> f64 {
    grid.nodes()
        .par_iter()
        .map(|n| node_jet(m, n).grad_sq())
        .reduce(|| 0.0, f64::max)
}

/// `(1/4π) ∫ m · (∂₁m × ∂₂m) dσ`; close to an integer for continuous maps.
pub fn degree_integral(m: &SphereMap, grid: &SphereQuadGrid) -> f64 {
    grid.integrate(|n| node_jet(m, n).jacobian()) / (4.0 * PI)
}

/// Degree integral restricted to `cap`; close to an integer when `m` is
/// constant on the rim of the cap.
pub fn cap_degree_integral(m: &SphereMap, grid: &SphereQuadGrid, cap: &SphericalCap) -> f64 {
    grid.integrate_over(Some(cap), |n| node_jet(m, n).jacobian()) / (4.0 * PI)
}

/// Components of the `W^{1,p}` distance between two maps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct W1pDistance {
    pub p: f64,
    /// `(∫ (|Δ|² + |∇Δ|²)^{p/2})^{1/p}`.
    pub full: f64,
    /// `(∫ |∇Δ|^p)^{1/p}`.
    pub seminorm: f64,
    /// `(∫ |Δ|^p)^{1/p}`.
    pub lp: f64,
}

/// `W^{1,p}` distance with chordal differences in R³, for `1 <= p <= 2`.
pub fn w1p_dist(m1: &SphereMap, m2: &SphereMap, p: f64, grid: &SphereQuadGrid) -> Result<W1pDistance> {
    w1p_dist_within(m1, m2, p, grid, None)
}

/// As [`w1p_dist`], restricted to the union of `caps` when given.
pub fn w1p_dist_within(
    m1: &SphereMap,
    m2: &SphereMap,
    p: f64,
    grid: &SphereQuadGrid,
    caps: Option<&[SphericalCap]>,
) -> Result<W1pDistance> {
    if !(1.0..=2.0).contains(&p) {
        return Err(Error::param("p", format!("need 1 <= p <= 2, got {p}")));
    }
    let terms: Vec<[f64; 3]> = grid
        .nodes()
        .par_iter()
        .map(|n| {
            if let Some(caps) = caps {
                if !caps.iter().any(|c| c.contains(&n.pos)) {
                    return [0.0; 3];
                }
            }
            let (a, b) = (node_jet(m1, n), node_jet(m2, n));
            let diff = (a.value - b.value).norm_squared();
            let grad = (a.d[0] - b.d[0]).norm_squared() + (a.d[1] - b.d[1]).norm_squared();
            let hp = 0.5 * p;
            [
                n.weight * (diff + grad).powf(hp),
                n.weight * grad.powf(hp),
                n.weight * diff.powf(hp),
            ]
        })
        .collect();
    let sum = |k: usize| pairwise_sum(&terms.iter().map(|t| t[k]).collect::<Vec<_>>()).powf(1.0 / p);
    Ok(W1pDistance {
        p,
        full: sum(0),
        seminorm: sum(1),
        lp: sum(2),
    })
}

/// Measure of `{x : |m1(x) - m2(x)| > tol}`.
pub fn diff_support_area(m1: &SphereMap, m2: &SphereMap, grid: &SphereQuadGrid, tol: f64) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(Error::param("tol", format!("must be positive, got {tol}")));
    }
    Ok(grid.integrate(|n| {
        if (m1.eval(&n.pos) - m2.eval(&n.pos)).norm() > tol {
            1.0
        } else {
            0.0
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::{reflection_z, BaseMap, BubblePatch, BubbleProfile, Orientation, Patch, SquashPatch};
    use crate::sphere::UnitVec3;

    fn grid() -> SphereQuadGrid {
        SphereQuadGrid::global(180, 360).unwrap()
    }

    #[test]
    fn energies_of_simple_maps() {
        let g = grid();
        assert_eq!(boundary_energy(&SphereMap::constant(UnitVec3::NORTH), &g, None), 0.0);
        let e = boundary_energy(&SphereMap::identity(), &g, None);
        assert!((e - 8.0 * PI).abs() < 0.005 * 8.0 * PI);
    }

    #[test]
    fn energy_is_additive_over_regions() {
        let g = grid();
        let m = SphereMap::new(BaseMap::Wobble { amplitude: 0.6 }).unwrap();
        let cap = SphericalCap::new(UnitVec3::from_xyz(0.3, 0.2, 0.8).unwrap(), 0.7).unwrap();
        let inside = boundary_energy(&m, &g, Some(&cap));
        let outside = g.integrate(|n| {
            if cap.contains(&n.pos) {
                0.0
            } else {
                m.jet(&n.pos, &[n.e1, n.e2]).grad_sq()
            }
        });
        let total = boundary_energy(&m, &g, None);
        assert!(((inside + outside) - total).abs() < 1e-8 * total);
    }

    #[test]
    fn degrees_of_simple_maps() {
        let g = grid();
        let cases: Vec<(SphereMap, f64)> = vec![
            (SphereMap::identity(), 1.0),
            (SphereMap::constant(UnitVec3::SOUTH), 0.0),
            (SphereMap::new(BaseMap::Antipodal).unwrap(), -1.0),
            (SphereMap::new(reflection_z()).unwrap(), -1.0),
            (SphereMap::new(BaseMap::Wrap { k: 3 }).unwrap(), 3.0),
            (SphereMap::new(BaseMap::Wobble { amplitude: 0.6 }).unwrap(), 0.0),
            (SphereMap::new(BaseMap::Fold).unwrap(), 0.0),
        ];
        for (m, d) in cases {
            assert!((degree_integral(&m, &g) - d).abs() < 0.01, "{:?}", m.base());
        }
    }

    #[test]
    fn bubble_degree_and_energy() {
        let target = UnitVec3::from_xyz(0.1, 0.2, 0.9).unwrap();
        let center = UnitVec3::from_xyz(0.5, -0.5, 0.1).unwrap();
        for (orientation, sign) in [(Orientation::Preserving, 1.0), (Orientation::Reversing, -1.0)] {
            let b = BubblePatch {
                center,
                j: 10,
                target,
                orientation,
                antipodal: false,
                profile: BubbleProfile::Exact,
                shift: 0.0,
            };
            let m = SphereMap::constant(target).with_patch(Patch::Bubble(b)).unwrap();
            let g = adapted_grid(&[&m], 90, 180, &CapResolution::default()).unwrap();
            assert!((degree_integral(&m, &g) - sign).abs() < 0.01);
            let e = boundary_energy(&m, &g, None);
            assert!((e - 8.0 * PI).abs() < 0.02 * 8.0 * PI, "{e}");
        }
    }

    #[test]
    fn w1p_identical_and_locality() {
        let g0 = grid();
        let base = SphereMap::new(BaseMap::Wobble { amplitude: 0.6 }).unwrap();
        let d = w1p_dist(&base, &base, 1.5, &g0).unwrap();
        assert_eq!((d.full, d.seminorm, d.lp), (0.0, 0.0, 0.0));
        let q = UnitVec3::from_xyz(0.0, 0.6, 0.8).unwrap();
        let patched = base
            .with_patch(Patch::Squash(SquashPatch {
                center: q,
                inner_radius: 0.15,
                value: UnitVec3::normalize(base.eval(&q.vec())),
            }))
            .unwrap();
        let g = adapted_grid(&[&base, &patched], 90, 180, &CapResolution::default()).unwrap();
        let caps: Vec<SphericalCap> = patched.patches().iter().map(|p| p.cap()).collect();
        for p in [1.0, 1.5, 2.0] {
            let whole = w1p_dist(&base, &patched, p, &g).unwrap();
            let local = w1p_dist_within(&base, &patched, p, &g, Some(&caps)).unwrap();
            assert!((whole.full - local.full).abs() < 1e-10 * whole.full.max(1.0));
        }
        assert!(w1p_dist(&base, &patched, 2.5, &g).is_err());
    }

    #[test]
    fn w1p_normalized_monotone_in_p() {
        let g = grid();
        let a = SphereMap::identity();
        let b = SphereMap::new(BaseMap::Wobble { amplitude: 0.6 }).unwrap();
        let mut last = 0.0;
        for p in [1.0, 1.25, 1.5, 1.75, 2.0] {
            let d = w1p_dist(&a, &b, p, &g).unwrap().full / (4.0 * PI).powf(1.0 / p);
            assert!(d >= last - 1e-12);
            last = d;
        }
    }

    #[test]
    fn support_area_of_one_cap() {
        let base = SphereMap::identity();
        let q = UnitVec3::from_xyz(0.3, -0.1, 0.9).unwrap();
        let patched = base
            .with_patch(Patch::Squash(SquashPatch {
                center: q,
                inner_radius: 0.2,
                value: q,
            }))
            .unwrap();
        let g = adapted_grid(&[&patched], 180, 360, &CapResolution::default()).unwrap();
        let area = diff_support_area(&base, &patched, &g, 1e-9).unwrap();
        let exact = PI * 0.4 * 0.4;
        assert!((area - exact).abs() < 0.02 * exact, "{area} vs {exact}");
        assert_eq!(diff_support_area(&base, &base, &g, 1e-9).unwrap(), 0.0);
    }
}
