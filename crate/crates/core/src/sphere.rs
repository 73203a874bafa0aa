//! Points, caps, rotations and stereographic coordinates on the unit sphere.
//!
//! Conventions used throughout the crate:
//!
//! * the polar angle `phi` is measured from the north pole `(0, 0, 1)`, so
//!   `phi = π` is the south pole;
//! * every cap or ball radius is *chordal*, i.e. measured in the ambient
//!   Euclidean metric of R³;
//! * stereographic projection is taken from the north pole onto the
//!   equatorial plane, so the south pole maps to the origin.

use std::f64::consts::{PI, TAU};

use nalgebra::{Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Rotation = Rotation3<f64>;

/// A point of S², renormalized on construction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct UnitVec3(Vec3);

impl UnitVec3 {
    pub const NORTH: UnitVec3 = UnitVec3(Vector3::new(0.0, 0.0, 1.0));
    pub const SOUTH: UnitVec3 = UnitVec3(Vector3::new(0.0, 0.0, -1.0));

    /// Normalizes `v`; fails on the zero vector or non-finite input.
    ///
    /// Vectors already of unit length to within a few ulps are kept bit-exact,
    /// so serialized points read back unchanged.
    pub fn new(v: Vec3) -> Result<Self> {
        let n = v.norm();
        if !(n.is_finite() && n > 1e-300) {
            return Err(Error::param("vector", format!("cannot normalize {v:?}")));
        }
        if (n - 1.0).abs() <= 4.0 * f64::EPSILON {
            return Ok(UnitVec3(v));
        }
        Ok(UnitVec3(v / n))
    }

    pub fn from_xyz(x: f64, y: f64, z: f64) -> Result<Self> {
        Self::new(Vector3::new(x, y, z))
    }

    /// Caller guarantees `v` is nonzero; used on internally produced vectors.
    pub(crate) fn normalize(v: Vec3) -> Self {
        UnitVec3(v / v.norm())
    }

    pub fn vec(&self) -> Vec3 {
        self.0
    }

    pub fn neg(&self) -> Self {
        UnitVec3(-self.0)
    }

    pub fn chordal_dist(&self, other: &UnitVec3) -> f64 {
        (self.0 - other.0).norm()
    }

    /// Great-circle distance, robust near 0 and π.
    pub fn angle_to(&self, other: &UnitVec3) -> f64 {
        self.0.cross(&other.0).norm().atan2(self.0.dot(&other.0))
    }

    pub fn to_spherical(&self) -> SphericalPoint {
        SphericalPoint::from_vec(&self.0)
    }

    pub fn rotated(&self, r: &Rotation) -> Self {
        UnitVec3::normalize(r * self.0)
    }
}

impl TryFrom<[f64; 3]> for UnitVec3 {
    type Error = Error;
    fn try_from(a: [f64; 3]) -> Result<Self> {
        UnitVec3::new(Vector3::new(a[0], a[1], a[2]))
    }
}

impl From<UnitVec3> for [f64; 3] {
    fn from(u: UnitVec3) -> Self {
        [u.0.x, u.0.y, u.0.z]
    }
}

/// Polar angle `phi ∈ [0, π]` (from the north pole) and azimuth `theta ∈ [0, 2π)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SphericalPoint {
    pub phi: f64,
    pub theta: f64,
}

impl SphericalPoint {
    /// Clamps `phi` into `[0, π]`, wraps `theta` into `[0, 2π)`, and pins
    /// `theta = 0` at the poles.
    pub fn new(phi: f64, theta: f64) -> Self {
        let phi = phi.clamp(0.0, PI);
        let theta = if phi == 0.0 || phi == PI {
            0.0
        } else {
            wrap_angle(theta)
        };
        SphericalPoint { phi, theta }
    }

    pub fn from_vec(v: &Vec3) -> Self {
        let rho = v.x.hypot(v.y);
        let phi = rho.atan2(v.z);
        let theta = if rho == 0.0 { 0.0 } else { v.y.atan2(v.x) };
        SphericalPoint::new(phi, theta)
    }

    pub fn to_vec(&self) -> Vec3 {
        let (sp, cp) = self.phi.sin_cos();
        let (st, ct) = self.theta.sin_cos();
        Vector3::new(sp * ct, sp * st, cp)
    }

    pub fn to_unit(&self) -> UnitVec3 {
        UnitVec3::normalize(self.to_vec())
    }

    /// Unit tangent vectors `(e_phi, e_theta)`; `e_phi × e_theta` is the outward normal.
    pub fn frame(&self) -> (Vec3, Vec3) {
        let (sp, cp) = self.phi.sin_cos();
        let (st, ct) = self.theta.sin_cos();
        (Vector3::new(cp * ct, cp * st, -sp), Vector3::new(-st, ct, 0.0))
    }
}

pub(crate) fn wrap_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(TAU);
    if t >= TAU {
        0.0
    } else {
        t
    }
}

/// Polar coordinates `(rho, theta)` in the equatorial plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolarPoint2 {
    pub rho: f64,
    pub theta: f64,
}

impl PolarPoint2 {
    pub fn new(rho: f64, theta: f64) -> Result<Self> {
        if !(rho >= 0.0 && rho.is_finite()) {
            return Err(Error::param("rho", format!("must be finite and >= 0, got {rho}")));
        }
        Ok(PolarPoint2 {
            rho,
            theta: wrap_angle(theta),
        })
    }
}

/// Stereographic projection from the north pole: `(phi, theta) ↦ (cot(phi/2), theta)`.
pub fn stereo_project(p: SphericalPoint) -> Result<PolarPoint2> {
    if p.phi <= 0.0 {
        return Err(Error::Domain {
            op: "stereo_project",
            detail: "the north pole has no stereographic image".into(),
        });
    }
    let half = 0.5 * p.phi;
    Ok(PolarPoint2 {
        rho: half.cos() / half.sin(),
        theta: p.theta,
    })
}

/// Inverse of [`stereo_project`]; the origin goes to the south pole.
pub fn stereo_inverse(w: PolarPoint2) -> SphericalPoint {
    // 2·arccot(rho) written so that rho = 0 gives π exactly.
    SphericalPoint::new(2.0 * 1f64.atan2(w.rho), w.theta)
}

/// Minimal-angle proper rotation taking `a` to `b`.
///
/// For antipodal inputs the axis is the coordinate axis least aligned with
/// `a` (ties go to the lower index: x before y before z), made orthogonal to
/// `a`, and the angle is π. Hence `(0,0,1) → (0,0,-1)` is the half-turn about x.
pub fn rotate_taking(a: &UnitVec3, b: &UnitVec3) -> Rotation {
    let (a, b) = (a.vec(), b.vec());
    let cross = a.cross(&b);
    let s = cross.norm();
    let c = a.dot(&b);
    if s > 1e-12 {
        return Rotation3::from_axis_angle(&Unit::new_unchecked(cross / s), s.atan2(c));
    }
    if c > 0.0 {
        return Rotation3::identity();
    }
    let axis = tie_break_axis(&a);
    Rotation3::from_axis_angle(&Unit::new_normalize(axis), PI)
}

fn tie_break_axis(a: &Vec3) -> Vec3 {
    let mut best = 0;
    for i in 1..3 {
        if a[i].abs() < a[best].abs() {
            best = i;
        }
    }
    let mut e = Vec3::zeros();
    e[best] = 1.0;
    e - a * a.dot(&e)
}

/// `B(center, r) ∩ S²` with chordal radius `r ∈ (0, 2]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SphericalCap {
    pub center: UnitVec3,
    pub chordal_radius: f64,
}

impl SphericalCap {
    pub fn new(center: UnitVec3, chordal_radius: f64) -> Result<Self> {
        if !(chordal_radius > 0.0 && chordal_radius <= 2.0) {
            return Err(Error::param(
                "chordal_radius",
                format!("must lie in (0, 2], got {chordal_radius}"),
            ));
        }
        Ok(SphericalCap {
            center,
            chordal_radius,
        })
    }

    /// Area of the cap, `π r²` for chordal radius `r`.
    pub fn area(&self) -> f64 {
        PI * self.chordal_radius * self.chordal_radius
    }

    /// Geodesic (angular) radius `2 arcsin(r/2)`.
    pub fn angular_radius(&self) -> f64 {
        2.0 * (0.5 * self.chordal_radius).min(1.0).asin()
    }

    /// Open cap membership, `|x - center| < r`.
    pub fn contains(&self, x: &Vec3) -> bool {
        (x - self.center.vec()).norm_squared() < self.chordal_radius * self.chordal_radius
    }

    pub fn rotated(&self, r: &Rotation) -> Self {
        SphericalCap {
            center: self.center.rotated(r),
            chordal_radius: self.chordal_radius,
        }
    }

    /// True when the two open caps do not intersect.
    pub fn disjoint_from(&self, other: &SphericalCap) -> bool {
        self.angular_radius() + other.angular_radius() <= self.center.angle_to(&other.center) + 1e-15
    }

    /// True when `other` lies inside `self`.
    pub fn contains_cap(&self, other: &SphericalCap) -> bool {
        other.angular_radius() + self.center.angle_to(&other.center) <= self.angular_radius() + 1e-15
    }
}

/// Area of the complement of a chordal cap of radius `eps`, in two forms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapComplementArea {
    /// The closed form `π(3 + (1 - ε/2)²)`.
    pub stated_value: f64,
    /// `π(4 - ε²)`, the area of `S² \ B(p, ε)` for a chordal radius.
    pub chordal_value: f64,
}

pub fn cap_complement_area(eps: f64) -> Result<CapComplementArea> {
    if !(eps > 0.0 && eps <= 2.0) {
        return Err(Error::param("eps", format!("must lie in (0, 2], got {eps}")));
    }
    let t = 1.0 - 0.5 * eps;
    Ok(CapComplementArea {
        stated_value: PI * (3.0 + t * t),
        chordal_value: PI * (4.0 - eps * eps),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn stereo_examples() {
        let w = stereo_project(SphericalPoint::new(PI, 0.7)).unwrap();
        assert_abs_diff_eq!(w.rho, 0.0, epsilon = 1e-15);
        let w = stereo_project(SphericalPoint::new(PI / 2.0, 1.0)).unwrap();
        assert_abs_diff_eq!(w.rho, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w.theta, 1.0, epsilon = 1e-15);

        let j = 5.0;
        let phi = 2.0 * (1.0f64 / (2.0 * j)).acos();
        let w = stereo_project(SphericalPoint::new(phi, 0.3)).unwrap();
        assert_abs_diff_eq!(w.rho, (4.0 * j * j - 1.0f64).powf(-0.5), epsilon = 1e-14);
        assert_abs_diff_eq!(w.rho, 0.1005038, epsilon = 1e-7);
    }

    #[test]
    fn stereo_rejects_north_pole() {
        assert!(matches!(
            stereo_project(SphericalPoint::new(0.0, 0.0)),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn stereo_inverse_examples() {
        let p = stereo_inverse(PolarPoint2::new(0.0, 0.0).unwrap());
        assert_eq!(p.phi, PI);
        assert_eq!(p.theta, 0.0);
        let p = stereo_inverse(PolarPoint2::new(1.0, 1.0).unwrap());
        assert_abs_diff_eq!(p.phi, PI / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.theta, 1.0, epsilon = 1e-15);
        let beta: f64 = 0.05;
        let p = stereo_inverse(PolarPoint2::new((beta / 2.0).tan(), 2.0).unwrap());
        assert_abs_diff_eq!(p.phi, PI - beta, epsilon = 1e-14);
    }

    #[test]
    fn rotation_examples() {
        let a = UnitVec3::from_xyz(0.3, -0.2, 0.9).unwrap();
        let r = rotate_taking(&a, &a);
        assert_eq!(r, Rotation3::identity());

        let r = rotate_taking(&UnitVec3::NORTH, &UnitVec3::SOUTH);
        let expected = Rotation3::from_axis_angle(&Vector3::x_axis(), PI);
        assert_abs_diff_eq!(r.matrix(), expected.matrix(), epsilon = 1e-15);
    }

    #[test]
    fn cap_area_and_membership() {
        let cap = SphericalCap::new(UnitVec3::NORTH, 2.0).unwrap();
        assert_abs_diff_eq!(cap.area(), 4.0 * PI);
        assert_abs_diff_eq!(cap.angular_radius(), PI);
        assert!(cap.contains(&Vector3::new(1.0, 0.0, 0.0)));
        assert!(SphericalCap::new(UnitVec3::NORTH, 2.5).is_err());
        assert!(SphericalCap::new(UnitVec3::NORTH, 0.0).is_err());
    }

    #[test]
    fn cap_complement_values() {
        let a = cap_complement_area(2.0).unwrap();
        assert_abs_diff_eq!(a.stated_value, 3.0 * PI, epsilon = 1e-15);
        assert_abs_diff_eq!(a.chordal_value, 0.0, epsilon = 1e-15);
        let a = cap_complement_area(2f64.sqrt()).unwrap();
        assert_abs_diff_eq!(a.chordal_value, 2.0 * PI, epsilon = 1e-14);
        let a = cap_complement_area(1e-9).unwrap();
        assert_abs_diff_eq!(a.stated_value, 4.0 * PI, epsilon = 1e-8);
        assert_abs_diff_eq!(a.chordal_value, 4.0 * PI, epsilon = 1e-8);
        let a = cap_complement_area(0.5).unwrap();
        assert_abs_diff_eq!(a.chordal_value, 3.75 * PI, epsilon = 1e-15);
        assert!(cap_complement_area(0.0).is_err());
        assert!(cap_complement_area(2.1).is_err());
    }

    fn unit() -> impl Strategy<Value = UnitVec3> {
        (-1.0f64..1.0, 0.0f64..TAU).prop_map(|(z, t)| {
            let s = (1.0 - z * z).sqrt();
            UnitVec3::from_xyz(s * t.cos(), s * t.sin(), z).unwrap()
        })
    }

    proptest! {
        #[test]
        fn stereo_round_trip(phi in 0.01f64..=PI, theta in 0.0f64..TAU) {
            let p = SphericalPoint::new(phi, theta);
            let q = stereo_inverse(stereo_project(p).unwrap());
            prop_assert!((q.to_vec() - p.to_vec()).norm() < 1e-9);
        }

        #[test]
        fn stereo_inverse_is_conformal(rho in 0.05f64..20.0, theta in 0.0f64..TAU) {
            // Singular values of d(stereo_inverse) in Cartesian plane coordinates.
            let h = 1e-6;
            let f = |x: f64, y: f64| {
                let w = PolarPoint2::new(x.hypot(y), y.atan2(x)).unwrap();
                stereo_inverse(w).to_vec()
            };
            let (x, y) = (rho * theta.cos(), rho * theta.sin());
            let dx = (f(x + h, y) - f(x - h, y)) / (2.0 * h);
            let dy = (f(x, y + h) - f(x, y - h)) / (2.0 * h);
            let (a, b, c) = (dx.dot(&dx), dx.dot(&dy), dy.dot(&dy));
            let disc = ((a - c).powi(2) + 4.0 * b * b).sqrt();
            let s1 = (0.5 * (a + c + disc)).sqrt();
            let s2 = (0.5 * (a + c - disc).max(0.0)).sqrt();
            prop_assert!((s1 - s2).abs() / s1 < 1e-4);
        }

        #[test]
        fn rotate_taking_maps_a_to_b(a in unit(), b in unit(), v in unit()) {
            let r = rotate_taking(&a, &b);
            prop_assert!((r * a.vec() - b.vec()).norm() < 1e-12);
            prop_assert!(((r * v.vec()).norm() - 1.0).abs() < 1e-12);
            prop_assert!((r.matrix().determinant() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn antipodal_rotation_is_half_turn(a in unit()) {
            let r = rotate_taking(&a, &a.neg());
            prop_assert!((r * a.vec() + a.vec()).norm() < 1e-12);
        }
    }
}
