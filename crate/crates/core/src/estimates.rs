//! Closed-form constants and bounds for single bubbles, with 1-D quadrature
//! of the exact integrands they bound.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::adaptive_simpson;

const SIMPSON_TOL: f64 = 1e-10;
const SIMPSON_DEPTH: u32 = 48;

/// Radii of the three-piece bubble profile at scale index `j`.
///
/// In the stereographic plane of a cap of chordal radius `1/j` the disc has
/// radius `plane_radius`. The conformal annulus `inner < ρ < outer` is scaled
/// by `scale` and wrapped over the sphere minus two polar caps of angle
/// `outer`; `image_radius = cot(outer/2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BubbleConstants {
    pub j: u32,
    pub plane_radius: f64,
    pub outer: f64,
    pub image_radius: f64,
    pub scale: f64,
    pub inner: f64,
}

impl BubbleConstants {
    /// `j = 1` is accepted so the closed forms can be checked at the edge.
    pub fn new(j: u32) -> Result<Self> {
        if j == 0 {
            return Err(Error::param("j", "scale index must be positive"));
        }
        let jf = j as f64;
        let plane_radius = (4.0 * jf * jf - 1.0).powf(-0.5);
        let outer = 0.5 * plane_radius;
        let half_tan = (0.5 * outer).tan();
        let image_radius = 1.0 / half_tan;
        Ok(BubbleConstants {
            j,
            plane_radius,
            outer,
            image_radius,
            scale: image_radius / outer,
            inner: outer * half_tan * half_tan,
        })
    }

    /// Chordal radius of the cap the bubble modifies, `2/j`.
    pub fn cap_radius(&self) -> f64 {
        2.0 / self.j as f64
    }

    /// Chordal radius of the cap carrying the nonconstant part, `1/j`.
    pub fn core_radius(&self) -> f64 {
        1.0 / self.j as f64
    }

    /// Chordal radius of the preimage of the disc `ρ < x` around the cap center.
    pub fn chordal_of_plane(x: f64) -> f64 {
        2.0 * x / (x * x + 1.0).sqrt()
    }
}

/// Which closed form of the conformal-annulus bound to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnulusBoundForm {
    /// `((β²/(β²+1))^{2-p} - (r²/(r²+1))^{2-p})`, squared ratios.
    Squared,
    /// `((β/√(β²+1))^{2-p} - (r/√(r²+1))^{2-p})`, what the substitution
    /// `t = cos(φ/2)` produces.
    Substituted,
}

fn check_p(p: f64) -> Result<()> {
    if !(1.0..2.0).contains(&p) {
        return Err(Error::param("p", format!("bound formulas need 1 <= p < 2, got {p}")));
    }
    Ok(())
}

/// Closed-form bound on the first annulus integral.
pub fn i1_bound(p: f64, j: u32, form: AnnulusBoundForm) -> Result<f64> {
    check_p(p)?;
    let c = BubbleConstants::new(j)?;
    let (big, b, r) = (c.image_radius, c.outer, c.inner);
    let prefactor = 4.0 / (2.0 - p) * big.powf(p) / (big * big - b * b).powf(0.5 * p);
    let diff = match form {
        AnnulusBoundForm::Squared => {
            (b * b / (b * b + 1.0)).powf(2.0 - p) - (r * r / (r * r + 1.0)).powf(2.0 - p)
        }
        AnnulusBoundForm::Substituted => {
            (b / (b * b + 1.0).sqrt()).powf(2.0 - p) - (r / (r * r + 1.0).sqrt()).powf(2.0 - p)
        }
    };
    Ok(prefactor * diff)
}

/// `∫ f(ψ) dψ` over `[2 atan r, 2 atan β]`, integrated in `ln ψ` so the
/// geometric spread of the interval is resolved.
fn annulus_integral<F: Fn(f64) -> f64>(c: &BubbleConstants, f: F) -> f64 {
    let lo = (2.0 * c.inner.atan()).ln();
    let hi = (2.0 * c.outer.atan()).ln();
    adaptive_simpson(
        &|s: f64| {
            let psi = s.exp();
            f(psi) * psi
        },
        lo,
        hi,
        SIMPSON_TOL,
        SIMPSON_DEPTH,
    )
}

/// Quadrature of the exact first annulus integrand
/// `(Rβ / (β² + (R² - β²) cos²(φ/2)))^p sin φ`, with `ψ = π - φ`.
pub fn i1_quadrature(p: f64, j: u32) -> Result<f64> {
    if !(1.0..=2.0).contains(&p) {
        return Err(Error::param("p", format!("need 1 <= p <= 2, got {p}")));
    }
    let c = BubbleConstants::new(j)?;
    let (big, b) = (c.image_radius, c.outer);
    Ok(annulus_integral(&c, |psi| {
        let s = (0.5 * psi).sin();
        (big * b / (b * b + (big * big - b * b) * s * s)).powf(p) * psi.sin()
    }))
}

/// Quadrature of `∫ sin^{1-p} φ dφ` over the conformal annulus.
pub fn i2_quadrature(p: f64, j: u32) -> Result<f64> {
    check_p(p)?;
    let c = BubbleConstants::new(j)?;
    Ok(annulus_integral(&c, |psi| psi.sin().powf(1.0 - p)))
}

/// Upper bound on `‖φ - φ₁‖_{H¹}` when the caps at `±q` have chordal radius `2δ`.
pub fn phi1_h1_bound(max_grad_sq: f64, delta: f64) -> Result<f64> {
    if !(max_grad_sq >= 0.0 && delta > 0.0) {
        return Err(Error::param(
            "phi1_h1_bound",
            format!("need max_grad_sq >= 0 and delta > 0, got {max_grad_sq}, {delta}"),
        ));
    }
    Ok((32.0 * PI * delta * delta * (max_grad_sq + 1.0)).sqrt())
}

/// Term-by-term bound on `∫ |∇(bubble)|^p` over the `2/j` cap.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BubbleBudget {
    pub p: f64,
    pub j: u32,
    /// Inner disc: Lipschitz constant `β/r` times the conformal energy of the
    /// whole plane disc, by Hölder.
    pub inner_disc: f64,
    /// `2π(I₁ + I₂)` with both integrals by quadrature.
    pub conformal_annulus: f64,
    /// Outer annulus of the core cap, Lipschitz constant 1.
    pub outer_annulus: f64,
    /// Transition annulus between `1/j` and `2/j`; zero for a constant base.
    pub transition: f64,
}

impl BubbleBudget {
    pub fn total(&self) -> f64 {
        self.inner_disc + self.conformal_annulus + self.outer_annulus + self.transition
    }
}

pub fn bubble_budget(p: f64, j: u32) -> Result<BubbleBudget> {
    check_p(p)?;
    let c = BubbleConstants::new(j)?;
    let (b, r, d) = (c.outer, c.inner, c.plane_radius);
    let jf = j as f64;
    let inner_cap_area = PI * BubbleConstants::chordal_of_plane(r).powi(2);
    let inner_disc = (b / r).powf(p) * (2.0 * PI * d * d).powf(0.5 * p) * inner_cap_area.powf(0.5 * (2.0 - p));
    let conformal_annulus = 2.0 * PI * (i1_quadrature(p, j)? + i2_quadrature(p, j)?);
    let outer_area = PI * (1.0 / (jf * jf) - BubbleConstants::chordal_of_plane(b).powi(2));
    let outer_annulus = (2.0 * PI * (d * d - b * b)).powf(0.5 * p) * outer_area.powf(0.5 * (2.0 - p));
    Ok(BubbleBudget {
        p,
        j,
        inner_disc,
        conformal_annulus,
        outer_annulus,
        transition: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn constants_closed_forms() {
        let c = BubbleConstants::new(1).unwrap();
        assert_abs_diff_eq!(c.plane_radius, 3f64.powf(-0.5), epsilon = 1e-15);
        for j in [1, 2, 5, 17, 80, 1000] {
            let c = BubbleConstants::new(j).unwrap();
            assert_abs_diff_eq!(c.scale * c.inner, (0.5 * c.outer).tan(), epsilon = 1e-14);
            assert!(0.0 < c.inner && c.inner < c.outer && c.outer < c.plane_radius);
        }
        let c = BubbleConstants::new(10_000).unwrap();
        assert_abs_diff_eq!(10_000.0 * c.plane_radius, 0.5, epsilon = 1e-6);
        assert!(BubbleConstants::new(0).is_err());
    }

    #[test]
    fn plane_radius_matches_core_cap() {
        let c = BubbleConstants::new(7).unwrap();
        assert_abs_diff_eq!(
            BubbleConstants::chordal_of_plane(c.plane_radius),
            c.core_radius(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn i1_bounds_decrease_in_j() {
        for form in [AnnulusBoundForm::Squared, AnnulusBoundForm::Substituted] {
            for p in [1.0, 1.5] {
                let v: Vec<f64> = [5, 20, 200].iter().map(|&j| i1_bound(p, j, form).unwrap()).collect();
                assert!(v[2] < v[1] && v[1] < v[0], "{form:?} {p} {v:?}");
            }
            let g: Vec<f64> = [1.9, 1.99, 1.999].iter().map(|&p| i1_bound(p, 10, form).unwrap()).collect();
            assert!(g[0] < g[1] && g[1] < g[2]);
        }
        assert!(i1_bound(2.0, 10, AnnulusBoundForm::Squared).is_err());
    }

    #[test]
    fn i2_values() {
        let c = BubbleConstants::new(10).unwrap();
        let len = 2.0 * c.outer.atan() - 2.0 * c.inner.atan();
        assert_abs_diff_eq!(i2_quadrature(1.0, 10).unwrap(), len, epsilon = 1e-10);
        let v: Vec<f64> = [5, 20, 80].iter().map(|&j| i2_quadrature(1.5, j).unwrap()).collect();
        assert!(v[2] < v[1] && v[1] < v[0]);
        // sin ψ >= 2ψ/π on the interval, so the integral is at most (π/2)/(2-p)
        // for every j; the decay in j only sets in beyond j ~ e^55 at p = 1.99.
        for j in [5, 80, 1_000_000] {
            let w = i2_quadrature(1.99, j).unwrap();
            assert!(w.is_finite() && w > 0.0 && w <= 0.5 * PI / 0.01, "{j}: {w}");
        }
    }

    /// Independent check of the first annulus integral with a plain midpoint
    /// rule in the original polar variable.
    #[test]
    fn i1_quadrature_against_midpoint_rule() {
        let p = 1.25;
        let c = BubbleConstants::new(5).unwrap();
        let (big, b) = (c.image_radius, c.outer);
        let lo = 2.0 * (1.0 / c.outer).atan();
        let hi = 2.0 * (1.0 / c.inner).atan();
        let n = 2_000_000;
        let h = (hi - lo) / n as f64;
        let mid: f64 = (0..n)
            .map(|k| {
                let phi = lo + (k as f64 + 0.5) * h;
                let cs = (0.5 * phi).cos();
                (big * b / (b * b + (big * big - b * b) * cs * cs)).powf(p) * phi.sin() * h
            })
            .sum();
        let q = i1_quadrature(p, 5).unwrap();
        assert!((q - mid).abs() < 1e-6 * mid.max(1e-3), "{q} vs {mid}");
    }

    #[test]
    fn h1_bound_examples() {
        assert_abs_diff_eq!(phi1_h1_bound(0.0, 0.1).unwrap(), (0.32 * PI).sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(phi1_h1_bound(0.0, 0.1).unwrap(), 1.0026513, epsilon = 1e-6);
        let a = phi1_h1_bound(2.0, 0.05).unwrap();
        let b = phi1_h1_bound(2.0, 0.1).unwrap();
        assert_abs_diff_eq!(b / a, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn closed_forms_are_bitwise_reproducible() {
        let a = bubble_budget(1.5, 20).unwrap();
        let b = bubble_budget(1.5, 20).unwrap();
        assert_eq!(a.total().to_bits(), b.total().to_bits());
    }
}
