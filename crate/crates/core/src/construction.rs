//! The boundary-data pipeline: an antipodal coincidence pair, constant caps
//! around it, and arrays of bubbles inside those caps.

use std::cmp::Ordering;
use std::f64::consts::PI;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimates::BubbleConstants;
use crate::functionals::{degree_integral, diff_support_area, image_area, max_grad_sq, w1p_dist};
use crate::maps::{BubblePatch, BubbleProfile, Orientation, Patch, SphereMap, SquashPatch};
use crate::quadrature::{CapGridSpec, RadialSegment, SphereQuadGrid};
use crate::sphere::{rotate_taking, SphericalCap, UnitVec3, Vec3};

/// Largest accepted `|m(q) - m(-q)|`.
pub const PAIR_TOL: f64 = 1e-6;
const PAIR_CANDIDATES: usize = 24;
const PAIR_ITERS: usize = 60;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AntipodalPair {
    pub q: UnitVec3,
    pub mismatch: f64,
}

fn mismatch(m: &SphereMap, q: &Vec3) -> f64 {
    (m.eval(q) - m.eval(&-q)).norm()
}

fn tangent_basis(q: &Vec3) -> (Vec3, Vec3) {
    let a = if q.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let e1 = (a - q * q.dot(&a)).normalize();
    (e1, q.cross(&e1))
}

/// Levenberg-Marquardt on `F(q) = m(q) - m(-q)` in a moving tangent chart.
fn refine_pair(m: &SphereMap, start: Vec3) -> (Vec3, f64) {
    let mut q = start;
    let mut g = mismatch(m, &q);
    let mut mu = 1e-6;
    for _ in 0..PAIR_ITERS {
        if g < 1e-13 {
            break;
        }
        let (e1, e2) = tangent_basis(&q);
        let here = m.jet(&q, &[e1, e2]);
        let there = m.jet(&-q, &[e1, e2]);
        let f = here.value - there.value;
        let cols = [here.d[0] + there.d[0], here.d[1] + there.d[1]];
        let (a11, a12, a22) = (cols[0].dot(&cols[0]), cols[0].dot(&cols[1]), cols[1].dot(&cols[1]));
        let (b1, b2) = (-cols[0].dot(&f), -cols[1].dot(&f));
        let mut improved = false;
        for _ in 0..20 {
            let (d11, d22) = (a11 + mu, a22 + mu);
            let det = d11 * d22 - a12 * a12;
            let u1 = (b1 * d22 - a12 * b2) / det;
            let u2 = (d11 * b2 - a12 * b1) / det;
            let cand = (q + e1 * u1 + e2 * u2).normalize();
            let gc = mismatch(m, &cand);
            if gc < g {
                q = cand;
                g = gc;
                mu = (mu * 0.3).max(1e-12);
                improved = true;
                break;
            }
            mu *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (q, g)
}

/// Searches `grid` for `q` with `m(q) = m(-q)` without checking the degree.
///
/// Nodes are ranked by mismatch, ties broken toward the north pole, and the
/// best few are refined by local descent. One escalation to a global grid of
/// twice the resolution is attempted before failing.
pub fn search_antipodal_pair(m: &SphereMap, grid: &SphereQuadGrid) -> Result<AntipodalPair> {
    match search_on(m, grid) {
        Ok(pair) => Ok(pair),
        Err(first) => {
            let (n_phi, n_theta) = grid.resolution().unwrap_or((90, 180));
            log::debug!("antipodal search failed ({first}); escalating to {}x{}", 2 * n_phi, 2 * n_theta);
            search_on(m, &SphereQuadGrid::global(2 * n_phi, 2 * n_theta)?)
        }
    }
}

fn search_on(m: &SphereMap, grid: &SphereQuadGrid) -> Result<AntipodalPair> {
    let mut ranked: Vec<(f64, f64, Vec3)> = grid
        .nodes()
        .par_iter()
        .map(|n| (mismatch(m, &n.pos), n.pos.z, n.pos))
        .collect();
    ranked.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(Ordering::Equal)
            .then(b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal))
    });
    let mut best = f64::INFINITY;
    for &(g0, _, x) in ranked.iter().take(PAIR_CANDIDATES) {
        let (q, g) = if g0 < PAIR_TOL { (x, g0) } else { refine_pair(m, x) };
        best = best.min(g);
        if g < PAIR_TOL {
            return Ok(AntipodalPair {
                q: UnitVec3::normalize(q),
                mismatch: g,
            });
        }
    }
    Err(Error::NoAntipodalPair { best_mismatch: best })
}

/// As [`search_antipodal_pair`], after checking that `m` has degree zero.
pub fn find_antipodal_pair(m: &SphereMap, grid: &SphereQuadGrid) -> Result<AntipodalPair> {
    let deg = degree_integral(m, grid);
    if deg.round() != 0.0 {
        return Err(Error::DegreeMismatch {
            expected: 0,
            measured: deg,
        });
    }
    search_antipodal_pair(m, grid)
}

fn cap_at(center: UnitVec3, chordal_radius: f64) -> SphericalCap {
    SphericalCap {
        center,
        chordal_radius,
    }
}

/// Image area with multiplicity of the two `2 delta` caps at `±q`.
fn twin_cap_image_area(m: &SphereMap, q: &UnitVec3, delta: f64) -> Result<f64> {
    let mut total = 0.0;
    for c in [*q, q.neg()] {
        let cap = cap_at(c, 2.0 * delta);
        let grid = SphereQuadGrid::cap(&CapGridSpec {
            cap,
            segments: vec![RadialSegment::uniform(0.0, cap.angular_radius(), 48)],
            n_theta: 96,
        })?;
        total += image_area(m, &grid, None);
    }
    Ok(total)
}

/// Radius of the constant caps for an `H¹` budget `eps / 4`.
///
/// Starts from `0.9 eps / (4 sqrt(16π (M + 1)))` with `M` the grid maximum of
/// `|∇_T m|²`, then halves until the image of the two doubled caps has area
/// below `4π` and the doubled caps are disjoint.
pub fn select_delta(m: &SphereMap, q: &UnitVec3, eps: f64, grid: &SphereQuadGrid) -> Result<f64> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::param("eps", format!("must be positive, got {eps}")));
    }
    let max = max_grad_sq(m, grid);
    let mut delta = 0.9 * eps / (4.0 * (16.0 * PI * (max + 1.0)).sqrt());
    for _ in 0..60 {
        if twin_caps_ok(m, q, delta)? {
            return Ok(delta);
        }
        delta *= 0.5;
    }
    Err(Error::Construction(format!("no admissible cap radius found for eps = {eps}")))
}

fn twin_caps_ok(m: &SphereMap, q: &UnitVec3, delta: f64) -> Result<bool> {
    if 2.0 * delta >= 2.0_f64.sqrt() {
        return Ok(false);
    }
    Ok(twin_cap_image_area(m, q, delta)? < 4.0 * PI)
}

/// Base map with constant caps of chordal radius `delta` at `±q`.
#[derive(Clone, Debug, PartialEq)]
pub struct Phi1Spec {
    pub q: UnitVec3,
    pub delta: f64,
    pub base: SphereMap,
}

impl Phi1Spec {
    pub fn new(base: SphereMap, q: UnitVec3, delta: f64) -> Result<Self> {
        if !(delta > 0.0) {
            return Err(Error::param("delta", format!("must be positive, got {delta}")));
        }
        if !twin_caps_ok(&base, &q, delta)? {
            return Err(Error::Construction(format!(
                "caps of radius 2 delta = {} at ±q overlap or have image area >= 4π",
                2.0 * delta
            )));
        }
        Ok(Phi1Spec { q, delta, base })
    }

    /// The doubled caps `B(±q, 2 delta)` outside which the base is unchanged.
    pub fn support_caps(&self) -> [SphericalCap; 2] {
        [cap_at(self.q, 2.0 * self.delta), cap_at(self.q.neg(), 2.0 * self.delta)]
    }

    /// The constant caps `B(±q, delta)`.
    pub fn constant_caps(&self) -> [SphericalCap; 2] {
        [cap_at(self.q, self.delta), cap_at(self.q.neg(), self.delta)]
    }
}

/// Squashes the base map off the caps at `±q`. Each cap takes the base value
/// at its own center; the two agree to within the pair mismatch.
pub fn build_phi1(spec: &Phi1Spec) -> Result<SphereMap> {
    let mut m = spec.base.clone();
    for c in [spec.q, spec.q.neg()] {
        let value = UnitVec3::normalize(spec.base.eval(&c.vec()));
        m = m.with_patch(Patch::Squash(SquashPatch {
            center: c,
            inner_radius: spec.delta,
            value,
        }))?;
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BubbleSpec {
    pub center: UnitVec3,
    pub j: u32,
    pub target_value: UnitVec3,
    pub orientation: Orientation,
    #[serde(default)]
    pub antipodal: bool,
    #[serde(default)]
    pub profile: BubbleProfile,
}

impl BubbleSpec {
    pub fn constants(&self) -> Result<BubbleConstants> {
        BubbleConstants::new(self.j)
    }

    pub fn patch(&self) -> BubblePatch {
        BubblePatch {
            center: self.center,
            j: self.j,
            target: self.target_value,
            orientation: self.orientation,
            antipodal: self.antipodal,
            profile: self.profile,
            shift: 0.0,
        }
    }
}

/// Inserts one bubble; `m` must be constantly `target_value` on the `2/j` cap.
pub fn build_bubble(m: &SphereMap, spec: &BubbleSpec) -> Result<SphereMap> {
    if spec.j < 2 {
        return Err(Error::param("j", format!("need j >= 2, got {}", spec.j)));
    }
    m.with_patch(Patch::Bubble(spec.patch()))
}

/// How the bubble cap radius `2/j` is checked against the constant caps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeparationRule {
    /// `2/j < delta / (4N)` in addition to the geometric checks.
    #[default]
    Strict,
    /// Only require the `2N` bubble caps to be pairwise disjoint and inside
    /// the constant caps.
    Geometric,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phi2Spec {
    pub phi1: Phi1Spec,
    pub n: usize,
    pub j: u32,
    pub alpha: f64,
    pub xis: Vec<UnitVec3>,
    pub rule: SeparationRule,
    pub profile: BubbleProfile,
}

/// Bubble centers along a great-circle arc through `q`, symmetric about `q`:
/// `ξ_i` sits at angle `(i/(N+1) - 1/2) alpha` from `q`.
fn place_centers(q: &UnitVec3, n: usize, alpha: f64) -> Vec<UnitVec3> {
    let rot = rotate_taking(&UnitVec3::NORTH, q);
    (1..=n)
        .map(|i| {
            let a = (i as f64 / (n as f64 + 1.0) - 0.5) * alpha;
            UnitVec3::normalize(rot * Vec3::new(0.0, a.sin(), a.cos()))
        })
        .collect()
}

impl Phi2Spec {
    pub fn new(phi1: Phi1Spec, n: usize, j: u32, rule: SeparationRule, profile: BubbleProfile) -> Result<Self> {
        if n == 0 {
            return Err(Error::param("N", "need at least one bubble"));
        }
        if j < 2 {
            return Err(Error::param("j", format!("need j >= 2, got {j}")));
        }
        let alpha = 4.0 * (0.5 * phi1.delta).asin();
        let xis = place_centers(&phi1.q, n, alpha);
        let spec = Phi2Spec {
            phi1,
            n,
            j,
            alpha,
            xis,
            rule,
            profile,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Bubble caps of chordal radius `2/j`: the `N` at `ξ_i`, then the `N` at `-ξ_i`.
    pub fn bubble_caps(&self) -> Vec<SphericalCap> {
        let r = 2.0 / self.j as f64;
        self.xis
            .iter()
            .map(|x| cap_at(*x, r))
            .chain(self.xis.iter().map(|x| cap_at(x.neg(), r)))
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let r = 2.0 / self.j as f64;
        if self.rule == SeparationRule::Strict && r >= self.phi1.delta / (4.0 * self.n as f64) {
            return Err(Error::Construction(format!(
                "bubble radius 2/j = {r} is not below delta/(4N) = {}",
                self.phi1.delta / (4.0 * self.n as f64)
            )));
        }
        let caps = self.bubble_caps();
        let [home, away] = self.phi1.constant_caps();
        for (i, c) in caps.iter().enumerate() {
            let host = if i < self.n { &home } else { &away };
            if !host.contains_cap(c) {
                return Err(Error::Construction(format!("bubble cap {i} leaves its constant cap")));
            }
            for (k, o) in caps.iter().enumerate().skip(i + 1) {
                if !c.disjoint_from(o) {
                    return Err(Error::Construction(format!("bubble caps {i} and {k} overlap")));
                }
            }
        }
        Ok(())
    }

    /// Bubble specs against `phi1`: orientation +1 at each `ξ_i`, antipodal
    /// pullbacks at `-ξ_i`.
    pub fn bubbles(&self, phi1: &SphereMap) -> Vec<BubbleSpec> {
        let direct = self.xis.iter().map(|x| BubbleSpec {
            center: *x,
            j: self.j,
            target_value: UnitVec3::normalize(phi1.eval(&x.vec())),
            orientation: Orientation::Preserving,
            antipodal: false,
            profile: self.profile,
        });
        let mirrored = self.xis.iter().map(|x| BubbleSpec {
            center: x.neg(),
            j: self.j,
            target_value: UnitVec3::normalize(phi1.eval(&-x.vec())),
            orientation: Orientation::Preserving,
            antipodal: true,
            profile: self.profile,
        });
        direct.chain(mirrored).collect()
    }

    pub fn plan(&self) -> ConstructionPlan {
        ConstructionPlan {
            base_map: serde_json::to_value(&self.phi1.base).expect("map descriptors serialize"),
            q: self.phi1.q,
            delta: self.phi1.delta,
            n: self.n,
            j: self.j,
            alpha: self.alpha,
            xis: self.xis.clone(),
            orientations: vec![Orientation::Preserving; self.n],
            rule: self.rule,
            profile: self.profile,
        }
    }
}

/// Result of the pipeline: the base map, `φ₁` and `φ₂`.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub base: SphereMap,
    pub phi1: SphereMap,
    pub phi2: SphereMap,
}

pub fn build_phi2(spec: &Phi2Spec) -> Result<Pipeline> {
    let phi1 = build_phi1(&spec.phi1)?;
    let phi2 = spec.bubbles(&phi1).iter().try_fold(phi1.clone(), |m, b| build_bubble(&m, b))?;
    Ok(Pipeline {
        base: spec.phi1.base.clone(),
        phi1,
        phi2,
    })
}

/// Serialized form of a [`Phi2Spec`]; rebuilding it is deterministic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstructionPlan {
    pub base_map: serde_json::Value,
    pub q: UnitVec3,
    pub delta: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub j: u32,
    pub alpha: f64,
    pub xis: Vec<UnitVec3>,
    pub orientations: Vec<Orientation>,
    #[serde(default)]
    pub rule: SeparationRule,
    #[serde(default)]
    pub profile: BubbleProfile,
}

impl ConstructionPlan {
    pub fn spec(&self, base_dir: &Path) -> Result<Phi2Spec> {
        let base = SphereMap::from_json(self.base_map.clone(), base_dir)?;
        let spec = Phi2Spec::new(Phi1Spec::new(base, self.q, self.delta)?, self.n, self.j, self.rule, self.profile)?;
        let drift = spec.xis.iter().zip(&self.xis).map(|(a, b)| a.chordal_dist(b)).fold(0.0, f64::max);
        if self.xis.len() != self.n || drift > 1e-12 || (spec.alpha - self.alpha).abs() > 1e-12 {
            return Err(Error::Parse("plan centers or angle disagree with q, delta and N".into()));
        }
        if self.orientations.iter().any(|o| *o != Orientation::Preserving) {
            return Err(Error::Parse("plan orientations must all be +1".into()));
        }
        Ok(spec)
    }
}

/// Term-by-term bound on `‖φ - φ₂‖_{W^{1,p}}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetChain {
    pub p: f64,
    /// Measured `‖φ - φ₂‖_{W^{1,p}}`.
    pub measured: f64,
    /// `‖φ - φ₂‖_{L^p}`.
    pub lp_term: f64,
    /// `‖∇(φ - φ₁)‖_{L²} · area{φ ≠ φ₁}^{(2-p)/(2p)}`.
    pub holder_term: f64,
    /// `2N` times the seminorm of one bubble against its constant.
    pub bubble_term: f64,
    /// Measured `‖∇(φ₁ - φ₂)‖_{L^p}`, bounded by `bubble_term`.
    pub bubble_measured: f64,
    pub support_phi1: f64,
    pub support_phi2: f64,
}

impl BudgetChain {
    pub fn bound(&self) -> f64 {
        self.lp_term + self.holder_term + self.bubble_term
    }
}

const SUPPORT_TOL: f64 = 1e-12;

pub fn budget_chain(spec: &Phi2Spec, pipe: &Pipeline, p: f64, grid: &SphereQuadGrid) -> Result<BudgetChain> {
    let full = w1p_dist(&pipe.base, &pipe.phi2, p, grid)?;
    let h1 = w1p_dist(&pipe.base, &pipe.phi1, 2.0, grid)?;
    let support_phi1 = diff_support_area(&pipe.base, &pipe.phi1, grid, SUPPORT_TOL)?;
    let support_phi2 = diff_support_area(&pipe.base, &pipe.phi2, grid, SUPPORT_TOL)?;
    let holder_term = h1.seminorm * support_phi1.powf((2.0 - p) / (2.0 * p));
    let bubbles = w1p_dist(&pipe.phi1, &pipe.phi2, p, grid)?;
    let first = spec.bubbles(&pipe.phi1)[0];
    let target = SphereMap::constant(first.target_value);
    let single = build_bubble(&target, &first)?;
    let one = w1p_dist(&target, &single, p, grid)?;
    Ok(BudgetChain {
        p,
        measured: full.full,
        lp_term: full.lp,
        holder_term,
        bubble_term: 2.0 * spec.n as f64 * one.seminorm,
        bubble_measured: bubbles.seminorm,
        support_phi1,
        support_phi2,
    })
}
