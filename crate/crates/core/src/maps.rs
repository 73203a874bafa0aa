//! Maps S² → S² built from an analytic or sampled base plus cap-local patches.
//!
//! A [`SphereMap`] evaluates its last patch whose cap contains the point; that
//! patch sees the base together with all earlier patches as its inner map.
//! Patch caps are pairwise disjoint or nested, so a bubble can sit inside the
//! constant disc of a squash patch.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimates::BubbleConstants;
use crate::quadrature::{CapGridSpec, RadialSegment};
use crate::sphere::{rotate_taking, Rotation, SphericalCap, SphericalPoint, UnitVec3, Vec3};

/// Default finite-difference step for sampled maps.
pub const FD_STEP: f64 = 1e-5;

/// Value and directional derivatives along two tangent vectors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet {
    pub value: Vec3,
    pub d: [Vec3; 2],
}

impl Jet {
    fn constant(value: Vec3) -> Self {
        Jet {
            value,
            d: [Vec3::zeros(); 2],
        }
    }

    /// `|dm e1|² + |dm e2|²` when the directions are orthonormal.
    pub fn grad_sq(&self) -> f64 {
        self.d[0].norm_squared() + self.d[1].norm_squared()
    }

    /// Signed area factor `m · (dm e1 × dm e2)`.
    pub fn jacobian(&self) -> f64 {
        self.value.dot(&self.d[0].cross(&self.d[1]))
    }
}

/// Derivatives along `e_phi` and along `e_theta` (the latter already divided
/// by `sin phi`, i.e. per unit arc length).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TangentDeriv {
    pub d_phi: Vec3,
    pub d_theta_scaled: Vec3,
}

impl TangentDeriv {
    pub fn grad_sq(&self) -> f64 {
        self.d_phi.norm_squared() + self.d_theta_scaled.norm_squared()
    }
}

/// Samples of a map on the midpoint latitude-longitude lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSamples {
    n_phi: usize,
    n_theta: usize,
    values: Vec<Vec3>,
    north: Vec3,
    south: Vec3,
}

#[derive(Serialize, Deserialize)]
struct GridSidecar {
    n_phi: usize,
    n_theta: usize,
    layout: String,
}

const GRID_LAYOUT: &str = "f64 little-endian, row-major [phi][theta][xyz], nodes at cell midpoints";

impl GridSamples {
    pub fn new(n_phi: usize, n_theta: usize, values: Vec<Vec3>) -> Result<Self> {
        if n_phi < 2 || n_theta < 4 || values.len() != n_phi * n_theta {
            return Err(Error::param(
                "grid",
                format!("need {n_phi}x{n_theta} >= 2x4 values, got {}", values.len()),
            ));
        }
        let mut values = values;
        for v in values.iter_mut() {
            let n = v.norm();
            if !(n.is_finite() && n > 1e-12) {
                return Err(Error::InvalidMap(format!("grid value {v:?} is not normalizable")));
            }
            *v /= n;
        }
        let pole = |row: &[Vec3]| {
            let s: Vec3 = row.iter().sum();
            if s.norm() > 1e-12 {
                s.normalize()
            } else {
                row[0]
            }
        };
        let north = pole(&values[..n_theta]);
        let south = pole(&values[(n_phi - 1) * n_theta..]);
        Ok(GridSamples {
            n_phi,
            n_theta,
            values,
            north,
            south,
        })
    }

    /// Samples `m` at the lattice nodes.
    pub fn sample(m: &SphereMap, n_phi: usize, n_theta: usize) -> Result<Self> {
        let dphi = PI / n_phi as f64;
        let dtheta = TAU / n_theta as f64;
        let values = (0..n_phi)
            .flat_map(|k| (0..n_theta).map(move |l| (k, l)))
            .map(|(k, l)| {
                let p = SphericalPoint::new((k as f64 + 0.5) * dphi, (l as f64 + 0.5) * dtheta);
                m.eval(&p.to_vec())
            })
            .collect();
        GridSamples::new(n_phi, n_theta, values)
    }

    fn row_value(&self, k: usize, v: f64) -> Vec3 {
        let n = self.n_theta;
        let l0 = v.floor();
        let f = v - l0;
        let a = (l0 as i64).rem_euclid(n as i64) as usize;
        let b = (a + 1) % n;
        let row = &self.values[k * n..(k + 1) * n];
        row[a] * (1.0 - f) + row[b] * f
    }

    /// Bilinear interpolation in `(phi, theta)`, periodic in theta, blended
    /// into the mean pole value beyond the first and last rows, then projected
    /// back onto the sphere.
    pub fn eval(&self, x: &Vec3) -> Vec3 {
        let p = SphericalPoint::from_vec(x);
        let u = p.phi / (PI / self.n_phi as f64) - 0.5;
        let v = p.theta / (TAU / self.n_theta as f64) - 0.5;
        let last = (self.n_phi - 1) as f64;
        let mixed = if u <= 0.0 {
            let f = (u + 0.5) / 0.5;
            self.north * (1.0 - f) + self.row_value(0, v) * f
        } else if u >= last {
            let f = (u - last) / 0.5;
            self.row_value(self.n_phi - 1, v) * (1.0 - f) + self.south * f
        } else {
            let k = u.floor() as usize;
            let f = u - k as f64;
            self.row_value(k, v) * (1.0 - f) + self.row_value(k + 1, v) * f
        };
        let n = mixed.norm();
        if n > 1e-12 {
            mixed / n
        } else {
            self.row_value(0, v).normalize()
        }
    }

    /// Writes the binary sample file and a JSON sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.values.len() * 24);
        for v in &self.values {
            for c in v.iter() {
                bytes.extend_from_slice(&c.to_le_bytes());
            }
        }
        crate::output::write_atomic(path, &bytes)?;
        let sidecar = GridSidecar {
            n_phi: self.n_phi,
            n_theta: self.n_theta,
            layout: GRID_LAYOUT.to_string(),
        };
        let json = serde_json::to_vec_pretty(&sidecar)?;
        crate::output::write_atomic(&sidecar_path(path), &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sidecar: GridSidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
        let bytes = fs::read(path)?;
        let expected = sidecar.n_phi * sidecar.n_theta * 24;
        if bytes.len() != expected {
            return Err(Error::Parse(format!(
                "{} has {} bytes, sidecar implies {expected}",
                path.display(),
                bytes.len()
            )));
        }
        let values = bytes
            .chunks_exact(24)
            .map(|c| {
                let f = |i: usize| f64::from_le_bytes(c[8 * i..8 * i + 8].try_into().unwrap());
                Vec3::new(f(0), f(1), f(2))
            })
            .collect();
        GridSamples::new(sidecar.n_phi, sidecar.n_theta, values)
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Reference to a sampled map on disk; samples are loaded on resolution.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridRef {
    pub path: PathBuf,
    #[serde(skip)]
    samples: Option<Arc<GridSamples>>,
}

impl PartialEq for GridRef {
    fn eq(&self, other: &Self) -> bool {
        self.path == other.path && self.samples == other.samples
    }
}

impl GridRef {
    pub fn from_samples(path: PathBuf, samples: GridSamples) -> Self {
        GridRef {
            path,
            samples: Some(Arc::new(samples)),
        }
    }
}

/// Analytic or sampled base maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum BaseMap {
    Constant {
        value: UnitVec3,
    },
    Identity,
    Antipodal,
    /// `x ↦ Mx` for an orthogonal matrix, rows listed first.
    Orthogonal {
        matrix: [[f64; 3]; 3],
    },
    /// `(phi, theta) ↦ (phi, k theta)`, degree `k`.
    Wrap {
        k: i32,
    },
    /// Exponential map at the north pole of a smooth planar field; the image
    /// avoids the south pole, so the degree is 0.
    Wobble {
        #[serde(default = "default_wobble")]
        amplitude: f64,
    },
    /// `x ↦ (x, y, z²)/|·|`, folding the southern hemisphere onto the northern one.
    Fold,
    Grid(GridRef),
}

fn default_wobble() -> f64 {
    0.6
}

impl BaseMap {
    fn eval(&self, x: &Vec3) -> Vec3 {
        match self {
            BaseMap::Constant { value } => value.vec(),
            BaseMap::Identity => *x,
            BaseMap::Antipodal => -x,
            BaseMap::Orthogonal { matrix } => matrix3(matrix) * x,
            BaseMap::Wrap { k } => {
                let p = SphericalPoint::from_vec(x);
                SphericalPoint::new(p.phi, *k as f64 * p.theta).to_vec()
            }
            BaseMap::Wobble { amplitude } => wobble_jet(*amplitude, x, &[Vec3::zeros(); 2]).value,
            BaseMap::Fold => Vec3::new(x.x, x.y, x.z * x.z).normalize(),
            BaseMap::Grid(g) => g.samples.as_ref().expect("grid samples resolved").eval(x),
        }
    }

    fn jet(&self, x: &Vec3, dirs: &[Vec3; 2], h: f64) -> Jet {
        match self {
            BaseMap::Constant { value } => Jet::constant(value.vec()),
            BaseMap::Identity => Jet {
                value: *x,
                d: *dirs,
            },
            BaseMap::Antipodal => Jet {
                value: -x,
                d: [-dirs[0], -dirs[1]],
            },
            BaseMap::Orthogonal { matrix } => {
                let m = matrix3(matrix);
                Jet {
                    value: m * x,
                    d: [m * dirs[0], m * dirs[1]],
                }
            }
            BaseMap::Wrap { k } => wrap_jet(*k, x, dirs),
            BaseMap::Wobble { amplitude } => wobble_jet(*amplitude, x, dirs),
            BaseMap::Fold => {
                let g = Vec3::new(x.x, x.y, x.z * x.z);
                let n = g.norm();
                let value = g / n;
                let d = dirs.map(|v| {
                    let dg = Vec3::new(v.x, v.y, 2.0 * x.z * v.z);
                    (dg - value * value.dot(&dg)) / n
                });
                Jet { value, d }
            }
            BaseMap::Grid(_) => fd_jet(|y| self.eval(y), x, dirs, h),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            BaseMap::Orthogonal { matrix } => {
                let m = matrix3(matrix);
                let err = (m.transpose() * m - Matrix3::identity()).abs().max();
                if err > 1e-9 {
                    return Err(Error::InvalidMap(format!("matrix is not orthogonal (error {err:.2e})")));
                }
                Ok(())
            }
            BaseMap::Wobble { amplitude } if !(amplitude.is_finite() && amplitude.abs() <= 1.0) => Err(
                Error::InvalidMap(format!("wobble amplitude must lie in [-1, 1], got {amplitude}")),
            ),
            BaseMap::Grid(g) if g.samples.is_none() => Err(Error::InvalidMap(format!(
                "grid samples for {} are not loaded",
                g.path.display()
            ))),
            _ => Ok(()),
        }
    }
}

fn matrix3(rows: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, k| rows[i][k])
}

fn wrap_jet(k: i32, x: &Vec3, dirs: &[Vec3; 2]) -> Jet {
    let p = SphericalPoint::from_vec(x);
    let img = SphericalPoint::new(p.phi, k as f64 * p.theta);
    let (e_phi, e_theta) = p.frame();
    let (f_phi, f_theta) = img.frame();
    let kf = k as f64;
    Jet {
        value: img.to_vec(),
        d: dirs.map(|v| f_phi * v.dot(&e_phi) + f_theta * (kf * v.dot(&e_theta))),
    }
}

/// `exp_N(t)` with `t = a (x + ½ sin 3z, y + ½ z cos 2x)`.
fn wobble_jet(a: f64, x: &Vec3, dirs: &[Vec3; 2]) -> Jet {
    let t = a * nalgebra::Vector2::new(x.x + 0.5 * (3.0 * x.z).sin(), x.y + 0.5 * x.z * (2.0 * x.x).cos());
    let r = t.norm();
    let (sinc, dsinc_over_r) = if r < 1e-4 {
        let r2 = r * r;
        (1.0 - r2 / 6.0 + r2 * r2 / 120.0, -1.0 / 3.0 + r2 / 30.0)
    } else {
        (r.sin() / r, (r * r.cos() - r.sin()) / (r * r * r))
    };
    let value = Vec3::new(sinc * t.x, sinc * t.y, r.cos());
    let d = dirs.map(|v| {
        let dt = a * nalgebra::Vector2::new(
            v.x + 1.5 * (3.0 * x.z).cos() * v.z,
            v.y + 0.5 * ((2.0 * x.x).cos() * v.z - 2.0 * x.z * (2.0 * x.x).sin() * v.x),
        );
        let tdt = t.dot(&dt);
        let xy = dt * sinc + t * (dsinc_over_r * tdt);
        Vec3::new(xy.x, xy.y, -sinc * tdt)
    });
    Jet { value, d }
}

/// Central differences along the retraction `normalize(x ± h v)`.
fn fd_jet<F: Fn(&Vec3) -> Vec3>(f: F, x: &Vec3, dirs: &[Vec3; 2], h: f64) -> Jet {
    let d = dirs.map(|v| {
        let n = v.norm();
        if n == 0.0 {
            return Vec3::zeros();
        }
        let u = v / n;
        let plus = f(&(x + u * h).normalize());
        let minus = f(&(x - u * h).normalize());
        (plus - minus) * (n / (2.0 * h))
    });
    Jet { value: f(x), d }
}

/// Constant disc of chordal radius `inner_radius` around `center`, with the
/// annulus out to `2 inner_radius` squashed radially onto the whole cap.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SquashPatch {
    pub center: UnitVec3,
    pub inner_radius: f64,
    pub value: UnitVec3,
}

impl SquashPatch {
    /// Geodesic radii of the constant disc and of the whole patch.
    fn radii(&self) -> (f64, f64) {
        (2.0 * (0.5 * self.inner_radius).asin(), 2.0 * self.inner_radius.asin())
    }

    fn polar(&self, x: &Vec3) -> (f64, Vec3) {
        let c = self.center.vec();
        let t = UnitVec3::normalize(*x).angle_to(&self.center);
        let radial = x - c * t.cos();
        let n = radial.norm();
        let u = if n > 0.0 { radial / n } else { any_orthogonal(&c) };
        (t, u)
    }

    fn pull_back(&self, x: &Vec3) -> Option<Vec3> {
        let (t_in, t_out) = self.radii();
        let (t, u) = self.polar(x);
        if t < t_in {
            return None;
        }
        let s = t_out * (t - t_in) / (t_out - t_in);
        Some(self.center.vec() * s.cos() + u * s.sin())
    }

    fn eval(&self, x: &Vec3, inner: &dyn Fn(&Vec3) -> Vec3) -> Vec3 {
        match self.pull_back(x) {
            None => self.value.vec(),
            Some(y) => inner(&y),
        }
    }

    fn jet(&self, x: &Vec3, dirs: &[Vec3; 2], inner: &dyn Fn(&Vec3, &[Vec3; 2]) -> Jet) -> Jet {
        let (t_in, t_out) = self.radii();
        let (t, u) = self.polar(x);
        if t < t_in {
            return Jet::constant(self.value.vec());
        }
        let c = self.center.vec();
        let slope = t_out / (t_out - t_in);
        let s = slope * (t - t_in);
        let y = c * s.cos() + u * s.sin();
        let e_x = -c * t.sin() + u * t.cos();
        let e_y = -c * s.sin() + u * s.cos();
        let stretch = s.sin() / t.sin();
        let pushed = dirs.map(|v| {
            let radial = v.dot(&e_x);
            e_y * (slope * radial) + (v - e_x * radial) * stretch
        });
        let mut j = inner(&y, &pushed);
        j.value = inner(&y, &[Vec3::zeros(); 2]).value;
        j
    }
}

fn any_orthogonal(c: &Vec3) -> Vec3 {
    let a = if c.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    (a - c * c.dot(&a)).normalize()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "i8", into = "i8")]
pub enum Orientation {
    Preserving,
    Reversing,
}

impl Orientation {
    pub fn sign(self) -> f64 {
        match self {
            Orientation::Preserving => 1.0,
            Orientation::Reversing => -1.0,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Orientation::Preserving => Orientation::Reversing,
            Orientation::Reversing => Orientation::Preserving,
        }
    }
}

impl TryFrom<i8> for Orientation {
    type Error = Error;
    fn try_from(v: i8) -> Result<Self> {
        match v {
            1 => Ok(Orientation::Preserving),
            -1 => Ok(Orientation::Reversing),
            _ => Err(Error::Parse(format!("orientation must be 1 or -1, got {v}"))),
        }
    }
}

impl From<Orientation> for i8 {
    fn from(o: Orientation) -> i8 {
        match o {
            Orientation::Preserving => 1,
            Orientation::Reversing => -1,
        }
    }
}

/// Radial profile `F(ρ)` of the image polar angle over the stereographic disc.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BubbleProfile {
    /// Linear inner disc, conformal annulus, linear outer annulus.
    #[default]
    Exact,
    /// `F = 2 arccot(s/(1-s²))` with `s = ρ/plane_radius`: one smooth sweep
    /// over the whole core disc, resolvable on coarse lattices.
    Spread,
}

impl BubbleProfile {
    /// `(F(ρ), F'(ρ))`.
    fn eval(self, c: &BubbleConstants, rho: f64) -> (f64, f64) {
        match self {
            BubbleProfile::Exact => {
                let (d, b, r) = (c.plane_radius, c.outer, c.inner);
                if rho <= r {
                    (PI - rho * b / r, -b / r)
                } else if rho < b {
                    let lr = c.scale * rho;
                    (2.0 * (1.0f64).atan2(lr), -2.0 * c.scale / (1.0 + lr * lr))
                } else if rho < d {
                    (d - rho, -1.0)
                } else {
                    (0.0, 0.0)
                }
            }
            BubbleProfile::Spread => {
                let d = c.plane_radius;
                let s = rho / d;
                if s >= 1.0 {
                    return (0.0, 0.0);
                }
                let g = 1.0 - s * s;
                (2.0 * g.atan2(s), -2.0 * (1.0 + s * s) / (s * s + g * g) / d)
            }
        }
    }

    /// Kinks of the profile in the plane, used as quadrature ring edges.
    fn breakpoints(self, c: &BubbleConstants) -> Vec<f64> {
        match self {
            BubbleProfile::Exact => vec![c.inner, c.outer],
            BubbleProfile::Spread => vec![],
        }
    }
}

/// One bubble on the cap `B(center, 2/j)`.
///
/// Inside `1/j` the map is the profile in stereographic coordinates centered
/// at `center`, rotated so that the rim goes to `target` and the center to
/// `-target`; on the annulus out to `2/j` it is constantly `target`. With
/// `antipodal` set the patch is the pullback `x ↦ bubble(-x)` of the bubble
/// centered at `-center`, which has the opposite degree. A nonzero `shift`
/// translates the image plane (a Möbius motion of the target), keeping the map
/// continuous while concentrating the wrap as the shift grows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BubblePatch {
    pub center: UnitVec3,
    pub j: u32,
    pub target: UnitVec3,
    pub orientation: Orientation,
    #[serde(default)]
    pub antipodal: bool,
    #[serde(default)]
    pub profile: BubbleProfile,
    #[serde(default)]
    pub shift: f64,
}

struct BubbleFrame {
    consts: BubbleConstants,
    core_center: UnitVec3,
    to_local: Rotation,
    to_target: Rotation,
    sigma: f64,
}

impl BubblePatch {
    pub fn constants(&self) -> BubbleConstants {
        BubbleConstants::new(self.j).expect("j validated on insertion")
    }

    fn frame(&self) -> BubbleFrame {
        let core_center = if self.antipodal { self.center.neg() } else { self.center };
        BubbleFrame {
            consts: self.constants(),
            core_center,
            to_local: rotate_taking(&core_center, &UnitVec3::SOUTH),
            to_target: rotate_taking(&UnitVec3::NORTH, &self.target),
            sigma: self.orientation.sign(),
        }
    }

    pub fn eval(&self, x: &Vec3) -> Vec3 {
        self.jet_inner(x, None).value
    }

    fn jet(&self, x: &Vec3, dirs: &[Vec3; 2]) -> Jet {
        if self.shift != 0.0 {
            return fd_jet(|y| self.eval(y), x, dirs, 1e-6);
        }
        self.jet_inner(x, Some(dirs))
    }

    fn jet_inner(&self, x: &Vec3, dirs: Option<&[Vec3; 2]>) -> Jet {
        let f = self.frame();
        let (y, dirs) = if self.antipodal {
            (-x, dirs.map(|d| [-d[0], -d[1]]))
        } else {
            (*x, dirs.copied())
        };
        if (y - f.core_center.vec()).norm() >= f.consts.core_radius() {
            return Jet::constant(self.target.vec());
        }
        let p = f.to_local * y;
        let s = p.x.hypot(p.y);
        let denom = 1.0 - p.z;
        let rho = s / denom;
        let (big_f, slope) = self.profile.eval(&f.consts, rho);
        let (ct, st) = if s > 0.0 { (p.x / s, f.sigma * p.y / s) } else { (1.0, 0.0) };
        let (sf, cf) = big_f.sin_cos();
        let mut image = Vec3::new(sf * ct, sf * st, cf);
        if self.shift != 0.0 {
            let w = nalgebra::Vector2::new(ct, st) * (0.5 * big_f).tan().recip() + nalgebra::Vector2::new(self.shift, 0.0);
            let wn = w.norm();
            let g = 2.0 * (1.0f64).atan2(wn);
            image = if wn > 0.0 {
                Vec3::new(g.sin() * w.x / wn, g.sin() * w.y / wn, g.cos())
            } else {
                -Vec3::z()
            };
        }
        let value = f.to_target * image;
        let Some(dirs) = dirs else {
            return Jet::constant(value);
        };
        let e_f = Vec3::new(cf * ct, cf * st, -sf);
        let e_t = Vec3::new(-st, ct, 0.0);
        let d = dirs.map(|v| {
            let q = f.to_local * v;
            let local = if s < 1e-12 {
                Vec3::new(q.x, f.sigma * q.y, 0.0) * (-0.5 * slope)
            } else {
                let ds = (p.x * q.x + p.y * q.y) / s;
                let drho = ds / denom + s * q.z / (denom * denom);
                let dtheta = (p.x * q.y - p.y * q.x) / (s * s);
                e_f * (slope * drho) + e_t * (sf * f.sigma * dtheta)
            };
            f.to_target * local
        });
        Jet { value, d }
    }

    /// Geodesic radius about the cap center of the preimage of the disc `ρ < x`.
    fn geodesic_of_plane(x: f64) -> f64 {
        2.0 * x.atan()
    }

    fn quad_segments(&self, res: &CapResolution) -> Vec<RadialSegment> {
        let c = self.constants();
        let n = res.radial;
        let core = Self::geodesic_of_plane(c.plane_radius);
        let cap = 2.0 * (1.0 / self.j as f64).min(1.0).asin();
        let mut edges = vec![0.0];
        edges.extend(self.profile.breakpoints(&c).into_iter().map(Self::geodesic_of_plane));
        edges.push(core);
        let mut segs = Vec::new();
        for w in edges.windows(2) {
            // the conformal annulus spans many decades in radius
            if self.profile == BubbleProfile::Exact && w[0] > 0.0 && w[1] < core {
                segs.push(RadialSegment::geometric(w[0], w[1], 4 * n));
            } else {
                segs.push(RadialSegment::uniform(w[0], w[1], n));
            }
        }
        segs.push(RadialSegment::uniform(core, cap, (n / 8).max(2)));
        segs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Patch {
    Squash(SquashPatch),
    Bubble(BubblePatch),
}

impl Patch {
    pub fn cap(&self) -> SphericalCap {
        match self {
            Patch::Squash(s) => SphericalCap {
                center: s.center,
                chordal_radius: 2.0 * s.inner_radius,
            },
            Patch::Bubble(b) => SphericalCap {
                center: b.center,
                chordal_radius: (2.0 / b.j as f64).min(2.0),
            },
        }
    }
}

/// Rings per radial segment and azimuthal nodes for patch cap grids.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapResolution {
    pub radial: usize,
    pub azimuthal: usize,
}

impl Default for CapResolution {
    fn default() -> Self {
        CapResolution {
            radial: 200,
            azimuthal: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SphereMap {
    base: BaseMap,
    patches: Vec<Patch>,
}

#[derive(Serialize, Deserialize)]
struct MapDescriptor {
    #[serde(flatten)]
    base: BaseMap,
    #[serde(default)]
    patches: Vec<Patch>,
}

impl Serialize for SphereMap {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MapDescriptor {
            base: self.base.clone(),
            patches: self.patches.clone(),
        }
        .serialize(s)
    }
}

impl SphereMap {
    pub fn new(base: BaseMap) -> Result<Self> {
        base.validate()?;
        Ok(SphereMap {
            base,
            patches: Vec::new(),
        })
    }

    pub fn constant(value: UnitVec3) -> Self {
        SphereMap {
            base: BaseMap::Constant { value },
            patches: Vec::new(),
        }
    }

    pub fn identity() -> Self {
        SphereMap {
            base: BaseMap::Identity,
            patches: Vec::new(),
        }
    }

    /// Parses a JSON descriptor; grid paths are resolved against `base_dir`.
    pub fn from_json(value: serde_json::Value, base_dir: &Path) -> Result<Self> {
        let desc: MapDescriptor = serde_json::from_value(value)?;
        let base = match desc.base {
            BaseMap::Grid(g) => {
                let full = base_dir.join(&g.path);
                let samples = GridSamples::load(&full)?;
                BaseMap::Grid(GridRef {
                    path: g.path,
                    samples: Some(Arc::new(samples)),
                })
            }
            other => other,
        };
        let mut m = SphereMap::new(base)?;
        for p in desc.patches {
            m = m.with_patch(p)?;
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_slice(&fs::read(path)?)?;
        SphereMap::from_json(value, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::output::write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn base(&self) -> &BaseMap {
        &self.base
    }

    pub fn patches(&self) -> &[Patch] {
        &self.patches
    }

    /// Returns the map with `patch` layered on top.
    ///
    /// The new cap must be disjoint from or nested with every existing cap. A
    /// squash patch must agree with the current map at its center; a bubble
    /// needs the current map constant and equal to its target on its cap.
    pub fn with_patch(&self, patch: Patch) -> Result<Self> {
        let cap = patch.cap();
        for (i, other) in self.patches.iter().enumerate() {
            let oc = other.cap();
            if !(cap.disjoint_from(&oc) || cap.contains_cap(&oc) || oc.contains_cap(&cap)) {
                return Err(Error::InvalidMap(format!(
                    "patch cap {cap:?} overlaps patch {i} ({oc:?}) without nesting"
                )));
            }
        }
        match &patch {
            Patch::Squash(s) => {
                if !(s.inner_radius > 0.0 && s.inner_radius < 1.0) {
                    return Err(Error::param("inner_radius", format!("must lie in (0, 1), got {}", s.inner_radius)));
                }
                let here = self.eval(&s.center.vec());
                if (here - s.value.vec()).norm() > 1e-9 {
                    return Err(Error::Construction(format!(
                        "squash value {:?} differs from the map at the center ({here:?})",
                        s.value
                    )));
                }
            }
            Patch::Bubble(b) => {
                if b.j == 0 {
                    return Err(Error::param("j", "scale index must be positive"));
                }
                let worst = cap_samples(&cap)
                    .iter()
                    .map(|x| (self.eval(x) - b.target.vec()).norm())
                    .fold(0.0, f64::max);
                if worst > 1e-9 {
                    return Err(Error::Construction(format!(
                        "map is not constant on the bubble cap (deviation {worst:.3e})"
                    )));
                }
            }
        }
        let mut out = self.clone();
        out.patches.push(patch);
        Ok(out)
    }

    /// Evaluates at a unit vector.
    pub fn eval(&self, x: &Vec3) -> Vec3 {
        self.eval_upto(self.patches.len(), x)
    }

    pub fn evaluate(&self, p: SphericalPoint) -> UnitVec3 {
        UnitVec3::normalize(self.eval(&p.to_vec()))
    }

    fn eval_upto(&self, k: usize, x: &Vec3) -> Vec3 {
        for i in (0..k).rev() {
            let patch = &self.patches[i];
            if patch.cap().contains(x) {
                return match patch {
                    Patch::Squash(s) => s.eval(x, &|y| self.eval_upto(i, y)),
                    Patch::Bubble(b) => b.eval(x),
                };
            }
        }
        self.base.eval(x)
    }

    /// Value and derivatives along the tangent vectors `dirs` at `x`.
    pub fn jet(&self, x: &Vec3, dirs: &[Vec3; 2]) -> Jet {
        self.jet_upto(self.patches.len(), x, dirs, FD_STEP)
    }

    fn jet_upto(&self, k: usize, x: &Vec3, dirs: &[Vec3; 2], h: f64) -> Jet {
        for i in (0..k).rev() {
            let patch = &self.patches[i];
            if patch.cap().contains(x) {
                return match patch {
                    Patch::Squash(s) => s.jet(x, dirs, &|y, d| self.jet_upto(i, y, d, h)),
                    Patch::Bubble(b) => b.jet(x, dirs),
                };
            }
        }
        self.base.jet(x, dirs, h)
    }

    /// Polar caps with ring layouts matched to each patch, for composite grids.
    pub fn refinement_caps(&self, res: &CapResolution) -> Vec<CapGridSpec> {
        self.patches
            .iter()
            .map(|p| {
                let cap = p.cap();
                let segments = match p {
                    Patch::Squash(s) => {
                        let (t_in, t_out) = s.radii();
                        vec![
                            RadialSegment::uniform(0.0, t_in, (res.radial / 8).max(2)),
                            RadialSegment::uniform(t_in, t_out, res.radial),
                        ]
                    }
                    Patch::Bubble(b) => b.quad_segments(res),
                };
                CapGridSpec {
                    cap,
                    segments,
                    n_theta: res.azimuthal,
                }
            })
            .collect()
    }
}

/// Center plus rings of points covering the closed cap.
fn cap_samples(cap: &SphericalCap) -> Vec<Vec3> {
    let rot = rotate_taking(&UnitVec3::NORTH, &cap.center);
    let t = cap.angular_radius();
    let mut pts = vec![cap.center.vec()];
    for f in [0.25, 0.5, 0.75, 0.999] {
        for l in 0..16 {
            let p = SphericalPoint::new(f * t, l as f64 * TAU / 16.0);
            pts.push(rot * p.to_vec());
        }
    }
    pts
}

/// Derivatives in the `(e_phi, e_theta)` frame with finite-difference step `h`
/// for sampled maps.
pub fn tangent_deriv(m: &SphereMap, p: SphericalPoint, h: f64) -> Result<TangentDeriv> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::param("h", format!("step must lie in [1e-7, 1e-3], got {h}")));
    }
    if p.phi < 2.0 * h || p.phi > PI - 2.0 * h {
        return Err(Error::Domain {
            op: "tangent_deriv",
            detail: format!("phi = {} is within 2h of a pole", p.phi),
        });
    }
    let (e_phi, e_theta) = p.frame();
    let j = m.jet_upto(m.patches.len(), &p.to_vec(), &[e_phi, e_theta], h);
    Ok(TangentDeriv {
        d_phi: j.d[0],
        d_theta_scaled: j.d[1],
    })
}

/// Reflection in the equatorial plane, degree -1.
pub fn reflection_z() -> BaseMap {
    BaseMap::Orthogonal {
        matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn fd_reference(m: &SphereMap, x: &Vec3, v: &Vec3) -> Vec3 {
        let h = 1e-6;
        (m.eval(&(x + v * h).normalize()) - m.eval(&(x - v * h).normalize())) / (2.0 * h)
    }

    fn tangent_pair(x: &Vec3) -> [Vec3; 2] {
        let p = SphericalPoint::from_vec(x);
        let (a, b) = p.frame();
        [a, b]
    }

    #[test]
    fn basic_evaluations() {
        let c = UnitVec3::from_xyz(1.0, 2.0, 3.0).unwrap();
        let p = SphericalPoint::new(1.1, 2.2);
        assert_eq!(SphereMap::constant(c).evaluate(p), c);
        assert_abs_diff_eq!(SphereMap::identity().evaluate(p).vec(), p.to_vec(), epsilon = 1e-15);
    }

    #[test]
    fn identity_gradient_is_two() {
        let m = SphereMap::identity();
        for (phi, theta) in [(0.3, 0.1), (1.5, 4.0), (2.9, 6.0)] {
            let d = tangent_deriv(&m, SphericalPoint::new(phi, theta), 1e-5).unwrap();
            assert_abs_diff_eq!(d.grad_sq(), 2.0, epsilon = 1e-12);
        }
        let c = SphereMap::constant(UnitVec3::NORTH);
        let d = tangent_deriv(&c, SphericalPoint::new(1.0, 1.0), 1e-5).unwrap();
        assert_eq!(d.grad_sq(), 0.0);
    }

    #[test]
    fn tangent_deriv_rejects_poles_and_bad_steps() {
        let m = SphereMap::identity();
        assert!(tangent_deriv(&m, SphericalPoint::new(1e-6, 0.0), 1e-5).is_err());
        assert!(tangent_deriv(&m, SphericalPoint::new(1.0, 0.0), 1e-2).is_err());
    }

    fn analytic_bases() -> Vec<SphereMap> {
        vec![
            SphereMap::new(BaseMap::Wrap { k: 2 }).unwrap(),
            SphereMap::new(BaseMap::Wobble { amplitude: 0.6 }).unwrap(),
            SphereMap::new(BaseMap::Fold).unwrap(),
            SphereMap::new(reflection_z()).unwrap(),
            SphereMap::new(BaseMap::Antipodal).unwrap(),
        ]
    }

    #[test]
    fn analytic_jets_match_finite_differences() {
        let pts = [Vec3::new(0.3, -0.4, 0.5), Vec3::new(-0.8, 0.1, -0.2), Vec3::new(0.0, 0.9, 0.3)];
        for m in analytic_bases() {
            for x in pts.iter().map(|p| p.normalize()) {
                let dirs = tangent_pair(&x);
                let j = m.jet(&x, &dirs);
                assert_abs_diff_eq!(j.value, m.eval(&x), epsilon = 1e-14);
                for (k, v) in dirs.iter().enumerate() {
                    assert_abs_diff_eq!(j.d[k], fd_reference(&m, &x, v), epsilon = 1e-7);
                }
            }
        }
    }

    #[test]
    fn wobble_stays_off_the_south_pole() {
        let m = SphereMap::new(BaseMap::Wobble { amplitude: 0.6 }).unwrap();
        for k in 0..50 {
            for l in 0..50 {
                let p = SphericalPoint::new((k as f64 + 0.5) * PI / 50.0, l as f64 * TAU / 50.0);
                assert!(m.evaluate(p).vec().z > -0.9);
            }
        }
    }

    fn squashed(base: SphereMap, center: UnitVec3, delta: f64) -> SphereMap {
        let value = UnitVec3::normalize(base.eval(&center.vec()));
        base.with_patch(Patch::Squash(SquashPatch {
            center,
            inner_radius: delta,
            value,
        }))
        .unwrap()
    }

    #[test]
    fn squash_patch_values() {
        let q = UnitVec3::from_xyz(0.2, -0.3, 0.9).unwrap();
        let m = squashed(SphereMap::identity(), q, 0.2);
        assert_abs_diff_eq!(m.eval(&q.vec()), q.vec(), epsilon = 1e-15);
        let inside = (q.vec() + Vec3::new(0.05, 0.0, 0.0)).normalize();
        assert_abs_diff_eq!(m.eval(&inside), q.vec(), epsilon = 1e-15);
        let far = Vec3::new(0.0, 1.0, 0.0);
        assert_eq!(m.eval(&far), far);
    }

    #[test]
    fn squash_jet_matches_finite_differences() {
        let q = UnitVec3::from_xyz(0.1, 0.2, 0.95).unwrap();
        let m = squashed(SphereMap::new(BaseMap::Wobble { amplitude: 0.6 }).unwrap(), q, 0.3);
        let rot = rotate_taking(&UnitVec3::NORTH, &q);
        for t in [0.2, 0.35, 0.5, 0.6] {
            let x = rot * SphericalPoint::new(t, 1.0).to_vec();
            let dirs = tangent_pair(&x);
            let j = m.jet(&x, &dirs);
            for (k, v) in dirs.iter().enumerate() {
                assert_abs_diff_eq!(j.d[k], fd_reference(&m, &x, v), epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn squash_is_continuous_across_rims() {
        let q = UnitVec3::from_xyz(-0.5, 0.5, 0.2).unwrap();
        let m = squashed(SphereMap::new(BaseMap::Wobble { amplitude: 0.6 }).unwrap(), q, 0.25);
        let rot = rotate_taking(&UnitVec3::NORTH, &q);
        for rim in [2.0 * (0.125f64).asin(), 2.0 * (0.25f64).asin()] {
            for l in 0..12 {
                let th = l as f64 * TAU / 12.0;
                let a = m.eval(&(rot * SphericalPoint::new(rim - 1e-10, th).to_vec()));
                let b = m.eval(&(rot * SphericalPoint::new(rim + 1e-10, th).to_vec()));
                assert!((a - b).norm() < 1e-6);
            }
        }
    }

    fn bubble_map(j: u32, orientation: Orientation, profile: BubbleProfile) -> (SphereMap, BubblePatch) {
        let target = UnitVec3::from_xyz(0.3, 0.4, 0.5).unwrap();
        let center = UnitVec3::from_xyz(-0.2, 0.7, 0.1).unwrap();
        let b = BubblePatch {
            center,
            j,
            target,
            orientation,
            antipodal: false,
            profile,
            shift: 0.0,
        };
        (SphereMap::constant(target).with_patch(Patch::Bubble(b)).unwrap(), b)
    }

    #[test]
    fn bubble_center_and_rim() {
        let (m, b) = bubble_map(20, Orientation::Preserving, BubbleProfile::Exact);
        assert_abs_diff_eq!(m.eval(&b.center.vec()), -b.target.vec(), epsilon = 1e-12);
        let rot = rotate_taking(&UnitVec3::NORTH, &b.center);
        let rim = 2.0 * (1.0f64 / 40.0).asin();
        for l in 0..8 {
            let x = rot * SphericalPoint::new(rim * (1.0 - 1e-12), l as f64).to_vec();
            assert!((m.eval(&x) - b.target.vec()).norm() < 1e-9);
        }
    }

    #[test]
    fn bubble_is_continuous_at_profile_kinks() {
        for profile in [BubbleProfile::Exact, BubbleProfile::Spread] {
            let (m, b) = bubble_map(10, Orientation::Reversing, profile);
            let c = b.constants();
            let rot = rotate_taking(&UnitVec3::NORTH, &b.center);
            for rho in [c.inner, c.outer, c.plane_radius] {
                let t = 2.0 * rho.atan();
                for l in 0..8 {
                    let a = m.eval(&(rot * SphericalPoint::new(t * (1.0 - 1e-11), l as f64).to_vec()));
                    let z = m.eval(&(rot * SphericalPoint::new(t * (1.0 + 1e-11), l as f64).to_vec()));
                    assert!((a - z).norm() < 1e-6, "{profile:?} rho={rho}");
                }
            }
        }
    }

    #[test]
    fn bubble_jet_matches_finite_differences() {
        for profile in [BubbleProfile::Exact, BubbleProfile::Spread] {
            for orientation in [Orientation::Preserving, Orientation::Reversing] {
                let (m, b) = bubble_map(4, orientation, profile);
                let c = b.constants();
                let rot = rotate_taking(&UnitVec3::NORTH, &b.center);
                for rho in [0.3 * c.inner, 2.0 * c.inner, 0.7 * c.outer, 1.5 * c.outer] {
                    let x = rot * SphericalPoint::new(2.0 * rho.atan(), 0.7).to_vec();
                    let dirs = tangent_pair(&x);
                    let j = m.jet(&x, &dirs);
                    let h = 1e-4 * rho;
                    for (k, v) in dirs.iter().enumerate() {
                        let fd = (m.eval(&(x + v * h).normalize()) - m.eval(&(x - v * h).normalize())) / (2.0 * h);
                        let scale = j.d[k].norm().max(1.0);
                        assert!((j.d[k] - fd).norm() < 1e-5 * scale, "{profile:?} rho={rho}");
                    }
                }
            }
        }
    }

    #[test]
    fn bubble_conformal_factor_on_annulus() {
        let (m, b) = bubble_map(20, Orientation::Preserving, BubbleProfile::Exact);
        let c = b.constants();
        let rot = rotate_taking(&UnitVec3::NORTH, &b.center);
        let rho = (c.inner * c.outer).sqrt();
        let x = rot * SphericalPoint::new(2.0 * rho.atan(), 0.3).to_vec();
        let dirs = tangent_pair(&x);
        let j = m.jet(&x, &dirs);
        // image of the plane point λρ under inverse stereographic projection,
        // composed with the domain projection: conformal with factor
        // λ (1 + ρ²) / (1 + λ²ρ²)
        let lr = c.scale * rho;
        let factor = c.scale * (1.0 + rho * rho) / (1.0 + lr * lr);
        assert_abs_diff_eq!(j.grad_sq(), 2.0 * factor * factor, epsilon = 1e-3 * factor * factor);
        assert_abs_diff_eq!(j.d[0].norm(), j.d[1].norm(), epsilon = 1e-8 * factor);
        assert_abs_diff_eq!(j.d[0].dot(&j.d[1]), 0.0, epsilon = 1e-8 * factor * factor);
    }

    #[test]
    fn antipodal_bubble_mirrors() {
        let target = UnitVec3::NORTH;
        let xi = UnitVec3::from_xyz(0.0, 0.1, 1.0).unwrap();
        let base = SphereMap::constant(target);
        let b = BubblePatch {
            center: xi.neg(),
            j: 12,
            target,
            orientation: Orientation::Preserving,
            antipodal: true,
            profile: BubbleProfile::Exact,
            shift: 0.0,
        };
        let m = base.with_patch(Patch::Bubble(b)).unwrap();
        let direct = BubblePatch {
            center: xi,
            antipodal: false,
            ..b
        };
        let x = (xi.neg().vec() + Vec3::new(0.01, 0.02, 0.0)).normalize();
        assert_abs_diff_eq!(m.eval(&x), direct.eval(&-x), epsilon = 1e-15);
    }

    #[test]
    fn bubble_requires_constant_base() {
        let b = BubblePatch {
            center: UnitVec3::NORTH,
            j: 10,
            target: UnitVec3::NORTH,
            orientation: Orientation::Preserving,
            antipodal: false,
            profile: BubbleProfile::Exact,
            shift: 0.0,
        };
        assert!(matches!(
            SphereMap::identity().with_patch(Patch::Bubble(b)),
            Err(Error::Construction(_))
        ));
    }

    #[test]
    fn overlapping_patches_rejected() {
        let m = squashed(SphereMap::constant(UnitVec3::NORTH), UnitVec3::NORTH, 0.2);
        let off = UnitVec3::from_xyz(0.35, 0.0, 1.0).unwrap();
        let r = m.with_patch(Patch::Squash(SquashPatch {
            center: off,
            inner_radius: 0.2,
            value: UnitVec3::NORTH,
        }));
        assert!(matches!(r, Err(Error::InvalidMap(_))));
    }

    #[test]
    fn descriptor_round_trip() {
        let (m, _) = bubble_map(10, Orientation::Reversing, BubbleProfile::Spread);
        let v = serde_json::to_value(&m).unwrap();
        assert_eq!(v["kind"], "constant");
        let back = SphereMap::from_json(v, Path::new(".")).unwrap();
        assert_eq!(back, m);
        let id = serde_json::json!({"kind": "identity"});
        assert_eq!(SphereMap::from_json(id, Path::new(".")).unwrap(), SphereMap::identity());
    }

    #[test]
    fn grid_map_interpolates_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let wob = SphereMap::new(BaseMap::Wobble { amplitude: 0.6 }).unwrap();
        let samples = GridSamples::sample(&wob, 180, 360).unwrap();
        let path = dir.path().join("wobble.bin");
        samples.save(&path).unwrap();
        let desc = serde_json::json!({"kind": "grid", "params": {"path": "wobble.bin"}});
        let m = SphereMap::from_json(desc, dir.path()).unwrap();
        for (phi, theta) in [(0.001, 1.0), (0.7, 0.2), (2.0, 6.2), (PI - 0.001, 3.0)] {
            let p = SphericalPoint::new(phi, theta);
            assert!((m.evaluate(p).vec() - wob.evaluate(p).vec()).norm() < 1e-3);
        }
        let x = SphericalPoint::new(1.2, 2.3).to_vec();
        let j = m.jet(&x, &tangent_pair(&x));
        let jw = wob.jet(&x, &tangent_pair(&x));
        assert!((j.d[0] - jw.d[0]).norm() < 2e-2);
    }

    proptest! {
        #[test]
        fn evaluation_is_unit(phi in 0.0..PI, theta in 0.0..TAU) {
            let p = SphericalPoint::new(phi, theta);
            for m in analytic_bases() {
                prop_assert!((m.eval(&p.to_vec()).norm() - 1.0).abs() < 1e-12);
            }
            let (b, _) = bubble_map(3, Orientation::Preserving, BubbleProfile::Exact);
            prop_assert!((b.eval(&p.to_vec()).norm() - 1.0).abs() < 1e-12);
        }
    }
}
