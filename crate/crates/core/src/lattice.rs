//! Cubic lattice in the unit ball and unit vector fields on it.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::SphereMap;
use crate::output::write_atomic;
use crate::quadrature::pairwise_sum;
use crate::sphere::{UnitVec3, Vec3};

const NONE: u32 = u32::MAX;

/// Offsets of the 6-neighbor stencil: `+x, -x, +y, -y, +z, -z`.
pub const STENCIL: [[i32; 3]; 6] = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];

/// Lattice points `h·(i, j, k)` with `|x| <= 1 + h/2`.
///
/// Nodes with `|x| < 1 - h/2` are interior and come first in the node order;
/// the rest form the boundary shell, each tagged with its radial projection.
#[derive(Debug)]
pub struct BallLattice {
    h: f64,
    half: i32,
    index: Vec<u32>,
    coords: Vec<[i32; 3]>,
    n_interior: usize,
    neighbors: Vec<[u32; 6]>,
    projections: Vec<UnitVec3>,
    colors: [Vec<u32>; 2],
}

impl BallLattice {
    pub fn new(h: f64) -> Result<Self> {
        if !(1.0 / 64.0 - 1e-12..=0.125 + 1e-12).contains(&h) {
            return Err(Error::param("h", format!("lattice spacing must lie in [1/64, 1/8], got {h}")));
        }
        let half = ((1.0 + 0.5 * h) / h + 1e-9).floor() as i32 + 1;
        let side = (2 * half + 1) as usize;
        let inner = (1.0 - 0.5 * h).powi(2);
        let outer = (1.0 + 0.5 * h).powi(2);
        let r2 = |c: [i32; 3]| c.iter().map(|&a| (a as f64 * h).powi(2)).sum::<f64>();
        let all: Vec<[i32; 3]> = (-half..=half)
            .flat_map(|k| (-half..=half).flat_map(move |j| (-half..=half).map(move |i| [i, j, k])))
            .collect();
        let mut coords: Vec<[i32; 3]> = all.iter().copied().filter(|&c| r2(c) < inner).collect();
        let n_interior = coords.len();
        coords.extend(all.iter().copied().filter(|&c| (inner..=outer).contains(&r2(c))));
        let mut index = vec![NONE; side * side * side];
        let slot = |c: [i32; 3]| {
            let s = side as i64;
            let [i, j, k] = c.map(|a| (a + half) as i64);
            ((k * s + j) * s + i) as usize
        };
        for (n, &c) in coords.iter().enumerate() {
            index[slot(c)] = n as u32;
        }
        let mut neighbors = Vec::with_capacity(n_interior);
        for &c in &coords[..n_interior] {
            let mut nb = [NONE; 6];
            for (d, off) in STENCIL.iter().enumerate() {
                let t = [c[0] + off[0], c[1] + off[1], c[2] + off[2]];
                nb[d] = index[slot(t)];
                debug_assert_ne!(nb[d], NONE);
            }
            neighbors.push(nb);
        }
        let projections = coords[n_interior..]
            .iter()
            .map(|c| UnitVec3::normalize(Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64)))
            .collect();
        let mut colors = [Vec::new(), Vec::new()];
        for (n, c) in coords[..n_interior].iter().enumerate() {
            colors[((c[0] + c[1] + c[2]).rem_euclid(2)) as usize].push(n as u32);
        }
        Ok(BallLattice {
            h,
            half,
            index,
            coords,
            n_interior,
            neighbors,
            projections,
            colors,
        })
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn interior_count(&self) -> usize {
        self.n_interior
    }

    pub fn boundary_count(&self) -> usize {
        self.coords.len() - self.n_interior
    }

    pub fn is_interior(&self, node: usize) -> bool {
        node < self.n_interior
    }

    /// Integer lattice coordinates of `node`.
    pub fn coords(&self, node: usize) -> [i32; 3] {
        self.coords[node]
    }

    pub fn position(&self, node: usize) -> Vec3 {
        let c = self.coords[node];
        Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64) * self.h
    }

    /// Node at integer coordinates `c`, if it belongs to the lattice.
    pub fn node_at(&self, c: [i32; 3]) -> Option<usize> {
        if c.iter().any(|a| a.abs() > self.half) {
            return None;
        }
        let side = (2 * self.half + 1) as usize;
        let [i, j, k] = c.map(|a| (a + self.half) as usize);
        match self.index[(k * side + j) * side + i] {
            NONE => None,
            n => Some(n as usize),
        }
    }

    /// Stencil neighbors of an interior node, in [`STENCIL`] order.
    pub fn neighbors(&self, node: usize) -> &[u32; 6] {
        &self.neighbors[node]
    }

    /// Radial projection of a boundary node.
    pub fn projection(&self, node: usize) -> UnitVec3 {
        self.projections[node - self.n_interior]
    }

    /// Interior nodes of one parity class of `i + j + k`.
    pub fn color(&self, parity: usize) -> &[u32] {
        &self.colors[parity]
    }

    /// Largest absolute lattice coordinate.
    pub fn half_extent(&self) -> i32 {
        self.half
    }
}

/// Boundary values `m(b/|b|)` in boundary node order.
pub fn sample_boundary(m: &SphereMap, lat: &BallLattice) -> Vec<Vec3> {
    (lat.n_interior..lat.len())
        .into_par_iter()
        .map(|n| UnitVec3::normalize(m.eval(&lat.projection(n).vec())).vec())
        .collect()
}

/// Starting values for the interior.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Initial {
    /// The boundary value along each ray: `m(x/|x|)`, with the north pole ray
    /// at the origin.
    Radial,
    /// Independent uniform unit vectors from a seeded stream.
    Random { seed: u64 },
    Constant { value: UnitVec3 },
}

/// Unit vectors on every lattice node; boundary values are frozen.
#[derive(Clone, Debug)]
pub struct BallField {
    lattice: Arc<BallLattice>,
    values: Vec<Vec3>,
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm_squared();
        if n > 1e-4 && n <= 1.0 {
            return v / n.sqrt();
        }
    }
}

impl BallField {
    pub fn new(lattice: Arc<BallLattice>, m: &SphereMap, init: Initial) -> Self {
        let mut values = Vec::with_capacity(lattice.len());
        match init {
            Initial::Radial => values.extend((0..lattice.n_interior).into_par_iter().map(|n| {
                let x = lattice.position(n);
                let dir = if x.norm() > 0.0 { x.normalize() } else { Vec3::z() };
                UnitVec3::normalize(m.eval(&dir)).vec()
            }).collect::<Vec<_>>()),
            Initial::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                values.extend((0..lattice.n_interior).map(|_| random_unit(&mut rng)));
            }
            Initial::Constant { value } => values.extend(std::iter::repeat_n(value.vec(), lattice.n_interior)),
        }
        values.extend(sample_boundary(m, &lattice));
        BallField { lattice, values }
    }

    /// Field given by `f` at every node position, boundary included.
    pub fn from_fn(lattice: Arc<BallLattice>, f: impl Fn(&Vec3) -> Vec3 + Sync) -> Self {
        let values = (0..lattice.len())
            .into_par_iter()
            .map(|n| f(&lattice.position(n)).normalize())
            .collect();
        BallField { lattice, values }
    }

    pub fn lattice(&self) -> &BallLattice {
        &self.lattice
    }

    pub fn shared_lattice(&self) -> Arc<BallLattice> {
        Arc::clone(&self.lattice)
    }

    pub fn values(&self) -> &[Vec3] {
        &self.values
    }

    pub fn value(&self, node: usize) -> Vec3 {
        self.values[node]
    }

    pub fn boundary_values(&self) -> &[Vec3] {
        &self.values[self.lattice.n_interior..]
    }

    pub(crate) fn values_mut(&mut self) -> &mut [Vec3] {
        &mut self.values
    }

    /// Writes a legacy VTK structured-points file with big-endian doubles and
    /// a JSON sidecar holding `meta`. Points outside the ball carry zeros.
    pub fn export_vtk(&self, path: &Path, meta: &FieldMeta) -> Result<()> {
        let lat = &self.lattice;
        let side = 2 * lat.half + 1;
        let origin = -(lat.half as f64) * lat.h;
        let mut bytes = format!(
            "# vtk DataFile Version 3.0\nunit vector field, h = {:e}\nBINARY\nDATASET STRUCTURED_POINTS\nDIMENSIONS {side} {side} {side}\nORIGIN {origin:e} {origin:e} {origin:e}\nSPACING {h:e} {h:e} {h:e}\nPOINT_DATA {}\nVECTORS u double\n",
            lat.h,
            (side as usize).pow(3),
            h = lat.h,
        )
        .into_bytes();
        for &slot in &lat.index {
            let v = if slot == NONE { Vec3::zeros() } else { self.values[slot as usize] };
            for c in v.iter() {
                bytes.extend_from_slice(&c.to_be_bytes());
            }
        }
        bytes.push(b'\n');
        write_atomic(path, &bytes)?;
        write_atomic(&sidecar(path), &serde_json::to_vec_pretty(meta)?)
    }

    /// Reads a field written by [`BallField::export_vtk`].
    pub fn import_vtk(path: &Path) -> Result<(BallField, FieldMeta)> {
        let meta: FieldMeta = serde_json::from_slice(&fs::read(sidecar(path))?)?;
        let lattice = Arc::new(BallLattice::new(meta.h)?);
        let bytes = fs::read(path)?;
        let marker = b"VECTORS u double\n";
        let start = bytes
            .windows(marker.len())
            .position(|w| w == marker)
            .ok_or_else(|| Error::Parse(format!("{} lacks a vector block", path.display())))?
            + marker.len();
        let n = lattice.index.len();
        if bytes.len() < start + 24 * n {
            return Err(Error::Parse(format!("{} is truncated", path.display())));
        }
        let mut values = vec![Vec3::zeros(); lattice.len()];
        for (s, &slot) in lattice.index.iter().enumerate() {
            if slot == NONE {
                continue;
            }
            let at = start + 24 * s;
            let f = |i: usize| f64::from_be_bytes(bytes[at + 8 * i..at + 8 * i + 8].try_into().unwrap());
            let v = Vec3::new(f(0), f(1), f(2));
            if (v.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::Parse(format!("node {slot} of {} is not a unit vector", path.display())));
            }
            values[slot as usize] = v;
        }
        Ok((BallField { lattice, values }, meta))
    }
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldMeta {
    pub h: f64,
    pub sweeps: usize,
    pub energy: f64,
}

/// `h · Σ |u_a - u_b|²` over stencil pairs with at least one interior end.
pub fn dirichlet_energy(u: &BallField) -> f64 {
    let lat = u.lattice();
    let terms: Vec<f64> = (0..lat.n_interior)
        .into_par_iter()
        .map(|a| {
            let ua = u.values[a];
            lat.neighbors[a]
                .iter()
                .enumerate()
                .filter(|&(d, &b)| d % 2 == 0 || !lat.is_interior(b as usize))
                .map(|(_, &b)| (ua - u.values[b as usize]).norm_squared())
                .sum::<f64>()
        })
        .collect();
    lat.h * pairwise_sum(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn radial(h: f64) -> BallField {
        let lat = Arc::new(BallLattice::new(h).unwrap());
        BallField::from_fn(lat, |x| if x.norm() > 0.0 { *x } else { Vec3::z() })
    }

    #[test]
    fn lattice_counts_and_stencil() {
        let lat = BallLattice::new(0.125).unwrap();
        let ball = |r: f64| 4.0 / 3.0 * PI * r.powi(3) * 512.0;
        let interior = lat.interior_count() as f64;
        assert!((interior - ball(1.0 - 1.0 / 16.0)).abs() < 0.03 * interior);
        let inside_unit = (0..lat.len()).filter(|&n| lat.position(n).norm() < 1.0).count() as f64;
        assert!((inside_unit - ball(1.0)).abs() < 0.1 * ball(1.0));
        for n in 0..lat.interior_count() {
            for &b in lat.neighbors(n) {
                let d: i32 = (0..3).map(|i| (lat.coords(n)[i] - lat.coords(b as usize)[i]).abs()).sum();
                assert_eq!(d, 1);
            }
        }
        for n in lat.interior_count()..lat.len() {
            assert!((lat.projection(n).vec().norm() - 1.0).abs() < 1e-15);
            let r = lat.position(n).norm();
            assert!(r >= 1.0 - lat.h() / 2.0 && r <= 1.0 + lat.h() / 2.0);
        }
        assert_eq!(lat.color(0).len() + lat.color(1).len(), lat.interior_count());
        assert!(BallLattice::new(0.2).is_err());
        assert!(BallLattice::new(0.01).is_err());
    }

    #[test]
    fn boundary_samples() {
        let lat = Arc::new(BallLattice::new(0.125).unwrap());
        let c = UnitVec3::from_xyz(0.0, 0.6, 0.8).unwrap();
        assert!(sample_boundary(&SphereMap::constant(c), &lat).iter().all(|v| *v == c.vec()));
        let id = sample_boundary(&SphereMap::identity(), &lat);
        for (k, v) in id.iter().enumerate() {
            assert!((v - lat.projection(lat.interior_count() + k).vec()).norm() < 1e-15);
        }
    }

    #[test]
    fn radial_field_energy_is_first_order() {
        let target = 8.0 * PI;
        let e16 = dirichlet_energy(&radial(1.0 / 16.0));
        let e32 = dirichlet_energy(&radial(1.0 / 32.0));
        assert!((e16 - target).abs() < 0.1 * target, "{e16}");
        let ratio = (e16 - target).abs() / (e32 - target).abs();
        assert!((1.4..3.0).contains(&ratio), "error ratio {ratio}");
    }

    #[test]
    fn constant_field_has_zero_energy() {
        let lat = Arc::new(BallLattice::new(0.125).unwrap());
        let u = BallField::new(lat, &SphereMap::constant(UnitVec3::NORTH), Initial::Constant { value: UnitVec3::NORTH });
        assert_eq!(dirichlet_energy(&u), 0.0);
    }

    #[test]
    fn random_initial_is_seeded() {
        let lat = Arc::new(BallLattice::new(0.125).unwrap());
        let m = SphereMap::identity();
        let a = BallField::new(Arc::clone(&lat), &m, Initial::Random { seed: 7 });
        let b = BallField::new(Arc::clone(&lat), &m, Initial::Random { seed: 7 });
        let c = BallField::new(lat, &m, Initial::Random { seed: 8 });
        assert_eq!(a.values(), b.values());
        assert_ne!(a.values(), c.values());
        assert!(a.values().iter().all(|v| (v.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn vtk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.vtk");
        let u = radial(0.125);
        let meta = FieldMeta {
            h: 0.125,
            sweeps: 3,
            energy: dirichlet_energy(&u),
        };
        u.export_vtk(&path, &meta).unwrap();
        let (v, back) = BallField::import_vtk(&path).unwrap();
        assert_eq!(back, meta);
        assert_eq!(v.values(), u.values());
        let text = fs::read(&path).unwrap();
        assert!(text.starts_with(b"# vtk DataFile Version 3.0\n"));
    }
}
