//! Projected red-black Gauss-Seidel relaxation of the lattice Dirichlet energy
//! with multi-start.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{dirichlet_energy, BallField, BallLattice, Initial};
use crate::maps::SphereMap;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_sweeps: usize,
    /// Stop once a sweep lowers the energy by less than this fraction.
    pub rel_tol: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_sweeps: 5000,
            rel_tol: 1e-9,
            restarts: 1,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_sweeps == 0 || self.restarts == 0 {
            return Err(Error::param("solver", "max_sweeps and restarts must be positive"));
        }
        if !(self.rel_tol > 0.0 && self.rel_tol < 1.0) {
            return Err(Error::param("rel_tol", format!("must lie in (0, 1), got {}", self.rel_tol)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub energy: f64,
    pub sweeps: usize,
    pub converged: bool,
    /// Energy before the first sweep and after each sweep.
    pub energy_trace: Vec<f64>,
    /// Node updates skipped because the neighbor sum vanished.
    pub degenerate_updates: usize,
}

/// One color pass; returns the number of frozen degenerate nodes.
fn half_sweep(u: &mut BallField, parity: usize) -> usize {
    let lat = u.shared_lattice();
    let nodes = lat.color(parity);
    let values = u.values();
    let updates: Vec<Option<(u32, nalgebra::Vector3<f64>)>> = nodes
        .par_iter()
        .map(|&a| {
            let sum = lat.neighbors(a as usize).iter().fold(nalgebra::Vector3::zeros(), |s, &b| s + values[b as usize]);
            let n = sum.norm();
            if n < 1e-300 {
                return None;
            }
            let new = sum / n;
            let old = values[a as usize];
            if new.dot(&sum) >= old.dot(&sum) {
                Some((a, new))
            } else {
                Some((a, old))
            }
        })
        .collect();
    let mut degenerate = 0;
    let values = u.values_mut();
    for up in updates {
        match up {
            Some((a, v)) => values[a as usize] = v,
            None => degenerate += 1,
        }
    }
    degenerate
}

/// Relaxes the interior in place; boundary values are never written.
pub fn relax(u: &mut BallField, cfg: &SolverConfig) -> Result<EnergyReport> {
    cfg.validate()?;
    let mut energy = dirichlet_energy(u);
    let mut trace = vec![energy];
    let mut degenerate = 0;
    let mut converged = energy == 0.0;
    let mut sweeps = 0;
    while !converged && sweeps < cfg.max_sweeps {
        degenerate += half_sweep(u, 0);
        degenerate += half_sweep(u, 1);
        sweeps += 1;
        let next = dirichlet_energy(u);
        trace.push(next);
        converged = next == 0.0 || energy - next < cfg.rel_tol * energy;
        energy = next;
    }
    if degenerate > 0 {
        log::warn!("{degenerate} node updates frozen on a vanishing neighbor sum");
    }
    Ok(EnergyReport {
        energy,
        sweeps,
        converged,
        energy_trace: trace,
        degenerate_updates: degenerate,
    })
}

/// One relaxation in a multi-start run.
#[derive(Clone, Debug)]
pub struct Attempt {
    pub initial: Initial,
    pub field: BallField,
    pub report: EnergyReport,
}

/// All attempts of a multi-start run. The lowest energy wins; this is a
/// heuristic and does not certify a global minimum.
#[derive(Clone, Debug)]
pub struct MultiStart {
    pub attempts: Vec<Attempt>,
    pub best: usize,
}

impl MultiStart {
    pub fn best(&self) -> &Attempt {
        &self.attempts[self.best]
    }
}

/// Starting fields for a run: the radial extension first, then seeded random
/// fields with seeds `seed + 1, seed + 2, ...`.
pub fn initial_conditions(cfg: &SolverConfig) -> Vec<Initial> {
    (0..cfg.restarts)
        .map(|k| {
            if k == 0 {
                Initial::Radial
            } else {
                Initial::Random {
                    seed: cfg.seed.wrapping_add(k as u64),
                }
            }
        })
        .collect()
}

pub fn minimize(m: &SphereMap, h: f64, cfg: &SolverConfig) -> Result<MultiStart> {
    cfg.validate()?;
    let lattice = Arc::new(BallLattice::new(h)?);
    minimize_on(m, lattice, cfg)
}

pub fn minimize_on(m: &SphereMap, lattice: Arc<BallLattice>, cfg: &SolverConfig) -> Result<MultiStart> {
    let mut attempts = Vec::with_capacity(cfg.restarts);
    for initial in initial_conditions(cfg) {
        let mut field = BallField::new(Arc::clone(&lattice), m, initial);
        let report = relax(&mut field, cfg)?;
        log::info!(
            "start {initial:?}: energy {:.6} after {} sweeps (converged: {})",
            report.energy,
            report.sweeps,
            report.converged
        );
        attempts.push(Attempt { initial, field, report });
    }
    let best = attempts
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.report.energy.total_cmp(&b.1.report.energy))
        .map(|(i, _)| i)
        .expect("at least one start");
    Ok(MultiStart { attempts, best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::UnitVec3;
    use std::f64::consts::PI;

    fn cfg(restarts: usize) -> SolverConfig {
        SolverConfig {
            max_sweeps: 400,
            rel_tol: 1e-9,
            restarts,
            seed: 11,
        }
    }

    #[test]
    fn constant_boundary_relaxes_to_constant() {
        let c = UnitVec3::from_xyz(0.0, 0.6, -0.8).unwrap();
        let run = minimize(&SphereMap::constant(c), 0.125, &SolverConfig { max_sweeps: 3000, ..cfg(3) }).unwrap();
        for a in &run.attempts {
            assert!(a.report.energy < 1e-6, "{:?}: {}", a.initial, a.report.energy);
        }
        assert_eq!(run.attempts[0].report.energy, 0.0);
    }

    #[test]
    fn identity_boundary_energy_near_radial() {
        let run = minimize(&SphereMap::identity(), 0.125, &cfg(1)).unwrap();
        let e = run.best().report.energy;
        assert!((e - 8.0 * PI).abs() < 0.15 * 8.0 * PI, "{e}");
    }

    #[test]
    fn sweeps_are_monotone_unit_and_keep_the_boundary() {
        let lat = Arc::new(BallLattice::new(0.125).unwrap());
        let m = SphereMap::new(crate::maps::BaseMap::Wobble { amplitude: 0.6 }).unwrap();
        let mut u = BallField::new(lat, &m, Initial::Random { seed: 5 });
        let before = u.boundary_values().to_vec();
        let rep = relax(&mut u, &SolverConfig { max_sweeps: 200, ..cfg(1) }).unwrap();
        assert!(rep.energy_trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(u.values().iter().all(|v| (v.norm() - 1.0).abs() < 1e-12));
        assert_eq!(u.boundary_values(), &before[..]);
    }

    #[test]
    fn deterministic_under_seed() {
        let m = SphereMap::new(crate::maps::BaseMap::Fold).unwrap();
        let a = minimize(&m, 0.125, &cfg(2)).unwrap();
        let b = minimize(&m, 0.125, &cfg(2)).unwrap();
        for (x, y) in a.attempts.iter().zip(&b.attempts) {
            assert_eq!(x.field.values(), y.field.values());
            assert_eq!(x.report, y.report);
        }
    }

    #[test]
    fn rejects_bad_config() {
        let m = SphereMap::identity();
        assert!(minimize(&m, 0.125, &SolverConfig { restarts: 0, ..cfg(1) }).is_err());
        assert!(minimize(&m, 0.125, &SolverConfig { rel_tol: 0.0, ..cfg(1) }).is_err());
    }
}
