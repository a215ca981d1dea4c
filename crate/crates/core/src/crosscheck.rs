//! Self-checks against dense kernels and closed forms, run by the
//! `crosscheck` verb.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coulomb::{CoulombMethod, CoulombSolver};
use crate::ensemble::{hs_distance, Interaction, OrbitalEnsemble};
use crate::error::Result;
use crate::grid::{GridSpec, RealField, ScalarField, Space};
use crate::oracle::{dense_crosscheck, dense_profile_distance, free_gaussian, gaussian_ensemble, gaussian_potential, GaussianSpec};
use crate::propagator::{evolve, Propagator, StepConfig};
use crate::runner::{Check, Status};

pub const DENSE_TOLERANCE: f64 = 1e-10;
pub const ERF_TOLERANCE: f64 = 1e-4;
pub const METHOD_AGREEMENT: f64 = 0.01;
pub const FREE_TOLERANCE: f64 = 1e-8;

/// Rank-3 ensemble of random orbitals on an `n = 8` lattice.
pub fn random_ensemble(rng: &mut impl Rng, space: Space) -> Result<OrbitalEnsemble> {
    let grid = GridSpec::new(8, 6.0)?;
    let orbitals = (0..3)
        .map(|_| {
            let v = (0..grid.len())
                .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            ScalarField::from_values(grid, space, v)
        })
        .collect::<Result<Vec<_>>>()?;
    let occupations = (0..3).map(|_| rng.gen_range(0.05..1.0)).collect();
    OrbitalEnsemble::new(0.0, occupations, orbitals, Interaction::Repulsive)
}

fn dense_checks(seed: u64, trials: usize) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut norm_err, mut min_eig, mut dist_err) = (0.0f64, f64::INFINITY, 0.0f64);
    for _ in 0..trials {
        let e = random_ensemble(&mut rng, Space::Position)?;
        let r = dense_crosscheck(&e)?;
        norm_err = norm_err.max(r.max_relative_error());
        min_eig = min_eig.min(r.min_eigenvalue);
        let a = random_ensemble(&mut rng, Space::Frequency)?;
        let b = random_ensemble(&mut rng, Space::Frequency)?;
        let gram = hs_distance(a.orbitals(), a.occupations(), b.orbitals(), b.occupations())?;
        let dense = dense_profile_distance(a.orbitals(), a.occupations(), b.orbitals(), b.occupations())?;
        dist_err = dist_err.max((gram - dense).abs() / dense);
    }
    Ok(vec![
        Check {
            name: "dense_norms".into(),
            status: Status::from_bool(norm_err <= DENSE_TOLERANCE),
            detail: format!("max relative error {norm_err:.2e} over hs, h2, a2"),
        },
        Check {
            name: "dense_distance".into(),
            status: Status::from_bool(dist_err <= DENSE_TOLERANCE),
            detail: format!("max relative error {dist_err:.2e}"),
        },
        Check {
            name: "dense_positivity".into(),
            status: Status::from_bool(min_eig >= -DENSE_TOLERANCE),
            detail: format!("min eigenvalue {min_eig:.2e}"),
        },
    ])
}

fn radius(x: [f64; 3]) -> f64 {
    (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt()
}

/// Unit-mass Gaussian charge of width `sigma` at the origin.
pub fn gaussian_charge(grid: GridSpec, sigma: f64) -> RealField {
    let c = (2.0 * std::f64::consts::PI * sigma * sigma).powf(-1.5);
    RealField::from_fn(grid, |x| c * (-radius(x).powi(2) / (2.0 * sigma * sigma)).exp())
}

/// `V(0) - V(r)`, which does not depend on the additive constant of the
/// periodic solution.
pub fn center_drop(v: &RealField, r: f64) -> f64 {
    v.interpolate([0.0; 3]) - v.interpolate([r, 0.0, 0.0])
}

fn coulomb_checks() -> Result<Vec<Check>> {
    let sigma = 1.0;
    let grid = GridSpec::new(32, 16.0)?;
    let rho = gaussian_charge(grid, sigma);
    let free = CoulombSolver::new(grid, CoulombMethod::FreespaceDoubling);
    let v = free.hartree_potential(&rho, 1.0)?;
    let reach = grid.length() / 4.0;
    let erf_err = (0..grid.len())
        .filter(|&p| radius(grid.position(p)) <= reach)
        .map(|p| {
            let exact = gaussian_potential(radius(grid.position(p)), sigma);
            (v.values()[p] - exact).abs() / exact
        })
        .fold(0.0, f64::max);

    let periodic = CoulombSolver::new(grid, CoulombMethod::PeriodicMultiplier).hartree_potential(&rho, 1.0)?;
    let (a, b) = (center_drop(&v, 2.0 * sigma), center_drop(&periodic, 2.0 * sigma));
    let agreement = (a - b).abs() / a.abs();

    let minus = free.hartree_potential(&rho, -1.0)?;
    let antisymmetric = v.values().iter().zip(minus.values()).all(|(p, m)| *p == -*m);
    Ok(vec![
        Check {
            name: "coulomb_erf".into(),
            status: Status::from_bool(erf_err <= ERF_TOLERANCE),
            detail: format!("max relative error {erf_err:.2e} on |x| <= L/4"),
        },
        Check {
            name: "coulomb_methods".into(),
            status: Status::from_bool(agreement <= METHOD_AGREEMENT),
            detail: format!("V(0) - V(2σ) differs by {:.3}%", 100.0 * agreement),
        },
        Check {
            name: "coulomb_sign".into(),
            status: Status::from_bool(antisymmetric),
            detail: "V(-ρ sign) = -V exactly".into(),
        },
    ])
}

fn free_flow_check() -> Result<Check> {
    let grid = GridSpec::new(32, 16.0)?;
    let spec = GaussianSpec {
        occupation: 1.0,
        center: [0.5, -0.25, 0.0],
        width: 1.2,
        boost: [0.3, 0.0, -0.2],
    };
    let e = gaussian_ensemble(&grid, &[spec], Interaction::Free)?;
    let p = Propagator::new(grid, Interaction::Free, StepConfig::new(0.1))?;
    let t = 1.0;
    let end = evolve(e, &p, &[t], &mut ())?;
    let pos = end.orbitals_in(Space::Position);
    let exact = free_gaussian(&grid, &spec, t, true);
    let norm = spec.amplitude();
    let err = pos[0]
        .values()
        .iter()
        .zip(exact.values())
        .map(|(a, b)| (a - b).norm())
        .fold(0.0, f64::max)
        / norm;
    Ok(Check {
        name: "free_flow".into(),
        status: Status::from_bool(err <= FREE_TOLERANCE),
        detail: format!("max pointwise error {err:.2e} against the periodized Gaussian at t = {t}"),
    })
}

/// Runs every self-check.
pub fn crosscheck(seed: u64) -> Result<Vec<Check>> {
    let mut out = dense_checks(seed, 3)?;
    out.extend(coulomb_checks()?);
    out.push(free_flow_check()?);
    Ok(out)
}
