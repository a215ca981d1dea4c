//! Strang split-step evolution of an orbital ensemble.
//!
//! One step of size `dt` is a half free flow in frequency space, a potential
//! kick `e^{-i dt V}` in position space with `V` built from the half-stepped
//! density, and a second half free flow. Orbitals stay in frequency space
//! between steps, so a step costs one inverse and one forward transform per
//! orbital plus one potential solve.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::coulomb::{CoulombMethod, CoulombSolver};
use crate::ensemble::{density_of, Interaction, OrbitalEnsemble};
use crate::error::{Error, Result};
use crate::grid::{apply_free_flow, GridSpec, RealField, ScalarField, Space};

/// Step parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepConfig {
    pub dt: f64,
    pub method: CoulombMethod,
}

impl StepConfig {
    pub fn new(dt: f64) -> Self {
        StepConfig {
            dt,
            method: CoulombMethod::FreespaceDoubling,
        }
    }

    pub fn with_method(mut self, method: CoulombMethod) -> Self {
        self.method = method;
        self
    }
}

/// Read-only view handed to observers after every step.
#[derive(Debug)]
pub struct StepView<'a> {
    /// Time at the start of the step.
    pub t_start: f64,
    pub dt: f64,
    /// The ensemble after the step, at `t_start + dt`.
    pub ensemble: &'a OrbitalEnsemble,
    /// Potential used for the kick, evaluated at the midpoint `t_start + dt/2`;
    /// `None` for free flow.
    pub potential: Option<&'a RealField>,
}

impl StepView<'_> {
    pub fn t_mid(&self) -> f64 {
        self.t_start + 0.5 * self.dt
    }
}

/// Hooks called during [`evolve`].
pub trait Observer {
    fn on_step(&mut self, _step: &StepView<'_>) -> Result<()> {
        Ok(())
    }

    /// Called at each scheduled output time with the synchronized ensemble.
    fn on_record(&mut self, _ensemble: &OrbitalEnsemble) -> Result<()> {
        Ok(())
    }
}

impl Observer for () {}

/// Strang propagator bound to a grid and interaction.
#[derive(Debug)]
pub struct Propagator {
    grid: GridSpec,
    config: StepConfig,
    interaction: Interaction,
    solver: Option<CoulombSolver>,
}

impl Propagator {
    pub fn new(grid: GridSpec, interaction: Interaction, config: StepConfig) -> Result<Self> {
        if !(config.dt.is_finite() && config.dt > 0.0) {
            return Err(Error::InvalidStep(format!("dt must be positive, got {}", config.dt)));
        }
        let solver = match interaction {
            Interaction::Free => None,
            _ => Some(CoulombSolver::new(grid, config.method)),
        };
        Ok(Propagator {
            grid,
            config,
            interaction,
            solver,
        })
    }

    pub fn dt(&self) -> f64 {
        self.config.dt
    }

    pub fn config(&self) -> &StepConfig {
        &self.config
    }

    pub fn interaction(&self) -> Interaction {
        self.interaction
    }

    pub fn solver(&self) -> Option<&CoulombSolver> {
        self.solver.as_ref()
    }

    fn check(&self, e: &OrbitalEnsemble) -> Result<()> {
        if *e.grid() != self.grid {
            return Err(Error::GridMismatch);
        }
        if e.interaction() != self.interaction {
            return Err(Error::InvalidStep(format!(
                "ensemble interaction {:?} differs from propagator {:?}",
                e.interaction(),
                self.interaction
            )));
        }
        Ok(())
    }

    /// Hartree potential of the ensemble's current density.
    pub fn potential(&self, e: &OrbitalEnsemble) -> Result<Option<RealField>> {
        let Some(solver) = &self.solver else {
            return Ok(None);
        };
        let orbitals = e.orbitals_in(Space::Position);
        let rho = density_of(&orbitals, e.occupations());
        Ok(Some(solver.hartree_potential(&rho, self.interaction.sign())?))
    }

    /// Advances `e` by one step; returns the midpoint potential.
    pub fn step(&self, e: &mut OrbitalEnsemble) -> Result<Option<RealField>> {
        self.check(e)?;
        let dt = self.config.dt;
        let t = e.time();
        e.set_space(Space::Frequency);
        let Some(solver) = &self.solver else {
            e.orbitals_mut()
                .par_iter_mut()
                .for_each(|u| apply_free_flow(u, dt).expect("frequency space"));
            e.set_time(t + dt);
            return Ok(None);
        };

        e.orbitals_mut().par_iter_mut().for_each(|u| {
            apply_free_flow(u, 0.5 * dt).expect("frequency space");
            u.set_space(Space::Position);
        });
        let rho = density_of(e.orbitals(), e.occupations());
        let mass: f64 = rho.values().iter().sum();
        if !mass.is_finite() {
            return Err(Error::NonFinite {
                t: t + 0.5 * dt,
                what: "density".into(),
            });
        }
        let v = solver.hartree_potential(&rho, self.interaction.sign())?;
        kick_and_flow(e, &v, dt);
        e.set_time(t + dt);
        Ok(Some(v))
    }

    /// One Strang step with a prescribed potential in place of the
    /// self-consistent one; `dt` may be negative.
    pub fn step_with_potential(&self, e: &mut OrbitalEnsemble, v: &RealField, dt: f64) -> Result<()> {
        if *v.grid() != self.grid || *e.grid() != self.grid {
            return Err(Error::GridMismatch);
        }
        let t = e.time();
        e.set_space(Space::Frequency);
        e.orbitals_mut().par_iter_mut().for_each(|u| {
            apply_free_flow(u, 0.5 * dt).expect("frequency space");
            u.set_space(Space::Position);
        });
        kick_and_flow(e, v, dt);
        e.set_time(t + dt);
        Ok(())
    }

    /// `E = Σ λ_j ‖∇u_j‖² + ½ ∫ V ρ`.
    pub fn energy(&self, e: &OrbitalEnsemble) -> Result<f64> {
        self.check(e)?;
        let freq = e.orbitals_in(Space::Frequency);
        let kinetic: f64 = freq
            .iter()
            .zip(e.occupations())
            .map(|(u, l)| l * kinetic_energy(u))
            .sum();
        let Some(solver) = &self.solver else {
            return Ok(kinetic);
        };
        let pos = e.orbitals_in(Space::Position);
        let rho = density_of(&pos, e.occupations());
        let v = solver.hartree_potential(&rho, self.interaction.sign())?;
        let pot: f64 = rho
            .values()
            .iter()
            .zip(v.values())
            .map(|(r, v)| r * v)
            .sum::<f64>()
            * self.grid.cell_volume();
        Ok(kinetic + 0.5 * pot)
    }
}

fn kick_and_flow(e: &mut OrbitalEnsemble, v: &RealField, dt: f64) {
    let phase: Vec<Complex64> = v
        .values()
        .par_iter()
        .map(|x| Complex64::from_polar(1.0, -dt * x))
        .collect();
    e.orbitals_mut().par_iter_mut().for_each(|u| {
        for (a, p) in u.values_mut().iter_mut().zip(&phase) {
            *a *= p;
        }
        u.set_space(Space::Frequency);
        apply_free_flow(u, 0.5 * dt).expect("frequency space");
    });
}

fn kinetic_energy(u: &ScalarField) -> f64 {
    let grid = u.grid();
    let n = grid.n();
    let ks = grid.wavenumbers();
    let sum: f64 = u
        .values()
        .iter()
        .enumerate()
        .map(|(p, v)| {
            let (a, b, c) = (ks[p / (n * n)], ks[(p / n) % n], ks[p % n]);
            (a * a + b * b + c * c) * v.norm_sqr()
        })
        .sum();
    sum / grid.volume()
}

/// Advances `e` by one step of `propagator`.
pub fn strang_step(e: &mut OrbitalEnsemble, propagator: &Propagator) -> Result<Option<RealField>> {
    propagator.step(e)
}

/// Number of whole steps of size `dt` in `span`, if `span` is a multiple of
/// `dt` up to rounding.
pub fn steps_in(span: f64, dt: f64) -> Option<usize> {
    let k = (span / dt).round();
    if k >= 0.0 && (span - k * dt).abs() <= 1e-9 * dt.max(span.abs()) {
        Some(k as usize)
    } else {
        None
    }
}

/// Evolves `e` through the increasing output times in `schedule`, calling
/// `observer.on_step` after every step and `observer.on_record` at each
/// scheduled time. Every schedule entry must lie on the step lattice of the
/// start time. Returns the ensemble at the last scheduled time.
///
/// Recorded states are handed over in position space, the representation
/// checkpoints store, so a run restarted from a record continues bit for bit.
pub fn evolve(
    mut e: OrbitalEnsemble,
    propagator: &Propagator,
    schedule: &[f64],
    observer: &mut impl Observer,
) -> Result<OrbitalEnsemble> {
    let t0 = e.time();
    let dt = propagator.dt();
    // times on the global lattice k·dt when t0 lies on it
    let base = steps_in(t0, dt);
    let at = |k: usize| match base {
        Some(k0) => (k0 + k) as f64 * dt,
        None => t0 + k as f64 * dt,
    };
    let mut marks = Vec::with_capacity(schedule.len());
    for &ts in schedule {
        let k = steps_in(ts - t0, dt).ok_or_else(|| {
            Error::InvalidSchedule(format!("time {ts} is not on the step lattice from {t0} with dt = {dt}"))
        })?;
        if marks.last().is_some_and(|&last| k <= last) {
            return Err(Error::InvalidSchedule("times must be strictly increasing".into()));
        }
        marks.push(k);
    }
    let Some(&last) = marks.last() else {
        return Ok(e);
    };
    if e.values_non_finite() {
        return Err(Error::NonFinite {
            t: t0,
            what: "initial orbitals".into(),
        });
    }

    let mut next = 0;
    if marks[0] == 0 {
        e.set_space(Space::Position);
        observer.on_record(&e)?;
        next = 1;
    }
    for k in 1..=last {
        let t_start = at(k - 1);
        let v = propagator.step(&mut e)?;
        e.set_time(at(k));
        observer.on_step(&StepView {
            t_start,
            dt,
            ensemble: &e,
            potential: v.as_ref(),
        })?;
        if next < marks.len() && marks[next] == k {
            if e.values_non_finite() {
                return Err(Error::NonFinite {
                    t: e.time(),
                    what: "orbitals".into(),
                });
            }
            e.set_space(Space::Position);
            observer.on_record(&e)?;
            next += 1;
        }
    }
    Ok(e)
}

impl OrbitalEnsemble {
    fn values_non_finite(&self) -> bool {
        self.orbitals()
            .iter()
            .any(|u| u.values().iter().any(|v| !(v.re.is_finite() && v.im.is_finite())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{density, hs_norm};
    use crate::grid::to_frequency;

    fn gaussian(grid: GridSpec, c: [f64; 3], sigma: f64, boost: [f64; 3]) -> ScalarField {
        ScalarField::from_fn(grid, |x| {
            let d2 = (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2) + (x[2] - c[2]).powi(2);
            let ph = boost[0] * x[0] + boost[1] * x[1] + boost[2] * x[2];
            Complex64::from_polar((-d2 / (2.0 * sigma * sigma)).exp(), ph)
        })
    }

    fn ensemble(grid: GridSpec, interaction: Interaction, scale: f64) -> OrbitalEnsemble {
        OrbitalEnsemble::new(
            0.0,
            vec![0.6 * scale, 0.4 * scale],
            vec![
                gaussian(grid, [0.5, 0.0, 0.0], 1.0, [0.3, 0.0, 0.0]),
                gaussian(grid, [-0.5, 0.5, 0.0], 1.2, [0.0, -0.2, 0.1]),
            ],
            interaction,
        )
        .unwrap()
    }

    fn max_diff(a: &OrbitalEnsemble, b: &OrbitalEnsemble) -> f64 {
        let a = a.orbitals_in(Space::Position);
        let b = b.orbitals_in(Space::Position);
        a.iter()
            .zip(b.iter())
            .flat_map(|(u, v)| u.values().iter().zip(v.values()).map(|(x, y)| (x - y).norm()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn rejects_bad_step() {
        let grid = GridSpec::new(8, 8.0).unwrap();
        for dt in [0.0, -0.1, f64::NAN] {
            assert!(Propagator::new(grid, Interaction::Repulsive, StepConfig::new(dt)).is_err());
        }
    }

    #[test]
    fn free_step_is_the_free_multiplier() {
        let grid = GridSpec::new(16, 12.0).unwrap();
        let mut e = ensemble(grid, Interaction::Free, 1.0);
        let p = Propagator::new(grid, Interaction::Free, StepConfig::new(0.05)).unwrap();
        let start = e.clone();
        assert!(strang_step(&mut e, &p).unwrap().is_none());
        for (u, u0) in e.orbitals().iter().zip(start.orbitals()) {
            let mut expected = to_frequency(u0).unwrap();
            apply_free_flow(&mut expected, 0.05).unwrap();
            for (a, b) in u.values().iter().zip(expected.values()) {
                assert!((a - b).norm() < 1e-13);
            }
        }
        assert!((e.time() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn trace_and_hs_norm_are_conserved() {
        let grid = GridSpec::new(16, 12.0).unwrap();
        let mut e = ensemble(grid, Interaction::Repulsive, 1.0);
        let p = Propagator::new(grid, Interaction::Repulsive, StepConfig::new(0.02)).unwrap();
        let (tr0, hs0) = (e.trace(), hs_norm(&e).unwrap());
        for _ in 0..40 {
            p.step(&mut e).unwrap();
        }
        assert!((e.trace() - tr0).abs() < 1e-10 * tr0);
        assert!((hs_norm(&e).unwrap() - hs0).abs() < 1e-10 * hs0);
    }

    #[test]
    fn frozen_potential_step_is_reversible() {
        let grid = GridSpec::new(16, 12.0).unwrap();
        let e0 = ensemble(grid, Interaction::Repulsive, 1.0);
        let p = Propagator::new(grid, Interaction::Repulsive, StepConfig::new(0.05)).unwrap();
        let v = p.potential(&e0).unwrap().unwrap();
        let mut e = e0.clone();
        p.step_with_potential(&mut e, &v, 0.05).unwrap();
        assert!(max_diff(&e, &e0) > 1e-4);
        p.step_with_potential(&mut e, &v, -0.05).unwrap();
        assert!(max_diff(&e, &e0) < 1e-10);
    }

    #[test]
    fn evolution_composes_exactly() {
        let grid = GridSpec::new(16, 12.0).unwrap();
        let e0 = ensemble(grid, Interaction::Attractive, 2.0);
        let p = Propagator::new(grid, Interaction::Attractive, StepConfig::new(0.05)).unwrap();
        let whole = evolve(e0.clone(), &p, &[0.5, 1.0], &mut ()).unwrap();
        let half = evolve(e0, &p, &[0.5], &mut ()).unwrap();
        let split = evolve(half, &p, &[1.0], &mut ()).unwrap();
        for (u, v) in whole.orbitals().iter().zip(split.orbitals()) {
            assert_eq!(u.values(), v.values());
        }
    }

    #[test]
    fn energy_error_is_second_order() {
        let grid = GridSpec::new(16, 12.0).unwrap();
        let e0 = ensemble(grid, Interaction::Repulsive, 5.0);
        let drift = |dt: f64| {
            let p = Propagator::new(grid, Interaction::Repulsive, StepConfig::new(dt)).unwrap();
            let start = p.energy(&e0).unwrap();
            let e = evolve(e0.clone(), &p, &[0.5], &mut ()).unwrap();
            ((p.energy(&e).unwrap() - start) / start).abs()
        };
        let (d1, d2) = (drift(0.01), drift(0.005));
        assert!(d1 < 1e-3, "{d1}");
        assert!((3.5..4.5).contains(&(d1 / d2)), "{d1} {d2}");
    }

    #[test]
    fn splitting_error_is_second_order() {
        let grid = GridSpec::new(16, 12.0).unwrap();
        let e0 = ensemble(grid, Interaction::Repulsive, 20.0);
        let run = |dt: f64| {
            let p = Propagator::new(grid, Interaction::Repulsive, StepConfig::new(dt)).unwrap();
            evolve(e0.clone(), &p, &[0.4], &mut ()).unwrap()
        };
        let reference = run(0.0025);
        let e1 = max_diff(&run(0.04), &reference);
        let e2 = max_diff(&run(0.02), &reference);
        let ratio = e1 / e2;
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn observer_sees_every_step_and_record() {
        struct Count {
            steps: Vec<f64>,
            records: Vec<f64>,
        }
        impl Observer for Count {
            fn on_step(&mut self, s: &StepView<'_>) -> Result<()> {
                assert!(s.potential.is_some());
                self.steps.push(s.t_mid());
                Ok(())
            }
            fn on_record(&mut self, e: &OrbitalEnsemble) -> Result<()> {
                self.records.push(e.time());
                Ok(())
            }
        }
        let grid = GridSpec::new(8, 8.0).unwrap();
        let p = Propagator::new(grid, Interaction::Repulsive, StepConfig::new(0.1)).unwrap();
        let mut c = Count {
            steps: vec![],
            records: vec![],
        };
        let e = evolve(ensemble(grid, Interaction::Repulsive, 1.0), &p, &[0.0, 0.2, 0.5], &mut c).unwrap();
        assert_eq!(c.steps.len(), 5);
        assert!((c.steps[0] - 0.05).abs() < 1e-15);
        assert_eq!(c.records.len(), 3);
        assert!((e.time() - 0.5).abs() < 1e-15);
        assert!(matches!(
            evolve(e.clone(), &p, &[0.55], &mut ()),
            Err(Error::InvalidSchedule(_))
        ));
        assert!(evolve(e, &p, &[0.9, 0.7], &mut ()).is_err());
    }

    #[test]
    fn non_finite_state_aborts() {
        let grid = GridSpec::new(8, 8.0).unwrap();
        let mut u = gaussian(grid, [0.0; 3], 1.0, [0.0; 3]);
        u.values_mut()[3] = Complex64::new(f64::NAN, 0.0);
        let e = OrbitalEnsemble::new(0.0, vec![1.0], vec![u], Interaction::Repulsive).unwrap();
        let p = Propagator::new(grid, Interaction::Repulsive, StepConfig::new(0.1)).unwrap();
        let err = evolve(e.clone(), &p, &[0.3], &mut ()).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        assert_eq!(err.exit_code(), 2);
        let mut e = e;
        assert!(matches!(p.step(&mut e), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn density_stays_nonnegative() {
        let grid = GridSpec::new(16, 12.0).unwrap();
        let mut e = ensemble(grid, Interaction::Attractive, 3.0);
        let p = Propagator::new(grid, Interaction::Attractive, StepConfig::new(0.05)).unwrap();
        for _ in 0..10 {
            p.step(&mut e).unwrap();
        }
        assert!(density(&e).values().iter().all(|&r| r >= 0.0));
    }
}
