//! Closed-form references: free Gaussian evolution, the potential of a
//! Gaussian density, and a dense-matrix evaluation of the Gram-based norms
//! for tiny grids.

use std::f64::consts::PI;

use libm::erf;
use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::ensemble::{Interaction, OrbitalEnsemble};
use crate::error::{Error, Result};
use crate::grid::{GridSpec, ScalarField, Space};

/// Largest lattice size accepted by [`dense_crosscheck`].
pub const DENSE_LIMIT: usize = 512;

/// Boosted Gaussian orbital `A e^{iξ·(x - x₀)} e^{-|x - x₀|²/(2σ²)}` with
/// `A = (πσ²)^{-3/4}`, so each orbital has unit `L²` norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianSpec {
    pub occupation: f64,
    pub center: [f64; 3],
    pub width: f64,
    pub boost: [f64; 3],
}

impl GaussianSpec {
    pub fn amplitude(&self) -> f64 {
        (PI * self.width * self.width).powf(-0.75)
    }

    /// Value of `e^{itΔ} u₀` at `x` on `ℝ³`:
    ///
    /// ```text
    /// A e^{iξ·(x-x₀) - i|ξ|²t} (σ²/(σ²+2it))^{3/2} exp(-|x-x₀-2ξt|² / (2(σ²+2it)))
    /// ```
    pub fn free_value(&self, t: f64, x: [f64; 3]) -> Complex64 {
        let s2 = Complex64::new(self.width * self.width, 2.0 * t);
        let ratio = Complex64::new(self.width * self.width, 0.0) / s2;
        let (mut d2, mut phase, mut xi2) = (0.0, 0.0, 0.0);
        for a in 0..3 {
            let rel = x[a] - self.center[a];
            let d = rel - 2.0 * self.boost[a] * t;
            d2 += d * d;
            phase += self.boost[a] * rel;
            xi2 += self.boost[a] * self.boost[a];
        }
        let envelope = (-Complex64::new(d2, 0.0) / (2.0 * s2)).exp();
        // Re(ratio) > 0, so the principal branch is continuous in t
        self.amplitude() * ratio.powf(1.5) * envelope * Complex64::from_polar(1.0, phase - xi2 * t)
    }

    /// Periodized solution `Σ_m u(t, x + mL)` on the torus of side `length`.
    pub fn free_value_periodic(&self, t: f64, x: [f64; 3], length: f64) -> Complex64 {
        // |u| ~ e^{-d²/(2 s²)} around the moving center; beyond 9 s an image
        // contributes below double precision
        let spread = (self.width.powi(4) + 4.0 * t * t).sqrt() / self.width;
        let cutoff = 9.0 * spread;
        let center: Vec<f64> = (0..3).map(|a| self.center[a] + 2.0 * self.boost[a] * t).collect();
        let drift = center.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        let reach = ((cutoff + drift + 0.5 * length) / length).ceil() as i64;
        let mut acc = Complex64::default();
        for i in -reach..=reach {
            for j in -reach..=reach {
                for l in -reach..=reach {
                    let y = [
                        x[0] + i as f64 * length,
                        x[1] + j as f64 * length,
                        x[2] + l as f64 * length,
                    ];
                    let d2: f64 = (0..3).map(|a| (y[a] - center[a]).powi(2)).sum();
                    if d2 <= cutoff * cutoff {
                        acc += self.free_value(t, y);
                    }
                }
            }
        }
        acc
    }
}

/// Samples the free evolution of `spec` at time `t` on `grid`.
pub fn free_gaussian(grid: &GridSpec, spec: &GaussianSpec, t: f64, periodic: bool) -> ScalarField {
    let length = grid.length();
    ScalarField::from_fn(*grid, |x| {
        if periodic {
            spec.free_value_periodic(t, x, length)
        } else {
            spec.free_value(t, x)
        }
    })
}

/// Initial ensemble built from Gaussian orbitals at `t = 0`.
pub fn gaussian_ensemble(
    grid: &GridSpec,
    specs: &[GaussianSpec],
    interaction: Interaction,
) -> Result<OrbitalEnsemble> {
    let orbitals = specs.iter().map(|s| free_gaussian(grid, s, 0.0, false)).collect();
    let occupations = specs.iter().map(|s| s.occupation).collect();
    OrbitalEnsemble::new(0.0, occupations, orbitals, interaction)
}

/// Radial potential `erf(r / (σ√2)) / r` of a unit-mass Gaussian density
/// `(2πσ²)^{-3/2} e^{-r²/(2σ²)}`.
pub fn gaussian_potential(r: f64, sigma: f64) -> f64 {
    if r == 0.0 {
        (2.0 / PI).sqrt() / sigma
    } else {
        erf(r / (sigma * 2f64.sqrt())) / r
    }
}

/// Gram-matrix norms next to their dense kernel-matrix counterparts.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseReport {
    pub hs: (f64, f64),
    pub h2: (f64, f64),
    pub a2: (f64, f64),
    /// `max_x |ρ(x) - Γ(x, x)|`.
    pub density_error: f64,
    /// Smallest eigenvalue of `γ` as an operator on the lattice.
    pub min_eigenvalue: f64,
}

impl DenseReport {
    /// Largest relative discrepancy among the three norm pairs.
    pub fn max_relative_error(&self) -> f64 {
        [self.hs, self.h2, self.a2]
            .iter()
            .map(|(g, d)| (g - d).abs() / d.abs().max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max)
    }
}

fn lattice_kernel(grid: &GridSpec, symbol: impl Fn(f64) -> Complex64) -> DMatrix<Complex64> {
    let n = grid.n();
    let h = grid.spacing();
    let ks = grid.wavenumbers();
    DMatrix::from_fn(n, n, |i, j| {
        let d = (i as f64 - j as f64) * h;
        ks.iter()
            .map(|&k| symbol(k) * Complex64::from_polar(1.0, k * d))
            .sum::<Complex64>()
            / n as f64
    })
}

fn kron3(a: &DMatrix<Complex64>, b: &DMatrix<Complex64>, c: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    a.kronecker(b).kronecker(c)
}

/// Dense kernel `Γ(x, y) = Σ λ_j u_j(x) conj(u_j(y))` in position space.
fn kernel_matrix(orbitals: &[ScalarField], occupations: &[f64]) -> DMatrix<Complex64> {
    let len = orbitals[0].values().len();
    let mut g = DMatrix::zeros(len, len);
    for (u, l) in orbitals.iter().zip(occupations) {
        let v = nalgebra::DVector::from_column_slice(u.values());
        g += (v.clone() * v.adjoint()) * Complex64::new(*l, 0.0);
    }
    g
}

fn frobenius(m: &DMatrix<Complex64>, weight: f64) -> f64 {
    (m.iter().map(|z| z.norm_sqr()).sum::<f64>() * weight).sqrt()
}

/// Compares the Gram route against explicit `n³ × n³` kernel matrices.
pub fn dense_crosscheck(e: &OrbitalEnsemble) -> Result<DenseReport> {
    let grid = *e.grid();
    if grid.len() > DENSE_LIMIT {
        return Err(Error::GridTooLarge(grid.len()));
    }
    let pos = e.orbitals_in(Space::Position);
    let gamma = kernel_matrix(&pos, e.occupations());
    let h3 = grid.cell_volume();
    let w = h3 * h3;

    let id = DMatrix::<Complex64>::identity(grid.n(), grid.n());
    let d2 = lattice_kernel(&grid, |k| Complex64::new(k * k, 0.0));
    let t = DMatrix::<Complex64>::identity(grid.len(), grid.len())
        + kron3(&d2, &id, &id)
        + kron3(&id, &d2, &id)
        + kron3(&id, &id, &d2);
    let u1 = lattice_kernel(&grid, |k| Complex64::from_polar(1.0, e.time() * k * k));
    let u = kron3(&u1, &u1, &u1);
    let weight = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(grid.len(), |p, _| {
        let x = grid.position(p);
        Complex64::new(1.0 + x[0] * x[0] + x[1] * x[1] + x[2] * x[2], 0.0)
    }));

    let h2_dense = frobenius(&(&t * &gamma * &t), w);
    let mu = &u * &gamma * u.adjoint();
    let a2_dense = frobenius(&(&weight * mu * &weight), w);
    let hs_dense = frobenius(&gamma, w);

    let rho = crate::ensemble::density(e);
    let density_error = rho
        .values()
        .iter()
        .enumerate()
        .map(|(p, r)| (r - gamma[(p, p)].re).abs())
        .fold(0.0, f64::max);
    let min_eigenvalue = (gamma * Complex64::new(h3, 0.0))
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);

    Ok(DenseReport {
        hs: (crate::ensemble::hs_norm(e)?, hs_dense),
        h2: (crate::ensemble::h2_norm(e)?, h2_dense),
        a2: (crate::ensemble::a2_norm(e)?, a2_dense),
        density_error,
        min_eigenvalue,
    })
}

/// `‖A - B‖_HS` of two rank-form operators from frequency-space orbitals,
/// via the dense kernels `Σ λ ŵ(k) conj(ŵ(p))`.
pub fn dense_profile_distance(
    a: &[ScalarField],
    la: &[f64],
    b: &[ScalarField],
    lb: &[f64],
) -> Result<f64> {
    let grid = *a[0].grid();
    if grid.len() > DENSE_LIMIT {
        return Err(Error::GridTooLarge(grid.len()));
    }
    for f in a.iter().chain(b) {
        f.expect_space(Space::Frequency)?;
    }
    let diff = kernel_matrix(a, la) - kernel_matrix(b, lb);
    let inv = 1.0 / grid.volume();
    Ok(frobenius(&diff, inv * inv))
}
