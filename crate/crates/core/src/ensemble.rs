//! Rank-form density operators `γ = Σ_j λ_j |u_j⟩⟨u_j|` and the Gram-matrix
//! evaluation of their kernel norms.
//!
//! For fields `f_j` the kernel `Σ_j λ_j f_j(x) conj(f_j(y))` has
//! `‖·‖²_{L²(x,y)} = Σ_{jl} λ_j λ_l |⟨f_j, f_l⟩|²`, so every norm in the
//! hierarchy (`HS`, `H²`, `A²`) reduces to an `N×N` Gram matrix of suitably
//! weighted orbitals. Orbitals are not assumed orthonormal.

use std::borrow::Cow;

use log::warn;
use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{apply_free_flow, shell_fraction, trilinear, GridSpec, RealField, ScalarField, Space};

/// Mass fraction in the outer shell above which weighted norms are flagged.
pub const CONTAINMENT_TOLERANCE: f64 = 1e-6;

/// Pair interaction `w(x) = s |x|⁻¹`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interaction {
    /// `s = +1`
    Repulsive,
    /// `s = -1`
    Attractive,
    /// `w = 0`, free flow
    Free,
}

impl Interaction {
    pub fn sign(self) -> f64 {
        match self {
            Interaction::Repulsive => 1.0,
            Interaction::Attractive => -1.0,
            Interaction::Free => 0.0,
        }
    }

    pub fn from_sign(sign: i64) -> Result<Self> {
        match sign {
            1 => Ok(Interaction::Repulsive),
            -1 => Ok(Interaction::Attractive),
            0 => Ok(Interaction::Free),
            other => Err(Error::InvalidEnsemble(format!(
                "interaction sign must be +1, -1 or 0, got {other}"
            ))),
        }
    }
}

/// Finite-rank density operator on a common grid.
///
/// Orbitals are stored in a single representation (all position or all
/// frequency space); the propagator keeps them in frequency space between
/// steps so consecutive evolutions compose exactly.
#[derive(Debug, Clone)]
pub struct OrbitalEnsemble {
    t: f64,
    occupations: Vec<f64>,
    orbitals: Vec<ScalarField>,
    interaction: Interaction,
    initial_trace: f64,
}

impl OrbitalEnsemble {
    /// Builds an ensemble at time `t`, sorting occupations in descending order.
    pub fn new(
        t: f64,
        occupations: Vec<f64>,
        orbitals: Vec<ScalarField>,
        interaction: Interaction,
    ) -> Result<Self> {
        if orbitals.is_empty() {
            return Err(Error::EmptyEnsemble);
        }
        if occupations.len() != orbitals.len() {
            return Err(Error::InvalidEnsemble(format!(
                "{} occupations for {} orbitals",
                occupations.len(),
                orbitals.len()
            )));
        }
        if let Some(bad) = occupations.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(Error::InvalidEnsemble(format!(
                "occupations must be positive, got {bad}"
            )));
        }
        let grid = *orbitals[0].grid();
        let space = orbitals[0].space();
        for u in &orbitals[1..] {
            if *u.grid() != grid {
                return Err(Error::GridMismatch);
            }
            u.expect_space(space)?;
        }

        let mut pairs: Vec<(f64, ScalarField)> = occupations.into_iter().zip(orbitals).collect();
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
        let (occupations, orbitals): (Vec<f64>, Vec<ScalarField>) = pairs.into_iter().unzip();

        let mut e = OrbitalEnsemble {
            t,
            occupations,
            orbitals,
            interaction,
            initial_trace: 0.0,
        };
        e.initial_trace = e.trace();
        Ok(e)
    }

    /// Rebuilds an ensemble with a known reference trace (snapshot restore).
    pub fn with_initial_trace(mut self, trace: f64) -> Self {
        self.initial_trace = trace;
        self
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub(crate) fn set_time(&mut self, t: f64) {
        self.t = t;
    }

    pub fn rank(&self) -> usize {
        self.orbitals.len()
    }

    pub fn grid(&self) -> &GridSpec {
        self.orbitals[0].grid()
    }

    pub fn occupations(&self) -> &[f64] {
        &self.occupations
    }

    pub fn interaction(&self) -> Interaction {
        self.interaction
    }

    pub fn space(&self) -> Space {
        self.orbitals[0].space()
    }

    /// Orbitals in their stored representation.
    pub fn orbitals(&self) -> &[ScalarField] {
        &self.orbitals
    }

    pub(crate) fn orbitals_mut(&mut self) -> &mut [ScalarField] {
        &mut self.orbitals
    }

    /// Trace recorded when the ensemble was built.
    pub fn initial_trace(&self) -> f64 {
        self.initial_trace
    }

    /// `Σ λ_j ‖u_j‖²`.
    pub fn trace(&self) -> f64 {
        self.occupations
            .iter()
            .zip(&self.orbitals)
            .map(|(l, u)| l * u.norm_sqr())
            .sum()
    }

    pub fn set_space(&mut self, space: Space) {
        self.orbitals
            .par_iter_mut()
            .for_each(|u| u.set_space(space));
    }

    pub fn into_space(mut self, space: Space) -> Self {
        self.set_space(space);
        self
    }

    pub fn orbitals_in(&self, space: Space) -> Cow<'_, [ScalarField]> {
        if self.space() == space {
            Cow::Borrowed(&self.orbitals)
        } else {
            Cow::Owned(
                self.orbitals
                    .par_iter()
                    .map(|u| u.clone().into_space(space))
                    .collect(),
            )
        }
    }
}

/// Kernel norm together with the Gram matrix it was computed from.
#[derive(Debug, Clone)]
pub struct GramNorm {
    pub value: f64,
    pub gram: DMatrix<Complex64>,
}

pub fn gram_matrix(fields: &[ScalarField]) -> Result<DMatrix<Complex64>> {
    let n = fields.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|j| (j..n).map(move |l| (j, l))).collect();
    let entries: Vec<Complex64> = pairs
        .par_iter()
        .map(|&(j, l)| fields[j].inner(&fields[l]))
        .collect::<Result<_>>()?;
    let mut gram = DMatrix::zeros(n, n);
    for (&(j, l), v) in pairs.iter().zip(entries) {
        gram[(j, l)] = v;
        gram[(l, j)] = v.conj();
    }
    Ok(gram)
}

/// `‖Σ_j λ_j f_j ⊗ conj(f_j)‖_{L²(x,y)}` via `Σ λ_j λ_l |⟨f_j, f_l⟩|²`.
pub fn gram_weighted_norm(fields: &[ScalarField], occupations: &[f64]) -> Result<GramNorm> {
    if fields.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    if fields.len() != occupations.len() {
        return Err(Error::InvalidEnsemble(
            "field and occupation counts differ".into(),
        ));
    }
    let gram = gram_matrix(fields)?;
    let mut sq = 0.0;
    for j in 0..fields.len() {
        for l in 0..fields.len() {
            sq += occupations[j] * occupations[l] * gram[(j, l)].norm_sqr();
        }
    }
    Ok(GramNorm {
        value: sq.max(0.0).sqrt(),
        gram,
    })
}

/// `ρ(x) = Σ_j λ_j |u_j(x)|²`.
pub fn density(e: &OrbitalEnsemble) -> RealField {
    let orbitals = e.orbitals_in(Space::Position);
    density_of(&orbitals, e.occupations())
}

pub(crate) fn density_of(orbitals: &[ScalarField], occupations: &[f64]) -> RealField {
    let grid = *orbitals[0].grid();
    let mut rho = RealField::zeros(grid);
    for (u, l) in orbitals.iter().zip(occupations) {
        for (r, v) in rho.values_mut().iter_mut().zip(u.values()) {
            *r += l * v.norm_sqr();
        }
    }
    rho
}

/// Hilbert–Schmidt norm `‖γ‖_{L²(x,y)}`.
pub fn hs_norm(e: &OrbitalEnsemble) -> Result<f64> {
    Ok(gram_weighted_norm(e.orbitals(), e.occupations())?.value)
}

/// `‖⟨∇_x⟩² ⟨∇_y⟩² γ‖_{L²(x,y)}`, multiplier `1 + |k|²` on each orbital.
pub fn h2_norm(e: &OrbitalEnsemble) -> Result<f64> {
    let smoothed: Vec<ScalarField> = e
        .orbitals_in(Space::Frequency)
        .par_iter()
        .map(|u| bracket_squared(u))
        .collect();
    Ok(gram_weighted_norm(&smoothed, e.occupations())?.value)
}

fn bracket_squared(u: &ScalarField) -> ScalarField {
    let grid = *u.grid();
    let ks = grid.wavenumbers();
    let n = grid.n();
    let mut out = u.clone();
    for (p, v) in out.values_mut().iter_mut().enumerate() {
        let (a, b, c) = (ks[p / (n * n)], ks[(p / n) % n], ks[p % n]);
        *v *= 1.0 + a * a + b * b + c * c;
    }
    out
}

/// `v_j = e^{-itΔ} u_j` in frequency space: `v̂_j = e^{it|k|²} û_j`.
pub fn free_conjugated_orbitals(e: &OrbitalEnsemble) -> Vec<ScalarField> {
    let t = e.time();
    e.orbitals_in(Space::Frequency)
        .par_iter()
        .map(|u| {
            let mut v = u.clone();
            apply_free_flow(&mut v, -t).expect("frequency-space orbital");
            v
        })
        .collect()
}

/// `‖⟨x⟩² ⟨y⟩² μ‖_{L²(x,y)}` for `μ = e^{-itΔ} γ e^{itΔ}`.
pub fn a2_norm(e: &OrbitalEnsemble) -> Result<f64> {
    let weighted: Vec<ScalarField> = free_conjugated_orbitals(e)
        .into_par_iter()
        .map(|v| {
            let mut v = v.into_space(Space::Position);
            let grid = *v.grid();
            for (p, val) in v.values_mut().iter_mut().enumerate() {
                let x = grid.position(p);
                *val *= 1.0 + x[0] * x[0] + x[1] * x[1] + x[2] * x[2];
            }
            v
        })
        .collect();
    Ok(gram_weighted_norm(&weighted, e.occupations())?.value)
}

/// Real function on the frequency lattice (FFT order).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    grid: GridSpec,
    values: Vec<f64>,
}

impl Spectrum {
    pub fn zeros(grid: GridSpec) -> Self {
        Spectrum {
            grid,
            values: vec![0.0; grid.len()],
        }
    }

    pub fn from_values(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidGrid(format!(
                "expected {} values, got {}",
                grid.len(),
                values.len()
            )));
        }
        Ok(Spectrum { grid, values })
    }

    pub fn from_fn(grid: GridSpec, f: impl Fn([f64; 3]) -> f64) -> Self {
        let values = (0..grid.len()).map(|p| f(grid.wavevector(p))).collect();
        Spectrum { grid, values }
    }

    /// Grid of the position lattice this spectrum is dual to.
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn sup(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// `∫ D dk / (2π)³ = L⁻³ Σ_k D(k)`.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.grid.volume()
    }

    /// Value at lattice wavevector with signed modes `m`.
    pub fn at_modes(&self, m: [i64; 3]) -> Option<f64> {
        let g = &self.grid;
        Some(self.values[g.flat(g.index_of_mode(m[0])?, g.index_of_mode(m[1])?, g.index_of_mode(m[2])?)])
    }

    /// Trilinear interpolation at an arbitrary wavevector inside the box.
    pub fn interpolate(&self, k: [f64; 3]) -> f64 {
        let dk = self.grid.dk();
        trilinear(self.grid.n(), [k[0] / dk, k[1] / dk, k[2] / dk], |p| self.values[p])
    }

    /// Re-indexes onto the dual grid in centered (position-like) order.
    pub fn to_centered(&self) -> RealField {
        let g = &self.grid;
        let n = g.n();
        let dual = g.dual();
        let mut out = RealField::zeros(dual);
        let shift = |q: usize| (q + n / 2) % n;
        for (p, v) in self.values.iter().enumerate() {
            let [a, b, c] = g.unflat(p);
            out.values_mut()[dual.flat(shift(a), shift(b), shift(c))] = *v;
        }
        out
    }

    /// Inverse of [`Spectrum::to_centered`].
    pub fn from_centered(grid: GridSpec, field: &RealField) -> Self {
        let n = grid.n();
        let mut out = Spectrum::zeros(grid);
        let shift = |q: usize| (q + n / 2) % n;
        for p in 0..grid.len() {
            let [a, b, c] = grid.unflat(p);
            out.values[p] = field.values()[grid.flat(shift(a), shift(b), shift(c))];
        }
        out
    }
}

/// `D(t, k) = μ̂(t, k, -k) = Σ_j λ_j |e^{it|k|²} û_j(t, k)|² = Σ_j λ_j |û_j(t, k)|²`.
pub fn antidiagonal_spectrum(e: &OrbitalEnsemble) -> Spectrum {
    let orbitals = e.orbitals_in(Space::Frequency);
    let grid = *e.grid();
    let mut d = Spectrum::zeros(grid);
    for (u, l) in orbitals.iter().zip(e.occupations()) {
        for (dv, v) in d.values.iter_mut().zip(u.values()) {
            *dv += l * v.norm_sqr();
        }
    }
    d
}

/// Fraction of the density's mass in the outer 10% shell of the box; logs a
/// containment warning above [`CONTAINMENT_TOLERANCE`].
pub fn containment_fraction(rho: &RealField) -> f64 {
    let frac = shell_fraction(rho.values().iter().copied().enumerate(), rho.grid());
    if frac > CONTAINMENT_TOLERANCE {
        warn!("containment warning: {frac:.3e} of the mass lies in the outer shell");
    }
    frac
}

/// Relative residual below which a field adds no direction in [`hs_distance`].
const SPAN_TOLERANCE: f64 = 1e-13;

/// `‖A - B‖_HS` for rank-form operators.
///
/// The fields of both operators are orthonormalized (modified Gram-Schmidt,
/// applied twice) and the norm is taken of the small matrix `Q*(A - B)Q`, so
/// identical inputs give zero to rounding instead of `√ε ‖A‖`.
pub fn hs_distance(
    a: &[ScalarField],
    la: &[f64],
    b: &[ScalarField],
    lb: &[f64],
) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    if a.len() != la.len() || b.len() != lb.len() {
        return Err(Error::InvalidEnsemble(
            "field and occupation counts differ".into(),
        ));
    }
    let weights: Vec<f64> = la.iter().copied().chain(lb.iter().map(|l| -l)).collect();
    let mut basis: Vec<ScalarField> = Vec::new();
    let mut coords: Vec<Vec<Complex64>> = Vec::new();
    for f in a.iter().chain(b) {
        let scale = f.inner(f)?.re.sqrt();
        let mut v = f.clone();
        let mut c = vec![Complex64::default(); basis.len()];
        for _ in 0..2 {
            for (q, ci) in basis.iter().zip(c.iter_mut()) {
                let r = q.inner(&v)?;
                *ci += r;
                v.values_mut()
                    .par_iter_mut()
                    .zip(q.values().par_iter())
                    .for_each(|(x, y)| *x -= r * y);
            }
        }
        let rest = v.inner(&v)?.re.sqrt();
        if rest > SPAN_TOLERANCE * scale {
            v.scale(Complex64::new(1.0 / rest, 0.0));
            basis.push(v);
            c.push(Complex64::new(rest, 0.0));
        }
        coords.push(c);
    }
    let k = basis.len();
    let mut m = DMatrix::<Complex64>::zeros(k, k);
    for (c, w) in coords.iter().zip(&weights) {
        for (i, ci) in c.iter().enumerate() {
            for (j, cj) in c.iter().enumerate() {
                m[(i, j)] += *w * ci * cj.conj();
            }
        }
    }
    Ok(m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt())
}
