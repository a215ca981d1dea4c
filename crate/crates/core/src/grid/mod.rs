//! Cubic periodic grids, continuum-normalized Fourier transforms and
//! quadratures.
//!
//! Position lattice: `x_j = -L/2 + j h`, `j = 0..n`, row-major with the last
//! axis fastest. Frequency lattice: FFT order, index `q` maps to
//! `m = q` for `q < n/2` and `m = q - n` otherwise, `k_m = 2π m / L`.
//!
//! The forward transform approximates `û(k) = ∫ e^{-ik·x} u(x) dx`, i.e.
//! `h³` times the unnormalized DFT with the phase of the centered origin
//! folded in; the inverse is `L⁻³` times the unnormalized inverse DFT.

mod fft;

pub use fft::{Fft3, PaddedConvolver};

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Block length for two-level summation of grid-sized reductions.
const SUM_BLOCK: usize = 4096;

/// Cubic periodic box with `n` points per axis and side `length`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    n: usize,
    length: f64,
}

impl GridSpec {
    pub fn new(n: usize, length: f64) -> Result<Self> {
        if n < 2 || n % 2 != 0 {
            return Err(Error::InvalidGrid(format!(
                "n must be a positive even integer, got {n}"
            )));
        }
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "box length must be positive, got {length}"
            )));
        }
        Ok(GridSpec { n, length })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn spacing(&self) -> f64 {
        self.length / self.n as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(3)
    }

    pub fn volume(&self) -> f64 {
        self.length.powi(3)
    }

    pub fn len(&self) -> usize {
        self.n * self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Wavenumber lattice spacing `2π / L`.
    pub fn dk(&self) -> f64 {
        2.0 * PI / self.length
    }

    /// Largest resolved wavenumber `π / h`.
    pub fn k_max(&self) -> f64 {
        PI / self.spacing()
    }

    pub fn coordinate(&self, j: usize) -> f64 {
        -0.5 * self.length + j as f64 * self.spacing()
    }

    /// Axis coordinates `x_j`.
    pub fn coordinates(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.coordinate(j)).collect()
    }

    /// Signed mode number of FFT index `q`.
    pub fn mode(&self, q: usize) -> i64 {
        if q < self.n / 2 {
            q as i64
        } else {
            q as i64 - self.n as i64
        }
    }

    pub fn wavenumber(&self, q: usize) -> f64 {
        self.dk() * self.mode(q) as f64
    }

    /// Axis wavenumbers in FFT order.
    pub fn wavenumbers(&self) -> Vec<f64> {
        (0..self.n).map(|q| self.wavenumber(q)).collect()
    }

    pub fn is_nyquist(&self, q: usize) -> bool {
        q == self.n / 2
    }

    /// FFT index of signed mode `m`, if it is on the lattice.
    pub fn index_of_mode(&self, m: i64) -> Option<usize> {
        let half = (self.n / 2) as i64;
        if m < -half || m >= half {
            None
        } else if m >= 0 {
            Some(m as usize)
        } else {
            Some((m + self.n as i64) as usize)
        }
    }

    pub fn flat(&self, i: usize, j: usize, l: usize) -> usize {
        (i * self.n + j) * self.n + l
    }

    pub fn unflat(&self, p: usize) -> [usize; 3] {
        let n = self.n;
        [p / (n * n), (p / n) % n, p % n]
    }

    /// Position of flat index `p`.
    pub fn position(&self, p: usize) -> [f64; 3] {
        let [i, j, l] = self.unflat(p);
        [self.coordinate(i), self.coordinate(j), self.coordinate(l)]
    }

    /// Wavevector of flat frequency index `p`.
    pub fn wavevector(&self, p: usize) -> [f64; 3] {
        let [i, j, l] = self.unflat(p);
        [self.wavenumber(i), self.wavenumber(j), self.wavenumber(l)]
    }

    /// Same lattice, interpreted as a wavenumber box: spacing `2π/L`, side `2π/h`.
    pub fn dual(&self) -> GridSpec {
        GridSpec {
            n: self.n,
            length: 2.0 * PI / self.spacing(),
        }
    }
}

/// Which representation a field's values are in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    Position,
    Frequency,
}

/// Complex field on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: GridSpec,
    space: Space,
    values: Vec<Complex64>,
}

impl ScalarField {
    pub fn zeros(grid: GridSpec, space: Space) -> Self {
        ScalarField {
            grid,
            space,
            values: vec![Complex64::default(); grid.len()],
        }
    }

    pub fn from_values(grid: GridSpec, space: Space, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidGrid(format!(
                "expected {} values, got {}",
                grid.len(),
                values.len()
            )));
        }
        Ok(ScalarField {
            grid,
            space,
            values,
        })
    }

    /// Samples `f` at every position-lattice point.
    pub fn from_fn(grid: GridSpec, f: impl Fn([f64; 3]) -> Complex64) -> Self {
        let values = (0..grid.len()).map(|p| f(grid.position(p))).collect();
        ScalarField {
            grid,
            space: Space::Position,
            values,
        }
    }

    /// Evaluates `f` at every frequency-lattice point.
    pub fn from_spectrum_fn(grid: GridSpec, f: impl Fn([f64; 3]) -> Complex64) -> Self {
        let values = (0..grid.len()).map(|p| f(grid.wavevector(p))).collect();
        ScalarField {
            grid,
            space: Space::Frequency,
            values,
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<Complex64> {
        self.values
    }

    pub fn expect_space(&self, expected: Space) -> Result<()> {
        if self.space == expected {
            Ok(())
        } else {
            Err(Error::WrongSpace {
                expected,
                found: self.space,
            })
        }
    }

    /// Moves the field into `space`, transforming if needed.
    pub fn into_space(mut self, space: Space) -> Self {
        self.set_space(space);
        self
    }

    pub fn set_space(&mut self, space: Space) {
        match (self.space, space) {
            (Space::Position, Space::Frequency) => forward_in_place(self),
            (Space::Frequency, Space::Position) => inverse_in_place(self),
            _ => {}
        }
    }

    pub fn scale(&mut self, c: Complex64) {
        self.values.iter_mut().for_each(|v| *v *= c);
    }

    /// `self += c · other`.
    pub fn axpy(&mut self, c: Complex64, other: &ScalarField) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch);
        }
        self.expect_space(other.space)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
        Ok(())
    }

    /// `L²` norm squared with the quadrature matching the current space:
    /// `h³ Σ|u|²` in position space, `L⁻³ Σ|û|²` in frequency space.
    pub fn norm_sqr(&self) -> f64 {
        let s: f64 = self.values.iter().map(|v| v.norm_sqr()).sum();
        match self.space {
            Space::Position => s * self.grid.cell_volume(),
            Space::Frequency => s / self.grid.volume(),
        }
    }

    /// `⟨self, other⟩ = ∫ conj(self) other`, in either space.
    pub fn inner(&self, other: &ScalarField) -> Result<Complex64> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch);
        }
        self.expect_space(other.space)?;
        let s: Complex64 = self
            .values
            .par_chunks(SUM_BLOCK)
            .zip(other.values.par_chunks(SUM_BLOCK))
            .map(|(x, y)| x.iter().zip(y).map(|(a, b)| a.conj() * b).sum::<Complex64>())
            .collect::<Vec<_>>()
            .into_iter()
            .sum();
        Ok(match self.space {
            Space::Position => s * self.grid.cell_volume(),
            Space::Frequency => s / self.grid.volume(),
        })
    }

    /// Real part as a [`RealField`], refusing imaginary residue above `tol`
    /// (relative to the largest modulus).
    pub fn to_real(&self, tol: f64) -> Result<RealField> {
        self.expect_space(Space::Position)?;
        let scale = self.values.iter().map(|v| v.norm()).fold(0.0, f64::max);
        let residue = self.values.iter().map(|v| v.im.abs()).fold(0.0, f64::max);
        if residue > tol * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::NotReal(residue));
        }
        Ok(RealField {
            grid: self.grid,
            values: self.values.iter().map(|v| v.re).collect(),
        })
    }
}

/// Real-valued position-space field (densities, potentials).
#[derive(Debug, Clone, PartialEq)]
pub struct RealField {
    grid: GridSpec,
    values: Vec<f64>,
}

impl RealField {
    pub fn zeros(grid: GridSpec) -> Self {
        RealField {
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
        Ok(RealField { grid, values })
    }

    pub fn from_fn(grid: GridSpec, f: impl Fn([f64; 3]) -> f64) -> Self {
        let values = (0..grid.len()).map(|p| f(grid.position(p))).collect();
        RealField { grid, values }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn to_complex(&self) -> ScalarField {
        ScalarField {
            grid: self.grid,
            space: Space::Position,
            values: self.values.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    /// `h³ Σ ρ`.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    /// Trilinear interpolation at an arbitrary point of the periodic box.
    pub fn interpolate(&self, x: [f64; 3]) -> f64 {
        let h = self.grid.spacing();
        let half = 0.5 * self.grid.length;
        let u = [(x[0] + half) / h, (x[1] + half) / h, (x[2] + half) / h];
        trilinear(self.grid.n, u, |p| self.values[p])
    }
}

/// Trilinear interpolation on a periodic `n³` lattice; `u` is the point in
/// lattice units, node `i` of an axis sits at `u = i` and wraps modulo `n`.
pub(crate) fn trilinear(n: usize, u: [f64; 3], value: impl Fn(usize) -> f64) -> f64 {
    let ni = n as i64;
    let mut base = [0i64; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let f = u[a].floor();
        base[a] = f as i64;
        frac[a] = u[a] - f;
    }
    let wrap = |i: i64| i.rem_euclid(ni) as usize;
    let mut acc = 0.0;
    for corner in 0..8 {
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let bit = (corner >> a) & 1;
            w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
            idx[a] = wrap(base[a] + bit as i64);
        }
        if w != 0.0 {
            acc += w * value((idx[0] * n + idx[1]) * n + idx[2]);
        }
    }
    acc
}

/// `(-1)^(qx+qy+qz)`: the phase `e^{i k·L/2}` of the centered origin.
fn parity_sign(grid: &GridSpec, p: usize) -> f64 {
    let [i, j, l] = grid.unflat(p);
    if (i + j + l) % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

fn forward_in_place(f: &mut ScalarField) {
    let grid = f.grid;
    Fft3::shared(grid.n).forward(&mut f.values);
    let h3 = grid.cell_volume();
    for (p, v) in f.values.iter_mut().enumerate() {
        *v *= h3 * parity_sign(&grid, p);
    }
    f.space = Space::Frequency;
}

fn inverse_in_place(f: &mut ScalarField) {
    let grid = f.grid;
    let inv = 1.0 / grid.volume();
    for (p, v) in f.values.iter_mut().enumerate() {
        *v *= inv * parity_sign(&grid, p);
    }
    Fft3::shared(grid.n).inverse(&mut f.values);
    f.space = Space::Position;
}

/// Continuum-normalized forward transform.
pub fn to_frequency(f: &ScalarField) -> Result<ScalarField> {
    f.expect_space(Space::Position)?;
    let mut out = f.clone();
    forward_in_place(&mut out);
    Ok(out)
}

/// Exact inverse of [`to_frequency`].
pub fn to_position(f: &ScalarField) -> Result<ScalarField> {
    f.expect_space(Space::Frequency)?;
    let mut out = f.clone();
    inverse_in_place(&mut out);
    Ok(out)
}

/// Pointwise product with `m(k)` on the frequency lattice.
pub fn apply_multiplier(
    f: &ScalarField,
    m: impl Fn([f64; 3]) -> Complex64,
) -> Result<ScalarField> {
    let mut out = f.clone();
    apply_multiplier_in_place(&mut out, m)?;
    Ok(out)
}

pub fn apply_multiplier_in_place(
    f: &mut ScalarField,
    m: impl Fn([f64; 3]) -> Complex64,
) -> Result<()> {
    f.expect_space(Space::Frequency)?;
    let grid = f.grid;
    let ks = grid.wavenumbers();
    let n = grid.n;
    for (p, v) in f.values.iter_mut().enumerate() {
        *v *= m([ks[p / (n * n)], ks[(p / n) % n], ks[p % n]]);
    }
    Ok(())
}

/// Multiplies by `e^{-iτ|k|²}`, the free propagator `e^{iτΔ}`, using the
/// separable factorization of the phase.
pub fn apply_free_flow(f: &mut ScalarField, tau: f64) -> Result<()> {
    f.expect_space(Space::Frequency)?;
    let grid = f.grid;
    let n = grid.n;
    let phase: Vec<Complex64> = grid
        .wavenumbers()
        .iter()
        .map(|k| Complex64::from_polar(1.0, -tau * k * k))
        .collect();
    for (i, slab) in f.values.chunks_exact_mut(n * n).enumerate() {
        for (j, row) in slab.chunks_exact_mut(n).enumerate() {
            let pij = phase[i] * phase[j];
            for (v, pl) in row.iter_mut().zip(&phase) {
                *v *= pij * pl;
            }
        }
    }
    Ok(())
}

/// Spectral partial derivative along `axis` (multiplier `i k_axis`), with the
/// Nyquist mode of that axis zeroed so real fields stay real.
pub fn derivative(f: &ScalarField, axis: usize) -> Result<ScalarField> {
    assert!(axis < 3, "axis out of range");
    f.expect_space(Space::Frequency)?;
    let grid = f.grid;
    let mut out = f.clone();
    for (p, v) in out.values.iter_mut().enumerate() {
        let q = grid.unflat(p)[axis];
        if grid.is_nyquist(q) {
            *v = Complex64::default();
        } else {
            *v *= Complex64::new(0.0, grid.wavenumber(q));
        }
    }
    Ok(out)
}

/// Supported `L^p` exponents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lp {
    L1,
    L2,
    Inf,
}

impl TryFrom<f64> for Lp {
    type Error = Error;

    fn try_from(p: f64) -> Result<Self> {
        if p == 1.0 {
            Ok(Lp::L1)
        } else if p == 2.0 {
            Ok(Lp::L2)
        } else if p == f64::INFINITY {
            Ok(Lp::Inf)
        } else {
            Err(Error::UnsupportedNorm(p))
        }
    }
}

/// `h³`-weighted `L¹`/`L²` quadrature or lattice maximum.
pub fn lp_norm(rho: &RealField, p: Lp) -> f64 {
    let h3 = rho.grid.cell_volume();
    match p {
        Lp::L1 => rho.values.iter().map(|v| v.abs()).sum::<f64>() * h3,
        Lp::L2 => (rho.values.iter().map(|v| v * v).sum::<f64>() * h3).sqrt(),
        Lp::Inf => rho.max_abs(),
    }
}

/// Fraction of `Σ|u|²` in the outer shell `max_a |x_a| > 0.4 L`.
pub fn shell_fraction(values: impl Iterator<Item = (usize, f64)>, grid: &GridSpec) -> f64 {
    let edge = 0.4 * grid.length;
    let (mut total, mut shell) = (0.0, 0.0);
    for (p, w) in values {
        total += w;
        if grid.position(p).iter().any(|x| x.abs() > edge) {
            shell += w;
        }
    }
    if total > 0.0 {
        shell / total
    } else {
        0.0
    }
}
