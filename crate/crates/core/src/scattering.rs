//! Long-time diagnostics: the logarithmic phase `Ψ(t, k)`, modified and
//! unmodified profiles, the large-time density formula, and log-log fits.
//!
//! The phase accumulates `∫ V(s, 2sk) ds` on a stride-2 sublattice of the
//! frequency lattice restricted to `|k|_∞ ≤ k_max/2`. Up to `t₁` the potential
//! is sampled directly; afterwards the integrand is replaced by its large-time
//! form `±4(4π)⁻³ s⁻¹ (|·|⁻¹ ⋆ D)(k)`, which stays inside the box for all `s`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::coulomb::{potential_decay_norms, CoulombSolver};
use crate::ensemble::{
    a2_norm, antidiagonal_spectrum, containment_fraction, density_of, free_conjugated_orbitals,
    gram_weighted_norm, h2_norm, hs_distance, hs_norm, OrbitalEnsemble, Spectrum,
};
use crate::error::{Error, Result};
use crate::grid::{lp_norm, GridSpec, Lp, RealField, ScalarField, Space};
use crate::propagator::{Observer, StepView};

/// `4 (4π)⁻³`, the large-time coefficient of the phase integrand.
pub const PHASE_COEFFICIENT: f64 = 4.0 / (64.0 * PI * PI * PI);

/// Samples with `|2tk|_∞` beyond this fraction of `L` are marked invalid.
pub const VALIDITY_FRACTION: f64 = 0.45;

/// Default switch time between the direct and asymptotic phase.
pub const DEFAULT_SWITCH_TIME: f64 = 1.0;

/// Minimum number of points for a log-log fit.
pub const MIN_FIT_POINTS: usize = 5;

/// Same-time tolerance between an ensemble and its phase state.
pub const SYNC_TOLERANCE: f64 = 1e-9;

/// Sample lattice of the frequency grid: modes `-M, -M+s, …, M` per axis for
/// stride `s`, with `M` the largest multiple of `s` not above `n/4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleLattice {
    reach: i64,
    stride: i64,
}

/// Default sample stride.
pub const DEFAULT_STRIDE: usize = 2;

impl SampleLattice {
    pub fn new(grid: &GridSpec, stride: usize) -> Self {
        let stride = stride.max(1) as i64;
        let q = (grid.n() / 4) as i64;
        SampleLattice {
            reach: q - q % stride,
            stride,
        }
    }

    pub fn stride(&self) -> usize {
        self.stride as usize
    }

    /// Samples per axis.
    pub fn side(&self) -> usize {
        (2 * self.reach / self.stride + 1) as usize
    }

    pub fn len(&self) -> usize {
        self.side().pow(3)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn mode(&self, i: usize) -> i64 {
        -self.reach + self.stride * i as i64
    }

    pub fn modes(&self, p: usize) -> [i64; 3] {
        let s = self.side();
        [self.mode(p / (s * s)), self.mode((p / s) % s), self.mode(p % s)]
    }

    pub fn wavevector(&self, grid: &GridSpec, p: usize) -> [f64; 3] {
        let m = self.modes(p);
        let dk = grid.dk();
        [m[0] as f64 * dk, m[1] as f64 * dk, m[2] as f64 * dk]
    }

    /// Per-axis interpolation weights for every FFT index of `grid`, clamped
    /// at the lattice edge.
    fn axis_weights(&self, grid: &GridSpec) -> Vec<(usize, usize, f64)> {
        let last = self.side() - 1;
        (0..grid.n())
            .map(|q| {
                let u = ((grid.mode(q) + self.reach) as f64 / self.stride as f64).clamp(0.0, last as f64);
                let i0 = (u.floor() as usize).min(last);
                let i1 = (i0 + 1).min(last);
                (i0, i1, u - i0 as f64)
            })
            .collect()
    }
}

/// Accumulated phase on the sample lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseState {
    grid: GridSpec,
    lattice: SampleLattice,
    t: f64,
    t1: f64,
    psi: Vec<f64>,
    valid: Vec<bool>,
    overlap_direct: Vec<f64>,
    overlap_asymptotic: Vec<f64>,
}

impl PhaseState {
    pub fn new(grid: GridSpec, t0: f64, t1: f64) -> Self {
        Self::with_stride(grid, t0, t1, DEFAULT_STRIDE)
    }

    pub fn with_stride(grid: GridSpec, t0: f64, t1: f64, stride: usize) -> Self {
        let lattice = SampleLattice::new(&grid, stride);
        let len = lattice.len();
        PhaseState {
            grid,
            lattice,
            t: t0,
            t1,
            psi: vec![0.0; len],
            valid: vec![true; len],
            overlap_direct: vec![0.0; len],
            overlap_asymptotic: vec![0.0; len],
        }
    }

    /// Restores a saved state; the vectors must match the sample lattice.
    pub fn from_parts(
        lattice: (GridSpec, usize),
        t: f64,
        t1: f64,
        psi: Vec<f64>,
        valid: Vec<bool>,
        overlap: (Vec<f64>, Vec<f64>),
    ) -> Result<Self> {
        let mut state = PhaseState::with_stride(lattice.0, t, t1, lattice.1);
        let len = state.lattice.len();
        if psi.len() != len || valid.len() != len || overlap.0.len() != len || overlap.1.len() != len {
            return Err(Error::Snapshot(format!("phase block does not have {len} samples")));
        }
        state.psi = psi;
        state.valid = valid;
        state.overlap_direct = overlap.0;
        state.overlap_asymptotic = overlap.1;
        Ok(state)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn lattice(&self) -> &SampleLattice {
        &self.lattice
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn switch_time(&self) -> f64 {
        self.t1
    }

    pub fn values(&self) -> &[f64] {
        &self.psi
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    pub fn overlap(&self) -> (&[f64], &[f64]) {
        (&self.overlap_direct, &self.overlap_asymptotic)
    }

    pub fn invalid_count(&self) -> usize {
        self.valid.iter().filter(|v| !**v).count()
    }

    fn check_sync(&self, t: f64) -> Result<()> {
        if (self.t - t).abs() > SYNC_TOLERANCE * t.abs().max(1.0) {
            return Err(Error::PhaseOutOfSync {
                ensemble: t,
                phase: self.t,
            });
        }
        Ok(())
    }

    /// `V(t_mid, 2 t_mid k)` at every valid sample; invalidates samples whose
    /// evaluation point leaves `0.45 L`.
    fn direct_values(&mut self, v: &RealField, t_mid: f64) -> Vec<Option<f64>> {
        let limit = VALIDITY_FRACTION * self.grid.length();
        let (grid, lattice) = (self.grid, self.lattice);
        let values: Vec<Option<f64>> = (0..lattice.len())
            .into_par_iter()
            .map(|p| {
                let k = lattice.wavevector(&grid, p);
                let x = [2.0 * t_mid * k[0], 2.0 * t_mid * k[1], 2.0 * t_mid * k[2]];
                if x.iter().any(|c| c.abs() > limit) {
                    None
                } else {
                    Some(v.interpolate(x))
                }
            })
            .collect();
        for (ok, val) in self.valid.iter_mut().zip(&values) {
            if val.is_none() {
                *ok = false;
            }
        }
        values
    }

    /// Direct increment `Ψ += dt · V(t_mid, 2 t_mid k)` over one step.
    pub fn accumulate_direct(&mut self, v: &RealField, t_start: f64, dt: f64) -> Result<()> {
        self.check_sync(t_start)?;
        let values = self.direct_values(v, t_start + 0.5 * dt);
        for ((psi, ok), val) in self.psi.iter_mut().zip(&self.valid).zip(values) {
            if let (true, Some(val)) = (*ok, val) {
                *psi += dt * val;
            }
        }
        self.t = t_start + dt;
        Ok(())
    }

    /// Asymptotic increment `Ψ += dt · sign · 4(4π)⁻³ G(k) / t_mid` with
    /// `G = |·|⁻¹ ⋆ D` at the samples.
    pub fn accumulate_asymptotic(&mut self, g: &[f64], sign: f64, t_start: f64, dt: f64) -> Result<()> {
        self.check_sync(t_start)?;
        let c = dt * sign * PHASE_COEFFICIENT / (t_start + 0.5 * dt);
        for (psi, gv) in self.psi.iter_mut().zip(g) {
            *psi += c * gv;
        }
        self.t = t_start + dt;
        Ok(())
    }

    /// Records direct and asymptotic increments side by side without
    /// touching `Ψ`, for the overlap window `(t₁, 2t₁]`.
    fn record_overlap(&mut self, v: &RealField, g: &[f64], sign: f64, t_start: f64, dt: f64) {
        let t_mid = t_start + 0.5 * dt;
        let values = self.direct_values(v, t_mid);
        let c = dt * sign * PHASE_COEFFICIENT / t_mid;
        for p in 0..self.psi.len() {
            if let Some(val) = values[p] {
                self.overlap_direct[p] += dt * val;
            }
            self.overlap_asymptotic[p] += c * g[p];
        }
    }

    /// Relative `ℓ²` discrepancy between the direct and asymptotic phase
    /// increments over `(t₁, 2t₁]`, on valid samples.
    pub fn overlap_discrepancy(&self) -> Option<f64> {
        let (mut num, mut den) = (0.0, 0.0);
        for p in 0..self.psi.len() {
            if self.valid[p] {
                num += (self.overlap_direct[p] - self.overlap_asymptotic[p]).powi(2);
                den += self.overlap_direct[p].powi(2);
            }
        }
        (den > 0.0).then(|| (num / den).sqrt())
    }

    /// `Ψ` on every point of the frequency lattice (FFT order).
    pub fn on_lattice(&self) -> Vec<f64> {
        let n = self.grid.n();
        let s = self.lattice.side();
        let w = self.lattice.axis_weights(&self.grid);
        let mut out = vec![0.0; n * n * n];
        out.par_chunks_mut(n * n).enumerate().for_each(|(a, slab)| {
            let (a0, a1, fa) = w[a];
            for b in 0..n {
                let (b0, b1, fb) = w[b];
                for c in 0..n {
                    let (c0, c1, fc) = w[c];
                    let at = |i: usize, j: usize, l: usize| self.psi[(i * s + j) * s + l];
                    let lo = (1.0 - fb) * ((1.0 - fc) * at(a0, b0, c0) + fc * at(a0, b0, c1))
                        + fb * ((1.0 - fc) * at(a0, b1, c0) + fc * at(a0, b1, c1));
                    let hi = (1.0 - fb) * ((1.0 - fc) * at(a1, b0, c0) + fc * at(a1, b0, c1))
                        + fb * ((1.0 - fc) * at(a1, b1, c0) + fc * at(a1, b1, c1));
                    slab[b * n + c] = (1.0 - fa) * lo + fa * hi;
                }
            }
        });
        out
    }
}

/// Profile operator `Σ λ_j |w_j⟩⟨w_j|` held by frequency-space orbitals.
#[derive(Debug, Clone)]
pub struct ProfileEnsemble {
    pub t: f64,
    pub occupations: Vec<f64>,
    pub orbitals: Vec<ScalarField>,
}

/// Unmodified profile `μ(t) = e^{-itΔ} γ(t) e^{itΔ}`.
pub fn unmodified_profile(e: &OrbitalEnsemble) -> ProfileEnsemble {
    ProfileEnsemble {
        t: e.time(),
        occupations: e.occupations().to_vec(),
        orbitals: free_conjugated_orbitals(e),
    }
}

/// Modified profile `ŵ_j(k) = e^{iΨ(t,k)} e^{it|k|²} û_j(t, k)`.
pub fn modified_profile(e: &OrbitalEnsemble, phase: &PhaseState) -> Result<ProfileEnsemble> {
    phase.check_sync(e.time())?;
    if *e.grid() != phase.grid {
        return Err(Error::GridMismatch);
    }
    let invalid = phase.invalid_count();
    if 2 * invalid > phase.psi.len() {
        return Err(Error::TooManyInvalidSamples {
            invalid,
            total: phase.psi.len(),
        });
    }
    let rot: Vec<Complex64> = phase
        .on_lattice()
        .into_iter()
        .map(|p| Complex64::from_polar(1.0, p))
        .collect();
    let mut profile = unmodified_profile(e);
    profile.orbitals.par_iter_mut().for_each(|w| {
        for (v, r) in w.values_mut().iter_mut().zip(&rot) {
            *v *= r;
        }
    });
    Ok(profile)
}

/// `‖A - B‖_HS` of two profiles via cross-Gram matrices.
pub fn profile_hs_distance(a: &ProfileEnsemble, b: &ProfileEnsemble) -> Result<f64> {
    hs_distance(&a.orbitals, &a.occupations, &b.orbitals, &b.occupations)
}

/// `sup_x |ρ(t,x) - (4πt)⁻³ D(t, x/2t)|` over lattice points whose
/// evaluation wavevector lies inside the frequency box.
pub fn density_formula_residual(e: &OrbitalEnsemble) -> Result<f64> {
    let t = e.time();
    if t < 1.0 {
        return Err(Error::EarlyTime(t));
    }
    let pos = e.orbitals_in(Space::Position);
    let rho = density_of(&pos, e.occupations());
    let d = antidiagonal_spectrum(e);
    Ok(residual_from(&rho, &d, t))
}

fn residual_from(rho: &RealField, d: &Spectrum, t: f64) -> f64 {
    let grid = rho.grid();
    let kmax = (grid.n() / 2 - 1) as f64 * grid.dk();
    let scale = (4.0 * PI * t).powi(-3);
    (0..grid.len())
        .into_par_iter()
        .filter_map(|p| {
            let x = grid.position(p);
            let k = [x[0] / (2.0 * t), x[1] / (2.0 * t), x[2] / (2.0 * t)];
            if k.iter().any(|c| c.abs() > kmax) {
                return None;
            }
            Some((rho.values()[p] - scale * d.interpolate(k)).abs())
        })
        .reduce(|| 0.0, f64::max)
}

/// Largest deviation of `log y` from its mean for which a series counts as
/// constant in [`decay_fit`].
pub const FLAT_LOG_SPREAD: f64 = 1e-9;

/// Least-squares fit of `log y = a log t + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayFit {
    pub exponent: f64,
    pub intercept: f64,
    pub r2: f64,
    pub points: usize,
}

/// Fits `series` restricted to `window`, inclusive.
///
/// `r²` of a series whose `log y` varies by less than [`FLAT_LOG_SPREAD`]
/// (a conserved quantity up to roundoff) is 1.
pub fn decay_fit(series: &[(f64, f64)], window: (f64, f64)) -> Result<DecayFit> {
    let mut pts = Vec::new();
    for &(t, y) in series {
        if t < window.0 || t > window.1 {
            continue;
        }
        if !(y > 0.0) || !(t > 0.0) {
            return Err(Error::NonPositive { t, value: y });
        }
        pts.push((t.ln(), y.ln()));
    }
    if pts.len() < MIN_FIT_POINTS {
        return Err(Error::TooFewPoints {
            needed: MIN_FIT_POINTS,
            found: pts.len(),
        });
    }
    let (slope, intercept) = least_squares(&pts);
    let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
    let ss_tot: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let ss_res: f64 = pts
        .iter()
        .map(|p| (p.1 - slope * p.0 - intercept).powi(2))
        .sum();
    let spread = pts.iter().map(|p| (p.1 - my).abs()).fold(0.0, f64::max);
    let r2 = if spread <= FLAT_LOG_SPREAD {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(DecayFit {
        exponent: slope,
        intercept,
        r2,
        points: pts.len(),
    })
}

fn least_squares(pts: &[(f64, f64)]) -> (f64, f64) {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// `g(k) = ±4(4π)⁻³ (|·|⁻¹ ⋆ D)(k)` from a late-time antidiagonal spectrum.
pub fn extract_g(d: &Spectrum, sign: f64, solver: &CoulombSolver) -> Result<Spectrum> {
    let mut g = solver.coulomb_transform(d)?;
    for v in g.values_mut() {
        *v *= sign * PHASE_COEFFICIENT;
    }
    Ok(g)
}

/// `Ψ` samples recorded at output times.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PhaseHistory {
    pub times: Vec<f64>,
    pub psi: Vec<Vec<f64>>,
    pub valid: Vec<Vec<bool>>,
}

impl PhaseHistory {
    pub fn push(&mut self, state: &PhaseState) {
        self.times.push(state.time());
        self.psi.push(state.values().to_vec());
        self.valid.push(state.validity().to_vec());
    }

    /// Drops entries later than `t`.
    pub fn truncate_after(&mut self, t: f64) {
        let keep = self.times.iter().take_while(|&&s| s <= t + SYNC_TOLERANCE).count();
        self.times.truncate(keep);
        self.psi.truncate(keep);
        self.valid.truncate(keep);
    }
}

/// Per-sample regression `Ψ(t,k) ≈ g(k) log t + h(k)`; `None` where the sample
/// was invalid inside the window.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseFit {
    pub g: Vec<Option<f64>>,
    pub h: Vec<Option<f64>>,
}

pub fn fit_phase_parameters(history: &PhaseHistory, window: (f64, f64)) -> Result<PhaseFit> {
    let rows: Vec<usize> = (0..history.times.len())
        .filter(|&i| history.times[i] >= window.0 && history.times[i] <= window.1)
        .collect();
    if rows.len() < MIN_FIT_POINTS {
        return Err(Error::TooFewPoints {
            needed: MIN_FIT_POINTS,
            found: rows.len(),
        });
    }
    let samples = history.psi[rows[0]].len();
    let (g, h): (Vec<_>, Vec<_>) = (0..samples)
        .map(|p| {
            if rows.iter().any(|&i| !history.valid[i][p]) {
                return (None, None);
            }
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .map(|&i| (history.times[i].ln(), history.psi[i][p]))
                .collect();
            let (slope, intercept) = least_squares(&pts);
            (Some(slope), Some(intercept))
        })
        .unzip();
    if g.iter().all(Option::is_none) {
        return Err(Error::NoValidSamples);
    }
    Ok(PhaseFit { g, h })
}

/// One row of the diagnostics table, in output column order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagnosticsRecord {
    pub t: f64,
    pub rho_l1: f64,
    pub rho_l2: f64,
    pub rho_linf: f64,
    pub v_linf: f64,
    pub grad_v_linf: f64,
    pub hs: f64,
    pub h2: f64,
    pub a2: f64,
    pub d_sup: f64,
    /// `NaN` before `t = 1`.
    pub densfml_residual: f64,
    pub profile_hs_change: f64,
    pub mu_hs_change: f64,
    pub containment_fraction: f64,
}

impl DiagnosticsRecord {
    pub const COLUMNS: [&'static str; 14] = [
        "t",
        "rho_l1",
        "rho_l2",
        "rho_linf",
        "v_linf",
        "grad_v_linf",
        "hs",
        "h2",
        "a2",
        "d_sup",
        "densfml_residual",
        "profile_hs_change",
        "mu_hs_change",
        "containment_fraction",
    ];

    pub fn values(&self) -> [f64; 14] {
        [
            self.t,
            self.rho_l1,
            self.rho_l2,
            self.rho_linf,
            self.v_linf,
            self.grad_v_linf,
            self.hs,
            self.h2,
            self.a2,
            self.d_sup,
            self.densfml_residual,
            self.profile_hs_change,
            self.mu_hs_change,
            self.containment_fraction,
        ]
    }

    pub fn from_values(v: [f64; 14]) -> Self {
        DiagnosticsRecord {
            t: v[0],
            rho_l1: v[1],
            rho_l2: v[2],
            rho_linf: v[3],
            v_linf: v[4],
            grad_v_linf: v[5],
            hs: v[6],
            h2: v[7],
            a2: v[8],
            d_sup: v[9],
            densfml_residual: v[10],
            profile_hs_change: v[11],
            mu_hs_change: v[12],
            containment_fraction: v[13],
        }
    }
}

/// HS changes of both profiles between consecutive anchor times.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DyadicChange {
    pub from: f64,
    pub to: f64,
    /// `‖ν(to) - ν(from)‖_HS`
    pub modified: f64,
    /// `‖μ(to) - μ(from)‖_HS`
    pub unmodified: f64,
}

type RecordHook<'a> = Box<dyn FnMut(&DiagnosticsRecord, &OrbitalEnsemble, &PhaseState) -> Result<()> + 'a>;

/// Observer that accumulates the phase every step and evaluates a
/// [`DiagnosticsRecord`] at every output time.
pub struct Monitor<'a> {
    solver: Option<&'a CoulombSolver>,
    sign: f64,
    phase: PhaseState,
    spectral: Option<CoulombSolver>,
    refresh_every: usize,
    cached_g: Option<Vec<f64>>,
    since_refresh: usize,
    prev_modified: ProfileEnsemble,
    prev_unmodified: ProfileEnsemble,
    records: Vec<DiagnosticsRecord>,
    history: PhaseHistory,
    anchors: Vec<f64>,
    anchor_profiles: Option<(f64, ProfileEnsemble, ProfileEnsemble)>,
    dyadic: Vec<DyadicChange>,
    norm_gap: f64,
    hook: Option<RecordHook<'a>>,
}

impl std::fmt::Debug for Monitor<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Monitor")
            .field("t", &self.phase.time())
            .field("records", &self.records.len())
            .finish()
    }
}

impl<'a> Monitor<'a> {
    /// `solver` computes the potential of recorded states (`None` for free
    /// flow); `phase` must be synchronized with `start`.
    pub fn new(
        start: &OrbitalEnsemble,
        solver: Option<&'a CoulombSolver>,
        phase: PhaseState,
        refresh_every: usize,
    ) -> Result<Self> {
        let prev_modified = modified_profile(start, &phase)?;
        Ok(Monitor {
            solver,
            sign: start.interaction().sign(),
            phase,
            spectral: None,
            refresh_every: refresh_every.max(1),
            cached_g: None,
            since_refresh: 0,
            prev_modified,
            prev_unmodified: unmodified_profile(start),
            records: Vec::new(),
            history: PhaseHistory::default(),
            anchors: Vec::new(),
            anchor_profiles: None,
            dyadic: Vec::new(),
            norm_gap: 0.0,
            hook: None,
        })
    }

    /// Record times at which profiles are kept to measure
    /// `‖ν(b) - ν(a)‖` between consecutive anchors `a < b`.
    pub fn with_anchors(mut self, anchors: &[f64]) -> Self {
        self.anchors = anchors.to_vec();
        self
    }

    pub fn dyadic_changes(&self) -> &[DyadicChange] {
        &self.dyadic
    }

    /// Largest `|‖ν‖_HS - ‖γ‖_HS| / ‖γ‖_HS` seen at any record.
    pub fn profile_norm_gap(&self) -> f64 {
        self.norm_gap
    }

    pub fn with_hook(
        mut self,
        hook: impl FnMut(&DiagnosticsRecord, &OrbitalEnsemble, &PhaseState) -> Result<()> + 'a,
    ) -> Self {
        self.hook = Some(Box::new(hook));
        self
    }

    pub fn phase(&self) -> &PhaseState {
        &self.phase
    }

    pub fn records(&self) -> &[DiagnosticsRecord] {
        &self.records
    }

    pub fn history(&self) -> &PhaseHistory {
        &self.history
    }

    pub fn into_parts(self) -> (Vec<DiagnosticsRecord>, PhaseHistory, PhaseState) {
        (self.records, self.history, self.phase)
    }

    /// `G = |·|⁻¹ ⋆ D` at the samples, recomputed every `refresh_every` steps
    /// and after every record, so a run restarted from a record reproduces
    /// the uninterrupted one.
    fn asymptotic_source(&mut self, e: &OrbitalEnsemble) -> Result<Vec<f64>> {
        if self.cached_g.is_none() || self.since_refresh >= self.refresh_every {
            let grid = *e.grid();
            let solver = self.spectral.get_or_insert_with(|| CoulombSolver::for_spectrum(&grid));
            let g = solver.coulomb_transform(&antidiagonal_spectrum(e))?;
            let lattice = self.phase.lattice;
            let samples = (0..lattice.len())
                .map(|p| g.at_modes(lattice.modes(p)).expect("sample inside lattice"))
                .collect();
            self.cached_g = Some(samples);
            self.since_refresh = 0;
        }
        self.since_refresh += 1;
        Ok(self.cached_g.clone().expect("cached source"))
    }

    /// One step of phase accumulation.
    pub fn accumulate_phase(&mut self, step: &StepView<'_>) -> Result<()> {
        let Some(v) = step.potential else {
            self.phase.check_sync(step.t_start)?;
            self.phase.t = step.t_start + step.dt;
            return Ok(());
        };
        let t1 = self.phase.t1;
        if step.t_mid() <= t1 {
            return self.phase.accumulate_direct(v, step.t_start, step.dt);
        }
        let g = self.asymptotic_source(step.ensemble)?;
        if step.t_mid() <= 2.0 * t1 {
            self.phase.record_overlap(v, &g, self.sign, step.t_start, step.dt);
        }
        self.phase.accumulate_asymptotic(&g, self.sign, step.t_start, step.dt)
    }

    /// Evaluates every diagnostic for the synchronized ensemble `e`.
    pub fn diagnostics(&mut self, e: &OrbitalEnsemble) -> Result<DiagnosticsRecord> {
        let t = e.time();
        let pos = e.orbitals_in(Space::Position);
        let rho = density_of(&pos, e.occupations());
        drop(pos);
        let (v_linf, grad_v_linf) = match self.solver {
            Some(s) => potential_decay_norms(&s.hartree_potential(&rho, self.sign)?)?,
            None => (0.0, 0.0),
        };
        let d = antidiagonal_spectrum(e);
        let densfml_residual = if t >= 1.0 { residual_from(&rho, &d, t) } else { f64::NAN };

        let modified = modified_profile(e, &self.phase)?;
        let unmodified = unmodified_profile(e);
        let profile_hs_change = profile_hs_distance(&modified, &self.prev_modified)?;
        let mu_hs_change = profile_hs_distance(&unmodified, &self.prev_unmodified)?;
        let hs = hs_norm(e)?;
        let nu = gram_weighted_norm(&modified.orbitals, &modified.occupations)?.value;
        self.norm_gap = self.norm_gap.max((nu - hs).abs() / hs);

        if self.anchors.iter().any(|a| (a - t).abs() <= SYNC_TOLERANCE * t.max(1.0)) {
            if let Some((from, m, u)) = &self.anchor_profiles {
                self.dyadic.push(DyadicChange {
                    from: *from,
                    to: t,
                    modified: profile_hs_distance(&modified, m)?,
                    unmodified: profile_hs_distance(&unmodified, u)?,
                });
            }
            self.anchor_profiles = Some((t, modified.clone(), unmodified.clone()));
        }
        self.prev_modified = modified;
        self.prev_unmodified = unmodified;

        Ok(DiagnosticsRecord {
            t,
            rho_l1: lp_norm(&rho, Lp::L1),
            rho_l2: lp_norm(&rho, Lp::L2),
            rho_linf: lp_norm(&rho, Lp::Inf),
            v_linf,
            grad_v_linf,
            hs,
            h2: h2_norm(e)?,
            a2: a2_norm(e)?,
            d_sup: d.sup(),
            densfml_residual,
            profile_hs_change,
            mu_hs_change,
            containment_fraction: containment_fraction(&rho),
        })
    }
}

impl Observer for Monitor<'_> {
    fn on_step(&mut self, step: &StepView<'_>) -> Result<()> {
        self.accumulate_phase(step)
    }

    fn on_record(&mut self, e: &OrbitalEnsemble) -> Result<()> {
        let rec = self.diagnostics(e)?;
        self.history.push(&self.phase);
        if let Some(hook) = self.hook.as_mut() {
            hook(&rec, e, &self.phase)?;
        }
        self.records.push(rec);
        self.cached_g = None;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coulomb::CoulombMethod;
    use crate::ensemble::Interaction;
    use crate::oracle::{gaussian_ensemble, GaussianSpec};
    use crate::propagator::{evolve, Propagator, StepConfig};

    fn specs() -> Vec<GaussianSpec> {
        vec![
            GaussianSpec { occupation: 0.01, center: [0.0; 3], width: 1.0, boost: [0.0; 3] },
            GaussianSpec { occupation: 0.005, center: [1.0, 0.0, 0.0], width: 1.0, boost: [0.0, 0.3, 0.0] },
        ]
    }

    #[test]
    fn sample_lattice_layout() {
        let grid = GridSpec::new(16, 10.0).unwrap();
        let lat = SampleLattice::new(&grid, 2);
        assert_eq!(lat.side(), 5);
        assert_eq!(lat.modes(0), [-4, -4, -4]);
        assert_eq!(lat.modes(lat.len() - 1), [4, 4, 4]);
        // |k|_∞ ≤ k_max / 2 on every sample
        for p in 0..lat.len() {
            let k = lat.wavevector(&grid, p);
            assert!(k.iter().all(|c| c.abs() <= 0.5 * grid.k_max() + 1e-12));
        }
        let odd = SampleLattice::new(&GridSpec::new(12, 10.0).unwrap(), 2);
        assert_eq!(odd.modes(0)[0], -2);
        let coarse = SampleLattice::new(&GridSpec::new(32, 10.0).unwrap(), 4);
        assert_eq!((coarse.side(), coarse.modes(0)[0], coarse.modes(1)[2]), (5, -8, -4));
    }

    #[test]
    fn constant_potential_gives_linear_phase() {
        let grid = GridSpec::new(16, 20.0).unwrap();
        let mut ps = PhaseState::new(grid, 0.0, 1.0);
        let v = RealField::from_fn(grid, |_| 0.3);
        for k in 0..10 {
            ps.accumulate_direct(&v, k as f64 * 0.1, 0.1).unwrap();
        }
        for &p in ps.values() {
            assert!((p - 0.3).abs() < 1e-14);
        }
        assert!(matches!(
            ps.accumulate_direct(&v, 3.0, 0.1),
            Err(Error::PhaseOutOfSync { .. })
        ));
    }

    #[test]
    fn samples_leaving_the_box_are_invalidated() {
        let grid = GridSpec::new(16, 8.0).unwrap();
        let mut ps = PhaseState::new(grid, 0.0, 10.0);
        let v = RealField::from_fn(grid, |_| 1.0);
        for k in 0..20 {
            ps.accumulate_direct(&v, k as f64 * 0.1, 0.1).unwrap();
        }
        assert!(ps.invalid_count() > 0);
        // the k = 0 sample never leaves
        let centre = ps.lattice().len() / 2;
        assert_eq!(ps.lattice().modes(centre), [0, 0, 0]);
        assert!(ps.validity()[centre]);
        assert!((ps.values()[centre] - 2.0).abs() < 1e-12);
        let e = gaussian_ensemble(&grid, &specs(), Interaction::Repulsive).unwrap();
        let mut e = e;
        e.set_time(2.0);
        assert!(matches!(modified_profile(&e, &ps), Err(Error::TooManyInvalidSamples { .. })));
    }

    #[test]
    fn zero_phase_profile_is_the_free_profile() {
        let grid = GridSpec::new(16, 12.0).unwrap();
        let mut e = gaussian_ensemble(&grid, &specs(), Interaction::Repulsive).unwrap();
        e.set_time(0.7);
        let ps = PhaseState::new(grid, 0.7, 1.0);
        let a = modified_profile(&e, &ps).unwrap();
        let b = unmodified_profile(&e);
        assert!(profile_hs_distance(&a, &b).unwrap() < 1e-10);
        assert!(profile_hs_distance(&a, &a).unwrap() < 1e-10);
        let late = PhaseState::new(grid, 0.9, 1.0);
        assert!(modified_profile(&e, &late).is_err());
    }

    #[test]
    fn lattice_phase_interpolates_samples() {
        let grid = GridSpec::new(16, 12.0).unwrap();
        let mut ps = PhaseState::new(grid, 0.0, 1.0);
        let lat = *ps.lattice();
        // Ψ linear in k is reproduced exactly inside the sample box
        for p in 0..lat.len() {
            let m = lat.modes(p);
            ps.psi[p] = 0.5 * m[0] as f64 - 0.25 * m[1] as f64 + m[2] as f64;
        }
        let full = ps.on_lattice();
        for p in 0..grid.len() {
            let [a, b, c] = grid.unflat(p);
            let m = [grid.mode(a), grid.mode(b), grid.mode(c)];
            if m.iter().all(|x| x.abs() <= 4) {
                let expect = 0.5 * m[0] as f64 - 0.25 * m[1] as f64 + m[2] as f64;
                assert!((full[p] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fit_recovers_power_law() {
        let series: Vec<(f64, f64)> = (1..=10).map(|i| (i as f64, 3.0 * (i as f64).powf(-1.5))).collect();
        let f = decay_fit(&series, (1.0, 10.0)).unwrap();
        assert!((f.exponent + 1.5).abs() < 1e-12);
        assert!((f.intercept - 3f64.ln()).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
        assert_eq!(f.points, 10);
        let flat: Vec<(f64, f64)> = (1..=6).map(|i| (i as f64, 0.02)).collect();
        let f = decay_fit(&flat, (0.0, 10.0)).unwrap();
        assert!(f.exponent.abs() < 1e-12 && f.r2 == 1.0);
        let noisy: Vec<(f64, f64)> = (1..=6).map(|i| (i as f64, 0.02 * (1.0 + 1e-12 * (i % 2) as f64))).collect();
        assert_eq!(decay_fit(&noisy, (0.0, 10.0)).unwrap().r2, 1.0);
        let drift: Vec<(f64, f64)> = (1..=6).map(|i| (i as f64, 0.02 * (1.0 + 1e-6 * (i % 2) as f64))).collect();
        assert!(decay_fit(&drift, (0.0, 10.0)).unwrap().r2 < 0.5);
        assert!(matches!(decay_fit(&series, (1.0, 3.0)), Err(Error::TooFewPoints { .. })));
        let bad = vec![(1.0, 1.0), (2.0, 0.0), (3.0, 1.0), (4.0, 1.0), (5.0, 1.0)];
        assert!(matches!(decay_fit(&bad, (1.0, 5.0)), Err(Error::NonPositive { .. })));
    }

    #[test]
    fn phase_fit_recovers_log_law() {
        let mut h = PhaseHistory::default();
        for i in 1..=8 {
            let t = i as f64;
            h.times.push(t);
            h.psi.push(vec![0.2 * t.ln() + 1.0, -0.1 * t.ln()]);
            h.valid.push(vec![true, i < 5]);
        }
        let fit = fit_phase_parameters(&h, (2.0, 8.0)).unwrap();
        assert!((fit.g[0].unwrap() - 0.2).abs() < 1e-12);
        assert!((fit.h[0].unwrap() - 1.0).abs() < 1e-12);
        assert!(fit.g[1].is_none());
        h.truncate_after(4.0);
        assert_eq!(h.times.len(), 4);
        assert!(fit_phase_parameters(&h, (2.0, 8.0)).is_err());
    }

    #[test]
    fn residual_requires_late_time() {
        let grid = GridSpec::new(16, 12.0).unwrap();
        let e = gaussian_ensemble(&grid, &specs(), Interaction::Repulsive).unwrap();
        assert!(matches!(density_formula_residual(&e), Err(Error::EarlyTime(_))));
    }

    #[test]
    fn residual_of_free_gaussian_matches_closed_form() {
        // ρ(t,x) for a centered unit Gaussian versus (4πt)⁻³ D(x/2t):
        // the exact difference is known in closed form
        let grid = GridSpec::new(96, 48.0).unwrap();
        let spec = [GaussianSpec { occupation: 1.0, center: [0.0; 3], width: 1.0, boost: [0.0; 3] }];
        let e0 = gaussian_ensemble(&grid, &spec, Interaction::Free).unwrap();
        let p = Propagator::new(grid, Interaction::Free, StepConfig::new(0.5)).unwrap();
        let e = evolve(e0, &p, &[3.0], &mut ()).unwrap();
        let r = density_formula_residual(&e).unwrap();
        let t: f64 = 3.0;
        // ρ = π^{-3/2} (1+4t²)^{-3/2} e^{-r²/(1+4t²)}, D = 8π^{3/2} e^{-k²}
        let exact = (0..2000)
            .map(|i| {
                let x = i as f64 * 0.01;
                let rho = PI.powf(-1.5) * (1.0 + 4.0 * t * t).powf(-1.5) * (-x * x / (1.0 + 4.0 * t * t)).exp();
                let d = 8.0 * PI.powf(1.5) * (-(x / (2.0 * t)).powi(2)).exp();
                (rho - d / (4.0 * PI * t).powi(3)).abs()
            })
            .fold(0.0, f64::max);
        assert!((r - exact).abs() < 0.02 * exact, "{r} vs {exact}");
    }

    #[test]
    fn monitor_records_and_tracks_phase() {
        let grid = GridSpec::new(16, 16.0).unwrap();
        let e0 = gaussian_ensemble(&grid, &specs(), Interaction::Repulsive).unwrap();
        let p = Propagator::new(
            grid,
            Interaction::Repulsive,
            StepConfig::new(0.1).with_method(CoulombMethod::FreespaceDoubling),
        )
        .unwrap();
        let mut rows = 0;
        let mut monitor = Monitor::new(&e0, p.solver(), PhaseState::new(grid, 0.0, 1.0), 1)
            .unwrap()
            .with_anchors(&[0.5, 1.0, 2.0])
            .with_hook(|_, _, _| {
                rows += 1;
                Ok(())
            });
        let e = evolve(e0.clone(), &p, &[0.0, 0.5, 1.0, 1.5, 2.0, 3.0], &mut monitor).unwrap();
        assert!(monitor.profile_norm_gap() < 1e-12);
        let dy = monitor.dyadic_changes().to_vec();
        assert_eq!(dy.len(), 2);
        assert_eq!((dy[0].from, dy[0].to, dy[1].to), (0.5, 1.0, 2.0));
        let (records, history, phase) = monitor.into_parts();
        assert_eq!(rows, 6);
        assert_eq!(records.len(), 6);
        assert_eq!(history.times.len(), 6);
        assert!((phase.time() - e.time()).abs() < 1e-12);
        assert!(records[0].profile_hs_change <= 1e-14 * records[0].hs);
        assert!(records[0].densfml_residual.is_nan());
        assert!(records[2].densfml_residual.is_finite());
        // repulsive: phase grows at k = 0
        let centre = phase.lattice().len() / 2;
        assert!(phase.values()[centre] > 0.0);
        let trace = e0.trace();
        for r in &records {
            assert!((r.rho_l1 - trace).abs() < 1e-10 * trace);
            assert!(r.hs > 0.0 && r.h2 >= r.hs && r.a2 >= r.hs);
        }
        assert!(phase.overlap_discrepancy().is_some());
    }

    #[test]
    fn extract_g_has_interaction_sign() {
        let grid = GridSpec::new(16, 16.0).unwrap();
        let e = gaussian_ensemble(&grid, &specs(), Interaction::Repulsive).unwrap();
        let solver = CoulombSolver::for_spectrum(&grid);
        let d = antidiagonal_spectrum(&e);
        let plus = extract_g(&d, 1.0, &solver).unwrap();
        let minus = extract_g(&d, -1.0, &solver).unwrap();
        assert!(plus.values().iter().all(|v| *v > 0.0));
        for (a, b) in plus.values().iter().zip(minus.values()) {
            assert!((a + b).abs() < 1e-15);
        }
    }
}
