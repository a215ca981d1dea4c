//! C interface to the `hartree` simulator.
//!
//! Every function returns a [`HartreeStatus`]. On failure the message is kept
//! per thread and can be fetched with [`hartree_last_error`]. Handles are
//! opaque and must be released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use hartree::ensemble::{density, Interaction, OrbitalEnsemble};
use hartree::grid::{lp_norm, GridSpec, Lp};
use hartree::oracle::{gaussian_ensemble, GaussianSpec};
use hartree::propagator::{evolve, Propagator, StepConfig};
use hartree::scattering::decay_fit;
use hartree::snapshot::Snapshot;
use hartree::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HartreeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NonFinite = 3,
    Io = 4,
    Format = 5,
    Panic = 6,
}

/// Power-law fit `y ≈ exp(intercept) t^exponent`.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct HartreeFit {
    pub exponent: f64,
    pub intercept: f64,
    pub r2: f64,
    pub points: usize,
}

/// Finite-rank density operator.
pub struct HartreeEnsemble(OrbitalEnsemble);

/// Split-step propagator bound to a grid and interaction sign.
pub struct HartreePropagator(Propagator);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> HartreeStatus {
    match err {
        Error::NonFinite { .. } => HartreeStatus::NonFinite,
        Error::Io { .. } => HartreeStatus::Io,
        Error::Snapshot(_) | Error::Schema(_) => HartreeStatus::Format,
        _ => HartreeStatus::InvalidArgument,
    }
}

enum Failure {
    Null(&'static str),
    Arg(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> HartreeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            HartreeStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            HartreeStatus::NullPointer
        }
        Ok(Err(Failure::Arg(msg))) => {
            set_error(msg);
            HartreeStatus::InvalidArgument
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            HartreeStatus::Panic
        }
    }
}

unsafe fn get<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn get_mut<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn array<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn path<'a>(p: *const c_char) -> Result<&'a Path, Failure> {
    if p.is_null() {
        return Err(Failure::Null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| Failure::Arg("path is not valid UTF-8".into()))
}

fn interaction(sign: i32) -> Result<Interaction, Failure> {
    Ok(Interaction::from_sign(sign as i64)?)
}

/// Last error message on this thread, or NULL. Free with [`hartree_string_free`].
#[no_mangle]
pub extern "C" fn hartree_last_error() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null_mut(), |s| s.clone().into_raw()))
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn hartree_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hartree_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds an ensemble of `count` Gaussian orbitals on an `n`^3 grid of side
/// `length`. `centers` and `boosts` hold `3 * count` values and may be NULL
/// (all zero); `widths` may be NULL (all one). `sign` is 1, 0 or -1.
///
/// # Safety
/// Array arguments must be valid for the stated lengths; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hartree_ensemble_gaussians(
    n: usize,
    length: f64,
    sign: i32,
    count: usize,
    occupations: *const f64,
    centers: *const f64,
    widths: *const f64,
    boosts: *const f64,
    out: *mut *mut HartreeEnsemble,
) -> HartreeStatus {
    guard(|| {
        let out = get_mut(out, "out")?;
        *out = ptr::null_mut();
        if count == 0 {
            return Err(Failure::Arg("count must be positive".into()));
        }
        let occ = array(occupations, count, "occupations")?;
        let centers = array(centers, 3 * count, "centers").ok();
        let boosts = array(boosts, 3 * count, "boosts").ok();
        let widths = array(widths, count, "widths").ok();
        let triple = |a: Option<&[f64]>, j: usize| a.map_or([0.0; 3], |a| [a[3 * j], a[3 * j + 1], a[3 * j + 2]]);
        let specs: Vec<GaussianSpec> = (0..count)
            .map(|j| GaussianSpec {
                occupation: occ[j],
                center: triple(centers, j),
                width: widths.map_or(1.0, |w| w[j]),
                boost: triple(boosts, j),
            })
            .collect();
        let grid = GridSpec::new(n, length)?;
        let e = gaussian_ensemble(&grid, &specs, interaction(sign)?)?;
        *out = Box::into_raw(Box::new(HartreeEnsemble(e)));
        Ok(())
    })
}

/// Loads an ensemble from a snapshot file.
///
/// # Safety
/// `file` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hartree_ensemble_load(file: *const c_char, out: *mut *mut HartreeEnsemble) -> HartreeStatus {
    guard(|| {
        let out = get_mut(out, "out")?;
        *out = ptr::null_mut();
        let snap = Snapshot::load(path(file)?)?;
        *out = Box::into_raw(Box::new(HartreeEnsemble(snap.ensemble)));
        Ok(())
    })
}

/// Writes an ensemble to a snapshot file.
///
/// # Safety
/// `e` must be a live handle; `file` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hartree_ensemble_save(e: *const HartreeEnsemble, file: *const c_char) -> HartreeStatus {
    guard(|| {
        let e = get(e, "ensemble")?;
        Snapshot::new(e.0.clone()).save(path(file)?)?;
        Ok(())
    })
}

/// Copies an ensemble.
///
/// # Safety
/// `e` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hartree_ensemble_clone(e: *const HartreeEnsemble, out: *mut *mut HartreeEnsemble) -> HartreeStatus {
    guard(|| {
        let out = get_mut(out, "out")?;
        *out = Box::into_raw(Box::new(HartreeEnsemble(get(e, "ensemble")?.0.clone())));
        Ok(())
    })
}

/// Releases an ensemble. NULL is ignored.
///
/// # Safety
/// `e` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn hartree_ensemble_free(e: *mut HartreeEnsemble) {
    if !e.is_null() {
        drop(Box::from_raw(e));
    }
}

/// Time, rank and trace of an ensemble. Any output pointer may be NULL.
///
/// # Safety
/// `e` must be a live handle; non-NULL outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn hartree_ensemble_info(
    e: *const HartreeEnsemble,
    time: *mut f64,
    rank: *mut usize,
    trace: *mut f64,
) -> HartreeStatus {
    guard(|| {
        let e = &get(e, "ensemble")?.0;
        if let Some(t) = time.as_mut() {
            *t = e.time();
        }
        if let Some(r) = rank.as_mut() {
            *r = e.rank();
        }
        if let Some(tr) = trace.as_mut() {
            *tr = e.trace();
        }
        Ok(())
    })
}

/// Writes the L1, L2 and L-infinity norms of the density into `out[0..3]`.
///
/// # Safety
/// `e` must be a live handle; `out` must hold three doubles.
#[no_mangle]
pub unsafe extern "C" fn hartree_density_norms(e: *const HartreeEnsemble, out: *mut f64) -> HartreeStatus {
    guard(|| {
        let e = &get(e, "ensemble")?.0;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let rho = density(e);
        let out = slice::from_raw_parts_mut(out, 3);
        for (o, p) in out.iter_mut().zip([Lp::L1, Lp::L2, Lp::Inf]) {
            *o = lp_norm(&rho, p);
        }
        Ok(())
    })
}

/// Creates a propagator with step `dt`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hartree_propagator_new(
    n: usize,
    length: f64,
    sign: i32,
    dt: f64,
    out: *mut *mut HartreePropagator,
) -> HartreeStatus {
    guard(|| {
        let out = get_mut(out, "out")?;
        *out = ptr::null_mut();
        let grid = GridSpec::new(n, length)?;
        let p = Propagator::new(grid, interaction(sign)?, StepConfig::new(dt))?;
        *out = Box::into_raw(Box::new(HartreePropagator(p)));
        Ok(())
    })
}

/// Releases a propagator. NULL is ignored.
///
/// # Safety
/// `p` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn hartree_propagator_free(p: *mut HartreePropagator) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Advances `e` in place to time `t`, which must lie on the step lattice.
/// On failure `e` is left unchanged.
///
/// # Safety
/// Both handles must be live and `e` not aliased.
#[no_mangle]
pub unsafe extern "C" fn hartree_propagator_advance(
    p: *const HartreePropagator,
    e: *mut HartreeEnsemble,
    t: f64,
) -> HartreeStatus {
    guard(|| {
        let p = &get(p, "propagator")?.0;
        let e = get_mut(e, "ensemble")?;
        if e.0.interaction() != p.interaction() {
            return Err(Failure::Arg("ensemble and propagator use different interactions".into()));
        }
        if !(t >= e.0.time()) {
            return Err(Failure::Arg(format!("target time {t} is before t = {}", e.0.time())));
        }
        if t > e.0.time() {
            e.0 = evolve(e.0.clone(), p, &[t], &mut ())?;
        }
        Ok(())
    })
}

/// Conserved energy of `e` under the propagator's interaction.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hartree_energy(
    p: *const HartreePropagator,
    e: *const HartreeEnsemble,
    out: *mut f64,
) -> HartreeStatus {
    guard(|| {
        let p = &get(p, "propagator")?.0;
        let e = &get(e, "ensemble")?.0;
        *get_mut(out, "out")? = p.energy(e)?;
        Ok(())
    })
}

/// Least-squares fit of `log values` against `log times` over `[t0, t1]`.
///
/// # Safety
/// `times` and `values` must hold `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hartree_decay_fit(
    times: *const f64,
    values: *const f64,
    len: usize,
    t0: f64,
    t1: f64,
    out: *mut HartreeFit,
) -> HartreeStatus {
    guard(|| {
        let out = get_mut(out, "out")?;
        let (ts, vs) = (array(times, len, "times")?, array(values, len, "values")?);
        let series: Vec<(f64, f64)> = ts.iter().copied().zip(vs.iter().copied()).collect();
        let f = decay_fit(&series, (t0, t1))?;
        *out = HartreeFit {
            exponent: f.exponent,
            intercept: f.intercept,
            r2: f.r2,
            points: f.points,
        };
        Ok(())
    })
}
