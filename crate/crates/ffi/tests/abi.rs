use std::ffi::{CStr, CString};
use std::ptr;

use hartree_ffi::*;

fn last_error() -> Option<String> {
    let p = hartree_last_error();
    if p.is_null() {
        return None;
    }
    let s = unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned();
    unsafe { hartree_string_free(p) };
    Some(s)
}

fn pair(n: usize, length: f64, sign: i32) -> *mut HartreeEnsemble {
    let occ = [0.012, 0.006];
    let centers = [0.0, 0.0, 0.0, 1.0, -0.5, 0.0];
    let boosts = [0.0, 0.0, 0.0, 0.15, 0.0, -0.1];
    let mut e = ptr::null_mut();
    let s = unsafe {
        hartree_ensemble_gaussians(n, length, sign, 2, occ.as_ptr(), centers.as_ptr(), ptr::null(), boosts.as_ptr(), &mut e)
    };
    assert_eq!(s, HartreeStatus::Ok, "{:?}", last_error());
    assert!(!e.is_null());
    e
}

#[test]
fn header_is_generated() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/hartree.h")).unwrap();
    for name in ["hartree_ensemble_gaussians", "hartree_propagator_advance", "hartree_decay_fit", "HARTREE_STATUS_OK"] {
        assert!(h.contains(name), "{name}");
    }
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(hartree_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn propagation_conserves_trace_and_energy() {
    let e = pair(16, 16.0, 1);
    let mut p = ptr::null_mut();
    unsafe {
        assert_eq!(hartree_propagator_new(16, 16.0, 1, 0.05, &mut p), HartreeStatus::Ok);
        let (mut t, mut rank, mut tr0, mut tr1, mut e0, mut e1) = (0.0, 0usize, 0.0, 0.0, 0.0, 0.0);
        assert_eq!(hartree_ensemble_info(e, ptr::null_mut(), &mut rank, &mut tr0), HartreeStatus::Ok);
        assert_eq!(rank, 2);
        assert!((tr0 - 0.018).abs() < 1e-3 * 0.018, "{tr0}");
        assert_eq!(hartree_energy(p, e, &mut e0), HartreeStatus::Ok);
        assert_eq!(hartree_propagator_advance(p, e, 1.0), HartreeStatus::Ok);
        assert_eq!(hartree_ensemble_info(e, &mut t, ptr::null_mut(), &mut tr1), HartreeStatus::Ok);
        assert_eq!(hartree_energy(p, e, &mut e1), HartreeStatus::Ok);
        assert!((t - 1.0).abs() < 1e-12);
        assert!((tr1 - tr0).abs() <= 1e-12 * tr0);
        assert!((e1 - e0).abs() <= 1e-3 * e0.abs(), "{e0} {e1}");

        let mut norms = [0.0; 3];
        assert_eq!(hartree_density_norms(e, norms.as_mut_ptr()), HartreeStatus::Ok);
        assert!((norms[0] - tr0).abs() <= 1e-10 * tr0);
        assert!(norms.iter().all(|v| *v > 0.0));

        assert_eq!(hartree_propagator_advance(p, e, 0.5), HartreeStatus::InvalidArgument);
        assert!(last_error().unwrap().contains("before"));
        hartree_propagator_free(p);
        hartree_ensemble_free(e);
    }
}

#[test]
fn mismatched_interaction_is_rejected() {
    let e = pair(8, 8.0, 0);
    let mut p = ptr::null_mut();
    unsafe {
        assert_eq!(hartree_propagator_new(8, 8.0, -1, 0.1, &mut p), HartreeStatus::Ok);
        assert_eq!(hartree_propagator_advance(p, e, 0.1), HartreeStatus::InvalidArgument);
        assert!(last_error().unwrap().contains("interaction"));
        hartree_propagator_free(p);
        hartree_ensemble_free(e);
    }
}

#[test]
fn snapshot_round_trip_through_handles() {
    let tmp = tempfile::tempdir().unwrap();
    let file = CString::new(tmp.path().join("e.hsc").to_str().unwrap()).unwrap();
    let e = pair(8, 8.0, 1);
    let mut back = ptr::null_mut();
    let mut copy = ptr::null_mut();
    unsafe {
        assert_eq!(hartree_ensemble_save(e, file.as_ptr()), HartreeStatus::Ok);
        assert_eq!(hartree_ensemble_load(file.as_ptr(), &mut back), HartreeStatus::Ok);
        assert_eq!(hartree_ensemble_clone(back, &mut copy), HartreeStatus::Ok);
        let (mut a, mut b) = ([0.0; 3], [0.0; 3]);
        hartree_density_norms(e, a.as_mut_ptr());
        hartree_density_norms(copy, b.as_mut_ptr());
        assert_eq!(a, b);
        for h in [e, back, copy] {
            hartree_ensemble_free(h);
        }
    }
}

#[test]
fn error_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let mut e = ptr::null_mut();
    let occ = [0.1];
    unsafe {
        let s = hartree_ensemble_gaussians(15, 8.0, 1, 1, occ.as_ptr(), ptr::null(), ptr::null(), ptr::null(), &mut e);
        assert_eq!(s, HartreeStatus::InvalidArgument);
        assert!(e.is_null());
        assert!(last_error().is_some());

        let s = hartree_ensemble_gaussians(8, 8.0, 2, 1, occ.as_ptr(), ptr::null(), ptr::null(), ptr::null(), &mut e);
        assert_eq!(s, HartreeStatus::InvalidArgument);

        let s = hartree_ensemble_gaussians(8, 8.0, 1, 1, ptr::null(), ptr::null(), ptr::null(), ptr::null(), &mut e);
        assert_eq!(s, HartreeStatus::NullPointer);

        let missing = CString::new(tmp.path().join("none.hsc").to_str().unwrap()).unwrap();
        assert_eq!(hartree_ensemble_load(missing.as_ptr(), &mut e), HartreeStatus::Io);

        let junk = tmp.path().join("junk.hsc");
        std::fs::write(&junk, b"not a snapshot").unwrap();
        let junk = CString::new(junk.to_str().unwrap()).unwrap();
        assert_eq!(hartree_ensemble_load(junk.as_ptr(), &mut e), HartreeStatus::Format);

        assert_eq!(hartree_ensemble_info(ptr::null(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut()), HartreeStatus::NullPointer);
        hartree_ensemble_free(ptr::null_mut());
        hartree_propagator_free(ptr::null_mut());
    }
    let good = pair(8, 8.0, 0);
    let mut n = [0.0; 3];
    assert_eq!(unsafe { hartree_density_norms(good, n.as_mut_ptr()) }, HartreeStatus::Ok);
    assert!(last_error().is_none());
    unsafe { hartree_ensemble_free(good) };
}

#[test]
fn decay_fit_recovers_exponent() {
    let times: Vec<f64> = (0..12).map(|i| 2.0 * 10f64.powf(i as f64 / 11.0)).collect();
    let values: Vec<f64> = times.iter().map(|t| 0.3 * t.powf(-1.5)).collect();
    let mut fit = HartreeFit::default();
    let s = unsafe { hartree_decay_fit(times.as_ptr(), values.as_ptr(), times.len(), 2.0, 20.0, &mut fit) };
    assert_eq!(s, HartreeStatus::Ok);
    assert!((fit.exponent + 1.5).abs() < 1e-12);
    assert!((fit.intercept - 0.3f64.ln()).abs() < 1e-12);
    assert_eq!(fit.points, 12);

    let bad = [1.0, -1.0, 1.0];
    let s = unsafe { hartree_decay_fit(times.as_ptr(), bad.as_ptr(), 3, 2.0, 20.0, &mut fit) };
    assert_eq!(s, HartreeStatus::InvalidArgument);
}
