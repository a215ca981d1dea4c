use hartree::config::{OutputTimes, RunConfig};
use hartree::ensemble::{hs_distance, Interaction, OrbitalEnsemble};
use hartree::grid::{GridSpec, ScalarField, Space};
use hartree::propagator::steps_in;
use hartree::runner::{read_csv, read_history, write_csv, write_history};
use hartree::scattering::{decay_fit, DiagnosticsRecord, PhaseHistory, PhaseState};
use hartree::snapshot::Snapshot;
use num_complex::Complex64;
use proptest::prelude::*;

fn ensemble_from(values: &[(f64, f64)], occupations: &[f64], sign: i64) -> OrbitalEnsemble {
    let grid = GridSpec::new(4, 3.0).unwrap();
    let orbitals = occupations
        .iter()
        .enumerate()
        .map(|(j, _)| {
            let v = (0..grid.len())
                .map(|p| {
                    let (a, b) = values[(p + 17 * j) % values.len()];
                    Complex64::new(a, b)
                })
                .collect();
            ScalarField::from_values(grid, Space::Position, v).unwrap()
        })
        .collect();
    OrbitalEnsemble::new(0.5, occupations.to_vec(), orbitals, Interaction::from_sign(sign).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn snapshot_round_trip_is_byte_exact(
        values in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 64),
        occupations in prop::collection::vec(1e-4f64..1.0, 1..4),
        sign in -1i64..=1,
        psi in -5.0f64..5.0,
        with_phase in any::<bool>(),
    ) {
        let e = ensemble_from(&values, &occupations, sign);
        let mut snap = Snapshot::new(e.clone());
        if with_phase {
            let mut p = PhaseState::with_stride(*e.grid(), 0.25, 1.0, 1);
            let g = vec![psi; p.lattice().len()];
            p.accumulate_asymptotic(&g, 1.0, 0.25, 0.25).unwrap();
            snap = snap.with_phase(p);
        }
        let bytes = snap.to_bytes();
        let back = Snapshot::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.ensemble.occupations(), e.occupations());
    }

    #[test]
    fn hs_distance_is_a_symmetric_seminorm(
        a in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 64),
        b in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 64),
        la in prop::collection::vec(1e-3f64..1.0, 1..4),
        lb in prop::collection::vec(1e-3f64..1.0, 1..4),
    ) {
        let x = ensemble_from(&a, &la, 1);
        let y = ensemble_from(&b, &lb, 1);
        let dxy = hs_distance(x.orbitals(), x.occupations(), y.orbitals(), y.occupations()).unwrap();
        let dyx = hs_distance(y.orbitals(), y.occupations(), x.orbitals(), x.occupations()).unwrap();
        let dxx = hs_distance(x.orbitals(), x.occupations(), x.orbitals(), x.occupations()).unwrap();
        prop_assert!(dxy >= 0.0);
        prop_assert!((dxy - dyx).abs() <= 1e-12 * dxy.max(1.0));
        let nx = hartree::ensemble::hs_norm(&x).unwrap();
        prop_assert!(dxx <= 1e-6 * nx);
    }

    #[test]
    fn log_schedule_lies_on_the_step_lattice(
        dt_index in 0usize..4,
        steps in 1usize..400,
        count in 1usize..60,
        t_min in 0.01f64..1.0,
    ) {
        let dt = [0.01, 0.02, 0.05, 0.1][dt_index];
        let mut cfg = RunConfig::default_experiment();
        cfg.time.dt = dt;
        cfg.time.t_end = steps as f64 * dt;
        cfg.time.output = OutputTimes::LogSpaced(count);
        cfg.time.t_min = t_min;
        let s = cfg.schedule(0.0);
        prop_assert!(!s.is_empty());
        prop_assert!(s.windows(2).all(|w| w[1] > w[0]));
        prop_assert!(s.iter().all(|&t| t > 0.0 && t <= cfg.time.t_end + 1e-9 && steps_in(t, dt).is_some()));
        prop_assert!((s.last().unwrap() - cfg.time.t_end).abs() < 1e-9);
    }

    #[test]
    fn decay_fit_recovers_power_laws(exponent in -4.0f64..1.0, scale in 1e-6f64..1e3) {
        let series: Vec<(f64, f64)> = (0..20).map(|i| {
            let t = 1.5f64.powi(i);
            (t, scale * t.powf(exponent))
        }).collect();
        let fit = decay_fit(&series, (2.0, 20.0)).unwrap();
        prop_assert!((fit.exponent - exponent).abs() < 1e-9);
        prop_assert!((fit.intercept - scale.ln()).abs() < 1e-8);
    }

    #[test]
    fn csv_round_trip_is_exact(rows in prop::collection::vec(prop::array::uniform14(-1e3f64..1e3), 0..6)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let records: Vec<DiagnosticsRecord> = rows.iter().map(|r| DiagnosticsRecord::from_values(*r)).collect();
        write_csv(&path, &records).unwrap();
        prop_assert_eq!(read_csv(&path).unwrap(), records);
    }

    #[test]
    fn history_round_trip_is_exact(
        rows in prop::collection::vec(prop::collection::vec((-10.0f64..10.0, any::<bool>()), 5), 0..5),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.bin");
        let mut h = PhaseHistory::default();
        for (i, row) in rows.iter().enumerate() {
            h.times.push(i as f64 * 0.5);
            h.psi.push(row.iter().map(|r| r.0).collect());
            h.valid.push(row.iter().map(|r| r.1).collect());
        }
        write_history(&path, &h).unwrap();
        prop_assert_eq!(read_history(&path).unwrap(), h);
    }
}
