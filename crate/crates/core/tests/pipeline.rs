//! End-to-end behavior of the simulation harness.

use std::collections::BTreeSet;

use dualtrack::beamform::BfMode;
use dualtrack::ckm::{build_ckm, grid_locations, JacobianSteps};
use dualtrack::env::{path_geometry, Scene, VehicleState};
use dualtrack::harness::metrics::ecdf;
use dualtrack::harness::{
    run_experiment, sweep, write_outputs, Regime, Scheme, SchemeSelection, SimConfig,
};
use dualtrack::Error;

fn short(runs: usize) -> SimConfig {
    let mut c = SimConfig::default();
    c.runs = runs;
    c.t_max = 1.0;
    c.blockage.static_window = None;
    c
}

#[test]
fn experiment_is_deterministic() {
    let cfg = short(2);
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a.records, b.records);
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_outputs(&a, da.path()).unwrap();
    write_outputs(&b, db.path()).unwrap();
    for f in ["slots.csv", "summary.json"] {
        assert_eq!(std::fs::read(da.path().join(f)).unwrap(), std::fs::read(db.path().join(f)).unwrap());
    }
}

#[test]
fn schemes_share_random_numbers() {
    let exp = run_experiment(&short(3)).unwrap();
    for run in 0..3 {
        let p: Vec<_> = exp.records.iter().filter(|r| r.run == run && r.scheme == Scheme::Proposed).collect();
        let b: Vec<_> = exp.records.iter().filter(|r| r.run == run && r.scheme == Scheme::Baseline).collect();
        assert_eq!(p.len(), b.len());
        for (x, y) in p.iter().zip(&b) {
            assert_eq!(x.truth, y.truth);
            assert_eq!(x.los_present, y.los_present);
            assert_eq!(
                x.paths.iter().map(|q| q.alive).collect::<Vec<_>>(),
                y.paths.iter().map(|q| q.alive).collect::<Vec<_>>()
            );
        }
    }
}

#[test]
fn every_slot_recorded_once() {
    let mut cfg = short(3);
    cfg.blockage.p_blk = 0.5;
    let exp = run_experiment(&cfg).unwrap();
    let n = cfg.n_slots();
    assert_eq!(n, 50);
    assert_eq!(exp.records.len(), n * 3 * 2);
    let keys: BTreeSet<_> = exp.records.iter().map(|r| (r.run, r.scheme, r.slot)).collect();
    assert_eq!(keys.len(), exp.records.len());
}

#[test]
fn scheme_selection_limits_records() {
    let mut cfg = short(1);
    cfg.scheme = SchemeSelection::Baseline;
    let exp = run_experiment(&cfg).unwrap();
    assert!(exp.records.iter().all(|r| r.scheme == Scheme::Baseline));
    assert_eq!(exp.summaries.len(), 1);
}

#[test]
fn bad_keys_are_rejected() {
    let mut cfg = SimConfig::default();
    match cfg.set("tpm.cpi", "0.5") {
        Err(Error::Config { key, .. }) => assert_eq!(key, "tpm.cpi"),
        other => panic!("{other:?}"),
    }
    match sweep(&cfg, "bf_mode", &[1.0]) {
        Err(Error::Config { key, .. }) => assert_eq!(key, "bf_mode"),
        other => panic!("{other:?}"),
    }
    assert!(SimConfig::parse("no equals sign here").is_err());
}

#[test]
fn config_file_round_trip() {
    let mut cfg = SimConfig::default();
    cfg.set("tpm.c_pi", "0.25").unwrap();
    cfg.set("blockage.window", "10-20").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sim.cfg");
    std::fs::write(&path, cfg.to_text()).unwrap();
    let back = SimConfig::load(&path).unwrap();
    assert_eq!(back.entries(), cfg.entries());
    assert_eq!(back.blockage.static_window, Some((10, 20)));
}

#[test]
fn single_value_sweep_matches_experiment() {
    let cfg = short(2);
    let pts = sweep(&cfg, "tpm.c_pi", &[cfg.c_pi]).unwrap();
    let exp = run_experiment(&cfg).unwrap();
    assert_eq!(pts.len(), 1);
    assert_eq!(pts[0].summaries, exp.summaries);
}

#[test]
fn single_noiseless_run_rmse_is_error_trace() {
    let mut cfg = short(1);
    cfg.noise_var = 0.0;
    cfg.scheme = SchemeSelection::Proposed;
    let exp = run_experiment(&cfg).unwrap();
    let s = exp.summary(Scheme::Proposed).unwrap();
    for r in &exp.records {
        assert!((s.rmse_per_slot[r.slot] - r.position_error).abs() <= 1e-12 * r.position_error.max(1.0));
    }
}

#[test]
fn cdf_axioms_hold_on_pooled_errors() {
    let exp = run_experiment(&short(2)).unwrap();
    let s = exp.summary(Scheme::Proposed).unwrap();
    for (i, p) in s.paths.iter().enumerate() {
        let errs: Vec<f64> = exp
            .records
            .iter()
            .filter(|r| r.scheme == Scheme::Proposed)
            .filter_map(|r| r.paths[i].error_deg())
            .collect();
        let zeros = errs.iter().filter(|&&e| e == 0.0).count() as f64 / errs.len() as f64;
        assert_eq!(p.cdf_at_zero, Some(zeros));
        let mut last = 0.0;
        for k in 0..=200 {
            let v = ecdf(&errs, k as f64 * 0.05);
            assert!(v >= last);
            last = v;
        }
        let max = errs.iter().cloned().fold(0.0, f64::max);
        assert_eq!(ecdf(&errs, max), 1.0);
        let pc = &p.percentiles_deg;
        assert!(pc["p50"] <= pc["p80"] && pc["p80"] <= pc["p90"] && pc["p90"] <= pc["p95"]);
    }
}

#[test]
fn static_window_switches_regimes() {
    let mut cfg = SimConfig::default();
    cfg.runs = 1;
    cfg.blockage.p_blk = 0.0;
    let exp = run_experiment(&cfg).unwrap();
    for r in exp.records.iter().filter(|r| (140..=175).contains(&r.slot)) {
        assert!(!r.los_present);
        match r.scheme {
            Scheme::Baseline => assert_eq!(r.regime, Regime::Predict),
            Scheme::Proposed => {
                if r.paths[1].observed {
                    assert_eq!(r.regime, Regime::Nlos);
                } else {
                    assert_eq!(r.regime, Regime::Predict);
                }
            }
        }
    }
    let nlos = exp
        .records
        .iter()
        .filter(|r| r.scheme == Scheme::Proposed && r.regime == Regime::Nlos)
        .count();
    assert!(nlos > 18, "{nlos}");
    assert!(exp
        .records
        .iter()
        .filter(|r| r.los_present)
        .all(|r| r.regime != Regime::Nlos));
}

#[test]
fn unblocked_run_converges_below_a_meter() {
    let mut cfg = SimConfig::default();
    cfg.runs = 2;
    cfg.blockage.p_blk = 0.0;
    cfg.blockage.static_window = None;
    let exp = run_experiment(&cfg).unwrap();
    for s in &exp.summaries {
        assert!(s.mean_rmse_over(100, 199) < 1.0, "{:?} {}", s.scheme, s.mean_rmse_over(100, 199));
    }
}

#[test]
fn single_beam_schemes_agree_without_blockage() {
    let mut cfg = SimConfig::default();
    cfg.runs = 3;
    cfg.blockage.p_blk = 0.0;
    cfg.blockage.static_window = None;
    cfg.bf_mode = BfMode::None;
    let exp = run_experiment(&cfg).unwrap();
    let mean = |scheme| {
        let e: Vec<f64> = exp
            .records
            .iter()
            .filter(|r| r.scheme == scheme && r.slot >= 50)
            .map(|r| r.paths[0].error_deg().unwrap())
            .collect();
        e.iter().sum::<f64>() / e.len() as f64
    };
    let (p, b) = (mean(Scheme::Proposed), mean(Scheme::Baseline));
    assert!(p <= 2.0 * b && b <= 2.0 * p, "proposed {p} baseline {b}");
}

#[test]
fn noiseless_single_path_hits_grid() {
    let mut cfg = short(1);
    cfg.noise_var = 0.0;
    cfg.blockage.p_blk = 0.0;
    cfg.scene.reflectors.clear();
    cfg.scene.ns = 1;
    let exp = run_experiment(&cfg).unwrap();
    let step = 180.0 / cfg.n_theta as f64;
    for r in exp.records.iter().filter(|r| r.slot >= 2) {
        let e = r.paths[0].error_deg().unwrap();
        assert!(e <= step, "{:?} slot {}: {e}", r.scheme, r.slot);
    }
}

#[test]
fn dense_map_jacobian_matches_scene() {
    let sc = Scene::default();
    let c = [3.0, 10.0];
    let locs = grid_locations((c[0] - 0.1, c[0] + 0.1), (c[1] - 0.1, c[1] + 0.1), 81, 81);
    let map = build_ckm(&sc, &locs, 4, 2.0).unwrap();
    let s = VehicleState::new(c[0] + 0.0013, c[1] - 0.0007, 10.0);
    let jac = map.jacobian(&s, JacobianSteps::default(), &[1, 2]);
    let analytic = |st: &VehicleState| {
        let g = path_geometry(&sc, st).unwrap();
        let mut v = Vec::new();
        v.extend(g.iter().map(|p| p.delay()));
        v.extend(g.iter().map(|p| p.doppler));
        v.extend(g.iter().map(|p| p.cos_aoa));
        v
    };
    let h = 1e-5;
    for col in 0..3 {
        let mut lo = s.to_array();
        let mut hi = s.to_array();
        lo[col] -= h;
        hi[col] += h;
        let (a, b) = (analytic(&VehicleState::from_array(lo)), analytic(&VehicleState::from_array(hi)));
        for row in 0..6 {
            let d = (b[row] - a[row]) / (2.0 * h);
            let scale = (0..3).map(|j| jac[(row, j)].abs()).fold(0.0, f64::max);
            assert!(
                (jac[(row, col)] - d).abs() <= 0.05 * d.abs().max(1e-3 * scale),
                "row {row} col {col}: {} vs {d}",
                jac[(row, col)]
            );
        }
    }
}
