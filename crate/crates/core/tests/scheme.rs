use std::sync::Arc;

use ddbrink_core::cavity::{cavity_bc, impulsive_start, nusselt, run_cavity, CavityConfig, WallData, NU_SH_COLUMNS};
use ddbrink_core::mesh::{build_structured_rect, BoundaryTag};
use ddbrink_core::mms::{run_mms, unit_params, MmsRun, PolynomialSolution};
use ddbrink_core::norms::EnergyMonitor;
use ddbrink_core::timestep::{
    run, BoundaryConditions, Flow, Forcing, Operators, SchemeParams, SimState, Spaces, Startup, Stepper,
};

#[test]
fn fields_inside_the_spaces_are_reproduced() {
    for theta in [0.5, 0.75, 1.0] {
        for eps in [0.0, 1.0] {
            let dt = 0.1;
            let cfg =
                MmsRun { cells: 3, t_end: 0.5, params: unit_params(theta, eps, dt), startup: Startup::TwoLevel { dt } };
            let e = run_mms(&cfg, Arc::new(PolynomialSolution)).unwrap();
            let worst = [e.linf.u_h1, e.linf.t_h1, e.linf.s_h1].into_iter().fold(0.0, f64::max);
            assert!(worst < 1e-9, "θ={theta} ε={eps}: {worst:e}");
            assert_eq!(e.steps, 5);
        }
    }
}

#[test]
fn square_cavity_matches_reference_nusselt() {
    // air-filled square at Ra = 1e3; reference average Nusselt number 1.118
    let (pr, ra) = (0.71, 1e3);
    let p = SchemeParams {
        dt: 0.01,
        nu: pr,
        eps: pr,
        gamma: 1.0,
        eps1: 1.0,
        dc: 1.0,
        eps2: 1.0,
        da_inv: 0.0,
        beta_t: ra * pr,
        beta_s: 0.0,
        g: [0.0, 1.0],
        theta: 1.0,
    };
    let mesh = Arc::new(build_structured_rect(16, 16, 1.0, 1.0).unwrap());
    let bc = cavity_bc(&mesh).unwrap();
    let spaces = Arc::new(Spaces::new(mesh).unwrap());
    let ops = Arc::new(Operators::assemble(&spaces).unwrap());
    let mut stepper = Stepper::new(p, spaces.clone(), ops, bc, Forcing::default()).unwrap();
    let out = run(&mut stepper, impulsive_start(&spaces), 1.5, None, |_| Flow::Continue).unwrap();
    let hot = nusselt(&spaces.scalar, &out.final_state.t_n, BoundaryTag::Left).unwrap().average;
    let cold = nusselt(&spaces.scalar, &out.final_state.t_n, BoundaryTag::Right).unwrap().average;
    assert!((hot / 1.118 - 1.0).abs() < 0.01, "Nu {hot}");
    assert!((hot - cold).abs() < 0.01 * hot, "hot {hot} cold {cold}");
}

#[test]
fn weak_buoyancy_gives_conduction_fluxes() {
    let cfg = CavityConfig {
        ra: 1e-3,
        nx: 5,
        ny: 8,
        dt: 0.02,
        t_end: 6.0,
        steady_window: 50,
        steady_tol: 1e-8,
        ..Default::default()
    };
    let run = run_cavity(&cfg, None).unwrap();
    let last = run.history.last().unwrap();
    for v in [last.nu_hot, last.nu_cold, last.sh_hot, last.sh_cold] {
        assert!((v - 1.0).abs() < 1e-3, "{last:?}");
    }
}

#[test]
fn equal_diffusivities_keep_scalars_identical() {
    let cfg = CavityConfig {
        ra: 1e5,
        le: 1.0,
        n_ratio: 1.0,
        nx: 8,
        ny: 12,
        dt: 1e-3,
        t_end: 0.05,
        steady_tol: 0.0,
        ..Default::default()
    };
    let run = run_cavity(&cfg, None).unwrap();
    assert_eq!(run.steps, 50);
    assert!(run.max_ts_difference <= 1e-8);
}

#[test]
fn rest_state_has_empty_ledger() {
    let mesh = Arc::new(build_structured_rect(3, 4, 1.0, 2.0).unwrap());
    let spaces = Arc::new(Spaces::new(mesh).unwrap());
    let ops = Arc::new(Operators::assemble(&spaces).unwrap());
    let p = SchemeParams { dt: 0.1, ..SchemeParams::default() };
    let mut stepper =
        Stepper::new(p, spaces.clone(), ops.clone(), BoundaryConditions::homogeneous(), Forcing::default()).unwrap();
    let mut monitor = EnergyMonitor::new(p, ops, (1.0, 2.0));
    run(&mut stepper, SimState::zeros(&spaces), 1.0, None, |s| {
        monitor.observe(s);
        Flow::Continue
    })
    .unwrap();
    assert_eq!(monitor.rows().len(), 11);
    assert_eq!(monitor.violations(), 0);
    assert!(monitor.rows().iter().all(|r| r.lhs_u() == 0.0 && r.lhs_t() == 0.0 && r.bound_u >= 0.0));
}

#[test]
fn homogeneous_walls_respect_energy_bounds() {
    for dt in [0.05, 0.5] {
        let cfg = CavityConfig {
            nx: 5,
            ny: 8,
            dt,
            t_end: 20.0 * dt,
            steady_tol: 0.0,
            ledger: true,
            walls: WallData::Homogeneous,
            ..Default::default()
        };
        let run = run_cavity(&cfg, None).unwrap();
        assert_eq!(run.ledger.len(), 21);
        for r in &run.ledger {
            assert!(!r.violated, "{r:?}");
            assert!(r.lhs_t() <= r.bound_t * (1.0 + 1e-10) + 1e-14);
        }
        // with zero wall data the scalars decay
        let first = run.ledger.first().unwrap();
        let last = run.ledger.last().unwrap();
        assert!(last.tt < first.tt && last.ss < first.ss);
    }
}

#[test]
fn cavity_run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = CavityConfig {
        nx: 4,
        ny: 6,
        dt: 0.01,
        t_end: 0.05,
        snapshot_every: Some(2),
        ledger: true,
        ..Default::default()
    };
    let run = run_cavity(&cfg, Some(dir.path())).unwrap();
    let names: Vec<String> =
        run.outputs.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    for expected in ["fields_0.vtk", "fields_2.vtk", "fields_4.vtk", "fields_5.vtk", "nu_sh.csv", "stability.csv"] {
        assert!(names.iter().any(|n| n == expected), "{expected} missing from {names:?}");
    }
    let csv = std::fs::read_to_string(dir.path().join("nu_sh.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), NU_SH_COLUMNS.join(","));
    assert_eq!(csv.lines().count(), 1 + 6);
    let vtk = std::fs::read_to_string(dir.path().join("fields_5.vtk")).unwrap();
    for field in ["velocity", "temperature", "concentration", "pressure"] {
        assert!(vtk.contains(field));
    }
}

#[test]
fn watchdog_stops_runaway_runs_and_keeps_history() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = CavityConfig { nx: 4, ny: 6, dt: 0.01, t_end: 0.1, watchdog_limit: 1e-6, ..Default::default() };
    let err = run_cavity(&cfg, Some(dir.path())).unwrap_err();
    assert!(err.is_divergence(), "{err}");
    assert!(dir.path().join("nu_sh.csv").exists());
}
