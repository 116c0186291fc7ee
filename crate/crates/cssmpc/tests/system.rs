use cssmpc::kernel;
use cssmpc::system::{
    allocate_risk, build_bicycle, discretize_zoh, validate_assumptions, BicycleParams, ConfigError, ContinuousLti,
    HalfspaceRow, HalfspaceSet, LtiSystem, Scenario, Segment, SystemError, TerminalMode, Track,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn table_params() -> BicycleParams {
    BicycleParams {
        m: 1653.0,
        iz: 2765.0,
        vx: 15.0,
        lf: 1.402,
        lr: 1.646,
        cf: 42_000.0,
        cr: 81_000.0,
    }
}

fn scenario_text(name: &str) -> String {
    std::fs::read_to_string(format!("{}/../../scenarios/{name}.toml", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

fn invalid(text: &str) -> ConfigError {
    Scenario::from_toml_str(text).unwrap_err()
}

#[test]
fn zoh_integrator() {
    let cont = ContinuousLti {
        ac: DMatrix::zeros(2, 2),
        bc: DMatrix::identity(2, 2),
        cc: None,
    };
    let sys = discretize_zoh(&cont, 0.5, DMatrix::identity(2, 2)).unwrap();
    assert!((&sys.a - DMatrix::<f64>::identity(2, 2)).amax() < 1e-15);
    assert!((&sys.b - DMatrix::<f64>::identity(2, 2) * 0.5).amax() < 1e-15);
}

#[test]
fn zoh_scalar_closed_form() {
    for (a, b, c, dt) in [(-1.3, 2.0, 0.7, 0.5), (0.4, -1.0, 3.0, 0.1), (-20.0, 0.5, -1.0, 0.25)] {
        let cont = ContinuousLti {
            ac: DMatrix::from_element(1, 1, a),
            bc: DMatrix::from_element(1, 1, b),
            cc: Some(DVector::from_element(1, c)),
        };
        let sys = discretize_zoh(&cont, dt, DMatrix::from_element(1, 1, 1.0)).unwrap();
        let ead = f64::exp(a * dt);
        assert!((sys.a[(0, 0)] - ead).abs() < 1e-14);
        assert!((sys.b[(0, 0)] - (ead - 1.0) / a * b).abs() < 1e-13);
        assert!((sys.c.unwrap()[0] - (ead - 1.0) / a * c).abs() < 1e-13);
    }
}

#[test]
fn zoh_rejects_nonpositive_step() {
    let cont = ContinuousLti {
        ac: DMatrix::zeros(1, 1),
        bc: DMatrix::identity(1, 1),
        cc: None,
    };
    assert!(discretize_zoh(&cont, 0.0, DMatrix::identity(1, 1)).is_err());
    assert!(discretize_zoh(&cont, -0.1, DMatrix::identity(1, 1)).is_err());
}

#[test]
fn bicycle_entries() {
    let p = table_params();
    let cont: ContinuousLti<f64> = build_bicycle(&p).unwrap();
    assert!((cont.ac[(0, 0)] - -(81_000.0 + 42_000.0) / (1653.0 * 15.0)).abs() < 1e-12);
    assert!((cont.ac[(0, 0)] + 4.9607).abs() < 1e-4);
    assert_eq!(cont.ac.row(3).iter().copied().collect::<Vec<_>>(), vec![15.0, 0.0, 15.0, 0.0]);
    assert_eq!(cont.ac.row(2).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, 0.0, 0.0]);
    assert_eq!(cont.cc.unwrap().as_slice(), &[0.0, 0.0, -15.0, 0.0]);
    assert!((cont.bc[(0, 0)] - 42_000.0 / (1653.0 * 15.0)).abs() < 1e-12);
    assert!((cont.bc[(1, 0)] - 1.402 * 42_000.0 / 2765.0).abs() < 1e-12);
    assert_eq!(cont.bc[(2, 0)], 0.0);
    assert_eq!(cont.bc[(3, 0)], 0.0);
}

#[test]
fn bicycle_rejects_nonpositive_parameters() {
    let mut p = table_params();
    p.cr = 0.0;
    assert!(build_bicycle::<f64>(&p).is_err());
    let mut p = table_params();
    p.vx = -1.0;
    assert!(build_bicycle::<f64>(&p).is_err());
}

#[test]
fn bicycle_kilonewton_round_trip() {
    let mut p = table_params();
    p.cf = 42.0 * 1000.0;
    p.cr = 81.0 * 1000.0;
    let a: ContinuousLti<f64> = build_bicycle(&p).unwrap();
    let b: ContinuousLti<f64> = build_bicycle(&table_params()).unwrap();
    assert_eq!(a.ac, b.ac);
    assert_eq!(a.bc, b.bc);
}

#[test]
fn vehicle_scenario_is_discretised_bicycle() {
    let sc = Scenario::from_toml_str(&scenario_text("vehicle")).unwrap();
    let cont: ContinuousLti<f64> = build_bicycle(&table_params()).unwrap();
    let direct = discretize_zoh(&cont, 0.5, sc.system.d.clone()).unwrap();
    assert_eq!(sc.system.a, direct.a);
    assert_eq!(sc.system.b, direct.b);
    assert_eq!(sc.system.c, direct.c);
    assert!((&sc.system.a - kernel::expm(&(&cont.ac * 0.5)).unwrap()).amax() < 1e-12);
    assert!(sc.track.is_some());
}

#[test]
fn risk_allocation() {
    assert_eq!(allocate_risk(0.1, 4).unwrap(), vec![0.025; 4]);
    assert_eq!(allocate_risk(0.0, 3).unwrap(), vec![0.0; 3]);
    assert_eq!(allocate_risk(0.001, 1).unwrap(), vec![0.001]);
    assert!(matches!(allocate_risk(0.5, 2), Err(SystemError::InvalidRisk(_))));
    assert!(matches!(allocate_risk(-0.01, 2), Err(SystemError::InvalidRisk(_))));
    assert!(allocate_risk(0.1, 0).is_err());
}

#[test]
fn halfspace_set_checks() {
    let row = |a: &[f64], beta: f64, p: f64| HalfspaceRow {
        alpha: DVector::from_column_slice(a),
        beta,
        p,
    };
    let set = HalfspaceSet::new(vec![row(&[1.0, 0.0], 1.0, 0.1), row(&[0.0, -2.0], 4.0, 0.0)], 2).unwrap();
    assert_eq!(set.len(), 2);
    assert!(set.contains(&DVector::from_column_slice(&[1.0, -2.0]), 0.0));
    assert!(!set.contains(&DVector::from_column_slice(&[1.0 + 1e-9, 0.0]), 0.0));
    assert!(set.contains(&DVector::from_column_slice(&[1.0 + 1e-9, 0.0]), 1e-8));
    let (a, b) = set.matrices();
    assert_eq!(a, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -2.0]));
    assert_eq!(b.as_slice(), &[1.0, 4.0]);

    assert!(HalfspaceSet::new(vec![row(&[0.0, 0.0], 1.0, 0.1)], 2).is_err());
    assert!(HalfspaceSet::new(vec![row(&[1.0, 0.0], 1.0, 0.6)], 2).is_err());
    assert!(HalfspaceSet::new(vec![row(&[1.0, 0.0], 1.0, -0.1)], 2).is_err());
    assert!(HalfspaceSet::new(vec![row(&[1.0], 1.0, 0.1)], 2).is_err());
    assert!(HalfspaceSet::<f64>::new(vec![], 2).unwrap().is_empty());
}

#[test]
fn assumption_checks() {
    let sc = Scenario::from_toml_str(&scenario_text("example1")).unwrap();
    let rep = validate_assumptions(&sc.system, 10);
    assert!(rep.all_pass(), "{:?}", rep.warnings);
    assert!(rep.warnings.is_empty());

    let short = validate_assumptions(&sc.system, 1);
    assert!(!short.horizon_ok);
    assert_eq!(short.warnings.len(), 1);

    let no_b = LtiSystem::new(sc.system.a.clone(), DMatrix::zeros(2, 2), sc.system.d.clone(), None).unwrap();
    let rep = validate_assumptions(&no_b, 10);
    assert!(!rep.controllable);
    assert!(!rep.warnings.is_empty());

    let no_d = LtiSystem::new(sc.system.a.clone(), sc.system.b.clone(), DMatrix::zeros(2, 2), None).unwrap();
    let rep = validate_assumptions(&no_d, 10);
    assert!(rep.controllable);
    assert!(!rep.noise_covers_inputs);
    assert!(!rep.warnings.is_empty());
}

#[test]
fn system_rejects_bad_shapes() {
    let i2 = DMatrix::<f64>::identity(2, 2);
    assert!(LtiSystem::new(DMatrix::zeros(2, 3), i2.clone(), i2.clone(), None).is_err());
    assert!(LtiSystem::new(i2.clone(), DMatrix::zeros(3, 1), i2.clone(), None).is_err());
    assert!(LtiSystem::new(i2.clone(), i2.clone(), DMatrix::zeros(1, 2), None).is_err());
    assert!(LtiSystem::new(i2.clone(), i2.clone(), i2.clone(), Some(DVector::zeros(3))).is_err());
    let mut nan = i2.clone();
    nan[(0, 1)] = f64::NAN;
    assert!(LtiSystem::new(nan, i2.clone(), i2.clone(), None).is_err());
}

#[test]
fn step_applies_affine_channel() {
    let sys = LtiSystem::new(
        DMatrix::from_element(1, 1, 2.0),
        DMatrix::from_element(1, 1, 3.0),
        DMatrix::from_element(1, 1, 5.0),
        Some(DVector::from_element(1, 7.0)),
    )
    .unwrap();
    let one = DVector::from_element(1, 1.0);
    assert_eq!(sys.step(&one, &one, 0.5, &one)[0], 2.0 + 3.0 + 5.0 + 3.5);
}

#[test]
fn track_lookup_and_geometry() {
    let segs = vec![
        Segment { length: 10.0, curvature: 0.0 },
        Segment {
            length: std::f64::consts::PI * 5.0,
            curvature: 0.2,
        },
        Segment { length: 10.0, curvature: 0.0 },
        Segment {
            length: std::f64::consts::PI * 5.0,
            curvature: 0.2,
        },
    ];
    let track = Track::new(segs, 2.0, 0.5).unwrap();
    let total = 20.0 + 10.0 * std::f64::consts::PI;
    assert!((track.length() - total).abs() < 1e-12);
    assert_eq!(track.lap_steps(), (total / 1.0).ceil() as usize);
    assert_eq!(track.curvature_at(5.0), 0.0);
    assert_eq!(track.curvature_at(12.0), 0.2);
    assert_eq!(track.curvature_at(total + 12.0), 0.2);
    assert_eq!(track.preview(9, 3), vec![0.0, 0.2, 0.2]);
    assert_eq!(track.curvature_at_step(12), 0.2);

    let half = track.pose_at(10.0 + std::f64::consts::PI * 5.0);
    assert!((half.x - 10.0).abs() < 1e-12 && (half.y - 10.0).abs() < 1e-12);
    assert!((half.heading - std::f64::consts::PI).abs() < 1e-12);
    let lap = track.pose_at(total - 1e-9);
    assert!(lap.x.abs() < 1e-6 && lap.y.abs() < 1e-6);

    let off = track.global_pose(5.0, 1.0, 0.1);
    assert!((off.x - 5.0).abs() < 1e-12 && (off.y - 1.0).abs() < 1e-12);
    assert!((off.heading - 0.1).abs() < 1e-15);

    assert!(Track::new(vec![], 1.0, 1.0).is_err());
    assert!(Track::new(vec![Segment { length: 0.0, curvature: 0.0 }], 1.0, 1.0).is_err());
    assert!(Track::new(vec![Segment { length: 1.0, curvature: 0.0 }], 0.0, 1.0).is_err());
}

#[test]
fn shipped_scenarios_parse() {
    let ex = Scenario::from_toml_str(&scenario_text("example1")).unwrap();
    assert_eq!(ex.horizon, 10);
    assert_eq!(ex.state_constraints.len(), 1);
    assert!(ex.input_constraints.is_empty());
    assert_eq!(ex.terminal_mode, TerminalMode::LyapunovLqr);
    assert_eq!(ex.sim.seed, 1);
    assert_eq!(ex.system.a, DMatrix::from_row_slice(2, 2, &[1.02, -0.1, 0.1, 0.98]));

    let veh = Scenario::from_toml_str(&scenario_text("vehicle")).unwrap();
    assert_eq!(veh.system.nx(), 4);
    assert_eq!(veh.state_constraints.len(), 8);
    assert_eq!(veh.input_constraints.len(), 2);
    assert!(matches!(veh.terminal_mode, TerminalMode::NearestAssignable { .. }));
}

#[test]
fn config_errors_are_reported() {
    let base = scenario_text("example1");
    assert!(matches!(invalid(&base.replace("horizon = 10", "horizon = 10\nextra = 1")), ConfigError::Parse(_)));
    assert!(matches!(invalid(&base.replace("seed = 1", "seed = 1\ncolour = 2")), ConfigError::Parse(_)));
    assert!(matches!(invalid(&base.replace("horizon = 10", "")), ConfigError::Parse(_)));
    assert!(matches!(invalid(&base.replace("horizon = 10", "horizon = 0")), ConfigError::Invalid(_)));
    assert!(matches!(invalid(&base.replace("p = 1e-3", "p = 0.7")), ConfigError::Invalid(_)));
    assert!(matches!(invalid(&base.replace("\"lyapunov-lqr\"", "\"bogus\"")), ConfigError::Invalid(_)));
    assert!(matches!(invalid(&base.replace("\"lyapunov-lqr\"", "\"explicit\"")), ConfigError::Invalid(_)));
    assert!(matches!(
        invalid(&base.replace("R = [[5.0, 0.0], [0.0, 20.0]]", "R = [[5.0, 0.0], [0.0, -1.0]]")),
        ConfigError::Invalid(_)
    ));
    assert!(matches!(
        invalid(&base.replace("A = [[1.02, -0.1], [0.1, 0.98]]", "A = [[1.02, -0.1], [0.1]]")),
        ConfigError::Invalid(_)
    ));
    assert!(matches!(invalid(&base.replace("x0 = [-0.3, 1.2]", "x0 = [-0.3]")), ConfigError::Invalid(_)));
    assert!(matches!(invalid(&base.replace("[system]", "[system]\ndt = 0.1")), ConfigError::Invalid(_)));
    assert!(matches!(invalid("not toml ["), ConfigError::Parse(_)));
    assert!(matches!(Scenario::from_file("/nonexistent/file.toml"), Err(ConfigError::Io { .. })));
}

proptest! {
    #[test]
    fn zoh_first_order_for_small_steps(a in prop::collection::vec(-2.0f64..2.0, 9), b in prop::collection::vec(-2.0f64..2.0, 3)) {
        let ac = DMatrix::from_row_slice(3, 3, &a);
        let bc = DMatrix::from_row_slice(3, 1, &b);
        let dt = 1e-6;
        let cont = ContinuousLti { ac: ac.clone(), bc: bc.clone(), cc: None };
        let sys = discretize_zoh(&cont, dt, DMatrix::identity(3, 3)).unwrap();
        prop_assert!((&sys.a - (DMatrix::identity(3, 3) + &ac * dt)).amax() <= 1e-8);
        prop_assert!((&sys.b - &bc * dt).amax() <= 1e-8);
    }

    #[test]
    fn risk_split_never_exceeds_budget(eps in 0.0f64..0.5, m in 1usize..50) {
        let p = allocate_risk(eps, m).unwrap();
        prop_assert_eq!(p.len(), m);
        prop_assert!(p.iter().sum::<f64>() <= eps);
        prop_assert!(p.iter().all(|v| (0.0..0.5).contains(v)));
    }
}
