use cssmpc::kernel::{self, Orientation};
use cssmpc::system::{HalfspaceRow, HalfspaceSet, LtiSystem, Scenario, TerminalMode};
use cssmpc::terminal::{self, Provenance, TerminalError};
use nalgebra::{DMatrix, DVector};
use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};

fn scenario(name: &str) -> Scenario<f64> {
    let path = format!("{}/../../scenarios/{name}.toml", env!("CARGO_MANIFEST_DIR"));
    Scenario::from_file(&path).unwrap()
}

fn scalar(a: f64, b: f64, d: f64) -> LtiSystem<f64> {
    let s = |v| DMatrix::from_element(1, 1, v);
    LtiSystem::new(s(a), s(b), s(d), None).unwrap()
}

fn s11(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

fn rotation(theta: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()])
}

fn rows_of(pairs: &[(&[f64], f64)]) -> HalfspaceSet<f64> {
    let n = pairs[0].0.len();
    let rows = pairs
        .iter()
        .map(|(a, b)| HalfspaceRow {
            alpha: DVector::from_column_slice(a),
            beta: *b,
            p: 0.5,
        })
        .collect();
    HalfspaceSet::new(rows, n).unwrap()
}

#[test]
fn lyapunov_lqr_memoryless_plant() {
    let sys = LtiSystem::new(
        DMatrix::zeros(2, 2),
        DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
        DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.2, 0.3]),
        None,
    )
    .unwrap();
    let (s, _) = terminal::lyapunov_lqr_cov(&sys, &DMatrix::identity(2, 2), &s11(1.0)).unwrap();
    assert!((s - sys.ddt()).norm() < 1e-14);
}

#[test]
fn lyapunov_lqr_scalar_without_input() {
    let sys = scalar(0.5, 0.0, 0.3);
    let (s, k) = terminal::lyapunov_lqr_cov(&sys, &s11(1.0), &s11(1.0)).unwrap();
    assert!(k[(0, 0)].abs() < 1e-15);
    assert!((s[(0, 0)] - 0.09 / 0.75).abs() < 1e-14);
}

#[test]
fn vehicle_lqr_covariance_and_empty_terminal_set() {
    let sc = scenario("vehicle");
    let (s, k) = terminal::lyapunov_lqr_cov(&sc.system, &sc.q, &sc.r).unwrap();
    assert!((s[(3, 3)] / 26.9796 - 1.0).abs() < 5e-3, "{}", s[(3, 3)]);
    match terminal::terminal_rows(&s, &k, &sc.state_constraints, &sc.input_constraints) {
        Err(TerminalError::TerminalSetEmpty {
            kind,
            row,
            required,
            available,
        }) => {
            assert_eq!(kind, "state");
            let alpha = &sc.state_constraints.rows[row].alpha;
            assert!(alpha[3].abs() == 1.0, "row {row}");
            assert!((required - 16.05).abs() < 0.1, "{required}");
            assert_eq!(available, 2.0);
        }
        other => panic!("expected an empty terminal set, got {other:?}"),
    }
}

#[test]
fn nearest_assignable_scalar_projection() {
    let sys = scalar(1.0, 1.0, 1.0);
    let s = terminal::nearest_assignable(&s11(0.5), &sys, 0.0).unwrap();
    assert!((s[(0, 0)] - 1.0).abs() < 1e-6, "{}", s[(0, 0)]);
    let s = terminal::nearest_assignable(&s11(2.0), &sys, 0.0).unwrap();
    assert!((s[(0, 0)] - 2.0).abs() < 1e-6, "{}", s[(0, 0)]);
}

#[test]
fn nearest_assignable_keeps_assignable_input() {
    // Under-actuated system; an LQR steady state is assignable by construction.
    let sys = LtiSystem::new(
        DMatrix::from_row_slice(2, 2, &[1.1, 0.2, 0.0, 0.8]),
        DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        DMatrix::from_row_slice(2, 2, &[0.2, 0.0, 0.0, 0.1]),
        None,
    )
    .unwrap();
    let (sd, _) = terminal::lyapunov_lqr_cov(&sys, &DMatrix::identity(2, 2), &s11(1.0)).unwrap();
    let s = terminal::nearest_assignable(&sd, &sys, 0.0).unwrap();
    assert!((&s - &sd).norm() < 1e-6, "{}", (&s - &sd).norm());
}

#[test]
fn vehicle_nearest_assignable_covariance() {
    let sc = scenario("vehicle");
    let t = terminal::build(&sc).unwrap();
    assert_eq!(t.provenance, Provenance::NearestAssignable);
    assert!((t.sigma_f[(3, 3)] / 0.3640 - 1.0).abs() < 0.02, "{}", t.sigma_f[(3, 3)]);
    assert!(t.residual <= 1e-6, "{}", t.residual);
    assert!(t.radius < 1.0);
    let res = terminal::p_mean_residual(&sc.system, &t.k_tilde, &sc.q, &sc.r, &t.p_mean);
    assert!(res <= 1e-8, "{res}");
    assert!(kernel::min_eigenvalue(&(&t.sigma_f - sc.system.ddt())) >= -1e-9);
}

#[test]
fn assignment_gain_scalar_closed_form() {
    let sys = scalar(1.0, 1.0, 1.0);
    let k = terminal::assignment_gain(&s11(2.0), &sys).unwrap();
    assert!((k[(0, 0)] - (0.5f64.sqrt() - 1.0)).abs() < 1e-12);
    assert!((k[(0, 0)] + 0.29289).abs() < 1e-5);
    let (res, rho) = terminal::verify_assignable(&s11(2.0), &k, &sys);
    assert!(res <= 1e-12);
    assert!((rho - 0.5f64.sqrt()).abs() < 1e-12);
    let f = 1.0 + k[(0, 0)];
    assert!((f * f * 2.0 + 1.0 - 2.0).abs() < 1e-12);
}

#[test]
fn assignment_gain_deadbeat_at_noise_floor() {
    let sys = scalar(0.7, 2.0, 0.5);
    let k = terminal::assignment_gain(&s11(0.25), &sys).unwrap();
    assert!((k[(0, 0)] + 0.35).abs() < 1e-12);
    let (res, rho) = terminal::verify_assignable(&s11(0.25), &k, &sys);
    assert!(res < 1e-12 && rho < 1e-12);
}

#[test]
fn verify_assignable_negative_control() {
    let sys = scalar(1.0, 1.0, 1.0);
    let k = terminal::assignment_gain(&s11(2.0), &sys).unwrap();
    let (res, _) = terminal::verify_assignable(&s11(2.0), &(k.add_scalar(0.1)), &sys);
    assert!(res > 1e-3);

    let zero = LtiSystem::new(DMatrix::zeros(2, 2), DMatrix::zeros(2, 1), DMatrix::identity(2, 2) * 0.3, None).unwrap();
    let (res, rho) = terminal::verify_assignable(&zero.ddt(), &DMatrix::zeros(1, 2), &zero);
    assert_eq!(res, 0.0);
    assert_eq!(rho, 0.0);
}

#[test]
fn assignment_gain_rejects_unassignable() {
    // Input only moves the second state; inflating the first variance alone is not assignable.
    let sys = LtiSystem::new(
        DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.5]),
        DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        DMatrix::identity(2, 2) * 0.1,
        None,
    )
    .unwrap();
    let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.02]);
    assert!(terminal::assignment_gain(&sigma, &sys).is_err());
}

#[test]
fn assignment_gain_round_trip_random() {
    let mut rng = SmallRng::seed_from_u64(17);
    for _ in 0..30 {
        let n = rng.random_range(2..5);
        let m = rng.random_range(1..n);
        let a = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let b = DMatrix::from_fn(n, m, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let k0 = DMatrix::from_fn(m, n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let f = &a + &b * &k0;
        let rho = kernel::spectral_radius(&f);
        if rho >= 0.95 {
            continue;
        }
        let sys = LtiSystem::new(a, b, DMatrix::identity(n, n) * 0.2, None).unwrap();
        let sigma = kernel::dlyap(&f, &sys.ddt(), Orientation::Forward).unwrap();
        let k = terminal::assignment_gain(&sigma, &sys).unwrap();
        let (res, radius) = terminal::verify_assignable(&sigma, &k, &sys);
        assert!(res <= 1e-6 && radius < 1.0, "{res} {radius}");
    }
}

#[test]
fn p_mean_cases() {
    let sys = scalar(0.5, 1.0, 1.0);
    let p = terminal::p_mean(&sys, &s11(0.1), &s11(0.0), &s11(0.0)).unwrap();
    assert_eq!(p[(0, 0)], 0.0);
    let p = terminal::p_mean(&sys, &s11(-0.5), &s11(2.0), &s11(3.0)).unwrap();
    assert!((p[(0, 0)] - (2.0 + 0.25 * 3.0)).abs() < 1e-14);

    let sc = scenario("example1");
    let t = terminal::build(&sc).unwrap();
    assert_eq!(t.provenance, Provenance::LyapunovLqr);
    let res = terminal::p_mean_residual(&sc.system, &t.k_tilde, &sc.q, &sc.r, &t.p_mean);
    assert!(res <= 1e-8, "{res}");
    assert!(kernel::min_eigenvalue(&t.p_mean) >= 0.0);
}

#[test]
fn terminal_rows_tighten_by_quantile() {
    let sc = scenario("example1");
    let t = terminal::build(&sc).unwrap();
    let rows = terminal::terminal_rows(&t.sigma_f, &t.k_tilde, &sc.state_constraints, &sc.input_constraints).unwrap();
    let alpha = DVector::from_column_slice(&[-2.0, 1.0]);
    let margin = 3.090_232_306_167_813 * alpha.dot(&(&t.sigma_f * &alpha)).sqrt();
    assert_eq!(rows.len(), 1);
    assert!((rows.rows[0].beta - (2.5 - margin)).abs() < 1e-9);

    let half = HalfspaceSet::new(
        vec![HalfspaceRow {
            alpha: alpha.clone(),
            beta: 2.5,
            p: 0.5,
        }],
        2,
    )
    .unwrap();
    let raw = terminal::terminal_rows(&t.sigma_f, &t.k_tilde, &half, &HalfspaceSet::new(vec![], 1).unwrap()).unwrap();
    assert_eq!(raw.rows[0].beta, 2.5);
}

#[test]
fn invariant_set_trivial_cases() {
    let unit = rows_of(&[(&[1.0, 0.0], 1.0), (&[-1.0, 0.0], 1.0), (&[0.0, 1.0], 1.0), (&[0.0, -1.0], 1.0)]);
    let out = terminal::maximal_invariant_set(&DMatrix::zeros(2, 2), &unit).unwrap();
    assert_eq!(out.len(), 4);
    let scalar_box = rows_of(&[(&[1.0], 1.0), (&[-1.0], 1.0)]);
    let out = terminal::maximal_invariant_set(&s11(0.9), &scalar_box).unwrap();
    assert_eq!(out.len(), 2);
    for r in &out.rows {
        assert_eq!(r.beta, 1.0);
    }
}

#[test]
fn invariant_set_unbounded_rows() {
    let half = rows_of(&[(&[1.0, 0.0], 1.0)]);
    let f = DMatrix::from_row_slice(2, 2, &[0.5, 0.3, 0.0, 0.5]);
    assert!(matches!(terminal::maximal_invariant_set(&f, &half), Err(TerminalError::Unbounded)));
}

#[test]
fn invariant_set_matches_forward_simulation_grid() {
    let f = rotation(std::f64::consts::FRAC_PI_4) * 0.9;
    let unit = rows_of(&[(&[1.0, 0.0], 1.0), (&[-1.0, 0.0], 1.0), (&[0.0, 1.0], 1.0), (&[0.0, -1.0], 1.0)]);
    let out = terminal::maximal_invariant_set(&f, &unit).unwrap();
    let mut checked = 0;
    for i in 0..101 {
        for j in 0..101 {
            let z = DVector::from_column_slice(&[-1.2 + 2.4 * i as f64 / 100.0, -1.2 + 2.4 * j as f64 / 100.0]);
            let slack = out
                .rows
                .iter()
                .map(|r| (r.beta - r.alpha.dot(&z)) / r.alpha.norm())
                .fold(f64::INFINITY, f64::min);
            let mut worst = f64::NEG_INFINITY;
            let mut x = z.clone();
            for _ in 0..=200 {
                worst = worst.max(x.amax() - 1.0);
                x = &f * x;
            }
            if slack.abs() < 1e-6 || worst.abs() < 1e-6 {
                continue;
            }
            checked += 1;
            assert_eq!(slack > 0.0, worst < 0.0, "grid point {z:?}");
        }
    }
    assert!(checked > 10_000);
}

#[test]
fn invariant_set_properties_on_example() {
    let sc = scenario("example1");
    let t = terminal::build(&sc).unwrap();
    let f = &sc.system.a + &sc.system.b * &t.k_tilde;
    let tightened = terminal::terminal_rows(&t.sigma_f, &t.k_tilde, &sc.state_constraints, &sc.input_constraints).unwrap();
    let b = sc.mean_box.unwrap();
    let mut rng = SmallRng::seed_from_u64(5);
    let mut accepted = 0;
    while accepted < 1000 {
        let mu = DVector::from_fn(2, |_, _| (rng.random::<f64>() * 2.0 - 1.0) * b);
        if !t.xf_mu.contains(&mu, 0.0) {
            continue;
        }
        accepted += 1;
        assert!(t.xf_mu.contains(&(&f * &mu), 1e-9), "{mu:?}");
        assert!(tightened.contains(&mu, 1e-9));
        assert!(mu.amax() <= b + 1e-12);
    }
}

#[test]
fn explicit_terminal_mode() {
    let mut sc = scenario("example1");
    let (s, _) = terminal::lyapunov_lqr_cov(&sc.system, &sc.q, &sc.r).unwrap();
    let inflated = &s * 1.5;
    let sd = terminal::nearest_assignable(&inflated, &sc.system, 0.0).unwrap();
    sc.terminal_mode = TerminalMode::Explicit(sd.clone());
    let t = terminal::build(&sc).unwrap();
    assert_eq!(t.provenance, Provenance::Explicit);
    assert!(t.residual <= 1e-6 && t.radius < 1.0);
}
