use cssmpc::chance::{self, inv_norm_cdf, norm_cdf, quantile_scale, ChanceError, PolicyModel};
use cssmpc::lifting::{self, sigma_y};
use cssmpc::system::{HalfspaceRow, LtiSystem};
use nalgebra::{DMatrix, DVector};
use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};

fn polar(rng: &mut SmallRng) -> (f64, f64) {
    loop {
        let u: f64 = rng.random::<f64>() * 2.0 - 1.0;
        let v: f64 = rng.random::<f64>() * 2.0 - 1.0;
        let s = u * u + v * v;
        if s > 0.0 && s < 1.0 {
            let f = (-2.0 * s.ln() / s).sqrt();
            return (u * f, v * f);
        }
    }
}

#[test]
fn quantile_reference_values() {
    assert_eq!(inv_norm_cdf(0.5).unwrap(), 0.0);
    assert!((inv_norm_cdf(1.0 - 1e-3).unwrap() - 3.090_232_306_167_813_5).abs() < 1e-9);
    assert!((inv_norm_cdf(0.975).unwrap() - 1.959_963_984_540_054).abs() < 1e-9);
}

#[test]
fn quantile_rejects_out_of_range() {
    assert_eq!(inv_norm_cdf(0.0), Err(ChanceError::RiskOutOfRange(0.0)));
    assert!(inv_norm_cdf(1.0).is_err());
    assert!(quantile_scale(0.0f64).is_err());
    assert!(quantile_scale(0.6f64).is_err());
    assert_eq!(quantile_scale(0.5f64).unwrap(), 0.0);
}

#[test]
fn round_trip_and_monotone_on_log_grid() {
    let mut grid = Vec::new();
    for k in 0..=160 {
        let p = 10f64.powf(-9.0 + 9.0 * k as f64 / 160.0) * 0.5;
        grid.push(p);
        grid.push(1.0 - p);
    }
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup();
    let mut prev = f64::NEG_INFINITY;
    for &p in &grid {
        let z = inv_norm_cdf(p).unwrap();
        assert!((norm_cdf(z) - p).abs() <= 1e-12, "p = {p}");
        assert!(z > prev);
        prev = z;
    }
}

#[test]
fn bisection_oracle_agrees() {
    for &p in &[1e-6, 0.01, 0.3, 0.77, 0.999] {
        let (mut lo, mut hi) = (-12.0f64, 12.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if norm_cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((inv_norm_cdf(p).unwrap() - 0.5 * (lo + hi)).abs() < 1e-10);
    }
}

fn scalar_system() -> LtiSystem<f64> {
    let one = DMatrix::from_element(1, 1, 1.0);
    LtiSystem::new(one.clone(), one.clone(), one, None).unwrap()
}

#[test]
fn half_risk_reduces_to_mean_row() {
    let sys = scalar_system();
    let lifted = lifting::lift(&sys, 2);
    let sy = sigma_y(&lifted, &DMatrix::zeros(1, 1)).unwrap();
    let model = PolicyModel::state_feedback(&lifted, &sy);
    let row = HalfspaceRow { alpha: DVector::from_element(1, 1.0), beta: 1.0, p: 0.5 };
    let free = lifted.script_a.column(0).into_owned();
    let tr = chance::tighten_state_row(&row, 2, &lifted, &model, &free).unwrap();
    assert_eq!(tr.scale, 0.0);
    assert!(tr.is_deterministic());
}

#[test]
fn input_row_margin_scalar_gain() {
    let sys = scalar_system();
    let lifted = lifting::lift(&sys, 2);
    let sy = sigma_y(&lifted, &DMatrix::zeros(1, 1)).unwrap();
    let model = PolicyModel::state_feedback(&lifted, &sy);
    assert_eq!(model.len(), 1);
    let p = 1e-2;
    let row = HalfspaceRow { alpha: DVector::from_element(1, 1.0), beta: 3.0, p };
    let tr = chance::tighten_input_row(&row, 1, &lifted, &model).unwrap();
    let theta = DVector::from_element(1, -1.0);
    let expected = inv_norm_cdf(1.0 - p).unwrap() * 1.0 * 1.0;
    assert!((tr.margin(&theta) - expected).abs() < 1e-12);
    let zero = DVector::zeros(1);
    assert_eq!(tr.margin(&zero), 0.0);

    // u_1 = v_1 − w_0; with v_1 at the tightened limit the violation rate is p.
    let v1 = 3.0 - expected;
    let mut rng = SmallRng::seed_from_u64(7);
    let m = 1_000_000;
    let mut viol = 0usize;
    for _ in 0..m / 2 {
        let (a, b) = polar(&mut rng);
        viol += usize::from(v1 - a > 3.0) + usize::from(v1 - b > 3.0);
    }
    let rate = viol as f64 / m as f64;
    assert!(rate <= p + 3.0 * (p * (1.0 - p) / m as f64).sqrt(), "rate {rate}");
}

#[test]
fn state_row_monte_carlo_open_loop() {
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, -0.2, 0.95]);
    let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
    let d = DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.05, 0.2]);
    let sys = LtiSystem::new(a, b, d, None).unwrap();
    let lifted = lifting::lift(&sys, 3);
    let sigma0 = DMatrix::from_row_slice(2, 2, &[0.04, 0.01, 0.01, 0.09]);
    let sy = sigma_y(&lifted, &sigma0).unwrap();
    let model = PolicyModel::state_feedback(&lifted, &sy);
    let alpha = DVector::from_column_slice(&[-2.0, 1.0]);
    let p = 1e-3;
    let row = HalfspaceRow { alpha: alpha.clone(), beta: 2.5, p };
    let mu = DVector::from_column_slice(&[0.3, -0.1]);
    let free = &lifted.script_a * &mu;
    let t = 3;
    let tr = chance::tighten_state_row(&row, t, &lifted, &model, &free).unwrap();
    let theta = DVector::zeros(model.len());
    let cov = sy.sigma.view((t * 2, t * 2), (2, 2)).into_owned();
    let expected = inv_norm_cdf(1.0 - p).unwrap() * alpha.dot(&(&cov * &alpha)).sqrt();
    assert!((tr.margin(&theta) - expected).abs() < 1e-10);

    // Shift the mean so the row is tight, then sample.
    let v = DVector::zeros(lifted.input_len());
    let slack = tr.slack(&v, &theta);
    let shift = -slack;
    let mean_t = free.rows(t * 2, 2).into_owned();
    let chol = cov.clone().cholesky().unwrap().l();
    let mut rng = SmallRng::seed_from_u64(11);
    let m = 1_000_000;
    let mut viol = 0usize;
    for _ in 0..m {
        let (e0, e1) = polar(&mut rng);
        let x = &mean_t + &chol * DVector::from_column_slice(&[e0, e1]);
        if alpha.dot(&x) + shift > 2.5 {
            viol += 1;
        }
    }
    let rate = viol as f64 / m as f64;
    assert!(rate <= p + 3.0 * (p * (1.0 - p) / m as f64).sqrt(), "rate {rate}");
    assert!(rate > 0.5 * p);
}

#[test]
fn vehicle_terminal_margin_exceeds_lane() {
    let alpha = DVector::from_column_slice(&[0.0, 0.0, 0.0, 1.0]);
    let mut sigma = DMatrix::<f64>::identity(4, 4);
    sigma[(3, 3)] = 26.9796;
    let m = chance::static_margin(&alpha, &sigma, 1e-3).unwrap();
    assert!((m - 16.05).abs() < 0.01);
    assert!(m > 2.0);
}
