#![allow(dead_code)]

use cssmpc::conic::{svec, Cone, ConicProgram};
use cssmpc::system::Scenario;
use nalgebra::{DMatrix, DVector};
use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};

pub fn scenario(name: &str) -> Scenario<f64> {
    let path = format!("{}/../../scenarios/{name}.toml", env!("CARGO_MANIFEST_DIR"));
    Scenario::from_file(&path).unwrap()
}

pub fn gaussian_matrix(rng: &mut SmallRng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

/// Program with a known primal-dual optimum built from complementary slack pairs.
pub fn kkt_instance(seed: u64) -> (ConicProgram<f64>, f64) {
    let mut rng = SmallRng::seed_from_u64(seed);
    let n = rng.random_range(2..6);
    let (n_zero, n_lp, soc_dim, psd_dim) = (1, rng.random_range(2..6), rng.random_range(3..6), rng.random_range(2..5));
    let cones = vec![Cone::Zero(n_zero), Cone::NonNeg(n_lp), Cone::Soc(soc_dim), Cone::Psd(psd_dim)];
    let mut s = Vec::new();
    let mut z = Vec::new();
    for _ in 0..n_zero {
        s.push(0.0);
        z.push(rng.random_range(-1.0..1.0));
    }
    for _ in 0..n_lp {
        let v = rng.random_range(0.1..2.0);
        if rng.random_bool(0.5) {
            s.push(v);
            z.push(0.0);
        } else {
            s.push(0.0);
            z.push(v);
        }
    }
    let dir = DVector::from_fn(soc_dim - 1, |_, _| rng.random_range(-1.0..1.0)).normalize();
    let (a, b) = (rng.random_range(0.1..2.0), rng.random_range(0.1..2.0));
    s.push(a);
    s.extend(dir.iter().map(|d| a * d));
    z.push(b);
    z.extend(dir.iter().map(|d| -b * d));
    let q = gaussian_matrix(&mut rng, psd_dim, psd_dim).qr().q();
    let rank = rng.random_range(1..psd_dim);
    let ev_s = DMatrix::from_fn(psd_dim, psd_dim, |i, j| if i == j && i < rank { rng.random_range(0.1..2.0) } else { 0.0 });
    let ev_z = DMatrix::from_fn(psd_dim, psd_dim, |i, j| if i == j && i >= rank { rng.random_range(0.1..2.0) } else { 0.0 });
    s.extend(svec(&(&q * ev_s * q.transpose())).iter());
    z.extend(svec(&(&q * ev_z * q.transpose())).iter());

    let s = DVector::from_vec(s);
    let z = DVector::from_vec(z);
    let g = gaussian_matrix(&mut rng, s.len(), n);
    let x = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let h = &g * &x + &s;
    let c = -(g.transpose() * &z);
    let opt = c.dot(&x);
    (ConicProgram::new(c, g, h, cones).unwrap(), opt)
}
