//! Homogeneous self-dual embedding with Nesterov–Todd scaling and
//! Mehrotra predictor-corrector steps, for `min cᵀx s.t. Ax = b, h − Gx ∈ 𝒦`
//! with no zero cones in `𝒦`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::cones::{self, Block, NtScaling, Op};
use super::{Settings, Status};
use crate::scalar::Real;

pub(crate) struct Problem<T: Real> {
    pub c: DVector<T>,
    pub a: DMatrix<T>,
    pub b: DVector<T>,
    pub g: DMatrix<T>,
    pub h: DVector<T>,
    pub blocks: Vec<Block>,
}

pub(crate) enum RawCertificate<T: Real> {
    Primal { y: DVector<T>, z: DVector<T> },
    Dual { x: DVector<T> },
}

pub(crate) struct Outcome<T: Real> {
    pub status: Status,
    pub x: DVector<T>,
    pub y: DVector<T>,
    pub s: DVector<T>,
    pub z: DVector<T>,
    pub iterations: usize,
    pub primal_residual: T,
    pub dual_residual: T,
    pub gap: T,
    pub certificate: Option<RawCertificate<T>>,
}

/// Relative KKT residual below which refinement stops.
const REFINE_TOL: f64 = 1e-13;
/// Step length counted as no progress, and how many such steps end the run.
const STALL_STEP: f64 = 1e-3;
const STALL_ITERS: usize = 5;

struct Kkt<'a, T: Real> {
    p: &'a Problem<T>,
    scaling: &'a NtScaling<T>,
    ghat: DMatrix<T>,
    h_chol: ScaledCholesky<T>,
    s_chol: Option<ScaledCholesky<T>>,
    h_inv_at: DMatrix<T>,
    refine: usize,
}

/// Cholesky factor of `D⁻¹MD⁻¹` with `D = diag(√M_ii)`, regularized only if needed.
struct ScaledCholesky<T: Real> {
    chol: Cholesky<T, Dyn>,
    d: DVector<T>,
}

impl<T: Real> ScaledCholesky<T> {
    fn new(mut m: DMatrix<T>) -> Option<Self> {
        let n = m.nrows();
        let d = DVector::from_iterator(
            n,
            (0..n).map(|i| {
                let v = m[(i, i)];
                if v > T::zero() {
                    v.sqrt()
                } else {
                    T::one()
                }
            }),
        );
        for j in 0..n {
            for i in 0..n {
                m[(i, j)] /= d[i] * d[j];
            }
        }
        if let Some(chol) = Cholesky::new(m.clone()) {
            return Some(ScaledCholesky { chol, d });
        }
        let mut delta = T::lit(1e-14);
        for _ in 0..8 {
            let mut r = m.clone();
            for i in 0..n {
                r[(i, i)] += delta;
            }
            if let Some(chol) = Cholesky::new(r) {
                return Some(ScaledCholesky { chol, d });
            }
            delta *= T::lit(100.0);
        }
        None
    }

    fn solve<C: nalgebra::Dim, S>(&self, b: &nalgebra::Matrix<T, Dyn, C, S>) -> nalgebra::OMatrix<T, Dyn, C>
    where
        S: nalgebra::Storage<T, Dyn, C>,
        nalgebra::DefaultAllocator: nalgebra::allocator::Allocator<Dyn, C>,
    {
        let mut x = b.clone_owned();
        for mut col in x.column_iter_mut() {
            col.component_div_assign(&self.d);
        }
        let mut y = self.chol.solve(&x);
        for mut col in y.column_iter_mut() {
            col.component_div_assign(&self.d);
        }
        y
    }
}

impl<'a, T: Real> Kkt<'a, T> {
    fn factor(p: &'a Problem<T>, support: &[Vec<usize>], scaling: &'a NtScaling<T>, refine: usize) -> Option<Self> {
        let ghat = scaling.apply_columns(Op::WinvT, &p.g);
        let n = p.g.ncols();
        let mut h = DMatrix::zeros(n, n);
        for (b, cols) in p.blocks.iter().zip(support) {
            let sub = DMatrix::from_fn(b.dim(), cols.len(), |i, k| ghat[(b.offset + i, cols[k])]);
            let local = sub.transpose() * &sub;
            for (kb, &jb) in cols.iter().enumerate() {
                for (ka, &ja) in cols.iter().enumerate() {
                    h[(ja, jb)] += local[(ka, kb)];
                }
            }
        }
        if p.a.nrows() > 0 {
            h += p.a.tr_mul(&p.a);
        }
        let h_chol = ScaledCholesky::new(h)?;
        let (s_chol, h_inv_at) = if p.a.nrows() > 0 {
            let h_inv_at = h_chol.solve(&p.a.transpose());
            let s = &p.a * &h_inv_at;
            (Some(ScaledCholesky::new(s)?), h_inv_at)
        } else {
            (None, DMatrix::zeros(0, 0))
        };
        Some(Kkt {
            p,
            scaling,
            ghat,
            h_chol,
            s_chol,
            h_inv_at,
            refine,
        })
    }

    fn base_solve(&self, r1: &DVector<T>, r2: &DVector<T>, r3: &DVector<T>) -> (DVector<T>, DVector<T>, DVector<T>) {
        let w3 = self.scaling.apply(Op::WinvT, r3);
        let mut rhs = r1 + self.ghat.tr_mul(&w3);
        let (dx, dy) = match &self.s_chol {
            Some(sc) => {
                rhs += self.p.a.tr_mul(r2);
                let hr = self.h_chol.solve(&rhs);
                let dy = sc.solve(&(&self.p.a * &hr - r2));
                let dx = hr - &self.h_inv_at * &dy;
                (dx, dy)
            }
            None => (self.h_chol.solve(&rhs), DVector::zeros(0)),
        };
        let dz = self.scaling.apply(Op::Winv, &(&self.ghat * &dx - w3));
        (dx, dy, dz)
    }

    /// Solves `[0 Aᵀ Gᵀ; A 0 0; G 0 −WᵀW] (dx, dy, dz) = (r1, r2, r3)`.
    fn solve(&self, r1: &DVector<T>, r2: &DVector<T>, r3: &DVector<T>) -> (DVector<T>, DVector<T>, DVector<T>) {
        let (mut dx, mut dy, mut dz) = self.base_solve(r1, r2, r3);
        let scale = T::one().max(r1.norm()).max(r2.norm()).max(r3.norm());
        let mut prev = T::max_value().unwrap();
        for _ in 0..self.refine {
            let e1 = r1 - self.p.a.tr_mul(&dy) - self.p.g.tr_mul(&dz);
            let e2 = r2 - &self.p.a * &dx;
            let wdz = self.scaling.apply(Op::W, &dz);
            let e3 = r3 - (&self.p.g * &dx - self.scaling.apply(Op::Wt, &wdz));
            let err = e1.norm().max(e2.norm()).max(e3.norm());
            if err <= T::lit(REFINE_TOL) * scale || err > prev * T::lit(0.5) {
                break;
            }
            prev = err;
            let (cx, cy, cz) = self.base_solve(&e1, &e2, &e3);
            dx += cx;
            dy += cy;
            dz += cz;
        }
        (dx, dy, dz)
    }
}

struct Direction<T: Real> {
    dx: DVector<T>,
    dy: DVector<T>,
    dz: DVector<T>,
    ds: DVector<T>,
    dtau: T,
    dkappa: T,
}

fn margin<T: Real>(blocks: &[Block], u: &DVector<T>) -> T {
    blocks
        .iter()
        .map(|b| cones::block_margin(b.cone, &u.as_slice()[b.range()]))
        .fold(T::max_value().unwrap(), |a, v| a.min(v))
}

pub(crate) fn run<T: Real>(p: &Problem<T>, settings: &Settings<T>) -> Outcome<T> {
    let n = p.c.len();
    let m = p.h.len();
    let peq = p.b.len();
    let e = cones::identity::<T>(&p.blocks, m);
    let support: Vec<Vec<usize>> = p
        .blocks
        .iter()
        .map(|b| {
            (0..n)
                .filter(|&j| p.g.view((b.offset, j), (b.dim(), 1)).iter().any(|v| *v != T::zero()))
                .collect()
        })
        .collect();
    let degree: usize = p.blocks.iter().map(|b| b.cone.degree()).sum();
    let nu = T::lit((degree + 1) as f64);
    let (bn, hn, cn) = (p.b.norm(), p.h.norm(), p.c.norm());

    let fail = |status: Status, it: usize| Outcome {
        status,
        x: DVector::zeros(n),
        y: DVector::zeros(peq),
        s: DVector::zeros(m),
        z: DVector::zeros(m),
        iterations: it,
        primal_residual: T::max_value().unwrap(),
        dual_residual: T::max_value().unwrap(),
        gap: T::max_value().unwrap(),
        certificate: None,
    };

    let ident = NtScaling::identity(&p.blocks, m);
    let Some(kkt0) = Kkt::factor(p, &support, &ident, settings.refine) else {
        return fail(Status::NumericalFailure, 0);
    };
    let (mut x, _, zt) = kkt0.solve(&DVector::zeros(n), &p.b, &p.h);
    let mut s = -zt;
    let (_, mut y, mut z) = kkt0.solve(&(-&p.c), &DVector::zeros(peq), &DVector::zeros(m));
    let ts = -margin(&p.blocks, &s);
    if m > 0 && ts >= -T::lit(1e-8) * T::one().max(s.norm()) {
        s += &e * (T::one() + ts);
    }
    let tz = -margin(&p.blocks, &z);
    if m > 0 && tz >= -T::lit(1e-8) * T::one().max(z.norm()) {
        z += &e * (T::one() + tz);
    }
    let mut tau = T::one();
    let mut kappa = T::one();

    let mut last = (T::max_value().unwrap(), T::max_value().unwrap(), T::max_value().unwrap());
    let mut best: Option<(T, Outcome<T>)> = None;
    let mut cached = None;
    let mut stalled = 0usize;
    for iter in 0..=settings.max_iter {
        let aty = p.a.tr_mul(&y);
        let gtz = p.g.tr_mul(&z);
        let rx = &aty + &gtz + &p.c * tau;
        let ry = &p.a * &x - &p.b * tau;
        let rz = &s + &p.g * &x - &p.h * tau;
        let cx = p.c.dot(&x);
        let by_hz = p.b.dot(&y) + p.h.dot(&z);
        let rt = kappa + cx + by_hz;

        let pcost = cx / tau;
        let pres = (ry.norm() / tau / (T::one() + bn)).max(rz.norm() / tau / (T::one() + hn));
        let dscale = (T::one() + cn).max((aty.norm() + gtz.norm()) / tau);
        let dres = rx.norm() / tau / dscale;
        let gap = s.dot(&z) / (tau * tau) / T::one().max(pcost.abs());
        last = (pres, dres, gap);
        let score = (pres / settings.reduced_feas_tol)
            .max(dres / settings.reduced_feas_tol)
            .max(gap / settings.reduced_gap_tol);
        if score <= T::one() && best.as_ref().is_none_or(|(b, _)| score < *b) {
            let mut out = numerical(x.clone(), y.clone(), s.clone(), z.clone(), tau, iter, last);
            out.status = Status::AlmostOptimal;
            best = Some((score, out));
        }
        if pres <= settings.feas_tol && dres <= settings.feas_tol && gap <= settings.gap_tol {
            return Outcome {
                status: Status::Optimal,
                x: &x / tau,
                y: &y / tau,
                s: &s / tau,
                z: &z / tau,
                iterations: iter,
                primal_residual: pres,
                dual_residual: dres,
                gap,
                certificate: None,
            };
        }
        if by_hz < T::zero() {
            let res = (&aty + &gtz).norm() / (-by_hz);
            if res <= settings.feas_tol * T::one().max(cn) {
                let k = -by_hz;
                return Outcome {
                    status: Status::PrimalInfeasible,
                    x: DVector::zeros(n),
                    y: &y / k,
                    s: DVector::zeros(m),
                    z: &z / k,
                    iterations: iter,
                    primal_residual: pres,
                    dual_residual: dres,
                    gap,
                    certificate: Some(RawCertificate::Primal { y: &y / k, z: &z / k }),
                };
            }
        }
        if cx < T::zero() {
            let res = ((&p.a * &x).norm()).max((&p.g * &x + &s).norm()) / (-cx);
            if res <= settings.feas_tol * T::one().max(hn.max(bn)) {
                return Outcome {
                    status: Status::DualInfeasible,
                    x: &x / (-cx),
                    y: DVector::zeros(peq),
                    s: &s / (-cx),
                    z: DVector::zeros(m),
                    iterations: iter,
                    primal_residual: pres,
                    dual_residual: dres,
                    gap,
                    certificate: Some(RawCertificate::Dual { x: &x / (-cx) }),
                };
            }
        }
        if iter == settings.max_iter || stalled >= STALL_ITERS {
            break;
        }

        let mu = (s.dot(&z) + tau * kappa) / nu;
        let Some(scaling) = cached.take().or_else(|| NtScaling::compute(&p.blocks, &s, &z)) else {
            return best.map(|b| b.1).unwrap_or_else(|| numerical(x, y, s, z, tau, iter, last));
        };
        let Some(kkt) = Kkt::factor(p, &support, &scaling, settings.refine) else {
            return best.map(|b| b.1).unwrap_or_else(|| numerical(x, y, s, z, tau, iter, last));
        };
        let (x1, y1, z1) = kkt.solve(&(-&p.c), &p.b, &p.h);
        let lambda = &scaling.lambda;
        let lam_sq = cones::jprod(&p.blocks, lambda, lambda);

        let direction = |eta: T, ds_c: &DVector<T>, dk_c: T| -> Direction<T> {
            let lds = cones::jdiv(&p.blocks, lambda, ds_c);
            let r1 = &rx * (-eta);
            let r2 = &ry * (-eta);
            let r3 = &rz * (-eta) - scaling.apply(Op::Wt, &lds);
            let (x2, y2, z2) = kkt.solve(&r1, &r2, &r3);
            let num = -eta * rt - dk_c / tau - (p.c.dot(&x2) + p.b.dot(&y2) + p.h.dot(&z2));
            let den = -kappa / tau + p.c.dot(&x1) + p.b.dot(&y1) + p.h.dot(&z1);
            let dtau = num / den;
            let dx = x2 + &x1 * dtau;
            let dy = y2 + &y1 * dtau;
            let dz = z2 + &z1 * dtau;
            let ds = &rz * (-eta) - &p.g * &dx + &p.h * dtau;
            let dkappa = (dk_c - kappa * dtau) / tau;
            Direction { dx, dy, dz, ds, dtau, dkappa }
        };
        let step_to_boundary = |d: &Direction<T>| -> (T, DVector<T>, DVector<T>) {
            let ds_t = scaling.apply(Op::WinvT, &d.ds);
            let dz_t = scaling.apply(Op::W, &d.dz);
            let mut a = cones::max_step_scaled(&p.blocks, lambda, &ds_t)
                .min(cones::max_step_scaled(&p.blocks, lambda, &dz_t));
            if d.dtau < T::zero() {
                a = a.min(-tau / d.dtau);
            }
            if d.dkappa < T::zero() {
                a = a.min(-kappa / d.dkappa);
            }
            (a, ds_t, dz_t)
        };

        let aff = direction(T::one(), &(-&lam_sq), -tau * kappa);
        let (a_aff, ds_aff, dz_aff) = step_to_boundary(&aff);
        let a_aff = a_aff.min(T::one());
        let sigma = (T::one() - a_aff).powi(3).max(T::zero()).min(T::one());
        let corr = cones::jprod(&p.blocks, &ds_aff, &dz_aff);
        let ds_c = -&lam_sq - corr + &e * (sigma * mu);
        let dk_c = -tau * kappa - aff.dtau * aff.dkappa + sigma * mu;
        let dir = direction(T::one() - sigma, &ds_c, dk_c);
        let (a_max, _, _) = step_to_boundary(&dir);
        let mut alpha = T::one().min(settings.step * a_max);
        let mut next = None;
        for _ in 0..20 {
            let s_new = &s + &dir.ds * alpha;
            let z_new = &z + &dir.dz * alpha;
            if let Some(sc) = NtScaling::compute(&p.blocks, &s_new, &z_new) {
                next = Some((s_new, z_new, sc));
                break;
            }
            alpha *= T::lit(0.5);
        }
        let Some((s_new, z_new, sc)) = next.filter(|_| alpha > T::zero() && alpha.is_finite()) else {
            return best.map(|b| b.1).unwrap_or_else(|| numerical(x, y, s, z, tau, iter, last));
        };

        stalled = if alpha < T::lit(STALL_STEP) { stalled + 1 } else { 0 };
        x += &dir.dx * alpha;
        y += &dir.dy * alpha;
        s = s_new;
        z = z_new;
        cached = Some(sc);
        tau += dir.dtau * alpha;
        kappa += dir.dkappa * alpha;
        if !(tau > T::zero() && kappa > T::zero()) || !x.iter().all(|v| v.is_finite()) {
            return best.map(|b| b.1).unwrap_or_else(|| numerical(x, y, s, z, T::one(), iter, last));
        }
    }
    if let Some((_, out)) = best {
        return out;
    }
    let mut out = numerical(x, y, s, z, tau, settings.max_iter, last);
    out.status = Status::MaxIterations;
    out
}

fn numerical<T: Real>(
    x: DVector<T>,
    y: DVector<T>,
    s: DVector<T>,
    z: DVector<T>,
    tau: T,
    iter: usize,
    last: (T, T, T),
) -> Outcome<T> {
    Outcome {
        status: Status::NumericalFailure,
        x: x / tau,
        y: y / tau,
        s: s / tau,
        z: z / tau,
        iterations: iter,
        primal_residual: last.0,
        dual_residual: last.1,
        gap: last.2,
        certificate: None,
    }
}
