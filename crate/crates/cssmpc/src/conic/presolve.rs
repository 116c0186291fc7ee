//! Removal of constant rows, empty columns and trivial second-order tails,
//! with infeasibility detection on the removed pieces.

use nalgebra::{DMatrix, DVector};

use super::cones::{layout, smat, svec, Cone};
use super::hsde::{self, Problem, RawCertificate};
use super::{Certificate, ConicProgram, ConicSolution, Settings, Status};
use crate::kernel;
use crate::scalar::Real;

fn row_is_zero<T: Real>(g: &DMatrix<T>, i: usize) -> bool {
    g.row(i).iter().all(|v| *v == T::zero())
}

fn early<T: Real>(prog: &ConicProgram<T>, status: Status, certificate: Certificate<T>) -> ConicSolution<T> {
    let inf = T::max_value().unwrap();
    ConicSolution {
        status,
        x: DVector::zeros(prog.n()),
        s: DVector::zeros(prog.m()),
        z: DVector::zeros(prog.m()),
        objective: inf,
        dual_objective: inf,
        gap: inf,
        primal_residual: inf,
        dual_residual: inf,
        iterations: 0,
        certificate: Some(certificate),
    }
}

pub(crate) fn solve_with_presolve<T: Real>(prog: &ConicProgram<T>, settings: &Settings<T>) -> ConicSolution<T> {
    let (m, n) = (prog.m(), prog.n());
    let g = &prog.g;
    let h = &prog.h;
    let tol = settings.feas_tol;

    // Columns that appear nowhere.
    let mut keep_vars = Vec::with_capacity(n);
    for j in 0..n {
        if g.column(j).iter().any(|v| *v != T::zero()) {
            keep_vars.push(j);
        } else if prog.c[j] != T::zero() {
            let mut x = DVector::zeros(n);
            x[j] = -T::one() / prog.c[j];
            return early(prog, Status::DualInfeasible, Certificate::Dual(x));
        }
    }

    let mut eq_rows = Vec::new();
    let mut cone_rows = Vec::new();
    let mut cones_out = Vec::new();
    for b in layout(&prog.cones) {
        let r = b.range();
        match b.cone {
            Cone::Zero(_) => {
                for i in r {
                    if row_is_zero(g, i) {
                        if h[i].abs() > tol * (T::one() + h[i].abs()) {
                            let mut z = DVector::zeros(m);
                            z[i] = -T::one() / h[i];
                            return early(prog, Status::PrimalInfeasible, Certificate::Primal(z));
                        }
                    } else {
                        eq_rows.push(i);
                    }
                }
            }
            Cone::NonNeg(_) => {
                let mut kept = 0;
                for i in r {
                    if row_is_zero(g, i) {
                        if h[i] < -tol * (T::one() + h[i].abs()) {
                            let mut z = DVector::zeros(m);
                            z[i] = -T::one() / h[i];
                            return early(prog, Status::PrimalInfeasible, Certificate::Primal(z));
                        }
                    } else {
                        cone_rows.push(i);
                        kept += 1;
                    }
                }
                if kept > 0 {
                    cones_out.push(Cone::NonNeg(kept));
                }
            }
            Cone::Soc(_) => {
                let head = r.start;
                let tail: Vec<usize> = (head + 1..r.end)
                    .filter(|&i| !(row_is_zero(g, i) && h[i] == T::zero()))
                    .collect();
                let constant = row_is_zero(g, head) && tail.iter().all(|&i| row_is_zero(g, i));
                if constant {
                    let tn = tail.iter().fold(T::zero(), |a, &i| a + h[i] * h[i]).sqrt();
                    if h[head] - tn < -tol * (T::one() + tn) {
                        let mut z = DVector::zeros(m);
                        let k = T::one() / (tn - h[head]);
                        z[head] = k;
                        for &i in &tail {
                            z[i] = -h[i] / tn * k;
                        }
                        return early(prog, Status::PrimalInfeasible, Certificate::Primal(z));
                    }
                    continue;
                }
                cone_rows.push(head);
                cone_rows.extend(&tail);
                if tail.is_empty() {
                    cones_out.push(Cone::NonNeg(1));
                } else {
                    cones_out.push(Cone::Soc(tail.len() + 1));
                }
            }
            Cone::Psd(s) => {
                let constant = r.clone().all(|i| row_is_zero(g, i));
                if constant {
                    let hm = smat(&h.as_slice()[r.clone()], s);
                    let (vals, vecs) = kernel::sym_eigen(&hm);
                    if vals[0] < -tol * (T::one() + hm.norm()) {
                        let v = vecs.column(0);
                        let vv = &v * v.transpose() * (-T::one() / vals[0]);
                        let mut z = DVector::zeros(m);
                        z.rows_mut(r.start, b.dim()).copy_from(&svec(&vv));
                        return early(prog, Status::PrimalInfeasible, Certificate::Primal(z));
                    }
                    continue;
                }
                cone_rows.extend(r);
                cones_out.push(Cone::Psd(s));
            }
        }
    }

    let pick = |rows: &[usize]| -> (DMatrix<T>, DVector<T>) {
        let mut gm = DMatrix::zeros(rows.len(), keep_vars.len());
        let mut hv = DVector::zeros(rows.len());
        for (a, &i) in rows.iter().enumerate() {
            for (bcol, &j) in keep_vars.iter().enumerate() {
                gm[(a, bcol)] = g[(i, j)];
            }
            hv[a] = h[i];
        }
        (gm, hv)
    };
    let (a, bvec) = pick(&eq_rows);
    let (gr, hr) = pick(&cone_rows);
    let c = DVector::from_iterator(keep_vars.len(), keep_vars.iter().map(|&j| prog.c[j]));
    let problem = Problem {
        c,
        a,
        b: bvec,
        g: gr,
        h: hr,
        blocks: layout(&cones_out),
    };
    let out = hsde::run(&problem, settings);

    let mut x = DVector::zeros(n);
    for (k, &j) in keep_vars.iter().enumerate() {
        x[j] = out.x[k];
    }
    let mut s = h - g * &x;
    for &i in &eq_rows {
        s[i] = T::zero();
    }
    let mut z = DVector::zeros(m);
    for (k, &i) in eq_rows.iter().enumerate() {
        z[i] = out.y[k];
    }
    for (k, &i) in cone_rows.iter().enumerate() {
        z[i] = out.z[k];
        s[i] = out.s[k];
    }
    let certificate = out.certificate.map(|c| match c {
        RawCertificate::Primal { y, z: zc } => {
            let mut full = DVector::zeros(m);
            for (k, &i) in eq_rows.iter().enumerate() {
                full[i] = y[k];
            }
            for (k, &i) in cone_rows.iter().enumerate() {
                full[i] = zc[k];
            }
            Certificate::Primal(full)
        }
        RawCertificate::Dual { x: xc } => {
            let mut full = DVector::zeros(n);
            for (k, &j) in keep_vars.iter().enumerate() {
                full[j] = xc[k];
            }
            Certificate::Dual(full)
        }
    });
    let objective = prog.c.dot(&x);
    let dual_objective = -h.dot(&z);
    ConicSolution {
        status: out.status,
        x,
        s,
        z,
        objective,
        dual_objective,
        gap: out.gap,
        primal_residual: out.primal_residual,
        dual_residual: out.dual_residual,
        iterations: out.iterations,
        certificate,
    }
}
