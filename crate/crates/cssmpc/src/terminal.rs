//! Terminal ingredients: assignable covariance, assignment gain, terminal
//! mean penalty, tightened terminal rows and the maximal invariant mean set.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::chance::{self, ChanceError};
use crate::conic::{self, smat, svec, Cone, ConicProgram, Settings, Status};
use crate::kernel::{self, KernelError, Orientation};
use crate::scalar::Real;
use crate::system::{HalfspaceRow, HalfspaceSet, LtiSystem, Scenario, TerminalMode};

/// Lower bound `Σ ⪰ εI` standing in for strict definiteness.
pub const SIGMA_FLOOR: f64 = 1e-9;
pub const REDUNDANCY_TOL: f64 = 1e-9;
pub const MPIS_MAX_ITERS: usize = 500;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TerminalError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Chance(#[from] ChanceError),
    #[error("conic solve ended with {0:?}")]
    Solver(Status),
    #[error("singular factors of the assignability conditions disagree (mismatch {0:e})")]
    SvdMismatch(f64),
    #[error("assignment gain fails the post-check (residual {residual:e}, spectral radius {radius})")]
    UnstableResult { residual: f64, radius: f64 },
    #[error(
        "terminal set is empty: {kind} row {row} needs margin {required:.6} but its bound is {available:.6}"
    )]
    TerminalSetEmpty {
        kind: &'static str,
        row: usize,
        required: f64,
        available: f64,
    },
    #[error("invariant set not finitely determined within {0} iterations")]
    NotFinitelyDetermined(usize),
    #[error("redundancy LP unbounded; the rows do not bound the closed-loop directions")]
    Unbounded,
}

/// Which procedure produced the terminal covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    LyapunovLqr,
    NearestAssignable,
    Explicit,
}

#[derive(Debug, Clone)]
pub struct TerminalIngredients<T: Real> {
    pub sigma_f: DMatrix<T>,
    pub k_tilde: DMatrix<T>,
    pub p_mean: DMatrix<T>,
    pub xf_mu: HalfspaceSet<T>,
    pub provenance: Provenance,
    /// `‖Σf − FΣfFᵀ − DDᵀ‖_F`.
    pub residual: T,
    /// `ρ(A + BK̃)`.
    pub radius: T,
}

pub fn lyapunov_lqr_cov<T: Real>(
    sys: &LtiSystem<T>,
    q: &DMatrix<T>,
    r: &DMatrix<T>,
) -> Result<(DMatrix<T>, DMatrix<T>), TerminalError> {
    let sol = kernel::dare(&sys.a, &sys.b, q, r)?;
    let f = &sys.a + &sys.b * &sol.k;
    let sigma = kernel::dlyap(&f, &sys.ddt(), Orientation::Forward)?;
    Ok((sigma, sol.k))
}

/// Covariance of the LQR closed loop after `steps` steps from zero.
pub fn lqr_propagated_cov<T: Real>(
    sys: &LtiSystem<T>,
    q: &DMatrix<T>,
    r: &DMatrix<T>,
    steps: usize,
) -> Result<DMatrix<T>, TerminalError> {
    let k = kernel::dare(&sys.a, &sys.b, q, r)?.k;
    let f = &sys.a + &sys.b * k;
    let ddt = sys.ddt();
    let mut s = DMatrix::zeros(sys.nx(), sys.nx());
    for _ in 0..steps {
        s = kernel::symmetrize(&(&f * &s * f.transpose() + &ddt));
    }
    Ok(s)
}

/// Orthonormal basis of `range(B)^⊥`.
fn input_null_basis<T: Real>(b: &DMatrix<T>) -> DMatrix<T> {
    let f = kernel::svd_factor(b);
    let n = b.nrows();
    f.l.columns(f.rank, n - f.rank).into_owned()
}

/// Frobenius-nearest assignable covariance to `sigma_d`, with the extra
/// floor `Σ ⪰ DDᵀ + margin·I`.
pub fn nearest_assignable<T: Real>(
    sigma_d: &DMatrix<T>,
    sys: &LtiSystem<T>,
    margin: T,
) -> Result<DMatrix<T>, TerminalError> {
    let n = sys.nx();
    let dim = n * (n + 1) / 2;
    let nb = input_null_basis(&sys.b);
    let kn = nb.ncols();
    let keq = kn * (kn + 1) / 2;
    let ddt = sys.ddt();

    // Variables: svec(Σ) then the Frobenius epigraph t.
    let nv = dim + 1;
    let rows = keq + (1 + dim) + 2 * dim;
    let mut g = DMatrix::zeros(rows, nv);
    let mut h = DVector::zeros(rows);
    let mut basis = DVector::zeros(dim);
    for k in 0..dim {
        basis.fill(T::zero());
        basis[k] = T::one();
        let e = smat(basis.as_slice(), n);
        if keq > 0 {
            let img = nb.transpose() * (&e - &sys.a * &e * sys.a.transpose()) * &nb;
            g.view_mut((0, k), (keq, 1)).copy_from(&svec(&img));
        }
    }
    if keq > 0 {
        h.rows_mut(0, keq).copy_from(&svec(&(nb.transpose() * &ddt * &nb)));
    }
    let mut off = keq;
    g[(off, dim)] = -T::one();
    let sd = svec(sigma_d);
    for k in 0..dim {
        g[(off + 1 + k, k)] = -T::one();
        h[off + 1 + k] = -sd[k];
    }
    off += 1 + dim;
    let floors = [
        DMatrix::<T>::identity(n, n) * T::lit(SIGMA_FLOOR),
        &ddt + DMatrix::<T>::identity(n, n) * margin,
    ];
    for fl in &floors {
        let sf = svec(fl);
        for k in 0..dim {
            g[(off + k, k)] = -T::one();
            h[off + k] = -sf[k];
        }
        off += dim;
    }
    let mut c = DVector::zeros(nv);
    c[dim] = T::one();
    let mut cones = Vec::new();
    if keq > 0 {
        cones.push(Cone::Zero(keq));
    }
    cones.extend([Cone::Soc(1 + dim), Cone::Psd(n), Cone::Psd(n)]);
    let prog = ConicProgram::new(c, g, h, cones).expect("well-formed projection program");
    let sol = conic::solve(&prog, &Settings::default());
    if !sol.status.is_solved() {
        return Err(TerminalError::Solver(sol.status));
    }
    Ok(kernel::symmetrize(&smat(&sol.x.as_slice()[..dim], n)))
}

/// `‖Σf − FΣfFᵀ − DDᵀ‖_F` and `ρ(F)` for `F = A + BK̃`.
pub fn verify_assignable<T: Real>(sigma_f: &DMatrix<T>, k_tilde: &DMatrix<T>, sys: &LtiSystem<T>) -> (T, T) {
    let f = &sys.a + &sys.b * k_tilde;
    let res = (sigma_f - &f * sigma_f * f.transpose() - sys.ddt()).norm();
    (res, kernel::spectral_radius(&f))
}

/// Gain `K̃` with `Σf = (A+BK̃)Σf(A+BK̃)ᵀ + DDᵀ`.
pub fn assignment_gain<T: Real>(sigma_f: &DMatrix<T>, sys: &LtiSystem<T>) -> Result<DMatrix<T>, TerminalError> {
    let n = sys.nx();
    let clip = T::lit(kernel::DEFAULT_CLIP_TOL).max(T::lit(1e-10) * sigma_f.norm());
    let s = kernel::sym_sqrt(sigma_f, clip)?;
    let s_inv = kernel::pinv(&s);
    let s1 = kernel::sym_sqrt(&kernel::symmetrize(&(sigma_f - sys.ddt())), clip)?;
    let nb = input_null_basis(&sys.b);
    let (g1, g2) = if nb.ncols() == 0 {
        (DMatrix::identity(n, n), DMatrix::identity(n, n))
    } else {
        let m1 = nb.transpose() * &s1;
        let m2 = nb.transpose() * &sys.a * &s;
        let f1 = kernel::svd_factor(&m1);
        let r = f1.rank;
        let lr = f1.l.columns(0, r).into_owned();
        let mut g2 = DMatrix::zeros(n, n);
        for i in 0..r {
            let col = m2.transpose() * lr.column(i) / f1.sigma[i];
            g2.set_column(i, &col);
        }
        let g2r = g2.columns(0, r).into_owned();
        let fit = (&m2 - &lr * DMatrix::from_diagonal(&f1.sigma.rows(0, r).into_owned()) * g2r.transpose()).norm();
        let ortho = (g2r.transpose() * &g2r - DMatrix::identity(r, r)).norm();
        let mismatch = (fit / (T::one() + m2.norm())).max(ortho);
        if mismatch > T::lit(1e-6) {
            return Err(TerminalError::SvdMismatch(mismatch.as_f64()));
        }
        if r < n {
            let y = (DMatrix::identity(n, n) - &g2r * g2r.transpose()) * f1.g.columns(r, n - r);
            let pf = kernel::svd_factor(&y);
            let k = n - r;
            let polar = pf.l.columns(0, k) * pf.g.transpose();
            g2.columns_mut(r, k).copy_from(&polar);
        }
        (f1.g, g2)
    };
    let k = kernel::pinv(&sys.b) * (&s1 * &g1 * g2.transpose() * &s_inv - &sys.a);
    let (residual, radius) = verify_assignable(sigma_f, &k, sys);
    if !(residual <= T::lit(1e-6) && radius < T::one()) {
        return Err(TerminalError::UnstableResult {
            residual: residual.as_f64(),
            radius: radius.as_f64(),
        });
    }
    Ok(k)
}

/// `P = FᵀPF + Q + K̃ᵀRK̃`.
pub fn p_mean<T: Real>(
    sys: &LtiSystem<T>,
    k_tilde: &DMatrix<T>,
    q: &DMatrix<T>,
    r: &DMatrix<T>,
) -> Result<DMatrix<T>, TerminalError> {
    let f = &sys.a + &sys.b * k_tilde;
    let w = q + k_tilde.transpose() * r * k_tilde;
    Ok(kernel::dlyap(&f, &kernel::symmetrize(&w), Orientation::Adjoint)?)
}

pub fn p_mean_residual<T: Real>(sys: &LtiSystem<T>, k_tilde: &DMatrix<T>, q: &DMatrix<T>, r: &DMatrix<T>, p: &DMatrix<T>) -> T {
    let f = &sys.a + &sys.b * k_tilde;
    (f.transpose() * p * &f + q + k_tilde.transpose() * r * k_tilde - p).norm()
}

/// Stationary stage-cost level `tr((Q + K̃ᵀRK̃)Σf)`.
pub fn stage_cost_bound<T: Real>(sigma_f: &DMatrix<T>, k_tilde: &DMatrix<T>, q: &DMatrix<T>, r: &DMatrix<T>) -> T {
    ((q + k_tilde.transpose() * r * k_tilde) * sigma_f).trace()
}

/// Deterministic rows in `μ` obtained by tightening every constraint with `Σf`.
pub fn terminal_rows<T: Real>(
    sigma_f: &DMatrix<T>,
    k_tilde: &DMatrix<T>,
    state: &HalfspaceSet<T>,
    input: &HalfspaceSet<T>,
) -> Result<HalfspaceSet<T>, TerminalError> {
    let n = sigma_f.nrows();
    let mut rows = Vec::new();
    for (i, row) in state.rows.iter().enumerate() {
        let m = chance::static_margin(&row.alpha, sigma_f, row.p)?;
        if m > row.beta {
            return Err(TerminalError::TerminalSetEmpty {
                kind: "state",
                row: i,
                required: m.as_f64(),
                available: row.beta.as_f64(),
            });
        }
        rows.push(HalfspaceRow {
            alpha: row.alpha.clone(),
            beta: row.beta - m,
            p: T::lit(0.5),
        });
    }
    let ksk = k_tilde * sigma_f * k_tilde.transpose();
    for (i, row) in input.rows.iter().enumerate() {
        let m = chance::static_margin(&row.alpha, &ksk, row.p)?;
        if m > row.beta {
            return Err(TerminalError::TerminalSetEmpty {
                kind: "input",
                row: i,
                required: m.as_f64(),
                available: row.beta.as_f64(),
            });
        }
        let alpha = k_tilde.transpose() * &row.alpha;
        if alpha.iter().all(|v| *v == T::zero()) {
            continue;
        }
        rows.push(HalfspaceRow {
            alpha,
            beta: row.beta - m,
            p: T::lit(0.5),
        });
    }
    Ok(HalfspaceSet::new(rows, n).expect("rows have state dimension"))
}

/// Maximum of `cᵀμ` over `{Hμ ≤ h}`; `None` if unbounded.
fn support<T: Real>(c: &DVector<T>, hm: &DMatrix<T>, hv: &DVector<T>) -> Result<Option<T>, TerminalError> {
    let prog = ConicProgram::new(-c, hm.clone(), hv.clone(), vec![Cone::NonNeg(hv.len())])
        .expect("well-formed LP");
    let sol = conic::solve(&prog, &Settings::default());
    match sol.status {
        s if s.is_solved() => Ok(Some(-sol.objective)),
        Status::DualInfeasible => Ok(None),
        s => Err(TerminalError::Solver(s)),
    }
}

fn stack<T: Real>(rows: &[(DVector<T>, T)]) -> (DMatrix<T>, DVector<T>) {
    let n = rows.first().map_or(0, |r| r.0.len());
    let mut hm = DMatrix::zeros(rows.len(), n);
    let mut hv = DVector::zeros(rows.len());
    for (i, (a, b)) in rows.iter().enumerate() {
        hm.set_row(i, &a.transpose());
        hv[i] = *b;
    }
    (hm, hv)
}

/// Gilbert–Tan construction of the maximal positively invariant subset of
/// `rows` under `μ ↦ Fμ`, pruned of redundant rows.
pub fn maximal_invariant_set<T: Real>(f: &DMatrix<T>, rows: &HalfspaceSet<T>) -> Result<HalfspaceSet<T>, TerminalError> {
    let n = f.nrows();
    let base: Vec<(DVector<T>, T)> = rows.rows.iter().map(|r| (r.alpha.clone(), r.beta)).collect();
    let mut current = base.clone();
    let mut fi = DMatrix::<T>::identity(n, n);
    let tol = T::lit(REDUNDANCY_TOL);
    let mut done = false;
    for _ in 1..MPIS_MAX_ITERS {
        fi = f * fi;
        let (hm, hv) = stack(&current);
        let mut added = Vec::new();
        for (a, b) in &base {
            let cand = fi.transpose() * a;
            match support(&cand, &hm, &hv)? {
                None => return Err(TerminalError::Unbounded),
                Some(v) if v <= *b + tol => {}
                Some(_) => added.push((cand, *b)),
            }
        }
        if added.is_empty() {
            done = true;
            break;
        }
        current.extend(added);
    }
    if !done {
        return Err(TerminalError::NotFinitelyDetermined(MPIS_MAX_ITERS));
    }
    // Prune rows implied by the others.
    let mut keep: Vec<(DVector<T>, T)> = current.clone();
    let mut i = 0;
    while i < keep.len() {
        if keep.len() == 1 {
            break;
        }
        let others: Vec<(DVector<T>, T)> =
            keep.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, r)| r.clone()).collect();
        let (hm, hv) = stack(&others);
        let redundant = matches!(support(&keep[i].0, &hm, &hv)?, Some(v) if v <= keep[i].1 + tol);
        if redundant {
            keep.remove(i);
        } else {
            i += 1;
        }
    }
    let out = keep
        .into_iter()
        .map(|(alpha, beta)| HalfspaceRow { alpha, beta, p: T::lit(0.5) })
        .collect();
    Ok(HalfspaceSet::new(out, n).expect("rows have state dimension"))
}

/// Box rows `|μ_i| ≤ b`.
pub fn box_rows<T: Real>(n: usize, b: T) -> Vec<HalfspaceRow<T>> {
    let mut rows = Vec::with_capacity(2 * n);
    for i in 0..n {
        for sign in [T::one(), -T::one()] {
            let mut alpha = DVector::zeros(n);
            alpha[i] = sign;
            rows.push(HalfspaceRow { alpha, beta: b, p: T::lit(0.5) });
        }
    }
    rows
}

/// Builds every terminal ingredient for a scenario.
pub fn build<T: Real>(sc: &Scenario<T>) -> Result<TerminalIngredients<T>, TerminalError> {
    let sys = &sc.system;
    let (sigma_f, k_tilde, provenance) = match &sc.terminal_mode {
        TerminalMode::LyapunovLqr => {
            let (s, k) = lyapunov_lqr_cov(sys, &sc.q, &sc.r)?;
            (s, k, Provenance::LyapunovLqr)
        }
        TerminalMode::NearestAssignable { desired_steps, noise_margin } => {
            let sd = lqr_propagated_cov(sys, &sc.q, &sc.r, *desired_steps)?;
            let s = nearest_assignable(&sd, sys, *noise_margin)?;
            let k = assignment_gain(&s, sys)?;
            (s, k, Provenance::NearestAssignable)
        }
        TerminalMode::Explicit(s) => {
            let k = assignment_gain(s, sys)?;
            (s.clone(), k, Provenance::Explicit)
        }
    };
    let (residual, radius) = verify_assignable(&sigma_f, &k_tilde, sys);
    let p = p_mean(sys, &k_tilde, &sc.q, &sc.r)?;
    let mut rows = terminal_rows(&sigma_f, &k_tilde, &sc.state_constraints, &sc.input_constraints)?;
    if let Some(b) = sc.mean_box {
        rows.rows.extend(box_rows(sys.nx(), b));
    }
    let f = &sys.a + &sys.b * &k_tilde;
    let xf_mu = maximal_invariant_set(&f, &rows)?;
    Ok(TerminalIngredients {
        sigma_f,
        k_tilde,
        p_mean: p,
        xf_mu,
        provenance,
        residual,
        radius,
    })
}
