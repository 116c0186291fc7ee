//! Dense linear-algebra primitives: symmetric square roots, SVD with rank,
//! pseudoinverse, matrix exponential, Lyapunov and Riccati solvers.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("matrix is not symmetric (asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("matrix is indefinite beyond tolerance (min eigenvalue {0:e})")]
    IndefiniteBeyondTolerance(f64),
    #[error("expected a square matrix, got {0}x{1}")]
    NotSquare(usize, usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite entry in matrix")]
    NonFinite,
    #[error("iteration matrix is not Schur stable (spectral radius {0})")]
    UnstableF(f64),
    #[error("Riccati iteration found no stabilizing solution")]
    NoStabilizingSolution,
    #[error("singular linear system")]
    Singular,
}

pub type KernelResult<T> = Result<T, KernelError>;

/// Default eigenvalue clip tolerance for [`sym_sqrt`].
pub const DEFAULT_CLIP_TOL: f64 = 1e-12;

fn sym_tol<T: Real>() -> T {
    T::lit(1e-10).max(T::default_epsilon() * T::lit(1e3))
}

/// Builds a matrix from row-major data, rejecting non-finite entries.
pub fn from_rows<T: Real>(rows: usize, cols: usize, data: &[T]) -> KernelResult<DMatrix<T>> {
    if rows == 0 || cols == 0 || data.len() != rows * cols {
        return Err(KernelError::Dimension(format!(
            "{} entries for a {rows}x{cols} matrix",
            data.len()
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(KernelError::NonFinite);
    }
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

pub fn ensure_square<T: Real>(m: &DMatrix<T>) -> KernelResult<()> {
    if m.nrows() != m.ncols() {
        return Err(KernelError::NotSquare(m.nrows(), m.ncols()));
    }
    Ok(())
}

pub fn symmetrize<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    (m + m.transpose()) * T::lit(0.5)
}

pub fn asymmetry<T: Real>(m: &DMatrix<T>) -> T {
    (m - m.transpose()).norm() / T::one().max(m.norm())
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted ascending.
pub fn sym_eigen<T: Real>(m: &DMatrix<T>) -> (DVector<T>, DMatrix<T>) {
    let n = m.nrows();
    let eig = symmetrize(m).symmetric_eigen();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .partial_cmp(&eig.eigenvalues[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let vals = DVector::from_iterator(n, idx.iter().map(|&i| eig.eigenvalues[i]));
    let mut vecs = DMatrix::zeros(n, n);
    for (j, &i) in idx.iter().enumerate() {
        vecs.set_column(j, &eig.eigenvectors.column(i));
    }
    (vals, vecs)
}

pub fn min_eigenvalue<T: Real>(m: &DMatrix<T>) -> T {
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .fold(T::max_value().unwrap(), |a, v| a.min(*v))
}

/// Symmetric PSD square root. Rows and columns that are exactly zero stay
/// exactly zero in the result.
pub fn sym_sqrt<T: Real>(s: &DMatrix<T>, clip_tol: T) -> KernelResult<DMatrix<T>> {
    ensure_square(s)?;
    let asym = asymmetry(s);
    if asym > sym_tol::<T>() {
        return Err(KernelError::NotSymmetric(asym.as_f64()));
    }
    let n = s.nrows();
    let live: Vec<usize> = (0..n)
        .filter(|&i| s.row(i).iter().any(|v| *v != T::zero()))
        .collect();
    let mut out = DMatrix::zeros(n, n);
    if live.is_empty() {
        return Ok(out);
    }
    let sub = s.select_rows(&live).select_columns(&live);
    let (vals, vecs) = sym_eigen(&sub);
    if vals[0] < -clip_tol {
        return Err(KernelError::IndefiniteBeyondTolerance(vals[0].as_f64()));
    }
    let roots = vals.map(|v| v.max(T::zero()).sqrt());
    let root = &vecs * DMatrix::from_diagonal(&roots) * vecs.transpose();
    let root = symmetrize(&root);
    for (a, &i) in live.iter().enumerate() {
        for (b, &j) in live.iter().enumerate() {
            out[(i, j)] = root[(a, b)];
        }
    }
    Ok(out)
}

/// Inverse square root of a symmetric positive definite matrix.
pub fn sym_inv_sqrt<T: Real>(s: &DMatrix<T>) -> KernelResult<DMatrix<T>> {
    ensure_square(s)?;
    let (vals, vecs) = sym_eigen(s);
    if vals[0] <= T::zero() {
        return Err(KernelError::Singular);
    }
    let d = vals.map(|v| T::one() / v.sqrt());
    Ok(symmetrize(&(&vecs * DMatrix::from_diagonal(&d) * vecs.transpose())))
}

/// Full singular-value factorisation `M = L·diag(Λ)·Gᵀ`.
#[derive(Debug, Clone)]
pub struct SvdFactor<T: Real> {
    /// Orthogonal, rows(M) square.
    pub l: DMatrix<T>,
    /// Singular values, descending, length min(rows, cols).
    pub sigma: DVector<T>,
    /// Orthogonal, cols(M) square.
    pub g: DMatrix<T>,
    /// Count of singular values above `1e-10 · Λ_max`.
    pub rank: usize,
}

impl<T: Real> SvdFactor<T> {
    /// Rectangular diagonal matrix of singular values, shaped like the input.
    pub fn sigma_matrix(&self) -> DMatrix<T> {
        let mut s = DMatrix::zeros(self.l.nrows(), self.g.nrows());
        for (i, v) in self.sigma.iter().enumerate() {
            s[(i, i)] = *v;
        }
        s
    }
}

/// Orthonormal basis of the orthogonal complement of the columns of `u`
/// (assumed orthonormal).
pub fn orth_complement<T: Real>(u: &DMatrix<T>) -> DMatrix<T> {
    let m = u.nrows();
    let p = DMatrix::<T>::identity(m, m) - u * u.transpose();
    let (vals, vecs) = sym_eigen(&p);
    let keep: Vec<usize> = (0..m).filter(|&i| vals[i] > T::lit(0.5)).collect();
    vecs.select_columns(&keep)
}

/// One-sided Jacobi SVD of a matrix with `rows ≥ cols`: returns `A·V` (columns
/// mutually orthogonal) and `V`.
fn jacobi_columns<T: Real>(a: &DMatrix<T>) -> (DMatrix<T>, DMatrix<T>) {
    let n = a.ncols();
    let mut w = a.clone();
    let mut v = DMatrix::<T>::identity(n, n);
    let eps = T::default_epsilon();
    for _ in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = w.column(p).norm_squared();
                let beta = w.column(q).norm_squared();
                let gamma = w.column(p).dot(&w.column(q));
                if gamma == T::zero() || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                for m in [&mut w, &mut v] {
                    for i in 0..m.nrows() {
                        let (x, y) = (m[(i, p)], m[(i, q)]);
                        m[(i, p)] = c * x - s * y;
                        m[(i, q)] = s * x + c * y;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    (w, v)
}

pub fn svd_factor<T: Real>(m: &DMatrix<T>) -> SvdFactor<T> {
    let (rows, cols) = m.shape();
    let k = rows.min(cols);
    // Work on the tall orientation; swap the factors back afterwards.
    let tall = if rows >= cols { m.clone() } else { m.transpose() };
    let (w, v) = jacobi_columns(&tall);
    let norms: Vec<T> = (0..k).map(|j| w.column(j).norm()).collect();
    let mut idx: Vec<usize> = (0..k).collect();
    idx.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap_or(std::cmp::Ordering::Equal));
    let sigma = DVector::from_iterator(k, idx.iter().map(|&i| norms[i]));
    let right = v.select_columns(&idx);
    let floor = T::default_epsilon() * T::lit(k as f64) * if k > 0 { sigma[0] } else { T::zero() };
    let live: Vec<usize> = (0..k).filter(|&j| sigma[j] > floor && sigma[j] > T::zero()).collect();
    let mut left = DMatrix::zeros(tall.nrows(), live.len());
    for (c, &j) in live.iter().enumerate() {
        left.set_column(c, &(w.column(idx[j]) / sigma[j]));
    }
    let complete = |thin: DMatrix<T>, n: usize| -> DMatrix<T> {
        if thin.ncols() == n {
            return thin;
        }
        let comp = orth_complement(&thin);
        let mut full = DMatrix::zeros(n, n);
        full.columns_mut(0, thin.ncols()).copy_from(&thin);
        full.columns_mut(thin.ncols(), n - thin.ncols()).copy_from(&comp);
        full
    };
    let left = complete(left, tall.nrows());
    let (u_full, v_full) = if rows >= cols { (left, right) } else { (right, left) };
    let smax = if k > 0 { sigma[0] } else { T::zero() };
    let thresh = T::lit(1e-10) * smax;
    let rank = if smax == T::zero() {
        0
    } else {
        sigma.iter().filter(|v| **v > thresh).count()
    };
    SvdFactor {
        l: u_full,
        sigma,
        g: v_full,
        rank,
    }
}

/// Moore–Penrose pseudoinverse; singular values below the [`svd_factor`] rank cut are treated as zero.
pub fn pinv<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    let (rows, cols) = m.shape();
    let f = svd_factor(m);
    let mut sinv = DMatrix::zeros(cols, rows);
    for i in 0..f.rank {
        sinv[(i, i)] = T::one() / f.sigma[i];
    }
    &f.g * sinv * f.l.transpose()
}

pub fn norm1<T: Real>(m: &DMatrix<T>) -> T {
    (0..m.ncols())
        .map(|j| m.column(j).iter().fold(T::zero(), |acc, v| acc + v.abs()))
        .fold(T::zero(), |a, b| a.max(b))
}

const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

/// Matrix exponential by degree-13 Padé approximation with scaling and squaring.
pub fn expm<T: Real>(m: &DMatrix<T>) -> KernelResult<DMatrix<T>> {
    ensure_square(m)?;
    let n = m.nrows();
    let theta13 = T::lit(5.371920351148152);
    let nrm = norm1(m);
    let mut squarings = 0u32;
    if nrm > theta13 {
        squarings = (nrm / theta13).log2().ceil().as_f64().max(0.0) as u32;
    }
    let a = m * T::lit(0.5f64.powi(squarings as i32));
    let b: Vec<T> = PADE13.iter().map(|v| T::lit(*v)).collect();
    let id = DMatrix::<T>::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let u_inner = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9])
        + &a6 * b[7]
        + &a4 * b[5]
        + &a2 * b[3]
        + &id * b[1];
    let u = &a * u_inner;
    let v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8])
        + &a6 * b[6]
        + &a4 * b[4]
        + &a2 * b[2]
        + &id * b[0];
    let lu = (&v - &u).lu();
    let mut r = lu.solve(&(&v + &u)).ok_or(KernelError::Singular)?;
    for _ in 0..squarings {
        r = &r * &r;
    }
    Ok(r)
}

pub const SCHUR_MAX_ITERS: usize = 10_000;

/// Largest eigenvalue modulus. The QR iteration is bounded; when it stalls the
/// same spectrum is retried through `Mᵀ` and a reversal permutation, then
/// estimated by `‖M^(2^j)‖^(2^-j)`.
pub fn spectral_radius<T: Real>(m: &DMatrix<T>) -> T {
    let n = m.nrows();
    let reversed = DMatrix::from_fn(n, n, |i, j| m[(n - 1 - i, n - 1 - j)]);
    for cand in [m.clone(), m.transpose(), reversed] {
        if let Some(schur) = nalgebra::Schur::try_new(cand, T::default_epsilon(), SCHUR_MAX_ITERS) {
            return schur
                .complex_eigenvalues()
                .iter()
                .map(|c| (c.re * c.re + c.im * c.im).sqrt())
                .fold(T::zero(), |a, b| a.max(b));
        }
    }
    gelfand_radius(m)
}

/// `ρ(M) ≈ ‖M^(2^j)‖^(2^-j)` by repeated normalised squaring.
fn gelfand_radius<T: Real>(m: &DMatrix<T>) -> T {
    let mut p = m.clone();
    let mut log_scale = T::zero();
    let mut power = T::one();
    for _ in 0..60 {
        let nrm = p.norm();
        if nrm == T::zero() {
            return T::zero();
        }
        p /= nrm;
        log_scale += nrm.ln();
        p = &p * &p;
        log_scale *= T::lit(2.0);
        power *= T::lit(2.0);
    }
    let nrm = p.norm();
    if nrm == T::zero() {
        return T::zero();
    }
    ((log_scale + nrm.ln()) / power).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    /// `Σ = F Σ Fᵀ + W`
    Forward,
    /// `P = Fᵀ P F + W`
    Adjoint,
}

/// Discrete Lyapunov equation by Kronecker vectorisation.
pub fn dlyap<T: Real>(f: &DMatrix<T>, w: &DMatrix<T>, orientation: Orientation) -> KernelResult<DMatrix<T>> {
    ensure_square(f)?;
    ensure_square(w)?;
    let n = f.nrows();
    if w.nrows() != n {
        return Err(KernelError::Dimension(format!("F is {n}x{n}, W is {}x{}", w.nrows(), w.ncols())));
    }
    let rho = spectral_radius(f);
    if rho >= T::one() - T::lit(1e-9) {
        return Err(KernelError::UnstableF(rho.as_f64()));
    }
    let g = match orientation {
        Orientation::Forward => f.clone(),
        Orientation::Adjoint => f.transpose(),
    };
    let kron = g.kronecker(&g);
    let lhs = DMatrix::<T>::identity(n * n, n * n) - kron;
    let rhs = DVector::from_column_slice(w.as_slice());
    let x = lhs.lu().solve(&rhs).ok_or(KernelError::Singular)?;
    Ok(symmetrize(&DMatrix::from_column_slice(n, n, x.as_slice())))
}

pub fn dlyap_residual<T: Real>(f: &DMatrix<T>, w: &DMatrix<T>, x: &DMatrix<T>, orientation: Orientation) -> T {
    match orientation {
        Orientation::Forward => (x - f * x * f.transpose() - w).norm(),
        Orientation::Adjoint => (x - f.transpose() * x * f - w).norm(),
    }
}

/// Stabilising DARE solution and the associated LQR gain `u = K x`.
#[derive(Debug, Clone)]
pub struct DareSolution<T: Real> {
    pub p: DMatrix<T>,
    pub k: DMatrix<T>,
    pub iterations: usize,
}

pub const DARE_TOL: f64 = 1e-13;
pub const DARE_MAX_ITERS: usize = 200;

/// Discrete algebraic Riccati equation by the structure-preserving doubling algorithm.
pub fn dare<T: Real>(
    a: &DMatrix<T>,
    b: &DMatrix<T>,
    q: &DMatrix<T>,
    r: &DMatrix<T>,
) -> KernelResult<DareSolution<T>> {
    ensure_square(a)?;
    let n = a.nrows();
    if b.nrows() != n || q.shape() != (n, n) || r.shape() != (b.ncols(), b.ncols()) {
        return Err(KernelError::Dimension("dare operand shapes".into()));
    }
    let rinv = r.clone().cholesky().ok_or(KernelError::Singular)?.inverse();
    let id = DMatrix::<T>::identity(n, n);
    let mut ak = a.clone();
    let mut gk = b * &rinv * b.transpose();
    let mut hk = symmetrize(q);
    let tol = T::lit(DARE_TOL);
    let mut converged = None;
    for it in 1..=DARE_MAX_ITERS {
        let w = &id + &gk * &hk;
        let wlu = w.lu();
        let w_a = wlu.solve(&ak).ok_or(KernelError::NoStabilizingSolution)?;
        let w_g = wlu.solve(&gk).ok_or(KernelError::NoStabilizingSolution)?;
        let a_next = &ak * &w_a;
        let g_next = symmetrize(&(&gk + &ak * w_g * ak.transpose()));
        let h_next = symmetrize(&(&hk + ak.transpose() * &hk * &w_a));
        let delta = (&h_next - &hk).norm();
        let scale = T::one().max(h_next.norm());
        if !h_next.iter().all(|v| v.is_finite()) {
            return Err(KernelError::NoStabilizingSolution);
        }
        ak = a_next;
        gk = g_next;
        hk = h_next;
        if delta <= tol * scale {
            converged = Some(it);
            break;
        }
    }
    let iterations = converged.ok_or(KernelError::NoStabilizingSolution)?;
    let p = hk;
    let btpb = b.transpose() * &p * b + r;
    let k = -btpb
        .lu()
        .solve(&(b.transpose() * &p * a))
        .ok_or(KernelError::Singular)?;
    if spectral_radius(&(a + b * &k)) >= T::one() {
        return Err(KernelError::NoStabilizingSolution);
    }
    Ok(DareSolution { p, k, iterations })
}

pub fn dare_residual<T: Real>(
    a: &DMatrix<T>,
    b: &DMatrix<T>,
    q: &DMatrix<T>,
    r: &DMatrix<T>,
    p: &DMatrix<T>,
) -> T {
    let btpb = b.transpose() * p * b + r;
    let inner = btpb
        .lu()
        .solve(&(b.transpose() * p * a))
        .unwrap_or_else(|| DMatrix::from_element(b.ncols(), a.ncols(), T::from_f64(f64::NAN).unwrap()));
    (a.transpose() * p * a - p - a.transpose() * p * b * inner + q).norm()
}

/// Block-diagonal assembly.
pub fn block_diag<T: Real>(blocks: &[DMatrix<T>]) -> DMatrix<T> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), b.shape()).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

pub fn matrix_power<T: Real>(a: &DMatrix<T>, k: usize) -> DMatrix<T> {
    let n = a.nrows();
    let mut out = DMatrix::<T>::identity(n, n);
    for _ in 0..k {
        out = &out * a;
    }
    out
}
