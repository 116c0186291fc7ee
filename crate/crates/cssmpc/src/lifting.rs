//! Stacked-horizon representation `X = 𝒜 x₀ + ℬ U + 𝒟 W`.

use nalgebra::{DMatrix, DVector};

use crate::kernel::{self, KernelResult};
use crate::scalar::Real;
use crate::system::LtiSystem;

#[derive(Debug, Clone)]
pub struct LiftedSystem<T: Real> {
    /// `(N+1)n_x × n_x`, block row t is `Aᵗ`.
    pub script_a: DMatrix<T>,
    /// `(N+1)n_x × N n_u`, block (t, j) is `A^{t-1-j} B` for `j < t`.
    pub script_b: DMatrix<T>,
    /// `(N+1)n_x × N n_w`, block (t, j) is `A^{t-1-j} D` for `j < t`.
    pub script_d: DMatrix<T>,
    pub horizon: usize,
    pub nx: usize,
    pub nu: usize,
    pub nw: usize,
}

pub fn lift<T: Real>(sys: &LtiSystem<T>, horizon: usize) -> LiftedSystem<T> {
    assert!(horizon >= 1, "horizon must be at least 1");
    let (nx, nu, nw) = (sys.nx(), sys.nu(), sys.nw());
    let rows = (horizon + 1) * nx;
    let mut script_a = DMatrix::zeros(rows, nx);
    let mut script_b = DMatrix::zeros(rows, horizon * nu);
    let mut script_d = DMatrix::zeros(rows, horizon * nw);
    let mut powers = vec![DMatrix::<T>::identity(nx, nx)];
    for t in 1..=horizon {
        let next = &sys.a * &powers[t - 1];
        powers.push(next);
    }
    for t in 0..=horizon {
        script_a.view_mut((t * nx, 0), (nx, nx)).copy_from(&powers[t]);
        for j in 0..t {
            let p = &powers[t - 1 - j];
            script_b.view_mut((t * nx, j * nu), (nx, nu)).copy_from(&(p * &sys.b));
            script_d.view_mut((t * nx, j * nw), (nx, nw)).copy_from(&(p * &sys.d));
        }
    }
    LiftedSystem {
        script_a,
        script_b,
        script_d,
        horizon,
        nx,
        nu,
        nw,
    }
}

impl<T: Real> LiftedSystem<T> {
    pub fn state_len(&self) -> usize {
        (self.horizon + 1) * self.nx
    }

    pub fn input_len(&self) -> usize {
        self.horizon * self.nu
    }

    /// Selector `E_k` with `E_k X = x_k`.
    pub fn e_sel(&self, k: usize) -> DMatrix<T> {
        assert!(k <= self.horizon);
        let mut e = DMatrix::zeros(self.nx, self.state_len());
        e.view_mut((0, k * self.nx), (self.nx, self.nx))
            .fill_with_identity();
        e
    }

    /// Selector `F_k` with `F_k U = u_k`.
    pub fn f_sel(&self, k: usize) -> DMatrix<T> {
        assert!(k < self.horizon);
        let mut f = DMatrix::zeros(self.nu, self.input_len());
        f.view_mut((0, k * self.nu), (self.nu, self.nu))
            .fill_with_identity();
        f
    }

    /// Block `t` of a stacked state vector.
    pub fn state_block(&self, x: &DVector<T>, t: usize) -> DVector<T> {
        x.rows(t * self.nx, self.nx).into_owned()
    }

    /// Mean trajectory `𝒜μ + ℬV + offset`.
    pub fn mean(&self, mu: &DVector<T>, v: &DVector<T>, offset: &DVector<T>) -> DVector<T> {
        &self.script_a * mu + &self.script_b * v + offset
    }
}

/// Prior covariance of the open-loop deviation and its symmetric square root.
#[derive(Debug, Clone)]
pub struct SigmaY<T: Real> {
    pub sigma: DMatrix<T>,
    pub sqrt: DMatrix<T>,
}

pub fn sigma_y<T: Real>(lifted: &LiftedSystem<T>, sigma0: &DMatrix<T>) -> KernelResult<SigmaY<T>> {
    let sigma = &lifted.script_a * sigma0 * lifted.script_a.transpose()
        + &lifted.script_d * lifted.script_d.transpose();
    let sigma = kernel::symmetrize(&sigma);
    let clip = T::lit(kernel::DEFAULT_CLIP_TOL).max(T::lit(1e-10) * sigma.norm());
    let sqrt = kernel::sym_sqrt(&sigma, clip)?;
    Ok(SigmaY { sigma, sqrt })
}

/// Mean shift from the known scalar signal: block t is `Σ_{j<t} A^{t-1-j} c ρ_j`.
pub fn affine_offset<T: Real>(sys: &LtiSystem<T>, horizon: usize, signal: &[T]) -> DVector<T> {
    assert_eq!(signal.len(), horizon, "signal length must equal the horizon");
    let nx = sys.nx();
    let mut out = DVector::zeros((horizon + 1) * nx);
    let Some(c) = &sys.c else {
        return out;
    };
    let mut x = DVector::zeros(nx);
    for t in 1..=horizon {
        x = &sys.a * x + c * signal[t - 1];
        out.rows_mut(t * nx, nx).copy_from(&x);
    }
    out
}

/// `E_k (I + ℬK) Σ_y (I + ℬK)ᵀ E_kᵀ`.
pub fn closed_loop_cov<T: Real>(lifted: &LiftedSystem<T>, k_stack: &DMatrix<T>, sigma_y: &DMatrix<T>, k: usize) -> DMatrix<T> {
    let n = lifted.state_len();
    let m = DMatrix::<T>::identity(n, n) + &lifted.script_b * k_stack;
    let rows = (lifted.e_sel(k) * m).into_owned();
    kernel::symmetrize(&(&rows * sigma_y * rows.transpose()))
}

/// Block-diagonal stage weights.
#[derive(Debug, Clone)]
pub struct CostBlocks<T: Real> {
    /// Q blocks with terminal block `P_mean`.
    pub q_mean: DMatrix<T>,
    /// Q blocks with terminal block 0.
    pub q_cov: DMatrix<T>,
    pub r_bar: DMatrix<T>,
}

pub fn cost_blocks<T: Real>(q: &DMatrix<T>, r: &DMatrix<T>, p_mean: &DMatrix<T>, horizon: usize) -> CostBlocks<T> {
    let nx = q.nrows();
    let mut mean_blocks = vec![q.clone(); horizon];
    mean_blocks.push(p_mean.clone());
    let mut cov_blocks = vec![q.clone(); horizon];
    cov_blocks.push(DMatrix::zeros(nx, nx));
    CostBlocks {
        q_mean: kernel::block_diag(&mean_blocks),
        q_cov: kernel::block_diag(&cov_blocks),
        r_bar: kernel::block_diag(&vec![r.clone(); horizon]),
    }
}
