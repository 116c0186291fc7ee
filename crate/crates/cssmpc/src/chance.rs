//! Normal quantiles and deterministic surrogates of half-space chance
//! constraints under affine feedback policies.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::kernel::{self, KernelResult};
use crate::lifting::{LiftedSystem, SigmaY};
use crate::scalar::Real;
use crate::system::HalfspaceRow;

pub const P_MIN: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChanceError {
    #[error("probability {0} outside ({P_MIN}, 1 - {P_MIN})")]
    RiskOutOfRange(f64),
}

/// Standard normal CDF.
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, k| acc * x + k)
}

/// Wichura's AS241 rational approximation.
fn as241(p: f64) -> f64 {
    const A: [f64; 8] = [
        3.387_132_872_796_366_5,
        1.331_416_678_917_843_8e2,
        1.971_590_950_306_551_3e3,
        1.373_169_376_550_946e4,
        4.592_195_393_154_987e4,
        6.726_577_092_700_87e4,
        3.343_057_558_358_813e4,
        2.509_080_928_730_122_7e3,
    ];
    const B: [f64; 8] = [
        1.0,
        4.231_333_070_160_091e1,
        6.871_870_074_920_579e2,
        5.394_196_021_424_751e3,
        2.121_379_430_158_66e4,
        3.930_789_580_009_271e4,
        2.872_908_573_572_194_3e4,
        5.226_495_278_852_545e3,
    ];
    const C: [f64; 8] = [
        1.423_437_110_749_683_5,
        4.630_337_846_156_546,
        5.769_497_221_460_691,
        3.647_848_324_763_204_5,
        1.270_458_252_452_368_4,
        2.417_807_251_774_506e-1,
        2.272_384_498_926_918_4e-2,
        7.745_450_142_783_414e-4,
    ];
    const D: [f64; 8] = [
        1.0,
        2.053_191_626_637_759,
        1.676_384_830_183_803_8,
        6.897_673_349_851e-1,
        1.481_039_764_274_800_8e-1,
        1.519_866_656_361_645_7e-2,
        5.475_938_084_995_345e-4,
        1.050_750_071_644_416_9e-9,
    ];
    const E: [f64; 8] = [
        6.657_904_643_501_103,
        5.463_784_911_164_114,
        1.784_826_539_917_291_3,
        2.965_605_718_285_048_7e-1,
        2.653_218_952_657_612_4e-2,
        1.242_660_947_388_078_4e-3,
        2.711_555_568_743_487_6e-5,
        2.010_334_399_292_288_1e-7,
    ];
    const F: [f64; 8] = [
        1.0,
        5.998_322_065_558_88e-1,
        1.369_298_809_227_358e-1,
        1.487_536_129_085_061_5e-2,
        7.868_691_311_456_133e-4,
        1.846_318_317_510_054_8e-5,
        1.421_511_758_316_446e-7,
        2.043_131_992_170_258_6e-15,
    ];
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * poly(&A, r) / poly(&B, r);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let r = (-r.ln()).sqrt();
    let z = if r <= 5.0 {
        let r = r - 1.6;
        poly(&C, r) / poly(&D, r)
    } else {
        let r = r - 5.0;
        poly(&E, r) / poly(&F, r)
    };
    if q < 0.0 {
        -z
    } else {
        z
    }
}

/// Inverse standard normal CDF with one Newton polish step.
pub fn inv_norm_cdf(p: f64) -> Result<f64, ChanceError> {
    if !(p > P_MIN && p < 1.0 - P_MIN) {
        return Err(ChanceError::RiskOutOfRange(p));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    let z = as241(p);
    Ok(z - (norm_cdf(z) - p) / norm_pdf(z))
}

/// `Φ⁻¹(1 − p)` for a risk level `p ∈ [P_MIN, 0.5]`.
pub fn quantile_scale<T: Real>(p: T) -> Result<T, ChanceError> {
    let pf = p.as_f64();
    if !(pf >= P_MIN && pf <= 0.5) {
        return Err(ChanceError::RiskOutOfRange(pf));
    }
    if pf == 0.5 {
        return Ok(T::zero());
    }
    Ok(T::lit(inv_norm_cdf(1.0 - pf)?))
}

/// One scalar feedback coefficient of the policy.
#[derive(Debug, Clone)]
pub struct GainEntry<T: Real> {
    /// Row of the stacked input it acts on.
    pub input_row: usize,
    /// Measurement row `g` with the coefficient multiplying `gᵀξ`.
    pub g: DVector<T>,
    /// `Lᵀg`.
    pub lg: DVector<T>,
    /// Block row of the gain (time step of the input).
    pub step: usize,
    /// Block column (step of the fed-back signal).
    pub source: usize,
    pub row: usize,
    pub col: usize,
}

/// Affine policy class `U = V + Γξ` with `Γ = Σ θ_v e_{r_v} g_vᵀ`, where the
/// open-loop deviation is `Ψξ` and `ξ` has covariance `LLᵀ`.
#[derive(Debug, Clone)]
pub struct PolicyModel<T: Real> {
    pub psi: DMatrix<T>,
    pub factor: DMatrix<T>,
    /// `LᵀΨᵀ`.
    pub lpsi_t: DMatrix<T>,
    pub gains: Vec<GainEntry<T>>,
}

impl<T: Real> PolicyModel<T> {
    /// Block-diagonal state feedback `u_t = v_t + K_t y_t` on the open-loop deviation `y`.
    pub fn state_feedback(lifted: &LiftedSystem<T>, sy: &SigmaY<T>) -> Self {
        let (nx, nu, n) = (lifted.nx, lifted.nu, lifted.horizon);
        let len = lifted.state_len();
        let l = sy.sqrt.clone();
        let mut gains = Vec::new();
        for t in 0..n {
            for i in 0..nu {
                for j in 0..nx {
                    let idx = t * nx + j;
                    let lg = l.row(idx).transpose();
                    if lg.iter().all(|v| *v == T::zero()) {
                        continue;
                    }
                    let mut g = DVector::zeros(len);
                    g[idx] = T::one();
                    gains.push(GainEntry {
                        input_row: t * nu + i,
                        g,
                        lg,
                        step: t,
                        source: t,
                        row: i,
                        col: j,
                    });
                }
            }
        }
        let psi = DMatrix::identity(len, len);
        let lpsi_t = l.transpose();
        PolicyModel {
            psi,
            factor: l,
            lpsi_t,
            gains,
        }
    }

    /// Causal disturbance feedback `u_t = v_t + M_{t,0} x̃₀ + Σ_{τ<t} M_{t,τ} D w_τ`.
    pub fn disturbance_feedback(lifted: &LiftedSystem<T>, d: &DMatrix<T>, sigma0_sqrt: &DMatrix<T>) -> Self {
        let (nx, nu, nw, n) = (lifted.nx, lifted.nu, lifted.nw, lifted.horizon);
        let dim = nx + n * nw;
        let mut psi = DMatrix::zeros(lifted.state_len(), dim);
        psi.view_mut((0, 0), (lifted.state_len(), nx)).copy_from(&lifted.script_a);
        psi.view_mut((0, nx), (lifted.state_len(), n * nw)).copy_from(&lifted.script_d);
        let mut l = DMatrix::identity(dim, dim);
        l.view_mut((0, 0), (nx, nx)).copy_from(sigma0_sqrt);
        let mut gains = Vec::new();
        let push = |g: DVector<T>, t: usize, src: usize, i: usize, j: usize, gains: &mut Vec<GainEntry<T>>| {
            let lg = l.transpose() * &g;
            if lg.iter().all(|v| *v == T::zero()) {
                return;
            }
            gains.push(GainEntry {
                input_row: t * nu + i,
                g,
                lg,
                step: t,
                source: src,
                row: i,
                col: j,
            });
        };
        for t in 0..n {
            for i in 0..nu {
                for j in 0..nx {
                    let mut g = DVector::zeros(dim);
                    g[j] = T::one();
                    push(g, t, 0, i, j, &mut gains);
                }
                for tau in 0..t {
                    for j in 0..nx {
                        let mut g = DVector::zeros(dim);
                        for k in 0..nw {
                            g[nx + tau * nw + k] = d[(j, k)];
                        }
                        push(g, t, tau + 1, i, j, &mut gains);
                    }
                }
            }
        }
        let lpsi_t = l.transpose() * psi.transpose();
        PolicyModel {
            psi,
            factor: l,
            lpsi_t,
            gains,
        }
    }

    pub fn len(&self) -> usize {
        self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gains.is_empty()
    }

    /// Dimension of the underlying random vector `ξ`.
    pub fn noise_dim(&self) -> usize {
        self.factor.ncols()
    }

    /// `Γ = Σ θ_v e_{r_v} g_vᵀ`.
    pub fn gamma(&self, theta: &DVector<T>, input_len: usize) -> DMatrix<T> {
        let mut gam = DMatrix::zeros(input_len, self.psi.ncols());
        for (v, e) in self.gains.iter().enumerate() {
            for (k, gk) in e.g.iter().enumerate() {
                if *gk != T::zero() {
                    gam[(e.input_row, k)] += theta[v] * *gk;
                }
            }
        }
        gam
    }

    /// Closed-loop deviation factor `(Ψ + ℬΓ)L`.
    pub fn deviation_factor(&self, lifted: &LiftedSystem<T>, theta: &DVector<T>) -> DMatrix<T> {
        let gam = self.gamma(theta, lifted.input_len());
        (&self.psi + &lifted.script_b * gam) * &self.factor
    }
}

/// `linear·V + constant + scale·‖norm_const + norm_lin·θ‖ ≤ offset`.
#[derive(Debug, Clone)]
pub struct TightenedRow<T: Real> {
    pub linear: DVector<T>,
    pub constant: T,
    pub norm_const: DVector<T>,
    pub norm_lin: DMatrix<T>,
    pub scale: T,
    pub offset: T,
}

impl<T: Real> TightenedRow<T> {
    pub fn margin(&self, theta: &DVector<T>) -> T {
        self.scale * (&self.norm_const + &self.norm_lin * theta).norm()
    }

    /// Left-hand side minus right-hand side; nonpositive when satisfied.
    pub fn slack(&self, v: &DVector<T>, theta: &DVector<T>) -> T {
        self.linear.dot(v) + self.constant + self.margin(theta) - self.offset
    }

    /// True if the uncertain part does not depend on the decision variables and vanishes.
    pub fn is_deterministic(&self) -> bool {
        self.scale == T::zero()
            || (self.norm_const.iter().all(|x| *x == T::zero()) && self.norm_lin.iter().all(|x| *x == T::zero()))
    }
}

/// State row `αᵀx_t` under the policy; `mean_free` is `𝒜μ + offset`.
pub fn tighten_state_row<T: Real>(
    row: &HalfspaceRow<T>,
    t: usize,
    lifted: &LiftedSystem<T>,
    model: &PolicyModel<T>,
    mean_free: &DVector<T>,
) -> Result<TightenedRow<T>, ChanceError> {
    let scale = quantile_scale(row.p)?;
    let nx = lifted.nx;
    let a_rows = lifted.script_b.rows(t * nx, nx);
    let linear = a_rows.transpose() * &row.alpha;
    let constant = row.alpha.dot(&mean_free.rows(t * nx, nx));
    let lp = model.lpsi_t.columns(t * nx, nx);
    let norm_const = lp * &row.alpha;
    let mut norm_lin = DMatrix::zeros(model.noise_dim(), model.len());
    for (v, e) in model.gains.iter().enumerate() {
        let w = linear[e.input_row];
        if w != T::zero() {
            norm_lin.column_mut(v).axpy(w, &e.lg, T::zero());
        }
    }
    Ok(TightenedRow {
        linear,
        constant,
        norm_const,
        norm_lin,
        scale,
        offset: row.beta,
    })
}

/// Input row `αᵀu_t`; the open-loop input carries no noise.
pub fn tighten_input_row<T: Real>(
    row: &HalfspaceRow<T>,
    t: usize,
    lifted: &LiftedSystem<T>,
    model: &PolicyModel<T>,
) -> Result<TightenedRow<T>, ChanceError> {
    let scale = quantile_scale(row.p)?;
    let nu = lifted.nu;
    let mut linear = DVector::zeros(lifted.input_len());
    linear.rows_mut(t * nu, nu).copy_from(&row.alpha);
    let mut norm_lin = DMatrix::zeros(model.noise_dim(), model.len());
    for (v, e) in model.gains.iter().enumerate() {
        let w = linear[e.input_row];
        if w != T::zero() {
            norm_lin.column_mut(v).axpy(w, &e.lg, T::zero());
        }
    }
    Ok(TightenedRow {
        linear,
        constant: T::zero(),
        norm_const: DVector::zeros(model.noise_dim()),
        norm_lin,
        scale,
        offset: row.beta,
    })
}

/// Tightened row for a fixed mean `μ` and covariance `Σ` (terminal-style rows).
pub fn static_margin<T: Real>(alpha: &DVector<T>, sigma: &DMatrix<T>, p: T) -> Result<T, ChanceError> {
    let s = quantile_scale(p)?;
    Ok(s * alpha.dot(&(sigma * alpha)).max(T::zero()).sqrt())
}

/// Factor helper shared with the controller.
pub fn factor_of<T: Real>(sigma: &DMatrix<T>) -> KernelResult<DMatrix<T>> {
    let clip = T::lit(kernel::DEFAULT_CLIP_TOL).max(T::lit(1e-10) * sigma.norm());
    kernel::sym_sqrt(&kernel::symmetrize(sigma), clip)
}
