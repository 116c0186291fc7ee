//! Primal-dual interior-point solver for conic programs
//! `min cᵀx  s.t.  h − G x ∈ 𝒦` over zero, nonnegative, second-order and
//! semidefinite cones.

mod cones;
mod hsde;
mod presolve;

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::scalar::Real;

pub use cones::{block_margin, packed_index, smat, soc_max_step, svec, Cone};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConicError {
    #[error("malformed program: {0}")]
    Malformed(String),
}

/// Conic program `min cᵀx` subject to `h − G x ∈ 𝒦₁ × … × 𝒦ₖ`.
#[derive(Debug, Clone)]
pub struct ConicProgram<T: Real> {
    pub c: DVector<T>,
    pub g: DMatrix<T>,
    pub h: DVector<T>,
    pub cones: Vec<Cone>,
}

impl<T: Real> ConicProgram<T> {
    pub fn new(c: DVector<T>, g: DMatrix<T>, h: DVector<T>, cones: Vec<Cone>) -> Result<Self, ConicError> {
        let rows: usize = cones.iter().map(|k| k.dim()).sum();
        if g.nrows() != rows || h.len() != rows {
            return Err(ConicError::Malformed(format!(
                "cones cover {rows} rows, G has {} and h has {}",
                g.nrows(),
                h.len()
            )));
        }
        if g.ncols() != c.len() {
            return Err(ConicError::Malformed(format!("G has {} columns, c has {}", g.ncols(), c.len())));
        }
        if cones.iter().any(|k| k.dim() == 0) {
            return Err(ConicError::Malformed("empty cone".into()));
        }
        let finite = c.iter().chain(g.iter()).chain(h.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(ConicError::Malformed("non-finite data".into()));
        }
        Ok(ConicProgram { c, g, h, cones })
    }

    pub fn n(&self) -> usize {
        self.c.len()
    }

    pub fn m(&self) -> usize {
        self.h.len()
    }

    /// Plain-text dump of the instance for cross-checking with external solvers.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "n {}", self.n());
        let _ = writeln!(out, "m {}", self.m());
        let cones: Vec<String> = self
            .cones
            .iter()
            .map(|k| match k {
                Cone::Zero(d) => format!("zero:{d}"),
                Cone::NonNeg(d) => format!("nonneg:{d}"),
                Cone::Soc(d) => format!("soc:{d}"),
                Cone::Psd(s) => format!("psd:{s}"),
            })
            .collect();
        let _ = writeln!(out, "cones {}", cones.join(" "));
        let join = |v: &mut dyn Iterator<Item = T>| v.map(|x| format!("{:.17e}", x.as_f64())).collect::<Vec<_>>().join(" ");
        let _ = writeln!(out, "c {}", join(&mut self.c.iter().copied()));
        let _ = writeln!(out, "h {}", join(&mut self.h.iter().copied()));
        for i in 0..self.m() {
            let _ = writeln!(out, "G {}", join(&mut self.g.row(i).iter().copied()));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Settings<T: Real> {
    pub feas_tol: T,
    pub gap_tol: T,
    pub max_iter: usize,
    /// Fraction of the distance to the cone boundary taken per step.
    pub step: T,
    /// Iterative-refinement sweeps per KKT solve.
    pub refine: usize,
    /// Looser tolerances accepted when progress stalls before `feas_tol`/`gap_tol`.
    pub reduced_feas_tol: T,
    pub reduced_gap_tol: T,
}

impl<T: Real> Default for Settings<T> {
    fn default() -> Self {
        Settings {
            feas_tol: T::lit(1e-8),
            gap_tol: T::lit(1e-8),
            max_iter: 200,
            step: T::lit(0.99),
            refine: 3,
            reduced_feas_tol: T::lit(1e-6),
            reduced_gap_tol: T::lit(1e-6),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Optimal,
    /// Progress stalled; the best iterate meets only the reduced tolerances.
    AlmostOptimal,
    PrimalInfeasible,
    DualInfeasible,
    MaxIterations,
    NumericalFailure,
}

impl Status {
    pub fn is_solved(self) -> bool {
        matches!(self, Status::Optimal | Status::AlmostOptimal)
    }
}

/// Infeasibility certificate.
#[derive(Debug, Clone, PartialEq)]
pub enum Certificate<T: Real> {
    /// `z ∈ 𝒦*`, `Gᵀz = 0`, `hᵀz = −1` (entries on zero cones are free).
    Primal(DVector<T>),
    /// `−G x ∈ 𝒦`, `cᵀx = −1`.
    Dual(DVector<T>),
}

#[derive(Debug, Clone)]
pub struct ConicSolution<T: Real> {
    pub status: Status,
    pub x: DVector<T>,
    pub s: DVector<T>,
    /// Cone multipliers, including equality multipliers on zero cones.
    pub z: DVector<T>,
    pub objective: T,
    pub dual_objective: T,
    /// Relative duality gap `sᵀz / max(1, |cᵀx|)`.
    pub gap: T,
    pub primal_residual: T,
    pub dual_residual: T,
    pub iterations: usize,
    pub certificate: Option<Certificate<T>>,
}

pub fn solve<T: Real>(prog: &ConicProgram<T>, settings: &Settings<T>) -> ConicSolution<T> {
    presolve::solve_with_presolve(prog, settings)
}

/// Worst violation per cone block.
#[derive(Debug, Clone, PartialEq)]
pub struct ConeReport {
    pub index: usize,
    pub cone: Cone,
    /// How far the slack lies outside the cone (0 if inside).
    pub slack_violation: f64,
    /// How far the multiplier lies outside the dual cone (0 if inside).
    pub dual_violation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    /// `‖G x + s − h‖ / (1 + ‖h‖)`.
    pub primal_residual: f64,
    /// `‖Gᵀz + c‖ / max(1 + ‖c‖, ‖Gᵀz‖)`.
    pub dual_residual: f64,
    /// `|cᵀx + hᵀz| / max(1, |cᵀx|)`.
    pub gap: f64,
    /// Largest violation of `h − G x ∈ 𝒦` computed from `x` alone.
    pub constraint_violation: f64,
    pub cones: Vec<ConeReport>,
}

impl VerifyReport {
    pub fn worst_cone_violation(&self) -> f64 {
        self.cones
            .iter()
            .map(|c| c.slack_violation.max(c.dual_violation))
            .fold(0.0, f64::max)
    }
}

/// Recomputes residuals and cone violations of a solution from the raw data.
pub fn verify<T: Real>(prog: &ConicProgram<T>, sol: &ConicSolution<T>) -> VerifyReport {
    let gx = &prog.g * &sol.x;
    let hn = prog.h.norm().as_f64();
    let cn = prog.c.norm().as_f64();
    let primal_residual = (&gx + &sol.s - &prog.h).norm().as_f64() / (1.0 + hn);
    let gtz = prog.g.transpose() * &sol.z;
    let dual_residual = (&gtz + &prog.c).norm().as_f64() / (1.0 + cn).max(gtz.norm().as_f64());
    let pobj = prog.c.dot(&sol.x).as_f64();
    let dobj = -prog.h.dot(&sol.z).as_f64();
    let gap = (pobj - dobj).abs() / pobj.abs().max(1.0);
    let slack = &prog.h - gx;
    let mut cones = Vec::new();
    let mut constraint_violation: f64 = 0.0;
    for (index, b) in cones::layout(&prog.cones).iter().enumerate() {
        let r = b.range();
        let sv = -block_margin(b.cone, &sol.s.as_slice()[r.clone()]).as_f64();
        let from_x = -block_margin(b.cone, &slack.as_slice()[r.clone()]).as_f64();
        let dv = match b.cone {
            Cone::Zero(_) => 0.0,
            _ => -block_margin(b.cone, &sol.z.as_slice()[r]).as_f64(),
        };
        constraint_violation = constraint_violation.max(from_x.max(0.0));
        cones.push(ConeReport {
            index,
            cone: b.cone,
            slack_violation: sv.max(0.0),
            dual_violation: dv.max(0.0),
        });
    }
    VerifyReport {
        primal_residual,
        dual_residual,
        gap,
        constraint_violation,
        cones,
    }
}
