//! Per-step convex program, receding-horizon loop with measurement or
//! fallback initialization, one-shot covariance steering and baselines.

use std::ops::Range;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::chance::{self, ChanceError, PolicyModel, TightenedRow};
use crate::conic::{self, packed_index, svec, Cone, ConicProgram, Settings, Status};
use crate::kernel::{self, KernelError};
use crate::lifting::{self, LiftedSystem};
use crate::scalar::Real;
use crate::system::{HalfspaceSet, LtiSystem, Scenario};
use crate::terminal::{TerminalError, TerminalIngredients};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Chance(#[from] ChanceError),
    #[error(transparent)]
    Terminal(#[from] TerminalError),
    #[error("step {step}: measurement-initialized problem is infeasible ({status:?}) and no fallback belief exists")]
    InfeasibleAtStart { step: usize, status: Status },
    #[error("step {step}: both initializations failed (measurement {measurement:?}, fallback {fallback:?})")]
    BothInitializationsInfeasible {
        step: usize,
        measurement: Status,
        fallback: Status,
    },
    #[error("solver failure: {0:?}")]
    SolverNumericalFailure(Status),
    #[error("problem infeasible: {0:?}")]
    SolverInfeasible(Status),
}

impl ControllerError {
    /// True for failures caused by the numerics rather than infeasibility.
    pub fn is_numerical(&self) -> bool {
        matches!(self, ControllerError::SolverNumericalFailure(_))
            || matches!(
                self,
                ControllerError::BothInitializationsInfeasible { measurement, fallback, .. }
                    if !is_infeasible(*measurement) && !is_infeasible(*fallback)
            )
    }
}

fn is_infeasible(s: Status) -> bool {
    matches!(s, Status::PrimalInfeasible | Status::DualInfeasible)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Measurement,
    Fallback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeliefState<T: Real> {
    pub mu: DVector<T>,
    pub sigma: DMatrix<T>,
    pub mode: Mode,
}

/// Feedback parameterization of the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    /// Block-diagonal gains on the state deviation from its mean.
    StateFeedback,
    /// Strictly causal gains on past disturbances.
    DisturbanceFeedback,
}

/// `U = V + Γξ`; for state feedback `Γ` is the block-diagonal stack `K`
/// (`N·n_u × (N+1)·n_x`, last block column zero).
#[derive(Debug, Clone)]
pub struct AffinePolicy<T: Real> {
    pub v: DVector<T>,
    pub gain: DMatrix<T>,
    pub theta: DVector<T>,
}

#[derive(Debug, Clone)]
pub struct StepResult<T: Real> {
    pub u: DVector<T>,
    pub policy: AffinePolicy<T>,
    pub belief: BeliefState<T>,
    pub predicted_next: BeliefState<T>,
    pub mode: Mode,
    pub solve_time: f64,
    pub status: Status,
    pub iterations: usize,
    pub objective: T,
}

/// Column ranges of the decision vector.
#[derive(Debug, Clone, PartialEq)]
pub struct VarIndex {
    pub v: Range<usize>,
    pub theta: Range<usize>,
    pub t_cov: usize,
    pub t_mean: usize,
    pub t_input: usize,
}

impl VarIndex {
    pub fn len(&self) -> usize {
        self.t_input + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

struct Builder<T: Real> {
    n: usize,
    rows: Vec<(Cone, DMatrix<T>, DVector<T>)>,
}

impl<T: Real> Builder<T> {
    fn new(n: usize) -> Self {
        Builder { n, rows: Vec::new() }
    }

    fn push(&mut self, cone: Cone, g: DMatrix<T>, h: DVector<T>) {
        debug_assert_eq!(g.ncols(), self.n);
        self.rows.push((cone, g, h));
    }

    fn finish(self, c: DVector<T>) -> ConicProgram<T> {
        // Canonical order: zero, nonnegative, second-order, semidefinite.
        let rank = |c: &Cone| match c {
            Cone::Zero(_) => 0,
            Cone::NonNeg(_) => 1,
            Cone::Soc(_) => 2,
            Cone::Psd(_) => 3,
        };
        let mut rows = self.rows;
        rows.sort_by_key(|r| rank(&r.0));
        let m: usize = rows.iter().map(|r| r.0.dim()).sum();
        let mut g = DMatrix::zeros(m, self.n);
        let mut h = DVector::zeros(m);
        let mut cones: Vec<Cone> = Vec::new();
        let mut off = 0;
        for (cone, gb, hb) in rows {
            let d = cone.dim();
            g.view_mut((off, 0), (d, self.n)).copy_from(&gb);
            h.rows_mut(off, d).copy_from(&hb);
            off += d;
            match (cones.last_mut(), cone) {
                (Some(Cone::Zero(a)), Cone::Zero(b)) => *a += b,
                (Some(Cone::NonNeg(a)), Cone::NonNeg(b)) => *a += b,
                _ => cones.push(cone),
            }
        }
        ConicProgram::new(c, g, h, cones).expect("assembled program is well formed")
    }
}

/// Reduces `‖F x + g‖` to an equivalent map with at most `cols + 1` rows.
fn compress<T: Real>(f: DMatrix<T>, g: DVector<T>) -> (DMatrix<T>, DVector<T>) {
    let k = f.ncols();
    if f.nrows() <= k + 1 {
        return (f, g);
    }
    let mut fg = DMatrix::zeros(f.nrows(), k + 1);
    fg.columns_mut(0, k).copy_from(&f);
    fg.set_column(k, &g);
    let r = fg.qr().r();
    (r.columns(0, k).into_owned(), r.column(k).into_owned())
}

/// `t ≥ ‖F x + g‖²` as the second-order cone `(t+1, t−1, 2(Fx+g))`; `f` acts on `cols`.
fn push_square_epigraph<T: Real>(b: &mut Builder<T>, t: usize, cols: &[usize], f: DMatrix<T>, g: DVector<T>) {
    let (f, g) = compress(f, g);
    let d = f.nrows() + 2;
    let mut gm = DMatrix::zeros(d, b.n);
    let mut h = DVector::zeros(d);
    h[0] = T::one();
    gm[(0, t)] = -T::one();
    h[1] = -T::one();
    gm[(1, t)] = -T::one();
    let two = T::lit(2.0);
    for i in 0..f.nrows() {
        h[2 + i] = two * g[i];
        for (j, &col) in cols.iter().enumerate() {
            gm[(2 + i, col)] = -two * f[(i, j)];
        }
    }
    b.push(Cone::Soc(d), gm, h);
}

fn push_tightened<T: Real>(b: &mut Builder<T>, idx: &VarIndex, row: &TightenedRow<T>) {
    let mut head = DMatrix::zeros(1, b.n);
    for (i, w) in row.linear.iter().enumerate() {
        head[(0, idx.v.start + i)] = *w;
    }
    let h0 = row.offset - row.constant;
    if row.is_deterministic() {
        b.push(Cone::NonNeg(1), head, DVector::from_element(1, h0));
        return;
    }
    let used: Vec<usize> = (0..row.norm_lin.ncols())
        .filter(|&j| row.norm_lin.column(j).iter().any(|v| *v != T::zero()))
        .collect();
    let f = row.norm_lin.select_columns(&used) * row.scale;
    let g = &row.norm_const * row.scale;
    let (f, g) = compress(f, g);
    let d = f.nrows() + 1;
    let mut gm = DMatrix::zeros(d, b.n);
    gm.row_mut(0).copy_from(&head.row(0));
    let mut h = DVector::zeros(d);
    h[0] = h0;
    for i in 0..f.nrows() {
        h[1 + i] = g[i];
        for (j, &col) in used.iter().enumerate() {
            gm[(1 + i, idx.theta.start + col)] = -f[(i, j)];
        }
    }
    b.push(Cone::Soc(d), gm, h);
}

/// Terminal requirement on the predicted mean.
#[derive(Debug, Clone, Copy)]
pub enum TerminalTarget<'a, T: Real> {
    /// `E_N μ ∈ {αᵀμ ≤ β}`.
    Set(&'a HalfspaceSet<T>),
    /// `E_N μ = μ_f`.
    Point(&'a DVector<T>),
}

/// Everything needed to assemble one instance of the per-step program.
#[derive(Debug, Clone, Copy)]
pub struct ProblemData<'a, T: Real> {
    pub lifted: &'a LiftedSystem<T>,
    pub model: &'a PolicyModel<T>,
    /// `𝒜μ + offset`.
    pub mean_free: &'a DVector<T>,
    pub q: &'a DMatrix<T>,
    pub r: &'a DMatrix<T>,
    /// Terminal weight on the mean (zero block if `None`).
    pub p_mean: Option<&'a DMatrix<T>>,
    pub state_rows: &'a HalfspaceSet<T>,
    pub input_rows: &'a HalfspaceSet<T>,
    pub sigma_f: &'a DMatrix<T>,
    pub target: TerminalTarget<'a, T>,
}

#[derive(Debug, Clone)]
pub struct Assembled<T: Real> {
    pub program: ConicProgram<T>,
    pub index: VarIndex,
}

/// Builds the conic program of one finite-horizon problem.
pub fn assemble<T: Real>(d: &ProblemData<'_, T>) -> Result<Assembled<T>, ControllerError> {
    let lifted = d.lifted;
    let model = d.model;
    let (nx, n) = (lifted.nx, lifted.horizon);
    let nv = lifted.input_len();
    let nth = model.len();
    let index = VarIndex {
        v: 0..nv,
        theta: nv..nv + nth,
        t_cov: nv + nth,
        t_mean: nv + nth + 1,
        t_input: nv + nth + 2,
    };
    let nvar = index.len();
    let mut b = Builder::new(nvar);

    // Objective pieces.
    let p_term = d.p_mean.cloned().unwrap_or_else(|| DMatrix::zeros(nx, nx));
    let blocks = lifting::cost_blocks(d.q, d.r, &p_term, n);
    let clip = T::lit(kernel::DEFAULT_CLIP_TOL);
    let qm = kernel::sym_sqrt(&blocks.q_mean, clip)?;
    let qc = kernel::sym_sqrt(&blocks.q_cov, clip)?;
    let rs = kernel::sym_sqrt(&blocks.r_bar, clip)?;

    let v_cols: Vec<usize> = index.v.clone().collect();
    push_square_epigraph(&mut b, index.t_mean, &v_cols, &qm * &lifted.script_b, &qm * d.mean_free);
    push_square_epigraph(&mut b, index.t_input, &v_cols, rs.clone(), DVector::zeros(nv));

    let rdim = model.noise_dim();
    let len = lifted.state_len();
    let const_state = &qc * &model.psi * &model.factor;
    let mut fcov = DMatrix::zeros(len * rdim + nv * rdim, nth);
    let mut gcov = DVector::zeros(len * rdim + nv * rdim);
    for c in 0..rdim {
        gcov.rows_mut(c * len, len).copy_from(&const_state.column(c));
    }
    let qb = &qc * &lifted.script_b;
    for (v, e) in model.gains.iter().enumerate() {
        let sb = qb.column(e.input_row);
        let sr = rs.column(e.input_row);
        for c in 0..rdim {
            let w = e.lg[c];
            if w == T::zero() {
                continue;
            }
            for i in 0..len {
                fcov[(c * len + i, v)] += w * sb[i];
            }
            for i in 0..nv {
                fcov[(len * rdim + c * nv + i, v)] += w * sr[i];
            }
        }
    }
    let th_cols: Vec<usize> = index.theta.clone().collect();
    push_square_epigraph(&mut b, index.t_cov, &th_cols, fcov, gcov);

    // Chance constraints on t = 0..N−1.
    for t in 0..n {
        for row in &d.state_rows.rows {
            let tr = chance::tighten_state_row(row, t, lifted, model, d.mean_free)?;
            push_tightened(&mut b, &index, &tr);
        }
        for row in &d.input_rows.rows {
            let tr = chance::tighten_input_row(row, t, lifted, model)?;
            push_tightened(&mut b, &index, &tr);
        }
    }

    // Terminal mean.
    let eb = lifted.script_b.rows(n * nx, nx).into_owned();
    let ef = d.mean_free.rows(n * nx, nx).into_owned();
    match d.target {
        TerminalTarget::Set(set) => {
            for row in &set.rows {
                let mut g = DMatrix::zeros(1, nvar);
                let coef = eb.transpose() * &row.alpha;
                for i in 0..nv {
                    g[(0, i)] = coef[i];
                }
                b.push(Cone::NonNeg(1), g, DVector::from_element(1, row.beta - row.alpha.dot(&ef)));
            }
        }
        TerminalTarget::Point(mu_f) => {
            let mut g = DMatrix::zeros(nx, nvar);
            g.view_mut((0, 0), (nx, nv)).copy_from(&eb);
            b.push(Cone::Zero(nx), g, mu_f - &ef);
        }
    }

    // Terminal covariance LMI [[Σf, M], [Mᵀ, I]] ⪰ 0.
    let s = nx + rdim;
    let m0 = model.lpsi_t.columns(n * nx, nx).transpose();
    let mut z0 = DMatrix::zeros(s, s);
    z0.view_mut((0, 0), (nx, nx)).copy_from(d.sigma_f);
    z0.view_mut((0, nx), (nx, rdim)).copy_from(&m0);
    z0.view_mut((nx, 0), (rdim, nx)).copy_from(&m0.transpose());
    z0.view_mut((nx, nx), (rdim, rdim)).fill_with_identity();
    let h = svec(&z0);
    let mut g = DMatrix::zeros(h.len(), nvar);
    let sqrt2 = T::lit(std::f64::consts::SQRT_2);
    for (v, e) in model.gains.iter().enumerate() {
        let col = eb.column(e.input_row);
        for a in 0..rdim {
            let w = e.lg[a];
            if w == T::zero() {
                continue;
            }
            for bi in 0..nx {
                let val = col[bi] * w;
                if val != T::zero() {
                    g[(packed_index(s, nx + a, bi), index.theta.start + v)] = -val * sqrt2;
                }
            }
        }
    }
    b.push(Cone::Psd(s), g, h);

    let mut c = DVector::zeros(nvar);
    c[index.t_cov] = T::one();
    c[index.t_mean] = T::one();
    c[index.t_input] = T::one();
    Ok(Assembled {
        program: b.finish(c),
        index,
    })
}

fn extract<T: Real>(model: &PolicyModel<T>, lifted: &LiftedSystem<T>, idx: &VarIndex, x: &DVector<T>) -> AffinePolicy<T> {
    let v = x.rows(idx.v.start, idx.v.len()).into_owned();
    let theta = x.rows(idx.theta.start, idx.theta.len()).into_owned();
    let gain = model.gamma(&theta, lifted.input_len());
    AffinePolicy { v, gain, theta }
}

/// Mean and covariance of `x_t` under a policy.
pub fn predicted_moments<T: Real>(
    lifted: &LiftedSystem<T>,
    model: &PolicyModel<T>,
    mean_free: &DVector<T>,
    policy: &AffinePolicy<T>,
    t: usize,
) -> (DVector<T>, DMatrix<T>) {
    let nx = lifted.nx;
    let mean = (mean_free + &lifted.script_b * &policy.v).rows(t * nx, nx).into_owned();
    let f = model.deviation_factor(lifted, &policy.theta);
    let rows = f.rows(t * nx, nx);
    let cov = kernel::symmetrize(&(rows * rows.transpose()));
    (mean, cov)
}

fn policy_model<T: Real>(
    kind: PolicyKind,
    lifted: &LiftedSystem<T>,
    sys: &LtiSystem<T>,
    sigma0: &DMatrix<T>,
) -> Result<PolicyModel<T>, ControllerError> {
    Ok(match kind {
        PolicyKind::StateFeedback => PolicyModel::state_feedback(lifted, &lifting::sigma_y(lifted, sigma0)?),
        PolicyKind::DisturbanceFeedback => PolicyModel::disturbance_feedback(lifted, &sys.d, &chance::factor_of(sigma0)?),
    })
}

/// Result of a one-shot covariance steering solve.
#[derive(Debug, Clone)]
pub struct SteeringSolution<T: Real> {
    pub policy: AffinePolicy<T>,
    pub cost: T,
    pub terminal_mean: DVector<T>,
    pub terminal_cov: DMatrix<T>,
    pub status: Status,
    pub warnings: Vec<String>,
}

/// Options for [`covariance_steering_solve`].
#[derive(Debug, Clone)]
pub struct SteeringProblem<'a, T: Real> {
    pub sys: &'a LtiSystem<T>,
    pub mu0: &'a DVector<T>,
    pub sigma0: &'a DMatrix<T>,
    pub mu_f: &'a DVector<T>,
    pub sigma_f: &'a DMatrix<T>,
    pub horizon: usize,
    pub state_rows: &'a HalfspaceSet<T>,
    pub input_rows: &'a HalfspaceSet<T>,
    pub q: &'a DMatrix<T>,
    pub r: &'a DMatrix<T>,
}

/// Finite-horizon covariance steering to `(μ_f, ⪯Σ_f)`.
pub fn covariance_steering_solve<T: Real>(
    p: &SteeringProblem<'_, T>,
    settings: &Settings<T>,
) -> Result<SteeringSolution<T>, ControllerError> {
    let report = crate::system::validate_assumptions(p.sys, p.horizon);
    let lifted = lifting::lift(p.sys, p.horizon);
    let model = policy_model(PolicyKind::StateFeedback, &lifted, p.sys, p.sigma0)?;
    let mean_free = &lifted.script_a * p.mu0;
    let data = ProblemData {
        lifted: &lifted,
        model: &model,
        mean_free: &mean_free,
        q: p.q,
        r: p.r,
        p_mean: None,
        state_rows: p.state_rows,
        input_rows: p.input_rows,
        sigma_f: p.sigma_f,
        target: TerminalTarget::Point(p.mu_f),
    };
    let asm = assemble(&data)?;
    let sol = conic::solve(&asm.program, settings);
    match sol.status {
        s if s.is_solved() => {}
        s if is_infeasible(s) => return Err(ControllerError::SolverInfeasible(s)),
        s => return Err(ControllerError::SolverNumericalFailure(s)),
    }
    let policy = extract(&model, &lifted, &asm.index, &sol.x);
    let (terminal_mean, terminal_cov) = predicted_moments(&lifted, &model, &mean_free, &policy, p.horizon);
    Ok(SteeringSolution {
        policy,
        cost: sol.objective,
        terminal_mean,
        terminal_cov,
        status: sol.status,
        warnings: report.warnings,
    })
}

/// Common interface of all closed-loop controllers.
pub trait Controller<T: Real>: Send {
    /// Input to apply at step `k` given the measured state.
    fn control(&mut self, k: usize, x: &DVector<T>) -> Result<ControlOutput<T>, ControllerError>;
}

#[derive(Debug, Clone)]
pub struct ControlOutput<T: Real> {
    pub u: DVector<T>,
    pub mode: Mode,
    pub solve_time: f64,
    /// Covariance of the belief the input was computed from.
    pub belief_sigma: Option<DMatrix<T>>,
    /// Predicted mean trajectory `E_t(𝒜μ + ℬV + offset)`, `t = 0..N`.
    pub predicted_means: Option<Vec<DVector<T>>>,
}

/// Receding-horizon stochastic MPC.
#[derive(Debug, Clone)]
pub struct SmpcController<T: Real> {
    pub scenario: Scenario<T>,
    pub terminal: TerminalIngredients<T>,
    pub kind: PolicyKind,
    pub settings: Settings<T>,
    lifted: LiftedSystem<T>,
    measurement_model: PolicyModel<T>,
    previous: Option<BeliefState<T>>,
}

impl<T: Real> SmpcController<T> {
    pub fn new(scenario: Scenario<T>, terminal: TerminalIngredients<T>, kind: PolicyKind) -> Result<Self, ControllerError> {
        let lifted = lifting::lift(&scenario.system, scenario.horizon);
        let nx = scenario.system.nx();
        let measurement_model = policy_model(kind, &lifted, &scenario.system, &DMatrix::zeros(nx, nx))?;
        Ok(SmpcController {
            scenario,
            terminal,
            kind,
            settings: Settings::default(),
            lifted,
            measurement_model,
            previous: None,
        })
    }

    pub fn lifted(&self) -> &LiftedSystem<T> {
        &self.lifted
    }

    /// Forgets the stored fallback belief.
    pub fn reset(&mut self) {
        self.previous = None;
    }

    pub fn previous_belief(&self) -> Option<&BeliefState<T>> {
        self.previous.as_ref()
    }

    fn mean_free(&self, k: usize, mu: &DVector<T>) -> DVector<T> {
        let sc = &self.scenario;
        let offset = lifting::affine_offset(&sc.system, sc.horizon, &sc.signal(k));
        &self.lifted.script_a * mu + offset
    }

    /// Assembles the program for a belief at step `k`.
    pub fn assemble_for(&self, k: usize, belief: &BeliefState<T>) -> Result<(Assembled<T>, PolicyModel<T>, DVector<T>), ControllerError> {
        let sc = &self.scenario;
        let model = if belief.sigma.iter().all(|v| *v == T::zero()) {
            self.measurement_model.clone()
        } else {
            policy_model(self.kind, &self.lifted, &sc.system, &belief.sigma)?
        };
        let mean_free = self.mean_free(k, &belief.mu);
        let data = ProblemData {
            lifted: &self.lifted,
            model: &model,
            mean_free: &mean_free,
            q: &sc.q,
            r: &sc.r,
            p_mean: Some(&self.terminal.p_mean),
            state_rows: &sc.state_constraints,
            input_rows: &sc.input_constraints,
            sigma_f: &self.terminal.sigma_f,
            target: TerminalTarget::Set(&self.terminal.xf_mu),
        };
        Ok((assemble(&data)?, model, mean_free))
    }

    fn attempt(&self, k: usize, belief: &BeliefState<T>, x: &DVector<T>) -> Result<Result<StepResult<T>, Status>, ControllerError> {
        let start = Instant::now();
        let (asm, model, mean_free) = self.assemble_for(k, belief)?;
        let sol = conic::solve(&asm.program, &self.settings);
        let solve_time = start.elapsed().as_secs_f64();
        if !sol.status.is_solved() {
            return Ok(Err(sol.status));
        }
        let policy = extract(&model, &self.lifted, &asm.index, &sol.x);
        let nu = self.lifted.nu;
        let nx = self.lifted.nx;
        let v0 = policy.v.rows(0, nu).into_owned();
        let u = match belief.mode {
            Mode::Measurement => v0,
            Mode::Fallback => v0 + policy.gain.view((0, 0), (nu, nx)) * (x - &belief.mu),
        };
        let (mu1, s1) = predicted_moments(&self.lifted, &model, &mean_free, &policy, 1);
        Ok(Ok(StepResult {
            u,
            policy,
            belief: belief.clone(),
            predicted_next: BeliefState {
                mu: mu1,
                sigma: s1,
                mode: Mode::Fallback,
            },
            mode: belief.mode,
            solve_time,
            status: sol.status,
            iterations: sol.iterations,
            objective: sol.objective,
        }))
    }

    /// One receding-horizon step from the measured state `x` at step `k`.
    pub fn step(&mut self, k: usize, x: &DVector<T>) -> Result<StepResult<T>, ControllerError> {
        let nx = self.lifted.nx;
        let measured = BeliefState {
            mu: x.clone(),
            sigma: DMatrix::zeros(nx, nx),
            mode: Mode::Measurement,
        };
        let first = self.attempt(k, &measured, x)?;
        let result = match first {
            Ok(r) => r,
            Err(ms) => {
                let Some(prev) = self.previous.clone() else {
                    return Err(if is_infeasible(ms) {
                        ControllerError::InfeasibleAtStart { step: k, status: ms }
                    } else {
                        ControllerError::SolverNumericalFailure(ms)
                    });
                };
                let fallback = BeliefState {
                    mode: Mode::Fallback,
                    ..prev
                };
                match self.attempt(k, &fallback, x)? {
                    Ok(r) => r,
                    Err(fs) => {
                        return Err(ControllerError::BothInitializationsInfeasible {
                            step: k,
                            measurement: ms,
                            fallback: fs,
                        })
                    }
                }
            }
        };
        self.previous = Some(result.predicted_next.clone());
        Ok(result)
    }
}

impl<T: Real> Controller<T> for SmpcController<T> {
    fn control(&mut self, k: usize, x: &DVector<T>) -> Result<ControlOutput<T>, ControllerError> {
        let r = self.step(k, x)?;
        let mean_free = self.mean_free(k, &r.belief.mu);
        let traj = &mean_free + &self.lifted.script_b * &r.policy.v;
        let nx = self.lifted.nx;
        let means = (0..=self.lifted.horizon).map(|t| traj.rows(t * nx, nx).into_owned()).collect();
        Ok(ControlOutput {
            u: r.u,
            mode: r.mode,
            solve_time: r.solve_time,
            belief_sigma: Some(r.belief.sigma),
            predicted_means: Some(means),
        })
    }
}

/// Static infinite-horizon LQR gain.
#[derive(Debug, Clone)]
pub struct LqrController<T: Real> {
    pub k: DMatrix<T>,
}

pub fn baseline_lqr<T: Real>(sys: &LtiSystem<T>, q: &DMatrix<T>, r: &DMatrix<T>) -> Result<LqrController<T>, ControllerError> {
    Ok(LqrController {
        k: kernel::dare(&sys.a, &sys.b, q, r)?.k,
    })
}

impl<T: Real> Controller<T> for LqrController<T> {
    fn control(&mut self, _k: usize, x: &DVector<T>) -> Result<ControlOutput<T>, ControllerError> {
        Ok(ControlOutput {
            u: &self.k * x,
            mode: Mode::Measurement,
            solve_time: 0.0,
            belief_sigma: None,
            predicted_means: None,
        })
    }
}

/// Zero input.
#[derive(Debug, Clone)]
pub struct ZeroController {
    pub nu: usize,
}

impl<T: Real> Controller<T> for ZeroController {
    fn control(&mut self, _k: usize, _x: &DVector<T>) -> Result<ControlOutput<T>, ControllerError> {
        Ok(ControlOutput {
            u: DVector::zeros(self.nu),
            mode: Mode::Measurement,
            solve_time: 0.0,
            belief_sigma: None,
            predicted_means: None,
        })
    }
}

/// Nominal MPC with hard constraints and a Riccati terminal cost.
#[derive(Debug, Clone)]
pub struct DetMpcController<T: Real> {
    pub scenario: Scenario<T>,
    pub p_term: DMatrix<T>,
    pub k_lqr: DMatrix<T>,
    pub settings: Settings<T>,
    lifted: LiftedSystem<T>,
    /// Steps at which the QP was infeasible and the LQR input was applied.
    pub infeasible_steps: Vec<usize>,
}

pub fn baseline_det_mpc<T: Real>(scenario: &Scenario<T>) -> Result<DetMpcController<T>, ControllerError> {
    let sys = &scenario.system;
    let dare = kernel::dare(&sys.a, &sys.b, &scenario.q, &scenario.r)?;
    Ok(DetMpcController {
        scenario: scenario.clone(),
        p_term: dare.p,
        k_lqr: dare.k,
        settings: Settings::default(),
        lifted: lifting::lift(sys, scenario.horizon),
        infeasible_steps: Vec::new(),
    })
}

impl<T: Real> DetMpcController<T> {
    /// Optimal open-loop input sequence from `x` at step `k`.
    pub fn plan(&self, k: usize, x: &DVector<T>) -> Result<(DVector<T>, conic::ConicSolution<T>), ControllerError> {
        let sc = &self.scenario;
        let lifted = &self.lifted;
        let (nx, nu, n) = (lifted.nx, lifted.nu, lifted.horizon);
        let nv = lifted.input_len();
        let offset = lifting::affine_offset(&sc.system, n, &sc.signal(k));
        let free = &lifted.script_a * x + offset;
        let blocks = lifting::cost_blocks(&sc.q, &sc.r, &self.p_term, n);
        let clip = T::lit(kernel::DEFAULT_CLIP_TOL);
        let qm = kernel::sym_sqrt(&blocks.q_mean, clip)?;
        let rs = kernel::sym_sqrt(&blocks.r_bar, clip)?;
        let (tm, tv) = (nv, nv + 1);
        let mut b = Builder::new(nv + 2);
        let cols: Vec<usize> = (0..nv).collect();
        push_square_epigraph(&mut b, tm, &cols, &qm * &lifted.script_b, &qm * &free);
        push_square_epigraph(&mut b, tv, &cols, rs, DVector::zeros(nv));
        for t in 1..=n {
            for row in &sc.state_constraints.rows {
                let coef = lifted.script_b.rows(t * nx, nx).transpose() * &row.alpha;
                let mut g = DMatrix::zeros(1, nv + 2);
                g.view_mut((0, 0), (1, nv)).copy_from(&coef.transpose());
                let h = row.beta - row.alpha.dot(&free.rows(t * nx, nx));
                b.push(Cone::NonNeg(1), g, DVector::from_element(1, h));
            }
        }
        for t in 0..n {
            for row in &sc.input_constraints.rows {
                let mut g = DMatrix::zeros(1, nv + 2);
                for i in 0..nu {
                    g[(0, t * nu + i)] = row.alpha[i];
                }
                b.push(Cone::NonNeg(1), g, DVector::from_element(1, row.beta));
            }
        }
        let mut c = DVector::zeros(nv + 2);
        c[tm] = T::one();
        c[tv] = T::one();
        let prog = b.finish(c);
        let sol = conic::solve(&prog, &self.settings);
        Ok((sol.x.rows(0, nv).into_owned(), sol))
    }
}

impl<T: Real> Controller<T> for DetMpcController<T> {
    fn control(&mut self, k: usize, x: &DVector<T>) -> Result<ControlOutput<T>, ControllerError> {
        let start = Instant::now();
        let (v, sol) = self.plan(k, x)?;
        let nu = self.lifted.nu;
        let u = match sol.status {
            s if s.is_solved() => v.rows(0, nu).into_owned(),
            s if is_infeasible(s) => {
                self.infeasible_steps.push(k);
                &self.k_lqr * x
            }
            s => return Err(ControllerError::SolverNumericalFailure(s)),
        };
        Ok(ControlOutput {
            u,
            mode: Mode::Measurement,
            solve_time: start.elapsed().as_secs_f64(),
            belief_sigma: None,
            predicted_means: None,
        })
    }
}
