//! Plant, constraint and scenario definitions.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use thiserror::Error;

use crate::kernel::{self, KernelError};
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum SystemError {
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("risk level {0} outside [0, 0.5]")]
    InvalidRisk(f64),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

impl From<SystemError> for ConfigError {
    fn from(e: SystemError) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}

/// Discrete plant `x⁺ = A x + B u + D w (+ c ρ)`.
#[derive(Debug, Clone)]
pub struct LtiSystem<T: Real> {
    pub a: DMatrix<T>,
    pub b: DMatrix<T>,
    pub d: DMatrix<T>,
    /// Known-input channel multiplying a scalar signal (road curvature).
    pub c: Option<DVector<T>>,
}

impl<T: Real> LtiSystem<T> {
    pub fn new(a: DMatrix<T>, b: DMatrix<T>, d: DMatrix<T>, c: Option<DVector<T>>) -> Result<Self, SystemError> {
        let n = a.nrows();
        if a.ncols() != n || n == 0 {
            return Err(SystemError::Invalid(format!("A is {}x{}", a.nrows(), a.ncols())));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(SystemError::Invalid(format!("B is {}x{}, expected {n} rows", b.nrows(), b.ncols())));
        }
        if d.nrows() != n || d.ncols() == 0 {
            return Err(SystemError::Invalid(format!("D is {}x{}, expected {n} rows", d.nrows(), d.ncols())));
        }
        if let Some(c) = &c {
            if c.len() != n {
                return Err(SystemError::Invalid(format!("C has length {}, expected {n}", c.len())));
            }
        }
        let finite = a.iter().chain(b.iter()).chain(d.iter()).all(|v| v.is_finite())
            && c.as_ref().map_or(true, |c| c.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(SystemError::Invalid("non-finite entry".into()));
        }
        Ok(LtiSystem { a, b, d, c })
    }

    pub fn nx(&self) -> usize {
        self.a.nrows()
    }

    pub fn nu(&self) -> usize {
        self.b.ncols()
    }

    pub fn nw(&self) -> usize {
        self.d.ncols()
    }

    pub fn ddt(&self) -> DMatrix<T> {
        &self.d * self.d.transpose()
    }

    pub fn step(&self, x: &DVector<T>, u: &DVector<T>, rho: T, w: &DVector<T>) -> DVector<T> {
        let mut next = &self.a * x + &self.b * u + &self.d * w;
        if let Some(c) = &self.c {
            next += c * rho;
        }
        next
    }
}

/// Continuous-time plant `ẋ = Ac x + Bc u (+ cc ρ)`.
#[derive(Debug, Clone)]
pub struct ContinuousLti<T: Real> {
    pub ac: DMatrix<T>,
    pub bc: DMatrix<T>,
    pub cc: Option<DVector<T>>,
}

/// Zero-order-hold discretisation through one augmented exponential.
pub fn discretize_zoh<T: Real>(cont: &ContinuousLti<T>, dt: T, d: DMatrix<T>) -> Result<LtiSystem<T>, SystemError> {
    if dt <= T::zero() {
        return Err(SystemError::Invalid("dt must be positive".into()));
    }
    let n = cont.ac.nrows();
    let nu = cont.bc.ncols();
    let extra = usize::from(cont.cc.is_some());
    let size = n + nu + extra;
    let mut m = DMatrix::zeros(size, size);
    m.view_mut((0, 0), (n, n)).copy_from(&cont.ac);
    m.view_mut((0, n), (n, nu)).copy_from(&cont.bc);
    if let Some(cc) = &cont.cc {
        m.view_mut((0, n + nu), (n, 1)).copy_from(cc);
    }
    let e = kernel::expm(&(m * dt))?;
    let a = e.view((0, 0), (n, n)).into_owned();
    let b = e.view((0, n), (n, nu)).into_owned();
    let c = cont.cc.as_ref().map(|_| e.view((0, n + nu), (n, 1)).column(0).into_owned());
    LtiSystem::new(a, b, d, c)
}

/// Lateral bicycle-model parameters (SI units).
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BicycleParams {
    pub m: f64,
    #[serde(rename = "Iz")]
    pub iz: f64,
    #[serde(rename = "Vx")]
    pub vx: f64,
    #[serde(rename = "lF")]
    pub lf: f64,
    #[serde(rename = "lR")]
    pub lr: f64,
    #[serde(rename = "Cf")]
    pub cf: f64,
    #[serde(rename = "Cr")]
    pub cr: f64,
}

impl BicycleParams {
    pub fn validate(&self) -> Result<(), SystemError> {
        let vals = [self.m, self.iz, self.vx, self.lf, self.lr, self.cf, self.cr];
        if vals.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(SystemError::Invalid("bicycle parameters must be positive".into()))
        }
    }
}

/// Linearised lateral dynamics with state (β, r, e_ψ, e_y), input δ and the
/// curvature channel on the heading-error row.
pub fn build_bicycle<T: Real>(p: &BicycleParams) -> Result<ContinuousLti<T>, SystemError> {
    p.validate()?;
    let BicycleParams { m, iz, vx, lf, lr, cf, cr } = *p;
    let ac = [
        -(cr + cf) / (m * vx),
        -1.0 + (lr * cr - lf * cf) / (m * vx * vx),
        0.0,
        0.0,
        (lr * cr - lf * cf) / iz,
        -(lr * lr * cr + lf * lf * cf) / (iz * vx),
        0.0,
        0.0,
        0.0,
        1.0,
        0.0,
        0.0,
        vx,
        0.0,
        vx,
        0.0,
    ];
    let bc = [cf / (m * vx), lf * cf / iz, 0.0, 0.0];
    let cc = [0.0, 0.0, -vx, 0.0];
    Ok(ContinuousLti {
        ac: DMatrix::from_row_slice(4, 4, &ac.map(T::lit)),
        bc: DMatrix::from_row_slice(4, 1, &bc.map(T::lit)),
        cc: Some(DVector::from_row_slice(&cc.map(T::lit))),
    })
}

/// One chance-constrained halfspace `P(αᵀz ≤ β) ≥ 1 − p`.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfspaceRow<T: Real> {
    pub alpha: DVector<T>,
    pub beta: T,
    pub p: T,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct HalfspaceSet<T: Real> {
    pub rows: Vec<HalfspaceRow<T>>,
}

impl<T: Real> HalfspaceSet<T> {
    pub fn new(rows: Vec<HalfspaceRow<T>>, dim: usize) -> Result<Self, SystemError> {
        for (i, r) in rows.iter().enumerate() {
            if r.alpha.len() != dim {
                return Err(SystemError::Invalid(format!("row {i}: alpha has length {}, expected {dim}", r.alpha.len())));
            }
            if r.alpha.iter().all(|v| *v == T::zero()) {
                return Err(SystemError::Invalid(format!("row {i}: alpha is zero")));
            }
            if !(r.p >= T::zero() && r.p <= T::lit(0.5)) {
                return Err(SystemError::InvalidRisk(r.p.as_f64()));
            }
        }
        Ok(HalfspaceSet { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn contains(&self, z: &DVector<T>, tol: T) -> bool {
        self.rows.iter().all(|r| r.alpha.dot(z) <= r.beta + tol)
    }

    /// Stacked `(H, h)` with `H z ≤ h`.
    pub fn matrices(&self) -> (DMatrix<T>, DVector<T>) {
        let n = self.rows.first().map_or(0, |r| r.alpha.len());
        let mut h = DMatrix::zeros(self.rows.len(), n);
        let mut b = DVector::zeros(self.rows.len());
        for (i, r) in self.rows.iter().enumerate() {
            h.set_row(i, &r.alpha.transpose());
            b[i] = r.beta;
        }
        (h, b)
    }
}

/// Uniform Boole split of a total risk budget.
pub fn allocate_risk<T: Real>(epsilon: T, m: usize) -> Result<Vec<T>, SystemError> {
    if !(epsilon >= T::zero() && epsilon < T::lit(0.5)) {
        return Err(SystemError::InvalidRisk(epsilon.as_f64()));
    }
    if m == 0 {
        return Err(SystemError::Invalid("row count must be positive".into()));
    }
    let mut p = epsilon / T::lit(m as f64);
    let shrink = T::one() - T::default_epsilon();
    while (0..m).fold(T::zero(), |acc, _| acc + p) > epsilon {
        p *= shrink;
    }
    Ok(vec![p; m])
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub controllable: bool,
    pub horizon_ok: bool,
    pub noise_covers_inputs: bool,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn all_pass(&self) -> bool {
        self.controllable && self.horizon_ok && self.noise_covers_inputs
    }
}

pub fn validate_assumptions<T: Real>(sys: &LtiSystem<T>, horizon: usize) -> ValidationReport {
    let n = sys.nx();
    let nu = sys.nu();
    let mut ctrb = DMatrix::zeros(n, n * nu);
    let mut blk = sys.b.clone();
    for i in 0..n {
        ctrb.view_mut((0, i * nu), (n, nu)).copy_from(&blk);
        blk = &sys.a * blk;
    }
    let sv = kernel::svd_factor(&ctrb);
    let smax = sv.sigma.get(0).copied().unwrap_or(T::zero());
    let rank = sv.sigma.iter().filter(|s| **s > T::lit(1e-9) * smax && smax > T::zero()).count();
    let controllable = rank == n;
    let horizon_ok = horizon >= n;
    let proj = &sys.d * kernel::pinv(&sys.d);
    let resid = (&sys.b - proj * &sys.b).norm();
    let noise_covers_inputs = resid <= T::lit(1e-9) * T::one().max(sys.b.norm());
    let mut warnings = Vec::new();
    if !controllable {
        warnings.push(format!("(A, B) is not controllable: controllability rank {rank} < {n}"));
    }
    if !horizon_ok {
        warnings.push(format!("horizon {horizon} is shorter than the state dimension {n}"));
    }
    if !noise_covers_inputs {
        warnings.push(format!("range(B) is not contained in range(D): residual {:.3e}", resid.as_f64()));
    }
    ValidationReport {
        controllable,
        horizon_ok,
        noise_covers_inputs,
        warnings,
    }
}

/// Constant-curvature track segment.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub length: f64,
    pub curvature: f64,
}

/// Closed circuit traversed at constant speed; supplies the curvature signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub segments: Vec<Segment>,
    pub speed: f64,
    pub dt: f64,
}

/// Centreline pose at an arc length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Track {
    pub fn new(segments: Vec<Segment>, speed: f64, dt: f64) -> Result<Self, SystemError> {
        if segments.is_empty() {
            return Err(SystemError::Invalid("track needs at least one segment".into()));
        }
        if segments.iter().any(|s| !(s.length > 0.0) || !s.curvature.is_finite()) {
            return Err(SystemError::Invalid("segment lengths must be positive".into()));
        }
        if !(speed > 0.0) || !(dt > 0.0) {
            return Err(SystemError::Invalid("track speed and dt must be positive".into()));
        }
        Ok(Track { segments, speed, dt })
    }

    pub fn length(&self) -> f64 {
        self.segments.iter().map(|s| s.length).sum()
    }

    /// Steps needed to complete one lap.
    pub fn lap_steps(&self) -> usize {
        (self.length() / (self.speed * self.dt)).ceil() as usize
    }

    fn locate(&self, s: f64) -> (usize, f64) {
        let total = self.length();
        let mut rem = s.rem_euclid(total);
        for (i, seg) in self.segments.iter().enumerate() {
            if rem < seg.length {
                return (i, rem);
            }
            rem -= seg.length;
        }
        (self.segments.len() - 1, self.segments.last().unwrap().length)
    }

    pub fn curvature_at(&self, s: f64) -> f64 {
        self.segments[self.locate(s).0].curvature
    }

    /// Curvature at step `k` of the plant clock.
    pub fn curvature_at_step(&self, k: usize) -> f64 {
        self.curvature_at(k as f64 * self.speed * self.dt)
    }

    /// Curvature preview over `n` steps starting at step `k`.
    pub fn preview(&self, k: usize, n: usize) -> Vec<f64> {
        (0..n).map(|t| self.curvature_at_step(k + t)).collect()
    }

    /// Centreline pose obtained by integrating the segments exactly.
    pub fn pose_at(&self, s: f64) -> Pose {
        let (idx, along) = self.locate(s);
        let mut pose = Pose { x: 0.0, y: 0.0, heading: 0.0 };
        for seg in &self.segments[..idx] {
            pose = advance(pose, seg.curvature, seg.length);
        }
        advance(pose, self.segments[idx].curvature, along)
    }

    /// Global position and heading of a vehicle at lateral/heading offsets.
    pub fn global_pose(&self, s: f64, e_y: f64, e_psi: f64) -> Pose {
        let c = self.pose_at(s);
        Pose {
            x: c.x - e_y * c.heading.sin(),
            y: c.y + e_y * c.heading.cos(),
            heading: c.heading + e_psi,
        }
    }
}

fn advance(p: Pose, kappa: f64, len: f64) -> Pose {
    if kappa.abs() < 1e-12 {
        return Pose {
            x: p.x + len * p.heading.cos(),
            y: p.y + len * p.heading.sin(),
            heading: p.heading,
        };
    }
    let h1 = p.heading + kappa * len;
    Pose {
        x: p.x + (h1.sin() - p.heading.sin()) / kappa,
        y: p.y - (h1.cos() - p.heading.cos()) / kappa,
        heading: h1,
    }
}

/// How the terminal covariance is obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum TerminalMode<T: Real> {
    /// Steady state of the LQR closed loop.
    LyapunovLqr,
    /// Frobenius projection of an LQR-propagated covariance onto the assignable set.
    NearestAssignable {
        /// Propagation steps for the desired covariance.
        desired_steps: usize,
        /// Extra floor `Σ ⪰ DDᵀ + margin·I`.
        noise_margin: T,
    },
    Explicit(DMatrix<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSettings<T: Real> {
    pub steps: usize,
    pub rollouts: usize,
    pub seed: u64,
    pub x0: DVector<T>,
}

#[derive(Debug, Clone)]
pub struct Scenario<T: Real> {
    pub system: LtiSystem<T>,
    pub state_constraints: HalfspaceSet<T>,
    pub input_constraints: HalfspaceSet<T>,
    pub q: DMatrix<T>,
    pub r: DMatrix<T>,
    pub horizon: usize,
    pub terminal_mode: TerminalMode<T>,
    /// Optional box `|μ_i| ≤ mean_box` added to the terminal mean rows.
    pub mean_box: Option<T>,
    pub sim: SimSettings<T>,
    pub track: Option<Track>,
}

impl<T: Real> Scenario<T> {
    pub fn validate(&self) -> Result<(), SystemError> {
        let n = self.system.nx();
        let nu = self.system.nu();
        if self.horizon == 0 {
            return Err(SystemError::Invalid("horizon must be at least 1".into()));
        }
        if self.q.shape() != (n, n) || self.r.shape() != (nu, nu) {
            return Err(SystemError::Invalid("cost matrix shapes".into()));
        }
        if kernel::asymmetry(&self.q) > T::lit(1e-10) || kernel::min_eigenvalue(&self.q) < -T::lit(1e-12) {
            return Err(SystemError::Invalid("Q must be symmetric PSD".into()));
        }
        if kernel::asymmetry(&self.r) > T::lit(1e-10) || kernel::min_eigenvalue(&self.r) <= T::zero() {
            return Err(SystemError::Invalid("R must be symmetric positive definite".into()));
        }
        if self.sim.x0.len() != n {
            return Err(SystemError::Invalid(format!("x0 has length {}, expected {n}", self.sim.x0.len())));
        }
        if self.track.is_some() && self.system.c.is_none() {
            return Err(SystemError::Invalid("a track requires the affine channel C".into()));
        }
        if let TerminalMode::Explicit(s) = &self.terminal_mode {
            if s.shape() != (n, n) {
                return Err(SystemError::Invalid("sigma_f shape".into()));
            }
        }
        Ok(())
    }

    /// Curvature preview for a horizon starting at step `k` (zeros without a track).
    pub fn signal(&self, k: usize) -> Vec<T> {
        match &self.track {
            Some(t) => t.preview(k, self.horizon).into_iter().map(T::lit).collect(),
            None => vec![T::zero(); self.horizon],
        }
    }

    pub fn signal_at(&self, k: usize) -> T {
        self.track.as_ref().map_or(T::zero(), |t| T::lit(t.curvature_at_step(k)))
    }
}

mod file {
    use serde::Deserialize;

    use super::{BicycleParams, Segment};

    #[derive(Debug, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct ScenarioFile {
        pub system: SystemSection,
        #[serde(default)]
        pub constraints: ConstraintSection,
        pub cost: CostSection,
        pub horizon: usize,
        pub terminal: TerminalSection,
        pub sim: SimSection,
        pub track: Option<TrackSection>,
    }

    #[derive(Debug, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct SystemSection {
        #[serde(rename = "A")]
        pub a: Option<Vec<Vec<f64>>>,
        #[serde(rename = "B")]
        pub b: Option<Vec<Vec<f64>>>,
        #[serde(rename = "D")]
        pub d: Vec<Vec<f64>>,
        #[serde(rename = "C")]
        pub c: Option<Vec<f64>>,
        pub continuous: Option<ContinuousSection>,
        pub bicycle: Option<BicycleParams>,
        pub dt: Option<f64>,
    }

    #[derive(Debug, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct ContinuousSection {
        #[serde(rename = "A")]
        pub a: Vec<Vec<f64>>,
        #[serde(rename = "B")]
        pub b: Vec<Vec<f64>>,
        #[serde(rename = "C")]
        pub c: Option<Vec<f64>>,
    }

    #[derive(Debug, Default, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct ConstraintSection {
        #[serde(default)]
        pub state: Vec<RowSection>,
        #[serde(default)]
        pub input: Vec<RowSection>,
    }

    #[derive(Debug, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct RowSection {
        pub alpha: Vec<f64>,
        pub beta: f64,
        pub p: f64,
    }

    #[derive(Debug, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct CostSection {
        #[serde(rename = "Q")]
        pub q: Vec<Vec<f64>>,
        #[serde(rename = "R")]
        pub r: Vec<Vec<f64>>,
    }

    #[derive(Debug, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct TerminalSection {
        pub mode: String,
        pub sigma_f: Option<Vec<Vec<f64>>>,
        pub desired_steps: Option<usize>,
        pub noise_margin: Option<f64>,
        pub mean_box: Option<f64>,
    }

    #[derive(Debug, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct SimSection {
        pub steps: usize,
        pub rollouts: usize,
        pub seed: u64,
        pub x0: Vec<f64>,
    }

    #[derive(Debug, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct TrackSection {
        pub speed: Option<f64>,
        pub segments: Vec<Segment>,
    }
}

fn matrix(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, ConfigError> {
    let r = rows.len();
    let c = rows.first().map_or(0, |v| v.len());
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(ConfigError::Invalid(format!("{name} must be a non-empty rectangular array")));
    }
    let data: Vec<f64> = rows.iter().flatten().copied().collect();
    kernel::from_rows(r, c, &data).map_err(|e| ConfigError::Invalid(format!("{name}: {e}")))
}

fn vector(name: &str, v: &[f64]) -> Result<DVector<f64>, ConfigError> {
    if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
        return Err(ConfigError::Invalid(format!("{name} must be a non-empty finite array")));
    }
    Ok(DVector::from_column_slice(v))
}

impl Scenario<f64> {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let f: file::ScenarioFile = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let d = matrix("system.D", &f.system.d)?;
        let mut speed = None;
        let dt = f.system.dt;
        let system = match (&f.system.a, &f.system.b, &f.system.continuous, &f.system.bicycle) {
            (Some(a), Some(b), None, None) => {
                if dt.is_some() {
                    return Err(ConfigError::Invalid("system.dt only applies to continuous models".into()));
                }
                let c = f.system.c.as_deref().map(|c| vector("system.C", c)).transpose()?;
                LtiSystem::new(matrix("system.A", a)?, matrix("system.B", b)?, d, c)?
            }
            (None, None, Some(cont), None) => {
                let dt = dt.ok_or_else(|| ConfigError::Invalid("system.continuous requires system.dt".into()))?;
                if f.system.c.is_some() {
                    return Err(ConfigError::Invalid("give C inside system.continuous".into()));
                }
                let cont = ContinuousLti {
                    ac: matrix("system.continuous.A", &cont.a)?,
                    bc: matrix("system.continuous.B", &cont.b)?,
                    cc: cont.c.as_deref().map(|c| vector("system.continuous.C", c)).transpose()?,
                };
                discretize_zoh(&cont, dt, d)?
            }
            (None, None, None, Some(params)) => {
                let dt = dt.ok_or_else(|| ConfigError::Invalid("system.bicycle requires system.dt".into()))?;
                if f.system.c.is_some() {
                    return Err(ConfigError::Invalid("the bicycle model defines its own C".into()));
                }
                speed = Some(params.vx);
                discretize_zoh(&build_bicycle(params)?, dt, d)?
            }
            _ => {
                return Err(ConfigError::Invalid(
                    "system needs exactly one of {A, B}, continuous, or bicycle".into(),
                ))
            }
        };
        let n = system.nx();
        let nu = system.nu();
        let rows = |name: &str, rs: &[file::RowSection]| -> Result<Vec<HalfspaceRow<f64>>, ConfigError> {
            rs.iter()
                .enumerate()
                .map(|(i, r)| {
                    Ok(HalfspaceRow {
                        alpha: vector(&format!("{name}[{i}].alpha"), &r.alpha)?,
                        beta: r.beta,
                        p: r.p,
                    })
                })
                .collect()
        };
        let state_constraints = HalfspaceSet::new(rows("constraints.state", &f.constraints.state)?, n)?;
        let input_constraints = HalfspaceSet::new(rows("constraints.input", &f.constraints.input)?, nu)?;
        let terminal_mode = match f.terminal.mode.as_str() {
            "lyapunov-lqr" => TerminalMode::LyapunovLqr,
            "nearest-assignable" => TerminalMode::NearestAssignable {
                desired_steps: f.terminal.desired_steps.unwrap_or(f.horizon.saturating_sub(1)),
                noise_margin: f.terminal.noise_margin.unwrap_or(0.0),
            },
            "explicit" => TerminalMode::Explicit(matrix(
                "terminal.sigma_f",
                f.terminal
                    .sigma_f
                    .as_ref()
                    .ok_or_else(|| ConfigError::Invalid("explicit mode requires terminal.sigma_f".into()))?,
            )?),
            other => return Err(ConfigError::Invalid(format!("unknown terminal mode '{other}'"))),
        };
        let mode_name = f.terminal.mode.as_str();
        if f.terminal.sigma_f.is_some() && mode_name != "explicit" {
            return Err(ConfigError::Invalid("terminal.sigma_f only applies to explicit mode".into()));
        }
        if (f.terminal.desired_steps.is_some() || f.terminal.noise_margin.is_some()) && mode_name != "nearest-assignable" {
            return Err(ConfigError::Invalid(
                "desired_steps and noise_margin only apply to nearest-assignable mode".into(),
            ));
        }
        if let Some(m) = f.terminal.noise_margin {
            if !(m >= 0.0) {
                return Err(ConfigError::Invalid("terminal.noise_margin must be nonnegative".into()));
            }
        }
        if let Some(b) = f.terminal.mean_box {
            if !(b > 0.0) {
                return Err(ConfigError::Invalid("terminal.mean_box must be positive".into()));
            }
        }
        let track = match f.track {
            Some(t) => {
                let speed = t
                    .speed
                    .or(speed)
                    .ok_or_else(|| ConfigError::Invalid("track.speed is required without a bicycle model".into()))?;
                let dt = dt.ok_or_else(|| ConfigError::Invalid("a track requires system.dt".into()))?;
                Some(Track::new(t.segments, speed, dt)?)
            }
            None => None,
        };
        let scenario = Scenario {
            system,
            state_constraints,
            input_constraints,
            q: matrix("cost.Q", &f.cost.q)?,
            r: matrix("cost.R", &f.cost.r)?,
            horizon: f.horizon,
            terminal_mode,
            mean_box: f.terminal.mean_box,
            sim: SimSettings {
                steps: f.sim.steps,
                rollouts: f.sim.rollouts,
                seed: f.sim.seed,
                x0: vector("sim.x0", &f.sim.x0)?,
            },
            track,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }
}
