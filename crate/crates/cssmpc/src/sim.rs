//! Closed-loop Monte Carlo rollouts, summary statistics and file output.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DVector;
use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::controller::{self, Controller, ControllerError, Mode, PolicyKind, SmpcController, ZeroController};
use crate::system::{Pose, Scenario};
use crate::terminal::{self, TerminalError, TerminalIngredients};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Terminal(#[from] TerminalError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("thread pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerKind {
    CsSmpc,
    DetMpc,
    Lqr,
    DistFb,
    None,
}

impl ControllerKind {
    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::CsSmpc => "cs-smpc",
            ControllerKind::DetMpc => "det-mpc",
            ControllerKind::Lqr => "lqr",
            ControllerKind::DistFb => "dist-fb",
            ControllerKind::None => "none",
        }
    }

    pub fn needs_terminal(self) -> bool {
        matches!(self, ControllerKind::CsSmpc | ControllerKind::DistFb)
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ControllerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "cs-smpc" => ControllerKind::CsSmpc,
            "det-mpc" => ControllerKind::DetMpc,
            "lqr" => ControllerKind::Lqr,
            "dist-fb" => ControllerKind::DistFb,
            "none" => ControllerKind::None,
            other => return Err(format!("unknown controller '{other}'")),
        })
    }
}

/// Builds a fresh controller instance.
pub fn make_controller(
    sc: &Scenario<f64>,
    kind: ControllerKind,
    term: Option<&TerminalIngredients<f64>>,
) -> Result<Box<dyn Controller<f64>>, SimError> {
    let smpc = |policy| -> Result<Box<dyn Controller<f64>>, SimError> {
        let term = match term {
            Some(t) => t.clone(),
            None => terminal::build(sc)?,
        };
        Ok(Box::new(SmpcController::new(sc.clone(), term, policy)?))
    };
    Ok(match kind {
        ControllerKind::CsSmpc => smpc(PolicyKind::StateFeedback)?,
        ControllerKind::DistFb => smpc(PolicyKind::DisturbanceFeedback)?,
        ControllerKind::DetMpc => Box::new(controller::baseline_det_mpc(sc)?),
        ControllerKind::Lqr => Box::new(controller::baseline_lqr(&sc.system, &sc.q, &sc.r)?),
        ControllerKind::None => Box::new(ZeroController { nu: sc.system.nu() }),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub k: usize,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub mode: Mode,
    pub solve_time: f64,
    /// `true` where the raw row `αᵀx ≤ β` is violated.
    pub state_violated: Vec<bool>,
    pub input_violated: Vec<bool>,
    /// Whether the belief covariance used at this step was exactly zero.
    pub sigma_zero: bool,
    /// Predicted mean of the next state, when the controller reports one.
    pub predicted_next: Option<DVector<f64>>,
    pub pose: Option<Pose>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutFailure {
    pub step: usize,
    pub error: ControllerError,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutLog {
    pub rollout: usize,
    pub steps: Vec<StepLog>,
    pub failure: Option<RolloutFailure>,
}

#[derive(Debug, Clone)]
pub struct SimOptions {
    pub steps: usize,
    pub rollouts: usize,
    pub seed: u64,
    /// Multiplier on the sampled noise; zero gives noise-free rollouts.
    pub noise_scale: f64,
    /// Worker threads; `None` runs on the calling thread.
    pub threads: Option<usize>,
}

impl SimOptions {
    pub fn from_scenario(sc: &Scenario<f64>) -> Self {
        SimOptions {
            steps: sc.sim.steps,
            rollouts: sc.sim.rollouts,
            seed: sc.sim.seed,
            noise_scale: 1.0,
            threads: None,
        }
    }
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of rollout `r` under a master seed.
pub fn rollout_seed(master: u64, r: usize) -> u64 {
    splitmix64(master ^ splitmix64(r as u64))
}

/// Standard normal samples by the Marsaglia polar method.
pub struct PolarNormal {
    rng: SmallRng,
    spare: Option<f64>,
}

impl PolarNormal {
    pub fn new(seed: u64) -> Self {
        PolarNormal {
            rng: SmallRng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn sample(&mut self) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        loop {
            let u = self.rng.random::<f64>() * 2.0 - 1.0;
            let v = self.rng.random::<f64>() * 2.0 - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let f = (-2.0 * s.ln() / s).sqrt();
                self.spare = Some(v * f);
                return u * f;
            }
        }
    }

    pub fn vector(&mut self, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| self.sample())
    }
}

fn violations(rows: &crate::system::HalfspaceSet<f64>, z: &DVector<f64>) -> Vec<bool> {
    rows.rows.iter().map(|r| r.alpha.dot(z) > r.beta).collect()
}

fn pose(sc: &Scenario<f64>, k: usize, x: &DVector<f64>) -> Option<Pose> {
    let track = sc.track.as_ref()?;
    if x.len() != 4 {
        return None;
    }
    let s = (k as f64 * track.speed * track.dt).min(track.length());
    Some(track.global_pose(s, x[3], x[2]))
}

/// One closed-loop rollout.
pub fn rollout(
    sc: &Scenario<f64>,
    ctrl: &mut dyn Controller<f64>,
    r: usize,
    opts: &SimOptions,
) -> RolloutLog {
    let mut noise = PolarNormal::new(rollout_seed(opts.seed, r));
    let sys = &sc.system;
    let mut x = sc.sim.x0.clone();
    let mut steps = Vec::with_capacity(opts.steps);
    for k in 0..opts.steps {
        let out = match ctrl.control(k, &x) {
            Ok(o) => o,
            Err(error) => {
                return RolloutLog {
                    rollout: r,
                    steps,
                    failure: Some(RolloutFailure { step: k, error }),
                }
            }
        };
        let w = noise.vector(sys.nw()) * opts.noise_scale;
        let next = sys.step(&x, &out.u, sc.signal_at(k), &w);
        steps.push(StepLog {
            k,
            state_violated: violations(&sc.state_constraints, &x),
            input_violated: violations(&sc.input_constraints, &out.u),
            sigma_zero: out.belief_sigma.as_ref().is_none_or(|s| s.iter().all(|v| *v == 0.0)),
            predicted_next: out.predicted_means.as_ref().map(|m| m[1].clone()),
            pose: pose(sc, k, &x),
            x,
            u: out.u,
            mode: out.mode,
            solve_time: out.solve_time,
        });
        x = next;
    }
    RolloutLog {
        rollout: r,
        steps,
        failure: None,
    }
}

/// Runs `opts.rollouts` independent rollouts; results keep rollout order.
pub fn simulate(sc: &Scenario<f64>, kind: ControllerKind, opts: &SimOptions) -> Result<Vec<RolloutLog>, SimError> {
    let term = if kind.needs_terminal() {
        Some(terminal::build(sc)?)
    } else {
        None
    };
    let run = |r: usize| -> Result<RolloutLog, SimError> {
        let mut ctrl = make_controller(sc, kind, term.as_ref())?;
        Ok(rollout(sc, ctrl.as_mut(), r, opts))
    };
    match opts.threads {
        None => (0..opts.rollouts).map(run).collect(),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| SimError::Pool(e.to_string()))?;
            pool.install(|| (0..opts.rollouts).into_par_iter().map(run).collect())
        }
    }
}

/// Empirical rate with a 95% Wilson interval.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateStat {
    pub label: String,
    pub count: usize,
    pub samples: usize,
    pub rate: f64,
    pub lower: f64,
    pub upper: f64,
}

impl RateStat {
    pub fn new(label: impl Into<String>, count: usize, samples: usize) -> Self {
        let (lower, upper) = wilson_interval(count, samples, 1.959_963_984_540_054);
        RateStat {
            label: label.into(),
            count,
            samples,
            rate: if samples == 0 { 0.0 } else { count as f64 / samples as f64 },
            lower,
            upper,
        }
    }
}

pub fn wilson_interval(count: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let p = count as f64 / nf;
    let z2 = z * z;
    let den = 1.0 + z2 / nf;
    let centre = (p + z2 / (2.0 * nf)) / den;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / den;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingStats {
    pub median_ms: f64,
    pub p90_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailureRecord {
    pub rollout: usize,
    pub step: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryStats {
    pub rollouts: usize,
    pub step_samples: usize,
    pub state_rows: Vec<RateStat>,
    pub input_rows: Vec<RateStat>,
    pub average_stage_cost: f64,
    pub fallback: RateStat,
    pub timing: TimingStats,
    pub failures: Vec<FailureRecord>,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Aggregates rollout logs.
pub fn summarize(logs: &[RolloutLog], sc: &Scenario<f64>) -> SummaryStats {
    let ns = sc.state_constraints.len();
    let nu_rows = sc.input_constraints.len();
    let mut sv = vec![0usize; ns];
    let mut uv = vec![0usize; nu_rows];
    let mut samples = 0;
    let mut fallback = 0;
    let mut times = Vec::new();
    let mut cost_sum = 0.0;
    let mut cost_runs = 0;
    for log in logs {
        let mut run_cost = 0.0;
        for st in &log.steps {
            samples += 1;
            for (i, v) in st.state_violated.iter().enumerate() {
                sv[i] += usize::from(*v);
            }
            for (i, v) in st.input_violated.iter().enumerate() {
                uv[i] += usize::from(*v);
            }
            fallback += usize::from(st.mode == Mode::Fallback);
            times.push(st.solve_time * 1e3);
            run_cost += st.x.dot(&(&sc.q * &st.x)) + st.u.dot(&(&sc.r * &st.u));
        }
        if !log.steps.is_empty() {
            cost_sum += run_cost / log.steps.len() as f64;
            cost_runs += 1;
        }
    }
    times.sort_by(|a, b| a.total_cmp(b));
    SummaryStats {
        rollouts: logs.len(),
        step_samples: samples,
        state_rows: sv.iter().enumerate().map(|(i, c)| RateStat::new(format!("s{i}"), *c, samples)).collect(),
        input_rows: uv.iter().enumerate().map(|(i, c)| RateStat::new(format!("u{i}"), *c, samples)).collect(),
        average_stage_cost: if cost_runs == 0 { 0.0 } else { cost_sum / cost_runs as f64 },
        fallback: RateStat::new("fallback", fallback, samples),
        timing: TimingStats {
            median_ms: percentile(&times, 0.5),
            p90_ms: percentile(&times, 0.9),
            p99_ms: percentile(&times, 0.99),
            max_ms: times.last().copied().unwrap_or(0.0),
        },
        failures: logs
            .iter()
            .filter_map(|l| {
                l.failure.as_ref().map(|f| FailureRecord {
                    rollout: l.rollout,
                    step: f.step,
                    error: f.error.to_string(),
                })
            })
            .collect(),
    }
}

/// Mean stage cost `xᵀQx + uᵀRu` pooled over every step `k ≥ from` of every rollout.
pub fn tail_stage_cost(logs: &[RolloutLog], sc: &Scenario<f64>, from: usize) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for st in logs.iter().flat_map(|l| l.steps.iter().filter(|s| s.k >= from)) {
        total += st.x.dot(&(&sc.q * &st.x)) + st.u.dot(&(&sc.r * &st.u));
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Header of the per-rollout CSV.
pub fn csv_header(sc: &Scenario<f64>) -> Vec<String> {
    let mut h = vec!["k".to_string()];
    h.extend((0..sc.system.nx()).map(|i| format!("x_{i}")));
    h.extend((0..sc.system.nu()).map(|i| format!("u_{i}")));
    h.push("mode".into());
    h.push("solve_ms".into());
    h.extend((0..sc.state_constraints.len()).map(|i| format!("viol_s{i}")));
    h.extend((0..sc.input_constraints.len()).map(|i| format!("viol_u{i}")));
    if sc.track.is_some() {
        h.extend(["px", "py", "psi"].map(String::from));
    }
    h
}

fn csv_record(sc: &Scenario<f64>, st: &StepLog) -> Vec<String> {
    let mut r = vec![st.k.to_string()];
    r.extend(st.x.iter().map(|v| v.to_string()));
    r.extend(st.u.iter().map(|v| v.to_string()));
    r.push(if st.mode == Mode::Measurement { "1" } else { "0" }.into());
    r.push((st.solve_time * 1e3).to_string());
    r.extend(st.state_violated.iter().chain(&st.input_violated).map(|v| u8::from(*v).to_string()));
    if sc.track.is_some() {
        match &st.pose {
            Some(p) => r.extend([p.x, p.y, p.heading].map(|v| v.to_string())),
            None => r.extend(["", "", ""].map(String::from)),
        }
    }
    r
}

/// Writes `rollout_NNN.csv` per rollout and `summary.toml`.
pub fn emit(logs: &[RolloutLog], stats: &SummaryStats, sc: &Scenario<f64>, dir: &Path) -> Result<(), SimError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| SimError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let header = csv_header(sc);
    for log in logs {
        let path = dir.join(format!("rollout_{:03}.csv", log.rollout));
        let mut w = csv::Writer::from_path(&path).map_err(|e| SimError::Format {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let fmt_err = |e: csv::Error| SimError::Format {
            path: path.clone(),
            message: e.to_string(),
        };
        w.write_record(&header).map_err(fmt_err)?;
        for st in &log.steps {
            w.write_record(csv_record(sc, st)).map_err(fmt_err)?;
        }
        w.flush().map_err(io(&path))?;
    }
    let path = dir.join("summary.toml");
    let text = toml::to_string(stats).map_err(|e| SimError::Format {
        path: path.clone(),
        message: e.to_string(),
    })?;
    fs::write(&path, text).map_err(io(&path))
}
