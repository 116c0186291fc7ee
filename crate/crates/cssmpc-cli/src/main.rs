use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cssmpc::conic::Settings;
use cssmpc::controller::{self, ControllerError, SteeringProblem};
use cssmpc::sim::{self, ControllerKind, SimError, SimOptions};
use cssmpc::system::{ConfigError, Scenario};
use cssmpc::terminal::{self, TerminalError};
use nalgebra::{DMatrix, DVector};

const EXIT_INFEASIBLE: u8 = 2;
const EXIT_SOLVER: u8 = 3;
const EXIT_CONFIG: u8 = 4;

#[derive(Parser)]
#[command(name = "cssmpc", version, about = "Covariance-steering stochastic MPC toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-loop Monte Carlo rollouts written as CSV plus a summary.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// cs-smpc, det-mpc, lqr, dist-fb or none.
        #[arg(long)]
        controller: ControllerKind,
        /// Defaults to the scenario's sim.steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Defaults to the scenario's sim.rollouts.
        #[arg(long)]
        rollouts: Option<usize>,
        /// Defaults to the scenario's sim.seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads for rollouts.
        #[arg(long)]
        parallel: Option<usize>,
    },
    /// Prints the terminal ingredients of a scenario.
    Terminal {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// One-shot covariance steering from the scenario's initial state.
    Steer {
        #[arg(long)]
        scenario: PathBuf,
        /// Target mean, comma separated.
        #[arg(long, allow_hyphen_values = true)]
        mu_f: String,
        /// Target covariance bound, rows separated by ';' and entries by ','.
        #[arg(long, allow_hyphen_values = true)]
        sigma_f: String,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::new(EXIT_CONFIG, e.to_string())
    }
}

impl From<TerminalError> for Failure {
    fn from(e: TerminalError) -> Self {
        let code = match e {
            TerminalError::TerminalSetEmpty { .. } => EXIT_INFEASIBLE,
            TerminalError::Chance(_) | TerminalError::Unbounded => EXIT_CONFIG,
            _ => EXIT_SOLVER,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<ControllerError> for Failure {
    fn from(e: ControllerError) -> Self {
        let code = match &e {
            ControllerError::Terminal(t) => return t.clone().into(),
            ControllerError::Chance(_) => EXIT_CONFIG,
            _ if e.is_numerical() => EXIT_SOLVER,
            ControllerError::InfeasibleAtStart { .. }
            | ControllerError::BothInitializationsInfeasible { .. }
            | ControllerError::SolverInfeasible(_) => EXIT_INFEASIBLE,
            _ => EXIT_SOLVER,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Terminal(t) => t.into(),
            SimError::Controller(c) => c.into(),
            other => Failure::new(EXIT_CONFIG, other.to_string()),
        }
    }
}

fn load(path: &PathBuf) -> Result<Scenario<f64>, Failure> {
    Ok(Scenario::from_file(path)?)
}

fn parse_vector(name: &str, text: &str) -> Result<Vec<f64>, Failure> {
    text.split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::new(EXIT_CONFIG, format!("--{name}: {e}")))
}

fn parse_matrix(name: &str, text: &str) -> Result<DMatrix<f64>, Failure> {
    let rows = text
        .split(';')
        .map(|r| parse_vector(name, r))
        .collect::<Result<Vec<_>, _>>()?;
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Failure::new(EXIT_CONFIG, format!("--{name}: rows have different lengths")));
    }
    Ok(DMatrix::from_row_iterator(rows.len(), cols, rows.into_iter().flatten()))
}

fn fmt_num(v: f64) -> String {
    format!("{v:.5e}")
}

fn print_matrix(name: &str, m: &DMatrix<f64>) {
    println!("{name} ({}x{}):", m.nrows(), m.ncols());
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{:>13}", fmt_num(*v))).collect();
        println!("  {}", cells.join(" "));
    }
}

fn print_vector(name: &str, v: &DVector<f64>) {
    let cells: Vec<String> = v.iter().map(|x| fmt_num(*x)).collect();
    println!("{name}: [{}]", cells.join(", "));
}

fn run(
    scenario: &PathBuf,
    kind: ControllerKind,
    steps: Option<usize>,
    rollouts: Option<usize>,
    seed: Option<u64>,
    out: &PathBuf,
    parallel: Option<usize>,
) -> Result<(), Failure> {
    let sc = load(scenario)?;
    let defaults = SimOptions::from_scenario(&sc);
    let opts = SimOptions {
        steps: steps.unwrap_or(defaults.steps),
        rollouts: rollouts.unwrap_or(defaults.rollouts),
        seed: seed.unwrap_or(defaults.seed),
        threads: parallel,
        ..defaults
    };
    if opts.rollouts == 0 {
        return Err(Failure::new(EXIT_CONFIG, "--rollouts must be positive"));
    }
    let logs = sim::simulate(&sc, kind, &opts)?;
    let stats = sim::summarize(&logs, &sc);
    sim::emit(&logs, &stats, &sc, out)?;

    println!("controller: {kind}");
    println!("rollouts: {}  step samples: {}", stats.rollouts, stats.step_samples);
    for row in stats.state_rows.iter().chain(&stats.input_rows) {
        println!(
            "{}: {} violations, rate {} [{}, {}]",
            row.label,
            row.count,
            fmt_num(row.rate),
            fmt_num(row.lower),
            fmt_num(row.upper)
        );
    }
    println!("average stage cost: {}", fmt_num(stats.average_stage_cost));
    println!("fallback rate: {}", fmt_num(stats.fallback.rate));
    println!("solve time median {:.3} ms, max {:.3} ms", stats.timing.median_ms, stats.timing.max_ms);
    println!("output: {}", out.display());

    let Some(first) = logs.iter().find_map(|l| l.failure.as_ref().map(|f| (l.rollout, f))) else {
        return Ok(());
    };
    let (r, f) = first;
    let failed = logs.iter().filter(|l| l.failure.is_some()).count();
    let mut failure = Failure::from(f.error.clone());
    if f.step != 0 && failure.code == EXIT_INFEASIBLE {
        failure.code = EXIT_SOLVER;
    }
    failure.message = format!("{failed} rollout(s) failed; rollout {r} at step {}: {}", f.step, failure.message);
    Err(failure)
}

fn show_terminal(scenario: &PathBuf) -> Result<(), Failure> {
    let sc = load(scenario)?;
    let t = terminal::build(&sc)?;
    println!("provenance: {:?}", t.provenance);
    print_matrix("sigma_f", &t.sigma_f);
    print_matrix("k_tilde", &t.k_tilde);
    print_matrix("p_mean", &t.p_mean);
    println!("assignability residual: {}", fmt_num(t.residual));
    println!("closed-loop spectral radius: {}", fmt_num(t.radius));
    println!(
        "stage cost bound: {}",
        fmt_num(terminal::stage_cost_bound(&t.sigma_f, &t.k_tilde, &sc.q, &sc.r))
    );
    println!("terminal mean set rows: {}", t.xf_mu.len());
    Ok(())
}

fn steer(scenario: &PathBuf, mu_f: &str, sigma_f: &str) -> Result<(), Failure> {
    let sc = load(scenario)?;
    let n = sc.system.nx();
    let mu_f = DVector::from_vec(parse_vector("mu-f", mu_f)?);
    let sigma_f = parse_matrix("sigma-f", sigma_f)?;
    if mu_f.len() != n || sigma_f.shape() != (n, n) {
        return Err(Failure::new(EXIT_CONFIG, format!("targets must have dimension {n}")));
    }
    let sigma0 = DMatrix::zeros(n, n);
    let problem = SteeringProblem {
        sys: &sc.system,
        mu0: &sc.sim.x0,
        sigma0: &sigma0,
        mu_f: &mu_f,
        sigma_f: &sigma_f,
        horizon: sc.horizon,
        state_rows: &sc.state_constraints,
        input_rows: &sc.input_constraints,
        q: &sc.q,
        r: &sc.r,
    };
    let sol = controller::covariance_steering_solve(&problem, &Settings::default())?;
    for w in &sol.warnings {
        eprintln!("warning: {w}");
    }
    println!("status: {:?}", sol.status);
    println!("cost: {}", fmt_num(sol.cost));
    print_vector("terminal mean", &sol.terminal_mean);
    print_matrix("terminal covariance", &sol.terminal_cov);
    let (nx, nu) = (n, sc.system.nu());
    for t in 0..sc.horizon {
        print_vector(&format!("v_{t}"), &sol.policy.v.rows(t * nu, nu).into_owned());
        print_matrix(&format!("K_{t}"), &sol.policy.gain.view((t * nu, t * nx), (nu, nx)).into_owned());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Run {
            scenario,
            controller,
            steps,
            rollouts,
            seed,
            out,
            parallel,
        } => run(scenario, *controller, *steps, *rollouts, *seed, out, *parallel),
        Command::Terminal { scenario } => show_terminal(scenario),
        Command::Steer {
            scenario,
            mu_f,
            sigma_f,
        } => steer(scenario, mu_f, sigma_f),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
