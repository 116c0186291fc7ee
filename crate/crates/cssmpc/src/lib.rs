//! Stochastic MPC with chance constraints via covariance steering.

pub mod chance;
pub mod conic;
pub mod controller;
pub mod kernel;
pub mod lifting;
pub mod scalar;
pub mod sim;
pub mod system;
pub mod terminal;

pub use scalar::Real;

pub type System = system::LtiSystem<f64>;
pub type ScenarioF64 = system::Scenario<f64>;
pub type Halfspaces = system::HalfspaceSet<f64>;
pub type Lifted = lifting::LiftedSystem<f64>;
pub type Program = conic::ConicProgram<f64>;
pub type Solution = conic::ConicSolution<f64>;
pub type SolverSettings = conic::Settings<f64>;
pub type Terminal = terminal::TerminalIngredients<f64>;
pub type Smpc = controller::SmpcController<f64>;
pub type DetMpc = controller::DetMpcController<f64>;
