//! Method of successive approximations (MSA) for stochastic optimal control.
//!
//! The crate simulates controlled SDEs with Euler–Maruyama, solves the
//! adjoint backward SDE by least-squares Monte Carlo, minimizes the
//! Hamiltonian pointwise over a box of actions, and iterates these steps to
//! a fixed point. The [`analysis`] module computes the contraction constants
//! of the MSA map and checks the stability and boundedness estimates against
//! simulated ensembles; [`oracle`] provides a dynamic-programming reference
//! for one-dimensional problems.
//!
//! Everything is generic over [`Real`] (`f32` or `f64`); the aliases below
//! fix the scalar to `f64`, with `…32` variants for `f32`.

pub mod adjoint;
pub mod analysis;
pub mod error;
pub mod hamiltonian;
pub mod linalg;
pub mod msa;
pub mod oracle;
pub mod paths;
pub mod problem;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Problem = problem::ProblemSpec<f64>;
pub type Problem32 = problem::ProblemSpec<f32>;
pub type Ledger = problem::ConstantsLedger<f64>;
pub type Ledger32 = problem::ConstantsLedger<f32>;
pub type Grid = paths::TimeGrid<f64>;
pub type Grid32 = paths::TimeGrid<f32>;
pub type Noise = paths::BrownianEnsemble<f64>;
pub type Noise32 = paths::BrownianEnsemble<f32>;
pub type States = paths::StateEnsemble<f64>;
pub type States32 = paths::StateEnsemble<f32>;
pub type Control = paths::ControlProcess<f64>;
pub type Control32 = paths::ControlProcess<f32>;
pub type Adjoint = paths::AdjointEnsemble<f64>;
pub type Adjoint32 = paths::AdjointEnsemble<f32>;
pub type MsaOutcome = msa::MsaResult<f64>;
pub type MsaOutcome32 = msa::MsaResult<f32>;
