//! Experiment configuration.
//!
//! Every section rejects unknown keys. Omitted keys take the defaults below,
//! and [`Config::resolve`] writes them all out so that the copy stored with
//! the results reruns the same experiment.

use std::collections::BTreeMap;
use std::path::Path;

use msa_core::adjoint::RegressionBasis;
use msa_core::hamiltonian::MinimizerConfig;
use msa_core::msa::MsaConfig;
use msa_core::problem::{build_builtin_problem, builtin_parameter_keys, Params, SamplingConfig};
use msa_core::rng::derive_seed;
use msa_core::Problem;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub problem: ProblemSection,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub msa: MsaSection,
    #[serde(default)]
    pub basis: RegressionBasis,
    #[serde(default)]
    pub oracle: OracleSection,
    #[serde(default)]
    pub sampling: SamplingSection,
    #[serde(default)]
    pub bounds: BoundsSection,
    #[serde(default)]
    pub contraction: ContractionSection,
    /// Ledger overrides by constant name. Derived constants are recomputed
    /// from the overridden inputs unless they are overridden themselves.
    #[serde(default)]
    pub ledger: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub name: String,
    #[serde(default)]
    pub params: Params,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    pub paths: usize,
    pub steps: usize,
    pub seed: u64,
    /// Worker threads; 0 uses every core. Results do not depend on it.
    pub workers: usize,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            paths: 4000,
            steps: 50,
            seed: 0,
            workers: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MsaSection {
    pub max_iters: usize,
    pub stop_tol: f64,
    pub implicit_sweeps: usize,
    pub minimizer: MinimizerConfig,
}

impl Default for MsaSection {
    fn default() -> Self {
        Self {
            max_iters: 30,
            stop_tol: 1e-6,
            implicit_sweeps: 0,
            minimizer: MinimizerConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    pub x_min: f64,
    pub x_max: f64,
    pub x_points: usize,
    pub action_points: usize,
    /// Backward steps; 0 picks the smallest count the grid allows.
    pub steps: usize,
    /// Largest accepted `‖α_MSA − α_DP‖_𝒜`.
    pub control_tol: f64,
    /// Cost gaps up to `3·SE + cost_rel_tol·|J_DP|` are accepted.
    pub cost_rel_tol: f64,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            x_min: -2.0,
            x_max: 5.0,
            x_points: 201,
            action_points: 201,
            steps: 0,
            control_tol: 5e-2,
            cost_rel_tol: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSection {
    pub samples: usize,
    pub state_radius: f64,
    pub adjoint_radius: f64,
    pub tolerance: f64,
}

impl Default for SamplingSection {
    fn default() -> Self {
        Self {
            samples: 10_000,
            state_radius: 5.0,
            adjoint_radius: 5.0,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsSection {
    pub pairs: usize,
    /// Initial states of each pair are drawn from the ball of this radius.
    pub x0_radius: f64,
    /// Also solve the adjoint for every run and check the adjoint bounds.
    pub adjoint: bool,
    pub se_multiplier: f64,
    /// Fixed discretization constant; `None` calibrates it by halving dt.
    pub disc_constant: Option<f64>,
}

impl Default for BoundsSection {
    fn default() -> Self {
        Self {
            pairs: 10,
            x0_radius: 2.0,
            adjoint: true,
            se_multiplier: 3.0,
            disc_constant: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContractionSection {
    pub pairs: usize,
}

impl Default for ContractionSection {
    fn default() -> Self {
        Self { pairs: 20 }
    }
}

impl Config {
    /// Reads TOML, or JSON when the file name ends in `.json`.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks the problem and fills every default problem parameter.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        let keys = builtin_parameter_keys(&self.problem.name)?;
        build_builtin_problem::<f64>(&self.problem.name, &self.problem.params)?;
        for (k, v) in keys {
            self.problem.params.entry(k.to_string()).or_insert(v);
        }
        self.msa_config().validate()?;
        if self.simulation.seed > i64::MAX as u64 {
            return Err(CliError::Config("simulation.seed must fit in a signed 64-bit integer".into()));
        }
        if self.bounds.se_multiplier < 0.0 || !self.bounds.se_multiplier.is_finite() {
            return Err(CliError::Config("bounds.se_multiplier must be finite and >= 0".into()));
        }
        Ok(self)
    }

    pub fn build_problem(&self) -> Result<Problem, CliError> {
        Ok(build_builtin_problem(&self.problem.name, &self.problem.params)?)
    }

    pub fn msa_config(&self) -> MsaConfig {
        MsaConfig {
            max_iters: self.msa.max_iters,
            stop_tol: self.msa.stop_tol,
            path_count: self.simulation.paths,
            step_count: self.simulation.steps,
            seed: self.simulation.seed,
            basis: self.basis.clone(),
            implicit_sweeps: self.msa.implicit_sweeps,
            minimizer: self.msa.minimizer.clone(),
            keep_snapshots: false,
        }
    }

    pub fn sampling_config(&self) -> SamplingConfig<f64> {
        SamplingConfig {
            samples: self.sampling.samples,
            state_radius: self.sampling.state_radius,
            adjoint_radius: self.sampling.adjoint_radius,
            seed: derive_seed(self.simulation.seed, "sampling"),
            tolerance: self.sampling.tolerance,
        }
    }
}
