//! Method of successive approximations: forward simulation, adjoint solve and
//! pointwise Hamiltonian minimization, iterated to a fixed point.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adjoint::{solve_adjoint_with, AdjointConfig, RegressionBasis};
use crate::error::{Error, Result};
use crate::hamiltonian::{minimize_reduced, MinimizerConfig};
use crate::paths::{
    estimate_cost, sample_brownian, simulate_forward, sup_norm_distance, AdjointEnsemble,
    BrownianEnsemble, ControlProcess, Estimate, PathArray, StateEnsemble, TimeGrid,
};
use crate::problem::ProblemSpec;
use crate::rng::{derive_seed, seeded_rng};
use crate::scalar::Real;

/// Slack added to `L_muT` when comparing measured contraction rates.
pub const CONTRACTION_SLACK: f64 = 0.1;

/// Diffs below this fraction of the largest diff are treated as rounding
/// noise by the rate fit and the divergence check.
const FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsaConfig {
    pub max_iters: usize,
    /// Stop once `‖α^{i} − α^{i−1}‖_𝒜 < stop_tol`.
    pub stop_tol: f64,
    pub path_count: usize,
    pub step_count: usize,
    pub seed: u64,
    pub basis: RegressionBasis,
    pub implicit_sweeps: usize,
    pub minimizer: MinimizerConfig,
    /// Keep every iterate in [`MsaResult::snapshots`].
    pub keep_snapshots: bool,
}

impl Default for MsaConfig {
    fn default() -> Self {
        Self {
            max_iters: 30,
            stop_tol: 1e-6,
            path_count: 4000,
            step_count: 50,
            seed: 0,
            basis: RegressionBasis::default(),
            implicit_sweeps: 0,
            minimizer: MinimizerConfig::default(),
            keep_snapshots: false,
        }
    }
}

impl MsaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.path_count == 0 || self.step_count == 0 {
            return Err(Error::Config("path_count and step_count must be positive".into()));
        }
        if !(self.stop_tol > 0.0) || !self.stop_tol.is_finite() {
            return Err(Error::Config("stop_tol must be finite and > 0".into()));
        }
        Ok(())
    }

    fn adjoint(&self) -> AdjointConfig {
        AdjointConfig {
            basis: self.basis.clone(),
            implicit_sweeps: self.implicit_sweeps,
        }
    }

    /// The noise every iterate shares.
    pub fn noise<T: Real>(&self, spec: &ProblemSpec<T>) -> Result<BrownianEnsemble<T>> {
        let grid = TimeGrid::new(spec.horizon, self.step_count)?;
        sample_brownian(grid, self.path_count, spec.noise_dim, derive_seed(self.seed, "brownian"))
    }
}

/// The constant control at the midpoint of the action box.
pub fn midpoint_control<T: Real>(spec: &ProblemSpec<T>, noise: &BrownianEnsemble<T>) -> ControlProcess<T> {
    ControlProcess::constant(noise.grid, noise.path_count(), &spec.action_box.midpoint())
}

/// One application of the MSA map together with the intermediate ensembles.
#[derive(Clone, Debug)]
pub struct MsaStep<T> {
    pub control: ControlProcess<T>,
    pub states: StateEnsemble<T>,
    pub adjoint: AdjointEnsemble<T>,
    /// `J` of the input control.
    pub cost: Estimate<T>,
    /// Grid points where the Hamiltonian minimizer was not unique.
    pub non_unique: usize,
}

/// `α ↦ h(t_k, X_k^α, Y_k^α)` on every path and node, with the given noise.
pub fn msa_step<T: Real>(
    spec: &ProblemSpec<T>,
    control: &ControlProcess<T>,
    noise: &BrownianEnsemble<T>,
    cfg: &MsaConfig,
) -> Result<MsaStep<T>> {
    if !control.is_feasible(&spec.action_box) {
        return Err(Error::ActionOutsideBox("input control leaves the action box".into()));
    }
    let states = simulate_forward(spec, control, noise)?;
    let cost = estimate_cost(spec, &states, control)?;
    let adjoint = solve_adjoint_with(spec, &states, control, noise, &cfg.adjoint())?;
    let grid = noise.grid;
    let m = spec.control_dim;
    let steps = grid.steps();
    let per_path: Vec<Result<(Vec<T>, usize)>> = (0..noise.path_count())
        .into_par_iter()
        .map(|j| {
            let mut out = Vec::with_capacity(steps * m);
            let mut flagged = 0;
            for k in 0..steps {
                let h = minimize_reduced(
                    spec,
                    grid.node(k),
                    states.values.at(j, k),
                    adjoint.y.at(j, k),
                    &cfg.minimizer,
                )?;
                flagged += h.non_unique as usize;
                out.extend_from_slice(&h.action);
            }
            Ok((out, flagged))
        })
        .collect();
    let mut values = PathArray::zeros(noise.path_count(), steps, m);
    let stride = values.path_stride();
    let mut non_unique = 0;
    for (j, r) in per_path.into_iter().enumerate() {
        let (vals, flagged) = r?;
        values.data[j * stride..(j + 1) * stride].copy_from_slice(&vals);
        non_unique += flagged;
    }
    Ok(MsaStep {
        control: ControlProcess { grid, values },
        states,
        adjoint,
        cost,
        non_unique,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Converged,
    IterationBudget,
    NonContractive,
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Termination::Converged => "converged",
            Termination::IterationBudget => "iteration budget",
            Termination::NonContractive => "non-contractive",
        })
    }
}

/// Iteration `i` (1-based) maps `α^{i−1}` to `α^i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsaRecord<T> {
    pub iter: usize,
    /// `‖α^i − α^{i−1}‖_𝒜`.
    pub diff: T,
    /// `J(α^{i−1})`.
    pub cost: Estimate<T>,
    /// SHA-256 prefix of the little-endian bytes of `α^i`.
    pub control_hash: String,
    pub non_unique: usize,
    pub elapsed_s: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MsaResult<T> {
    pub records: Vec<MsaRecord<T>>,
    /// Geometric rate fitted to the tail diffs.
    pub rate: Option<T>,
    /// `ρ̂ⁿ/(1 − ρ̂)·diff₁` at the last iterate, when `ρ̂ < 1`.
    pub error_bound: Option<T>,
    pub termination: Termination,
    #[serde(skip)]
    pub final_control: Option<ControlProcess<T>>,
    /// `α^0, α^1, …` when `keep_snapshots` is set.
    #[serde(skip)]
    pub snapshots: Vec<ControlProcess<T>>,
}

impl<T: Real> MsaResult<T> {
    pub fn diffs(&self) -> Vec<T> {
        self.records.iter().map(|r| r.diff).collect()
    }

    /// `ρ̂ⁿ/(1 − ρ̂)·diff₁`.
    pub fn bound_at(&self, n: usize) -> Option<T> {
        let rate = self.rate?;
        let d1 = self.records.first()?.diff;
        a_posteriori_bound(rate, d1, n)
    }
}

pub fn a_posteriori_bound<T: Real>(rate: T, diff1: T, n: usize) -> Option<T> {
    if rate < T::one() {
        Some(rate.powi(n as i32) / (T::one() - rate) * diff1)
    } else {
        None
    }
}

/// Least-squares slope of `ln diff` against the iteration index, exponentiated.
///
/// The fit uses the last `max(3, len/2)` entries of the longest strictly
/// decreasing run of diffs above the rounding floor, so a stagnation plateau
/// after convergence does not pull the estimate towards 1. Without a run of
/// at least 3 entries every usable diff is fitted.
pub fn fit_rate<T: Real>(diffs: &[T]) -> Option<T> {
    let top = diffs.iter().copied().fold(T::zero(), T::max);
    let floor = top * T::lit(FLOOR);
    let usable: Vec<(f64, f64)> = diffs
        .iter()
        .enumerate()
        .filter(|(_, d)| **d > floor && **d > T::zero())
        .map(|(i, d)| (i as f64, d.as_f64().ln()))
        .collect();
    if usable.len() < 2 {
        return None;
    }
    let (mut best, mut start) = ((0, 1), 0);
    for i in 1..=usable.len() {
        let cont = i < usable.len() && usable[i].0 == usable[i - 1].0 + 1.0 && usable[i].1 < usable[i - 1].1;
        if !cont {
            if i - start > best.1 - best.0 {
                best = (start, i);
            }
            start = i;
        }
    }
    let run = if best.1 - best.0 >= 3 { &usable[best.0..best.1] } else { &usable[..] };
    let take = 3.max(run.len() / 2);
    let tail = &run[run.len().saturating_sub(take)..];
    let n = tail.len() as f64;
    let mx = tail.iter().map(|p| p.0).sum::<f64>() / n;
    let my = tail.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = tail.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = tail.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(T::lit((sxy / sxx).exp()))
}

pub fn control_hash<T: Real>(c: &ControlProcess<T>) -> String {
    let mut h = Sha256::new();
    for v in &c.values.data {
        h.update(v.as_f64().to_le_bytes());
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Runs MSA on freshly sampled noise (seeded from `cfg.seed`).
pub fn run_msa<T: Real>(spec: &ProblemSpec<T>, alpha0: &ControlProcess<T>, cfg: &MsaConfig) -> Result<MsaResult<T>> {
    let noise = cfg.noise(spec)?;
    run_msa_with_noise(spec, alpha0, &noise, cfg)
}

/// Iterates the MSA map on one fixed noise ensemble.
pub fn run_msa_with_noise<T: Real>(
    spec: &ProblemSpec<T>,
    alpha0: &ControlProcess<T>,
    noise: &BrownianEnsemble<T>,
    cfg: &MsaConfig,
) -> Result<MsaResult<T>> {
    cfg.validate()?;
    if !alpha0.is_feasible(&spec.action_box) {
        return Err(Error::ActionOutsideBox("initial control leaves the action box".into()));
    }
    let mut current = alpha0.clone();
    let mut records: Vec<MsaRecord<T>> = Vec::new();
    let mut snapshots = Vec::new();
    if cfg.keep_snapshots {
        snapshots.push(current.clone());
    }
    let mut termination = Termination::IterationBudget;
    let stop = T::lit(cfg.stop_tol);
    for i in 1..=cfg.max_iters {
        let started = Instant::now();
        let step = msa_step(spec, &current, noise, cfg)?;
        let diff = sup_norm_distance(&step.control, &current)?;
        records.push(MsaRecord {
            iter: i,
            diff,
            cost: step.cost,
            control_hash: control_hash(&step.control),
            non_unique: step.non_unique,
            elapsed_s: started.elapsed().as_secs_f64(),
        });
        current = step.control;
        if cfg.keep_snapshots {
            snapshots.push(current.clone());
        }
        if diff < stop {
            termination = Termination::Converged;
            break;
        }
        if i > 5 {
            let top = records.iter().map(|r| r.diff).fold(T::zero(), T::max);
            let back = records[i - 6].diff;
            if diff > top * T::lit(FLOOR) && diff > T::lit(10.0) * back {
                termination = Termination::NonContractive;
                break;
            }
        }
    }
    let rate = fit_rate(&records.iter().map(|r| r.diff).collect::<Vec<_>>());
    let error_bound = match (rate, records.first()) {
        (Some(r), Some(first)) => a_posteriori_bound(r, first.diff, records.len()),
        _ => None,
    };
    Ok(MsaResult {
        records,
        rate,
        error_bound,
        termination,
        final_control: Some(current),
        snapshots,
    })
}

/// Ratios `‖MSA(α²) − MSA(α¹)‖_𝒜 / ‖α² − α¹‖_𝒜` under common noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionStats<T> {
    pub ratios: Vec<T>,
    pub max: T,
    pub mean: T,
    pub std_error: T,
    /// Pairs with zero denominator.
    pub skipped: usize,
    pub ledger_l_mu_t: Option<T>,
    /// `max <= L_muT + CONTRACTION_SLACK`; `None` without a ledger value.
    pub pass: Option<bool>,
}

pub fn empirical_contraction<T: Real>(
    spec: &ProblemSpec<T>,
    pairs: &[(ControlProcess<T>, ControlProcess<T>)],
    noise: &BrownianEnsemble<T>,
    cfg: &MsaConfig,
) -> Result<ContractionStats<T>> {
    let mut ratios = Vec::new();
    let mut skipped = 0;
    for (a1, a2) in pairs {
        let den = sup_norm_distance(a2, a1)?;
        if !(den > T::zero()) {
            skipped += 1;
            continue;
        }
        let m1 = msa_step(spec, a1, noise, cfg)?;
        let m2 = msa_step(spec, a2, noise, cfg)?;
        ratios.push(sup_norm_distance(&m2.control, &m1.control)? / den);
    }
    let est = Estimate::from_samples(&ratios);
    let max = ratios.iter().copied().fold(T::zero(), T::max);
    let ledger_l_mu_t = spec.declared.as_ref().and_then(|l| l.l_mu_t);
    let pass = ledger_l_mu_t.map(|l| max <= l + T::lit(CONTRACTION_SLACK));
    Ok(ContractionStats {
        ratios,
        max,
        mean: est.mean,
        std_error: est.std_error,
        skipped,
        ledger_l_mu_t,
        pass,
    })
}

/// `count` pairs of independent random adapted controls.
pub fn random_control_pairs<T: Real>(
    spec: &ProblemSpec<T>,
    noise: &BrownianEnsemble<T>,
    count: usize,
    seed: u64,
) -> Vec<(ControlProcess<T>, ControlProcess<T>)> {
    let mut rng = seeded_rng(derive_seed(seed, "control-pairs"));
    (0..count)
        .map(|_| {
            let a = ControlProcess::random_adapted(noise, &spec.action_box, &mut rng);
            let b = ControlProcess::random_adapted(noise, &spec.action_box, &mut rng);
            (a, b)
        })
        .collect()
}
