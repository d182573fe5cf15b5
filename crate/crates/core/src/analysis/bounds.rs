use serde::{Deserialize, Serialize};

use crate::adjoint::{adjoint_bound, adjoint_bound_uniform};
use crate::error::{Error, Result};
use crate::paths::{l2_profile, sup_norm_distance, BrownianEnsemble, ControlProcess, PathArray, StateEnsemble};
use crate::problem::ConstantsLedger;
use crate::scalar::Real;

/// `(1 − e^{−μt})/μ`, continuous at `μ = 0`.
pub fn m_mu<T: Real>(mu: T, t: T) -> T {
    if mu == T::zero() {
        t
    } else {
        -(-mu * t).exp_m1() / mu
    }
}

/// `ε = se_multiplier·SE + disc_constant·dt`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToleranceModel<T> {
    pub se_multiplier: T,
    pub disc_constant: T,
}

impl<T: Real> Default for ToleranceModel<T> {
    fn default() -> Self {
        Self {
            se_multiplier: T::lit(3.0),
            disc_constant: T::zero(),
        }
    }
}

impl<T: Real> ToleranceModel<T> {
    pub fn eps(&self, se: T, dt: T) -> T {
        self.se_multiplier * se + self.disc_constant * dt
    }
}

/// Two coupled runs on the same noise. Adjoints are optional; without them
/// only the state stability check is evaluated.
#[derive(Clone, Debug)]
pub struct PairedRun<T> {
    pub states: StateEnsemble<T>,
    pub states_bar: StateEnsemble<T>,
    pub control: ControlProcess<T>,
    pub control_bar: ControlProcess<T>,
    pub adjoint: Option<PathArray<T>>,
    pub adjoint_bar: Option<PathArray<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundNode<T> {
    pub t: T,
    pub lhs: T,
    pub rhs: T,
    pub eps: T,
    /// `rhs + eps − lhs`.
    pub margin: T,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck<T> {
    /// `state-stability`, `adjoint-stability`, `adjoint-bound` or `adjoint-bound-uniform`.
    pub name: String,
    pub pair: usize,
    pub nodes: Vec<BoundNode<T>>,
    pub min_margin: T,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport<T> {
    pub checks: Vec<BoundCheck<T>>,
    pub tolerance: ToleranceModel<T>,
    pub pass: bool,
}

impl<T: Real> BoundReport<T> {
    pub fn failures(&self) -> impl Iterator<Item = (&BoundCheck<T>, &BoundNode<T>)> {
        self.checks
            .iter()
            .flat_map(|c| c.nodes.iter().filter(|n| !n.pass).map(move |n| (c, n)))
    }
}

fn finish<T: Real>(name: &str, pair: usize, nodes: Vec<BoundNode<T>>) -> BoundCheck<T> {
    let min_margin = nodes.iter().map(|n| n.margin).fold(T::infinity(), T::min);
    let pass = nodes.iter().all(|n| n.pass);
    BoundCheck {
        name: name.into(),
        pair,
        nodes,
        min_margin,
        pass,
    }
}

fn node<T: Real>(t: T, lhs: T, rhs: T, eps: T) -> BoundNode<T> {
    let margin = rhs + eps - lhs;
    BoundNode {
        t,
        lhs,
        rhs,
        eps,
        margin,
        pass: margin >= T::zero(),
    }
}

/// Evaluates, per pair and grid node:
/// - state stability: `‖X_t − X̄_t‖ ≤ ‖X_0 − X̄_0‖e^{−μt} + L_bα(1 − e^{−μt})/μ·‖α − ᾱ‖_𝒜`;
/// - adjoint stability: `‖Y_t − Ȳ_t‖ ≤ L_ψ'‖X_T − X̄_T‖e^{−μ(T−t)}
///   + L_Y ∫_t^T (‖X_{T+t−s} − X̄_{T+t−s}‖ + ‖α − ᾱ‖_𝒜)e^{−μ(T−s)} ds`
///   (trapezoidal rule on the grid);
/// - the pointwise and uniform adjoint bounds for `Y` and `Ȳ`.
///
/// All norms are `L²` over paths; each node passes when `lhs ≤ rhs + ε`.
pub fn verify_bounds<T: Real>(
    runs: &[PairedRun<T>],
    ledger: &ConstantsLedger<T>,
    tol: &ToleranceModel<T>,
) -> Result<BoundReport<T>> {
    let needs_adjoint = runs.iter().any(|r| r.adjoint.is_some() || r.adjoint_bar.is_some());
    let needs_pair = runs.iter().any(|r| r.adjoint.is_some() && r.adjoint_bar.is_some());
    let mut keys = vec!["mu", "L_b_alpha"];
    if needs_pair {
        keys.extend(["L_psi_grad", "L_Y"]);
    }
    if needs_adjoint {
        keys.extend(["M", "a"]);
    }
    let vals = ledger.require(&keys)?;
    let (mu, l_ba) = (vals[0], vals[1]);
    let mut checks = Vec::new();
    for (p, run) in runs.iter().enumerate() {
        let grid = run.states.grid;
        if run.states_bar.grid != grid || run.control.grid != grid || run.control_bar.grid != grid {
            return Err(Error::Dimension(format!("pair {p}: ensembles use different grids")));
        }
        let steps = grid.steps();
        let dt = grid.dt();
        let horizon = grid.horizon();
        let dx = l2_profile(&run.states.values, Some(&run.states_bar.values))?;
        let da = sup_norm_distance(&run.control, &run.control_bar)?;
        let x0 = dx[0].value;

        let nodes = (0..=steps)
            .map(|k| {
                let t = grid.node(k);
                let rhs = x0 * (-mu * t).exp() + l_ba * m_mu(mu, t) * da;
                node(t, dx[k].value, rhs, tol.eps(dx[k].std_error, dt))
            })
            .collect();
        checks.push(finish("state-stability", p, nodes));

        if let (Some(y), Some(yb)) = (&run.adjoint, &run.adjoint_bar) {
            let l_psi = vals[2];
            let l_y = vals[3];
            let dy = l2_profile(y, Some(yb))?;
            let half = T::lit(0.5);
            let nodes = (0..=steps)
                .map(|k| {
                    let t = grid.node(k);
                    let mut integral = T::zero();
                    for i in k..=steps {
                        let s = grid.node(i);
                        let w = if i == k || i == steps { half } else { T::one() };
                        let g = (dx[steps + k - i].value + da) * (-mu * (horizon - s)).exp();
                        integral += w * g;
                    }
                    if k == steps {
                        integral = T::zero();
                    }
                    let rhs = l_psi * dx[steps].value * (-mu * (horizon - t)).exp() + l_y * integral * dt;
                    node(t, dy[k].value, rhs, tol.eps(dy[k].std_error, dt))
                })
                .collect();
            checks.push(finish("adjoint-stability", p, nodes));
        }

        for y in [&run.adjoint, &run.adjoint_bar].into_iter().flatten() {
            let prof = l2_profile(y, None)?;
            let uniform = adjoint_bound_uniform(ledger)?;
            let mut pointwise = Vec::with_capacity(steps + 1);
            let mut flat = Vec::with_capacity(steps + 1);
            for k in 0..=steps {
                let t = grid.node(k);
                let eps = tol.eps(prof[k].std_error, dt);
                pointwise.push(node(t, prof[k].value, adjoint_bound(ledger, t, horizon)?, eps));
                flat.push(node(t, prof[k].value, uniform, eps));
            }
            checks.push(finish("adjoint-bound", p, pointwise));
            checks.push(finish("adjoint-bound-uniform", p, flat));
        }
    }
    let pass = checks.iter().all(|c| c.pass);
    Ok(BoundReport {
        checks,
        tolerance: tol.clone(),
        pass,
    })
}

/// Discretization constant `C = 2·max_k |f_N(t_k) − f_{2N}(t_k)| / dt_N`
/// from one dt-halving: `f` maps a noise ensemble to a per-node quantity,
/// evaluated on `fine` and on its 2-step coarsening.
pub fn calibrate_disc_constant<T: Real>(
    fine: &BrownianEnsemble<T>,
    f: impl Fn(&BrownianEnsemble<T>) -> Result<Vec<T>>,
) -> Result<T> {
    let coarse = fine.coarsen(2)?;
    let vf = f(fine)?;
    let vc = f(&coarse)?;
    if vc.len() != coarse.grid.steps() + 1 || vf.len() != fine.grid.steps() + 1 {
        return Err(Error::Dimension("calibration profile must have one value per node".into()));
    }
    let gap = vc
        .iter()
        .enumerate()
        .map(|(k, v)| (*v - vf[2 * k]).abs())
        .fold(T::zero(), T::max);
    Ok(T::lit(2.0) * gap / coarse.grid.dt())
}
