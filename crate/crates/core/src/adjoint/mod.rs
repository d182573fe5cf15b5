//! Adjoint backward SDE `dY = [A + B·Y + C(Z)]dt + Z dW`, `Y_T = D_xψ(X_T)`,
//! with `A = −D_xφ`, `B = −D_xbᵀ`, `C(Z) = −D_x Tr(σᵀZ)`, solved by
//! least-squares Monte Carlo backward induction.

mod regression;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paths::{AdjointEnsemble, BrownianEnsemble, ControlProcess, PathArray, StateEnsemble};
use crate::problem::{ConstantsLedger, ProblemSpec};
use crate::scalar::{all_finite, Real};

pub use regression::{BasisFamily, RegressionBasis};
pub(crate) use regression::Regressor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdjointConfig {
    #[serde(default)]
    pub basis: RegressionBasis,
    /// Extra fixed-point sweeps that re-solve `Y_k` with `B·Y_k` in place of
    /// `B·Y_{k+1}`. Zero gives the explicit scheme.
    #[serde(default)]
    pub implicit_sweeps: usize,
}

impl Default for AdjointConfig {
    fn default() -> Self {
        Self {
            basis: RegressionBasis::default(),
            implicit_sweeps: 0,
        }
    }
}

/// `−D_x Tr(σᵀZ)` from a cached `D_xσ` array (`n × (n·d)`).
pub(crate) fn trace_gradient_with<T: Real>(djac: &[T], n: usize, z: &[T], out: &mut [T]) {
    let nd = z.len();
    for k in 0..n {
        let row = &djac[k * nd..(k + 1) * nd];
        out[k] = -row.iter().zip(z).fold(T::zero(), |acc, (a, b)| acc + *a * *b);
    }
}

/// `C_t(Z)`: entry `k` is `−Σ_{i,l} ∂_k σ_il · Z_il` for a row-major `n×d` matrix `Z`.
pub fn trace_gradient<T: Real>(spec: &ProblemSpec<T>, t: T, z: &[T]) -> Result<Vec<T>> {
    let n = spec.state_dim;
    if z.len() != n * spec.noise_dim {
        return Err(Error::Dimension(format!(
            "Z has {} entries, expected {}",
            z.len(),
            n * spec.noise_dim
        )));
    }
    let mut djac = vec![T::zero(); spec.diffusion_jac_len()];
    spec.diffusion_jac_x(t, &mut djac);
    let mut out = vec![T::zero(); n];
    trace_gradient_with(&djac, n, z, &mut out);
    Ok(out)
}

/// [`solve_adjoint_with`] using the explicit scheme.
pub fn solve_adjoint<T: Real>(
    spec: &ProblemSpec<T>,
    states: &StateEnsemble<T>,
    control: &ControlProcess<T>,
    noise: &BrownianEnsemble<T>,
    basis: &RegressionBasis,
) -> Result<AdjointEnsemble<T>> {
    let cfg = AdjointConfig {
        basis: basis.clone(),
        implicit_sweeps: 0,
    };
    solve_adjoint_with(spec, states, control, noise, &cfg)
}

/// Backward induction for `k = N−1 … 0`:
/// `Z_k = E[Y_{k+1} ΔW_kᵀ | X_k]/dt` and
/// `Y_k = E[Y_{k+1} − dt·(A_k + B_k Y_{k+1} + C(Z_k)) | X_k]`, both projected
/// on the polynomial basis in `X_k`.
pub fn solve_adjoint_with<T: Real>(
    spec: &ProblemSpec<T>,
    states: &StateEnsemble<T>,
    control: &ControlProcess<T>,
    noise: &BrownianEnsemble<T>,
    cfg: &AdjointConfig,
) -> Result<AdjointEnsemble<T>> {
    let grid = states.grid;
    let n = spec.state_dim;
    let d = spec.noise_dim;
    let m = states.path_count();
    if control.grid != grid || noise.grid != grid {
        return Err(Error::Dimension("states, control and noise use different grids".into()));
    }
    if control.path_count() != m || noise.path_count() != m {
        return Err(Error::Dimension("states, control and noise have different path counts".into()));
    }
    if states.dim() != n || control.dim() != spec.control_dim || noise.noise_dim() != d {
        return Err(Error::Dimension("ensemble widths do not match the problem".into()));
    }
    cfg.basis.check(n, m)?;
    let steps = grid.steps();
    let dt = grid.dt();
    let nd = n * d;

    let mut y = PathArray::zeros(m, steps + 1, n);
    let mut z = PathArray::zeros(m, steps, nd);
    let mut ridge_steps = Vec::new();

    // terminal condition
    let term: Vec<T> = (0..m)
        .into_par_iter()
        .flat_map_iter(|j| {
            let mut g = vec![T::zero(); n];
            spec.terminal_cost_grad_x(states.values.at(j, steps), &mut g);
            g
        })
        .collect();
    let mut next = term;
    if let Some(j) = next.chunks(n).position(|g| !all_finite(g)) {
        return Err(Error::NonFinite {
            context: "adjoint terminal condition",
            path: j,
            step: steps,
        });
    }
    for j in 0..m {
        y.at_mut(j, steps).copy_from_slice(&next[j * n..(j + 1) * n]);
    }

    let mut djac = vec![T::zero(); spec.diffusion_jac_len()];
    for k in (0..steps).rev() {
        let t = grid.node(k);
        spec.diffusion_jac_x(t, &mut djac);
        let reg = Regressor::new(&states.values, k, &cfg.basis);
        if reg.ridge {
            ridge_steps.push(k);
        }

        let inv_dt = T::one() / dt;
        let zt: Vec<T> = (0..m)
            .into_par_iter()
            .flat_map_iter(|j| {
                let yn = &next[j * n..(j + 1) * n];
                let dw = noise.increments.at(j, k);
                let mut row = vec![T::zero(); nd];
                for i in 0..n {
                    for l in 0..d {
                        row[i * d + l] = yn[i] * dw[l] * inv_dt;
                    }
                }
                row
            })
            .collect();
        let zk = reg.fit_predict(&zt, nd);

        // A_k + C(Z_k) does not change across sweeps; B_k is applied to `yb`.
        let driver = |yb: &[T]| -> Vec<T> {
            (0..m)
                .into_par_iter()
                .flat_map_iter(|j| {
                    let x = states.values.at(j, k);
                    let a = control.values.at(j, k);
                    let mut gphi = vec![T::zero(); n];
                    let mut jac = vec![T::zero(); n * n];
                    let mut c = vec![T::zero(); n];
                    spec.running_cost_grad_x(t, x, a, &mut gphi);
                    spec.drift_jac_x(t, x, a, &mut jac);
                    trace_gradient_with(&djac, n, &zk[j * nd..(j + 1) * nd], &mut c);
                    let yn = &next[j * n..(j + 1) * n];
                    let yv = &yb[j * n..(j + 1) * n];
                    (0..n)
                        .map(|i| {
                            // B·y with B = −D_xbᵀ
                            let mut by = T::zero();
                            for r in 0..n {
                                by -= jac[r * n + i] * yv[r];
                            }
                            yn[i] - dt * (-gphi[i] + by + c[i])
                        })
                        .collect::<Vec<T>>()
                })
                .collect()
        };
        let mut yk = reg.fit_predict(&driver(&next), n);
        for _ in 0..cfg.implicit_sweeps {
            yk = reg.fit_predict(&driver(&yk), n);
        }

        for j in 0..m {
            let yj = &yk[j * n..(j + 1) * n];
            let zj = &zk[j * nd..(j + 1) * nd];
            if !all_finite(yj) || !all_finite(zj) {
                return Err(Error::NonFinite {
                    context: "adjoint regression",
                    path: j,
                    step: k,
                });
            }
            y.at_mut(j, k).copy_from_slice(yj);
            z.at_mut(j, k).copy_from_slice(zj);
        }
        next = yk;
    }
    ridge_steps.reverse();
    Ok(AdjointEnsemble {
        grid,
        y,
        z,
        ridge_steps,
    })
}

fn bound_inputs<T: Real>(ledger: &ConstantsLedger<T>) -> Result<(T, T, T)> {
    let v = ledger.require(&["mu", "M", "a"])?;
    let (mu, m, a) = (v[0], v[1], v[2]);
    if !(mu > T::zero()) {
        return Err(Error::BoundUnavailable(format!("mu = {mu} <= 0")));
    }
    Ok((mu, m, a))
}

/// `√(e^{−μ(T−t)}(M² − (a/μ)²) + (a/μ)²)`.
pub fn adjoint_bound<T: Real>(ledger: &ConstantsLedger<T>, t: T, horizon: T) -> Result<T> {
    let (mu, m, a) = bound_inputs(ledger)?;
    let r = a / mu;
    let v = (-mu * (horizon - t)).exp() * (m * m - r * r) + r * r;
    Ok(v.max(T::zero()).sqrt())
}

/// Time-independent bound `√(M² + (a/μ)²)`.
pub fn adjoint_bound_uniform<T: Real>(ledger: &ConstantsLedger<T>) -> Result<T> {
    let (mu, m, a) = bound_inputs(ledger)?;
    let r = a / mu;
    Ok((m * m + r * r).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::{sample_brownian, simulate_forward, TimeGrid};
    use crate::problem::{build_builtin_problem, Params};

    fn ledger(mu: f64, m: f64, a: f64) -> ConstantsLedger<f64> {
        ConstantsLedger {
            mu: Some(mu),
            m_psi: Some(m),
            a_phi: Some(a),
            ..Default::default()
        }
    }

    #[test]
    fn bound_at_terminal_time_is_m() {
        let l = ledger(2.0, 1.3, 0.7);
        assert!((adjoint_bound(&l, 1.0, 1.0).unwrap() - 1.3).abs() < 1e-15);
    }

    #[test]
    fn bound_decays_without_running_gradient() {
        let l = ledger(2.0, 1.0, 0.0);
        assert!(adjoint_bound(&l, 0.0, 40.0).unwrap() < 1e-15);
    }

    #[test]
    fn bound_reference_value() {
        // sqrt(e^-2 * 0.75 + 0.25)
        let l = ledger(2.0, 1.0, 1.0);
        let v = adjoint_bound(&l, 0.0, 1.0).unwrap();
        assert!((v - 0.592_876_3).abs() < 1e-6, "{v}");
        assert!((adjoint_bound_uniform(&l).unwrap() - 1.25f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn bound_needs_positive_mu() {
        assert!(matches!(
            adjoint_bound(&ledger(0.0, 1.0, 1.0), 0.0, 1.0),
            Err(Error::BoundUnavailable(_))
        ));
        let empty = ConstantsLedger::<f64>::default();
        assert!(matches!(adjoint_bound(&empty, 0.0, 1.0), Err(Error::MissingConstants(_))));
    }

    #[test]
    fn trace_gradient_scalar_cases() {
        let lin: ProblemSpec<f64> = build_builtin_problem("stable-lq-1d", &Params::new()).unwrap();
        assert_eq!(trace_gradient(&lin, 0.3, &[2.0]).unwrap(), vec![-2.0]);
        let add: ProblemSpec<f64> = build_builtin_problem("additive-noise-1d", &Params::new()).unwrap();
        assert_eq!(trace_gradient(&add, 0.3, &[2.0]).unwrap(), vec![0.0]);
        assert!(trace_gradient(&add, 0.3, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn constant_terminal_data_is_preserved() {
        let spec = ProblemSpec::<f64>::builder(1, 1, 1)
            .initial_state(vec![0.5])
            .diffusion(|_, _, out| out[0] = 0.4)
            .drift(|_, x, a, out| out[0] = -x[0] + a[0])
            .terminal_cost_grad_x(|_, out| out[0] = 1.7)
            .build()
            .unwrap();
        let g = TimeGrid::new(1.0, 20).unwrap();
        let w = sample_brownian(g, 4000, 1, 3).unwrap();
        let c = ControlProcess::constant(g, 4000, &[0.0]);
        let x = simulate_forward(&spec, &c, &w).unwrap();
        let adj = solve_adjoint(&spec, &x, &c, &w, &RegressionBasis::default()).unwrap();
        for k in 0..=20 {
            for j in 0..4000 {
                assert!((adj.y.at(j, k)[0] - 1.7).abs() < 1e-9);
            }
        }
        // Z regresses 1.7·ΔW/dt; its noise level is 1.7/√(dt·M) per coefficient
        let se = 1.7 / (g.dt() * 4000.0).sqrt();
        for k in 0..20 {
            let zbar: f64 = (0..4000).map(|j| adj.z.at(j, k)[0].abs()).sum::<f64>() / 4000.0;
            assert!(zbar < 3.0 * 3.0 * se, "k={k} |Z|={zbar}");
        }
    }

    #[test]
    fn terminal_condition_exact() {
        let spec: ProblemSpec<f64> = build_builtin_problem("stable-lq-1d", &Params::new()).unwrap();
        let g = TimeGrid::new(1.0, 10).unwrap();
        let w = sample_brownian(g, 500, 1, 1).unwrap();
        let c = ControlProcess::constant(g, 500, &[0.2]);
        let x = simulate_forward(&spec, &c, &w).unwrap();
        let adj = solve_adjoint(&spec, &x, &c, &w, &RegressionBasis::default()).unwrap();
        for j in 0..500 {
            let mut gpsi = [0.0];
            spec.terminal_cost_grad_x(x.values.at(j, 10), &mut gpsi);
            assert_eq!(adj.y.at(j, 10)[0], gpsi[0]);
        }
        assert!(adj.ridge_steps.is_empty());
    }

    #[test]
    fn zero_noise_matches_backward_ode() {
        // σ = 0: Ẏ = λY − 2q x along x' = −λx + a, Y(T) = 2p x(T)
        let (lambda, q, p, a0, x0) = (2.0, 0.5, 0.75, 0.3, 1.0);
        let params: Params = [("lambda", lambda), ("s", 0.0), ("q", q), ("p", p), ("x0", x0)]
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        let spec: ProblemSpec<f64> = build_builtin_problem("additive-noise-1d", &params).unwrap();
        let xs = |t: f64| a0 / lambda + (x0 - a0 / lambda) * (-lambda * t).exp();
        // reference by RK4 on a fine backward grid
        let reference = |t_eval: f64| {
            let steps = 20_000;
            let h = (1.0 - t_eval) / steps as f64;
            let mut yv = 2.0 * p * xs(1.0);
            let f = |t: f64, y: f64| lambda * y - 2.0 * q * xs(t);
            let mut t = 1.0;
            for _ in 0..steps {
                let k1 = f(t, yv);
                let k2 = f(t - h / 2.0, yv - h / 2.0 * k1);
                let k3 = f(t - h / 2.0, yv - h / 2.0 * k2);
                let k4 = f(t - h, yv - h * k3);
                yv -= h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
                t -= h;
            }
            yv
        };
        let y0 = reference(0.0);
        let mut errs = Vec::new();
        for steps in [50, 100, 200] {
            let g = TimeGrid::new(1.0, steps).unwrap();
            let w = sample_brownian(g, 40, 1, 0).unwrap();
            let c = ControlProcess::constant(g, 40, &[a0]);
            let x = simulate_forward(&spec, &c, &w).unwrap();
            let adj = solve_adjoint(&spec, &x, &c, &w, &RegressionBasis::default()).unwrap();
            errs.push((adj.y.at(0, 0)[0] - y0).abs());
        }
        assert!(errs[0] < 0.05, "{errs:?}");
        for w in errs.windows(2) {
            assert!((w[0] / w[1]).log2() > 0.9, "{errs:?}");
        }
    }
}
