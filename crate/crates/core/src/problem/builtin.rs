//! Built-in benchmark problems.
//!
//! All three are linear-quadratic near the origin. The quadratic state costs
//! use a radially clamped gradient: `∇(‖x‖²) = 2x` inside radius `r_sat`
//! and `2 r_sat x/‖x‖` outside, with the matching C¹ potential
//! `r_sat(2‖x‖ − r_sat)`. The gradient is then bounded by `2 r_sat` and
//! 2-Lipschitz, so `M` and `a` are finite.

use std::collections::BTreeMap;

use super::{ActionBox, ConstantsLedger, ProblemSpec};
use crate::error::{Error, Result};
use crate::scalar::{norm2, Real};

pub type Params = BTreeMap<String, f64>;

const STABLE_LQ_1D: &str = "stable-lq-1d";
const STABLE_LQ_ND: &str = "stable-lq-nd";
const ADDITIVE_NOISE_1D: &str = "additive-noise-1d";

const SCALAR_DEFAULTS: [(&str, f64); 8] = [
    ("lambda", 2.0),
    ("s", 1.0),
    ("q", 0.25),
    ("r", 1.0),
    ("p", 0.25),
    ("x0", 1.0),
    ("horizon", 1.0),
    ("r_sat", 10.0),
];

const ND_EXTRA_DEFAULTS: [(&str, f64); 4] = [("n", 2.0), ("m", 1.0), ("coupling", 0.5), ("g", 1.0)];

pub fn builtin_names() -> [&'static str; 3] {
    [STABLE_LQ_1D, STABLE_LQ_ND, ADDITIVE_NOISE_1D]
}

/// Accepted parameter keys and their defaults.
pub fn builtin_parameter_keys(name: &str) -> Result<Vec<(&'static str, f64)>> {
    match name {
        STABLE_LQ_1D | ADDITIVE_NOISE_1D => Ok(SCALAR_DEFAULTS.to_vec()),
        STABLE_LQ_ND => Ok(SCALAR_DEFAULTS
            .iter()
            .chain(ND_EXTRA_DEFAULTS.iter())
            .copied()
            .collect()),
        other => Err(Error::UnknownProblem(other.to_string())),
    }
}

struct Resolved(BTreeMap<&'static str, f64>);

impl Resolved {
    fn get(&self, k: &str) -> f64 {
        self.0[k]
    }
}

fn resolve(name: &str, params: &Params) -> Result<Resolved> {
    let keys = builtin_parameter_keys(name)?;
    let mut out: BTreeMap<&'static str, f64> = keys.iter().copied().collect();
    for (k, v) in params {
        let Some((key, _)) = keys.iter().find(|(key, _)| key == k) else {
            return Err(Error::UnknownParameter {
                problem: name.to_string(),
                key: k.clone(),
            });
        };
        if !v.is_finite() {
            return Err(Error::InvalidParameter {
                key: k.clone(),
                reason: format!("non-finite value {v}"),
            });
        }
        out.insert(key, *v);
    }
    let check = |k: &str, ok: bool, what: &str| -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter {
                key: k.into(),
                reason: what.into(),
            })
        }
    };
    check("r", out["r"] > 0.0, "control cost weight must be > 0")?;
    check("q", out["q"] >= 0.0, "must be >= 0")?;
    check("p", out["p"] >= 0.0, "must be >= 0")?;
    check("r_sat", out["r_sat"] > 0.0, "must be > 0")?;
    check("horizon", out["horizon"] > 0.0, "must be > 0")?;
    if name == STABLE_LQ_ND {
        for k in ["n", "m"] {
            let v = out[k];
            check(k, v >= 1.0 && v.fract() == 0.0 && v <= 64.0, "must be an integer in 1..=64")?;
        }
        check("m", out["m"] <= out["n"], "control dimension must not exceed n")?;
        check("m", out["m"] <= 3.0, "at most 3 control dimensions")?;
    }
    Ok(Resolved(out))
}

fn clamp_scale<T: Real>(x: &[T], r_sat: T) -> T {
    let nx = norm2(x);
    if nx <= r_sat {
        T::one()
    } else {
        r_sat / nx
    }
}

fn clamped_potential<T: Real>(x: &[T], r_sat: T) -> T {
    let nx = norm2(x);
    if nx <= r_sat {
        nx * nx
    } else {
        r_sat * (T::lit(2.0) * nx - r_sat)
    }
}

fn clamped_grad<T: Real>(x: &[T], r_sat: T, weight: T, out: &mut [T]) {
    let f = T::lit(2.0) * weight * clamp_scale(x, r_sat);
    for (o, xi) in out.iter_mut().zip(x) {
        *o = f * *xi;
    }
}

/// Builds a registered benchmark problem. Unknown names, unknown keys and
/// non-finite values are rejected; parameters giving `mu <= 0` are accepted
/// but flagged via [`ProblemSpec::warnings`].
pub fn build_builtin_problem<T: Real>(name: &str, params: &Params) -> Result<ProblemSpec<T>> {
    let p = resolve(name, params)?;
    match name {
        STABLE_LQ_1D => scalar_problem(name, &p, true),
        ADDITIVE_NOISE_1D => scalar_problem(name, &p, false),
        STABLE_LQ_ND => vector_problem(&p),
        _ => unreachable!("resolve rejects unknown names"),
    }
}

fn scalar_problem<T: Real>(name: &str, p: &Resolved, multiplicative: bool) -> Result<ProblemSpec<T>> {
    let lambda = T::lit(p.get("lambda"));
    let s = T::lit(p.get("s"));
    let q = T::lit(p.get("q"));
    let r = T::lit(p.get("r"));
    let pw = T::lit(p.get("p"));
    let r_sat = T::lit(p.get("r_sat"));
    let two = T::lit(2.0);

    let l_sigma = if multiplicative { s.abs() } else { T::zero() };
    let ledger = ConstantsLedger {
        c: Some(-lambda),
        l_b_alpha: Some(T::one()),
        l_sigma_x: Some(l_sigma),
        m_psi: Some(two * pw * r_sat),
        a_phi: Some(two * q * r_sat),
        l_phi_grad: Some(two * q),
        l_b_jac: Some(T::zero()),
        l_psi_grad: Some(two * pw),
        l_h: Some(T::one() / (two * r)),
        horizon: Some(T::lit(p.get("horizon"))),
        ..Default::default()
    };

    let builder = ProblemSpec::builder(1, 1, 1)
        .name(name)
        .horizon(T::lit(p.get("horizon")))
        .initial_state(vec![T::lit(p.get("x0"))])
        .action_box(ActionBox::symmetric(1, T::one())?)
        .drift(move |_, x, a, out| out[0] = -lambda * x[0] + a[0])
        .drift_jac_x(move |_, _, _, out| out[0] = -lambda)
        .running_cost(move |_, x, a| q * clamped_potential(x, r_sat) + r * a[0] * a[0])
        .running_cost_grad_x(move |_, x, _, out| clamped_grad(x, r_sat, q, out))
        .terminal_cost(move |x| pw * clamped_potential(x, r_sat))
        .terminal_cost_grad_x(move |x, out| clamped_grad(x, r_sat, pw, out));
    let builder = if multiplicative {
        builder
            .diffusion(move |_, x, out| out[0] = s * x[0])
            .diffusion_jac_x(move |_, out| out[0] = s)
    } else {
        builder
            .diffusion(move |_, _, out| out[0] = s)
            .diffusion_jac_x(|_, out| out[0] = T::zero())
    };
    finish(builder.declared(attach_derived(ledger)))
}

/// `b = Bx + Ga` with `B = −λI + κS` (S the skew-symmetric shift),
/// `G = g[I_m; 0]`, `σ(x) = s·diag(x)` with `d = n`.
fn vector_problem<T: Real>(p: &Resolved) -> Result<ProblemSpec<T>> {
    let n = p.get("n") as usize;
    let m = p.get("m") as usize;
    let lambda = T::lit(p.get("lambda"));
    let kappa = T::lit(p.get("coupling"));
    let g = T::lit(p.get("g"));
    let s = T::lit(p.get("s"));
    let q = T::lit(p.get("q"));
    let r = T::lit(p.get("r"));
    let pw = T::lit(p.get("p"));
    let r_sat = T::lit(p.get("r_sat"));
    let two = T::lit(2.0);

    let mut bmat = vec![T::zero(); n * n];
    for i in 0..n {
        bmat[i * n + i] = -lambda;
        if i + 1 < n {
            bmat[i * n + i + 1] = kappa;
            bmat[(i + 1) * n + i] = -kappa;
        }
    }
    let bj = bmat.clone();

    let ledger = ConstantsLedger {
        c: Some(-lambda),
        l_b_alpha: Some(g.abs()),
        l_sigma_x: Some(s.abs()),
        m_psi: Some(two * pw * r_sat),
        a_phi: Some(two * q * r_sat),
        l_phi_grad: Some(two * q),
        l_b_jac: Some(T::zero()),
        l_psi_grad: Some(two * pw),
        l_h: Some(g.abs() / (two * r)),
        horizon: Some(T::lit(p.get("horizon"))),
        ..Default::default()
    };

    let builder = ProblemSpec::builder(n, m, n)
        .name(STABLE_LQ_ND)
        .horizon(T::lit(p.get("horizon")))
        .initial_state(vec![T::lit(p.get("x0")); n])
        .action_box(ActionBox::symmetric(m, T::one())?)
        .drift(move |_, x, a, out| {
            for i in 0..n {
                let mut v: T = (0..n).map(|j| bmat[i * n + j] * x[j]).sum();
                if i < m {
                    v += g * a[i];
                }
                out[i] = v;
            }
        })
        .drift_jac_x(move |_, _, _, out| out.copy_from_slice(&bj))
        .diffusion(move |_, x, out| {
            out.fill(T::zero());
            for i in 0..n {
                out[i * n + i] = s * x[i];
            }
        })
        .diffusion_jac_x(move |_, out| {
            // entry [k][i·n + j] = ∂σ_ij/∂x_k = s·δ_ik·δ_ij
            out.fill(T::zero());
            for k in 0..n {
                out[k * n * n + k * n + k] = s;
            }
        })
        .running_cost(move |_, x, a| {
            q * clamped_potential(x, r_sat) + r * a.iter().map(|v| *v * *v).sum::<T>()
        })
        .running_cost_grad_x(move |_, x, _, out| clamped_grad(x, r_sat, q, out))
        .terminal_cost(move |x| pw * clamped_potential(x, r_sat))
        .terminal_cost_grad_x(move |x, out| clamped_grad(x, r_sat, pw, out));
    finish(builder.declared(attach_derived(ledger)))
}

fn attach_derived<T: Real>(inputs: ConstantsLedger<T>) -> ConstantsLedger<T> {
    let horizon = inputs.horizon.expect("built-ins set the horizon");
    match crate::analysis::derive_constants(&inputs, horizon) {
        Ok(full) => full,
        Err(_) => {
            // mu <= 0: only mu itself is meaningful
            let mut l = inputs;
            l.mu = l.mu_value();
            l.derived.push("mu".into());
            l
        }
    }
}

fn finish<T: Real>(builder: super::ProblemBuilder<T>) -> Result<ProblemSpec<T>> {
    builder.build()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn params(kv: &[(&str, f64)]) -> Params {
        kv.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn stable_lq_1d_ledger_substitution() {
        let p: ProblemSpec<f64> =
            build_builtin_problem("stable-lq-1d", &params(&[("lambda", 2.0), ("s", 1.0)])).unwrap();
        let l = p.declared.as_ref().unwrap();
        assert_eq!(l.c, Some(-2.0));
        assert_eq!(l.l_sigma_x, Some(1.0));
        assert_relative_eq!(l.mu.unwrap(), 1.5, epsilon = 1e-15);
        assert!(!p.contraction_not_guaranteed());
    }

    #[test]
    fn additive_noise_has_zero_sigma_lipschitz() {
        let p: ProblemSpec<f64> =
            build_builtin_problem("additive-noise-1d", &params(&[("lambda", 1.0), ("s", 0.5)])).unwrap();
        let l = p.declared.as_ref().unwrap();
        assert_eq!(l.l_sigma_x, Some(0.0));
        assert_relative_eq!(l.mu.unwrap(), 1.0, epsilon = 1e-15);
        let mut sig = [0.0];
        p.diffusion(0.0, &[3.0], &mut sig);
        assert_eq!(sig[0], 0.5);
    }

    #[test]
    fn weak_decay_is_flagged_not_rejected() {
        let p: ProblemSpec<f64> =
            build_builtin_problem("stable-lq-1d", &params(&[("lambda", 0.1), ("s", 1.0)])).unwrap();
        assert_relative_eq!(p.declared.as_ref().unwrap().mu.unwrap(), -0.4, epsilon = 1e-15);
        assert!(p.contraction_not_guaranteed());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            build_builtin_problem::<f64>("nope", &Params::new()),
            Err(Error::UnknownProblem(_))
        ));
        assert!(matches!(
            build_builtin_problem::<f64>("stable-lq-1d", &params(&[("lambda", f64::NAN)])),
            Err(Error::InvalidParameter { .. })
        ));
        assert!(matches!(
            build_builtin_problem::<f64>("stable-lq-1d", &params(&[("lamda", 1.0)])),
            Err(Error::UnknownParameter { .. })
        ));
        assert!(build_builtin_problem::<f64>("stable-lq-nd", &params(&[("n", 1.5)])).is_err());
    }

    #[test]
    fn clamped_gradient_is_bounded_and_matches_potential() {
        let r_sat = 2.0f64;
        for &x in &[-5.0f64, -2.0, -0.3, 0.0, 1.7, 4.0] {
            let mut g = [0.0];
            clamped_grad(&[x], r_sat, 1.0, &mut g);
            assert!(g[0].abs() <= 2.0 * r_sat + 1e-15);
            let h = 1e-6;
            let fd = (clamped_potential(&[x + h], r_sat) - clamped_potential(&[x - h], r_sat)) / (2.0 * h);
            assert_relative_eq!(g[0], fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn vector_problem_drift_is_linear() {
        let p: ProblemSpec<f64> =
            build_builtin_problem("stable-lq-nd", &params(&[("n", 3.0), ("m", 2.0)])).unwrap();
        assert_eq!((p.state_dim, p.control_dim, p.noise_dim), (3, 2, 3));
        let mut b = [0.0; 3];
        p.drift(0.0, &[1.0, 0.0, 0.0], &[0.0, 0.0], &mut b);
        assert_eq!(b, [-2.0, -0.5, 0.0]);
        p.drift(0.0, &[0.0, 0.0, 0.0], &[1.0, -1.0], &mut b);
        assert_eq!(b, [1.0, -1.0, 0.0]);
    }
}
