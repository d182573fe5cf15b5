//! Logarithmic norms, one-sided Lipschitz estimates, derived contraction
//! constants and the empirical bound verifier.

mod bounds;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen;
use crate::problem::{sample_ball, sample_box, ConstantsLedger, ProblemSpec, SamplingConfig};
use crate::rng::{derive_seed, seeded_rng};
use crate::scalar::{dot, Real};

pub use bounds::{
    calibrate_disc_constant, m_mu, verify_bounds, BoundCheck, BoundNode, BoundReport, PairedRun,
    ToleranceModel,
};

/// Largest eigenvalue of `(A + Aᵀ)/2` for a row-major `n×n` matrix.
pub fn log_norm<T: Real>(a: &[T], n: usize) -> Result<T> {
    Ok(log_norm_with_direction(a, n)?.0)
}

/// [`log_norm`] and a unit vector attaining it.
pub fn log_norm_with_direction<T: Real>(a: &[T], n: usize) -> Result<(T, Vec<T>)> {
    if a.len() != n * n || n == 0 {
        return Err(Error::Dimension(format!(
            "log norm needs a square matrix, got {} entries for n = {n}",
            a.len()
        )));
    }
    let half = T::lit(0.5);
    let mut sym = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            sym[i * n + j] = half * (a[i * n + j] + a[j * n + i]);
        }
    }
    let (vals, vecs) = symmetric_eigen(&sym, n);
    let (imax, vmax) = vals
        .iter()
        .copied()
        .enumerate()
        .fold((0, T::neg_infinity()), |best, (i, v)| if v > best.1 { (i, v) } else { best });
    let dir: Vec<T> = (0..n).map(|r| vecs[r * n + imax]).collect();
    Ok((vmax, dir))
}

/// `⟨A v, v⟩ / ‖v‖²`.
pub fn inner_product_quotient<T: Real>(a: &[T], n: usize, v: &[T]) -> T {
    let mut av = vec![T::zero(); n];
    crate::linalg::matvec(a, n, n, v, &mut av);
    dot(&av, v) / dot(v, v)
}

/// Both estimates of the one-sided Lipschitz constant of the drift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OslEstimate<T> {
    /// Max over sampled pairs of `⟨x−y, b(x)−b(y)⟩/‖x−y‖²`.
    pub quotient: T,
    /// Max over sampled points of `log_norm(D_x b)`.
    pub log_norm: T,
    /// `log_norm − quotient`.
    pub gap: T,
    pub pairs: usize,
}

// Gauss–Legendre nodes on [0, 1]
const GL4: [f64; 4] = [
    0.069_431_844_202_973_71,
    0.330_009_478_207_571_9,
    0.669_990_521_792_428_1,
    0.930_568_155_797_026_3,
];

/// Samples `(t, x, y, a)` with `x, y` in the state ball and `a` in the box.
/// The Jacobian log norm is evaluated at both endpoints and at four
/// Gauss–Legendre points of each segment, so the quotient (an average of
/// `⟨e, D_xb e⟩` along the segment) is dominated for polynomial drifts.
pub fn estimate_osl<T: Real>(spec: &ProblemSpec<T>, sampling: &SamplingConfig<T>) -> Result<OslEstimate<T>> {
    let n = spec.state_dim;
    let mut rng = seeded_rng(derive_seed(sampling.seed, "osl"));
    let horizon = spec.horizon.as_f64();
    let draws: Vec<(T, Vec<T>, Vec<T>, Vec<T>)> = (0..sampling.samples)
        .map(|_| {
            let t = T::lit(rng.random_range(0.0..=horizon));
            let x = sample_ball(&mut rng, n, sampling.state_radius);
            let y = sample_ball(&mut rng, n, sampling.state_radius);
            let a = sample_box(&mut rng, &spec.action_box.lower, &spec.action_box.upper);
            (t, x, y, a)
        })
        .collect();
    let per: Vec<(Option<T>, T)> = draws
        .par_iter()
        .map(|(t, x, y, a)| {
            let mut bx = vec![T::zero(); n];
            let mut by = vec![T::zero(); n];
            spec.drift(*t, x, a, &mut bx);
            spec.drift(*t, y, a, &mut by);
            let dx: Vec<T> = x.iter().zip(y).map(|(u, v)| *u - *v).collect();
            let db: Vec<T> = bx.iter().zip(&by).map(|(u, v)| *u - *v).collect();
            let den = dot(&dx, &dx);
            let q = if den > T::zero() { Some(dot(&dx, &db) / den) } else { None };
            let mut jac = vec![T::zero(); n * n];
            let mut best = T::neg_infinity();
            let mut p = vec![T::zero(); n];
            for s in [0.0, GL4[0], GL4[1], GL4[2], GL4[3], 1.0] {
                let s = T::lit(s);
                for i in 0..n {
                    p[i] = y[i] + s * dx[i];
                }
                spec.drift_jac_x(*t, &p, a, &mut jac);
                let v = log_norm(&jac, n).expect("square Jacobian");
                best = best.max(v);
            }
            (q, best)
        })
        .collect();
    let mut quotient = T::neg_infinity();
    let mut ln = T::neg_infinity();
    let mut pairs = 0;
    for (q, l) in per {
        if let Some(q) = q {
            quotient = quotient.max(q);
            pairs += 1;
        }
        ln = ln.max(l);
    }
    Ok(OslEstimate {
        quotient,
        log_norm: ln,
        gap: ln - quotient,
        pairs,
    })
}

/// `(1 − e^{−μT})/μ`, equal to `T` at `μ = 0`.
pub fn m_mu_t<T: Real>(mu: T, horizon: T) -> T {
    m_mu(mu, horizon)
}

/// Completes a ledger: `mu`, `M_Y`, `L_Y`, `M_muT` and `L_muT` are computed
/// only where absent, and each computed name is appended to `derived`.
/// Explicitly supplied values are left untouched.
pub fn derive_constants<T: Real>(inputs: &ConstantsLedger<T>, horizon: T) -> Result<ConstantsLedger<T>> {
    let mut l = inputs.clone();
    l.horizon = Some(horizon);
    let mut missing: Vec<String> = Vec::new();
    let mut need = |name: &str, v: Option<T>| -> T {
        v.unwrap_or_else(|| {
            missing.push(name.to_string());
            T::nan()
        })
    };

    let mu = match l.mu {
        Some(mu) => mu,
        None => {
            let c = need("c", l.c);
            let ls = need("L_sigma_x", l.l_sigma_x);
            -(c + ls * ls / T::lit(2.0))
        }
    };
    let m_y = match l.m_y {
        Some(v) => Some(v),
        // only required when L_Y has to be derived from it
        None if l.l_y.is_some() && (l.m_psi.is_none() || l.a_phi.is_none()) => None,
        None => {
            let m = need("M", l.m_psi);
            let a = need("a", l.a_phi);
            if mu > T::zero() || mu.is_nan() {
                let r = a / mu;
                Some((m * m + r * r).sqrt())
            } else {
                None
            }
        }
    };
    let l_y = match l.l_y {
        Some(v) => Some(v),
        None => {
            let lp = need("L_phi_grad", l.l_phi_grad);
            let lb = need("L_b_jac", l.l_b_jac);
            m_y.map(|my| lp + my * lb)
        }
    };
    let l_h = need("L_h", l.l_h);
    let l_ba = need("L_b_alpha", l.l_b_alpha);
    let l_psi = need("L_psi_grad", l.l_psi_grad);
    drop(need);
    if !missing.is_empty() {
        return Err(Error::MissingConstants(missing));
    }
    let Some(l_y) = l_y else {
        return Err(Error::BoundUnavailable(format!(
            "mu = {mu} <= 0, so M_Y has no default; supply M_Y or L_Y"
        )));
    };

    let mark = |l: &mut ConstantsLedger<T>, name: &str| l.derived.push(name.to_string());
    if l.mu.is_none() {
        l.mu = Some(mu);
        mark(&mut l, "mu");
    }
    if l.m_y.is_none() && m_y.is_some() {
        l.m_y = m_y;
        mark(&mut l, "M_Y");
    }
    if l.l_y.is_none() {
        l.l_y = Some(l_y);
        mark(&mut l, "L_Y");
    }
    let m = match l.m_mu_t {
        Some(m) => m,
        None => {
            let m = m_mu(mu, horizon);
            l.m_mu_t = Some(m);
            mark(&mut l, "M_muT");
            m
        }
    };
    if l.l_mu_t.is_none() {
        l.l_mu_t = Some(l_mu_t(l_h, l_ba, l_psi, l_y, m));
        mark(&mut l, "L_muT");
    }
    Ok(l)
}

/// `L_h·[(L_bα(1 + L_ψ') + L_Y)·M + L_Y·L_bα·M²]`.
pub fn l_mu_t<T: Real>(l_h: T, l_b_alpha: T, l_psi_grad: T, l_y: T, m: T) -> T {
    l_h * ((l_b_alpha * (T::one() + l_psi_grad) + l_y) * m + l_y * l_b_alpha * m * m)
}

/// Clears every value listed in `derived` so the ledger can be re-derived
/// after its inputs change.
pub fn strip_derived<T: Real>(ledger: &ConstantsLedger<T>) -> ConstantsLedger<T> {
    let mut l = ledger.clone();
    for name in ledger.derived.clone() {
        match name.as_str() {
            "mu" => l.mu = None,
            "M_Y" => l.m_y = None,
            "L_Y" => l.l_y = None,
            "M_muT" => l.m_mu_t = None,
            "L_muT" => l.l_mu_t = None,
            "L_h" => l.l_h = None,
            _ => {}
        }
    }
    l.derived.clear();
    l
}
