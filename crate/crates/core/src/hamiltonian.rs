//! Hamiltonian `H = yᵀb + Tr(σᵀz) + φ`, its reduced form `H̃ = yᵀb + φ`
//! and the minimizer map `h(t, x, y) = argmin_{a∈A} H̃`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{ConstantsLedger, ProblemSpec, SamplingConfig};
use crate::rng::{derive_seed, seeded_rng};
use crate::scalar::{dist2, dot, Real};

#[derive(Clone, Copy, Debug)]
pub struct HamiltonianQuery<'a, T> {
    pub t: T,
    pub x: &'a [T],
    pub y: &'a [T],
    /// Row-major `n×d`; `None` is read as zero.
    pub z: Option<&'a [T]>,
}

impl<'a, T: Real> HamiltonianQuery<'a, T> {
    pub fn reduced(t: T, x: &'a [T], y: &'a [T]) -> Self {
        Self { t, x, y, z: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MinimizerConfig {
    /// Scan points per control dimension.
    #[serde(default = "default_grid")]
    pub grid_points: usize,
    /// Refinement tolerance in action space.
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Relative gap under which two distinct minima count as tied.
    #[serde(default = "default_tie_tol")]
    pub tie_tol: f64,
}

fn default_grid() -> usize {
    33
}

fn default_tol() -> f64 {
    1e-10
}

fn default_tie_tol() -> f64 {
    1e-9
}

impl Default for MinimizerConfig {
    fn default() -> Self {
        Self {
            grid_points: 33,
            tol: 1e-10,
            tie_tol: 1e-9,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Minimum<T> {
    pub action: Vec<T>,
    pub value: T,
    /// Several separated actions reach the minimum; the lexicographically
    /// smallest one is returned.
    pub non_unique: bool,
}

fn check_query<T: Real>(spec: &ProblemSpec<T>, q: &HamiltonianQuery<'_, T>) -> Result<()> {
    let n = spec.state_dim;
    if q.x.len() != n || q.y.len() != n {
        return Err(Error::Dimension(format!("query x/y must have length {n}")));
    }
    if let Some(z) = q.z {
        if z.len() != n * spec.noise_dim {
            return Err(Error::Dimension(format!("query z must have {} entries", n * spec.noise_dim)));
        }
    }
    Ok(())
}

fn check_action<T: Real>(spec: &ProblemSpec<T>, a: &[T]) -> Result<()> {
    if a.len() != spec.control_dim {
        return Err(Error::Dimension(format!("action must have length {}", spec.control_dim)));
    }
    if !spec.action_box.contains(a) {
        return Err(Error::ActionOutsideBox(format!("{a:?}")));
    }
    Ok(())
}

#[inline]
fn reduced_unchecked<T: Real>(spec: &ProblemSpec<T>, t: T, x: &[T], y: &[T], a: &[T], b: &mut [T]) -> T {
    spec.drift(t, x, a, b);
    dot(y, b) + spec.running_cost(t, x, a)
}

/// `H̃(t, x, y, a) = yᵀb(t, x, a) + φ(t, x, a)`.
pub fn eval_reduced<T: Real>(spec: &ProblemSpec<T>, q: &HamiltonianQuery<'_, T>, a: &[T]) -> Result<T> {
    check_query(spec, q)?;
    check_action(spec, a)?;
    let mut b = vec![T::zero(); spec.state_dim];
    Ok(reduced_unchecked(spec, q.t, q.x, q.y, a, &mut b))
}

/// `H = H̃ + Tr(σᵀz)`.
pub fn eval_hamiltonian<T: Real>(spec: &ProblemSpec<T>, q: &HamiltonianQuery<'_, T>, a: &[T]) -> Result<T> {
    let red = eval_reduced(spec, q, a)?;
    Ok(red + trace_term(spec, q))
}

fn trace_term<T: Real>(spec: &ProblemSpec<T>, q: &HamiltonianQuery<'_, T>) -> T {
    match q.z {
        Some(z) => {
            let mut sig = vec![T::zero(); z.len()];
            spec.diffusion(q.t, q.x, &mut sig);
            dot(&sig, z)
        }
        None => T::zero(),
    }
}

/// `h(t, x, y)` with the default scan settings. `z` is never read.
pub fn minimize_hamiltonian<T: Real>(spec: &ProblemSpec<T>, q: &HamiltonianQuery<'_, T>) -> Result<Vec<T>> {
    check_query(spec, q)?;
    Ok(minimize_reduced(spec, q.t, q.x, q.y, &MinimizerConfig::default())?.action)
}

/// Grid scan over the box, then projected local refinement from the best
/// local minima of the scan.
pub fn minimize_reduced<T: Real>(
    spec: &ProblemSpec<T>,
    t: T,
    x: &[T],
    y: &[T],
    cfg: &MinimizerConfig,
) -> Result<Minimum<T>> {
    let m = spec.control_dim;
    if m > 3 {
        return Err(Error::Unsupported(format!(
            "grid minimizer handles at most 3 control dimensions, got {m}"
        )));
    }
    let g = cfg.grid_points.max(2);
    let lo = &spec.action_box.lower;
    let hi = &spec.action_box.upper;
    let mut b = vec![T::zero(); spec.state_dim];
    let mut a = vec![T::zero(); m];
    let gm1 = T::from_count(g - 1);
    let coord = |i: usize, idx: usize| lo[i] + (hi[i] - lo[i]) * T::from_count(idx) / gm1;

    let total = g.pow(m as u32);
    let mut values = Vec::with_capacity(total);
    let mut idx = vec![0usize; m];
    for flat in 0..total {
        let mut r = flat;
        for i in (0..m).rev() {
            idx[i] = r % g;
            r /= g;
        }
        for i in 0..m {
            a[i] = coord(i, idx[i]);
        }
        let v = reduced_unchecked(spec, t, x, y, &a, &mut b);
        if !v.is_finite() {
            return Err(Error::NonFiniteHamiltonian(format!("t = {t}, x = {x:?}, y = {y:?}, a = {a:?}")));
        }
        values.push(v);
    }

    // axis-wise local minima of the scan
    let mut cands: Vec<usize> = Vec::new();
    let mut stride = vec![1usize; m];
    for i in (0..m.saturating_sub(1)).rev() {
        stride[i] = stride[i + 1] * g;
    }
    for flat in 0..total {
        let v = values[flat];
        let is_min = (0..m).all(|i| {
            let pos = (flat / stride[i]) % g;
            (pos == 0 || v <= values[flat - stride[i]]) && (pos + 1 == g || v <= values[flat + stride[i]])
        });
        if is_min {
            cands.push(flat);
        }
    }
    cands.sort_by(|p, q| values[*p].partial_cmp(&values[*q]).unwrap().then(p.cmp(q)));
    cands.truncate(8);

    let spacing: Vec<T> = (0..m).map(|i| (hi[i] - lo[i]) / gm1).collect();
    let tol = T::lit(cfg.tol);
    let mut results: Vec<(Vec<T>, T)> = Vec::with_capacity(cands.len());
    for &flat in &cands {
        let mut start = vec![T::zero(); m];
        for i in 0..m {
            start[i] = coord(i, (flat / stride[i]) % g);
        }
        let mut eval = |p: &[T]| reduced_unchecked(spec, t, x, y, p, &mut b);
        let (p, v) = if m == 1 {
            golden_section(&mut eval, start[0], spacing[0], lo[0], hi[0], tol)
        } else {
            coordinate_descent(&mut eval, start, &spacing, lo, hi, tol)
        };
        let v0 = values[flat];
        if v <= v0 {
            results.push((p, v));
        } else {
            let mut s = vec![T::zero(); m];
            for i in 0..m {
                s[i] = coord(i, (flat / stride[i]) % g);
            }
            results.push((s, v0));
        }
    }

    let best = results
        .iter()
        .map(|r| r.1)
        .fold(T::infinity(), T::min);
    let thresh = best + T::lit(cfg.tie_tol) * (T::one() + best.abs());
    let mut tied: Vec<&(Vec<T>, T)> = results.iter().filter(|r| r.1 <= thresh).collect();
    tied.sort_by(|p, q| {
        p.0.iter()
            .zip(&q.0)
            .map(|(u, v)| u.partial_cmp(v).unwrap())
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let min_spacing = spacing.iter().copied().fold(T::infinity(), T::min);
    let half = T::lit(0.5) * min_spacing;
    let non_unique = tied
        .iter()
        .any(|r| dist2(&r.0, &tied[0].0) > half);
    let (action, value) = if non_unique {
        (tied[0].0.clone(), tied[0].1)
    } else {
        let r = results
            .iter()
            .min_by(|p, q| p.1.partial_cmp(&q.1).unwrap())
            .expect("scan yields at least one local minimum");
        (r.0.clone(), r.1)
    };
    Ok(Minimum {
        action,
        value,
        non_unique,
    })
}

fn golden_section<T: Real>(f: &mut impl FnMut(&[T]) -> T, c: T, h: T, lo: T, hi: T, tol: T) -> (Vec<T>, T) {
    let mut a = (c - h).max(lo);
    let mut b = (c + h).min(hi);
    let inv_phi = T::lit((5f64.sqrt() - 1.0) / 2.0);
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let mut f1 = f(&[x1]);
    let mut f2 = f(&[x2]);
    let mut iters = 0;
    while b - a > tol && iters < 200 {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = f(&[x1]);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = f(&[x2]);
        }
        iters += 1;
    }
    // best of the bracket ends and interior points
    let mut best = if f1 <= f2 { (x1, f1) } else { (x2, f2) };
    for p in [a, b] {
        let v = f(&[p]);
        if v < best.1 {
            best = (p, v);
        }
    }
    // Values near the minimum differ only by rounding, so finish with a
    // parabolic step through a wider stencil.
    let s = (h * T::lit(0.25)).min(best.0 - lo).min(hi - best.0);
    let (l, r) = (best.0 - s, best.0 + s);
    if s > h * T::lit(1e-6) {
        let (fl, fr) = (f(&[l]), f(&[r]));
        let curv = fl - T::lit(2.0) * best.1 + fr;
        if curv > T::zero() {
            let p = (best.0 - s * (fr - fl) / (T::lit(2.0) * curv)).max(l).min(r);
            let v = f(&[p]);
            let slack = T::lit(4.0) * T::epsilon() * (T::one() + best.1.abs());
            if v <= best.1 + slack {
                best = (p, v);
            }
        }
    }
    (vec![best.0], best.1)
}

fn coordinate_descent<T: Real>(
    f: &mut impl FnMut(&[T]) -> T,
    mut p: Vec<T>,
    spacing: &[T],
    lo: &[T],
    hi: &[T],
    tol: T,
) -> (Vec<T>, T) {
    let m = p.len();
    let mut v = f(&p);
    let mut step: Vec<T> = spacing.to_vec();
    let mut iters = 0;
    while step.iter().any(|s| *s > tol) && iters < 200 {
        let mut improved = false;
        for i in 0..m {
            for dir in [-T::one(), T::one()] {
                let old = p[i];
                p[i] = (old + dir * step[i]).max(lo[i]).min(hi[i]);
                let nv = f(&p);
                if nv < v {
                    v = nv;
                    improved = true;
                    break;
                }
                p[i] = old;
            }
        }
        if !improved {
            for s in step.iter_mut() {
                *s = *s * T::lit(0.5);
            }
        }
        iters += 1;
    }
    (p, v)
}

/// Sampled estimate of the Lipschitz constant of `h` in `(x, y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HLipschitzEstimate<T> {
    pub value: T,
    pub pairs: usize,
    /// Pairs with zero denominator.
    pub skipped: usize,
    /// Pairs where either minimizer was flagged non-unique.
    pub non_unique: usize,
}

impl<T: Real> HLipschitzEstimate<T> {
    /// Writes the estimate as `L_h` and marks it as derived.
    pub fn record(&self, ledger: &mut ConstantsLedger<T>) -> Result<()> {
        ledger.set("L_h", self.value)?;
        ledger.derived.push("L_h".into());
        Ok(())
    }
}

/// `‖h(t,x,y) − h(t,x',y')‖ / (‖x−x'‖ + ‖y−y'‖)`, or `None` for a zero denominator.
#[allow(clippy::too_many_arguments)]
pub fn h_lipschitz_ratio<T: Real>(
    spec: &ProblemSpec<T>,
    t: T,
    x: &[T],
    y: &[T],
    x2: &[T],
    y2: &[T],
    cfg: &MinimizerConfig,
) -> Result<(Option<T>, bool)> {
    let den = dist2(x, x2) + dist2(y, y2);
    if !(den > T::zero()) {
        return Ok((None, false));
    }
    let h1 = minimize_reduced(spec, t, x, y, cfg)?;
    let h2 = minimize_reduced(spec, t, x2, y2, cfg)?;
    Ok((Some(dist2(&h1.action, &h2.action) / den), h1.non_unique || h2.non_unique))
}

/// Half of the pairs are independent draws from the sampling domain, half
/// are local perturbations of size `1e-2·radius`.
pub fn estimate_h_lipschitz<T: Real>(
    spec: &ProblemSpec<T>,
    sampling: &SamplingConfig<T>,
    cfg: &MinimizerConfig,
) -> Result<HLipschitzEstimate<T>> {
    let n = spec.state_dim;
    let mut rng = seeded_rng(derive_seed(sampling.seed, "h-lipschitz"));
    let horizon = spec.horizon.as_f64();
    let rx = sampling.state_radius;
    let ry = sampling.adjoint_radius;
    let draws: Vec<(T, Vec<T>, Vec<T>, Vec<T>, Vec<T>)> = (0..sampling.samples)
        .map(|i| {
            let t = T::lit(rng.random_range(0.0..=horizon));
            let x = crate::problem::sample_ball(&mut rng, n, rx);
            let y = crate::problem::sample_ball(&mut rng, n, ry);
            let (x2, y2) = if i % 2 == 0 {
                (
                    crate::problem::sample_ball(&mut rng, n, rx),
                    crate::problem::sample_ball(&mut rng, n, ry),
                )
            } else {
                let dx = crate::problem::sample_ball(&mut rng, n, rx * T::lit(1e-2));
                let dy = crate::problem::sample_ball(&mut rng, n, ry * T::lit(1e-2));
                (
                    x.iter().zip(&dx).map(|(a, b)| *a + *b).collect(),
                    y.iter().zip(&dy).map(|(a, b)| *a + *b).collect(),
                )
            };
            (t, x, y, x2, y2)
        })
        .collect();
    let ratios: Vec<Result<(Option<T>, bool)>> = draws
        .par_iter()
        .map(|(t, x, y, x2, y2)| h_lipschitz_ratio(spec, *t, x, y, x2, y2, cfg))
        .collect();
    let mut est = HLipschitzEstimate {
        value: T::zero(),
        pairs: 0,
        skipped: 0,
        non_unique: 0,
    };
    for r in ratios {
        let (ratio, flag) = r?;
        if flag {
            est.non_unique += 1;
        }
        match ratio {
            Some(v) => {
                est.pairs += 1;
                est.value = est.value.max(v);
            }
            None => est.skipped += 1,
        }
    }
    Ok(est)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{build_builtin_problem, ActionBox, Params};
    use crate::rng::seeded_rng;

    fn lq() -> ProblemSpec<f64> {
        build_builtin_problem("stable-lq-1d", &Params::new()).unwrap()
    }

    #[test]
    fn vanishing_terms_give_zero() {
        let spec = ProblemSpec::<f64>::builder(1, 1, 1)
            .drift(|_, x, a, out| out[0] = x[0] + a[0])
            .build()
            .unwrap();
        let q = HamiltonianQuery { t: 0.1, x: &[2.0], y: &[0.0], z: Some(&[0.0]) };
        for a in [-1.0, 0.0, 0.7] {
            assert_eq!(eval_hamiltonian(&spec, &q, &[a]).unwrap(), 0.0);
        }
    }

    #[test]
    fn trace_term_is_action_independent() {
        let spec = ProblemSpec::<f64>::builder(1, 1, 1)
            .diffusion(|_, _, out| out[0] = 2.0)
            .drift(|_, x, a, out| out[0] = -x[0] + a[0])
            .running_cost(|_, _, a| a[0] * a[0])
            .build()
            .unwrap();
        let q = HamiltonianQuery { t: 0.0, x: &[1.0], y: &[0.4], z: Some(&[3.0]) };
        for a in [-1.0, -0.2, 0.9] {
            let h = eval_hamiltonian(&spec, &q, &[a]).unwrap();
            let ht = eval_reduced(&spec, &q, &[a]).unwrap();
            assert_eq!(h - ht, 6.0);
        }
    }

    #[test]
    fn rejects_actions_outside_box() {
        let spec = lq();
        let q = HamiltonianQuery::reduced(0.0, &[1.0], &[1.0]);
        assert!(matches!(eval_reduced(&spec, &q, &[1.5]), Err(Error::ActionOutsideBox(_))));
    }

    #[test]
    fn reduced_matches_hand_evaluation() {
        let spec: ProblemSpec<f64> = build_builtin_problem(
            "stable-lq-nd",
            &[("n", 3.0), ("m", 2.0)].iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        )
        .unwrap();
        let mut rng = seeded_rng(4);
        for _ in 0..200 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let a: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            // b = Bx + G a with B = -2I + 0.5·shift, G = [I_2; 0]
            let b = [
                -2.0 * x[0] + 0.5 * x[1] + a[0],
                -0.5 * x[0] - 2.0 * x[1] + 0.5 * x[2] + a[1],
                -0.5 * x[1] - 2.0 * x[2],
            ];
            let nx2 = x[0] * x[0] + x[1] * x[1] + x[2] * x[2];
            let expect = y[0] * b[0] + y[1] * b[1] + y[2] * b[2] + 0.25 * nx2 + a[0] * a[0] + a[1] * a[1];
            let q = HamiltonianQuery::reduced(0.5, &x, &y);
            let got = eval_reduced(&spec, &q, &a).unwrap();
            assert!((got - expect).abs() < 1e-14 * (1.0 + expect.abs()) * 10.0, "{got} {expect}");
        }
    }

    #[test]
    fn affine_objective_hits_lower_corner() {
        let spec = ProblemSpec::<f64>::builder(1, 2, 1)
            .action_box(ActionBox::new(vec![-1.0, 0.5], vec![2.0, 3.0]).unwrap())
            .running_cost(|_, _, a| 3.0 * a[0] + 0.5 * a[1])
            .build()
            .unwrap();
        let h = minimize_hamiltonian(&spec, &HamiltonianQuery::reduced(0.0, &[0.0], &[0.0])).unwrap();
        assert_eq!(h, vec![-1.0, 0.5]);
    }

    #[test]
    fn clipped_closed_form_minimizer() {
        let spec = lq();
        let mut rng = seeded_rng(1);
        for _ in 0..2000 {
            let x = [rng.random_range(-5.0..5.0)];
            let y = [rng.random_range(-5.0..5.0)];
            let z = [rng.random_range(-5.0..5.0)];
            let q = HamiltonianQuery { t: 0.3, x: &x, y: &y, z: Some(&z) };
            let h = minimize_hamiltonian(&spec, &q).unwrap();
            let expect = (-y[0] / 2.0f64).clamp(-1.0, 1.0);
            assert!((h[0] - expect).abs() < 1e-8, "y={} h={} expect={expect}", y[0], h[0]);
        }
    }

    #[test]
    fn double_well_tie_is_flagged() {
        let spec = ProblemSpec::<f64>::builder(1, 1, 1)
            .running_cost(|_, _, a| (a[0] * a[0] - 0.36).powi(2))
            .build()
            .unwrap();
        let m = minimize_reduced(&spec, 0.0, &[0.0], &[0.0], &MinimizerConfig::default()).unwrap();
        assert!(m.non_unique);
        assert!((m.action[0] + 0.6).abs() < 1e-6, "{:?}", m.action);
        let uniq = minimize_reduced(&lq(), 0.0, &[0.0], &[0.3], &MinimizerConfig::default()).unwrap();
        assert!(!uniq.non_unique);
    }

    #[test]
    fn minimizer_beats_random_feasible_actions() {
        let spec: ProblemSpec<f64> = build_builtin_problem(
            "stable-lq-nd",
            &[("n", 2.0), ("m", 2.0)].iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        )
        .unwrap();
        let mut rng = seeded_rng(8);
        let cfg = MinimizerConfig::default();
        for _ in 0..300 {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
            let y: Vec<f64> = (0..2).map(|_| rng.random_range(-4.0..4.0)).collect();
            let h = minimize_reduced(&spec, 0.2, &x, &y, &cfg).unwrap();
            let q = HamiltonianQuery::reduced(0.2, &x, &y);
            let hv = eval_reduced(&spec, &q, &h.action).unwrap();
            for _ in 0..100 {
                let a: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..=1.0)).collect();
                assert!(hv <= eval_reduced(&spec, &q, &a).unwrap() + 1e-8);
            }
        }
    }

    #[test]
    fn h_lipschitz_of_clipped_feedback() {
        let spec = lq();
        let s = SamplingConfig { samples: 2000, ..Default::default() };
        let est = estimate_h_lipschitz(&spec, &s, &MinimizerConfig::default()).unwrap();
        assert!(est.value <= 0.5 + 1e-6, "{}", est.value);
        assert!(est.value > 0.4);
        assert_eq!(est.skipped, 0);
    }

    #[test]
    fn action_free_dynamics_give_constant_h() {
        let spec = ProblemSpec::<f64>::builder(1, 1, 1)
            .drift(|_, x, _, out| out[0] = -x[0])
            .running_cost(|_, _, a| (a[0] - 0.2) * (a[0] - 0.2))
            .build()
            .unwrap();
        let s = SamplingConfig { samples: 200, ..Default::default() };
        let est = estimate_h_lipschitz(&spec, &s, &MinimizerConfig::default()).unwrap();
        assert!(est.value < 1e-6);
    }

    #[test]
    fn identical_pair_skipped() {
        let spec = lq();
        let (r, _) = h_lipschitz_ratio(&spec, 0.0, &[1.0], &[1.0], &[1.0], &[1.0], &MinimizerConfig::default()).unwrap();
        assert!(r.is_none());
    }
}
