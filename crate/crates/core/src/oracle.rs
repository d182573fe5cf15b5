//! Reference solver for one-dimensional problems: backward dynamic
//! programming on a trinomial Markov chain approximation of the state.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::msa::MsaResult;
use crate::paths::{
    estimate_cost, simulate_feedback, simulate_forward, sup_norm_distance_with_se, BrownianEnsemble,
    ControlProcess, Estimate, L2Point, TimeGrid,
};
use crate::problem::ProblemSpec;
use crate::scalar::Real;

/// Uniform state grid `lower + i·(upper − lower)/(points − 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateGrid<T> {
    pub lower: T,
    pub upper: T,
    pub points: usize,
}

impl<T: Real> StateGrid<T> {
    pub fn new(lower: T, upper: T, points: usize) -> Result<Self> {
        if points < 3 || !(upper > lower) {
            return Err(Error::Config("state grid needs lower < upper and >= 3 points".into()));
        }
        Ok(Self { lower, upper, points })
    }

    pub fn dx(&self) -> T {
        (self.upper - self.lower) / T::from_count(self.points - 1)
    }

    pub fn node(&self, i: usize) -> T {
        if i + 1 == self.points {
            self.upper
        } else {
            self.lower + self.dx() * T::from_count(i)
        }
    }

    pub fn contains(&self, x: T) -> bool {
        x >= self.lower && x <= self.upper
    }

    /// Linear interpolation of nodal values; clamps outside the grid.
    pub fn interpolate(&self, values: &[T], x: T) -> T {
        let s = ((x - self.lower) / self.dx()).max(T::zero());
        let last = self.points - 1;
        let i = s.floor().to_usize().unwrap_or(last).min(last - 1);
        let w = (s - T::from_count(i)).min(T::one());
        values[i] * (T::one() - w) + values[i + 1] * w
    }
}

/// Transition probabilities `[p_down, p_stay, p_up]` over one step `dt` on a
/// grid of spacing `dx`. Central differencing where `σ² >= dx|b|`, upwind
/// otherwise; the mean displacement is always `b·dt`.
pub fn transition_probs<T: Real>(b: T, sig2: T, dx: T, dt: T) -> Result<[T; 3]> {
    let half = T::lit(0.5);
    let r = dt / (dx * dx);
    let (up, down) = if sig2 >= dx * b.abs() {
        (half * (sig2 + dx * b) * r, half * (sig2 - dx * b) * r)
    } else {
        (
            (half * sig2 + dx * b.max(T::zero())) * r,
            (half * sig2 + dx * (-b).max(T::zero())) * r,
        )
    };
    let stay = T::one() - up - down;
    if stay < T::zero() {
        let required = dx * dx / (sig2 + dx * b.abs());
        return Err(Error::TimeStepTooLarge {
            dt: dt.as_f64(),
            required: required.as_f64(),
        });
    }
    Ok([down, stay, up])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpSolution<T> {
    pub state_grid: StateGrid<T>,
    pub time_grid: TimeGrid<T>,
    pub actions: Vec<T>,
    /// `(N+1) × points`, row `k` is `V(t_k, ·)`.
    pub value: Vec<T>,
    /// `N × points`.
    pub feedback: Vec<T>,
    /// Nodes where every action gave the same value.
    pub arbitrary: Vec<bool>,
}

impl<T: Real> DpSolution<T> {
    fn time_index(&self, t: T) -> usize {
        let s = t / self.time_grid.dt() + T::lit(1e-9);
        s.floor()
            .to_usize()
            .unwrap_or(0)
            .min(self.time_grid.steps() - 1)
    }

    /// Optimal feedback at the nearest time node not after `t`,
    /// linearly interpolated in `x`.
    pub fn feedback_at(&self, t: T, x: T) -> T {
        let k = self.time_index(t);
        let p = self.state_grid.points;
        self.state_grid.interpolate(&self.feedback[k * p..(k + 1) * p], x)
    }

    pub fn value_at(&self, k: usize, x: T) -> T {
        let p = self.state_grid.points;
        self.state_grid.interpolate(&self.value[k * p..(k + 1) * p], x)
    }
}

/// Backward induction `V_k(x_i) = min_a φ(t_k, x_i, a)dt + E[V_{k+1}]`
/// over `action_points` equally spaced actions in the box; ties go to the
/// smallest action. Neighbours beyond the grid ends are clamped.
pub fn solve_dp_1d<T: Real>(
    spec: &ProblemSpec<T>,
    state_grid: &StateGrid<T>,
    action_points: usize,
    grid: TimeGrid<T>,
) -> Result<DpSolution<T>> {
    if spec.state_dim != 1 || spec.control_dim != 1 {
        return Err(Error::Unsupported("the dynamic programming oracle needs n = m = 1".into()));
    }
    if action_points < 2 {
        return Err(Error::Config("need at least 2 action points".into()));
    }
    let p = state_grid.points;
    let steps = grid.steps();
    let dt = grid.dt();
    let dx = state_grid.dx();
    let d = spec.noise_dim;
    let lo = spec.action_box.lower[0];
    let hi = spec.action_box.upper[0];
    let actions: Vec<T> = (0..action_points)
        .map(|l| {
            if l + 1 == action_points {
                hi
            } else {
                lo + (hi - lo) * T::from_count(l) / T::from_count(action_points - 1)
            }
        })
        .collect();

    let mut value = vec![T::zero(); (steps + 1) * p];
    let mut feedback = vec![T::zero(); steps * p];
    let mut arbitrary = vec![false; steps * p];
    for i in 0..p {
        value[steps * p + i] = spec.terminal_cost(&[state_grid.node(i)]);
    }
    for k in (0..steps).rev() {
        let t = grid.node(k);
        let (head, tail) = value.split_at_mut((k + 1) * p);
        let next = &tail[..p];
        let cur = &mut head[k * p..];
        let rows: Vec<Result<(T, T, bool)>> = (0..p)
            .into_par_iter()
            .map(|i| {
                let x = [state_grid.node(i)];
                let mut sig = vec![T::zero(); d];
                spec.diffusion(t, &x, &mut sig);
                let sig2: T = sig.iter().map(|s| *s * *s).sum();
                let mut b = [T::zero()];
                let up = (i + 1).min(p - 1);
                let down = i.saturating_sub(1);
                let mut best = (T::infinity(), actions[0]);
                let mut worst = T::neg_infinity();
                for &a in &actions {
                    spec.drift(t, &x, &[a], &mut b);
                    let [pd, ps, pu] = transition_probs(b[0], sig2, dx, dt)?;
                    let v = spec.running_cost(t, &x, &[a]) * dt + pd * next[down] + ps * next[i] + pu * next[up];
                    if !v.is_finite() {
                        return Err(Error::NonFinite {
                            context: "dynamic programming",
                            path: i,
                            step: k,
                        });
                    }
                    if v < best.0 {
                        best = (v, a);
                    }
                    worst = worst.max(v);
                }
                let tie = worst - best.0 <= T::lit(1e-12) * (T::one() + best.0.abs());
                Ok((best.0, best.1, tie))
            })
            .collect();
        for (i, r) in rows.into_iter().enumerate() {
            let (v, a, tie) = r?;
            cur[i] = v;
            feedback[k * p + i] = a;
            arbitrary[k * p + i] = tie;
        }
    }
    Ok(DpSolution {
        state_grid: state_grid.clone(),
        time_grid: grid,
        actions,
        value,
        feedback,
        arbitrary,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleComparison<T> {
    /// `‖α_MSA − α_DP∘X‖_𝒜` with the standard error at the maximizing node.
    pub control_distance: L2Point<T>,
    pub cost_msa: Estimate<T>,
    /// Cost of the DP feedback in closed loop on the same noise.
    pub cost_dp: Estimate<T>,
    pub cost_gap: T,
    /// `√(SE_MSA² + SE_DP²)`.
    pub cost_gap_se: T,
    /// `V(0, x₀)` from the DP solution.
    pub dp_value: T,
    /// Share of simulated MSA states outside the DP grid.
    pub outside_fraction: f64,
    pub error_bound: Option<T>,
    /// `distance <= error_bound + 3·SE`.
    pub bound_covers: Option<bool>,
}

/// Compares the last MSA iterate with the DP feedback composed with the
/// states that iterate generates on `noise`.
pub fn compare_msa_to_oracle<T: Real>(
    spec: &ProblemSpec<T>,
    msa: &MsaResult<T>,
    dp: &DpSolution<T>,
    noise: &BrownianEnsemble<T>,
) -> Result<OracleComparison<T>> {
    let control = msa
        .final_control
        .as_ref()
        .ok_or_else(|| Error::Config("MSA result carries no final control".into()))?;
    compare_control_to_oracle(spec, control, msa.error_bound, dp, noise)
}

pub fn compare_control_to_oracle<T: Real>(
    spec: &ProblemSpec<T>,
    control: &ControlProcess<T>,
    error_bound: Option<T>,
    dp: &DpSolution<T>,
    noise: &BrownianEnsemble<T>,
) -> Result<OracleComparison<T>> {
    if spec.state_dim != 1 || spec.control_dim != 1 {
        return Err(Error::Unsupported("oracle comparison needs n = m = 1".into()));
    }
    let states = simulate_forward(spec, control, noise)?;
    let outside = states
        .values
        .data
        .iter()
        .filter(|x| !dp.state_grid.contains(**x))
        .count();
    let outside_fraction = outside as f64 / states.values.data.len() as f64;
    if outside_fraction > 0.01 {
        return Err(Error::OutsideOracleGrid {
            fraction: outside_fraction,
        });
    }
    let grid = noise.grid;
    let composed = ControlProcess::from_fn(grid, noise.path_count(), 1, |j, k, out| {
        out[0] = dp.feedback_at(grid.node(k), states.values.at(j, k)[0]);
    });
    let control_distance = sup_norm_distance_with_se(control, &composed)?;
    let cost_msa = estimate_cost(spec, &states, control)?;
    let fb = |t: T, x: &[T], a: &mut [T]| a[0] = dp.feedback_at(t, x[0]);
    let (dp_states, dp_control) = simulate_feedback(spec, noise, &fb)?;
    let cost_dp = estimate_cost(spec, &dp_states, &dp_control)?;
    let cost_gap_se = (cost_msa.std_error * cost_msa.std_error + cost_dp.std_error * cost_dp.std_error).sqrt();
    let bound_covers =
        error_bound.map(|b| control_distance.value <= b + T::lit(3.0) * control_distance.std_error);
    Ok(OracleComparison {
        control_distance,
        cost_msa,
        cost_dp,
        cost_gap: cost_msa.mean - cost_dp.mean,
        cost_gap_se,
        dp_value: dp.value_at(0, spec.initial_state[0]),
        outside_fraction,
        error_bound,
        bound_covers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::sample_brownian;
    use crate::problem::{build_builtin_problem, Params};
    use proptest::prelude::*;

    #[test]
    fn constant_terminal_cost_gives_constant_value() {
        let spec = ProblemSpec::<f64>::builder(1, 1, 1)
            .drift(|_, x, a, out| out[0] = -x[0] + a[0])
            .diffusion(|_, _, out| out[0] = 0.5)
            .terminal_cost(|_| 2.5)
            .build()
            .unwrap();
        let sg = StateGrid::new(-2.0, 2.0, 41).unwrap();
        let dp = solve_dp_1d(&spec, &sg, 11, TimeGrid::new(1.0, 200).unwrap()).unwrap();
        assert!(dp.value.iter().all(|v| (v - 2.5).abs() < 1e-12));
        assert!(dp.arbitrary.iter().all(|f| *f));
    }

    #[test]
    fn rejects_large_time_step() {
        let spec: ProblemSpec<f64> = build_builtin_problem("stable-lq-1d", &Params::new()).unwrap();
        let sg = StateGrid::new(-3.0, 5.0, 161).unwrap();
        match solve_dp_1d(&spec, &sg, 5, TimeGrid::new(1.0, 10).unwrap()) {
            Err(Error::TimeStepTooLarge { dt, required }) => assert!(required < dt),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn deterministic_problem_matches_semi_lagrangian_reference() {
        let params: Params = [("s", 0.0), ("q", 0.5), ("p", 1.0)]
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        let spec: ProblemSpec<f64> = build_builtin_problem("additive-noise-1d", &params).unwrap();
        let sg = StateGrid::new(-2.0, 2.0, 201).unwrap();
        let tg = TimeGrid::new(1.0, 400).unwrap();
        let dp = solve_dp_1d(&spec, &sg, 101, tg).unwrap();
        // reference: V_k(x) = min_a φ dt + V_{k+1}(x + b dt), interpolated
        let xs: Vec<f64> = (0..201).map(|i| sg.node(i)).collect();
        let mut v: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let dt = tg.dt();
        for _ in 0..400 {
            v = xs
                .iter()
                .map(|&x| {
                    (0..101)
                        .map(|l| {
                            let a = -1.0 + 2.0 * l as f64 / 100.0;
                            (0.5 * x * x + a * a) * dt + sg.interpolate(&v, x + (-2.0 * x + a) * dt)
                        })
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
        }
        for i in (40..=160).step_by(10) {
            assert!((dp.value[i] - v[i]).abs() < 1e-2, "x={} {} {}", xs[i], dp.value[i], v[i]);
        }
    }

    #[test]
    fn value_matches_closed_loop_cost() {
        let spec: ProblemSpec<f64> = build_builtin_problem("stable-lq-1d", &Params::new()).unwrap();
        let sg = StateGrid::new(-3.0, 5.0, 161).unwrap();
        let tg = TimeGrid::new(1.0, 12_000).unwrap();
        let dp = solve_dp_1d(&spec, &sg, 41, tg).unwrap();
        let g = TimeGrid::new(1.0, 100).unwrap();
        let w = sample_brownian(g, 20_000, 1, 2).unwrap();
        let fb = |t: f64, x: &[f64], a: &mut [f64]| a[0] = dp.feedback_at(t, x[0]);
        let (xs, cs) = simulate_feedback(&spec, &w, &fb).unwrap();
        let j = estimate_cost(&spec, &xs, &cs).unwrap();
        let v = dp.value_at(0, 1.0);
        assert!((j.mean - v).abs() <= 0.02 * v.abs() + 3.0 * j.std_error, "{v} {j:?}");
    }

    #[test]
    fn dp_feedback_against_itself_is_zero_distance() {
        let spec: ProblemSpec<f64> = build_builtin_problem("stable-lq-1d", &Params::new()).unwrap();
        let sg = StateGrid::new(-3.0, 5.0, 81).unwrap();
        let dp = solve_dp_1d(&spec, &sg, 21, TimeGrid::new(1.0, 3000).unwrap()).unwrap();
        let g = TimeGrid::new(1.0, 50).unwrap();
        let w = sample_brownian(g, 500, 1, 3).unwrap();
        let fb = |t: f64, x: &[f64], a: &mut [f64]| a[0] = dp.feedback_at(t, x[0]);
        let (_, ctl) = simulate_feedback(&spec, &w, &fb).unwrap();
        let cmp = compare_control_to_oracle(&spec, &ctl, None, &dp, &w).unwrap();
        assert_eq!(cmp.control_distance.value, 0.0);
        assert_eq!(cmp.cost_gap, 0.0);
    }

    #[test]
    fn action_refinement_never_raises_value() {
        let spec: ProblemSpec<f64> = build_builtin_problem("stable-lq-1d", &Params::new()).unwrap();
        let sg = StateGrid::new(-3.0, 5.0, 81).unwrap();
        let tg = TimeGrid::new(1.0, 3000).unwrap();
        let coarse = solve_dp_1d(&spec, &sg, 11, tg).unwrap();
        let fine = solve_dp_1d(&spec, &sg, 21, tg).unwrap();
        for (c, f) in coarse.value.iter().zip(&fine.value) {
            assert!(*f <= *c + 1e-6);
        }
    }

    proptest! {
        #[test]
        fn probabilities_are_a_distribution(
            b in -20.0..20.0f64, sig in 0.0..5.0f64, dx in 0.01..0.5f64, dt in 1e-6..1e-2f64,
        ) {
            match transition_probs(b, sig * sig, dx, dt) {
                Ok(p) => {
                    prop_assert!(p.iter().all(|v| *v >= 0.0));
                    prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    prop_assert!(((p[2] - p[0]) * dx - b * dt).abs() < 1e-12 * (1.0 + b.abs()));
                }
                Err(Error::TimeStepTooLarge { dt: got, required }) => {
                    prop_assert_eq!(got, dt);
                    prop_assert!(required < dt);
                }
                Err(e) => prop_assert!(false, "{e}"),
            }
        }
    }
}
