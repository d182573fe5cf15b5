use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{BrownianEnsemble, ControlProcess, PathArray, StateEnsemble};
use crate::error::{Error, Result};
use crate::problem::ProblemSpec;
use crate::scalar::{all_finite, Real};

/// Monte Carlo mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate<T> {
    pub mean: T,
    pub std_error: T,
}

impl<T: Real> Estimate<T> {
    /// Sample mean and `s/√M`; the sum runs in path order.
    pub fn from_samples(xs: &[T]) -> Self {
        let m = xs.len();
        if m == 0 {
            return Self { mean: T::nan(), std_error: T::nan() };
        }
        let mf = T::from_count(m);
        let mean = xs.iter().copied().sum::<T>() / mf;
        let std_error = if m > 1 {
            let var = xs.iter().map(|x| (*x - mean) * (*x - mean)).sum::<T>() / T::from_count(m - 1);
            (var / mf).sqrt()
        } else {
            T::zero()
        };
        Self { mean, std_error }
    }
}

fn check_inputs<T: Real>(spec: &ProblemSpec<T>, control: &ControlProcess<T>, noise: &BrownianEnsemble<T>) -> Result<()> {
    if control.grid != noise.grid {
        return Err(Error::Dimension("control and noise use different time grids".into()));
    }
    if control.path_count() != noise.path_count() {
        return Err(Error::Dimension(format!(
            "control has {} paths, noise has {}",
            control.path_count(),
            noise.path_count()
        )));
    }
    if control.dim() != spec.control_dim || noise.noise_dim() != spec.noise_dim {
        return Err(Error::Dimension(format!(
            "control/noise widths {}/{} do not match problem dims {}/{}",
            control.dim(),
            noise.noise_dim(),
            spec.control_dim,
            spec.noise_dim
        )));
    }
    Ok(())
}

/// Euler–Maruyama from `spec.initial_state`:
/// `X_{k+1} = X_k + b(t_k, X_k, α_k)·dt + σ(t_k, X_k)·ΔW_k`.
pub fn simulate_forward<T: Real>(
    spec: &ProblemSpec<T>,
    control: &ControlProcess<T>,
    noise: &BrownianEnsemble<T>,
) -> Result<StateEnsemble<T>> {
    simulate_forward_from(spec, &spec.initial_state, control, noise)
}

/// [`simulate_forward`] with an explicit initial state.
pub fn simulate_forward_from<T: Real>(
    spec: &ProblemSpec<T>,
    x0: &[T],
    control: &ControlProcess<T>,
    noise: &BrownianEnsemble<T>,
) -> Result<StateEnsemble<T>> {
    check_inputs(spec, control, noise)?;
    if x0.len() != spec.state_dim {
        return Err(Error::Dimension(format!("initial state has length {}", x0.len())));
    }
    let grid = noise.grid;
    let n = spec.state_dim;
    let d = spec.noise_dim;
    let steps = grid.steps();
    let dt = grid.dt();
    let mut values = PathArray::zeros(noise.path_count(), steps + 1, n);
    let stride = values.path_stride();
    let failures: Vec<Option<usize>> = values
        .data
        .par_chunks_mut(stride)
        .enumerate()
        .map(|(j, path)| {
            let mut b = vec![T::zero(); n];
            let mut sig = vec![T::zero(); n * d];
            path[..n].copy_from_slice(x0);
            for k in 0..steps {
                let t = grid.node(k);
                let (head, tail) = path.split_at_mut((k + 1) * n);
                let x = &head[k * n..];
                let a = control.values.at(j, k);
                let dw = noise.increments.at(j, k);
                spec.drift(t, x, a, &mut b);
                spec.diffusion(t, x, &mut sig);
                let next = &mut tail[..n];
                for i in 0..n {
                    let mut v = x[i] + b[i] * dt;
                    for l in 0..d {
                        v += sig[i * d + l] * dw[l];
                    }
                    next[i] = v;
                }
                if !all_finite(next) {
                    return Some(k + 1);
                }
            }
            None
        })
        .collect();
    if let Some((path, step)) = failures
        .iter()
        .enumerate()
        .find_map(|(j, f)| f.map(|s| (j, s)))
    {
        return Err(Error::NonFinite {
            context: "forward simulation",
            path,
            step,
        });
    }
    Ok(StateEnsemble { grid, values })
}

/// Closed-loop simulation under a feedback `(t, x, out)`; outputs are
/// clamped into the action box. Returns the states and the realized control.
pub fn simulate_feedback<T: Real>(
    spec: &ProblemSpec<T>,
    noise: &BrownianEnsemble<T>,
    feedback: &(dyn Fn(T, &[T], &mut [T]) + Sync),
) -> Result<(StateEnsemble<T>, ControlProcess<T>)> {
    let grid = noise.grid;
    let n = spec.state_dim;
    let m = spec.control_dim;
    let d = spec.noise_dim;
    if noise.noise_dim() != d {
        return Err(Error::Dimension("noise width does not match problem".into()));
    }
    let steps = grid.steps();
    let dt = grid.dt();
    let paths = noise.path_count();
    let results: Vec<(Vec<T>, Vec<T>, Option<usize>)> = (0..paths)
        .into_par_iter()
        .map(|j| {
            let mut xs = vec![T::zero(); (steps + 1) * n];
            let mut acts = vec![T::zero(); steps * m];
            let mut b = vec![T::zero(); n];
            let mut sig = vec![T::zero(); n * d];
            xs[..n].copy_from_slice(&spec.initial_state);
            for k in 0..steps {
                let t = grid.node(k);
                let (head, tail) = xs.split_at_mut((k + 1) * n);
                let x = &head[k * n..];
                let a = &mut acts[k * m..(k + 1) * m];
                feedback(t, x, a);
                spec.action_box.clamp(a);
                spec.drift(t, x, a, &mut b);
                spec.diffusion(t, x, &mut sig);
                let dw = noise.increments.at(j, k);
                for i in 0..n {
                    let mut v = x[i] + b[i] * dt;
                    for l in 0..d {
                        v += sig[i * d + l] * dw[l];
                    }
                    tail[i] = v;
                }
                if !all_finite(&tail[..n]) || !all_finite(a) {
                    return (xs, acts, Some(k + 1));
                }
            }
            (xs, acts, None)
        })
        .collect();
    let mut states = PathArray::zeros(paths, steps + 1, n);
    let mut control = PathArray::zeros(paths, steps, m);
    for (j, (xs, acts, fail)) in results.into_iter().enumerate() {
        if let Some(step) = fail {
            return Err(Error::NonFinite {
                context: "feedback simulation",
                path: j,
                step,
            });
        }
        let sx = states.path_stride();
        states.data[j * sx..(j + 1) * sx].copy_from_slice(&xs);
        let sa = control.path_stride();
        control.data[j * sa..(j + 1) * sa].copy_from_slice(&acts);
    }
    Ok((
        StateEnsemble { grid, values: states },
        ControlProcess { grid, values: control },
    ))
}

/// Per-path cost `Σ_k φ(t_k, X_k, α_k)·dt + ψ(X_N)` (left endpoints).
pub fn path_costs<T: Real>(
    spec: &ProblemSpec<T>,
    states: &StateEnsemble<T>,
    control: &ControlProcess<T>,
) -> Result<Vec<T>> {
    if states.grid != control.grid || states.path_count() != control.path_count() {
        return Err(Error::Dimension("states and control are not aligned".into()));
    }
    let grid = states.grid;
    let steps = grid.steps();
    let dt = grid.dt();
    let costs: Vec<T> = (0..states.path_count())
        .into_par_iter()
        .map(|j| {
            let mut run = T::zero();
            for k in 0..steps {
                run += spec.running_cost(grid.node(k), states.values.at(j, k), control.values.at(j, k));
            }
            run * dt + spec.terminal_cost(states.values.at(j, steps))
        })
        .collect();
    if let Some(j) = costs.iter().position(|c| !c.is_finite()) {
        return Err(Error::NonFinite {
            context: "cost",
            path: j,
            step: steps,
        });
    }
    Ok(costs)
}

/// Monte Carlo estimate of `J(α)` with its standard error.
pub fn estimate_cost<T: Real>(
    spec: &ProblemSpec<T>,
    states: &StateEnsemble<T>,
    control: &ControlProcess<T>,
) -> Result<Estimate<T>> {
    Ok(Estimate::from_samples(&path_costs(spec, states, control)?))
}
