//! Time grid, Brownian ensembles, Euler–Maruyama simulation, cost
//! estimation and the ensemble norms `‖·‖_{L²}` / `‖·‖_𝒜`.

mod io;
mod norms;
mod simulate;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::ActionBox;
use crate::rng::stream_rng;
use crate::scalar::Real;

pub use io::{read_record, write_record, RecordKind};
pub use norms::{
    ensemble_l2_distance, l2_profile, sup_norm_distance, sup_norm_distance_with_se, L2Point,
};
pub use simulate::{estimate_cost, simulate_feedback, simulate_forward, simulate_forward_from, Estimate};

/// Uniform grid `t_k = k·T/N`, `k = 0..=N`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid<T> {
    horizon: T,
    steps: usize,
}

impl<T: Real> TimeGrid<T> {
    pub fn new(horizon: T, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("time grid needs at least one step".into()));
        }
        if !(horizon > T::zero()) || !horizon.is_finite() {
            return Err(Error::Config(format!("horizon must be finite and > 0, got {horizon}")));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> T {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> T {
        self.horizon / T::from_count(self.steps)
    }

    /// Node `k`; exact at both ends.
    pub fn node(&self, k: usize) -> T {
        if k == self.steps {
            self.horizon
        } else {
            self.horizon * T::from_count(k) / T::from_count(self.steps)
        }
    }

    pub fn nodes(&self) -> Vec<T> {
        (0..=self.steps).map(|k| self.node(k)).collect()
    }
}

/// Dense per-path storage: `paths × len × width`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathArray<T> {
    pub paths: usize,
    pub len: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> PathArray<T> {
    pub fn zeros(paths: usize, len: usize, width: usize) -> Self {
        Self {
            paths,
            len,
            width,
            data: vec![T::zero(); paths * len * width],
        }
    }

    #[inline]
    pub fn at(&self, path: usize, k: usize) -> &[T] {
        let o = (path * self.len + k) * self.width;
        &self.data[o..o + self.width]
    }

    #[inline]
    pub fn at_mut(&mut self, path: usize, k: usize) -> &mut [T] {
        let o = (path * self.len + k) * self.width;
        &mut self.data[o..o + self.width]
    }

    pub fn path(&self, path: usize) -> &[T] {
        let s = self.len * self.width;
        &self.data[path * s..(path + 1) * s]
    }

    pub fn path_stride(&self) -> usize {
        self.len * self.width
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.paths == other.paths && self.len == other.len && self.width == other.width
    }
}

/// Seeded Brownian increments `ΔW` with shape `M × N × d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BrownianEnsemble<T> {
    pub grid: TimeGrid<T>,
    pub seed: u64,
    pub increments: PathArray<T>,
}

/// Draws `N(0, dt·I)` increments. Path `j` uses its own ChaCha8 stream, so
/// the result depends only on the seed, never on the worker count.
pub fn sample_brownian<T: Real>(
    grid: TimeGrid<T>,
    path_count: usize,
    noise_dim: usize,
    seed: u64,
) -> Result<BrownianEnsemble<T>> {
    if path_count == 0 || noise_dim == 0 {
        return Err(Error::Config("Brownian ensemble needs >= 1 path and noise dimension".into()));
    }
    let mut inc = PathArray::zeros(path_count, grid.steps(), noise_dim);
    let sd = grid.dt().as_f64().sqrt();
    let stride = inc.path_stride();
    inc.data
        .par_chunks_mut(stride)
        .enumerate()
        .for_each(|(j, chunk)| {
            let mut rng = stream_rng(seed, j as u64);
            for v in chunk.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = T::lit(sd * z);
            }
        });
    Ok(BrownianEnsemble {
        grid,
        seed,
        increments: inc,
    })
}

impl<T: Real> BrownianEnsemble<T> {
    pub fn path_count(&self) -> usize {
        self.increments.paths
    }

    pub fn noise_dim(&self) -> usize {
        self.increments.width
    }

    /// Sums consecutive blocks of `factor` increments: the same Brownian
    /// paths observed on a grid with `N / factor` steps.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        let n = self.grid.steps();
        if factor == 0 || n % factor != 0 {
            return Err(Error::Config(format!("cannot coarsen {n} steps by {factor}")));
        }
        let grid = TimeGrid::new(self.grid.horizon(), n / factor)?;
        let d = self.noise_dim();
        let mut out = PathArray::zeros(self.path_count(), n / factor, d);
        for j in 0..self.path_count() {
            for k in 0..n / factor {
                let dst = out.at_mut(j, k);
                for f in 0..factor {
                    for (o, v) in dst.iter_mut().zip(self.increments.at(j, k * factor + f)) {
                        *o += *v;
                    }
                }
            }
        }
        Ok(Self {
            grid,
            seed: self.seed,
            increments: out,
        })
    }

    /// `W_{t_k}` for path `j` (sum of the first `k` increments).
    pub fn position(&self, j: usize, k: usize, out: &mut [T]) {
        out.fill(T::zero());
        for i in 0..k {
            for (o, v) in out.iter_mut().zip(self.increments.at(j, i)) {
                *o += *v;
            }
        }
    }
}

/// Simulated states: `M × (N+1) × n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateEnsemble<T> {
    pub grid: TimeGrid<T>,
    pub values: PathArray<T>,
}

/// Per-path actions on the grid: `M × N × m`. Value `(j, k)` is applied on
/// `[t_k, t_{k+1})` and may only depend on information up to `t_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlProcess<T> {
    pub grid: TimeGrid<T>,
    pub values: PathArray<T>,
}

impl<T: Real> StateEnsemble<T> {
    pub fn path_count(&self) -> usize {
        self.values.paths
    }

    pub fn dim(&self) -> usize {
        self.values.width
    }
}

impl<T: Real> ControlProcess<T> {
    pub fn constant(grid: TimeGrid<T>, paths: usize, value: &[T]) -> Self {
        let mut values = PathArray::zeros(paths, grid.steps(), value.len());
        for chunk in values.data.chunks_mut(value.len()) {
            chunk.copy_from_slice(value);
        }
        Self { grid, values }
    }

    /// Fills value `(j, k)` with `f(j, k, out)`.
    pub fn from_fn(
        grid: TimeGrid<T>,
        paths: usize,
        dim: usize,
        f: impl Fn(usize, usize, &mut [T]) + Sync,
    ) -> Self {
        let mut values = PathArray::zeros(paths, grid.steps(), dim);
        let stride = values.path_stride();
        values
            .data
            .par_chunks_mut(stride)
            .enumerate()
            .for_each(|(j, chunk)| {
                for (k, out) in chunk.chunks_mut(dim).enumerate() {
                    f(j, k, out);
                }
            });
        Self { grid, values }
    }

    /// A random adapted control: per component,
    /// `clip(u0 + u1·sin(ω t_k + φ) + u2·tanh(W_{t_k}))` with coefficients
    /// drawn once from `rng`. Depends on the noise only up to `t_k`.
    pub fn random_adapted<R: rand::Rng>(
        noise: &BrownianEnsemble<T>,
        action_box: &ActionBox<T>,
        rng: &mut R,
    ) -> Self {
        let m = action_box.dim();
        let coef: Vec<[f64; 5]> = (0..m)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(0.5..8.0),
                    rng.random_range(0.0..6.3),
                ]
            })
            .collect();
        let grid = noise.grid;
        let d = noise.noise_dim();
        let mut values = PathArray::zeros(noise.path_count(), grid.steps(), m);
        let stride = values.path_stride();
        values.data.par_chunks_mut(stride).enumerate().for_each(|(j, chunk)| {
            let mut w = vec![T::zero(); d];
            for (k, out) in chunk.chunks_mut(m).enumerate() {
                if k > 0 {
                    for (wi, v) in w.iter_mut().zip(noise.increments.at(j, k - 1)) {
                        *wi += *v;
                    }
                }
                let t = grid.node(k).as_f64();
                for (i, o) in out.iter_mut().enumerate() {
                    let [u0, u1, u2, om, ph] = coef[i];
                    let lo = action_box.lower[i].as_f64();
                    let hi = action_box.upper[i].as_f64();
                    let mid = 0.5 * (lo + hi);
                    let half = 0.5 * (hi - lo);
                    let wi = w[i % d].as_f64();
                    let v = mid + half * (u0 + u1 * (om * t + ph).sin() + u2 * wi.tanh());
                    *o = T::lit(v.clamp(lo, hi));
                }
            }
        });
        Self { grid, values }
    }

    pub fn path_count(&self) -> usize {
        self.values.paths
    }

    pub fn dim(&self) -> usize {
        self.values.width
    }

    pub fn is_feasible(&self, action_box: &ActionBox<T>) -> bool {
        self.values
            .data
            .chunks(self.values.width)
            .all(|a| action_box.contains(a))
    }
}

/// Adjoint pair: `Y` is `M × (N+1) × n`, `Z` is `M × N × (n·d)` with each
/// row-major `n×d` matrix flattened.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjointEnsemble<T> {
    pub grid: TimeGrid<T>,
    pub y: PathArray<T>,
    pub z: PathArray<T>,
    /// Steps at which the regression fell back to the ridge solve.
    pub ridge_steps: Vec<usize>,
}

impl<T> AsRef<PathArray<T>> for PathArray<T> {
    fn as_ref(&self) -> &PathArray<T> {
        self
    }
}

impl<T> AsRef<PathArray<T>> for StateEnsemble<T> {
    fn as_ref(&self) -> &PathArray<T> {
        &self.values
    }
}

impl<T> AsRef<PathArray<T>> for ControlProcess<T> {
    fn as_ref(&self) -> &PathArray<T> {
        &self.values
    }
}

impl<T> AsRef<PathArray<T>> for BrownianEnsemble<T> {
    fn as_ref(&self) -> &PathArray<T> {
        &self.increments
    }
}
