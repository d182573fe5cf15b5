use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_in_place, cholesky_solve};
use crate::paths::PathArray;
use crate::scalar::Real;

/// Paths per partial sum. Fixed so reductions do not depend on the pool.
pub(crate) const CHUNK: usize = 512;

const RIDGE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisFamily {
    Polynomial,
}

/// Features for the conditional expectations: all monomials of total degree
/// `<= degree` in the standardized state coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionBasis {
    #[serde(default = "default_family")]
    pub family: BasisFamily,
    #[serde(default = "default_degree")]
    pub degree: u32,
}

fn default_family() -> BasisFamily {
    BasisFamily::Polynomial
}

fn default_degree() -> u32 {
    2
}

impl Default for RegressionBasis {
    fn default() -> Self {
        Self {
            family: BasisFamily::Polynomial,
            degree: 2,
        }
    }
}

impl RegressionBasis {
    pub fn polynomial(degree: u32) -> Self {
        Self {
            family: BasisFamily::Polynomial,
            degree,
        }
    }

    /// Exponent vectors in graded lexicographic order, constant first.
    pub fn exponents(&self, dims: usize) -> Vec<Vec<u32>> {
        let mut out = Vec::new();
        for total in 0..=self.degree {
            let mut cur = vec![0u32; dims];
            push_compositions(total, 0, &mut cur, &mut out);
        }
        out
    }

    pub fn feature_count(&self, dims: usize) -> usize {
        self.exponents(dims).len()
    }

    /// Human readable features, e.g. `["1", "x0", "x1", "x0^2", "x0*x1", "x1^2"]`.
    pub fn describe(&self, dims: usize) -> Vec<String> {
        self.exponents(dims)
            .iter()
            .map(|e| {
                let parts: Vec<String> = e
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| **p > 0)
                    .map(|(i, p)| if *p == 1 { format!("x{i}") } else { format!("x{i}^{p}") })
                    .collect();
                if parts.is_empty() {
                    "1".into()
                } else {
                    parts.join("*")
                }
            })
            .collect()
    }

    pub fn check(&self, dims: usize, paths: usize) -> Result<()> {
        let f = self.feature_count(dims);
        if f * 10 > paths {
            return Err(Error::Config(format!(
                "{f} regression features need at least {} paths, got {paths}",
                f * 10
            )));
        }
        Ok(())
    }
}

fn push_compositions(left: u32, i: usize, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if i + 1 == cur.len() {
        cur[i] = left;
        out.push(cur.clone());
        cur[i] = 0;
        return;
    }
    if cur.is_empty() {
        if left == 0 {
            out.push(Vec::new());
        }
        return;
    }
    for e in (0..=left).rev() {
        cur[i] = e;
        push_compositions(left - e, i + 1, cur, out);
    }
    cur[i] = 0;
}

/// Sums `f(range)` over fixed chunks of `0..m` in chunk order.
pub(crate) fn chunked_sum<T: Real>(
    m: usize,
    len: usize,
    f: impl Fn(std::ops::Range<usize>, &mut [T]) + Sync,
) -> Vec<T> {
    let chunks = m.div_ceil(CHUNK);
    let parts: Vec<Vec<T>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![T::zero(); len];
            f(c * CHUNK..((c + 1) * CHUNK).min(m), &mut acc);
            acc
        })
        .collect();
    let mut total = vec![T::zero(); len];
    for p in parts {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// Least-squares projector onto the basis evaluated at one time slice.
/// The design and its factorization are shared across all fits at that slice.
pub(crate) struct Regressor<T> {
    paths: usize,
    features: usize,
    phi: Vec<T>,
    chol: Vec<T>,
    pub ridge: bool,
}

impl<T: Real> Regressor<T> {
    /// Builds the design from `x.at(j, k)` for all paths. Coordinates with no
    /// spread across paths are dropped (they only duplicate the constant).
    pub fn new(x: &PathArray<T>, k: usize, basis: &RegressionBasis) -> Self {
        let m = x.paths;
        let n = x.width;
        let mf = T::from_count(m);
        let mut mean = vec![T::zero(); n];
        for j in 0..m {
            for (a, v) in mean.iter_mut().zip(x.at(j, k)) {
                *a += *v;
            }
        }
        for a in mean.iter_mut() {
            *a /= mf;
        }
        let mut var = vec![T::zero(); n];
        for j in 0..m {
            for ((s, v), mu) in var.iter_mut().zip(x.at(j, k)).zip(&mean) {
                *s += (*v - *mu) * (*v - *mu);
            }
        }
        let mut active = Vec::new();
        let mut scale = Vec::new();
        for i in 0..n {
            let sd = (var[i] / mf).sqrt();
            if sd > T::lit(1e-12) * (T::one() + mean[i].abs()) {
                active.push(i);
                scale.push(T::one() / sd);
            }
        }
        let exps = basis.exponents(active.len());
        let f = exps.len();
        let deg = basis.degree as usize;
        let mut phi = vec![T::zero(); m * f];
        phi.par_chunks_mut(f).enumerate().for_each(|(j, row)| {
            let xj = x.at(j, k);
            // powers[a][p] = u_a^p
            let powers: Vec<Vec<T>> = active
                .iter()
                .zip(&scale)
                .map(|(&i, &s)| {
                    let u = (xj[i] - mean[i]) * s;
                    let mut pw = vec![T::one(); deg + 1];
                    for p in 1..=deg {
                        pw[p] = pw[p - 1] * u;
                    }
                    pw
                })
                .collect();
            for (o, e) in row.iter_mut().zip(&exps) {
                let mut v = T::one();
                for (a, p) in e.iter().enumerate() {
                    v *= powers[a][*p as usize];
                }
                *o = v;
            }
        });
        let mut gram = chunked_sum(m, f * f, |range, acc| {
            for j in range {
                let row = &phi[j * f..(j + 1) * f];
                for a in 0..f {
                    for b in 0..=a {
                        acc[a * f + b] += row[a] * row[b];
                    }
                }
            }
        });
        for a in 0..f {
            for b in 0..=a {
                gram[a * f + b] /= mf;
                gram[b * f + a] = gram[a * f + b];
            }
        }
        let mut chol = gram.clone();
        let mut ridge = false;
        if !cholesky_in_place(&mut chol, f) {
            ridge = true;
            chol = gram;
            for a in 0..f {
                chol[a * f + a] += T::lit(RIDGE);
            }
            if !cholesky_in_place(&mut chol, f) {
                // degenerate beyond the ridge: keep only the constant fit
                chol = vec![T::zero(); f * f];
                for a in 0..f {
                    chol[a * f + a] = T::one();
                }
                for j in 0..m {
                    for a in 1..f {
                        phi[j * f + a] = T::zero();
                    }
                }
            }
        }
        Self {
            paths: m,
            features: f,
            phi,
            chol,
            ridge,
        }
    }

    /// Projects `r` targets per path (row-major `M×r`) and returns fitted values.
    pub fn fit_predict(&self, targets: &[T], r: usize) -> Vec<T> {
        let (m, f) = (self.paths, self.features);
        let mut rhs = chunked_sum(m, f * r, |range, acc| {
            for j in range {
                let row = &self.phi[j * f..(j + 1) * f];
                let y = &targets[j * r..(j + 1) * r];
                for a in 0..f {
                    for c in 0..r {
                        acc[a * r + c] += row[a] * y[c];
                    }
                }
            }
        });
        let mf = T::from_count(m);
        for v in rhs.iter_mut() {
            *v /= mf;
        }
        cholesky_solve(&self.chol, f, &mut rhs, r);
        let coef = rhs;
        let mut out = vec![T::zero(); m * r];
        out.par_chunks_mut(r).enumerate().for_each(|(j, o)| {
            let row = &self.phi[j * f..(j + 1) * f];
            for c in 0..r {
                let mut v = T::zero();
                for a in 0..f {
                    v += row[a] * coef[a * r + c];
                }
                o[c] = v;
            }
        });
        out
    }
}
