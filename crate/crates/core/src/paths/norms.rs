use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::PathArray;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// `‖A_k − B_k‖_{L²}` at one node with its Monte Carlo standard error
/// (delta method on the root of the path mean).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct L2Point<T> {
    pub value: T,
    pub std_error: T,
}

fn check_aligned<T: Real>(a: &PathArray<T>, b: &PathArray<T>) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::Dimension(format!(
            "misaligned ensembles: {}×{}×{} vs {}×{}×{}",
            a.paths, a.len, a.width, b.paths, b.len, b.width
        )))
    }
}

fn point<T: Real>(a: &PathArray<T>, b: Option<&PathArray<T>>, k: usize) -> L2Point<T> {
    let m = a.paths;
    let sq: Vec<T> = (0..m)
        .map(|j| {
            let x = a.at(j, k);
            match b {
                Some(b) => x
                    .iter()
                    .zip(b.at(j, k))
                    .map(|(u, v)| (*u - *v) * (*u - *v))
                    .sum(),
                None => x.iter().map(|u| *u * *u).sum(),
            }
        })
        .collect();
    let mf = T::from_count(m);
    let mean = sq.iter().copied().sum::<T>() / mf;
    let value = mean.sqrt();
    let std_error = if m > 1 && value > T::zero() {
        let var = sq.iter().map(|s| (*s - mean) * (*s - mean)).sum::<T>() / T::from_count(m - 1);
        (var / mf).sqrt() / (T::lit(2.0) * value)
    } else {
        T::zero()
    };
    L2Point { value, std_error }
}

/// `√(mean_j ‖A_k − B_k‖²)`.
pub fn ensemble_l2_distance<T: Real>(
    a: &impl AsRef<PathArray<T>>,
    b: &impl AsRef<PathArray<T>>,
    k: usize,
) -> Result<T> {
    let (a, b) = (a.as_ref(), b.as_ref());
    check_aligned(a, b)?;
    if k >= a.len {
        return Err(Error::Dimension(format!("step {k} outside 0..{}", a.len)));
    }
    Ok(point(a, Some(b), k).value)
}

/// Per-node `L²` profile of `A − B`, or of `A` itself when `b` is `None`.
pub fn l2_profile<T: Real>(a: &PathArray<T>, b: Option<&PathArray<T>>) -> Result<Vec<L2Point<T>>> {
    if let Some(b) = b {
        check_aligned(a, b)?;
    }
    Ok((0..a.len).into_par_iter().map(|k| point(a, b, k)).collect())
}

/// Discretized `‖A − B‖_𝒜`: maximum over grid nodes of the `L²` distance.
pub fn sup_norm_distance<T: Real>(a: &impl AsRef<PathArray<T>>, b: &impl AsRef<PathArray<T>>) -> Result<T> {
    Ok(sup_norm_distance_with_se(a, b)?.value)
}

/// Like [`sup_norm_distance`], with the standard error at the maximizing node.
pub fn sup_norm_distance_with_se<T: Real>(
    a: &impl AsRef<PathArray<T>>,
    b: &impl AsRef<PathArray<T>>,
) -> Result<L2Point<T>> {
    let prof = l2_profile(a.as_ref(), Some(b.as_ref()))?;
    Ok(prof
        .into_iter()
        .fold(L2Point { value: T::zero(), std_error: T::zero() }, |best, p| {
            if p.value > best.value {
                p
            } else {
                best
            }
        }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arr(paths: usize, len: usize, width: usize, data: Vec<f64>) -> PathArray<f64> {
        PathArray { paths, len, width, data }
    }

    #[test]
    fn identical_is_zero() {
        let a = arr(2, 3, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        for k in 0..3 {
            assert_eq!(ensemble_l2_distance(&a, &a, k).unwrap(), 0.0);
        }
    }

    #[test]
    fn constant_offset_gives_abs_delta() {
        let a = arr(3, 2, 1, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let b = arr(3, 2, 1, a.data.iter().map(|v| v - 0.25).collect());
        for k in 0..2 {
            assert!((ensemble_l2_distance(&a, &b, k).unwrap() - 0.25).abs() < 1e-14);
        }
    }

    #[test]
    fn misaligned_rejected() {
        let a = arr(1, 2, 1, vec![0.0, 0.0]);
        let b = arr(2, 1, 1, vec![0.0, 0.0]);
        assert!(ensemble_l2_distance(&a, &b, 0).is_err());
        assert!(ensemble_l2_distance(&a, &a, 5).is_err());
    }

    fn array_strategy() -> impl Strategy<Value = (PathArray<f64>, PathArray<f64>, PathArray<f64>)> {
        (1usize..6, 1usize..6, 1usize..3).prop_flat_map(|(p, l, w)| {
            let n = p * l * w;
            (
                prop::collection::vec(-5.0..5.0, n),
                prop::collection::vec(-5.0..5.0, n),
                prop::collection::vec(-5.0..5.0, n),
            )
                .prop_map(move |(x, y, z)| (arr(p, l, w, x), arr(p, l, w, y), arr(p, l, w, z)))
        })
    }

    proptest! {
        #[test]
        fn sup_is_max_of_steps((a, b, _) in array_strategy()) {
            let brute = (0..a.len)
                .map(|k| ensemble_l2_distance(&a, &b, k).unwrap())
                .fold(0.0, f64::max);
            prop_assert_eq!(sup_norm_distance(&a, &b).unwrap(), brute);
        }

        #[test]
        fn sup_norm_triangle_and_homogeneity((a, b, c) in array_strategy(), s in -3.0..3.0f64) {
            let ab = sup_norm_distance(&a, &b).unwrap();
            let bc = sup_norm_distance(&b, &c).unwrap();
            let ac = sup_norm_distance(&a, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-12);
            let zero = arr(a.paths, a.len, a.width, vec![0.0; a.data.len()]);
            let sa = arr(a.paths, a.len, a.width, a.data.iter().map(|v| s * v).collect());
            let na = sup_norm_distance(&a, &zero).unwrap();
            let nsa = sup_norm_distance(&sa, &zero).unwrap();
            prop_assert!((nsa - s.abs() * na).abs() <= 1e-12 * (1.0 + na));
        }
    }
}
