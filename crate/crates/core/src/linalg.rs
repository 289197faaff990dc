//! Small dense linear-algebra helpers shared across modules.

use ndarray::Array2;

/// Lower-triangular Cholesky factor of a symmetric matrix.
///
/// Returns `None` when a pivot is non-positive (the matrix is not positive
/// definite to working precision).
pub fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "cholesky needs a square matrix");
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut diag = a[[j, j]];
        for k in 0..j {
            diag -= l[[j, k]] * l[[j, k]];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return None;
        }
        let root = diag.sqrt();
        l[[j, j]] = root;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / root;
        }
    }
    Some(l)
}

/// Mean of a slice. Empty input is a caller bug.
pub fn mean(xs: &[f64]) -> f64 {
    debug_assert!(!xs.is_empty());
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n-1 denominator); 0 for slices shorter than 2.
///
/// A constant series returns exactly 0: mean subtraction on a value with no
/// exact binary representation would otherwise leave rounding residue.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 || xs.iter().all(|&x| x == xs[0]) {
        return 0.0;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn cholesky_reconstructs_spd_matrix() {
        let a = arr2(&[[4.0, 2.0, 0.4], [2.0, 3.0, 0.1], [0.4, 0.1, 1.5]]);
        let l = cholesky(&a).expect("spd");
        let back = l.dot(&l.t());
        for i in 0..3 {
            for j in 0..3 {
                assert!((back[[i, j]] - a[[i, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = arr2(&[[1.0, 2.0], [2.0, 1.0]]);
        assert!(cholesky(&a).is_none());
    }

    #[test]
    fn std_matches_two_point_formula() {
        // two points a, b: sample std = |a-b| / sqrt(2)
        let s = sample_std(&[0.0, 0.02]);
        assert!((s - 0.02 / 2.0_f64.sqrt()).abs() < 1e-15);
    }
}
