//! Small dense linear algebra for low-dimensional Gaussians and feature grams.
//!
//! Matrices are row-major `Vec<f64>` of size `d * d`. Nothing here is meant
//! for large `d`; the sample spaces in this crate are low-dimensional and the
//! feature grams are at most a few hundred square.

/// Cholesky factorization `A = L L^T` with `L` lower triangular (row-major).
/// Returns `None` when `A` is not (numerically) positive definite.
pub fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    assert_eq!(a.len(), d * d);
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

/// Solve `L x = b` for lower-triangular `L` (forward substitution).
pub fn solve_lower(l: &[f64], d: usize, b: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; d];
    for i in 0..d {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * d + k] * x[k];
        }
        x[i] = s / l[i * d + i];
    }
    x
}

/// Solve `L^T x = b` for lower-triangular `L` (back substitution).
pub fn solve_lower_transpose(l: &[f64], d: usize, b: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; d];
    for i in (0..d).rev() {
        let mut s = b[i];
        for k in (i + 1)..d {
            s -= l[k * d + i] * x[k];
        }
        x[i] = s / l[i * d + i];
    }
    x
}

/// `y = M v` for a row-major `d x d` matrix.
pub fn mat_vec(m: &[f64], d: usize, v: &[f64]) -> Vec<f64> {
    (0..d)
        .map(|i| (0..d).map(|j| m[i * d + j] * v[j]).sum())
        .collect()
}

/// `M M^T` for a row-major lower-triangular factor (reassembles a covariance).
pub fn lower_times_transpose(l: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..=i.min(j) {
                s += l[i * d + k] * l[j * d + k];
            }
            out[i * d + j] = s;
        }
    }
    out
}

/// log(det A) from its Cholesky factor.
pub fn log_det_from_cholesky(l: &[f64], d: usize) -> f64 {
    (0..d).map(|i| l[i * d + i].ln()).sum::<f64>() * 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_round_trip() {
        let a = vec![4.0, 2.0, 2.0, 3.0];
        let l = cholesky(&a, 2).unwrap();
        let back = lower_times_transpose(&l, 2);
        for (x, y) in a.iter().zip(back.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = vec![1.0, 2.0, 2.0, 1.0];
        assert!(cholesky(&a, 2).is_none());
    }

    #[test]
    fn triangular_solves() {
        let a = vec![4.0, 2.0, 2.0, 3.0];
        let l = cholesky(&a, 2).unwrap();
        let b = vec![1.0, -2.0];
        // Solve A x = b via L (L^T x) = b.
        let y = solve_lower(&l, 2, &b);
        let x = solve_lower_transpose(&l, 2, &y);
        let ax = mat_vec(&a, 2, &x);
        assert!((ax[0] - b[0]).abs() < 1e-12 && (ax[1] - b[1]).abs() < 1e-12);
    }
}
