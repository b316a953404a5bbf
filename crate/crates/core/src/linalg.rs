//! Small dense helpers over nalgebra for the normal-equation solves.

use nalgebra::{DMatrix, DVector};

/// Accumulates `sum_i w_i z_i z_i^T` for row-major `z` (n x d), upper and
/// lower triangles both filled.
pub(crate) fn weighted_gram(z: &[f64], w: impl Fn(usize) -> f64, d: usize) -> DMatrix<f64> {
    let mut g = vec![0.0; d * d];
    if d > 0 {
        for (i, row) in z.chunks_exact(d).enumerate() {
            let wi = w(i);
            if wi == 0.0 {
                continue;
            }
            for r in 0..d {
                let s = wi * row[r];
                let out = &mut g[r * d..r * d + r + 1];
                for (o, zc) in out.iter_mut().zip(&row[..=r]) {
                    *o += s * zc;
                }
            }
        }
        for r in 0..d {
            for c in r + 1..d {
                g[r * d + c] = g[c * d + r];
            }
        }
    }
    DMatrix::from_row_slice(d, d, &g)
}

/// Solves `a x = b` for symmetric positive definite `a`. Returns `None` when
/// the factorization fails or a pivot falls below `rel_tol * max diag(a)`.
pub(crate) fn solve_spd(a: &DMatrix<f64>, b: &[f64], rel_tol: f64) -> Option<Vec<f64>> {
    let d = a.nrows();
    if d == 0 {
        return Some(Vec::new());
    }
    let max_diag = (0..d).map(|k| a[(k, k)].abs()).fold(0.0, f64::max);
    let chol = a.clone().cholesky()?;
    let l = chol.l_dirty();
    let min_pivot = (0..d).map(|k| l[(k, k)] * l[(k, k)]).fold(f64::INFINITY, f64::min);
    if min_pivot.partial_cmp(&(rel_tol * max_diag)) != Some(std::cmp::Ordering::Greater) {
        return None;
    }
    let x = chol.solve(&DVector::from_column_slice(b));
    if x.iter().all(|v| v.is_finite()) {
        Some(x.iter().copied().collect())
    } else {
        None
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gram_and_solve() {
        let z = [1.0, 2.0, 1.0, -1.0, 1.0, 0.0];
        let g = weighted_gram(&z, |_| 1.0, 2);
        assert_eq!(g[(0, 0)], 3.0);
        assert_eq!(g[(0, 1)], 1.0);
        assert_eq!(g[(1, 0)], 1.0);
        assert_eq!(g[(1, 1)], 5.0);
        let x = solve_spd(&g, &[4.0, 6.0], 1e-12).unwrap();
        assert!((3.0 * x[0] + x[1] - 4.0).abs() < 1e-12);
        assert!((x[0] + 5.0 * x[1] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn singular_is_rejected() {
        let z = [1.0, 2.0, 2.0, 4.0];
        let g = weighted_gram(&z, |_| 1.0, 2);
        assert!(solve_spd(&g, &[1.0, 1.0], 1e-12).is_none());
    }
}
