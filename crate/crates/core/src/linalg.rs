//! Dense symmetric linear algebra used by the covariance decomposition and
//! the score sampler: a tridiagonal-QL eigensolver, Cholesky factorisation
//! and the triangular solves that go with it.

use ndarray::Array2;

use crate::error::LinalgError;
use crate::scalar::Real;

/// Eigen-decomposition of a symmetric matrix, eigenvalues sorted
/// non-increasing, eigenvectors stored as the columns of `vectors`.
#[derive(Debug, Clone)]
pub struct SymmetricEigen<T> {
    pub values: Vec<T>,
    pub vectors: Array2<T>,
}

/// Householder reduction to tridiagonal form followed by implicit QL.
///
/// Only the lower triangle is read when `a` is not exactly symmetric; callers
/// that care about asymmetry must check it themselves.
pub fn symmetric_eigen<T: Real>(a: &Array2<T>) -> Result<SymmetricEigen<T>, LinalgError> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(LinalgError::NotSquare { rows: n, cols: a.ncols() });
    }
    if n == 0 {
        return Ok(SymmetricEigen { values: Vec::new(), vectors: Array2::zeros((0, 0)) });
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    let mut v = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            v[i * n + j] = if j <= i { a[[i, j]] } else { a[[j, i]] };
        }
    }
    let mut d = vec![T::zero(); n];
    let mut e = vec![T::zero(); n];
    tridiagonalize(n, &mut v, &mut d, &mut e);
    tridiagonal_ql(n, &mut v, &mut d, &mut e)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[j].partial_cmp(&d[i]).unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j)));
    let values = order.iter().map(|&i| d[i]).collect();
    let mut vectors = Array2::zeros((n, n));
    for (col, &src) in order.iter().enumerate() {
        for row in 0..n {
            vectors[[row, col]] = v[row * n + src];
        }
    }
    Ok(SymmetricEigen { values, vectors })
}

fn tridiagonalize<T: Real>(n: usize, v: &mut [T], d: &mut [T], e: &mut [T]) {
    let at = |i: usize, j: usize| i * n + j;
    for j in 0..n {
        d[j] = v[at(n - 1, j)];
    }
    for i in (1..n).rev() {
        let mut scale = T::zero();
        let mut h = T::zero();
        for dk in d.iter().take(i) {
            scale += dk.abs();
        }
        if scale == T::zero() {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[at(i - 1, j)];
                v[at(i, j)] = T::zero();
                v[at(j, i)] = T::zero();
            }
        } else {
            for dk in d.iter_mut().take(i) {
                *dk /= scale;
                h += *dk * *dk;
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > T::zero() {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = T::zero();
            }
            for j in 0..i {
                f = d[j];
                v[at(j, i)] = f;
                g = e[j] + v[at(j, j)] * f;
                for k in (j + 1)..i {
                    g += v[at(k, j)] * d[k];
                    e[k] += v[at(k, j)] * f;
                }
                e[j] = g;
            }
            f = T::zero();
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[at(k, j)] -= f * e[k] + g * d[k];
                }
                d[j] = v[at(i - 1, j)];
                v[at(i, j)] = T::zero();
            }
        }
        d[i] = h;
    }
    for i in 0..n.saturating_sub(1) {
        v[at(n - 1, i)] = v[at(i, i)];
        v[at(i, i)] = T::one();
        let h = d[i + 1];
        if h != T::zero() {
            for k in 0..=i {
                d[k] = v[at(k, i + 1)] / h;
            }
            for j in 0..=i {
                let mut g = T::zero();
                for k in 0..=i {
                    g += v[at(k, i + 1)] * v[at(k, j)];
                }
                for k in 0..=i {
                    v[at(k, j)] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[at(k, i + 1)] = T::zero();
        }
    }
    for j in 0..n {
        d[j] = v[at(n - 1, j)];
        v[at(n - 1, j)] = T::zero();
    }
    v[at(n - 1, n - 1)] = T::one();
    e[0] = T::zero();
}

fn tridiagonal_ql<T: Real>(n: usize, v: &mut [T], d: &mut [T], e: &mut [T]) -> Result<(), LinalgError> {
    let at = |i: usize, j: usize| i * n + j;
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = T::zero();
    let two = T::lit(2.0);
    let eps = T::epsilon();
    let mut f = T::zero();
    let mut tst1 = T::zero();
    let max_sweeps = 60 * n.max(1);
    let mut sweeps = 0usize;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n - 1 {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            loop {
                sweeps += 1;
                if sweeps > max_sweeps {
                    return Err(LinalgError::NoConvergence);
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (two * e[l]);
                let mut r = p.hypot(T::one());
                if p < T::zero() {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= h;
                }
                f += h;
                p = d[m];
                let mut c = T::one();
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = T::zero();
                let mut s2 = T::zero();
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for k in 0..n {
                        let vk1 = v[at(k, i + 1)];
                        let vk = v[at(k, i)];
                        v[at(k, i + 1)] = s * vk + c * vk1;
                        v[at(k, i)] = c * vk - s * vk1;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = T::zero();
    }
    Ok(())
}

/// Nearest positive-semidefinite matrix in Frobenius norm: negative
/// eigenvalues are set to zero and the matrix is reassembled.
pub fn project_psd<T: Real>(a: &Array2<T>) -> Result<Array2<T>, LinalgError> {
    let eig = symmetric_eigen(a)?;
    let n = a.nrows();
    let mut out = Array2::zeros((n, n));
    for (c, &lam) in eig.values.iter().enumerate() {
        if lam <= T::zero() {
            continue;
        }
        for i in 0..n {
            let vi = eig.vectors[[i, c]] * lam;
            for j in 0..n {
                out[[i, j]] += vi * eig.vectors[[j, c]];
            }
        }
    }
    Ok(out)
}

/// Lower Cholesky factor of a symmetric positive-definite matrix, stored
/// densely in row-major order (`n * n`). Returns `None` when a pivot is not
/// strictly positive.
pub fn cholesky_in_place<T: Real>(a: &mut [T], n: usize) -> Option<()> {
    for j in 0..n {
        let mut diag = a[j * n + j];
        for k in 0..j {
            diag -= a[j * n + k] * a[j * n + k];
        }
        if !(diag > T::zero()) || !diag.is_finite() {
            return None;
        }
        let ljj = diag.sqrt();
        a[j * n + j] = ljj;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / ljj;
        }
        for i in 0..j {
            a[i * n + j] = T::zero();
        }
    }
    Some(())
}

/// Solves `L L^T x = b` for a factor produced by [`cholesky_in_place`].
pub fn cholesky_solve_in_place<T: Real>(l: &[T], n: usize, b: &mut [T]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Solves `L^T x = b` in place (back substitution against the transpose).
pub fn cholesky_upper_solve_in_place<T: Real>(l: &[T], n: usize, b: &mut [T]) {
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Sum of log-diagonal entries of a Cholesky factor, i.e. `log det(A) / 2`.
pub fn cholesky_half_log_det<T: Real>(l: &[T], n: usize) -> T {
    (0..n).map(|i| l[i * n + i].ln()).sum()
}

/// Inverse of an SPD matrix through its Cholesky factor.
pub fn spd_inverse<T: Real>(a: &[T], n: usize) -> Option<Vec<T>> {
    let mut l = a.to_vec();
    cholesky_in_place(&mut l, n)?;
    let mut inv = vec![T::zero(); n * n];
    let mut col = vec![T::zero(); n];
    for c in 0..n {
        col.iter_mut().for_each(|x| *x = T::zero());
        col[c] = T::one();
        cholesky_solve_in_place(&l, n, &mut col);
        for r in 0..n {
            inv[r * n + c] = col[r];
        }
    }
    Some(inv)
}

pub fn max_asymmetry<T: Real>(a: &Array2<T>) -> T {
    let n = a.nrows();
    let mut worst = T::zero();
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn reconstruct(e: &SymmetricEigen<f64>) -> Array2<f64> {
        let n = e.values.len();
        let mut out = Array2::zeros((n, n));
        for c in 0..n {
            for i in 0..n {
                for j in 0..n {
                    out[[i, j]] += e.values[c] * e.vectors[[i, c]] * e.vectors[[j, c]];
                }
            }
        }
        out
    }

    #[test]
    fn eigen_of_small_matrix() {
        let a = array![[4.0, 1.0, 0.0], [1.0, 3.0, 1.0], [0.0, 1.0, 2.0]];
        let e = symmetric_eigen(&a).unwrap();
        assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
        let back = reconstruct(&e);
        for (x, y) in back.iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        // trace and determinant are preserved
        let tr: f64 = e.values.iter().sum();
        assert!((tr - 9.0).abs() < 1e-12);
        let det: f64 = e.values.iter().product();
        assert!((det - 18.0).abs() < 1e-10);
    }

    #[test]
    fn eigenvectors_orthonormal_on_random_matrix() {
        let n = 40;
        let mut a = Array2::<f64>::zeros((n, n));
        let mut state = 12345u64;
        for i in 0..n {
            for j in 0..=i {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let x = ((state >> 11) as f64) / ((1u64 << 53) as f64) - 0.5;
                a[[i, j]] = x;
                a[[j, i]] = x;
            }
        }
        let e = symmetric_eigen(&a).unwrap();
        let vtv = e.vectors.t().dot(&e.vectors);
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((vtv[[i, j]] - want).abs() < 1e-10);
            }
        }
        let back = reconstruct(&e);
        for (x, y) in back.iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn handles_diagonal_and_repeated_eigenvalues() {
        let a = array![[2.0f64, 0.0, 0.0], [0.0, 5.0, 0.0], [0.0, 0.0, 2.0]];
        let e = symmetric_eigen(&a).unwrap();
        assert_eq!(e.values.len(), 3);
        assert!((e.values[0] - 5.0).abs() < 1e-14);
        assert!((e.values[1] - 2.0).abs() < 1e-14);
        assert!((e.values[2] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn works_in_single_precision() {
        let a = array![[2.0f32, 1.0], [1.0, 2.0]];
        let e = symmetric_eigen(&a).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-5);
        assert!((e.values[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn psd_projection_clears_negative_part() {
        let a = array![[1.0f64, 2.0], [2.0, 1.0]];
        let p = project_psd(&a).unwrap();
        let e = symmetric_eigen(&p).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-12);
        assert!(e.values[1].abs() < 1e-12);
    }

    #[test]
    fn cholesky_round_trip() {
        let a = [4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0];
        let mut l = a;
        cholesky_in_place(&mut l, 3).unwrap();
        let mut b = [1.0, 2.0, 3.0];
        cholesky_solve_in_place(&l, 3, &mut b);
        for i in 0..3 {
            let ax: f64 = (0..3).map(|j| a[i * 3 + j] * b[j]).sum();
            assert!((ax - [1.0, 2.0, 3.0][i]).abs() < 1e-12);
        }
        let inv = spd_inverse(&a, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| a[i * 3 + k] * inv[k * 3 + j]).sum();
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        let mut bad = [1.0, 2.0, 2.0, 1.0];
        assert!(cholesky_in_place(&mut bad, 2).is_none());
    }
}
