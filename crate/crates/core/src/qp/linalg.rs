//! Small dense kernels: Gaussian elimination, cyclic Jacobi eigensolver, null-space basis.

use nalgebra::{DMatrix, DVector};

use crate::scalar::Scalar;

/// Solves `a x = b` by Gaussian elimination with partial pivoting. `None` if singular.
pub(crate) fn solve_dense<T: Scalar>(mut a: DMatrix<T>, mut b: DVector<T>) -> Option<DVector<T>> {
    let n = a.nrows();
    debug_assert_eq!(a.ncols(), n);
    let scale = a.iter().fold(T::zero(), |m, v| m.max(v.abs())).max(T::min_positive_value());
    let tiny = scale * T::epsilon() * T::from_count(n.max(1));
    for col in 0..n {
        let mut piv = col;
        for row in (col + 1)..n {
            if a[(row, col)].abs() > a[(piv, col)].abs() {
                piv = row;
            }
        }
        if a[(piv, col)].abs() <= tiny {
            return None;
        }
        if piv != col {
            a.swap_rows(piv, col);
            b.swap_rows(piv, col);
        }
        let p = a[(col, col)];
        for row in (col + 1)..n {
            let f = a[(row, col)] / p;
            if f == T::zero() {
                continue;
            }
            for k in col..n {
                let v = a[(col, k)];
                a[(row, k)] -= f * v;
            }
            let bv = b[col];
            b[row] -= f * bv;
        }
    }
    let mut x = DVector::<T>::zeros(n);
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in (row + 1)..n {
            acc -= a[(row, k)] * x[k];
        }
        x[row] = acc / a[(row, row)];
    }
    Some(x)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues and a matrix whose columns are the matching orthonormal eigenvectors.
pub(crate) fn symmetric_eigen<T: Scalar>(m: &DMatrix<T>) -> (DVector<T>, DMatrix<T>) {
    let n = m.nrows();
    let mut a = m.clone();
    let mut v = DMatrix::<T>::identity(n, n);
    let two = T::lit(2.0);
    for _sweep in 0..100 {
        let mut off = T::zero();
        let mut diag = T::zero();
        for i in 0..n {
            diag = diag + a[(i, i)] * a[(i, i)];
            for j in (i + 1)..n {
                off = off + a[(i, j)] * a[(i, j)];
            }
        }
        if off <= T::epsilon() * T::epsilon() * diag.max(T::min_positive_value()) || off == T::zero() {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (two * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let t = if theta == T::zero() { T::one() } else { t };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    (DVector::from_iterator(n, (0..n).map(|i| a[(i, i)])), v)
}

/// Orthonormal basis (as columns) of the complement of the row space of `rows` (`k x n`).
///
/// Rows are assumed linearly independent. Built by modified Gram-Schmidt against the rows
/// followed by the unit vectors in index order, so the result is deterministic.
pub(crate) fn null_space<T: Scalar>(rows: &[DVector<T>], n: usize) -> DMatrix<T> {
    let mut basis: Vec<DVector<T>> = Vec::with_capacity(n);
    for r in rows {
        if let Some(q) = orthogonalize(r.clone(), &basis) {
            basis.push(q);
        }
    }
    let k = basis.len();
    for j in 0..n {
        if basis.len() == n {
            break;
        }
        let mut e = DVector::<T>::zeros(n);
        e[j] = T::one();
        if let Some(q) = orthogonalize(e, &basis) {
            basis.push(q);
        }
    }
    let r = basis.len() - k;
    let mut z = DMatrix::<T>::zeros(n, r);
    for (c, q) in basis[k..].iter().enumerate() {
        z.set_column(c, q);
    }
    z
}

/// Projects `v` off the orthonormal `basis` (twice, for stability) and normalises it.
/// `None` when what is left is numerically zero.
pub(crate) fn orthogonalize<T: Scalar>(mut v: DVector<T>, basis: &[DVector<T>]) -> Option<DVector<T>> {
    let norm0 = v.norm_squared_generic().sqrt();
    if norm0 == T::zero() {
        return None;
    }
    for _ in 0..2 {
        for q in basis {
            let d = q.dot(&v);
            v -= q * d;
        }
    }
    let norm = v.norm_squared_generic().sqrt();
    if norm <= norm0 * T::lit(1e3) * T::epsilon() {
        return None;
    }
    Some(v / norm)
}

pub(crate) trait NormExt<T> {
    fn norm_squared_generic(&self) -> T;
    fn max_abs(&self) -> T;
}

impl<T: Scalar> NormExt<T> for DVector<T> {
    fn norm_squared_generic(&self) -> T {
        self.iter().fold(T::zero(), |acc, v| acc + *v * *v)
    }

    fn max_abs(&self) -> T {
        self.iter().fold(T::zero(), |acc, v| acc.max(v.abs()))
    }
}
