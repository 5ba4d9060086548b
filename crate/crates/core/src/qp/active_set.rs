//! Primal active-set loop for `min 1/2 z'Hz + g'z  s.t.  c_i z <= d_i` from a feasible start.
//!
//! Null-space steps handle a positive semidefinite reduced Hessian: components of the reduced
//! gradient lying in its kernel produce a descent ray that runs until a constraint blocks.

use nalgebra::{DMatrix, DVector};

use super::linalg::{self, NormExt};
use super::SolverOptions;
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub(crate) struct Rows<T: Scalar> {
    n: usize,
    c: Vec<DVector<T>>,
    d: Vec<T>,
}

impl<T: Scalar> Rows<T> {
    pub(crate) fn new(n: usize) -> Self {
        Self { n, c: Vec::new(), d: Vec::new() }
    }

    pub(crate) fn push(&mut self, c: DVector<T>, d: T) {
        debug_assert_eq!(c.len(), self.n);
        self.c.push(c);
        self.d.push(d);
    }

    pub(crate) fn len(&self) -> usize {
        self.c.len()
    }

    pub(crate) fn dim(&self) -> usize {
        self.n
    }

    pub(crate) fn row(&self, i: usize) -> &DVector<T> {
        &self.c[i]
    }

    pub(crate) fn rhs(&self, i: usize) -> T {
        self.d[i]
    }

    pub(crate) fn max_violation(&self, z: &DVector<T>) -> T {
        self.c
            .iter()
            .zip(&self.d)
            .fold(T::neg_infinity(), |m, (c, d)| m.max(c.dot(z) - *d))
            .max(T::zero())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ActiveSetStatus {
    Converged,
    MaxIter,
    Unbounded,
}

#[derive(Debug, Clone)]
pub(crate) struct ActiveSetResult<T: Scalar> {
    pub z: DVector<T>,
    /// Row indices of the final working set, ascending.
    pub working: Vec<usize>,
    /// Multipliers matching `working`.
    pub lambda: Vec<T>,
    pub status: ActiveSetStatus,
    pub iterations: usize,
}

enum Direction<T: Scalar> {
    /// Newton step inside the working face; full length is 1.
    Newton(DVector<T>),
    /// Descent along a zero-curvature direction; no natural length.
    Ray(DVector<T>),
    Stationary,
}

fn direction<T: Scalar>(
    h: &DMatrix<T>,
    grad: &DVector<T>,
    rows: &Rows<T>,
    working: &[usize],
) -> Direction<T> {
    let n = rows.dim();
    let w_rows: Vec<DVector<T>> = working.iter().map(|&i| rows.row(i).clone()).collect();
    let z_basis = linalg::null_space(&w_rows, n);
    if z_basis.ncols() == 0 {
        return Direction::Stationary;
    }
    let hr = z_basis.transpose() * h * &z_basis;
    let gr = z_basis.transpose() * grad;
    let (evals, evecs) = linalg::symmetric_eigen(&hr);
    let emax = evals.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    let eig_tol = T::epsilon().sqrt() * emax.max(T::one());
    let g_tol = T::lit(1e3) * T::epsilon() * (T::one() + grad.max_abs());

    let r = hr.nrows();
    let mut newton = DVector::<T>::zeros(r);
    let mut ray = DVector::<T>::zeros(r);
    let mut has_ray = false;
    for k in 0..r {
        let v = evecs.column(k).clone_owned();
        let proj = v.dot(&gr);
        if evals[k] > eig_tol {
            newton -= &v * (proj / evals[k]);
        } else if proj.abs() > g_tol {
            ray -= &v * proj;
            has_ray = true;
        }
    }
    if has_ray {
        return Direction::Ray(&z_basis * ray);
    }
    let p = &z_basis * newton;
    let z_scale = T::one() + grad.max_abs();
    if p.max_abs() <= T::lit(1e2) * T::epsilon() * z_scale {
        Direction::Stationary
    } else {
        Direction::Newton(p)
    }
}

/// Least-squares multipliers for the working set: `C_W' lambda = -grad`.
fn multipliers<T: Scalar>(grad: &DVector<T>, rows: &Rows<T>, working: &[usize]) -> Vec<T> {
    let k = working.len();
    if k == 0 {
        return Vec::new();
    }
    let mut gram = DMatrix::<T>::zeros(k, k);
    let mut rhs = DVector::<T>::zeros(k);
    for (a, &i) in working.iter().enumerate() {
        rhs[a] = -rows.row(i).dot(grad);
        for (b, &j) in working.iter().enumerate() {
            gram[(a, b)] = rows.row(i).dot(rows.row(j));
        }
    }
    linalg::solve_dense(gram, rhs)
        .map(|l| l.iter().copied().collect())
        .unwrap_or_else(|| vec![T::zero(); k])
}

pub(crate) fn solve<T: Scalar>(
    h: &DMatrix<T>,
    g: &DVector<T>,
    rows: &Rows<T>,
    mut z: DVector<T>,
    opts: &SolverOptions<T>,
) -> ActiveSetResult<T> {
    let n = rows.dim();
    let mut working: Vec<usize> = Vec::new();
    let mut degenerate_streak = 0usize;

    for iter in 0..opts.max_iter {
        let bland = degenerate_streak > n + 1;
        let grad = h * &z + g;
        match direction(h, &grad, rows, &working) {
            Direction::Stationary => {
                let lambda = multipliers(&grad, rows, &working);
                let mut leave: Option<(usize, T)> = None;
                for (k, l) in lambda.iter().enumerate() {
                    if *l < -opts.tol {
                        let better = match leave {
                            None => true,
                            // working is sorted, so keeping the first hit favours the lowest index
                            Some((_, best)) => !bland && *l < best,
                        };
                        if better {
                            leave = Some((k, *l));
                        }
                    }
                }
                match leave {
                    None => {
                        return ActiveSetResult {
                            z,
                            working,
                            lambda,
                            status: ActiveSetStatus::Converged,
                            iterations: iter,
                        }
                    }
                    Some((k, _)) => {
                        working.remove(k);
                    }
                }
            }
            dir @ (Direction::Newton(_) | Direction::Ray(_)) => {
                let (p, max_step) = match dir {
                    Direction::Newton(p) => (p, Some(T::one())),
                    Direction::Ray(p) => (p, None),
                    Direction::Stationary => unreachable!(),
                };
                let p_norm = p.max_abs();
                let mut block: Option<(usize, T)> = None;
                for i in 0..rows.len() {
                    if working.binary_search(&i).is_ok() {
                        continue;
                    }
                    let c = rows.row(i);
                    let cp = c.dot(&p);
                    if cp <= T::lit(1e3) * T::epsilon() * p_norm * (T::one() + c.max_abs()) {
                        continue;
                    }
                    let slack = (rows.rhs(i) - c.dot(&z)).max(T::zero());
                    let step = slack / cp;
                    if block.map_or(true, |(_, s)| step < s) {
                        block = Some((i, step));
                    }
                }
                let (alpha, entering) = match (block, max_step) {
                    (Some((i, s)), Some(m)) if s < m => (s, Some(i)),
                    (_, Some(m)) => (m, None),
                    (Some((i, s)), None) => (s, Some(i)),
                    (None, None) => {
                        return ActiveSetResult {
                            z,
                            working,
                            lambda: Vec::new(),
                            status: ActiveSetStatus::Unbounded,
                            iterations: iter,
                        }
                    }
                };
                if alpha > T::zero() {
                    z += &p * alpha;
                    degenerate_streak = 0;
                } else {
                    degenerate_streak += 1;
                }
                if let Some(i) = entering {
                    let pos = working.binary_search(&i).unwrap_err();
                    working.insert(pos, i);
                }
            }
        }
    }
    let grad = h * &z + g;
    let lambda = multipliers(&grad, rows, &working);
    ActiveSetResult { z, working, lambda, status: ActiveSetStatus::MaxIter, iterations: opts.max_iter }
}
