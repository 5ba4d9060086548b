//! Dense convex quadratic programming.
//!
//! ```text
//!     minimize     1/2 z' H z + g' z + offset
//!     subject to   A_in z <= b_in
//!                  lb <= z <= ub
//! ```
//!
//! Solved by a two-phase primal active-set method. Phase one minimises the largest constraint
//! violation (an LP in `(z, t)` handled by the same active-set loop); a positive optimum
//! certifies infeasibility. Phase two starts from the phase-one point. Ties in the entering
//! and leaving choices go to the lowest constraint index, and the method falls back to pure
//! lowest-index selection after a run of degenerate steps.

mod active_set;
pub mod kkt;
pub(crate) mod linalg;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use active_set::{ActiveSetStatus, Rows};
use linalg::NormExt;

pub use kkt::{verify_kkt, KktReport};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProgram<T: Scalar> {
    pub h: DMatrix<T>,
    pub g: DVector<T>,
    /// Constant added to the reported objective.
    pub offset: T,
    pub a_in: DMatrix<T>,
    pub b_in: DVector<T>,
    /// Use `-inf` for an absent lower bound.
    pub lb: DVector<T>,
    /// Use `+inf` for an absent upper bound.
    pub ub: DVector<T>,
}

impl<T: Scalar> QuadraticProgram<T> {
    /// Unconstrained problem in `n` variables.
    pub fn new(h: DMatrix<T>, g: DVector<T>) -> Self {
        let n = g.len();
        Self {
            h,
            g,
            offset: T::zero(),
            a_in: DMatrix::zeros(0, n),
            b_in: DVector::zeros(0),
            lb: DVector::from_element(n, T::neg_infinity()),
            ub: DVector::from_element(n, T::infinity()),
        }
    }

    pub fn with_bounds(mut self, lb: DVector<T>, ub: DVector<T>) -> Self {
        self.lb = lb;
        self.ub = ub;
        self
    }

    pub fn with_inequalities(mut self, a_in: DMatrix<T>, b_in: DVector<T>) -> Self {
        self.a_in = a_in;
        self.b_in = b_in;
        self
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn num_inequalities(&self) -> usize {
        self.b_in.len()
    }

    pub fn objective(&self, z: &DVector<T>) -> T {
        let hz = &self.h * z;
        T::lit(0.5) * z.dot(&hz) + self.g.dot(z) + self.offset
    }

    /// Largest violation over all rows and bounds (zero when feasible).
    pub fn primal_residual(&self, z: &DVector<T>) -> T {
        let mut worst = T::zero();
        if self.num_inequalities() > 0 {
            let az = &self.a_in * z;
            for i in 0..self.num_inequalities() {
                worst = worst.max(az[i] - self.b_in[i]);
            }
        }
        for i in 0..self.dim() {
            worst = worst.max(self.lb[i] - z[i]).max(z[i] - self.ub[i]);
        }
        worst
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        if self.h.nrows() != n || self.h.ncols() != n {
            return Err(Error::Dimension(format!("H must be {n}x{n}")));
        }
        if self.a_in.ncols() != n || self.a_in.nrows() != self.b_in.len() {
            return Err(Error::Dimension("A_in and b_in disagree".into()));
        }
        if self.lb.len() != n || self.ub.len() != n {
            return Err(Error::Dimension("bounds must have one entry per variable".into()));
        }
        for i in 0..n {
            if self.lb[i] > self.ub[i] || self.lb[i].is_nan() || self.ub[i].is_nan() {
                return Err(Error::InvalidInput(format!("bound {i} has lb > ub")));
            }
        }
        let scale = self.h.iter().fold(T::one(), |m, v| m.max(v.abs()));
        let sym_tol = T::lit(1e-9) * scale;
        for i in 0..n {
            for j in (i + 1)..n {
                if (self.h[(i, j)] - self.h[(j, i)]).abs() > sym_tol {
                    return Err(Error::InvalidInput("H is not symmetric".into()));
                }
            }
        }
        if n > 0 {
            let sym = (&self.h + self.h.transpose()) * T::lit(0.5);
            let (w, _) = linalg::symmetric_eigen(&sym);
            let min = w.iter().fold(T::infinity(), |m, v| m.min(*v));
            if min < -T::lit(1e-9) * scale {
                return Err(Error::NotConvex { min_eigenvalue: min.as_f64() });
            }
        }
        Ok(())
    }

    /// All constraints as rows `c z <= d`: inequalities first, then finite upper bounds,
    /// then finite lower bounds.
    fn stacked_rows(&self) -> (Rows<T>, Vec<RowOrigin>) {
        let n = self.dim();
        let mut rows = Rows::new(n);
        let mut origin = Vec::new();
        for i in 0..self.num_inequalities() {
            rows.push(self.a_in.row(i).transpose(), self.b_in[i]);
            origin.push(RowOrigin::Inequality(i));
        }
        for i in 0..n {
            if self.ub[i].is_finite() {
                let mut e = DVector::zeros(n);
                e[i] = T::one();
                rows.push(e, self.ub[i]);
                origin.push(RowOrigin::Upper(i));
            }
        }
        for i in 0..n {
            if self.lb[i].is_finite() {
                let mut e = DVector::zeros(n);
                e[i] = -T::one();
                rows.push(e, -self.lb[i]);
                origin.push(RowOrigin::Lower(i));
            }
        }
        (rows, origin)
    }

    /// Zero projected onto the box; phase one starts here.
    fn start_point(&self) -> DVector<T> {
        DVector::from_iterator(self.dim(), (0..self.dim()).map(|i| T::zero().max(self.lb[i]).min(self.ub[i])))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum RowOrigin {
    Inequality(usize),
    Upper(usize),
    Lower(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

/// Lagrange multipliers, all non-negative at an optimum.
#[derive(Debug, Clone, PartialEq)]
pub struct Multipliers<T: Scalar> {
    pub inequality: DVector<T>,
    pub lower: DVector<T>,
    pub upper: DVector<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution<T: Scalar> {
    pub z: DVector<T>,
    pub objective: T,
    pub status: QpStatus,
    pub primal_residual: T,
    pub stationarity_residual: T,
    pub multipliers: Multipliers<T>,
    pub iterations: usize,
}

impl<T: Scalar> QpSolution<T> {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions<T> {
    pub tol: T,
    pub max_iter: usize,
}

impl<T: Scalar> Default for SolverOptions<T> {
    fn default() -> Self {
        Self { tol: T::lit(DEFAULT_TOL), max_iter: DEFAULT_MAX_ITER }
    }
}

/// Finds a point violating no constraint by more than `tol`, if one exists.
fn phase_one<T: Scalar>(
    rows: &Rows<T>,
    z0: DVector<T>,
    opts: &SolverOptions<T>,
) -> (DVector<T>, T, ActiveSetStatus, usize) {
    let n = rows.dim();
    let viol0 = rows.max_violation(&z0);
    if viol0 <= T::zero() {
        return (z0, T::zero(), ActiveSetStatus::Converged, 0);
    }
    // variables (z, t): minimise t subject to c z - t <= d and t >= 0
    let mut aug = Rows::new(n + 1);
    for i in 0..rows.len() {
        let mut c = rows.row(i).clone().resize_vertically(n + 1, T::zero());
        c[n] = -T::one();
        aug.push(c, rows.rhs(i));
    }
    let mut t_row = DVector::zeros(n + 1);
    t_row[n] = -T::one();
    aug.push(t_row, T::zero());

    let h = DMatrix::zeros(n + 1, n + 1);
    let mut g = DVector::zeros(n + 1);
    g[n] = T::one();
    let mut start = z0.resize_vertically(n + 1, T::zero());
    start[n] = viol0;
    let res = active_set::solve(&h, &g, &aug, start, opts);
    let z = res.z.rows(0, n).clone_owned();
    // report the true violation rather than the auxiliary t
    let viol = rows.max_violation(&z).max(T::zero());
    (z, viol, res.status, res.iterations)
}

/// Solves `qp`. Errors only for malformed input, a non-convex `H`, or an unbounded problem.
pub fn solve<T: Scalar>(qp: &QuadraticProgram<T>, opts: &SolverOptions<T>) -> Result<QpSolution<T>> {
    qp.validate()?;
    let n = qp.dim();
    let (rows, origin) = qp.stacked_rows();
    let (z1, viol, status1, it1) = phase_one(&rows, qp.start_point(), opts);

    let finish = |z: DVector<T>, status: QpStatus, lambda: DVector<T>, iterations: usize| {
        let mut mult = Multipliers {
            inequality: DVector::zeros(qp.num_inequalities()),
            lower: DVector::zeros(n),
            upper: DVector::zeros(n),
        };
        for (k, o) in origin.iter().enumerate() {
            let l = lambda[k];
            match *o {
                RowOrigin::Inequality(i) => mult.inequality[i] = l,
                RowOrigin::Upper(i) => mult.upper[i] = l,
                RowOrigin::Lower(i) => mult.lower[i] = l,
            }
        }
        let mut grad = &qp.h * &z + &qp.g;
        if qp.num_inequalities() > 0 {
            grad += qp.a_in.transpose() * &mult.inequality;
        }
        grad += &mult.upper;
        grad -= &mult.lower;
        QpSolution {
            objective: qp.objective(&z),
            primal_residual: qp.primal_residual(&z),
            stationarity_residual: grad.max_abs(),
            z,
            status,
            multipliers: mult,
            iterations,
        }
    };

    if viol > opts.tol {
        let status = match status1 {
            ActiveSetStatus::MaxIter => QpStatus::MaxIter,
            _ => QpStatus::Infeasible,
        };
        return Ok(finish(z1, status, DVector::zeros(rows.len()), it1));
    }

    let res = active_set::solve(&qp.h, &qp.g, &rows, z1, opts);
    let status = match res.status {
        ActiveSetStatus::Converged => QpStatus::Optimal,
        ActiveSetStatus::MaxIter => QpStatus::MaxIter,
        ActiveSetStatus::Unbounded => return Err(Error::Unbounded),
    };
    let mut lambda = DVector::zeros(rows.len());
    for (k, &i) in res.working.iter().enumerate() {
        lambda[i] = res.lambda[k].max(T::zero());
    }
    let mut sol = finish(res.z, status, lambda, it1 + res.iterations);
    if sol.status == QpStatus::Optimal
        && (sol.primal_residual > opts.tol || sol.stationarity_residual > opts.tol)
    {
        sol.status = QpStatus::MaxIter;
    }
    Ok(sol)
}

/// True iff some point satisfies every constraint within `tol`.
pub fn check_feasible<T: Scalar>(qp: &QuadraticProgram<T>, tol: T) -> bool {
    if qp.validate().is_err() {
        return false;
    }
    let (rows, _) = qp.stacked_rows();
    let opts = SolverOptions { tol, max_iter: DEFAULT_MAX_ITER.max(4 * (rows.len() + qp.dim())) };
    let (_, viol, status, _) = phase_one(&rows, qp.start_point(), &opts);
    status == ActiveSetStatus::Converged && viol <= tol
}
