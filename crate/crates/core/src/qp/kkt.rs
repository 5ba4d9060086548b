//! Stand-alone KKT certificate check, independent of the solver's internal working set.

use nalgebra::DVector;

use super::{Multipliers, QuadraticProgram};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktReport<T> {
    /// Largest constraint violation.
    pub primal: T,
    /// Most negative multiplier, reported as a positive number (zero if none negative).
    pub dual: T,
    /// `|| H z + g + A' lambda + mu_u - mu_l ||_inf`.
    pub stationarity: T,
    /// Largest `|multiplier * slack|`.
    pub complementarity: T,
    pub ok: bool,
}

pub fn verify_kkt<T: Scalar>(
    qp: &QuadraticProgram<T>,
    z: &DVector<T>,
    mult: &Multipliers<T>,
    tol: T,
) -> KktReport<T> {
    let n = qp.dim();
    let m = qp.num_inequalities();
    let zero = T::zero();

    let mut primal = zero;
    let mut dual = zero;
    let mut comp = zero;
    let mut station: Vec<T> = (0..n)
        .map(|i| (0..n).fold(qp.g[i], |acc, j| acc + qp.h[(i, j)] * z[j]))
        .collect();

    for r in 0..m {
        let lhs = (0..n).fold(zero, |acc, j| acc + qp.a_in[(r, j)] * z[j]);
        let slack = qp.b_in[r] - lhs;
        let l = mult.inequality[r];
        primal = primal.max(-slack);
        dual = dual.max(-l);
        comp = comp.max((l * slack).abs());
        for (j, s) in station.iter_mut().enumerate() {
            *s = *s + qp.a_in[(r, j)] * l;
        }
    }
    for i in 0..n {
        let (lu, ll) = (mult.upper[i], mult.lower[i]);
        dual = dual.max(-lu).max(-ll);
        if qp.ub[i].is_finite() {
            let slack = qp.ub[i] - z[i];
            primal = primal.max(-slack);
            comp = comp.max((lu * slack).abs());
        } else {
            comp = comp.max(lu.abs());
        }
        if qp.lb[i].is_finite() {
            let slack = z[i] - qp.lb[i];
            primal = primal.max(-slack);
            comp = comp.max((ll * slack).abs());
        } else {
            comp = comp.max(ll.abs());
        }
        station[i] = station[i] + lu - ll;
    }
    let stationarity = station.iter().fold(zero, |acc, v| acc.max(v.abs()));
    KktReport {
        primal,
        dual,
        stationarity,
        complementarity: comp,
        ok: primal <= tol && dual <= tol && stationarity <= tol && comp <= tol,
    }
}
