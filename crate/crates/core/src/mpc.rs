//! Per-CHDV MPC problems and the near-before-far step sequencing.
//!
//! Decision vector for every CHDV is `z = [u_0 .. u_{nc-1}, delta_0 .. delta_{nc-1}]`:
//! accelerations followed by velocity slacks. Slacks are pinned to zero for Active drivers.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{CoopAssignment, CooperationLevel, Fleet, SafetyParams, VehicleRole, VehicleState};
use crate::planner::ReferencePoint;
use crate::prediction::{predict, PredictionMatrices};
use crate::qp::{self, QuadraticProgram, SolverOptions};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpcConfig<T> {
    pub np: usize,
    pub nc: usize,
    /// State-tracking weight, applied to position and speed alike.
    pub q: T,
    /// Input weight.
    pub r: T,
    /// Velocity-slack weight.
    pub p: T,
    /// Largest velocity slack an Inactive driver may take, m/s.
    pub delta_max: T,
    /// Spacing beyond `l1` / `l2` that the tracking reference asks for, m.
    pub gap_margin: T,
    /// Extra clearance on the buffer-disc rows so tangency is excluded, m.
    pub disc_margin: T,
    pub tol: T,
    pub max_iter: usize,
}

impl<T: Scalar> Default for MpcConfig<T> {
    fn default() -> Self {
        Self {
            np: 5,
            nc: 4,
            q: T::lit(10.0),
            r: T::lit(10.0),
            p: T::lit(15.0),
            delta_max: T::lit(2.0),
            gap_margin: T::lit(2.0),
            disc_margin: T::lit(0.05),
            tol: T::lit(qp::DEFAULT_TOL),
            max_iter: qp::DEFAULT_MAX_ITER,
        }
    }
}

impl<T: Scalar> MpcConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.nc < 2 || self.np != self.nc + 1 {
            return Err(invalid("need nc >= 2 and np = nc + 1"));
        }
        let zero = T::zero();
        if !(self.q >= zero && self.r > zero && self.p > zero) {
            return Err(invalid("weights must be positive (q may be zero)"));
        }
        if self.delta_max < zero || self.gap_margin < zero || self.disc_margin < zero {
            return Err(invalid("delta_max, gap_margin and disc_margin must be non-negative"));
        }
        Ok(())
    }

    fn solver(&self) -> SolverOptions<T> {
        SolverOptions { tol: self.tol, max_iter: self.max_iter }
    }

    /// Slack upper bound for a driver with cooperation `coop`.
    pub fn slack_bound(&self, coop: CooperationLevel) -> T {
        match coop {
            CooperationLevel::Active => T::zero(),
            CooperationLevel::Inactive => self.delta_max,
        }
    }
}

/// Optimised inputs of one CHDV over the control horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlDecision<T: Scalar> {
    pub u: Vec<T>,
    pub delta: Vec<T>,
    /// Stacked `[x(1), v(1), ..., x(np), v(np)]`.
    pub predicted: DVector<T>,
    pub objective: T,
}

impl<T: Scalar> ControlDecision<T> {
    pub fn applied(&self) -> T {
        self.u[0]
    }

    /// Prediction for a constant input held over the horizon.
    pub fn constant(
        own: &VehicleState<T>,
        accel: T,
        mats: &PredictionMatrices<T>,
    ) -> Result<Self> {
        let u = vec![accel; mats.nc];
        let predicted = predict(mats, [own.x, own.v], &u)?;
        Ok(Self { u, delta: vec![T::zero(); mats.nc], predicted, objective: T::nan() })
    }
}

/// Second-difference matrix `C` with `u' C u = sum (u_{i+1} - u_i)^2`.
pub fn jerk_matrix<T: Scalar>(nc: usize) -> Result<DMatrix<T>> {
    if nc < 2 {
        return Err(invalid(format!("jerk matrix needs nc >= 2, got {nc}")));
    }
    let mut c = DMatrix::<T>::zeros(nc, nc);
    for i in 0..nc - 1 {
        c[(i, i)] += T::one();
        c[(i + 1, i + 1)] += T::one();
        c[(i, i + 1)] -= T::one();
        c[(i + 1, i)] -= T::one();
    }
    Ok(c)
}

/// Which side of the insertion gap a CHDV is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Following,
    Preceding,
}

impl Side {
    pub fn of(role: VehicleRole) -> Side {
        if role.is_following() {
            Side::Following
        } else {
            Side::Preceding
        }
    }

    /// `-1` behind the tracked vehicle, `+1` ahead of it.
    fn sign<T: Scalar>(self) -> T {
        match self {
            Side::Following => -T::one(),
            Side::Preceding => T::one(),
        }
    }
}

/// Inequality rows accumulated as `row . z <= rhs`.
struct RowBuilder<T: Scalar> {
    n: usize,
    rows: Vec<(Vec<T>, T)>,
}

impl<T: Scalar> RowBuilder<T> {
    fn new(n: usize) -> Self {
        Self { n, rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<T>, rhs: T) {
        debug_assert_eq!(row.len(), self.n);
        self.rows.push((row, rhs));
    }

    fn finish(self) -> (DMatrix<T>, DVector<T>) {
        let m = self.rows.len();
        let mut a = DMatrix::zeros(m, self.n);
        let mut b = DVector::zeros(m);
        for (i, (row, rhs)) in self.rows.into_iter().enumerate() {
            for (j, v) in row.into_iter().enumerate() {
                a[(i, j)] = v;
            }
            b[i] = rhs;
        }
        (a, b)
    }
}

/// The vehicle a CHDV keeps its distance from, sampled over the horizon.
struct Tracked<T> {
    x: Vec<T>,
    v: Vec<T>,
}

/// Shared construction for near and far problems: tracking cost plus spacing and velocity rows.
fn spacing_problem<T: Scalar>(
    own: &VehicleState<T>,
    side: Side,
    coop: CooperationLevel,
    tracked: &Tracked<T>,
    spacing: T,
    cfg: &MpcConfig<T>,
    params: &SafetyParams<T>,
    mats: &PredictionMatrices<T>,
) -> Result<(QuadraticProgram<T>, RowBuilder<T>)> {
    cfg.validate()?;
    let (np, nc) = (cfg.np, cfg.nc);
    if mats.np != np || mats.nc != nc {
        return Err(invalid("prediction matrices do not match the controller horizons"));
    }
    if tracked.x.len() != np || tracked.v.len() != np {
        return Err(invalid(format!("reference must have {np} samples")));
    }
    let n = 2 * nc;
    let two = T::lit(2.0);
    let sign = side.sign::<T>();
    let free = mats.free_response([own.x, own.v]);

    // tracking target, shifted by the desired spacing
    let offset_dist = spacing + cfg.gap_margin;
    let mut target = DVector::<T>::zeros(2 * np);
    for k in 0..np {
        target[2 * k] = tracked.x[k] + sign * offset_dist;
        target[2 * k + 1] = tracked.v[k];
    }
    let resid = &free - &target;
    let mu = &mats.m_u;
    let mut h = DMatrix::<T>::zeros(n, n);
    let huu = (mu.transpose() * mu) * (two * cfg.q)
        + DMatrix::<T>::identity(nc, nc) * (two * cfg.r)
        + jerk_matrix::<T>(nc)? * two;
    h.view_mut((0, 0), (nc, nc)).copy_from(&huu);
    for j in 0..nc {
        h[(nc + j, nc + j)] = two * cfg.p;
    }
    let gu = mu.transpose() * &resid * (two * cfg.q);
    let mut g = DVector::<T>::zeros(n);
    g.rows_mut(0, nc).copy_from(&gu);
    let offset = cfg.q * resid.iter().fold(T::zero(), |acc, e| acc + *e * *e);

    let mut lb = DVector::<T>::zeros(n);
    let mut ub = DVector::<T>::zeros(n);
    let slack_max = cfg.slack_bound(coop);
    for j in 0..nc {
        lb[j] = params.d_max;
        ub[j] = params.a_max;
        lb[nc + j] = T::zero();
        ub[nc + j] = slack_max;
    }

    let mut rows = RowBuilder::new(n);
    for step in 1..=np {
        let pr = PredictionMatrices::<T>::position_row(step);
        let vr = PredictionMatrices::<T>::speed_row(step);
        // Following: x - x_t <= -spacing.  Preceding: x - x_t >= spacing.
        let mut row = vec![T::zero(); n];
        for j in 0..nc {
            row[j] = -sign * mu[(pr, j)];
        }
        rows.push(row, -sign * (tracked.x[step - 1] - free[pr]) - spacing);

        // Following: v - v_t <= delta.  Preceding: v - v_t >= -delta.  Hard at the last step.
        let mut row = vec![T::zero(); n];
        for j in 0..nc {
            row[j] = -sign * mu[(vr, j)];
        }
        if step <= nc {
            row[nc + step - 1] = -T::one();
        }
        rows.push(row, -sign * (tracked.v[step - 1] - free[vr]));
    }

    let qp = QuadraticProgram {
        h,
        g,
        offset,
        a_in: DMatrix::zeros(0, n),
        b_in: DVector::zeros(0),
        lb,
        ub,
    };
    Ok((qp, rows))
}

/// Lateral separation between a CHDV and the CAV reference at each horizon step.
pub fn lateral_gaps<T: Scalar>(own: &VehicleState<T>, reference: &[ReferencePoint<T>]) -> Vec<T> {
    reference.iter().map(|r| (own.y - r.y).abs()).collect()
}

/// QP for a near CHDV tracking the CAV reference.
///
/// `far_neighbor` is the CHDV on the far side of `own` (behind a following vehicle, ahead of
/// a preceding one); its current gap bounds the acceleration so `own` cannot run into it.
#[allow(clippy::too_many_arguments)]
pub fn build_near_qp<T: Scalar>(
    own: &VehicleState<T>,
    side: Side,
    coop: CooperationLevel,
    reference: &[ReferencePoint<T>],
    far_neighbor: &VehicleState<T>,
    cfg: &MpcConfig<T>,
    params: &SafetyParams<T>,
    mats: &PredictionMatrices<T>,
    lateral_gaps: &[T],
) -> Result<QuadraticProgram<T>> {
    if lateral_gaps.len() != cfg.np {
        return Err(invalid(format!("need {} lateral gaps", cfg.np)));
    }
    let tracked = Tracked {
        x: reference.iter().map(|r| r.x).collect(),
        v: reference.iter().map(|r| r.v).collect(),
    };
    let (mut qp, mut rows) = spacing_problem(own, side, coop, &tracked, params.l1, cfg, params, mats)?;
    let nc = cfg.nc;
    let n = 2 * nc;
    let sign = side.sign::<T>();
    let free = mats.free_response([own.x, own.v]);
    let diameter = params.buffer_radius + params.buffer_radius;

    // buffer discs: only where the lateral offset lets them touch
    for (k, dy) in lateral_gaps.iter().enumerate() {
        if *dy >= diameter {
            continue;
        }
        let reach = (diameter * diameter - *dy * *dy).sqrt() + cfg.disc_margin;
        let pr = PredictionMatrices::<T>::position_row(k + 1);
        let mut row = vec![T::zero(); n];
        for j in 0..nc {
            row[j] = -sign * mats.m_u[(pr, j)];
        }
        rows.push(row, -sign * (tracked.x[k] - free[pr]) - reach);
    }

    // secondary collision with the far neighbour
    let two = T::lit(2.0);
    let tau2 = params.tau * params.tau;
    let gap = (own.x - far_neighbor.x).abs();
    for j in 0..nc {
        let mut row = vec![T::zero(); n];
        match side {
            Side::Following => {
                row[j] = -T::one();
                rows.push(row, -(two * (params.l2 - gap) / tau2 + params.d_max));
            }
            Side::Preceding => {
                row[j] = T::one();
                rows.push(row, params.a_max + two * (gap - params.l2) / tau2);
            }
        }
    }
    let (a, b) = rows.finish();
    qp.a_in = a;
    qp.b_in = b;
    Ok(qp)
}

/// QP for a far CHDV tracking the predicted states of its near neighbour.
pub fn build_far_qp<T: Scalar>(
    own: &VehicleState<T>,
    side: Side,
    coop: CooperationLevel,
    near_predicted: &DVector<T>,
    cfg: &MpcConfig<T>,
    params: &SafetyParams<T>,
    mats: &PredictionMatrices<T>,
) -> Result<QuadraticProgram<T>> {
    if near_predicted.len() != 2 * cfg.np {
        return Err(invalid(format!("near prediction must have {} entries", 2 * cfg.np)));
    }
    let tracked = Tracked {
        x: (0..cfg.np).map(|k| near_predicted[2 * k]).collect(),
        v: (0..cfg.np).map(|k| near_predicted[2 * k + 1]).collect(),
    };
    let (mut qp, rows) = spacing_problem(own, side, coop, &tracked, params.l2, cfg, params, mats)?;
    let (a, b) = rows.finish();
    qp.a_in = a;
    qp.b_in = b;
    Ok(qp)
}

/// Solves one CHDV problem; `None` when the QP is infeasible or does not converge.
pub fn solve_decision<T: Scalar>(
    qp: &QuadraticProgram<T>,
    own: &VehicleState<T>,
    cfg: &MpcConfig<T>,
    mats: &PredictionMatrices<T>,
) -> Result<Option<ControlDecision<T>>> {
    let sol = qp::solve(qp, &cfg.solver())?;
    if !sol.is_optimal() {
        return Ok(None);
    }
    let nc = cfg.nc;
    let u: Vec<T> = sol.z.rows(0, nc).iter().copied().collect();
    let delta: Vec<T> = (0..nc).map(|j| sol.z[nc + j].max(qp.lb[nc + j]).min(qp.ub[nc + j])).collect();
    let predicted = predict(mats, [own.x, own.v], &u)?;
    Ok(Some(ControlDecision { u, delta, predicted, objective: sol.objective }))
}

/// Per-CHDV decisions of one control step, in [`VehicleRole::CHDVS`] order.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlStep<T: Scalar> {
    Feasible([ControlDecision<T>; 4]),
    /// At least one subproblem had no solution.
    Infeasible {
        partial: [Option<ControlDecision<T>>; 4],
        failed: Vec<VehicleRole>,
    },
}

impl<T: Scalar> ControlStep<T> {
    pub fn is_feasible(&self) -> bool {
        matches!(self, ControlStep::Feasible(_))
    }

    pub fn decision(&self, role: VehicleRole) -> Option<&ControlDecision<T>> {
        let k = chdv_slot(role)?;
        match self {
            ControlStep::Feasible(d) => Some(&d[k]),
            ControlStep::Infeasible { partial, .. } => partial[k].as_ref(),
        }
    }
}

fn chdv_slot(role: VehicleRole) -> Option<usize> {
    VehicleRole::CHDVS.iter().position(|r| *r == role)
}

/// Runs the four CHDV controllers for one step: both near problems against the CAV
/// reference, then each far problem against its near neighbour's prediction.
///
/// When a near problem fails, its far neighbour tracks the prediction produced by
/// `fallback(role)` held over the horizon.
pub fn step_controller<T: Scalar>(
    fleet: &Fleet<T>,
    reference: &[ReferencePoint<T>],
    coop: &CoopAssignment,
    cfg: &MpcConfig<T>,
    params: &SafetyParams<T>,
    mats: &PredictionMatrices<T>,
    fallback: impl Fn(VehicleRole) -> T,
) -> Result<ControlStep<T>> {
    let mut partial: [Option<ControlDecision<T>>; 4] = [None, None, None, None];
    let mut failed = Vec::new();

    let pairs = [
        (VehicleRole::FhdvNear, VehicleRole::FhdvFar),
        (VehicleRole::PhdvNear, VehicleRole::PhdvFar),
    ];
    let mut near_predictions = Vec::with_capacity(2);
    for (near, far) in pairs {
        let own = &fleet[near];
        let gaps = lateral_gaps(own, reference);
        let qp = build_near_qp(own, Side::of(near), coop.get(near), reference, &fleet[far], cfg, params, mats, &gaps)?;
        let decision = solve_decision(&qp, own, cfg, mats)?;
        let predicted = match &decision {
            Some(d) => d.predicted.clone(),
            None => {
                failed.push(near);
                ControlDecision::constant(own, fallback(near), mats)?.predicted
            }
        };
        partial[chdv_slot(near).unwrap()] = decision;
        near_predictions.push(predicted);
    }
    for ((_, far), near_pred) in pairs.iter().zip(&near_predictions) {
        let own = &fleet[*far];
        let qp = build_far_qp(own, Side::of(*far), coop.get(*far), near_pred, cfg, params, mats)?;
        let decision = solve_decision(&qp, own, cfg, mats)?;
        if decision.is_none() {
            failed.push(*far);
        }
        partial[chdv_slot(*far).unwrap()] = decision;
    }

    if failed.is_empty() {
        let [a, b, c, d] = partial;
        Ok(ControlStep::Feasible([a.unwrap(), b.unwrap(), c.unwrap(), d.unwrap()]))
    } else {
        failed.sort();
        Ok(ControlStep::Infeasible { partial, failed })
    }
}
