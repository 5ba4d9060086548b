//! Per-step cubic lane-change trajectory for the CAV.
//!
//! Each step the CAV re-plans from its current position and course angle. The end position
//! must lie past the rollover-free boundary and inside the window left by the near CHDVs'
//! projected end positions; the smallest admissible end position is chosen.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{SafetyParams, VehicleState};
use crate::scalar::Scalar;

/// Strict-inequality margin applied to the open end-position interval, m.
pub const DEFAULT_END_MARGIN: f64 = 0.1;

/// Cubic `y(x) = c1 x + c2 x^2 + c3 x^3` through the origin.
///
/// With the coefficient signs used here the curve ends at `y(x_e) = -y_e`, so the lateral
/// displacement toward the target lane is `-y(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CubicCurve<T> {
    pub theta_i: T,
    pub x_e: T,
    pub y_e: T,
    pub c1: T,
    pub c2: T,
    pub c3: T,
}

impl<T: Scalar> CubicCurve<T> {
    pub fn value(&self, x: T) -> T {
        x * (self.c1 + x * (self.c2 + x * self.c3))
    }

    pub fn slope(&self, x: T) -> T {
        self.c1 + x * (T::lit(2.0) * self.c2 + T::lit(3.0) * self.c3 * x)
    }

    pub fn second_derivative(&self, x: T) -> T {
        T::lit(2.0) * self.c2 + T::lit(6.0) * self.c3 * x
    }

    /// Displacement toward the target lane at longitudinal distance `x`, held at `y_e`
    /// past the end of the curve.
    pub fn offset(&self, x: T) -> T {
        if x >= self.x_e {
            self.y_e
        } else if x <= T::zero() {
            T::zero()
        } else {
            -self.value(x)
        }
    }

    /// Course angle toward the target lane at `x`.
    pub fn heading(&self, x: T) -> T {
        if x >= self.x_e {
            T::zero()
        } else {
            (-self.slope(x.max(T::zero()))).atan()
        }
    }
}

/// Fits the cubic with initial course angle `theta_i`, lateral displacement magnitude `y_e`
/// reached at `x_e` with zero slope.
pub fn fit_cubic<T: Scalar>(theta_i: T, x_e: T, y_e: T) -> Result<CubicCurve<T>> {
    if !(x_e > T::zero()) {
        return Err(invalid(format!("end position must be positive, got {x_e}")));
    }
    let two = T::lit(2.0);
    let t = theta_i.tan();
    Ok(CubicCurve {
        theta_i,
        x_e,
        y_e,
        c1: -t,
        c2: (two * x_e * t - T::lit(3.0) * y_e) / (x_e * x_e),
        c3: (two * y_e - x_e * t) / (x_e * x_e * x_e),
    })
}

/// Minimum longitudinal end position keeping lateral acceleration under `a_rollover`.
pub fn rollover_free_end<T: Scalar>(u_i: T, y_e: T, a_rollover: T) -> Result<T> {
    if !(y_e > T::zero()) || !(a_rollover > T::zero()) {
        return Err(invalid("rollover boundary needs positive y_e and a_rollover"));
    }
    if u_i < T::zero() {
        return Err(invalid(format!("speed must be non-negative, got {u_i}")));
    }
    let six_y = T::lit(6.0) * y_e;
    Ok(six_y * u_i / (six_y * a_rollover).sqrt())
}

/// Time to reach the rollover-free end at constant speed; `x_f / u_i` without the division.
pub fn rollover_duration<T: Scalar>(y_e: T, a_rollover: T) -> T {
    (T::lit(6.0) * y_e / a_rollover).sqrt()
}

/// Constant acceleration covering `x_target` in `duration` from speed `u_i`, capped at `a_max_lc`.
pub fn longitudinal_accel<T: Scalar>(u_i: T, x_target: T, duration: T, a_max_lc: T) -> Result<T> {
    if !(duration > T::zero()) {
        return Err(invalid(format!("duration must be positive, got {duration}")));
    }
    let raw = T::lit(2.0) * (x_target - u_i * duration) / (duration * duration);
    Ok(raw.min(a_max_lc))
}

/// Admissible CAV-centre end positions (absolute coordinates, open interval).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EndPositionWindow<T> {
    pub lower: T,
    pub upper: T,
}

impl<T: Scalar> EndPositionWindow<T> {
    pub fn is_empty(&self) -> bool {
        !(self.lower < self.upper)
    }

    pub fn width(&self) -> T {
        (self.upper - self.lower).max(T::zero())
    }
}

/// Projects the near CHDVs forward at constant speed and pads by `l1 + l_v`.
pub fn future_end_positions<T: Scalar>(
    fhdv: &VehicleState<T>,
    phdv: &VehicleState<T>,
    duration: T,
    params: &SafetyParams<T>,
) -> EndPositionWindow<T> {
    let pad = params.l1 + params.vehicle_length;
    EndPositionWindow {
        lower: fhdv.x + fhdv.v * duration + pad,
        upper: phdv.x + phdv.v * duration - pad,
    }
}

/// The CAV's lane-change plan for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CubicPlan<T> {
    pub curve: CubicCurve<T>,
    /// Absolute position where the curve starts.
    pub origin: [T; 2],
    /// `+1` when the target lane has larger `y`, `-1` otherwise.
    pub direction: T,
    /// Planned longitudinal acceleration, already clamped to `[d_max, a_max_lc]`.
    pub a_long: T,
    /// Speed at the start of the plan.
    pub u_i: T,
    /// Remaining manoeuvre duration used for the speed plan and the end-position window.
    pub duration: T,
    /// Rollover-free end position relative to the origin.
    pub x_rollover: T,
}

impl<T: Scalar> CubicPlan<T> {
    /// Absolute lateral position at absolute longitudinal position `x`.
    pub fn lateral_at(&self, x: T) -> T {
        self.origin[1] + self.direction * self.curve.offset(x - self.origin[0])
    }

    pub fn heading_at(&self, x: T) -> T {
        self.curve.heading(x - self.origin[0])
    }

    pub fn end_x(&self) -> T {
        self.origin[0] + self.curve.x_e
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PlanOutcome<T> {
    Plan(CubicPlan<T>),
    /// `(x_f, inf)` and the end-position window do not intersect.
    Infeasible,
}

impl<T> PlanOutcome<T> {
    pub fn plan(self) -> Option<CubicPlan<T>> {
        match self {
            PlanOutcome::Plan(p) => Some(p),
            PlanOutcome::Infeasible => None,
        }
    }

    pub fn is_feasible(&self) -> bool {
        matches!(self, PlanOutcome::Plan(_))
    }
}

/// Where the CAV currently is within its manoeuvre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaneChangeTarget<T> {
    /// Centre of the target lane.
    pub lane_y: T,
    /// Current course angle toward the target lane.
    pub heading: T,
}

impl<T: Scalar> LaneChangeTarget<T> {
    pub fn remaining(&self, cav: &VehicleState<T>) -> T {
        (self.lane_y - cav.y).abs()
    }

    pub fn direction(&self, cav: &VehicleState<T>) -> T {
        if self.lane_y >= cav.y {
            T::one()
        } else {
            -T::one()
        }
    }
}

/// Builds a plan with relative end position `x_e` (no window check).
pub fn plan_with_end<T: Scalar>(
    cav: &VehicleState<T>,
    target: &LaneChangeTarget<T>,
    x_e: T,
    params: &SafetyParams<T>,
) -> Result<CubicPlan<T>> {
    let y_e = target.remaining(cav);
    let u_i = cav.v;
    let x_rollover = rollover_free_end(u_i, y_e, params.a_rollover)?;
    let duration = rollover_duration(y_e, params.a_rollover);
    let curve = fit_cubic(target.heading, x_e, y_e)?;
    let a_long = longitudinal_accel(u_i, x_e, duration, params.a_max_lc)?.max(params.d_max);
    Ok(CubicPlan {
        curve,
        origin: [cav.x, cav.y],
        direction: target.direction(cav),
        a_long,
        u_i,
        duration,
        x_rollover,
    })
}

/// Selects the smallest admissible end position in `(x_f, inf) ∩ window` and fits the plan.
///
/// `window` is in absolute coordinates; `margin` keeps the choice strictly inside the open
/// interval. Returns [`PlanOutcome::Infeasible`] when the intersection is empty.
pub fn plan_step<T: Scalar>(
    cav: &VehicleState<T>,
    target: &LaneChangeTarget<T>,
    window: &EndPositionWindow<T>,
    params: &SafetyParams<T>,
    margin: T,
) -> Result<PlanOutcome<T>> {
    let y_e = target.remaining(cav);
    let x_f = rollover_free_end(cav.v, y_e, params.a_rollover)?;
    let lower = x_f.max(window.lower - cav.x);
    let upper = window.upper - cav.x;
    if !(lower < upper) {
        return Ok(PlanOutcome::Infeasible);
    }
    let mut x_e = lower + margin;
    if x_e >= upper {
        x_e = (lower + upper) / T::lit(2.0);
    }
    if !(x_e > T::zero()) {
        return Ok(PlanOutcome::Infeasible);
    }
    Ok(PlanOutcome::Plan(plan_with_end(cav, target, x_e, params)?))
}

/// One reference sample for the CHDV controllers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint<T> {
    pub x: T,
    pub y: T,
    pub v: T,
}

/// Rolls a vehicle forward `steps` times under constant acceleration, never reversing.
pub fn roll_constant_accel<T: Scalar>(x: T, v: T, a: T, tau: T) -> (T, T) {
    let half = T::lit(0.5);
    let v_next = v + a * tau;
    if v_next >= T::zero() {
        (x + v * tau + half * a * tau * tau, v_next)
    } else {
        // stops inside the step
        let t_stop = -v / a;
        (x + v * t_stop + half * a * t_stop * t_stop, T::zero())
    }
}

/// CAV reference over the prediction horizon, following the plan's cubic.
pub fn reference_horizon<T: Scalar>(
    plan: &CubicPlan<T>,
    cav: &VehicleState<T>,
    steps: usize,
    params: &SafetyParams<T>,
) -> Vec<ReferencePoint<T>> {
    let a = plan.a_long.max(params.d_max).min(params.a_max_lc);
    let (mut x, mut v) = (cav.x, cav.v);
    (0..steps)
        .map(|_| {
            (x, v) = roll_constant_accel(x, v, a, params.tau);
            ReferencePoint { x, y: plan.lateral_at(x), v }
        })
        .collect()
}

/// Reference for a CAV holding its speed and lane.
pub fn holding_reference<T: Scalar>(
    cav: &VehicleState<T>,
    steps: usize,
    tau: T,
) -> Vec<ReferencePoint<T>> {
    (1..=steps)
        .map(|n| ReferencePoint { x: cav.x + cav.v * tau * T::from_count(n), y: cav.y, v: cav.v })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn params() -> SafetyParams<f64> {
        SafetyParams::default()
    }

    #[test]
    fn rollover_examples() {
        assert_eq!(rollover_free_end(0.0, 3.7, 6.958).unwrap(), 0.0);
        let x = rollover_free_end(20.0, 3.7, 6.958).unwrap();
        assert_relative_eq!(x, 20.0 * (22.2f64 / 6.958).sqrt(), epsilon = 1e-12);
        assert_relative_eq!(x, 35.724, epsilon = 1e-3);
        assert_relative_eq!(rollover_free_end(40.0, 3.7, 6.958).unwrap(), 2.0 * x, epsilon = 1e-12);
        assert!(rollover_free_end(20.0, 0.0, 6.958).is_err());
        assert!(rollover_free_end(20.0, 3.7, 0.0).is_err());
    }

    #[test]
    fn cubic_examples() {
        let flat = fit_cubic(0.0, 25.0, 0.0).unwrap();
        assert_eq!((flat.c1, flat.c2, flat.c3), (0.0, 0.0, 0.0));

        let c = fit_cubic(0.0, 40.0, 3.7).unwrap();
        assert_eq!(c.c1, 0.0);
        assert_relative_eq!(c.c2, -0.0069375, epsilon = 1e-15);
        assert_relative_eq!(c.c3, 0.000115625, epsilon = 1e-15);
        assert_relative_eq!(c.value(40.0_f64).abs(), 3.7, epsilon = 1e-12);
        assert_relative_eq!(c.slope(40.0), 0.0, epsilon = 1e-12);

        let tilted = fit_cubic(0.15, 30.0, 2.0).unwrap();
        assert_relative_eq!(tilted.slope(0.0), -(0.15f64).tan(), epsilon = 1e-15);
        assert!(fit_cubic(0.0, 0.0, 3.7).is_err());
    }

    #[test]
    fn accel_examples() {
        assert_relative_eq!(longitudinal_accel(20.0, 40.0, 2.0, 3.024).unwrap(), 0.0, epsilon = 1e-12);
        let t = rollover_duration(3.7, 6.958);
        assert_relative_eq!(t, 1.786, epsilon = 1e-3);
        let x = rollover_free_end(20.0, 3.7, 6.958).unwrap();
        assert_relative_eq!(longitudinal_accel(20.0, x, t, 3.024).unwrap(), 0.0, epsilon = 1e-12);
        // raw = 2 * (x - 0) / 1 = 5.0
        assert_eq!(longitudinal_accel(0.0, 2.5, 1.0, 3.024).unwrap(), 3.024);
        assert!(longitudinal_accel(0.0, 2.5, 0.0, 3.024).is_err());
    }

    #[test]
    fn window_examples() {
        let p = params();
        let f = VehicleState::new(0.0, 3.7, 20.0);
        let ph = VehicleState::new(40.0, 3.7, 20.0);
        let w = future_end_positions(&f, &ph, 2.0, &p);
        assert_relative_eq!(w.lower, 49.0);
        assert_relative_eq!(w.upper, 71.0);

        let same = future_end_positions(&f, &f, 2.0, &p);
        assert!(same.is_empty());

        let f0 = VehicleState::new(0.0, 3.7, 0.0);
        let p0 = VehicleState::new(40.0, 3.7, 0.0);
        let w0 = future_end_positions(&f0, &p0, 2.0, &p);
        assert_relative_eq!(w0.upper - w0.lower, 40.0 - 2.0 * 9.0);
    }

    fn target() -> LaneChangeTarget<f64> {
        LaneChangeTarget { lane_y: 3.7, heading: 0.0 }
    }

    #[test]
    fn plan_step_examples() {
        let p = params();
        let cav = VehicleState::new(0.0, 0.0, 20.0);
        let x_f = rollover_free_end(20.0, 3.7, 6.958).unwrap();

        let plan = plan_step(&cav, &target(), &EndPositionWindow { lower: 30.0, upper: 80.0 }, &p, 0.1)
            .unwrap()
            .plan()
            .unwrap();
        assert_relative_eq!(plan.curve.x_e, x_f + 0.1, epsilon = 1e-12);

        let none = plan_step(&cav, &target(), &EndPositionWindow { lower: 30.0, upper: 34.0 }, &p, 0.1).unwrap();
        assert_eq!(none, PlanOutcome::Infeasible);

        // x_f = 20 -> u = 20 / sqrt(22.2 / 6.958)
        let slow = VehicleState::new(0.0, 0.0, 20.0 / (22.2f64 / 6.958).sqrt());
        let plan = plan_step(&slow, &target(), &EndPositionWindow { lower: 49.0, upper: 71.0 }, &p, 0.1)
            .unwrap()
            .plan()
            .unwrap();
        assert_relative_eq!(plan.x_rollover, 20.0, epsilon = 1e-9);
        assert_relative_eq!(plan.curve.x_e, 49.1, epsilon = 1e-12);
        assert_eq!(plan.a_long, 3.024);
    }

    #[test]
    fn narrow_window_uses_midpoint() {
        let p = params();
        let cav = VehicleState::new(0.0, 0.0, 0.0);
        let plan = plan_step(&cav, &target(), &EndPositionWindow { lower: 10.0, upper: 10.05 }, &p, 0.1)
            .unwrap()
            .plan()
            .unwrap();
        assert_relative_eq!(plan.curve.x_e, 10.025, epsilon = 1e-12);
    }

    #[test]
    fn reference_examples() {
        let p = params();
        let cav = VehicleState::new(0.0, 0.0, 20.0);
        let mut plan = plan_with_end(&cav, &target(), 60.0, &p).unwrap();
        plan.a_long = 0.0;
        let r = reference_horizon(&plan, &cav, 5, &p);
        for (n, pt) in r.iter().enumerate() {
            assert_relative_eq!(pt.x, 4.0 * (n + 1) as f64, epsilon = 1e-12);
            assert_eq!(pt.y, plan.lateral_at(pt.x));
        }
        plan.a_long = 2.0;
        let r = reference_horizon(&plan, &cav, 5, &p);
        assert_relative_eq!(r[0].x, 4.04, epsilon = 1e-12);
        assert_relative_eq!(r[0].v, 20.4, epsilon = 1e-12);
    }

    #[test]
    fn works_in_f32() {
        let c = fit_cubic(0.1f32, 40.0, 3.7).unwrap();
        assert!((c.value(40.0).abs() - 3.7).abs() < 1e-5);
        assert!(c.slope(40.0).abs() < 1e-6);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn boundary_conditions(theta in -0.2..0.2f64, x_e in 10.0..100.0f64, y_e in 0.01..3.7f64) {
                let c = fit_cubic(theta, x_e, y_e).unwrap();
                prop_assert!(c.value(0.0).abs() < 1e-9);
                prop_assert!((c.slope(0.0) + theta.tan()).abs() < 1e-9);
                prop_assert!((c.value(x_e).abs() - y_e).abs() < 1e-9);
                prop_assert!(c.slope(x_e).abs() < 1e-9);
            }

            #[test]
            fn wider_window_stays_feasible(v in 0.0..40.0f64, lo in -20.0..80.0f64, w in 0.0..60.0f64, grow_lo in 0.0..20.0f64, grow_hi in 0.0..20.0f64) {
                let p = params();
                let cav = VehicleState::new(0.0, 0.0, v);
                let small = EndPositionWindow { lower: lo, upper: lo + w };
                let big = EndPositionWindow { lower: lo - grow_lo, upper: lo + w + grow_hi };
                let a = plan_step(&cav, &target(), &small, &p, 0.1).unwrap();
                let b = plan_step(&cav, &target(), &big, &p, 0.1).unwrap();
                if a.is_feasible() { prop_assert!(b.is_feasible()); }
            }
        }
    }
}
