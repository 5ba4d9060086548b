//! Closed-loop lane-change execution with waiting-adjusting.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{
    draw_speeds, place_cohort, scenario_from_speeds, scenario_rng, CoopAssignment, CooperationLevel, Fleet,
    SafetyParams, Scenario, ScenarioLayout, VehicleRole, VehicleState,
};
use crate::mpc::{step_controller, ControlStep, MpcConfig};
use crate::planner::{
    future_end_positions, holding_reference, plan_step, plan_with_end, reference_horizon, roll_constant_accel,
    rollover_duration, rollover_free_end, CubicPlan, EndPositionWindow, LaneChangeTarget, PlanOutcome,
    ReferencePoint, DEFAULT_END_MARGIN,
};
use crate::prediction::{build_dynamics, build_prediction, PredictionMatrices};
use crate::scalar::Scalar;

/// Efficiency threshold for a two-stage manoeuvre, s.
pub const EFFICIENT_BI_LANE_TIME: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunConfig<T> {
    pub params: SafetyParams<T>,
    pub mpc: MpcConfig<T>,
    pub layout: ScenarioLayout<T>,
    /// Longest the CAV waits for a feasible step, s.
    pub wait_budget: T,
    /// Margin keeping the chosen end position inside the open window, m.
    pub end_margin: T,
    /// Lateral error at which the lane change counts as complete, m.
    pub completion_tol: T,
    /// Hard cap on executing steps.
    pub max_lc_steps: usize,
}

impl<T: Scalar> Default for RunConfig<T> {
    fn default() -> Self {
        Self {
            params: SafetyParams::default(),
            mpc: MpcConfig::default(),
            layout: ScenarioLayout::default(),
            wait_budget: T::lit(2.0),
            end_margin: T::lit(DEFAULT_END_MARGIN),
            completion_tol: T::lit(0.05),
            max_lc_steps: 500,
        }
    }
}

impl<T: Scalar> RunConfig<T> {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.mpc.validate()?;
        if !(self.wait_budget >= T::zero()) || !self.wait_budget.is_finite() {
            return Err(invalid(format!("wait budget must be non-negative, got {}", self.wait_budget)));
        }
        if !(self.end_margin > T::zero()) || !(self.completion_tol > T::zero()) {
            return Err(invalid("end margin and completion tolerance must be positive"));
        }
        Ok(())
    }

    /// Wait budget in whole steps.
    pub fn wait_steps(&self) -> usize {
        (self.wait_budget / self.params.tau).round().to_usize().unwrap_or(0)
    }

    fn prediction(&self) -> Result<PredictionMatrices<T>> {
        build_prediction(&build_dynamics(self.params.tau)?, self.mpc.np, self.mpc.nc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunResult<T> {
    pub initially_feasible: bool,
    pub started_after_wait: bool,
    pub wait_steps: usize,
    pub lc_steps: usize,
    pub total_time: T,
    pub collision: bool,
    pub min_clearance: T,
    pub min_longitudinal_gap_near: T,
    pub min_longitudinal_gap_far: T,
    /// Largest shortfall below `l1` / `l2` after the slack allowance `delta * tau`, over
    /// executing steps only; `None` if the lane change never started.
    pub max_gap_deficit: Option<T>,
    /// Executing steps in which some CHDV controller had no solution.
    pub fallback_steps: usize,
    pub aborted: bool,
    /// CAV state when the run ended.
    pub final_cav: VehicleState<T>,
}

impl<T: Scalar> RunResult<T> {
    pub fn started(&self) -> bool {
        !self.aborted && (self.started_after_wait || self.initially_feasible)
    }

    pub fn completed(&self) -> bool {
        self.started() && !self.collision
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiLaneResult<T> {
    pub first: RunResult<T>,
    /// `None` when stage one did not complete.
    pub second: Option<RunResult<T>>,
    pub total_time: T,
    pub efficient: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Waiting,
    Changing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleRecord<T> {
    pub role: VehicleRole,
    pub x: T,
    pub y: T,
    pub v: T,
    pub a: T,
}

/// One line of the per-step trace; states are after the step is applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord<T> {
    pub stage: usize,
    pub step: usize,
    pub time: T,
    pub phase: Phase,
    pub plan_feasible: bool,
    pub control_feasible: bool,
    pub vehicles: Vec<VehicleRecord<T>>,
    /// Applied CHDV inputs in FHDV_near, PHDV_near, FHDV_far, PHDV_far order.
    pub u: [T; 4],
    pub delta: [T; 4],
    pub min_clearance: T,
}

/// True iff the planner finds an admissible end position for the current states.
pub fn check_initial_feasibility<T: Scalar>(
    fleet: &Fleet<T>,
    target_lane_y: T,
    params: &SafetyParams<T>,
    t_lc: T,
    end_margin: T,
) -> Result<bool> {
    let cav = &fleet[VehicleRole::Tcav];
    let target = LaneChangeTarget { lane_y: target_lane_y, heading: T::zero() };
    let window = future_end_positions(&fleet[VehicleRole::FhdvNear], &fleet[VehicleRole::PhdvNear], t_lc, params);
    Ok(plan_step(cav, &target, &window, params, end_margin)?.is_feasible())
}

/// Input applied to a CHDV whose controller found no solution.
///
/// Any vehicle about to break its spacing within the horizon brakes (or accelerates, ahead of
/// the gap) at the limit. Otherwise an Active driver moves toward the speed of the vehicle it
/// spaces against, and an Inactive driver keeps its speed.
pub fn fallback_accel<T: Scalar>(
    role: VehicleRole,
    fleet: &Fleet<T>,
    coop: &CoopAssignment,
    params: &SafetyParams<T>,
    horizon: T,
) -> T {
    let (anchor, spacing) = match role {
        VehicleRole::FhdvNear | VehicleRole::PhdvNear => (VehicleRole::Tcav, params.l1),
        VehicleRole::FhdvFar => (VehicleRole::FhdvNear, params.l2),
        VehicleRole::PhdvFar => (VehicleRole::PhdvNear, params.l2),
        VehicleRole::Tcav => return T::zero(),
    };
    let own = &fleet[role];
    let other = &fleet[anchor];
    let following = role.is_following();
    let (gap, closing) = if following {
        (other.x - own.x, own.v - other.v)
    } else {
        (own.x - other.x, other.v - own.v)
    };
    if gap - closing.max(T::zero()) * horizon < spacing {
        return if following { params.d_max } else { params.a_max };
    }
    match coop.get(role) {
        CooperationLevel::Inactive => T::zero(),
        CooperationLevel::Active => {
            let u = -closing / params.tau;
            if following {
                u.max(params.d_max).min(T::zero())
            } else {
                (-u).max(T::zero()).min(params.a_max)
            }
        }
    }
}

/// Moves every vehicle one step: CHDVs under `chdv_u` (role order of [`VehicleRole::CHDVS`]),
/// the CAV under `plan` or, without a plan, at constant speed in its lane.
pub fn advance<T: Scalar>(
    fleet: &Fleet<T>,
    chdv_u: [T; 4],
    plan: Option<&CubicPlan<T>>,
    params: &SafetyParams<T>,
) -> Fleet<T> {
    let mut next = *fleet;
    for (role, u) in VehicleRole::CHDVS.iter().zip(chdv_u) {
        let s = &mut next[*role];
        let (x, v) = roll_constant_accel(s.x, s.v, u, params.tau);
        *s = VehicleState { x, y: s.y, v, a: u };
    }
    let cav = &mut next[VehicleRole::Tcav];
    match plan {
        Some(p) => {
            let a = p.a_long.max(params.d_max).min(params.a_max_lc);
            let (x, v) = roll_constant_accel(cav.x, cav.v, a, params.tau);
            *cav = VehicleState { x, y: p.lateral_at(x), v, a };
        }
        None => {
            let (x, v) = roll_constant_accel(cav.x, cav.v, T::zero(), params.tau);
            *cav = VehicleState { x, y: cav.y, v, a: T::zero() };
        }
    }
    next
}

struct Monitor<T> {
    min_clearance: T,
    gap_near: T,
    gap_far: T,
    deficit: Option<T>,
}

impl<T: Scalar> Monitor<T> {
    fn new() -> Self {
        Self { min_clearance: T::infinity(), gap_near: T::infinity(), gap_far: T::infinity(), deficit: None }
    }

    /// Records the fleet and returns its smallest disc clearance.
    fn observe(&mut self, fleet: &Fleet<T>, delta: &[T; 4], params: &SafetyParams<T>, executing: bool) -> T {
        use VehicleRole::*;
        let c = fleet.min_clearance(params.buffer_radius);
        self.min_clearance = self.min_clearance.min(c);
        let slot = |r: VehicleRole| VehicleRole::CHDVS.iter().position(|x| *x == r).unwrap();
        let pairs = [
            (FhdvNear, fleet[Tcav].x - fleet[FhdvNear].x, params.l1, true),
            (PhdvNear, fleet[PhdvNear].x - fleet[Tcav].x, params.l1, true),
            (FhdvFar, fleet[FhdvNear].x - fleet[FhdvFar].x, params.l2, false),
            (PhdvFar, fleet[PhdvFar].x - fleet[PhdvNear].x, params.l2, false),
        ];
        for (role, gap, spacing, near) in pairs {
            if near {
                self.gap_near = self.gap_near.min(gap);
            } else {
                self.gap_far = self.gap_far.min(gap);
            }
            if executing {
                let d = spacing - gap - delta[slot(role)] * params.tau;
                self.deficit = Some(self.deficit.map_or(d, |m| m.max(d)));
            }
        }
        c
    }
}

fn record<T: Scalar>(
    stage: usize,
    step: usize,
    tau: T,
    phase: Phase,
    plan_feasible: bool,
    control_feasible: bool,
    fleet: &Fleet<T>,
    u: [T; 4],
    delta: [T; 4],
    min_clearance: T,
) -> StepRecord<T> {
    StepRecord {
        stage,
        step,
        time: tau * T::from_count(step),
        phase,
        plan_feasible,
        control_feasible,
        vehicles: VehicleRole::ALL
            .iter()
            .map(|r| {
                let s = &fleet[*r];
                VehicleRecord { role: *r, x: s.x, y: s.y, v: s.v, a: s.a }
            })
            .collect(),
        u,
        delta,
        min_clearance,
    }
}

/// Applied input and slack for each CHDV, filling failed controllers from [`fallback_accel`].
fn applied_inputs<T: Scalar>(
    step: &ControlStep<T>,
    fleet: &Fleet<T>,
    coop: &CoopAssignment,
    params: &SafetyParams<T>,
    horizon: T,
) -> ([T; 4], [T; 4]) {
    let mut u = [T::zero(); 4];
    let mut delta = [T::zero(); 4];
    for (k, role) in VehicleRole::CHDVS.iter().enumerate() {
        match step.decision(*role) {
            Some(d) => {
                u[k] = d.applied();
                delta[k] = d.delta[0];
            }
            None => u[k] = fallback_accel(*role, fleet, coop, params, horizon),
        }
    }
    (u, delta)
}

/// Runs one lane change of `scenario` to completion, abort or collision.
pub fn run_lane_change<T: Scalar>(scenario: &Scenario<T>, cfg: &RunConfig<T>) -> Result<RunResult<T>> {
    run_stage(scenario, cfg, 0, None)
}

/// As [`run_lane_change`], appending one [`StepRecord`] per step to `trace`.
pub fn run_lane_change_traced<T: Scalar>(
    scenario: &Scenario<T>,
    cfg: &RunConfig<T>,
    trace: &mut Vec<StepRecord<T>>,
) -> Result<RunResult<T>> {
    run_stage(scenario, cfg, 0, Some(trace))
}

fn run_stage<T: Scalar>(
    scenario: &Scenario<T>,
    cfg: &RunConfig<T>,
    stage: usize,
    mut trace: Option<&mut Vec<StepRecord<T>>>,
) -> Result<RunResult<T>> {
    cfg.validate()?;
    let params = &cfg.params;
    let mats = cfg.prediction()?;
    let np = cfg.mpc.np;
    let horizon = params.tau * T::from_count(np);
    let coop = &scenario.coop;
    let budget = cfg.wait_steps();

    let mut fleet = scenario.fleet;
    let mut heading = T::zero();
    let mut phase = Phase::Waiting;
    let mut wait_steps = 0usize;
    let mut lc_steps = 0usize;
    let mut initially_feasible = false;
    let mut fallback_steps = 0usize;
    let mut collision = false;
    let mut aborted = false;
    let mut monitor = Monitor::new();
    monitor.observe(&fleet, &[T::zero(); 4], params, false);

    for step in 0usize.. {
        let cav = fleet[VehicleRole::Tcav];
        let target = LaneChangeTarget { lane_y: scenario.target_lane_y, heading };
        let remaining = target.remaining(&cav);
        if phase == Phase::Changing && remaining <= cfg.completion_tol {
            break;
        }
        if lc_steps >= cfg.max_lc_steps {
            aborted = true;
            break;
        }
        let t_lc = rollover_duration(remaining, params.a_rollover);
        let window: EndPositionWindow<T> =
            future_end_positions(&fleet[VehicleRole::FhdvNear], &fleet[VehicleRole::PhdvNear], t_lc, params);
        let outcome = plan_step(&cav, &target, &window, params, cfg.end_margin)?;
        let plan_feasible = outcome.is_feasible();

        let controller = |reference: &[ReferencePoint<T>]| {
            step_controller(&fleet, reference, coop, &cfg.mpc, params, &mats, |r| {
                fallback_accel(r, &fleet, coop, params, horizon)
            })
        };

        let holding = holding_reference(&cav, np, params.tau);
        let (plan, ctrl, control_feasible) = match (phase, outcome) {
            (Phase::Changing, outcome) => {
                let plan = match outcome {
                    PlanOutcome::Plan(p) => p,
                    PlanOutcome::Infeasible => {
                        let x_f = rollover_free_end(cav.v, remaining, params.a_rollover)?;
                        plan_with_end(&cav, &target, x_f + cfg.end_margin, params)?
                    }
                };
                let ctrl = controller(&reference_horizon(&plan, &cav, np, params))?;
                let ok = ctrl.is_feasible();
                (Some(plan), ctrl, ok)
            }
            (Phase::Waiting, PlanOutcome::Plan(p)) => {
                let ctrl = controller(&reference_horizon(&p, &cav, np, params))?;
                if ctrl.is_feasible() {
                    initially_feasible = step == 0;
                    phase = Phase::Changing;
                    (Some(p), ctrl, true)
                } else {
                    (None, controller(&holding)?, false)
                }
            }
            (Phase::Waiting, PlanOutcome::Infeasible) => (None, controller(&holding)?, false),
        };

        if phase == Phase::Waiting {
            if wait_steps >= budget {
                aborted = true;
                break;
            }
            wait_steps += 1;
        } else {
            lc_steps += 1;
            if !control_feasible {
                fallback_steps += 1;
            }
        }

        let (u, delta) = applied_inputs(&ctrl, &fleet, coop, params, horizon);
        fleet = advance(&fleet, u, plan.as_ref(), params);
        if let Some(p) = &plan {
            heading = p.heading_at(fleet[VehicleRole::Tcav].x);
        }
        let clearance = monitor.observe(&fleet, &delta, params, phase == Phase::Changing);
        if let Some(t) = trace.as_deref_mut() {
            t.push(record(stage, step + 1, params.tau, phase, plan_feasible, control_feasible, &fleet, u, delta, clearance));
        }
        if clearance <= T::zero() {
            collision = true;
            break;
        }
    }

    let started_after_wait = phase == Phase::Changing && !initially_feasible;
    Ok(RunResult {
        initially_feasible,
        started_after_wait,
        wait_steps,
        lc_steps,
        total_time: params.tau * T::from_count(wait_steps + lc_steps),
        collision,
        min_clearance: monitor.min_clearance,
        min_longitudinal_gap_near: monitor.gap_near,
        min_longitudinal_gap_far: monitor.gap_far,
        max_gap_deficit: monitor.deficit,
        fallback_steps,
        aborted,
        final_cav: fleet[VehicleRole::Tcav],
    })
}

/// A two-stage manoeuvre: `first` as usual, then a second cohort on the lane beyond.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiLaneScenario<T> {
    pub first: Scenario<T>,
    /// Second-cohort speeds in FHDV_near, PHDV_near, FHDV_far, PHDV_far order, m/s.
    pub second_speeds: [T; 4],
    pub second_coop: CoopAssignment,
}

/// Draws both cohorts from one stream: five speeds for stage one, then four for stage two.
pub fn build_bi_lane_scenario<T: Scalar>(
    mu_mph: f64,
    sigma_mph: f64,
    coop: (CoopAssignment, CoopAssignment),
    seed: u64,
    params: &SafetyParams<T>,
    layout: &ScenarioLayout<T>,
) -> Result<BiLaneScenario<T>> {
    let mut rng = scenario_rng(seed);
    let s = draw_speeds::<T>(&mut rng, mu_mph, sigma_mph, 9)?;
    let first = scenario_from_speeds([s[0], s[1], s[2], s[3], s[4]], coop.0, params, layout)?;
    Ok(BiLaneScenario { first, second_speeds: [s[5], s[6], s[7], s[8]], second_coop: coop.1 })
}

/// Second-stage scenario around the CAV's state at the end of stage one.
pub fn second_stage<T: Scalar>(
    bi: &BiLaneScenario<T>,
    cav_exit: &VehicleState<T>,
    params: &SafetyParams<T>,
    layout: &ScenarioLayout<T>,
) -> Result<Scenario<T>> {
    let lane_y = bi.first.target_lane_y;
    let source_y = bi.first.fleet[VehicleRole::Tcav].y;
    let next_lane = lane_y + (lane_y - source_y);
    let cohort = place_cohort(cav_exit.x, next_lane, bi.second_speeds, params, layout)?;
    let cav = VehicleState { x: cav_exit.x, y: lane_y, v: cav_exit.v, a: T::zero() };
    Ok(Scenario {
        fleet: Fleet { states: [cav, cohort[0], cohort[1], cohort[2], cohort[3]] },
        coop: bi.second_coop,
        target_lane_y: next_lane,
    })
}

pub fn run_bi_lane_change<T: Scalar>(bi: &BiLaneScenario<T>, cfg: &RunConfig<T>) -> Result<BiLaneResult<T>> {
    run_bi_lane_inner(bi, cfg, None)
}

pub fn run_bi_lane_change_traced<T: Scalar>(
    bi: &BiLaneScenario<T>,
    cfg: &RunConfig<T>,
    trace: &mut Vec<StepRecord<T>>,
) -> Result<BiLaneResult<T>> {
    run_bi_lane_inner(bi, cfg, Some(trace))
}

fn run_bi_lane_inner<T: Scalar>(
    bi: &BiLaneScenario<T>,
    cfg: &RunConfig<T>,
    mut trace: Option<&mut Vec<StepRecord<T>>>,
) -> Result<BiLaneResult<T>> {
    let first = run_stage(&bi.first, cfg, 0, trace.as_deref_mut())?;
    if !first.completed() {
        return Ok(BiLaneResult { first, second: None, total_time: first.total_time, efficient: false });
    }
    let scenario = second_stage(bi, &first.final_cav, &cfg.params, &cfg.layout)?;
    let second = run_stage(&scenario, cfg, 1, trace)?;
    let total_time = first.total_time + second.total_time;
    let efficient = second.completed() && total_time <= T::lit(EFFICIENT_BI_LANE_TIME);
    Ok(BiLaneResult { first, second: Some(second), total_time, efficient })
}
