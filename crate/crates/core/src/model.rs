//! Vehicles, roles, safety parameters, buffer-disc geometry and scenario construction.

use std::ops::{Index, IndexMut};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scalar::Scalar;

/// Metres per second in one mile per hour.
pub const MPH_TO_MPS: f64 = 0.44704;

/// Longitudinal/lateral position, speed and acceleration of one vehicle at one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState<T> {
    pub x: T,
    pub y: T,
    pub v: T,
    pub a: T,
}

impl<T: Scalar> VehicleState<T> {
    pub fn new(x: T, y: T, v: T) -> Self {
        Self { x, y, v, a: T::zero() }
    }

    pub fn disc(&self, radius: T) -> BufferDisc<T> {
        BufferDisc { center: [self.x, self.y], radius }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VehicleRole {
    #[serde(rename = "TCAV")]
    Tcav,
    #[serde(rename = "FHDV_near")]
    FhdvNear,
    #[serde(rename = "PHDV_near")]
    PhdvNear,
    #[serde(rename = "FHDV_far")]
    FhdvFar,
    #[serde(rename = "PHDV_far")]
    PhdvFar,
}

impl VehicleRole {
    pub const ALL: [VehicleRole; 5] = [
        VehicleRole::Tcav,
        VehicleRole::FhdvNear,
        VehicleRole::PhdvNear,
        VehicleRole::FhdvFar,
        VehicleRole::PhdvFar,
    ];

    pub const CHDVS: [VehicleRole; 4] = [
        VehicleRole::FhdvNear,
        VehicleRole::PhdvNear,
        VehicleRole::FhdvFar,
        VehicleRole::PhdvFar,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_near(self) -> bool {
        matches!(self, VehicleRole::FhdvNear | VehicleRole::PhdvNear)
    }

    pub fn is_far(self) -> bool {
        matches!(self, VehicleRole::FhdvFar | VehicleRole::PhdvFar)
    }

    /// True for the CHDVs behind the CAV's insertion point.
    pub fn is_following(self) -> bool {
        matches!(self, VehicleRole::FhdvNear | VehicleRole::FhdvFar)
    }

    pub fn label(self) -> &'static str {
        match self {
            VehicleRole::Tcav => "TCAV",
            VehicleRole::FhdvNear => "FHDV_near",
            VehicleRole::PhdvNear => "PHDV_near",
            VehicleRole::FhdvFar => "FHDV_far",
            VehicleRole::PhdvFar => "PHDV_far",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CooperationLevel {
    /// Velocity constraints are hard; slack pinned to zero.
    Active,
    /// Velocity constraints may be violated by a bounded, penalised slack.
    Inactive,
}

/// Cooperation level of each of the four CHDVs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CoopAssignment {
    pub fhdv_near: CooperationLevel,
    pub phdv_near: CooperationLevel,
    pub fhdv_far: CooperationLevel,
    pub phdv_far: CooperationLevel,
}

impl CoopAssignment {
    pub fn uniform(level: CooperationLevel) -> Self {
        Self { fhdv_near: level, phdv_near: level, fhdv_far: level, phdv_far: level }
    }

    /// Every role listed is Active, the rest Inactive.
    pub fn with_active(roles: &[VehicleRole]) -> Self {
        let mut out = Self::uniform(CooperationLevel::Inactive);
        for &role in roles {
            out.set(role, CooperationLevel::Active);
        }
        out
    }

    pub fn get(&self, role: VehicleRole) -> CooperationLevel {
        match role {
            VehicleRole::FhdvNear => self.fhdv_near,
            VehicleRole::PhdvNear => self.phdv_near,
            VehicleRole::FhdvFar => self.fhdv_far,
            VehicleRole::PhdvFar => self.phdv_far,
            // The CAV follows its own plan; it never relaxes a velocity constraint.
            VehicleRole::Tcav => CooperationLevel::Active,
        }
    }

    pub fn set(&mut self, role: VehicleRole, level: CooperationLevel) {
        match role {
            VehicleRole::FhdvNear => self.fhdv_near = level,
            VehicleRole::PhdvNear => self.phdv_near = level,
            VehicleRole::FhdvFar => self.fhdv_far = level,
            VehicleRole::PhdvFar => self.phdv_far = level,
            VehicleRole::Tcav => {}
        }
    }

    pub fn active_fraction(&self) -> f64 {
        VehicleRole::CHDVS
            .iter()
            .filter(|r| self.get(**r) == CooperationLevel::Active)
            .count() as f64
            / 4.0
    }

    /// Four-letter code in role order FHDV_near, PHDV_near, FHDV_far, PHDV_far, e.g. `"AIAI"`.
    pub fn code(&self) -> String {
        VehicleRole::CHDVS
            .iter()
            .map(|r| match self.get(*r) {
                CooperationLevel::Active => 'A',
                CooperationLevel::Inactive => 'I',
            })
            .collect()
    }

    pub fn from_code(code: &str) -> Result<Self> {
        let chars: Vec<char> = code.chars().collect();
        if chars.len() != 4 {
            return Err(invalid(format!("cooperation code {code:?} must have 4 letters")));
        }
        let mut out = Self::uniform(CooperationLevel::Inactive);
        for (role, c) in VehicleRole::CHDVS.iter().zip(chars) {
            let level = match c.to_ascii_uppercase() {
                'A' => CooperationLevel::Active,
                'I' => CooperationLevel::Inactive,
                other => return Err(invalid(format!("bad cooperation letter {other:?} in {code:?}"))),
            };
            out.set(*role, level);
        }
        Ok(out)
    }
}

/// Physical and safety parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyParams<T> {
    /// Maximum deceleration (negative), m/s².
    pub d_max: T,
    /// Maximum acceleration, m/s².
    pub a_max: T,
    /// Maximum CAV longitudinal acceleration during a lane change, m/s².
    pub a_max_lc: T,
    /// Rollover lateral-acceleration bound, m/s².
    pub a_rollover: T,
    /// Step length, s.
    pub tau: T,
    /// CAV to near-CHDV longitudinal safety distance, m.
    pub l1: T,
    /// Near to far CHDV longitudinal safety distance, m.
    pub l2: T,
    pub vehicle_length: T,
    pub buffer_radius: T,
    pub lane_width: T,
}

impl<T: Scalar> Default for SafetyParams<T> {
    fn default() -> Self {
        Self {
            d_max: T::lit(-5.08),
            a_max: T::lit(5.08),
            a_max_lc: T::lit(3.024),
            a_rollover: T::lit(6.958),
            tau: T::lit(0.2),
            l1: T::lit(5.0),
            l2: T::lit(10.0),
            vehicle_length: T::lit(4.0),
            buffer_radius: T::lit(3.0),
            lane_width: T::lit(3.7),
        }
    }
}

impl<T: Scalar> SafetyParams<T> {
    pub fn validate(&self) -> Result<()> {
        let zero = T::zero();
        if !(self.d_max < zero && zero < self.a_max) {
            return Err(invalid("need d_max < 0 < a_max"));
        }
        if self.a_max_lc > self.a_max || self.a_max_lc <= zero {
            return Err(invalid("need 0 < a_max_lc <= a_max"));
        }
        if self.buffer_radius + self.buffer_radius < self.vehicle_length {
            return Err(invalid("buffer radius must cover half a vehicle length"));
        }
        if self.tau <= zero || self.l1 <= zero || self.l2 <= zero {
            return Err(invalid("tau, l1 and l2 must be positive"));
        }
        if self.a_rollover <= zero || self.lane_width <= zero {
            return Err(invalid("rollover bound and lane width must be positive"));
        }
        Ok(())
    }
}

/// Circular buffer area around a vehicle centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BufferDisc<T> {
    pub center: [T; 2],
    pub radius: T,
}

impl<T: Scalar> BufferDisc<T> {
    /// Centre distance minus the sum of radii; zero (tangent) or below is a collision.
    pub fn clearance(&self, other: &BufferDisc<T>) -> T {
        let dx = self.center[0] - other.center[0];
        let dy = self.center[1] - other.center[1];
        dx.hypot(dy) - (self.radius + other.radius)
    }

    pub fn collides(&self, other: &BufferDisc<T>) -> bool {
        self.clearance(other) <= T::zero()
    }
}

/// Signed clearance between the equal-radius buffer discs of two vehicles.
pub fn disc_clearance<T: Scalar>(a: &VehicleState<T>, b: &VehicleState<T>, radius: T) -> T {
    a.disc(radius).clearance(&b.disc(radius))
}

/// Constant-time-headway bumper-to-bumper gap `v * t_h`.
pub fn initial_headway<T: Scalar>(v: T, t_h: T) -> Result<T> {
    if v < T::zero() || v.is_nan() {
        return Err(invalid(format!("speed must be non-negative, got {v}")));
    }
    if t_h <= T::zero() {
        return Err(invalid(format!("time headway must be positive, got {t_h}")));
    }
    Ok(v * t_h)
}

/// States of the CAV and its four CHDV neighbours, indexed by [`VehicleRole`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fleet<T> {
    pub states: [VehicleState<T>; 5],
}

impl<T> Index<VehicleRole> for Fleet<T> {
    type Output = VehicleState<T>;

    fn index(&self, role: VehicleRole) -> &VehicleState<T> {
        &self.states[role.index()]
    }
}

impl<T> IndexMut<VehicleRole> for Fleet<T> {
    fn index_mut(&mut self, role: VehicleRole) -> &mut VehicleState<T> {
        &mut self.states[role.index()]
    }
}

impl<T: Scalar> Fleet<T> {
    /// Smallest disc clearance over all vehicle pairs.
    pub fn min_clearance(&self, radius: T) -> T {
        let mut best = T::infinity();
        for i in 0..5 {
            for j in (i + 1)..5 {
                best = best.min(disc_clearance(&self.states[i], &self.states[j], radius));
            }
        }
        best
    }
}

/// Placement rules for [`build_scenario`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioLayout<T> {
    /// Constant time headway, s.
    pub time_headway: T,
    /// Lateral position of the CAV's current lane centre.
    pub source_lane_y: T,
}

impl<T: Scalar> Default for ScenarioLayout<T> {
    fn default() -> Self {
        Self { time_headway: T::one(), source_lane_y: T::zero() }
    }
}

/// Initial conditions for one lane change.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scenario<T> {
    pub fleet: Fleet<T>,
    pub coop: CoopAssignment,
    /// Centre of the lane the CAV is merging into.
    pub target_lane_y: T,
}

/// Seeded generator used for every speed draw (ChaCha8 stream keyed by the run seed).
pub fn scenario_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Draws `count` speeds (m/s) from Normal(mu, sigma) given in mph, truncated at zero.
pub fn draw_speeds<T: Scalar>(
    rng: &mut ChaCha8Rng,
    mu_mph: f64,
    sigma_mph: f64,
    count: usize,
) -> Result<Vec<T>> {
    if !(sigma_mph >= 0.0) || !sigma_mph.is_finite() {
        return Err(invalid(format!("sigma must be non-negative, got {sigma_mph}")));
    }
    if !(mu_mph > 0.0) || !mu_mph.is_finite() {
        return Err(invalid(format!("mu must be positive, got {mu_mph}")));
    }
    let normal = Normal::new(mu_mph, sigma_mph).map_err(|e| invalid(e.to_string()))?;
    Ok((0..count)
        .map(|_| T::lit(normal.sample(rng).max(0.0) * MPH_TO_MPS))
        .collect())
}

/// Places the four CHDVs around a CAV-centred insertion gap on a lane at `lane_y`.
///
/// `speeds` are in role order FHDV_near, PHDV_near, FHDV_far, PHDV_far. Spacing between a
/// follower and its leader is the follower's headway plus one vehicle length; the gap
/// between the near pair is centred on `cav_x`.
pub fn place_cohort<T: Scalar>(
    cav_x: T,
    lane_y: T,
    speeds: [T; 4],
    params: &SafetyParams<T>,
    layout: &ScenarioLayout<T>,
) -> Result<[VehicleState<T>; 4]> {
    let [v_fn, v_pn, v_ff, v_pf] = speeds;
    let spacing = |v: T| -> Result<T> { Ok(initial_headway(v, layout.time_headway)? + params.vehicle_length) };
    let half = spacing(v_fn)? / T::lit(2.0);
    let x_fn = cav_x - half;
    let x_pn = cav_x + half;
    let x_ff = x_fn - spacing(v_ff)?;
    let x_pf = x_pn + spacing(v_pn)?;
    Ok([
        VehicleState::new(x_fn, lane_y, v_fn),
        VehicleState::new(x_pn, lane_y, v_pn),
        VehicleState::new(x_ff, lane_y, v_ff),
        VehicleState::new(x_pf, lane_y, v_pf),
    ])
}

/// Builds a single-lane-change scenario with speeds drawn from Normal(mu, sigma) (mph).
///
/// Speeds are drawn in role order TCAV, FHDV_near, PHDV_near, FHDV_far, PHDV_far from
/// [`scenario_rng`]`(seed)`. The CAV sits on the source lane midway between the near CHDVs.
pub fn build_scenario<T: Scalar>(
    mu_mph: f64,
    sigma_mph: f64,
    coop: CoopAssignment,
    seed: u64,
    params: &SafetyParams<T>,
    layout: &ScenarioLayout<T>,
) -> Result<Scenario<T>> {
    let mut rng = scenario_rng(seed);
    let speeds = draw_speeds::<T>(&mut rng, mu_mph, sigma_mph, 5)?;
    scenario_from_speeds([speeds[0], speeds[1], speeds[2], speeds[3], speeds[4]], coop, params, layout)
}

/// Deterministic placement for explicit speeds (m/s) in role order TCAV, FHDV_near,
/// PHDV_near, FHDV_far, PHDV_far.
pub fn scenario_from_speeds<T: Scalar>(
    speeds: [T; 5],
    coop: CoopAssignment,
    params: &SafetyParams<T>,
    layout: &ScenarioLayout<T>,
) -> Result<Scenario<T>> {
    params.validate()?;
    let cav_x = T::zero();
    let target_lane_y = layout.source_lane_y + params.lane_width;
    let cohort = place_cohort(
        cav_x,
        target_lane_y,
        [speeds[1], speeds[2], speeds[3], speeds[4]],
        params,
        layout,
    )?;
    let cav = VehicleState::new(cav_x, layout.source_lane_y, speeds[0]);
    Ok(Scenario {
        fleet: Fleet { states: [cav, cohort[0], cohort[1], cohort[2], cohort[3]] },
        coop,
        target_lane_y,
    })
}
