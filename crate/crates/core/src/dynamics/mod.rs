//! Goal-conditioned kinematic simulation of the robot.
//!
//! The policy acts at 10 Hz and the simulator integrates at 30 Hz, so every
//! action is held for [`SUBSTEPS`] explicit Euler substeps. The executed body
//! velocity comes from the identified [`VelocityModel`] and is rotated into
//! the world frame by the current heading before integration.

mod env;
mod surrogate;

pub use env::{Env, EnvConfig, TraceRecord};
pub use surrogate::{surrogate_step, SurrogateConfig, SurrogateState};

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sysid::{Action, BodyVelocity, VelocityModel, ACTION_RANGES};

pub const SIM_HZ: f64 = 30.0;
pub const POLICY_HZ: f64 = 10.0;
pub const SUBSTEPS: usize = 3;
pub const SIM_DT: f64 = 1.0 / SIM_HZ;
pub const POLICY_DT: f64 = 1.0 / POLICY_HZ;
/// Goal coordinates are sampled from `[R_MIN, R_MAX]` on both axes.
pub const R_MIN: f64 = -2.0;
pub const R_MAX: f64 = 2.0;
pub const DEFAULT_HORIZON: usize = 300;
pub const OBS_DIM: usize = 8;

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can round up to exactly 2*pi for tiny negative inputs.
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Planar pose in the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RobotState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl RobotState {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }

    pub fn as_goal(&self) -> Goal {
        Goal {
            x: self.x,
            y: self.y,
            theta: self.theta,
        }
    }
}

/// Target pose.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Goal {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Goal {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Position tolerance in metres.
    pub eps_p: f64,
    /// Heading tolerance in radians.
    pub eps_theta: f64,
}

impl Tolerances {
    pub fn new(eps_p: f64, eps_theta: f64) -> Result<Self> {
        let t = Self { eps_p, eps_theta };
        t.validate()?;
        Ok(t)
    }

    pub fn from_degrees(eps_p: f64, eps_theta_deg: f64) -> Result<Self> {
        Self::new(eps_p, eps_theta_deg.to_radians())
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps_p > 0.0 && self.eps_theta > 0.0 && self.eps_p.is_finite() && self.eps_theta.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("tolerances must be positive and finite: {self:?}")))
        }
    }

    /// The relaxed deployment tolerances, 0.3 m and 17 degrees.
    pub fn deployment() -> Self {
        Self {
            eps_p: 0.3,
            eps_theta: 17f64.to_radians(),
        }
    }

    /// The final curriculum tolerances, 0.05 m and 1 degree.
    pub fn precise() -> Self {
        Self {
            eps_p: 0.05,
            eps_theta: 1f64.to_radians(),
        }
    }
}

/// Diagonal weights of the action-magnitude (`r`) and action-variation (`s`)
/// quadratic costs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub r: [f64; 3],
    pub s: [f64; 3],
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            r: [0.0, 0.8, 0.8],
            s: [0.2, 0.2, 0.2],
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        if self.r.iter().chain(&self.s).all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("reward weights must be finite and >= 0: {self:?}")))
        }
    }
}

/// Network input: `(x/r, y/r, sin th, cos th, x_g/r, y_g/r, sin th_g, cos th_g)`
/// with `r = R_MAX`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation(pub [f64; OBS_DIM]);

impl Observation {
    /// Encodes a (possibly noisy) pose estimate and an exact goal.
    pub fn encode(x: f64, y: f64, theta: f64, goal: &Goal) -> Self {
        let mut o = [0.0; OBS_DIM];
        o[0] = x / R_MAX;
        o[1] = y / R_MAX;
        o[2] = theta.sin();
        o[3] = theta.cos();
        o[4..].copy_from_slice(&Self::goal_part(goal));
        Self(o)
    }

    fn goal_part(goal: &Goal) -> [f64; 4] {
        [goal.x / R_MAX, goal.y / R_MAX, goal.theta.sin(), goal.theta.cos()]
    }

    /// Same pose estimate, different goal.
    pub fn with_goal(&self, goal: &Goal) -> Self {
        let mut o = self.0;
        o[4..].copy_from_slice(&Self::goal_part(goal));
        Self(o)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub next_state: RobotState,
    pub observation: Observation,
    pub reward: f64,
    /// Evaluated on the true state against the active tolerances.
    pub success: bool,
    /// Policy steps taken so far in the episode, this one included.
    pub elapsed_steps: usize,
    pub e_p: f64,
    pub e_theta: f64,
    /// The action actually applied, after range clamping.
    pub applied_action: Action,
    /// Pose after each simulator substep; the last equals `next_state`.
    pub substeps: [RobotState; SUBSTEPS],
    /// Planar distance travelled during the step, from the commanded speeds.
    pub distance: f64,
}

/// Position and heading error. The heading error is the shortest angular
/// distance, so it lies in `[0, pi]`.
pub fn errors(state: &RobotState, goal: &Goal) -> (f64, f64) {
    let e_p = (goal.x - state.x).hypot(goal.y - state.y);
    let e_theta = wrap_angle(goal.theta - state.theta).abs();
    (e_p, e_theta)
}

pub fn is_success(state: &RobotState, goal: &Goal, tol: &Tolerances) -> bool {
    let (e_p, e_theta) = errors(state, goal);
    e_p < tol.eps_p && e_theta < tol.eps_theta
}

/// `u' R u + (u - u_prev)' S (u - u_prev)`.
pub fn action_cost(u: &Action, u_prev: &Action, weights: &RewardWeights) -> f64 {
    let (u, p) = (u.to_array(), u_prev.to_array());
    (0..3)
        .map(|d| {
            let du = u[d] - p[d];
            weights.r[d] * u[d] * u[d] + weights.s[d] * du * du
        })
        .sum()
}

/// Per-step reward: negative action costs, minus a unit time penalty unless
/// the robot is at the goal.
pub fn reward(u: &Action, u_prev: &Action, at_goal: bool, weights: &RewardWeights) -> f64 {
    let lambda = if at_goal { 0.0 } else { 1.0 };
    -(action_cost(u, u_prev, weights) + lambda)
}

/// One explicit Euler substep with a body-frame velocity.
pub(crate) fn integrate(state: &RobotState, v: &BodyVelocity, dt: f64) -> RobotState {
    let (s, c) = state.theta.sin_cos();
    RobotState {
        x: state.x + (c * v.v_x - s * v.v_y) * dt,
        y: state.y + (s * v.v_x + c * v.v_y) * dt,
        theta: wrap_angle(state.theta + v.v_theta * dt),
    }
}

pub(crate) fn clamp_action(action: &Action) -> Result<Action> {
    if !action.is_finite() {
        return Err(Error::InvalidInput(format!("non-finite action {action:?}")));
    }
    if ACTION_RANGES.contains(action) {
        Ok(*action)
    } else {
        let c = ACTION_RANGES.clamp(action);
        log::warn!("action {action:?} outside commandable ranges, clamped to {c:?}");
        Ok(c)
    }
}

pub(crate) fn check_finite(state: &RobotState) -> Result<()> {
    if state.is_finite() {
        Ok(())
    } else {
        Err(Error::SimulationDiverged(format!("non-finite state {state:?}")))
    }
}

/// Advances the core simulator by one policy step.
///
/// `clock` is the number of policy steps already taken in the episode. The
/// returned observation is the noise-free encoding; [`Env`] replaces it with a
/// noisy one.
#[allow(clippy::too_many_arguments)]
pub fn step(
    state: &RobotState,
    prev_action: &Action,
    action: &Action,
    goal: &Goal,
    tol: &Tolerances,
    weights: &RewardWeights,
    model: &VelocityModel,
    clock: usize,
) -> Result<StepResult> {
    check_finite(state)?;
    let action = clamp_action(action)?;
    let v = model.predict_unchecked(&action);
    let mut path = Substeps::new(*state);
    for _ in 0..SUBSTEPS {
        path.advance(&v);
    }
    check_finite(&path.state)?;
    Ok(finish_step(path, prev_action, &action, goal, tol, weights, clock))
}

/// Accumulates the substeps of one policy step.
pub(crate) struct Substeps {
    pub(crate) state: RobotState,
    poses: [RobotState; SUBSTEPS],
    n: usize,
    distance: f64,
}

impl Substeps {
    pub(crate) fn new(state: RobotState) -> Self {
        Self {
            state,
            poses: [state; SUBSTEPS],
            n: 0,
            distance: 0.0,
        }
    }

    pub(crate) fn advance(&mut self, v: &BodyVelocity) {
        self.state = integrate(&self.state, v, SIM_DT);
        self.poses[self.n] = self.state;
        self.n += 1;
        self.distance += v.planar_speed() * SIM_DT;
    }
}

pub(crate) fn finish_step(
    path: Substeps,
    prev_action: &Action,
    action: &Action,
    goal: &Goal,
    tol: &Tolerances,
    weights: &RewardWeights,
    clock: usize,
) -> StepResult {
    let next = path.state;
    let (e_p, e_theta) = errors(&next, goal);
    let success = e_p < tol.eps_p && e_theta < tol.eps_theta;
    StepResult {
        next_state: next,
        observation: Observation::encode(next.x, next.y, next.theta, goal),
        reward: reward(action, prev_action, success, weights),
        success,
        elapsed_steps: clock + 1,
        e_p,
        e_theta,
        applied_action: *action,
        substeps: path.poses,
        distance: path.distance,
    }
}

/// Start pose (origin plus Gaussian noise) and a uniformly sampled goal.
pub fn sample_start_and_goal<R: Rng>(rng: &mut R, start_noise_sigma: f64) -> (RobotState, Goal) {
    let mut n = || -> f64 {
        if start_noise_sigma > 0.0 {
            let z: f64 = StandardNormal.sample(&mut *rng);
            start_noise_sigma * z
        } else {
            0.0
        }
    };
    let start = RobotState::new(n(), n(), n());
    let goal = Goal::new(
        rng.random_range(R_MIN..=R_MAX),
        rng.random_range(R_MIN..=R_MAX),
        rng.random_range(-PI..PI),
    );
    (start, goal)
}

/// Noisy encoding of `state` with an exact goal. Noise is applied to the
/// pose only.
pub fn observe<R: Rng>(state: &RobotState, goal: &Goal, noise_sigma: f64, rng: &mut R) -> Observation {
    let (x, y, th) = perturb_pose(state, noise_sigma, rng);
    Observation::encode(x, y, th, goal)
}

/// `(x, y, theta)` plus i.i.d. Gaussian noise; no draws when `sigma` is zero.
pub(crate) fn perturb_pose<R: Rng>(state: &RobotState, sigma: f64, rng: &mut R) -> (f64, f64, f64) {
    if sigma > 0.0 {
        let n = Normal::new(0.0, sigma).expect("positive sigma");
        (state.x + n.sample(rng), state.y + n.sample(rng), state.theta + n.sample(rng))
    } else {
        (state.x, state.y, state.theta)
    }
}
