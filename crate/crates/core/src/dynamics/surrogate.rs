//! Perturbed-dynamics stand-in for a higher-fidelity simulator: command
//! latency, first-order velocity lag and a minimum command duration.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{
    check_finite, clamp_action, finish_step, Goal, RewardWeights, RobotState, StepResult, Substeps, Tolerances, SIM_DT,
    SUBSTEPS,
};
use crate::error::{Error, Result};
use crate::sysid::{Action, BodyVelocity, VelocityModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateConfig {
    /// Command pipeline delay, in simulator substeps.
    pub latency_steps: usize,
    /// Time constant of the executed-velocity lag in seconds; 0 disables it.
    pub vel_time_constant: f64,
    /// Substeps a command must persist before a different one is accepted.
    pub min_action_duration: usize,
    /// Observation noise added on top of the environment's own.
    #[serde(default)]
    pub extra_obs_noise: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self::degenerate()
    }
}

impl SurrogateConfig {
    /// A configuration under which the surrogate reproduces the core simulator.
    pub fn degenerate() -> Self {
        Self {
            latency_steps: 0,
            vel_time_constant: 0.0,
            min_action_duration: 1,
            extra_obs_noise: 0.0,
        }
    }

    /// Latency of 3 substeps, 0.2 s lag and a 3-substep minimum duration.
    pub fn transfer_default() -> Self {
        Self {
            latency_steps: 3,
            vel_time_constant: 0.2,
            min_action_duration: 3,
            extra_obs_noise: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.vel_time_constant >= 0.0 && self.vel_time_constant.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "vel_time_constant {} must be finite and >= 0",
                self.vel_time_constant
            )));
        }
        if self.min_action_duration < 1 {
            return Err(Error::InvalidInput("min_action_duration must be >= 1".into()));
        }
        if !(self.extra_obs_noise >= 0.0 && self.extra_obs_noise.is_finite()) {
            return Err(Error::InvalidInput("extra_obs_noise must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Internal actuator state carried between surrogate steps.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateState {
    pending: VecDeque<Action>,
    held: Action,
    held_for: usize,
    velocity: BodyVelocity,
}

impl SurrogateState {
    /// Robot at rest with a zero command in flight.
    pub fn at_rest(cfg: &SurrogateConfig) -> Self {
        Self {
            pending: std::iter::repeat_n(Action::ZERO, cfg.latency_steps).collect(),
            held: Action::ZERO,
            held_for: cfg.min_action_duration,
            velocity: BodyVelocity::default(),
        }
    }

    /// Executed body velocity after the latest substep.
    pub fn velocity(&self) -> BodyVelocity {
        self.velocity
    }

    /// Runs one simulator substep and returns the executed velocity.
    fn advance(&mut self, command: Action, cfg: &SurrogateConfig, model: &VelocityModel) -> BodyVelocity {
        self.pending.push_back(command);
        let delayed = self.pending.pop_front().expect("queue holds the command just pushed");
        if delayed != self.held && self.held_for >= cfg.min_action_duration {
            self.held = delayed;
            self.held_for = 0;
        }
        self.held_for += 1;
        let target = model.predict_unchecked(&self.held);
        self.velocity = if cfg.vel_time_constant > 0.0 {
            // Exact zero-order-hold discretization of dv/dt = (target - v) / tau.
            let k = 1.0 - (-SIM_DT / cfg.vel_time_constant).exp();
            let (v, t) = (self.velocity.to_array(), target.to_array());
            BodyVelocity::from_array(std::array::from_fn(|d| v[d] + k * (t[d] - v[d])))
        } else {
            target
        };
        self.velocity
    }
}

/// [`super::step`] with the surrogate actuator model in the loop.
#[allow(clippy::too_many_arguments)]
pub fn surrogate_step(
    state: &RobotState,
    prev_action: &Action,
    action: &Action,
    goal: &Goal,
    tol: &Tolerances,
    weights: &RewardWeights,
    model: &VelocityModel,
    clock: usize,
    cfg: &SurrogateConfig,
    internal: &mut SurrogateState,
) -> Result<StepResult> {
    check_finite(state)?;
    let action = clamp_action(action)?;
    let mut path = Substeps::new(*state);
    for _ in 0..SUBSTEPS {
        let v = internal.advance(action, cfg, model);
        path.advance(&v);
    }
    check_finite(&path.state)?;
    Ok(finish_step(path, prev_action, &action, goal, tol, weights, clock))
}
