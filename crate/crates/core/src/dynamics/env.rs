use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    perturb_pose, sample_start_and_goal, step, surrogate_step, Goal, Observation, RewardWeights, RobotState, StepResult,
    SurrogateConfig, SurrogateState, Tolerances, DEFAULT_HORIZON, POLICY_DT,
};
use crate::error::{Error, Result};
use crate::sysid::{Action, VelocityModel};

/// Environment configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub tolerances: Tolerances,
    pub weights: RewardWeights,
    pub obs_noise_sigma: f64,
    pub start_noise_sigma: f64,
    /// Episode length limit in policy steps.
    pub horizon: usize,
    /// Present for the perturbed-dynamics variant.
    pub surrogate: Option<SurrogateConfig>,
    pub model_path: Option<PathBuf>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            tolerances: Tolerances::deployment(),
            weights: RewardWeights::default(),
            obs_noise_sigma: 0.01,
            start_noise_sigma: 0.05,
            horizon: DEFAULT_HORIZON,
            surrogate: None,
            model_path: None,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        self.tolerances.validate()?;
        self.weights.validate()?;
        for (name, s) in [("obs_noise_sigma", self.obs_noise_sigma), ("start_noise_sigma", self.start_noise_sigma)] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("{name} = {s} must be finite and >= 0")));
            }
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        if let Some(s) = &self.surrogate {
            s.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The model named by `model_path`, or `fallback` when none is set.
    pub fn resolve_model(&self, fallback: &VelocityModel) -> Result<VelocityModel> {
        match &self.model_path {
            Some(p) => VelocityModel::load(p),
            None => Ok(fallback.clone()),
        }
    }

    pub fn with_surrogate(mut self, cfg: SurrogateConfig) -> Self {
        self.surrogate = Some(cfg);
        self
    }
}

/// One policy step of an episode trace, written as a JSON line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Seconds since the start of the episode.
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub a_x: f64,
    pub a_y: f64,
    pub a_theta: f64,
    pub reward: f64,
    pub e_p: f64,
    pub e_theta: f64,
    pub success: bool,
}

impl TraceRecord {
    pub fn from_step(r: &StepResult) -> Self {
        Self {
            t: r.elapsed_steps as f64 * POLICY_DT,
            x: r.next_state.x,
            y: r.next_state.y,
            theta: r.next_state.theta,
            a_x: r.applied_action.a_x,
            a_y: r.applied_action.a_y,
            a_theta: r.applied_action.a_theta,
            reward: r.reward,
            e_p: r.e_p,
            e_theta: r.e_theta,
            success: r.success,
        }
    }
}

/// Stateful episode wrapper around the core or surrogate simulator.
#[derive(Debug, Clone)]
pub struct Env {
    cfg: EnvConfig,
    model: VelocityModel,
    tol: Tolerances,
    rng: ChaCha8Rng,
    state: RobotState,
    goal: Goal,
    prev_action: Action,
    steps: usize,
    actuator: Option<SurrogateState>,
}

impl Env {
    pub fn new(cfg: EnvConfig, model: VelocityModel) -> Result<Self> {
        cfg.validate()?;
        if !model.is_finite() {
            return Err(Error::Config("velocity model has non-finite coefficients".into()));
        }
        let actuator = cfg.surrogate.as_ref().map(SurrogateState::at_rest);
        Ok(Self {
            tol: cfg.tolerances,
            cfg,
            model,
            rng: ChaCha8Rng::seed_from_u64(0),
            state: RobotState::default(),
            goal: Goal::default(),
            prev_action: Action::ZERO,
            steps: 0,
            actuator,
        })
    }

    /// Starts a new episode; the seed fully determines it given the actions.
    pub fn reset(&mut self, seed: u64) -> Observation {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let (start, goal) = sample_start_and_goal(&mut self.rng, self.cfg.start_noise_sigma);
        self.begin(start, goal)
    }

    /// Starts an episode from a given pose and goal.
    pub fn reset_to(&mut self, start: RobotState, goal: Goal, seed: u64) -> Observation {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.begin(start, goal)
    }

    fn begin(&mut self, start: RobotState, goal: Goal) -> Observation {
        self.state = start;
        self.goal = goal;
        self.prev_action = Action::ZERO;
        self.steps = 0;
        if let Some(cfg) = &self.cfg.surrogate {
            self.actuator = Some(SurrogateState::at_rest(cfg));
        }
        self.observe()
    }

    pub fn step(&mut self, action: &Action) -> Result<StepResult> {
        let mut r = match (&self.cfg.surrogate, &mut self.actuator) {
            (Some(cfg), Some(internal)) => surrogate_step(
                &self.state,
                &self.prev_action,
                action,
                &self.goal,
                &self.tol,
                &self.cfg.weights,
                &self.model,
                self.steps,
                cfg,
                internal,
            )?,
            _ => step(
                &self.state,
                &self.prev_action,
                action,
                &self.goal,
                &self.tol,
                &self.cfg.weights,
                &self.model,
                self.steps,
            )?,
        };
        self.state = r.next_state;
        self.prev_action = r.applied_action;
        self.steps = r.elapsed_steps;
        r.observation = self.observe();
        Ok(r)
    }

    /// Noisy observation of the current pose against the current goal.
    pub fn observe(&mut self) -> Observation {
        let (x, y, th) = self.pose_estimate();
        Observation::encode(x, y, th, &self.goal)
    }

    /// The current pose as seen through the observation noise.
    pub fn pose_estimate(&mut self) -> (f64, f64, f64) {
        let (x, y, th) = perturb_pose(&self.state, self.cfg.obs_noise_sigma, &mut self.rng);
        match self.cfg.surrogate.map(|s| s.extra_obs_noise) {
            Some(extra) if extra > 0.0 => perturb_pose(&RobotState { x, y, theta: th }, extra, &mut self.rng),
            _ => (x, y, th),
        }
    }

    /// True when the episode has ended after `r`.
    pub fn is_done(&self, r: &StepResult) -> bool {
        r.success || r.elapsed_steps >= self.cfg.horizon
    }

    pub fn set_goal(&mut self, goal: Goal) {
        self.goal = goal;
    }

    pub fn set_tolerances(&mut self, tol: Tolerances) {
        self.tol = tol;
    }

    pub fn tolerances(&self) -> Tolerances {
        self.tol
    }

    pub fn state(&self) -> RobotState {
        self.state
    }

    pub fn goal(&self) -> Goal {
        self.goal
    }

    pub fn prev_action(&self) -> Action {
        self.prev_action
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn model(&self) -> &VelocityModel {
        &self.model
    }
}
