//! Squashed-Gaussian actor and twin Q critics.

use ndarray::{s, Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::mlp::Mlp;
use crate::dynamics::{Observation, OBS_DIM};
use crate::error::{Error, Result};
use crate::sysid::{Action, ActionRanges, ACTION_RANGES};

pub const ACT_DIM: usize = 3;
pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Added to `1 - tanh(u)^2` inside the log-density.
pub const SQUASH_EPS: f64 = 1e-6;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// SAC hyperparameters. Defaults are the published training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SacHyper {
    pub batch_size: usize,
    pub tau: f64,
    pub discount: f64,
    pub learning_rate: f64,
    pub buffer_capacity: usize,
    pub total_steps: usize,
    pub entropy_target: f64,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub initial_log_temperature: f64,
}

impl Default for SacHyper {
    fn default() -> Self {
        Self {
            batch_size: 512,
            tau: 0.0045,
            discount: 0.999,
            learning_rate: 2e-4,
            buffer_capacity: 1_000_000,
            total_steps: 300_000,
            entropy_target: -(ACT_DIM as f64),
            actor_hidden: vec![16, 16],
            critic_hidden: vec![128, 128],
            initial_log_temperature: 0.0,
        }
    }
}

impl SacHyper {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tau", self.tau),
            ("discount", self.discount),
            ("learning_rate", self.learning_rate),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be positive")));
            }
        }
        if self.tau > 1.0 || self.discount > 1.0 {
            return Err(Error::Config("tau and discount must not exceed 1".into()));
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 || self.total_steps == 0 {
            return Err(Error::Config("batch_size, buffer_capacity and total_steps must be positive".into()));
        }
        if self.actor_hidden.contains(&0) || self.critic_hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        if !self.entropy_target.is_finite() || !self.initial_log_temperature.is_finite() {
            return Err(Error::Config("entropy target and temperature must be finite".into()));
        }
        Ok(())
    }

    pub fn actor_sizes(&self) -> Vec<usize> {
        let mut v = vec![OBS_DIM];
        v.extend(&self.actor_hidden);
        v.push(2 * ACT_DIM);
        v
    }

    pub fn critic_sizes(&self) -> Vec<usize> {
        let mut v = vec![OBS_DIM + ACT_DIM];
        v.extend(&self.critic_hidden);
        v.push(1);
        v
    }
}

/// Actor, twin critics, their target copies and the entropy temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub actor: Mlp,
    pub critic1: Mlp,
    pub critic2: Mlp,
    pub target1: Mlp,
    pub target2: Mlp,
    pub log_temperature: f64,
}

impl PolicyParams {
    /// Fresh networks; the actor's output layer is scaled by 1e-2 so initial
    /// actions sit near the middle of the ranges.
    pub fn new<R: Rng>(hyper: &SacHyper, rng: &mut R) -> Result<Self> {
        let actor = Mlp::new(&hyper.actor_sizes(), 1e-2, rng)?;
        let critic1 = Mlp::new(&hyper.critic_sizes(), 1.0, rng)?;
        let critic2 = Mlp::new(&hyper.critic_sizes(), 1.0, rng)?;
        Ok(Self {
            actor,
            target1: critic1.clone(),
            target2: critic2.clone(),
            critic1,
            critic2,
            log_temperature: hyper.initial_log_temperature,
        })
    }

    /// Checks every network against the shapes `hyper` prescribes.
    pub fn validate_shapes(&self, hyper: &SacHyper) -> Result<()> {
        let check = |name: &str, net: &Mlp, want: Vec<usize>| {
            if net.sizes() == want {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} has layer sizes {:?}, expected {want:?}", net.sizes())))
            }
        };
        check("actor", &self.actor, hyper.actor_sizes())?;
        for (name, net) in [
            ("critic1", &self.critic1),
            ("critic2", &self.critic2),
            ("target1", &self.target1),
            ("target2", &self.target2),
        ] {
            check(name, net, hyper.critic_sizes())?;
        }
        Ok(())
    }

    pub fn temperature(&self) -> f64 {
        self.log_temperature.exp()
    }

    pub fn is_finite(&self) -> bool {
        [&self.actor, &self.critic1, &self.critic2, &self.target1, &self.target2]
            .iter()
            .all(|n| n.is_finite())
            && self.log_temperature.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMode {
    Stochastic,
    Deterministic,
}

/// Maps a squashed value in `[-1, 1]` onto `[lo, hi]`.
pub fn unsquash(t: [f64; ACT_DIM], ranges: &ActionRanges) -> Action {
    let (mid, half) = (ranges.midpoint(), ranges.half_width());
    Action::from_array(std::array::from_fn(|d| mid[d] + half[d] * t[d]))
}

/// Inverse of [`unsquash`] for the table ranges; used to feed stored actions
/// to the critics on the `[-1, 1]` scale.
pub fn normalize_action(a: &Action) -> [f64; ACT_DIM] {
    let (mid, half) = (ACTION_RANGES.midpoint(), ACTION_RANGES.half_width());
    let v = a.to_array();
    std::array::from_fn(|d| (v[d] - mid[d]) / half[d])
}

/// Log-density of one squashed action component on the `[-1, 1]` scale, with
/// pre-squash Gaussian `N(mean, exp(log_std)^2)` and sampled `u`.
pub fn squashed_log_density(u: f64, mean: f64, log_std: f64) -> f64 {
    let z = (u - mean) / log_std.exp();
    let t = u.tanh();
    -0.5 * z * z - log_std - HALF_LN_2PI - (1.0 - t * t + SQUASH_EPS).ln()
}

/// Density of one component of the emitted action on its physical interval
/// `[lo, hi]`, evaluated at `a` strictly inside it.
pub fn action_log_density(a: f64, mean: f64, log_std: f64, lo: f64, hi: f64) -> f64 {
    let half = 0.5 * (hi - lo);
    let t = ((a - 0.5 * (lo + hi)) / half).clamp(-1.0 + 1e-15, 1.0 - 1e-15);
    squashed_log_density(t.atanh(), mean, log_std) - half.ln()
}

/// Splits an actor output row into means and clamped log standard deviations.
pub fn split_actor_output(out: &[f64]) -> ([f64; ACT_DIM], [f64; ACT_DIM]) {
    let mean = std::array::from_fn(|d| out[d]);
    let log_std = std::array::from_fn(|d| out[ACT_DIM + d].clamp(LOG_STD_MIN, LOG_STD_MAX));
    (mean, log_std)
}

/// Draws (or, deterministically, takes the mean of) the policy action.
///
/// Returns the action in physical units and its log-density there. In
/// deterministic mode the log-density is that of the mode point.
pub fn sample_action<R: Rng>(
    params: &PolicyParams,
    obs: &Observation,
    mode: SampleMode,
    rng: &mut R,
) -> Result<(Action, f64)> {
    if !obs.is_finite() {
        return Err(Error::InvalidInput("non-finite observation".into()));
    }
    let out = params.actor.forward(&obs.0)?;
    let (mean, log_std) = split_actor_output(&out);
    let u: [f64; ACT_DIM] = match mode {
        SampleMode::Deterministic => mean,
        SampleMode::Stochastic => std::array::from_fn(|d| {
            let eps: f64 = StandardNormal.sample(rng);
            mean[d] + log_std[d].exp() * eps
        }),
    };
    let t = u.map(f64::tanh);
    let half = ACTION_RANGES.half_width();
    let log_prob = (0..ACT_DIM)
        .map(|d| squashed_log_density(u[d], mean[d], log_std[d]) - half[d].ln())
        .sum();
    Ok((unsquash(t, &ACTION_RANGES), log_prob))
}

/// Batched reparameterized sample from the actor output, kept for the
/// backward pass.
#[derive(Debug, Clone)]
pub struct SquashedBatch {
    pub log_std: Array2<f64>,
    /// Whether each raw log-std lay inside the clamp (gradient passes).
    pub log_std_active: Array2<bool>,
    pub eps: Array2<f64>,
    /// `tanh(mean + std * eps)`, the action on the `[-1, 1]` scale.
    pub squashed: Array2<f64>,
    /// Per-row log-density on the `[-1, 1]` scale.
    pub log_prob: Array1<f64>,
}

/// Applies the reparameterization to a batch of actor outputs.
pub fn squash_batch(actor_out: &Array2<f64>, eps: &Array2<f64>) -> SquashedBatch {
    let n = actor_out.nrows();
    let raw_log_std = actor_out.slice(s![.., ACT_DIM..]);
    let log_std = raw_log_std.mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
    let log_std_active = raw_log_std.mapv(|v| (LOG_STD_MIN..=LOG_STD_MAX).contains(&v));
    let mut squashed = Array2::zeros((n, ACT_DIM));
    let mut log_prob = Array1::zeros(n);
    for r in 0..n {
        let mut lp = 0.0;
        for d in 0..ACT_DIM {
            let (mean, ls, e) = (actor_out[[r, d]], log_std[[r, d]], eps[[r, d]]);
            let u = mean + ls.exp() * e;
            let t = u.tanh();
            squashed[[r, d]] = t;
            lp += -0.5 * e * e - ls - HALF_LN_2PI - (1.0 - t * t + SQUASH_EPS).ln();
        }
        log_prob[r] = lp;
    }
    SquashedBatch {
        log_std,
        log_std_active,
        eps: eps.clone(),
        squashed,
        log_prob,
    }
}
