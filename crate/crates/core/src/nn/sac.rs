//! Soft actor-critic update: twin critics with target networks, a
//! reparameterized squashed-Gaussian actor and an auto-tuned temperature.
//!
//! Each loss is exposed as a pure function of the parameters and the noise
//! draws so its analytic gradient can be checked in isolation.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::mlp::{Adam, AdamConfig, Gradients, ScalarAdam, Tape};
use super::policy::{normalize_action, squash_batch, PolicyParams, SacHyper, ACT_DIM, SQUASH_EPS};
use crate::dynamics::OBS_DIM;
use crate::error::{Error, Result};
use crate::replay::Transition;

/// A replay batch laid out as matrices.
#[derive(Debug, Clone)]
pub struct BatchTensors {
    pub obs: Array2<f64>,
    /// Actions on the `[-1, 1]` scale.
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    /// 1.0 where the transition ends the task (no bootstrap).
    pub terminal: Array1<f64>,
    pub next_obs: Array2<f64>,
}

impl BatchTensors {
    pub fn from_transitions(batch: &[Transition]) -> Self {
        let n = batch.len();
        let mut obs = Array2::zeros((n, OBS_DIM));
        let mut next_obs = Array2::zeros((n, OBS_DIM));
        let mut actions = Array2::zeros((n, ACT_DIM));
        let mut rewards = Array1::zeros(n);
        let mut terminal = Array1::zeros(n);
        for (r, t) in batch.iter().enumerate() {
            for c in 0..OBS_DIM {
                obs[[r, c]] = t.observation.0[c];
                next_obs[[r, c]] = t.next_observation.0[c];
            }
            for (c, a) in normalize_action(&t.action).iter().enumerate() {
                actions[[r, c]] = *a;
            }
            rewards[r] = t.reward;
            terminal[r] = if t.terminal() { 1.0 } else { 0.0 };
        }
        Self {
            obs,
            actions,
            rewards,
            terminal,
            next_obs,
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// `[obs | action]` rows for the critics.
pub fn critic_input(obs: &Array2<f64>, actions: &Array2<f64>) -> Array2<f64> {
    let mut x = Array2::zeros((obs.nrows(), OBS_DIM + ACT_DIM));
    x.slice_mut(s![.., ..OBS_DIM]).assign(obs);
    x.slice_mut(s![.., OBS_DIM..]).assign(actions);
    x
}

fn column(a: &Array2<f64>) -> Array1<f64> {
    a.column(0).to_owned()
}

/// Soft Bellman targets `r + gamma * (1 - terminal) * (min target Q - alpha * log pi)`
/// with next actions drawn through `next_eps`.
pub fn critic_targets(
    params: &PolicyParams,
    batch: &BatchTensors,
    next_eps: &Array2<f64>,
    alpha: f64,
    discount: f64,
) -> Result<Array1<f64>> {
    let next = squash_batch(&params.actor.forward_batch(&batch.next_obs)?, next_eps);
    let x = critic_input(&batch.next_obs, &next.squashed);
    let q1 = column(&params.target1.forward_batch(&x)?);
    let q2 = column(&params.target2.forward_batch(&x)?);
    let soft_v = ndarray::Zip::from(&q1)
        .and(&q2)
        .and(&next.log_prob)
        .map_collect(|a, b, lp| a.min(*b) - alpha * lp);
    Ok(&batch.rewards + &((1.0 - &batch.terminal) * discount * soft_v))
}

/// `0.5 * (mean((Q1 - y)^2) + mean((Q2 - y)^2))` with gradients for both critics.
pub fn critic_loss(
    params: &PolicyParams,
    batch: &BatchTensors,
    targets: &Array1<f64>,
) -> Result<(f64, Gradients, Gradients)> {
    let n = batch.len() as f64;
    let x = critic_input(&batch.obs, &batch.actions);
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(2);
    for critic in [&params.critic1, &params.critic2] {
        let mut tape = Tape::new();
        let q = column(&critic.forward_recorded(&x, &mut tape)?);
        let diff = &q - targets;
        loss += 0.5 * diff.mapv(|d| d * d).sum() / n;
        let upstream = (diff / n).insert_axis(Axis(1));
        grads.push(critic.backward(&tape, &upstream)?.0);
    }
    let g2 = grads.pop().unwrap();
    let g1 = grads.pop().unwrap();
    Ok((loss, g1, g2))
}

/// `mean(alpha * log pi(a|o) - min(Q1, Q2)(o, a))` over reparameterized
/// actions `a`. Returns the loss, the actor gradient and the per-row
/// log-probabilities.
pub fn actor_loss(
    params: &PolicyParams,
    obs: &Array2<f64>,
    eps: &Array2<f64>,
    alpha: f64,
) -> Result<(f64, Gradients, Array1<f64>)> {
    let n_rows = obs.nrows();
    let n = n_rows as f64;
    let mut actor_tape = Tape::new();
    let out = params.actor.forward_recorded(obs, &mut actor_tape)?;
    let sq = squash_batch(&out, eps);
    let x = critic_input(obs, &sq.squashed);

    let mut t1 = Tape::new();
    let mut t2 = Tape::new();
    let q1 = column(&params.critic1.forward_recorded(&x, &mut t1)?);
    let q2 = column(&params.critic2.forward_recorded(&x, &mut t2)?);
    let first_is_min: Vec<bool> = q1.iter().zip(&q2).map(|(a, b)| a <= b).collect();
    let q_min: Array1<f64> = q1.iter().zip(&q2).map(|(a, b)| a.min(*b)).collect();
    let loss = (alpha * &sq.log_prob - &q_min).sum() / n;

    // d loss / d Q_min = -1/n, routed to whichever critic attained the minimum.
    let up1 = Array2::from_shape_fn((n_rows, 1), |(r, _)| if first_is_min[r] { -1.0 / n } else { 0.0 });
    let up2 = Array2::from_shape_fn((n_rows, 1), |(r, _)| if first_is_min[r] { 0.0 } else { -1.0 / n });
    let dx = params.critic1.input_gradient(&t1, &up1)? + params.critic2.input_gradient(&t2, &up2)?;

    let mut d_out = Array2::zeros((n_rows, 2 * ACT_DIM));
    for r in 0..n_rows {
        for d in 0..ACT_DIM {
            let t = sq.squashed[[r, d]];
            let one_m_t2 = 1.0 - t * t;
            let dl_dt = dx[[r, OBS_DIM + d]] + alpha / n * 2.0 * t / (one_m_t2 + SQUASH_EPS);
            let dl_du = dl_dt * one_m_t2;
            d_out[[r, d]] = dl_du;
            d_out[[r, ACT_DIM + d]] = if sq.log_std_active[[r, d]] {
                dl_du * sq.log_std[[r, d]].exp() * sq.eps[[r, d]] - alpha / n
            } else {
                0.0
            };
        }
    }
    let (grads, _) = params.actor.backward(&actor_tape, &d_out)?;
    Ok((loss, grads, sq.log_prob))
}

/// `-log_alpha * mean(log pi + entropy_target)` and its derivative in `log_alpha`.
pub fn temperature_loss(log_alpha: f64, log_prob: &Array1<f64>, entropy_target: f64) -> (f64, f64) {
    let m = log_prob.mean().unwrap_or(0.0) + entropy_target;
    (-log_alpha * m, -m)
}

/// Optimizer state for the three SAC objectives.
#[derive(Debug, Clone, PartialEq)]
pub struct SacOptimizers {
    pub actor: Adam,
    pub critic1: Adam,
    pub critic2: Adam,
    pub temperature: ScalarAdam,
}

impl SacOptimizers {
    pub fn new(params: &PolicyParams, hyper: &SacHyper) -> Self {
        let cfg = AdamConfig::with_lr(hyper.learning_rate);
        Self {
            actor: Adam::new(&params.actor, cfg),
            critic1: Adam::new(&params.critic1, cfg),
            critic2: Adam::new(&params.critic2, cfg),
            temperature: ScalarAdam::new(cfg),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SacLosses {
    pub critic: f64,
    pub actor: f64,
    pub temperature: f64,
    /// Temperature used during this update.
    pub alpha: f64,
}

fn standard_normal<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut *rng))
}

fn ensure_finite(loss: &'static str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::TrainingDiverged { loss, value })
    }
}

/// One gradient step on temperature, critics and actor, then the Polyak
/// update of the target critics.
pub fn sac_update<R: Rng>(
    params: &mut PolicyParams,
    opt: &mut SacOptimizers,
    batch: &[Transition],
    hyper: &SacHyper,
    rng: &mut R,
) -> Result<SacLosses> {
    if batch.len() != hyper.batch_size {
        return Err(Error::InvalidInput(format!(
            "batch of {} transitions, expected {}",
            batch.len(),
            hyper.batch_size
        )));
    }
    let tensors = BatchTensors::from_transitions(batch);
    let n = tensors.len();
    let eps_pi = standard_normal(n, ACT_DIM, rng);
    let eps_next = standard_normal(n, ACT_DIM, rng);
    let alpha = params.temperature();

    let out = params.actor.forward_batch(&tensors.obs)?;
    let log_prob = squash_batch(&out, &eps_pi).log_prob;
    let (temp_loss, temp_grad) = temperature_loss(params.log_temperature, &log_prob, hyper.entropy_target);
    ensure_finite("temperature", temp_loss)?;
    opt.temperature.step(&mut params.log_temperature, temp_grad);

    let targets = critic_targets(params, &tensors, &eps_next, alpha, hyper.discount)?;
    let (c_loss, g1, g2) = critic_loss(params, &tensors, &targets)?;
    ensure_finite("critic", c_loss)?;
    opt.critic1.step(&mut params.critic1, &g1);
    opt.critic2.step(&mut params.critic2, &g2);

    let (a_loss, ga, _) = actor_loss(params, &tensors.obs, &eps_pi, alpha)?;
    ensure_finite("actor", a_loss)?;
    opt.actor.step(&mut params.actor, &ga);

    params.target1.polyak_update(&params.critic1, hyper.tau);
    params.target2.polyak_update(&params.critic2, hyper.tau);

    Ok(SacLosses {
        critic: c_loss,
        actor: a_loss,
        temperature: temp_loss,
        alpha,
    })
}
