//! Training loop and policy evaluation.
//!
//! Everything random is derived from one seed: episode resets draw from
//! per-episode seeds, while action noise, replay sampling and update noise
//! share a single ChaCha stream owned by the trainer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curriculum::{CurriculumConfig, CurriculumState, PromotionEvent};
use crate::dynamics::{Env, EnvConfig, Observation, Tolerances, TraceRecord};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{Checkpoint, RngState};
use crate::nn::policy::{sample_action, PolicyParams, SacHyper, SampleMode};
use crate::nn::sac::{sac_update, SacLosses, SacOptimizers};
use crate::replay::{HerConfig, ReplayBuffer, Transition};
use crate::sysid::{Action, VelocityModel, ACTION_RANGES};

/// Seed streams, so that training and evaluation never share episodes.
pub mod streams {
    pub const TRAIN_EPISODES: u64 = 1;
    pub const TRAIN_RNG: u64 = 2;
    pub const INIT: u64 = 3;
    pub const EVAL_EPISODES: u64 = 4;
    pub const VALIDATION_EPISODES: u64 = 5;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A well-mixed child seed for `(seed, stream, index)`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub sac: SacHyper,
    pub her: HerConfig,
    pub curriculum: CurriculumConfig,
    /// Uniform random actions before the first update.
    pub learning_starts: usize,
    /// Environment steps between gradient phases.
    pub train_freq: usize,
    /// Updates per gradient phase.
    pub gradient_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sac: SacHyper::default(),
            her: HerConfig::default(),
            curriculum: CurriculumConfig::default(),
            learning_starts: 1000,
            train_freq: 1,
            gradient_steps: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, env: &EnvConfig) -> Result<()> {
        env.validate()?;
        self.sac.validate()?;
        self.curriculum.validate()?;
        if self.train_freq == 0 {
            return Err(Error::Config("train_freq must be positive".into()));
        }
        if self.sac.buffer_capacity < env.horizon {
            return Err(Error::Config("replay capacity is smaller than one episode".into()));
        }
        Ok(())
    }
}

/// Outcome of one finished training episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode: u64,
    pub end_step: u64,
    pub length: usize,
    pub success: bool,
    pub episode_return: f64,
    pub tolerances: Tolerances,
    pub promotion: Option<PromotionEvent>,
}

/// What a call to [`Trainer::train`] did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    pub steps: u64,
    pub episodes: u64,
    pub successes: u64,
    pub updates: u64,
    pub last_losses: Option<SacLosses>,
    pub tolerances: Tolerances,
}

pub struct Trainer {
    cfg: TrainConfig,
    env_cfg: EnvConfig,
    seed: u64,
    env: Env,
    params: PolicyParams,
    opt: SacOptimizers,
    buffer: ReplayBuffer,
    curriculum: CurriculumState,
    rng: ChaCha8Rng,
    step: u64,
    episodes: u64,
    updates: u64,
    current: Vec<Transition>,
    obs: Option<Observation>,
    episode_return: f64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, env_cfg: EnvConfig, model: VelocityModel, seed: u64) -> Result<Self> {
        cfg.validate(&env_cfg)?;
        let params = initial_params(&cfg.sac, seed)?;
        Self::with_params(cfg, env_cfg, model, seed, params)
    }

    /// Continues training from existing networks, e.g. a previous stage.
    /// Optimizer moments and the replay buffer start empty.
    pub fn with_params(
        cfg: TrainConfig,
        env_cfg: EnvConfig,
        model: VelocityModel,
        seed: u64,
        params: PolicyParams,
    ) -> Result<Self> {
        cfg.validate(&env_cfg)?;
        params.validate_shapes(&cfg.sac)?;
        let env = Env::new(env_cfg.clone(), model)?;
        Ok(Self {
            opt: SacOptimizers::new(&params, &cfg.sac),
            buffer: ReplayBuffer::new(cfg.sac.buffer_capacity)?,
            curriculum: CurriculumState::new(cfg.curriculum)?,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, streams::TRAIN_RNG, 0)),
            params,
            env,
            cfg,
            env_cfg,
            seed,
            step: 0,
            episodes: 0,
            updates: 0,
            current: Vec::new(),
            obs: None,
            episode_return: 0.0,
        })
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn episodes(&self) -> u64 {
        self.episodes
    }

    pub fn curriculum(&self) -> &CurriculumState {
        &self.curriculum
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            hyper: self.cfg.sac.clone(),
            step: self.step,
            tolerances: self.curriculum.tolerances(),
            rng: Some(RngState::capture(&self.rng)),
        }
    }

    fn begin_episode(&mut self) -> Observation {
        let seed = derive_seed(self.seed, streams::TRAIN_EPISODES, self.episodes);
        self.env.set_tolerances(self.curriculum.tolerances());
        self.current.clear();
        self.episode_return = 0.0;
        self.env.reset(seed)
    }

    /// Runs `steps` environment steps (an episode in progress carries over
    /// between calls), calling `on_episode` whenever one finishes.
    pub fn train(&mut self, steps: u64, mut on_episode: impl FnMut(&EpisodeSummary)) -> Result<TrainProgress> {
        let (start_step, start_episodes, start_updates) = (self.step, self.episodes, self.updates);
        let mut successes = 0;
        let mut last_losses = None;
        let batch = self.cfg.sac.batch_size;
        while self.step < start_step + steps {
            let obs = match self.obs {
                Some(o) => o,
                None => self.begin_episode(),
            };
            let action = if (self.step as usize) < self.cfg.learning_starts {
                random_action(&mut self.rng)
            } else {
                sample_action(&self.params, &obs, SampleMode::Stochastic, &mut self.rng)?.0
            };
            let prev_action = self.env.prev_action();
            let r = self.env.step(&action)?;
            self.step += 1;
            self.episode_return += r.reward;
            let done = self.env.is_done(&r);
            self.current.push(Transition {
                observation: obs,
                action: r.applied_action,
                prev_action,
                reward: r.reward,
                next_observation: r.observation,
                achieved_state: r.next_state,
                goal: self.env.goal(),
                done,
                success: r.success,
            });
            self.obs = Some(r.observation);
            if done {
                self.buffer.push_episode(&self.current)?;
                self.episodes += 1;
                successes += r.success as u64;
                let tolerances = self.curriculum.tolerances();
                let promotion = self.curriculum.record_episode(r.success, self.step);
                on_episode(&EpisodeSummary {
                    episode: self.episodes,
                    end_step: self.step,
                    length: self.current.len(),
                    success: r.success,
                    episode_return: self.episode_return,
                    tolerances,
                    promotion,
                });
                self.obs = None;
            }
            if self.step as usize >= self.cfg.learning_starts && self.step.is_multiple_of(self.cfg.train_freq as u64) {
                let tol = self.curriculum.tolerances();
                for _ in 0..self.cfg.gradient_steps {
                    let Some(sample) =
                        self.buffer
                            .sample_her(batch, &self.cfg.her, &tol, &self.env_cfg.weights, &mut self.rng)
                    else {
                        break;
                    };
                    let losses = sac_update(&mut self.params, &mut self.opt, &sample, &self.cfg.sac, &mut self.rng)?;
                    if !self.params.is_finite() {
                        return Err(Error::TrainingDiverged {
                            loss: "parameters",
                            value: f64::NAN,
                        });
                    }
                    self.updates += 1;
                    last_losses = Some(losses);
                }
            }
        }
        Ok(TrainProgress {
            steps: self.step - start_step,
            episodes: self.episodes - start_episodes,
            successes,
            updates: self.updates - start_updates,
            last_losses,
            tolerances: self.curriculum.tolerances(),
        })
    }
}

/// Freshly initialized networks for `seed`.
pub fn initial_params(hyper: &SacHyper, seed: u64) -> Result<PolicyParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, streams::INIT, 0));
    PolicyParams::new(hyper, &mut rng)
}

fn random_action<R: Rng>(rng: &mut R) -> Action {
    let (lo, hi) = (ACTION_RANGES.lo, ACTION_RANGES.hi);
    Action::from_array(std::array::from_fn(|d| rng.random_range(lo[d]..hi[d])))
}

/// Evaluation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub episodes: usize,
    pub seed: u64,
    /// Seed stream for episode resets; keeps evaluation sets disjoint.
    pub stream: u64,
    pub tolerances: Tolerances,
    pub mode: SampleMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            episodes: 100,
            seed: 0,
            stream: streams::EVAL_EPISODES,
            tolerances: Tolerances::deployment(),
            mode: SampleMode::Deterministic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub seed: u64,
    pub success: bool,
    pub steps: usize,
    pub final_e_p: f64,
    pub final_e_theta: f64,
    pub episode_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_steps: f64,
    pub mean_final_e_p: f64,
    pub mean_final_e_theta: f64,
    pub mean_return: f64,
    pub outcomes: Vec<EpisodeOutcome>,
}

/// Runs `opts.episodes` episodes with the policy and reports success under
/// `opts.tolerances`. `on_step` sees every step as `(episode index, record)`.
pub fn evaluate(
    params: &PolicyParams,
    env_cfg: &EnvConfig,
    model: &VelocityModel,
    opts: &EvalOptions,
    mut on_step: impl FnMut(usize, &TraceRecord),
) -> Result<EvalReport> {
    if opts.episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let mut env = Env::new(env_cfg.clone(), model.clone())?;
    env.set_tolerances(opts.tolerances);
    let mut action_rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, opts.stream, u64::MAX));
    let mut outcomes = Vec::with_capacity(opts.episodes);
    for i in 0..opts.episodes {
        let seed = derive_seed(opts.seed, opts.stream, i as u64);
        let mut obs = env.reset(seed);
        let mut ret = 0.0;
        loop {
            let (a, _) = sample_action(params, &obs, opts.mode, &mut action_rng)?;
            let r = env.step(&a)?;
            ret += r.reward;
            on_step(i, &TraceRecord::from_step(&r));
            obs = r.observation;
            if env.is_done(&r) {
                outcomes.push(EpisodeOutcome {
                    seed,
                    success: r.success,
                    steps: r.elapsed_steps,
                    final_e_p: r.e_p,
                    final_e_theta: r.e_theta,
                    episode_return: ret,
                });
                break;
            }
        }
    }
    let n = outcomes.len() as f64;
    let mean = |f: fn(&EpisodeOutcome) -> f64| outcomes.iter().map(f).sum::<f64>() / n;
    let successes = outcomes.iter().filter(|o| o.success).count();
    Ok(EvalReport {
        episodes: outcomes.len(),
        successes,
        success_rate: successes as f64 / n,
        mean_steps: mean(|o| o.steps as f64),
        mean_final_e_p: mean(|o| o.final_e_p),
        mean_final_e_theta: mean(|o| o.final_e_theta),
        mean_return: mean(|o| o.episode_return),
        outcomes,
    })
}
