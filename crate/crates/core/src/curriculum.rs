//! Success-gated tolerance schedule.
//!
//! Training starts with loose success tolerances and tightens them each time
//! the recent success rate clears a threshold, down to a fixed floor.

use std::collections::VecDeque;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::dynamics::{Tolerances, R_MAX, R_MIN};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumConfig {
    /// Starting tolerances as a fraction of the half workspace width and of pi.
    pub initial_fraction: f64,
    /// Multiplier applied on each promotion.
    pub shrink: f64,
    /// Episodes in the success-rate window.
    pub window: usize,
    /// Success rate over a full window that triggers a promotion.
    pub threshold: f64,
    /// Tightest tolerances the schedule reaches.
    pub floor: Tolerances,
    /// When false the tolerances stay at `floor` throughout.
    pub enabled: bool,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            initial_fraction: 0.8,
            shrink: 0.8,
            window: 100,
            threshold: 0.95,
            floor: Tolerances::precise(),
            enabled: true,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_fraction > 0.0 && self.initial_fraction <= 1.0) {
            return Err(Error::Config(format!("initial_fraction {} must be in (0, 1]", self.initial_fraction)));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::Config(format!("shrink {} must be in (0, 1)", self.shrink)));
        }
        if self.window == 0 {
            return Err(Error::Config("curriculum window must be positive".into()));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::Config(format!("threshold {} must be in (0, 1]", self.threshold)));
        }
        self.floor.validate()
    }
}

/// Loose starting tolerances: a fraction of the workspace half-width and of pi.
pub fn initial_tolerances(r_min: f64, r_max: f64, fraction: f64) -> Tolerances {
    Tolerances {
        eps_p: fraction * (r_max - r_min) / 2.0,
        eps_theta: fraction * PI,
    }
}

/// A tightening of the tolerances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromotionEvent {
    /// Environment step at which the triggering episode ended.
    pub step: u64,
    pub episode: u64,
    pub old_eps_p: f64,
    pub new_eps_p: f64,
    pub old_eps_theta: f64,
    pub new_eps_theta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumState {
    cfg: CurriculumConfig,
    tol: Tolerances,
    window: VecDeque<bool>,
    episodes: u64,
    events: Vec<PromotionEvent>,
}

impl CurriculumState {
    pub fn new(cfg: CurriculumConfig) -> Result<Self> {
        cfg.validate()?;
        let tol = if cfg.enabled {
            let start = initial_tolerances(R_MIN, R_MAX, cfg.initial_fraction);
            Tolerances {
                eps_p: start.eps_p.max(cfg.floor.eps_p),
                eps_theta: start.eps_theta.max(cfg.floor.eps_theta),
            }
        } else {
            cfg.floor
        };
        Ok(Self {
            cfg,
            tol,
            window: VecDeque::with_capacity(cfg.window),
            episodes: 0,
            events: Vec::new(),
        })
    }

    /// Resumes at given tolerances, e.g. from a checkpoint.
    pub fn resume(cfg: CurriculumConfig, tol: Tolerances) -> Result<Self> {
        let mut s = Self::new(cfg)?;
        tol.validate()?;
        s.tol = tol;
        Ok(s)
    }

    pub fn tolerances(&self) -> Tolerances {
        self.tol
    }

    pub fn config(&self) -> &CurriculumConfig {
        &self.cfg
    }

    pub fn events(&self) -> &[PromotionEvent] {
        &self.events
    }

    pub fn episodes(&self) -> u64 {
        self.episodes
    }

    pub fn at_floor(&self) -> bool {
        self.tol.eps_p <= self.cfg.floor.eps_p && self.tol.eps_theta <= self.cfg.floor.eps_theta
    }

    /// Success rate over the current (possibly partial) window.
    pub fn window_success_rate(&self) -> Option<f64> {
        if self.window.is_empty() {
            None
        } else {
            Some(self.window.iter().filter(|&&s| s).count() as f64 / self.window.len() as f64)
        }
    }

    /// Records an episode outcome; returns the promotion it triggered, if any.
    pub fn record_episode(&mut self, success: bool, step: u64) -> Option<PromotionEvent> {
        self.episodes += 1;
        if self.window.len() == self.cfg.window {
            self.window.pop_front();
        }
        self.window.push_back(success);
        if !self.cfg.enabled || self.at_floor() || self.window.len() < self.cfg.window {
            return None;
        }
        if self.window_success_rate().unwrap_or(0.0) < self.cfg.threshold {
            return None;
        }
        let old = self.tol;
        self.tol = Tolerances {
            eps_p: (old.eps_p * self.cfg.shrink).max(self.cfg.floor.eps_p),
            eps_theta: (old.eps_theta * self.cfg.shrink).max(self.cfg.floor.eps_theta),
        };
        self.window.clear();
        let event = PromotionEvent {
            step,
            episode: self.episodes,
            old_eps_p: old.eps_p,
            new_eps_p: self.tol.eps_p,
            old_eps_theta: old.eps_theta,
            new_eps_theta: self.tol.eps_theta,
        };
        log::info!(
            "curriculum: eps_p {:.4} -> {:.4} m, eps_theta {:.4} -> {:.4} rad at step {step}",
            old.eps_p,
            self.tol.eps_p,
            old.eps_theta,
            self.tol.eps_theta
        );
        self.events.push(event);
        Some(event)
    }
}
