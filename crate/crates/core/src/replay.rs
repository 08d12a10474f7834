//! Episode-structured replay buffer with hindsight goal relabeling.
//!
//! Whole episodes are stored and evicted together so a sampled transition
//! can always reach the rest of its own episode. Relabeling happens at
//! sample time: with probability `k / (k + 1)` the goal is replaced by a pose
//! the robot actually reached later in the same episode, and reward and
//! success are recomputed under the tolerances passed in.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{is_success, reward, Goal, Observation, RewardWeights, RobotState, Tolerances};
use crate::error::{Error, Result};
use crate::sysid::Action;

/// One policy step as stored for learning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub observation: Observation,
    pub action: Action,
    /// Action applied on the step before; needed to recompute the reward.
    pub prev_action: Action,
    pub reward: f64,
    pub next_observation: Observation,
    /// True pose after the step.
    pub achieved_state: RobotState,
    pub goal: Goal,
    /// Last transition of its episode, for whatever reason.
    pub done: bool,
    /// The goal was reached on this step.
    pub success: bool,
}

impl Transition {
    /// Whether the value target should stop bootstrapping here. Running out
    /// of time is not a terminal state, so only success counts.
    pub fn terminal(&self) -> bool {
        self.success
    }

    pub fn is_finite(&self) -> bool {
        self.observation.is_finite()
            && self.next_observation.is_finite()
            && self.action.is_finite()
            && self.prev_action.is_finite()
            && self.reward.is_finite()
            && self.achieved_state.is_finite()
            && [self.goal.x, self.goal.y, self.goal.theta].iter().all(|v| v.is_finite())
    }

    /// This transition re-targeted at `goal`, with reward and success
    /// recomputed under `tol`.
    pub fn with_goal(&self, goal: Goal, tol: &Tolerances, weights: &RewardWeights) -> Transition {
        let success = is_success(&self.achieved_state, &goal, tol);
        Transition {
            observation: self.observation.with_goal(&goal),
            next_observation: self.next_observation.with_goal(&goal),
            goal,
            success,
            reward: reward(&self.action, &self.prev_action, success, weights),
            ..*self
        }
    }
}

/// Goal relabeling parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HerConfig {
    /// Relabeled samples per original one.
    pub k: usize,
}

impl Default for HerConfig {
    fn default() -> Self {
        Self { k: 4 }
    }
}

impl HerConfig {
    /// Probability that a sample is relabeled.
    pub fn future_p(&self) -> f64 {
        self.k as f64 / (self.k as f64 + 1.0)
    }
}

/// Fixed-capacity store of complete episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    transitions: VecDeque<Transition>,
    /// Length of each stored episode, oldest first.
    episodes: VecDeque<usize>,
    /// Start offset of each episode within `transitions`.
    starts: Vec<usize>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            transitions: VecDeque::new(),
            episodes: VecDeque::new(),
            starts: Vec::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.transitions.get(i)
    }

    /// Appends a complete episode, evicting the oldest whole episodes as
    /// needed. Only the final transition may be marked `done`.
    pub fn push_episode(&mut self, episode: &[Transition]) -> Result<()> {
        let Some(last) = episode.last() else {
            return Err(Error::InvalidInput("empty episode".into()));
        };
        if episode.len() > self.capacity {
            return Err(Error::InvalidInput(format!(
                "episode of {} steps exceeds replay capacity {}",
                episode.len(),
                self.capacity
            )));
        }
        if !last.done || episode[..episode.len() - 1].iter().any(|t| t.done) {
            return Err(Error::InvalidInput("only the last transition of an episode may be done".into()));
        }
        if let Some(k) = episode.iter().position(|t| !t.is_finite()) {
            return Err(Error::InvalidInput(format!("transition {k} has non-finite fields")));
        }
        while self.transitions.len() + episode.len() > self.capacity {
            let n = self.episodes.pop_front().expect("buffer is non-empty while over capacity");
            self.transitions.drain(..n);
        }
        self.transitions.extend(episode.iter().copied());
        self.episodes.push_back(episode.len());
        self.rebuild_starts();
        Ok(())
    }

    fn rebuild_starts(&mut self) {
        self.starts.clear();
        let mut s = 0;
        for &n in &self.episodes {
            self.starts.push(s);
            s += n;
        }
    }

    /// `(start, end)` of the episode holding transition `i`.
    pub fn episode_bounds(&self, i: usize) -> (usize, usize) {
        let e = self.starts.partition_point(|&s| s <= i) - 1;
        (self.starts[e], self.starts[e] + self.episodes[e])
    }

    /// Uniform sample with replacement, as stored. `None` until the buffer
    /// holds at least `n` transitions.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Option<Vec<Transition>> {
        if self.len() < n || n == 0 {
            return None;
        }
        Some((0..n).map(|_| self.transitions[rng.random_range(0..self.len())]).collect())
    }

    /// Uniform sample where each draw is relabeled with a future achieved
    /// pose with probability `k / (k + 1)`. Every returned transition has its
    /// reward and success evaluated under `tol`.
    pub fn sample_her<R: Rng>(
        &self,
        n: usize,
        her: &HerConfig,
        tol: &Tolerances,
        weights: &RewardWeights,
        rng: &mut R,
    ) -> Option<Vec<Transition>> {
        if self.len() < n || n == 0 {
            return None;
        }
        let p = her.future_p();
        let out = (0..n)
            .map(|_| {
                let i = rng.random_range(0..self.len());
                let t = &self.transitions[i];
                if rng.random_bool(p) {
                    let (_, end) = self.episode_bounds(i);
                    let j = rng.random_range(i..end);
                    let mut r = t.with_goal(self.transitions[j].achieved_state.as_goal(), tol, weights);
                    r.done = r.success;
                    r
                } else {
                    t.with_goal(t.goal, tol, weights)
                }
            })
            .collect();
        Some(out)
    }
}

/// Storage-time relabeling: `k` copies of every transition, each aimed at a
/// pose reached at the same or a later step of `episode`.
pub fn her_relabel<R: Rng>(
    episode: &[Transition],
    k: usize,
    weights: &RewardWeights,
    tol: &Tolerances,
    rng: &mut R,
) -> Vec<Transition> {
    let mut out = Vec::with_capacity(episode.len() * k);
    for (i, t) in episode.iter().enumerate() {
        for _ in 0..k {
            let j = rng.random_range(i..episode.len());
            let mut r = t.with_goal(episode[j].achieved_state.as_goal(), tol, weights);
            r.done = r.success;
            out.push(r);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{action_cost, errors};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// A straight-line episode along +x whose original goal is far away.
    fn episode(len: usize, tag: f64) -> Vec<Transition> {
        let goal = Goal::new(-1.9, -1.9, 3.0);
        (0..len)
            .map(|k| {
                let s = RobotState::new(tag + 0.01 * k as f64, 0.0, 0.0);
                let s2 = RobotState::new(tag + 0.01 * (k + 1) as f64, 0.0, 0.0);
                Transition {
                    observation: Observation::encode(s.x, s.y, s.theta, &goal),
                    action: Action::new(0.3, 0.0, 0.0),
                    prev_action: Action::new(0.3 * (k > 0) as u8 as f64, 0.0, 0.0),
                    reward: -1.0,
                    next_observation: Observation::encode(s2.x, s2.y, s2.theta, &goal),
                    achieved_state: s2,
                    goal,
                    done: k + 1 == len,
                    success: false,
                }
            })
            .collect()
    }

    #[test]
    fn rejects_malformed_episodes() {
        let mut b = ReplayBuffer::new(100).unwrap();
        assert!(b.push_episode(&[]).is_err());
        let mut e = episode(5, 0.0);
        e[4].done = false;
        assert!(b.push_episode(&e).is_err());
        let mut e = episode(5, 0.0);
        e[2].done = true;
        assert!(b.push_episode(&e).is_err());
        let mut e = episode(5, 0.0);
        e[1].reward = f64::INFINITY;
        assert!(b.push_episode(&e).is_err());
        assert!(b.push_episode(&episode(101, 0.0)).is_err());
        assert!(b.is_empty());
        assert!(ReplayBuffer::new(0).is_err());
    }

    #[test]
    fn evicts_whole_oldest_episodes() {
        let mut b = ReplayBuffer::new(10).unwrap();
        b.push_episode(&episode(4, 0.0)).unwrap();
        b.push_episode(&episode(4, 1.0)).unwrap();
        assert_eq!(b.len(), 8);
        b.push_episode(&episode(3, 2.0)).unwrap();
        assert_eq!(b.len(), 7);
        assert_eq!(b.num_episodes(), 2);
        assert_eq!(b.get(0).unwrap().achieved_state.x, 1.01);
        assert_eq!(b.episode_bounds(0), (0, 4));
        assert_eq!(b.episode_bounds(5), (4, 7));
        for i in 0..b.len() {
            let (s, e) = b.episode_bounds(i);
            assert!(b.get(e - 1).unwrap().done);
            assert!(s == 0 || b.get(s - 1).unwrap().done);
        }
    }

    #[test]
    fn sample_needs_enough_data() {
        let mut b = ReplayBuffer::new(50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(b.sample(1, &mut rng).is_none());
        b.push_episode(&episode(5, 0.0)).unwrap();
        assert!(b.sample(6, &mut rng).is_none());
        assert_eq!(b.sample(5, &mut rng).unwrap().len(), 5);
    }

    #[test]
    fn her_fraction_and_future_goals() {
        let mut b = ReplayBuffer::new(10_000).unwrap();
        for e in 0..20 {
            b.push_episode(&episode(50, e as f64 * 0.001)).unwrap();
        }
        let tol = Tolerances::deployment();
        let w = RewardWeights::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 20_000;
        let batch: Vec<_> = (0..n / 1000)
            .flat_map(|_| b.sample_her(1000, &HerConfig::default(), &tol, &w, &mut rng).unwrap())
            .collect();
        let relabeled: Vec<_> = batch.iter().filter(|t| t.goal.x != -1.9).collect();
        let frac = relabeled.len() as f64 / n as f64;
        let se = (0.8 * 0.2 / n as f64).sqrt();
        assert!((frac - 0.8).abs() < 4.0 * se, "fraction {frac}");
        for t in relabeled {
            // The goal is a pose reached no earlier than this step.
            assert!(t.goal.x >= t.achieved_state.x - 1e-12);
            assert_eq!(t.observation.0[4], t.goal.x / 2.0);
            assert_eq!(t.done, t.success);
        }
    }

    #[test]
    fn recomputed_rewards_match_oracle() {
        let mut b = ReplayBuffer::new(1000).unwrap();
        b.push_episode(&episode(30, 0.0)).unwrap();
        let tol = Tolerances::new(0.05, 0.1).unwrap();
        let w = RewardWeights::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let batch: Vec<_> = (0..100)
            .flat_map(|_| b.sample_her(20, &HerConfig::default(), &tol, &w, &mut rng).unwrap())
            .collect();
        let mut successes = 0;
        for t in &batch {
            let (ep, et) = errors(&t.achieved_state, &t.goal);
            let success = ep < tol.eps_p && et < tol.eps_theta;
            let lambda = if success { 0.0 } else { 1.0 };
            let expected = -(action_cost(&t.action, &t.prev_action, &w) + lambda);
            assert_eq!(t.success, success);
            assert!((t.reward - expected).abs() < 1e-12);
            successes += success as usize;
        }
        assert!(successes > 0);
    }

    #[test]
    fn her_with_zero_k_keeps_goals() {
        let mut b = ReplayBuffer::new(100).unwrap();
        b.push_episode(&episode(10, 0.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = b
            .sample_her(10, &HerConfig { k: 0 }, &Tolerances::deployment(), &RewardWeights::default(), &mut rng)
            .unwrap();
        assert!(batch.iter().all(|t| t.goal.x == -1.9));
    }

    #[test]
    fn storage_relabel_produces_k_copies() {
        let e = episode(12, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = her_relabel(&e, 4, &RewardWeights::default(), &Tolerances::deployment(), &mut rng);
        assert_eq!(out.len(), 48);
        for (n, t) in out.iter().enumerate() {
            let src = &e[n / 4];
            assert!(t.goal.x >= src.achieved_state.x - 1e-12);
            // Every relabeled goal is within 0.3 m of a 12 cm trajectory.
            assert!(t.success);
            assert!(t.done);
        }
    }
}
