//! Driving a trained goal-reaching policy along a long path.
//!
//! A dense path is thinned into sub-goals roughly a metre apart. Each policy
//! step the current sub-goal is re-expressed in the robot's own frame, so the
//! policy only ever sees goals inside the region it was trained on.

use std::io::Read;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    is_success, wrap_angle, Env, EnvConfig, Goal, Observation, RobotState, Tolerances, POLICY_DT, R_MAX, SIM_DT,
};
use crate::error::{Error, Result};
use crate::nn::policy::{sample_action, PolicyParams, SampleMode};
use crate::sysid::{Action, VelocityModel, ACTION_RANGES};

pub const DEFAULT_SPACING: f64 = 1.0;
pub const DEFAULT_RESOLUTION: f64 = 0.05;
pub const SUBGOAL_TIMEOUT_S: f64 = 60.0;

/// A dense sequence of poses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path {
    poses: Vec<Goal>,
}

#[derive(Debug, Deserialize)]
struct PoseRow {
    x: f64,
    y: f64,
    theta: f64,
}

/// A mission waypoint; without a heading the robot faces along the approach.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub theta: Option<f64>,
}

fn finite_or_err(row: usize, vals: &[f64]) -> Result<()> {
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("row {row}: non-finite coordinate")))
    }
}

impl Path {
    pub fn new(poses: Vec<Goal>) -> Result<Self> {
        if poses.len() < 2 {
            return Err(Error::InvalidInput(format!("a path needs at least 2 poses, got {}", poses.len())));
        }
        for (k, p) in poses.iter().enumerate() {
            finite_or_err(k + 1, &[p.x, p.y, p.theta])?;
        }
        Ok(Self { poses })
    }

    pub fn poses(&self) -> &[Goal] {
        &self.poses
    }

    /// Polyline length in metres.
    pub fn length(&self) -> f64 {
        self.poses.windows(2).map(|w| (w[1].x - w[0].x).hypot(w[1].y - w[0].y)).sum()
    }

    /// Parses an `x,y,theta` CSV with a header row.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut poses = Vec::new();
        for (k, row) in rdr.deserialize::<PoseRow>().enumerate() {
            let r = row?;
            finite_or_err(k + 1, &[r.x, r.y, r.theta])?;
            poses.push(Goal::new(r.x, r.y, r.theta));
        }
        Self::new(poses)
    }

    pub fn from_csv_str(s: &str) -> Result<Self> {
        Self::from_csv_reader(s.as_bytes())
    }

    pub fn to_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["x", "y", "theta"]).expect("in-memory write");
        for p in &self.poses {
            w.write_record([p.x.to_string(), p.y.to_string(), p.theta.to_string()])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    /// Straight segments from `start` through each waypoint, sampled every
    /// `resolution` metres. Poses face along their segment; a waypoint's own
    /// heading, when given, applies to its pose only.
    pub fn through_waypoints(start: &RobotState, waypoints: &[Waypoint], resolution: f64) -> Result<Self> {
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(Error::InvalidInput(format!("resolution {resolution} must be positive")));
        }
        if waypoints.is_empty() {
            return Err(Error::InvalidInput("no waypoints".into()));
        }
        let mut poses = vec![Goal::new(start.x, start.y, start.theta)];
        let (mut px, mut py) = (start.x, start.y);
        for (k, w) in waypoints.iter().enumerate() {
            finite_or_err(k + 1, &[w.x, w.y, w.theta.unwrap_or(0.0)])?;
            let (dx, dy) = (w.x - px, w.y - py);
            let len = dx.hypot(dy);
            if len == 0.0 {
                if let Some(th) = w.theta {
                    poses.last_mut().expect("non-empty").theta = wrap_angle(th);
                }
                continue;
            }
            let heading = dy.atan2(dx);
            let n = (len / resolution).ceil() as usize;
            for i in 1..=n {
                let f = i as f64 / n as f64;
                poses.push(Goal::new(px + f * dx, py + f * dy, heading));
            }
            if let Some(th) = w.theta {
                poses.last_mut().expect("non-empty").theta = wrap_angle(th);
            }
            (px, py) = (w.x, w.y);
        }
        Self::new(poses)
    }
}

/// Parses an `x,y[,theta]` waypoint CSV with a header row.
pub fn waypoints_from_csv_reader<R: Read>(reader: R) -> Result<Vec<Waypoint>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for (k, row) in rdr.deserialize::<Waypoint>().enumerate() {
        let w = row?;
        finite_or_err(k + 1, &[w.x, w.y, w.theta.unwrap_or(0.0)])?;
        out.push(w);
    }
    if out.is_empty() {
        return Err(Error::InvalidInput("waypoint file has no rows".into()));
    }
    Ok(out)
}

pub fn waypoints_from_csv_str(s: &str) -> Result<Vec<Waypoint>> {
    waypoints_from_csv_reader(s.as_bytes())
}

/// Sub-goals visited in order, all with the same tolerances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubGoalPlan {
    pub goals: Vec<Goal>,
    pub tolerances: Tolerances,
}

/// Greedy arc-length thinning: a sub-goal each time the distance walked
/// since the last one reaches `spacing`, plus the final pose.
pub fn undersample(path: &Path, spacing: f64) -> Result<SubGoalPlan> {
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(Error::InvalidInput(format!("spacing {spacing} must be positive")));
    }
    let poses = path.poses();
    let mut goals = Vec::new();
    let mut since = 0.0;
    for w in poses.windows(2) {
        since += (w[1].x - w[0].x).hypot(w[1].y - w[0].y);
        // Tolerate the rounding of accumulated grid steps.
        if since >= spacing - 1e-9 {
            goals.push(w[1]);
            since = 0.0;
        }
    }
    let last = *poses.last().expect("paths have at least two poses");
    if goals.last() != Some(&last) {
        goals.push(last);
    }
    Ok(SubGoalPlan {
        goals,
        tolerances: Tolerances::deployment(),
    })
}

/// `goal` as seen from `state`: robot at the origin facing +x. Goals farther
/// than the training radius are pulled in along their bearing.
pub fn relative_goal(state: &RobotState, goal: &Goal) -> Goal {
    let (dx, dy) = (goal.x - state.x, goal.y - state.y);
    let (s, c) = state.theta.sin_cos();
    let (mut x, mut y) = (c * dx + s * dy, -s * dx + c * dy);
    let r = x.hypot(y);
    if r > R_MAX {
        x *= R_MAX / r;
        y *= R_MAX / r;
    }
    Goal::new(x, y, goal.theta - state.theta)
}

/// Clamps `a` to the ranges limited by `cap`, then shrinks the planar part
/// until the model predicts a planar speed no greater than `cap`.
pub fn apply_speed_cap(a: &Action, cap: f64, model: &VelocityModel) -> Action {
    let a = ACTION_RANGES.capped(cap).clamp(a);
    let speed = |b: &Action| model.predict_unchecked(b).planar_speed();
    if speed(&a) <= cap {
        return a;
    }
    let bisect = |scale: &dyn Fn(f64) -> Action| {
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if speed(&scale(mid)) <= cap {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        scale(lo)
    };
    let planar = |s: f64| Action::new(a.a_x * s, a.a_y * s, a.a_theta);
    if speed(&planar(0.0)) <= cap {
        bisect(&planar)
    } else {
        bisect(&|s: f64| Action::new(a.a_x * s, a.a_y * s, a.a_theta * s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FollowOptions {
    pub speed_cap: f64,
    /// Per sub-goal time limit in seconds.
    pub timeout_s: f64,
    pub seed: u64,
}

impl Default for FollowOptions {
    fn default() -> Self {
        Self {
            speed_cap: 1.0,
            timeout_s: SUBGOAL_TIMEOUT_S,
            seed: 0,
        }
    }
}

/// One simulator substep of an executed run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FollowRecord {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub a_x: f64,
    pub a_y: f64,
    pub a_theta: f64,
    /// Index of the sub-goal being pursued.
    pub subgoal: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub path_length_m: f64,
    pub duration_s: f64,
    pub average_speed_mps: f64,
    /// Arrival time of each sub-goal reached.
    pub subgoal_times: Vec<f64>,
}

impl RunMetrics {
    fn new(path_length_m: f64, duration_s: f64, subgoal_times: Vec<f64>) -> Self {
        let average_speed_mps = if duration_s > 0.0 { path_length_m / duration_s } else { 0.0 };
        Self {
            path_length_m,
            duration_s,
            average_speed_mps,
            subgoal_times,
        }
    }
}

/// Runs the deterministic policy through `plan` from `start`. The trace has
/// the start pose followed by every substep.
pub fn follow(
    plan: &SubGoalPlan,
    params: &PolicyParams,
    env_cfg: &EnvConfig,
    model: &VelocityModel,
    start: &RobotState,
    opts: &FollowOptions,
) -> Result<(Vec<FollowRecord>, RunMetrics)> {
    if plan.goals.is_empty() {
        return Err(Error::InvalidInput("empty sub-goal plan".into()));
    }
    if !(opts.speed_cap > 0.0 && opts.speed_cap.is_finite()) {
        return Err(Error::InvalidInput(format!("speed cap {} must be positive", opts.speed_cap)));
    }
    if !(opts.timeout_s > 0.0 && opts.timeout_s.is_finite()) {
        return Err(Error::InvalidInput(format!("timeout {} must be positive", opts.timeout_s)));
    }
    let tol = plan.tolerances;
    tol.validate()?;
    let mut env = Env::new(env_cfg.clone(), model.clone())?;
    env.set_tolerances(tol);
    env.reset_to(*start, plan.goals[0], opts.seed);
    // Deterministic actions draw nothing; the generator only satisfies the signature.
    let mut unused_rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut trace = vec![FollowRecord {
        t: 0.0,
        x: start.x,
        y: start.y,
        theta: start.theta,
        a_x: 0.0,
        a_y: 0.0,
        a_theta: 0.0,
        subgoal: 0,
    }];
    let mut times = Vec::with_capacity(plan.goals.len());
    let mut distance = 0.0;
    let mut steps = 0usize;
    let mut idx = 0;
    let mut subgoal_start = 0usize;
    let mut last_arrival: Option<usize> = None;
    let max_steps = (opts.timeout_s / POLICY_DT).ceil() as usize;

    while idx < plan.goals.len() {
        let goal = plan.goals[idx];
        if last_arrival != Some(steps) && is_success(&env.state(), &goal, &tol) {
            times.push(steps as f64 * POLICY_DT);
            last_arrival = Some(steps);
            idx += 1;
            subgoal_start = steps;
            continue;
        }
        if steps - subgoal_start >= max_steps {
            let t = steps as f64 * POLICY_DT;
            return Err(Error::FollowFailed {
                subgoal: idx,
                timeout_s: opts.timeout_s,
                partial: Box::new(RunMetrics::new(distance, t, times)),
            });
        }
        env.set_goal(goal);
        let (x, y, th) = env.pose_estimate();
        let rel = relative_goal(&RobotState { x, y, theta: th }, &goal);
        let obs = Observation::encode(0.0, 0.0, 0.0, &rel);
        let (raw, _) = sample_action(params, &obs, SampleMode::Deterministic, &mut unused_rng)?;
        let a = apply_speed_cap(&raw, opts.speed_cap, model);
        let r = env.step(&a)?;
        for (k, p) in r.substeps.iter().enumerate() {
            trace.push(FollowRecord {
                t: steps as f64 * POLICY_DT + (k + 1) as f64 * SIM_DT,
                x: p.x,
                y: p.y,
                theta: p.theta,
                a_x: a.a_x,
                a_y: a.a_y,
                a_theta: a.a_theta,
                subgoal: idx,
            });
        }
        distance += r.distance;
        steps += 1;
    }
    let duration = times.last().copied().unwrap_or(0.0);
    Ok((trace, RunMetrics::new(distance, duration, times)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::errors;
    use crate::nn::policy::SacHyper;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn straight(n: usize, step: f64) -> Path {
        Path::new((0..n).map(|k| Goal::new(k as f64 * step, 0.0, 0.0)).collect()).unwrap()
    }

    #[test]
    fn undersample_examples() {
        let plan = undersample(&straight(25, 0.05), 1.0).unwrap();
        let xs: Vec<f64> = plan.goals.iter().map(|g| g.x).collect();
        assert_eq!(xs.len(), 2);
        assert!((xs[0] - 1.0).abs() < 1e-12 && (xs[1] - 1.2).abs() < 1e-12);

        let plan = undersample(&straight(5, 0.05), 1.0).unwrap();
        assert_eq!(plan.goals, vec![Goal::new(0.2, 0.0, 0.0)]);

        let path = straight(10, 0.05);
        let plan = undersample(&path, 0.05).unwrap();
        assert_eq!(plan.goals, path.poses()[1..].to_vec());
        assert_eq!(plan.tolerances, Tolerances::deployment());
    }

    #[test]
    fn degenerate_inputs_rejected() {
        assert!(Path::new(vec![Goal::default()]).is_err());
        assert!(Path::new(vec![Goal::default(), Goal::new(f64::NAN, 0.0, 0.0)]).is_err());
        assert!(undersample(&straight(3, 0.1), 0.0).is_err());
        assert!(Path::from_csv_str("x,y,theta\n0,0,0\n").is_err());
        assert!(Path::from_csv_str("x,y\n0,0\n1,1\n").is_err());
        assert!(Path::from_csv_str("x,y,theta\n0,0,0\n1,inf,0\n").is_err());
        assert!(waypoints_from_csv_str("x,y\n").is_err());
    }

    #[test]
    fn relative_goal_examples() {
        let g = relative_goal(&RobotState::new(5.0, 5.0, 0.0), &Goal::new(6.0, 5.0, 0.0));
        assert!((g.x - 1.0).abs() < 1e-12 && g.y.abs() < 1e-12 && g.theta.abs() < 1e-12);
        let g = relative_goal(&RobotState::new(0.0, 0.0, PI / 2.0), &Goal::new(0.0, 1.0, PI / 2.0));
        assert!((g.x - 1.0).abs() < 1e-12 && g.y.abs() < 1e-12 && g.theta.abs() < 1e-12);
        let g = relative_goal(&RobotState::new(0.0, 0.0, 0.0), &Goal::new(3.0, 0.0, 0.0));
        assert!((g.x - 2.0).abs() < 1e-12 && g.y.abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn relative_goal_preserves_errors(
            x in -50.0..50.0f64, y in -50.0..50.0f64, th in -3.1..3.1f64,
            dx in -1.9..1.9f64, dy in -1.9..1.9f64, gth in -3.1..3.1f64,
        ) {
            prop_assume!(dx.hypot(dy) < R_MAX);
            let s = RobotState::new(x, y, th);
            let g = Goal::new(x + dx, y + dy, gth);
            let rel = relative_goal(&s, &g);
            let (ep, et) = errors(&s, &g);
            let (rp, rt) = errors(&RobotState::default(), &rel);
            prop_assert!((ep - rp).abs() < 1e-9);
            prop_assert!((et - rt).abs() < 1e-9);
        }

        #[test]
        fn speed_cap_is_respected(ax in -2.0..2.0f64, ay in -2.0..2.0f64, at in -2.0..2.0f64, cap in 0.1..1.5f64) {
            let model = VelocityModel::reference_asymmetric();
            let a = apply_speed_cap(&Action::new(ax, ay, at), cap, &model);
            prop_assert!(ACTION_RANGES.capped(cap).contains(&a));
            prop_assert!(model.predict(&a).unwrap().planar_speed() <= cap + 1e-12);
        }
    }

    #[test]
    fn waypoint_path_synthesis() {
        let wps = waypoints_from_csv_str("x,y\n1,0\n1,1\n").unwrap();
        let path = Path::through_waypoints(&RobotState::default(), &wps, 0.05).unwrap();
        assert!((path.length() - 2.0).abs() < 1e-12);
        assert_eq!(path.poses().len(), 41);
        assert!((path.poses()[40].theta - PI / 2.0).abs() < 1e-12);
        let wps = waypoints_from_csv_str("x,y,theta\n1,0,3.0\n").unwrap();
        let path = Path::through_waypoints(&RobotState::default(), &wps, 0.3).unwrap();
        assert_eq!(path.poses().last().unwrap().theta, 3.0);
        let back = Path::from_csv_str(&path.to_csv_string()).unwrap();
        assert_eq!(back, path);
    }

    #[test]
    fn identity_goal_is_immediate() {
        let hyper = SacHyper::default();
        let params = PolicyParams::new(&hyper, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let plan = SubGoalPlan {
            goals: vec![Goal::default()],
            tolerances: Tolerances::deployment(),
        };
        let (trace, m) = follow(
            &plan,
            &params,
            &EnvConfig::default(),
            &VelocityModel::reference_asymmetric(),
            &RobotState::default(),
            &FollowOptions::default(),
        )
        .unwrap();
        assert_eq!(trace.len(), 1);
        assert_eq!(m.path_length_m, 0.0);
        assert_eq!(m.subgoal_times, vec![0.0]);
        assert_eq!(m.average_speed_mps, 0.0);
    }

    #[test]
    fn unreachable_goal_times_out_with_partial_metrics() {
        // A zero actor drives at the range midpoint: straight ahead, never turning.
        let hyper = SacHyper::default();
        let mut params = PolicyParams::new(&hyper, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        params.actor = crate::nn::mlp::Mlp::zeros(&hyper.actor_sizes()).unwrap();
        let plan = SubGoalPlan {
            goals: vec![Goal::new(0.0, 1.5, PI / 2.0)],
            tolerances: Tolerances::deployment(),
        };
        let opts = FollowOptions {
            timeout_s: 2.0,
            ..FollowOptions::default()
        };
        let err = follow(
            &plan,
            &params,
            &EnvConfig::default(),
            &VelocityModel::reference_asymmetric(),
            &RobotState::default(),
            &opts,
        )
        .unwrap_err();
        match err {
            Error::FollowFailed { subgoal, timeout_s, partial } => {
                assert_eq!(subgoal, 0);
                assert_eq!(timeout_s, 2.0);
                assert!((partial.duration_s - 2.0).abs() < 1e-12);
                assert!(partial.path_length_m > 0.0);
                assert!(partial.subgoal_times.is_empty());
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
