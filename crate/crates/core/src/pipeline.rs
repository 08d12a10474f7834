//! Staged training and evaluation with numeric pass gates.
//!
//! Each stage takes a policy and hands one on. Training stages train in
//! fixed-size attempts and re-check their gate after each, continuing with
//! the same learner until the gate passes or the attempts run out.
//! Evaluation stages never touch the policy.
//!
//! A run directory holds everything needed to reproduce it:
//!
//! ```text
//! manifest.json            what was run, with which seed
//! model.json               the velocity model used
//! checkpoints/stage-<n>.ckpt
//! reports/stage-<n>.json
//! traces/stage-<n>.jsonl   evaluation episodes, one step per line
//! logs/stage-<n>.jsonl     training episodes and curriculum promotions
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::curriculum::PromotionEvent;
use crate::dynamics::{EnvConfig, RobotState, Tolerances, TraceRecord, OBS_DIM};
use crate::error::{Error, Result};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::policy::{PolicyParams, SacHyper, SampleMode, ACT_DIM};
use crate::pathfollow::{
    follow, undersample, waypoints_from_csv_reader, FollowOptions, Path as FollowPath, RunMetrics, DEFAULT_RESOLUTION,
    DEFAULT_SPACING,
};
use crate::sysid::VelocityModel;
use crate::train::{derive_seed, evaluate, initial_params, streams, EvalOptions, EvalReport, TrainConfig, Trainer};

/// Seed stream for per-stage seeds.
const STAGE_STREAM: u64 = 16;
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageKind {
    CoreTrain,
    CoreEval,
    SurrogateEval,
    SurrogateFinetune,
}

impl StageKind {
    pub fn trains(self) -> bool {
        matches!(self, StageKind::CoreTrain | StageKind::SurrogateFinetune)
    }

    pub fn uses_surrogate(self) -> bool {
        matches!(self, StageKind::SurrogateEval | StageKind::SurrogateFinetune)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateMetric {
    SuccessRate,
    MeanReturn,
}

/// Pass criterion: `metric >= threshold` over `episodes` deterministic
/// episodes at `tolerances`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Gate {
    pub metric: GateMetric,
    pub threshold: f64,
    pub episodes: usize,
    pub tolerances: Tolerances,
}

impl Default for Gate {
    fn default() -> Self {
        Self {
            metric: GateMetric::SuccessRate,
            threshold: 0.95,
            episodes: 100,
            tolerances: Tolerances::deployment(),
        }
    }
}

impl Gate {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::Config("gate needs at least one episode".into()));
        }
        if !self.threshold.is_finite() {
            return Err(Error::Config("gate threshold must be finite".into()));
        }
        if self.metric == GateMetric::SuccessRate && !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "success-rate threshold {} must lie in [0, 1]",
                self.threshold
            )));
        }
        self.tolerances.validate()
    }

    pub fn metric_value(&self, r: &EvalReport) -> f64 {
        match self.metric {
            GateMetric::SuccessRate => r.success_rate,
            GateMetric::MeanReturn => r.mean_return,
        }
    }

    pub fn passes(&self, value: f64) -> bool {
        value >= self.threshold
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub kind: StageKind,
    #[serde(default)]
    pub env: EnvConfig,
    /// Learner settings; ignored by evaluation stages.
    #[serde(default)]
    pub train: TrainConfig,
    /// Environment steps per attempt for training stages; episodes for
    /// evaluation stages.
    pub budget: u64,
    #[serde(default)]
    pub gate: Gate,
    /// Attempts before a training stage gives up.
    #[serde(default = "default_repeats")]
    pub max_repeats: usize,
}

fn default_repeats() -> usize {
    1
}

impl StageSpec {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::Config("stage budget must be positive".into()));
        }
        if self.max_repeats == 0 {
            return Err(Error::Config("max_repeats must be at least 1".into()));
        }
        self.gate.validate()?;
        if self.kind.uses_surrogate() && self.env.surrogate.is_none() {
            return Err(Error::Config(format!("{:?} stage needs env.surrogate", self.kind)));
        }
        if self.kind.trains() {
            self.train.validate(&self.env)
        } else {
            self.env.validate()
        }
    }
}

/// One gate check inside a stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttemptSummary {
    pub attempt: usize,
    /// Training steps taken in the stage so far.
    pub steps: u64,
    pub metric: f64,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub kind: StageKind,
    pub seed: u64,
    pub gate: Gate,
    pub metric: f64,
    pub passed: bool,
    pub attempts: usize,
    pub steps_trained: u64,
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_return: f64,
    pub mean_episode_length: f64,
    pub mean_final_e_p: f64,
    pub mean_final_e_theta: f64,
    pub history: Vec<AttemptSummary>,
    pub promotions: Vec<PromotionEvent>,
    /// Curriculum tolerances at the end of training, if the stage trained.
    pub final_tolerances: Option<Tolerances>,
    /// Evaluation trace, relative to the run directory.
    pub trace: Option<String>,
}

impl StageReport {
    fn from_eval(stage: usize, spec: &StageSpec, seed: u64, eval: &EvalReport) -> Self {
        let metric = spec.gate.metric_value(eval);
        Self {
            stage,
            kind: spec.kind,
            seed,
            gate: spec.gate,
            metric,
            passed: spec.gate.passes(metric),
            attempts: 1,
            steps_trained: 0,
            episodes: eval.episodes,
            success_rate: eval.success_rate,
            mean_return: eval.mean_return,
            mean_episode_length: eval.mean_steps,
            mean_final_e_p: eval.mean_final_e_p,
            mean_final_e_theta: eval.mean_final_e_theta,
            history: Vec::new(),
            promotions: Vec::new(),
            final_tolerances: None,
            trace: None,
        }
    }
}

/// Where a stage writes its side outputs; all optional.
#[derive(Default)]
pub struct StageSinks<'a> {
    /// Every evaluation step of the final gate check.
    pub trace: Option<&'a mut dyn Write>,
    /// Training episode summaries, one JSON object per line.
    pub log: Option<&'a mut dyn Write>,
}

fn check_policy_dims(policy: &PolicyParams) -> Result<()> {
    if policy.actor.input_dim() != OBS_DIM || policy.actor.output_dim() != 2 * ACT_DIM {
        return Err(Error::Config(format!(
            "actor maps {} -> {}, the environment needs {} -> {}",
            policy.actor.input_dim(),
            policy.actor.output_dim(),
            OBS_DIM,
            2 * ACT_DIM
        )));
    }
    Ok(())
}

fn gate_eval(
    policy: &PolicyParams,
    spec: &StageSpec,
    model: &VelocityModel,
    seed: u64,
    stream: u64,
    episodes: usize,
    trace: Option<&mut dyn Write>,
) -> Result<EvalReport> {
    let opts = EvalOptions {
        episodes,
        seed,
        stream,
        tolerances: spec.gate.tolerances,
        mode: SampleMode::Deterministic,
    };
    match trace {
        None => evaluate(policy, &spec.env, model, &opts, |_, _| {}),
        Some(w) => {
            let mut io_err = None;
            let report = evaluate(policy, &spec.env, model, &opts, |episode, rec| {
                if io_err.is_none() {
                    if let Err(e) = write_trace_line(w, episode, rec) {
                        io_err = Some(e);
                    }
                }
            })?;
            match io_err {
                Some(e) => Err(e),
                None => Ok(report),
            }
        }
    }
}

fn write_trace_line(w: &mut dyn Write, episode: usize, rec: &TraceRecord) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        episode: usize,
        #[serde(flatten)]
        rec: &'a TraceRecord,
    }
    serde_json::to_writer(&mut *w, &Line { episode, rec })?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Runs one stage. Training stages return the trained policy (even when the
/// gate fails, inside the error's report); evaluation stages return
/// `policy_in` unchanged.
pub fn run_stage(
    stage: usize,
    spec: &StageSpec,
    policy_in: &PolicyParams,
    model: &VelocityModel,
    seed: u64,
    sinks: StageSinks<'_>,
) -> Result<(PolicyParams, StageReport)> {
    spec.validate()?;
    check_policy_dims(policy_in)?;
    if !spec.kind.trains() {
        let eval = gate_eval(policy_in, spec, model, seed, streams::EVAL_EPISODES, spec.budget as usize, sinks.trace)?;
        let report = StageReport::from_eval(stage, spec, seed, &eval);
        log::info!(
            "stage {stage} ({:?}): {:?} = {:.4} (threshold {:.4})",
            spec.kind,
            spec.gate.metric,
            report.metric,
            spec.gate.threshold
        );
        if !report.passed {
            return Err(gate_failed(stage, report));
        }
        return Ok((policy_in.clone(), report));
    }

    let mut trainer = Trainer::with_params(spec.train.clone(), spec.env.clone(), model.clone(), seed, policy_in.clone())?;
    let mut log = sinks.log;
    let mut history = Vec::new();
    let cap = spec.train.sac.total_steps as u64;
    for attempt in 1..=spec.max_repeats {
        let budget = spec.budget.min(cap.saturating_sub(trainer.step()));
        if budget > 0 {
            let mut io_err = None;
            trainer.train(budget, |e| {
                if let (Some(w), None) = (log.as_mut(), &io_err) {
                    let line = serde_json::to_string(e).expect("summary serializes");
                    if let Err(err) = writeln!(w, "{line}") {
                        io_err = Some(err);
                    }
                }
                if let Some(p) = &e.promotion {
                    log::info!("stage {stage}: tolerances {:.4} m / {:.4} rad", p.new_eps_p, p.new_eps_theta);
                }
            })?;
            if let Some(e) = io_err {
                return Err(e.into());
            }
        }
        let validation = gate_eval(
            trainer.params(),
            spec,
            model,
            seed,
            streams::VALIDATION_EPISODES,
            spec.gate.episodes,
            None,
        )?;
        let metric = spec.gate.metric_value(&validation);
        history.push(AttemptSummary {
            attempt,
            steps: trainer.step(),
            metric,
            success_rate: validation.success_rate,
        });
        log::info!(
            "stage {stage} attempt {attempt}: {} steps, {:?} = {metric:.4}",
            trainer.step(),
            spec.gate.metric
        );
        let last = attempt == spec.max_repeats || trainer.step() >= cap;
        if spec.gate.passes(metric) || last {
            let mut report = StageReport::from_eval(stage, spec, seed, &validation);
            report.attempts = attempt;
            report.steps_trained = trainer.step();
            report.history = history;
            report.promotions = trainer.curriculum().events().to_vec();
            report.final_tolerances = Some(trainer.curriculum().tolerances());
            if let Some(w) = sinks.trace {
                // Re-run the validation episodes to record them; evaluation is deterministic.
                gate_eval(trainer.params(), spec, model, seed, streams::VALIDATION_EPISODES, spec.gate.episodes, Some(w))?;
            }
            if !report.passed {
                return Err(gate_failed(stage, report));
            }
            return Ok((trainer.params().clone(), report));
        }
    }
    unreachable!("the final attempt always returns")
}

fn gate_failed(stage: usize, report: StageReport) -> Error {
    Error::GateFailed {
        stage,
        attempts: report.attempts,
        metric: format!("{:?}", report.gate.metric),
        value: report.metric,
        threshold: report.gate.threshold,
        report: Box::new(report),
    }
}

/// A full pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Velocity model; the reference model is used when absent. A stage's
    /// own `env.model_path` overrides it for that stage.
    #[serde(default)]
    pub model_path: Option<PathBuf>,
    /// Starting policy; fresh networks when absent.
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    /// Network shapes for fresh policies.
    #[serde(default)]
    pub sac: SacHyper,
    pub stages: Vec<StageSpec>,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("pipeline has no stages".into()));
        }
        self.sac.validate()?;
        if let Some(p) = &self.model_path {
            require_file("model", p)?;
        }
        if let Some(p) = &self.init_checkpoint {
            require_file("checkpoint", p)?;
        }
        for (n, s) in self.stages.iter().enumerate() {
            s.validate()
                .and_then(|_| s.env.model_path.as_deref().map_or(Ok(()), |p| require_file("model", p)))
                .map_err(|e| Error::Stage {
                    stage: n,
                    source: Box::new(e),
                })?;
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }
}

/// The command a run directory came from, with a snapshot of its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RunCommand {
    Pipeline {
        config: PipelineConfig,
    },
    Eval {
        checkpoint: PathBuf,
        env: EnvConfig,
        options: EvalOptions,
    },
    Follow {
        job: FollowJob,
    },
}

impl RunCommand {
    pub fn seed(&self) -> u64 {
        match self {
            RunCommand::Pipeline { config } => config.seed,
            RunCommand::Eval { options, .. } => options.seed,
            RunCommand::Follow { job } => job.options.seed,
        }
    }
}

/// Record of what produced a run directory; enough to run it again. The
/// timestamps are the only part of a run that is not reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub tool_version: String,
    pub seed: u64,
    pub run: RunCommand,
    /// Files written, relative to the run directory.
    pub artifacts: Vec<String>,
    pub started_unix_s: u64,
    pub finished_unix_s: Option<u64>,
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

impl Manifest {
    pub fn new(run: RunCommand) -> Self {
        Self {
            version: MANIFEST_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: run.seed(),
            run,
            artifacts: Vec::new(),
            started_unix_s: unix_now(),
            finished_unix_s: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::InvalidInput(format!("manifest version {} is not supported", m.version)));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// Stamps the end time and rewrites `<dir>/manifest.json`.
    fn finish(mut self, dir: &Path, artifacts: Vec<String>) -> Result<()> {
        self.artifacts = artifacts;
        self.finished_unix_s = Some(unix_now());
        self.save(&dir.join("manifest.json"))
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn require_file(what: &str, path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} does not exist", path.display())))
    }
}

/// Evaluates a checkpoint and writes `manifest.json`, `report.json` and
/// `trace.jsonl` under `out_dir`. The model comes from `env.model_path`, or
/// the reference model.
pub fn run_eval(checkpoint: &Path, env: &EnvConfig, options: &EvalOptions, out_dir: &Path) -> Result<EvalReport> {
    env.validate()?;
    require_file("checkpoint", checkpoint)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    check_policy_dims(&ckpt.params)?;
    let model = load_model(env.model_path.as_deref())?;
    fs::create_dir_all(out_dir)?;
    let manifest = Manifest::new(RunCommand::Eval {
        checkpoint: checkpoint.to_path_buf(),
        env: env.clone(),
        options: *options,
    });
    manifest.save(&out_dir.join("manifest.json"))?;
    let mut trace = BufWriter::new(fs::File::create(out_dir.join("trace.jsonl"))?);
    let mut io_err = None;
    let report = evaluate(&ckpt.params, env, &model, options, |episode, rec| {
        if io_err.is_none() {
            if let Err(e) = write_trace_line(&mut trace, episode, rec) {
                io_err = Some(e);
            }
        }
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    trace.flush()?;
    write_json(&out_dir.join("report.json"), &report)?;
    manifest.finish(out_dir, vec!["report.json".into(), "trace.jsonl".into()])?;
    Ok(report)
}

/// Where a followed path comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum Mission {
    /// Dense `x,y,theta` path CSV.
    Path(PathBuf),
    /// `x,y[,theta]` waypoint CSV, joined by straight segments.
    Waypoints(PathBuf),
}

/// A path-following run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FollowJob {
    pub checkpoint: PathBuf,
    pub mission: Mission,
    /// Initial pose; the first path pose, or the origin for waypoint missions.
    #[serde(default)]
    pub start: Option<RobotState>,
    #[serde(default = "default_spacing")]
    pub spacing: f64,
    #[serde(default = "Tolerances::deployment")]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub options: FollowOptions,
}

fn default_spacing() -> f64 {
    DEFAULT_SPACING
}

impl FollowJob {
    pub fn new(checkpoint: PathBuf, mission: Mission) -> Self {
        Self {
            checkpoint,
            mission,
            start: None,
            spacing: DEFAULT_SPACING,
            tolerances: Tolerances::deployment(),
            env: EnvConfig::default(),
            options: FollowOptions::default(),
        }
    }
}

/// Follows a mission with a checkpointed policy. Writes `path.csv`,
/// `subgoals.csv`, `trace.csv` and `metrics.json` under `out_dir`; a timed-out
/// run still leaves its partial metrics.
pub fn run_follow(job: &FollowJob, out_dir: &Path) -> Result<RunMetrics> {
    job.env.validate()?;
    job.tolerances.validate()?;
    require_file("checkpoint", &job.checkpoint)?;
    let ckpt = Checkpoint::load(&job.checkpoint)?;
    check_policy_dims(&ckpt.params)?;
    let model = load_model(job.env.model_path.as_deref())?;
    let (path, start) = match &job.mission {
        Mission::Path(p) => {
            require_file("path", p)?;
            let path = FollowPath::from_csv_reader(fs::File::open(p)?)?;
            let first = path.poses()[0];
            let start = job.start.unwrap_or(RobotState::new(first.x, first.y, first.theta));
            (path, start)
        }
        Mission::Waypoints(p) => {
            require_file("waypoints", p)?;
            let wps = waypoints_from_csv_reader(fs::File::open(p)?)?;
            let start = job.start.unwrap_or_default();
            (FollowPath::through_waypoints(&start, &wps, DEFAULT_RESOLUTION)?, start)
        }
    };
    let mut plan = undersample(&path, job.spacing)?;
    plan.tolerances = job.tolerances;

    fs::create_dir_all(out_dir)?;
    let manifest = Manifest::new(RunCommand::Follow { job: job.clone() });
    manifest.save(&out_dir.join("manifest.json"))?;
    fs::write(out_dir.join("path.csv"), path.to_csv_string())?;
    let mut goals = csv::Writer::from_path(out_dir.join("subgoals.csv"))?;
    for g in &plan.goals {
        goals.serialize(g)?;
    }
    goals.flush()?;

    let metrics = match follow(&plan, &ckpt.params, &job.env, &model, &start, &job.options) {
        Ok((trace, metrics)) => {
            let mut w = csv::Writer::from_path(out_dir.join("trace.csv"))?;
            for r in &trace {
                w.serialize(r)?;
            }
            w.flush()?;
            metrics
        }
        Err(Error::FollowFailed {
            subgoal,
            timeout_s,
            partial,
        }) => {
            write_json(&out_dir.join("metrics.json"), &partial)?;
            return Err(Error::FollowFailed {
                subgoal,
                timeout_s,
                partial,
            });
        }
        Err(e) => return Err(e),
    };
    write_json(&out_dir.join("metrics.json"), &metrics)?;
    manifest.finish(
        out_dir,
        ["path.csv", "subgoals.csv", "trace.csv", "metrics.json"].map(String::from).to_vec(),
    )?;
    Ok(metrics)
}

/// Repeats the run recorded in a manifest, writing into `out_dir`.
pub fn rerun(manifest: &Manifest, out_dir: &Path) -> Result<()> {
    match &manifest.run {
        RunCommand::Pipeline { config } => run_pipeline(config, out_dir).map(|_| ()),
        RunCommand::Eval {
            checkpoint, env, options, ..
        } => run_eval(checkpoint, env, options, out_dir).map(|_| ()),
        RunCommand::Follow { job } => run_follow(job, out_dir).map(|_| ()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    pub policy: PolicyParams,
    pub reports: Vec<StageReport>,
    pub final_checkpoint: PathBuf,
}

/// Loads the model named by the config, or the reference model.
pub fn load_model(path: Option<&Path>) -> Result<VelocityModel> {
    match path {
        Some(p) => VelocityModel::load(p),
        None => Ok(VelocityModel::reference_asymmetric()),
    }
}

/// Runs every stage in order under `out_dir`. A stage that exhausts its
/// attempts stops the pipeline; its report is still written.
pub fn run_pipeline(cfg: &PipelineConfig, out_dir: &Path) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let model = load_model(cfg.model_path.as_deref())?;
    let mut policy = match &cfg.init_checkpoint {
        Some(p) => Checkpoint::load(p)?.params,
        None => initial_params(&cfg.sac, cfg.seed)?,
    };
    fs::create_dir_all(out_dir)?;
    let manifest = Manifest::new(RunCommand::Pipeline { config: cfg.clone() });
    manifest.save(&out_dir.join("manifest.json"))?;
    let mut artifacts = vec!["model.json".to_string()];
    fs::write(out_dir.join("model.json"), model.to_json_string())?;
    for dir in ["checkpoints", "reports", "traces", "logs"] {
        fs::create_dir_all(out_dir.join(dir))?;
    }

    let mut reports = Vec::new();
    let mut final_checkpoint = PathBuf::new();
    for (n, spec) in cfg.stages.iter().enumerate() {
        let seed = derive_seed(cfg.seed, STAGE_STREAM, n as u64);
        let trace_rel = format!("traces/stage-{n}.jsonl");
        let mut trace = BufWriter::new(fs::File::create(out_dir.join(&trace_rel))?);
        let mut log = BufWriter::new(fs::File::create(out_dir.join(format!("logs/stage-{n}.jsonl")))?);
        let sinks = StageSinks {
            trace: Some(&mut trace),
            log: Some(&mut log),
        };
        let result = spec
            .env
            .resolve_model(&model)
            .and_then(|m| run_stage(n, spec, &policy, &m, seed, sinks));
        trace.flush()?;
        log.flush()?;
        let report_rel = format!("reports/stage-{n}.json");
        let report_path = out_dir.join(&report_rel);
        artifacts.push(trace_rel.clone());
        artifacts.push(format!("logs/stage-{n}.jsonl"));
        match result {
            Ok((p, mut report)) => {
                report.trace = Some(trace_rel);
                write_json(&report_path, &report)?;
                let hyper = if spec.kind.trains() { spec.train.sac.clone() } else { cfg.sac.clone() };
                let ckpt = Checkpoint {
                    params: p.clone(),
                    hyper,
                    step: report.steps_trained,
                    tolerances: report.final_tolerances.unwrap_or(spec.gate.tolerances),
                    rng: None,
                };
                let ckpt_rel = format!("checkpoints/stage-{n}.ckpt");
                final_checkpoint = out_dir.join(&ckpt_rel);
                ckpt.save(&final_checkpoint)?;
                artifacts.push(report_rel);
                artifacts.push(ckpt_rel);
                policy = p;
                reports.push(report);
            }
            Err(Error::GateFailed {
                stage,
                attempts,
                metric,
                value,
                threshold,
                mut report,
            }) => {
                report.trace = Some(trace_rel);
                write_json(&report_path, &report)?;
                artifacts.push(report_rel);
                manifest.finish(out_dir, artifacts)?;
                return Err(Error::GateFailed {
                    stage,
                    attempts,
                    metric,
                    value,
                    threshold,
                    report,
                });
            }
            Err(e) => {
                manifest.finish(out_dir, artifacts)?;
                return Err(Error::Stage {
                    stage: n,
                    source: Box::new(e),
                });
            }
        }
    }
    manifest.finish(out_dir, artifacts)?;
    Ok(PipelineOutcome {
        policy,
        reports,
        final_checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::SurrogateConfig;

    fn small_train() -> TrainConfig {
        TrainConfig {
            sac: SacHyper {
                batch_size: 16,
                buffer_capacity: 2000,
                actor_hidden: vec![8],
                critic_hidden: vec![8],
                ..SacHyper::default()
            },
            learning_starts: 32,
            ..TrainConfig::default()
        }
    }

    fn short_env() -> EnvConfig {
        EnvConfig {
            horizon: 30,
            ..EnvConfig::default()
        }
    }

    fn eval_spec(kind: StageKind, threshold: f64) -> StageSpec {
        let mut env = short_env();
        if kind.uses_surrogate() {
            env.surrogate = Some(SurrogateConfig::degenerate());
        }
        StageSpec {
            kind,
            env,
            train: TrainConfig::default(),
            budget: 10,
            gate: Gate {
                threshold,
                episodes: 10,
                ..Gate::default()
            },
            max_repeats: 1,
        }
    }

    fn policy() -> PolicyParams {
        initial_params(&small_train().sac, 5).unwrap()
    }

    #[test]
    fn evaluation_stage_leaves_policy_untouched() {
        let p = policy();
        let (out, report) = run_stage(
            0,
            &eval_spec(StageKind::CoreEval, 0.0),
            &p,
            &VelocityModel::reference_asymmetric(),
            1,
            StageSinks::default(),
        )
        .unwrap();
        assert_eq!(out, p);
        assert!(report.passed);
        assert_eq!(report.episodes, 10);
    }

    #[test]
    fn degenerate_surrogate_matches_core() {
        let p = policy();
        let m = VelocityModel::reference_asymmetric();
        let (_, a) = run_stage(0, &eval_spec(StageKind::CoreEval, 0.0), &p, &m, 3, StageSinks::default()).unwrap();
        let (_, b) = run_stage(0, &eval_spec(StageKind::SurrogateEval, 0.0), &p, &m, 3, StageSinks::default()).unwrap();
        assert_eq!(a.success_rate, b.success_rate);
        assert_eq!(a.mean_return, b.mean_return);
        assert_eq!(a.mean_final_e_p, b.mean_final_e_p);
    }

    #[test]
    fn gate_verdicts() {
        let g = Gate {
            threshold: 1.0,
            ..Gate::default()
        };
        assert!(g.passes(1.0));
        let g = Gate::default();
        assert!(!g.passes(0.90));
        assert!(Gate { threshold: 1.5, ..Gate::default() }.validate().is_err());
        assert!(Gate {
            metric: GateMetric::MeanReturn,
            threshold: -50.0,
            ..Gate::default()
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn failing_training_stage_repeats_then_aborts() {
        let spec = StageSpec {
            kind: StageKind::CoreTrain,
            env: short_env(),
            train: small_train(),
            budget: 60,
            gate: Gate {
                threshold: 1.0,
                episodes: 5,
                tolerances: Tolerances::precise(),
                ..Gate::default()
            },
            max_repeats: 3,
        };
        let err = run_stage(
            2,
            &spec,
            &policy(),
            &VelocityModel::reference_asymmetric(),
            0,
            StageSinks::default(),
        )
        .unwrap_err();
        match err {
            Error::GateFailed { stage, attempts, report, .. } => {
                assert_eq!(stage, 2);
                assert_eq!(attempts, 3);
                assert_eq!(report.history.len(), 3);
                assert_eq!(report.steps_trained, 180);
                assert!(!report.passed);
                assert!(report.metric < 1.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn training_respects_total_step_cap() {
        let mut train = small_train();
        train.sac.total_steps = 100;
        let spec = StageSpec {
            kind: StageKind::CoreTrain,
            env: short_env(),
            train,
            budget: 60,
            gate: Gate {
                threshold: 1.0,
                episodes: 2,
                tolerances: Tolerances::precise(),
                ..Gate::default()
            },
            max_repeats: 10,
        };
        let err = run_stage(0, &spec, &policy(), &VelocityModel::reference_asymmetric(), 0, StageSinks::default())
            .unwrap_err();
        let Error::GateFailed { attempts, report, .. } = err else {
            panic!("expected a gate failure");
        };
        assert_eq!(attempts, 2);
        assert_eq!(report.steps_trained, 100);
    }

    #[test]
    fn spec_validation() {
        let mut s = eval_spec(StageKind::SurrogateEval, 0.5);
        s.env.surrogate = None;
        assert!(s.validate().is_err());
        let mut s = eval_spec(StageKind::CoreEval, 0.5);
        s.budget = 0;
        assert!(s.validate().is_err());
        let mut s = eval_spec(StageKind::CoreEval, 0.5);
        s.max_repeats = 0;
        assert!(s.validate().is_err());
        assert!(PipelineConfig::from_json_str(r#"{"seed": 1, "stages": []}"#).is_err());
        let cfg = PipelineConfig::from_json_str(
            r#"{"seed": 1, "stages": [{"kind": "core-eval", "budget": 5, "gate": {"threshold": 0.0}}]}"#,
        )
        .unwrap();
        assert_eq!(cfg.stages[0].gate.episodes, 100);
        assert!(PipelineConfig::from_json_str(r#"{"seed": 1, "stages": [{"kind": "warp", "budget": 5}]}"#).is_err());
    }

    #[test]
    fn wrong_policy_dimensions_rejected() {
        let mut p = policy();
        p.actor = crate::nn::mlp::Mlp::zeros(&[7, 4, 6]).unwrap();
        let err = run_stage(
            0,
            &eval_spec(StageKind::CoreEval, 0.0),
            &p,
            &VelocityModel::reference_asymmetric(),
            0,
            StageSinks::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    fn pipeline_config() -> PipelineConfig {
        PipelineConfig {
            seed: 21,
            model_path: None,
            init_checkpoint: None,
            sac: small_train().sac,
            stages: vec![
                StageSpec {
                    kind: StageKind::CoreTrain,
                    env: short_env(),
                    train: small_train(),
                    budget: 120,
                    gate: Gate {
                        threshold: 0.0,
                        episodes: 4,
                        ..Gate::default()
                    },
                    max_repeats: 1,
                },
                eval_spec(StageKind::CoreEval, 0.0),
                StageSpec {
                    env: EnvConfig {
                        surrogate: Some(SurrogateConfig::transfer_default()),
                        ..short_env()
                    },
                    ..eval_spec(StageKind::SurrogateEval, 0.0)
                },
            ],
        }
    }

    #[test]
    fn pipeline_writes_run_directory_and_reproduces() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let cfg = pipeline_config();
        let out_a = run_pipeline(&cfg, a.path()).unwrap();
        let out_b = run_pipeline(&cfg, b.path()).unwrap();
        assert_eq!(out_a.reports, out_b.reports);
        assert_eq!(out_a.reports.len(), 3);
        for rel in [
            "model.json",
            "checkpoints/stage-0.ckpt",
            "checkpoints/stage-2.ckpt",
            "reports/stage-1.json",
            "traces/stage-2.jsonl",
            "logs/stage-0.jsonl",
        ] {
            let x = fs::read(a.path().join(rel)).unwrap();
            let y = fs::read(b.path().join(rel)).unwrap();
            assert_eq!(x, y, "{rel} differs");
        }
        let ckpt = Checkpoint::load(&out_a.final_checkpoint).unwrap();
        assert_eq!(ckpt.params, out_a.policy);
        // Evaluation stages hand the trained policy through unchanged.
        let first = Checkpoint::load(&a.path().join("checkpoints/stage-0.ckpt")).unwrap();
        assert_eq!(first.params, ckpt.params);
        let manifest = Manifest::load(&a.path().join("manifest.json")).unwrap();
        assert_eq!(manifest.run, RunCommand::Pipeline { config: cfg.clone() });
        assert_eq!(manifest.seed, 21);
        assert!(manifest.finished_unix_s.is_some());
        for rel in &manifest.artifacts {
            assert!(a.path().join(rel).is_file(), "{rel} listed but missing");
        }
        assert!(manifest.artifacts.contains(&"checkpoints/stage-2.ckpt".to_string()));
    }

    #[test]
    fn eval_rerun_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("p.ckpt");
        Checkpoint {
            params: policy(),
            hyper: small_train().sac,
            step: 0,
            tolerances: Tolerances::deployment(),
            rng: None,
        }
        .save(&ckpt)
        .unwrap();
        let opts = EvalOptions {
            episodes: 3,
            mode: SampleMode::Stochastic,
            ..EvalOptions::default()
        };
        let first = dir.path().join("a");
        let report = run_eval(&ckpt, &short_env(), &opts, &first).unwrap();
        assert_eq!(report.episodes, 3);
        let manifest = Manifest::load(&first.join("manifest.json")).unwrap();
        let second = dir.path().join("b");
        rerun(&manifest, &second).unwrap();
        for f in ["report.json", "trace.jsonl"] {
            assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f}");
        }
    }

    fn saved_policy(dir: &Path) -> PathBuf {
        let ckpt = dir.join("p.ckpt");
        Checkpoint {
            params: policy(),
            hyper: small_train().sac,
            step: 0,
            tolerances: Tolerances::deployment(),
            rng: None,
        }
        .save(&ckpt)
        .unwrap();
        ckpt
    }

    #[test]
    fn follow_trivial_waypoint_finishes_at_once() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = saved_policy(dir.path());
        let wps = dir.path().join("w.csv");
        fs::write(&wps, "x,y\n0.01,0\n").unwrap();
        let job = FollowJob::new(ckpt, Mission::Waypoints(wps));
        let out = dir.path().join("run");
        let m = run_follow(&job, &out).unwrap();
        assert!(m.duration_s < 1.0);
        let manifest = Manifest::load(&out.join("manifest.json")).unwrap();
        assert_eq!(manifest.run, RunCommand::Follow { job: job.clone() });
        let again = dir.path().join("again");
        rerun(&manifest, &again).unwrap();
        for f in ["path.csv", "subgoals.csv", "trace.csv", "metrics.json"] {
            assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn follow_timeout_keeps_partial_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = saved_policy(dir.path());
        let path = dir.path().join("p.csv");
        fs::write(&path, "x,y,theta\n0,0,0\n5,0,0\n").unwrap();
        let mut job = FollowJob::new(ckpt, Mission::Path(path));
        job.tolerances = Tolerances::precise();
        job.options.timeout_s = 1.0;
        let out = dir.path().join("run");
        assert!(matches!(run_follow(&job, &out), Err(Error::FollowFailed { .. })));
        let partial: RunMetrics = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
        assert!(partial.duration_s >= 1.0);
    }

    #[test]
    fn missing_files_fail_validation() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = pipeline_config();
        cfg.model_path = Some(dir.path().join("absent.json"));
        let out = dir.path().join("run");
        assert!(matches!(run_pipeline(&cfg, &out), Err(Error::Config(_))));
        // Nothing is written before validation passes.
        assert!(!out.exists());
        let mut cfg = pipeline_config();
        cfg.stages[1].env.model_path = Some(dir.path().join("absent.json"));
        assert!(matches!(cfg.validate().unwrap_err().root(), Error::Config(_)));
        let r = run_eval(&dir.path().join("none.ckpt"), &short_env(), &EvalOptions::default(), &out);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn gate_failure_still_writes_report() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = pipeline_config();
        cfg.stages[1].gate.threshold = 1.0;
        cfg.stages[1].gate.tolerances = Tolerances::precise();
        let err = run_pipeline(&cfg, dir.path()).unwrap_err();
        assert!(matches!(err, Error::GateFailed { stage: 1, .. }));
        let report: StageReport =
            serde_json::from_str(&fs::read_to_string(dir.path().join("reports/stage-1.json")).unwrap()).unwrap();
        assert!(!report.passed);
        assert!(!dir.path().join("reports/stage-2.json").exists());
    }
}
