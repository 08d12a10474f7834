//! `simstage`: identification, staged training, evaluation and path following.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or input error,
//! 3 gate failure (or a sub-goal timeout), 4 training diverged.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use simstage::dynamics::{EnvConfig, RobotState, Tolerances};
use simstage::nn::SampleMode;
use simstage::pipeline::{rerun, run_eval, run_follow, run_pipeline, FollowJob, Manifest, Mission, PipelineConfig};
use simstage::sysid::{
    fit, make_grid, residuals, synthesize_dataset, IdentificationDataset, VelocityModel, ACTION_RANGES,
    DEFAULT_GRID_COUNTS,
};
use simstage::train::EvalOptions;
use simstage::Error;

#[derive(Parser)]
#[command(name = "simstage", version, about = "Staged sim-to-real training for a planar velocity-controlled robot")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an identification dataset from a ground-truth model.
    GenData(GenDataArgs),
    /// Fit the velocity model and print per-dimension RMS residuals.
    Sysid(SysidArgs),
    /// Run a staged pipeline from a JSON config.
    Pipeline(PipelineArgs),
    /// Evaluate a checkpoint over deterministic episodes.
    Eval(EvalArgs),
    /// Follow a path or waypoint mission with a checkpoint.
    Follow(FollowArgs),
    /// Repeat a run from its manifest.
    Rerun(RerunArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Ground-truth model JSON; the built-in asymmetric model when absent.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Gaussian noise sigma added to executed velocities.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Samples per grid point.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    /// Grid points per action dimension, e.g. `9,9,9`.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<usize>>,
    #[arg(long)]
    seed: u64,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SysidArgs {
    /// Identification CSV with columns a_x,a_y,a_theta,v_x,v_y,v_theta.
    #[arg(required_unless_present = "synthetic", conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Fit noiseless data generated from the built-in model instead.
    #[arg(long, requires = "seed")]
    synthetic: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Noise sigma for `--synthetic`.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Output model JSON.
    #[arg(long)]
    out: PathBuf,
    /// Also write commanded, measured and predicted velocities as CSV.
    #[arg(long)]
    export: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the config's.
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ToleranceArgs {
    /// Position tolerance in metres.
    #[arg(long, default_value_t = 0.3)]
    tolerance_pos: f64,
    /// Heading tolerance in degrees.
    #[arg(long, default_value_t = 17.0)]
    tolerance_ang: f64,
}

impl ToleranceArgs {
    fn tolerances(&self) -> simstage::Result<Tolerances> {
        Tolerances::from_degrees(self.tolerance_pos, self.tolerance_ang)
    }
}

#[derive(Args)]
struct EnvArgs {
    /// Environment config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Velocity model JSON; overrides the config's `model_path`.
    #[arg(long)]
    model: Option<PathBuf>,
}

impl EnvArgs {
    fn env(&self) -> anyhow::Result<EnvConfig> {
        let mut env = match &self.config {
            Some(p) => EnvConfig::from_json_str(&read_input(p)?)?,
            None => EnvConfig::default(),
        };
        if let Some(m) = &self.model {
            env.model_path = Some(m.clone());
        }
        Ok(env)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    env: EnvArgs,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    tol: ToleranceArgs,
    /// Sample actions instead of using the mean.
    #[arg(long)]
    stochastic: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct FollowArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dense path CSV with columns x,y,theta.
    #[arg(long, required_unless_present = "waypoints", conflicts_with = "waypoints")]
    path: Option<PathBuf>,
    /// Waypoint CSV with columns x,y and optional theta.
    #[arg(long)]
    waypoints: Option<PathBuf>,
    #[command(flatten)]
    env: EnvArgs,
    /// Start pose `x,y,theta`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    start: Option<Vec<f64>>,
    /// Arc length between sub-goals in metres.
    #[arg(long, default_value_t = simstage::pathfollow::DEFAULT_SPACING)]
    spacing: f64,
    /// Planar speed limit in m/s.
    #[arg(long, default_value_t = 1.0)]
    speed_cap: f64,
    /// Per sub-goal time limit in seconds.
    #[arg(long, default_value_t = simstage::pathfollow::SUBGOAL_TIMEOUT_S)]
    timeout: f64,
    #[command(flatten)]
    tol: ToleranceArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct RerunArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

fn read_input(path: &Path) -> anyhow::Result<String> {
    if !path.is_file() {
        return Err(Error::InvalidInput(format!("{} does not exist", path.display())).into());
    }
    Ok(fs::read_to_string(path)?)
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn gen_data(args: &GenDataArgs) -> anyhow::Result<()> {
    let truth = match &args.truth {
        Some(p) => VelocityModel::from_json_str(&read_input(p)?)?,
        None => VelocityModel::reference_asymmetric(),
    };
    let counts = match args.grid.as_deref() {
        Some(&[a, b, c]) => [a, b, c],
        Some(_) => bail!(Error::InvalidInput("--grid takes three counts, e.g. 9,9,9".into())),
        None => DEFAULT_GRID_COUNTS,
    };
    let grid = make_grid(&ACTION_RANGES, counts)?;
    let data = synthesize_dataset(&truth, &grid, args.noise, args.repeats, args.seed)?;
    fs::write(&args.out, data.to_csv_string()).with_context(|| format!("writing {}", args.out.display()))?;
    println!("wrote {} samples to {}", data.samples.len(), args.out.display());
    Ok(())
}

fn sysid(args: &SysidArgs) -> anyhow::Result<()> {
    let data = match (&args.data, args.synthetic) {
        (Some(p), false) => IdentificationDataset::from_csv_str(&read_input(p)?)?,
        (None, true) => {
            let grid = make_grid(&ACTION_RANGES, DEFAULT_GRID_COUNTS)?;
            let seed = args.seed.expect("clap requires --seed with --synthetic");
            synthesize_dataset(&VelocityModel::reference_asymmetric(), &grid, args.noise, 1, seed)?
        }
        _ => bail!(Error::InvalidInput("give a dataset or --synthetic".into())),
    };
    let model = fit(&data)?;
    let res = residuals(&model, &data)?;
    fs::write(&args.out, model.to_json_string()).with_context(|| format!("writing {}", args.out.display()))?;
    if let Some(p) = &args.export {
        let mut w = csv::Writer::from_path(p)?;
        w.write_record(["a_x", "a_y", "a_theta", "v_x", "v_y", "v_theta", "p_x", "p_y", "p_theta"])?;
        for (a, v) in &data.samples {
            let p = model.predict(a)?;
            let row = [a.a_x, a.a_y, a.a_theta, v.v_x, v.v_y, v.v_theta, p.v_x, p.v_y, p.v_theta];
            w.write_record(row.map(|x| x.to_string()))?;
        }
        w.flush()?;
    }
    println!("samples: {}", data.samples.len());
    println!(
        "rms residual: v_x {:.3e}  v_y {:.3e}  v_theta {:.3e}",
        res.rms[0], res.rms[1], res.rms[2]
    );
    println!("model written to {}", args.out.display());
    Ok(())
}

fn pipeline(args: &PipelineArgs) -> anyhow::Result<()> {
    let mut cfg: PipelineConfig = serde_json::from_str(&read_input(&args.config)?).map_err(Error::from)?;
    cfg.seed = args.seed;
    let out = run_pipeline(&cfg, &args.out_dir)?;
    print_json(&out.reports)?;
    println!("final checkpoint: {}", out.final_checkpoint.display());
    Ok(())
}

fn eval(args: &EvalArgs) -> anyhow::Result<()> {
    let opts = EvalOptions {
        episodes: args.episodes,
        seed: args.seed,
        tolerances: args.tol.tolerances()?,
        mode: if args.stochastic {
            SampleMode::Stochastic
        } else {
            SampleMode::Deterministic
        },
        ..EvalOptions::default()
    };
    let report = run_eval(&args.checkpoint, &args.env.env()?, &opts, &args.out_dir)?;
    println!(
        "success rate {:.3} ({}/{}), mean return {:.3}, mean length {:.1} steps",
        report.success_rate, report.successes, report.episodes, report.mean_return, report.mean_steps
    );
    Ok(())
}

fn follow(args: &FollowArgs) -> anyhow::Result<()> {
    let mission = match (&args.path, &args.waypoints) {
        (Some(p), None) => Mission::Path(p.clone()),
        (None, Some(w)) => Mission::Waypoints(w.clone()),
        _ => bail!(Error::InvalidInput("give exactly one of --path or --waypoints".into())),
    };
    let mut job = FollowJob::new(args.checkpoint.clone(), mission);
    job.start = match args.start.as_deref() {
        Some(&[x, y, theta]) => Some(RobotState::new(x, y, theta)),
        Some(_) => bail!(Error::InvalidInput("--start takes x,y,theta".into())),
        None => None,
    };
    job.spacing = args.spacing;
    job.tolerances = args.tol.tolerances()?;
    job.env = args.env.env()?;
    job.options.speed_cap = args.speed_cap;
    job.options.timeout_s = args.timeout;
    job.options.seed = args.seed;
    let metrics = run_follow(&job, &args.out_dir)?;
    print_json(&metrics)?;
    Ok(())
}

fn rerun_cmd(args: &RerunArgs) -> anyhow::Result<()> {
    let manifest = Manifest::load(&args.manifest)?;
    rerun(&manifest, &args.out_dir)?;
    println!("reproduced run in {}", args.out_dir.display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return 1;
    };
    match e.root() {
        Error::GateFailed { .. } | Error::FollowFailed { .. } => 3,
        Error::TrainingDiverged { .. } => 4,
        Error::InvalidInput(_) | Error::DegenerateData(_) | Error::Config(_) | Error::Json(_) | Error::Csv(_) => 2,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Sysid(a) => sysid(a),
        Command::Pipeline(a) => pipeline(a),
        Command::Eval(a) => eval(a),
        Command::Follow(a) => follow(a),
        Command::Rerun(a) => rerun_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
