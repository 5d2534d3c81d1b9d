//! One function per subcommand.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use gmd_core::data::{generate_dataset, DatasetSpec, TRAJ_CHANNELS, X, Z};
use gmd_core::goals::{spread_frames, KeyframeSet};
use gmd_core::guidance::GuidanceConfig;
use gmd_core::metrics::{
    gaussian_frechet, keyframe_errors, mean_slip_score, trajectory_diversity, FeatureEncoder, MetricReport,
    DEFAULT_THRESHOLD,
};
use gmd_core::pipeline::{PipelineConfig, PipelineMode};
use gmd_core::{NoiseSchedule, ScheduleKind, Tensor};

use crate::checkpoint::ModelKind;
use crate::config::TrainFile;
use crate::dataset_file;
use crate::error::{io_err, CliError, CliResult};
use crate::inputs::{load_keyframes, load_trajectory, load_world};
use crate::render::{overhead_svg, shares_svg, write_schedule_csv, write_sequence_csv, write_text};
use crate::tasks::{conditioning, Models, Task, TaskSetup};
use crate::training::{run_training, TrainOptions};

#[derive(Parser, Debug)]
#[command(name = "gmd", version, about = "Guided motion diffusion on a synthetic locomotion world")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset file.
    GenerateDataset(DatasetArgs),
    /// Train the trajectory network.
    TrainTraj(TrainArgs),
    /// Train the projected motion network.
    TrainMotion(TrainArgs),
    /// Sample one motion for a task and write CSV and SVG.
    Generate(GenerateArgs),
    /// Dump noise-schedule coefficients and contribution shares.
    AnalyzeSchedule(ScheduleArgs),
    /// Generate a batch per configuration and report metrics.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct DatasetArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub count_per_label: usize,
    #[arg(long, default_value_t = 64)]
    pub frames: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.02)]
    pub noise_sigma: f64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// TOML training config.
    pub config: PathBuf,
    /// Validate, build, run one step, write nothing.
    #[arg(long)]
    pub dry_run: bool,
    /// Continue from the configured checkpoint if it exists.
    #[arg(long)]
    pub resume: bool,
    /// Stop once this many total steps are done.
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ModeArg {
    TwoStage,
    SingleStage,
}

/// Models, task inputs and sampler settings shared by `generate` and `eval`.
#[derive(Args, Debug, Clone)]
pub struct SamplingArgs {
    #[arg(long, value_enum)]
    pub task: Task,
    #[arg(long)]
    pub traj_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub motion_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub keyframes: Option<PathBuf>,
    #[arg(long)]
    pub world: Option<PathBuf>,
    /// CSV with rot, x and z columns (trajectory task).
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::TwoStage)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 100)]
    pub tau: usize,
    #[arg(long)]
    pub no_p2p: bool,
    #[arg(long, default_value_t = 100.0)]
    pub guidance_s: f64,
    #[arg(long, default_value_t = 20)]
    pub t_stop: usize,
    /// Goal norm order (1 or 2).
    #[arg(long, default_value_t = 1)]
    pub goal_p: u32,
    /// Per-step cap on the goal gradient norm; `inf` disables it.
    #[arg(long, default_value_t = 1.0)]
    pub max_grad_norm: f64,
    #[arg(long)]
    pub c_emphasis: Option<f64>,
    /// Stage 2 imputes only the keyed frames.
    #[arg(long)]
    pub stage2_keyframes_only: bool,
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long, default_value_t = 2.5)]
    pub cfg_weight: f64,
    #[arg(long, default_value_t = 64)]
    pub frames: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Cosine,
    Linear,
}

#[derive(Args, Debug)]
pub struct ScheduleArgs {
    #[arg(long, value_enum, default_value_t = KindArg::Cosine)]
    pub kind: KindArg,
    #[arg(long = "T", default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub beta_start: f64,
    #[arg(long, default_value_t = 0.02)]
    pub beta_end: f64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[arg(long, default_value_t = 16)]
    pub n_samples: usize,
    /// Comma-separated τ values; one report row each. Defaults to --tau.
    #[arg(long, value_delimiter = ',')]
    pub taus: Vec<usize>,
    /// Dataset whose held-out split supplies keyframes (when no keyframe
    /// file is given) and the Fréchet reference set.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Keys per sample drawn from held-out paths.
    #[arg(long, default_value_t = 5)]
    pub n_keys: usize,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Output CSV, one row per τ.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli, log: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::GenerateDataset(a) => cmd_dataset(&a),
        Command::TrainTraj(a) => cmd_train(ModelKind::Trajectory, &a, log),
        Command::TrainMotion(a) => cmd_train(ModelKind::Motion, &a, log),
        Command::Generate(a) => cmd_generate(&a, log),
        Command::AnalyzeSchedule(a) => cmd_schedule(&a),
        Command::Eval(a) => cmd_eval(&a, log),
    }
}

fn cmd_dataset(a: &DatasetArgs) -> CliResult<()> {
    let spec = DatasetSpec {
        frames: a.frames,
        count_per_label: a.count_per_label,
        seed: a.seed,
        noise_sigma: a.noise_sigma,
        ..DatasetSpec::default()
    };
    dataset_file::save(&generate_dataset(&spec)?, &a.out)
}

fn cmd_train(kind: ModelKind, a: &TrainArgs, log: &mut dyn Write) -> CliResult<()> {
    let file = TrainFile::load(&a.config)?;
    let base = a.config.parent().unwrap_or(Path::new("."));
    let dataset = base.join(&file.dataset);
    if !dataset.exists() {
        return Err(CliError::usage(format!("dataset: file {} does not exist", dataset.display())));
    }
    let header = dataset_file::load(&dataset)?;
    let channels = match kind {
        ModelKind::Trajectory => TRAJ_CHANNELS.len(),
        ModelKind::Motion => header.spec.channels,
    };
    let resolved = file.resolve(kind, channels, header.spec.labels.len().max(gmd_core::data::MotionLabel::ALL.len()), base)?;
    let summary = run_training(&resolved, TrainOptions { resume: a.resume, dry_run: a.dry_run, max_steps: a.max_steps }, log)?;
    let _ = writeln!(
        log,
        "trained {} steps (from step {}){}",
        summary.steps,
        summary.first_step,
        summary.last.map(|l| format!(", last loss {:.6}", l.loss)).unwrap_or_default()
    );
    Ok(())
}

fn pipeline_config(s: &SamplingArgs, tau: usize, seed: u64) -> PipelineConfig {
    PipelineConfig {
        tau,
        guidance: GuidanceConfig {
            s: s.guidance_s,
            t_stop: s.t_stop,
            p: s.goal_p,
            max_grad_norm: Some(s.max_grad_norm),
        },
        mode: match s.mode {
            ModeArg::TwoStage => PipelineMode::TwoStage,
            ModeArg::SingleStage => PipelineMode::SingleStage,
        },
        use_p2p: !s.no_p2p && s.task != Task::Obstacle,
        c_emphasis: s.c_emphasis.unwrap_or(10.0),
        seed,
        stage2_keyframes_only: s.stage2_keyframes_only,
    }
}

fn load_setup(s: &SamplingArgs) -> CliResult<TaskSetup> {
    let keys = s.keyframes.as_deref().map(load_keyframes).transpose()?;
    let world = s.world.as_deref().map(load_world).transpose()?;
    let path = s.trajectory.as_deref().map(load_trajectory).transpose()?;
    TaskSetup::build(s.task, keys, world, path, s.goal_p)
}

fn load_models(s: &SamplingArgs) -> CliResult<Models> {
    let m = Models::load(s.traj_checkpoint.as_deref(), s.motion_checkpoint.as_deref())?;
    if let (Some(c), Some(mm)) = (s.c_emphasis, &m.motion) {
        if c != mm.proj.c() {
            return Err(CliError::usage(format!("--c-emphasis {c} does not match the motion checkpoint's c = {}", mm.proj.c())));
        }
    }
    Ok(m)
}

fn cmd_generate(a: &GenerateArgs, log: &mut dyn Write) -> CliResult<()> {
    let s = &a.sampling;
    let setup = load_setup(s)?;
    let models = load_models(s)?;
    if s.tau > models.sched.steps() {
        return Err(CliError::usage(format!("--tau {} exceeds {} diffusion steps", s.tau, models.sched.steps())));
    }
    let cond = conditioning(s.label.as_deref(), s.cfg_weight)?;
    let out = models.run(&setup, &pipeline_config(s, s.tau, s.seed), cond, s.frames)?;
    std::fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let (name, seq) = match &out.motion {
        Some(m) => ("motion.csv", m),
        None => ("trajectory.csv", &out.trajectory),
    };
    write_sequence_csv(&a.out.join(name), seq)?;
    let map = setup.world.as_ref().map(|w| w.map.clone()).unwrap_or_default();
    let path = seq.select_rows(&TRAJ_CHANNELS)?;
    write_text(&a.out.join("overhead.svg"), &overhead_svg(std::slice::from_ref(&path), &setup.keys, &map))?;
    if let Some(w) = &setup.world {
        let _ = writeln!(log, "min sdf along path: {:.4}", w.map.min_along(&path.select_rows(&[1, 2])?));
    }
    let _ = writeln!(log, "wrote {}", a.out.join(name).display());
    Ok(())
}

fn cmd_schedule(a: &ScheduleArgs) -> CliResult<()> {
    let kind = match a.kind {
        KindArg::Cosine => ScheduleKind::Cosine,
        KindArg::Linear => ScheduleKind::Linear { beta_start: a.beta_start, beta_end: a.beta_end },
    };
    let sched = NoiseSchedule::build(kind, a.steps)?;
    std::fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    write_schedule_csv(&a.out.join("schedule.csv"), &sched)?;
    write_text(&a.out.join("shares.svg"), &shares_svg(&sched))
}

/// Per-sample keys: a fixed file, or evenly spread keys off held-out paths.
fn eval_keys(a: &EvalArgs, setup: &TaskSetup, held_out: &[Tensor<f64>], i: usize) -> CliResult<Option<KeyframeSet>> {
    if a.sampling.task != Task::Keyframe || a.sampling.keyframes.is_some() {
        return Ok((!setup.keys.is_empty()).then(|| setup.keys.clone()));
    }
    if held_out.is_empty() {
        return Err(CliError::usage("keyframe eval needs --keyframes or --dataset"));
    }
    let path = &held_out[i % held_out.len()];
    Ok(Some(KeyframeSet::along(path, &spread_frames(path.cols(), a.n_keys))?))
}

fn cmd_eval(a: &EvalArgs, log: &mut dyn Write) -> CliResult<()> {
    let s = &a.sampling;
    if a.n_samples == 0 {
        return Err(CliError::usage("--n-samples must be positive"));
    }
    let models = load_models(s)?;
    let cond = conditioning(s.label.as_deref(), s.cfg_weight)?;
    let held_out: Vec<Tensor<f64>> = match &a.dataset {
        Some(p) => {
            let ds = dataset_file::load(p)?;
            let (_, val) = ds.split();
            val.iter().map(|v| v.data.clone()).filter(|d| d.cols() == s.frames).collect()
        }
        None => Vec::new(),
    };
    let base_setup = if s.task == Task::Keyframe && s.keyframes.is_none() {
        TaskSetup { keys: KeyframeSet::default(), goal: gmd_core::goals::GoalFunction::Zero, fixed_path: None, world: None }
    } else {
        load_setup(s)?
    };
    let taus = if a.taus.is_empty() { vec![s.tau] } else { a.taus.clone() };
    let mut csv = String::from(
        "tau,traj_diversity,traj_error,loc_error,avg_error,slip_score,frechet_diag,collision_rate,sample_count\n",
    );
    for &tau in &taus {
        if tau > models.sched.steps() {
            return Err(CliError::usage(format!("tau {tau} exceeds {} diffusion steps", models.sched.steps())));
        }
        let mut outputs = Vec::with_capacity(a.n_samples);
        let mut per_sample_keys = Vec::with_capacity(a.n_samples);
        for i in 0..a.n_samples {
            let keys = eval_keys(a, &base_setup, &held_out, i)?;
            let setup = match (&keys, s.task) {
                (Some(k), Task::Keyframe) if s.keyframes.is_none() => {
                    TaskSetup::build(Task::Keyframe, Some(k.clone()), None, None, s.goal_p)?
                }
                _ => base_setup.clone(),
            };
            let seed = s.seed.wrapping_add(i as u64);
            outputs.push(models.run(&setup, &pipeline_config(s, tau, seed), cond, s.frames)?);
            per_sample_keys.push(keys);
        }
        let report = report_for(a, &base_setup, &outputs, &per_sample_keys, &held_out)?;
        report.validate()?;
        let _ = writeln!(log, "[tau = {tau}]\n{report}\n");
        let cell = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        csv.push_str(&format!(
            "{tau},{},{},{},{},{},{},{},{}\n",
            report.traj_diversity,
            cell(report.traj_error),
            cell(report.loc_error),
            cell(report.avg_error),
            cell(report.slip_score),
            cell(report.frechet),
            cell(report.collision_rate),
            report.sample_count
        ));
    }
    write_text(&a.out, &csv)
}

fn report_for(
    a: &EvalArgs,
    setup: &TaskSetup,
    outputs: &[gmd_core::pipeline::Generated],
    keys: &[Option<KeyframeSet>],
    held_out: &[Tensor<f64>],
) -> CliResult<MetricReport> {
    let finals: Vec<Tensor<f64>> = outputs.iter().map(|o| o.motion.clone().unwrap_or_else(|| o.trajectory.clone())).collect();
    let n = finals.len();
    let mut r = MetricReport { sample_count: n, ..Default::default() };
    r.traj_diversity = if n >= 2 { trajectory_diversity(&finals, [X, Z])? } else { 0.0 };
    if keys.iter().all(Option::is_some) && n > 0 {
        let (mut te, mut le, mut ae) = (0.0, 0.0, 0.0);
        for (f, k) in finals.iter().zip(keys) {
            let e = keyframe_errors(std::slice::from_ref(f), [X, Z], k.as_ref().expect("checked"), a.threshold)?;
            te += e.traj_error;
            le += e.loc_error;
            ae += e.avg_error;
        }
        let nf = n as f64;
        r.traj_error = Some(te / nf);
        r.loc_error = Some(le / nf);
        r.avg_error = Some(ae / nf);
    }
    if outputs.iter().all(|o| o.motion.is_some()) {
        r.slip_score = Some(mean_slip_score(&finals)?);
    }
    if held_out.len() >= 2 && n >= 2 {
        let rows: Vec<usize> = (0..finals[0].rows()).collect();
        let reference: Vec<Tensor<f64>> = held_out.iter().map(|h| h.select_rows(&rows)).collect::<Result<_, _>>()?;
        let enc = FeatureEncoder::new(finals[0].len(), 32, 0)?;
        r.frechet = Some(gaussian_frechet(&enc.encode_all(&finals)?, &enc.encode_all(&reference)?)?);
    }
    if let Some(w) = &setup.world {
        let mut hits = 0usize;
        for f in &finals {
            if w.map.min_along(&f.select_rows(&[X, Z])?) <= 0.0 {
                hits += 1;
            }
        }
        r.collision_rate = Some(hits as f64 / n as f64);
    }
    Ok(r)
}
