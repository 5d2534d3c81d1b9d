//! Dataset preparation and the resumable training loop behind `train-traj`
//! and `train-motion`.

use std::io::Write;
use std::path::Path;

use gmd_core::data::{Dataset, LabeledSeq, NormStats, TRAJ_CHANNELS};
use gmd_core::engine::{train_step, StepLog, TrainItem, TrainState};
use gmd_core::projection::EmphasisProjector;
use gmd_core::{Denoiser, NoiseSchedule};

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::config::ResolvedTraining;
use crate::dataset_file;
use crate::error::{write_bytes, CliError, CliResult};

/// Channels a model of this kind sees.
pub fn channels(kind: ModelKind, ds: &Dataset) -> Vec<usize> {
    match kind {
        ModelKind::Trajectory => TRAJ_CHANNELS.to_vec(),
        ModelKind::Motion => (0..ds.spec.channels).collect(),
    }
}

/// Normalization statistics over the training split.
pub fn fit_stats(kind: ModelKind, ds: &Dataset) -> CliResult<NormStats> {
    let (train, _) = ds.split();
    let rows = channels(kind, ds);
    let seqs: Vec<_> = train.iter().map(|s| s.data.select_rows(&rows)).collect::<Result<_, _>>()?;
    Ok(NormStats::fit(seqs.iter())?)
}

/// Model-space training items: selected, normalized and (for motion models)
/// projected.
pub fn training_items(
    seqs: &[&LabeledSeq],
    rows: &[usize],
    stats: &NormStats,
    proj: Option<&EmphasisProjector>,
) -> CliResult<Vec<TrainItem<f32>>> {
    seqs.iter()
        .map(|s| {
            let x = stats.apply_tensor(&s.data.select_rows(rows)?)?;
            let x = match proj {
                Some(p) => p.project_tensor(&x)?,
                None => x,
            };
            Ok(TrainItem { x: x.cast(), label: Some(s.label.id()) })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions {
    /// Continue from the checkpoint file if it exists.
    pub resume: bool,
    /// Build everything, run one step, write nothing.
    pub dry_run: bool,
    /// Stop after this many total steps even if the budget allows more.
    pub max_steps: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub first_step: usize,
    pub steps: usize,
    pub last: Option<StepLog>,
}

fn init_seed(seed: u64) -> u64 {
    !seed
}

/// A fresh checkpoint for a resolved config and dataset.
pub fn fresh_checkpoint(cfg: &ResolvedTraining, ds: &Dataset) -> CliResult<Checkpoint> {
    let stats = fit_stats(cfg.kind, ds)?;
    let projector = match cfg.projection {
        Some((c, seed)) => {
            Some(EmphasisProjector::build(ds.spec.channels, &TRAJ_CHANNELS, c, seed)?.descriptor().clone())
        }
        None => None,
    };
    let net = Denoiser::<f32>::init(cfg.denoiser.clone(), init_seed(cfg.train.seed))?;
    Ok(Checkpoint {
        kind: cfg.kind,
        schedule: cfg.schedule.clone(),
        projector,
        stats,
        train: cfg.train.clone(),
        state: TrainState::new(net),
    })
}

/// Everything but the step budget must match for a resume.
fn check_resumable(saved: &Checkpoint, fresh: &Checkpoint) -> CliResult<()> {
    let mismatch = |what: &str| CliError::usage(format!("cannot resume: checkpoint {what} differs from the config"));
    if saved.kind != fresh.kind {
        return Err(mismatch("model kind"));
    }
    if saved.state.net.cfg != fresh.state.net.cfg {
        return Err(mismatch("model"));
    }
    if saved.schedule != fresh.schedule {
        return Err(mismatch("schedule"));
    }
    if saved.projector != fresh.projector {
        return Err(mismatch("projection"));
    }
    if saved.stats != fresh.stats {
        return Err(mismatch("normalization (dataset)"));
    }
    let mut t = saved.train.clone();
    t.total_samples = fresh.train.total_samples;
    if t != fresh.train {
        return Err(mismatch("training settings"));
    }
    Ok(())
}

const LOG_HEADER: &str = "step,loss,grad_norm";

/// Log lines for steps before `step`; anything later was never checkpointed.
fn kept_log(path: &Path, step: usize) -> CliResult<String> {
    let mut out = format!("{LOG_HEADER}\n");
    if let Ok(text) = std::fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let s: Option<usize> = line.split(',').next().and_then(|v| v.parse().ok());
            if s.is_some_and(|s| s < step) {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    Ok(out)
}

pub fn run_training(cfg: &ResolvedTraining, opts: TrainOptions, progress: &mut dyn Write) -> CliResult<TrainSummary> {
    let ds = dataset_file::load(&cfg.dataset).map_err(|e| CliError::usage(format!("dataset: {e}")))?;
    let mut ckpt = fresh_checkpoint(cfg, &ds)?;
    if opts.resume && !opts.dry_run && cfg.checkpoint.exists() {
        let saved = Checkpoint::load(&cfg.checkpoint)?;
        check_resumable(&saved, &ckpt)?;
        ckpt.state = saved.state;
    }
    let sched = NoiseSchedule::from_descriptor(&ckpt.schedule)?;
    let proj = ckpt.projector()?;
    let (train_split, _) = ds.split();
    let rows = channels(cfg.kind, &ds);
    let items = training_items(&train_split, &rows, &ckpt.stats, proj.as_ref())?;
    let first_step = ckpt.state.step;
    let mut end = cfg.train.total_steps();
    if let Some(m) = opts.max_steps {
        end = end.min(m);
    }
    if opts.dry_run {
        end = first_step + 1;
    }
    let mut log = if opts.dry_run { String::new() } else { kept_log(&cfg.log, first_step)? };
    let mut last = None;
    while ckpt.state.step < end {
        let l = train_step(&mut ckpt.state, &cfg.train, &items, &TRAJ_CHANNELS, &sched)?;
        log.push_str(&format!("{},{},{}\n", l.step, l.loss, l.grad_norm));
        if (l.step + 1) % 100 == 0 || opts.dry_run {
            let _ = writeln!(progress, "step {} loss {:.6} grad_norm {:.4}", l.step + 1, l.loss, l.grad_norm);
        }
        last = Some(l);
        if !opts.dry_run && ckpt.state.step % cfg.checkpoint_every == 0 {
            ckpt.save(&cfg.checkpoint)?;
            write_bytes(&cfg.log, &log)?;
        }
    }
    if !opts.dry_run {
        ckpt.save(&cfg.checkpoint)?;
        write_bytes(&cfg.log, &log)?;
    }
    Ok(TrainSummary { first_step, steps: ckpt.state.step - first_step, last })
}
