//! Generation tasks and the models they run on.

use std::path::Path;

use clap::ValueEnum;
use gmd_core::data::{MotionLabel, CHANNELS};
use gmd_core::goals::{composite_goal, keyframe_goal, obstacle_goal, trajectory_goal, GoalFunction, KeyframeSet};
use gmd_core::pipeline::{generate, Generated, MotionModel, PipelineConfig, TrajectoryModel};
use gmd_core::{Conditioning, NoiseSchedule, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::error::{CliError, CliResult};
use crate::inputs::World;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Task {
    TextOnly,
    Trajectory,
    Keyframe,
    Obstacle,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let v = self.to_possible_value().expect("no skipped variants");
        f.write_str(v.get_name())
    }
}

/// Everything a task fixes before sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSetup {
    pub keys: KeyframeSet,
    pub goal: GoalFunction,
    pub fixed_path: Option<Tensor<f64>>,
    pub world: Option<World>,
}

impl TaskSetup {
    /// Checks that the task got the inputs it needs and builds its goal.
    pub fn build(
        task: Task,
        keys: Option<KeyframeSet>,
        world: Option<World>,
        path: Option<Tensor<f64>>,
        p: u32,
    ) -> CliResult<Self> {
        let need = |what: &str| CliError::usage(format!("task {task} needs {what}"));
        let setup = match task {
            Task::TextOnly => TaskSetup { keys: KeyframeSet::default(), goal: GoalFunction::Zero, fixed_path: None, world: None },
            Task::Trajectory => {
                let path = path.ok_or_else(|| need("--trajectory"))?;
                let goal = trajectory_goal(path.select_rows(&[1, 2])?, p)?;
                TaskSetup { keys: KeyframeSet::default(), goal, fixed_path: Some(path), world: None }
            }
            Task::Keyframe => {
                let keys = keys.filter(|k| !k.is_empty()).ok_or_else(|| need("--keyframes"))?;
                let goal = keyframe_goal(keys.clone(), p)?;
                TaskSetup { keys, goal, fixed_path: None, world: None }
            }
            Task::Obstacle => {
                let world = world.ok_or_else(|| need("--world"))?;
                let goal = obstacle_goal(world.map.clone(), world.c_safe)?;
                let keys = keys.unwrap_or_default();
                TaskSetup { keys, goal, fixed_path: None, world: Some(world) }
            }
        };
        Ok(setup)
    }

    /// The same task with the guidance goal scaled by `w` (0 turns it off).
    pub fn with_goal_weight(mut self, w: f64) -> CliResult<Self> {
        self.goal = if w == 0.0 { GoalFunction::Zero } else { composite_goal(vec![self.goal], vec![w])? };
        Ok(self)
    }
}

/// Frozen EMA networks loaded from checkpoints.
pub struct Models {
    pub sched: NoiseSchedule,
    pub traj: Option<TrajectoryModel<f32>>,
    pub motion: Option<MotionModel<f32>>,
}

impl Models {
    pub fn load(traj: Option<&Path>, motion: Option<&Path>) -> CliResult<Self> {
        if traj.is_none() && motion.is_none() {
            return Err(CliError::usage("give --traj-checkpoint, --motion-checkpoint or both"));
        }
        let tc = traj.map(|p| Checkpoint::load_kind(p, ModelKind::Trajectory)).transpose()?;
        let mc = motion.map(|p| Checkpoint::load_kind(p, ModelKind::Motion)).transpose()?;
        if let (Some(a), Some(b)) = (&tc, &mc) {
            if a.schedule != b.schedule {
                return Err(CliError::usage("trajectory and motion checkpoints use different noise schedules"));
            }
        }
        let sched = tc.as_ref().or(mc.as_ref()).expect("at least one checkpoint").schedule()?;
        let traj = match tc {
            Some(c) => {
                if c.stats.channels() != 3 || c.state.net.cfg.in_channels != 3 {
                    return Err(CliError::usage("trajectory checkpoint must model the three trajectory channels"));
                }
                Some(TrajectoryModel { net: c.state.ema_net(), stats: c.stats })
            }
            None => None,
        };
        let motion = match mc {
            Some(c) => {
                let proj = c.projector()?.expect("motion checkpoints carry a projector");
                if c.state.net.cfg.in_channels != proj.n() || c.stats.channels() != proj.n() || proj.n() != CHANNELS {
                    return Err(CliError::usage(format!("motion checkpoint must model {CHANNELS} channels")));
                }
                Some(MotionModel { net: c.state.ema_net(), proj, stats: c.stats })
            }
            None => None,
        };
        Ok(Models { sched, traj, motion })
    }

    pub fn length_multiple(&self) -> usize {
        let a = self.traj.as_ref().map_or(1, |m| m.net.cfg.length_multiple());
        let b = self.motion.as_ref().map_or(1, |m| m.net.cfg.length_multiple());
        a.max(b)
    }

    pub fn run(&self, setup: &TaskSetup, cfg: &PipelineConfig, cond: Conditioning, frames: usize) -> CliResult<Generated> {
        if !frames.is_multiple_of(self.length_multiple()) {
            return Err(CliError::usage(format!("frames {frames} must be a multiple of {}", self.length_multiple())));
        }
        if let Some(p) = &setup.fixed_path {
            if p.cols() != frames {
                return Err(CliError::usage(format!("trajectory has {} frames, expected {frames}", p.cols())));
            }
        }
        Ok(generate(
            self.traj.as_ref(),
            self.motion.as_ref(),
            &self.sched,
            &setup.keys,
            &setup.goal,
            setup.fixed_path.as_ref(),
            cfg,
            cond,
            frames,
        )?)
    }
}

pub fn conditioning(label: Option<&str>, cfg_weight: f64) -> CliResult<Conditioning> {
    let label = label.map(MotionLabel::parse).transpose()?.map(|l| l.id());
    Ok(Conditioning { label, cfg_weight })
}
