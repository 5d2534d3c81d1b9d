//! Two-stage generation: a guided trajectory model proposes the root path,
//! then a projected motion model fills in the pose around it. The single-stage
//! variant asks the motion model to do both.
//!
//! Everything here runs through [`ddpm_sample`] with [`PipelineHooks`], which
//! switch off below `t_stop`.

use serde::{Deserialize, Serialize};

use crate::data::{NormStats, TRAJ_CHANNELS, X, Z};
use crate::denoiser::{Conditioning, Denoiser};
use crate::engine::{ddpm_sample, ModelPredictor, SamplingHooks, StepView, X0Predictor};
use crate::error::{GmdError, Result};
use crate::goals::{GoalFunction, KeyframeSet};
use crate::guidance::{
    clip_gradient, dense_gradient, impute_sample, impute_x0, impute_x0_projected, masked_guided_mean, GroundReadout,
    GuidanceConfig,
};
use crate::projection::EmphasisProjector;
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    TwoStage,
    SingleStage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Point-to-point imputation runs for `t ≥ tau`.
    pub tau: usize,
    pub guidance: GuidanceConfig,
    pub mode: PipelineMode,
    pub use_p2p: bool,
    pub c_emphasis: f64,
    pub seed: u64,
    /// Stage 2 imputes only the keyed frames instead of the whole stage-1 path.
    #[serde(default)]
    pub stage2_keyframes_only: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            tau: 100,
            guidance: GuidanceConfig::default(),
            mode: PipelineMode::TwoStage,
            use_p2p: true,
            c_emphasis: 10.0,
            seed: 0,
            stage2_keyframes_only: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        self.guidance.validate()?;
        if self.tau > sched.steps() {
            return Err(GmdError::invalid(format!("tau {} exceeds {} steps", self.tau, sched.steps())));
        }
        Ok(())
    }

    /// Sample seed of the second stage.
    pub fn stage2_seed(&self) -> u64 {
        self.seed ^ 0x9e37_79b9_7f4a_7c15
    }
}

/// An ε-prediction network over `[rot, x, z]` with its normalization.
#[derive(Clone, Debug)]
pub struct TrajectoryModel<T> {
    pub net: Denoiser<T>,
    /// Statistics of the three trajectory channels.
    pub stats: NormStats,
}

/// A clean-prediction network over projected `[N, M]` sequences.
#[derive(Clone, Debug)]
pub struct MotionModel<T> {
    pub net: Denoiser<T>,
    pub proj: EmphasisProjector,
    pub stats: NormStats,
}

impl<T: Scalar> TrajectoryModel<T> {
    fn readout(&self) -> GroundReadout<'static> {
        GroundReadout { proj: None, rows: [1, 2], stats: self.stats.select(&[1, 2]) }
    }
}

impl<T: Scalar> MotionModel<T> {
    fn readout(&self) -> GroundReadout<'_> {
        GroundReadout { proj: Some(&self.proj), rows: [X, Z], stats: self.stats.select(&[X, Z]) }
    }

    /// Raw `[N, M]` from a projected sample.
    pub fn to_raw(&self, xp: &Tensor<T>) -> Result<Tensor<f64>> {
        Ok(self.stats.invert_tensor(&self.proj.unproject_tensor(xp)?)?.cast())
    }
}

/// Straight lines between consecutive keys, held constant outside them, as a
/// raw `[rot, x, z]` path. Heading follows each segment and is unwrapped.
pub fn p2p_trajectory(keys: &KeyframeSet, m: usize) -> Result<Tensor<f64>> {
    let ks = &keys.keys;
    if ks.is_empty() {
        return Err(GmdError::invalid("point-to-point path needs at least one keyframe"));
    }
    keys.check_frames(m)?;
    let mut headings = Vec::with_capacity(ks.len().saturating_sub(1));
    let mut prev = 0.0f64;
    for (i, w) in ks.windows(2).enumerate() {
        let (dx, dz) = (w[1].x - w[0].x, w[1].z - w[0].z);
        let h = if dx == 0.0 && dz == 0.0 {
            prev
        } else {
            let raw = dz.atan2(dx);
            if i == 0 {
                raw
            } else {
                raw - std::f64::consts::TAU * ((raw - prev) / std::f64::consts::TAU).round()
            }
        };
        headings.push(h);
        prev = h;
    }
    let mut out = Tensor::zeros(&[3, m]);
    for i in 0..m {
        let (x, z, rot) = if i <= ks[0].frame {
            (ks[0].x, ks[0].z, headings.first().copied().unwrap_or(0.0))
        } else if i >= ks[ks.len() - 1].frame {
            let k = ks[ks.len() - 1];
            (k.x, k.z, headings.last().copied().unwrap_or(0.0))
        } else {
            let s = ks.windows(2).position(|w| w[0].frame <= i && i < w[1].frame).expect("inside the key span");
            let (a, b) = (ks[s], ks[s + 1]);
            let u = (i - a.frame) as f64 / (b.frame - a.frame) as f64;
            (a.x + u * (b.x - a.x), a.z + u * (b.z - a.z), headings[s])
        };
        out.set(0, i, rot);
        out.set(1, i, x);
        out.set(2, i, z);
    }
    Ok(out)
}

/// A mask and the normalized values it imputes.
#[derive(Clone, Debug)]
pub struct ImputePlan<T> {
    pub mask: Tensor<T>,
    pub target: Tensor<T>,
}

impl<T: Scalar> ImputePlan<T> {
    /// Keyed ground cells of an `[rows, M]` normalized sequence whose x and z
    /// rows are `ground_rows` with statistics `ground_stats`.
    pub fn keyframes(keys: &KeyframeSet, rows: usize, m: usize, ground_rows: [usize; 2], ground_stats: &NormStats) -> Result<Self> {
        keys.check_frames(m)?;
        let mut mask = Tensor::zeros(&[rows, m]);
        let mut target = Tensor::zeros(&[rows, m]);
        for k in &keys.keys {
            for (j, (&r, v)) in ground_rows.iter().zip([k.x, k.z]).enumerate() {
                mask.set(r, k.frame, T::one());
                target.set(r, k.frame, T::of((v - ground_stats.mean[j]) / ground_stats.std[j]));
            }
        }
        Ok(ImputePlan { mask, target })
    }

    /// Every frame of the trajectory rows, from a raw `[rot, x, z]` path.
    pub fn full_path(path: &Tensor<f64>, rows: usize, traj_rows: [usize; 3], traj_stats: &NormStats) -> Result<Self> {
        if path.rows() != 3 {
            return Err(GmdError::invalid("trajectory path must have rows [rot, x, z]"));
        }
        let m = path.cols();
        let norm = traj_stats.apply_tensor(path)?;
        let mut mask = Tensor::zeros(&[rows, m]);
        let mut target = Tensor::zeros(&[rows, m]);
        for (j, &r) in traj_rows.iter().enumerate() {
            for c in 0..m {
                mask.set(r, c, T::one());
                target.set(r, c, T::of(norm.at(j, c)));
            }
        }
        Ok(ImputePlan { mask, target })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImputeSpace {
    /// Noised target written into `x_{t−1}`.
    Sample,
    /// Clean target written into `x̂0` (through the projector if there is one).
    CleanPrediction,
}

/// Guidance and imputation for one sampling run.
pub struct PipelineHooks<'a, T: Scalar> {
    pub net: &'a Denoiser<T>,
    pub sched: &'a NoiseSchedule,
    pub cond: Conditioning,
    pub guidance: &'a GuidanceConfig,
    pub goal: Option<&'a GoalFunction>,
    pub readout: GroundReadout<'a>,
    pub space: ImputeSpace,
    pub proj: Option<&'a EmphasisProjector>,
    /// Imputation used whenever the point-to-point plan is not active.
    pub base: Option<ImputePlan<T>>,
    /// Point-to-point plan and the `tau` from which it is active.
    pub p2p: Option<(ImputePlan<T>, usize)>,
    grad: Option<Tensor<T>>,
}

impl<'a, T: Scalar> PipelineHooks<'a, T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        net: &'a Denoiser<T>,
        sched: &'a NoiseSchedule,
        cond: Conditioning,
        guidance: &'a GuidanceConfig,
        goal: Option<&'a GoalFunction>,
        readout: GroundReadout<'a>,
        space: ImputeSpace,
        proj: Option<&'a EmphasisProjector>,
    ) -> Self {
        let goal = goal.filter(|g| !matches!(g, GoalFunction::Zero));
        PipelineHooks { net, sched, cond, guidance, goal, readout, space, proj, base: None, p2p: None, grad: None }
    }

    fn plan(&self, t: usize) -> Option<&ImputePlan<T>> {
        match &self.p2p {
            Some((p, tau)) if t >= *tau => Some(p),
            _ => self.base.as_ref(),
        }
    }

    /// A mask covering every cell leaves no room for a guidance shift, so the
    /// gradient pass is skipped.
    fn guiding(&self, t: usize) -> bool {
        let covered = self.plan(t).is_some_and(|p| p.mask.data().iter().all(|&v| v == T::one()));
        self.guidance.active(t) && self.guidance.s > 0.0 && self.goal.is_some() && !covered
    }
}

impl<T: Scalar> SamplingHooks<T> for PipelineHooks<'_, T> {
    fn predict(&mut self, model: &dyn X0Predictor<T>, t: usize, x_t: &Tensor<T>) -> Result<Tensor<T>> {
        self.grad = None;
        if !self.guiding(t) {
            return model.predict_x0(x_t, t);
        }
        let goal = self.goal.expect("guiding implies a goal");
        let d = dense_gradient(self.net, self.sched, x_t, t, self.cond, goal, &self.readout)?;
        self.grad = Some(clip_gradient(d.grad, self.guidance.max_grad_norm));
        Ok(d.x0_hat)
    }

    fn adjust_prediction(&mut self, t: usize, _x_t: &Tensor<T>, x0_hat: Tensor<T>) -> Result<Tensor<T>> {
        if self.space != ImputeSpace::CleanPrediction || !self.guidance.active(t) {
            return Ok(x0_hat);
        }
        match (self.plan(t), self.proj) {
            (Some(p), Some(proj)) => impute_x0_projected(proj, &x0_hat, &p.target, &p.mask),
            (Some(p), None) => impute_x0(&x0_hat, &p.target, &p.mask),
            (None, _) => Ok(x0_hat),
        }
    }

    fn adjust_mean(&mut self, view: &StepView<'_, T>, mean: Tensor<T>) -> Result<Tensor<T>> {
        let Some(grad) = self.grad.take() else { return Ok(mean) };
        let rows = match self.proj {
            Some(p) => p.n(),
            None => mean.rows(),
        };
        let mask = match self.plan(view.t) {
            Some(p) => p.mask.clone(),
            None => Tensor::zeros(&[rows, mean.cols()]),
        };
        masked_guided_mean(&mean, view.sigma2, &grad, self.guidance.s, &mask, self.proj)
    }

    fn replace_sample(
        &mut self,
        view: &StepView<'_, T>,
        _mean: &Tensor<T>,
        x_prev: Tensor<T>,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<Tensor<T>> {
        if self.space != ImputeSpace::Sample || !self.guidance.active(view.t) {
            return Ok(x_prev);
        }
        match self.plan(view.t) {
            Some(p) => impute_sample(&x_prev, &p.target, &p.mask, self.sched, view.t, rng),
            None => Ok(x_prev),
        }
    }
}

/// Stage 1: guided, keyframe-imputed trajectory sampling. Returns a raw
/// `[rot, x, z]` path.
pub fn stage1_trajectory<T: Scalar>(
    model: &TrajectoryModel<T>,
    sched: &NoiseSchedule,
    goal: &GoalFunction,
    keys: &KeyframeSet,
    cfg: &PipelineConfig,
    cond: Conditioning,
    frames: usize,
) -> Result<Tensor<f64>> {
    cfg.validate(sched)?;
    let readout = model.readout();
    let mut hooks = PipelineHooks::new(
        &model.net,
        sched,
        cond,
        &cfg.guidance,
        Some(goal),
        readout.clone(),
        ImputeSpace::Sample,
        None,
    );
    if !keys.is_empty() {
        hooks.base = Some(ImputePlan::keyframes(keys, 3, frames, [1, 2], &readout.stats)?);
        if cfg.use_p2p {
            let path = p2p_trajectory(keys, frames)?;
            hooks.p2p = Some((ImputePlan::full_path(&path, 3, [0, 1, 2], &model.stats)?, cfg.tau));
        }
    }
    let predictor = ModelPredictor { net: &model.net, sched, cond };
    let z = ddpm_sample(&predictor, sched, &[3, frames], cfg.seed, &mut hooks)?;
    Ok(model.stats.invert_tensor(&z)?.cast())
}

/// Stage 2: motion around a fixed raw `[rot, x, z]` path. Returns a raw
/// `[N, M]` motion.
#[allow(clippy::too_many_arguments)]
pub fn stage2_motion<T: Scalar>(
    model: &MotionModel<T>,
    sched: &NoiseSchedule,
    z_star: &Tensor<f64>,
    keys: &KeyframeSet,
    goal: &GoalFunction,
    cfg: &PipelineConfig,
    cond: Conditioning,
) -> Result<Tensor<f64>> {
    cfg.validate(sched)?;
    let n = model.proj.n();
    let m = z_star.cols();
    let traj_stats = model.stats.select(&TRAJ_CHANNELS);
    let readout = model.readout();
    let mut hooks = PipelineHooks::new(
        &model.net,
        sched,
        cond,
        &cfg.guidance,
        Some(goal),
        readout.clone(),
        ImputeSpace::CleanPrediction,
        Some(&model.proj),
    );
    hooks.base = Some(if cfg.stage2_keyframes_only {
        ImputePlan::keyframes(keys, n, m, [X, Z], &readout.stats)?
    } else {
        ImputePlan::full_path(z_star, n, TRAJ_CHANNELS, &traj_stats)?
    });
    let predictor = ModelPredictor { net: &model.net, sched, cond };
    let xp = ddpm_sample(&predictor, sched, &[n, m], cfg.stage2_seed(), &mut hooks)?;
    model.to_raw(&xp)
}

/// One projected motion model handles keyframes, point-to-point imputation
/// and guidance. Returns a raw `[N, M]` motion.
pub fn single_stage<T: Scalar>(
    model: &MotionModel<T>,
    sched: &NoiseSchedule,
    keys: &KeyframeSet,
    goal: &GoalFunction,
    cfg: &PipelineConfig,
    cond: Conditioning,
    frames: usize,
) -> Result<Tensor<f64>> {
    cfg.validate(sched)?;
    let n = model.proj.n();
    let readout = model.readout();
    let mut hooks = PipelineHooks::new(
        &model.net,
        sched,
        cond,
        &cfg.guidance,
        Some(goal),
        readout.clone(),
        ImputeSpace::CleanPrediction,
        Some(&model.proj),
    );
    if !keys.is_empty() {
        hooks.base = Some(ImputePlan::keyframes(keys, n, frames, [X, Z], &readout.stats)?);
        if cfg.use_p2p {
            let path = p2p_trajectory(keys, frames)?;
            let traj_stats = model.stats.select(&TRAJ_CHANNELS);
            hooks.p2p = Some((ImputePlan::full_path(&path, n, TRAJ_CHANNELS, &traj_stats)?, cfg.tau));
        }
    }
    let predictor = ModelPredictor { net: &model.net, sched, cond };
    let xp = ddpm_sample(&predictor, sched, &[n, frames], cfg.seed, &mut hooks)?;
    model.to_raw(&xp)
}

/// Output of [`generate`]: the root path and, when a motion model ran, the full motion.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    /// Raw `[rot, x, z]`.
    pub trajectory: Tensor<f64>,
    /// Raw `[N, M]`.
    pub motion: Option<Tensor<f64>>,
}

/// Runs the configured mode. Two-stage needs a trajectory model unless a
/// fixed path is given; single-stage ignores it.
#[allow(clippy::too_many_arguments)]
pub fn generate<T: Scalar>(
    traj: Option<&TrajectoryModel<T>>,
    motion: Option<&MotionModel<T>>,
    sched: &NoiseSchedule,
    keys: &KeyframeSet,
    goal: &GoalFunction,
    fixed_path: Option<&Tensor<f64>>,
    cfg: &PipelineConfig,
    cond: Conditioning,
    frames: usize,
) -> Result<Generated> {
    match cfg.mode {
        PipelineMode::TwoStage => {
            let z = match (fixed_path, traj) {
                (Some(p), _) => p.clone(),
                (None, Some(tm)) => stage1_trajectory(tm, sched, goal, keys, cfg, cond, frames)?,
                (None, None) => return Err(GmdError::invalid("two-stage generation needs a trajectory model")),
            };
            let motion = match motion {
                Some(mm) => Some(stage2_motion(mm, sched, &z, keys, goal, cfg, cond)?),
                None => None,
            };
            Ok(Generated { trajectory: z, motion })
        }
        PipelineMode::SingleStage => {
            let mm = motion.ok_or_else(|| GmdError::invalid("single-stage generation needs a motion model"))?;
            let x = single_stage(mm, sched, keys, goal, cfg, cond, frames)?;
            Ok(Generated { trajectory: x.select_rows(&TRAJ_CHANNELS)?, motion: Some(x) })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::goals::Keyframe;

    fn keys(list: &[(usize, f64, f64)]) -> KeyframeSet {
        KeyframeSet::new(list.iter().map(|&(frame, x, z)| Keyframe { frame, x, z }).collect()).unwrap()
    }

    #[test]
    fn p2p_midpoint() {
        let p = p2p_trajectory(&keys(&[(0, 0.0, 0.0), (10, 10.0, 0.0)]), 16).unwrap();
        assert_eq!((p.at(1, 5), p.at(2, 5)), (5.0, 0.0));
        assert_eq!(p.at(1, 15), 10.0);
        assert!(p.row(0).iter().all(|&r| r == 0.0));
    }

    #[test]
    fn p2p_single_key_is_constant() {
        let p = p2p_trajectory(&keys(&[(4, 1.5, -2.0)]), 8).unwrap();
        assert!(p.row(1).iter().all(|&v| v == 1.5));
        assert!(p.row(2).iter().all(|&v| v == -2.0));
    }

    #[test]
    fn p2p_passes_through_keys() {
        let k = keys(&[(3, 1.0, 1.0), (9, -2.0, 0.5), (20, 0.0, 4.0)]);
        let p = p2p_trajectory(&k, 24).unwrap();
        for key in &k.keys {
            assert_eq!((p.at(1, key.frame), p.at(2, key.frame)), (key.x, key.z));
        }
    }

    #[test]
    fn p2p_heading_is_unwrapped() {
        // Left turns past ±π keep increasing instead of jumping by 2π.
        let k = keys(&[(0, 0.0, 0.0), (4, -1.0, 0.1), (8, -2.0, -0.1)]);
        let p = p2p_trajectory(&k, 10).unwrap();
        assert!((p.at(0, 6) - p.at(0, 2)).abs() < 1.0);
        assert!(p2p_trajectory(&KeyframeSet::default(), 8).is_err());
    }
}
