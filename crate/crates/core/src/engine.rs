//! Training (squared loss on x0 or ε, with trajectory loss scaling), AdamW with
//! global-norm clipping and EMA, and the ancestral DDPM sampler.
//!
//! All randomness is derived from `(seed, index)` pairs: training step `i`
//! draws from stream `i` of the run seed and sampling step `t` from stream `t`
//! of the sample seed. Resuming or restarting mid-way therefore needs no
//! generator state.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::denoiser::{Conditioning, Denoiser, DenoiserParams, PredictionTarget};
use crate::error::{GmdError, Result};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Generator for one indexed stream of a seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub ema_beta: f64,
    pub total_samples: usize,
    pub loss_scale_k: f64,
    pub seed: u64,
    #[serde(default = "default_cond_dropout")]
    pub cond_dropout: f64,
    #[serde(default = "default_adam_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_adam_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
}

fn default_cond_dropout() -> f64 {
    0.1
}
fn default_adam_beta1() -> f64 {
    0.9
}
fn default_adam_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            lr: 1e-4,
            weight_decay: 1e-2,
            grad_clip_norm: 1.0,
            ema_beta: 0.9999,
            total_samples: 200_000,
            loss_scale_k: 1.0,
            seed: 0,
            cond_dropout: default_cond_dropout(),
            adam_beta1: default_adam_beta1(),
            adam_beta2: default_adam_beta2(),
            adam_eps: default_adam_eps(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(GmdError::invalid("batch_size must be positive"));
        }
        if !(self.lr >= 0.0) {
            return Err(GmdError::invalid(format!("lr {} must be nonnegative", self.lr)));
        }
        if !(0.0..1.0).contains(&self.ema_beta) {
            return Err(GmdError::invalid(format!("ema_beta {} outside [0, 1)", self.ema_beta)));
        }
        if !(self.loss_scale_k >= 1.0) {
            return Err(GmdError::invalid(format!("loss_scale_k {} must be at least 1", self.loss_scale_k)));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(GmdError::invalid("grad_clip_norm must be positive"));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(GmdError::invalid("cond_dropout outside [0, 1]"));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.total_samples.div_ceil(self.batch_size)
    }
}

/// One training sequence in model space (normalized, and projected for
/// projected motion models).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem<T> {
    pub x: Tensor<T>,
    pub label: Option<usize>,
}

/// Per-row loss weights: `k` on the trajectory rows, 1 elsewhere. `None` when
/// every weight is 1.
fn row_weights<T: Scalar>(
    target: PredictionTarget,
    shape: &[usize],
    traj_channels: &[usize],
    k: f64,
) -> Result<Option<Tensor<T>>> {
    if !(k >= 1.0) {
        return Err(GmdError::invalid(format!("loss scale k = {k} must be at least 1")));
    }
    if k == 1.0 {
        return Ok(None);
    }
    if target == PredictionTarget::Epsilon {
        return Err(GmdError::invalid("loss scaling applies to clean-sample targets only"));
    }
    let mut w = Tensor::full(shape, T::one());
    for &r in traj_channels {
        if r >= shape[0] {
            return Err(GmdError::invalid(format!("trajectory channel {r} out of range")));
        }
        w.row_mut(r).iter_mut().for_each(|v| *v = T::of(k));
    }
    Ok(Some(w))
}

/// `Σ_traj ‖k·(pred − target)‖² + Σ_other ‖pred − target‖²` for one sequence.
pub fn weighted_squared_error<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    traj_channels: &[usize],
    k: f64,
) -> Result<f64> {
    pred.check_same_shape(target, "weighted_squared_error")?;
    let cols = pred.cols();
    let mut total = 0.0;
    for r in 0..pred.rows() {
        let w2 = if traj_channels.contains(&r) { k * k } else { 1.0 };
        let s: f64 = (0..cols).map(|c| (pred.at(r, c) - target.at(r, c)).f64().powi(2)).sum();
        total += w2 * s;
    }
    Ok(total)
}

/// Draws `(t, ε)` for one item.
fn draw_noise<T: Scalar>(sched: &NoiseSchedule, shape: &[usize], rng: &mut ChaCha8Rng) -> (usize, Tensor<T>) {
    let t = rng.gen_range(1..=sched.steps());
    (t, Tensor::randn(shape, rng))
}

struct ItemSample<T> {
    x0: Tensor<T>,
    t: usize,
    eps: Tensor<T>,
    label: Option<usize>,
}

/// Records the loss of one item on `tape`, returning the scalar.
fn record_item_loss<'p, T: Scalar>(
    net: &'p Denoiser<T>,
    tape: &mut Tape<'p, T>,
    bound: &crate::denoiser::BoundParams<'p>,
    item: &ItemSample<T>,
    sched: &NoiseSchedule,
    weights: Option<&Tensor<T>>,
) -> Result<crate::autodiff::Var> {
    let x_t = sched.q_sample(&item.x0, item.t, &item.eps)?;
    let xv = tape.constant(x_t);
    let out = net.forward_on(tape, bound, xv, item.t, item.label)?;
    let target = match net.cfg.prediction_target {
        PredictionTarget::X0 => item.x0.clone(),
        PredictionTarget::Epsilon => item.eps.clone(),
    };
    let tv = tape.constant(target);
    let mut diff = tape.sub(out, tv)?;
    if let Some(w) = weights {
        let wv = tape.constant(w.clone());
        diff = tape.mul(diff, wv)?;
    }
    tape.l2_norm_squared(diff)
}

/// Mean per-item loss over `batch` with freshly drawn steps and noise.
pub fn diffusion_loss<T: Scalar>(
    net: &Denoiser<T>,
    batch: &[TrainItem<T>],
    traj_channels: &[usize],
    sched: &NoiseSchedule,
    k: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(GmdError::invalid("empty batch"));
    }
    let weights = row_weights::<T>(net.cfg.prediction_target, batch[0].x.shape(), traj_channels, k)?;
    let mut total = 0.0;
    for item in batch {
        let (t, eps) = draw_noise(sched, item.x.shape(), rng);
        let s = ItemSample { x0: item.x.clone(), t, eps, label: item.label };
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, false);
        let l = record_item_loss(net, &mut tape, &bound, &s, sched, weights.as_ref())?;
        total += tape.value(l).data()[0].f64();
    }
    Ok(total / batch.len() as f64)
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub net: Denoiser<T>,
    pub ema: DenoiserParams<T>,
    pub adam_m: DenoiserParams<T>,
    pub adam_v: DenoiserParams<T>,
    pub step: usize,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(net: Denoiser<T>) -> Self {
        let zeros = DenoiserParams {
            tensors: net.params.tensors.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect(),
        };
        TrainState { ema: net.params.clone(), adam_m: zeros.clone(), adam_v: zeros, net, step: 0 }
    }

    /// The EMA weights as a standalone network.
    pub fn ema_net(&self) -> Denoiser<T> {
        Denoiser { cfg: self.net.cfg.clone(), params: self.ema.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Loss and parameter gradients of one batch, in deterministic order.
fn batch_gradients<T: Scalar>(
    net: &Denoiser<T>,
    samples: &[ItemSample<T>],
    sched: &NoiseSchedule,
    weights: Option<&Tensor<T>>,
) -> Result<(f64, BTreeMap<String, Tensor<T>>)> {
    let inv_b = T::of(1.0 / samples.len() as f64);
    let mut grads: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    let mut loss = 0.0;
    for s in samples {
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, true);
        let l = record_item_loss(net, &mut tape, &bound, s, sched, weights)?;
        loss += tape.value(l).data()[0].f64();
        let mut g = tape.backward(l)?;
        for (name, var) in bound.iter() {
            let gi = g.take(var);
            match grads.get_mut(name) {
                Some(acc) => acc.axpy(inv_b, &gi)?,
                None => {
                    grads.insert(name.to_string(), gi.scale(inv_b));
                }
            }
        }
    }
    Ok((loss / samples.len() as f64, grads))
}

/// One optimizer step on a batch drawn from `data`.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    data: &[TrainItem<T>],
    traj_channels: &[usize],
    sched: &NoiseSchedule,
) -> Result<StepLog> {
    if data.is_empty() {
        return Err(GmdError::invalid("training set is empty"));
    }
    let step = state.step;
    let weights = row_weights::<T>(state.net.cfg.prediction_target, data[0].x.shape(), traj_channels, cfg.loss_scale_k)?;
    let mut rng = stream_rng(cfg.seed, step as u64);
    let samples: Vec<ItemSample<T>> = (0..cfg.batch_size)
        .map(|_| {
            let item = &data[rng.gen_range(0..data.len())];
            let label = if rng.gen::<f64>() < cfg.cond_dropout { None } else { item.label };
            let (t, eps) = draw_noise(sched, item.x.shape(), &mut rng);
            ItemSample { x0: item.x.clone(), t, eps, label }
        })
        .collect();

    let (loss, mut grads) = batch_gradients(&state.net, &samples, sched, weights.as_ref()).map_err(|e| e.at_step(step))?;
    if !loss.is_finite() {
        return Err(GmdError::NumericFailure { what: "training loss".into(), step: Some(step) });
    }
    let grad_norm = grads.values().map(|g| g.data().iter().map(|v| v.f64().powi(2)).sum::<f64>()).sum::<f64>().sqrt();
    if !grad_norm.is_finite() {
        return Err(GmdError::NumericFailure { what: "gradient norm".into(), step: Some(step) });
    }
    if grad_norm > cfg.grad_clip_norm {
        let s = T::of(cfg.grad_clip_norm / grad_norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    let n = (step + 1) as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let bc1 = 1.0 - b1.powi(n);
    let bc2 = 1.0 - b2.powi(n);
    let (lr, wd, eps) = (cfg.lr, cfg.weight_decay, cfg.adam_eps);
    for (name, g) in &grads {
        let p = state.net.params.tensors.get_mut(name).expect("gradient for a known parameter");
        let m = state.adam_m.tensors.get_mut(name).expect("moment for a known parameter");
        let v = state.adam_v.tensors.get_mut(name).expect("moment for a known parameter");
        for (((pv, mv), vv), &gv) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
            let gf = gv.f64();
            let mf = b1 * mv.f64() + (1.0 - b1) * gf;
            let vf = b2 * vv.f64() + (1.0 - b2) * gf * gf;
            *mv = T::of(mf);
            *vv = T::of(vf);
            let upd = (mf / bc1) / ((vf / bc2).sqrt() + eps) + wd * pv.f64();
            *pv = T::of(pv.f64() - lr * upd);
        }
    }
    ema_update(&mut state.ema, &state.net.params, cfg.ema_beta)?;
    state.step += 1;
    Ok(StepLog { step, loss, grad_norm })
}

/// `ema ← β·ema + (1−β)·params`.
pub fn ema_update<T: Scalar>(ema: &mut DenoiserParams<T>, params: &DenoiserParams<T>, beta: f64) -> Result<()> {
    let (b, ob) = (T::of(beta), T::of(1.0 - beta));
    for (name, p) in &params.tensors {
        let e = ema.tensors.get_mut(name).ok_or_else(|| GmdError::invalid(format!("EMA lacks {name}")))?;
        p.check_same_shape(e, name)?;
        for (ev, &pv) in e.data_mut().iter_mut().zip(p.data()) {
            *ev = b * *ev + ob * pv;
        }
    }
    Ok(())
}

/// Runs `train_step` until `cfg.total_steps()` steps are done, calling `log`
/// after every step.
pub fn train<T: Scalar>(
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    data: &[TrainItem<T>],
    traj_channels: &[usize],
    sched: &NoiseSchedule,
    mut log: impl FnMut(&StepLog, &TrainState<T>) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    while state.step < cfg.total_steps() {
        let l = train_step(state, cfg, data, traj_channels, sched)?;
        log(&l, state)?;
    }
    Ok(())
}

/// Produces clean-sample predictions for the sampler.
pub trait X0Predictor<T: Scalar> {
    fn predict_x0(&self, x_t: &Tensor<T>, t: usize) -> Result<Tensor<T>>;
}

/// A denoiser with a fixed condition.
pub struct ModelPredictor<'a, T> {
    pub net: &'a Denoiser<T>,
    pub sched: &'a NoiseSchedule,
    pub cond: Conditioning,
}

impl<T: Scalar> X0Predictor<T> for ModelPredictor<'_, T> {
    fn predict_x0(&self, x_t: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        self.net.predict_x0(x_t, t, self.cond, self.sched)
    }
}

/// State of one reverse step, handed to hooks.
pub struct StepView<'s, T> {
    pub t: usize,
    pub x_t: &'s Tensor<T>,
    pub x0_hat: &'s Tensor<T>,
    pub sigma2: f64,
}

/// Per-step extension points of the sampler. Every default is a no-op.
pub trait SamplingHooks<T: Scalar> {
    /// Computes `x̂0`; overriding lets a hook reuse the forward pass.
    fn predict(&mut self, model: &dyn X0Predictor<T>, t: usize, x_t: &Tensor<T>) -> Result<Tensor<T>> {
        model.predict_x0(x_t, t)
    }

    /// Rewrites `x̂0` before the mean is formed.
    fn adjust_prediction(&mut self, _t: usize, _x_t: &Tensor<T>, x0_hat: Tensor<T>) -> Result<Tensor<T>> {
        Ok(x0_hat)
    }

    /// Rewrites the sampling mean `μ_t`.
    fn adjust_mean(&mut self, _view: &StepView<'_, T>, mean: Tensor<T>) -> Result<Tensor<T>> {
        Ok(mean)
    }

    /// Rewrites the drawn `x_{t−1}`. `rng` is the step's stream after the
    /// sampler's own draw.
    fn replace_sample(
        &mut self,
        _view: &StepView<'_, T>,
        _mean: &Tensor<T>,
        x_prev: Tensor<T>,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<T>> {
        Ok(x_prev)
    }
}

pub struct NoHooks;

impl<T: Scalar> SamplingHooks<T> for NoHooks {}

/// Prior draw `x_T` for a sample seed.
pub fn prior_sample<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    Tensor::randn(shape, &mut stream_rng(seed, 0))
}

/// Ancestral sampling from the prior.
pub fn ddpm_sample<T: Scalar>(
    model: &dyn X0Predictor<T>,
    sched: &NoiseSchedule,
    shape: &[usize],
    seed: u64,
    hooks: &mut dyn SamplingHooks<T>,
) -> Result<Tensor<T>> {
    let x = prior_sample(shape, seed);
    ddpm_sample_from(model, sched, x, sched.steps(), seed, hooks)
}

/// Ancestral sampling from `x` at step `t_start` down to `x_0`. No noise is
/// added at `t = 1`.
pub fn ddpm_sample_from<T: Scalar>(
    model: &dyn X0Predictor<T>,
    sched: &NoiseSchedule,
    mut x: Tensor<T>,
    t_start: usize,
    seed: u64,
    hooks: &mut dyn SamplingHooks<T>,
) -> Result<Tensor<T>> {
    if t_start > sched.steps() {
        return Err(GmdError::invalid(format!("start step {t_start} beyond {}", sched.steps())));
    }
    for t in (1..=t_start).rev() {
        x = reverse_step(model, sched, x, t, seed, hooks).map_err(|e| e.at_step(t))?;
    }
    Ok(x)
}

/// One reverse step `x_t → x_{t−1}`.
pub fn reverse_step<T: Scalar>(
    model: &dyn X0Predictor<T>,
    sched: &NoiseSchedule,
    x: Tensor<T>,
    t: usize,
    seed: u64,
    hooks: &mut dyn SamplingHooks<T>,
) -> Result<Tensor<T>> {
    let mut rng = stream_rng(seed, t as u64);
    let x0 = hooks.predict(model, t, &x)?;
    let x0 = hooks.adjust_prediction(t, &x, x0)?;
    let pc = sched.posterior_coefficients(t)?;
    let view = StepView { t, x_t: &x, x0_hat: &x0, sigma2: pc.sigma2 };
    let mean = x0.lin_comb(T::of(pc.a), &x, T::of(pc.b))?;
    let mean = hooks.adjust_mean(&view, mean)?;
    let x_prev = if t > 1 {
        let z = Tensor::<T>::randn(x.shape(), &mut rng);
        mean.lin_comb(T::one(), &z, T::of(pc.sigma2.sqrt()))?
    } else {
        mean.clone()
    };
    let out = hooks.replace_sample(&view, &mean, x_prev, &mut rng)?;
    out.ensure_finite("sampling step")?;
    Ok(out)
}
