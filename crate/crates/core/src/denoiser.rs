//! 1-D UNET denoiser with adaptive group normalization.
//!
//! Every residual block is `conv(5) → GN → affine → mish → conv(5) → GN →
//! AdaGN(scale, shift) → mish`, plus a 1×1 skip when the width changes. The
//! conditioning vector is `MLP(ψ(t)) + label_table[label]`; the two parts are
//! summed after both are projected to `cond_dim`. Row `cond_vocab` of the label
//! table is the learned null embedding used for the unconditional branch.
//! Each block maps `mish(cond)` through its own linear layer to `(scale, shift)`.
//!
//! Downsampling is 2× average pooling and upsampling is nearest-neighbour, so a
//! UNET of depth `d` needs the frame count divisible by `2^(d-1)`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sinusoid_embedding, Tape, Var};
use crate::error::{GmdError, Result};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

pub const KERNEL_SIZE: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionTarget {
    X0,
    Epsilon,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<f64>,
    pub groups: usize,
    pub prediction_target: PredictionTarget,
    pub cond_vocab: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
}

impl DenoiserConfig {
    /// Trajectory network layout: base 512 with multipliers `[0.125, 0.25, 0.5]`.
    pub fn trajectory(in_channels: usize, cond_vocab: usize) -> Self {
        DenoiserConfig {
            in_channels,
            base_channels: 512,
            channel_multipliers: vec![0.125, 0.25, 0.5],
            groups: 8,
            prediction_target: PredictionTarget::Epsilon,
            cond_vocab,
            cond_dim: 128,
            time_dim: 64,
        }
    }

    /// Motion network layout at desk scale: base 64 with multipliers `[1, 2, 2]`.
    pub fn motion(in_channels: usize, cond_vocab: usize) -> Self {
        DenoiserConfig {
            in_channels,
            base_channels: 64,
            channel_multipliers: vec![1.0, 2.0, 2.0],
            groups: 8,
            prediction_target: PredictionTarget::X0,
            cond_vocab,
            cond_dim: 128,
            time_dim: 64,
        }
    }

    pub fn depth(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn stage_channels(&self) -> Vec<usize> {
        self.channel_multipliers.iter().map(|m| (self.base_channels as f64 * m).round() as usize).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.cond_dim == 0 {
            return Err(GmdError::invalid("denoiser needs input channels and a conditioning width"));
        }
        if self.channel_multipliers.is_empty() {
            return Err(GmdError::invalid("denoiser needs at least one channel multiplier"));
        }
        if self.groups == 0 {
            return Err(GmdError::invalid("groups must be positive"));
        }
        for c in self.stage_channels() {
            if c == 0 || c % self.groups != 0 {
                return Err(GmdError::invalid(format!(
                    "stage width {c} is not a positive multiple of {} groups",
                    self.groups
                )));
            }
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(GmdError::invalid(format!("time_dim {} must be even", self.time_dim)));
        }
        Ok(())
    }

    /// Frames must be divisible by this.
    pub fn length_multiple(&self) -> usize {
        1 << (self.depth() - 1)
    }

    /// Every parameter path with its shape, in a stable order.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut s = BTreeMap::new();
        let (cd, td) = (self.cond_dim, self.time_dim);
        s.insert("time.fc1.weight".into(), vec![cd, td]);
        s.insert("time.fc1.bias".into(), vec![cd, 1]);
        s.insert("time.fc2.weight".into(), vec![cd, cd]);
        s.insert("time.fc2.bias".into(), vec![cd, 1]);
        s.insert("label.table".into(), vec![self.cond_vocab + 1, cd]);
        for (prefix, ci, co) in self.blocks() {
            s.insert(format!("{prefix}.conv1.weight"), vec![co, ci, KERNEL_SIZE]);
            s.insert(format!("{prefix}.conv1.bias"), vec![co]);
            s.insert(format!("{prefix}.norm1.gamma"), vec![co]);
            s.insert(format!("{prefix}.norm1.beta"), vec![co]);
            s.insert(format!("{prefix}.cond.weight"), vec![2 * co, cd]);
            s.insert(format!("{prefix}.cond.bias"), vec![2 * co, 1]);
            s.insert(format!("{prefix}.conv2.weight"), vec![co, co, KERNEL_SIZE]);
            s.insert(format!("{prefix}.conv2.bias"), vec![co]);
            if ci != co {
                s.insert(format!("{prefix}.skip.weight"), vec![co, ci]);
                s.insert(format!("{prefix}.skip.bias"), vec![co]);
            }
        }
        let c0 = self.stage_channels()[0];
        s.insert("out.weight".into(), vec![self.in_channels, c0]);
        s.insert("out.bias".into(), vec![self.in_channels]);
        s
    }

    /// `(path prefix, input width, output width)` of every residual block.
    fn blocks(&self) -> Vec<(String, usize, usize)> {
        let ch = self.stage_channels();
        let d = ch.len();
        let mut out = Vec::new();
        let mut prev = self.in_channels;
        for (i, &c) in ch.iter().enumerate() {
            out.push((format!("down.{i}"), prev, c));
            prev = c;
        }
        out.push(("mid".to_string(), ch[d - 1], ch[d - 1]));
        for i in (0..d).rev() {
            out.push((format!("up.{i}"), 2 * ch[i], ch[i.saturating_sub(1)]));
        }
        out
    }
}

/// Named weight tensors of a denoiser.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams<T> {
    pub tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> DenoiserParams<T> {
    /// Seeded initialization: fan-in scaled normal weights, unit AdaGN scale.
    pub fn init(cfg: &DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (path, shape) in cfg.param_shapes() {
            let t = if path.ends_with(".weight") {
                let fan_in: usize = shape[1..].iter().product();
                let gain = if path == "out.weight" { 0.5 } else { 1.0 };
                Tensor::<T>::randn(&shape, &mut rng).scale(T::of(gain / (fan_in as f64).sqrt()))
            } else if path == "label.table" {
                Tensor::<T>::randn(&shape, &mut rng).scale(T::of(0.1))
            } else if path.ends_with(".gamma") {
                Tensor::full(&shape, T::one())
            } else if path.ends_with(".cond.bias") {
                // First half is the AdaGN scale, which starts at 1.
                let co = shape[0] / 2;
                Tensor::from_fn(&shape, |i| if i < co { T::one() } else { T::zero() })
            } else {
                Tensor::zeros(&shape)
            };
            tensors.insert(path, t);
        }
        Ok(DenoiserParams { tensors })
    }

    pub fn get(&self, path: &str) -> Result<&Tensor<T>> {
        self.tensors.get(path).ok_or_else(|| GmdError::invalid(format!("missing parameter {path}")))
    }

    pub fn cast<U: Scalar>(&self) -> DenoiserParams<U> {
        DenoiserParams { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn check_shapes(&self, cfg: &DenoiserConfig) -> Result<()> {
        let want = cfg.param_shapes();
        if want.len() != self.tensors.len() {
            return Err(GmdError::invalid(format!(
                "expected {} parameter tensors, found {}",
                want.len(),
                self.tensors.len()
            )));
        }
        for (path, shape) in want {
            let t = self.get(&path)?;
            if t.shape() != shape.as_slice() {
                return Err(GmdError::invalid(format!("{path}: shape {:?}, expected {shape:?}", t.shape())));
            }
            t.ensure_finite(&path)?;
        }
        Ok(())
    }
}

/// Parameters registered on a tape.
pub struct BoundParams<'p> {
    vars: BTreeMap<&'p str, Var>,
}

impl<'p> BoundParams<'p> {
    pub fn var(&self, path: &str) -> Result<Var> {
        self.vars.get(path).copied().ok_or_else(|| GmdError::invalid(format!("unbound parameter {path}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'p str, Var)> + '_ {
        self.vars.iter().map(|(k, v)| (*k, *v))
    }
}

/// Label plus classifier-free guidance weight. `label = None` is the null condition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conditioning {
    pub label: Option<usize>,
    pub cfg_weight: f64,
}

impl Conditioning {
    pub const DEFAULT_CFG_WEIGHT: f64 = 2.5;

    pub fn unconditional() -> Self {
        Conditioning { label: None, cfg_weight: Self::DEFAULT_CFG_WEIGHT }
    }

    pub fn label(label: usize) -> Self {
        Conditioning { label: Some(label), cfg_weight: Self::DEFAULT_CFG_WEIGHT }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser<T> {
    pub cfg: DenoiserConfig,
    pub params: DenoiserParams<T>,
}

impl<T: Scalar> Denoiser<T> {
    pub fn init(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        let params = DenoiserParams::init(&cfg, seed)?;
        Ok(Denoiser { cfg, params })
    }

    pub fn from_params(cfg: DenoiserConfig, params: DenoiserParams<T>) -> Result<Self> {
        cfg.validate()?;
        params.check_shapes(&cfg)?;
        Ok(Denoiser { cfg, params })
    }

    pub fn cast<U: Scalar>(&self) -> Denoiser<U> {
        Denoiser { cfg: self.cfg.clone(), params: self.params.cast() }
    }

    /// Registers every parameter on `tape` by reference.
    pub fn bind<'p>(&'p self, tape: &mut Tape<'p, T>, trainable: bool) -> BoundParams<'p> {
        let vars = self.params.tensors.iter().map(|(k, v)| (k.as_str(), tape.leaf_ref(v, trainable))).collect();
        BoundParams { vars }
    }

    fn linear<'p>(&self, tape: &mut Tape<'p, T>, p: &BoundParams<'p>, name: &str, x: Var) -> Result<Var> {
        let h = tape.matmul(p.var(&format!("{name}.weight"))?, x)?;
        tape.add(h, p.var(&format!("{name}.bias"))?)
    }

    fn cond_embedding<'p>(&self, tape: &mut Tape<'p, T>, p: &BoundParams<'p>, t: usize, label: Option<usize>) -> Result<Var> {
        let idx = match label {
            Some(l) if l < self.cfg.cond_vocab => l,
            Some(l) => {
                return Err(GmdError::invalid(format!("label {l} outside vocabulary of {}", self.cfg.cond_vocab)))
            }
            None => self.cfg.cond_vocab,
        };
        let psi = tape.sinusoid_embed(t, self.cfg.time_dim)?;
        let h = self.linear(tape, p, "time.fc1", psi)?;
        let h = tape.mish(h)?;
        let temb = self.linear(tape, p, "time.fc2", h)?;
        let lemb = tape.embedding_lookup(p.var("label.table")?, idx)?;
        tape.add(temb, lemb)
    }

    fn res_block<'p>(
        &self,
        tape: &mut Tape<'p, T>,
        p: &BoundParams<'p>,
        prefix: &str,
        x: Var,
        cond_act: Var,
    ) -> Result<Var> {
        let v = |s: &str| p.var(&format!("{prefix}.{s}"));
        let co = tape.value(v("conv1.bias")?).len();
        let h = tape.conv1d(x, v("conv1.weight")?, Some(v("conv1.bias")?))?;
        let h = tape.group_norm(h, self.cfg.groups)?;
        let h = tape.affine_modulate(h, v("norm1.gamma")?, v("norm1.beta")?)?;
        let h = tape.mish(h)?;

        let ss = self.linear(tape, p, &format!("{prefix}.cond"), cond_act)?;
        let scale_idx: Vec<usize> = (0..co).collect();
        let shift_idx: Vec<usize> = (co..2 * co).collect();
        let scale = tape.gather_channels(ss, &scale_idx)?;
        let shift = tape.gather_channels(ss, &shift_idx)?;

        let h = tape.conv1d(h, v("conv2.weight")?, Some(v("conv2.bias")?))?;
        let h = tape.group_norm(h, self.cfg.groups)?;
        let h = tape.affine_modulate(h, scale, shift)?;
        let h = tape.mish(h)?;

        let skip = if tape.value(x).rows() == co {
            x
        } else {
            let s = tape.matmul(v("skip.weight")?, x)?;
            tape.add_channel(s, v("skip.bias")?)?
        };
        tape.add(h, skip)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let shape = x.shape();
        if shape.len() != 2 || shape[0] != self.cfg.in_channels {
            return Err(GmdError::invalid(format!(
                "denoiser input {:?} needs {} channels",
                shape, self.cfg.in_channels
            )));
        }
        if !shape[1].is_multiple_of(self.cfg.length_multiple()) {
            return Err(GmdError::invalid(format!(
                "sequence length {} is not a multiple of {}",
                shape[1],
                self.cfg.length_multiple()
            )));
        }
        Ok(())
    }

    /// Raw network output (x0 or ε depending on the prediction target).
    pub fn forward_on<'p>(
        &self,
        tape: &mut Tape<'p, T>,
        p: &BoundParams<'p>,
        x: Var,
        t: usize,
        label: Option<usize>,
    ) -> Result<Var> {
        self.check_input(tape.value(x))?;
        let cond = self.cond_embedding(tape, p, t, label)?;
        let cond_act = tape.mish(cond)?;
        let depth = self.cfg.depth();
        let mut skips = Vec::with_capacity(depth);
        let mut h = x;
        for i in 0..depth {
            h = self.res_block(tape, p, &format!("down.{i}"), h, cond_act)?;
            skips.push(h);
            if i + 1 < depth {
                h = tape.avg_pool2(h)?;
            }
        }
        h = self.res_block(tape, p, "mid", h, cond_act)?;
        for i in (0..depth).rev() {
            h = tape.concat_channels(h, skips[i])?;
            h = self.res_block(tape, p, &format!("up.{i}"), h, cond_act)?;
            if i > 0 {
                h = tape.upsample2(h)?;
            }
        }
        let out = tape.matmul(p.var("out.weight")?, h)?;
        tape.add_channel(out, p.var("out.bias")?)
    }

    /// Network output with classifier-free guidance applied when a label is set.
    pub fn guided_output_on<'p>(
        &self,
        tape: &mut Tape<'p, T>,
        p: &BoundParams<'p>,
        x: Var,
        t: usize,
        cond: Conditioning,
    ) -> Result<Var> {
        match cond.label {
            Some(_) if cond.cfg_weight != 1.0 => {
                let pc = self.forward_on(tape, p, x, t, cond.label)?;
                let pu = self.forward_on(tape, p, x, t, None)?;
                let a = tape.scale(pc, T::of(cond.cfg_weight))?;
                let b = tape.scale(pu, T::of(1.0 - cond.cfg_weight))?;
                tape.add(a, b)
            }
            _ => self.forward_on(tape, p, x, t, cond.label),
        }
    }

    /// Clean-sample prediction recorded on `tape`.
    pub fn predict_x0_on<'p>(
        &self,
        tape: &mut Tape<'p, T>,
        p: &BoundParams<'p>,
        x: Var,
        t: usize,
        cond: Conditioning,
        sched: &NoiseSchedule,
    ) -> Result<Var> {
        let out = self.guided_output_on(tape, p, x, t, cond)?;
        match self.cfg.prediction_target {
            PredictionTarget::X0 => Ok(out),
            PredictionTarget::Epsilon => {
                let (cx, ce) = eps_to_x0_coefficients(sched, t)?;
                let a = tape.scale(x, T::of(cx))?;
                let b = tape.scale(out, T::of(ce))?;
                tape.add(a, b)
            }
        }
    }

    /// Raw output without recording gradients for parameters or input.
    pub fn forward(&self, x: &Tensor<T>, t: usize, label: Option<usize>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward_on(&mut tape, &p, xv, t, label)?;
        Ok(tape.value(out).clone())
    }

    pub fn predict_x0(&self, x: &Tensor<T>, t: usize, cond: Conditioning, sched: &NoiseSchedule) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.predict_x0_on(&mut tape, &p, xv, t, cond, sched)?;
        Ok(tape.value(out).clone())
    }
}

/// `(1/√ᾱ_t, −√(1−ᾱ_t)/√ᾱ_t)`: `x0 = cx · x_t + ce · ε`.
pub fn eps_to_x0_coefficients(sched: &NoiseSchedule, t: usize) -> Result<(f64, f64)> {
    if t < 1 || t > sched.steps() {
        return Err(GmdError::invalid(format!("step {t} outside 1..={}", sched.steps())));
    }
    let ab = sched.alpha_bar(t);
    Ok((1.0 / ab.sqrt(), -(1.0 - ab).sqrt() / ab.sqrt()))
}

/// Converts an ε prediction to a clean-sample prediction.
pub fn x0_from_eps<T: Scalar>(x_t: &Tensor<T>, eps: &Tensor<T>, sched: &NoiseSchedule, t: usize) -> Result<Tensor<T>> {
    let (cx, ce) = eps_to_x0_coefficients(sched, t)?;
    x_t.lin_comb(T::of(cx), eps, T::of(ce))
}

/// Inverse of [`x0_from_eps`].
pub fn eps_from_x0<T: Scalar>(x_t: &Tensor<T>, x0: &Tensor<T>, sched: &NoiseSchedule, t: usize) -> Result<Tensor<T>> {
    let ab = sched.alpha_bar(t);
    let s = (1.0 - ab).sqrt();
    x_t.lin_comb(T::of(1.0 / s), x0, T::of(-ab.sqrt() / s))
}

/// `w · cond + (1 − w) · uncond`.
pub fn cfg_combine<T: Scalar>(pred_cond: &Tensor<T>, pred_uncond: &Tensor<T>, w: f64) -> Result<Tensor<T>> {
    pred_cond.lin_comb(T::of(w), pred_uncond, T::of(1.0 - w))
}

/// Sinusoidal step embedding `ψ(t)`.
pub fn time_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    Ok(sinusoid_embedding::<f64>(t, dim)?.into_data())
}
