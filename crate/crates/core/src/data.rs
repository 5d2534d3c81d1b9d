//! Synthetic labeled walking sequences, root representation conversions and
//! per-channel normalization.
//!
//! Channel layout (`N = 17`):
//!
//! | channel | content |
//! |---|---|
//! | 0 | heading (rad) |
//! | 1, 2 | ground position x, z |
//! | 3 | speed: distance to the next frame |
//! | 4, 5 | gait phase sin, cos |
//! | 6..=16 | harmonics of phase, speed and turn rate |
//!
//! Channels 3..=16 carry Gaussian observation noise; channels 0..=2 are exact.
//! The gait phase advances with distance travelled, so every pose channel is a
//! function of the trajectory up to that noise.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::stream_rng;
use crate::error::{GmdError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHANNELS: usize = 17;
pub const ROT: usize = 0;
pub const X: usize = 1;
pub const Z: usize = 2;
pub const SPEED: usize = 3;
/// Channels the trajectory model sees and the emphasis projection scales.
pub const TRAJ_CHANNELS: [usize; 3] = [ROT, X, Z];
/// Ground location rows within a trajectory tensor `[rot, x, z]`.
pub const GROUND_IN_TRAJ: [usize; 2] = [1, 2];
/// Distance covered by one gait cycle.
pub const STRIDE: f64 = 1.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    /// World units with an absolute root.
    Raw,
    /// Root as per-frame heading change and local-frame displacement.
    Relative,
    Normalized,
    Projected,
}

/// A `[channels, frames]` matrix with its representation tag.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSeq<T> {
    pub data: Tensor<T>,
    pub repr: Representation,
}

impl<T: Scalar> MotionSeq<T> {
    pub fn new(data: Tensor<T>, repr: Representation) -> Self {
        MotionSeq { data, repr }
    }

    pub fn expect(&self, repr: Representation) -> Result<()> {
        if self.repr != repr {
            return Err(GmdError::InvalidState(format!("sequence is {:?}, expected {repr:?}", self.repr)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionLabel {
    Straight,
    LeftTurn,
    RightTurn,
    Circle,
    Zigzag,
    SCurve,
}

impl MotionLabel {
    pub const ALL: [MotionLabel; 6] = [
        MotionLabel::Straight,
        MotionLabel::LeftTurn,
        MotionLabel::RightTurn,
        MotionLabel::Circle,
        MotionLabel::Zigzag,
        MotionLabel::SCurve,
    ];

    pub fn id(self) -> usize {
        Self::ALL.iter().position(|&l| l == self).expect("listed")
    }

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL.get(id).copied().ok_or_else(|| GmdError::invalid(format!("unknown label id {id}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            MotionLabel::Straight => "straight",
            MotionLabel::LeftTurn => "left-turn",
            MotionLabel::RightTurn => "right-turn",
            MotionLabel::Circle => "circle",
            MotionLabel::Zigzag => "zigzag",
            MotionLabel::SCurve => "s-curve",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|l| l.name() == name)
            .ok_or_else(|| GmdError::invalid(format!("unknown label {name:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub frames: usize,
    pub channels: usize,
    pub labels: Vec<MotionLabel>,
    pub count_per_label: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub min_speed: f64,
    pub max_speed: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            frames: 64,
            channels: CHANNELS,
            labels: MotionLabel::ALL.to_vec(),
            count_per_label: 200,
            seed: 0,
            noise_sigma: 0.02,
            min_speed: 0.04,
            max_speed: 0.12,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels != CHANNELS {
            return Err(GmdError::invalid(format!("the generator emits {CHANNELS} channels, spec asks for {}", self.channels)));
        }
        if self.frames < 2 {
            return Err(GmdError::invalid("sequences need at least 2 frames"));
        }
        if self.labels.is_empty() || self.count_per_label == 0 {
            return Err(GmdError::invalid("dataset needs at least one label and one sequence per label"));
        }
        if !(self.noise_sigma >= 0.0) || !(self.min_speed > 0.0) || !(self.max_speed >= self.min_speed) {
            return Err(GmdError::invalid("noise must be nonnegative and 0 < min_speed <= max_speed"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSeq {
    pub label: MotionLabel,
    /// Raw `[17, frames]` matrix.
    pub data: Tensor<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub sequences: Vec<LabeledSeq>,
}

/// Heading per frame for one label.
fn heading_program<R: Rng>(label: MotionLabel, m: usize, rng: &mut R) -> Vec<f64> {
    let last = (m - 1) as f64;
    match label {
        MotionLabel::Straight => vec![0.0; m],
        MotionLabel::LeftTurn | MotionLabel::RightTurn => {
            let sign = if label == MotionLabel::LeftTurn { 1.0 } else { -1.0 };
            let total = rng.gen_range(0.35..0.65) * PI;
            let start = rng.gen_range(0.15..0.35) * last;
            let len = rng.gen_range(0.25..0.45) * last;
            (0..m)
                .map(|i| {
                    let u = ((i as f64 - start) / len).clamp(0.0, 1.0);
                    // Smoothstep keeps the turn rate continuous.
                    sign * total * u * u * (3.0 - 2.0 * u)
                })
                .collect()
        }
        MotionLabel::Circle => {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let total = TAU * rng.gen_range(0.95..1.05);
            (0..m).map(|i| sign * total * i as f64 / last).collect()
        }
        MotionLabel::Zigzag => {
            let amp = rng.gen_range(0.4..0.8);
            let period = rng.gen_range(0.3..0.5) * last;
            (0..m)
                .map(|i| {
                    let u = (i as f64 / period).fract();
                    let tri = if u < 0.25 {
                        4.0 * u
                    } else if u < 0.75 {
                        2.0 - 4.0 * u
                    } else {
                        4.0 * u - 4.0
                    };
                    amp * tri
                })
                .collect()
        }
        MotionLabel::SCurve => {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let amp = rng.gen_range(0.6..1.2);
            (0..m).map(|i| sign * amp * (TAU * i as f64 / last).sin()).collect()
        }
    }
}

/// Pose channels 4..=16 for one frame; `phase` in radians.
fn pose_features(phase: f64, speed: f64, turn: f64) -> [f64; 13] {
    let (s1, c1) = phase.sin_cos();
    let (s2, c2) = (2.0 * phase).sin_cos();
    let v = speed * 10.0;
    let w = turn * 10.0;
    [
        s1,
        c1,
        s2,
        c2,
        v * s1,
        v * c1,
        w,
        w * s1,
        w * c1,
        (0.5 * phase).sin(),
        v * v,
        (3.0 * phase).sin(),
        v * w,
    ]
}

/// Noise-free raw sequence for a heading program and per-frame speeds.
pub fn synthesize(heading: &[f64], speeds: &[f64]) -> Result<Tensor<f64>> {
    let m = heading.len();
    if m < 2 || speeds.len() != m - 1 {
        return Err(GmdError::invalid("need at least 2 headings and one speed per interval"));
    }
    let mut x = Tensor::zeros(&[CHANNELS, m]);
    let (mut px, mut pz) = (0.0, 0.0);
    for i in 0..m {
        x.set(ROT, i, heading[i]);
        x.set(X, i, px);
        x.set(Z, i, pz);
        if i + 1 < m {
            px += speeds[i] * heading[i].cos();
            pz += speeds[i] * heading[i].sin();
        }
    }
    fill_pose_channels(&mut x);
    Ok(x)
}

/// Derives channels 3..=16 from the trajectory rows of `x`.
pub fn fill_pose_channels(x: &mut Tensor<f64>) {
    let m = x.cols();
    let step = |x: &Tensor<f64>, i: usize| -> f64 {
        let j = if i + 1 < m { i } else { i - 1 };
        ((x.at(X, j + 1) - x.at(X, j)).powi(2) + (x.at(Z, j + 1) - x.at(Z, j)).powi(2)).sqrt()
    };
    let mut travelled = 0.0;
    for i in 0..m {
        let speed = step(x, i);
        let turn = if i + 1 < m { x.at(ROT, i + 1) - x.at(ROT, i) } else { x.at(ROT, i) - x.at(ROT, i - 1) };
        let phase = TAU * travelled / STRIDE;
        x.set(SPEED, i, speed);
        for (k, v) in pose_features(phase, speed, turn).into_iter().enumerate() {
            x.set(4 + k, i, v);
        }
        if i + 1 < m {
            travelled += speed;
        }
    }
}

/// One labeled sequence from its own stream of the dataset seed.
pub fn generate_sequence(spec: &DatasetSpec, label: MotionLabel, index: usize) -> Result<Tensor<f64>> {
    let mut rng = stream_rng(spec.seed, index as u64);
    let m = spec.frames;
    let heading = heading_program(label, m, &mut rng);
    let base = rng.gen_range(spec.min_speed..=spec.max_speed);
    let amp = rng.gen_range(0.0..0.2);
    let freq = rng.gen_range(0.5..2.0);
    let offset = rng.gen_range(0.0..TAU);
    let speeds: Vec<f64> =
        (0..m - 1).map(|i| base * (1.0 + amp * (TAU * freq * i as f64 / m as f64 + offset).sin())).collect();
    let mut x = synthesize(&heading, &speeds)?;
    if spec.noise_sigma > 0.0 {
        let noise = Tensor::<f64>::randn(&[CHANNELS - SPEED, m], &mut rng);
        for r in SPEED..CHANNELS {
            for c in 0..m {
                let v = x.at(r, c) + spec.noise_sigma * noise.at(r - SPEED, c);
                x.set(r, c, v);
            }
        }
    }
    Ok(x)
}

/// Deterministic per seed; sequence `i` uses stream `i`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut sequences = Vec::with_capacity(spec.labels.len() * spec.count_per_label);
    for (li, &label) in spec.labels.iter().enumerate() {
        for k in 0..spec.count_per_label {
            let index = li * spec.count_per_label + k;
            sequences.push(LabeledSeq { label, data: generate_sequence(spec, label, index)? });
        }
    }
    Ok(Dataset { spec: spec.clone(), sequences })
}

impl Dataset {
    /// 90/10 split by sequence, stratified by label: the last tenth of each
    /// label's sequences (at least one when a label has two or more) is held out.
    pub fn split(&self) -> (Vec<&LabeledSeq>, Vec<&LabeledSeq>) {
        let mut train = Vec::new();
        let mut val = Vec::new();
        for &label in &self.spec.labels {
            let group: Vec<&LabeledSeq> = self.sequences.iter().filter(|s| s.label == label).collect();
            let n_val = if group.len() >= 2 { ((group.len() as f64 * 0.1).round() as usize).max(1) } else { 0 };
            let cut = group.len() - n_val;
            train.extend_from_slice(&group[..cut]);
            val.extend_from_slice(&group[cut..]);
        }
        (train, val)
    }
}

fn rotate(theta: f64, x: f64, z: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    (c * x - s * z, s * x + c * z)
}

/// Integrates heading changes and local displacements from the origin at
/// heading 0.
pub fn rel_to_abs(seq: &MotionSeq<f64>) -> Result<MotionSeq<f64>> {
    seq.expect(Representation::Relative)?;
    let r = &seq.data;
    let m = r.cols();
    let mut out = r.clone();
    let (mut rot, mut px, mut pz) = (0.0, 0.0, 0.0);
    for i in 0..m {
        out.set(ROT, i, rot);
        out.set(X, i, px);
        out.set(Z, i, pz);
        let (dx, dz) = rotate(rot, r.at(X, i), r.at(Z, i));
        px += dx;
        pz += dz;
        rot += r.at(ROT, i);
    }
    Ok(MotionSeq::new(out, Representation::Raw))
}

/// Per-frame heading change and displacement in the frame's local heading.
/// The last frame has no successor and stores zeros.
pub fn abs_to_rel(seq: &MotionSeq<f64>) -> Result<MotionSeq<f64>> {
    seq.expect(Representation::Raw)?;
    let a = &seq.data;
    let m = a.cols();
    let mut out = a.clone();
    for i in 0..m {
        let (dr, dx, dz) = if i + 1 < m {
            let (lx, lz) = rotate(-a.at(ROT, i), a.at(X, i + 1) - a.at(X, i), a.at(Z, i + 1) - a.at(Z, i));
            (a.at(ROT, i + 1) - a.at(ROT, i), lx, lz)
        } else {
            (0.0, 0.0, 0.0)
        };
        out.set(ROT, i, dr);
        out.set(X, i, dx);
        out.set(Z, i, dz);
    }
    Ok(MotionSeq::new(out, Representation::Relative))
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Fits over every frame of every sequence.
    pub fn fit<'a>(seqs: impl IntoIterator<Item = &'a Tensor<f64>>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        let all: Vec<&Tensor<f64>> = seqs.into_iter().collect();
        for s in &all {
            if sum.is_empty() {
                sum = vec![0.0; s.rows()];
            }
            if s.rows() != sum.len() {
                return Err(GmdError::invalid("sequences disagree on channel count"));
            }
            for (r, acc) in sum.iter_mut().enumerate() {
                *acc += s.row(r).iter().sum::<f64>();
            }
            count += s.cols();
        }
        if count == 0 {
            return Err(GmdError::invalid("cannot fit normalization on no data"));
        }
        let mean: Vec<f64> = sum.iter().map(|v| v / count as f64).collect();
        sq.resize(mean.len(), 0.0);
        for s in &all {
            for (r, m) in mean.iter().enumerate() {
                sq[r] += s.row(r).iter().map(|v| (v - m).powi(2)).sum::<f64>();
            }
        }
        let std: Vec<f64> = sq.iter().map(|v| (v / count as f64).sqrt()).collect();
        if let Some(c) = std.iter().position(|&s| !(s > 1e-12)) {
            return Err(GmdError::ConstructionFailure(format!("channel {c} has zero variance")));
        }
        Ok(NormStats { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Statistics of a subset of channels, in the given order.
    pub fn select(&self, idx: &[usize]) -> NormStats {
        NormStats { mean: idx.iter().map(|&i| self.mean[i]).collect(), std: idx.iter().map(|&i| self.std[i]).collect() }
    }

    fn check(&self, rows: usize) -> Result<()> {
        if rows != self.channels() {
            return Err(GmdError::invalid(format!("sequence has {rows} channels, statistics have {}", self.channels())));
        }
        Ok(())
    }

    pub fn apply_tensor<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x.rows())?;
        Ok(Tensor::from_fn2(x.rows(), x.cols(), |r, c| T::of((x.at(r, c).f64() - self.mean[r]) / self.std[r])))
    }

    pub fn invert_tensor<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x.rows())?;
        Ok(Tensor::from_fn2(x.rows(), x.cols(), |r, c| T::of(x.at(r, c).f64() * self.std[r] + self.mean[r])))
    }

    pub fn apply<T: Scalar>(&self, seq: &MotionSeq<T>) -> Result<MotionSeq<T>> {
        seq.expect(Representation::Raw)?;
        Ok(MotionSeq::new(self.apply_tensor(&seq.data)?, Representation::Normalized))
    }

    pub fn invert<T: Scalar>(&self, seq: &MotionSeq<T>) -> Result<MotionSeq<T>> {
        seq.expect(Representation::Normalized)?;
        Ok(MotionSeq::new(self.invert_tensor(&seq.data)?, Representation::Raw))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_names_round_trip() {
        for l in MotionLabel::ALL {
            assert_eq!(MotionLabel::parse(l.name()).unwrap(), l);
            assert_eq!(MotionLabel::from_id(l.id()).unwrap(), l);
        }
        assert!(MotionLabel::parse("moonwalk").is_err());
    }

    #[test]
    fn zero_relatives_integrate_to_zero() {
        let seq = MotionSeq::new(Tensor::zeros(&[CHANNELS, 8]), Representation::Relative);
        let a = rel_to_abs(&seq).unwrap();
        assert_eq!(a.data, Tensor::zeros(&[CHANNELS, 8]));
        assert_eq!(a.repr, Representation::Raw);
    }

    #[test]
    fn unit_forward_steps() {
        let mut r = Tensor::zeros(&[CHANNELS, 5]);
        for i in 0..5 {
            r.set(X, i, 1.0);
        }
        let a = rel_to_abs(&MotionSeq::new(r, Representation::Relative)).unwrap();
        assert_eq!(a.data.row(X), &[0.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn wrong_tag_is_invalid_state() {
        let seq = MotionSeq::new(Tensor::zeros(&[CHANNELS, 4]), Representation::Normalized);
        assert!(matches!(rel_to_abs(&seq), Err(GmdError::InvalidState(_))));
        assert!(matches!(abs_to_rel(&seq), Err(GmdError::InvalidState(_))));
    }

    #[test]
    fn zero_std_channel_rejected() {
        let x = Tensor::from_fn2(2, 4, |r, c| if r == 0 { 1.0 } else { c as f64 });
        assert!(matches!(NormStats::fit([&x]), Err(GmdError::ConstructionFailure(_))));
    }

    #[test]
    fn straight_sequences_are_straight() {
        let spec = DatasetSpec { count_per_label: 3, labels: vec![MotionLabel::Straight], ..Default::default() };
        for s in generate_dataset(&spec).unwrap().sequences {
            assert!(s.data.row(ROT).iter().all(|&v| v == 0.0));
            assert!(s.data.row(Z).iter().all(|&v| v.abs() < 0.05));
        }
    }

    #[test]
    fn split_is_stratified() {
        let spec = DatasetSpec { count_per_label: 10, ..Default::default() };
        let d = generate_dataset(&spec).unwrap();
        let (train, val) = d.split();
        assert_eq!(train.len(), 54);
        assert_eq!(val.len(), 6);
        for l in MotionLabel::ALL {
            assert_eq!(val.iter().filter(|s| s.label == l).count(), 1);
        }
    }
}
