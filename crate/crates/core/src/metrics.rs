//! Sample-set metrics: diversity, keyframe hit rates, speed/position
//! coherence, and a diagonal Fréchet distance over random linear features.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{SPEED, X, Z};
use crate::engine::stream_rng;
use crate::error::{GmdError, Result};
use crate::goals::KeyframeSet;
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Metrics of one sample set. Fields that do not apply to a task (no keys,
/// no pose channels, no reference set, no obstacles) are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub traj_diversity: f64,
    pub traj_error: Option<f64>,
    pub loc_error: Option<f64>,
    pub avg_error: Option<f64>,
    pub slip_score: Option<f64>,
    /// Diagonal-covariance Fréchet distance, not comparable with image FID.
    pub frechet: Option<f64>,
    /// Share of samples whose path enters an obstacle.
    pub collision_rate: Option<f64>,
    pub sample_count: usize,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.fields() {
            if let Some(v) = v {
                if !v.is_finite() {
                    return Err(GmdError::numeric(format!("metric {name} is {v}")));
                }
            }
        }
        for (name, v) in [("traj_error", self.traj_error), ("loc_error", self.loc_error), ("collision_rate", self.collision_rate)] {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(GmdError::invalid(format!("{name} = {v} is not a ratio")));
                }
            }
        }
        Ok(())
    }

    pub fn fields(&self) -> [(&'static str, Option<f64>); 7] {
        [
            ("traj_diversity", Some(self.traj_diversity)),
            ("traj_error", self.traj_error),
            ("loc_error", self.loc_error),
            ("avg_error", self.avg_error),
            ("slip_score", self.slip_score),
            ("frechet_diag", self.frechet),
            ("collision_rate", self.collision_rate),
        ]
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, v) in self.fields() {
            if let Some(v) = v {
                writeln!(f, "{name} = {v:.6}")?;
            }
        }
        write!(f, "sample_count = {}", self.sample_count)
    }
}

/// `[2, M]` or wider; rows `x_row` and `x_row + 1` are read as (x, z).
fn check_set(samples: &[Tensor<f64>], min: usize) -> Result<usize> {
    if samples.len() < min {
        return Err(GmdError::invalid(format!("need at least {min} samples, got {}", samples.len())));
    }
    let m = samples[0].cols();
    if samples.iter().any(|s| s.cols() != m || s.shape().len() != 2) {
        return Err(GmdError::invalid("samples must share one [rows, frames] shape"));
    }
    Ok(m)
}

fn ground(s: &Tensor<f64>, rows: [usize; 2], i: usize) -> (f64, f64) {
    (s.at(rows[0], i), s.at(rows[1], i))
}

/// RMS distance of every (sample, frame) location to that frame's mean
/// location. `rows` names the x and z rows.
pub fn trajectory_diversity(samples: &[Tensor<f64>], rows: [usize; 2]) -> Result<f64> {
    let m = check_set(samples, 2)?;
    let n = samples.len() as f64;
    let mut acc = 0.0;
    for i in 0..m {
        let (mut mx, mut mz) = (0.0, 0.0);
        for s in samples {
            let (x, z) = ground(s, rows, i);
            mx += x;
            mz += z;
        }
        mx /= n;
        mz /= n;
        for s in samples {
            let (x, z) = ground(s, rows, i);
            acc += (x - mx).powi(2) + (z - mz).powi(2);
        }
    }
    Ok((acc / (n * m as f64)).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KeyframeErrors {
    /// Share of samples missing at least one key.
    pub traj_error: f64,
    /// Share of (sample, key) pairs missed.
    pub loc_error: f64,
    /// Mean distance over all (sample, key) pairs.
    pub avg_error: f64,
}

/// A key is missed when the sample is farther than `threshold` from it.
pub fn keyframe_errors(samples: &[Tensor<f64>], rows: [usize; 2], keys: &KeyframeSet, threshold: f64) -> Result<KeyframeErrors> {
    if keys.is_empty() {
        return Err(GmdError::invalid("keyframe errors need at least one key"));
    }
    if !(threshold > 0.0) {
        return Err(GmdError::invalid(format!("threshold {threshold} must be positive")));
    }
    let m = check_set(samples, 1)?;
    keys.check_frames(m)?;
    let (mut failed, mut missed, mut dist) = (0usize, 0usize, 0.0);
    for s in samples {
        let mut any = false;
        for k in &keys.keys {
            let (x, z) = ground(s, rows, k.frame);
            let d = (x - k.x).hypot(z - k.z);
            dist += d;
            if d > threshold {
                missed += 1;
                any = true;
            }
        }
        failed += any as usize;
    }
    let pairs = (samples.len() * keys.len()) as f64;
    Ok(KeyframeErrors {
        traj_error: failed as f64 / samples.len() as f64,
        loc_error: missed as f64 / pairs,
        avg_error: dist / pairs,
    })
}

/// Mean over consecutive frame pairs of `|speed_i − ‖p_{i+1} − p_i‖|` on a raw
/// motion.
pub fn slip_score(seq: &Tensor<f64>) -> Result<f64> {
    if seq.shape().len() != 2 || seq.rows() <= SPEED {
        return Err(GmdError::invalid(format!("slip score needs rows x, z and speed, got shape {:?}", seq.shape())));
    }
    let m = seq.cols();
    if m < 2 {
        return Err(GmdError::invalid("slip score needs at least two frames"));
    }
    let mut acc = 0.0;
    for i in 0..m - 1 {
        let step = (seq.at(X, i + 1) - seq.at(X, i)).hypot(seq.at(Z, i + 1) - seq.at(Z, i));
        acc += (seq.at(SPEED, i) - step).abs();
    }
    Ok(acc / (m - 1) as f64)
}

pub fn mean_slip_score(samples: &[Tensor<f64>]) -> Result<f64> {
    if samples.is_empty() {
        return Err(GmdError::invalid("no samples"));
    }
    let mut acc = 0.0;
    for s in samples {
        acc += slip_score(s)?;
    }
    Ok(acc / samples.len() as f64)
}

/// Fixed random linear map from flattened sequences to feature vectors.
#[derive(Clone, Debug)]
pub struct FeatureEncoder {
    weights: Tensor<f64>,
}

impl FeatureEncoder {
    pub fn new(input_len: usize, features: usize, seed: u64) -> Result<Self> {
        if input_len == 0 || features == 0 {
            return Err(GmdError::invalid("encoder dimensions must be positive"));
        }
        let w = Tensor::<f64>::randn(&[features, input_len], &mut stream_rng(seed, 0));
        Ok(FeatureEncoder { weights: w.scale(1.0 / (input_len as f64).sqrt()) })
    }

    pub fn encode(&self, seq: &Tensor<f64>) -> Result<Vec<f64>> {
        let d = self.weights.cols();
        if seq.len() != d {
            return Err(GmdError::invalid(format!("encoder expects {d} values, got {}", seq.len())));
        }
        let x = Tensor::new(vec![d, 1], seq.data().to_vec())?;
        Ok(self.weights.matmul(&x)?.into_data())
    }

    pub fn encode_all(&self, seqs: &[Tensor<f64>]) -> Result<Vec<Vec<f64>>> {
        seqs.iter().map(|s| self.encode(s)).collect()
    }
}

fn moments(feats: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    if feats.len() < 2 {
        return Err(GmdError::invalid(format!("Fréchet distance needs at least 2 samples per side, got {}", feats.len())));
    }
    let f = feats[0].len();
    if feats.iter().any(|v| v.len() != f) {
        return Err(GmdError::invalid("feature vectors differ in length"));
    }
    let n = feats.len() as f64;
    let mean: Vec<f64> = (0..f).map(|j| feats.iter().map(|v| v[j]).sum::<f64>() / n).collect();
    let var = (0..f).map(|j| feats.iter().map(|v| (v[j] - mean[j]).powi(2)).sum::<f64>() / (n - 1.0)).collect();
    Ok((mean, var))
}

/// `‖μ₁ − μ₂‖² + Σ_j (v₁ⱼ + v₂ⱼ − 2√(v₁ⱼ v₂ⱼ))` with per-feature variances `v`.
pub fn gaussian_frechet(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (ma, va) = moments(a)?;
    let (mb, vb) = moments(b)?;
    if ma.len() != mb.len() {
        return Err(GmdError::invalid("feature sets differ in width"));
    }
    let mut d = 0.0;
    for j in 0..ma.len() {
        d += (ma[j] - mb[j]).powi(2) + (va[j].sqrt() - vb[j].sqrt()).powi(2);
    }
    Ok(d)
}
