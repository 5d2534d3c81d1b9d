//! Imputation (on the sample, on the clean prediction, and through the
//! emphasis projection), goal-gradient mean shifts, and the dense goal
//! gradient taken through the denoiser.
//!
//! Masks are 0/1 tensors shaped like the unprojected sequence; 1 marks cells
//! that are imputed. Guidance shifts only touch cells where the mask is 0.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::NormStats;
use crate::denoiser::{Conditioning, Denoiser};
use crate::error::{GmdError, Result};
use crate::goals::GoalFunction;
use crate::projection::EmphasisProjector;
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// Guidance strength `s`.
    pub s: f64,
    /// Guidance and imputation run only for `t ≥ t_stop`.
    pub t_stop: usize,
    /// Goal norm order.
    pub p: u32,
    /// Cap on the L2 norm of the goal gradient at each step. An ε-network's
    /// clean prediction scales with `1/√ᾱ_t` near `t = T`, so uncapped
    /// gradients there can be thousands of times larger than anywhere else.
    /// `inf` disables the cap in config files.
    #[serde(default = "default_max_grad_norm")]
    pub max_grad_norm: Option<f64>,
}

fn default_max_grad_norm() -> Option<f64> {
    Some(1.0)
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig { s: 100.0, t_stop: 20, p: 1, max_grad_norm: default_max_grad_norm() }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s >= 0.0) {
            return Err(GmdError::invalid(format!("guidance strength {} must be nonnegative", self.s)));
        }
        if self.p != 1 && self.p != 2 {
            return Err(GmdError::invalid(format!("goal norm order must be 1 or 2, got {}", self.p)));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0) {
                return Err(GmdError::invalid("max_grad_norm must be positive"));
            }
        }
        Ok(())
    }

    pub fn active(&self, t: usize) -> bool {
        t >= self.t_stop
    }
}

fn check_mask<T: Scalar>(x: &Tensor<T>, mask: &Tensor<T>, what: &str) -> Result<()> {
    x.check_same_shape(mask, what)?;
    if mask.data().iter().any(|&m| m != T::zero() && m != T::one()) {
        return Err(GmdError::invalid(format!("{what}: mask entries must be 0 or 1")));
    }
    Ok(())
}

/// `(1 − m) ⊙ x + m ⊙ y`.
fn blend<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, mask: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for ((o, &yv), &mv) in out.data_mut().iter_mut().zip(y.data()).zip(mask.data()) {
        if mv == T::one() {
            *o = yv;
        }
    }
    out
}

/// Replaces masked cells of `x_{t−1}` with the target noised to step `t − 1`:
/// `√ᾱ_{t−1} y + √(1 − ᾱ_{t−1}) ε`, with `ε` drawn over the full shape.
pub fn impute_sample<T: Scalar>(
    x_prev: &Tensor<T>,
    y: &Tensor<T>,
    mask: &Tensor<T>,
    sched: &NoiseSchedule,
    t: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>> {
    x_prev.check_same_shape(y, "impute_sample target")?;
    check_mask(x_prev, mask, "impute_sample")?;
    if t < 1 || t > sched.steps() {
        return Err(GmdError::invalid(format!("step {t} outside 1..={}", sched.steps())));
    }
    let ab = sched.alpha_bar(t - 1);
    let eps = Tensor::<T>::randn(x_prev.shape(), rng);
    let noised = y.lin_comb(T::of(ab.sqrt()), &eps, T::of((1.0 - ab).sqrt()))?;
    Ok(blend(x_prev, &noised, mask))
}

/// Clean-space imputation `(1 − m) ⊙ x̂0 + m ⊙ target`.
pub fn impute_x0<T: Scalar>(x0_pred: &Tensor<T>, target: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    x0_pred.check_same_shape(target, "impute_x0 target")?;
    check_mask(x0_pred, mask, "impute_x0")?;
    Ok(blend(x0_pred, target, mask))
}

/// Unprojects, imputes, projects back.
pub fn impute_x0_projected<T: Scalar>(
    proj: &EmphasisProjector,
    x0p_pred: &Tensor<T>,
    target: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<Tensor<T>> {
    let x = proj.unproject_tensor(x0p_pred)?;
    proj.project_tensor(&impute_x0(&x, target, mask)?)
}

/// `μ − s Σ ∇G`.
pub fn guidance_shift<T: Scalar>(mu: &Tensor<T>, sigma2: f64, grad: &Tensor<T>, s: f64) -> Result<Tensor<T>> {
    mu.lin_comb(T::one(), grad, T::of(-(s * sigma2)))
}

/// Mean shift restricted to unmasked cells. With a projector the gradient is
/// taken in projected space: it is mapped back by `unproject`, masked, and
/// mapped forward by `project`.
pub fn masked_guided_mean<T: Scalar>(
    mu_tilde: &Tensor<T>,
    sigma2: f64,
    grad: &Tensor<T>,
    s: f64,
    mask: &Tensor<T>,
    proj: Option<&EmphasisProjector>,
) -> Result<Tensor<T>> {
    mu_tilde.check_same_shape(grad, "masked_guided_mean gradient")?;
    let k = T::of(-(s * sigma2));
    let delta = match proj {
        Some(p) => p.unproject_tensor(grad)?.scale(k),
        None => grad.scale(k),
    };
    check_mask(&delta, mask, "masked_guided_mean")?;
    let kept = delta.zip_with(mask, |d, m| (T::one() - m) * d)?;
    let shift = match proj {
        Some(p) => p.project_tensor(&kept)?,
        None => kept,
    };
    mu_tilde.add(&shift)
}

/// How to read world-unit ground positions out of a model-space sequence.
#[derive(Clone, Debug)]
pub struct GroundReadout<'a> {
    /// Projector applied by the model, if any.
    pub proj: Option<&'a EmphasisProjector>,
    /// Rows holding x and z in the unprojected sequence.
    pub rows: [usize; 2],
    /// Normalization statistics of those two rows.
    pub stats: NormStats,
}

impl GroundReadout<'_> {
    /// `[2, M]` world positions of an unprojected normalized sequence.
    pub fn ground<T: Scalar>(&self, x_norm: &Tensor<T>) -> Result<Tensor<T>> {
        self.stats.invert_tensor(&x_norm.select_rows(&self.rows)?)
    }
}

/// Result of one guided prediction.
pub struct DenseGradient<T> {
    pub x0_hat: Tensor<T>,
    /// `∂G/∂x_t` in the model's own space.
    pub grad: Tensor<T>,
    pub goal: f64,
}

/// Differentiates `G(ground(f(x_t)))` with respect to `x_t`, where `f` is the
/// network's clean prediction.
#[allow(clippy::too_many_arguments)]
pub fn dense_gradient<T: Scalar>(
    net: &Denoiser<T>,
    sched: &NoiseSchedule,
    x_t: &Tensor<T>,
    t: usize,
    cond: Conditioning,
    goal: &GoalFunction,
    readout: &GroundReadout<'_>,
) -> Result<DenseGradient<T>> {
    let mut tape = Tape::new();
    let params = net.bind(&mut tape, false);
    let xv = tape.leaf(x_t.clone(), true);
    let x0 = net.predict_x0_on(&mut tape, &params, xv, t, cond, sched)?;
    let unproj = match readout.proj {
        Some(p) => {
            let inv = tape.constant(p.inverse_tensor());
            tape.matmul(inv, x0)?
        }
        None => x0,
    };
    let g = tape.gather_channels(unproj, &readout.rows)?;
    let std = tape.constant(Tensor::new(vec![2], readout.stats.std.iter().map(|&v| T::of(v)).collect())?);
    let mean = tape.constant(Tensor::new(vec![2], readout.stats.mean.iter().map(|&v| T::of(v)).collect())?);
    let world = tape.affine_modulate(g, std, mean)?;
    let gv = goal.record(&mut tape, world)?;
    let grads = tape.backward(gv).map_err(|e| e.at_step(t))?;
    let grad = grads.wrt(xv);
    if !grad.all_finite() {
        return Err(GmdError::NumericFailure { what: "goal gradient".into(), step: Some(t) });
    }
    Ok(DenseGradient { x0_hat: tape.value(x0).clone(), grad, goal: tape.value(gv).data()[0].f64() })
}

/// Scales `grad` down to `max_norm` if it is longer.
pub fn clip_gradient<T: Scalar>(grad: Tensor<T>, max_norm: Option<f64>) -> Tensor<T> {
    match max_norm {
        Some(c) => {
            let n = grad.norm_l2().f64();
            if n > c {
                grad.scale(T::of(c / n))
            } else {
                grad
            }
        }
        None => grad,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::stream_rng;

    fn seq() -> Tensor<f64> {
        Tensor::from_fn2(4, 5, |r, c| (r * 5 + c) as f64 * 0.1 - 0.7)
    }

    #[test]
    fn impute_sample_full_and_empty_masks() {
        let sched = NoiseSchedule::cosine(10).unwrap();
        let x = seq();
        let y = Tensor::full(&[4, 5], 2.0);
        let mut rng = stream_rng(0, 0);
        let full = impute_sample(&x, &y, &Tensor::full(&[4, 5], 1.0), &sched, 1, &mut rng).unwrap();
        assert_eq!(full, y);
        let none = impute_sample(&x, &y, &Tensor::zeros(&[4, 5]), &sched, 5, &mut rng).unwrap();
        assert_eq!(none, x);
    }

    #[test]
    fn impute_sample_one_channel() {
        let sched = NoiseSchedule::cosine(10).unwrap();
        let x = seq();
        let y = Tensor::full(&[4, 5], 2.0);
        let mask = Tensor::from_fn2(4, 5, |r, _| if r == 2 { 1.0 } else { 0.0 });
        let out = impute_sample(&x, &y, &mask, &sched, 6, &mut stream_rng(3, 1)).unwrap();
        let eps = Tensor::<f64>::randn(&[4, 5], &mut stream_rng(3, 1));
        let ab = sched.alpha_bar(5);
        for r in 0..4 {
            for c in 0..5 {
                let want = if r == 2 { ab.sqrt() * 2.0 + (1.0 - ab).sqrt() * eps.at(r, c) } else { x.at(r, c) };
                assert!((out.at(r, c) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn impute_x0_properties() {
        let x = seq();
        let z = Tensor::full(&[4, 5], 9.0);
        let mask = Tensor::from_fn2(4, 5, |r, _| if r < 2 { 1.0 } else { 0.0 });
        let once = impute_x0(&x, &z, &mask).unwrap();
        assert_eq!(once.row(0), z.row(0));
        assert_eq!(once.row(3), x.row(3));
        assert_eq!(impute_x0(&once, &z, &mask).unwrap(), once);
        assert_eq!(impute_x0(&x, &z, &Tensor::zeros(&[4, 5])).unwrap(), x);
        assert!(impute_x0(&x, &z, &Tensor::full(&[4, 5], 0.5)).is_err());
    }

    #[test]
    fn shift_values() {
        let mu = Tensor::zeros(&[2, 2]);
        let g = Tensor::full(&[2, 2], 1.0);
        assert_eq!(guidance_shift(&mu, 0.01, &g, 0.0).unwrap(), mu);
        assert_eq!(guidance_shift(&mu, 0.0, &g, 100.0).unwrap(), mu);
        assert_eq!(guidance_shift(&mu, 0.01, &g, 100.0).unwrap(), Tensor::full(&[2, 2], -1.0));
    }

    #[test]
    fn masked_mean_reductions() {
        let mu = seq();
        let g = Tensor::from_fn2(4, 5, |r, c| (r as f64 - c as f64) * 0.3);
        let ones = Tensor::full(&[4, 5], 1.0);
        assert_eq!(masked_guided_mean(&mu, 0.02, &g, 100.0, &ones, None).unwrap(), mu);
        let zeros = Tensor::zeros(&[4, 5]);
        let a = masked_guided_mean(&mu, 0.02, &g, 100.0, &zeros, None).unwrap();
        assert!(a.max_abs_diff(&guidance_shift(&mu, 0.02, &g, 100.0).unwrap()).unwrap() < 1e-15);
        let id = EmphasisProjector::identity(4, &[0, 1, 2]).unwrap();
        let mask = Tensor::from_fn2(4, 5, |r, c| if r == c { 1.0 } else { 0.0 });
        assert_eq!(
            masked_guided_mean(&mu, 0.02, &g, 100.0, &mask, Some(&id)).unwrap(),
            masked_guided_mean(&mu, 0.02, &g, 100.0, &mask, None).unwrap()
        );
    }

    #[test]
    fn clip_gradient_caps_norm() {
        let g = Tensor::full(&[1, 4], 1.0f64);
        assert_eq!(clip_gradient(g.clone(), None), g);
        assert_eq!(clip_gradient(g.clone(), Some(10.0)), g);
        assert!((clip_gradient(g, Some(1.0)).norm_l2() - 1.0).abs() < 1e-15);
    }
}
