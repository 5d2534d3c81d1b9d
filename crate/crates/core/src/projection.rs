//! Invertible random emphasis projection `x ↦ norm · A′B · x`.
//!
//! `B` multiplies the emphasized channels by `c`. With i.i.d. standard normal
//! `A′` each projected channel of unit-variance input has variance
//! `norm² · (N − k + k c²) = 1` for `k` emphasized channels, but only in
//! expectation over the draw. The drawn `A′B` is therefore rebalanced with
//! positive row and column scalings so that every row has squared length
//! `N − k + k c²` and column `j` has `N b_j²`: the variance then holds for
//! the fixed matrix, and the emphasized columns carry exactly the share
//! [`relative_importance`].

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::data::{MotionSeq, Representation};
use crate::error::{GmdError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAX_CONDITION: f64 = 1e8;
const MAX_ATTEMPTS: usize = 10;

/// What a checkpoint stores; `A` is regenerated from the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectorDescriptor {
    pub n: usize,
    pub traj_indices: Vec<usize>,
    pub c: f64,
    pub seed: u64,
    /// Identity map, for tests and unprojected models.
    #[serde(default)]
    pub identity: bool,
}

#[derive(Clone, Debug)]
pub struct EmphasisProjector {
    descriptor: ProjectorDescriptor,
    a: DMatrix<f64>,
    a_inv: DMatrix<f64>,
    norm: f64,
    /// `norm · A`, row-major.
    forward: Tensor<f64>,
    /// `A⁻¹ / norm`, row-major.
    inverse: Tensor<f64>,
}

fn to_tensor(m: &DMatrix<f64>) -> Tensor<f64> {
    Tensor::from_fn2(m.nrows(), m.ncols(), |r, c| m[(r, c)])
}

/// `3c² / (N − 3 + 3c²)`: share of projected variance from the three
/// trajectory channels.
pub fn relative_importance(n: usize, c: f64) -> f64 {
    let e = 3.0 * (c * c);
    e / ((n as f64 - 3.0) + e)
}

/// `√((N − 3) / 3)`: the `c` giving the trajectory half of the variance.
pub fn recommended_c(n: usize) -> f64 {
    ((n as f64 - 3.0) / 3.0).sqrt()
}

const BALANCE_TOL: f64 = 1e-13;
const BALANCE_ITERS: usize = 10_000;

/// Alternating row and column scaling of the squared entries of `a` towards
/// row sums `row_target` and column sums `col_target`.
fn balance(a: &mut DMatrix<f64>, row_target: f64, col_target: &[f64]) -> bool {
    let n = a.nrows();
    for _ in 0..BALANCE_ITERS {
        for r in 0..n {
            let s: f64 = a.row(r).iter().map(|v| v * v).sum();
            a.row_mut(r).scale_mut((row_target / s).sqrt());
        }
        let mut worst = 0.0f64;
        for (c, &target) in col_target.iter().enumerate() {
            let s: f64 = a.column(c).iter().map(|v| v * v).sum();
            worst = worst.max((s / target - 1.0).abs());
            a.column_mut(c).scale_mut((target / s).sqrt());
        }
        if worst < BALANCE_TOL {
            return a.iter().all(|v| v.is_finite());
        }
    }
    false
}

impl EmphasisProjector {
    pub fn build(n: usize, traj_indices: &[usize], c: f64, seed: u64) -> Result<Self> {
        Self::from_descriptor(&ProjectorDescriptor { n, traj_indices: traj_indices.to_vec(), c, seed, identity: false })
    }

    /// `A = I`, `norm = 1`.
    pub fn identity(n: usize, traj_indices: &[usize]) -> Result<Self> {
        Self::from_descriptor(&ProjectorDescriptor {
            n,
            traj_indices: traj_indices.to_vec(),
            c: 1.0,
            seed: 0,
            identity: true,
        })
    }

    pub fn from_descriptor(d: &ProjectorDescriptor) -> Result<Self> {
        if d.n < 4 {
            return Err(GmdError::invalid(format!("projection needs at least 4 channels, got {}", d.n)));
        }
        if !(d.c >= 1.0) {
            return Err(GmdError::invalid(format!("emphasis scale {} must be at least 1", d.c)));
        }
        let mut seen = vec![false; d.n];
        for &i in &d.traj_indices {
            if i >= d.n || seen[i] {
                return Err(GmdError::invalid(format!("bad trajectory channel list {:?}", d.traj_indices)));
            }
            seen[i] = true;
        }
        if d.identity {
            if d.c != 1.0 {
                return Err(GmdError::invalid("identity projector requires c = 1"));
            }
            let eye = DMatrix::<f64>::identity(d.n, d.n);
            return Ok(Self::assemble(d.clone(), eye.clone(), eye, 1.0));
        }
        let k = d.traj_indices.len() as f64;
        let norm = 1.0 / ((d.n as f64 - k) + k * (d.c * d.c)).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(d.seed);
        let mut worst = 0.0;
        for _ in 0..MAX_ATTEMPTS {
            let raw = Tensor::<f64>::randn(&[d.n, d.n], &mut rng);
            let mut a = DMatrix::from_row_slice(d.n, d.n, raw.data());
            for &j in &d.traj_indices {
                a.column_mut(j).scale_mut(d.c);
            }
            let mut col_target = vec![d.n as f64; d.n];
            for &j in &d.traj_indices {
                col_target[j] *= d.c * d.c;
            }
            if !balance(&mut a, 1.0 / (norm * norm), &col_target) {
                continue;
            }
            let sv = a.singular_values();
            let cond = sv.max() / sv.min();
            if !(cond <= MAX_CONDITION) {
                worst = cond;
                continue;
            }
            let Some(a_inv) = a.clone().try_inverse() else { continue };
            return Ok(Self::assemble(d.clone(), a, a_inv, norm));
        }
        Err(GmdError::ConstructionFailure(format!(
            "no well-conditioned projection after {MAX_ATTEMPTS} draws (last condition number {worst:.3e})"
        )))
    }

    fn assemble(descriptor: ProjectorDescriptor, a: DMatrix<f64>, a_inv: DMatrix<f64>, norm: f64) -> Self {
        let forward = to_tensor(&a).scale(norm);
        let inverse = to_tensor(&a_inv).scale(1.0 / norm);
        EmphasisProjector { descriptor, a, a_inv, norm, forward, inverse }
    }

    pub fn descriptor(&self) -> &ProjectorDescriptor {
        &self.descriptor
    }

    pub fn n(&self) -> usize {
        self.descriptor.n
    }

    pub fn c(&self) -> f64 {
        self.descriptor.c
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn traj_indices(&self) -> &[usize] {
        &self.descriptor.traj_indices
    }

    /// Unnormalized `A = A′B`.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn inverse_matrix(&self) -> &DMatrix<f64> {
        &self.a_inv
    }

    /// `norm · A` as a tensor.
    pub fn forward_matrix<T: Scalar>(&self) -> Tensor<T> {
        self.forward.cast()
    }

    /// `A⁻¹ / norm` as a tensor.
    pub fn inverse_tensor<T: Scalar>(&self) -> Tensor<T> {
        self.inverse.cast()
    }

    fn check(&self, x_rows: usize) -> Result<()> {
        if x_rows != self.n() {
            return Err(GmdError::invalid(format!("sequence has {x_rows} channels, projector expects {}", self.n())));
        }
        Ok(())
    }

    /// `norm · A · x` on every frame of an `[N, M]` tensor.
    pub fn project_tensor<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x.rows())?;
        self.forward_matrix::<T>().matmul(x)
    }

    /// `A⁻¹ · x / norm` on every frame.
    pub fn unproject_tensor<T: Scalar>(&self, xp: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(xp.rows())?;
        self.inverse_tensor::<T>().matmul(xp)
    }

    pub fn project<T: Scalar>(&self, x: &MotionSeq<T>) -> Result<MotionSeq<T>> {
        x.expect(Representation::Normalized)?;
        Ok(MotionSeq::new(self.project_tensor(&x.data)?, Representation::Projected))
    }

    pub fn unproject<T: Scalar>(&self, xp: &MotionSeq<T>) -> Result<MotionSeq<T>> {
        xp.expect(Representation::Projected)?;
        Ok(MotionSeq::new(self.unproject_tensor(&xp.data)?, Representation::Normalized))
    }

    /// Share of projected variance from emphasized channels.
    pub fn relative_importance(&self) -> f64 {
        let k = self.descriptor.traj_indices.len() as f64;
        let e = k * (self.c() * self.c());
        e / ((self.n() as f64 - k) + e)
    }

    /// Spectral condition number of `A`.
    pub fn condition_number(&self) -> f64 {
        let sv = self.a.singular_values();
        sv.max() / sv.min()
    }
}
