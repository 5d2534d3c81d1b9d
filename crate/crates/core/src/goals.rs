//! Goal functions over ground trajectories and the 2-D signed distance world.
//!
//! A goal reads a `[2, M]` tensor of world-unit ground positions (rows x, z)
//! and is recorded on a tape so its gradient can flow back through whatever
//! produced the positions.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{GmdError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GoalNorm {
    L1,
    L2,
}

impl GoalNorm {
    pub fn from_p(p: u32) -> Result<Self> {
        match p {
            1 => Ok(GoalNorm::L1),
            2 => Ok(GoalNorm::L2),
            _ => Err(GmdError::invalid(format!("goal norm order must be 1 or 2, got {p}"))),
        }
    }

    pub fn p(self) -> u32 {
        match self {
            GoalNorm::L1 => 1,
            GoalNorm::L2 => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Obstacle {
    Circle { center: [f64; 2], radius: f64 },
    Box { min: [f64; 2], max: [f64; 2] },
}

impl Obstacle {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Obstacle::Circle { radius, .. } if !(radius > 0.0) => {
                Err(GmdError::invalid(format!("circle radius {radius} must be positive")))
            }
            Obstacle::Box { min, max } if !(min[0] < max[0] && min[1] < max[1]) => {
                Err(GmdError::invalid(format!("box min {min:?} must be below max {max:?}")))
            }
            _ => Ok(()),
        }
    }

    /// Signed distance and its (sub)gradient.
    pub fn eval(&self, px: f64, pz: f64) -> (f64, [f64; 2]) {
        match *self {
            Obstacle::Circle { center, radius } => {
                let (dx, dz) = (px - center[0], pz - center[1]);
                let d = dx.hypot(dz);
                let g = if d > 0.0 { [dx / d, dz / d] } else { [1.0, 0.0] };
                (d - radius, g)
            }
            Obstacle::Box { min, max } => {
                let c = [(min[0] + max[0]) / 2.0, (min[1] + max[1]) / 2.0];
                let h = [(max[0] - min[0]) / 2.0, (max[1] - min[1]) / 2.0];
                let d = [px - c[0], pz - c[1]];
                let sign = |v: f64| if v < 0.0 { -1.0 } else { 1.0 };
                let q = [d[0].abs() - h[0], d[1].abs() - h[1]];
                if q[0] > 0.0 || q[1] > 0.0 {
                    let o = [q[0].max(0.0), q[1].max(0.0)];
                    let n = o[0].hypot(o[1]);
                    (n, [sign(d[0]) * o[0] / n, sign(d[1]) * o[1] / n])
                } else if q[0] >= q[1] {
                    (q[0], [sign(d[0]), 0.0])
                } else {
                    (q[1], [0.0, sign(d[1])])
                }
            }
        }
    }
}

/// Union of obstacles.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SdfMap {
    pub obstacles: Vec<Obstacle>,
}

impl SdfMap {
    pub fn new(obstacles: Vec<Obstacle>) -> Result<Self> {
        for o in &obstacles {
            o.validate()?;
        }
        Ok(SdfMap { obstacles })
    }

    /// Minimum over obstacles; `+∞` with zero gradient for an empty map.
    pub fn eval(&self, px: f64, pz: f64) -> (f64, [f64; 2]) {
        self.obstacles.iter().map(|o| o.eval(px, pz)).fold((f64::INFINITY, [0.0, 0.0]), |best, cur| {
            if cur.0 < best.0 {
                cur
            } else {
                best
            }
        })
    }

    /// Smallest signed distance along a `[2, M]` ground path.
    pub fn min_along<T: Scalar>(&self, ground: &Tensor<T>) -> f64 {
        (0..ground.cols()).map(|j| self.eval(ground.at(0, j).f64(), ground.at(1, j).f64()).0).fold(f64::INFINITY, f64::min)
    }
}

pub fn sdf_eval(map: &SdfMap, point: [f64; 2]) -> (f64, [f64; 2]) {
    map.eval(point[0], point[1])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub frame: usize,
    pub x: f64,
    pub z: f64,
}

/// Keyframes with strictly increasing frame indices.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KeyframeSet {
    pub keys: Vec<Keyframe>,
}

impl KeyframeSet {
    pub fn new(keys: Vec<Keyframe>) -> Result<Self> {
        if keys.windows(2).any(|w| w[0].frame >= w[1].frame) {
            return Err(GmdError::invalid("keyframe indices must be strictly increasing"));
        }
        if keys.iter().any(|k| !(k.x.is_finite() && k.z.is_finite())) {
            return Err(GmdError::invalid("keyframe locations must be finite"));
        }
        Ok(KeyframeSet { keys })
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn check_frames(&self, m: usize) -> Result<()> {
        match self.keys.iter().find(|k| k.frame >= m) {
            Some(k) => Err(GmdError::invalid(format!("keyframe at frame {} outside 0..{m}", k.frame))),
            None => Ok(()),
        }
    }

    /// Keys read off a raw path (x in row 1, z in row 2) at `frames`.
    pub fn along(path: &Tensor<f64>, frames: &[usize]) -> Result<Self> {
        if path.rows() < 3 {
            return Err(GmdError::invalid("path needs rows rot, x and z"));
        }
        let keys = frames
            .iter()
            .map(|&f| {
                if f >= path.cols() {
                    return Err(GmdError::invalid(format!("frame {f} outside 0..{}", path.cols())));
                }
                Ok(Keyframe { frame: f, x: path.at(1, f), z: path.at(2, f) })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(keys)
    }

    /// `[2, M]` mask with ones at keyed frames.
    pub fn mask<T: Scalar>(&self, m: usize) -> Result<Tensor<T>> {
        self.check_frames(m)?;
        let mut out = Tensor::zeros(&[2, m]);
        for k in &self.keys {
            out.set(0, k.frame, T::one());
            out.set(1, k.frame, T::one());
        }
        Ok(out)
    }

    /// `[2, M]` targets, zero at unkeyed frames.
    pub fn targets<T: Scalar>(&self, m: usize) -> Result<Tensor<T>> {
        self.check_frames(m)?;
        let mut out = Tensor::zeros(&[2, m]);
        for k in &self.keys {
            out.set(0, k.frame, T::of(k.x));
            out.set(1, k.frame, T::of(k.z));
        }
        Ok(out)
    }
}

/// `k` frames spread evenly over `1..M`, ending at the last frame.
pub fn spread_frames(m: usize, k: usize) -> Vec<usize> {
    (1..=k).map(|j| j * (m - 1) / k).collect()
}

/// A goal `G ≥ const` over a `[2, M]` ground path.
#[derive(Clone, Debug, PartialEq)]
pub enum GoalFunction {
    /// `‖z − z_ref‖_p` over every frame.
    Trajectory { reference: Tensor<f64>, norm: GoalNorm },
    /// `Σ_keys ‖z_f − y_f‖_p`.
    Keyframe { keys: KeyframeSet, norm: GoalNorm },
    /// `Σ_i −min(SDF(z_i), c_safe)`.
    Obstacle { map: SdfMap, c_safe: f64 },
    /// `Σ w_k G_k`.
    Composite(Vec<(GoalFunction, f64)>),
    /// Zero everywhere.
    Zero,
}

/// Cap on SDF values fed to the tape so an empty map stays finite.
const SDF_CAP: f64 = 1e6;

pub fn trajectory_goal(reference: Tensor<f64>, p: u32) -> Result<GoalFunction> {
    if reference.shape().len() != 2 || reference.rows() != 2 {
        return Err(GmdError::invalid("reference trajectory must be [2, M] ground positions"));
    }
    Ok(GoalFunction::Trajectory { reference, norm: GoalNorm::from_p(p)? })
}

pub fn keyframe_goal(keys: KeyframeSet, p: u32) -> Result<GoalFunction> {
    Ok(GoalFunction::Keyframe { keys, norm: GoalNorm::from_p(p)? })
}

pub fn obstacle_goal(map: SdfMap, c_safe: f64) -> Result<GoalFunction> {
    if !(c_safe > 0.0) {
        return Err(GmdError::invalid(format!("safe distance {c_safe} must be positive")));
    }
    Ok(GoalFunction::Obstacle { map, c_safe })
}

pub fn composite_goal(goals: Vec<GoalFunction>, weights: Vec<f64>) -> Result<GoalFunction> {
    if goals.len() != weights.len() {
        return Err(GmdError::invalid(format!("{} goals but {} weights", goals.len(), weights.len())));
    }
    Ok(GoalFunction::Composite(goals.into_iter().zip(weights).collect()))
}

impl GoalFunction {
    /// Records `G(z)` on `tape` for a `[2, M]` ground path.
    pub fn record<'a, T: Scalar>(&self, tape: &mut Tape<'a, T>, z: Var) -> Result<Var> {
        let shape = tape.value(z).shape().to_vec();
        if shape.len() != 2 || shape[0] != 2 {
            return Err(GmdError::invalid(format!("goals read [2, M] ground paths, got {shape:?}")));
        }
        let m = shape[1];
        match self {
            GoalFunction::Trajectory { reference, norm } => {
                if reference.shape() != shape.as_slice() {
                    return Err(GmdError::invalid(format!(
                        "reference has shape {:?}, path has {shape:?}",
                        reference.shape()
                    )));
                }
                let r = tape.constant(reference.cast());
                let d = tape.sub(z, r)?;
                match norm {
                    GoalNorm::L1 => tape.l1_norm(d),
                    GoalNorm::L2 => {
                        let s = tape.l2_norm_squared(d)?;
                        tape.sqrt(s)
                    }
                }
            }
            GoalFunction::Keyframe { keys, norm } => {
                let mask = keys.mask::<T>(m)?;
                let y = tape.constant(keys.targets(m)?);
                let d = tape.sub(z, y)?;
                let d = tape.mask_select(d, &mask)?;
                match norm {
                    GoalNorm::L1 => tape.l1_norm(d),
                    GoalNorm::L2 => {
                        let n = tape.column_norms(d)?;
                        tape.sum(n)
                    }
                }
            }
            GoalFunction::Obstacle { map, c_safe } => {
                let f = tape.point_field(z, |x, zz| {
                    let (v, g) = map.eval(x.f64(), zz.f64());
                    (T::of(v.min(SDF_CAP)), (T::of(g[0]), T::of(g[1])))
                })?;
                let c = tape.clip_max(f, T::of(*c_safe))?;
                let s = tape.sum(c)?;
                tape.scale(s, -T::one())
            }
            GoalFunction::Composite(parts) => {
                let mut acc: Option<Var> = None;
                for (g, w) in parts {
                    let v = g.record(tape, z)?;
                    let v = tape.scale(v, T::of(*w))?;
                    acc = Some(match acc {
                        Some(a) => tape.add(a, v)?,
                        None => v,
                    });
                }
                match acc {
                    Some(a) => Ok(a),
                    None => GoalFunction::Zero.record(tape, z),
                }
            }
            GoalFunction::Zero => {
                let s = tape.sum(z)?;
                tape.scale(s, T::zero())
            }
        }
    }

    /// Value and gradient at a `[2, M]` ground path.
    pub fn value_and_grad<T: Scalar>(&self, z: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
        let mut tape = Tape::new();
        let zv = tape.leaf(z.clone(), true);
        let g = self.record(&mut tape, zv)?;
        let grads = tape.backward(g)?;
        Ok((tape.value(g).data()[0].f64(), grads.wrt(zv)))
    }

    pub fn value<T: Scalar>(&self, z: &Tensor<T>) -> Result<f64> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let g = self.record(&mut tape, zv)?;
        Ok(tape.value(g).data()[0].f64())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(cols: &[(f64, f64)]) -> Tensor<f64> {
        Tensor::from_fn2(2, cols.len(), |r, c| if r == 0 { cols[c].0 } else { cols[c].1 })
    }

    #[test]
    fn trajectory_goal_values() {
        let z = path(&[(0.0, 0.0), (3.0, 4.0)]);
        let zr = Tensor::zeros(&[2, 2]);
        assert_eq!(trajectory_goal(z.clone(), 1).unwrap().value(&z).unwrap(), 0.0);
        assert_eq!(trajectory_goal(zr.clone(), 2).unwrap().value(&z).unwrap(), 5.0);
        assert_eq!(trajectory_goal(zr.clone(), 1).unwrap().value(&z).unwrap(), 7.0);
        assert!(trajectory_goal(zr, 3).is_err());
        assert!(trajectory_goal(Tensor::zeros(&[2, 3]), 1).unwrap().value(&z).is_err());
    }

    #[test]
    fn keyframe_goal_values() {
        let z = path(&[(0.0, 0.0), (1.0, 1.0), (2.0, 0.0)]);
        let hit = KeyframeSet::new(vec![Keyframe { frame: 1, x: 1.0, z: 1.0 }]).unwrap();
        assert_eq!(keyframe_goal(hit, 1).unwrap().value(&z).unwrap(), 0.0);
        let one = KeyframeSet::new(vec![Keyframe { frame: 0, x: 1.0, z: 0.0 }]).unwrap();
        assert_eq!(keyframe_goal(one, 1).unwrap().value(&z).unwrap(), 1.0);
        let two =
            KeyframeSet::new(vec![Keyframe { frame: 0, x: 1.0, z: 0.0 }, Keyframe { frame: 2, x: 2.0, z: 2.0 }]).unwrap();
        assert_eq!(keyframe_goal(two, 1).unwrap().value(&z).unwrap(), 3.0);
        let far = KeyframeSet::new(vec![Keyframe { frame: 3, x: 0.0, z: 0.0 }]).unwrap();
        assert!(keyframe_goal(far, 1).unwrap().value(&z).is_err());
    }

    #[test]
    fn keyframes_must_increase() {
        let k = |f| Keyframe { frame: f, x: 0.0, z: 0.0 };
        assert!(KeyframeSet::new(vec![k(2), k(2)]).is_err());
        assert!(KeyframeSet::new(vec![k(3), k(1)]).is_err());
    }

    #[test]
    fn circle_sdf() {
        let map = SdfMap::new(vec![Obstacle::Circle { center: [0.0, 0.0], radius: 1.0 }]).unwrap();
        assert_eq!(sdf_eval(&map, [2.0, 0.0]), (1.0, [1.0, 0.0]));
        assert_eq!(sdf_eval(&map, [0.5, 0.0]), (-0.5, [1.0, 0.0]));
    }

    #[test]
    fn union_takes_minimum() {
        let a = Obstacle::Circle { center: [0.0, 0.0], radius: 1.0 };
        let b = Obstacle::Circle { center: [3.0, 0.0], radius: 0.5 };
        let map = SdfMap::new(vec![a, b]).unwrap();
        let p = [2.0, 0.3];
        assert_eq!(sdf_eval(&map, p).0, a.eval(p[0], p[1]).0.min(b.eval(p[0], p[1]).0));
    }

    #[test]
    fn box_sdf() {
        let b = Obstacle::Box { min: [-1.0, -1.0], max: [1.0, 1.0] };
        assert_eq!(b.eval(2.0, 0.0), (1.0, [1.0, 0.0]));
        assert_eq!(b.eval(0.0, -0.25), (-0.75, [0.0, -1.0]));
        let (v, g) = b.eval(4.0, 5.0);
        assert!((v - 5.0).abs() < 1e-15);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        assert!(Obstacle::Box { min: [0.0, 0.0], max: [0.0, 1.0] }.validate().is_err());
    }

    #[test]
    fn obstacle_goal_values() {
        let map = SdfMap::new(vec![Obstacle::Circle { center: [0.0, 0.0], radius: 1.0 }]).unwrap();
        let g = obstacle_goal(map, 0.5).unwrap();
        let far = path(&[(5.0, 0.0), (0.0, 6.0), (-4.0, -4.0)]);
        let (v, grad) = g.value_and_grad(&far).unwrap();
        assert_eq!(v, -1.5);
        assert!(grad.data().iter().all(|&x| x == 0.0));
        let near = path(&[(1.1, 0.0), (0.0, 6.0), (-4.0, -4.0)]);
        assert!((g.value(&near).unwrap() - (-0.1 - 1.0)).abs() < 1e-12);
        let inside = path(&[(0.5, 0.0), (0.0, 6.0), (-4.0, -4.0)]);
        assert!((g.value(&inside).unwrap() - (0.5 - 1.0)).abs() < 1e-12);
        assert!(obstacle_goal(SdfMap::default(), 0.0).is_err());
    }

    #[test]
    fn empty_map_is_saturated() {
        let g = obstacle_goal(SdfMap::default(), 0.5).unwrap();
        assert_eq!(g.value(&path(&[(0.0, 0.0), (1.0, 1.0)])).unwrap(), -1.0);
    }

    #[test]
    fn composite_weights() {
        let z = path(&[(1.0, 2.0)]);
        let a = trajectory_goal(Tensor::zeros(&[2, 1]), 1).unwrap();
        let b = trajectory_goal(Tensor::zeros(&[2, 1]), 2).unwrap();
        let single = composite_goal(vec![a.clone()], vec![1.0]).unwrap();
        assert_eq!(single.value_and_grad(&z).unwrap(), a.value_and_grad(&z).unwrap());
        let masked = composite_goal(vec![a.clone(), b.clone()], vec![1.0, 0.0]).unwrap();
        assert_eq!(masked.value(&z).unwrap(), 3.0);
        assert!(composite_goal(vec![a], vec![]).is_err());
    }

    #[test]
    fn zero_goal_has_zero_gradient() {
        let (v, g) = GoalFunction::Zero.value_and_grad(&path(&[(1.0, 2.0), (3.0, 4.0)])).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.data().iter().all(|&x| x == 0.0));
    }
}
