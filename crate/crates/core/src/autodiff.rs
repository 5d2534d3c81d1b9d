//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every forward op in evaluation order, so node indices
//! are already a topological order and [`Tape::backward`] is a single reverse
//! sweep. Leaves may borrow their tensors (network parameters are bound by
//! reference) and carry a `requires_grad` flag; pullbacks are skipped for
//! every input that does not need a gradient, which is what makes guidance
//! gradients through a frozen denoiser cheap.
//!
//! Conventions: the subgradient of `|x|` at 0 is 0, the gradient of
//! `clip_max` at exactly the bound is 0, and the gradient of `sqrt` (and of a
//! column norm) at 0 is 0. Broadcasting is limited to a constant scalar
//! ([`Tape::scale`]) and per-channel vectors against `[C, M]` sequences
//! ([`Tape::affine_modulate`], [`Tape::add_channel`]).

use std::borrow::Cow;

use crate::error::{GmdError, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul_into, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Conv1d { x: Var, w: Var, b: Option<Var> },
    GroupNorm { x: Var, groups: usize, rstd: Vec<T> },
    Affine { x: Var, scale: Var, shift: Var },
    AddChannel { x: Var, bias: Var },
    Mish(Var),
    Sum(Var),
    Mean(Var),
    L1Norm(Var),
    L2NormSq(Var),
    Sqrt(Var),
    ClipMax(Var, T),
    MaskSelect(Var, Vec<T>),
    Gather(Var, Vec<usize>),
    Concat(Var, Var),
    AvgPool2(Var),
    Upsample2(Var),
    Embedding { table: Var, index: usize },
    ColumnNorms(Var),
    PointField { z: Var, grads: Vec<(T, T)> },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-owner recording of one computation.
pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

impl<'a, T: Scalar> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar output with respect to every node on the tape.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`; zeros when `v` is not on any path to the output.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn sign0<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    if x > T::of(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn mish_fwd<T: Scalar>(x: T) -> T {
    x * softplus(x).tanh()
}

fn mish_grad<T: Scalar>(x: T) -> T {
    let th = softplus(x).tanh();
    let sig = T::one() / (T::one() + (-x).exp());
    th + x * sig * (T::one() - th * th)
}

fn expect_2d<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(GmdError::invalid(format!("{what}: expected a 2-D tensor, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Owned leaf.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Cow::Owned(t), op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed leaf; used for parameters so binding a network is free.
    pub fn leaf_ref(&mut self, t: &'a Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(t), op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, what: &str) -> Result<Var> {
        value.ensure_finite(what)?;
        self.nodes.push(Node { value: Cow::Owned(value), op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let v = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg, "scale")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg, "matmul")
    }

    /// Same-padded 1-D convolution. `x: [Ci, M]`, `w: [Co, Ci, K]` with odd
    /// `K`, optional bias of length `Co`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (ci, m) = expect_2d(xv, "conv1d input")?;
        if wv.shape().len() != 3 || wv.shape()[1] != ci || wv.shape()[2].is_multiple_of(2) {
            return Err(GmdError::invalid(format!(
                "conv1d weight {:?} incompatible with input {:?} (need [Co, {ci}, odd K])",
                wv.shape(),
                xv.shape()
            )));
        }
        let (co, k) = (wv.shape()[0], wv.shape()[2]);
        let mut out = vec![T::zero(); co * m];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != co {
                return Err(GmdError::invalid(format!("conv1d bias has {} entries, need {co}", bv.len())));
            }
            for o in 0..co {
                out[o * m..(o + 1) * m].iter_mut().for_each(|y| *y = bv.data()[o]);
            }
        }
        conv1d_forward(xv.data(), wv.data(), &mut out, ci, co, k, m);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::new(vec![co, m], out)?, Op::Conv1d { x, w, b }, rg, "conv1d")
    }

    /// Group normalization without affine parameters over `[C, M]`.
    pub fn group_norm(&mut self, x: Var, groups: usize) -> Result<Var> {
        let xv = self.value(x);
        let (c, m) = expect_2d(xv, "group_norm")?;
        if groups == 0 || c % groups != 0 {
            return Err(GmdError::invalid(format!("group_norm: {c} channels not divisible into {groups} groups")));
        }
        let eps = T::of(1e-5);
        let span = (c / groups) * m;
        let n = T::of(span as f64);
        let mut out = vec![T::zero(); c * m];
        let mut rstd = Vec::with_capacity(groups);
        for g in 0..groups {
            let xs = &xv.data()[g * span..(g + 1) * span];
            let mean = xs.iter().copied().sum::<T>() / n;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            for (o, &v) in out[g * span..(g + 1) * span].iter_mut().zip(xs) {
                *o = (v - mean) * r;
            }
            rstd.push(r);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![c, m], out)?, Op::GroupNorm { x, groups, rstd }, rg, "group_norm")
    }

    fn channel_vec_check(&self, x: Var, v: Var, what: &str) -> Result<(usize, usize)> {
        let (c, m) = expect_2d(self.value(x), what)?;
        if self.value(v).len() != c {
            return Err(GmdError::invalid(format!(
                "{what}: per-channel vector has {} entries, input has {c} channels",
                self.value(v).len()
            )));
        }
        Ok((c, m))
    }

    /// Per-channel `x * scale + shift`.
    pub fn affine_modulate(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (c, m) = self.channel_vec_check(x, scale, "affine_modulate scale")?;
        self.channel_vec_check(x, shift, "affine_modulate shift")?;
        let (xv, sv, hv) = (self.value(x), self.value(scale), self.value(shift));
        let out = Tensor::from_fn2(c, m, |r, j| xv.at(r, j) * sv.data()[r] + hv.data()[r]);
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        self.push(out, Op::Affine { x, scale, shift }, rg, "affine_modulate")
    }

    /// Per-channel bias.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (c, m) = self.channel_vec_check(x, bias, "add_channel")?;
        let (xv, bv) = (self.value(x), self.value(bias));
        let out = Tensor::from_fn2(c, m, |r, j| xv.at(r, j) + bv.data()[r]);
        let rg = self.rg(x) || self.rg(bias);
        self.push(out, Op::AddChannel { x, bias }, rg, "add_channel")
    }

    pub fn mish(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(mish_fwd);
        let rg = self.rg(x);
        self.push(v, Op::Mish(x), rg, "mish")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(v, Op::Sum(x), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let v = Tensor::scalar(xv.sum() / T::of(xv.len() as f64));
        let rg = self.rg(x);
        self.push(v, Op::Mean(x), rg, "mean")
    }

    /// `Σ |x|`.
    pub fn l1_norm(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).data().iter().map(|v| v.abs()).sum());
        let rg = self.rg(x);
        self.push(v, Op::L1Norm(x), rg, "l1_norm")
    }

    /// `Σ x²`.
    pub fn l2_norm_squared(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).data().iter().map(|&v| v * v).sum());
        let rg = self.rg(x);
        self.push(v, Op::L2NormSq(x), rg, "l2_norm_squared")
    }

    /// Elementwise square root.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|v| v.sqrt());
        let rg = self.rg(x);
        self.push(v, Op::Sqrt(x), rg, "sqrt")
    }

    /// Elementwise `min(x, bound)`.
    pub fn clip_max(&mut self, x: Var, bound: T) -> Result<Var> {
        let v = self.value(x).map(|v| v.min(bound));
        let rg = self.rg(x);
        self.push(v, Op::ClipMax(x, bound), rg, "clip_max")
    }

    /// Keeps the cells where `mask` is 1 and zeroes the rest.
    pub fn mask_select(&mut self, x: Var, mask: &Tensor<T>) -> Result<Var> {
        self.value(x).check_same_shape(mask, "mask_select")?;
        if mask.data().iter().any(|&m| m != T::zero() && m != T::one()) {
            return Err(GmdError::invalid("mask_select: mask entries must be 0 or 1"));
        }
        let v = self.value(x).mul(mask)?;
        let rg = self.rg(x);
        self.push(v, Op::MaskSelect(x, mask.data().to_vec()), rg, "mask_select")
    }

    /// Rows `idx` of a `[C, M]` sequence.
    pub fn gather_channels(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        expect_2d(self.value(x), "gather_channels")?;
        let v = self.value(x).select_rows(idx)?;
        let rg = self.rg(x);
        self.push(v, Op::Gather(x, idx.to_vec()), rg, "gather_channels")
    }

    /// Stacks `a` on top of `b` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, ma) = expect_2d(self.value(a), "concat_channels")?;
        let (cb, mb) = expect_2d(self.value(b), "concat_channels")?;
        if ma != mb {
            return Err(GmdError::invalid(format!("concat_channels: lengths {ma} and {mb} differ")));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![ca + cb, ma], data)?, Op::Concat(a, b), rg, "concat_channels")
    }

    /// Average pooling by 2 along frames.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, m) = expect_2d(self.value(x), "avg_pool2")?;
        if m % 2 != 0 {
            return Err(GmdError::invalid(format!("avg_pool2: odd length {m}")));
        }
        let xv = self.value(x);
        let half = T::of(0.5);
        let out = Tensor::from_fn2(c, m / 2, |r, j| (xv.at(r, 2 * j) + xv.at(r, 2 * j + 1)) * half);
        let rg = self.rg(x);
        self.push(out, Op::AvgPool2(x), rg, "avg_pool2")
    }

    /// Nearest-neighbour upsampling by 2 along frames.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (c, m) = expect_2d(self.value(x), "upsample2")?;
        let xv = self.value(x);
        let out = Tensor::from_fn2(c, 2 * m, |r, j| xv.at(r, j / 2));
        let rg = self.rg(x);
        self.push(out, Op::Upsample2(x), rg, "upsample2")
    }

    /// Row `index` of a `[V, D]` table as a `[D, 1]` column.
    pub fn embedding_lookup(&mut self, table: Var, index: usize) -> Result<Var> {
        let (v, d) = expect_2d(self.value(table), "embedding_lookup")?;
        if index >= v {
            return Err(GmdError::invalid(format!("embedding index {index} out of range for {v} rows")));
        }
        let out = Tensor::new(vec![d, 1], self.value(table).row(index).to_vec())?;
        let rg = self.rg(table);
        self.push(out, Op::Embedding { table, index }, rg, "embedding_lookup")
    }

    /// Sinusoidal embedding of an integer step as a constant `[dim, 1]` column,
    /// interleaved `[sin, cos, sin, cos, …]` over geometric frequencies.
    pub fn sinusoid_embed(&mut self, t: usize, dim: usize) -> Result<Var> {
        let e = sinusoid_embedding::<T>(t, dim)?;
        Ok(self.constant(e))
    }

    /// Euclidean norm of every column: `[R, M] -> [1, M]`.
    pub fn column_norms(&mut self, x: Var) -> Result<Var> {
        let (r, m) = expect_2d(self.value(x), "column_norms")?;
        let xv = self.value(x);
        let out = Tensor::from_fn2(1, m, |_, j| (0..r).map(|i| xv.at(i, j) * xv.at(i, j)).sum::<T>().sqrt());
        let rg = self.rg(x);
        self.push(out, Op::ColumnNorms(x), rg, "column_norms")
    }

    /// Applies a scalar field with a known gradient to every column of a
    /// `[2, M]` point sequence, giving `[1, M]`.
    pub fn point_field(&mut self, z: Var, field: impl Fn(T, T) -> (T, (T, T))) -> Result<Var> {
        let (r, m) = expect_2d(self.value(z), "point_field")?;
        if r != 2 {
            return Err(GmdError::invalid(format!("point_field expects 2 rows, got {r}")));
        }
        let zv = self.value(z);
        let mut vals = Vec::with_capacity(m);
        let mut grads = Vec::with_capacity(m);
        for j in 0..m {
            let (v, g) = field(zv.at(0, j), zv.at(1, j));
            vals.push(v);
            grads.push(g);
        }
        let rg = self.rg(z);
        self.push(Tensor::new(vec![1, m], vals)?, Op::PointField { z, grads }, rg, "point_field")
    }

    /// Gradients of the scalar `out` with respect to every node.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        if self.value(out).len() != 1 {
            return Err(GmdError::invalid(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(out).shape()
            )));
        }
        let n = out.0 + 1;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(self.value(out).shape(), T::one()));
        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.pullback(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn pullback(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut acc = |v: Var, contrib: Tensor<T>| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => existing.axpy(T::one(), &contrib),
                slot @ None => {
                    *slot = Some(contrib);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-T::one()))?;
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.mul(self.value(*b))?)?;
                }
                if self.rg(*b) {
                    acc(*b, g.mul(self.value(*a))?)?;
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s))?,
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (nn, k, m) = (av.rows(), av.cols(), bv.cols());
                if self.rg(*a) {
                    // dA = G · Bᵀ
                    let mut da = vec![T::zero(); nn * k];
                    for r in 0..nn {
                        let grow = g.row(r);
                        for p in 0..k {
                            da[r * k + p] = dot(grow, bv.row(p));
                        }
                    }
                    acc(*a, Tensor::new(av.shape().to_vec(), da)?)?;
                }
                if self.rg(*b) {
                    // dB = Aᵀ · G
                    let at = av.transpose();
                    let mut db = vec![T::zero(); k * m];
                    matmul_into(at.data(), g.data(), &mut db, k, nn, m);
                    acc(*b, Tensor::new(bv.shape().to_vec(), db)?)?;
                }
            }
            Op::Conv1d { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (ci, m) = (xv.rows(), xv.cols());
                let (co, k) = (wv.shape()[0], wv.shape()[2]);
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); ci * m];
                    conv1d_backward_input(g.data(), wv.data(), &mut dx, ci, co, k, m);
                    acc(*x, Tensor::new(vec![ci, m], dx)?)?;
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); co * ci * k];
                    conv1d_backward_weight(g.data(), xv.data(), &mut dw, ci, co, k, m);
                    acc(*w, Tensor::new(wv.shape().to_vec(), dw)?)?;
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let db: Vec<T> = (0..co).map(|o| g.row(o).iter().copied().sum()).collect();
                        acc(*b, Tensor::new(self.value(*b).shape().to_vec(), db)?)?;
                    }
                }
            }
            Op::GroupNorm { x, groups, rstd } => {
                let y = &node.value;
                let span = y.len() / groups;
                let n = T::of(span as f64);
                let mut dx = vec![T::zero(); y.len()];
                for gi in 0..*groups {
                    let ys = &y.data()[gi * span..(gi + 1) * span];
                    let gs = &g.data()[gi * span..(gi + 1) * span];
                    let mg = gs.iter().copied().sum::<T>() / n;
                    let mgy = dot(gs, ys) / n;
                    for ((d, &gv), &yv) in dx[gi * span..(gi + 1) * span].iter_mut().zip(gs).zip(ys) {
                        *d = rstd[gi] * (gv - mg - yv * mgy);
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), dx)?)?;
            }
            Op::Affine { x, scale, shift } => {
                let (xv, sv) = (self.value(*x), self.value(*scale));
                let (c, m) = (xv.rows(), xv.cols());
                if self.rg(*x) {
                    acc(*x, Tensor::from_fn2(c, m, |r, j| g.at(r, j) * sv.data()[r]))?;
                }
                if self.rg(*scale) {
                    let ds: Vec<T> = (0..c).map(|r| dot(g.row(r), xv.row(r))).collect();
                    acc(*scale, Tensor::new(sv.shape().to_vec(), ds)?)?;
                }
                if self.rg(*shift) {
                    let dh: Vec<T> = (0..c).map(|r| g.row(r).iter().copied().sum()).collect();
                    acc(*shift, Tensor::new(self.value(*shift).shape().to_vec(), dh)?)?;
                }
            }
            Op::AddChannel { x, bias } => {
                acc(*x, g.clone())?;
                if self.rg(*bias) {
                    let db: Vec<T> = (0..g.rows()).map(|r| g.row(r).iter().copied().sum()).collect();
                    acc(*bias, Tensor::new(self.value(*bias).shape().to_vec(), db)?)?;
                }
            }
            Op::Mish(x) => acc(*x, self.value(*x).zip_with(g, |xv, gv| gv * mish_grad(xv))?)?,
            Op::Sum(x) => acc(*x, Tensor::full(self.value(*x).shape(), g.data()[0]))?,
            Op::Mean(x) => {
                let n = T::of(self.value(*x).len() as f64);
                acc(*x, Tensor::full(self.value(*x).shape(), g.data()[0] / n))?
            }
            Op::L1Norm(x) => {
                let s = g.data()[0];
                acc(*x, self.value(*x).map(|v| s * sign0(v)))?
            }
            Op::L2NormSq(x) => {
                let s = g.data()[0] * T::of(2.0);
                acc(*x, self.value(*x).scale(s))?
            }
            Op::Sqrt(x) => {
                let y = &node.value;
                let half = T::of(0.5);
                acc(*x, y.zip_with(g, |yv, gv| if yv > T::zero() { gv * half / yv } else { T::zero() })?)?
            }
            Op::ClipMax(x, bound) => {
                let b = *bound;
                acc(*x, self.value(*x).zip_with(g, |xv, gv| if xv < b { gv } else { T::zero() })?)?
            }
            Op::MaskSelect(x, mask) => {
                let mut d = g.clone();
                for (dv, &mv) in d.data_mut().iter_mut().zip(mask) {
                    *dv *= mv;
                }
                acc(*x, d)?
            }
            Op::Gather(x, idx) => {
                let xv = self.value(*x);
                let mut d = Tensor::zeros(xv.shape());
                for (k, &r) in idx.iter().enumerate() {
                    for (dv, &gv) in d.row_mut(r).iter_mut().zip(g.row(k)) {
                        *dv += gv;
                    }
                }
                acc(*x, d)?
            }
            Op::Concat(a, b) => {
                let ca = self.value(*a).rows();
                let m = g.cols();
                let (ga, gb) = g.data().split_at(ca * m);
                acc(*a, Tensor::new(self.value(*a).shape().to_vec(), ga.to_vec())?)?;
                acc(*b, Tensor::new(self.value(*b).shape().to_vec(), gb.to_vec())?)?;
            }
            Op::AvgPool2(x) => {
                let xv = self.value(*x);
                let half = T::of(0.5);
                acc(*x, Tensor::from_fn2(xv.rows(), xv.cols(), |r, j| g.at(r, j / 2) * half))?
            }
            Op::Upsample2(x) => {
                let xv = self.value(*x);
                acc(*x, Tensor::from_fn2(xv.rows(), xv.cols(), |r, j| g.at(r, 2 * j) + g.at(r, 2 * j + 1)))?
            }
            Op::Embedding { table, index } => {
                let tv = self.value(*table);
                let mut d = Tensor::zeros(tv.shape());
                d.row_mut(*index).copy_from_slice(g.data());
                acc(*table, d)?
            }
            Op::ColumnNorms(x) => {
                let xv = self.value(*x);
                let y = &node.value;
                acc(
                    *x,
                    Tensor::from_fn2(xv.rows(), xv.cols(), |r, j| {
                        let nrm = y.at(0, j);
                        if nrm > T::zero() {
                            g.at(0, j) * xv.at(r, j) / nrm
                        } else {
                            T::zero()
                        }
                    }),
                )?
            }
            Op::PointField { z, grads: pg } => {
                let m = pg.len();
                acc(*z, Tensor::from_fn2(2, m, |r, j| g.at(0, j) * if r == 0 { pg[j].0 } else { pg[j].1 }))?
            }
        }
        Ok(())
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

/// Valid frame range `[lo, hi)` of output positions for kernel tap `off`.
#[inline]
fn tap_range(off: isize, m: usize) -> (usize, usize) {
    let lo = if off < 0 { (-off) as usize } else { 0 };
    let hi = if off > 0 { m.saturating_sub(off as usize) } else { m };
    (lo, hi.max(lo))
}

fn conv1d_forward<T: Scalar>(x: &[T], w: &[T], out: &mut [T], ci: usize, co: usize, k: usize, m: usize) {
    let pad = (k / 2) as isize;
    for o in 0..co {
        let orow = &mut out[o * m..(o + 1) * m];
        for i in 0..ci {
            let xrow = &x[i * m..(i + 1) * m];
            for kk in 0..k {
                let wv = w[(o * ci + i) * k + kk];
                let off = kk as isize - pad;
                let (lo, hi) = tap_range(off, m);
                let xs = &xrow[(lo as isize + off) as usize..(hi as isize + off) as usize];
                for (y, &xv) in orow[lo..hi].iter_mut().zip(xs) {
                    *y += wv * xv;
                }
            }
        }
    }
}

fn conv1d_backward_input<T: Scalar>(g: &[T], w: &[T], dx: &mut [T], ci: usize, co: usize, k: usize, m: usize) {
    let pad = (k / 2) as isize;
    for o in 0..co {
        let grow = &g[o * m..(o + 1) * m];
        for i in 0..ci {
            let drow = &mut dx[i * m..(i + 1) * m];
            for kk in 0..k {
                let wv = w[(o * ci + i) * k + kk];
                let off = kk as isize - pad;
                let (lo, hi) = tap_range(off, m);
                let ds = &mut drow[(lo as isize + off) as usize..(hi as isize + off) as usize];
                for (d, &gv) in ds.iter_mut().zip(&grow[lo..hi]) {
                    *d += wv * gv;
                }
            }
        }
    }
}

fn conv1d_backward_weight<T: Scalar>(g: &[T], x: &[T], dw: &mut [T], ci: usize, co: usize, k: usize, m: usize) {
    let pad = (k / 2) as isize;
    for o in 0..co {
        let grow = &g[o * m..(o + 1) * m];
        for i in 0..ci {
            let xrow = &x[i * m..(i + 1) * m];
            for kk in 0..k {
                let off = kk as isize - pad;
                let (lo, hi) = tap_range(off, m);
                let xs = &xrow[(lo as isize + off) as usize..(hi as isize + off) as usize];
                dw[(o * ci + i) * k + kk] += dot(&grow[lo..hi], xs);
            }
        }
    }
}

/// Standard sinusoidal step embedding as a `[dim, 1]` column.
pub fn sinusoid_embedding<T: Scalar>(t: usize, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(GmdError::invalid(format!("sinusoid embedding width must be even and positive, got {dim}")));
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        data.push(T::of(arg.sin()));
        data.push(T::of(arg.cos()));
    }
    Tensor::new(vec![dim, 1], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn mish_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[0.0]), true);
        let y = tape.mish(x).unwrap();
        assert_eq!(tape.value(y).data()[0], 0.0);
    }

    #[test]
    fn l1_norm_value_and_zero_subgradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[3.0, -4.0, 0.0]), true);
        let y = tape.l1_norm(x).unwrap();
        assert_eq!(tape.value(y).data()[0], 7.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, -1.0, 0.0]);
    }

    #[test]
    fn square_derivative() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[3.0]), true);
        let y = tape.mul(x, x).unwrap();
        assert_eq!(tape.backward(y).unwrap().wrt(x).data(), &[6.0]);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut tape = Tape::new();
        let sig = Tensor::from_fn2(2, 7, |r, c| (r as f64 + 1.0) * (c as f64).sin());
        let x = tape.leaf(sig.clone(), false);
        let mut w = Tensor::zeros(&[2, 2, 5]);
        w.data_mut()[2] = 1.0; // [0,0,2]
        w.data_mut()[(2 + 1) * 5 + 2] = 1.0; // [1,1,2]
        let w = tape.leaf(w, false);
        let y = tape.conv1d(x, w, None).unwrap();
        assert_eq!(tape.value(y), &sig);
    }

    #[test]
    fn clip_max_pullback_sides() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.2, 0.5, 0.9]), true);
        let y = tape.clip_max(x, 0.5).unwrap();
        let s = tape.sum(y).unwrap();
        assert_eq!(tape.value(y).data(), &[0.2, 0.5, 0.5]);
        assert_eq!(tape.backward(s).unwrap().wrt(x).data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(GmdError::InvalidArgument(_))));
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let unused = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let y = tape.sum(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_is_invalid_argument() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]), true);
        let b = tape.leaf(Tensor::zeros(&[3, 2]), true);
        assert!(matches!(tape.add(a, b), Err(GmdError::InvalidArgument(_))));
    }

    #[test]
    fn nan_is_numeric_failure() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[-1.0]), true);
        assert!(matches!(tape.sqrt(x), Err(GmdError::NumericFailure { .. })));
    }

    #[test]
    fn sinusoid_at_zero_alternates() {
        let e = sinusoid_embedding::<f64>(0, 8).unwrap();
        assert_eq!(e.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(sinusoid_embedding::<f64>(3, 7).is_err());
    }
}
