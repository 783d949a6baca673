//! Minimal reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! replays it in reverse and accumulates gradients into the leaves. Leaves
//! are either trainable (gradients kept) or constant (gradients neither
//! stored nor propagated past them), which is how stop-gradient contracts
//! like "the adversarial encoder loss never updates the classifier" are
//! enforced structurally.
//!
//! The element type is generic over [`Real`] (`f32` for training, `f64` for
//! finite-difference verification), so the exact code path under test is the
//! one used in production.

pub mod kernels;
mod kernels_conv;

use std::collections::BTreeMap;

use ndarray::{Array1, ArrayD, Axis, IxDyn, Zip};

use crate::error::{Error, Result};

/// Floating-point element type usable on a tape.
pub trait Real:
    ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn abs_v(self) -> Self;
    fn exp_v(self) -> Self;
    fn tanh_v(self) -> Self;
    fn max_v(self, other: Self) -> Self;
    fn min_v(self, other: Self) -> Self;
    fn is_finite_v(self) -> bool;
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn abs_v(self) -> Self {
        self.abs()
    }
    fn exp_v(self) -> Self {
        self.exp()
    }
    fn tanh_v(self) -> Self {
        self.tanh()
    }
    fn max_v(self, other: Self) -> Self {
        self.max(other)
    }
    fn min_v(self, other: Self) -> Self {
        self.min(other)
    }
    fn is_finite_v(self) -> bool {
        self.is_finite()
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn abs_v(self) -> Self {
        self.abs()
    }
    fn exp_v(self) -> Self {
        self.exp()
    }
    fn tanh_v(self) -> Self {
        self.tanh()
    }
    fn max_v(self, other: Self) -> Self {
        self.max(other)
    }
    fn min_v(self, other: Self) -> Self {
        self.min(other)
    }
    fn is_finite_v(self) -> bool {
        self.is_finite()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<F: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, F),
    AddScalar(Var, F),
    Abs(Var),
    Square(Var),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, F),
    Softmax(Var, usize),
    MeanAll(Var),
    MeanAxes(Var, Vec<usize>),
    SumAxes(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    SliceAxis { x: Var, axis: usize, start: usize, len: usize },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    ConvT2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Linear { x: Var, w: Var, b: Var },
    BilinearUp(Var),
}

struct Node<F: Real> {
    value: ArrayD<F>,
    grad: Option<ArrayD<F>>,
    op: Op<F>,
    needs_grad: bool,
    /// im2col matrix kept by convolutions for the backward pass.
    saved_cols: Option<ndarray::Array2<F>>,
}

/// Records a forward computation and computes reverse-mode gradients.
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast shapes {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

/// Arrays at least this large go through the parallel element-wise path.
#[cfg(feature = "parallel")]
const PAR_ELEMWISE_MIN: usize = 1 << 18;

/// Elements per parallel task.
#[cfg(feature = "parallel")]
const PAR_CHUNK: usize = 1 << 16;

fn unary_map<F: Real>(x: &ArrayD<F>, f: impl Fn(F) -> F + Send + Sync) -> ArrayD<F> {
    let mut out = x.clone();
    #[cfg(feature = "parallel")]
    if out.len() >= PAR_ELEMWISE_MIN {
        if let Some(flat) = out.as_slice_mut() {
            use rayon::prelude::*;
            flat.par_chunks_mut(PAR_CHUNK).for_each(|chunk| {
                for v in chunk {
                    *v = f(*v);
                }
            });
            return out;
        }
    }
    out.mapv_inplace(f);
    out
}

/// Sums `g` down to `shape` (the reverse of a numpy-style broadcast).
fn reduce_to_shape<F: Real>(g: ArrayD<F>, shape: &[usize]) -> ArrayD<F> {
    if g.shape() == shape {
        return g;
    }
    let mut g = g;
    // sum away leading extra axes
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for i in 0..shape.len() {
        if shape[i] == 1 && g.shape()[i] != 1 {
            let summed = g.sum_axis(Axis(i)).insert_axis(Axis(i));
            g = summed;
        }
    }
    g
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, op, needs_grad, saved_cols: None });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Adds a trainable leaf; its gradient is kept after `backward`.
    pub fn param(&mut self, value: ArrayD<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Adds a constant leaf; gradients are never stored for it.
    pub fn constant(&mut self, value: ArrayD<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Re-enters a value as a constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    /// Value of a 0-dimensional node.
    pub fn scalar(&self, v: Var) -> F {
        debug_assert_eq!(self.nodes[v.0].value.ndim(), 0, "scalar() on non-scalar node");
        *self.nodes[v.0].value.first().expect("empty scalar node")
    }

    /// Gradient of a leaf, available after `backward`.
    pub fn grad(&self, v: Var) -> Option<&ArrayD<F>> {
        self.nodes[v.0].grad.as_ref()
    }

    fn binary<G>(&mut self, a: Var, b: Var, op: Op<F>, f: G) -> Var
    where
        G: Fn(F, F) -> F + Send + Sync,
    {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = if va.shape() == vb.shape() {
            let mut out = va.clone();
            #[cfg(feature = "parallel")]
            if out.len() >= PAR_ELEMWISE_MIN {
                Zip::from(&mut out).and(vb).par_for_each(|o, &r| *o = f(*o, r));
            } else {
                Zip::from(&mut out).and(vb).for_each(|o, &r| *o = f(*o, r));
            }
            #[cfg(not(feature = "parallel"))]
            Zip::from(&mut out).and(vb).for_each(|o, &r| *o = f(*o, r));
            out
        } else {
            let shape = broadcast_shape(va.shape(), vb.shape());
            let ba = va.broadcast(IxDyn(&shape)).expect("broadcast lhs");
            let bb = vb.broadcast(IxDyn(&shape)).expect("broadcast rhs");
            let mut out = ArrayD::from_elem(IxDyn(&shape), F::ZERO);
            #[cfg(feature = "parallel")]
            if out.len() >= PAR_ELEMWISE_MIN {
                Zip::from(&mut out).and(&ba).and(&bb).par_for_each(|o, &l, &r| *o = f(l, r));
            } else {
                Zip::from(&mut out).and(&ba).and(&bb).for_each(|o, &l, &r| *o = f(l, r));
            }
            #[cfg(not(feature = "parallel"))]
            Zip::from(&mut out).and(&ba).and(&bb).for_each(|o, &l, &r| *o = f(l, r));
            out
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(value, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |l, r| l + r)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |l, r| l - r)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |l, r| l * r)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |l, r| l / r)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let value = unary_map(&self.nodes[a.0].value, |v| v * c);
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, c), needs)
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        let value = unary_map(&self.nodes[a.0].value, |v| v + c);
        let needs = self.needs(a);
        self.push(value, Op::AddScalar(a, c), needs)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = unary_map(&self.nodes[a.0].value, |v| v.abs_v());
        let needs = self.needs(a);
        self.push(value, Op::Abs(a), needs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = unary_map(&self.nodes[a.0].value, |v| v * v);
        let needs = self.needs(a);
        self.push(value, Op::Square(a), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = unary_map(&self.nodes[a.0].value, |v| {
            let e = (F::ZERO - v).exp_v();
            F::ONE / (F::ONE + e)
        });
        let needs = self.needs(a);
        self.push(value, Op::Sigmoid(a), needs)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = unary_map(&self.nodes[a.0].value, |v| v.tanh_v());
        let needs = self.needs(a);
        self.push(value, Op::Tanh(a), needs)
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: F) -> Var {
        let value = unary_map(&self.nodes[a.0].value, |v| if v > F::ZERO { v } else { v * alpha });
        let needs = self.needs(a);
        self.push(value, Op::LeakyRelu(a, alpha), needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, F::ZERO)
    }

    /// Softmax along one axis.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Var {
        let x = &self.nodes[a.0].value;
        let mut value = x.clone();
        for mut lane in value.lanes_mut(Axis(axis)) {
            let mut max = F::from_f64(f64::NEG_INFINITY);
            for &v in lane.iter() {
                max = max.max_v(v);
            }
            let mut denom = F::ZERO;
            for v in lane.iter_mut() {
                *v = (*v - max).exp_v();
                denom = denom + *v;
            }
            for v in lane.iter_mut() {
                *v = *v / denom;
            }
        }
        let needs = self.needs(a);
        self.push(value, Op::Softmax(a, axis), needs)
    }

    /// Mean over every element, producing a 0-d scalar node.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let n = F::from_f64(x.len() as f64);
        let mut acc = F::ZERO;
        for &v in x.iter() {
            acc = acc + v;
        }
        let value = ArrayD::from_elem(IxDyn(&[]), acc / n);
        let needs = self.needs(a);
        self.push(value, Op::MeanAll(a), needs)
    }

    /// Mean over the given axes (dropped from the result).
    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Var {
        let x = &self.nodes[a.0].value;
        let mut value = x.clone();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        let mut count = 1usize;
        for &ax in sorted.iter().rev() {
            count *= value.shape()[ax];
            value = value.sum_axis(Axis(ax));
        }
        let inv = F::ONE / F::from_f64(count as f64);
        value.mapv_inplace(|v| v * inv);
        let needs = self.needs(a);
        self.push(value, Op::MeanAxes(a, sorted), needs)
    }

    /// Sum over the given axes (dropped from the result).
    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Var {
        let x = &self.nodes[a.0].value;
        let mut value = x.clone();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        for &ax in sorted.iter().rev() {
            value = value.sum_axis(Axis(ax));
        }
        let needs = self.needs(a);
        self.push(value, Op::SumAxes(a, sorted), needs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let x = &self.nodes[a.0].value;
        let value = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        let needs = self.needs(a);
        self.push(value, Op::Reshape(a), needs)
    }

    /// Contiguous slice along one axis; the backward pass zero-pads.
    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let x = &self.nodes[a.0].value;
        let value = x
            .slice_axis(Axis(axis), ndarray::Slice::from(start as isize..(start + len) as isize))
            .to_owned();
        let needs = self.needs(a);
        self.push(value, Op::SliceAxis { x: a, axis, start, len }, needs)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let needs = parts.iter().any(|v| self.needs(*v));
        self.push(value, Op::Concat(parts.to_vec(), axis), needs)
    }

    /// NCHW convolution; weights `(Cout, Cin, k, k)`, bias `(Cout,)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        let xv = self.nodes[x.0].value.view().into_dimensionality().expect("conv2d: x not 4-d");
        let wv = self.nodes[w.0].value.view().into_dimensionality().expect("conv2d: w not 4-d");
        let bv: Array1<F> =
            self.nodes[b.0].value.view().into_dimensionality::<ndarray::Ix1>().expect("conv2d: b not 1-d").to_owned();
        let (out, cols) = kernels::conv2d_fwd(&xv, &wv, &bv, stride, pad, needs);
        let var = self.push(out.into_dyn(), Op::Conv2d { x, w, b, stride, pad }, needs);
        self.nodes[var.0].saved_cols = cols;
        var
    }

    /// NCHW transposed convolution; weights `(Cin, Cout, k, k)`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality().expect("convT: x not 4-d");
        let wv = self.nodes[w.0].value.view().into_dimensionality().expect("convT: w not 4-d");
        let bv: Array1<F> =
            self.nodes[b.0].value.view().into_dimensionality::<ndarray::Ix1>().expect("convT: b not 1-d").to_owned();
        let out = kernels::conv_transpose2d_fwd(&xv, &wv, &bv, stride, pad);
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(out.into_dyn(), Op::ConvT2d { x, w, b, stride, pad }, needs)
    }

    /// Dense layer: `x (N, I) . w (I, O) + b (O)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<ndarray::Ix2>().expect("linear: x not 2-d");
        let wv = self.nodes[w.0].value.view().into_dimensionality::<ndarray::Ix2>().expect("linear: w not 2-d");
        let bv = self.nodes[b.0].value.view().into_dimensionality::<ndarray::Ix1>().expect("linear: b not 1-d");
        let mut out = xv.dot(&wv);
        for mut row in out.rows_mut() {
            row += &bv;
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(out.into_dyn(), Op::Linear { x, w, b }, needs)
    }

    /// Corner-aligned bilinear upsampling of the two trailing spatial axes.
    pub fn bilinear_up(&mut self, x: Var, th: usize, tw: usize) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality().expect("bilinear: x not 4-d");
        let out = kernels::bilinear_resize(&xv, th, tw);
        let needs = self.needs(x);
        self.push(out.into_dyn(), Op::BilinearUp(x), needs)
    }

    fn accumulate(&mut self, v: Var, g: ArrayD<F>) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        match &mut node.grad {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Runs reverse-mode accumulation from a scalar loss node.
    ///
    /// Gradients remain available on trainable leaves; interior gradients are
    /// freed as soon as they have been consumed.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.nodes[loss.0].value.ndim(), 0, "backward() needs a scalar loss");
        self.nodes[loss.0].grad = Some(ArrayD::from_elem(IxDyn(&[]), F::ONE));
        let trace = std::env::var("DLAB_OPTRACE").is_ok();
        let mut op_times: std::collections::BTreeMap<&'static str, std::time::Duration> =
            std::collections::BTreeMap::new();
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                self.nodes[i].grad = None;
                continue;
            }
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            if is_leaf {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let op = self.nodes[i].op.clone();
            let op_name: &'static str = match &op {
                Op::Leaf => "Leaf", Op::Add(..) => "Add", Op::Sub(..) => "Sub",
                Op::Mul(..) => "Mul", Op::Div(..) => "Div", Op::Scale(..) => "Scale",
                Op::AddScalar(..) => "AddScalar", Op::Abs(..) => "Abs", Op::Square(..) => "Square",
                Op::Sigmoid(..) => "Sigmoid", Op::Tanh(..) => "Tanh", Op::LeakyRelu(..) => "LeakyRelu",
                Op::Softmax(..) => "Softmax", Op::MeanAll(..) => "MeanAll", Op::MeanAxes(..) => "MeanAxes",
                Op::SumAxes(..) => "SumAxes", Op::Reshape(..) => "Reshape", Op::Concat(..) => "Concat",
                Op::Conv2d{..} => "Conv2d", Op::ConvT2d{..} => "ConvT2d", Op::Linear{..} => "Linear",
                Op::BilinearUp(..) => "BilinearUp", Op::SliceAxis{..} => "SliceAxis",
            };
            let t0 = trace.then(std::time::Instant::now);
            match op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    let ga = reduce_to_shape(g.clone(), self.nodes[a.0].value.shape());
                    let gb = reduce_to_shape(g, self.nodes[b.0].value.shape());
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::Sub(a, b) => {
                    let ga = reduce_to_shape(g.clone(), self.nodes[a.0].value.shape());
                    let gb = reduce_to_shape(g.mapv(|v| F::ZERO - v), self.nodes[b.0].value.shape());
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::Mul(a, b) => {
                    if self.needs(a) {
                        let vb = &self.nodes[b.0].value;
                        let prod = broadcast_apply(&g, vb, |gi, bi| gi * bi);
                        self.accumulate(a, reduce_to_shape(prod, self.nodes[a.0].value.shape()));
                    }
                    if self.needs(b) {
                        let va = &self.nodes[a.0].value;
                        let prod = broadcast_apply(&g, va, |gi, ai| gi * ai);
                        self.accumulate(b, reduce_to_shape(prod, self.nodes[b.0].value.shape()));
                    }
                }
                Op::Div(a, b) => {
                    if self.needs(a) {
                        let vb = &self.nodes[b.0].value;
                        let da = broadcast_apply(&g, vb, |gi, bi| gi / bi);
                        self.accumulate(a, reduce_to_shape(da, self.nodes[a.0].value.shape()));
                    }
                    if self.needs(b) {
                        let va = &self.nodes[a.0].value;
                        let vb = &self.nodes[b.0].value;
                        let num = broadcast_apply(&g, va, |gi, ai| gi * ai);
                        let db = broadcast_apply(&num, vb, |ni, bi| F::ZERO - ni / (bi * bi));
                        self.accumulate(b, reduce_to_shape(db, self.nodes[b.0].value.shape()));
                    }
                }
                Op::Scale(a, c) => {
                    self.accumulate(a, g.mapv(|v| v * c));
                }
                Op::AddScalar(a, _) => {
                    self.accumulate(a, g);
                }
                Op::Abs(a) => {
                    let x = &self.nodes[a.0].value;
                    let dx = zip_apply(g, x, |gi, xv| {
                        if xv > F::ZERO {
                            gi
                        } else if xv < F::ZERO {
                            F::ZERO - gi
                        } else {
                            F::ZERO
                        }
                    });
                    self.accumulate(a, dx);
                }
                Op::Square(a) => {
                    let two = F::from_f64(2.0);
                    let x = &self.nodes[a.0].value;
                    let dx = zip_apply(g, x, |gi, xv| two * gi * xv);
                    self.accumulate(a, dx);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    let dx = zip_apply(g, y, |gi, yv| gi * yv * (F::ONE - yv));
                    self.accumulate(a, dx);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    let dx = zip_apply(g, y, |gi, yv| gi * (F::ONE - yv * yv));
                    self.accumulate(a, dx);
                }
                Op::LeakyRelu(a, alpha) => {
                    let x = &self.nodes[a.0].value;
                    let dx = zip_apply(g, x, |gi, xv| if xv > F::ZERO { gi } else { gi * alpha });
                    self.accumulate(a, dx);
                }
                Op::Softmax(a, axis) => {
                    let y = &self.nodes[i].value;
                    let mut dx = y * &g;
                    // dx = y * (g - sum(g * y))
                    let dot = dx.sum_axis(Axis(axis)).insert_axis(Axis(axis));
                    let mut corr = y.clone();
                    Zip::from(&mut corr)
                        .and(&dot.broadcast(y.raw_dim()).expect("softmax broadcast"))
                        .for_each(|c, &s| *c = *c * s);
                    dx -= &corr;
                    self.accumulate(a, dx);
                }
                Op::MeanAll(a) => {
                    let shape = self.nodes[a.0].value.raw_dim();
                    let n = F::from_f64(self.nodes[a.0].value.len() as f64);
                    let seed = *g.first().expect("scalar grad") / n;
                    self.accumulate(a, ArrayD::from_elem(shape, seed));
                }
                Op::MeanAxes(a, axes) => {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    let mut count = 1usize;
                    let mut expanded = g;
                    for &ax in axes.iter() {
                        expanded = expanded.insert_axis(Axis(ax));
                        count *= shape[ax];
                    }
                    let scale = F::ONE / F::from_f64(count as f64);
                    let full = expanded
                        .broadcast(IxDyn(&shape))
                        .expect("mean_axes broadcast")
                        .mapv(|v| v * scale);
                    self.accumulate(a, full);
                }
                Op::SumAxes(a, axes) => {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    let mut expanded = g;
                    for &ax in axes.iter() {
                        expanded = expanded.insert_axis(Axis(ax));
                    }
                    let full = expanded
                        .broadcast(IxDyn(&shape))
                        .expect("sum_axes broadcast")
                        .to_owned();
                    self.accumulate(a, full);
                }
                Op::Reshape(a) => {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    let back = g
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(IxDyn(&shape))
                        .expect("reshape backward");
                    self.accumulate(a, back);
                }
                Op::SliceAxis { x, axis, start, len } => {
                    let shape = self.nodes[x.0].value.raw_dim();
                    let mut dx = ArrayD::from_elem(shape, F::ZERO);
                    dx.slice_axis_mut(
                        Axis(axis),
                        ndarray::Slice::from(start as isize..(start + len) as isize),
                    )
                    .assign(&g);
                    self.accumulate(x, dx);
                }
                Op::Concat(parts, axis) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.nodes[p.0].value.shape()[axis];
                        let piece = g
                            .slice_axis(Axis(axis), ndarray::Slice::from(offset as isize..(offset + w) as isize))
                            .to_owned();
                        offset += w;
                        self.accumulate(p, piece);
                    }
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let dout = g.view().into_dimensionality().expect("conv grad not 4-d");
                    let w_shape = {
                        let s = self.nodes[w.0].value.shape();
                        (s[0], s[1], s[2], s[3])
                    };
                    if self.needs(w) || self.needs(b) {
                        let cols = self.nodes[i]
                            .saved_cols
                            .take()
                            .expect("conv2d cols missing for backward");
                        let (dw, db) = kernels::conv2d_bwd_wb(&cols, &dout, w_shape);
                        self.accumulate(w, dw.into_dyn());
                        self.accumulate(b, db.into_dyn());
                    }
                    if self.needs(x) {
                        let x_shape = {
                            let s = self.nodes[x.0].value.shape();
                            (s[0], s[1], s[2], s[3])
                        };
                        let wv =
                            self.nodes[w.0].value.view().into_dimensionality().expect("conv w not 4-d");
                        let dx = kernels::conv2d_bwd_x(&wv, &dout, x_shape, stride, pad);
                        self.accumulate(x, dx.into_dyn());
                    }
                }
                Op::ConvT2d { x, w, b, stride, pad } => {
                    let dout = g.view().into_dimensionality().expect("convT grad not 4-d");
                    let xv = self.nodes[x.0].value.view().into_dimensionality().expect("convT x");
                    let wv = self.nodes[w.0].value.view().into_dimensionality().expect("convT w");
                    let (dx, dw, db) = kernels::conv_transpose2d_bwd(&xv, &wv, &dout, stride, pad);
                    if self.needs(x) {
                        self.accumulate(x, dx.into_dyn());
                    }
                    if self.needs(w) {
                        self.accumulate(w, dw.into_dyn());
                    }
                    if self.needs(b) {
                        self.accumulate(b, db.into_dyn());
                    }
                }
                Op::Linear { x, w, b } => {
                    let g2 = g.view().into_dimensionality::<ndarray::Ix2>().expect("linear grad");
                    if self.needs(x) {
                        let wv = self.nodes[w.0]
                            .value
                            .view()
                            .into_dimensionality::<ndarray::Ix2>()
                            .expect("linear w");
                        let dx = g2.dot(&wv.t());
                        self.accumulate(x, dx.into_dyn());
                    }
                    if self.needs(w) {
                        let xv = self.nodes[x.0]
                            .value
                            .view()
                            .into_dimensionality::<ndarray::Ix2>()
                            .expect("linear x");
                        let dw = xv.t().dot(&g2);
                        self.accumulate(w, dw.into_dyn());
                    }
                    if self.needs(b) {
                        let db = g2.sum_axis(Axis(0));
                        self.accumulate(b, db.into_dyn());
                    }
                }
                Op::BilinearUp(x) => {
                    let dout = g.view().into_dimensionality().expect("bilinear grad");
                    let s = self.nodes[x.0].value.shape().to_vec();
                    let dx = kernels::bilinear_resize_bwd(&dout, s[2], s[3]);
                    self.accumulate(x, dx.into_dyn());
                }
            }
            if let Some(t0) = t0 {
                *op_times.entry(op_name).or_default() += t0.elapsed();
            }
        }
        if trace {
            let mut entries: Vec<_> = op_times.into_iter().collect();
            entries.sort_by_key(|(_, d)| std::cmp::Reverse(*d));
            for (name, d) in entries {
                eprintln!("  bwd {name}: {d:?}");
            }
        }
    }
}

fn broadcast_apply<F: Real>(
    g: &ArrayD<F>,
    other: &ArrayD<F>,
    f: impl Fn(F, F) -> F + Send + Sync,
) -> ArrayD<F> {
    let mut out = g.clone();
    let bo = if g.shape() == other.shape() {
        other.view()
    } else {
        other.broadcast(g.raw_dim()).expect("gradient broadcast")
    };
    #[cfg(feature = "parallel")]
    if out.len() >= PAR_ELEMWISE_MIN {
        Zip::from(&mut out).and(&bo).par_for_each(|o, &r| *o = f(*o, r));
        return out;
    }
    Zip::from(&mut out).and(&bo).for_each(|o, &r| *o = f(*o, r));
    out
}

/// `out[i] = f(g[i], x[i])`, consuming `g`; parallel for large arrays.
fn zip_apply<F: Real>(g: ArrayD<F>, x: &ArrayD<F>, f: impl Fn(F, F) -> F + Send + Sync) -> ArrayD<F> {
    let mut out = g;
    #[cfg(feature = "parallel")]
    if out.len() >= PAR_ELEMWISE_MIN {
        let done = {
            let flat = out.as_slice_mut();
            let xs = x.as_slice();
            if let (Some(flat), Some(xs)) = (flat, xs) {
                use rayon::prelude::*;
                flat.par_chunks_mut(PAR_CHUNK).zip(xs.par_chunks(PAR_CHUNK)).for_each(
                    |(oc, xc)| {
                        for (o, &r) in oc.iter_mut().zip(xc) {
                            *o = f(*o, r);
                        }
                    },
                );
                true
            } else {
                false
            }
        };
        if done {
            return out;
        }
        Zip::from(&mut out).and(x).par_for_each(|o, &r| *o = f(*o, r));
        return out;
    }
    Zip::from(&mut out).and(x).for_each(|o, &r| *o = f(*o, r));
    out
}

/// Named parameter arrays, the unit of optimization and checkpointing.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<F: Real> {
    entries: BTreeMap<String, ArrayD<F>>,
}

impl<F: Real> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<F>) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<F>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<F>> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<F>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<F>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|a| a.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|a| a.iter().all(|v| v.is_finite_v()))
    }

    /// Element-wise cast to another float width (used by the verification
    /// suite to run the production graph in f64).
    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        let mut out = ParamSet::new();
        for (k, v) in self.iter() {
            out.insert(k.clone(), v.mapv(|x| G::from_f64(x.to_f64())));
        }
        out
    }
}

/// Tape handles for one bound [`ParamSet`].
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' not bound (architecture mismatch)"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Copies every array of `set` onto the tape, trainable or constant.
pub fn bind_params<F: Real>(tape: &mut Tape<F>, set: &ParamSet<F>, trainable: bool) -> BoundParams {
    let mut vars = BTreeMap::new();
    for (name, value) in set.iter() {
        let var = if trainable {
            tape.param(value.clone())
        } else {
            tape.constant(value.clone())
        };
        vars.insert(name.clone(), var);
    }
    BoundParams { vars }
}

/// Collects gradients for a bound set after `backward`; missing gradients
/// (parameters the loss does not reach) come back as zeros.
pub fn collect_grads<F: Real>(
    tape: &Tape<F>,
    set: &ParamSet<F>,
    bound: &BoundParams,
) -> Result<ParamSet<F>> {
    let mut out = ParamSet::new();
    for (name, value) in set.iter() {
        let var = bound.var(name);
        let g = match tape.grad(var) {
            Some(g) => g.clone(),
            None => ArrayD::from_elem(value.raw_dim(), F::ZERO),
        };
        if g.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "gradient shape {:?} does not match parameter '{name}' {:?}",
                g.shape(),
                value.shape()
            )));
        }
        out.insert(name.clone(), g);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Central finite differences against the tape gradient for a scalar
    /// function of one leaf.
    fn check_grad(
        shape: &[usize],
        seed: u64,
        f: impl Fn(&mut Tape<f64>, Var) -> Var,
        tol: f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = randn(&mut rng, shape);

        let mut tape = Tape::new();
        let x = tape.param(x0.clone());
        let loss = f(&mut tape, x);
        tape.backward(loss);
        let analytic = tape.grad(x).expect("missing grad").clone();

        let h = 1e-5;
        for idx in 0..x0.len() {
            let mut plus = x0.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            let mut minus = x0.clone();
            minus.as_slice_mut().unwrap()[idx] -= h;
            let eval = |arr: ArrayD<f64>| {
                let mut t = Tape::new();
                let v = t.constant(arr);
                let l = f(&mut t, v);
                t.scalar(l)
            };
            let fd = (eval(plus) - eval(minus)) / (2.0 * h);
            let an = analytic.as_slice().unwrap()[idx];
            let denom = an.abs().max(fd.abs()).max(1e-8);
            assert!(
                (an - fd).abs() / denom < tol,
                "index {idx}: analytic {an} vs fd {fd}"
            );
        }
    }

    #[test]
    fn grad_elementwise_chain() {
        check_grad(&[3, 4], 10, |t, x| {
            let s = t.sigmoid(x);
            let q = t.square(s);
            let a = t.abs(q);
            t.mean_all(a)
        }, 1e-6);
    }

    #[test]
    fn grad_tanh_scale() {
        check_grad(&[2, 5], 11, |t, x| {
            let y = t.tanh(x);
            let z = t.scale(y, 3.0);
            let w = t.add_scalar(z, 0.5);
            let sq = t.square(w);
            t.mean_all(sq)
        }, 1e-6);
    }

    #[test]
    fn grad_broadcast_mul_div() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let other = randn(&mut rng, &[2, 1, 4]).mapv(|v| v + 3.0);
        check_grad(&[2, 3, 4], 13, move |t, x| {
            let c = t.constant(other.clone());
            let m = t.mul(x, c);
            let d = t.div(m, c);
            let m2 = t.mul(d, c);
            t.mean_all(m2)
        }, 1e-6);
    }

    #[test]
    fn grad_softmax_mean_axes() {
        check_grad(&[2, 5, 3], 14, |t, x| {
            let s = t.softmax(x, 1);
            let sq = t.square(s);
            let m = t.mean_axes(sq, &[1]);
            t.mean_all(m)
        }, 1e-5);
    }

    #[test]
    fn grad_leaky_relu_sum_axes() {
        check_grad(&[3, 4], 15, |t, x| {
            let y = t.leaky_relu(x, 0.2);
            let s = t.sum_axes(y, &[0]);
            let sq = t.square(s);
            t.mean_all(sq)
        }, 1e-6);
    }

    #[test]
    fn grad_conv2d_all_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let w0 = randn(&mut rng, &[3, 2, 3, 3]);
        let b0 = randn(&mut rng, &[3]);
        // gradient w.r.t. x
        let (wc, bc) = (w0.clone(), b0.clone());
        check_grad(&[2, 2, 5, 4], 17, move |t, x| {
            let w = t.constant(wc.clone());
            let b = t.constant(bc.clone());
            let y = t.conv2d(x, w, b, 2, 1);
            let sq = t.square(y);
            t.mean_all(sq)
        }, 1e-5);
        // gradient w.r.t. w and b
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let x0 = randn(&mut rng, &[2, 2, 5, 4]);
        let (xc, bc) = (x0.clone(), b0.clone());
        check_grad(&[3, 2, 3, 3], 19, move |t, w| {
            let x = t.constant(xc.clone());
            let b = t.constant(bc.clone());
            let y = t.conv2d(x, w, b, 2, 1);
            let sq = t.square(y);
            t.mean_all(sq)
        }, 1e-5);
        let xc = x0.clone();
        let wc = w0.clone();
        check_grad(&[3], 20, move |t, b| {
            let x = t.constant(xc.clone());
            let w = t.constant(wc.clone());
            let y = t.conv2d(x, w, b, 2, 1);
            let sq = t.square(y);
            t.mean_all(sq)
        }, 1e-5);
    }

    #[test]
    fn grad_conv_transpose2d_all_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w0 = randn(&mut rng, &[2, 3, 4, 4]);
        let b0 = randn(&mut rng, &[3]);
        let x0 = randn(&mut rng, &[2, 2, 3, 3]);
        let (wc, bc) = (w0.clone(), b0.clone());
        check_grad(&[2, 2, 3, 3], 22, move |t, x| {
            let w = t.constant(wc.clone());
            let b = t.constant(bc.clone());
            let y = t.conv_transpose2d(x, w, b, 2, 1);
            let sq = t.square(y);
            t.mean_all(sq)
        }, 1e-5);
        let (xc, bc) = (x0.clone(), b0.clone());
        check_grad(&[2, 3, 4, 4], 23, move |t, w| {
            let x = t.constant(xc.clone());
            let b = t.constant(bc.clone());
            let y = t.conv_transpose2d(x, w, b, 2, 1);
            let sq = t.square(y);
            t.mean_all(sq)
        }, 1e-5);
        let (xc, wc) = (x0.clone(), w0.clone());
        check_grad(&[3], 24, move |t, b| {
            let x = t.constant(xc.clone());
            let w = t.constant(wc.clone());
            let y = t.conv_transpose2d(x, w, b, 2, 1);
            let sq = t.square(y);
            t.mean_all(sq)
        }, 1e-5);
    }

    #[test]
    fn grad_linear_concat_reshape() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let w0 = randn(&mut rng, &[6, 2]);
        let b0 = randn(&mut rng, &[2]);
        check_grad(&[3, 4], 26, move |t, x| {
            let part = t.square(x);
            let flat = t.reshape(part, &[3, 4]);
            let extra = t.constant(ArrayD::from_elem(IxDyn(&[3, 2]), 0.7));
            let cat = t.concat(&[flat, extra], 1);
            let w = t.constant(w0.clone());
            let b = t.constant(b0.clone());
            let y = t.linear(cat, w, b);
            let sq = t.square(y);
            t.mean_all(sq)
        }, 1e-6);
    }

    #[test]
    fn grad_bilinear_up() {
        check_grad(&[1, 2, 3, 3], 27, |t, x| {
            let up = t.bilinear_up(x, 9, 9);
            let sq = t.square(up);
            t.mean_all(sq)
        }, 1e-6);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let c = tape.constant(ArrayD::from_elem(IxDyn(&[2]), 2.0));
        let m = tape.mul(x, c);
        let loss = tape.mean_all(m);
        tape.backward(loss);
        assert!(tape.grad(x).is_some());
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn detach_cuts_gradient_flow() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(ArrayD::from_elem(IxDyn(&[2]), 3.0));
        let d = tape.detach(x);
        let sq = tape.square(d);
        let loss = tape.mean_all(sq);
        tape.backward(loss);
        assert!(tape.grad(x).is_none());
    }
}
