//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every op appends a node holding its output value. Nodes are stored in
//! creation order, which is a topological order, so [`Graph::backward`] is a
//! single reverse sweep that visits each node once. Nodes whose inputs do
//! not require gradients are recorded as constants and skipped.

use std::collections::HashMap;
use std::fmt;

use super::kernels::{self, Conv2dParams, ConvDims};
use super::params::{ParamId, ParamStore};
use super::tensor::{check_shape, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An op whose backward pass is supplied from outside the engine.
///
/// `backward` returns one entry per input, `None` for inputs that take no
/// gradient.
pub trait CustomOp<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &[T],
    ) -> Result<Vec<Option<Vec<T>>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryOp {
    Neg,
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Relu,
    Sqrt,
    Softplus,
    Square,
}

enum Op<T: Scalar> {
    Leaf,
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    Scale(Var, T),
    Shift(Var),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
    },
    /// Sum or mean; `map[i]` is the output slot of input element `i`.
    Reduce {
        x: Var,
        map: Vec<usize>,
        scale: T,
    },
    Max {
        x: Var,
        argmax: Vec<usize>,
    },
    Softmax {
        x: Var,
        lanes: Lanes,
    },
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        blocks: Vec<usize>,
    },
    Reshape(Var),
    /// `map[o]` is the input element copied to output slot `o`.
    Gather {
        x: Var,
        map: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        channels: usize,
        inner: usize,
        batch_stats: bool,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

impl<T: Scalar> fmt::Debug for Op<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Op::Leaf => "leaf",
            Op::Binary(k, ..) => return write!(f, "{k:?}"),
            Op::Unary(k, _) => return write!(f, "{k:?}"),
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Reduce { .. } => "reduce",
            Op::Max { .. } => "max",
            Op::Softmax { .. } => "softmax",
            Op::Clamp { .. } => "clamp",
            Op::Concat { .. } => "concat",
            Op::Reshape(_) => "reshape",
            Op::Gather { .. } => "gather",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Custom { op, .. } => op.name(),
        };
        f.write_str(name)
    }
}

/// Outer/axis/inner decomposition of a shape around one axis.
#[derive(Clone, Copy, Debug)]
struct Lanes {
    outer: usize,
    len: usize,
    inner: usize,
}

impl Lanes {
    fn new(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }

    #[inline]
    fn at(&self, o: usize, k: usize, i: usize) -> usize {
        (o * self.len + k) * self.inner + i
    }
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Result of [`Graph::backward`]: one gradient buffer per node that was
/// reached and requires a gradient.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Leaf gradients keyed by node id.
    pub fn leaves<'a>(&'a self, graph: &'a Graph<T>) -> impl Iterator<Item = (Var, &'a [T])> + 'a {
        graph
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf) && n.value.requires_grad())
            .filter_map(|(i, _)| self.grads[i].as_deref().map(|g| (Var(i), g)))
    }
}

#[derive(Debug, Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            _ if da == db => da,
            (1, d) | (d, 1) => d,
            _ => {
                return Err(Error::Shape(format!(
                    "shapes {a:?} and {b:?} do not broadcast"
                )))
            }
        };
    }
    Ok(out)
}

/// Strides of `src` laid against `out` (right-aligned), zero along
/// broadcast axes.
fn aligned_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(src);
    let off = out.len() - src.len();
    (0..out.len())
        .map(|i| {
            if i < off || (src[i - off] == 1 && out[i] != 1) {
                0
            } else {
                s[i - off]
            }
        })
        .collect()
}

/// Visits every index of `shape` in row-major order, passing the flat output
/// index and the matching offsets under strides `sa` and `sb`.
fn walk2(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let nd = shape.len();
    let inner = shape[nd - 1];
    let (step_a, step_b) = (sa[nd - 1], sb[nd - 1]);
    let outer: usize = shape[..nd - 1].iter().product();
    let mut idx = vec![0usize; nd.saturating_sub(1)];
    let (mut base_a, mut base_b) = (0usize, 0usize);
    let mut o = 0;
    for _ in 0..outer {
        let (mut ia, mut ib) = (base_a, base_b);
        for _ in 0..inner {
            f(o, ia, ib);
            o += 1;
            ia += step_a;
            ib += step_b;
        }
        for ax in (0..nd - 1).rev() {
            idx[ax] += 1;
            base_a += sa[ax];
            base_b += sb[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            base_a -= sa[ax] * shape[ax];
            base_b -= sb[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

fn walk1(shape: &[usize], s: &[usize], mut f: impl FnMut(usize, usize)) {
    walk2(shape, s, s, |o, i, _| f(o, i));
}

fn normalize_axis(axis: usize, ndim: usize) -> Result<usize> {
    if axis < ndim {
        Ok(axis)
    } else {
        Err(Error::Shape(format!("axis {axis} out of range for {ndim}-d tensor")))
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Adds a leaf. The tensor's own `requires_grad` flag decides whether
    /// gradients are tracked through it.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let mut value = t;
        value.zero_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Binds a stored parameter as a leaf. Binding the same id twice returns
    /// the same node, so gradients from every use site accumulate into it.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let entry = store.entry(id);
        let t = entry.tensor().clone().with_requires_grad(entry.trainable());
        let v = self.leaf(t);
        self.bound.insert(id, v);
        v
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().map(|(&p, &v)| (p, v))
    }

    fn any_grad(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].value.requires_grad())
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let tracked = self.any_grad(inputs);
        let value = Tensor::from_vec(shape, data)
            .expect("op produced inconsistent shape")
            .with_requires_grad(tracked);
        let op = if tracked { op } else { Op::Leaf };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    // ---------------------------------------------------------------- binary

    fn binary(&mut self, kind: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (sa_shape, sb_shape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa_shape, &sb_shape)?;
        let sa = aligned_strides(&sa_shape, &out_shape);
        let sb = aligned_strides(&sb_shape, &out_shape);
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        if kind == BinaryOp::Div && xb.iter().any(|v| v.is_zero()) {
            return Err(Error::Domain("division by zero".into()));
        }
        let n: usize = out_shape.iter().product();
        let mut out = vec![T::zero(); n];
        let f = match kind {
            BinaryOp::Add => |x: T, y: T| x + y,
            BinaryOp::Sub => |x: T, y: T| x - y,
            BinaryOp::Mul => |x: T, y: T| x * y,
            BinaryOp::Div => |x: T, y: T| x / y,
        };
        walk2(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(xa[ia], xb[ib]));
        Ok(self.push(out_shape, out, Op::Binary(kind, a, b), &[a, b]))
    }

    /// Elementwise sum with NumPy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    // ----------------------------------------------------------------- unary

    fn unary(&mut self, kind: UnaryOp, x: Var) -> Result<Var> {
        let xv = self.value(x);
        match kind {
            UnaryOp::Log if xv.data().iter().any(|&v| v <= T::zero()) => {
                return Err(Error::Domain("log of a non-positive value".into()))
            }
            UnaryOp::Sqrt if xv.data().iter().any(|&v| v < T::zero()) => {
                return Err(Error::Domain("sqrt of a negative value".into()))
            }
            _ => {}
        }
        let f: fn(T) -> T = match kind {
            UnaryOp::Neg => |v| -v,
            UnaryOp::Exp => |v| v.exp(),
            UnaryOp::Log => |v| v.ln(),
            UnaryOp::Sigmoid => sigmoid,
            UnaryOp::Tanh => |v| v.tanh(),
            UnaryOp::Relu => |v| if v > T::zero() { v } else { T::zero() },
            UnaryOp::Sqrt => |v| v.sqrt(),
            UnaryOp::Softplus => softplus,
            UnaryOp::Square => |v| v * v,
        };
        let out = xv.data().iter().map(|&v| f(v)).collect();
        let shape = xv.shape().to_vec();
        Ok(self.push(shape, out, Op::Unary(kind, x), &[x]))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, x)
    }

    /// Natural log; any non-positive entry is a domain error.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Tanh, x)
    }

    /// ReLU with subgradient 0 at the origin.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sqrt, x)
    }

    /// `log(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Softplus, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Square, x)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let xv = self.value(x);
        let out = xv.data().iter().map(|&v| v * factor).collect();
        let shape = xv.shape().to_vec();
        Ok(self.push(shape, out, Op::Scale(x, factor), &[x]))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let xv = self.value(x);
        let out = xv.data().iter().map(|&v| v + c).collect();
        let shape = xv.shape().to_vec();
        Ok(self.push(shape, out, Op::Shift(x), &[x]))
    }

    /// Clamps into `[lo, hi]`. The gradient is 1 inside the closed interval
    /// and 0 outside it.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        if !(lo < hi) {
            return Err(Error::Contract(format!("clamp bounds must satisfy lo < hi, got [{lo}, {hi}]")));
        }
        let xv = self.value(x);
        let out = xv.data().iter().map(|&v| v.max(lo).min(hi)).collect();
        let shape = xv.shape().to_vec();
        Ok(self.push(shape, out, Op::Clamp { x, lo, hi }, &[x]))
    }

    // ------------------------------------------------------------ reductions

    fn reduce(&mut self, x: Var, axes: &[usize], keepdim: bool, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut reduced = vec![false; shape.len()];
        for &a in axes {
            reduced[normalize_axis(a, shape.len())?] = true;
        }
        let keep: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .map(|(&d, &r)| if r { 1 } else { d })
            .collect();
        let out_len: usize = keep.iter().product();
        let count = shape.iter().product::<usize>() / out_len;
        let s = aligned_strides(&keep, &shape);
        let mut map = vec![0usize; shape.iter().product()];
        walk1(&shape, &s, |i, o| map[i] = o);
        let scale = if mean { T::one() / T::cast(count as f64) } else { T::one() };
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); out_len];
        for (i, &o) in map.iter().enumerate() {
            out[o] += xd[i];
        }
        if mean {
            out.iter_mut().for_each(|v| *v *= scale);
        }
        let out_shape = if keepdim {
            keep
        } else {
            let s: Vec<usize> = shape
                .iter()
                .zip(&reduced)
                .filter(|(_, &r)| !r)
                .map(|(&d, _)| d)
                .collect();
            if s.is_empty() {
                vec![1]
            } else {
                s
            }
        };
        Ok(self.push(out_shape, out, Op::Reduce { x, map, scale }, &[x]))
    }

    /// Sum over `axes`.
    pub fn sum(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(x, axes, keepdim, false)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(x, axes, keepdim, true)
    }

    /// Sum of every element, as a one-element tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(x, &axes, false, false)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(x, &axes, false, true)
    }

    /// Maximum along `axis`; ties route the gradient to the first maximal
    /// index.
    pub fn max(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let axis = normalize_axis(axis, shape.len())?;
        let lanes = Lanes::new(&shape, axis);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(lanes.outer * lanes.inner);
        let mut argmax = Vec::with_capacity(lanes.outer * lanes.inner);
        for o in 0..lanes.outer {
            for i in 0..lanes.inner {
                let mut best = lanes.at(o, 0, i);
                for k in 1..lanes.len {
                    let j = lanes.at(o, k, i);
                    if xd[j] > xd[best] {
                        best = j;
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
            if out_shape.is_empty() {
                out_shape.push(1);
            }
        }
        Ok(self.push(out_shape, out, Op::Max { x, argmax }, &[x]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let axis = normalize_axis(axis, shape.len())?;
        let lanes = Lanes::new(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..lanes.outer {
            for i in 0..lanes.inner {
                let mut m = T::neg_infinity();
                for k in 0..lanes.len {
                    m = m.max(xd[lanes.at(o, k, i)]);
                }
                let mut z = T::zero();
                for k in 0..lanes.len {
                    let j = lanes.at(o, k, i);
                    out[j] = (xd[j] - m).exp();
                    z += out[j];
                }
                for k in 0..lanes.len {
                    let j = lanes.at(o, k, i);
                    out[j] = out[j] / z;
                }
            }
        }
        Ok(self.push(shape, out, Op::Softmax { x, lanes }, &[x]))
    }

    // ------------------------------------------------------- linear algebra

    /// `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (&[m, k], &[k2, n]) = (sa, sb) else {
            return Err(Error::Shape(format!("matmul needs 2-d operands, got {sa:?} and {sb:?}")));
        };
        if k != k2 {
            return Err(Error::Shape(format!("matmul inner dims differ: {sa:?} · {sb:?}")));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    /// Direct 2-D convolution (cross-correlation).
    ///
    /// `x` is `[n, c_in, h, w]` or `[c_in, h, w]`; `w` is
    /// `[c_out, c_in, kh, kw]`; `bias`, when given, is `[c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, p: Conv2dParams) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, c_in, h, wd, batched) = match xs.as_slice() {
            &[n, c, h, w] => (n, c, h, w, true),
            &[c, h, w] => (1, c, h, w, false),
            _ => return Err(Error::Shape(format!("conv2d input must be 3-d or 4-d, got {xs:?}"))),
        };
        let &[c_out, wc_in, kh, kw] = ws.as_slice() else {
            return Err(Error::Shape(format!("conv2d kernel must be 4-d, got {ws:?}")));
        };
        if wc_in != c_in {
            return Err(Error::Shape(format!(
                "conv2d kernel {ws:?} expects {wc_in} input channels, input has {c_in}"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(Error::Shape(format!(
                    "conv2d bias must be [{c_out}], got {:?}",
                    self.shape(b)
                )));
            }
        }
        let oh = kernels::conv_out_len(h, kh, p.stride.0, p.padding.0);
        let ow = kernels::conv_out_len(wd, kw, p.stride.1, p.padding.1);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::Shape(format!(
                "conv2d kernel {kh}x{kw} with {p:?} does not fit input {h}x{wd}"
            )));
        };
        let dims = ConvDims {
            n,
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            oh,
            ow,
            p,
        };
        let mut out = vec![T::zero(); n * c_out * oh * ow];
        kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            &dims,
            &mut out,
        );
        let shape = if batched { vec![n, c_out, oh, ow] } else { vec![c_out, oh, ow] };
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(shape, out, Op::Conv2d { x, w, b: bias, dims }, &inputs))
    }

    // ---------------------------------------------------------- restructure

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n = check_shape(shape)?;
        if n != self.value(x).numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        let data = self.value(x).data().to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Shape(format!("{perm:?} is not a permutation of {shape:?}")));
        }
        let in_strides = strides(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let s: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut map = vec![0usize; self.value(x).numel()];
        walk1(&out_shape, &s, |o, i| map[o] = i);
        let xd = self.value(x).data();
        let out = map.iter().map(|&i| xd[i]).collect();
        Ok(self.push(out_shape, out, Op::Gather { x, map }, &[x]))
    }

    /// Zero padding; `pads[a] = (before, after)` for each axis.
    pub fn pad(&mut self, x: Var, pads: &[(usize, usize)]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if pads.len() != shape.len() {
            return Err(Error::Shape(format!(
                "pad needs one (before, after) pair per axis of {shape:?}"
            )));
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(pads)
            .map(|(&d, &(b, a))| d + b + a)
            .collect();
        let os = strides(&out_shape);
        let base: usize = pads.iter().zip(&os).map(|(&(b, _), &s)| b * s).sum();
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); out_shape.iter().product()];
        let mut map = vec![0usize; xd.len()];
        walk1(&shape, &os, |i, o| {
            out[base + o] = xd[i];
            map[i] = base + o;
        });
        // Backward of a pad is a gather from the padded gradient.
        Ok(self.push(out_shape, out, Op::Reduce { x, map, scale: T::one() }, &[x]))
    }

    /// Slices `[start, end)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let axis = normalize_axis(axis, shape.len())?;
        if start >= end || end > shape[axis] {
            return Err(Error::Shape(format!(
                "narrow [{start}, {end}) out of range for axis {axis} of {shape:?}"
            )));
        }
        let lanes = Lanes::new(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = end - start;
        let mut map = Vec::with_capacity(out_shape.iter().product());
        for o in 0..lanes.outer {
            for k in start..end {
                for i in 0..lanes.inner {
                    map.push(lanes.at(o, k, i));
                }
            }
        }
        let xd = self.value(x).data();
        let out = map.iter().map(|&i| xd[i]).collect();
        Ok(self.push(out_shape, out, Op::Gather { x, map }, &[x]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(Error::Contract("concat of zero tensors".into()));
        };
        let shape0 = self.shape(first).to_vec();
        let axis = normalize_axis(axis, shape0.len())?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == shape0.len()
                && s.iter().zip(&shape0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape(format!(
                    "cannot concat {s:?} with {shape0:?} along axis {axis}"
                )));
            }
            total += s[axis];
        }
        let lanes = Lanes::new(&shape0, axis);
        let blocks: Vec<usize> = inputs
            .iter()
            .map(|&v| self.shape(v)[axis] * lanes.inner)
            .collect();
        let mut out = Vec::with_capacity(lanes.outer * total * lanes.inner);
        for o in 0..lanes.outer {
            for (&v, &blk) in inputs.iter().zip(&blocks) {
                out.extend_from_slice(&self.value(v).data()[o * blk..(o + 1) * blk]);
            }
        }
        let mut out_shape = shape0;
        out_shape[axis] = total;
        let op = Op::Concat {
            inputs: inputs.to_vec(),
            outer: lanes.outer,
            blocks,
        };
        Ok(self.push(out_shape, out, op, inputs))
    }

    // ------------------------------------------------------------ batchnorm

    fn bn_check(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let xs = self.shape(x);
        if xs.len() < 2 {
            return Err(Error::Shape(format!("batch norm needs [n, c, ...], got {xs:?}")));
        }
        let c = xs[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape(format!(
                "batch norm affine parameters must be [{c}], got {:?} and {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        Ok((xs[0], c, xs[2..].iter().product()))
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
        batch_stats: bool,
    ) -> Result<Var> {
        let (n, c, inner) = self.bn_check(x, gamma, beta)?;
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xd = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..n {
            for ch in 0..c {
                let off = (bi * c + ch) * inner;
                for j in off..off + inner {
                    xhat[j] = (xd[j] - mean[ch]) * inv_std[ch];
                    out[j] = g[ch] * xhat[j] + b[ch];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            channels: c,
            inner,
            batch_stats,
        };
        Ok(self.push(shape, out, op, &[x, gamma, beta]))
    }

    /// Batch normalization with statistics of the current batch, over every
    /// axis except 1. Returns the output and the batch mean and biased
    /// variance per channel.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (n, c, inner) = self.bn_check(x, gamma, beta)?;
        let xd = self.value(x).data();
        let count = T::cast((n * inner) as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for bi in 0..n {
                let off = (bi * c + ch) * inner;
                s += xd[off..off + inner].iter().copied().sum::<T>();
            }
            let m = s / count;
            let mut q = T::zero();
            for bi in 0..n {
                let off = (bi * c + ch) * inner;
                for &v in &xd[off..off + inner] {
                    q += (v - m) * (v - m);
                }
            }
            mean[ch] = m;
            var[ch] = q / count;
        }
        let out = self.bn_apply(x, gamma, beta, &mean, &var, eps, true)?;
        Ok((out, mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (_, c, _) = self.bn_check(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::Shape("running statistics do not match channel count".into()));
        }
        self.bn_apply(x, gamma, beta, mean, var, eps, false)
    }

    // --------------------------------------------------------------- custom

    /// Records an externally computed output whose gradient is supplied by
    /// `op`.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: impl CustomOp<T> + 'static) -> Var {
        let shape = output.shape().to_vec();
        let data = output.into_data();
        self.push(
            shape,
            data,
            Op::Custom {
                inputs: inputs.to_vec(),
                op: Box::new(op),
            },
            inputs,
        )
    }

    // ------------------------------------------------------------- backward

    /// Reverse sweep from a one-element `root`. Gradients sum over all paths.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.requires_grad(root) {
            grads[root.0] = Some(vec![T::one()]);
        }
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            self.backprop(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() && grads[i].is_none() {
                grads[i] = Some(vec![T::zero(); node.value.numel()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        let node = &self.nodes[v.0];
        if !node.value.requires_grad() {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]);
        f(slot);
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::Binary(kind, a, b) => {
                let out_shape = node.value.shape();
                let sa = aligned_strides(self.shape(a), out_shape);
                let sb = aligned_strides(self.shape(b), out_shape);
                let (xa, xb) = (self.value(a).data(), self.value(b).data());
                self.accumulate(grads, a, |ga| {
                    walk2(out_shape, &sa, &sb, |o, ia, ib| {
                        ga[ia] += match kind {
                            BinaryOp::Add | BinaryOp::Sub => g[o],
                            BinaryOp::Mul => g[o] * xb[ib],
                            BinaryOp::Div => g[o] / xb[ib],
                        }
                    })
                });
                self.accumulate(grads, b, |gb| {
                    walk2(out_shape, &sa, &sb, |o, ia, ib| {
                        gb[ib] += match kind {
                            BinaryOp::Add => g[o],
                            BinaryOp::Sub => -g[o],
                            BinaryOp::Mul => g[o] * xa[ia],
                            BinaryOp::Div => -g[o] * xa[ia] / (xb[ib] * xb[ib]),
                        }
                    })
                });
            }
            &Op::Unary(kind, x) => {
                let xd = self.value(x).data();
                let two = T::cast(2.0);
                self.accumulate(grads, x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i]
                            * match kind {
                                UnaryOp::Neg => -T::one(),
                                UnaryOp::Exp => y[i],
                                UnaryOp::Log => T::one() / xd[i],
                                UnaryOp::Sigmoid => y[i] * (T::one() - y[i]),
                                UnaryOp::Tanh => T::one() - y[i] * y[i],
                                UnaryOp::Relu => {
                                    if xd[i] > T::zero() {
                                        T::one()
                                    } else {
                                        T::zero()
                                    }
                                }
                                UnaryOp::Sqrt => T::one() / (two * y[i]),
                                UnaryOp::Softplus => sigmoid(xd[i]),
                                UnaryOp::Square => two * xd[i],
                            };
                    }
                });
            }
            &Op::Scale(x, f) => self.accumulate(grads, x, |gx| {
                gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b * f)
            }),
            &Op::Shift(x) | &Op::Reshape(x) => self.accumulate(grads, x, |gx| {
                gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b)
            }),
            &Op::Clamp { x, lo, hi } => {
                let xd = self.value(x).data();
                self.accumulate(grads, x, |gx| {
                    for i in 0..gx.len() {
                        if xd[i] >= lo && xd[i] <= hi {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::Reduce { x, map, scale } => self.accumulate(grads, *x, |gx| {
                for (i, &o) in map.iter().enumerate() {
                    gx[i] += g[o] * *scale;
                }
            }),
            Op::Gather { x, map } => self.accumulate(grads, *x, |gx| {
                for (o, &i) in map.iter().enumerate() {
                    gx[i] += g[o];
                }
            }),
            Op::Max { x, argmax } => self.accumulate(grads, *x, |gx| {
                for (o, &i) in argmax.iter().enumerate() {
                    gx[i] += g[o];
                }
            }),
            Op::Softmax { x, lanes } => self.accumulate(grads, *x, |gx| {
                for o in 0..lanes.outer {
                    for i in 0..lanes.inner {
                        let mut dot = T::zero();
                        for k in 0..lanes.len {
                            let j = lanes.at(o, k, i);
                            dot += g[j] * y[j];
                        }
                        for k in 0..lanes.len {
                            let j = lanes.at(o, k, i);
                            gx[j] += y[j] * (g[j] - dot);
                        }
                    }
                }
            }),
            &Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (xa, xb) = (self.value(a).data(), self.value(b).data());
                self.accumulate(grads, a, |ga| kernels::matmul_grad_a(g, xb, m, k, n, ga));
                self.accumulate(grads, b, |gb| kernels::matmul_grad_b(xa, g, m, k, n, gb));
            }
            Op::Conv2d { x, w, b, dims } => {
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                let mut gx = self
                    .requires_grad(*x)
                    .then(|| vec![T::zero(); xd.len()]);
                let mut gw = self
                    .requires_grad(*w)
                    .then(|| vec![T::zero(); wd.len()]);
                let mut gb = b
                    .filter(|b| self.requires_grad(*b))
                    .map(|_| vec![T::zero(); dims.c_out]);
                kernels::conv2d_backward(
                    xd,
                    wd,
                    g,
                    dims,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                let add = |dst: &mut [T], src: Vec<T>| {
                    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b)
                };
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, |d| add(d, gx));
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, |d| add(d, gw));
                }
                if let (Some(gb), Some(b)) = (gb, b) {
                    self.accumulate(grads, *b, |d| add(d, gb));
                }
            }
            Op::Concat {
                inputs,
                outer,
                blocks,
            } => {
                let total: usize = blocks.iter().sum();
                let mut start = 0;
                for (&v, &blk) in inputs.iter().zip(blocks) {
                    self.accumulate(grads, v, |gv| {
                        for o in 0..*outer {
                            let src = &g[o * total + start..o * total + start + blk];
                            gv[o * blk..(o + 1) * blk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, &b)| *a += b);
                        }
                    });
                    start += blk;
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                channels,
                inner,
                batch_stats,
            } => {
                let (c, inner) = (*channels, *inner);
                let n = xhat.len() / (c * inner);
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for bi in 0..n {
                    for ch in 0..c {
                        let off = (bi * c + ch) * inner;
                        for j in off..off + inner {
                            sum_g[ch] += g[j];
                            sum_gx[ch] += g[j] * xhat[j];
                        }
                    }
                }
                self.accumulate(grads, *gamma, |gg| {
                    gg.iter_mut().zip(&sum_gx).for_each(|(a, &b)| *a += b)
                });
                self.accumulate(grads, *beta, |gb| {
                    gb.iter_mut().zip(&sum_g).for_each(|(a, &b)| *a += b)
                });
                let m = T::cast((n * inner) as f64);
                self.accumulate(grads, *x, |gx| {
                    for bi in 0..n {
                        for ch in 0..c {
                            let off = (bi * c + ch) * inner;
                            let k = gam[ch] * inv_std[ch];
                            for j in off..off + inner {
                                gx[j] += if *batch_stats {
                                    k * (g[j] - sum_g[ch] / m - xhat[j] * sum_gx[ch] / m)
                                } else {
                                    k * g[j]
                                };
                            }
                        }
                    }
                });
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let parts = op.backward(&values, &node.value, g)?;
                if parts.len() != inputs.len() {
                    return Err(Error::Contract(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        op.name(),
                        parts.len(),
                        inputs.len()
                    )));
                }
                for (&v, part) in inputs.iter().zip(parts) {
                    if let Some(part) = part {
                        if part.len() != self.value(v).numel() {
                            return Err(Error::Shape(format!(
                                "custom op {} returned a gradient of the wrong size",
                                op.name()
                            )));
                        }
                        self.accumulate(grads, v, |gv| {
                            gv.iter_mut().zip(part).for_each(|(a, b)| *a += b)
                        });
                    }
                }
            }
        }
        Ok(())
    }
}
