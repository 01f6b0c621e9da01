//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every operation on a [`Tensor`] that has a gradient-tracking ancestor
//! records a node holding the operation and its inputs. Node ids grow
//! monotonically, so sorting the reachable nodes by id yields a valid
//! topological order; that sorted list is the [`Tape`].
//!
//! Gradients are produced by [`backward`], [`grad`] and [`grad_graph`]. The
//! backward rule of every primitive is itself written in terms of tensor
//! operations, so when [`grad_graph`] runs the backward pass with recording
//! switched on, the returned gradients are ordinary graph tensors and can be
//! differentiated again. That is all second-order MAML needs.
//!
//! ```
//! use metadapt::autodiff::{grad, grad_graph, Tensor};
//!
//! let x = Tensor::param(vec![2.0], &[]).unwrap();
//! let y = x.mul(&x).unwrap().mul(&x).unwrap(); // x³
//! let dy = grad_graph(&y, &[x.clone()]).unwrap().remove(0); // 3x²
//! assert_eq!(dy.item(), 12.0);
//! let d2y = grad(&dy, &[x]).unwrap().remove(0); // 6x
//! assert_eq!(d2y.item(), 12.0);
//! ```

mod grad;
pub(crate) mod kernels;

use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

pub use grad::{backward, grad, grad_graph, Gradients, Tape};
pub use kernels::ConvGeom;

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static RECORDING: Cell<bool> = const { Cell::new(true) };
    static HIGHER_ORDER: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with graph recording switched off on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    with_recording(false, f)
}

pub(crate) fn with_recording<R>(on: bool, f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            RECORDING.with(|r| r.set(self.0));
        }
    }
    let _restore = Restore(RECORDING.with(|r| r.replace(on)));
    f()
}

pub fn is_recording() -> bool {
    RECORDING.with(Cell::get)
}

/// Enables or disables differentiation through gradients on this thread.
/// With it disabled, [`grad_graph`] fails and callers must fall back to
/// first-order MAML.
pub fn set_higher_order(enabled: bool) {
    HIGHER_ORDER.with(|h| h.set(enabled));
}

pub fn higher_order_enabled() -> bool {
    HIGHER_ORDER.with(Cell::get)
}

/// Stable handle of a tensor inside a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TensorId(u64);

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Op {
    Add,
    Sub,
    Mul,
    Scale(f64),
    Shift(f64),
    /// Product of the operands, each optionally read transposed.
    Matmul { ta: bool, tb: bool },
    Transpose,
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    BroadcastTo(Vec<usize>),
    SumTo(Vec<usize>),
    Sum,
    Mean,
    Relu,
    LeakyRelu(f64),
    Exp,
    Log,
    Sigmoid,
    Square,
    Sqrt,
    Recip,
    ClampMin(f64),
    Softmax(usize),
    Im2col(ConvGeom),
    Col2im(ConvGeom),
}

impl Op {
    pub(crate) fn kind(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scalar-mul",
            Op::Shift(_) => "scalar-add",
            Op::Matmul { .. } => "matmul",
            Op::Transpose => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Permute(_) => "permute",
            Op::BroadcastTo(_) => "broadcast",
            Op::SumTo(_) => "sum-to",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Relu => "relu",
            Op::LeakyRelu(_) => "leaky-relu",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sigmoid => "sigmoid",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Recip => "recip",
            Op::ClampMin(_) => "clamp-min",
            Op::Softmax(_) => "softmax",
            Op::Im2col(_) => "im2col",
            Op::Col2im(_) => "col2im",
        }
    }
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<Tensor>,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    node: Option<Node>,
}

/// Immutable n-dimensional array of `f64`, optionally part of a
/// differentiation graph. Cloning is cheap (shared storage).
#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.0.shape);
        if self.numel() <= 16 {
            d.field("data", &self.0.data);
        }
        d.field("requires_grad", &self.0.requires_grad);
        if let Some(node) = &self.0.node {
            d.field("op", &node.op.kind());
        }
        d.finish()
    }
}

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn leaf(data: Arc<Vec<f64>>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        Tensor(Arc::new(Inner {
            id: fresh_id(),
            shape,
            data,
            requires_grad,
            node: None,
        }))
    }

    /// Constant (non-differentiable) tensor.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(Tensor::leaf(Arc::new(data), shape.to_vec(), false))
    }

    /// Leaf tensor that gradients are taken with respect to.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(data, shape).map(|t| t.to_param())
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::leaf(Arc::new(vec![value]), Vec::new(), false)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::leaf(Arc::new(vec![value; numel(shape)]), shape.to_vec(), false)
    }

    pub fn id(&self) -> TensorId {
        TensorId(self.0.id)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.as_ref().clone()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a one-element tensor.
    ///
    /// # Panics
    /// If the tensor holds more than one value.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub(crate) fn node(&self) -> Option<&Node> {
        self.0.node.as_ref()
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.0.data.clone(), self.0.shape.clone(), false)
    }

    /// Same values as a fresh gradient-tracking leaf.
    pub fn to_param(&self) -> Tensor {
        Tensor::leaf(self.0.data.clone(), self.0.shape.clone(), true)
    }

    fn record(data: Vec<f64>, shape: Vec<usize>, op: Op, inputs: &[&Tensor]) -> Tensor {
        let requires_grad = is_recording() && inputs.iter().any(|t| t.requires_grad());
        let node = requires_grad.then(|| Node {
            op,
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
        });
        Tensor(Arc::new(Inner {
            id: fresh_id(),
            shape,
            data: Arc::new(data),
            requires_grad,
            node,
        }))
    }

    fn apply(op: Op, inputs: &[&Tensor]) -> Result<Tensor> {
        let views: Vec<View<'_>> = inputs.iter().map(|t| View::of(t)).collect();
        let (data, shape) = compute(&op, &views)?;
        Ok(Tensor::record(data, shape, op, inputs))
    }

    fn unary(&self, op: Op) -> Tensor {
        Tensor::apply(op, &[self]).expect("unary ops accept any shape")
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        Tensor::apply(Op::Add, &[self, other])
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        Tensor::apply(Op::Sub, &[self, other])
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        Tensor::apply(Op::Mul, &[self, other])
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.mul(&other.recip())
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(Op::Scale(c))
    }

    pub fn shift(&self, c: f64) -> Tensor {
        self.unary(Op::Shift(c))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.matmul_t(other, false, false)
    }

    /// `op(self) · op(other)`, where `op` transposes a 2-D operand when its
    /// flag is set. Avoids materializing transposes.
    pub fn matmul_t(&self, other: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
        Tensor::apply(Op::Matmul { ta, tb }, &[self, other])
    }

    /// Transpose of a 2-D tensor.
    pub fn t(&self) -> Result<Tensor> {
        Tensor::apply(Op::Transpose, &[self])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::apply(Op::Reshape(shape.to_vec()), &[self])
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        Tensor::apply(Op::Permute(perm.to_vec()), &[self])
    }

    /// Numpy-style expansion of size-1 (or missing leading) axes.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        Tensor::apply(Op::BroadcastTo(shape.to_vec()), &[self])
    }

    /// Sums over the axes that `shape` broadcasts along.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        Tensor::apply(Op::SumTo(shape.to_vec()), &[self])
    }

    pub fn sum(&self) -> Tensor {
        self.unary(Op::Sum)
    }

    pub fn mean(&self) -> Tensor {
        self.unary(Op::Mean)
    }

    /// Sum over one axis, keeping it with extent 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape().len() {
            return Err(Error::invalid(
                "sum-axis",
                format!("axis {axis} out of range for {:?}", self.shape()),
            ));
        }
        let mut s = self.shape().to_vec();
        s[axis] = 1;
        self.sum_to(&s)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(Op::Relu)
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        self.unary(Op::LeakyRelu(slope))
    }

    pub fn exp(&self) -> Tensor {
        self.unary(Op::Exp)
    }

    pub fn log(&self) -> Tensor {
        self.unary(Op::Log)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(Op::Sigmoid)
    }

    pub fn square(&self) -> Tensor {
        self.unary(Op::Square)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(Op::Sqrt)
    }

    pub fn recip(&self) -> Tensor {
        self.unary(Op::Recip)
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&self, floor: f64) -> Tensor {
        self.unary(Op::ClampMin(floor))
    }

    /// Softmax along `axis` (the class axis of NCHW maps is 1).
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        Tensor::apply(Op::Softmax(axis), &[self])
    }

    pub fn im2col(&self, geom: &ConvGeom) -> Result<Tensor> {
        Tensor::apply(Op::Im2col(*geom), &[self])
    }

    pub fn col2im(&self, geom: &ConvGeom) -> Result<Tensor> {
        Tensor::apply(Op::Col2im(*geom), &[self])
    }

    /// 2-D convolution of an NCHW input with an `(out, in, kh, kw)` kernel,
    /// lowered to `im2col` + `matmul`.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Tensor> {
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let geom = ConvGeom {
            batch: xs[0],
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel_h: ws[2],
            kernel_w: ws[3],
            stride,
            padding,
            dilation,
        };
        if !geom.validate() {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {ws:?} does not fit input {xs:?} (stride {stride}, padding {padding}, dilation {dilation})"),
            ));
        }
        let out_ch = ws[0];
        let cols = self.im2col(&geom)?;
        let w2 = weight.reshape(&[out_ch, geom.patch_len()])?;
        // (out, batch·oh·ow) → (out, batch, oh, ow) → NCHW
        let mut y = w2
            .matmul(&cols)?
            .reshape(&[out_ch, geom.batch, geom.out_h(), geom.out_w()])?
            .permute(&[1, 0, 2, 3])?;
        if let Some(b) = bias {
            if b.shape() != [out_ch] {
                return Err(Error::Shape {
                    op: "conv2d-bias",
                    lhs: vec![out_ch],
                    rhs: b.shape().to_vec(),
                });
            }
            let bb = b.reshape(&[1, out_ch, 1, 1])?.broadcast_to(y.shape())?;
            y = y.add(&bb)?;
        }
        Ok(y)
    }
}

/// Borrowed (data, shape) pair used by the forward kernels and tape replay.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub shape: &'a [usize],
}

impl<'a> View<'a> {
    pub(crate) fn of(t: &'a Tensor) -> View<'a> {
        View {
            data: t.data(),
            shape: t.shape(),
        }
    }
}

fn shape_err(op: &Op, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op: op.kind(),
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn map(v: &View<'_>, f: impl Fn(f64) -> f64) -> (Vec<f64>, Vec<usize>) {
    (v.data.iter().map(|&x| f(x)).collect(), v.shape.to_vec())
}

/// Forward evaluation of one primitive.
pub(crate) fn compute(op: &Op, inputs: &[View<'_>]) -> Result<(Vec<f64>, Vec<usize>)> {
    let a = inputs[0];
    let binary = |f: fn(f64, f64) -> f64| -> Result<(Vec<f64>, Vec<usize>)> {
        let b = inputs[1];
        if a.shape != b.shape {
            return Err(shape_err(op, a.shape, b.shape));
        }
        Ok((
            a.data.iter().zip(b.data).map(|(&x, &y)| f(x, y)).collect(),
            a.shape.to_vec(),
        ))
    };
    Ok(match op {
        Op::Add => binary(|x, y| x + y)?,
        Op::Sub => binary(|x, y| x - y)?,
        Op::Mul => binary(|x, y| x * y)?,
        Op::Scale(c) => map(&a, |x| x * c),
        Op::Shift(c) => map(&a, |x| x + c),
        Op::Matmul { ta, tb } => {
            let b = inputs[1];
            if a.shape.len() != 2 || b.shape.len() != 2 {
                return Err(shape_err(op, a.shape, b.shape));
            }
            let (m, k) = if *ta { (a.shape[1], a.shape[0]) } else { (a.shape[0], a.shape[1]) };
            let (k2, n) = if *tb { (b.shape[1], b.shape[0]) } else { (b.shape[0], b.shape[1]) };
            if k != k2 {
                return Err(shape_err(op, a.shape, b.shape));
            }
            (kernels::matmul(a.data, b.data, m, k, n, *ta, *tb), vec![m, n])
        }
        Op::Transpose => {
            if a.shape.len() != 2 {
                return Err(shape_err(op, a.shape, &[]));
            }
            let (r, c) = (a.shape[0], a.shape[1]);
            (kernels::transpose(a.data, r, c), vec![c, r])
        }
        Op::Reshape(to) => {
            if numel(to) != a.data.len() {
                return Err(shape_err(op, a.shape, to));
            }
            (a.data.to_vec(), to.clone())
        }
        Op::Permute(perm) => {
            let mut seen = vec![false; a.shape.len()];
            let valid = perm.len() == a.shape.len()
                && perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
            if !valid {
                return Err(shape_err(op, a.shape, perm));
            }
            let out_shape = perm.iter().map(|&p| a.shape[p]).collect();
            (kernels::permute(a.data, a.shape, perm), out_shape)
        }
        Op::BroadcastTo(to) => {
            if !kernels::can_broadcast(a.shape, to) {
                return Err(shape_err(op, a.shape, to));
            }
            (kernels::broadcast_to(a.data, a.shape, to), to.clone())
        }
        Op::SumTo(to) => {
            if !kernels::can_broadcast(to, a.shape) {
                return Err(shape_err(op, a.shape, to));
            }
            (kernels::sum_to(a.data, a.shape, to), to.clone())
        }
        Op::Sum => (vec![a.data.iter().sum()], Vec::new()),
        Op::Mean => {
            if a.data.is_empty() {
                return Err(Error::invalid("mean", "empty tensor"));
            }
            (
                vec![a.data.iter().sum::<f64>() / a.data.len() as f64],
                Vec::new(),
            )
        }
        Op::Relu => map(&a, |x| if x > 0.0 { x } else { 0.0 }),
        Op::LeakyRelu(s) => map(&a, |x| if x > 0.0 { x } else { s * x }),
        Op::Exp => map(&a, f64::exp),
        Op::Log => map(&a, f64::ln),
        Op::Sigmoid => map(&a, sigmoid),
        Op::Square => map(&a, |x| x * x),
        Op::Sqrt => map(&a, f64::sqrt),
        Op::Recip => map(&a, |x| 1.0 / x),
        Op::ClampMin(m) => map(&a, |x| if x > *m { x } else { *m }),
        Op::Softmax(axis) => {
            if *axis >= a.shape.len() {
                return Err(Error::invalid(
                    "softmax",
                    format!("axis {axis} out of range for {:?}", a.shape),
                ));
            }
            (softmax(a.data, a.shape, *axis), a.shape.to_vec())
        }
        Op::Im2col(g) => {
            if a.shape != g.input_shape().as_slice() {
                return Err(shape_err(op, a.shape, &g.input_shape()));
            }
            (kernels::im2col(a.data, g), g.cols_shape())
        }
        Op::Col2im(g) => {
            if a.shape != g.cols_shape().as_slice() {
                return Err(shape_err(op, a.shape, &g.cols_shape()));
            }
            (kernels::col2im(a.data, g), g.input_shape())
        }
    })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| o * len * inner + a * inner + i;
            let mut max = f64::NEG_INFINITY;
            for a in 0..len {
                max = max.max(data[at(a)]);
            }
            let mut total = 0.0;
            for a in 0..len {
                let e = (data[at(a)] - max).exp();
                out[at(a)] = e;
                total += e;
            }
            for a in 0..len {
                out[at(a)] /= total;
            }
        }
    }
    out
}
