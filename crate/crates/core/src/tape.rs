//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation on a [`Tape`] evaluates eagerly and appends a node holding
//! its output and whatever the reverse pass needs. [`Tape::backward`] walks
//! the nodes in exact reverse order of recording and accumulates gradients
//! into every leaf created with `requires_grad`.
//!
//! ```
//! use srpn_core::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let a = tape.leaf(Tensor::vector(&[1.0, 0.0]).requiring_grad());
//! let b = tape.constant(Tensor::vector(&[0.0, 1.0]));
//! let d = tape.squared_l2(a, b).unwrap();
//! assert_eq!(tape.item(d), 2.0);
//! tape.backward(d).unwrap();
//! assert_eq!(tape.grad(a).unwrap().data(), &[2.0, -2.0]);
//! ```

use std::cell::{Cell, Ref, RefCell};
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::TensorError;
use crate::scalar::Real;
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(0);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    id: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.id
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        params: Conv2dParams,
    },
    Relu(usize),
    Logistic(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Ln { x: usize, eps: T },
    Powf { x: usize, p: T },
    SmoothL1(usize),
    Sum(usize),
    SquaredL2(usize, usize),
    RowSquaredL2(usize, usize),
    Gather { x: usize, indices: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    grad: Option<Vec<T>>,
}

/// Ordered record of executed operations.
pub struct Tape<T> {
    id: usize,
    nodes: RefCell<Vec<Node<T>>>,
    // Node count at the last backward pass; `None` before the first.
    consumed_at: Cell<Option<usize>>,
    visited: RefCell<Vec<usize>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            consumed_at: Cell::new(None),
            visited: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var {
            tape: self.id,
            id: nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize, TensorError> {
        if v.tape != self.id {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.id)
    }

    /// Smallest distance from any input of a recorded relu, smooth-L1 or
    /// clamped log to that operation's non-smooth point. `None` when no such
    /// operation was recorded.
    pub fn hinge_distance(&self) -> Option<T> {
        let nodes = self.nodes.borrow();
        let mut best: Option<T> = None;
        let mut see = |d: T| best = Some(best.map_or(d, |b: T| b.min(d)));
        for n in nodes.iter() {
            match &n.op {
                Op::Relu(x) => nodes[*x].value.data().iter().for_each(|v| see(v.abs())),
                Op::SmoothL1(x) => nodes[*x].value.data().iter().for_each(|v| see((v.abs() - T::one()).abs())),
                Op::Ln { x, eps } => nodes[*x].value.data().iter().for_each(|v| see((*v - *eps).abs())),
                _ => {}
            }
        }
        best
    }

    /// Records a leaf; it receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: Tensor<T>) -> Var {
        let needs = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.id].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.id].value.shape().to_vec()
    }

    /// First element of `v`; intended for scalars.
    pub fn item(&self, v: Var) -> T {
        self.nodes.borrow()[v.id].value.data()[0]
    }

    /// Gradient accumulated into `v` by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.id];
        node.grad.as_ref().map(|g| {
            Tensor::new(node.value.shape().to_vec(), g.clone()).expect("gradient shape")
        })
    }

    /// Copy of a leaf tensor with its gradient buffer populated.
    pub fn leaf_tensor(&self, v: Var) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.id];
        let mut t = node.value.clone();
        if let Some(g) = &node.grad {
            t.set_grad(g.clone());
        }
        t
    }

    /// Node indices in the order the last backward pass visited them.
    pub fn backward_trace(&self) -> Vec<usize> {
        self.visited.borrow().clone()
    }

    fn unary(&self, x: Var, f: impl Fn(T) -> T, op: impl FnOnce(usize) -> Op<T>) -> Var {
        let id = x.id;
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let src = &nodes[id];
            let data = src.value.data().iter().map(|&v| f(v)).collect();
            (
                Tensor::new(src.value.shape().to_vec(), data).expect("same shape"),
                src.needs_grad,
            )
        };
        self.push(value, op(id), needs)
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[ia].value, &nodes[ib].value);
            if va.shape() != vb.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: name,
                    expected: va.shape().to_vec(),
                    found: vb.shape().to_vec(),
                });
            }
            let data = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            (
                Tensor::new(va.shape().to_vec(), data).expect("same shape"),
                nodes[ia].needs_grad || nodes[ib].needs_grad,
            )
        };
        Ok(self.push(value, op, needs))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.id, b.id))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.id, b.id))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.id, b.id))
    }

    pub fn scale(&self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, |id| Op::Scale(id, c))
    }

    pub fn add_scalar(&self, x: Var, c: T) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar)
    }

    /// `max(x, 0)`; the subgradient at exactly 0 is 0.
    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu)
    }

    /// Numerically stable `1 / (1 + exp(-x))`.
    pub fn logistic(&self, x: Var) -> Var {
        self.unary(x, logistic, Op::Logistic)
    }

    /// `ln(max(x, eps))`; no gradient flows where the clamp is active.
    pub fn ln_clamped(&self, x: Var, eps: T) -> Var {
        self.unary(x, |v| v.max(eps).ln(), |id| Op::Ln { x: id, eps })
    }

    /// `x^p` for non-negative `x`.
    pub fn powf(&self, x: Var, p: T) -> Var {
        self.unary(x, |v| v.powf(p), |id| Op::Powf { x: id, p })
    }

    /// Elementwise `0.5 x^2` for `|x| < 1`, `|x| - 0.5` otherwise.
    pub fn smooth_l1(&self, x: Var) -> Var {
        self.unary(x, smooth_l1_value, Op::SmoothL1)
    }

    pub fn sum(&self, x: Var) -> Var {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let s: T = nodes[x.id].value.data().iter().copied().sum();
            (Tensor::scalar(s), nodes[x.id].needs_grad)
        };
        self.push(value, Op::Sum(x.id), needs)
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.nodes.borrow()[x.id].value.numel().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::from_usize_lossy(n))
    }

    /// `Σ (a - b)^2` over all elements.
    pub fn squared_l2(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[ia].value, &nodes[ib].value);
            if va.shape() != vb.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "squared_l2",
                    expected: va.shape().to_vec(),
                    found: vb.shape().to_vec(),
                });
            }
            let s = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum();
            (
                Tensor::scalar(s),
                nodes[ia].needs_grad || nodes[ib].needs_grad,
            )
        };
        Ok(self.push(value, Op::SquaredL2(ia, ib), needs))
    }

    /// Row-wise squared distances of two `[n, d]` matrices, giving `[n]`.
    pub fn row_squared_l2(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[ia].value, &nodes[ib].value);
            if va.shape() != vb.shape() || va.shape().len() != 2 {
                return Err(TensorError::ShapeMismatch {
                    op: "row_squared_l2",
                    expected: va.shape().to_vec(),
                    found: vb.shape().to_vec(),
                });
            }
            let (n, d) = (va.shape()[0], va.shape()[1]);
            let mut out = Vec::with_capacity(n);
            for r in 0..n {
                let ra = &va.data()[r * d..(r + 1) * d];
                let rb = &vb.data()[r * d..(r + 1) * d];
                out.push(ra.iter().zip(rb).map(|(&x, &y)| (x - y) * (x - y)).sum());
            }
            (
                Tensor::new(vec![n], out).expect("row count"),
                nodes[ia].needs_grad || nodes[ib].needs_grad,
            )
        };
        Ok(self.push(value, Op::RowSquaredL2(ia, ib), needs))
    }

    /// Picks elements of `x` by flat index into a tensor of `shape`.
    pub fn gather(&self, x: Var, indices: Vec<usize>, shape: Vec<usize>) -> Result<Var, TensorError> {
        let ix = self.check(x)?;
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let src = &nodes[ix].value;
            if let Some(&bad) = indices.iter().find(|&&i| i >= src.numel()) {
                return Err(TensorError::Invalid {
                    op: "gather",
                    msg: format!("index {bad} out of range for {} elements", src.numel()),
                });
            }
            let data = indices.iter().map(|&i| src.data()[i]).collect();
            (Tensor::new(shape, data)?, nodes[ix].needs_grad)
        };
        Ok(self.push(value, Op::Gather { x: ix, indices }, needs))
    }

    /// Cross-correlation of `input [C_in, H, W]` with `weight [C_out, C_in, k, k]`
    /// plus a per-channel `bias [C_out]`.
    ///
    /// Output size is `(H + 2·padding − k) / stride + 1` per spatial axis.
    pub fn conv2d(
        &self,
        input: Var,
        weight: Var,
        bias: Var,
        params: Conv2dParams,
    ) -> Result<Var, TensorError> {
        let (ii, iw, ib) = (self.check(input)?, self.check(weight)?, self.check(bias)?);
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let (x, w, b) = (&nodes[ii].value, &nodes[iw].value, &nodes[ib].value);
            let geom = ConvGeometry::new(x.shape(), w.shape(), b.shape(), params)?;
            let out = conv_forward(&geom, x.data(), w.data(), b.data());
            (
                Tensor::new(vec![geom.c_out, geom.h_out, geom.w_out], out)?,
                nodes[ii].needs_grad || nodes[iw].needs_grad || nodes[ib].needs_grad,
            )
        };
        Ok(self.push(
            value,
            Op::Conv2d {
                input: ii,
                weight: iw,
                bias: ib,
                params,
            },
            needs,
        ))
    }

    /// Accumulates `∂loss/∂v` for every node that needs a gradient.
    ///
    /// Rejected when `loss` is not a scalar or when no operation has been
    /// recorded since the previous backward pass.
    pub fn backward(&self, loss: Var) -> Result<(), TensorError> {
        let root = self.check(loss)?;
        let mut nodes = self.nodes.borrow_mut();
        if self.consumed_at.get() == Some(nodes.len()) {
            return Err(TensorError::BackwardConsumed);
        }
        if !nodes[root].value.is_scalar() {
            return Err(TensorError::NotScalar {
                shape: nodes[root].value.shape().to_vec(),
            });
        }
        for n in nodes.iter_mut() {
            n.grad = None;
        }
        let mut visited = self.visited.borrow_mut();
        visited.clear();

        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![T::one()]);
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].needs_grad {
                continue;
            }
            visited.push(id);
            propagate(&nodes, id, &g, &mut grads);
            nodes[id].grad = Some(g);
        }
        self.consumed_at.set(Some(nodes.len()));
        Ok(())
    }
}

pub(crate) fn logistic<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn smooth_l1_value<T: Real>(v: T) -> T {
    let a = v.abs();
    if a < T::one() {
        T::lit(0.5) * v * v
    } else {
        a - T::lit(0.5)
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let buf = slot.get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

fn propagate<T: Real>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[id];
    let needs = |i: usize| nodes[i].needs_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) {
                -T::one()
            } else {
                T::one()
            };
            if needs(*a) {
                accumulate(&mut grads[*a], g.len(), |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, &gi)| *o += gi)
                });
            }
            if needs(*b) {
                accumulate(&mut grads[*b], g.len(), |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, &gi)| *o += sign * gi)
                });
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
            if needs(*a) {
                accumulate(&mut grads[*a], g.len(), |buf| {
                    for ((o, &gi), &y) in buf.iter_mut().zip(g).zip(vb) {
                        *o += gi * y;
                    }
                });
            }
            if needs(*b) {
                accumulate(&mut grads[*b], g.len(), |buf| {
                    for ((o, &gi), &x) in buf.iter_mut().zip(g).zip(va) {
                        *o += gi * x;
                    }
                });
            }
        }
        Op::Scale(x, c) => {
            let c = *c;
            accumulate(&mut grads[*x], g.len(), |buf| {
                buf.iter_mut().zip(g).for_each(|(o, &gi)| *o += gi * c)
            });
        }
        Op::AddScalar(x) => {
            accumulate(&mut grads[*x], g.len(), |buf| {
                buf.iter_mut().zip(g).for_each(|(o, &gi)| *o += gi)
            });
        }
        Op::Relu(x) => {
            let input = nodes[*x].value.data();
            accumulate(&mut grads[*x], g.len(), |buf| {
                for ((o, &gi), &v) in buf.iter_mut().zip(g).zip(input) {
                    if v > T::zero() {
                        *o += gi;
                    }
                }
            });
        }
        Op::Logistic(x) => {
            let out = node.value.data();
            accumulate(&mut grads[*x], g.len(), |buf| {
                for ((o, &gi), &y) in buf.iter_mut().zip(g).zip(out) {
                    *o += gi * y * (T::one() - y);
                }
            });
        }
        Op::Ln { x, eps } => {
            let input = nodes[*x].value.data();
            let eps = *eps;
            accumulate(&mut grads[*x], g.len(), |buf| {
                for ((o, &gi), &v) in buf.iter_mut().zip(g).zip(input) {
                    if v > eps {
                        *o += gi / v;
                    }
                }
            });
        }
        Op::Powf { x, p } => {
            let input = nodes[*x].value.data();
            let p = *p;
            accumulate(&mut grads[*x], g.len(), |buf| {
                if p == T::zero() {
                    return;
                }
                for ((o, &gi), &v) in buf.iter_mut().zip(g).zip(input) {
                    *o += gi * p * v.powf(p - T::one());
                }
            });
        }
        Op::SmoothL1(x) => {
            let input = nodes[*x].value.data();
            accumulate(&mut grads[*x], g.len(), |buf| {
                for ((o, &gi), &v) in buf.iter_mut().zip(g).zip(input) {
                    let d = if v.abs() < T::one() { v } else { v.signum() };
                    *o += gi * d;
                }
            });
        }
        Op::Sum(x) => {
            let n = nodes[*x].value.numel();
            let g0 = g[0];
            accumulate(&mut grads[*x], n, |buf| buf.iter_mut().for_each(|o| *o += g0));
        }
        Op::SquaredL2(a, b) => {
            let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
            let two_g = T::lit(2.0) * g[0];
            if needs(*a) {
                accumulate(&mut grads[*a], va.len(), |buf| {
                    for ((o, &x), &y) in buf.iter_mut().zip(va).zip(vb) {
                        *o += two_g * (x - y);
                    }
                });
            }
            if needs(*b) {
                accumulate(&mut grads[*b], va.len(), |buf| {
                    for ((o, &x), &y) in buf.iter_mut().zip(va).zip(vb) {
                        *o -= two_g * (x - y);
                    }
                });
            }
        }
        Op::RowSquaredL2(a, b) => {
            let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
            let d = nodes[*a].value.shape()[1];
            let two = T::lit(2.0);
            for (target, sign) in [(*a, T::one()), (*b, -T::one())] {
                if !needs(target) {
                    continue;
                }
                accumulate(&mut grads[target], va.len(), |buf| {
                    for (i, o) in buf.iter_mut().enumerate() {
                        *o += sign * two * g[i / d] * (va[i] - vb[i]);
                    }
                });
            }
        }
        Op::Gather { x, indices } => {
            let n = nodes[*x].value.numel();
            accumulate(&mut grads[*x], n, |buf| {
                for (&i, &gi) in indices.iter().zip(g) {
                    buf[i] += gi;
                }
            });
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            params,
        } => {
            let (x, w, b) = (&nodes[*input].value, &nodes[*weight].value, &nodes[*bias].value);
            let geom = ConvGeometry::new(x.shape(), w.shape(), b.shape(), *params)
                .expect("validated on forward");
            if needs(*bias) {
                accumulate(&mut grads[*bias], geom.c_out, |buf| {
                    let plane = geom.h_out * geom.w_out;
                    for (co, o) in buf.iter_mut().enumerate() {
                        *o += g[co * plane..(co + 1) * plane].iter().copied().sum::<T>();
                    }
                });
            }
            if needs(*weight) {
                accumulate(&mut grads[*weight], w.numel(), |buf| {
                    conv_backward_weight(&geom, x.data(), g, buf)
                });
            }
            if needs(*input) {
                accumulate(&mut grads[*input], x.numel(), |buf| {
                    conv_backward_input(&geom, w.data(), g, buf)
                });
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeometry {
    fn new(
        x: &[usize],
        w: &[usize],
        b: &[usize],
        params: Conv2dParams,
    ) -> Result<Self, TensorError> {
        if x.len() != 3 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("input must be [C, H, W], got {x:?}"),
            });
        }
        if w.len() != 4 || w[2] != w[3] {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("weight must be [C_out, C_in, k, k], got {w:?}"),
            });
        }
        if w[1] != x[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d input channels",
                expected: vec![w[1]],
                found: vec![x[0]],
            });
        }
        if b != [w[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                expected: vec![w[0]],
                found: b.to_vec(),
            });
        }
        if params.stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: "stride must be positive".into(),
            });
        }
        let k = w[2];
        let (h, wd) = (x[1] + 2 * params.padding, x[2] + 2 * params.padding);
        if h < k || wd < k {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("kernel {k} larger than padded input {h}x{wd}"),
            });
        }
        Ok(Self {
            c_in: x[0],
            h: x[1],
            w: x[2],
            c_out: w[0],
            k,
            stride: params.stride,
            pad: params.padding,
            h_out: (h - k) / params.stride + 1,
            w_out: (wd - k) / params.stride + 1,
        })
    }

    /// Output index range `[lo, hi)` whose input coordinate
    /// `o·stride + tap − pad` lies inside `[0, extent)`.
    fn valid_range(&self, tap: usize, extent: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if tap >= self.pad {
            0
        } else {
            (self.pad - tap).div_ceil(s)
        };
        // largest o with o·s + tap − pad ≤ extent − 1
        let hi = if extent + self.pad < tap + 1 {
            0
        } else {
            ((extent - 1 + self.pad - tap) / s + 1).min(out_len)
        };
        (lo, hi.max(lo))
    }
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    /// Unfolds the input into a `[c_in·k·k, h_out·w_out]` patch matrix.
    fn im2col<T: Real>(&self, x: &[T]) -> Vec<T> {
        let plane_out = self.h_out * self.w_out;
        let mut cols = vec![T::zero(); self.patch_len() * plane_out];
        for ci in 0..self.c_in {
            let x_c = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                let (oy0, oy1) = self.valid_range(ky, self.h, self.h_out);
                for kx in 0..self.k {
                    let (ox0, ox1) = self.valid_range(kx, self.w, self.w_out);
                    let r = (ci * self.k + ky) * self.k + kx;
                    let row = &mut cols[r * plane_out..(r + 1) * plane_out];
                    for oy in oy0..oy1 {
                        let iy = oy * self.stride + ky - self.pad;
                        let src = &x_c[iy * self.w..(iy + 1) * self.w];
                        let dst = &mut row[oy * self.w_out..(oy + 1) * self.w_out];
                        for ox in ox0..ox1 {
                            dst[ox] = src[ox * self.stride + kx - self.pad];
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`Self::im2col`]: scatters patch gradients back onto the input.
    fn col2im<T: Real>(&self, cols: &[T], gx: &mut [T]) {
        let plane_out = self.h_out * self.w_out;
        for ci in 0..self.c_in {
            let gx_c = &mut gx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                let (oy0, oy1) = self.valid_range(ky, self.h, self.h_out);
                for kx in 0..self.k {
                    let (ox0, ox1) = self.valid_range(kx, self.w, self.w_out);
                    let r = (ci * self.k + ky) * self.k + kx;
                    let row = &cols[r * plane_out..(r + 1) * plane_out];
                    for oy in oy0..oy1 {
                        let iy = oy * self.stride + ky - self.pad;
                        let dst = &mut gx_c[iy * self.w..(iy + 1) * self.w];
                        let src = &row[oy * self.w_out..(oy + 1) * self.w_out];
                        for ox in ox0..ox1 {
                            dst[ox * self.stride + kx - self.pad] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&p, &q)| acc + p * q)
}

fn conv_forward<T: Real>(g: &ConvGeometry, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let plane_out = g.h_out * g.w_out;
    let kk = g.patch_len();
    let cols = if g.k == 1 && g.stride == 1 && g.pad == 0 {
        x.to_vec()
    } else {
        g.im2col(x)
    };
    let mut out = vec![T::zero(); g.c_out * plane_out];
    for (co, out_c) in out.chunks_exact_mut(plane_out).enumerate() {
        out_c.iter_mut().for_each(|o| *o = b[co]);
        for (r, &wv) in w[co * kk..(co + 1) * kk].iter().enumerate() {
            if wv != T::zero() {
                axpy(wv, &cols[r * plane_out..(r + 1) * plane_out], out_c);
            }
        }
    }
    out
}

fn conv_backward_weight<T: Real>(g: &ConvGeometry, x: &[T], gout: &[T], gw: &mut [T]) {
    let plane_out = g.h_out * g.w_out;
    let kk = g.patch_len();
    let cols = g.im2col(x);
    for (co, g_c) in gout.chunks_exact(plane_out).enumerate() {
        for r in 0..kk {
            gw[co * kk + r] += dot(g_c, &cols[r * plane_out..(r + 1) * plane_out]);
        }
    }
}

fn conv_backward_input<T: Real>(g: &ConvGeometry, w: &[T], gout: &[T], gx: &mut [T]) {
    let plane_out = g.h_out * g.w_out;
    let kk = g.patch_len();
    let mut cols = vec![T::zero(); kk * plane_out];
    for (co, g_c) in gout.chunks_exact(plane_out).enumerate() {
        for (r, &wv) in w[co * kk..(co + 1) * kk].iter().enumerate() {
            axpy(wv, g_c, &mut cols[r * plane_out..(r + 1) * plane_out]);
        }
    }
    g.col2im(&cols, gx);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_1x1_conv_passes_input_through() {
        let tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let x = tape.constant(t(&[1, 3, 4], &data));
        let w = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape
            .conv2d(x, w, b, Conv2dParams { stride: 1, padding: 0 })
            .unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
        assert_eq!(tape.shape(y), vec![1, 3, 4]);
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(vec![1, 3, 3], 1.0));
        let w = tape.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape
            .conv2d(x, w, b, Conv2dParams { stride: 1, padding: 1 })
            .unwrap();
        let v = tape.value(y);
        assert_eq!(v.data()[4], 9.0);
        assert_eq!(v.data()[0], 4.0);
        assert_eq!(v.data()[1], 6.0);
    }

    #[test]
    fn strided_conv_output_size() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(vec![2, 8, 6], 1.0));
        let w = tape.constant(Tensor::full(vec![3, 2, 3, 3], 1.0));
        let b = tape.constant(Tensor::zeros(vec![3]));
        let y = tape
            .conv2d(x, w, b, Conv2dParams { stride: 2, padding: 1 })
            .unwrap();
        assert_eq!(tape.shape(y), vec![3, 4, 3]);
        // top-left output sees a 2x2 window of the padded input per channel
        assert_eq!(tape.value(y).data()[0], 8.0);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![2, 4, 4]));
        let w = tape.constant(Tensor::zeros(vec![1, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(vec![1]));
        let err = tape
            .conv2d(x, w, b, Conv2dParams { stride: 1, padding: 1 })
            .unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }), "{err}");
        assert!(err.to_string().contains("channels"));
    }

    #[test]
    fn relu_zero_boundary() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[4], &[-1.0, 0.0, -3.0, 2.0]).requiring_grad());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0, 2.0]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn logistic_is_stable_when_saturated() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0.0, 30.0, -800.0]));
        let y = tape.logistic(x);
        let v = tape.value(y);
        assert_eq!(v.data()[0], 0.5);
        assert!(v.data()[1] < 1.0 && v.data()[1] > 1.0 - 1e-12);
        assert!(v.data()[2] >= 0.0 && v.data()[2].is_finite());
    }

    #[test]
    fn squared_l2_values_and_grad() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2], &[1.0, 0.0]).requiring_grad());
        let b = tape.leaf(t(&[2], &[0.0, 1.0]).requiring_grad());
        let d = tape.squared_l2(a, b).unwrap();
        assert_eq!(tape.item(d), 2.0);
        tape.backward(d).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[2.0, -2.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[-2.0, 2.0]);

        let same = tape.squared_l2(a, a).unwrap();
        assert_eq!(tape.item(same), 0.0);
        let c = tape.constant(Tensor::zeros(vec![3]));
        assert!(tape.squared_l2(a, c).is_err());
    }

    #[test]
    fn sum_of_leaf_gives_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 3]).requiring_grad());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        let g = tape.leaf_tensor(x);
        assert_eq!(g.grad().unwrap(), &[1.0; 6]);
        assert_eq!(g.data(), &[0.0; 6]);
    }

    #[test]
    fn second_backward_without_forward_is_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(vec![2], 1.5).requiring_grad());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.backward(s), Err(TensorError::BackwardConsumed));
        // a new forward step re-arms the tape
        let s2 = tape.scale(s, 3.0);
        tape.backward(s2).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![3]).requiring_grad());
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::NotScalar { .. }));
    }

    #[test]
    fn backward_visits_in_reverse_recording_order() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[0.3, -0.2]).requiring_grad());
        let a = tape.logistic(x);
        let b = tape.scale(a, 2.0);
        let c = tape.smooth_l1(b);
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        let trace = tape.backward_trace();
        assert_eq!(trace, vec![s.index(), c.index(), b.index(), a.index(), x.index()]);
    }

    #[test]
    fn inputs_are_not_mutated() {
        let tape = Tape::<f64>::new();
        let data = [0.5, -1.5, 2.5, 0.0];
        let x = tape.leaf(t(&[1, 2, 2], &data).requiring_grad());
        let w = tape.leaf(Tensor::full(vec![1, 1, 1, 1], 2.0).requiring_grad());
        let b = tape.leaf(Tensor::zeros(vec![1]).requiring_grad());
        let y = tape
            .conv2d(x, w, b, Conv2dParams { stride: 1, padding: 0 })
            .unwrap();
        let r = tape.relu(y);
        let s = tape.sum(r);
        tape.backward(s).unwrap();
        assert_eq!(tape.value(x).data(), &data);
        assert_eq!(tape.value(w).data(), &[2.0]);
    }

    #[test]
    fn foreign_var_is_rejected() {
        let t1 = Tape::<f64>::new();
        let t2 = Tape::<f64>::new();
        let a = t1.constant(Tensor::zeros(vec![2]));
        let b = t2.constant(Tensor::zeros(vec![2]));
        let _ = t2.constant(Tensor::zeros(vec![2]));
        assert_eq!(t2.add(a, b), Err(TensorError::ForeignVar));
    }

    #[test]
    fn hinge_distance_tracks_kinks() {
        let tape = Tape::<f64>::new();
        assert_eq!(tape.hinge_distance(), None);
        let x = tape.constant(t(&[3], &[0.5, -2.0, 1.25]));
        tape.relu(x);
        assert_eq!(tape.hinge_distance(), Some(0.5));
        tape.smooth_l1(x);
        assert_eq!(tape.hinge_distance(), Some(0.25));
    }

    #[test]
    fn powf_with_zero_exponent_has_zero_grad() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[0.0, 0.4]).requiring_grad());
        let y = tape.powf(x, 0.0);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.item(s), 2.0);
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn ln_clamp_blocks_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1e-30, 0.5]).requiring_grad());
        let y = tape.ln_clamped(x, 1e-12);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        let g = tape.grad(x).unwrap();
        assert_eq!(g.data()[0], 0.0);
        assert!((g.data()[1] - 2.0).abs() < 1e-15);
        assert!(tape.item(s).is_finite());
    }
}
