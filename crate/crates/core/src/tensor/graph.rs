//! The tape, its ops, and the reverse sweep.

use std::cell::RefCell;
use std::rc::Rc;

use super::array::Array;
use super::TensorError;
use crate::numerics::{digamma, lgamma, trigamma};

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Neg(usize),
    Matmul(usize, usize),
    Relu(usize),
    Softplus(usize),
    Exp(usize),
    Log(usize),
    Abs(usize),
    Lgamma(usize),
    Digamma(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    RowwiseMul(usize, usize),
    RowwiseAdd(usize, usize),
    ChannelMul(usize, usize),
    ChannelAdd(usize, usize),
    Conv2d(usize, usize),
    ConcatRows(Vec<usize>),
    SliceRows {
        input: usize,
        start: usize,
    },
    ResizeNearest {
        input: usize,
    },
    PadZero {
        input: usize,
        off_h: usize,
        off_w: usize,
    },
}

struct Node {
    op: Op,
    value: Array,
    requires_grad: bool,
    grad: Option<Array>,
}

#[derive(Default)]
struct GraphInner {
    nodes: Vec<Node>,
}

/// Shared handle to one tape. Clones are cheap and refer to the same tape.
#[derive(Clone, Default)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

/// Handle to one node of a graph.
#[derive(Clone)]
pub struct Tensor {
    graph: Graph,
    idx: usize,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("idx", &self.idx)
            .field("shape", &self.shape())
            .finish()
    }
}

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, value: Array, requires_grad: bool) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            op,
            value,
            requires_grad,
            grad: None,
        });
        Tensor {
            graph: self.clone(),
            idx: inner.nodes.len() - 1,
        }
    }

    /// Leaf that does not participate in differentiation.
    pub fn constant(&self, value: Array) -> Tensor {
        self.push(Op::Leaf, value, false)
    }

    pub fn constant_scalar(&self, value: f64) -> Tensor {
        self.constant(Array::scalar(value))
    }

    /// Leaf whose gradient is accumulated by `backward`.
    pub fn param(&self, value: Array) -> Tensor {
        self.push(Op::Leaf, value, true)
    }

    /// Clear accumulated gradients on every node of the tape.
    pub fn zero_all_grads(&self) {
        for node in self.inner.borrow_mut().nodes.iter_mut() {
            node.grad = None;
        }
    }
}

macro_rules! unary_op {
    ($name:ident, $variant:ident, $fwd:expr) => {
        pub fn $name(&self) -> Result<Tensor, TensorError> {
            let value = self.with_value(|v| v.map($fwd));
            Ok(self
                .graph
                .push(Op::$variant(self.idx), value, self.requires_grad()))
        }
    };
}

impl Tensor {
    fn with_value<R>(&self, f: impl FnOnce(&Array) -> R) -> R {
        f(&self.graph.inner.borrow().nodes[self.idx].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|v| v.shape().to_vec())
    }

    pub fn value(&self) -> Array {
        self.with_value(|v| v.clone())
    }

    /// Value of a rank-0 tensor.
    pub fn item(&self) -> Result<f64, TensorError> {
        self.with_value(|v| v.item())
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.inner.borrow().nodes[self.idx].requires_grad
    }

    /// Accumulated gradient, if any backward pass has reached this leaf.
    pub fn grad(&self) -> Option<Array> {
        self.graph.inner.borrow().nodes[self.idx].grad.clone()
    }

    pub fn zero_grad(&self) {
        self.graph.inner.borrow_mut().nodes[self.idx].grad = None;
    }

    fn same_graph(&self, other: &Tensor, op: &'static str) -> Result<(), TensorError> {
        if Rc::ptr_eq(&self.graph.inner, &other.graph.inner) {
            Ok(())
        } else {
            Err(TensorError::GraphMismatch { op })
        }
    }

    fn binary_elementwise(
        &self,
        other: &Tensor,
        op_name: &'static str,
        make: impl FnOnce(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        self.same_graph(other, op_name)?;
        let inner = self.graph.inner.borrow();
        let a = &inner.nodes[self.idx].value;
        let b = &inner.nodes[other.idx].value;
        let value = if a.shape() == b.shape() {
            a.zip_map(b, op_name, &f)?
        } else if a.is_scalar() {
            let av = a.data()[0];
            b.map(|bv| f(av, bv))
        } else if b.is_scalar() {
            let bv = b.data()[0];
            a.map(|av| f(av, bv))
        } else {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        };
        let rg = inner.nodes[self.idx].requires_grad || inner.nodes[other.idx].requires_grad;
        drop(inner);
        Ok(self.graph.push(make(self.idx, other.idx), value, rg))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.binary_elementwise(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.binary_elementwise(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.binary_elementwise(other, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.binary_elementwise(other, "div", Op::Div, |a, b| a / b)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor, TensorError> {
        let value = self.with_value(|v| v.map(|x| x + c));
        Ok(self
            .graph
            .push(Op::AddScalar(self.idx), value, self.requires_grad()))
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Tensor, TensorError> {
        let value = self.with_value(|v| v.map(|x| x * c));
        Ok(self
            .graph
            .push(Op::MulScalar(self.idx, c), value, self.requires_grad()))
    }

    unary_op!(neg, Neg, |x| -x);
    unary_op!(relu, Relu, |x| x.max(0.0));
    unary_op!(softplus, Softplus, softplus);
    unary_op!(exp, Exp, f64::exp);
    unary_op!(abs, Abs, f64::abs);

    /// Natural log; every element must be strictly positive.
    pub fn log(&self) -> Result<Tensor, TensorError> {
        self.checked_unary("log", Op::Log, f64::ln, |x| x > 0.0)
    }

    /// Log-gamma applied elementwise; elements must be strictly positive.
    pub fn lgamma(&self) -> Result<Tensor, TensorError> {
        self.checked_unary(
            "lgamma",
            Op::Lgamma,
            |x| lgamma(x).expect("domain pre-checked"),
            |x| x > 0.0,
        )
    }

    /// Digamma applied elementwise; elements must be strictly positive.
    pub fn digamma(&self) -> Result<Tensor, TensorError> {
        self.checked_unary(
            "digamma",
            Op::Digamma,
            |x| digamma(x).expect("domain pre-checked"),
            |x| x > 0.0,
        )
    }

    fn checked_unary(
        &self,
        name: &'static str,
        make: impl FnOnce(usize) -> Op,
        f: impl Fn(f64) -> f64,
        ok: impl Fn(f64) -> bool,
    ) -> Result<Tensor, TensorError> {
        let bad = self.with_value(|v| v.data().iter().copied().find(|&x| !ok(x) || x.is_nan()));
        if let Some(value) = bad {
            return Err(TensorError::Domain { op: name, value });
        }
        let value = self.with_value(|v| v.map(&f));
        Ok(self.graph.push(make(self.idx), value, self.requires_grad()))
    }

    /// Elementwise clamp to [lo, hi]; gradient passes inside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor, TensorError> {
        if lo > hi || lo.is_nan() || hi.is_nan() {
            return Err(TensorError::Domain {
                op: "clamp",
                value: lo,
            });
        }
        let value = self.with_value(|v| v.map(|x| x.min(hi).max(lo)));
        Ok(self
            .graph
            .push(Op::Clamp(self.idx, lo, hi), value, self.requires_grad()))
    }

    /// Sum of all elements, rank-0 result.
    pub fn sum(&self) -> Result<Tensor, TensorError> {
        let value = self.with_value(|v| Array::scalar(v.sum()));
        Ok(self
            .graph
            .push(Op::Sum(self.idx), value, self.requires_grad()))
    }

    /// Mean of all elements, rank-0 result.
    pub fn mean(&self) -> Result<Tensor, TensorError> {
        let (total, n) = self.with_value(|v| (v.sum(), v.numel()));
        if n == 0 {
            return Err(TensorError::InvalidShape {
                op: "mean",
                detail: "mean of an empty tensor".into(),
            });
        }
        let value = Array::scalar(total / n as f64);
        Ok(self
            .graph
            .push(Op::Mean(self.idx), value, self.requires_grad()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        let value = self.with_value(|v| v.reshaped(shape))?;
        Ok(self
            .graph
            .push(Op::Reshape(self.idx), value, self.requires_grad()))
    }

    /// Matrix product: [m,k] x [k,n] -> [m,n].
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.same_graph(other, "matmul")?;
        let inner = self.graph.inner.borrow();
        let a = &inner.nodes[self.idx].value;
        let b = &inner.nodes[other.idx].value;
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let value = matmul_values(a, b);
        let rg = inner.nodes[self.idx].requires_grad || inner.nodes[other.idx].requires_grad;
        drop(inner);
        Ok(self.graph.push(Op::Matmul(self.idx, other.idx), value, rg))
    }

    fn row_aligned(
        &self,
        v: &Tensor,
        op_name: &'static str,
        make: impl FnOnce(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        self.same_graph(v, op_name)?;
        let inner = self.graph.inner.borrow();
        let a = &inner.nodes[self.idx].value;
        let b = &inner.nodes[v.idx].value;
        if a.rank() != 2 || b.rank() != 1 || a.shape()[1] != b.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let cols = a.shape()[1];
        let mut out = Vec::with_capacity(a.numel());
        for (i, &x) in a.data().iter().enumerate() {
            out.push(f(x, b.data()[i % cols]));
        }
        let value = Array::from_vec(a.shape(), out)?;
        let rg = inner.nodes[self.idx].requires_grad || inner.nodes[v.idx].requires_grad;
        drop(inner);
        Ok(self.graph.push(make(self.idx, v.idx), value, rg))
    }

    /// [r,c] * [c]: scale every row elementwise by `v`.
    pub fn rowwise_mul(&self, v: &Tensor) -> Result<Tensor, TensorError> {
        self.row_aligned(v, "rowwise_mul", Op::RowwiseMul, |a, b| a * b)
    }

    /// [r,c] + [c]: add `v` to every row.
    pub fn rowwise_add(&self, v: &Tensor) -> Result<Tensor, TensorError> {
        self.row_aligned(v, "rowwise_add", Op::RowwiseAdd, |a, b| a + b)
    }

    fn channel_aligned(
        &self,
        v: &Tensor,
        op_name: &'static str,
        make: impl FnOnce(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        self.same_graph(v, op_name)?;
        let inner = self.graph.inner.borrow();
        let a = &inner.nodes[self.idx].value;
        let b = &inner.nodes[v.idx].value;
        if a.rank() != 4 || b.rank() != 1 || a.shape()[1] != b.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let &[n, c, h, w] = a.shape() else { unreachable!() };
        let plane = h * w;
        let mut out = Vec::with_capacity(a.numel());
        for (i, &x) in a.data().iter().enumerate() {
            let ch = (i / plane) % c;
            out.push(f(x, b.data()[ch]));
        }
        let value = Array::from_vec(&[n, c, h, w], out)?;
        let rg = inner.nodes[self.idx].requires_grad || inner.nodes[v.idx].requires_grad;
        drop(inner);
        Ok(self.graph.push(make(self.idx, v.idx), value, rg))
    }

    /// [n,c,h,w] * [c]: scale each channel.
    pub fn channelwise_mul(&self, v: &Tensor) -> Result<Tensor, TensorError> {
        self.channel_aligned(v, "channelwise_mul", Op::ChannelMul, |a, b| a * b)
    }

    /// [n,c,h,w] + [c]: per-channel bias.
    pub fn channelwise_add(&self, v: &Tensor) -> Result<Tensor, TensorError> {
        self.channel_aligned(v, "channelwise_add", Op::ChannelAdd, |a, b| a + b)
    }

    /// Valid-padding stride-1 correlation: [n,ic,h,w] with kernel
    /// [oc,ic,kh,kw] -> [n,oc,h-kh+1,w-kw+1].
    pub fn conv2d(&self, kernel: &Tensor) -> Result<Tensor, TensorError> {
        self.same_graph(kernel, "conv2d")?;
        let inner = self.graph.inner.borrow();
        let x = &inner.nodes[self.idx].value;
        let k = &inner.nodes[kernel.idx].value;
        let ok = x.rank() == 4
            && k.rank() == 4
            && x.shape()[1] == k.shape()[1]
            && k.shape()[2] <= x.shape()[2]
            && k.shape()[3] <= x.shape()[3];
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: k.shape().to_vec(),
            });
        }
        let value = conv2d_values(x, k);
        let rg = inner.nodes[self.idx].requires_grad || inner.nodes[kernel.idx].requires_grad;
        drop(inner);
        Ok(self.graph.push(Op::Conv2d(self.idx, kernel.idx), value, rg))
    }

    /// Stack tensors along axis 0. All trailing dimensions must agree.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor, TensorError> {
        let Some(first) = parts.first() else {
            return Err(TensorError::InvalidShape {
                op: "concat_rows",
                detail: "no tensors given".into(),
            });
        };
        for p in parts {
            first.same_graph(p, "concat_rows")?;
        }
        let inner = first.graph.inner.borrow();
        let head_shape = inner.nodes[first.idx].value.shape().to_vec();
        if head_shape.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "concat_rows",
                detail: "cannot concatenate rank-0 tensors".into(),
            });
        }
        let mut rows = 0;
        let mut rg = false;
        let mut data = Vec::new();
        for p in parts {
            let node = &inner.nodes[p.idx];
            let s = node.value.shape();
            if s.is_empty() || s[1..] != head_shape[1..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: head_shape,
                    rhs: s.to_vec(),
                });
            }
            rows += s[0];
            rg |= node.requires_grad;
            data.extend_from_slice(node.value.data());
        }
        let mut shape = head_shape;
        shape[0] = rows;
        let value = Array::from_vec(&shape, data)?;
        let idxs = parts.iter().map(|p| p.idx).collect();
        drop(inner);
        Ok(first.graph.push(Op::ConcatRows(idxs), value, rg))
    }

    /// Rows [start, start+len) along axis 0.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor, TensorError> {
        let inner = self.graph.inner.borrow();
        let v = &inner.nodes[self.idx].value;
        if v.rank() == 0 || start + len > v.shape()[0] {
            return Err(TensorError::InvalidShape {
                op: "slice_rows",
                detail: format!(
                    "rows [{start}, {}) out of bounds for shape {:?}",
                    start + len,
                    v.shape()
                ),
            });
        }
        let stride: usize = v.shape()[1..].iter().product();
        let mut shape = v.shape().to_vec();
        shape[0] = len;
        let data = v.data()[start * stride..(start + len) * stride].to_vec();
        let value = Array::from_vec(&shape, data)?;
        let rg = inner.nodes[self.idx].requires_grad;
        drop(inner);
        Ok(self.graph.push(
            Op::SliceRows {
                input: self.idx,
                start,
            },
            value,
            rg,
        ))
    }

    /// Row `i` of a rank-2 tensor as a rank-1 tensor.
    pub fn row(&self, i: usize) -> Result<Tensor, TensorError> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "row",
                detail: format!("expected rank 2, got {shape:?}"),
            });
        }
        self.slice_rows(i, 1)?.reshape(&[shape[1]])
    }

    /// Nearest-neighbour resample of [n,c,h,w] to [n,c,out_h,out_w].
    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> Result<Tensor, TensorError> {
        let inner = self.graph.inner.borrow();
        let v = &inner.nodes[self.idx].value;
        if v.rank() != 4 || out_h == 0 || out_w == 0 {
            return Err(TensorError::InvalidShape {
                op: "resize_nearest",
                detail: format!("shape {:?} to {out_h}x{out_w}", v.shape()),
            });
        }
        let &[n, c, h, w] = v.shape() else { unreachable!() };
        let mut out = Vec::with_capacity(n * c * out_h * out_w);
        for img in 0..n * c {
            let base = img * h * w;
            for oy in 0..out_h {
                let sy = oy * h / out_h;
                for ox in 0..out_w {
                    let sx = ox * w / out_w;
                    out.push(v.data()[base + sy * w + sx]);
                }
            }
        }
        let value = Array::from_vec(&[n, c, out_h, out_w], out)?;
        let rg = inner.nodes[self.idx].requires_grad;
        drop(inner);
        Ok(self
            .graph
            .push(Op::ResizeNearest { input: self.idx }, value, rg))
    }

    /// Embed [n,c,h,w] into a zero canvas [n,c,th,tw] at (off_h, off_w).
    pub fn pad_zero(
        &self,
        target_h: usize,
        target_w: usize,
        off_h: usize,
        off_w: usize,
    ) -> Result<Tensor, TensorError> {
        let inner = self.graph.inner.borrow();
        let v = &inner.nodes[self.idx].value;
        if v.rank() != 4 {
            return Err(TensorError::InvalidShape {
                op: "pad_zero",
                detail: format!("expected rank 4, got {:?}", v.shape()),
            });
        }
        let &[n, c, h, w] = v.shape() else { unreachable!() };
        if off_h + h > target_h || off_w + w > target_w {
            return Err(TensorError::InvalidShape {
                op: "pad_zero",
                detail: format!(
                    "{h}x{w} at offset ({off_h},{off_w}) exceeds {target_h}x{target_w}"
                ),
            });
        }
        let mut out = Array::zeros(&[n, c, target_h, target_w]);
        for img in 0..n * c {
            let src = img * h * w;
            let dst = img * target_h * target_w;
            for y in 0..h {
                for x in 0..w {
                    out.data_mut()[dst + (off_h + y) * target_w + off_w + x] =
                        v.data()[src + y * w + x];
                }
            }
        }
        let rg = inner.nodes[self.idx].requires_grad;
        drop(inner);
        Ok(self.graph.push(
            Op::PadZero {
                input: self.idx,
                off_h,
                off_w,
            },
            out,
            rg,
        ))
    }

    /// Reverse sweep from a rank-0 root. Gradients land on `param` leaves
    /// and add to whatever previous sweeps left there.
    pub fn backward(&self) -> Result<(), TensorError> {
        let mut inner = self.graph.inner.borrow_mut();
        let root_shape = inner.nodes[self.idx].value.shape().to_vec();
        if !root_shape.is_empty() {
            return Err(TensorError::NonScalarRoot { shape: root_shape });
        }
        let mut flowing: Vec<Option<Array>> = Vec::new();
        flowing.resize_with(self.idx + 1, || None);
        flowing[self.idx] = Some(Array::scalar(1.0));
        for idx in (0..=self.idx).rev() {
            let Some(g) = flowing[idx].take() else {
                continue;
            };
            if !inner.nodes[idx].requires_grad {
                continue;
            }
            if matches!(inner.nodes[idx].op, Op::Leaf) {
                let node = &mut inner.nodes[idx];
                match &mut node.grad {
                    Some(acc) => acc.add_scaled(&g, 1.0)?,
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            let deltas = op_backward(&inner.nodes, idx, &g)?;
            for (input, delta) in deltas {
                match &mut flowing[input] {
                    Some(acc) => acc.add_scaled(&delta, 1.0)?,
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        Ok(())
    }
}

fn matmul_values(a: &Array, b: &Array) -> Array {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let av = a.data()[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data()[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Array::from_vec(&[m, n], out).expect("sized above")
}

fn conv2d_values(x: &Array, k: &Array) -> Array {
    let &[n, ic, h, w] = x.shape() else {
        unreachable!()
    };
    let &[oc, _, kh, kw] = k.shape() else {
        unreachable!()
    };
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut out = vec![0.0; n * oc * oh * ow];
    for b in 0..n {
        for o in 0..oc {
            let obase = (b * oc + o) * oh * ow;
            for i in 0..ic {
                let xbase = (b * ic + i) * h * w;
                let kbase = (o * ic + i) * kh * kw;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ky in 0..kh {
                            let xrow = xbase + (oy + ky) * w + ox;
                            let krow = kbase + ky * kw;
                            for kx in 0..kw {
                                acc += x.data()[xrow + kx] * k.data()[krow + kx];
                            }
                        }
                        out[obase + oy * ow + ox] += acc;
                    }
                }
            }
        }
    }
    Array::from_vec(&[n, oc, oh, ow], out).expect("sized above")
}

/// Local gradients of the op at `idx` given incoming gradient `g`.
fn op_backward(nodes: &[Node], idx: usize, g: &Array) -> Result<Vec<(usize, Array)>, TensorError> {
    let val = |i: usize| &nodes[i].value;
    let wants = |i: usize| nodes[i].requires_grad;
    let out_val = &nodes[idx].value;
    let mut deltas: Vec<(usize, Array)> = Vec::new();

    // Gradient flowing to a possibly rank-0 operand of an elementwise op.
    let reduce_to = |shape_owner: &Array, full: Array| -> Array {
        if shape_owner.is_scalar() && !full.is_scalar() {
            Array::scalar(full.sum())
        } else {
            full
        }
    };

    match &nodes[idx].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if wants(*a) {
                deltas.push((*a, reduce_to(val(*a), g.clone())));
            }
            if wants(*b) {
                deltas.push((*b, reduce_to(val(*b), g.clone())));
            }
        }
        Op::Sub(a, b) => {
            if wants(*a) {
                deltas.push((*a, reduce_to(val(*a), g.clone())));
            }
            if wants(*b) {
                deltas.push((*b, reduce_to(val(*b), g.map(|v| -v))));
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if wants(*a) {
                let full = broadcast_zip(g, vb, |gv, bv| gv * bv);
                deltas.push((*a, reduce_to(va, full)));
            }
            if wants(*b) {
                let full = broadcast_zip(g, va, |gv, av| gv * av);
                deltas.push((*b, reduce_to(vb, full)));
            }
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if wants(*a) {
                let full = broadcast_zip(g, vb, |gv, bv| gv / bv);
                deltas.push((*a, reduce_to(va, full)));
            }
            if wants(*b) {
                let ratio = broadcast_zip(out_val, vb, |ov, bv| ov / bv);
                let full = broadcast_zip(g, &ratio, |gv, rv| -gv * rv);
                deltas.push((*b, reduce_to(vb, full)));
            }
        }
        Op::AddScalar(a) => {
            if wants(*a) {
                deltas.push((*a, g.clone()));
            }
        }
        Op::MulScalar(a, c) => {
            if wants(*a) {
                let c = *c;
                deltas.push((*a, g.map(|v| c * v)));
            }
        }
        Op::Neg(a) => {
            if wants(*a) {
                deltas.push((*a, g.map(|v| -v)));
            }
        }
        Op::Matmul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k) = (va.shape()[0], va.shape()[1]);
            let n = vb.shape()[1];
            if wants(*a) {
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gv = g.data()[i * n + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for kk in 0..k {
                            da[i * k + kk] += gv * vb.data()[kk * n + j];
                        }
                    }
                }
                deltas.push((*a, Array::from_vec(&[m, k], da)?));
            }
            if wants(*b) {
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for kk in 0..k {
                        let av = va.data()[i * k + kk];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[kk * n + j] += av * g.data()[i * n + j];
                        }
                    }
                }
                deltas.push((*b, Array::from_vec(&[k, n], db)?));
            }
        }
        Op::Relu(a) => {
            if wants(*a) {
                let mask = val(*a).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                deltas.push((*a, g.zip_map(&mask, "relu-grad", |gv, m| gv * m)?));
            }
        }
        Op::Softplus(a) => {
            if wants(*a) {
                let slope = val(*a).map(sigmoid);
                deltas.push((*a, g.zip_map(&slope, "softplus-grad", |gv, s| gv * s)?));
            }
        }
        Op::Exp(a) => {
            if wants(*a) {
                deltas.push((*a, g.zip_map(out_val, "exp-grad", |gv, ov| gv * ov)?));
            }
        }
        Op::Log(a) => {
            if wants(*a) {
                deltas.push((*a, g.zip_map(val(*a), "log-grad", |gv, xv| gv / xv)?));
            }
        }
        Op::Abs(a) => {
            if wants(*a) {
                let s = val(*a).map(sign0);
                deltas.push((*a, g.zip_map(&s, "abs-grad", |gv, sv| gv * sv)?));
            }
        }
        Op::Lgamma(a) => {
            if wants(*a) {
                let slope = val(*a).map(|v| digamma(v).expect("domain checked at forward"));
                deltas.push((*a, g.zip_map(&slope, "lgamma-grad", |gv, s| gv * s)?));
            }
        }
        Op::Digamma(a) => {
            if wants(*a) {
                let slope = val(*a).map(|v| trigamma(v).expect("domain checked at forward"));
                deltas.push((*a, g.zip_map(&slope, "digamma-grad", |gv, s| gv * s)?));
            }
        }
        Op::Clamp(a, lo, hi) => {
            if wants(*a) {
                let (lo, hi) = (*lo, *hi);
                let mask = val(*a).map(|v| if v >= lo && v <= hi { 1.0 } else { 0.0 });
                deltas.push((*a, g.zip_map(&mask, "clamp-grad", |gv, m| gv * m)?));
            }
        }
        Op::Sum(a) => {
            if wants(*a) {
                let gv = g.item()?;
                deltas.push((*a, Array::filled(val(*a).shape(), gv)));
            }
        }
        Op::Mean(a) => {
            if wants(*a) {
                let va = val(*a);
                let gv = g.item()? / va.numel() as f64;
                deltas.push((*a, Array::filled(va.shape(), gv)));
            }
        }
        Op::Reshape(a) => {
            if wants(*a) {
                deltas.push((*a, g.reshaped(val(*a).shape())?));
            }
        }
        Op::RowwiseMul(a, v) => {
            let (va, vv) = (val(*a), val(*v));
            let cols = vv.numel();
            if wants(*a) {
                let mut da = g.clone();
                for (i, x) in da.data_mut().iter_mut().enumerate() {
                    *x *= vv.data()[i % cols];
                }
                deltas.push((*a, da));
            }
            if wants(*v) {
                let mut dv = vec![0.0; cols];
                for (i, &gv) in g.data().iter().enumerate() {
                    dv[i % cols] += gv * va.data()[i];
                }
                deltas.push((*v, Array::from_vec(&[cols], dv)?));
            }
        }
        Op::RowwiseAdd(a, v) => {
            if wants(*a) {
                deltas.push((*a, g.clone()));
            }
            if wants(*v) {
                let cols = val(*v).numel();
                let mut dv = vec![0.0; cols];
                for (i, &gv) in g.data().iter().enumerate() {
                    dv[i % cols] += gv;
                }
                deltas.push((*v, Array::from_vec(&[cols], dv)?));
            }
        }
        Op::ChannelMul(a, v) => {
            let (va, vv) = (val(*a), val(*v));
            let c = vv.numel();
            let plane: usize = va.shape()[2] * va.shape()[3];
            if wants(*a) {
                let mut da = g.clone();
                for (i, x) in da.data_mut().iter_mut().enumerate() {
                    *x *= vv.data()[(i / plane) % c];
                }
                deltas.push((*a, da));
            }
            if wants(*v) {
                let mut dv = vec![0.0; c];
                for (i, &gv) in g.data().iter().enumerate() {
                    dv[(i / plane) % c] += gv * va.data()[i];
                }
                deltas.push((*v, Array::from_vec(&[c], dv)?));
            }
        }
        Op::ChannelAdd(a, v) => {
            if wants(*a) {
                deltas.push((*a, g.clone()));
            }
            if wants(*v) {
                let va = val(*a);
                let c = va.shape()[1];
                let plane = va.shape()[2] * va.shape()[3];
                let mut dv = vec![0.0; c];
                for (i, &gv) in g.data().iter().enumerate() {
                    dv[(i / plane) % c] += gv;
                }
                deltas.push((*v, Array::from_vec(&[c], dv)?));
            }
        }
        Op::Conv2d(xi, ki) => {
            let (x, k) = (val(*xi), val(*ki));
            let &[n, ic, h, w] = x.shape() else {
                unreachable!()
            };
            let &[oc, _, kh, kw] = k.shape() else {
                unreachable!()
            };
            let (oh, ow) = (h - kh + 1, w - kw + 1);
            if wants(*xi) {
                let mut dx = vec![0.0; x.numel()];
                for b in 0..n {
                    for o in 0..oc {
                        let gbase = (b * oc + o) * oh * ow;
                        for i in 0..ic {
                            let xbase = (b * ic + i) * h * w;
                            let kbase = (o * ic + i) * kh * kw;
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let gv = g.data()[gbase + oy * ow + ox];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    for ky in 0..kh {
                                        let xrow = xbase + (oy + ky) * w + ox;
                                        let krow = kbase + ky * kw;
                                        for kx in 0..kw {
                                            dx[xrow + kx] += gv * k.data()[krow + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                deltas.push((*xi, Array::from_vec(&[n, ic, h, w], dx)?));
            }
            if wants(*ki) {
                let mut dk = vec![0.0; k.numel()];
                for b in 0..n {
                    for o in 0..oc {
                        let gbase = (b * oc + o) * oh * ow;
                        for i in 0..ic {
                            let xbase = (b * ic + i) * h * w;
                            let kbase = (o * ic + i) * kh * kw;
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let gv = g.data()[gbase + oy * ow + ox];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    for ky in 0..kh {
                                        let xrow = xbase + (oy + ky) * w + ox;
                                        let krow = kbase + ky * kw;
                                        for kx in 0..kw {
                                            dk[krow + kx] += gv * x.data()[xrow + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                deltas.push((*ki, Array::from_vec(&[oc, ic, kh, kw], dk)?));
            }
        }
        Op::ConcatRows(parts) => {
            let mut start = 0;
            for &p in parts {
                let vp = val(p);
                let rows = vp.shape()[0];
                let stride: usize = vp.shape()[1..].iter().product();
                if wants(p) {
                    let data = g.data()[start * stride..(start + rows) * stride].to_vec();
                    deltas.push((p, Array::from_vec(vp.shape(), data)?));
                }
                start += rows;
            }
        }
        Op::SliceRows { input, start } => {
            if wants(*input) {
                let vin = val(*input);
                let stride: usize = vin.shape()[1..].iter().product();
                let mut d = Array::zeros(vin.shape());
                let offset = start * stride;
                for (i, &gv) in g.data().iter().enumerate() {
                    d.data_mut()[offset + i] = gv;
                }
                deltas.push((*input, d));
            }
        }
        Op::ResizeNearest { input } => {
            if wants(*input) {
                let vin = val(*input);
                let &[n, c, h, w] = vin.shape() else {
                    unreachable!()
                };
                let (oh, ow) = (out_val.shape()[2], out_val.shape()[3]);
                let mut d = Array::zeros(vin.shape());
                for img in 0..n * c {
                    let sbase = img * h * w;
                    let gbase = img * oh * ow;
                    for oy in 0..oh {
                        let sy = oy * h / oh;
                        for ox in 0..ow {
                            let sx = ox * w / ow;
                            d.data_mut()[sbase + sy * w + sx] += g.data()[gbase + oy * ow + ox];
                        }
                    }
                }
                deltas.push((*input, d));
            }
        }
        Op::PadZero {
            input,
            off_h,
            off_w,
        } => {
            if wants(*input) {
                let vin = val(*input);
                let &[n, c, h, w] = vin.shape() else {
                    unreachable!()
                };
                let (th, tw) = (out_val.shape()[2], out_val.shape()[3]);
                let mut d = Array::zeros(vin.shape());
                for img in 0..n * c {
                    let sbase = img * h * w;
                    let gbase = img * th * tw;
                    for y in 0..h {
                        for x in 0..w {
                            d.data_mut()[sbase + y * w + x] =
                                g.data()[gbase + (off_h + y) * tw + off_w + x];
                        }
                    }
                }
                deltas.push((*input, d));
            }
        }
    }
    Ok(deltas)
}

/// Elementwise combine where either side may be rank-0.
fn broadcast_zip(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    if a.shape() == b.shape() {
        a.zip_map(b, "broadcast_zip", &f).expect("shapes equal")
    } else if a.is_scalar() {
        let av = a.data()[0];
        b.map(|bv| f(av, bv))
    } else {
        let bv = b.data()[0];
        a.map(|av| f(av, bv))
    }
}
