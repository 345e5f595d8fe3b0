//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Operations are recorded in execution order, so a node's inputs always
//! have smaller ids than the node itself and a single reverse sweep over ids
//! visits every node once. Each operation's vector-Jacobian product is
//! itself expressed with tape operations. [`Tape::backward`] evaluates those
//! products eagerly and discards them; [`Tape::grad_graph`] keeps them on the
//! tape so the returned gradients can be differentiated again (this is what
//! gradient matching needs: the loss depends on `∂CE/∂θ` as a function of
//! the synthetic pixels).
//!
//! ```
//! use fairdd::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(&Tensor::vector(vec![3.0]).unwrap().with_requires_grad(true));
//! let zero = tape.constant(Tensor::vector(vec![0.0]).unwrap());
//! let loss = tape.mse(x, zero).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
//! ```

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::TensorError;
use crate::kernels::{self, ConvGeom};
use crate::tensor::{numel, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// The public operation set, usable through [`Tape::apply`] and [`forward_op`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    ScalarMul(f64),
    MatMul,
    /// Inputs `[x: [B,C,H,W], w: [O,C,k,k]]`, stride 1, same padding.
    Conv2d { pool: bool },
    Relu,
    MeanAxis(usize),
    Flatten,
    Concat,
    Mse,
    Mae,
    CosineDistance,
    /// Inputs `[logits: [B,K], targets: [B,K]]`; targets are per-row class
    /// distributions (one-hot for hard labels).
    SoftmaxCrossEntropy,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    ScaleBy(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Swap01 { x: Var, p: usize, q: usize, r: usize },
    Im2col { x: Var, geom: ConvGeom },
    Col2im { x: Var, geom: ConvGeom },
    ExpandMiddle { x: Var, pre: usize, post: usize },
    SumOuter { x: Var, pre: usize, post: usize },
    SumAxis { x: Var, pre: usize, n: usize, post: usize },
    ExpandAxis { x: Var, pre: usize, n: usize, post: usize },
    SumAll(Var),
    ExpandAll(Var),
    Relu(Var),
    AvgPool2(Var),
    Unpool2(Var),
    Slice { x: Var, start: usize },
    Embed { x: Var, start: usize },
    Concat(Vec<Var>),
    Softmax(Var),
    SoftmaxCe { logits: Var, targets: Var },
    Mse(Var, Var),
    Mae(Var, Var),
    Cosine(Var, Var),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// A tape is single-threaded; independent tapes may live on different threads.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    no_grad: Cell<bool>,
    graph_mode: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    /// Writes the gradient of `var` into `target`'s grad buffer, accumulating
    /// onto an existing buffer.
    pub fn store(&self, var: Var, target: &mut Tensor) -> Result<(), TensorError> {
        let g = self
            .grads
            .get(&var)
            .ok_or_else(|| TensorError::MissingGrad(format!("var {}", var.0)))?;
        if g.shape() != target.shape() {
            return Err(TensorError::shapes("store_grad", &[g.shape(), target.shape()]));
        }
        let merged = match target.grad() {
            Some(prev) => prev.iter().zip(g.data()).map(|(a, b)| a + b).collect(),
            None => g.data().to_vec(),
        };
        target.set_grad(merged)
    }
}

fn split3(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            no_grad: Cell::new(false),
            graph_mode: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf; it participates in differentiation iff the tensor has
    /// `requires_grad` set.
    pub fn leaf(&self, t: &Tensor) -> Var {
        let rg = t.requires_grad() && !self.no_grad.get();
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        self.push_raw(value, Op::Leaf, rg)
    }

    /// Records a leaf that always requires grad.
    pub fn param(&self, t: &Tensor) -> Var {
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        self.push_raw(value, Op::Leaf, !self.no_grad.get())
    }

    pub fn constant(&self, t: Tensor) -> Var {
        self.push_raw(t, Op::Const, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn item(&self, v: Var) -> Result<f64, TensorError> {
        self.value(v).item()
    }

    fn push_raw(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn push(
        &self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var, TensorError> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let rg = !self.no_grad.get() && inputs.iter().any(|&v| self.requires_grad(v));
        Ok(self.push_raw(Tensor::from_parts(shape, data), op, rg))
    }

    // ---------------------------------------------------------------------
    // public operation set

    /// Dispatches one of the public operations by kind.
    pub fn apply(&self, kind: OpKind, inputs: &[Var]) -> Result<Var, TensorError> {
        let want = match kind {
            OpKind::Relu | OpKind::ScalarMul(_) | OpKind::MeanAxis(_) | OpKind::Flatten => 1,
            OpKind::Concat => inputs.len().max(1),
            _ => 2,
        };
        if inputs.len() != want {
            return Err(TensorError::domain(
                "apply",
                format!("{kind:?} takes {want} inputs, got {}", inputs.len()),
            ));
        }
        match kind {
            OpKind::Add => self.add(inputs[0], inputs[1]),
            OpKind::Sub => self.sub(inputs[0], inputs[1]),
            OpKind::ScalarMul(c) => self.scalar_mul(inputs[0], c),
            OpKind::MatMul => self.matmul(inputs[0], inputs[1]),
            OpKind::Conv2d { pool } => self.conv2d(inputs[0], inputs[1], pool),
            OpKind::Relu => self.relu(inputs[0]),
            OpKind::MeanAxis(axis) => self.mean_axis(inputs[0], axis),
            OpKind::Flatten => self.flatten(inputs[0]),
            OpKind::Concat => self.concat(inputs),
            OpKind::Mse => self.mse(inputs[0], inputs[1]),
            OpKind::Mae => self.mae(inputs[0], inputs[1]),
            OpKind::CosineDistance => self.cosine_distance(inputs[0], inputs[1]),
            OpKind::SoftmaxCrossEntropy => self.softmax_cross_entropy(inputs[0], inputs[1]),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::shapes(op, &[&sa, &sb]));
        }
        Ok(sa)
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (va, vb) = (self.value(a), self.value(b));
        va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect()
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let shape = self.same_shape("add", a, b)?;
        let data = self.zip_map(a, b, |x, y| x + y);
        self.push("add", shape, data, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let shape = self.same_shape("sub", a, b)?;
        let data = self.zip_map(a, b, |x, y| x - y);
        self.push("sub", shape, data, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let shape = self.same_shape("mul", a, b)?;
        let data = self.zip_map(a, b, |x, y| x * y);
        self.push("mul", shape, data, Op::Mul(a, b), &[a, b])
    }

    pub fn scalar_mul(&self, a: Var, c: f64) -> Result<Var, TensorError> {
        if !c.is_finite() {
            return Err(TensorError::domain("scalar_mul", "scale must be finite"));
        }
        let v = self.value(a);
        let data = v.data().iter().map(|x| x * c).collect();
        self.push("scalar_mul", v.shape().to_vec(), data, Op::Scale(a, c), &[a])
    }

    /// Multiplies every element of `a` by the 0-dimensional tensor `s`.
    pub fn scale_by(&self, a: Var, s: Var) -> Result<Var, TensorError> {
        let sv = self.value(s);
        if sv.ndim() != 0 {
            return Err(TensorError::NotScalar(sv.shape().to_vec()));
        }
        let c = sv.data()[0];
        let v = self.value(a);
        let data = v.data().iter().map(|x| x * c).collect();
        self.push("scale_by", v.shape().to_vec(), data, Op::ScaleBy(a, s), &[a, s])
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::shapes("matmul", &[&sa, &sb]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false);
        self.push("matmul", vec![m, n], data, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&self, a: Var) -> Result<Var, TensorError> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(TensorError::shapes("transpose", &[&s]));
        }
        let data = kernels::transpose(s[0], s[1], self.value(a).data());
        self.push("transpose", vec![s[1], s[0]], data, Op::Transpose(a), &[a])
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape(a);
        if numel(shape) != numel(&s) || shape.contains(&0) {
            return Err(TensorError::shapes("reshape", &[&s, shape]));
        }
        let data = self.value(a).data().to_vec();
        self.push("reshape", shape.to_vec(), data, Op::Reshape(a), &[a])
    }

    /// Flattens all axes after the first: `[B, ...] -> [B, rest]`.
    pub fn flatten(&self, a: Var) -> Result<Var, TensorError> {
        let s = self.shape(a);
        match s.len() {
            0 => Err(TensorError::shapes("flatten", &[&s])),
            1 => self.reshape(a, &s),
            _ => self.reshape(a, &[s[0], numel(&s[1..])]),
        }
    }

    fn swap01(&self, a: Var, p: usize, q: usize, r: usize) -> Result<Var, TensorError> {
        let data = kernels::swap01(p, q, r, self.value(a).data());
        self.push("swap01", vec![q, p, r], data, Op::Swap01 { x: a, p, q, r }, &[a])
    }

    fn im2col(&self, a: Var, geom: ConvGeom) -> Result<Var, TensorError> {
        let data = kernels::im2col(geom, self.value(a).data());
        self.push(
            "im2col",
            vec![geom.col_rows(), geom.col_cols()],
            data,
            Op::Im2col { x: a, geom },
            &[a],
        )
    }

    fn col2im(&self, a: Var, geom: ConvGeom) -> Result<Var, TensorError> {
        let data = kernels::col2im(geom, self.value(a).data());
        self.push(
            "col2im",
            vec![geom.batch, geom.channels, geom.height, geom.width],
            data,
            Op::Col2im { x: a, geom },
            &[a],
        )
    }

    /// 2-D convolution, stride 1, zero padding `k / 2` (odd square kernels),
    /// optionally followed by 2×2 average pooling.
    pub fn conv2d(&self, x: Var, w: Var, pool: bool) -> Result<Var, TensorError> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(TensorError::shapes("conv2d", &[&sx, &sw]));
        }
        let geom = ConvGeom {
            batch: sx[0],
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kernel: sw[2],
        };
        let out_ch = sw[0];
        let cols = self.im2col(x, geom)?;
        let wm = self.reshape(w, &[out_ch, geom.col_rows()])?;
        let y = self.matmul(wm, cols)?;
        let hw = geom.height * geom.width;
        let y = self.swap01(y, out_ch, geom.batch, hw)?;
        let y = self.reshape(y, &[geom.batch, out_ch, geom.height, geom.width])?;
        if pool {
            self.avg_pool2(y)
        } else {
            Ok(y)
        }
    }

    /// 2×2 average pooling over the last two axes (extents must be even).
    pub fn avg_pool2(&self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x);
        if s.len() < 2 || s[s.len() - 1] % 2 != 0 || s[s.len() - 2] % 2 != 0 {
            return Err(TensorError::shapes("avg_pool2", &[&s]));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = numel(&s[..s.len() - 2]);
        let data = kernels::avgpool2(planes, h, w, self.value(x).data());
        let mut shape = s.clone();
        let nd = shape.len();
        shape[nd - 2] = h / 2;
        shape[nd - 1] = w / 2;
        self.push("avg_pool2", shape, data, Op::AvgPool2(x), &[x])
    }

    fn unpool2(&self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x);
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = numel(&s[..s.len() - 2]);
        let data = kernels::unpool2(planes, h, w, self.value(x).data());
        let mut shape = s.clone();
        let nd = shape.len();
        shape[nd - 2] = h * 2;
        shape[nd - 1] = w * 2;
        self.push("unpool2", shape, data, Op::Unpool2(x), &[x])
    }

    /// Adds a per-channel bias `b: [C]` to `x: [B, C, ...]`.
    pub fn add_bias(&self, x: Var, b: Var) -> Result<Var, TensorError> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(TensorError::shapes("add_bias", &[&sx, &sb]));
        }
        let expanded = self.expand_middle(b, sx[0], numel(&sx[2..]))?;
        let expanded = self.reshape(expanded, &sx)?;
        self.add(x, expanded)
    }

    fn expand_middle(&self, b: Var, pre: usize, post: usize) -> Result<Var, TensorError> {
        let v = self.value(b);
        let c = v.numel();
        let mut data = Vec::with_capacity(pre * c * post);
        for _ in 0..pre {
            for &val in v.data() {
                data.extend(std::iter::repeat(val).take(post));
            }
        }
        self.push(
            "expand_middle",
            vec![pre, c, post],
            data,
            Op::ExpandMiddle { x: b, pre, post },
            &[b],
        )
    }

    fn sum_outer(&self, x: Var, pre: usize, post: usize) -> Result<Var, TensorError> {
        let v = self.value(x);
        let c = v.numel() / (pre * post);
        let mut data = vec![0.0; c];
        for p in 0..pre {
            for (ci, d) in data.iter_mut().enumerate() {
                let base = (p * c + ci) * post;
                *d += v.data()[base..base + post].iter().sum::<f64>();
            }
        }
        self.push("sum_outer", vec![c], data, Op::SumOuter { x, pre, post }, &[x])
    }

    fn sum_axis3(&self, x: Var, pre: usize, n: usize, post: usize, shape: Vec<usize>) -> Result<Var, TensorError> {
        let v = self.value(x);
        let mut data = vec![0.0; pre * post];
        for p in 0..pre {
            for i in 0..n {
                let src = &v.data()[(p * n + i) * post..][..post];
                for (d, s) in data[p * post..][..post].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        self.push("sum_axis", shape, data, Op::SumAxis { x, pre, n, post }, &[x])
    }

    fn expand_axis3(&self, x: Var, pre: usize, n: usize, post: usize, shape: Vec<usize>) -> Result<Var, TensorError> {
        let v = self.value(x);
        let mut data = Vec::with_capacity(pre * n * post);
        for p in 0..pre {
            let src = &v.data()[p * post..][..post];
            for _ in 0..n {
                data.extend_from_slice(src);
            }
        }
        self.push("expand_axis", shape, data, Op::ExpandAxis { x, pre, n, post }, &[x])
    }

    /// Sums over one axis, removing it.
    pub fn sum_axis(&self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(TensorError::domain(
                "sum_axis",
                format!("axis {axis} out of range for shape {s:?}"),
            ));
        }
        let (pre, n, post) = split3(&s, axis);
        let mut out = s.clone();
        out.remove(axis);
        self.sum_axis3(x, pre, n, post, out)
    }

    pub fn mean_axis(&self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(TensorError::domain(
                "mean_axis",
                format!("axis {axis} out of range for shape {s:?}"),
            ));
        }
        let summed = self.sum_axis(x, axis)?;
        self.scalar_mul(summed, 1.0 / s[axis] as f64)
    }

    pub fn sum_all(&self, x: Var) -> Result<Var, TensorError> {
        let total = self.value(x).data().iter().sum();
        self.push("sum_all", Vec::new(), vec![total], Op::SumAll(x), &[x])
    }

    fn expand_all(&self, s: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let c = self.item(s)?;
        self.push("expand_all", shape.to_vec(), vec![c; numel(shape)], Op::ExpandAll(s), &[s])
    }

    pub fn relu(&self, x: Var) -> Result<Var, TensorError> {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect();
        self.push("relu", v.shape().to_vec(), data, Op::Relu(x), &[x])
    }

    /// Flat slice `[start, start + len)` of `x`, returned as a 1-D tensor.
    pub fn slice(&self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let v = self.value(x);
        if len == 0 || start + len > v.numel() {
            return Err(TensorError::domain(
                "slice",
                format!("range {start}..{} out of bounds for {} values", start + len, v.numel()),
            ));
        }
        let data = v.data()[start..start + len].to_vec();
        self.push("slice", vec![len], data, Op::Slice { x, start }, &[x])
    }

    /// Rows `[start, start + len)` along the leading axis.
    pub fn rows(&self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let s = self.shape(x);
        if s.is_empty() || start + len > s[0] || len == 0 {
            return Err(TensorError::domain(
                "rows",
                format!("rows {start}..{} out of bounds for shape {s:?}", start + len),
            ));
        }
        let row = numel(&s[1..]);
        let flat = self.slice(x, start * row, len * row)?;
        let mut shape = s.clone();
        shape[0] = len;
        self.reshape(flat, &shape)
    }

    fn embed(&self, x: Var, start: usize, total: usize) -> Result<Var, TensorError> {
        let v = self.value(x);
        let mut data = vec![0.0; total];
        data[start..start + v.numel()].copy_from_slice(v.data());
        self.push("embed", vec![total], data, Op::Embed { x, start }, &[x])
    }

    /// Concatenates along the leading axis; trailing extents must agree.
    pub fn concat(&self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::domain("concat", "no inputs"))?;
        let s0 = self.shape(*first);
        if s0.is_empty() {
            return Err(TensorError::shapes("concat", &[&s0]));
        }
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.ndim() == 0 || v.shape()[1..] != s0[1..] {
                return Err(TensorError::shapes("concat", &[&s0, v.shape()]));
            }
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = s0.clone();
        shape[0] = lead;
        self.push("concat", shape, data, Op::Concat(parts.to_vec()), parts)
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x);
        if s.is_empty() {
            return Err(TensorError::shapes("softmax", &[&s]));
        }
        let cols = s[s.len() - 1];
        let rows = numel(&s) / cols;
        let data = kernels::softmax_rows(rows, cols, self.value(x).data());
        self.push("softmax", s, data, Op::Softmax(x), &[x])
    }

    /// Mean over rows of `-Σ_k t_k log softmax(z)_k` for `logits, targets: [B, K]`.
    pub fn softmax_cross_entropy(&self, logits: Var, targets: Var) -> Result<Var, TensorError> {
        let s = self.same_shape("softmax_cross_entropy", logits, targets)?;
        if s.len() != 2 {
            return Err(TensorError::shapes("softmax_cross_entropy", &[&s]));
        }
        let (b, k) = (s[0], s[1]);
        let (z, t) = (self.value(logits), self.value(targets));
        let lse = kernels::logsumexp_rows(b, k, z.data());
        let mut total = 0.0;
        for i in 0..b {
            for j in 0..k {
                let tij = t.data()[i * k + j];
                total += tij * (lse[i] - z.data()[i * k + j]);
            }
        }
        self.push(
            "softmax_cross_entropy",
            Vec::new(),
            vec![total / b as f64],
            Op::SoftmaxCe { logits, targets },
            &[logits, targets],
        )
    }

    /// Mean squared difference.
    pub fn mse(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let s = self.same_shape("mse", a, b)?;
        let n = numel(&s) as f64;
        let total: f64 = self.zip_map(a, b, |x, y| (x - y) * (x - y)).iter().sum();
        self.push("mse", Vec::new(), vec![total / n], Op::Mse(a, b), &[a, b])
    }

    /// Mean absolute difference.
    pub fn mae(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let s = self.same_shape("mae", a, b)?;
        let n = numel(&s) as f64;
        let total: f64 = self.zip_map(a, b, |x, y| (x - y).abs()).iter().sum();
        self.push("mae", Vec::new(), vec![total / n], Op::Mae(a, b), &[a, b])
    }

    /// `1 − u·v / (‖u‖₂‖v‖₂)` over the flattened inputs.
    pub fn cosine_distance(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("cosine_distance", a, b)?;
        let (dot, na, nb) = self.cosine_parts(a, b);
        if na == 0.0 || nb == 0.0 {
            return Err(TensorError::domain("cosine_distance", "input has zero norm"));
        }
        self.push(
            "cosine_distance",
            Vec::new(),
            vec![1.0 - dot / (na * nb)],
            Op::Cosine(a, b),
            &[a, b],
        )
    }

    fn cosine_parts(&self, a: Var, b: Var) -> (f64, f64, f64) {
        let (va, vb) = (self.value(a), self.value(b));
        let dot: f64 = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).sum();
        let na = va.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = vb.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        (dot, na, nb)
    }

    // ---------------------------------------------------------------------
    // reverse sweep

    fn vjp(&self, id: usize, op: &Op, g: Var) -> Result<Vec<(Var, Var)>, TensorError> {
        let out = Var(id);
        let rg = |v: Var| self.requires_grad(v);
        let mut res = Vec::new();
        match *op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                res.push((a, g));
                res.push((b, g));
            }
            Op::Sub(a, b) => {
                res.push((a, g));
                if rg(b) {
                    res.push((b, self.scalar_mul(g, -1.0)?));
                }
            }
            Op::Scale(a, c) => res.push((a, self.scalar_mul(g, c)?)),
            Op::Mul(a, b) => {
                if rg(a) {
                    res.push((a, self.mul(g, b)?));
                }
                if rg(b) {
                    res.push((b, self.mul(g, a)?));
                }
            }
            Op::ScaleBy(a, s) => {
                if rg(a) {
                    res.push((a, self.scale_by(g, s)?));
                }
                if rg(s) {
                    let prod = self.mul(g, a)?;
                    res.push((s, self.sum_all(prod)?));
                }
            }
            Op::MatMul(a, b) => {
                if rg(a) {
                    let bt = self.transpose(b)?;
                    res.push((a, self.matmul(g, bt)?));
                }
                if rg(b) {
                    let at = self.transpose(a)?;
                    res.push((b, self.matmul(at, g)?));
                }
            }
            Op::Transpose(a) => res.push((a, self.transpose(g)?)),
            Op::Reshape(a) => {
                let s = self.shape(a);
                res.push((a, self.reshape(g, &s)?));
            }
            Op::Swap01 { x, p, q, r } => {
                let back = self.swap01(g, q, p, r)?;
                let s = self.shape(x);
                res.push((x, self.reshape(back, &s)?));
            }
            Op::Im2col { x, geom } => res.push((x, self.col2im(g, geom)?)),
            Op::Col2im { x, geom } => res.push((x, self.im2col(g, geom)?)),
            Op::ExpandMiddle { x, pre, post } => res.push((x, self.sum_outer(g, pre, post)?)),
            Op::SumOuter { x, pre, post } => {
                let e = self.expand_middle(g, pre, post)?;
                let s = self.shape(x);
                res.push((x, self.reshape(e, &s)?));
            }
            Op::SumAxis { x, pre, n, post } => {
                let s = self.shape(x);
                res.push((x, self.expand_axis3(g, pre, n, post, s)?));
            }
            Op::ExpandAxis { x, pre, n, post } => {
                let s = self.shape(x);
                res.push((x, self.sum_axis3(g, pre, n, post, s)?));
            }
            Op::SumAll(x) => {
                let s = self.shape(x);
                res.push((x, self.expand_all(g, &s)?));
            }
            Op::ExpandAll(s) => res.push((s, self.sum_all(g)?)),
            Op::Relu(x) => {
                let v = self.value(x);
                let mask = v.data().iter().map(|&a| if a > 0.0 { 1.0 } else { 0.0 }).collect();
                let mask = self.constant(Tensor::from_parts(v.shape().to_vec(), mask));
                res.push((x, self.mul(g, mask)?));
            }
            Op::AvgPool2(x) => res.push((x, self.unpool2(g)?)),
            Op::Unpool2(x) => res.push((x, self.avg_pool2(g)?)),
            Op::Slice { x, start } => {
                let s = self.shape(x);
                let e = self.embed(g, start, numel(&s))?;
                res.push((x, self.reshape(e, &s)?));
            }
            Op::Embed { x, start } => {
                let len = numel(&self.shape(x));
                let sl = self.slice(g, start, len)?;
                let s = self.shape(x);
                res.push((x, self.reshape(sl, &s)?));
            }
            Op::Concat(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let s = self.shape(p);
                    let n = numel(&s);
                    if rg(p) {
                        let sl = self.slice(g, offset, n)?;
                        res.push((p, self.reshape(sl, &s)?));
                    }
                    offset += n;
                }
            }
            Op::Softmax(x) => {
                let s = self.shape(x);
                let cols = s[s.len() - 1];
                let pre = numel(&s) / cols;
                let gs = self.mul(g, out)?;
                let rowsum = self.sum_axis3(gs, pre, cols, 1, vec![pre, 1])?;
                let rowsum = self.expand_axis3(rowsum, pre, cols, 1, s.clone())?;
                let centered = self.sub(g, rowsum)?;
                res.push((x, self.mul(out, centered)?));
            }
            Op::SoftmaxCe { logits, targets } => {
                let s = self.shape(logits);
                let (b, k) = (s[0], s[1]);
                let t = self.value(targets);
                if rg(logits) {
                    let mut mass = vec![0.0; b * k];
                    for i in 0..b {
                        let m: f64 = t.data()[i * k..(i + 1) * k].iter().sum();
                        mass[i * k..(i + 1) * k].iter_mut().for_each(|v| *v = m);
                    }
                    let p = self.softmax(logits)?;
                    let mass = self.constant(Tensor::from_parts(s.clone(), mass));
                    let pm = self.mul(p, mass)?;
                    let d = self.sub(pm, targets)?;
                    let d = self.scalar_mul(d, 1.0 / b as f64)?;
                    res.push((logits, self.scale_by(d, g)?));
                }
                if rg(targets) {
                    let z = self.value(logits);
                    let lse = kernels::logsumexp_rows(b, k, z.data());
                    let coef = (0..b * k)
                        .map(|i| (lse[i / k] - z.data()[i]) / b as f64)
                        .collect();
                    let coef = self.constant(Tensor::from_parts(s.clone(), coef));
                    res.push((targets, self.scale_by(coef, g)?));
                }
            }
            Op::Mse(a, b) => {
                let n = numel(&self.shape(a)) as f64;
                let d = self.sub(a, b)?;
                let d = self.scalar_mul(d, 2.0 / n)?;
                let ga = self.scale_by(d, g)?;
                if rg(a) {
                    res.push((a, ga));
                }
                if rg(b) {
                    res.push((b, self.scalar_mul(ga, -1.0)?));
                }
            }
            Op::Mae(a, b) => {
                let s = self.shape(a);
                let n = numel(&s) as f64;
                let sign = self.zip_map(a, b, |x, y| {
                    if x > y {
                        1.0 / n
                    } else if x < y {
                        -1.0 / n
                    } else {
                        0.0
                    }
                });
                let sign = self.constant(Tensor::from_parts(s, sign));
                let ga = self.scale_by(sign, g)?;
                if rg(a) {
                    res.push((a, ga));
                }
                if rg(b) {
                    res.push((b, self.scalar_mul(ga, -1.0)?));
                }
            }
            Op::Cosine(a, b) => {
                if self.graph_mode.get() {
                    return Err(TensorError::domain(
                        "cosine_distance",
                        "differentiable gradients through cosine_distance are not supported",
                    ));
                }
                let (dot, na, nb) = self.cosine_parts(a, b);
                let (va, vb) = (self.value(a), self.value(b));
                let s = va.shape().to_vec();
                // d/du (1 − u·v/(|u||v|)) = −v/(|u||v|) + (u·v) u/(|u|³|v|)
                let grad_of = |u: &[f64], v: &[f64], nu: f64, nv: f64| -> Vec<f64> {
                    u.iter()
                        .zip(v)
                        .map(|(ui, vi)| -vi / (nu * nv) + dot * ui / (nu * nu * nu * nv))
                        .collect()
                };
                if rg(a) {
                    let c = self.constant(Tensor::from_parts(s.clone(), grad_of(va.data(), vb.data(), na, nb)));
                    res.push((a, self.scale_by(c, g)?));
                }
                if rg(b) {
                    let c = self.constant(Tensor::from_parts(s.clone(), grad_of(vb.data(), va.data(), nb, na)));
                    res.push((b, self.scale_by(c, g)?));
                }
            }
        }
        for (input, _) in &res {
            if input.0 >= id {
                return Err(TensorError::Internal(format!(
                    "node {id} consumes later node {}",
                    input.0
                )));
            }
        }
        Ok(res.into_iter().filter(|(v, _)| rg(*v)).collect())
    }

    fn sweep(&self, loss: Var) -> Result<Vec<Option<Var>>, TensorError> {
        let shape = self.shape(loss);
        if !shape.is_empty() {
            return Err(TensorError::NotScalar(shape));
        }
        let mut grads: Vec<Option<Var>> = vec![None; loss.0 + 1];
        if !self.requires_grad(loss) {
            return Ok(grads);
        }
        grads[loss.0] = Some(self.constant(Tensor::from_parts(Vec::new(), vec![1.0])));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id] else { continue };
            let op = {
                let nodes = self.nodes.borrow();
                if !nodes[id].requires_grad {
                    continue;
                }
                nodes[id].op.clone()
            };
            for (input, contrib) in self.vjp(id, &op, g)? {
                grads[input.0] = Some(match grads[input.0] {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib)?,
                });
            }
        }
        Ok(grads)
    }

    /// Gradients of the scalar `loss` for every `requires_grad` leaf on the
    /// tape. Leaves the loss does not reach receive zeros. Intermediate
    /// gradient nodes are discarded afterwards.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let mark = self.len();
        let prev = self.no_grad.replace(true);
        let swept = self.sweep(loss);
        self.no_grad.set(prev);
        let result = swept.map(|grads| {
            let nodes = self.nodes.borrow();
            let mut out = HashMap::new();
            for (id, node) in nodes.iter().enumerate().take(mark) {
                if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                    continue;
                }
                let t = match grads.get(id).copied().flatten() {
                    Some(g) => {
                        let v = &nodes[g.0].value;
                        Tensor::from_parts(v.shape().to_vec(), v.data().to_vec())
                    }
                    None => Tensor::zeros(node.value.shape()),
                };
                out.insert(Var(id), t);
            }
            Gradients { grads: out }
        });
        self.nodes.borrow_mut().truncate(mark);
        result
    }

    /// Gradients of `loss` with respect to `wrt`, recorded as differentiable
    /// tape nodes.
    pub fn grad_graph(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Var>, TensorError> {
        let prev = self.graph_mode.replace(true);
        let swept = self.sweep(loss);
        self.graph_mode.set(prev);
        let grads = swept?;
        Ok(wrt
            .iter()
            .map(|&v| match grads.get(v.0).copied().flatten() {
                Some(g) => g,
                None => self.constant(Tensor::zeros(&self.shape(v))),
            })
            .collect())
    }
}

/// Evaluates one operation on plain tensors without recording gradients.
pub fn forward_op(kind: OpKind, inputs: &[Tensor]) -> Result<Tensor, TensorError> {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = tape.apply(kind, &vars)?;
    let v = tape.value(out);
    Ok(Tensor::from_parts(v.shape().to_vec(), v.data().to_vec()))
}
