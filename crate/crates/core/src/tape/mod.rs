//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every primitive eagerly: values are computed when the
//! node is pushed, and [`Tape::backward`] replays the recording in reverse.
//! Node ids are indices into the tape, so the recording is a topological
//! order by construction and the graph cannot contain cycles.
//!
//! Elementwise binary primitives accept operands of equal shape, or one
//! operand with a single element which is broadcast against the other.

mod tensor;

pub use tensor::{Shape, Tensor};

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("shape mismatch in `{op}`: {lhs} vs {rhs}")]
    ShapeMismatch { op: &'static str, lhs: Shape, rhs: Shape },
    #[error("invalid argument to `{op}`: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("tape is closed")]
    Closed,
    #[error("non-finite value first produced while differentiating `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("cotangent shape {got} does not match root shape {expected}")]
    CotangentShape { expected: Shape, got: Shape },
}

pub type Result<T> = std::result::Result<T, TapeError>;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    MatMul {
        a: NodeId,
        b: NodeId,
        trans_a: bool,
    },
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Powf(NodeId, f64),
    Sum(NodeId),
    Concat(Vec<NodeId>),
    Slice {
        src: NodeId,
        start: usize,
    },
    Reshape(NodeId),
    Clamp {
        src: NodeId,
        lo: f64,
        hi: f64,
    },
    Maximum(NodeId, NodeId),
    /// Identity in the forward pass; the backward pass maps the cotangent
    /// `c` to `adjoint * c`.
    LinearAdjoint {
        src: NodeId,
        adjoint: DMatrix<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::MatMul { .. } => "matmul",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Powf(..) => "powf",
            Op::Sum(..) => "sum",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::Clamp { .. } => "clamp",
            Op::Maximum(..) => "maximum",
            Op::LinearAdjoint { .. } => "linear_adjoint",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    marked: bool,
}

/// Counters for one recording session.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TapeStats {
    pub node_count: usize,
    pub peak_node_count: usize,
    /// Work units: marked operator applications traversed by reverse sweeps.
    pub vjp_count: usize,
}

/// Cotangents produced by one reverse sweep, indexed by node.
#[derive(Debug)]
pub struct Cotangents {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Shape>,
}

impl Cotangents {
    /// Cotangent at `node`, or `None` if no path from the root reaches it.
    pub fn get(&self, node: NodeId) -> Option<&Tensor> {
        self.grads.get(node.0).and_then(|g| g.as_ref())
    }

    /// Cotangent at `node`, zeros when the node is not reached.
    pub fn get_or_zeros(&self, node: NodeId) -> Tensor {
        match self.get(node) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[node.0]),
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    stats: TapeStats,
    closed: bool,
}

fn single(shape: Shape) -> bool {
    shape.numel() == 1
}

fn broadcast(op: &'static str, a: Shape, b: Shape) -> Result<Shape> {
    if a == b || single(b) {
        Ok(a)
    } else if single(a) {
        Ok(b)
    } else {
        Err(TapeError::ShapeMismatch { op, lhs: a, rhs: b })
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, shape: Shape, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (ad, bd) = (a.data(), b.data());
    let data = if ad.len() == bd.len() {
        ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else if bd.len() == 1 {
        let y = bd[0];
        ad.iter().map(|&x| f(x, y)).collect()
    } else {
        let x = ad[0];
        bd.iter().map(|&y| f(x, y)).collect()
    };
    Tensor::new(shape, data)
}

/// Reduces a broadcast contribution back onto an operand's shape.
fn unbroadcast(contrib: Tensor, target: Shape) -> Tensor {
    if contrib.shape() == target {
        contrib
    } else if contrib.numel() == target.numel() {
        contrib.with_shape(target)
    } else {
        let s: f64 = contrib.data().iter().sum();
        Tensor::new(target, vec![s])
    }
}

fn matmul_shape(a: Shape, b: Shape, trans_a: bool) -> Result<Shape> {
    let (r, c) = match a {
        Shape::Matrix(r, c) if trans_a => (c, r),
        Shape::Matrix(r, c) => (r, c),
        _ => return Err(TapeError::ShapeMismatch { op: "matmul", lhs: a, rhs: b }),
    };
    match b {
        Shape::Vector(k) if k == c => Ok(Shape::Vector(r)),
        Shape::Matrix(k, s) if k == c => Ok(Shape::Matrix(r, s)),
        _ => Err(TapeError::ShapeMismatch { op: "matmul", lhs: a, rhs: b }),
    }
}

/// `op(a) * b` with `a` stored row-major as `rows x cols`, `b` as `k x s`.
fn matmul_raw(a: &[f64], rows: usize, cols: usize, trans_a: bool, b: &[f64], s: usize) -> Vec<f64> {
    let (r, inner) = if trans_a { (cols, rows) } else { (rows, cols) };
    let mut out = vec![0.0; r * s];
    if trans_a {
        // out[i, j] = sum_k a[k, i] b[k, j]
        for k in 0..inner {
            let arow = &a[k * cols..(k + 1) * cols];
            let brow = &b[k * s..(k + 1) * s];
            for (i, &aki) in arow.iter().enumerate() {
                if aki == 0.0 {
                    continue;
                }
                let orow = &mut out[i * s..(i + 1) * s];
                for (o, &bkj) in orow.iter_mut().zip(brow) {
                    *o += aki * bkj;
                }
            }
        }
    } else {
        for i in 0..r {
            let arow = &a[i * cols..(i + 1) * cols];
            let orow = &mut out[i * s..(i + 1) * s];
            for (k, &aik) in arow.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let brow = &b[k * s..(k + 1) * s];
                for (o, &bkj) in orow.iter_mut().zip(brow) {
                    *o += aik * bkj;
                }
            }
        }
    }
    out
}

fn cols_of(shape: Shape) -> usize {
    match shape {
        Shape::Matrix(_, c) => c,
        _ => 1,
    }
}

fn dims(shape: Shape) -> (usize, usize) {
    match shape {
        Shape::Matrix(r, c) => (r, c),
        Shape::Vector(n) => (n, 1),
        Shape::Scalar => (1, 1),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stats(&self) -> TapeStats {
        self.stats
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Ends the recording session; further reverse sweeps fail.
    pub fn close(&mut self) {
        self.closed = true;
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Current length, for a later [`Tape::truncate`].
    pub fn checkpoint(&self) -> usize {
        self.nodes.len()
    }

    /// Drops every node recorded after `checkpoint`. Ids of dropped nodes
    /// must not be used again.
    pub fn truncate(&mut self, checkpoint: usize) {
        self.nodes.truncate(checkpoint);
        self.stats.node_count = self.nodes.len();
    }

    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.nodes[node.0].value
    }

    pub fn shape(&self, node: NodeId) -> Shape {
        self.nodes[node.0].value.shape()
    }

    /// Flags `node` as the output of one operator application; reverse
    /// sweeps that reach it count one work unit.
    pub fn mark_operator_application(&mut self, node: NodeId) {
        self.nodes[node.0].marked = true;
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op, marked: false });
        self.stats.node_count = self.nodes.len();
        self.stats.peak_node_count = self.stats.peak_node_count.max(self.nodes.len());
        id
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    pub fn vector(&mut self, v: Vec<f64>) -> NodeId {
        self.constant(Tensor::vector(v))
    }

    /// Same value, no parents: gradient does not flow through the result.
    pub fn detach(&mut self, node: NodeId) -> NodeId {
        let value = self.nodes[node.0].value.clone();
        self.push(value, Op::Constant)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast(name, va.shape(), vb.shape())?;
        let value = zip_broadcast(va, vb, shape, f);
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise maximum. Ties pass the gradient to `a`.
    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("maximum", a, b, f64::max, Op::Maximum(a, b))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let value = self.nodes[a.0].value.map(f);
        self.push(value, op)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        self.unary(a, |x| k * x, Op::Scale(a, k))
    }

    /// `a + k` elementwise.
    pub fn offset(&mut self, a: NodeId, k: f64) -> NodeId {
        self.unary(a, |x| x + k, Op::Offset(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    pub fn powf(&mut self, a: NodeId, k: f64) -> NodeId {
        self.unary(a, |x| x.powf(k), Op::Powf(a, k))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.mul(a, a).expect("equal shapes")
    }

    /// Clamps into `[lo, hi]`; the subgradient is 1 inside the closed
    /// interval and 0 strictly outside it.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if lo > hi || lo.is_nan() || hi.is_nan() {
            return Err(TapeError::InvalidArgument { op: "clamp", reason: format!("empty interval [{lo}, {hi}]") });
        }
        Ok(self.unary(a, |x| x.clamp(lo, hi), Op::Clamp { src: a, lo, hi }))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// `<a, b>` as a scalar node.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.numel() != sb.numel() {
            return Err(TapeError::ShapeMismatch { op: "dot", lhs: sa, rhs: sb });
        }
        let m = self.mul(a, b)?;
        Ok(self.sum(m))
    }

    /// Matrix product `a * b`, where `b` is a vector or matrix.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false)
    }

    /// Matrix product `a^T * b`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, trans_a: bool) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = matmul_shape(va.shape(), vb.shape(), trans_a)?;
        let (rows, cols) = dims(va.shape());
        let data = matmul_raw(va.data(), rows, cols, trans_a, vb.data(), cols_of(vb.shape()));
        Ok(self.push(Tensor::new(shape, data), Op::MatMul { a, b, trans_a }))
    }

    /// Concatenates scalars and vectors into one vector.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut data = Vec::new();
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if let Shape::Matrix(..) = v.shape() {
                return Err(TapeError::ShapeMismatch { op: "concat", lhs: v.shape(), rhs: Shape::Vector(v.numel()) });
            }
            data.extend_from_slice(v.data());
        }
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec())))
    }

    /// Contiguous sub-vector `a[start..start+len]` of the flattened value.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = &self.nodes[a.0].value;
        if start + len > v.numel() {
            return Err(TapeError::ShapeMismatch { op: "slice", lhs: v.shape(), rhs: Shape::Vector(start + len) });
        }
        let data = v.data()[start..start + len].to_vec();
        Ok(self.push(Tensor::vector(data), Op::Slice { src: a, start }))
    }

    /// Single element of a vector, as a scalar node.
    pub fn index(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        let s = self.slice(a, i, 1)?;
        self.reshape(s, Shape::Scalar)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Shape) -> Result<NodeId> {
        let v = &self.nodes[a.0].value;
        if v.numel() != shape.numel() {
            return Err(TapeError::ShapeMismatch { op: "reshape", lhs: v.shape(), rhs: shape });
        }
        let value = v.clone().with_shape(shape);
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Forward identity whose reverse pass multiplies the incoming
    /// cotangent by `adjoint` (square, sized to `a`).
    pub fn linear_adjoint(&mut self, a: NodeId, adjoint: DMatrix<f64>) -> Result<NodeId> {
        let v = &self.nodes[a.0].value;
        if adjoint.nrows() != v.numel() || adjoint.ncols() != v.numel() {
            return Err(TapeError::ShapeMismatch {
                op: "linear_adjoint",
                lhs: v.shape(),
                rhs: Shape::Matrix(adjoint.nrows(), adjoint.ncols()),
            });
        }
        let value = v.clone();
        Ok(self.push(value, Op::LinearAdjoint { src: a, adjoint }))
    }

    /// One reverse sweep from `root` seeded with `cotangent`.
    pub fn backward(&mut self, root: NodeId, cotangent: Tensor) -> Result<Cotangents> {
        if self.closed {
            return Err(TapeError::Closed);
        }
        let root_shape = self.nodes[root.0].value.shape();
        if cotangent.numel() != root_shape.numel() {
            return Err(TapeError::CotangentShape { expected: root_shape, got: cotangent.shape() });
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[root.0] = Some(cotangent.with_shape(root_shape));
        let mut traversed = 0;

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.marked {
                traversed += 1;
            }
            let name = node.op.name();
            let emit = |grads: &mut Vec<Option<Tensor>>, target: NodeId, contrib: Tensor| -> Result<()> {
                if !contrib.is_finite() {
                    return Err(TapeError::NonFinite { op: name, node: i });
                }
                match &mut grads[target.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
                Ok(())
            };
            let val = |id: NodeId| &self.nodes[id.0].value;
            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    emit(&mut grads, *a, unbroadcast(g.clone(), val(*a).shape()))?;
                    emit(&mut grads, *b, unbroadcast(g.clone(), val(*b).shape()))?;
                }
                Op::Sub(a, b) => {
                    emit(&mut grads, *a, unbroadcast(g.clone(), val(*a).shape()))?;
                    emit(&mut grads, *b, unbroadcast(g.map(|x| -x), val(*b).shape()))?;
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let ga = zip_broadcast(&g, vb, g.shape(), |x, y| x * y);
                    let gb = zip_broadcast(&g, va, g.shape(), |x, y| x * y);
                    emit(&mut grads, *a, unbroadcast(ga, va.shape()))?;
                    emit(&mut grads, *b, unbroadcast(gb, vb.shape()))?;
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let ga = zip_broadcast(&g, vb, g.shape(), |x, y| x / y);
                    // d(a/b)/db = -out / b
                    let out = &node.value;
                    let q = zip_broadcast(out, vb, out.shape(), |o, y| -o / y);
                    let gb = zip_broadcast(&g, &q, g.shape(), |x, y| x * y);
                    emit(&mut grads, *a, unbroadcast(ga, va.shape()))?;
                    emit(&mut grads, *b, unbroadcast(gb, vb.shape()))?;
                }
                Op::Maximum(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let sel_a = zip_broadcast(va, vb, g.shape(), |x, y| if x >= y { 1.0 } else { 0.0 });
                    let ga = zip_broadcast(&g, &sel_a, g.shape(), |x, s| x * s);
                    let gb = zip_broadcast(&g, &sel_a, g.shape(), |x, s| x * (1.0 - s));
                    emit(&mut grads, *a, unbroadcast(ga, va.shape()))?;
                    emit(&mut grads, *b, unbroadcast(gb, vb.shape()))?;
                }
                Op::Neg(a) => emit(&mut grads, *a, g.map(|x| -x))?,
                Op::Scale(a, k) => {
                    let k = *k;
                    emit(&mut grads, *a, g.map(|x| k * x))?
                }
                Op::Offset(a) | Op::Reshape(a) => {
                    let shape = val(*a).shape();
                    emit(&mut grads, *a, g.clone().with_shape(shape))?
                }
                Op::Tanh(a) => {
                    let out = &node.value;
                    let c = zip_broadcast(&g, out, g.shape(), |x, y| x * (1.0 - y * y));
                    emit(&mut grads, *a, c)?
                }
                Op::Exp(a) => {
                    let c = zip_broadcast(&g, &node.value, g.shape(), |x, y| x * y);
                    emit(&mut grads, *a, c)?
                }
                Op::Log(a) => {
                    let c = zip_broadcast(&g, val(*a), g.shape(), |x, y| x / y);
                    emit(&mut grads, *a, c)?
                }
                Op::Sin(a) => {
                    let c = zip_broadcast(&g, val(*a), g.shape(), |x, y| x * y.cos());
                    emit(&mut grads, *a, c)?
                }
                Op::Cos(a) => {
                    let c = zip_broadcast(&g, val(*a), g.shape(), |x, y| -x * y.sin());
                    emit(&mut grads, *a, c)?
                }
                Op::Powf(a, k) => {
                    let k = *k;
                    let c = zip_broadcast(&g, val(*a), g.shape(), |x, y| x * k * y.powf(k - 1.0));
                    emit(&mut grads, *a, c)?
                }
                Op::Sum(a) => {
                    let shape = val(*a).shape();
                    emit(&mut grads, *a, Tensor::filled(shape, g.item()))?
                }
                Op::Clamp { src, lo, hi } => {
                    let (lo, hi) = (*lo, *hi);
                    let c = zip_broadcast(&g, val(*src), g.shape(), |x, y| if y >= lo && y <= hi { x } else { 0.0 });
                    emit(&mut grads, *src, c)?
                }
                Op::MatMul { a, b, trans_a } => {
                    let (va, vb) = (val(*a), val(*b));
                    let (rows, cols) = dims(va.shape());
                    let s = cols_of(vb.shape());
                    let (ga, gb) = if *trans_a {
                        // out = a^T b, a: rows x cols, b: rows x s, g: cols x s
                        // da = b g^T, db = a g
                        let mut ga = vec![0.0; rows * cols];
                        for k in 0..rows {
                            let brow = &vb.data()[k * s..(k + 1) * s];
                            for i in 0..cols {
                                let grow = &g.data()[i * s..(i + 1) * s];
                                ga[k * cols + i] = brow.iter().zip(grow).map(|(x, y)| x * y).sum();
                            }
                        }
                        let gb = matmul_raw(va.data(), rows, cols, false, g.data(), s);
                        (ga, gb)
                    } else {
                        // out = a b, a: rows x cols, b: cols x s, g: rows x s
                        // da = g b^T, db = a^T g
                        let mut ga = vec![0.0; rows * cols];
                        for i in 0..rows {
                            let grow = &g.data()[i * s..(i + 1) * s];
                            for k in 0..cols {
                                let brow = &vb.data()[k * s..(k + 1) * s];
                                ga[i * cols + k] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            }
                        }
                        let gb = matmul_raw(va.data(), rows, cols, true, g.data(), s);
                        (ga, gb)
                    };
                    let (sa, sb) = (va.shape(), vb.shape());
                    emit(&mut grads, *a, Tensor::new(sa, ga))?;
                    emit(&mut grads, *b, Tensor::new(sb, gb))?;
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let shape = val(p).shape();
                        let len = shape.numel();
                        let c = Tensor::new(shape, g.data()[off..off + len].to_vec());
                        off += len;
                        emit(&mut grads, p, c)?;
                    }
                }
                Op::Slice { src, start } => {
                    let shape = val(*src).shape();
                    let mut c = Tensor::zeros(shape);
                    c.data_mut()[*start..*start + g.numel()].copy_from_slice(g.data());
                    emit(&mut grads, *src, c)?
                }
                Op::LinearAdjoint { src, adjoint } => {
                    let shape = val(*src).shape();
                    let gv = nalgebra::DVector::from_column_slice(g.data());
                    let out = adjoint * gv;
                    emit(&mut grads, *src, Tensor::new(shape, out.as_slice().to_vec()))?
                }
            }
            grads[i] = Some(g);
        }

        self.stats.vjp_count += traversed;
        let shapes = self.nodes[..n].iter().map(|nd| nd.value.shape()).collect();
        Ok(Cotangents { grads, shapes })
    }

    /// Vector-Jacobian product of `root` with respect to `leaves`. Leaves the
    /// root does not depend on receive zero tensors.
    pub fn vjp(&mut self, root: NodeId, leaves: &[NodeId], cotangent: Tensor) -> Result<Vec<Tensor>> {
        let cots = self.backward(root, cotangent)?;
        Ok(leaves
            .iter()
            .map(|&l| if l.0 < cots.grads.len() { cots.get_or_zeros(l) } else { Tensor::zeros(self.shape(l)) })
            .collect())
    }

    /// Gradient of a scalar root.
    pub fn grad(&mut self, root: NodeId, leaves: &[NodeId]) -> Result<Vec<Tensor>> {
        let shape = self.shape(root);
        self.vjp(root, leaves, Tensor::filled(shape, 1.0))
    }
}
