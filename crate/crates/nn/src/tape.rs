//! Reverse-mode differentiation tape.
//!
//! Every operation appends a node holding its value and the indices of its
//! inputs, so node order is a topological order. [`Tape::backward`] replays
//! the tape numerically; [`Tape::grad_graph`] instead records the vector-Jacobian
//! products as new nodes on the same tape, which makes the gradient itself
//! differentiable (used for Hessian-vector products).

use std::cell::{Ref, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, ConvGeom, Tensor};
use crate::{NnError, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    AddRowBias(usize, usize),
    SumRows(usize),
    BroadcastRows(usize),
    SumCols(usize),
    BroadcastCols(usize, usize),
    Sum(usize),
    Expand(usize),
    Reshape(usize, Vec<usize>),
    Relu(usize),
    LeakyRelu(usize, f64),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Conv2d(usize, usize, ConvGeom),
    ConvTranspose2d(usize, usize, ConvGeom),
    AddChannelBias(usize, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::AddRowBias(..) => "add_row_bias",
            Op::SumRows(..) => "sum_rows",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::SumCols(..) => "sum_cols",
            Op::BroadcastCols(..) => "broadcast_cols",
            Op::Sum(..) => "sum",
            Op::Expand(..) => "expand",
            Op::Reshape(..) => "reshape",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Conv2d(..) => "conv2d",
            Op::ConvTranspose2d(..) => "conv_transpose2d",
            Op::AddChannelBias(..) => "add_channel_bias",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Numeric gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }
}

pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var {
            tape: self.id,
            idx: nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable from a different tape");
        v.idx
    }

    fn rg(&self, idx: usize) -> bool {
        self.nodes.borrow()[idx].requires_grad
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        let idx = self.check(v);
        Ref::map(self.nodes.borrow(), |n| &n[idx].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(self.check(v))
    }

    /// A leaf that is differentiated through.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf bound to a stored parameter; numeric gradients flow back into the store.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.leaf(store.value(id).clone());
        self.nodes.borrow_mut()[v.idx].param = Some(id);
        v
    }

    fn unary(&self, a: Var, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var {
        let ia = self.check(a);
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (f(&nodes[ia].value), nodes[ia].requires_grad)
        };
        self.push(value, op, rg)
    }

    fn binary(&self, a: Var, b: Var, op: Op, f: impl FnOnce(&Tensor, &Tensor) -> Tensor) -> Var {
        let (ia, ib) = (self.check(a), self.check(b));
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (
                f(&nodes[ia].value, &nodes[ib].value),
                nodes[ia].requires_grad || nodes[ib].requires_grad,
            )
        };
        self.push(value, op, rg)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a.idx, b.idx), |x, y| x.zip_map(y, |p, q| p + q))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a.idx, b.idx), |x, y| x.zip_map(y, |p, q| p - q))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a.idx, b.idx), |x, y| x.zip_map(y, |p, q| p * q))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a.idx, b.idx), |x, y| x.zip_map(y, |p, q| p / q))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a.idx, c), |x| x.map(|p| p * c))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a.idx), |x| x.map(|p| p + c))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::MatMul(a.idx, b.idx), tensor::matmul)
    }

    pub fn transpose(&self, a: Var) -> Var {
        self.unary(a, Op::Transpose(a.idx), Tensor::transpose2)
    }

    /// `x: [n, m] + bias: [m]` broadcast over rows.
    pub fn add_row_bias(&self, x: Var, bias: Var) -> Var {
        self.binary(x, bias, Op::AddRowBias(x.idx, bias.idx), |x, b| {
            let mut out = x.clone();
            tensor::add_row_bias(&mut out, b.data());
            out
        })
    }

    /// `[n, m] → [m]`.
    pub fn sum_rows(&self, x: Var) -> Var {
        self.unary(x, Op::SumRows(x.idx), |x| {
            let s = tensor::row_sums(x);
            Tensor::new(vec![s.len()], s)
        })
    }

    /// `[m] → [n, m]`.
    pub fn broadcast_rows(&self, v: Var, n: usize) -> Var {
        self.unary(v, Op::BroadcastRows(v.idx), |v| {
            let m = v.len();
            let mut data = Vec::with_capacity(n * m);
            for _ in 0..n {
                data.extend_from_slice(v.data());
            }
            Tensor::new(vec![n, m], data)
        })
    }

    /// `[n, m] → [n]`.
    pub fn sum_cols(&self, x: Var) -> Var {
        self.unary(x, Op::SumCols(x.idx), |x| {
            let (n, m) = x.as_matrix_dims();
            let data = (0..n).map(|r| x.data()[r * m..(r + 1) * m].iter().sum()).collect();
            Tensor::new(vec![n], data)
        })
    }

    /// `[n] → [n, m]`.
    pub fn broadcast_cols(&self, v: Var, m: usize) -> Var {
        self.unary(v, Op::BroadcastCols(v.idx, m), |v| {
            let n = v.len();
            let mut data = Vec::with_capacity(n * m);
            for &x in v.data() {
                data.extend(std::iter::repeat_n(x, m));
            }
            Tensor::new(vec![n, m], data)
        })
    }

    /// Sum of all entries, as a `[1]` scalar.
    pub fn sum(&self, x: Var) -> Var {
        self.unary(x, Op::Sum(x.idx), |x| Tensor::scalar(x.sum()))
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Broadcast a `[1]` scalar to `shape`.
    pub fn expand(&self, s: Var, shape: &[usize]) -> Var {
        let shape = shape.to_vec();
        self.unary(s, Op::Expand(s.idx), |s| Tensor::full(&shape, s.item()))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let orig = self.shape(x);
        self.unary(x, Op::Reshape(x.idx, orig), |x| x.clone().reshape(shape))
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, Op::Relu(x.idx), |x| x.map(|v| v.max(0.0)))
    }

    pub fn leaky_relu(&self, x: Var, slope: f64) -> Var {
        self.unary(x, Op::LeakyRelu(x.idx, slope), |x| {
            x.map(|v| if v > 0.0 { v } else { slope * v })
        })
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x.idx), |x| x.map(f64::tanh))
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, Op::Exp(x.idx), |x| x.map(f64::exp))
    }

    pub fn ln(&self, x: Var) -> Var {
        self.unary(x, Op::Log(x.idx), |x| x.map(f64::ln))
    }

    pub fn square(&self, x: Var) -> Var {
        self.mul(x, x)
    }

    pub fn conv2d(&self, x: Var, w: Var, geom: ConvGeom) -> Var {
        self.binary(x, w, Op::Conv2d(x.idx, w.idx, geom), |x, w| tensor::conv2d(x, w, geom))
    }

    pub fn conv_transpose2d(&self, x: Var, w: Var, geom: ConvGeom) -> Var {
        self.binary(x, w, Op::ConvTranspose2d(x.idx, w.idx, geom), |x, w| {
            tensor::conv_transpose2d(x, w, geom)
        })
    }

    pub fn add_channel_bias(&self, x: Var, b: Var) -> Var {
        self.binary(x, b, Op::AddChannelBias(x.idx, b.idx), |x, b| {
            let mut out = x.clone();
            tensor::add_channel_bias(&mut out, b.data());
            out
        })
    }

    fn check_loss(&self, loss: Var) -> Result<usize> {
        if loss.tape != self.id {
            return Err(NnError::ForeignVar);
        }
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(NnError::NonScalarLoss(shape));
        }
        Ok(loss.idx)
    }

    /// Numeric reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.check_loss(loss)?;
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; root + 1];
        grads[root] = Some(Tensor::full(nodes[root].value.shape(), 1.0));

        fn acc(grads: &mut [Option<Tensor>], nodes: &[Node], idx: usize, g: Tensor) {
            if !nodes[idx].requires_grad {
                return;
            }
            match &mut grads[idx] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=root).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let val = |i: usize| &nodes[i].value;
            let rg = |i: usize| nodes[i].requires_grad;
            match node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    if rg(b) {
                        acc(&mut grads, &nodes, b, g.clone());
                    }
                    acc(&mut grads, &nodes, a, g);
                }
                Op::Sub(a, b) => {
                    if rg(b) {
                        acc(&mut grads, &nodes, b, g.map(|v| -v));
                    }
                    acc(&mut grads, &nodes, a, g);
                }
                Op::Mul(a, b) => {
                    if rg(a) {
                        acc(&mut grads, &nodes, a, g.zip_map(val(b), |p, q| p * q));
                    }
                    if rg(b) {
                        acc(&mut grads, &nodes, b, g.zip_map(val(a), |p, q| p * q));
                    }
                }
                Op::Div(a, b) => {
                    if rg(a) {
                        acc(&mut grads, &nodes, a, g.zip_map(val(b), |p, q| p / q));
                    }
                    if rg(b) {
                        let mut gb = g.zip_map(val(a), |p, q| -p * q);
                        gb = gb.zip_map(val(b), |p, q| p / (q * q));
                        acc(&mut grads, &nodes, b, gb);
                    }
                }
                Op::Scale(a, c) => acc(&mut grads, &nodes, a, g.map(|v| v * c)),
                Op::AddScalar(a) => acc(&mut grads, &nodes, a, g),
                Op::MatMul(a, b) => {
                    let (va, vb) = (val(a), val(b));
                    let (m, k) = (va.shape()[0], va.shape()[1]);
                    let n = vb.shape()[1];
                    if rg(a) {
                        let mut ga = vec![0.0; m * k];
                        tensor::gemm(m, n, k, g.data(), false, vb.data(), true, 0.0, &mut ga);
                        acc(&mut grads, &nodes, a, Tensor::new(vec![m, k], ga));
                    }
                    if rg(b) {
                        let mut gb = vec![0.0; k * n];
                        tensor::gemm(k, m, n, va.data(), true, g.data(), false, 0.0, &mut gb);
                        acc(&mut grads, &nodes, b, Tensor::new(vec![k, n], gb));
                    }
                }
                Op::Transpose(a) => acc(&mut grads, &nodes, a, g.transpose2()),
                Op::AddRowBias(x, b) => {
                    if rg(b) {
                        let s = tensor::row_sums(&g);
                        acc(&mut grads, &nodes, b, Tensor::new(vec![s.len()], s));
                    }
                    acc(&mut grads, &nodes, x, g);
                }
                Op::SumRows(x) => {
                    let n = val(x).shape()[0];
                    let m = g.len();
                    let mut data = Vec::with_capacity(n * m);
                    for _ in 0..n {
                        data.extend_from_slice(g.data());
                    }
                    acc(&mut grads, &nodes, x, Tensor::new(val(x).shape().to_vec(), data));
                }
                Op::BroadcastRows(v) => {
                    let s = tensor::row_sums(&g);
                    acc(&mut grads, &nodes, v, Tensor::new(val(v).shape().to_vec(), s));
                }
                Op::SumCols(x) => {
                    let shape = val(x).shape().to_vec();
                    let m = val(x).len() / g.len();
                    let mut data = Vec::with_capacity(g.len() * m);
                    for &v in g.data() {
                        data.extend(std::iter::repeat_n(v, m));
                    }
                    acc(&mut grads, &nodes, x, Tensor::new(shape, data));
                }
                Op::BroadcastCols(v, m) => {
                    let n = val(v).len();
                    let data = (0..n).map(|r| g.data()[r * m..(r + 1) * m].iter().sum()).collect();
                    acc(&mut grads, &nodes, v, Tensor::new(val(v).shape().to_vec(), data));
                }
                Op::Sum(x) => {
                    let gx = Tensor::full(val(x).shape(), g.item());
                    acc(&mut grads, &nodes, x, gx);
                }
                Op::Expand(s) => acc(&mut grads, &nodes, s, Tensor::scalar(g.sum())),
                Op::Reshape(x, ref orig) => acc(&mut grads, &nodes, x, g.reshape(orig)),
                Op::Relu(x) => {
                    let gx = g.zip_map(val(x), |p, q| if q > 0.0 { p } else { 0.0 });
                    acc(&mut grads, &nodes, x, gx);
                }
                Op::LeakyRelu(x, s) => {
                    let gx = g.zip_map(val(x), |p, q| if q > 0.0 { p } else { s * p });
                    acc(&mut grads, &nodes, x, gx);
                }
                Op::Tanh(x) => {
                    let gx = g.zip_map(&node.value, |p, y| p * (1.0 - y * y));
                    acc(&mut grads, &nodes, x, gx);
                }
                Op::Exp(x) => {
                    let gx = g.zip_map(&node.value, |p, y| p * y);
                    acc(&mut grads, &nodes, x, gx);
                }
                Op::Log(x) => {
                    let gx = g.zip_map(val(x), |p, q| p / q);
                    acc(&mut grads, &nodes, x, gx);
                }
                Op::Conv2d(x, w, geom) => {
                    let (vx, vw) = (val(x), val(w));
                    if rg(x) {
                        let (h, wd) = (vx.shape()[2], vx.shape()[3]);
                        acc(&mut grads, &nodes, x, tensor::conv2d_input_grad(&g, vw, geom, h, wd));
                    }
                    if rg(w) {
                        acc(&mut grads, &nodes, w, tensor::conv2d_weight_grad(vx, &g, geom));
                    }
                }
                Op::ConvTranspose2d(x, w, geom) => {
                    let (vx, vw) = (val(x), val(w));
                    if rg(x) {
                        acc(&mut grads, &nodes, x, tensor::conv_transpose2d_input_grad(&g, vw, geom));
                    }
                    if rg(w) {
                        let gw = tensor::conv_transpose2d_weight_grad(vx, &g, geom);
                        acc(&mut grads, &nodes, w, gw);
                    }
                }
                Op::AddChannelBias(x, b) => {
                    if rg(b) {
                        let s = tensor::channel_sums(&g);
                        acc(&mut grads, &nodes, b, Tensor::new(vec![s.len()], s));
                    }
                    acc(&mut grads, &nodes, x, g);
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    /// Runs [`Tape::backward`] and adds the gradients of every parameter leaf
    /// into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let has_params = self.nodes.borrow().iter().any(|n| n.param.is_some());
        if !has_params {
            return Err(NnError::NoGraph);
        }
        let grads = self.backward(loss)?;
        let nodes = self.nodes.borrow();
        for (idx, node) in nodes.iter().enumerate() {
            let Some(id) = node.param else { continue };
            if let Some(Some(g)) = grads.grads.get(idx) {
                store.grad_mut(id).add_assign(g);
            }
        }
        Ok(())
    }

    /// Records d(loss)/d(wrt) as new differentiable nodes on this tape.
    ///
    /// Entries of `wrt` the loss does not depend on get a constant zero.
    pub fn grad_graph(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let root = self.check_loss(loss)?;
        for w in wrt {
            if w.tape != self.id {
                return Err(NnError::ForeignVar);
            }
        }
        let mut grads: Vec<Option<Var>> = vec![None; root + 1];
        let ones = Tensor::full(&self.shape(loss), 1.0);
        grads[root] = Some(self.constant(ones));

        let var = |idx| Var { tape: self.id, idx };
        for idx in (0..=root).rev() {
            let Some(g) = grads[idx] else { continue };
            let (op, requires_grad) = {
                let nodes = self.nodes.borrow();
                (nodes[idx].op.clone(), nodes[idx].requires_grad)
            };
            if !requires_grad {
                continue;
            }
            let mut contribs: Vec<(usize, Var)> = Vec::with_capacity(2);
            match op {
                Op::Leaf => continue,
                Op::Add(a, b) => {
                    contribs.push((a, g));
                    contribs.push((b, g));
                }
                Op::Sub(a, b) => {
                    contribs.push((a, g));
                    if self.rg(b) {
                        contribs.push((b, self.neg(g)));
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(a) {
                        contribs.push((a, self.mul(g, var(b))));
                    }
                    if self.rg(b) {
                        contribs.push((b, self.mul(g, var(a))));
                    }
                }
                Op::Div(a, b) => {
                    if self.rg(a) {
                        contribs.push((a, self.div(g, var(b))));
                    }
                    if self.rg(b) {
                        let num = self.mul(g, var(a));
                        let den = self.square(var(b));
                        let q = self.div(num, den);
                        contribs.push((b, self.neg(q)));
                    }
                }
                Op::Scale(a, c) => contribs.push((a, self.scale(g, c))),
                Op::AddScalar(a) => contribs.push((a, g)),
                Op::MatMul(a, b) => {
                    if self.rg(a) {
                        let bt = self.transpose(var(b));
                        contribs.push((a, self.matmul(g, bt)));
                    }
                    if self.rg(b) {
                        let at = self.transpose(var(a));
                        contribs.push((b, self.matmul(at, g)));
                    }
                }
                Op::Transpose(a) => contribs.push((a, self.transpose(g))),
                Op::AddRowBias(x, b) => {
                    contribs.push((x, g));
                    if self.rg(b) {
                        contribs.push((b, self.sum_rows(g)));
                    }
                }
                Op::SumRows(x) => {
                    let n = self.nodes.borrow()[x].value.shape()[0];
                    contribs.push((x, self.broadcast_rows(g, n)));
                }
                Op::BroadcastRows(v) => {
                    let s = self.sum_rows(g);
                    let shape = self.nodes.borrow()[v].value.shape().to_vec();
                    contribs.push((v, self.reshape(s, &shape)));
                }
                Op::SumCols(x) => {
                    let (n, m) = self.nodes.borrow()[x].value.as_matrix_dims();
                    let b = self.broadcast_cols(g, m);
                    let shape = self.nodes.borrow()[x].value.shape().to_vec();
                    debug_assert_eq!(n * m, shape.iter().product::<usize>());
                    contribs.push((x, self.reshape(b, &shape)));
                }
                Op::BroadcastCols(v, _) => {
                    let s = self.sum_cols(g);
                    let shape = self.nodes.borrow()[v].value.shape().to_vec();
                    contribs.push((v, self.reshape(s, &shape)));
                }
                Op::Sum(x) => {
                    let shape = self.nodes.borrow()[x].value.shape().to_vec();
                    contribs.push((x, self.expand(g, &shape)));
                }
                Op::Expand(s) => contribs.push((s, self.sum(g))),
                Op::Reshape(x, orig) => contribs.push((x, self.reshape(g, &orig))),
                Op::Relu(x) => {
                    let mask = self.nodes.borrow()[x]
                        .value
                        .map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    let m = self.constant(mask);
                    contribs.push((x, self.mul(g, m)));
                }
                Op::LeakyRelu(x, s) => {
                    let mask = self.nodes.borrow()[x]
                        .value
                        .map(|v| if v > 0.0 { 1.0 } else { s });
                    let m = self.constant(mask);
                    contribs.push((x, self.mul(g, m)));
                }
                Op::Tanh(x) => {
                    let y = var(idx);
                    let y2 = self.square(y);
                    let d = self.add_scalar(self.neg(y2), 1.0);
                    contribs.push((x, self.mul(g, d)));
                }
                Op::Exp(x) => contribs.push((x, self.mul(g, var(idx)))),
                Op::Log(x) => contribs.push((x, self.div(g, var(x)))),
                ref other @ (Op::Conv2d(..) | Op::ConvTranspose2d(..) | Op::AddChannelBias(..)) => {
                    return Err(NnError::NoDoubleBackward(other.name()));
                }
            }
            for (target, c) in contribs {
                if !self.rg(target) {
                    continue;
                }
                grads[target] = Some(match grads[target] {
                    Some(prev) => self.add(prev, c),
                    None => c,
                });
            }
        }

        Ok(wrt
            .iter()
            .map(|w| match grads.get(w.idx).copied().flatten() {
                Some(g) if w.idx <= root => g,
                _ => self.constant(Tensor::zeros(&self.shape(*w))),
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec())
    }

    #[test]
    fn quadratic_form_gradient() {
        // L = 0.5 |W x|^2  =>  dL/dW = (W x) x^T ; with W laid out [in, out], y = x W.
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[1.0, -2.0, 0.5]));
        let w = tape.leaf(t(&[3, 2], &[0.3, -0.1, 0.2, 0.4, -0.5, 0.6]));
        let y = tape.matmul(x, w);
        let l = tape.scale(tape.sum(tape.square(y)), 0.5);
        let grads = tape.backward(l).unwrap();
        let gw = grads.get(w).unwrap();
        let yv = tape.value(y).clone();
        let xv = [1.0, -2.0, 0.5];
        for i in 0..3 {
            for j in 0..2 {
                let expect = xv[i] * yv.data()[j];
                assert!((gw.data()[i * 2 + j] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let tape = Tape::new();
        let w = tape.leaf(t(&[2], &[1.0, 2.0]));
        let z = tape.scale(tape.sum(w), 0.0);
        let l = tape.add_scalar(z, 3.0);
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let w = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(NnError::NonScalarLoss(_))));
    }

    #[test]
    fn foreign_var_rejected() {
        let a = Tape::new();
        let b = Tape::new();
        let w = b.leaf(Tensor::scalar(1.0));
        assert!(matches!(a.backward(w), Err(NnError::ForeignVar)));
    }

    #[test]
    fn backward_without_forward_rejected() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::scalar(1.0));
        let tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        assert!(matches!(tape.backward_into(c, &mut store), Err(NnError::NoGraph)));
    }

    #[test]
    fn second_derivative_of_cubic_like_terms() {
        // f(x) = sum(tanh(x) * exp(x)); check d/dx (grad f · v) against finite differences.
        let x0 = [0.3, -0.7, 1.1];
        let v = [0.5, -1.0, 2.0];
        let hvp = |x: &[f64]| -> Vec<f64> {
            let tape = Tape::new();
            let xv = tape.leaf(t(&[3], x));
            let f = tape.sum(tape.mul(tape.tanh(xv), tape.exp(xv)));
            let g = tape.grad_graph(f, &[xv]).unwrap()[0];
            let vv = tape.constant(t(&[3], &v));
            let gv = tape.sum(tape.mul(g, vv));
            tape.backward(gv).unwrap().get(xv).unwrap().data().to_vec()
        };
        let grad = |x: &[f64]| -> Vec<f64> {
            let tape = Tape::new();
            let xv = tape.leaf(t(&[3], x));
            let f = tape.sum(tape.mul(tape.tanh(xv), tape.exp(xv)));
            tape.backward(f).unwrap().get(xv).unwrap().data().to_vec()
        };
        let h = 1e-6;
        let plus: Vec<f64> = x0.iter().zip(&v).map(|(a, b)| a + h * b).collect();
        let minus: Vec<f64> = x0.iter().zip(&v).map(|(a, b)| a - h * b).collect();
        let (gp, gm) = (grad(&plus), grad(&minus));
        let analytic = hvp(&x0);
        for i in 0..3 {
            let fd = (gp[i] - gm[i]) / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 1e-7, "{fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn conv_double_backward_is_reported() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 4, 4], 1.0));
        let w = tape.leaf(Tensor::full(&[1, 1, 2, 2], 0.5));
        let g = ConvGeom { kernel: 2, stride: 2, padding: 0 };
        let l = tape.sum(tape.conv2d(x, w, g));
        assert!(matches!(tape.grad_graph(l, &[w]), Err(NnError::NoDoubleBackward("conv2d"))));
    }
}
