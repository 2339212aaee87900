//! Dense `f64` tensors with define-by-run reverse-mode differentiation.
//!
//! Every operation on a tensor that requires gradients records a node holding
//! its parents and a backward closure. [`Tensor::backward`] walks that graph in
//! reverse topological order and accumulates gradients into the leaves. Graphs
//! are cheap to throw away: the training loop rebuilds one per update.

mod conv;
mod linalg;
mod nnops;

use std::collections::hash_map::Entry;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

pub use conv::{Conv2dOpts, Padding};
pub(crate) use linalg::gemm;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Maps the upstream gradient to one optional gradient per parent.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

struct GradFn {
    op: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    grad_fn: Option<GradFn>,
}

#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad);
        if let Some(g) = &self.0.grad_fn {
            s.field("op", &g.op);
        }
        if self.numel() <= 16 {
            s.field("data", &self.0.data);
        }
        s.finish()
    }
}

fn check_len(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::invalid_shape(
            op,
            shape,
            format!("expected {numel} values, got {len}"),
        ));
    }
    Ok(())
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

impl Tensor {
    fn leaf(shape: Vec<usize>, data: Arc<Vec<f64>>, requires_grad: bool) -> Tensor {
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            grad_fn: None,
        }))
    }

    /// Constant leaf tensor.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_len("tensor", shape, data.len())?;
        Ok(Tensor::leaf(shape.to_vec(), Arc::new(data), false))
    }

    /// Trainable leaf tensor.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_len("param", shape, data.len())?;
        Ok(Tensor::leaf(shape.to_vec(), Arc::new(data), true))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::leaf(shape.to_vec(), Arc::new(vec![value; n]), false)
    }

    /// Rank-0 constant.
    pub fn scalar(value: f64) -> Tensor {
        Tensor::leaf(Vec::new(), Arc::new(vec![value]), false)
    }

    /// Result of a recorded operation. `backward` is only kept when some
    /// parent requires gradients; otherwise the result is a constant leaf.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let tracked = parents.iter().any(Tensor::requires_grad);
        match backward {
            Some(backward) if tracked => Tensor(Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: Arc::new(data),
                requires_grad: true,
                grad: Mutex::new(None),
                grad_fn: Some(GradFn {
                    op,
                    parents,
                    backward,
                }),
            })),
            _ => Tensor::leaf(shape, Arc::new(data), false),
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
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

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// Name of the operation that produced this tensor, if any.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.grad_fn.as_ref().map(|g| g.op)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Constant leaf sharing this tensor's storage.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.0.shape.clone(), Arc::clone(&self.0.data), false)
    }

    /// Fresh leaf sharing this tensor's storage with the given flag.
    pub fn leaf_with_grad(&self, requires_grad: bool) -> Tensor {
        Tensor::leaf(self.0.shape.clone(), Arc::clone(&self.0.data), requires_grad)
    }

    fn accumulate_grad(&self, g: Vec<f64>) {
        let mut slot = self.0.grad.lock().expect("grad lock poisoned");
        match slot.as_mut() {
            Some(acc) => add_into(acc, &g),
            None => *slot = Some(g),
        }
    }

    /// Nodes reachable from `self` through tracked edges, parents before children.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(f) = &t.0.grad_fn {
                for p in f.parents.iter().rev() {
                    if p.requires_grad() && !seen.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }

    /// Accumulates d(self)/d(leaf) into every reachable leaf that requires
    /// gradients. Calling it twice without [`Tensor::zero_grad`] sums.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            let Some(f) = &node.0.grad_fn else {
                node.accumulate_grad(g);
                continue;
            };
            let parent_grads = (f.backward)(&g);
            debug_assert_eq!(parent_grads.len(), f.parents.len(), "{}", f.op);
            for (p, pg) in f.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !p.requires_grad() {
                    continue;
                }
                debug_assert_eq!(pg.len(), p.numel(), "{} grad length", f.op);
                match grads.entry(p.id()) {
                    Entry::Occupied(mut e) => add_into(e.get_mut(), &pg),
                    Entry::Vacant(e) => {
                        e.insert(pg);
                    }
                }
            }
        }
        Ok(())
    }

    /// Fails on the first NaN or infinity.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        match self.data().iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite {
                context: context.to_string(),
                index,
                value: self.data()[index],
            }),
            None => Ok(()),
        }
    }
}

/// Pointwise functions of one tensor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Neg,
    Log,
    Exp,
    Square,
    Tanh,
    Sigmoid,
    LeakyRelu(f64),
    ClampMin(f64),
    Scale(f64),
    Shift(f64),
}

impl UnaryOp {
    fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "neg",
            UnaryOp::Log => "log",
            UnaryOp::Exp => "exp",
            UnaryOp::Square => "square",
            UnaryOp::Tanh => "tanh",
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::LeakyRelu(_) => "leaky_relu",
            UnaryOp::ClampMin(_) => "clamp_min",
            UnaryOp::Scale(_) => "scale",
            UnaryOp::Shift(_) => "shift",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Neg => -x,
            UnaryOp::Log => x.ln(),
            UnaryOp::Exp => x.exp(),
            UnaryOp::Square => x * x,
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            // NaN must survive the clamp
            UnaryOp::ClampMin(m) => {
                if x < m {
                    m
                } else {
                    x
                }
            }
            UnaryOp::Scale(c) => c * x,
            UnaryOp::Shift(c) => x + c,
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryOp::Neg => -1.0,
            UnaryOp::Log => 1.0 / x,
            UnaryOp::Exp => y,
            UnaryOp::Square => 2.0 * x,
            UnaryOp::Tanh => 1.0 - y * y,
            UnaryOp::Sigmoid => y * (1.0 - y),
            UnaryOp::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            UnaryOp::ClampMin(m) => {
                if x < m {
                    0.0
                } else {
                    1.0
                }
            }
            UnaryOp::Scale(c) => c,
            UnaryOp::Shift(_) => 1.0,
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pointwise functions of two same-shape tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }

    /// (dy/da, dy/db)
    fn partials(self, a: f64, b: f64) -> (f64, f64) {
        match self {
            BinaryOp::Add => (1.0, 1.0),
            BinaryOp::Sub => (1.0, -1.0),
            BinaryOp::Mul => (b, a),
            BinaryOp::Div => (1.0 / b, -a / (b * b)),
        }
    }
}

impl Tensor {
    pub fn unary(&self, op: UnaryOp) -> Tensor {
        let x = Arc::clone(&self.0.data);
        let y: Vec<f64> = x.iter().map(|&v| op.apply(v)).collect();
        let backward: Option<BackwardFn> = self.requires_grad().then(|| {
            let y = y.clone();
            Box::new(move |g: &[f64]| {
                let dx = g
                    .iter()
                    .zip(x.iter().zip(&y))
                    .map(|(g, (&x, &y))| g * op.derivative(x, y))
                    .collect();
                vec![Some(dx)]
            }) as BackwardFn
        });
        Tensor::from_op(op.name(), self.shape().to_vec(), y, vec![self.clone()], backward)
    }

    /// `rhs` must have this tensor's shape or hold exactly one element, in
    /// which case it is broadcast.
    pub fn binary(&self, op: BinaryOp, rhs: &Tensor) -> Result<Tensor> {
        let broadcast = rhs.numel() == 1 && self.shape() != rhs.shape();
        if !broadcast && self.shape() != rhs.shape() {
            return Err(Error::ShapeMismatch {
                op: op.name(),
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let a = Arc::clone(&self.0.data);
        let b = Arc::clone(&rhs.0.data);
        let bv = |i: usize| if broadcast { b[0] } else { b[i] };
        let y: Vec<f64> = a.iter().enumerate().map(|(i, &x)| op.apply(x, bv(i))).collect();
        let (need_a, need_b) = (self.requires_grad(), rhs.requires_grad());
        let backward: Option<BackwardFn> = (need_a || need_b).then(|| {
            Box::new(move |g: &[f64]| {
                let mut da = need_a.then(|| vec![0.0; a.len()]);
                let mut db = need_b.then(|| vec![0.0; b.len()]);
                for (i, &gi) in g.iter().enumerate() {
                    let bi = if broadcast { b[0] } else { b[i] };
                    let (pa, pb) = op.partials(a[i], bi);
                    if let Some(da) = da.as_mut() {
                        da[i] = gi * pa;
                    }
                    if let Some(db) = db.as_mut() {
                        db[if broadcast { 0 } else { i }] += gi * pb;
                    }
                }
                vec![da, db]
            }) as BackwardFn
        });
        Ok(Tensor::from_op(
            op.name(),
            self.shape().to_vec(),
            y,
            vec![self.clone(), rhs.clone()],
            backward,
        ))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Add, rhs)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Sub, rhs)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Mul, rhs)
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Div, rhs)
    }

    pub fn neg(&self) -> Tensor {
        self.unary(UnaryOp::Neg)
    }

    pub fn log(&self) -> Tensor {
        self.unary(UnaryOp::Log)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(UnaryOp::Exp)
    }

    pub fn square(&self) -> Tensor {
        self.unary(UnaryOp::Square)
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(UnaryOp::Tanh)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(UnaryOp::Sigmoid)
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        self.unary(UnaryOp::LeakyRelu(slope))
    }

    pub fn clamp_min(&self, min: f64) -> Tensor {
        self.unary(UnaryOp::ClampMin(min))
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        self.unary(UnaryOp::Scale(c))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(UnaryOp::Shift(c))
    }

    /// `c - self`
    pub fn rsub_scalar(&self, c: f64) -> Tensor {
        self.neg().add_scalar(c)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Tensor {
        let n = self.numel();
        let total = self.data().iter().sum();
        let backward: Option<BackwardFn> = self
            .requires_grad()
            .then(|| Box::new(move |g: &[f64]| vec![Some(vec![g[0]; n])]) as BackwardFn);
        Tensor::from_op("sum", Vec::new(), vec![total], vec![self.clone()], backward)
    }

    /// Mean of all elements as a rank-0 tensor.
    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let mean = self.data().iter().sum::<f64>() / n as f64;
        let backward: Option<BackwardFn> = self
            .requires_grad()
            .then(|| Box::new(move |g: &[f64]| vec![Some(vec![g[0] / n as f64; n])]) as BackwardFn);
        Tensor::from_op("mean", Vec::new(), vec![mean], vec![self.clone()], backward)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        check_len("reshape", shape, self.numel())?;
        let backward: Option<BackwardFn> = self
            .requires_grad()
            .then(|| Box::new(|g: &[f64]| vec![Some(g.to_vec())]) as BackwardFn);
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            backward,
        ))
    }

    /// `[N, ...] -> [N, prod(...)]`
    pub fn flatten(&self) -> Result<Tensor> {
        let n = *self
            .shape()
            .first()
            .ok_or_else(|| Error::invalid_shape("flatten", self.shape(), "rank 0"))?;
        let rest = self.shape()[1..].iter().product();
        self.reshape(&[n, rest])
    }
}
