//! Tape-style reverse-mode graph.
//!
//! Every backward rule is itself written with graph ops, so gradients can be
//! differentiated again (used for Hessian-vector products).

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::{Error, Result, Scalar};

use super::kernels::{self, ConvGeom};
use super::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum ConvMode {
    /// `(x, w) -> y`
    Forward,
    /// `(gy, w) -> gx`
    BackInput,
    /// `(x, gy) -> gw`
    BackKernel,
}

#[derive(Clone)]
pub(crate) enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, T),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Powf(usize, T),
    BroadcastTo(usize),
    SumTo(usize),
    Reshape(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Conv(ConvMode, usize, usize, Rc<ConvGeom>),
    Gather(usize, Rc<[usize]>),
    ScatterAdd(usize, Rc<[usize]>),
}

impl<T> Op<T> {
    fn inputs(&self) -> [Option<usize>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | Conv(_, a, b, _) => [Some(a), Some(b)],
            Neg(a)
            | Scale(a, _)
            | AddScalar(a)
            | Exp(a)
            | Log(a)
            | Tanh(a)
            | Sigmoid(a)
            | Softplus(a)
            | Powf(a, _)
            | BroadcastTo(a)
            | SumTo(a)
            | Reshape(a)
            | Transpose(a)
            | Gather(a, _)
            | ScatterAdd(a, _) => [Some(a), None],
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single-threaded computation graph. Nodes are appended in evaluation
/// order, so the node list is always topologically sorted.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    first_non_finite: Cell<Option<usize>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            first_non_finite: Cell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, value: Rc<Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if self.first_non_finite.get().is_none() && !value.all_finite() {
            self.first_non_finite.set(Some(id));
        }
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { graph: self, id }
    }

    /// Leaf that gradients can be taken with respect to.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(Rc::new(value), Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(Rc::new(value), Op::Leaf, false)
    }

    fn constant_shared(&self, value: Rc<Tensor<T>>) -> Var<'_, T> {
        self.push_node(value, Op::Leaf, false)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn record(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let requires_grad = op.inputs().iter().flatten().any(|&i| self.requires_grad(i));
        let op = if requires_grad { op } else { Op::Leaf };
        self.push_node(Rc::new(value), op, requires_grad)
    }

    /// Fails if any node produced so far holds a NaN or infinity.
    pub fn ensure_finite(&self) -> Result<()> {
        match self.first_non_finite.get() {
            None => Ok(()),
            Some(id) => Err(Error::NonFinite(format!("graph node {id}"))),
        }
    }

    /// Reverse-mode gradients of the scalar `output` with respect to `wrt`.
    ///
    /// With `create_graph` the returned gradients are themselves
    /// differentiable; otherwise they are detached constants.
    pub fn grad<'g>(&'g self, output: Var<'g, T>, wrt: &[Var<'g, T>], create_graph: bool) -> Result<Vec<Var<'g, T>>> {
        let out_val = output.value();
        if out_val.numel() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got shape {:?}",
                out_val.shape()
            )));
        }
        for w in wrt {
            if !self.requires_grad(w.id) {
                return Err(Error::Contract(format!(
                    "gradient requested for detached node {}",
                    w.id
                )));
            }
        }
        self.ensure_finite()?;
        let n = output.id + 1;
        let mut grads: Vec<Option<Var<'g, T>>> = vec![None; n];
        grads[output.id] = Some(self.constant(Tensor::full(out_val.shape(), T::one())));
        for id in (0..n).rev() {
            let Some(g) = grads[id] else { continue };
            let (op, rg) = {
                let nodes = self.nodes.borrow();
                (nodes[id].op.clone(), nodes[id].requires_grad)
            };
            if !rg || matches!(op, Op::Leaf) {
                continue;
            }
            let ctx = VjpCtx {
                graph: self,
                out: id,
                create_graph,
            };
            for (input, gi) in ctx.vjp(&op, g)? {
                grads[input] = Some(match grads[input] {
                    None => gi,
                    Some(prev) => prev.add(gi)?,
                });
            }
        }
        self.ensure_finite()?;
        Ok(wrt
            .iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(g) if create_graph => g,
                Some(g) => self.constant_shared(g.value()),
                None => self.constant(Tensor::zeros(w.value().shape())),
            })
            .collect())
    }

    /// Detached gradient values, convenience over [`Graph::grad`].
    pub fn gradients<'g>(&'g self, output: Var<'g, T>, wrt: &[Var<'g, T>]) -> Result<Vec<Tensor<T>>> {
        Ok(self
            .grad(output, wrt, false)?
            .into_iter()
            .map(|g| (*g.value()).clone())
            .collect())
    }
}

struct VjpCtx<'g, T: Scalar> {
    graph: &'g Graph<T>,
    out: usize,
    create_graph: bool,
}

impl<'g, T: Scalar> VjpCtx<'g, T> {
    fn var(&self, id: usize) -> Var<'g, T> {
        if self.create_graph {
            Var { graph: self.graph, id }
        } else {
            self.graph.constant_shared(self.graph.value_of(id))
        }
    }

    fn needs(&self, id: usize) -> bool {
        self.graph.requires_grad(id)
    }

    fn shape(&self, id: usize) -> Vec<usize> {
        self.graph.value_of(id).shape().to_vec()
    }

    fn vjp(&self, op: &Op<T>, g: Var<'g, T>) -> Result<Vec<(usize, Var<'g, T>)>> {
        use Op::*;
        let mut out = Vec::with_capacity(2);
        let mut push = |id: usize, f: &dyn Fn() -> Result<Var<'g, T>>| -> Result<()> {
            if self.needs(id) {
                out.push((id, f()?));
            }
            Ok(())
        };
        match op {
            Leaf => {}
            Add(a, b) => {
                push(*a, &|| Ok(g))?;
                push(*b, &|| Ok(g))?;
            }
            Sub(a, b) => {
                push(*a, &|| Ok(g))?;
                push(*b, &|| Ok(g.neg()))?;
            }
            Mul(a, b) => {
                push(*a, &|| g.mul(self.var(*b)))?;
                push(*b, &|| g.mul(self.var(*a)))?;
            }
            Neg(a) => push(*a, &|| Ok(g.neg()))?,
            Scale(a, c) => push(*a, &|| Ok(g.scale(*c)))?,
            AddScalar(a) => push(*a, &|| Ok(g))?,
            Exp(a) => push(*a, &|| g.mul(self.var(self.out)))?,
            Log(a) => push(*a, &|| g.mul(self.var(*a).powf(-T::one())))?,
            Tanh(a) => push(*a, &|| {
                let y = self.var(self.out);
                let gy = g.mul(y)?;
                g.sub(gy.mul(y)?)
            })?,
            Sigmoid(a) => push(*a, &|| {
                let y = self.var(self.out);
                let gy = g.mul(y)?;
                gy.sub(gy.mul(y)?)
            })?,
            Softplus(a) => push(*a, &|| g.mul(self.var(*a).sigmoid()))?,
            Powf(a, p) => push(*a, &|| {
                let d = self.var(*a).powf(*p - T::one()).scale(*p);
                g.mul(d)
            })?,
            BroadcastTo(a) => push(*a, &|| g.sum_to(&self.shape(*a)))?,
            SumTo(a) => push(*a, &|| g.broadcast_to(&self.shape(*a)))?,
            Reshape(a) => push(*a, &|| g.reshape(&self.shape(*a)))?,
            MatMul(a, b) => {
                push(*a, &|| g.matmul(self.var(*b).transpose()?))?;
                push(*b, &|| self.var(*a).transpose()?.matmul(g))?;
            }
            Transpose(a) => push(*a, &|| g.transpose())?,
            Conv(mode, a, b, geom) => match mode {
                ConvMode::Forward => {
                    push(*a, &|| Ok(g.conv_raw(ConvMode::BackInput, self.var(*b), geom)))?;
                    push(*b, &|| Ok(self.var(*a).conv_raw(ConvMode::BackKernel, g, geom)))?;
                }
                ConvMode::BackInput => {
                    push(*a, &|| Ok(g.conv_raw(ConvMode::Forward, self.var(*b), geom)))?;
                    push(*b, &|| Ok(g.conv_raw(ConvMode::BackKernel, self.var(*a), geom)))?;
                }
                ConvMode::BackKernel => {
                    push(*a, &|| Ok(self.var(*b).conv_raw(ConvMode::BackInput, g, geom)))?;
                    push(*b, &|| Ok(self.var(*a).conv_raw(ConvMode::Forward, g, geom)))?;
                }
            },
            Gather(a, idx) => push(*a, &|| Ok(g.scatter_add_raw(idx, &self.shape(*a))))?,
            ScatterAdd(a, idx) => push(*a, &|| Ok(g.gather_raw(idx, &self.shape(*a))))?,
        }
        Ok(out)
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

// Arithmetic is fallible (shape checks), so these are methods rather than
// operator-trait impls.
#[allow(clippy::should_implement_trait)]
impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    fn unary(self, op: Op<T>, f: impl Fn(T) -> T) -> Var<'g, T> {
        let v = self.value().map(f);
        self.graph.record(v, op)
    }

    fn binary(self, other: Var<'g, T>, op: Op<T>, what: &str, f: impl Fn(T, T) -> T) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, what)?;
        let v = a.zip_map(&b, f)?;
        Ok(self.graph.record(v, op))
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, Op::Add(self.id, other.id), "add", |a, b| a + b)
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, Op::Sub(self.id, other.id), "sub", |a, b| a - b)
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, Op::Mul(self.id, other.id), "mul", |a, b| a * b)
    }

    pub fn neg(self) -> Var<'g, T> {
        self.unary(Op::Neg(self.id), |a| -a)
    }

    pub fn scale(self, c: T) -> Var<'g, T> {
        self.unary(Op::Scale(self.id, c), |a| a * c)
    }

    pub fn add_scalar(self, c: T) -> Var<'g, T> {
        self.unary(Op::AddScalar(self.id), |a| a + c)
    }

    pub fn exp(self) -> Var<'g, T> {
        self.unary(Op::Exp(self.id), |a| a.exp())
    }

    pub fn ln(self) -> Var<'g, T> {
        self.unary(Op::Log(self.id), |a| a.ln())
    }

    pub fn tanh(self) -> Var<'g, T> {
        self.unary(Op::Tanh(self.id), |a| a.tanh())
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    /// `ln(1 + e^x)`, switching to `x` above 20 and `e^x` below -20.
    pub fn softplus(self) -> Var<'g, T> {
        self.unary(Op::Softplus(self.id), softplus)
    }

    pub fn powf(self, p: T) -> Var<'g, T> {
        self.unary(Op::Powf(self.id, p), |a| a.powf(p))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let v = self.value();
        kernels::check_broadcast(v.shape(), shape)?;
        if v.shape() == shape {
            return Ok(self);
        }
        let out = kernels::broadcast_to(&v, shape);
        Ok(self.graph.record(out, Op::BroadcastTo(self.id)))
    }

    /// Sum over the axes where `shape` has extent 1.
    pub fn sum_to(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let v = self.value();
        kernels::check_broadcast(shape, v.shape())?;
        if v.shape() == shape {
            return Ok(self);
        }
        let out = kernels::sum_to(&v, shape);
        Ok(self.graph.record(out, Op::SumTo(self.id)))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum_all(self) -> Result<Var<'g, T>> {
        let ones = vec![1; self.value().rank()];
        self.sum_to(&ones)?.reshape(&[])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let v = self.value();
        if v.shape() == shape {
            return Ok(self);
        }
        if numel(shape) != v.numel() {
            return Err(Error::dim(format!("cannot reshape {:?} to {:?}", v.shape(), shape)));
        }
        let out = (*v).clone().reshape(shape)?;
        Ok(self.graph.record(out, Op::Reshape(self.id)))
    }

    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let out = kernels::matmul(&self.value(), &other.value())?;
        Ok(self.graph.record(out, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(self) -> Result<Var<'g, T>> {
        let out = kernels::transpose(&self.value())?;
        Ok(self.graph.record(out, Op::Transpose(self.id)))
    }

    pub(crate) fn conv_raw(self, mode: ConvMode, other: Var<'g, T>, geom: &Rc<ConvGeom>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        let out = match mode {
            ConvMode::Forward => kernels::conv2d_forward(&a, &b, geom),
            ConvMode::BackInput => kernels::conv2d_back_input(&a, &b, geom),
            ConvMode::BackKernel => kernels::conv2d_back_kernel(&a, &b, geom),
        };
        self.graph
            .record(out, Op::Conv(mode, self.id, other.id, Rc::clone(geom)))
    }

    pub(crate) fn gather_raw(self, index: &Rc<[usize]>, shape: &[usize]) -> Var<'g, T> {
        let out = kernels::gather(&self.value(), index, shape);
        self.graph.record(out, Op::Gather(self.id, Rc::clone(index)))
    }

    pub(crate) fn scatter_add_raw(self, index: &Rc<[usize]>, shape: &[usize]) -> Var<'g, T> {
        let out = kernels::scatter_add(&self.value(), index, shape);
        self.graph.record(out, Op::ScatterAdd(self.id, Rc::clone(index)))
    }

    /// Select flat elements by index into a tensor of the given shape.
    pub fn gather(self, index: Vec<usize>, shape: &[usize]) -> Result<Var<'g, T>> {
        let n = self.value().numel();
        if index.len() != numel(shape) {
            return Err(Error::dim(format!(
                "gather of {} indices into shape {:?}",
                index.len(),
                shape
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::dim(format!("gather index {bad} out of {n}")));
        }
        Ok(self.gather_raw(&Rc::from(index), shape))
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    let cut = T::lit(20.0);
    if x > cut {
        x
    } else if x < -cut {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}
