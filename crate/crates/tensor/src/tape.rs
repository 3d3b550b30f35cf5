use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use smallvec::SmallVec;

use crate::element::{cast, Element};
use crate::error::{Result, TensorError};
use crate::params::ParamId;
use crate::prim::{self, Primitive};
use crate::tensor::Tensor;

pub type NodeId = usize;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// A value on a tape. Vars without a node are constants.
#[derive(Clone, Debug)]
pub struct Var<T: Element> {
    value: Tensor<T>,
    node: Option<NodeId>,
    tape: u64,
}

impl<T: Element> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.value.dim(axis)
    }

    pub fn rank(&self) -> usize {
        self.value.rank()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Same value, detached from the graph.
    pub fn detach(&self) -> Self {
        Var { value: self.value.clone(), node: None, tape: self.tape }
    }
}

struct Node<T: Element> {
    prim: Primitive,
    inputs: SmallVec<[(Option<NodeId>, Tensor<T>); 4]>,
    output: Tensor<T>,
    aux: Vec<Tensor<T>>,
}

struct Inner<T: Element> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, NodeId>,
    consumed: bool,
}

/// Records primitive applications for reverse-mode differentiation.
///
/// One tape per thread; a tape is consumed by [`Tape::backward`].
pub struct Tape<T: Element> {
    id: u64,
    grad: bool,
    inner: RefCell<Inner<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self::with_grad(true)
    }

    /// A tape that records nothing; every result is a constant.
    pub fn no_grad() -> Self {
        Self::with_grad(false)
    }

    fn with_grad(grad: bool) -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            grad,
            inner: RefCell::new(Inner { nodes: Vec::new(), params: HashMap::new(), consumed: false }),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_live(&self) -> Result<()> {
        if self.inner.borrow().consumed {
            return Err(TensorError::contract("tape already consumed by backward"));
        }
        Ok(())
    }

    fn push_leaf(&self, value: Tensor<T>) -> NodeId {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { prim: Primitive::Leaf, inputs: SmallVec::new(), output: value, aux: vec![] });
        inner.nodes.len() - 1
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<T> {
        let node = self.grad.then(|| self.push_leaf(value.clone()));
        Var { value, node, tape: self.id }
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var { value, node: None, tape: self.id }
    }

    pub fn scalar(&self, v: f64) -> Var<T> {
        self.constant(Tensor::scalar(cast(v)))
    }

    /// A parameter leaf; repeated requests for the same id share one node.
    pub fn param(&self, id: ParamId, value: &Tensor<T>) -> Var<T> {
        if !self.grad {
            return self.constant(value.clone());
        }
        if let Some(&n) = self.inner.borrow().params.get(&id) {
            let value = self.inner.borrow().nodes[n].output.clone();
            return Var { value, node: Some(n), tape: self.id };
        }
        let n = self.push_leaf(value.clone());
        self.inner.borrow_mut().params.insert(id, n);
        Var { value: value.clone(), node: Some(n), tape: self.id }
    }

    /// Applies a primitive, recording it when any operand is differentiable.
    pub fn apply(&self, p: &Primitive, xs: &[&Var<T>]) -> Result<Var<T>> {
        self.check_live()?;
        for x in xs {
            if x.node.is_some() && x.tape != self.id {
                return Err(TensorError::contract(format!("{}: operand belongs to another tape", p.name())));
            }
        }
        match p {
            Primitive::Dropout { p: prob, train, .. } if !*train || *prob == 0.0 => {
                if xs.len() != 1 {
                    return Err(TensorError::shape("dropout", "expected 1 operand"));
                }
                return Ok(xs[0].clone());
            }
            _ => {}
        }
        let vals: SmallVec<[&Tensor<T>; 6]> = xs.iter().map(|x| &x.value).collect();
        let (out, aux) = prim::forward(p, &vals)?;
        if !out.all_finite() {
            return Err(TensorError::NumericFault { primitive: p.name() });
        }
        let record = self.grad && xs.iter().any(|x| x.node.is_some());
        if !record {
            return Ok(Var { value: out, node: None, tape: self.id });
        }
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            prim: p.clone(),
            inputs: xs.iter().map(|x| (x.node, x.value.clone())).collect(),
            output: out.clone(),
            aux,
        });
        Ok(Var { value: out, node: Some(inner.nodes.len() - 1), tape: self.id })
    }

    /// Reverse sweep from a one-element loss. Consumes the tape.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        self.check_live()?;
        if loss.value.numel() != 1 {
            return Err(TensorError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        if loss.node.is_some() && loss.tape != self.id {
            return Err(TensorError::contract("loss belongs to another tape"));
        }
        let mut inner = self.inner.borrow_mut();
        inner.consumed = true;
        let nodes = std::mem::take(&mut inner.nodes);
        let params = std::mem::take(&mut inner.params);
        drop(inner);
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        let Some(root) = loss.node else {
            return Ok(Gradients { grads: HashMap::new(), params: HashMap::new() });
        };
        grads[root] = Some(vec![T::one()]);
        let mut leaves = HashMap::new();
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if node.prim == Primitive::Leaf {
                leaves.insert(i, Tensor::from_parts(node.output.shape().into(), g));
                continue;
            }
            let need: SmallVec<[bool; 6]> = node.inputs.iter().map(|(n, _)| n.is_some()).collect();
            let xs: SmallVec<[Tensor<T>; 6]> = node.inputs.iter().map(|(_, v)| v.clone()).collect();
            let gs = prim::backward(&node.prim, &xs, &node.output, &node.aux, &g, &need);
            for ((src, _), gi) in node.inputs.iter().zip(gs) {
                let (Some(src), Some(gi)) = (src, gi) else { continue };
                match &mut grads[*src] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        let params = params.into_iter().filter_map(|(id, n)| leaves.get(&n).map(|g| (id, g.clone()))).collect();
        Ok(Gradients { grads: leaves, params })
    }
}

/// Leaf gradients produced by one backward sweep.
pub struct Gradients<T: Element> {
    grads: HashMap<NodeId, Tensor<T>>,
    params: HashMap<ParamId, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient w.r.t. a leaf; `None` when the loss does not depend on it.
    pub fn wrt(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        v.node.and_then(|n| self.grads.get(&n))
    }

    /// Like [`Gradients::wrt`] but zeros when unreachable.
    pub fn wrt_or_zero(&self, v: &Var<T>) -> Tensor<T> {
        self.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape()))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(&k, v)| (k, v))
    }
}

/// Typed conveniences over [`Tape::apply`].
impl<T: Element> Tape<T> {
    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.apply(&Primitive::Add, &[a, b])
    }
    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.apply(&Primitive::Sub, &[a, b])
    }
    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.apply(&Primitive::Mul, &[a, b])
    }
    pub fn div(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.apply(&Primitive::Div, &[a, b])
    }
    pub fn neg(&self, x: &Var<T>) -> Result<Var<T>> {
        self.apply(&Primitive::Neg, &[x])
    }
    pub fn exp(&self, x: &Var<T>) -> Result<Var<T>> {
        self.apply(&Primitive::Exp, &[x])
    }
    pub fn log(&self, x: &Var<T>) -> Result<Var<T>> {
        self.apply(&Primitive::Log, &[x])
    }
    pub fn sqrt(&self, x: &Var<T>) -> Result<Var<T>> {
        self.apply(&Primitive::Sqrt, &[x])
    }
    pub fn abs(&self, x: &Var<T>) -> Result<Var<T>> {
        self.apply(&Primitive::Abs, &[x])
    }
    pub fn square(&self, x: &Var<T>) -> Result<Var<T>> {
        self.apply(&Primitive::Square, &[x])
    }
    pub fn relu(&self, x: &Var<T>) -> Result<Var<T>> {
        self.apply(&Primitive::Relu, &[x])
    }
    pub fn gelu(&self, x: &Var<T>) -> Result<Var<T>> {
        self.apply(&Primitive::Gelu, &[x])
    }
    pub fn sigmoid(&self, x: &Var<T>) -> Result<Var<T>> {
        self.apply(&Primitive::Sigmoid, &[x])
    }
    pub fn tanh(&self, x: &Var<T>) -> Result<Var<T>> {
        self.apply(&Primitive::Tanh, &[x])
    }
    pub fn scale(&self, x: &Var<T>, c: f64) -> Result<Var<T>> {
        self.apply(&Primitive::Scale(c), &[x])
    }
    pub fn add_scalar(&self, x: &Var<T>, c: f64) -> Result<Var<T>> {
        self.apply(&Primitive::AddScalar(c), &[x])
    }
    pub fn matmul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.apply(&Primitive::MatMul, &[a, b])
    }
    pub fn permute(&self, x: &Var<T>, perm: &[usize]) -> Result<Var<T>> {
        self.apply(&Primitive::Permute(perm.to_vec()), &[x])
    }
    /// Swaps two axes.
    pub fn transpose(&self, x: &Var<T>, a: usize, b: usize) -> Result<Var<T>> {
        let r = x.rank();
        if a >= r || b >= r {
            return Err(TensorError::shape("transpose", format!("axes ({a}, {b}) out of range for {:?}", x.shape())));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(a, b);
        self.permute(x, &perm)
    }
    pub fn concat(&self, xs: &[&Var<T>], axis: usize) -> Result<Var<T>> {
        if xs.len() == 1 {
            return Ok(xs[0].clone());
        }
        self.apply(&Primitive::Concat { axis }, xs)
    }
    pub fn slice(&self, x: &Var<T>, axis: usize, start: usize, end: usize) -> Result<Var<T>> {
        self.apply(&Primitive::Slice { axis, start, end }, &[x])
    }
    /// Picks index `i` along `axis`, dropping the axis.
    pub fn select(&self, x: &Var<T>, axis: usize, i: usize) -> Result<Var<T>> {
        let s = self.slice(x, axis, i, i + 1)?;
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        self.reshape(&s, &shape)
    }
    pub fn reshape(&self, x: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        self.apply(&Primitive::Reshape(shape.to_vec()), &[x])
    }
    pub fn gather(&self, x: &Var<T>, axis: usize, indices: Vec<usize>) -> Result<Var<T>> {
        self.apply(&Primitive::Gather { axis, indices: Arc::new(indices) }, &[x])
    }
    pub fn pad(&self, x: &Var<T>, axis: usize, before: usize, after: usize) -> Result<Var<T>> {
        self.apply(&Primitive::Pad { axis, before, after }, &[x])
    }
    pub fn softmax(&self, x: &Var<T>, axis: usize) -> Result<Var<T>> {
        self.apply(&Primitive::Softmax { axis }, &[x])
    }
    pub fn sum(&self, x: &Var<T>, axis: usize, keepdim: bool) -> Result<Var<T>> {
        self.apply(&Primitive::Sum { axis, keepdim }, &[x])
    }
    pub fn mean(&self, x: &Var<T>, axis: usize, keepdim: bool) -> Result<Var<T>> {
        self.apply(&Primitive::Mean { axis, keepdim }, &[x])
    }
    pub fn sum_all(&self, x: &Var<T>) -> Result<Var<T>> {
        self.apply(&Primitive::SumAll, &[x])
    }
    pub fn mean_all(&self, x: &Var<T>) -> Result<Var<T>> {
        self.apply(&Primitive::MeanAll, &[x])
    }
    pub fn layer_norm(&self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Result<Var<T>> {
        self.apply(&Primitive::LayerNorm { eps }, &[x, gamma, beta])
    }
    pub fn dropout(&self, x: &Var<T>, p: f64, seed: u64, train: bool) -> Result<Var<T>> {
        self.apply(&Primitive::Dropout { p, seed, train }, &[x])
    }
    pub fn causal_conv1d(&self, x: &Var<T>, w: &Var<T>, dilation: usize) -> Result<Var<T>> {
        self.apply(&Primitive::CausalConv1d { dilation }, &[x, w])
    }
    pub fn depthwise_conv1d(&self, x: &Var<T>, w: &Var<T>, dilation: usize) -> Result<Var<T>> {
        self.apply(&Primitive::DepthwiseConv1d { dilation }, &[x, w])
    }

    /// `x @ w + b` over the last axis.
    pub fn linear(&self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Result<Var<T>> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(&y, b),
            None => Ok(y),
        }
    }

    /// Scaled dot-product attention over the last two axes.
    pub fn attention(&self, q: &Var<T>, k: &Var<T>, v: &Var<T>, causal: bool) -> Result<Var<T>> {
        self.apply(&Primitive::Attention { causal }, &[q, k, v])
    }

    /// Fused LSTM; returns (h_1..h_T as [B,T,H], c_T as [B,H]).
    #[allow(clippy::too_many_arguments)]
    pub fn lstm(
        &self,
        x: &Var<T>,
        h0: &Var<T>,
        c0: &Var<T>,
        w_ih: &Var<T>,
        w_hh: &Var<T>,
        bias: &Var<T>,
    ) -> Result<(Var<T>, Var<T>)> {
        let packed = self.apply(&Primitive::Lstm, &[x, h0, c0, w_ih, w_hh, bias])?;
        let t = x.dim(1);
        let hs = self.slice(&packed, 1, 0, t)?;
        let c = self.select(&packed, 1, t)?;
        Ok((hs, c))
    }

    /// Fused GRU; returns h_1..h_T as [B,T,H].
    #[allow(clippy::too_many_arguments)]
    pub fn gru(
        &self,
        x: &Var<T>,
        h0: &Var<T>,
        w_ih: &Var<T>,
        w_hh: &Var<T>,
        b_ih: &Var<T>,
        b_hh: &Var<T>,
    ) -> Result<Var<T>> {
        self.apply(&Primitive::Gru, &[x, h0, w_ih, w_hh, b_ih, b_hh])
    }
}
