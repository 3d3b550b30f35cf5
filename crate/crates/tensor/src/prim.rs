//! The primitive set: forward evaluation and reverse-mode rules.

use std::cell::Cell;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smallvec::SmallVec;

use crate::element::{cast, Element};
use crate::error::{Result, TensorError};
use crate::kernels::{self, around, broadcast_strides};
use crate::rnn::{self, LstmDims};
use crate::tensor::{broadcast_shapes, numel, Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Sqrt,
    Abs,
    Square,
    Relu,
    Gelu,
    Sigmoid,
    Tanh,
    Scale(f64),
    AddScalar(f64),
    /// a [.., m, k] x b [.., k, n] or b [k, n].
    MatMul,
    Permute(Vec<usize>),
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Reshape(Vec<usize>),
    Gather { axis: usize, indices: Arc<Vec<usize>> },
    /// Zero padding along one axis.
    Pad { axis: usize, before: usize, after: usize },
    Softmax { axis: usize },
    Sum { axis: usize, keepdim: bool },
    Mean { axis: usize, keepdim: bool },
    SumAll,
    MeanAll,
    /// x, gamma, beta; normalizes the last axis.
    LayerNorm { eps: f64 },
    Dropout { p: f64, seed: u64, train: bool },
    /// x [B,L,Ci], w [K,Ci,Co].
    CausalConv1d { dilation: usize },
    /// x [B,L,C], w [K,C].
    DepthwiseConv1d { dilation: usize },
    /// Scaled dot-product attention; q [.., Tq, d], k [.., Tk, d], v [.., Tk, dv].
    /// Causal masks key j > query i.
    Attention { causal: bool },
    /// x, h0, c0, w_ih, w_hh, bias.
    Lstm,
    /// x, h0, w_ih, w_hh, b_ih, b_hh.
    Gru,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        use Primitive::*;
        match self {
            Leaf => "leaf",
            Add => "add",
            Sub => "sub",
            Mul => "mul",
            Div => "div",
            Neg => "neg",
            Exp => "exp",
            Log => "log",
            Sqrt => "sqrt",
            Abs => "abs",
            Square => "square",
            Relu => "relu",
            Gelu => "gelu",
            Sigmoid => "sigmoid",
            Tanh => "tanh",
            Scale(_) => "scale",
            AddScalar(_) => "add_scalar",
            MatMul => "matmul",
            Permute(_) => "permute",
            Concat { .. } => "concat",
            Slice { .. } => "slice",
            Reshape(_) => "reshape",
            Gather { .. } => "gather",
            Pad { .. } => "pad",
            Softmax { .. } => "softmax",
            Sum { .. } => "sum",
            Mean { .. } => "mean",
            SumAll => "sum_all",
            MeanAll => "mean_all",
            LayerNorm { .. } => "layer_norm",
            Dropout { .. } => "dropout",
            CausalConv1d { .. } => "causal_conv1d",
            DepthwiseConv1d { .. } => "depthwise_conv1d",
            Attention { .. } => "attention",
            Lstm => "lstm",
            Gru => "gru",
        }
    }

    fn arity(&self) -> Option<usize> {
        use Primitive::*;
        Some(match self {
            Leaf => 0,
            Add | Sub | Mul | Div | MatMul | CausalConv1d { .. } | DepthwiseConv1d { .. } => 2,
            LayerNorm { .. } | Attention { .. } => 3,
            Lstm | Gru => 6,
            Concat { .. } => return None,
            _ => 1,
        })
    }
}

thread_local! {
    static SIGN_FAULT: Cell<Option<&'static str>> = const { Cell::new(None) };
}

/// Mutation-test fixture: while the guard lives, the backward rule of the
/// named primitive returns negated gradients on this thread.
pub struct SignFaultGuard {
    prev: Option<&'static str>,
}

pub fn inject_backward_sign_fault(primitive: &'static str) -> SignFaultGuard {
    let prev = SIGN_FAULT.with(|f| f.replace(Some(primitive)));
    SignFaultGuard { prev }
}

impl Drop for SignFaultGuard {
    fn drop(&mut self) {
        SIGN_FAULT.with(|f| f.set(self.prev));
    }
}

fn err(p: &Primitive, detail: impl Into<String>) -> TensorError {
    TensorError::shape(p.name(), detail)
}

fn check_axis(p: &Primitive, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(err(p, format!("axis {} out of range for shape {:?}", axis, shape)));
    }
    Ok(())
}

fn dropped(shape: &[usize], axis: usize, keepdim: bool) -> Shape {
    let mut s: Shape = shape.into();
    if keepdim {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

pub(crate) type Aux<T> = Vec<Tensor<T>>;

/// (batch, Tq, Tk, d, dv) of an attention call.
fn attention_dims(p: &Primitive, q: &[usize], k: &[usize], v: &[usize]) -> Result<(usize, usize, usize, usize, usize)> {
    let r = q.len();
    if r < 2 || k.len() != r || v.len() != r {
        return Err(err(p, "q, k, v must share rank >= 2"));
    }
    if q[..r - 2] != k[..r - 2] || k[..r - 1] != v[..r - 1] || q[r - 1] != k[r - 1] {
        return Err(err(p, format!("incompatible q {q:?}, k {k:?}, v {v:?}")));
    }
    let batch = q[..r - 2].iter().product();
    Ok((batch, q[r - 2], k[r - 2], q[r - 1], v[r - 1]))
}

fn vec_tensor<T: Element>(v: Vec<T>) -> Tensor<T> {
    let n = v.len();
    Tensor::from_parts(SmallVec::from_slice(&[n]), v)
}

/// Evaluates a primitive.
pub(crate) fn forward<T: Element>(p: &Primitive, xs: &[&Tensor<T>]) -> Result<(Tensor<T>, Aux<T>)> {
    use Primitive::*;
    if let Some(n) = p.arity() {
        if xs.len() != n {
            return Err(err(p, format!("expected {} operands, got {}", n, xs.len())));
        }
    }
    let unary = |f: &dyn Fn(T) -> T| -> Result<(Tensor<T>, Aux<T>)> { Ok((xs[0].map(f), vec![])) };
    match p {
        Leaf => Err(TensorError::contract("leaf is not an operation")),
        Add | Sub | Mul | Div => {
            let (a, b) = (xs[0], xs[1]);
            let out = broadcast_shapes(a.shape(), b.shape()).ok_or_else(|| {
                err(p, format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()))
            })?;
            let same = a.shape() == b.shape();
            let (sa, sb) = (broadcast_strides(a.shape(), &out), broadcast_strides(b.shape(), &out));
            let v = match p {
                Add => kernels::binary(a.data(), &sa, b.data(), &sb, &out, same, |x, y| x + y),
                Sub => kernels::binary(a.data(), &sa, b.data(), &sb, &out, same, |x, y| x - y),
                Mul => kernels::binary(a.data(), &sa, b.data(), &sb, &out, same, |x, y| x * y),
                _ => kernels::binary(a.data(), &sa, b.data(), &sb, &out, same, |x, y| x / y),
            };
            Ok((Tensor::from_parts(out, v), vec![]))
        }
        Neg => unary(&|x| -x),
        Exp => unary(&|x| x.exp()),
        Log => unary(&|x| x.ln()),
        Sqrt => unary(&|x| x.sqrt()),
        Abs => unary(&|x| x.abs()),
        Square => unary(&|x| x * x),
        Relu => unary(&|x| if x > T::zero() { x } else { T::zero() }),
        Gelu => unary(&kernels::gelu),
        Sigmoid => unary(&kernels::sigmoid),
        Tanh => unary(&|x| x.tanh()),
        Scale(c) => {
            let c: T = cast(*c);
            unary(&|x| x * c)
        }
        AddScalar(c) => {
            let c: T = cast(*c);
            unary(&|x| x + c)
        }
        MatMul => {
            let (a, b) = (xs[0], xs[1]);
            let (m, k, n, batch, shared) = matmul_dims(p, a.shape(), b.shape())?;
            let mut out: Shape = a.shape().into();
            *out.last_mut().unwrap() = n;
            let v = kernels::matmul(a.data(), b.data(), batch, m, k, n, shared);
            Ok((Tensor::from_parts(out, v), vec![]))
        }
        Permute(perm) => {
            let x = xs[0];
            let mut seen = vec![false; x.rank()];
            if perm.len() != x.rank() || perm.iter().any(|&a| a >= x.rank() || std::mem::replace(&mut seen[a], true)) {
                return Err(err(p, format!("{:?} is not a permutation of the axes of {:?}", perm, x.shape())));
            }
            let (s, v) = kernels::permute(x.data(), x.shape(), perm);
            Ok((Tensor::from_parts(s, v), vec![]))
        }
        Concat { axis } => {
            let axis = *axis;
            if xs.is_empty() {
                return Err(err(p, "no operands"));
            }
            let first = xs[0].shape();
            check_axis(p, first, axis)?;
            let mut total = 0;
            for (i, x) in xs.iter().enumerate() {
                let s = x.shape();
                if s.len() != first.len() || (0..s.len()).any(|a| a != axis && s[a] != first[a]) {
                    return Err(err(p, format!("operand {} shape {:?} incompatible with {:?} off axis {}", i, s, first, axis)));
                }
                total += s[axis];
            }
            let mut out: Shape = first.into();
            out[axis] = total;
            let (outer, _, inner) = around(first, axis);
            let mut v = Vec::with_capacity(numel(&out));
            for o in 0..outer {
                for x in xs {
                    let chunk = x.dim(axis) * inner;
                    v.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Ok((Tensor::from_parts(out, v), vec![]))
        }
        Slice { axis, start, end } => {
            let x = xs[0];
            check_axis(p, x.shape(), *axis)?;
            if start > end || *end > x.dim(*axis) {
                return Err(err(p, format!("range {}..{} invalid on axis {} of {:?}", start, end, axis, x.shape())));
            }
            let (outer, d, inner) = around(x.shape(), *axis);
            let mut out: Shape = x.shape().into();
            out[*axis] = end - start;
            let mut v = Vec::with_capacity(numel(&out));
            for o in 0..outer {
                v.extend_from_slice(&x.data()[(o * d + start) * inner..(o * d + end) * inner]);
            }
            Ok((Tensor::from_parts(out, v), vec![]))
        }
        Reshape(shape) => {
            let x = xs[0];
            if numel(shape) != x.numel() {
                return Err(err(p, format!("cannot reshape {:?} into {:?}", x.shape(), shape)));
            }
            Ok((x.reshaped(shape)?, vec![]))
        }
        Gather { axis, indices } => {
            let x = xs[0];
            check_axis(p, x.shape(), *axis)?;
            let (outer, d, inner) = around(x.shape(), *axis);
            if let Some(&bad) = indices.iter().find(|&&i| i >= d) {
                return Err(err(p, format!("index {} out of range for axis {} of extent {}", bad, axis, d)));
            }
            let mut out: Shape = x.shape().into();
            out[*axis] = indices.len();
            let mut v = Vec::with_capacity(numel(&out));
            for o in 0..outer {
                for &i in indices.iter() {
                    v.extend_from_slice(&x.data()[(o * d + i) * inner..(o * d + i + 1) * inner]);
                }
            }
            Ok((Tensor::from_parts(out, v), vec![]))
        }
        Pad { axis, before, after } => {
            let x = xs[0];
            check_axis(p, x.shape(), *axis)?;
            let (outer, d, inner) = around(x.shape(), *axis);
            let mut out: Shape = x.shape().into();
            out[*axis] = d + before + after;
            let mut v = Vec::with_capacity(numel(&out));
            for o in 0..outer {
                v.extend(std::iter::repeat_n(T::zero(), before * inner));
                v.extend_from_slice(&x.data()[o * d * inner..(o + 1) * d * inner]);
                v.extend(std::iter::repeat_n(T::zero(), after * inner));
            }
            Ok((Tensor::from_parts(out, v), vec![]))
        }
        Softmax { axis } => {
            let x = xs[0];
            check_axis(p, x.shape(), *axis)?;
            let v = kernels::softmax(x.data(), x.shape(), *axis);
            Ok((Tensor::from_parts(x.shape().into(), v), vec![]))
        }
        Sum { axis, keepdim } | Mean { axis, keepdim } => {
            let x = xs[0];
            check_axis(p, x.shape(), *axis)?;
            let mut v = kernels::sum_axis(x.data(), x.shape(), *axis);
            if matches!(p, Mean { .. }) {
                let inv: T = cast(1.0 / x.dim(*axis) as f64);
                v.iter_mut().for_each(|e| *e = *e * inv);
            }
            Ok((Tensor::from_parts(dropped(x.shape(), *axis, *keepdim), v), vec![]))
        }
        SumAll => Ok((Tensor::scalar(xs[0].sum_all()), vec![])),
        MeanAll => {
            let x = xs[0];
            if x.numel() == 0 {
                return Err(err(p, "mean of empty tensor"));
            }
            Ok((Tensor::scalar(x.sum_all() / cast(x.numel() as f64)), vec![]))
        }
        LayerNorm { eps } => {
            let (x, g, b) = (xs[0], xs[1], xs[2]);
            let d = *x.shape().last().ok_or_else(|| err(p, "rank-0 input"))?;
            if g.shape() != [d] || b.shape() != [d] {
                return Err(err(p, format!("affine params {:?}/{:?} must be [{}]", g.shape(), b.shape(), d)));
            }
            let rows = x.numel() / d.max(1);
            let eps: T = cast(*eps);
            let inv_d: T = cast(1.0 / d as f64);
            let mut out = vec![T::zero(); x.numel()];
            let mut mean = vec![T::zero(); rows];
            let mut rstd = vec![T::zero(); rows];
            for r in 0..rows {
                let row = &x.data()[r * d..(r + 1) * d];
                let mu = row.iter().copied().sum::<T>() * inv_d;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
                let rs = T::one() / (var + eps).sqrt();
                mean[r] = mu;
                rstd[r] = rs;
                for j in 0..d {
                    out[r * d + j] = (row[j] - mu) * rs * g.data()[j] + b.data()[j];
                }
            }
            Ok((Tensor::from_parts(x.shape().into(), out), vec![vec_tensor(mean), vec_tensor(rstd)]))
        }
        Dropout { p: prob, seed, train } => {
            let x = xs[0];
            if !(0.0..1.0).contains(prob) {
                return Err(err(p, format!("drop probability {} outside [0, 1)", prob)));
            }
            if !*train || *prob == 0.0 {
                return Ok((x.clone(), vec![]));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let keep: T = cast(1.0 / (1.0 - prob));
            let mask: Vec<T> =
                (0..x.numel()).map(|_| if rng.random::<f64>() < *prob { T::zero() } else { keep }).collect();
            let v = x.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
            Ok((Tensor::from_parts(x.shape().into(), v), vec![vec_tensor(mask)]))
        }
        CausalConv1d { dilation } => {
            let (x, w) = (xs[0], xs[1]);
            let (b, l, ci, kk, co) = conv_dims(p, x.shape(), w.shape(), *dilation)?;
            let v = kernels::causal_conv(x.data(), w.data(), b, l, ci, co, kk, *dilation);
            Ok((Tensor::from_parts(SmallVec::from_slice(&[b, l, co]), v), vec![]))
        }
        DepthwiseConv1d { dilation } => {
            let (x, w) = (xs[0], xs[1]);
            if x.rank() != 3 || w.rank() != 2 || w.dim(1) != x.dim(2) || *dilation == 0 {
                return Err(err(p, format!("x {:?} / w {:?} must be [B,L,C] / [K,C], dilation {}", x.shape(), w.shape(), dilation)));
            }
            let (b, l, c) = (x.dim(0), x.dim(1), x.dim(2));
            let v = kernels::depthwise_conv(x.data(), w.data(), b, l, c, w.dim(0), *dilation);
            Ok((Tensor::from_parts(x.shape().into(), v), vec![]))
        }
        Attention { causal } => {
            let (q, k, v) = (xs[0], xs[1], xs[2]);
            let dims = attention_dims(p, q.shape(), k.shape(), v.shape())?;
            let (batch, tq, tk, d, dv) = dims;
            let scale: T = cast(1.0 / (d as f64).sqrt());
            let mut probs = vec![T::zero(); batch * tq * tk];
            let mut out = vec![T::zero(); batch * tq * dv];
            for bi in 0..batch {
                let pr = &mut probs[bi * tq * tk..(bi + 1) * tq * tk];
                T::gemm(tq, d, tk, &q.data()[bi * tq * d..], false, &k.data()[bi * tk * d..], true, pr, false);
                for i in 0..tq {
                    let row = &mut pr[i * tk..(i + 1) * tk];
                    let live = if *causal { (i + 1).min(tk) } else { tk };
                    let m = row[..live].iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                    let mut sum = T::zero();
                    for e in &mut row[..live] {
                        *e = ((*e - m) * scale).exp();
                        sum += *e;
                    }
                    for e in &mut row[..live] {
                        *e = *e / sum;
                    }
                    row[live..].iter_mut().for_each(|e| *e = T::zero());
                }
                T::gemm(tq, tk, dv, pr, false, &v.data()[bi * tk * dv..], false, &mut out[bi * tq * dv..(bi + 1) * tq * dv], false);
            }
            let mut shape: Shape = q.shape().into();
            *shape.last_mut().unwrap() = dv;
            Ok((Tensor::from_parts(shape, out), vec![vec_tensor(probs)]))
        }
        Lstm => {
            let d = lstm_dims(p, xs, 4)?;
            if xs[2].shape() != [d.b, d.h] || xs[5].shape() != [4 * d.h] {
                return Err(err(p, format!("c0 {:?} / bias {:?} mismatch hidden size {}", xs[2].shape(), xs[5].shape(), d.h)));
            }
            let (out, cache) =
                rnn::lstm_forward(&d, xs[0].data(), xs[1].data(), xs[2].data(), xs[3].data(), xs[4].data(), xs[5].data());
            let aux = vec![vec_tensor(cache.gates), vec_tensor(cache.c), vec_tensor(cache.h)];
            Ok((Tensor::from_parts(SmallVec::from_slice(&[d.b, d.t + 1, d.h]), out), aux))
        }
        Gru => {
            let d = lstm_dims(p, xs, 3)?;
            if xs[4].shape() != [3 * d.h] || xs[5].shape() != [3 * d.h] {
                return Err(err(p, format!("biases {:?}/{:?} must be [{}]", xs[4].shape(), xs[5].shape(), 3 * d.h)));
            }
            let (out, cache) =
                rnn::gru_forward(&d, xs[0].data(), xs[1].data(), xs[2].data(), xs[3].data(), xs[4].data(), xs[5].data());
            let aux = vec![vec_tensor(cache.gates), vec_tensor(cache.hn), vec_tensor(cache.h)];
            Ok((Tensor::from_parts(SmallVec::from_slice(&[d.b, d.t, d.h]), out), aux))
        }
    }
}

/// (m, k, n, batch, b_shared)
fn matmul_dims(p: &Primitive, a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(err(p, format!("operands must be at least 2-D, got {:?} and {:?}", a, b)));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != kb {
        return Err(err(p, format!("contraction axes differ: {:?}[-1]={} vs {:?}[-2]={}", a, k, b, kb)));
    }
    let batch = numel(&a[..a.len() - 2]);
    if b.len() == 2 {
        return Ok((m, k, n, batch, true));
    }
    if a[..a.len() - 2] != b[..b.len() - 2] {
        return Err(err(p, format!("batch axes differ: {:?} vs {:?}", a, b)));
    }
    Ok((m, k, n, batch, false))
}

fn conv_dims(p: &Primitive, x: &[usize], w: &[usize], dil: usize) -> Result<(usize, usize, usize, usize, usize)> {
    if x.len() != 3 || w.len() != 3 || w[1] != x[2] || dil == 0 {
        return Err(err(p, format!("x {:?} / w {:?} must be [B,L,Ci] / [K,Ci,Co], dilation {}", x, w, dil)));
    }
    Ok((x[0], x[1], x[2], w[0], w[2]))
}

fn lstm_dims<T: Element>(p: &Primitive, xs: &[&Tensor<T>], gates: usize) -> Result<LstmDims> {
    let x = xs[0].shape();
    let h0 = xs[1].shape();
    if x.len() != 3 || h0.len() != 2 || h0[0] != x[0] {
        return Err(err(p, format!("x {:?} must be [B,T,I] and h0 {:?} [B,H]", x, h0)));
    }
    let h = h0[1];
    let wi = if gates == 4 { 3 } else { 2 };
    let (w_ih, w_hh) = (xs[wi].shape(), xs[wi + 1].shape());
    if w_ih != [x[2], gates * h] || w_hh != [h, gates * h] {
        return Err(err(p, format!("weights {:?}/{:?} mismatch input {} hidden {}", w_ih, w_hh, x[2], h)));
    }
    Ok(LstmDims { b: x[0], t: x[1], i: x[2], h })
}

/// Gradients for each operand flagged in `need`, given output gradient `g`.
pub(crate) fn backward<T: Element>(
    p: &Primitive,
    xs: &[Tensor<T>],
    out: &Tensor<T>,
    aux: &[Tensor<T>],
    g: &[T],
    need: &[bool],
) -> Vec<Option<Vec<T>>> {
    let mut grads = backward_rule(p, xs, out, aux, g, need);
    if SIGN_FAULT.with(|f| f.get()) == Some(p.name()) {
        for v in grads.iter_mut().flatten() {
            v.iter_mut().for_each(|e| *e = -*e);
        }
    }
    grads
}

fn backward_rule<T: Element>(
    p: &Primitive,
    xs: &[Tensor<T>],
    out: &Tensor<T>,
    aux: &[Tensor<T>],
    g: &[T],
    need: &[bool],
) -> Vec<Option<Vec<T>>> {
    use Primitive::*;
    let one = T::one();
    let zero = T::zero();
    let ew = |f: &dyn Fn(usize) -> T| -> Vec<Option<Vec<T>>> { vec![Some((0..g.len()).map(f).collect())] };
    let x0 = xs.first().map(|x| x.data()).unwrap_or(&[]);
    let y = out.data();
    match p {
        Leaf => vec![],
        Attention { .. } => {
            let (q, k, v) = (xs[0].data(), xs[1].data(), xs[2].data());
            let (batch, tq, tk, d, dv) = attention_dims(p, xs[0].shape(), xs[1].shape(), xs[2].shape()).expect("validated in forward");
            let scale: T = cast(1.0 / (d as f64).sqrt());
            let probs = aux[0].data();
            let (mut gq, mut gk, mut gv) = (vec![zero; q.len()], vec![zero; k.len()], vec![zero; v.len()]);
            let mut ds = vec![zero; tq * tk];
            for bi in 0..batch {
                let pr = &probs[bi * tq * tk..(bi + 1) * tq * tk];
                let go = &g[bi * tq * dv..(bi + 1) * tq * dv];
                if need[2] {
                    T::gemm(tk, tq, dv, pr, true, go, false, &mut gv[bi * tk * dv..(bi + 1) * tk * dv], false);
                }
                if !(need[0] || need[1]) {
                    continue;
                }
                T::gemm(tq, dv, tk, go, false, &v[bi * tk * dv..], true, &mut ds, false);
                for i in 0..tq {
                    let (pr, dr) = (&pr[i * tk..(i + 1) * tk], &mut ds[i * tk..(i + 1) * tk]);
                    let dot = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum::<T>();
                    for (dj, &pj) in dr.iter_mut().zip(pr) {
                        *dj = pj * (*dj - dot) * scale;
                    }
                }
                if need[0] {
                    T::gemm(tq, tk, d, &ds, false, &k[bi * tk * d..], false, &mut gq[bi * tq * d..(bi + 1) * tq * d], false);
                }
                if need[1] {
                    T::gemm(tk, tq, d, &ds, true, &q[bi * tq * d..], false, &mut gk[bi * tk * d..(bi + 1) * tk * d], false);
                }
            }
            vec![need[0].then_some(gq), need[1].then_some(gk), need[2].then_some(gv)]
        }
        Add | Sub | Mul | Div => {
            let (a, b) = (&xs[0], &xs[1]);
            let os = out.shape();
            let same = a.shape() == b.shape();
            let ga = need[0].then(|| match p {
                Add | Sub => kernels::reduce_to(g, os, a.shape()),
                _ => {
                    let sb = broadcast_strides(b.shape(), os);
                    let zs: Shape = Shape::from_elem(0, os.len());
                    let mut full = vec![zero; g.len()];
                    if same {
                        for i in 0..g.len() {
                            full[i] = if matches!(p, Mul) { g[i] * b.data()[i] } else { g[i] / b.data()[i] };
                        }
                    } else {
                        kernels::walk2(os, &sb, &zs, |o, ib, _| {
                            full[o] = if matches!(p, Mul) { g[o] * b.data()[ib] } else { g[o] / b.data()[ib] };
                        });
                    }
                    kernels::reduce_to(&full, os, a.shape())
                }
            });
            let gb = need[1].then(|| match p {
                Add => kernels::reduce_to(g, os, b.shape()),
                Sub => kernels::reduce_to(&g.iter().map(|&v| -v).collect::<Vec<_>>(), os, b.shape()),
                _ => {
                    let sa = broadcast_strides(a.shape(), os);
                    let sb = broadcast_strides(b.shape(), os);
                    let mut full = vec![zero; g.len()];
                    kernels::walk2(os, &sa, &sb, |o, ia, ib| {
                        full[o] = if matches!(p, Mul) {
                            g[o] * a.data()[ia]
                        } else {
                            -g[o] * y[o] / b.data()[ib]
                        };
                    });
                    kernels::reduce_to(&full, os, b.shape())
                }
            });
            vec![ga, gb]
        }
        Neg => ew(&|i| -g[i]),
        Exp => ew(&|i| g[i] * y[i]),
        Log => ew(&|i| g[i] / x0[i]),
        Sqrt => ew(&|i| g[i] / (y[i] + y[i])),
        Abs => ew(&|i| {
            if x0[i] > zero {
                g[i]
            } else if x0[i] < zero {
                -g[i]
            } else {
                zero
            }
        }),
        Square => ew(&|i| g[i] * (x0[i] + x0[i])),
        Relu => ew(&|i| if x0[i] > zero { g[i] } else { zero }),
        Gelu => ew(&|i| g[i] * kernels::gelu_grad(x0[i])),
        Sigmoid => ew(&|i| g[i] * y[i] * (one - y[i])),
        Tanh => ew(&|i| g[i] * (one - y[i] * y[i])),
        Scale(c) => {
            let c: T = cast(*c);
            ew(&|i| g[i] * c)
        }
        AddScalar(_) | Reshape(_) => vec![Some(g.to_vec())],
        MatMul => {
            let (a, b) = (&xs[0], &xs[1]);
            let (m, k, n, batch, shared) = matmul_dims(p, a.shape(), b.shape()).expect("validated in forward");
            let ga = need[0].then(|| {
                let mut ga = vec![zero; a.numel()];
                for bi in 0..batch {
                    let bo = if shared { 0 } else { bi * k * n };
                    T::gemm(
                        m,
                        n,
                        k,
                        &g[bi * m * n..(bi + 1) * m * n],
                        false,
                        &b.data()[bo..bo + k * n],
                        true,
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                        false,
                    );
                }
                ga
            });
            let gb = need[1].then(|| {
                let mut gb = vec![zero; b.numel()];
                if shared {
                    T::gemm(k, batch * m, n, a.data(), true, g, false, &mut gb, false);
                } else {
                    for bi in 0..batch {
                        T::gemm(
                            k,
                            m,
                            n,
                            &a.data()[bi * m * k..(bi + 1) * m * k],
                            true,
                            &g[bi * m * n..(bi + 1) * m * n],
                            false,
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            false,
                        );
                    }
                }
                gb
            });
            vec![ga, gb]
        }
        Permute(perm) => {
            let inv = kernels::inverse_perm(perm);
            vec![Some(kernels::permute(g, out.shape(), &inv).1)]
        }
        Concat { axis } => {
            let (outer, _, inner) = around(out.shape(), *axis);
            let total = out.dim(*axis) * inner;
            let mut offset = 0;
            xs.iter()
                .zip(need)
                .map(|(x, &nd)| {
                    let chunk = x.dim(*axis) * inner;
                    let r = nd.then(|| {
                        let mut v = Vec::with_capacity(x.numel());
                        for o in 0..outer {
                            v.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                        }
                        v
                    });
                    offset += chunk;
                    r
                })
                .collect()
        }
        Slice { axis, start, end } => {
            let (outer, d, inner) = around(xs[0].shape(), *axis);
            let w = end - start;
            let mut v = vec![zero; xs[0].numel()];
            for o in 0..outer {
                v[(o * d + start) * inner..(o * d + end) * inner].copy_from_slice(&g[o * w * inner..(o + 1) * w * inner]);
            }
            vec![Some(v)]
        }
        Gather { axis, indices } => {
            let (outer, d, inner) = around(xs[0].shape(), *axis);
            let w = indices.len();
            let mut v = vec![zero; xs[0].numel()];
            for o in 0..outer {
                for (j, &i) in indices.iter().enumerate() {
                    let src = &g[(o * w + j) * inner..(o * w + j + 1) * inner];
                    for (acc, &s) in v[(o * d + i) * inner..(o * d + i + 1) * inner].iter_mut().zip(src) {
                        *acc += s;
                    }
                }
            }
            vec![Some(v)]
        }
        Pad { axis, before, after } => {
            let (outer, d, inner) = around(xs[0].shape(), *axis);
            let w = d + before + after;
            let mut v = Vec::with_capacity(xs[0].numel());
            for o in 0..outer {
                v.extend_from_slice(&g[(o * w + before) * inner..(o * w + before + d) * inner]);
            }
            vec![Some(v)]
        }
        Softmax { axis } => vec![Some(kernels::softmax_backward(y, g, out.shape(), *axis))],
        Sum { axis, .. } => vec![Some(kernels::expand_axis(g, xs[0].shape(), *axis, one))],
        Mean { axis, .. } => {
            let s: T = cast(1.0 / xs[0].dim(*axis) as f64);
            vec![Some(kernels::expand_axis(g, xs[0].shape(), *axis, s))]
        }
        SumAll => vec![Some(vec![g[0]; xs[0].numel()])],
        MeanAll => vec![Some(vec![g[0] / cast(xs[0].numel() as f64); xs[0].numel()])],
        LayerNorm { .. } => {
            let (x, gamma) = (&xs[0], xs[1].data());
            let d = gamma.len();
            let rows = x.numel() / d.max(1);
            let (mean, rstd) = (aux[0].data(), aux[1].data());
            let inv_d: T = cast(1.0 / d as f64);
            let mut gx = vec![zero; x.numel()];
            let mut gg = vec![zero; d];
            let mut gb = vec![zero; d];
            let mut xhat = vec![zero; d];
            let mut dy = vec![zero; d];
            for r in 0..rows {
                let (mu, rs) = (mean[r], rstd[r]);
                let (mut s1, mut s2) = (zero, zero);
                for j in 0..d {
                    let o = r * d + j;
                    xhat[j] = (x.data()[o] - mu) * rs;
                    dy[j] = g[o] * gamma[j];
                    gg[j] += g[o] * xhat[j];
                    gb[j] += g[o];
                    s1 += dy[j];
                    s2 += dy[j] * xhat[j];
                }
                for j in 0..d {
                    gx[r * d + j] = rs * (dy[j] - s1 * inv_d - xhat[j] * s2 * inv_d);
                }
            }
            vec![need[0].then_some(gx), need[1].then_some(gg), need[2].then_some(gb)]
        }
        Dropout { .. } => match aux.first() {
            Some(mask) => ew(&|i| g[i] * mask.data()[i]),
            None => vec![Some(g.to_vec())],
        },
        CausalConv1d { dilation } => {
            let (x, w) = (&xs[0], &xs[1]);
            let (b, l, ci, kk, co) = conv_dims(p, x.shape(), w.shape(), *dilation).expect("validated in forward");
            let (gx, gw) =
                kernels::causal_conv_backward(x.data(), w.data(), g, b, l, ci, co, kk, *dilation, need[0], need[1]);
            vec![gx, gw]
        }
        DepthwiseConv1d { dilation } => {
            let (x, w) = (&xs[0], &xs[1]);
            let (gx, gw) = kernels::depthwise_conv_backward(
                x.data(),
                w.data(),
                g,
                x.dim(0),
                x.dim(1),
                x.dim(2),
                w.dim(0),
                *dilation,
            );
            vec![Some(gx), Some(gw)]
        }
        Lstm => {
            let refs: Vec<&Tensor<T>> = xs.iter().collect();
            let d = lstm_dims(p, &refs, 4).expect("validated in forward");
            let cache = rnn::LstmCache { gates: aux[0].data(), c: aux[1].data(), h: aux[2].data() };
            let r = rnn::lstm_backward(&d, xs[0].data(), xs[3].data(), xs[4].data(), &cache, g);
            vec![Some(r.x), Some(r.h0), Some(r.c0), Some(r.w_ih), Some(r.w_hh), Some(r.bias)]
        }
        Gru => {
            let refs: Vec<&Tensor<T>> = xs.iter().collect();
            let d = lstm_dims(p, &refs, 3).expect("validated in forward");
            let cache = rnn::GruCache { gates: aux[0].data(), hn: aux[1].data(), h: aux[2].data() };
            let r = rnn::gru_backward(&d, xs[0].data(), xs[2].data(), xs[3].data(), &cache, g);
            vec![Some(r.x), Some(r.h0), Some(r.w_ih), Some(r.w_hh), Some(r.b_ih), Some(r.b_hh)]
        }
    }
}
