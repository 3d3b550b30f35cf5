//! Raw slice kernels shared by forward and backward rules.

use crate::element::{cast, Element};
use crate::tensor::{numel, strides, Shape};

/// Strides of `input` as seen from `out` under broadcasting (0 on broadcast axes).
pub fn broadcast_strides(input: &[usize], out: &[usize]) -> Shape {
    let st = strides(input);
    let off = out.len() - input.len();
    (0..out.len())
        .map(|ax| {
            if ax < off || input[ax - off] == 1 {
                0
            } else {
                st[ax - off]
            }
        })
        .collect()
}

/// Visits every output position with the matching offsets in two strided inputs.
pub fn walk2(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel(out);
    if n == 0 {
        return;
    }
    let r = out.len();
    if r == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[r - 1];
    let (ia, ib) = (sa[r - 1], sb[r - 1]);
    let mut idx = vec![0usize; r - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..n / inner {
        let base = o * inner;
        for t in 0..inner {
            f(base + t, oa + t * ia, ob + t * ib);
        }
        for ax in (0..r - 1).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

pub fn binary<T: Element>(
    a: &[T],
    sa: &[usize],
    b: &[T],
    sb: &[usize],
    out_shape: &[usize],
    same: bool,
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    if same {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let mut out = vec![T::zero(); numel(out_shape)];
    walk2(out_shape, sa, sb, |o, ia, ib| out[o] = f(a[ia], b[ib]));
    out
}

/// Sums a broadcast-shaped gradient back onto the operand's shape.
pub fn reduce_to<T: Element>(g: &[T], out_shape: &[usize], in_shape: &[usize]) -> Vec<T> {
    if out_shape == in_shape {
        return g.to_vec();
    }
    let s = broadcast_strides(in_shape, out_shape);
    let zero: Shape = Shape::from_elem(0, out_shape.len());
    let mut acc = vec![T::zero(); numel(in_shape)];
    walk2(out_shape, &s, &zero, |o, i, _| acc[i] += g[o]);
    acc
}

/// Splits `shape` around `axis` into (outer, extent, inner).
pub fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

pub fn softmax<T: Element>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, d, inner) = around(shape, axis);
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * d * inner + j * inner + i;
            let mut m = T::neg_infinity();
            for j in 0..d {
                m = m.max(x[at(j)]);
            }
            let mut s = T::zero();
            for j in 0..d {
                let e = (x[at(j)] - m).exp();
                y[at(j)] = e;
                s += e;
            }
            for j in 0..d {
                y[at(j)] = y[at(j)] / s;
            }
        }
    }
    y
}

pub fn softmax_backward<T: Element>(y: &[T], g: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, d, inner) = around(shape, axis);
    let mut gx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * d * inner + j * inner + i;
            let mut dot = T::zero();
            for j in 0..d {
                dot += g[at(j)] * y[at(j)];
            }
            for j in 0..d {
                gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
            }
        }
    }
    gx
}

pub fn sum_axis<T: Element>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, d, inner) = around(shape, axis);
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for j in 0..d {
            let row = &x[(o * d + j) * inner..(o * d + j + 1) * inner];
            for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
    out
}

pub fn expand_axis<T: Element>(g: &[T], shape: &[usize], axis: usize, scale: T) -> Vec<T> {
    let (outer, d, inner) = around(shape, axis);
    let mut out = vec![T::zero(); outer * d * inner];
    for o in 0..outer {
        for j in 0..d {
            for i in 0..inner {
                out[(o * d + j) * inner + i] = g[o * inner + i] * scale;
            }
        }
    }
    out
}

/// Gathers through a permutation of axes.
pub fn permute<T: Element>(x: &[T], shape: &[usize], perm: &[usize]) -> (Shape, Vec<T>) {
    let st = strides(shape);
    let out_shape: Shape = perm.iter().map(|&p| shape[p]).collect();
    let src: Shape = perm.iter().map(|&p| st[p]).collect();
    let zero: Shape = Shape::from_elem(0, perm.len());
    let mut out = vec![T::zero(); x.len()];
    walk2(&out_shape, &src, &zero, |o, i, _| out[o] = x[i]);
    (out_shape, out)
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Batched matmul: a [batch, m, k] times b [batch, k, n] (or a shared [k, n]).
pub fn matmul<T: Element>(a: &[T], b: &[T], batch: usize, m: usize, k: usize, n: usize, b_shared: bool) -> Vec<T> {
    let mut c = vec![T::zero(); batch * m * n];
    if b_shared {
        T::gemm(batch * m, k, n, a, false, b, false, &mut c, false);
    } else {
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                &a[i * m * k..(i + 1) * m * k],
                false,
                &b[i * k * n..(i + 1) * k * n],
                false,
                &mut c[i * m * n..(i + 1) * m * n],
                false,
            );
        }
    }
    c
}

pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu<T: Element>(x: T) -> T {
    let c: T = cast(GELU_C);
    let a: T = cast(GELU_A);
    let half: T = cast(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Element>(x: T) -> T {
    let c: T = cast(GELU_C);
    let a: T = cast(GELU_A);
    let half: T = cast(0.5);
    let three: T = cast(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

/// out[b, t] = sum_k x[b, t - (K-1-k)·dil] · w[k]; x [B,L,Ci], w [K,Ci,Co].
#[allow(clippy::too_many_arguments)]
pub fn causal_conv<T: Element>(x: &[T], w: &[T], b: usize, l: usize, ci: usize, co: usize, kk: usize, dil: usize) -> Vec<T> {
    let mut out = vec![T::zero(); b * l * co];
    for bi in 0..b {
        for k in 0..kk {
            let s = (kk - 1 - k) * dil;
            if s >= l {
                continue;
            }
            let rows = l - s;
            T::gemm(
                rows,
                ci,
                co,
                &x[bi * l * ci..(bi * l + rows) * ci],
                false,
                &w[k * ci * co..(k + 1) * ci * co],
                false,
                &mut out[(bi * l + s) * co..(bi + 1) * l * co],
                true,
            );
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn causal_conv_backward<T: Element>(
    x: &[T],
    w: &[T],
    g: &[T],
    b: usize,
    l: usize,
    ci: usize,
    co: usize,
    kk: usize,
    dil: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let mut gx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut gw = need_w.then(|| vec![T::zero(); w.len()]);
    for bi in 0..b {
        for k in 0..kk {
            let s = (kk - 1 - k) * dil;
            if s >= l {
                continue;
            }
            let rows = l - s;
            let gs = &g[(bi * l + s) * co..(bi + 1) * l * co];
            if let Some(gx) = gx.as_mut() {
                T::gemm(
                    rows,
                    co,
                    ci,
                    gs,
                    false,
                    &w[k * ci * co..(k + 1) * ci * co],
                    true,
                    &mut gx[bi * l * ci..(bi * l + rows) * ci],
                    true,
                );
            }
            if let Some(gw) = gw.as_mut() {
                T::gemm(
                    ci,
                    rows,
                    co,
                    &x[bi * l * ci..(bi * l + rows) * ci],
                    true,
                    gs,
                    false,
                    &mut gw[k * ci * co..(k + 1) * ci * co],
                    true,
                );
            }
        }
    }
    (gx, gw)
}

/// Depthwise causal conv; x [B,L,C], w [K,C].
pub fn depthwise_conv<T: Element>(x: &[T], w: &[T], b: usize, l: usize, c: usize, kk: usize, dil: usize) -> Vec<T> {
    let mut out = vec![T::zero(); b * l * c];
    for bi in 0..b {
        for t in 0..l {
            let o = &mut out[(bi * l + t) * c..(bi * l + t + 1) * c];
            for k in 0..kk {
                let s = (kk - 1 - k) * dil;
                if s > t {
                    continue;
                }
                let xr = &x[(bi * l + t - s) * c..(bi * l + t - s + 1) * c];
                let wr = &w[k * c..(k + 1) * c];
                for ((o, &xv), &wv) in o.iter_mut().zip(xr).zip(wr) {
                    *o += xv * wv;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn depthwise_conv_backward<T: Element>(
    x: &[T],
    w: &[T],
    g: &[T],
    b: usize,
    l: usize,
    c: usize,
    kk: usize,
    dil: usize,
) -> (Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); w.len()];
    for bi in 0..b {
        for t in 0..l {
            let gr = &g[(bi * l + t) * c..(bi * l + t + 1) * c];
            for k in 0..kk {
                let s = (kk - 1 - k) * dil;
                if s > t {
                    continue;
                }
                let xo = (bi * l + t - s) * c;
                for ch in 0..c {
                    gx[xo + ch] += gr[ch] * w[k * c + ch];
                    gw[k * c + ch] += gr[ch] * x[xo + ch];
                }
            }
        }
    }
    (gx, gw)
}
