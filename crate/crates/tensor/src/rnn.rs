//! Fused recurrent kernels with hand-written backpropagation through time.
//!
//! Gate layouts: LSTM `[i, f, g, o]`, GRU `[r, z, n]` (PyTorch convention).

use crate::element::Element;
use crate::kernels::sigmoid;

pub struct LstmDims {
    pub b: usize,
    pub t: usize,
    pub i: usize,
    pub h: usize,
}

pub struct LstmCache<V> {
    /// Post-activation gates, [B,T,4H].
    pub gates: V,
    /// c_0 .. c_T, [T+1,B,H].
    pub c: V,
    /// h_0 .. h_T, [T+1,B,H].
    pub h: V,
}

/// Returns the packed output [B,T+1,H] (h_1..h_T then c_T) and the cache.
pub fn lstm_forward<T: Element>(
    d: &LstmDims,
    x: &[T],
    h0: &[T],
    c0: &[T],
    w_ih: &[T],
    w_hh: &[T],
    bias: &[T],
) -> (Vec<T>, LstmCache<Vec<T>>) {
    let (b, t, hd) = (d.b, d.t, d.h);
    let g4 = 4 * hd;
    let mut xg = vec![T::zero(); b * t * g4];
    T::gemm(b * t, d.i, g4, x, false, w_ih, false, &mut xg, false);
    let mut gates = vec![T::zero(); b * t * g4];
    let mut c = vec![T::zero(); (t + 1) * b * hd];
    let mut h = vec![T::zero(); (t + 1) * b * hd];
    c[..b * hd].copy_from_slice(c0);
    h[..b * hd].copy_from_slice(h0);
    let mut hg = vec![T::zero(); b * g4];
    for s in 0..t {
        T::gemm(b, hd, g4, &h[s * b * hd..(s + 1) * b * hd], false, w_hh, false, &mut hg, false);
        for bi in 0..b {
            let pre = &xg[(bi * t + s) * g4..(bi * t + s + 1) * g4];
            let rec = &hg[bi * g4..(bi + 1) * g4];
            let gt = &mut gates[(bi * t + s) * g4..(bi * t + s + 1) * g4];
            for j in 0..g4 {
                let a = pre[j] + rec[j] + bias[j];
                gt[j] = if (2 * hd..3 * hd).contains(&j) { a.tanh() } else { sigmoid(a) };
            }
            for j in 0..hd {
                let (ig, fg, gg, og) = (gt[j], gt[hd + j], gt[2 * hd + j], gt[3 * hd + j]);
                let cp = c[s * b * hd + bi * hd + j];
                let cn = fg * cp + ig * gg;
                c[(s + 1) * b * hd + bi * hd + j] = cn;
                h[(s + 1) * b * hd + bi * hd + j] = og * cn.tanh();
            }
        }
    }
    let mut out = vec![T::zero(); b * (t + 1) * hd];
    for bi in 0..b {
        for s in 0..t {
            out[(bi * (t + 1) + s) * hd..(bi * (t + 1) + s + 1) * hd]
                .copy_from_slice(&h[(s + 1) * b * hd + bi * hd..(s + 1) * b * hd + (bi + 1) * hd]);
        }
        out[(bi * (t + 1) + t) * hd..(bi * (t + 1) + t + 1) * hd]
            .copy_from_slice(&c[t * b * hd + bi * hd..t * b * hd + (bi + 1) * hd]);
    }
    (out, LstmCache { gates, c, h })
}

pub struct LstmGrads<T> {
    pub x: Vec<T>,
    pub h0: Vec<T>,
    pub c0: Vec<T>,
    pub w_ih: Vec<T>,
    pub w_hh: Vec<T>,
    pub bias: Vec<T>,
}

pub fn lstm_backward<T: Element>(
    d: &LstmDims,
    x: &[T],
    w_ih: &[T],
    w_hh: &[T],
    cache: &LstmCache<&[T]>,
    g: &[T],
) -> LstmGrads<T> {
    let (b, t, hd) = (d.b, d.t, d.h);
    let g4 = 4 * hd;
    let one = T::one();
    let mut dgates = vec![T::zero(); b * t * g4];
    let mut dh = vec![T::zero(); b * hd];
    let mut dc = vec![T::zero(); b * hd];
    for bi in 0..b {
        dc[bi * hd..(bi + 1) * hd].copy_from_slice(&g[(bi * (t + 1) + t) * hd..(bi * (t + 1) + t + 1) * hd]);
    }
    let mut w_hh_g = vec![T::zero(); w_hh.len()];
    let mut dg_step = vec![T::zero(); b * g4];
    for s in (0..t).rev() {
        for bi in 0..b {
            let gt = &cache.gates[(bi * t + s) * g4..(bi * t + s + 1) * g4];
            for j in 0..hd {
                let k = bi * hd + j;
                let dht = dh[k] + g[(bi * (t + 1) + s) * hd + j];
                let (ig, fg, gg, og) = (gt[j], gt[hd + j], gt[2 * hd + j], gt[3 * hd + j]);
                let ct = cache.c[(s + 1) * b * hd + k];
                let cp = cache.c[s * b * hd + k];
                let tc = ct.tanh();
                let dct = dc[k] + dht * og * (one - tc * tc);
                let row = &mut dg_step[bi * g4..(bi + 1) * g4];
                row[j] = dct * gg * ig * (one - ig);
                row[hd + j] = dct * cp * fg * (one - fg);
                row[2 * hd + j] = dct * ig * (one - gg * gg);
                row[3 * hd + j] = dht * tc * og * (one - og);
                dc[k] = dct * fg;
            }
        }
        let hp = &cache.h[s * b * hd..(s + 1) * b * hd];
        T::gemm(hd, b, g4, hp, true, &dg_step, false, &mut w_hh_g, true);
        T::gemm(b, g4, hd, &dg_step, false, w_hh, true, &mut dh, false);
        for bi in 0..b {
            dgates[(bi * t + s) * g4..(bi * t + s + 1) * g4].copy_from_slice(&dg_step[bi * g4..(bi + 1) * g4]);
        }
    }
    let mut gx = vec![T::zero(); x.len()];
    T::gemm(b * t, g4, d.i, &dgates, false, w_ih, true, &mut gx, false);
    let mut gw = vec![T::zero(); w_ih.len()];
    T::gemm(d.i, b * t, g4, x, true, &dgates, false, &mut gw, false);
    let mut gb = vec![T::zero(); g4];
    for row in dgates.chunks(g4) {
        for (a, &v) in gb.iter_mut().zip(row) {
            *a += v;
        }
    }
    LstmGrads { x: gx, h0: dh, c0: dc, w_ih: gw, w_hh: w_hh_g, bias: gb }
}

pub struct GruCache<V> {
    /// r, z, n per step, [B,T,3H].
    pub gates: V,
    /// W_hn h + b_hn per step, [B,T,H].
    pub hn: V,
    /// h_0 .. h_T, [T+1,B,H].
    pub h: V,
}

/// Output [B,T,H].
#[allow(clippy::too_many_arguments)]
pub fn gru_forward<T: Element>(
    d: &LstmDims,
    x: &[T],
    h0: &[T],
    w_ih: &[T],
    w_hh: &[T],
    b_ih: &[T],
    b_hh: &[T],
) -> (Vec<T>, GruCache<Vec<T>>) {
    let (b, t, hd) = (d.b, d.t, d.h);
    let g3 = 3 * hd;
    let mut xg = vec![T::zero(); b * t * g3];
    T::gemm(b * t, d.i, g3, x, false, w_ih, false, &mut xg, false);
    let mut gates = vec![T::zero(); b * t * g3];
    let mut hn = vec![T::zero(); b * t * hd];
    let mut h = vec![T::zero(); (t + 1) * b * hd];
    h[..b * hd].copy_from_slice(h0);
    let mut hg = vec![T::zero(); b * g3];
    let one = T::one();
    for s in 0..t {
        T::gemm(b, hd, g3, &h[s * b * hd..(s + 1) * b * hd], false, w_hh, false, &mut hg, false);
        for bi in 0..b {
            let xr = &xg[(bi * t + s) * g3..(bi * t + s + 1) * g3];
            let hr = &hg[bi * g3..(bi + 1) * g3];
            let base = (bi * t + s) * g3;
            for j in 0..hd {
                let r = sigmoid(xr[j] + b_ih[j] + hr[j] + b_hh[j]);
                let z = sigmoid(xr[hd + j] + b_ih[hd + j] + hr[hd + j] + b_hh[hd + j]);
                let hnv = hr[2 * hd + j] + b_hh[2 * hd + j];
                let n = (xr[2 * hd + j] + b_ih[2 * hd + j] + r * hnv).tanh();
                gates[base + j] = r;
                gates[base + hd + j] = z;
                gates[base + 2 * hd + j] = n;
                hn[(bi * t + s) * hd + j] = hnv;
                let hp = h[s * b * hd + bi * hd + j];
                h[(s + 1) * b * hd + bi * hd + j] = (one - z) * n + z * hp;
            }
        }
    }
    let mut out = vec![T::zero(); b * t * hd];
    for bi in 0..b {
        for s in 0..t {
            out[(bi * t + s) * hd..(bi * t + s + 1) * hd]
                .copy_from_slice(&h[(s + 1) * b * hd + bi * hd..(s + 1) * b * hd + (bi + 1) * hd]);
        }
    }
    (out, GruCache { gates, hn, h })
}

pub struct GruGrads<T> {
    pub x: Vec<T>,
    pub h0: Vec<T>,
    pub w_ih: Vec<T>,
    pub w_hh: Vec<T>,
    pub b_ih: Vec<T>,
    pub b_hh: Vec<T>,
}

pub fn gru_backward<T: Element>(
    d: &LstmDims,
    x: &[T],
    w_ih: &[T],
    w_hh: &[T],
    cache: &GruCache<&[T]>,
    g: &[T],
) -> GruGrads<T> {
    let (b, t, hd) = (d.b, d.t, d.h);
    let g3 = 3 * hd;
    let one = T::one();
    let mut dxg = vec![T::zero(); b * t * g3];
    let mut dhg = vec![T::zero(); b * g3];
    let mut dh = vec![T::zero(); b * hd];
    let mut w_hh_g = vec![T::zero(); w_hh.len()];
    let mut b_hh_g = vec![T::zero(); g3];
    let mut dh_rec = vec![T::zero(); b * hd];
    for s in (0..t).rev() {
        let mut direct = vec![T::zero(); b * hd];
        for bi in 0..b {
            let base = (bi * t + s) * g3;
            for j in 0..hd {
                let k = bi * hd + j;
                let dht = dh[k] + g[(bi * t + s) * hd + j];
                let (r, z, n) = (cache.gates[base + j], cache.gates[base + hd + j], cache.gates[base + 2 * hd + j]);
                let hp = cache.h[s * b * hd + k];
                let hnv = cache.hn[(bi * t + s) * hd + j];
                let dn = dht * (one - z);
                let dz = dht * (hp - n);
                direct[k] = dht * z;
                let dan = dn * (one - n * n);
                let dar = dan * hnv * r * (one - r);
                let daz = dz * z * (one - z);
                dxg[base + j] = dar;
                dxg[base + hd + j] = daz;
                dxg[base + 2 * hd + j] = dan;
                dhg[bi * g3 + j] = dar;
                dhg[bi * g3 + hd + j] = daz;
                dhg[bi * g3 + 2 * hd + j] = dan * r;
            }
        }
        let hp = &cache.h[s * b * hd..(s + 1) * b * hd];
        T::gemm(hd, b, g3, hp, true, &dhg, false, &mut w_hh_g, true);
        for row in dhg.chunks(g3) {
            for (a, &v) in b_hh_g.iter_mut().zip(row) {
                *a += v;
            }
        }
        T::gemm(b, g3, hd, &dhg, false, w_hh, true, &mut dh_rec, false);
        for k in 0..b * hd {
            dh[k] = direct[k] + dh_rec[k];
        }
    }
    let mut gx = vec![T::zero(); x.len()];
    T::gemm(b * t, g3, d.i, &dxg, false, w_ih, true, &mut gx, false);
    let mut gw = vec![T::zero(); w_ih.len()];
    T::gemm(d.i, b * t, g3, x, true, &dxg, false, &mut gw, false);
    let mut gb = vec![T::zero(); g3];
    for row in dxg.chunks(g3) {
        for (a, &v) in gb.iter_mut().zip(row) {
            *a += v;
        }
    }
    GruGrads { x: gx, h0: dh, w_ih: gw, w_hh: w_hh_g, b_ih: gb, b_hh: b_hh_g }
}
