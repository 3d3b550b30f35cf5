use tsnas_tensor::{cast, Element, Tape, Tensor, Var};

use super::FlatOpKind;
use crate::error::{CoreError, Result};
use crate::nn::{Builder, Ctx, LayerNorm, Linear, Mixing};

pub const TREND_DEGREE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisKind {
    Generic,
    Trend,
    Seasonal,
}

/// [p, length] basis with t = i / length.
///
/// Trend rows are t^0..t^(p−1); seasonal rows are 1, cos 2πt, sin 2πt, cos 4πt, …
pub fn basis_matrix<T: Element>(kind: BasisKind, p: usize, length: usize) -> Result<Tensor<T>> {
    let t = |i: usize| i as f64 / length as f64;
    let rows: Vec<f64> = match kind {
        BasisKind::Generic => {
            if p != length {
                return Err(CoreError::config(format!("generic basis needs θ width {length}, got {p}")));
            }
            return Ok(Tensor::eye(length));
        }
        BasisKind::Trend => {
            if p == 0 {
                return Err(CoreError::config("trend basis needs at least one coefficient"));
            }
            (0..p).flat_map(|d| (0..length).map(move |i| t(i).powi(d as i32))).collect()
        }
        BasisKind::Seasonal => {
            if p % 2 == 0 {
                return Err(CoreError::config(format!("seasonal basis needs 1 + 2·harmonics coefficients, got {p}")));
            }
            (0..p)
                .flat_map(|r| {
                    (0..length).map(move |i| {
                        let m = r.div_ceil(2) as f64;
                        let a = 2.0 * std::f64::consts::PI * m * t(i);
                        match r {
                            0 => 1.0,
                            _ if r % 2 == 1 => a.cos(),
                            _ => a.sin(),
                        }
                    })
                })
                .collect()
        }
    };
    Ok(Tensor::new(&[p, length], rows.into_iter().map(cast::<T>).collect())?)
}

/// Expands coefficients θ [.., p] over a basis of `length` steps.
pub fn nbeats_basis<T: Element>(tape: &Tape<T>, kind: BasisKind, theta: &Var<T>, length: usize) -> Result<Var<T>> {
    let p = *theta.shape().last().ok_or_else(|| CoreError::config("θ must have a coefficient axis"))?;
    if kind == BasisKind::Generic {
        basis_matrix::<T>(kind, p, length)?;
        return Ok(theta.clone());
    }
    let basis = tape.constant(basis_matrix(kind, p, length)?);
    if theta.rank() == 1 {
        let th = tape.reshape(theta, &[1, p])?;
        return Ok(tape.reshape(&tape.matmul(&th, &basis)?, &[length])?);
    }
    Ok(tape.matmul(theta, &basis)?)
}

fn basis_width(kind: BasisKind, length: usize, harmonics: usize) -> usize {
    match kind {
        BasisKind::Generic => length,
        BasisKind::Trend => TREND_DEGREE + 1,
        BasisKind::Seasonal => 1 + 2 * harmonics,
    }
}

/// Backcast [B, N, L] and forecast [B, N, H] streams.
#[derive(Debug, Clone)]
pub struct Streams<T: Element> {
    pub b: Var<T>,
    pub f: Var<T>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub enum FlatOp {
    Linear { lin: Linear, ln: Option<LayerNorm> },
    NBeats { basis: BasisKind, theta_b: Linear, theta_f: Linear },
    Skip,
}

/// Geometry every Flat edge shares.
#[derive(Debug, Clone, Copy)]
pub struct FlatDims {
    pub lookback: usize,
    pub horizon: usize,
    pub width: usize,
    pub harmonics: usize,
}

/// One Flat edge holding an instance of each of its candidates;
/// the N-BEATS variants read a single backbone.
#[derive(Debug, Clone)]
pub struct FlatEdge {
    pub ops: Vec<(FlatOpKind, FlatOp)>,
    pub backbone: Option<Backbone>,
    dims: FlatDims,
}

impl FlatEdge {
    /// `is_final` marks edges into the last cell's output node (no activation / norm on Linear).
    pub fn new<T: Element>(b: &mut Builder<T>, kinds: &[FlatOpKind], dims: FlatDims, is_final: bool) -> Result<Self> {
        let (l, h, w) = (dims.lookback, dims.horizon, dims.width);
        let backbone = if kinds.iter().any(|k| k.is_nbeats()) {
            let mut s = b.sub("nbeats");
            Some(Backbone { fc1: Linear::new(&mut s, "fc1", l + h, w, true)?, fc2: Linear::new(&mut s, "fc2", w, w, true)? })
        } else {
            None
        };
        let mut ops = Vec::new();
        for &k in kinds {
            let op = match k {
                FlatOpKind::Linear => {
                    let mut s = b.sub("linear");
                    let lin = Linear::new(&mut s, "fc", l + h, h, true)?;
                    let ln = if is_final { None } else { Some(LayerNorm::new(&mut s, "ln", h)?) };
                    FlatOp::Linear { lin, ln }
                }
                FlatOpKind::Skip => FlatOp::Skip,
                nb => {
                    let (basis, slug) = match nb {
                        FlatOpKind::NBeatsGeneric => (BasisKind::Generic, "nbeats_generic"),
                        FlatOpKind::NBeatsTrend => (BasisKind::Trend, "nbeats_trend"),
                        _ => (BasisKind::Seasonal, "nbeats_seasonal"),
                    };
                    let mut s = b.sub(slug);
                    let theta_b = Linear::new(&mut s, "theta_b", w, basis_width(basis, l, dims.harmonics), true)?;
                    let theta_f = Linear::new(&mut s, "theta_f", w, basis_width(basis, h, dims.harmonics), true)?;
                    FlatOp::NBeats { basis, theta_b, theta_f }
                }
            };
            ops.push((k, op));
        }
        Ok(FlatEdge { ops, backbone, dims })
    }

    fn backbone_out<T: Element>(&self, ctx: &Ctx<T>, cat: &Var<T>) -> Result<Var<T>> {
        let bb = self.backbone.as_ref().expect("N-BEATS op without backbone");
        let h = ctx.tape.gelu(&bb.fc1.forward(ctx, cat)?)?;
        Ok(ctx.tape.gelu(&bb.fc2.forward(ctx, &h)?)?)
    }

    /// Applies candidate `i`; `hidden` caches the shared backbone output across candidates.
    pub fn forward_op<T: Element>(
        &self,
        ctx: &Ctx<T>,
        i: usize,
        x: &Streams<T>,
        cat: &mut Option<Var<T>>,
        hidden: &mut Option<Var<T>>,
    ) -> Result<Streams<T>> {
        let tape = ctx.tape;
        let mut concat = || -> Result<Var<T>> {
            if cat.is_none() {
                *cat = Some(tape.concat(&[&x.b, &x.f], 2)?);
            }
            Ok(cat.clone().expect("set"))
        };
        match &self.ops[i].1 {
            FlatOp::Skip => Ok(x.clone()),
            FlatOp::Linear { lin, ln } => {
                let mut f = lin.forward(ctx, &concat()?)?;
                if let Some(ln) = ln {
                    f = ln.forward(ctx, &tape.gelu(&f)?)?;
                }
                Ok(Streams { b: x.b.clone(), f })
            }
            FlatOp::NBeats { basis, theta_b, theta_f } => {
                if hidden.is_none() {
                    let c = concat()?;
                    *hidden = Some(self.backbone_out(ctx, &c)?);
                }
                let h = hidden.as_ref().expect("set");
                let pb = nbeats_basis(tape, *basis, &theta_b.forward(ctx, h)?, self.dims.lookback)?;
                let pf = nbeats_basis(tape, *basis, &theta_f.forward(ctx, h)?, self.dims.horizon)?;
                Ok(Streams { b: tape.sub(&x.b, &pb)?, f: tape.add(&x.f, &pf)? })
            }
        }
    }

    pub fn forward<T: Element>(&self, ctx: &Ctx<T>, mix: &Mixing<T>, x: &Streams<T>) -> Result<Streams<T>> {
        if mix.len() != self.ops.len() {
            return Err(CoreError::config(format!("{} weights for {} flat candidates", mix.len(), self.ops.len())));
        }
        let (mut cat, mut hidden) = (None, None);
        let out = mix.combine_many(ctx.tape, 2, |i| {
            let s = self.forward_op(ctx, i, x, &mut cat, &mut hidden)?;
            Ok(vec![Some(s.b), Some(s.f)])
        })?;
        let mut it = out.into_iter().map(|v| v.expect("flat ops yield both streams"));
        Ok(Streams { b: it.next().expect("b"), f: it.next().expect("f") })
    }
}
