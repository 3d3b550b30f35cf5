use tsnas_tensor::{Element, Tape, Var};

use crate::error::{CoreError, Result};
use crate::nn::{Builder, Ctx};

pub const REVIN_EPS: f64 = 1e-5;

/// Per-instance, per-variable statistics of one look-back window.
#[derive(Debug, Clone)]
pub struct RevInState<T: Element> {
    /// [B, 1, N]
    pub mean: Var<T>,
    /// [B, 1, N], sqrt(var + eps)
    pub std: Var<T>,
    /// Learnable [N] scale and shift, when enabled.
    pub affine: Option<(Var<T>, Var<T>)>,
}

/// Standardises `x` [B, L, N] over its time axis.
pub fn revin_normalize<T: Element>(
    tape: &Tape<T>,
    x: &Var<T>,
    affine: Option<(Var<T>, Var<T>)>,
) -> Result<(Var<T>, RevInState<T>)> {
    if x.rank() != 3 || x.dim(1) == 0 {
        return Err(CoreError::config(format!("RevIN expects [B, L>=1, N], got {:?}", x.shape())));
    }
    let mean = tape.mean(x, 1, true)?;
    let centred = tape.sub(x, &mean)?;
    let var = tape.mean(&tape.square(&centred)?, 1, true)?;
    let std = tape.sqrt(&tape.add_scalar(&var, REVIN_EPS)?)?;
    let mut y = tape.div(&centred, &std)?;
    if let Some((g, b)) = &affine {
        y = tape.add(&tape.mul(&y, g)?, b)?;
    }
    Ok((y, RevInState { mean, std, affine }))
}

impl<T: Element> RevInState<T> {
    /// Undoes the affine part only; the result lives in instance-standardised units.
    /// Works for any trailing layout whose variable axis is 2 (e.g. [B, H, N] or [B, H, N, Q]).
    pub fn unscale(&self, tape: &Tape<T>, y: &Var<T>) -> Result<Var<T>> {
        let Some((g, b)) = &self.affine else { return Ok(y.clone()) };
        let (g, b) = (self.align(tape, g, y)?, self.align(tape, b, y)?);
        let den = tape.add_scalar(&g, REVIN_EPS * REVIN_EPS)?;
        Ok(tape.div(&tape.sub(y, &b)?, &den)?)
    }

    /// Instance-standardised values back to data units.
    pub fn destandardize(&self, tape: &Tape<T>, y: &Var<T>) -> Result<Var<T>> {
        let std = self.align(tape, &self.std, y)?;
        let mean = self.align(tape, &self.mean, y)?;
        Ok(tape.add(&tape.mul(y, &std)?, &mean)?)
    }

    /// Data units to instance-standardised values (no affine).
    pub fn standardize(&self, tape: &Tape<T>, y: &Var<T>) -> Result<Var<T>> {
        Ok(tape.div(&tape.sub(y, &self.mean)?, &self.std)?)
    }

    pub fn denormalize(&self, tape: &Tape<T>, y: &Var<T>) -> Result<Var<T>> {
        let u = self.unscale(tape, y)?;
        self.destandardize(tape, &u)
    }

    /// Reshapes a per-variable tensor so it broadcasts against `y` along axis 2.
    fn align(&self, tape: &Tape<T>, s: &Var<T>, y: &Var<T>) -> Result<Var<T>> {
        let extra = y.rank().saturating_sub(3);
        if extra == 0 {
            return Ok(s.clone());
        }
        let mut shape = s.shape().to_vec();
        shape.extend(std::iter::repeat_n(1, extra));
        Ok(tape.reshape(s, &shape)?)
    }
}

/// Learnable RevIN affine parameters.
#[derive(Debug, Clone)]
pub struct RevIn {
    pub affine: Option<(tsnas_tensor::ParamId, tsnas_tensor::ParamId)>,
}

impl RevIn {
    pub fn new<T: Element>(b: &mut Builder<T>, n: usize, affine: bool) -> Result<Self> {
        if !affine {
            return Ok(RevIn { affine: None });
        }
        let mut s = b.sub("revin");
        Ok(RevIn { affine: Some((s.ones("g", &[n])?, s.zeros("b", &[n])?)) })
    }

    pub fn normalize<T: Element>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<(Var<T>, RevInState<T>)> {
        revin_normalize(ctx.tape, x, self.affine.map(|(g, b)| (ctx.p(g), ctx.p(b))))
    }
}
