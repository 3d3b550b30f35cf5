use tsnas_tensor::{Element, Tape, Var};

use super::HeadKind;
use crate::error::{CoreError, Result};
use crate::nn::{Builder, Ctx, Linear};

/// One forecasting head: a linear map d_model → N per output channel.
#[derive(Debug, Clone)]
pub struct Head {
    pub kind: HeadKind,
    lins: Vec<Linear>,
}

impl Head {
    pub fn new<T: Element>(b: &mut Builder<T>, kind: HeadKind, d: usize, n: usize) -> Result<Self> {
        let mut s = b.sub(&format!("head.{}", kind.slug()));
        let lins = match kind {
            HeadKind::Quantile => (0..HeadKind::QUANTILES.len())
                .map(|q| Linear::new(&mut s, &format!("q{q}"), d, n, true))
                .collect::<Result<_>>()?,
            _ => vec![Linear::new(&mut s, "out", d, n, true)?],
        };
        Ok(Head { kind, lins })
    }

    pub fn linears(&self) -> &[Linear] {
        &self.lins
    }

    /// [B, H, d] → [B, H, N], or [B, H, N, Q] for the quantile head.
    pub fn forward<T: Element>(&self, ctx: &Ctx<T>, z: &Var<T>) -> Result<Var<T>> {
        if self.kind != HeadKind::Quantile {
            return self.lins[0].forward(ctx, z);
        }
        let mut outs = Vec::with_capacity(self.lins.len());
        for l in &self.lins {
            let y = l.forward(ctx, z)?;
            let mut shape = y.shape().to_vec();
            shape.push(1);
            outs.push(ctx.tape.reshape(&y, &shape)?);
        }
        let refs: Vec<&Var<T>> = outs.iter().collect();
        Ok(ctx.tape.concat(&refs, 3)?)
    }
}

/// Point forecast carried by a head output: the 0.5-quantile channel or the sole output.
pub fn point_forecast<T: Element>(tape: &Tape<T>, kind: HeadKind, out: &Var<T>) -> Result<Var<T>> {
    match kind {
        HeadKind::Quantile => Ok(tape.select(out, 3, 1)?),
        _ => Ok(out.clone()),
    }
}

/// Mean pinball loss over elements and quantiles, ρ_q(e) = max(q·e, (q−1)·e), e = y − ŷ.
pub fn pinball_loss<T: Element>(tape: &Tape<T>, forecast: &Var<T>, y: &Var<T>, qs: &[f64]) -> Result<Var<T>> {
    if forecast.rank() != y.rank() + 1 || forecast.dim(forecast.rank() - 1) != qs.len() {
        return Err(CoreError::config(format!(
            "quantile forecast {:?} does not match target {:?} with {} quantiles",
            forecast.shape(),
            y.shape(),
            qs.len()
        )));
    }
    let mut ys = y.shape().to_vec();
    ys.push(1);
    let y = tape.reshape(y, &ys)?;
    let e = tape.sub(&y, forecast)?;
    let q = tape.constant(tsnas_tensor::Tensor::from_f64(&[qs.len()], qs)?);
    // max(q·e, q·e − e) = q·e + relu(−e)
    let loss = tape.add(&tape.mul(&e, &q)?, &tape.relu(&tape.neg(&e)?)?)?;
    Ok(tape.mean_all(&loss)?)
}

pub fn head_loss<T: Element>(tape: &Tape<T>, kind: HeadKind, forecast: &Var<T>, y: &Var<T>) -> Result<Var<T>> {
    match kind {
        HeadKind::Quantile => pinball_loss(tape, forecast, y, &HeadKind::QUANTILES),
        HeadKind::MSE => Ok(tape.mean_all(&tape.square(&tape.sub(forecast, y)?)?)?),
        HeadKind::MAE => Ok(tape.mean_all(&tape.abs(&tape.sub(forecast, y)?)?)?),
    }
}
