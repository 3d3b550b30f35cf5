use std::cell::Cell;

use tsnas_tensor::rng::NamedRng;
use tsnas_tensor::{init, Element, ParamId, ParamRole, ParamStore, Tape, Tensor, Var};

use crate::error::Result;

/// Everything a forward pass needs besides the input.
pub struct Ctx<'a, T: Element> {
    pub tape: &'a Tape<T>,
    pub store: &'a ParamStore<T>,
    pub train: bool,
    /// Parameters of this role enter the tape as constants.
    pub frozen: Option<ParamRole>,
    seed: u64,
    draws: Cell<u64>,
}

impl<'a, T: Element> Ctx<'a, T> {
    pub fn new(tape: &'a Tape<T>, store: &'a ParamStore<T>, train: bool, frozen: Option<ParamRole>, seed: u64) -> Self {
        Ctx { tape, store, train, frozen, seed, draws: Cell::new(0) }
    }

    pub fn eval(tape: &'a Tape<T>, store: &'a ParamStore<T>) -> Self {
        Self::new(tape, store, false, None, 0)
    }

    pub fn p(&self, id: ParamId) -> Var<T> {
        if self.frozen == Some(self.store.role(id)) {
            self.tape.constant(self.store.value(id).clone())
        } else {
            self.store.var(self.tape, id)
        }
    }

    pub fn dropout(&self, x: &Var<T>, p: f64) -> Result<Var<T>> {
        if !self.train || p == 0.0 {
            return Ok(x.clone());
        }
        let k = self.draws.get();
        self.draws.set(k + 1);
        // splitmix-style decorrelation of successive mask seeds
        let s = self.seed ^ (k.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        Ok(self.tape.dropout(x, p, s, true)?)
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<T> {
        self.tape.constant(t)
    }

    pub fn zeros(&self, shape: &[usize]) -> Var<T> {
        self.tape.constant(Tensor::zeros(shape))
    }
}

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a, T: Element> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut NamedRng,
    prefix: String,
}

impl<'a, T: Element> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut NamedRng) -> Self {
        Builder { store, rng, prefix: String::new() }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_, T> {
        let prefix = self.full(name);
        Builder { store: self.store, rng: self.rng, prefix }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param(&mut self, name: &str, value: Tensor<T>, role: ParamRole) -> Result<ParamId> {
        let n = self.full(name);
        Ok(self.store.add(&n, value, role)?)
    }

    /// Returns an existing parameter of this name, or registers a fan-in initialised one.
    pub fn shared_weight(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let n = self.full(name);
        let rng = &mut *self.rng;
        self.store.get_or_add(&n, ParamRole::Weight, || init::fan_in(shape, fan_in, rng))
    }

    pub fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let t = init::fan_in(shape, fan_in, self.rng);
        self.param(name, t, ParamRole::Weight)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.param(name, Tensor::zeros(shape), ParamRole::Weight)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.param(name, Tensor::ones(shape), ParamRole::Weight)
    }

    /// Architecture logits start near zero so every candidate begins almost equally weighted.
    pub fn arch(&mut self, name: &str, n: usize) -> Result<ParamId> {
        let t = init::uniform(&[n], 1e-3, self.rng);
        self.param(name, t, ParamRole::Architecture)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Element>(b: &mut Builder<T>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let mut s = b.sub(name);
        let w = s.weight("w", &[d_in, d_out], d_in)?;
        let bias = if bias {
            let t = init::fan_in(&[d_out], d_in, s.rng);
            Some(s.param("b", t, ParamRole::Weight)?)
        } else {
            None
        };
        Ok(Linear { w, b: bias, d_in, d_out })
    }

    pub fn forward<T: Element>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let b = self.b.map(|id| ctx.p(id));
        Ok(ctx.tape.linear(x, &ctx.p(self.w), b.as_ref())?)
    }

    /// Applies the map along the time axis of a [B, T, d] input.
    pub fn forward_time<T: Element>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let xt = ctx.tape.transpose(x, 1, 2)?;
        let y = self.forward(ctx, &xt)?;
        Ok(ctx.tape.transpose(&y, 1, 2)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub g: ParamId,
    pub b: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Element>(b: &mut Builder<T>, name: &str, d: usize) -> Result<Self> {
        let mut s = b.sub(name);
        Ok(LayerNorm { g: s.ones("g", &[d])?, b: s.zeros("b", &[d])? })
    }

    pub fn forward<T: Element>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        Ok(ctx.tape.layer_norm(x, &ctx.p(self.g), &ctx.p(self.b), LN_EPS)?)
    }
}

/// How the candidates of one choice point are blended.
#[derive(Debug, Clone)]
pub enum Mixing<T: Element> {
    /// Softmax weights, shape [n].
    Soft(Var<T>),
    /// Constant weights; zero entries are never evaluated.
    Hard(Vec<f64>),
}

impl<T: Element> Mixing<T> {
    pub fn len(&self) -> usize {
        match self {
            Mixing::Soft(w) => w.dim(0),
            Mixing::Hard(w) => w.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn one_hot(n: usize, i: usize) -> Self {
        let mut w = vec![0.0; n];
        w[i] = 1.0;
        Mixing::Hard(w)
    }

    /// Weights as plain numbers.
    pub fn values(&self) -> Vec<f64> {
        match self {
            Mixing::Soft(w) => w.value().to_f64_vec(),
            Mixing::Hard(w) => w.clone(),
        }
    }

    /// Indices whose output is needed.
    pub fn active(&self) -> Vec<usize> {
        match self {
            Mixing::Soft(w) => (0..w.dim(0)).collect(),
            Mixing::Hard(w) => (0..w.len()).filter(|&i| w[i] != 0.0).collect(),
        }
    }

    /// Weighted sum of several tensors per candidate, all sharing the candidate's weight.
    ///
    /// `f(i)` yields candidate `i`'s components; a `None` component makes that component
    /// of the mixture `None` unless the candidate carries zero hard weight.
    pub fn combine_many(
        &self,
        tape: &Tape<T>,
        parts: usize,
        mut f: impl FnMut(usize) -> Result<Vec<Option<Var<T>>>>,
    ) -> Result<Vec<Option<Var<T>>>> {
        let mut acc: Vec<Option<Option<Var<T>>>> = vec![None; parts];
        for i in self.active() {
            let outs = f(i)?;
            for (slot, o) in acc.iter_mut().zip(outs) {
                let term = match (o, self) {
                    (None, _) => None,
                    (Some(v), Mixing::Hard(w)) if w[i] == 1.0 => Some(v),
                    (Some(v), Mixing::Hard(w)) => Some(tape.scale(&v, w[i])?),
                    (Some(v), Mixing::Soft(w)) => Some(tape.mul(&tape.select(w, 0, i)?, &v)?),
                };
                *slot = Some(match (slot.take(), term) {
                    (None, t) => t,
                    (Some(Some(a)), Some(t)) => Some(tape.add(&a, &t)?),
                    _ => None,
                });
            }
        }
        Ok(acc.into_iter().map(Option::flatten).collect())
    }

    pub fn combine(&self, tape: &Tape<T>, mut f: impl FnMut(usize) -> Result<Var<T>>) -> Result<Var<T>> {
        let out = self.combine_many(tape, 1, |i| Ok(vec![Some(f(i)?)]))?;
        out.into_iter()
            .next()
            .flatten()
            .ok_or_else(|| crate::error::CoreError::config("mixture with no active candidate"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tsnas_tensor::rng::seeded;

    fn soft(tape: &Tape<f64>, logits: &[f64]) -> Mixing<f64> {
        let l = tape.leaf(Tensor::from_f64(&[logits.len()], logits).unwrap());
        Mixing::Soft(tape.softmax(&l, 0).unwrap())
    }

    fn mix(m: &Mixing<f64>, tape: &Tape<f64>, outs: &[f64]) -> f64 {
        m.combine(tape, |i| Ok(tape.constant(Tensor::scalar(outs[i])))).unwrap().value().item()
    }

    #[test]
    fn uniform_mixture() {
        let t = Tape::new();
        assert_eq!(mix(&soft(&t, &[0.0, 0.0]), &t, &[1.0, 3.0]), 2.0);
    }

    #[test]
    fn ln3_mixture() {
        let t = Tape::new();
        let v = mix(&soft(&t, &[3f64.ln(), 0.0]), &t, &[4.0, 0.0]);
        assert!((v - 3.0).abs() < 1e-6);
    }

    #[test]
    fn saturated_mixture() {
        let t = Tape::new();
        let v = mix(&soft(&t, &[40.0, 0.0]), &t, &[1.25, -7.0]);
        assert!((v - 1.25).abs() < 1e-8);
    }

    #[test]
    fn hard_one_is_passthrough_and_skips_zeros() {
        let t = Tape::<f64>::new();
        let x = t.constant(Tensor::from_f64(&[2], &[0.1, 0.2]).unwrap());
        let m = Mixing::one_hot(3, 1);
        let mut calls = vec![];
        let y = m
            .combine(&t, |i| {
                calls.push(i);
                Ok(x.clone())
            })
            .unwrap();
        assert_eq!(calls, vec![1]);
        assert!(y.value().shares_storage(x.value()));
    }

    #[test]
    fn frozen_role_yields_constants() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded(0);
        let mut b = Builder::new(&mut store, &mut rng);
        let w = b.weight("w", &[2], 2).unwrap();
        let a = b.arch("a", 2).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false, Some(ParamRole::Weight), 0);
        assert!(!ctx.p(w).requires_grad());
        assert!(ctx.p(a).requires_grad());
        assert_eq!(store.name(w), "w");
    }
}
