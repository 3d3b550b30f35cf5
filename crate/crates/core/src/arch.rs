use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use tsnas_tensor::{Element, ParamId, ParamStore};

use crate::cells::Family;
use crate::error::{CoreError, Result};
use crate::nn::{Ctx, Mixing};

/// A place where the search chooses among candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Point {
    Edge { family: Family, cell: usize, edge: usize },
    Decoder,
    Head,
    Macro,
}

impl Point {
    pub fn edge(family: Family, cell: usize, edge: usize) -> Self {
        Point::Edge { family, cell, edge }
    }
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Point::Edge { family, cell, edge } => write!(f, "{}.c{}.e{}", family.slug(), cell, edge),
            Point::Decoder => f.write_str("decoder"),
            Point::Head => f.write_str("head"),
            Point::Macro => f.write_str("macro"),
        }
    }
}

/// Override applied on top of the learned logits.
#[derive(Debug, Clone, PartialEq)]
pub enum PointState {
    /// One-hot on candidate i; other candidates are not evaluated.
    Forced(usize),
    /// The edge contributes nothing.
    Masked,
    /// Constant weights.
    Fixed(Vec<f64>),
}

/// Architecture logits by choice point plus any discretisation overrides.
#[derive(Debug, Clone, Default)]
pub struct ArchState {
    pub logits: BTreeMap<Point, ParamId>,
    pub overrides: BTreeMap<Point, PointState>,
}

impl ArchState {
    pub fn state(&self, p: Point) -> Option<&PointState> {
        self.overrides.get(&p)
    }

    pub fn set(&mut self, p: Point, s: Option<PointState>) -> Option<PointState> {
        match s {
            Some(s) => self.overrides.insert(p, s),
            None => self.overrides.remove(&p),
        }
    }

    /// Weights for `n` instantiated candidates; `None` when the point is masked.
    pub fn mixing<T: Element>(&self, ctx: &Ctx<T>, p: Point, n: usize) -> Result<Option<Mixing<T>>> {
        if n == 0 {
            return Ok(None);
        }
        match self.overrides.get(&p) {
            Some(PointState::Masked) => return Ok(None),
            Some(PointState::Forced(i)) if *i < n => return Ok(Some(Mixing::one_hot(n, *i))),
            Some(PointState::Fixed(w)) if w.len() == n => return Ok(Some(Mixing::Hard(w.clone()))),
            Some(s) => return Err(CoreError::config(format!("override {s:?} does not fit {n} candidates at {p}"))),
            None => {}
        }
        if let Some(&id) = self.logits.get(&p) {
            let l = ctx.p(id);
            if l.dim(0) != n {
                return Err(CoreError::config(format!("{} logits for {n} candidates at {p}", l.dim(0))));
            }
            return Ok(Some(Mixing::Soft(ctx.tape.softmax(&l, 0)?)));
        }
        if n == 1 {
            return Ok(Some(Mixing::Hard(vec![1.0])));
        }
        Err(CoreError::config(format!("no weights for {n} candidates at {p}")))
    }

    /// Softmax of the learned logits of `p`.
    pub fn softmax<T: Element>(&self, store: &ParamStore<T>, p: Point) -> Option<Vec<f64>> {
        let id = *self.logits.get(&p)?;
        Some(softmax(&store.value(id).to_f64_vec()))
    }

    /// Entropy of every softmax group, keyed by point label.
    pub fn entropies<T: Element>(&self, store: &ParamStore<T>) -> BTreeMap<String, f64> {
        self.logits
            .keys()
            .map(|&p| {
                let w = self.softmax(store, p).expect("present");
                (p.to_string(), -w.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>())
            })
            .collect()
    }
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Argmin with ties to the lower index; NaN scores lose.
pub fn argmin(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if s.is_nan() {
            continue;
        }
        if best.is_none_or(|b| s < scores[b]) {
            best = Some(i);
        }
    }
    best
}
