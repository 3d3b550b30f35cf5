use std::collections::HashMap;

use crate::element::{cast, Element};
use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

fn grad_of<'a, T: Element>(store: &'a ParamStore<T>, id: ParamId, who: &str) -> Result<&'a Tensor<T>> {
    store
        .grad(id)
        .ok_or_else(|| TensorError::contract(format!("{who}: parameter {:?} has no gradient", store.name(id))))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T: Element> {
    pub cfg: AdamConfig,
    step: u64,
    moments: HashMap<ParamId, (Vec<T>, Vec<T>)>,
}

impl<T: Element> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, step: 0, moments: HashMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates `ids` from their stored gradients, then clears those gradients.
    pub fn step(&mut self, store: &mut ParamStore<T>, ids: &[ParamId]) -> Result<()> {
        for &id in ids {
            grad_of(store, id, "adam")?;
        }
        self.step += 1;
        let c = self.cfg;
        let b1: T = cast(c.beta1);
        let b2: T = cast(c.beta2);
        let wd: T = cast(c.weight_decay);
        let lr: T = cast(c.lr);
        let eps: T = cast(c.eps);
        let bc1: T = cast(1.0 - c.beta1.powi(self.step as i32));
        let bc2: T = cast(1.0 - c.beta2.powi(self.step as i32));
        let one = T::one();
        for &id in ids {
            let g = store.grad(id).expect("checked").clone();
            let p = store.value(id).clone();
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (vec![T::zero(); p.numel()], vec![T::zero(); p.numel()]));
            let mut out = p.to_vec();
            for i in 0..out.len() {
                let gi = g.data()[i] + wd * out[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                out[i] -= lr * mh / (vh.sqrt() + eps);
            }
            store.set_value(id, Tensor::new(p.shape(), out)?)?;
            store.set_grad(id, None);
        }
        Ok(())
    }

    /// Moment buffers keyed by parameter name, for checkpointing.
    pub fn export(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        let mut ids: Vec<_> = self.moments.keys().copied().collect();
        ids.sort();
        for id in ids {
            let (m, v) = &self.moments[&id];
            let shape = store.value(id).shape();
            out.push((format!("m/{}", store.name(id)), Tensor::new(shape, m.clone()).expect("shape")));
            out.push((format!("v/{}", store.name(id)), Tensor::new(shape, v.clone()).expect("shape")));
        }
        out
    }

    pub fn import(&mut self, store: &ParamStore<T>, step: u64, tensors: &[(String, Tensor<T>)]) -> Result<()> {
        self.step = step;
        self.moments.clear();
        let find = |key: &str| tensors.iter().find(|(k, _)| k == key).map(|(_, t)| t.to_vec());
        for (k, _) in tensors.iter().filter(|(k, _)| k.starts_with("m/")) {
            let name = &k[2..];
            let id = store.id(name).ok_or_else(|| TensorError::contract(format!("adam state for unknown {name:?}")))?;
            let v = find(&format!("v/{name}")).ok_or_else(|| TensorError::contract(format!("missing v/{name}")))?;
            self.moments.insert(id, (find(k).expect("present"), v));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// SGD with heavy-ball momentum; the learning rate may be changed between steps.
#[derive(Debug, Clone)]
pub struct SgdMomentum<T: Element> {
    pub cfg: SgdConfig,
    buffers: HashMap<ParamId, Vec<T>>,
}

impl<T: Element> SgdMomentum<T> {
    pub fn new(cfg: SgdConfig) -> Self {
        SgdMomentum { cfg, buffers: HashMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, ids: &[ParamId]) -> Result<()> {
        for &id in ids {
            grad_of(store, id, "sgd")?;
        }
        let mu: T = cast(self.cfg.momentum);
        let wd: T = cast(self.cfg.weight_decay);
        let lr: T = cast(self.cfg.lr);
        for &id in ids {
            let g = store.grad(id).expect("checked").clone();
            let p = store.value(id).clone();
            let buf = self.buffers.entry(id).or_insert_with(|| vec![T::zero(); p.numel()]);
            let mut out = p.to_vec();
            for i in 0..out.len() {
                let gi = g.data()[i] + wd * out[i];
                buf[i] = mu * buf[i] + gi;
                out[i] -= lr * buf[i];
            }
            store.set_value(id, Tensor::new(p.shape(), out)?)?;
            store.set_grad(id, None);
        }
        Ok(())
    }

    pub fn export(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut ids: Vec<_> = self.buffers.keys().copied().collect();
        ids.sort();
        ids.into_iter()
            .map(|id| {
                let t = Tensor::new(store.value(id).shape(), self.buffers[&id].clone()).expect("shape");
                (format!("buf/{}", store.name(id)), t)
            })
            .collect()
    }

    pub fn import(&mut self, store: &ParamStore<T>, tensors: &[(String, Tensor<T>)]) -> Result<()> {
        self.buffers.clear();
        for (k, t) in tensors {
            let name = k.strip_prefix("buf/").unwrap_or(k);
            let id = store.id(name).ok_or_else(|| TensorError::contract(format!("sgd state for unknown {name:?}")))?;
            self.buffers.insert(id, t.to_vec());
        }
        Ok(())
    }
}

/// Rescales the stored gradients of `ids` to a joint L2 norm of at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Element>(store: &mut ParamStore<T>, ids: &[ParamId], max_norm: f64) -> f64 {
    let total: f64 = ids
        .iter()
        .filter_map(|&id| store.grad(id))
        .flat_map(|g| g.data().iter().map(|v| v.to_f64().unwrap().powi(2)))
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let s: T = cast(max_norm / (total + 1e-6));
        for &id in ids {
            if let Some(g) = store.grad(id) {
                let scaled = g.map(|v| v * s);
                store.set_grad(id, Some(scaled));
            }
        }
    }
    total
}

/// Cosine annealing from `base` to `min` over `total` epochs.
#[derive(Debug, Clone, Copy)]
pub struct CosineSchedule {
    pub base: f64,
    pub min: f64,
    pub total: usize,
}

impl CosineSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        if self.total == 0 {
            return self.base;
        }
        let e = epoch.min(self.total) as f64 / self.total as f64;
        self.min + 0.5 * (self.base - self.min) * (1.0 + (std::f64::consts::PI * e).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ParamRole;

    fn one_param(v: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(v), ParamRole::Weight).unwrap();
        (s, id)
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let (mut s, id) = one_param(0.0);
        s.set_grad(id, Some(Tensor::scalar(1.0)));
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() });
        adam.step(&mut s, &[id]).unwrap();
        // m̂ = 1, v̂ = 1 -> Δ = -0.1 / (1 + 1e-8)
        assert!((s.value(id).item() + 0.1).abs() < 1e-6);
        assert!(s.grad(id).is_none());
    }

    #[test]
    fn adam_requires_grad() {
        let (mut s, id) = one_param(0.0);
        let mut adam = Adam::new(AdamConfig::default());
        assert!(matches!(adam.step(&mut s, &[id]), Err(TensorError::Contract(_))));
    }

    #[test]
    fn zero_grad_leaves_params_bit_identical() {
        let (mut s, id) = one_param(0.123456789);
        s.set_grad(id, Some(Tensor::scalar(0.0)));
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut s, &[id]).unwrap();
        assert_eq!(s.value(id).item().to_bits(), 0.123456789f64.to_bits());
    }

    #[test]
    fn constant_grad_decreases_monotonically() {
        let (mut s, id) = one_param(1.0);
        let mut adam = Adam::new(AdamConfig::default());
        let mut prev = 1.0;
        for _ in 0..2 {
            s.set_grad(id, Some(Tensor::scalar(1.0)));
            adam.step(&mut s, &[id]).unwrap();
            let now = s.value(id).item();
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn clipping_caps_norm() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("p", Tensor::zeros(&[2]), ParamRole::Weight).unwrap();
        s.set_grad(id, Some(Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap()));
        let n = clip_grad_norm(&mut s, &[id], 1.0);
        assert_eq!(n, 5.0);
        let g = s.grad(id).unwrap();
        let norm = (g.data()[0].powi(2) + g.data()[1].powi(2)).sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
    }

    #[test]
    fn cosine_endpoints() {
        let c = CosineSchedule { base: 0.025, min: 0.001, total: 10 };
        assert!((c.at(0) - 0.025).abs() < 1e-15);
        assert!((c.at(10) - 0.001).abs() < 1e-15);
        assert!(c.at(5) < c.at(4));
    }
}
