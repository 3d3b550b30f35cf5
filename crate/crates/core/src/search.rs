use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tsnas_tensor::optim::{clip_grad_norm, Adam, AdamConfig, CosineSchedule, SgdConfig, SgdMomentum};
use tsnas_tensor::rng::{capture, next_seed, restore, seeded, NamedRng};
use tsnas_tensor::{Element, ParamRole, Tape, Tensor};

use crate::checkpoint::Checkpoint;
use crate::config::NetworkConfig;
use crate::data::{chrono_split, SplitPurpose, TimeSeriesDataset, Windows, FINAL_RATIOS};
use crate::error::{CoreError, Result};
use crate::network::{Batch, Network};
use crate::nn::Ctx;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub stride: usize,
    /// Caps weight/arch step pairs per epoch; `None` uses every training batch.
    pub max_steps_per_epoch: Option<usize>,
    pub seed: u64,
    pub weight_lr: f64,
    pub weight_lr_min: f64,
    pub weight_momentum: f64,
    pub weight_decay: f64,
    pub arch_lr: f64,
    pub arch_beta1: f64,
    pub arch_beta2: f64,
    pub arch_weight_decay: f64,
    pub grad_clip: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            epochs: 5,
            batch_size: 32,
            stride: 1,
            max_steps_per_epoch: None,
            seed: 0,
            weight_lr: 0.025,
            weight_lr_min: 0.001,
            weight_momentum: 0.9,
            weight_decay: 3e-4,
            arch_lr: 3e-4,
            arch_beta1: 0.5,
            arch_beta2: 0.999,
            arch_weight_decay: 1e-3,
            grad_clip: 5.0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(CoreError::config("search.epochs must be at least 1"));
        }
        if self.batch_size == 0 || self.stride == 0 {
            return Err(CoreError::config("search.batch_size and search.stride must be positive"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.arch_lr, beta1: self.arch_beta1, beta2: self.arch_beta2, eps: 1e-8, weight_decay: self.arch_weight_decay }
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig { lr: self.weight_lr, momentum: self.weight_momentum, weight_decay: self.weight_decay }
    }

    fn schedule(&self) -> CosineSchedule {
        CosineSchedule { base: self.weight_lr, min: self.weight_lr_min, total: self.epochs }
    }
}

/// Halves of the series for weight (train) and architecture (val) updates.
pub fn split_search_data(t: usize, l: usize, h: usize) -> Result<(std::ops::Range<usize>, std::ops::Range<usize>)> {
    let r = chrono_split(t, SplitPurpose::Search, FINAL_RATIOS, l, h)?;
    Ok((r[0].clone(), r[1].clone()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub weight_lr: f64,
    pub entropy: BTreeMap<String, f64>,
}

/// Everything that evolves during search.
#[derive(Debug, Clone)]
pub struct SearchState<T: Element> {
    pub net: Network<T>,
    pub cfg: SearchConfig,
    pub w_opt: SgdMomentum<T>,
    pub a_opt: Adam<T>,
    pub rng: NamedRng,
    /// Completed epochs.
    pub epoch: usize,
    pub log: Vec<EpochLog>,
}

fn finite<T: Element>(loss: &Tensor<T>, what: &str) -> Result<f64> {
    let v = loss.item().to_f64().unwrap_or(f64::NAN);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(CoreError::Diverged(format!("{what} loss is {v}")))
    }
}

impl<T: Element> SearchState<T> {
    pub fn new(net_cfg: &NetworkConfig, cfg: &SearchConfig) -> Result<Self> {
        cfg.validate()?;
        let net = Network::supernet(net_cfg, cfg.seed)?;
        Ok(SearchState {
            net,
            cfg: cfg.clone(),
            w_opt: SgdMomentum::new(cfg.sgd()),
            a_opt: Adam::new(cfg.adam()),
            // the data/dropout stream is decorrelated from initialisation
            rng: seeded(cfg.seed ^ 0x5EA2C4),
            epoch: 0,
            log: Vec::new(),
        })
    }

    /// Validation loss with every module in inference mode; updates only architecture logits.
    pub fn arch_step(&mut self, batch: &Batch<T>) -> Result<f64> {
        let tape = Tape::new();
        let loss = {
            let ctx = Ctx::new(&tape, &self.net.store, false, Some(ParamRole::Weight), 0);
            self.net.forward(&ctx, batch)?.loss
        };
        let v = finite(loss.value(), "architecture")?;
        let grads = tape.backward(&loss)?;
        let store = &mut self.net.store;
        store.zero_grads();
        store.accumulate(&grads);
        let ids = store.ids_with_grad(Some(ParamRole::Architecture));
        if !ids.is_empty() {
            clip_grad_norm(store, &ids, self.cfg.grad_clip);
            self.a_opt.step(store, &ids)?;
        }
        store.zero_grads();
        Ok(v)
    }

    /// Training loss in train mode; updates only weights.
    pub fn weight_step(&mut self, batch: &Batch<T>) -> Result<f64> {
        let seed = next_seed(&mut self.rng);
        weight_update(&mut self.net, &mut self.w_opt, self.cfg.grad_clip, seed, batch)
    }

    /// One epoch of interleaved arch/weight steps over the two halves.
    pub fn run_epoch(&mut self, train: &Windows, val: &Windows) -> Result<EpochLog> {
        let lr = self.cfg.schedule().at(self.epoch);
        self.w_opt.cfg.lr = lr;
        let bs = self.cfg.batch_size;
        let train_b: Vec<Batch<T>> = train.batches(bs, Some(&mut self.rng));
        let val_b: Vec<Batch<T>> = val.batches(bs, Some(&mut self.rng));
        if train_b.is_empty() || val_b.is_empty() {
            return Err(CoreError::config("search split holds no complete window"));
        }
        let steps = self.cfg.max_steps_per_epoch.map_or(train_b.len(), |m| m.min(train_b.len()).max(1));
        let (mut tl, mut vl) = (0.0, 0.0);
        for i in 0..steps {
            let e = self.epoch;
            vl += self.arch_step(&val_b[i % val_b.len()]).map_err(|err| annotate(err, e, i))?;
            tl += self.weight_step(&train_b[i]).map_err(|err| annotate(err, e, i))?;
        }
        self.epoch += 1;
        let entry = EpochLog {
            epoch: self.epoch,
            train_loss: tl / steps as f64,
            val_loss: vl / steps as f64,
            weight_lr: lr,
            entropy: self.net.arch.entropies(&self.net.store),
        };
        self.log.push(entry.clone());
        Ok(entry)
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let store = &self.net.store;
        let params = store.ids().map(|id| (store.name(id).to_string(), store.value(id).clone())).collect();
        let mut sections = BTreeMap::new();
        sections.insert("params".to_string(), params);
        sections.insert("sgd".to_string(), self.w_opt.export(store));
        sections.insert("adam".to_string(), self.a_opt.export(store));
        Checkpoint {
            epoch: self.epoch,
            meta: serde_json::json!({
                "network": self.net.cfg,
                "search": self.cfg,
                "log": self.log,
                "sgd_lr": self.w_opt.cfg.lr,
            }),
            rng: capture(&self.rng),
            adam_steps: self.a_opt.steps(),
            sections,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        let bad = |e: serde_json::Error| CoreError::Checkpoint(format!("meta: {e}"));
        let net_cfg: NetworkConfig = serde_json::from_value(ck.meta["network"].clone()).map_err(bad)?;
        let cfg: SearchConfig = serde_json::from_value(ck.meta["search"].clone()).map_err(bad)?;
        let mut s = Self::new(&net_cfg, &cfg)?;
        let store = &mut s.net.store;
        let params = ck.section("params");
        if params.len() != store.len() {
            return Err(CoreError::Checkpoint(format!("{} tensors for {} parameters", params.len(), store.len())));
        }
        for (name, t) in params {
            let id = store.id(name).ok_or_else(|| CoreError::Checkpoint(format!("unknown parameter {name:?}")))?;
            store.set_value(id, t.clone())?;
        }
        s.w_opt.import(store, ck.section("sgd"))?;
        s.w_opt.cfg.lr = ck.meta["sgd_lr"].as_f64().unwrap_or(cfg.weight_lr);
        s.a_opt.import(store, ck.adam_steps, ck.section("adam"))?;
        s.rng = restore(&ck.rng);
        s.epoch = ck.epoch;
        s.log = serde_json::from_value(ck.meta["log"].clone()).map_err(bad)?;
        Ok(s)
    }
}

/// One clipped momentum-SGD step on the weights; architecture logits enter as constants.
pub fn weight_update<T: Element>(
    net: &mut Network<T>,
    opt: &mut SgdMomentum<T>,
    clip: f64,
    seed: u64,
    batch: &Batch<T>,
) -> Result<f64> {
    let tape = Tape::new();
    let loss = {
        let ctx = Ctx::new(&tape, &net.store, true, Some(ParamRole::Architecture), seed);
        net.forward(&ctx, batch)?.loss
    };
    let v = finite(loss.value(), "weight")?;
    let grads = tape.backward(&loss)?;
    let store = &mut net.store;
    store.zero_grads();
    store.accumulate(&grads);
    let ids = store.ids_with_grad(Some(ParamRole::Weight));
    clip_grad_norm(store, &ids, clip);
    opt.step(store, &ids)?;
    store.zero_grads();
    Ok(v)
}

fn annotate(e: CoreError, epoch: usize, step: usize) -> CoreError {
    match e {
        CoreError::Diverged(m) => CoreError::Diverged(format!("epoch {epoch} step {step}: {m}")),
        e => e,
    }
}

/// Search windows over the first `len` rows of `ds` (the caller passes the range it is
/// allowed to look at; test data never enters search).
pub struct SearchData<'a> {
    pub train: Windows<'a>,
    pub val: Windows<'a>,
}

impl<'a> SearchData<'a> {
    pub fn new(ds: &'a TimeSeriesDataset, len: usize, net: &NetworkConfig, stride: usize) -> Result<Self> {
        let (l, h) = (net.lookback, net.horizon);
        let (tr, va) = split_search_data(len.min(ds.len()), l, h)?;
        Ok(SearchData { train: Windows::new(ds, tr, l, h, stride)?, val: Windows::new(ds, va, l, h, stride)? })
    }
}

/// Runs (or resumes) the search, writing `supernet.ckpt` plus one file per epoch when `dir` is set.
pub fn run_search<T: Element>(
    mut state: SearchState<T>,
    data: &SearchData,
    dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<SearchState<T>> {
    while state.epoch < state.cfg.epochs {
        let log = state.run_epoch(&data.train, &data.val)?;
        on_epoch(&log);
        if let Some(d) = dir {
            let ck = state.to_checkpoint();
            ck.save(&epoch_path(d, state.epoch))?;
            ck.save(&d.join("supernet.ckpt"))?;
        }
    }
    Ok(state)
}

pub fn epoch_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("supernet_epoch{epoch:03}.ckpt"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticKind};

    fn tiny() -> (NetworkConfig, SearchConfig) {
        let net = NetworkConfig::tiny(8, 4, 2);
        let cfg = SearchConfig { epochs: 2, batch_size: 4, stride: 4, max_steps_per_epoch: Some(2), ..Default::default() };
        (net, cfg)
    }

    #[test]
    fn halves() {
        assert_eq!(split_search_data(100, 8, 4).unwrap(), (0..50, 50..100));
        assert!(split_search_data(23, 8, 4).is_err());
    }

    #[test]
    fn arch_and_weight_steps_respect_the_partition() {
        let (net, cfg) = tiny();
        let ds = make_synthetic(SyntheticKind::Sine, 80, 2, 0.1, 0);
        let data = SearchData::new(&ds, 80, &net, 4).unwrap();
        let mut st = SearchState::<f64>::new(&net, &cfg).unwrap();
        let b = data.val.batch(&data.val.starts[..2]);
        let before = st.net.store.clone();
        let l1 = st.arch_step(&b).unwrap();
        for id in before.ids_with_role(ParamRole::Weight) {
            assert!(before.value(id).bit_eq(st.net.store.value(id)), "{}", before.name(id));
        }
        let l2 = st.arch_step(&b).unwrap();
        assert!(l1.is_finite() && l2.is_finite());
        let before = st.net.store.clone();
        st.weight_step(&data.train.batch(&data.train.starts[..2])).unwrap();
        for id in before.ids_with_role(ParamRole::Architecture) {
            assert!(before.value(id).bit_eq(st.net.store.value(id)));
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (net, cfg) = tiny();
        let ds = make_synthetic(SyntheticKind::Sine, 80, 2, 0.1, 1);
        let data = SearchData::new(&ds, 80, &net, 4).unwrap();
        let full = run_search(SearchState::<f64>::new(&net, &cfg).unwrap(), &data, None, |_| {}).unwrap();
        let mut half = SearchState::<f64>::new(&net, &cfg).unwrap();
        half.run_epoch(&data.train, &data.val).unwrap();
        let bytes = half.to_checkpoint().to_bytes();
        let resumed = SearchState::from_checkpoint(&Checkpoint::<f64>::from_bytes(&bytes).unwrap()).unwrap();
        let resumed = run_search(resumed, &data, None, |_| {}).unwrap();
        for id in full.net.store.ids() {
            assert!(full.net.store.value(id).bit_eq(resumed.net.store.value(id)), "{}", full.net.store.name(id));
        }
        assert_eq!(full.log, resumed.log);
        assert!(full.log.iter().all(|l| !l.entropy.is_empty() && l.entropy.values().all(|v| v.is_finite())));
    }
}
