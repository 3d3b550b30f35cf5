//! Search → prune on the final-split training range; the shared driver behind the CLI and the suites.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tsnas_tensor::rng::{next_seed, seeded};
use tsnas_tensor::Element;

use crate::config::NetworkConfig;
use crate::error::{CoreError, Result};
use crate::genotype::{Genotype, Provenance};
use crate::network::Batch;
use crate::prune::{AuditRecord, Pruner};
use crate::search::{run_search, weight_update, EpochLog, SearchConfig, SearchData, SearchState};
use crate::train::FinalData;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub batch_size: usize,
    /// Window stride over the search-validation half.
    pub stride: usize,
    /// Scoring batches; `None` scores the whole validation half.
    pub max_batches: Option<usize>,
    /// Weight steps after every commit; 0 disables fine-tuning.
    pub finetune_steps: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig { batch_size: 32, stride: 1, max_batches: None, finetune_steps: 0 }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.stride == 0 || self.max_batches == Some(0) {
            return Err(CoreError::config("prune.batch_size, prune.stride and prune.max_batches must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub genotype: Genotype,
    pub audit: Vec<AuditRecord>,
    pub log: Vec<EpochLog>,
}

/// Runs the bilevel search on the training range of `data` only, then prunes on that range's tail half.
pub fn search_and_prune<T: Element>(
    data: &FinalData,
    net_cfg: &NetworkConfig,
    scfg: &SearchConfig,
    pcfg: &PruneConfig,
    dataset: &str,
    ckpt_dir: Option<&Path>,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<SearchOutcome> {
    net_cfg.validate()?;
    scfg.validate()?;
    pcfg.validate()?;
    let sd = SearchData::new(&data.ds, data.train.end, net_cfg, scfg.stride)?;
    let state = run_search(SearchState::<T>::new(net_cfg, scfg)?, &sd, ckpt_dir, on_epoch)?;
    let log = state.log.clone();
    let mut net = state.net;

    let val = SearchData::new(&data.ds, data.train.end, net_cfg, pcfg.stride)?.val;
    let mut batches: Vec<Batch<T>> = val.batches(pcfg.batch_size, None);
    if let Some(m) = pcfg.max_batches {
        batches.truncate(m);
    }
    if batches.is_empty() {
        return Err(CoreError::config("search validation half holds no window for pruning"));
    }

    let mut w_opt = state.w_opt;
    let mut rng = seeded(scfg.seed ^ 0xF1E7);
    let train_b: Vec<Batch<T>> = sd.train.batches(scfg.batch_size, Some(&mut rng));
    let clip = scfg.grad_clip;
    let steps = pcfg.finetune_steps;
    let mut pruner = Pruner::new(&mut net, &batches);
    if steps > 0 {
        let mut i = 0usize;
        pruner.finetune = Some(Box::new(move |n| {
            for _ in 0..steps {
                let s = next_seed(&mut rng);
                weight_update(n, &mut w_opt, clip, s, &train_b[i % train_b.len()])?;
                i += 1;
            }
            Ok(())
        }));
    }
    let prov = Provenance { seed: scfg.seed, dataset: dataset.to_string(), created: None };
    let (genotype, audit) = pruner.run(prov)?;
    Ok(SearchOutcome { genotype, audit, log })
}
