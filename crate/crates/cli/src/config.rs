//! The run configuration file and its exhaustive validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tsnas_core::data::{make_synthetic, DatasetRegistry, SyntheticKind, TimeSeriesDataset, FINAL_RATIOS};
use tsnas_core::ops::{FlatOpKind, HeadKind, SeqOpKind};
use tsnas_core::pipeline::PruneConfig;
use tsnas_core::search::SearchConfig;
use tsnas_core::train::TrainConfig;
use tsnas_core::{MacroMode, NetworkConfig, SizeClass};

pub const SEED_ENV: &str = "DARTS_TS_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub t: usize,
    pub n: usize,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Exactly one of `path`, `registry` + `name`, or `synthetic`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRef {
    pub path: Option<PathBuf>,
    pub registry: Option<PathBuf>,
    pub name: Option<String>,
    #[serde(default)]
    pub targets: Vec<String>,
    pub synthetic: Option<SyntheticSpec>,
    pub split: Option<[f64; 3]>,
}

/// Optional overrides on top of the size-class defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkOverrides {
    pub d_model: Option<usize>,
    pub nbeats_width: Option<usize>,
    pub n_seq_cells: Option<usize>,
    pub n_flat_cells: Option<usize>,
    pub n_intermediate: Option<usize>,
    pub dropout: Option<f64>,
    pub n_heads: Option<usize>,
    pub ma_kernel: Option<usize>,
    pub seq_candidates: Option<Vec<SeqOpKind>>,
    pub flat_candidates: Option<Vec<FlatOpKind>>,
    pub head_candidates: Option<Vec<HeadKind>>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetRef,
    #[serde(default)]
    pub mode: MacroMode,
    pub lookback: usize,
    pub horizons: Vec<usize>,
    pub size_class: Option<SizeClass>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub network: NetworkOverrides,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub prune: PruneConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

/// A validated configuration with its dataset loaded.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub cfg: RunConfig,
    pub data: TimeSeriesDataset,
    pub dataset_name: String,
    pub split: [f64; 3],
}

impl Resolved {
    pub fn min_horizon(&self) -> usize {
        *self.cfg.horizons.iter().min().expect("validated non-empty")
    }

    pub fn network(&self, horizon: usize) -> NetworkConfig {
        let c = &self.cfg;
        let sc = c.size_class.unwrap_or(self.data.size_class);
        let mut n = NetworkConfig::new(c.lookback, horizon, self.data.n_targets(), sc);
        n.n_features = self.data.n_features();
        n.mode = c.mode;
        let o = &c.network;
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = o.$f.clone() { n.$f = v; } )* };
        }
        set!(d_model, nbeats_width, n_seq_cells, n_flat_cells, n_intermediate, dropout, n_heads, ma_kernel);
        set!(seq_candidates, flat_candidates, head_candidates);
        n
    }

    /// Search seed: the override, else the first configured seed.
    pub fn search_config(&self) -> SearchConfig {
        SearchConfig { seed: self.cfg.seeds[0], ..self.cfg.search.clone() }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_relative() {
        base.join(p)
    } else {
        p.to_path_buf()
    }
}

/// Seed precedence: command-line flag, then the environment, then the file.
pub fn seed_override(flag: Option<u64>) -> Result<Option<u64>, String> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(SEED_ENV) {
        Ok(s) => s.trim().parse().map(Some).map_err(|_| format!("{SEED_ENV}: {s:?} is not an unsigned integer")),
        Err(_) => Ok(None),
    }
}

/// Parses, resolves relative paths against the file's directory and checks every key;
/// returns all problems at once.
pub fn load(path: &Path, seed: Option<u64>, out_override: Option<&Path>) -> Result<Resolved, Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| vec![format!("config {}: {e}", path.display())])?;
    let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| vec![format!("config {}: {e}", path.display())])?;
    let base = path.parent().unwrap_or(Path::new("."));
    cfg.output_dir = match out_override {
        Some(o) => o.to_path_buf(),
        None => resolve(base, &cfg.output_dir),
    };
    let mut errs = Vec::new();
    match seed_override(seed) {
        Ok(Some(s)) => cfg.seeds = vec![s],
        Ok(None) => {}
        Err(e) => errs.push(e),
    }

    if cfg.horizons.is_empty() {
        errs.push("horizons: must list at least one horizon".into());
    }
    if cfg.horizons.contains(&0) {
        errs.push("horizons: every horizon must be positive".into());
    }
    if cfg.lookback == 0 {
        errs.push("lookback: must be positive".into());
    }
    if cfg.seeds.is_empty() {
        errs.push("seeds: must list at least one seed".into());
    }
    for (key, r) in [
        ("search", cfg.search.validate()),
        ("train", cfg.train.validate()),
        ("prune", cfg.prune.validate()),
    ] {
        if let Err(e) = r {
            errs.push(format!("{key}: {e}"));
        }
    }

    let d = &mut cfg.dataset;
    let kinds = [d.path.is_some(), d.registry.is_some() || d.name.is_some(), d.synthetic.is_some()];
    let mut loaded: Option<(TimeSeriesDataset, String, [f64; 3])> = None;
    if kinds.iter().filter(|&&k| k).count() != 1 {
        errs.push("dataset: set exactly one of dataset.path, dataset.registry + dataset.name, dataset.synthetic".into());
    } else if let Some(p) = d.path.clone() {
        let p = resolve(base, &p);
        if !p.exists() {
            errs.push(format!("dataset.path: {} does not exist", p.display()));
        } else {
            match TimeSeriesDataset::load_csv(&p).and_then(|ds| ds.with_targets(&d.targets)) {
                Ok(ds) => {
                    let name = p.file_stem().map_or("dataset".into(), |s| s.to_string_lossy().into_owned());
                    loaded = Some((ds, name, d.split.unwrap_or(FINAL_RATIOS)));
                }
                Err(e) => errs.push(format!("dataset.path: {e}")),
            }
            d.path = Some(p);
        }
    } else if let Some(s) = &d.synthetic {
        if s.t == 0 || s.n == 0 || !(s.sigma >= 0.0) {
            errs.push("dataset.synthetic: t and n must be positive and sigma non-negative".into());
        } else {
            let ds = make_synthetic(s.kind, s.t, s.n, s.sigma, s.seed);
            let name = serde_json::to_value(s.kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            loaded = Some((ds, name, d.split.unwrap_or(FINAL_RATIOS)));
        }
    } else {
        match (d.registry.clone(), d.name.clone()) {
            (Some(r), Some(name)) => {
                let r = resolve(base, &r);
                if !r.exists() {
                    errs.push(format!("dataset.registry: {} does not exist", r.display()));
                } else {
                    match DatasetRegistry::load(&r).and_then(|reg| reg.get(&name).cloned()) {
                        Ok(entry) if !entry.path.exists() => {
                            errs.push(format!("dataset.registry: entry {name:?} points at missing {}", entry.path.display()))
                        }
                        Ok(mut entry) => {
                            if !d.targets.is_empty() {
                                entry.targets = d.targets.clone();
                            }
                            match entry.load() {
                                Ok(ds) => loaded = Some((ds, name.clone(), d.split.unwrap_or(entry.split))),
                                Err(e) => errs.push(format!("dataset.registry: {e}")),
                            }
                        }
                        Err(e) => errs.push(format!("dataset.registry: {e}")),
                    }
                    d.registry = Some(r);
                }
            }
            (None, _) => errs.push("dataset.registry: required together with dataset.name".into()),
            (_, None) => errs.push("dataset.name: required together with dataset.registry".into()),
        }
    }

    let Some((data, dataset_name, split)) = loaded else {
        return Err(errs);
    };
    if (split.iter().sum::<f64>() - 1.0).abs() > 1e-9 || split.iter().any(|&r| r <= 0.0) {
        errs.push(format!("dataset.split: ratios {split:?} must be positive and sum to 1"));
    }
    let r = Resolved { cfg, data, dataset_name, split };
    if errs.is_empty() {
        for &h in &r.cfg.horizons {
            for p in r.network(h).problems() {
                errs.push(format!("network (horizon {h}): {p}"));
            }
            if let Err(e) = tsnas_core::train::FinalData::new(&r.data, split, r.cfg.lookback, h) {
                errs.push(format!("horizons: {h} does not fit the dataset: {e}"));
            }
        }
    }
    if errs.is_empty() {
        Ok(r)
    } else {
        Err(errs)
    }
}
