//! Whole pipeline on a noisy sine mixture: search → prune → retrain → compare with repeat-last.

use serde::{Deserialize, Serialize};
use tsnas_core::data::{make_synthetic, SyntheticKind, FINAL_RATIOS};
use tsnas_core::pipeline::{search_and_prune, PruneConfig};
use tsnas_core::search::SearchConfig;
use tsnas_core::train::{naive_baselines, train_genotype, FinalData, TrainConfig};
use tsnas_core::{MacroMode, NetworkConfig, Result, SizeClass};

use crate::{timed, SuiteReport};

const INVARIANT: &str = "the retrained genotype beats repeat-last test MSE by at least 20% in at least 4 of 5 seeds";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct E2eConfig {
    pub t: usize,
    pub n: usize,
    pub sigma: f64,
    pub lookback: usize,
    pub horizon: usize,
    pub network: NetworkConfig,
    pub search: SearchConfig,
    pub prune: PruneConfig,
    pub train: TrainConfig,
    /// Required relative improvement over repeat-last.
    pub margin: f64,
}

impl Default for E2eConfig {
    fn default() -> Self {
        let (l, h, n) = (96, 24, 3);
        let mut network = NetworkConfig::new(l, h, n, SizeClass::Small);
        network.mode = MacroMode::Mixed;
        network.n_seq_cells = 1;
        network.n_flat_cells = 1;
        network.n_intermediate = 1;
        network.d_model = 8;
        network.nbeats_width = 64;
        E2eConfig {
            t: 3000,
            n,
            sigma: 0.1,
            lookback: l,
            horizon: h,
            network,
            search: SearchConfig { epochs: 5, batch_size: 16, stride: 4, max_steps_per_epoch: Some(12), ..Default::default() },
            prune: PruneConfig { batch_size: 32, stride: 8, max_batches: Some(2), ..Default::default() },
            train: TrainConfig {
                epochs: 50,
                patience: 5,
                batch_size: 32,
                stride: 2,
                max_steps_per_epoch: Some(20),
                eval_stride: 1,
                ..Default::default()
            },
            margin: 0.2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct E2eRun {
    pub seed: u64,
    pub test_mse: f64,
    pub repeat_last_mse: f64,
    pub improvement: f64,
    pub genotype_hash: String,
    pub genotype: String,
    pub epochs: usize,
    pub seconds: f64,
}

pub fn e2e_run(cfg: &E2eConfig, seed: u64) -> Result<E2eRun> {
    let t0 = std::time::Instant::now();
    let raw = make_synthetic(SyntheticKind::SineMixture, cfg.t, cfg.n, cfg.sigma, seed);
    let data = FinalData::new(&raw, FINAL_RATIOS, cfg.lookback, cfg.horizon)?;
    let scfg = SearchConfig { seed, ..cfg.search.clone() };
    let out = search_and_prune::<f32>(&data, &cfg.network, &scfg, &cfg.prune, "sine_mixture", None, |_| {})?;
    let (rep, _) = train_genotype::<f32>(&out.genotype, &data, &cfg.train, seed, "sine_mixture")?;
    let test = data.windows(data.test.clone(), cfg.lookback, cfg.horizon, cfg.train.eval_stride)?;
    let base = naive_baselines(&test, 1)?.repeat_last.mse;
    Ok(E2eRun {
        seed,
        test_mse: rep.test_mse,
        repeat_last_mse: base,
        improvement: 1.0 - rep.test_mse / base,
        genotype_hash: out.genotype.hash(),
        genotype: out.genotype.describe(),
        epochs: rep.epochs.len(),
        seconds: t0.elapsed().as_secs_f64(),
    })
}

pub fn run_e2e_smoke(cfg: &E2eConfig, seeds: &[u64], min_hits: usize) -> SuiteReport {
    timed(|| {
        let mut r = SuiteReport::new("e2e_smoke");
        let mut runs = Vec::new();
        let mut hits = 0usize;
        let mut failed_to_run = false;
        for &s in seeds {
            match e2e_run(cfg, s) {
                Ok(run) => {
                    let ok = run.improvement >= cfg.margin;
                    hits += ok as usize;
                    r.checks.push(crate::Check {
                        name: format!("seed{s}.improvement"),
                        invariant: format!("test MSE at least {:.0}% below repeat-last", cfg.margin * 100.0),
                        passed: ok,
                        measured: run.improvement,
                        tolerance: cfg.margin,
                        detail: format!("mse {:.4} vs {:.4}", run.test_mse, run.repeat_last_mse),
                    });
                    runs.push(run);
                }
                Err(e) => {
                    failed_to_run = true;
                    r.error(format!("seed{s}"), INVARIANT, e);
                }
            }
        }
        r.passed = !failed_to_run;
        r.at_least("hits", INVARIANT, hits as f64, min_hits as f64, format!("{hits}/{}", seeds.len()));
        r.extra = serde_json::json!({ "config": cfg, "runs": runs });
        r
    })
}

pub const DLINEAR_TOLERANCE: f64 = 1e-3;

/// All-Skip flat cells plus the final Linear: trained on a noiseless trend + seasonal series.
pub fn run_dlinear_reduction(seed: u64) -> SuiteReport {
    use tsnas_core::genotype::Genotype;
    timed(|| {
        let mut r = SuiteReport::new("dlinear_reduction");
        let inv = "the DLinear-reducing flat genotype reaches test MSE <= 1e-3 on a noiseless trend+seasonal series";
        let go = || -> Result<tsnas_core::train::TrainReport> {
            let raw = make_synthetic(SyntheticKind::TrendSeasonal, 2000, 3, 0.0, seed);
            let mut cfg = NetworkConfig::new(96, 24, 3, SizeClass::Small);
            cfg.mode = MacroMode::FlatOnly;
            let g = Genotype::dlinear(&cfg)?;
            let data = FinalData::new(&raw, FINAL_RATIOS, 96, 24)?;
            let tc = TrainConfig { epochs: 30, ..Default::default() };
            Ok(train_genotype::<f32>(&g, &data, &tc, seed, "trend_seasonal")?.0)
        };
        match go() {
            Ok(rep) => {
                r.at_most("test_mse", inv, rep.test_mse, DLINEAR_TOLERANCE, format!("best epoch {:?}", rep.best_epoch));
                r.extra = serde_json::to_value(&rep).unwrap_or_default();
            }
            Err(e) => r.error("train", inv, e),
        }
        r
    })
}
