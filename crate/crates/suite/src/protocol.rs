//! Run-protocol guarantees: reproducibility, inference-mode architecture steps, profiling sanity.

use rand::Rng;
use tsnas_core::data::{make_synthetic, SyntheticKind, FINAL_RATIOS};
use tsnas_core::genotype::Genotype;
use tsnas_core::nn::Ctx;
use tsnas_core::pipeline::{search_and_prune, PruneConfig};
use tsnas_core::search::{SearchConfig, SearchData, SearchState};
use tsnas_core::train::{at_geometry, profile, train_genotype, FinalData, TrainConfig, TrainReport};
use tsnas_core::{MacroMode, Network, NetworkConfig, Result, SizeClass};
use tsnas_tensor::rng::seeded;
use tsnas_tensor::{ParamRole, Tape};

use crate::{timed, SuiteReport};

pub const METRIC_TOLERANCE: f64 = 1e-7;

/// Search → prune → retrain at f32, returning the genotype JSON and the training report.
pub fn pipeline_once(seed: u64) -> Result<(String, String, TrainReport)> {
    let mut cfg = NetworkConfig::tiny(16, 8, 2);
    cfg.mode = MacroMode::Mixed;
    cfg.n_intermediate = 1;
    cfg.n_seq_cells = 1;
    cfg.n_flat_cells = 1;
    let ds = make_synthetic(SyntheticKind::SineMixture, 400, 2, 0.1, seed);
    let data = FinalData::new(&ds, FINAL_RATIOS, cfg.lookback, cfg.horizon)?;
    let scfg = SearchConfig { epochs: 2, batch_size: 8, max_steps_per_epoch: Some(4), seed, ..Default::default() };
    let pcfg = PruneConfig { batch_size: 8, max_batches: Some(2), ..Default::default() };
    let out = search_and_prune::<f32>(&data, &cfg, &scfg, &pcfg, "sine_mixture", None, |_| {})?;
    let tc = TrainConfig { epochs: 3, batch_size: 8, max_steps_per_epoch: Some(6), eval_stride: 4, ..Default::default() };
    let (rep, _) = train_genotype::<f32>(&out.genotype, &data, &tc, seed, "sine_mixture")?;
    Ok((out.genotype.to_json(), out.genotype.hash(), rep))
}

fn metric_gap(a: &TrainReport, b: &TrainReport) -> f64 {
    let mut d = [(a.test_mse, b.test_mse), (a.test_mae, b.test_mae), (a.best_val_mse, b.best_val_mse)]
        .iter()
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    if a.epochs.len() != b.epochs.len() {
        return f64::INFINITY;
    }
    for (x, y) in a.epochs.iter().zip(&b.epochs) {
        d = d.max((x.train_loss - y.train_loss).abs()).max((x.val_mse - y.val_mse).abs());
    }
    d
}

pub fn run_determinism_suite(seed: u64) -> SuiteReport {
    timed(|| {
        let mut r = SuiteReport::new("determinism");
        let inv = "identical seed and config give a hash-identical genotype JSON";
        match (pipeline_once(seed), pipeline_once(seed)) {
            (Ok((ja, ha, ra)), Ok((jb, hb, rb))) => {
                r.push("genotype_json", inv, ja == jb && ha == hb, (ja != jb) as u8 as f64, 0.0, ha.clone());
                r.at_most(
                    "train_metrics",
                    "identical seed and config give train metrics within 1e-7 (single-threaded f32)",
                    metric_gap(&ra, &rb),
                    METRIC_TOLERANCE,
                    format!("test mse {}", ra.test_mse),
                );
                r.extra = serde_json::json!({ "hash": ha, "test_mse": ra.test_mse });
            }
            (Err(e), _) | (_, Err(e)) => r.error("pipeline", inv, e),
        }
        r
    })
}

fn eval_mode_config() -> NetworkConfig {
    let mut cfg = NetworkConfig::tiny(16, 8, 2);
    cfg.mode = MacroMode::Mixed;
    cfg.n_intermediate = 2;
    cfg.dropout = 0.5;
    cfg
}

/// Two architecture steps from the same state on the same batch, with training-grade dropout configured.
pub fn run_eval_mode_suite(seed: u64) -> SuiteReport {
    timed(|| {
        let mut r = SuiteReport::new("eval_mode");
        let inv_loss = "two architecture steps on the same batch produce identical validation losses";
        let inv_w = "weight tensors are bit-unchanged by architecture steps";
        let cfg = eval_mode_config();
        let go = || -> Result<(f64, f64, f64, bool, bool, f64)> {
            let ds = make_synthetic(SyntheticKind::SineMixture, 300, 2, 0.1, seed);
            let data = SearchData::new(&ds, ds.len(), &cfg, 1)?;
            let scfg = SearchConfig { seed, batch_size: 8, ..Default::default() };
            let mut state = SearchState::<f64>::new(&cfg, &scfg)?;
            // Move the weights off their initialisation so dropout has something to perturb.
            let train = data.train.batches::<f64>(8, None);
            for b in train.iter().take(3) {
                state.weight_step(b)?;
            }
            let batch = data.val.batches::<f64>(8, None).remove(0);
            let before = state.net.store.clone();
            let mut twin = SearchState::<f64>::new(&cfg, &scfg)?;
            twin.net.store = before.clone();
            // Advance the twin's stochastic stream: an eval-mode step must not depend on it.
            for _ in 0..5 {
                let _: u64 = twin.rng.random();
            }
            let a = state.arch_step(&batch)?;
            let b = twin.arch_step(&batch)?;
            let tape = Tape::no_grad();
            let inference = state_free_loss(&before, &state.net, &batch, &tape)?;

            let weights_same = before
                .ids_with_role(ParamRole::Weight)
                .into_iter()
                .all(|id| before.value(id).bit_eq(state.net.store.value(id)));
            let arch_moved = before
                .ids_with_role(ParamRole::Architecture)
                .into_iter()
                .any(|id| !before.value(id).bit_eq(state.net.store.value(id)));
            // Sensitivity: train-mode forwards with different seeds do differ.
            let t1 = train_loss(&state.net, &batch, 1)?;
            let t2 = train_loss(&state.net, &batch, 2)?;
            Ok((a, b, inference, weights_same, arch_moved, (t1 - t2).abs()))
        };
        match go() {
            Ok((a, b, inf, same, moved, spread)) => {
                r.at_most("identical_losses", inv_loss, (a - b).abs(), 0.0, format!("{a}"));
                r.at_most("inference_loss", "the architecture-step loss is the inference-mode loss", (a - inf).abs(), 0.0, "");
                r.push("weights_unchanged", inv_w, same, (!same) as u8 as f64, 0.0, "");
                r.push("arch_updated", "architecture logits do move", moved, moved as u8 as f64, 1.0, "");
                r.at_least("dropout_active", "train-mode forwards with different seeds disagree", spread, 1e-12, "");
            }
            Err(e) => r.error("arch_step", inv_loss, e),
        }
        r
    })
}

fn state_free_loss(
    store: &tsnas_tensor::ParamStore<f64>,
    net: &Network<f64>,
    batch: &tsnas_core::Batch<f64>,
    tape: &Tape<f64>,
) -> Result<f64> {
    let ctx = Ctx::eval(tape, store);
    Ok(net.forward(&ctx, batch)?.loss.value().to_f64_vec()[0])
}

fn train_loss(net: &Network<f64>, batch: &tsnas_core::Batch<f64>, seed: u64) -> Result<f64> {
    let tape = Tape::no_grad();
    let ctx = Ctx::new(&tape, &net.store, true, None, seed);
    Ok(net.forward(&ctx, batch)?.loss.value().to_f64_vec()[0])
}

pub const PROFILE_BATCHES: [usize; 3] = [8, 16, 32];

/// Parameter counts plus forward timing over batch sizes at lookback 96 / horizon 96.
pub fn run_profiling_suite(seed: u64, reps: usize) -> SuiteReport {
    timed(|| {
        let mut r = SuiteReport::new("profiling");
        let mut cfg = NetworkConfig::new(96, 96, 3, SizeClass::Small);
        cfg.mode = MacroMode::Mixed;
        let go = || -> Result<(usize, usize, Vec<f64>, Vec<usize>)> {
            let mut rng = seeded(seed);
            let g = at_geometry(&Genotype::random(&cfg, &mut rng)?, 96, 96);
            let sup = Network::<f32>::supernet(&g.search_space, seed)?.param_count();
            let net = Network::<f32>::from_genotype(&g, seed)?;
            let mut ms = Vec::new();
            let mut batches = Vec::new();
            for b in PROFILE_BATCHES {
                let p = profile(&net, b, reps)?;
                ms.push(p.forward_ms);
                batches.push(p.batch);
            }
            Ok((net.param_count(), sup, ms, batches))
        };
        match go() {
            Ok((disc, sup, ms, batches)) => {
                r.push(
                    "param_count",
                    "the discretised genotype has strictly fewer parameters than its supernet",
                    disc < sup,
                    disc as f64,
                    sup as f64,
                    format!("{disc} vs {sup}"),
                );
                let worst_drop = ms.windows(2).map(|w| w[0] - w[1]).fold(f64::NEG_INFINITY, f64::max);
                r.push(
                    "monotone_forward",
                    "median forward time is non-decreasing in batch size over {8, 16, 32}",
                    worst_drop <= 0.0,
                    worst_drop,
                    0.0,
                    format!("{ms:?} ms"),
                );
                r.extra = serde_json::json!({ "params": disc, "supernet_params": sup, "batches": batches, "forward_ms": ms });
            }
            Err(e) => r.error("profile", "profile completes at B=32, L=96, H=96", e),
        }
        r
    })
}
