//! A supernet with one-hot logits must compute exactly what the discretised model computes.

use rand::Rng;
use tsnas_core::arch::{Point, PointState};
use tsnas_core::cells::Family;
use tsnas_core::genotype::Genotype;
use tsnas_core::network::Batch;
use tsnas_core::nn::Ctx;
use tsnas_core::{MacroMode, Network, NetworkConfig, Result};
use tsnas_tensor::rng::seeded;
use tsnas_tensor::{ParamRole, Tape, Tensor};

use crate::gradcheck::uniform_in;
use crate::{timed, SuiteReport};

pub const EQUIV_TOLERANCE: f64 = 1e-5;
/// Logit gap between the chosen candidate and the rest.
pub const LOGIT_GAP: f64 = 40.0;

const INVARIANT: &str = "supernet forward with one-hot logits (gap >= 40) equals the discretised model forward within 1e-5";

pub const MODES: [MacroMode; 5] =
    [MacroMode::Mixed, MacroMode::Parallel, MacroMode::NoWeights, MacroMode::FlatOnly, MacroMode::SeqOnly];

/// Two cells per family, two intermediate nodes, d = 4.
pub fn tiny_space(mode: MacroMode) -> NetworkConfig {
    let mut cfg = NetworkConfig::tiny(8, 4, 2);
    cfg.mode = mode;
    cfg.n_seq_cells = 2;
    cfg.n_flat_cells = 2;
    cfg.n_intermediate = 2;
    cfg.d_model = 4;
    cfg
}

fn one_hot_logits(n: usize, i: usize) -> Tensor<f64> {
    Tensor::new(&[n], (0..n).map(|k| if k == i { LOGIT_GAP } else { 0.0 }).collect()).expect("shape")
}

/// Sets the supernet logits so that softmax picks `g` at every choice point; dropped edges are masked.
pub fn encode_genotype(net: &mut Network<f64>, g: &Genotype) -> Result<()> {
    let seq_t = net.seq_topology();
    let flat_t = net.flat_topology();
    let mut choices: Vec<(Point, Option<usize>)> = Vec::new();
    for (k, cell) in g.flat.iter().enumerate() {
        for (e, op) in cell.per_edge(&flat_t).into_iter().enumerate() {
            let pos = op.map(|o| net.plan.flat[k][e].iter().position(|&c| c == o).expect("candidate"));
            choices.push((Point::edge(Family::Flat, k, e), pos));
        }
    }
    for (k, cell) in g.seq_encoder.iter().enumerate() {
        for (e, op) in cell.per_edge(&seq_t).into_iter().enumerate() {
            let pos = op.map(|o| net.plan.enc[k][e].iter().position(|&c| c == o).expect("candidate"));
            choices.push((Point::edge(Family::Enc, k, e), pos));
        }
    }
    for (k, cell) in g.seq_decoder.iter().flatten().enumerate() {
        for (e, op) in cell.per_edge(&seq_t).into_iter().enumerate() {
            let pos = op.map(|o| net.plan.dec[k][e].iter().position(|&c| c == o).expect("candidate"));
            choices.push((Point::edge(Family::Dec, k, e), pos));
        }
    }
    if let Some(d) = g.decoder_kind {
        choices.push((Point::Decoder, net.plan.decoders.iter().position(|&c| c == d)));
    }
    if let Some(h) = g.head_kind {
        choices.push((Point::Head, net.plan.heads.iter().position(|&c| c == h)));
    }
    for (p, pos) in choices {
        match (pos, net.arch.logits.get(&p).copied()) {
            (None, _) => {
                net.arch.set(p, Some(PointState::Masked));
            }
            (Some(i), Some(id)) => net.store.set_value(id, one_hot_logits(net.n_candidates(p), i))?,
            // A single candidate has no logits.
            (Some(_), None) => {}
        }
    }
    if let Some(&id) = net.arch.logits.get(&Point::Macro) {
        let w = g.macro_weights;
        net.store.set_value(id, Tensor::new(&[2], vec![w[0].ln(), w[1].ln()])?)?;
    }
    Ok(())
}

pub fn random_batch(cfg: &NetworkConfig, b: usize, rng: &mut tsnas_tensor::rng::NamedRng) -> Batch<f64> {
    let (l, h, n, f) = (cfg.lookback, cfg.horizon, cfg.n_targets, cfg.n_features);
    let feats = |t: usize, rng: &mut tsnas_tensor::rng::NamedRng| (f > 0).then(|| uniform_in(&[b, t, f], -1.0, 1.0, rng));
    Batch {
        past: uniform_in(&[b, l, n], -2.0, 2.0, rng),
        future: uniform_in(&[b, h, n], -2.0, 2.0, rng),
        past_feats: feats(l, rng),
        future_feats: feats(h, rng),
        starts: (0..b).collect(),
    }
}

fn eval_point(net: &Network<f64>, batch: &Batch<f64>) -> Result<(Vec<f64>, f64)> {
    let tape = Tape::no_grad();
    let ctx = Ctx::eval(&tape, &net.store);
    let out = net.forward(&ctx, batch)?;
    Ok((out.point.value().to_f64_vec(), out.loss.value().to_f64_vec()[0]))
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub max_diff: f64,
    pub loss_diff: f64,
    /// Discrete weights that had no same-named, same-shaped supernet counterpart.
    pub uncopied: usize,
}

/// Builds both models for `g` with shared weights and compares their eval-mode forecasts.
pub fn compare(g: &Genotype, seed: u64) -> Result<Comparison> {
    let mut sup = Network::<f64>::supernet(&g.search_space, seed)?;
    encode_genotype(&mut sup, g)?;
    let mut disc = Network::<f64>::from_genotype(g, seed ^ 0x5A5A)?;
    let copied = disc.store.copy_matching_from(&sup.store);
    let uncopied = disc.store.len() - copied;
    debug_assert!(disc.store.ids_with_role(ParamRole::Architecture).is_empty());
    let mut rng = seeded(seed ^ 0xBA7C);
    let batch = random_batch(&g.search_space, 3, &mut rng);
    let (a, la) = eval_point(&sup, &batch)?;
    let (b, lb) = eval_point(&disc, &batch)?;
    let max_diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    Ok(Comparison { max_diff, loss_diff: (la - lb).abs(), uncopied })
}

/// `n` random genotypes drawn round-robin over the macro modes.
pub fn run_equivalence_suite(n: usize, seed: u64) -> SuiteReport {
    timed(|| {
        let mut r = SuiteReport::new("equivalence");
        let mut rng = seeded(seed);
        let mut rows = Vec::new();
        for i in 0..n {
            let mode = MODES[i % MODES.len()];
            let cfg = tiny_space(mode);
            let name = format!("genotype{i}.{mode:?}");
            let g = match Genotype::random(&cfg, &mut rng) {
                Ok(g) => g,
                Err(e) => {
                    r.error(&name, INVARIANT, e);
                    continue;
                }
            };
            let s: u64 = rng.random();
            match compare(&g, s) {
                Ok(c) => {
                    r.at_most(&name, INVARIANT, c.max_diff, EQUIV_TOLERANCE, g.describe());
                    r.at_most(
                        format!("{name}.weights_shared"),
                        "every discrete weight has a supernet counterpart",
                        c.uncopied as f64,
                        0.0,
                        "",
                    );
                    rows.push(serde_json::json!({
                        "mode": format!("{mode:?}"),
                        "hash": g.hash(),
                        "max_abs_diff": c.max_diff,
                        "loss_diff": c.loss_diff,
                    }));
                }
                Err(e) => r.error(&name, INVARIANT, e),
            }
        }
        r.extra = serde_json::Value::Array(rows);
        r
    })
}
