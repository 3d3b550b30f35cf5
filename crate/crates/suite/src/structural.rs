//! Shape guarantees of every emitted genotype over many short random search runs.

use rand::Rng;
use tsnas_core::cells::{CellTopology, Family};
use tsnas_core::data::{make_synthetic, SyntheticKind, FINAL_RATIOS};
use tsnas_core::genotype::{required_in_edges, CellGenotype, Genotype};
use tsnas_core::ops::DecoderKind;
use tsnas_core::pipeline::{search_and_prune, PruneConfig, SearchOutcome};
use tsnas_core::prune::AuditRecord;
use tsnas_core::search::SearchConfig;
use tsnas_core::train::FinalData;
use tsnas_core::{MacroMode, NetworkConfig, Result};
use tsnas_tensor::rng::seeded;

use crate::{timed, SuiteReport};

const IN_EDGES: &str =
    "every non-input node, the output node included, keeps exactly 2 in-edges (all of them when fewer exist)";
const LINEAR_NO_DEC: &str = "a LinearDecoder genotype carries no Seq-decoder cells";
const DECODER_AFTER_OPS: &str = "the decoder choice is scored after every Seq-decoder edge op";

/// Nodes whose kept in-edge count is wrong; `cell` labels the location.
pub fn in_edge_violations<K: Copy>(label: &str, cell: &CellGenotype<K>, topo: &CellTopology) -> Vec<String> {
    let mut bad = Vec::new();
    for node in topo.n_in..topo.n_nodes() {
        let got = cell.nodes.iter().find(|n| n.node == node).map_or(0, |n| n.inputs.len());
        let want = required_in_edges(node).min(topo.in_edges(node).len());
        let sources_ok = cell
            .nodes
            .iter()
            .find(|n| n.node == node)
            .is_none_or(|n| n.inputs.iter().all(|e| e.source < node));
        if got != want || !sources_ok {
            bad.push(format!("{label} node {node}: {got} in-edges, want {want}"));
        }
    }
    bad
}

pub fn genotype_violations(g: &Genotype) -> Vec<String> {
    let seq_t = g.topology(Family::Enc);
    let flat_t = g.topology(Family::Flat);
    let mut v = Vec::new();
    for (k, c) in g.flat.iter().enumerate() {
        v.extend(in_edge_violations(&format!("flat.c{k}"), c, &flat_t));
    }
    for (k, c) in g.seq_encoder.iter().enumerate() {
        v.extend(in_edge_violations(&format!("enc.c{k}"), c, &seq_t));
    }
    for (k, c) in g.seq_decoder.iter().flatten().enumerate() {
        v.extend(in_edge_violations(&format!("dec.c{k}"), c, &seq_t));
    }
    v
}

/// Position of the decoder record relative to the Seq-decoder op records: `Ok(true)` when ordered.
pub fn decoder_scored_last(audit: &[AuditRecord]) -> bool {
    let last_dec_op = audit.iter().rposition(|a| a.stage == "op" && a.choice_point.starts_with("dec."));
    let first_decoder = audit.iter().position(|a| a.stage == "decoder");
    match (last_dec_op, first_decoder) {
        (Some(o), Some(d)) => d > o,
        (Some(_), None) => false,
        _ => true,
    }
}

/// A random tiny configuration; `i` cycles the macro mode so every mode is exercised.
pub fn random_tiny_config(i: usize, rng: &mut impl Rng) -> NetworkConfig {
    const MODES: [MacroMode; 5] =
        [MacroMode::Mixed, MacroMode::SeqOnly, MacroMode::Parallel, MacroMode::NoWeights, MacroMode::FlatOnly];
    let mut cfg = NetworkConfig::tiny(8, 4, 2);
    cfg.mode = MODES[i % MODES.len()];
    cfg.n_intermediate = rng.random_range(1..=3);
    cfg.n_seq_cells = rng.random_range(1..=2);
    cfg.n_flat_cells = rng.random_range(1..=2);
    cfg
}

pub fn tiny_search(cfg: &NetworkConfig, seed: u64) -> Result<SearchOutcome> {
    let ds = make_synthetic(SyntheticKind::SineMixture, 240, cfg.n_targets, 0.1, seed);
    let data = FinalData::new(&ds, FINAL_RATIOS, cfg.lookback, cfg.horizon)?;
    let scfg = SearchConfig { epochs: 1, batch_size: 8, max_steps_per_epoch: Some(3), seed, ..Default::default() };
    let pcfg = PruneConfig { batch_size: 8, max_batches: Some(1), ..Default::default() };
    search_and_prune::<f64>(&data, cfg, &scfg, &pcfg, "sine_mixture", None, |_| {})
}

pub fn run_structural_suite(runs: usize, seed: u64) -> SuiteReport {
    timed(|| {
        let mut r = SuiteReport::new("structural");
        let mut rng = seeded(seed);
        let (mut ok_edges, mut ok_linear, mut ok_order, mut ok_valid) = (0usize, 0usize, 0usize, 0usize);
        let mut first_bad: Vec<String> = Vec::new();
        let mut decoders = [0usize; 3];
        for i in 0..runs {
            let cfg = random_tiny_config(i, &mut rng);
            let s: u64 = rng.random();
            let out = match tiny_search(&cfg, s) {
                Ok(o) => o,
                Err(e) => {
                    first_bad.push(format!("run{i}: {e}"));
                    continue;
                }
            };
            let g = &out.genotype;
            let v = genotype_violations(g);
            ok_edges += v.is_empty() as usize;
            first_bad.extend(v.into_iter().map(|m| format!("run{i}: {m}")));
            let linear_ok = g.decoder_kind != Some(DecoderKind::LinearDecoder) || g.seq_decoder.is_none();
            ok_linear += linear_ok as usize;
            let order_ok = decoder_scored_last(&out.audit);
            ok_order += order_ok as usize;
            let problems = g.problems();
            ok_valid += problems.is_empty() as usize;
            first_bad.extend(problems.into_iter().map(|m| format!("run{i}: {m}")));
            decoders[match g.decoder_kind {
                None => 0,
                Some(DecoderKind::LinearDecoder) => 1,
                Some(DecoderKind::SeqDecoder) => 2,
            }] += 1;
        }
        let n = runs as f64;
        let detail = first_bad.first().cloned().unwrap_or_default();
        r.at_least("in_edges", IN_EDGES, ok_edges as f64, n, detail.clone());
        r.at_least("linear_decoder", LINEAR_NO_DEC, ok_linear as f64, n, "");
        r.at_least("decoder_order", DECODER_AFTER_OPS, ok_order as f64, n, "");
        r.at_least("validates", "every emitted genotype passes its own validation", ok_valid as f64, n, detail);
        r.extra = serde_json::json!({
            "runs": runs,
            "decoder_none": decoders[0],
            "decoder_linear": decoders[1],
            "decoder_seq": decoders[2],
            "problems": first_bad,
        });
        r
    })
}
