use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cells::{CellTopology, Family};
use crate::config::{MacroMode, NetworkConfig};
use crate::error::{CoreError, Result};
use crate::ops::{DecoderKind, FlatOpKind, HeadKind, SeqOpKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeChoice<K> {
    pub source: usize,
    pub op: K,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeGenotype<K> {
    pub node: usize,
    pub inputs: Vec<EdgeChoice<K>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellGenotype<K> {
    pub nodes: Vec<NodeGenotype<K>>,
}

impl<K: Copy> CellGenotype<K> {
    /// Op on edge (dest, src), if kept.
    pub fn op(&self, dest: usize, src: usize) -> Option<K> {
        self.nodes.iter().find(|n| n.node == dest)?.inputs.iter().find(|e| e.source == src).map(|e| e.op)
    }

    /// Per topology edge: the kept op or `None`.
    pub fn per_edge(&self, topo: &CellTopology) -> Vec<Option<K>> {
        topo.edges().iter().map(|&(d, s)| self.op(d, s)).collect()
    }

    pub fn from_edges(topo: &CellTopology, ops: &[Option<K>]) -> Self {
        let edges = topo.edges();
        let nodes = (topo.n_in..topo.n_nodes())
            .map(|i| NodeGenotype {
                node: i,
                inputs: edges
                    .iter()
                    .zip(ops)
                    .filter(|((d, _), o)| *d == i && o.is_some())
                    .map(|((_, s), o)| EdgeChoice { source: *s, op: o.expect("filtered") })
                    .collect(),
            })
            .collect();
        CellGenotype { nodes }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seed: u64,
    pub dataset: String,
    /// Wall-clock stamps are opt-in so identical runs serialise identically.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created: Option<String>,
}

/// A discrete architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Genotype {
    pub search_space: NetworkConfig,
    pub seq_encoder: Vec<CellGenotype<SeqOpKind>>,
    pub seq_decoder: Option<Vec<CellGenotype<SeqOpKind>>>,
    pub flat: Vec<CellGenotype<FlatOpKind>>,
    pub decoder_kind: Option<DecoderKind>,
    pub head_kind: Option<HeadKind>,
    /// [w_seq, w_flat]
    pub macro_weights: [f64; 2],
    pub provenance: Provenance,
}

/// Kept in-edges a node must have: two, or all of them when fewer exist.
pub fn required_in_edges(node: usize) -> usize {
    node.min(2)
}

fn check_cell<K: Copy + PartialEq + std::fmt::Debug>(
    what: &str,
    cell: &CellGenotype<K>,
    topo: &CellTopology,
    allowed: &[K],
    errs: &mut Vec<String>,
) {
    let want: Vec<usize> = (topo.n_in..topo.n_nodes()).collect();
    let got: Vec<usize> = cell.nodes.iter().map(|n| n.node).collect();
    if got != want {
        errs.push(format!("{what}: nodes {got:?}, expected {want:?}"));
        return;
    }
    for n in &cell.nodes {
        let need = required_in_edges(n.node);
        if n.inputs.len() != need {
            errs.push(format!("{what}: node {} keeps {} in-edges, expected {need}", n.node, n.inputs.len()));
        }
        let mut srcs: Vec<usize> = n.inputs.iter().map(|e| e.source).collect();
        srcs.sort();
        srcs.dedup();
        if srcs.len() != n.inputs.len() {
            errs.push(format!("{what}: node {} repeats a source", n.node));
        }
        for e in &n.inputs {
            if e.source >= n.node {
                errs.push(format!("{what}: node {} reads from node {} which does not precede it", n.node, e.source));
            }
            if !allowed.contains(&e.op) {
                errs.push(format!("{what}: node {} uses {:?}, not a configured candidate", n.node, e.op));
            }
        }
    }
}

impl Genotype {
    pub fn problems(&self) -> Vec<String> {
        let cfg = &self.search_space;
        let mut errs = cfg.problems();
        if cfg.n_intermediate == 0 {
            return errs;
        }
        let mode = cfg.mode;
        let seq_t = CellTopology { n_in: 2, n_intermediate: cfg.n_intermediate };
        let flat_t = CellTopology { n_in: 1, n_intermediate: cfg.n_intermediate };
        let want_flat = if mode.has_flat() { cfg.n_flat_cells } else { 0 };
        let want_seq = if mode.has_seq() { cfg.n_seq_cells } else { 0 };
        if self.flat.len() != want_flat {
            errs.push(format!("flat: {} cells, expected {want_flat}", self.flat.len()));
        }
        if self.seq_encoder.len() != want_seq {
            errs.push(format!("seq_encoder: {} cells, expected {want_seq}", self.seq_encoder.len()));
        }
        for (k, c) in self.flat.iter().enumerate() {
            check_cell(&format!("flat[{k}]"), c, &flat_t, &cfg.flat_candidates, &mut errs);
        }
        for (k, c) in self.seq_encoder.iter().enumerate() {
            check_cell(&format!("seq_encoder[{k}]"), c, &seq_t, &cfg.seq_candidates, &mut errs);
        }
        match (mode.has_seq(), self.decoder_kind, &self.seq_decoder) {
            (false, None, None) => {}
            (false, _, _) => errs.push(format!("{mode:?} has no Seq path but names a decoder")),
            (true, None, _) => errs.push("decoder_kind missing".into()),
            (true, Some(DecoderKind::LinearDecoder), Some(_)) => {
                errs.push("LinearDecoder genotype must not carry seq_decoder cells".into())
            }
            (true, Some(DecoderKind::SeqDecoder), None) => errs.push("SeqDecoder genotype lacks seq_decoder cells".into()),
            (true, Some(DecoderKind::SeqDecoder), Some(dec)) => {
                if dec.len() != want_seq {
                    errs.push(format!("seq_decoder: {} cells, expected {want_seq}", dec.len()));
                }
                for (k, c) in dec.iter().enumerate() {
                    check_cell(&format!("seq_decoder[{k}]"), c, &seq_t, &cfg.seq_candidates, &mut errs);
                }
            }
            (true, Some(DecoderKind::LinearDecoder), None) => {}
        }
        match (mode.has_seq(), self.head_kind) {
            (true, None) => errs.push("head_kind missing".into()),
            (false, Some(_)) => errs.push("FlatOnly genotype must not name a head".into()),
            (true, Some(h)) if !cfg.head_candidates.contains(&h) => errs.push(format!("head {h:?} not a candidate")),
            _ => {}
        }
        let w = self.macro_weights;
        if !w.iter().all(|x| x.is_finite() && *x >= 0.0) {
            errs.push(format!("macro_weights {w:?} must be finite and nonnegative"));
        }
        let pinned = match mode {
            MacroMode::FlatOnly => Some([0.0, 1.0]),
            MacroMode::SeqOnly => Some([1.0, 0.0]),
            MacroMode::NoWeights => Some([1.0, 1.0]),
            _ => None,
        };
        if let Some(p) = pinned {
            if w != p {
                errs.push(format!("{mode:?} requires macro_weights {p:?}, got {w:?}"));
            }
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Genotype(p.join("; ")))
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("genotype serialises")
    }

    /// Parses and validates; schema errors carry a JSON pointer to the offending field.
    pub fn from_json(s: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(s);
        let g: Genotype = serde_path_to_error::deserialize(de).map_err(|e| {
            let ptr = json_pointer(e.path());
            CoreError::Genotype(format!("at {ptr}: {}", e.inner()))
        })?;
        g.validate()?;
        Ok(g)
    }

    /// SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_json().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn topology(&self, family: Family) -> CellTopology {
        CellTopology { n_in: family.n_in(), n_intermediate: self.search_space.n_intermediate }
    }

    /// Flat genotype of Skip edges (each node keeps its two latest inputs) with a single
    /// Linear on the last cell's edge from its final intermediate node to the output.
    pub fn dlinear(cfg: &NetworkConfig) -> Result<Self> {
        let mut cfg = cfg.clone();
        cfg.mode = MacroMode::FlatOnly;
        let t = CellTopology { n_in: 1, n_intermediate: cfg.n_intermediate };
        let kept = keep_last_two(&t);
        let flat = (0..cfg.n_flat_cells)
            .map(|k| {
                let ops: Vec<Option<FlatOpKind>> = t
                    .edges()
                    .iter()
                    .zip(&kept)
                    .map(|(&(d, s), &keep)| {
                        keep.then(|| {
                            let last = k + 1 == cfg.n_flat_cells && d == t.output_node() && s == d - 1;
                            if last { FlatOpKind::Linear } else { FlatOpKind::Skip }
                        })
                    })
                    .collect();
                CellGenotype::from_edges(&t, &ops)
            })
            .collect();
        let g = Genotype {
            search_space: cfg,
            seq_encoder: vec![],
            seq_decoder: None,
            flat,
            decoder_kind: None,
            head_kind: None,
            macro_weights: [0.0, 1.0],
            provenance: Provenance::default(),
        };
        g.validate()?;
        Ok(g)
    }

    /// A uniformly drawn legal genotype for the configured space.
    pub fn random(cfg: &NetworkConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mode = cfg.mode;
        let seq_t = CellTopology { n_in: 2, n_intermediate: cfg.n_intermediate };
        let flat_t = CellTopology { n_in: 1, n_intermediate: cfg.n_intermediate };
        fn cell<K: Copy>(t: &CellTopology, cands: &[K], rng: &mut impl Rng) -> CellGenotype<K> {
            let mut ops = vec![None; t.n_edges()];
            for i in t.n_in..t.n_nodes() {
                let ins = t.in_edges(i);
                let keep: Vec<usize> = ins.choose_multiple(rng, required_in_edges(i)).copied().collect();
                for e in keep {
                    ops[e] = Some(*cands.choose(rng).expect("non-empty"));
                }
            }
            CellGenotype::from_edges(t, &ops)
        }
        let n_seq = if mode.has_seq() { cfg.n_seq_cells } else { 0 };
        let n_flat = if mode.has_flat() { cfg.n_flat_cells } else { 0 };
        let flat = (0..n_flat).map(|_| cell(&flat_t, &cfg.flat_candidates, rng)).collect();
        let seq_encoder = (0..n_seq).map(|_| cell(&seq_t, &cfg.seq_candidates, rng)).collect();
        let (decoder_kind, seq_decoder, head_kind) = if mode.has_seq() {
            let dk = *DecoderKind::ALL.choose(rng).expect("two");
            let dec = (dk == DecoderKind::SeqDecoder).then(|| (0..n_seq).map(|_| cell(&seq_t, &cfg.seq_candidates, rng)).collect());
            (Some(dk), dec, Some(*cfg.head_candidates.choose(rng).expect("non-empty")))
        } else {
            (None, None, None)
        };
        let macro_weights = match mode {
            MacroMode::FlatOnly => [0.0, 1.0],
            MacroMode::SeqOnly => [1.0, 0.0],
            MacroMode::NoWeights => [1.0, 1.0],
            _ => {
                let a: f64 = rng.random_range(0.05..0.95);
                [a, 1.0 - a]
            }
        };
        let g = Genotype {
            search_space: cfg.clone(),
            seq_encoder,
            seq_decoder,
            flat,
            decoder_kind,
            head_kind,
            macro_weights,
            provenance: Provenance::default(),
        };
        g.validate()?;
        Ok(g)
    }

    /// Human-readable dump.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mode: {:?}", self.search_space.mode);
        let mut cells = |title: &str, cs: &[(usize, Vec<(usize, Vec<(usize, &str)>)>)]| {
            for (k, nodes) in cs {
                let _ = writeln!(s, "{title} cell {k}:");
                for (node, ins) in nodes {
                    let list: Vec<String> = ins.iter().map(|(src, op)| format!("{src} --{op}-->")).collect();
                    let _ = writeln!(s, "  node {node} <- {}", list.join(", "));
                }
            }
        };
        cells("flat", &summarise(&self.flat, |k| k.name()));
        cells("seq encoder", &summarise(&self.seq_encoder, |k| k.name()));
        if let Some(dec) = &self.seq_decoder {
            cells("seq decoder", &summarise(dec, |k| k.name()));
        }
        let _ = writeln!(s, "decoder: {}", self.decoder_kind.map_or("none", |d| d.name()));
        let _ = writeln!(s, "head: {}", self.head_kind.map_or("none", |h| h.name()));
        let _ = writeln!(s, "macro weights: seq {:.6}, flat {:.6}", self.macro_weights[0], self.macro_weights[1]);
        s
    }

    /// Graphviz description: one cluster per cell, edges labelled by op.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph genotype {\n  rankdir=LR;\n");
        let mut emit = |tag: &str, cs: &[(usize, Vec<(usize, Vec<(usize, &str)>)>)]| {
            for (k, nodes) in cs {
                let _ = writeln!(s, "  subgraph cluster_{tag}_{k} {{\n    label=\"{tag} {k}\";");
                for (node, ins) in nodes {
                    for (src, op) in ins {
                        let _ = writeln!(s, "    {tag}_{k}_n{src} -> {tag}_{k}_n{node} [label=\"{op}\"];");
                    }
                }
                s.push_str("  }\n");
            }
        };
        emit("flat", &summarise(&self.flat, |k| k.name()));
        emit("enc", &summarise(&self.seq_encoder, |k| k.name()));
        if let Some(dec) = &self.seq_decoder {
            emit("dec", &summarise(dec, |k| k.name()));
        }
        s.push_str("}\n");
        s
    }
}

type Summary<'a> = Vec<(usize, Vec<(usize, Vec<(usize, &'a str)>)>)>;

fn summarise<K: Copy>(cells: &[CellGenotype<K>], name: impl Fn(K) -> &'static str) -> Summary<'static> {
    cells
        .iter()
        .enumerate()
        .map(|(k, c)| (k, c.nodes.iter().map(|n| (n.node, n.inputs.iter().map(|e| (e.source, name(e.op))).collect())).collect()))
        .collect()
}

/// Keeps, for every node, its last `required_in_edges` in-edges.
fn keep_last_two(t: &CellTopology) -> Vec<bool> {
    let mut keep = vec![false; t.n_edges()];
    for i in t.n_in..t.n_nodes() {
        let ins = t.in_edges(i);
        for &e in &ins[ins.len() - required_in_edges(i)..] {
            keep[e] = true;
        }
    }
    keep
}

fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut s = String::new();
    for seg in path.iter() {
        s.push('/');
        match seg {
            Segment::Seq { index } => s.push_str(&index.to_string()),
            Segment::Map { key } => s.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => s.push_str(variant),
            Segment::Unknown => s.push('?'),
        }
    }
    if s.is_empty() {
        s.push('/');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use tsnas_tensor::rng::seeded;

    #[test]
    fn random_genotypes_are_valid_and_round_trip() {
        let mut rng = seeded(1);
        for mode in [MacroMode::Mixed, MacroMode::FlatOnly, MacroMode::SeqOnly, MacroMode::Parallel, MacroMode::NoWeights] {
            let mut cfg = NetworkConfig::tiny(8, 4, 2);
            cfg.mode = mode;
            for _ in 0..5 {
                let g = Genotype::random(&cfg, &mut rng).unwrap();
                let back = Genotype::from_json(&g.to_json()).unwrap();
                assert_eq!(back, g);
                assert_eq!(back.hash(), g.hash());
            }
        }
    }

    #[test]
    fn corrupt_field_is_named() {
        let g = Genotype::dlinear(&NetworkConfig::tiny(8, 4, 2)).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&g.to_json()).unwrap();
        v["flat"][0]["nodes"][0]["inputs"][0]["op"] = "Bogus".into();
        let bad = v.to_string();
        let err = Genotype::from_json(&bad).unwrap_err().to_string();
        assert!(err.contains("/flat/0/nodes/0/inputs/0/op"), "{err}");
    }

    #[test]
    fn linear_decoder_with_cells_is_rejected() {
        let mut cfg = NetworkConfig::tiny(8, 4, 2);
        cfg.mode = MacroMode::SeqOnly;
        let mut rng = seeded(2);
        let mut g = Genotype::random(&cfg, &mut rng).unwrap();
        g.decoder_kind = Some(DecoderKind::LinearDecoder);
        g.seq_decoder = Some(g.seq_encoder.clone());
        assert!(g.problems().iter().any(|p| p.contains("LinearDecoder")));
    }

    #[test]
    fn dlinear_shape() {
        let g = Genotype::dlinear(&NetworkConfig::tiny(8, 4, 2)).unwrap();
        let ops: Vec<FlatOpKind> = g.flat.iter().flat_map(|c| c.nodes.iter().flat_map(|n| n.inputs.iter().map(|e| e.op))).collect();
        assert_eq!(ops.iter().filter(|&&o| o == FlatOpKind::Linear).count(), 1);
        assert_eq!(g.flat[1].op(3, 2), Some(FlatOpKind::Linear));
        let dump = g.describe();
        assert!(!dump.contains("NBeats") && !dump.contains("TCN"));
    }
}
