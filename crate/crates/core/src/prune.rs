use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tsnas_tensor::{Element, Tape};

use crate::arch::{argmin, Point, PointState};
use crate::cells::{CellTopology, Family};
use crate::error::{CoreError, Result};
use crate::genotype::{required_in_edges, CellGenotype, Genotype, Provenance};
use crate::network::{pinned_macro, Batch, Network};
use crate::nn::Ctx;
use crate::ops::DecoderKind;

/// One scored candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub stage: String,
    pub choice_point: String,
    pub candidate: String,
    pub score: f64,
    pub committed: bool,
}

pub fn write_audit(path: &Path, records: &[AuditRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r).map_err(std::io::Error::from)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Mean eval-mode point MSE (instance-standardised units) over `batches`; +∞ when not finite.
pub fn validation_score<T: Element>(net: &Network<T>, batches: &[Batch<T>]) -> Result<f64> {
    if batches.is_empty() {
        return Err(CoreError::contract("scoring needs at least one validation batch"));
    }
    let mut total = 0.0;
    for b in batches {
        let tape = Tape::no_grad();
        let out = net.forward(&Ctx::eval(&tape, &net.store), b)?;
        total += out.score();
    }
    let s = total / batches.len() as f64;
    Ok(if s.is_finite() { s } else { f64::INFINITY })
}

/// Loss with `p` temporarily overridden by `state`; the network is left as it was.
pub fn score_with<T: Element>(net: &mut Network<T>, p: Point, state: PointState, batches: &[Batch<T>]) -> Result<f64> {
    let prev = net.arch.set(p, Some(state));
    let s = validation_score(net, batches);
    net.arch.set(p, prev);
    s
}

/// Score with candidate `cand` of `p` forced one-hot.
pub fn perturb_score<T: Element>(net: &mut Network<T>, p: Point, cand: usize, batches: &[Batch<T>]) -> Result<f64> {
    score_with(net, p, PointState::Forced(cand), batches)
}

fn family_points<T: Element>(net: &Network<T>, family: Family) -> Vec<Point> {
    let (n_cells, topo) = match family {
        Family::Flat => (net.plan.flat.len(), net.flat_topology()),
        Family::Enc => (net.plan.enc.len(), net.seq_topology()),
        Family::Dec => (net.plan.dec.len(), net.seq_topology()),
    };
    (0..n_cells)
        .flat_map(|k| (0..topo.n_edges()).map(move |e| Point::edge(family, k, e)))
        .filter(|&p| net.n_candidates(p) > 0)
        .collect()
}

fn candidate_label<T: Element>(net: &Network<T>, p: Point, i: usize) -> String {
    match p {
        Point::Edge { family: Family::Flat, cell, edge } => net.plan.flat[cell][edge][i].name().to_string(),
        Point::Edge { family: Family::Enc, cell, edge } => net.plan.enc[cell][edge][i].name().to_string(),
        Point::Edge { family: Family::Dec, cell, edge } => net.plan.dec[cell][edge][i].name().to_string(),
        Point::Decoder => net.plan.decoders[i].name().to_string(),
        Point::Head => net.plan.heads[i].name().to_string(),
        Point::Macro => ["seq", "flat"][i].to_string(),
    }
}

/// Hook run after every commit (weight fine-tuning); a no-op by default.
pub type Finetune<'f, T> = dyn FnMut(&mut Network<T>) -> Result<()> + 'f;

/// Perturbation-based discretisation, committing choices from edges upward.
pub struct Pruner<'a, 'f, T: Element> {
    pub net: &'a mut Network<T>,
    pub batches: &'a [Batch<T>],
    pub audit: Vec<AuditRecord>,
    pub finetune: Option<Box<Finetune<'f, T>>>,
}

impl<'a, 'f, T: Element> Pruner<'a, 'f, T> {
    pub fn new(net: &'a mut Network<T>, batches: &'a [Batch<T>]) -> Self {
        Pruner { net, batches, audit: Vec::new(), finetune: None }
    }

    fn commit(&mut self, p: Point, s: PointState) -> Result<()> {
        self.net.arch.set(p, Some(s));
        if let Some(f) = self.finetune.as_mut() {
            f(self.net)?;
        }
        Ok(())
    }

    /// Scores every candidate of `p`, then freezes the argmin.
    fn resolve(&mut self, stage: &str, p: Point) -> Result<usize> {
        let n = self.net.n_candidates(p);
        if n == 0 {
            return Err(CoreError::contract(format!("{p} has no candidates")));
        }
        if matches!(self.net.arch.state(p), Some(PointState::Forced(_)) | Some(PointState::Masked)) {
            return Err(CoreError::contract(format!("{p} is already committed")));
        }
        let mut scores = Vec::with_capacity(n);
        for i in 0..n {
            scores.push(perturb_score(self.net, p, i, self.batches)?);
        }
        let best = argmin(&scores).ok_or_else(|| CoreError::Diverged(format!("every candidate at {p} is infeasible")))?;
        for (i, &s) in scores.iter().enumerate() {
            self.audit.push(AuditRecord {
                stage: stage.into(),
                choice_point: p.to_string(),
                candidate: candidate_label(self.net, p, i),
                score: s,
                committed: i == best,
            });
        }
        self.commit(p, PointState::Forced(best))?;
        Ok(best)
    }

    /// Edge ops (flat, encoder, decoder cells), then decoder kind, then head; macro weights frozen.
    pub fn select_operations(&mut self) -> Result<()> {
        for fam in [Family::Flat, Family::Enc, Family::Dec] {
            for p in family_points(self.net, fam) {
                self.resolve("op", p)?;
            }
        }
        if self.net.n_candidates(Point::Decoder) > 0 {
            self.resolve("decoder", Point::Decoder)?;
        }
        if self.net.n_candidates(Point::Head) > 0 {
            self.resolve("head", Point::Head)?;
        }
        if self.net.plan.macro_weights.is_none() {
            let w = self.net.arch.softmax(&self.net.store, Point::Macro).expect("learned macro logits");
            self.net.arch.set(Point::Macro, Some(PointState::Fixed(w)));
        }
        Ok(())
    }

    fn decoder_is_linear(&self) -> bool {
        match self.net.arch.state(Point::Decoder) {
            Some(PointState::Forced(i)) => self.net.plan.decoders[*i] == DecoderKind::LinearDecoder,
            _ => self.net.plan.decoders == [DecoderKind::LinearDecoder],
        }
    }

    /// Keeps, per node, the in-edges whose masking hurts the most.
    pub fn prune_edges(&mut self) -> Result<()> {
        let skip_dec = self.decoder_is_linear();
        for fam in [Family::Flat, Family::Enc, Family::Dec] {
            let (n_cells, topo) = match fam {
                Family::Flat => (self.net.plan.flat.len(), self.net.flat_topology()),
                Family::Enc => (self.net.plan.enc.len(), self.net.seq_topology()),
                Family::Dec => (self.net.plan.dec.len(), self.net.seq_topology()),
            };
            if fam == Family::Dec && skip_dec {
                continue;
            }
            for k in 0..n_cells {
                for node in topo.n_in..topo.n_nodes() {
                    self.prune_node(fam, k, &topo, node)?;
                }
            }
        }
        Ok(())
    }

    fn prune_node(&mut self, fam: Family, k: usize, topo: &CellTopology, node: usize) -> Result<()> {
        let ins: Vec<usize> = topo
            .in_edges(node)
            .into_iter()
            .filter(|&e| self.net.n_candidates(Point::edge(fam, k, e)) > 0)
            .filter(|&e| self.net.arch.state(Point::edge(fam, k, e)) != Some(&PointState::Masked))
            .collect();
        let keep = required_in_edges(node);
        if ins.len() <= keep {
            if ins.len() < 2 {
                log::debug!("{}.c{k} node {node} has {} in-edge(s); all kept", fam.slug(), ins.len());
            }
            return Ok(());
        }
        let mut scored = Vec::with_capacity(ins.len());
        for &e in &ins {
            let p = Point::edge(fam, k, e);
            let cur = self.net.arch.state(p).cloned();
            let s = score_with(self.net, p, PointState::Masked, self.batches)?;
            debug_assert_eq!(self.net.arch.state(p).cloned(), cur);
            scored.push((e, if s.is_nan() { f64::INFINITY } else { s }));
        }
        // highest loss-after-removal first; ties keep the lower edge index
        let mut order: Vec<usize> = (0..scored.len()).collect();
        order.sort_by(|&a, &b| scored[b].1.total_cmp(&scored[a].1).then(a.cmp(&b)));
        let kept: Vec<usize> = order[..keep].iter().map(|&i| scored[i].0).collect();
        for &(e, s) in &scored {
            let (d, src) = topo.edges()[e];
            self.audit.push(AuditRecord {
                stage: "edge".into(),
                choice_point: format!("{}.c{k}.n{node}", fam.slug()),
                candidate: format!("e{d}_{src}"),
                score: s,
                committed: kept.contains(&e),
            });
        }
        for &(e, _) in &scored {
            if !kept.contains(&e) {
                self.commit(Point::edge(fam, k, e), PointState::Masked)?;
            }
        }
        Ok(())
    }

    pub fn run(mut self, prov: Provenance) -> Result<(Genotype, Vec<AuditRecord>)> {
        self.select_operations()?;
        self.prune_edges()?;
        let g = extract_genotype(self.net, prov)?;
        Ok((g, self.audit))
    }
}

fn chosen(state: Option<&PointState>, n: usize) -> Result<Option<usize>> {
    match state {
        Some(PointState::Masked) => Ok(None),
        Some(PointState::Forced(i)) => Ok(Some(*i)),
        None if n == 1 => Ok(Some(0)),
        s => Err(CoreError::contract(format!("choice point not discretised: {s:?}"))),
    }
}

/// Reads the committed overrides back as a genotype.
pub fn extract_genotype<T: Element>(net: &Network<T>, provenance: Provenance) -> Result<Genotype> {
    fn cells<K: Copy>(
        net_arch: &crate::arch::ArchState,
        fam: Family,
        plan: &[Vec<Vec<K>>],
        topo: &CellTopology,
    ) -> Result<Vec<CellGenotype<K>>> {
        plan.iter()
            .enumerate()
            .map(|(k, c)| {
                let ops = c
                    .iter()
                    .enumerate()
                    .map(|(e, kinds)| {
                        if kinds.is_empty() {
                            return Ok(None);
                        }
                        Ok(chosen(net_arch.state(Point::edge(fam, k, e)), kinds.len())?.map(|i| kinds[i]))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(CellGenotype::from_edges(topo, &ops))
            })
            .collect()
    }
    let plan = &net.plan;
    let seq_t = net.seq_topology();
    let decoder_kind = match plan.decoders.len() {
        0 => None,
        n => Some(plan.decoders[chosen(net.arch.state(Point::Decoder), n)?.ok_or_else(|| CoreError::contract("decoder masked"))?]),
    };
    let head_kind = match plan.heads.len() {
        0 => None,
        n => Some(plan.heads[chosen(net.arch.state(Point::Head), n)?.ok_or_else(|| CoreError::contract("head masked"))?]),
    };
    let macro_weights = match (pinned_macro(net.cfg.mode), plan.macro_weights, net.arch.state(Point::Macro)) {
        (Some(w), _, _) => w,
        (None, Some(w), _) => w,
        (None, None, Some(PointState::Fixed(w))) if w.len() == 2 => [w[0], w[1]],
        _ => return Err(CoreError::contract("macro weights not frozen")),
    };
    let seq_decoder = match decoder_kind {
        Some(DecoderKind::SeqDecoder) => Some(cells(&net.arch, Family::Dec, &plan.dec, &seq_t)?),
        _ => None,
    };
    let g = Genotype {
        search_space: net.cfg.clone(),
        seq_encoder: cells(&net.arch, Family::Enc, &plan.enc, &seq_t)?,
        seq_decoder,
        flat: cells(&net.arch, Family::Flat, &plan.flat, &net.flat_topology())?,
        decoder_kind,
        head_kind,
        macro_weights,
        provenance,
    };
    g.validate()?;
    Ok(g)
}

/// One discrete architecture and its validation score under the shared supernet weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedArchitecture {
    pub genotype: Genotype,
    pub score: f64,
}

fn combinations(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    if items.len() < k {
        return vec![];
    }
    let mut out = Vec::new();
    for (i, &x) in items.iter().enumerate() {
        for mut rest in combinations(&items[i + 1..], k - 1) {
            rest.insert(0, x);
            out.push(rest);
        }
    }
    out
}

type Assignment = Vec<(Point, PointState)>;

/// Every way one node may keep its edges and pick their ops.
fn node_alternatives<T: Element>(net: &Network<T>, fam: Family, k: usize, topo: &CellTopology, node: usize) -> Vec<Assignment> {
    let ins: Vec<usize> = topo.in_edges(node);
    let mut out = Vec::new();
    for keep in combinations(&ins, required_in_edges(node)) {
        let mut partial: Vec<Assignment> = vec![ins
            .iter()
            .filter(|e| !keep.contains(e))
            .map(|&e| (Point::edge(fam, k, e), PointState::Masked))
            .collect()];
        for &e in &keep {
            let p = Point::edge(fam, k, e);
            let n = net.n_candidates(p);
            partial = partial
                .into_iter()
                .flat_map(|a| {
                    (0..n).map(move |i| {
                        let mut a = a.clone();
                        a.push((p, PointState::Forced(i)));
                        a
                    })
                })
                .collect();
        }
        out.extend(partial);
    }
    out
}

fn cartesian(slots: &[Vec<Assignment>]) -> Vec<Assignment> {
    let mut acc: Vec<Assignment> = vec![vec![]];
    for s in slots {
        acc = acc
            .iter()
            .flat_map(|a| {
                s.iter().map(move |alt| {
                    let mut v = a.clone();
                    v.extend(alt.iter().cloned());
                    v
                })
            })
            .collect();
    }
    acc
}

/// Enumerates the legal discrete space of `net`, scoring each architecture under the supernet weights.
/// Refuses when the space holds more than `limit` architectures. Best first; ties keep enumeration order.
pub fn brute_force_oracle<T: Element>(net: &mut Network<T>, batches: &[Batch<T>], limit: usize) -> Result<Vec<RankedArchitecture>> {
    let saved = net.arch.overrides.clone();
    let result = enumerate(net, batches, limit);
    net.arch.overrides = saved;
    result
}

fn enumerate<T: Element>(net: &mut Network<T>, batches: &[Batch<T>], limit: usize) -> Result<Vec<RankedArchitecture>> {
    let seq_t = net.seq_topology();
    let flat_t = net.flat_topology();
    let mut base_slots: Vec<Vec<Assignment>> = Vec::new();
    let mut dec_slots: Vec<Vec<Assignment>> = Vec::new();
    for (fam, n, topo) in [
        (Family::Flat, net.plan.flat.len(), flat_t),
        (Family::Enc, net.plan.enc.len(), seq_t),
        (Family::Dec, net.plan.dec.len(), seq_t),
    ] {
        for k in 0..n {
            for node in topo.n_in..topo.n_nodes() {
                let alts = node_alternatives(net, fam, k, &topo, node);
                if fam == Family::Dec { dec_slots.push(alts) } else { base_slots.push(alts) }
            }
        }
    }
    let count = |slots: &[Vec<Assignment>]| slots.iter().try_fold(1usize, |acc, s| acc.checked_mul(s.len()));
    let n_heads = net.plan.heads.len().max(1);
    let mut tails: Vec<Assignment> = Vec::new();
    let mut total = 0usize;
    let base_n = count(&base_slots).unwrap_or(usize::MAX);
    if net.plan.decoders.is_empty() {
        tails.push(vec![]);
        total = base_n;
    } else {
        let dec_n = count(&dec_slots).unwrap_or(usize::MAX);
        for (i, d) in net.plan.decoders.iter().enumerate() {
            let n = if *d == DecoderKind::SeqDecoder { dec_n } else { 1 };
            total = total.saturating_add(base_n.saturating_mul(n).saturating_mul(n_heads));
            if total > limit {
                break;
            }
            let choose = vec![(Point::Decoder, PointState::Forced(i))];
            if *d == DecoderKind::SeqDecoder {
                for mut a in cartesian(&dec_slots) {
                    a.extend(choose.clone());
                    tails.push(a);
                }
            } else {
                tails.push(choose);
            }
        }
    }
    if total > limit {
        return Err(CoreError::config(format!("discrete space holds more than {limit} architectures")));
    }
    let head_alts: Vec<Assignment> = if net.plan.heads.is_empty() {
        vec![vec![]]
    } else {
        (0..net.plan.heads.len()).map(|i| vec![(Point::Head, PointState::Forced(i))]).collect()
    };
    let macro_fixed = match (net.plan.macro_weights, net.arch.softmax(&net.store, Point::Macro)) {
        (None, Some(w)) => Some(w),
        _ => None,
    };
    let mut ranked = Vec::new();
    for base in cartesian(&base_slots) {
        for tail in &tails {
            for head in &head_alts {
                net.arch.overrides.clear();
                for (p, s) in base.iter().chain(tail).chain(head) {
                    net.arch.set(*p, Some(s.clone()));
                }
                if let Some(w) = &macro_fixed {
                    net.arch.set(Point::Macro, Some(PointState::Fixed(w.clone())));
                }
                let score = validation_score(net, batches)?;
                let genotype = extract_genotype(net, Provenance::default())?;
                ranked.push(RankedArchitecture { genotype, score });
            }
        }
    }
    ranked.sort_by(|a, b| a.score.total_cmp(&b.score));
    Ok(ranked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{MacroMode, NetworkConfig};
    use crate::ops::{FlatOpKind, SeqOpKind};
    use tsnas_tensor::rng::seeded;
    use tsnas_tensor::{init, Tensor};

    fn batch(cfg: &NetworkConfig, seed: u64) -> Vec<Batch<f64>> {
        let mut rng = seeded(seed);
        vec![Batch {
            past: init::uniform(&[3, cfg.lookback, cfg.n_targets], 1.0, &mut rng),
            future: init::uniform(&[3, cfg.horizon, cfg.n_targets], 1.0, &mut rng),
            past_feats: None,
            future_feats: None,
            starts: vec![0, 1, 2],
        }]
    }

    fn micro() -> NetworkConfig {
        let mut cfg = NetworkConfig::tiny(8, 4, 2);
        cfg.mode = MacroMode::FlatOnly;
        cfg.n_flat_cells = 1;
        cfg.n_intermediate = 1;
        cfg.flat_candidates = vec![FlatOpKind::Linear, FlatOpKind::Skip];
        cfg
    }

    #[test]
    fn oracle_enumerates_micro_space() {
        let cfg = micro();
        let mut net = Network::<f64>::supernet(&cfg, 0).unwrap();
        let b = batch(&cfg, 1);
        let before = net.store.clone();
        let r = brute_force_oracle(&mut net, &b, 8).unwrap();
        assert_eq!(r.len(), 8);
        let mut hashes: Vec<String> = r.iter().map(|a| a.genotype.hash()).collect();
        hashes.sort();
        hashes.dedup();
        assert_eq!(hashes.len(), 8);
        assert!(r.windows(2).all(|w| w[0].score <= w[1].score));
        assert!(brute_force_oracle(&mut net, &b, 7).is_err());
        assert!(net.arch.overrides.is_empty());
        for id in before.ids() {
            assert!(before.value(id).bit_eq(net.store.value(id)));
        }
    }

    #[test]
    fn perturbation_is_side_effect_free_and_deterministic() {
        let cfg = NetworkConfig::tiny(8, 4, 2);
        let mut net = Network::<f64>::supernet(&cfg, 3).unwrap();
        let b = batch(&cfg, 2);
        let p = Point::edge(Family::Enc, 0, 0);
        let s1 = perturb_score(&mut net, p, 1, &b).unwrap();
        let s2 = perturb_score(&mut net, p, 1, &b).unwrap();
        assert_eq!(s1.to_bits(), s2.to_bits());
        assert!(net.arch.overrides.is_empty());
    }

    #[test]
    fn saturated_candidate_scores_like_the_mixture() {
        let cfg = NetworkConfig::tiny(8, 4, 2);
        let mut net = Network::<f64>::supernet(&cfg, 3).unwrap();
        let p = Point::edge(Family::Flat, 1, 2);
        let id = net.arch.logits[&p];
        let n = net.n_candidates(p);
        let mut l = vec![0.0; n];
        l[2] = 40.0;
        net.store.set_value(id, Tensor::from_f64(&[n], &l).unwrap()).unwrap();
        let b = batch(&cfg, 4);
        let base = validation_score(&net, &b).unwrap();
        let forced = perturb_score(&mut net, p, 2, &b).unwrap();
        assert!((base - forced).abs() <= 1e-6 * base.abs().max(1.0), "{base} vs {forced}");
    }

    #[test]
    fn pipeline_emits_valid_genotype_and_orders_stages() {
        let mut cfg = NetworkConfig::tiny(8, 4, 2);
        cfg.seq_candidates = vec![SeqOpKind::GRU, SeqOpKind::TCN, SeqOpKind::Skip];
        let mut net = Network::<f64>::supernet(&cfg, 5).unwrap();
        let b = batch(&cfg, 6);
        let (g, audit) = Pruner::new(&mut net, &b).run(Provenance::default()).unwrap();
        g.validate().unwrap();
        let last_dec_op = audit.iter().rposition(|r| r.stage == "op" && r.choice_point.starts_with("dec.")).unwrap();
        let decoder = audit.iter().position(|r| r.stage == "decoder").unwrap();
        assert!(last_dec_op < decoder);
        assert_eq!(audit.iter().filter(|r| r.stage == "decoder").count(), 2);
        assert!(audit.iter().all(|r| r.score.is_finite()));
    }
}
