use tsnas_tensor::rng::seeded;
use tsnas_tensor::{init, Element, ParamId, ParamStore, Tensor, Var};

use crate::arch::{ArchState, Point};
use crate::cells::{Cell, CellTopology, Family};
use crate::config::{MacroMode, NetworkConfig};
use crate::error::{CoreError, Result};
use crate::genotype::Genotype;
use crate::nn::{Builder, Ctx, LayerNorm, Linear, Mixing};
use crate::ops::decomp::moving_average_decompose;
use crate::ops::flat::{FlatDims, FlatEdge, Streams};
use crate::ops::head::{head_loss, point_forecast, Head};
use crate::ops::revin::{RevIn, RevInState};
use crate::ops::seq::{Bundle, CandidateSpec, Role, SeqDims, SeqEdge, SeqPosition};
use crate::ops::{DecoderKind, FlatOpKind, HeadKind, SeqOpKind};

/// One batch of windows.
#[derive(Debug, Clone)]
pub struct Batch<T: Element> {
    /// [B, L, N]
    pub past: Tensor<T>,
    /// [B, H, N]
    pub future: Tensor<T>,
    /// [B, L, F]
    pub past_feats: Option<Tensor<T>>,
    /// [B, H, F]
    pub future_feats: Option<Tensor<T>>,
    pub starts: Vec<usize>,
}

impl<T: Element> Batch<T> {
    pub fn len(&self) -> usize {
        self.past.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Which candidates a model instantiates at every choice point.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    /// [cell][edge] → candidates; empty means the edge is absent.
    pub flat: Vec<Vec<Vec<FlatOpKind>>>,
    pub enc: Vec<Vec<Vec<SeqOpKind>>>,
    pub dec: Vec<Vec<Vec<SeqOpKind>>>,
    pub decoders: Vec<DecoderKind>,
    pub heads: Vec<HeadKind>,
    /// Constant [w_seq, w_flat]; `None` means learned logits.
    pub macro_weights: Option<[f64; 2]>,
    /// Whether architecture logits are registered.
    pub searchable: bool,
}

pub fn pinned_macro(mode: MacroMode) -> Option<[f64; 2]> {
    match mode {
        MacroMode::FlatOnly => Some([0.0, 1.0]),
        MacroMode::SeqOnly => Some([1.0, 0.0]),
        MacroMode::NoWeights => Some([1.0, 1.0]),
        MacroMode::Mixed | MacroMode::Parallel => None,
    }
}

impl Plan {
    pub fn supernet(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let seq_t = CellTopology::new(Family::Enc, cfg.n_intermediate)?;
        let flat_t = CellTopology::new(Family::Flat, cfg.n_intermediate)?;
        let (has_flat, has_seq) = (cfg.mode.has_flat(), cfg.mode.has_seq());
        let n_flat = if has_flat { cfg.n_flat_cells } else { 0 };
        let n_seq = if has_seq { cfg.n_seq_cells } else { 0 };
        let seq_cells = || vec![vec![cfg.seq_candidates.clone(); seq_t.n_edges()]; n_seq];
        Ok(Plan {
            flat: vec![vec![cfg.flat_candidates.clone(); flat_t.n_edges()]; n_flat],
            enc: seq_cells(),
            dec: seq_cells(),
            decoders: if has_seq { DecoderKind::ALL.to_vec() } else { vec![] },
            heads: if has_seq { cfg.head_candidates.clone() } else { vec![] },
            macro_weights: pinned_macro(cfg.mode),
            searchable: true,
        })
    }

    pub fn from_genotype(g: &Genotype) -> Result<Self> {
        g.validate()?;
        let cfg = &g.search_space;
        let seq_t = g.topology(Family::Enc);
        let flat_t = g.topology(Family::Flat);
        let lists = |o: Vec<Option<FlatOpKind>>| o.into_iter().map(|x| x.into_iter().collect()).collect();
        let slists = |o: Vec<Option<SeqOpKind>>| o.into_iter().map(|x| x.into_iter().collect()).collect();
        let mode = cfg.mode;
        let macro_weights = Some(pinned_macro(mode).unwrap_or(g.macro_weights));
        Ok(Plan {
            flat: g.flat.iter().map(|c| lists(c.per_edge(&flat_t))).collect(),
            enc: g.seq_encoder.iter().map(|c| slists(c.per_edge(&seq_t))).collect(),
            dec: g.seq_decoder.iter().flatten().map(|c| slists(c.per_edge(&seq_t))).collect(),
            decoders: g.decoder_kind.into_iter().collect(),
            heads: g.head_kind.into_iter().collect(),
            macro_weights,
            searchable: false,
        })
    }
}

#[derive(Debug, Clone)]
struct LinearDecoder {
    time: Linear,
    ln: Option<LayerNorm>,
}

/// Model output for one batch.
#[derive(Debug, Clone)]
pub struct Forecast<T: Element> {
    /// Training loss in instance-standardised units.
    pub loss: Var<T>,
    /// Point forecast in instance-standardised units [B, H, N].
    pub point_std: Var<T>,
    /// Targets in the same units.
    pub target_std: Var<T>,
    /// Point forecast in data units.
    pub point: Var<T>,
}

impl<T: Element> Forecast<T> {
    /// MSE of the point forecast in instance-standardised units: the common yardstick for
    /// comparing candidates whose heads train with different losses.
    pub fn score(&self) -> f64 {
        let a = self.point_std.value().data();
        let b = self.target_std.value().data();
        a.iter().zip(b).map(|(x, y)| (x.to_f64().unwrap() - y.to_f64().unwrap()).powi(2)).sum::<f64>() / a.len() as f64
    }
}

/// Supernet or discrete forecaster; both share one parameter naming scheme.
#[derive(Debug, Clone)]
pub struct Network<T: Element> {
    pub cfg: NetworkConfig,
    pub plan: Plan,
    pub store: ParamStore<T>,
    pub arch: ArchState,
    flat: Vec<Cell<FlatEdge>>,
    enc: Vec<Cell<SeqEdge>>,
    dec: Vec<Cell<SeqEdge>>,
    embed: Option<Linear>,
    embed_pos: Option<ParamId>,
    dec_in: Option<Linear>,
    pos_emb: Option<ParamId>,
    lindec: Option<LinearDecoder>,
    heads: Vec<Head>,
    revin: RevIn,
}

pub fn edge_prefix(family: Family, cell: usize, dest: usize, src: usize) -> String {
    format!("{}.c{cell}.e{dest}_{src}", family.slug())
}

impl<T: Element> Network<T> {
    pub fn supernet(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        Self::build(cfg, Plan::supernet(cfg)?, seed)
    }

    pub fn from_genotype(g: &Genotype, seed: u64) -> Result<Self> {
        Self::build(&g.search_space, Plan::from_genotype(g)?, seed)
    }

    pub fn build(cfg: &NetworkConfig, plan: Plan, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seeded(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let (l, h, n, f, d) = (cfg.lookback, cfg.horizon, cfg.n_targets, cfg.n_features, cfg.d_model);
        let seq_t = CellTopology::new(Family::Enc, cfg.n_intermediate)?;
        let flat_t = CellTopology::new(Family::Flat, cfg.n_intermediate)?;
        let revin = RevIn::new(&mut b, n, cfg.revin_affine)?;

        let fdims = FlatDims { lookback: l, horizon: h, width: cfg.nbeats_width, harmonics: cfg.harmonics() };
        let mut flat = Vec::new();
        for (k, cell) in plan.flat.iter().enumerate() {
            let mut edges = Vec::new();
            for (e, &(dst, src)) in flat_t.edges().iter().enumerate() {
                let kinds = &cell[e];
                let last = k + 1 == plan.flat.len() && dst == flat_t.output_node();
                edges.push(if kinds.is_empty() {
                    None
                } else {
                    Some(FlatEdge::new(&mut b.sub(&edge_prefix(Family::Flat, k, dst, src)), kinds, fdims, last)?)
                });
            }
            flat.push(Cell { topo: flat_t, edges });
        }

        let sdims = SeqDims {
            d,
            lookback: l,
            horizon: h,
            n_heads: cfg.n_heads,
            dropout: cfg.dropout,
            tcn_kernel: cfg.tcn_kernel,
            septcn_kernel: cfg.septcn_kernel,
        };
        let wants_seq_dec = plan.decoders.contains(&DecoderKind::SeqDecoder);
        let mut enc = Vec::new();
        let mut dec = Vec::new();
        for (fam, cells, out) in [(Family::Enc, &plan.enc, &mut enc), (Family::Dec, &plan.dec, &mut dec)] {
            for (k, cell) in cells.iter().enumerate() {
                let mut edges = Vec::new();
                for (e, &(dst, src)) in seq_t.edges().iter().enumerate() {
                    let kinds = &cell[e];
                    if kinds.is_empty() {
                        edges.push(None);
                        continue;
                    }
                    let paired_lstm = wants_seq_dec
                        && plan.dec.get(k).is_some_and(|c| c[e].contains(&SeqOpKind::LSTM));
                    let specs: Vec<CandidateSpec> =
                        kinds.iter().map(|&kind| CandidateSpec { kind, stitch: fam == Family::Enc && paired_lstm }).collect();
                    let role = if fam == Family::Enc { Role::Encoder } else { Role::Decoder };
                    let pos = SeqPosition { cell: k, source: src, n_in: seq_t.n_in };
                    edges.push(Some(SeqEdge::new(&mut b.sub(&edge_prefix(fam, k, dst, src)), &specs, role, pos, sdims)?));
                }
                out.push(Cell { topo: seq_t, edges });
            }
        }

        let has_seq = !plan.enc.is_empty();
        let (embed, embed_pos) = if has_seq {
            let e = Linear::new(&mut b, "embed", n + f, d, true)?;
            let t = init::uniform(&[l, d], 0.02, b.rng);
            (Some(e), Some(b.param("embed_pos", t, tsnas_tensor::ParamRole::Weight)?))
        } else {
            (None, None)
        };
        let (dec_in, pos_emb) = if wants_seq_dec {
            let width = if cfg.mode.routes_flat() && cfg.mode.has_flat() { n } else { 0 } + f;
            let di = if width > 0 { Some(Linear::new(&mut b, "dec_in", width, d, true)?) } else { None };
            let t = init::uniform(&[h, d], 0.02, b.rng);
            (di, Some(b.param("pos_emb", t, tsnas_tensor::ParamRole::Weight)?))
        } else {
            (None, None)
        };
        let lindec = if plan.decoders.contains(&DecoderKind::LinearDecoder) {
            let mut s = b.sub("lindec");
            Some(LinearDecoder {
                time: Linear::new(&mut s, "time", l, h, true)?,
                ln: if cfg.linear_decoder_norm { Some(LayerNorm::new(&mut s, "ln", d)?) } else { None },
            })
        } else {
            None
        };
        let heads = plan.heads.iter().map(|&k| Head::new(&mut b, k, d, n)).collect::<Result<Vec<_>>>()?;

        let mut arch = ArchState::default();
        if plan.searchable {
            for (fam, n_kinds) in [
                (Family::Flat, plan.flat.iter().map(|c| c.iter().map(Vec::len).collect::<Vec<_>>()).collect::<Vec<_>>()),
                (Family::Enc, plan.enc.iter().map(|c| c.iter().map(Vec::len).collect()).collect()),
                (Family::Dec, plan.dec.iter().map(|c| c.iter().map(Vec::len).collect()).collect()),
            ] {
                let topo = if fam == Family::Flat { flat_t } else { seq_t };
                for (k, cell) in n_kinds.iter().enumerate() {
                    for (e, &cnt) in cell.iter().enumerate() {
                        if cnt >= 2 {
                            let (dst, src) = topo.edges()[e];
                            let id = b.arch(&format!("arch.{}", edge_prefix(fam, k, dst, src)), cnt)?;
                            arch.logits.insert(Point::edge(fam, k, e), id);
                        }
                    }
                }
            }
            if plan.decoders.len() >= 2 {
                arch.logits.insert(Point::Decoder, b.arch("arch.decoder", plan.decoders.len())?);
            }
            if plan.heads.len() >= 2 {
                arch.logits.insert(Point::Head, b.arch("arch.head", plan.heads.len())?);
            }
            if plan.macro_weights.is_none() {
                arch.logits.insert(Point::Macro, b.arch("arch.macro", 2)?);
            }
        }
        if plan.macro_weights.is_none() && !plan.searchable {
            return Err(CoreError::config("discrete models need constant macro weights"));
        }

        Ok(Network {
            cfg: cfg.clone(),
            plan,
            store,
            arch,
            flat,
            enc,
            dec,
            embed,
            embed_pos,
            dec_in,
            pos_emb,
            lindec,
            heads,
            revin,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.numel(None)
    }

    pub fn flat_topology(&self) -> CellTopology {
        CellTopology { n_in: 1, n_intermediate: self.cfg.n_intermediate }
    }

    pub fn seq_topology(&self) -> CellTopology {
        CellTopology { n_in: 2, n_intermediate: self.cfg.n_intermediate }
    }

    /// Parameter ids whose name starts with any of `prefixes`.
    pub fn params_with_prefix(&self, prefixes: &[&str]) -> Vec<ParamId> {
        self.store.ids().filter(|&id| prefixes.iter().any(|p| self.store.name(id).starts_with(p))).collect()
    }

    /// Weights that belong to the Seq path only.
    pub fn seq_params(&self) -> Vec<ParamId> {
        self.params_with_prefix(&["enc.", "dec.", "embed", "dec_in", "pos_emb", "lindec", "head."])
    }

    pub fn flat_params(&self) -> Vec<ParamId> {
        self.params_with_prefix(&["flat."])
    }

    /// Number of instantiated candidates at `p`.
    pub fn n_candidates(&self, p: Point) -> usize {
        match p {
            Point::Edge { family, cell, edge } => match family {
                Family::Flat => self.plan.flat.get(cell).map_or(0, |c| c[edge].len()),
                Family::Enc => self.plan.enc.get(cell).map_or(0, |c| c[edge].len()),
                Family::Dec => self.plan.dec.get(cell).map_or(0, |c| c[edge].len()),
            },
            Point::Decoder => self.plan.decoders.len(),
            Point::Head => self.plan.heads.len(),
            Point::Macro => 2,
        }
    }

    fn mixing(&self, ctx: &Ctx<T>, p: Point) -> Result<Option<Mixing<T>>> {
        if p == Point::Macro {
            if let Some(w) = self.plan.macro_weights {
                return Ok(Some(Mixing::Hard(w.to_vec())));
            }
        }
        self.arch.mixing(ctx, p, self.n_candidates(p))
    }

    fn check_batch(&self, batch: &Batch<T>) -> Result<()> {
        let c = &self.cfg;
        let (b, l, hz, n, f) = (batch.past.dim(0), c.lookback, c.horizon, c.n_targets, c.n_features);
        let bad = |what: &str, got: &[usize], want: &[usize]| {
            CoreError::config(format!("batch {what} has shape {got:?}, expected {want:?}"))
        };
        if batch.past.shape() != [b, l, n] {
            return Err(bad("past", batch.past.shape(), &[b, l, n]));
        }
        if batch.future.shape() != [b, hz, n] {
            return Err(bad("future", batch.future.shape(), &[b, hz, n]));
        }
        if f > 0 {
            match (&batch.past_feats, &batch.future_feats) {
                (Some(p), Some(q)) if p.shape() == [b, l, f] && q.shape() == [b, hz, f] => {}
                _ => return Err(CoreError::config(format!("config declares {f} features but the batch does not carry them"))),
            }
        }
        Ok(())
    }

    /// Flat Net on instance-normalised input [B, L, N]: final (backcast [B,N,L], forecast [B,N,H]).
    pub fn flat_forward(&self, ctx: &Ctx<T>, xn: &Var<T>) -> Result<Streams<T>> {
        let tape = ctx.tape;
        let (b, n) = (xn.dim(0), xn.dim(2));
        let mut s = Streams { b: tape.transpose(xn, 1, 2)?, f: ctx.zeros(&[b, n, self.cfg.horizon]) };
        for (k, cell) in self.flat.iter().enumerate() {
            let mix = |e: usize| self.mixing(ctx, Point::edge(Family::Flat, k, e));
            s = cell.forward(ctx, s, &mix)?;
        }
        Ok(s)
    }

    fn embed(&self, ctx: &Ctx<T>, x: &Var<T>, feats: Option<&Var<T>>) -> Result<Var<T>> {
        let x = match feats {
            Some(f) => ctx.tape.concat(&[x, f], 2)?,
            None => x.clone(),
        };
        let e = self.embed.as_ref().expect("seq path").forward(ctx, &x)?;
        Ok(ctx.tape.add(&e, &ctx.p(self.embed_pos.expect("seq path")))?)
    }

    /// Seq Net: decoder feature [B, H, d].
    pub fn seq_forward(&self, ctx: &Ctx<T>, xn: &Var<T>, batch: &Batch<T>, flat_fc: Option<&Var<T>>) -> Result<Var<T>> {
        let tape = ctx.tape;
        let pf = batch.past_feats.as_ref().filter(|_| self.cfg.n_features > 0).map(|t| ctx.constant(t.clone()));
        let ff = batch.future_feats.as_ref().filter(|_| self.cfg.n_features > 0).map(|t| ctx.constant(t.clone()));
        let (trend, seasonal) = moving_average_decompose(tape, xn, self.cfg.ma_kernel)?;
        let emb = self.embed(ctx, xn, pf.as_ref())?;
        let mut inputs = [self.embed(ctx, &trend, pf.as_ref())?, self.embed(ctx, &seasonal, pf.as_ref())?];
        let mut outs: Vec<Var<T>> = Vec::new();
        let mut bundles: Vec<Vec<Bundle<T>>> = Vec::new();
        for (k, cell) in self.enc.iter().enumerate() {
            if k > 0 {
                let prev2 = if k >= 2 { outs[k - 2].clone() } else { emb.clone() };
                inputs = [prev2, outs[k - 1].clone()];
            }
            let mix = |e: usize| self.mixing(ctx, Point::edge(Family::Enc, k, e));
            let (o, b) = cell.encode(ctx, inputs.clone(), &mix)?;
            outs.push(o);
            bundles.push(b);
        }
        let memory = outs.last().expect("at least one encoder cell").clone();

        let dmix = self.mixing(ctx, Point::Decoder)?.ok_or_else(|| CoreError::config("decoder choice masked"))?;
        dmix.combine(tape, |i| match self.plan.decoders[i] {
            DecoderKind::LinearDecoder => {
                let ld = self.lindec.as_ref().expect("planned");
                let y = ld.time.forward_time(ctx, &memory)?;
                match &ld.ln {
                    Some(ln) => ln.forward(ctx, &y),
                    None => Ok(y),
                }
            }
            DecoderKind::SeqDecoder => {
                let routes = self.cfg.mode.routes_flat() && self.cfg.mode.has_flat();
                if routes && flat_fc.is_none() {
                    return Err(CoreError::contract(format!("{:?} mode needs the flat forecast", self.cfg.mode)));
                }
                let mut parts: Vec<Var<T>> = Vec::new();
                if routes {
                    parts.push(flat_fc.expect("checked").clone());
                }
                parts.extend(ff.clone());
                let pos = ctx.p(self.pos_emb.expect("planned"));
                let u = match &self.dec_in {
                    Some(di) => {
                        let refs: Vec<&Var<T>> = parts.iter().collect();
                        tape.add(&di.forward(ctx, &tape.concat(&refs, 2)?)?, &pos)?
                    }
                    None => tape.add(&ctx.zeros(&[xn.dim(0), self.cfg.horizon, self.cfg.d_model]), &pos)?,
                };
                let mut douts: Vec<Var<T>> = Vec::new();
                for (k, cell) in self.dec.iter().enumerate() {
                    let ins = match k {
                        0 => [u.clone(), u.clone()],
                        1 => [u.clone(), douts[0].clone()],
                        _ => [douts[k - 2].clone(), douts[k - 1].clone()],
                    };
                    let mix = |e: usize| self.mixing(ctx, Point::edge(Family::Dec, k, e));
                    douts.push(cell.decode(ctx, ins, &bundles[k], &memory, &mix)?);
                }
                Ok(douts.pop().expect("at least one decoder cell"))
            }
        })
    }

    /// Full forward pass including RevIN, the macro blend and the head-mixture loss.
    pub fn forward(&self, ctx: &Ctx<T>, batch: &Batch<T>) -> Result<Forecast<T>> {
        self.check_batch(batch)?;
        let tape = ctx.tape;
        let x = ctx.constant(batch.past.clone());
        let (xn, rv) = self.revin.normalize(ctx, &x)?;
        let target_std = rv.standardize(tape, &ctx.constant(batch.future.clone()))?;

        let flat_fc = if self.flat.is_empty() {
            None
        } else {
            let s = self.flat_forward(ctx, &xn)?;
            Some(tape.transpose(&s.f, 1, 2)?)
        };
        let (loss, point_std) = if self.enc.is_empty() {
            let fc = flat_fc.as_ref().ok_or_else(|| CoreError::config("network has neither path"))?;
            let u = rv.unscale(tape, fc)?;
            (head_loss(tape, HeadKind::MSE, &u, &target_std)?, u)
        } else {
            let z = self.seq_forward(ctx, &xn, batch, flat_fc.as_ref())?;
            self.heads_and_loss(ctx, &rv, &z, flat_fc.as_ref(), &target_std)?
        };
        let point = rv.destandardize(tape, &point_std)?;
        Ok(Forecast { loss, point_std, target_std, point })
    }

    fn heads_and_loss(
        &self,
        ctx: &Ctx<T>,
        rv: &RevInState<T>,
        z: &Var<T>,
        flat_fc: Option<&Var<T>>,
        y: &Var<T>,
    ) -> Result<(Var<T>, Var<T>)> {
        let tape = ctx.tape;
        let mac = self.mixing(ctx, Point::Macro)?.expect("macro weights always present");
        let hmix = self.mixing(ctx, Point::Head)?.ok_or_else(|| CoreError::config("head choice masked"))?;
        let out = hmix.combine_many(tape, 2, |i| {
            let head = &self.heads[i];
            let hout = head.forward(ctx, z)?;
            let fc = match (flat_fc, head.kind) {
                (Some(f), HeadKind::Quantile) => {
                    let mut s = f.shape().to_vec();
                    s.push(1);
                    Some(tape.reshape(f, &s)?)
                }
                (f, _) => f.cloned(),
            };
            let combined = mac.combine(tape, |j| match j {
                0 => Ok(hout.clone()),
                _ => fc.clone().ok_or_else(|| CoreError::contract("macro blend needs the flat forecast")),
            })?;
            let u = rv.unscale(tape, &combined)?;
            Ok(vec![Some(head_loss(tape, head.kind, &u, y)?), Some(point_forecast(tape, head.kind, &u)?)])
        })?;
        let mut it = out.into_iter().map(|v| v.expect("heads always yield"));
        Ok((it.next().expect("loss"), it.next().expect("point")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tsnas_tensor::Tape;

    pub(crate) fn batch(cfg: &NetworkConfig, b: usize, seed: u64) -> Batch<f64> {
        let mut rng = seeded(seed);
        Batch {
            past: init::uniform(&[b, cfg.lookback, cfg.n_targets], 1.0, &mut rng),
            future: init::uniform(&[b, cfg.horizon, cfg.n_targets], 1.0, &mut rng),
            past_feats: None,
            future_feats: None,
            starts: (0..b).collect(),
        }
    }

    #[test]
    fn every_mode_runs_and_is_finite() {
        for mode in [MacroMode::Mixed, MacroMode::FlatOnly, MacroMode::SeqOnly, MacroMode::Parallel, MacroMode::NoWeights] {
            let mut cfg = NetworkConfig::tiny(8, 4, 2);
            cfg.mode = mode;
            let net = Network::<f64>::supernet(&cfg, 0).unwrap();
            let tape = Tape::new();
            let out = net.forward(&Ctx::eval(&tape, &net.store), &batch(&cfg, 2, 1)).unwrap();
            assert_eq!(out.point.shape(), &[2, 4, 2]);
            assert!(out.point.value().all_finite() && out.loss.value().item().is_finite(), "{mode:?}");
        }
    }

    #[test]
    fn seq_cells_preserve_shape() {
        let cfg = NetworkConfig::tiny(8, 4, 2);
        let net = Network::<f64>::supernet(&cfg, 2).unwrap();
        let tape = Tape::no_grad();
        let ctx = Ctx::eval(&tape, &net.store);
        let mut rng = seeded(5);
        let (b, l, h, d) = (3, cfg.lookback, cfg.horizon, cfg.d_model);
        let x = || tape.constant(init::uniform(&[b, l, d], 1.0, &mut seeded(1)));
        for (k, cell) in net.enc.iter().enumerate() {
            let mix = |e: usize| net.mixing(&ctx, Point::edge(Family::Enc, k, e));
            let (o, bundles) = cell.encode(&ctx, [x(), x()], &mix).unwrap();
            assert_eq!(o.shape(), &[b, l, d]);
            let u = tape.constant(init::uniform(&[b, h, d], 1.0, &mut rng));
            let dmix = |e: usize| net.mixing(&ctx, Point::edge(Family::Dec, k, e));
            let y = net.dec[k].decode(&ctx, [u.clone(), u], &bundles, &o, &dmix).unwrap();
            assert_eq!(y.shape(), &[b, h, d]);
        }
    }

    #[test]
    fn flat_shapes_and_skip_streams() {
        let mut cfg = NetworkConfig::tiny(8, 4, 3);
        cfg.mode = MacroMode::FlatOnly;
        cfg.flat_candidates = vec![FlatOpKind::Skip];
        cfg.n_intermediate = 1;
        cfg.n_flat_cells = 1;
        let net = Network::<f64>::supernet(&cfg, 0).unwrap();
        let tape = Tape::no_grad();
        let ctx = Ctx::eval(&tape, &net.store);
        let x = tape.constant(init::uniform(&[2, 8, 3], 1.0, &mut seeded(3)));
        let s = net.flat_forward(&ctx, &x).unwrap();
        assert_eq!((s.b.shape(), s.f.shape()), (&[2, 3, 8][..], &[2, 3, 4][..]));
        // node 1 = x, node 2 = x + x
        let xt = tape.scale(&tape.transpose(&x, 1, 2).unwrap(), 2.0).unwrap();
        assert!(s.b.value().bit_eq(xt.value()));
        assert!(s.f.value().data().iter().all(|&v| v == 0.0));
    }
}
