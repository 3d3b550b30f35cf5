use tsnas_tensor::{init, Element, ParamId, Tensor, Var};

use super::SeqOpKind;
use crate::error::{CoreError, Result};
use crate::nn::{Builder, Ctx, LayerNorm, Linear, Mixing};

/// What an encoder edge exposes to its paired decoder edge.
#[derive(Debug, Clone)]
pub struct Bundle<T: Element> {
    /// [B, L, d]
    pub full: Var<T>,
    /// [B, d]
    pub last: Var<T>,
    /// [B, d]; `None` when no consumer needs it.
    pub cell: Option<Var<T>>,
}

impl<T: Element> Bundle<T> {
    pub fn zeros(ctx: &Ctx<T>, b: usize, l: usize, d: usize) -> Self {
        Bundle { full: ctx.zeros(&[b, l, d]), last: ctx.zeros(&[b, d]), cell: Some(ctx.zeros(&[b, d])) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Encoder,
    Decoder,
}

/// Location of an edge: cell index k, source node j, input-node count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqPosition {
    pub cell: usize,
    pub source: usize,
    pub n_in: usize,
}

/// 2^max(0, j + k − n_in)
pub fn tcn_dilation(pos: SeqPosition) -> usize {
    1usize << (pos.source + pos.cell).saturating_sub(pos.n_in)
}

#[derive(Debug, Clone, Copy)]
pub struct SeqDims {
    pub d: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub tcn_kernel: usize,
    pub septcn_kernel: usize,
}

#[derive(Debug, Clone)]
struct Mha {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Mha {
    fn new<T: Element>(b: &mut Builder<T>, name: &str, d: usize, heads: usize) -> Result<Self> {
        let mut s = b.sub(name);
        Ok(Mha {
            q: Linear::new(&mut s, "q", d, d, true)?,
            k: Linear::new(&mut s, "k", d, d, true)?,
            v: Linear::new(&mut s, "v", d, d, true)?,
            o: Linear::new(&mut s, "o", d, d, true)?,
            heads,
        })
    }

    fn split<T: Element>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let (b, t, d) = (x.dim(0), x.dim(1), x.dim(2));
        let r = ctx.tape.reshape(x, &[b, t, self.heads, d / self.heads])?;
        Ok(ctx.tape.permute(&r, &[0, 2, 1, 3])?)
    }

    fn forward<T: Element>(&self, ctx: &Ctx<T>, x: &Var<T>, mem: &Var<T>) -> Result<Var<T>> {
        let q = self.split(ctx, &self.q.forward(ctx, x)?)?;
        let k = self.split(ctx, &self.k.forward(ctx, mem)?)?;
        let v = self.split(ctx, &self.v.forward(ctx, mem)?)?;
        let a = ctx.tape.attention(&q, &k, &v, false)?;
        let a = ctx.tape.permute(&a, &[0, 2, 1, 3])?;
        let a = ctx.tape.reshape(&a, &[x.dim(0), x.dim(1), x.dim(2)])?;
        self.o.forward(ctx, &a)
    }
}

#[derive(Debug, Clone)]
enum SeqOp {
    TSMixer { ln1: LayerNorm, time: Linear, ln2: LayerNorm, fc1: Linear, fc2: Linear },
    Lstm { w_ih: ParamId, w_hh: ParamId, bias: ParamId },
    Gru { w_ih: ParamId, w_hh: ParamId, b_ih: ParamId, b_hh: ParamId },
    Transformer { sa: Mha, ln1: LayerNorm, cross: Option<(Mha, LayerNorm)>, ff1: Linear, ff2: Linear, ln2: LayerNorm },
    Tcn { w: ParamId, b: ParamId, ln: LayerNorm, dilation: usize },
    SepTcn { dw: ParamId, pw: Linear, ln: LayerNorm, dilation: usize },
    Skip,
}

/// Decoder-side merge of the paired encoder output: L→H time map, feature concat, 2d→d projection.
#[derive(Debug, Clone)]
struct Fuse {
    align: Linear,
    proj: Linear,
}

#[derive(Debug, Clone)]
struct Candidate {
    kind: SeqOpKind,
    op: SeqOp,
    stitch: Option<Linear>,
    fuse: Option<Fuse>,
}

/// Per-candidate construction switches.
#[derive(Debug, Clone, Copy)]
pub struct CandidateSpec {
    pub kind: SeqOpKind,
    /// Encoder only: synthesize a cell-gate state from the last step.
    pub stitch: bool,
}

/// One Seq edge with an instance of every candidate.
#[derive(Debug, Clone)]
pub struct SeqEdge {
    cands: Vec<Candidate>,
    role: Role,
    dims: SeqDims,
}

fn consumes_full(kind: SeqOpKind) -> bool {
    matches!(kind, SeqOpKind::TCN | SeqOpKind::SepTCN | SeqOpKind::TSMixer)
}

impl SeqEdge {
    pub fn new<T: Element>(
        b: &mut Builder<T>,
        specs: &[CandidateSpec],
        role: Role,
        pos: SeqPosition,
        dims: SeqDims,
    ) -> Result<Self> {
        let d = dims.d;
        if dims.n_heads == 0 || d % dims.n_heads != 0 {
            return Err(CoreError::config(format!("d_model {d} not divisible by {} heads", dims.n_heads)));
        }
        let len = match role {
            Role::Encoder => dims.lookback,
            Role::Decoder => dims.horizon,
        };
        let dil = tcn_dilation(pos);
        let mut cands = Vec::new();
        for spec in specs {
            let mut s = b.sub(spec.kind.slug());
            let op = match spec.kind {
                SeqOpKind::TSMixer => SeqOp::TSMixer {
                    ln1: LayerNorm::new(&mut s, "ln1", d)?,
                    time: Linear::new(&mut s, "time", len, len, true)?,
                    ln2: LayerNorm::new(&mut s, "ln2", d)?,
                    fc1: Linear::new(&mut s, "fc1", d, 2 * d, true)?,
                    fc2: Linear::new(&mut s, "fc2", 2 * d, d, true)?,
                },
                SeqOpKind::LSTM => SeqOp::Lstm {
                    w_ih: s.weight("w_ih", &[d, 4 * d], d)?,
                    w_hh: s.weight("w_hh", &[d, 4 * d], d)?,
                    bias: s.weight("bias", &[4 * d], d)?,
                },
                SeqOpKind::GRU => SeqOp::Gru {
                    w_ih: s.weight("w_ih", &[d, 3 * d], d)?,
                    w_hh: s.weight("w_hh", &[d, 3 * d], d)?,
                    b_ih: s.weight("b_ih", &[3 * d], d)?,
                    b_hh: s.weight("b_hh", &[3 * d], d)?,
                },
                SeqOpKind::Transformer => SeqOp::Transformer {
                    sa: Mha::new(&mut s, "sa", d, dims.n_heads)?,
                    ln1: LayerNorm::new(&mut s, "ln1", d)?,
                    cross: match role {
                        Role::Decoder => Some((Mha::new(&mut s, "ca", d, dims.n_heads)?, LayerNorm::new(&mut s, "ln_ca", d)?)),
                        Role::Encoder => None,
                    },
                    ff1: Linear::new(&mut s, "ff1", d, 4 * d, true)?,
                    ff2: Linear::new(&mut s, "ff2", 4 * d, d, true)?,
                    ln2: LayerNorm::new(&mut s, "ln2", d)?,
                },
                SeqOpKind::TCN => SeqOp::Tcn {
                    w: s.weight("w", &[dims.tcn_kernel, d, d], dims.tcn_kernel * d)?,
                    b: s.zeros("b", &[d])?,
                    ln: LayerNorm::new(&mut s, "ln", d)?,
                    dilation: dil,
                },
                SeqOpKind::SepTCN => SeqOp::SepTcn {
                    dw: s.weight("dw", &[dims.septcn_kernel, d], dims.septcn_kernel)?,
                    pw: Linear::new(&mut s, "pw", d, d, true)?,
                    ln: LayerNorm::new(&mut s, "ln", d)?,
                    dilation: dil,
                },
                SeqOpKind::Skip => SeqOp::Skip,
            };
            let stitch = if role == Role::Encoder && spec.stitch && spec.kind != SeqOpKind::LSTM {
                Some(Linear::new(&mut s, "stitch", d, d, true)?)
            } else {
                None
            };
            let fuse = if role == Role::Decoder && consumes_full(spec.kind) {
                Some(Fuse {
                    align: Linear::new(&mut s, "align", dims.lookback, dims.horizon, true)?,
                    proj: Linear::new(&mut s, "proj", 2 * d, d, true)?,
                })
            } else {
                None
            };
            cands.push(Candidate { kind: spec.kind, op, stitch, fuse });
        }
        Ok(SeqEdge { cands, role, dims })
    }

    pub fn kinds(&self) -> Vec<SeqOpKind> {
        self.cands.iter().map(|c| c.kind).collect()
    }

    pub fn role(&self) -> Role {
        self.role
    }

    fn check_input<T: Element>(&self, x: &Var<T>) -> Result<()> {
        if x.rank() != 3 || x.dim(2) != self.dims.d {
            return Err(CoreError::config(format!(
                "seq op expects [B, T, {}], got {:?}",
                self.dims.d,
                x.shape()
            )));
        }
        Ok(())
    }

    fn body<T: Element>(&self, ctx: &Ctx<T>, op: &SeqOp, x: &Var<T>, mem: Option<&Var<T>>) -> Result<Var<T>> {
        let tape = ctx.tape;
        let p = self.dims.dropout;
        Ok(match op {
            SeqOp::Skip => x.clone(),
            SeqOp::TSMixer { ln1, time, ln2, fc1, fc2 } => {
                let t = time.forward_time(ctx, &ln1.forward(ctx, x)?)?;
                let x1 = tape.add(x, &ctx.dropout(&tape.gelu(&t)?, p)?)?;
                let f = ctx.dropout(&tape.gelu(&fc1.forward(ctx, &ln2.forward(ctx, &x1)?)?)?, p)?;
                tape.add(&x1, &ctx.dropout(&fc2.forward(ctx, &f)?, p)?)?
            }
            SeqOp::Transformer { sa, ln1, cross, ff1, ff2, ln2 } => {
                let a = sa.forward(ctx, x, x)?;
                let mut h = ln1.forward(ctx, &tape.add(x, &ctx.dropout(&a, p)?)?)?;
                if let Some((ca, ln)) = cross {
                    let mem = mem.ok_or_else(|| CoreError::contract("Transformer decoder needs encoder memory"))?;
                    let c = ca.forward(ctx, &h, mem)?;
                    h = ln.forward(ctx, &tape.add(&h, &ctx.dropout(&c, p)?)?)?;
                }
                let f = ff2.forward(ctx, &tape.gelu(&ff1.forward(ctx, &h)?)?)?;
                ln2.forward(ctx, &tape.add(&h, &ctx.dropout(&f, p)?)?)?
            }
            SeqOp::Tcn { w, b, ln, dilation } => {
                let c = tape.add(&tape.causal_conv1d(x, &ctx.p(*w), *dilation)?, &ctx.p(*b))?;
                ln.forward(ctx, &tape.add(x, &ctx.dropout(&tape.gelu(&c)?, p)?)?)?
            }
            SeqOp::SepTcn { dw, pw, ln, dilation } => {
                let c = pw.forward(ctx, &tape.depthwise_conv1d(x, &ctx.p(*dw), *dilation)?)?;
                ln.forward(ctx, &tape.add(x, &ctx.dropout(&tape.gelu(&c)?, p)?)?)?
            }
            SeqOp::Lstm { .. } | SeqOp::Gru { .. } => unreachable!("recurrent ops are handled with their states"),
        })
    }

    fn lstm<T: Element>(&self, ctx: &Ctx<T>, op: &SeqOp, x: &Var<T>, h0: &Var<T>, c0: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let SeqOp::Lstm { w_ih, w_hh, bias } = op else { unreachable!() };
        Ok(ctx.tape.lstm(x, h0, c0, &ctx.p(*w_ih), &ctx.p(*w_hh), &ctx.p(*bias))?)
    }

    fn gru<T: Element>(&self, ctx: &Ctx<T>, op: &SeqOp, x: &Var<T>, h0: &Var<T>) -> Result<Var<T>> {
        let SeqOp::Gru { w_ih, w_hh, b_ih, b_hh } = op else { unreachable!() };
        Ok(ctx.tape.gru(x, h0, &ctx.p(*w_ih), &ctx.p(*w_hh), &ctx.p(*b_ih), &ctx.p(*b_hh))?)
    }

    /// Candidate `i` in the encoder role: output [B, L, d] plus its bundle.
    pub fn encode_op<T: Element>(&self, ctx: &Ctx<T>, i: usize, x: &Var<T>) -> Result<Bundle<T>> {
        self.check_input(x)?;
        let c = &self.cands[i];
        let (b, t, d) = (x.dim(0), x.dim(1), x.dim(2));
        let (full, lstm_cell) = match &c.op {
            SeqOp::Lstm { .. } => {
                let z = ctx.zeros(&[b, d]);
                let (hs, cell) = self.lstm(ctx, &c.op, x, &z, &z)?;
                (hs, Some(cell))
            }
            SeqOp::Gru { .. } => (self.gru(ctx, &c.op, x, &ctx.zeros(&[b, d]))?, None),
            op => (self.body(ctx, op, x, None)?, None),
        };
        let last = ctx.tape.select(&full, 1, t - 1)?;
        let cell = match (lstm_cell, &c.stitch) {
            (Some(cell), _) => Some(cell),
            (None, Some(st)) => Some(st.forward(ctx, &last)?),
            (None, None) => None,
        };
        Ok(Bundle { full, last, cell })
    }

    /// Candidate `i` in the decoder role on x [B, H, d].
    pub fn decode_op<T: Element>(
        &self,
        ctx: &Ctx<T>,
        i: usize,
        x: &Var<T>,
        paired: Option<&Bundle<T>>,
        memory: Option<&Var<T>>,
    ) -> Result<Var<T>> {
        self.check_input(x)?;
        let c = &self.cands[i];
        let need = |what: &str| {
            paired.ok_or_else(|| CoreError::contract(format!("{} decoder needs the paired encoder {what}", c.kind.name())))
        };
        match &c.op {
            SeqOp::Lstm { .. } => {
                let st = need("state")?;
                let c0 = st.cell.as_ref().ok_or_else(|| CoreError::contract("LSTM decoder needs a cell-gate state"))?;
                Ok(self.lstm(ctx, &c.op, x, &st.last, c0)?.0)
            }
            SeqOp::Gru { .. } => self.gru(ctx, &c.op, x, &need("state")?.last),
            op => {
                let input = match &c.fuse {
                    Some(f) => {
                        let enc = f.align.forward_time(ctx, &need("output")?.full)?;
                        f.proj.forward(ctx, &ctx.tape.concat(&[x, &enc], 2)?)?
                    }
                    None => x.clone(),
                };
                self.body(ctx, op, &input, memory)
            }
        }
    }

    pub fn encode<T: Element>(&self, ctx: &Ctx<T>, mix: &Mixing<T>, x: &Var<T>) -> Result<Bundle<T>> {
        self.check_len(mix)?;
        let out = mix.combine_many(ctx.tape, 3, |i| {
            let b = self.encode_op(ctx, i, x)?;
            Ok(vec![Some(b.full), Some(b.last), b.cell])
        })?;
        let mut it = out.into_iter();
        Ok(Bundle {
            full: it.next().flatten().expect("full"),
            last: it.next().flatten().expect("last"),
            cell: it.next().flatten(),
        })
    }

    pub fn decode<T: Element>(
        &self,
        ctx: &Ctx<T>,
        mix: &Mixing<T>,
        x: &Var<T>,
        paired: Option<&Bundle<T>>,
        memory: Option<&Var<T>>,
    ) -> Result<Var<T>> {
        self.check_len(mix)?;
        mix.combine(ctx.tape, |i| self.decode_op(ctx, i, x, paired, memory))
    }

    fn check_len<T: Element>(&self, mix: &Mixing<T>) -> Result<()> {
        if mix.len() != self.cands.len() {
            return Err(CoreError::config(format!("{} weights for {} seq candidates", mix.len(), self.cands.len())));
        }
        Ok(())
    }

    /// Every parameter owned by candidate `i` (test and audit helper).
    pub fn zero_candidate<T: Element>(&self, store: &mut tsnas_tensor::ParamStore<T>, prefix: &str, i: usize) {
        let slug = format!("{prefix}.{}.", self.cands[i].kind.slug());
        let ids: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with(&slug)).collect();
        for id in ids {
            let z = Tensor::zeros(store.value(id).shape());
            store.set_value(id, z).expect("same shape");
        }
    }
}

/// Random [B, T, d] input helper shared by tests.
pub fn random_sequence<T: Element>(shape: &[usize], seed: u64) -> Tensor<T> {
    init::uniform(shape, 1.0, &mut tsnas_tensor::rng::seeded(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tsnas_tensor::rng::seeded;
    use tsnas_tensor::{ParamStore, Tape};

    fn dims() -> SeqDims {
        SeqDims { d: 4, lookback: 8, horizon: 5, n_heads: 2, dropout: 0.1, tcn_kernel: 3, septcn_kernel: 5 }
    }

    fn edge(role: Role, kinds: &[SeqOpKind], pos: SeqPosition) -> (ParamStore<f64>, SeqEdge) {
        let mut store = ParamStore::new();
        let mut rng = seeded(5);
        let specs: Vec<_> = kinds.iter().map(|&kind| CandidateSpec { kind, stitch: true }).collect();
        let mut b = Builder::new(&mut store, &mut rng);
        let e = SeqEdge::new(&mut b.sub("e"), &specs, role, pos, dims()).unwrap();
        (store, e)
    }

    const POS: SeqPosition = SeqPosition { cell: 0, source: 0, n_in: 2 };

    #[test]
    fn dilation_schedule() {
        assert_eq!(tcn_dilation(SeqPosition { cell: 0, source: 2, n_in: 2 }), 1);
        assert_eq!(tcn_dilation(SeqPosition { cell: 1, source: 3, n_in: 2 }), 4);
        assert_eq!(tcn_dilation(SeqPosition { cell: 0, source: 0, n_in: 2 }), 1);
        for k in 0..3 {
            for j in 0..5 {
                let want = 2f64.powi((j + k) as i32 - 2).max(1.0) as usize;
                assert_eq!(tcn_dilation(SeqPosition { cell: k, source: j, n_in: 2 }), want);
            }
        }
    }

    #[test]
    fn skip_encoder_bundle() {
        let (store, e) = edge(Role::Encoder, &[SeqOpKind::Skip], POS);
        let tape = Tape::no_grad();
        let ctx = Ctx::eval(&tape, &store);
        let x = tape.constant(random_sequence(&[2, 8, 4], 1));
        let b = e.encode(&ctx, &Mixing::Hard(vec![1.0]), &x).unwrap();
        assert_eq!(b.full.shape(), &[2, 8, 4]);
        assert!(b.full.value().bit_eq(x.value()));
        let last = tape.select(&x, 1, 7).unwrap();
        assert!(b.last.value().bit_eq(last.value()));
        let st = Linear { w: store.id("e.skip.stitch.w").unwrap(), b: store.id("e.skip.stitch.b"), d_in: 4, d_out: 4 };
        assert!(b.cell.unwrap().value().bit_eq(st.forward(&ctx, &last).unwrap().value()));
    }

    #[test]
    fn zero_lstm_decoder_stays_at_zero() {
        let (mut es, enc) = edge(Role::Encoder, &[SeqOpKind::LSTM], POS);
        let (mut ds, dec) = edge(Role::Decoder, &[SeqOpKind::LSTM], POS);
        enc.zero_candidate(&mut es, "e", 0);
        dec.zero_candidate(&mut ds, "e", 0);
        let tape = Tape::no_grad();
        let bundle = enc.encode(&Ctx::eval(&tape, &es), &Mixing::Hard(vec![1.0]), &tape.constant(Tensor::zeros(&[2, 8, 4]))).unwrap();
        let y = dec
            .decode(&Ctx::eval(&tape, &ds), &Mixing::Hard(vec![1.0]), &tape.constant(Tensor::zeros(&[2, 5, 4])), Some(&bundle), None)
            .unwrap();
        assert_eq!(y.shape(), &[2, 5, 4]);
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn state_consumers_require_pairing() {
        for k in [SeqOpKind::LSTM, SeqOpKind::GRU, SeqOpKind::TCN, SeqOpKind::SepTCN, SeqOpKind::TSMixer] {
            let (s, dec) = edge(Role::Decoder, &[k], POS);
            let tape = Tape::no_grad();
            let x = tape.constant(Tensor::zeros(&[1, 5, 4]));
            let r = dec.decode(&Ctx::eval(&tape, &s), &Mixing::Hard(vec![1.0]), &x, None, None);
            assert!(matches!(r, Err(CoreError::Contract(_))), "{k:?}");
        }
    }

    #[test]
    fn wrong_width_is_a_shape_error() {
        let (s, e) = edge(Role::Encoder, &[SeqOpKind::Skip], POS);
        let tape = Tape::no_grad();
        let x = tape.constant(Tensor::zeros(&[1, 8, 3]));
        assert!(e.encode(&Ctx::eval(&tape, &s), &Mixing::Hard(vec![1.0]), &x).is_err());
    }

    #[test]
    fn causal_encoders() {
        for k in [SeqOpKind::TCN, SeqOpKind::SepTCN, SeqOpKind::LSTM, SeqOpKind::GRU] {
            let (s, e) = edge(Role::Encoder, &[k], SeqPosition { cell: 1, source: 3, n_in: 2 });
            let tape = Tape::no_grad();
            let ctx = Ctx::eval(&tape, &s);
            let base = random_sequence::<f64>(&[1, 8, 4], 2);
            for t in 0..8 {
                let mut v = base.to_vec();
                for c in 0..4 {
                    v[t * 4 + c] += 0.5;
                }
                let y0 = e.encode_op(&ctx, 0, &tape.constant(base.clone())).unwrap().full;
                let y1 = e.encode_op(&ctx, 0, &tape.constant(Tensor::new(&[1, 8, 4], v).unwrap())).unwrap().full;
                for s in 0..t {
                    for c in 0..4 {
                        assert_eq!(y0.value().get(&[0, s, c]).to_bits(), y1.value().get(&[0, s, c]).to_bits(), "{k:?} t={t} s={s}");
                    }
                }
            }
        }
    }
}
