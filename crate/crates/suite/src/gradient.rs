//! Analytic vs central-difference gradients for every operation kind, at f64.

use rand::seq::SliceRandom;
use rand::Rng;
use tsnas_core::nn::{Builder, Ctx, Mixing};
use tsnas_core::ops::decomp::moving_average_decompose;
use tsnas_core::ops::flat::{FlatDims, FlatEdge, Streams};
use tsnas_core::ops::head::{head_loss, point_forecast, Head};
use tsnas_core::ops::revin::revin_normalize;
use tsnas_core::ops::seq::{Bundle, CandidateSpec, Role, SeqDims, SeqEdge, SeqPosition};
use tsnas_core::ops::{FlatOpKind, HeadKind, SeqOpKind};
use tsnas_core::Result;
use tsnas_tensor::rng::{seeded, NamedRng};
use tsnas_tensor::{init, ParamStore, Tensor, Var};

use crate::gradcheck::{check, uniform_in, Build};
use crate::{timed, SuiteReport};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const MIN_INSTANCES: usize = 20;
/// Coordinates sampled per tensor; small tensors are checked exhaustively.
const COORDS: usize = 12;

const INVARIANT: &str = "analytic gradients match central finite differences at f64 with relative error <= 1e-4";

/// Every operation kind the suite covers, in report order.
pub fn op_kinds() -> Vec<String> {
    let mut v = Vec::new();
    for k in SeqOpKind::ALL {
        v.push(format!("seq.encode.{}", k.name()));
        v.push(format!("seq.decode.{}", k.name()));
    }
    for k in FlatOpKind::ALL {
        v.push(format!("flat.{}", k.name()));
    }
    for k in HeadKind::ALL {
        v.push(format!("head.{}", k.name()));
    }
    v.extend(["revin", "decomposition", "mixed_edge", "macro_combine"].map(String::from));
    v
}

#[derive(Debug, Clone, Copy)]
struct Geo {
    b: usize,
    l: usize,
    h: usize,
    d: usize,
    n: usize,
}

fn geo(rng: &mut NamedRng) -> Geo {
    Geo { b: rng.random_range(1..=2), l: rng.random_range(4..=7), h: rng.random_range(2..=4), d: [2, 4][rng.random_range(0..2)], n: rng.random_range(1..=3) }
}

fn seq_dims(g: Geo, rng: &mut NamedRng) -> SeqDims {
    SeqDims {
        d: g.d,
        lookback: g.l,
        horizon: g.h,
        n_heads: 2,
        dropout: 0.1,
        tcn_kernel: rng.random_range(2..=3),
        septcn_kernel: rng.random_range(2..=5),
    }
}

fn seq_edge(store: &mut ParamStore<f64>, rng: &mut NamedRng, kinds: &[SeqOpKind], role: Role, g: Geo) -> Result<SeqEdge> {
    let dims = seq_dims(g, rng);
    let pos = SeqPosition { cell: rng.random_range(0..2), source: rng.random_range(0..4), n_in: 2 };
    let specs: Vec<CandidateSpec> = kinds.iter().map(|&kind| CandidateSpec { kind, stitch: rng.random_bool(0.7) }).collect();
    let mut init_rng = seeded(rng.random());
    let mut b = Builder::new(store, &mut init_rng);
    SeqEdge::new(&mut b.sub("e"), &specs, role, pos, dims)
}

fn flat_edge(store: &mut ParamStore<f64>, rng: &mut NamedRng, kinds: &[FlatOpKind], g: Geo) -> Result<FlatEdge> {
    let dims = FlatDims { lookback: g.l, horizon: g.h, width: rng.random_range(3..=6), harmonics: rng.random_range(1..=2) };
    let mut init_rng = seeded(rng.random());
    FlatEdge::new(&mut Builder::new(store, &mut init_rng), kinds, dims, rng.random_bool(0.5))
}

fn u(shape: &[usize], rng: &mut NamedRng) -> Tensor<f64> {
    init::uniform(shape, 1.0, rng)
}

fn mixing<'t>(ctx: &Ctx<'t, f64>, logits: Option<&Var<f64>>) -> Result<Mixing<f64>> {
    Ok(match logits {
        Some(l) => Mixing::Soft(ctx.tape.softmax(l, 0)?),
        None => Mixing::Hard(vec![1.0]),
    })
}

fn encode_build(edge: SeqEdge, soft: bool) -> Box<Build<'static>> {
    Box::new(move |ctx, xs| {
        let mix = mixing(ctx, soft.then(|| &xs[1]))?;
        let b = edge.encode(ctx, &mix, &xs[0])?;
        Ok([Some(b.full), Some(b.last), b.cell].into_iter().flatten().collect())
    })
}

fn decode_build(edge: SeqEdge, soft: bool) -> Box<Build<'static>> {
    Box::new(move |ctx, xs| {
        let mix = mixing(ctx, soft.then(|| &xs[5]))?;
        let bundle = Bundle { full: xs[1].clone(), last: xs[2].clone(), cell: Some(xs[3].clone()) };
        Ok(vec![edge.decode(ctx, &mix, &xs[0], Some(&bundle), Some(&xs[4]))?])
    })
}

fn flat_build(edge: FlatEdge, soft: bool) -> Box<Build<'static>> {
    Box::new(move |ctx, xs| {
        let mix = mixing(ctx, soft.then(|| &xs[2]))?;
        let s = edge.forward(ctx, &mix, &Streams { b: xs[0].clone(), f: xs[1].clone() })?;
        Ok(vec![s.b, s.f])
    })
}

/// One random instance of `kind`: parameters, inputs and the graph.
fn instance(kind: &str, rng: &mut NamedRng) -> Result<(ParamStore<f64>, Vec<Tensor<f64>>, Box<Build<'static>>)> {
    let g = geo(rng);
    let mut store = ParamStore::new();
    let seq_by_name = |n: &str| SeqOpKind::ALL.into_iter().find(|k| k.name() == n);
    let enc_inputs = |rng: &mut NamedRng| vec![u(&[g.b, g.l, g.d], rng)];
    let dec_inputs = |rng: &mut NamedRng| {
        vec![u(&[g.b, g.h, g.d], rng), u(&[g.b, g.l, g.d], rng), u(&[g.b, g.d], rng), u(&[g.b, g.d], rng), u(&[g.b, g.l, g.d], rng)]
    };
    let flat_inputs = |rng: &mut NamedRng| vec![u(&[g.b, g.n, g.l], rng), u(&[g.b, g.n, g.h], rng)];

    if let Some(rest) = kind.strip_prefix("seq.encode.") {
        let k = seq_by_name(rest).expect("known kind");
        let e = seq_edge(&mut store, rng, &[k], Role::Encoder, g)?;
        return Ok((store, enc_inputs(rng), encode_build(e, false)));
    }
    if let Some(rest) = kind.strip_prefix("seq.decode.") {
        let k = seq_by_name(rest).expect("known kind");
        let e = seq_edge(&mut store, rng, &[k], Role::Decoder, g)?;
        return Ok((store, dec_inputs(rng), decode_build(e, false)));
    }
    if let Some(rest) = kind.strip_prefix("flat.") {
        let k = FlatOpKind::ALL.into_iter().find(|k| k.name() == rest).expect("known kind");
        let e = flat_edge(&mut store, rng, &[k], g)?;
        return Ok((store, flat_inputs(rng), flat_build(e, false)));
    }
    if let Some(rest) = kind.strip_prefix("head.") {
        let k = HeadKind::ALL.into_iter().find(|k| k.name() == rest).expect("known kind");
        let mut init_rng = seeded(rng.random());
        let head = Head::new(&mut Builder::new(&mut store, &mut init_rng), k, g.d, g.n)?;
        let inputs = vec![u(&[g.b, g.h, g.d], rng), u(&[g.b, g.h, g.n], rng)];
        let build: Box<Build> = Box::new(move |ctx, xs| {
            let out = head.forward(ctx, &xs[0])?;
            Ok(vec![head_loss(ctx.tape, head.kind, &out, &xs[1])?, point_forecast(ctx.tape, head.kind, &out)?])
        });
        return Ok((store, inputs, build));
    }
    match kind {
        "revin" => {
            let x = uniform_in(&[g.b, g.l, g.n], -2.0, 3.0, rng);
            let inputs = vec![x, uniform_in(&[g.n], 0.5, 1.5, rng), u(&[g.n], rng), u(&[g.b, g.h, g.n], rng)];
            let build: Box<Build> = Box::new(|ctx, xs| {
                let (y, st) = revin_normalize(ctx.tape, &xs[0], Some((xs[1].clone(), xs[2].clone())))?;
                let back = st.denormalize(ctx.tape, &xs[3])?;
                let fwd = st.standardize(ctx.tape, &xs[3])?;
                Ok(vec![y, back, fwd])
            });
            Ok((store, inputs, build))
        }
        "decomposition" => {
            let kernel = [1, 3, 5][rng.random_range(0..3)];
            let build: Box<Build> = Box::new(move |ctx, xs| {
                let (t, s) = moving_average_decompose(ctx.tape, &xs[0], kernel)?;
                Ok(vec![t, s])
            });
            Ok((store, vec![u(&[g.b, g.l, g.n], rng)], build))
        }
        "mixed_edge" => {
            let variant = rng.random_range(0..3);
            if variant == 2 {
                let mut kinds = FlatOpKind::ALL.to_vec();
                kinds.shuffle(rng);
                kinds.truncate(rng.random_range(2..=5));
                let e = flat_edge(&mut store, rng, &kinds, g)?;
                let mut inputs = flat_inputs(rng);
                inputs.push(u(&[kinds.len()], rng));
                return Ok((store, inputs, flat_build(e, true)));
            }
            let mut kinds = SeqOpKind::ALL.to_vec();
            kinds.shuffle(rng);
            kinds.truncate(rng.random_range(2..=4));
            if variant == 0 {
                let e = seq_edge(&mut store, rng, &kinds, Role::Encoder, g)?;
                let mut inputs = enc_inputs(rng);
                inputs.push(u(&[kinds.len()], rng));
                Ok((store, inputs, encode_build(e, true)))
            } else {
                let e = seq_edge(&mut store, rng, &kinds, Role::Decoder, g)?;
                let mut inputs = dec_inputs(rng);
                inputs.push(u(&[kinds.len()], rng));
                Ok((store, inputs, decode_build(e, true)))
            }
        }
        "macro_combine" => {
            let inputs = vec![u(&[g.b, g.h, g.n], rng), u(&[g.b, g.h, g.n], rng), u(&[2], rng)];
            let build: Box<Build> = Box::new(|ctx, xs| {
                let mix = Mixing::Soft(ctx.tape.softmax(&xs[2], 0)?);
                Ok(vec![mix.combine(ctx.tape, |j| Ok(xs[j].clone()))?])
            });
            Ok((store, inputs, build))
        }
        other => panic!("unknown op kind {other}"),
    }
}

/// `instances` random instances per operation kind.
pub fn run_gradient_suite(instances: usize, seed: u64) -> SuiteReport {
    timed(|| {
        let mut report = SuiteReport::new("gradient");
        let mut per_kind = serde_json::Map::new();
        for (ki, kind) in op_kinds().iter().enumerate() {
            let mut rng = seeded(seed.wrapping_mul(1_000_003).wrapping_add(ki as u64));
            let mut worst = 0.0f64;
            let mut where_ = String::new();
            let mut ran = 0usize;
            for i in 0..instances {
                let res = instance(kind, &mut rng).and_then(|(mut store, inputs, build)| check(&mut store, &inputs, &*build, COORDS, rng.random()));
                match res {
                    Ok(c) => {
                        ran += 1;
                        if c.worst > worst || where_.is_empty() {
                            worst = worst.max(c.worst);
                            where_ = format!("instance {i}, tensor {}", c.worst_tensor);
                        }
                    }
                    Err(e) => {
                        worst = f64::INFINITY;
                        where_ = format!("instance {i} failed to run: {e}");
                    }
                }
            }
            per_kind.insert(kind.clone(), serde_json::json!({ "instances": ran, "worst_rel_error": worst }));
            report.at_most(kind.as_str(), INVARIANT, worst, GRAD_TOLERANCE, where_);
            report.at_least(format!("{kind}.instances"), "at least 20 random instances per operation kind", ran as f64, instances as f64, "");
        }
        report.extra = serde_json::Value::Object(per_kind);
        report
    })
}
