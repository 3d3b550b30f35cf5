//! Finite-difference audit of every parameter and input gradient of a small graph.

use rand::seq::index::sample;
use tsnas_core::nn::Ctx;
use tsnas_core::Result;
use tsnas_tensor::fd::{finite_difference_at, relative_error};
use tsnas_tensor::rng::seeded;
use tsnas_tensor::{init, ParamStore, Tape, Tensor, Var};

/// Builds a graph's outputs from a context and its input variables.
pub type Build<'a> = dyn Fn(&Ctx<f64>, &[Var<f64>]) -> Result<Vec<Var<f64>>> + 'a;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Worst norm-wise relative error over the audited tensors.
    pub worst: f64,
    pub worst_tensor: String,
    pub coords: usize,
    pub tensors: usize,
}

pub const FD_STEP: f64 = 1e-5;

fn projected(outs: &[Var<f64>], proj: &[Tensor<f64>]) -> f64 {
    outs.iter()
        .zip(proj)
        .map(|(o, r)| o.value().data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

fn eval(store: &ParamStore<f64>, inputs: &[Tensor<f64>], build: &Build, proj: &[Tensor<f64>]) -> f64 {
    let tape = Tape::no_grad();
    let ctx = Ctx::eval(&tape, store);
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    match build(&ctx, &vars) {
        Ok(outs) => projected(&outs, proj),
        Err(_) => f64::NAN,
    }
}

fn coords(n: usize, max: usize, rng: &mut tsnas_tensor::rng::NamedRng) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        let mut v = sample(rng, n, max).into_vec();
        v.sort_unstable();
        v
    }
}

/// Compares tape gradients of Σ_k ⟨out_k, R_k⟩ (fixed random R_k) against central differences,
/// for at most `max_coords` coordinates of every parameter and input tensor. Forward runs in eval mode.
pub fn check(store: &mut ParamStore<f64>, inputs: &[Tensor<f64>], build: &Build, max_coords: usize, seed: u64) -> Result<GradCheck> {
    let mut rng = seeded(seed);
    let tape = Tape::new();
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let (outs, proj) = {
        let ctx = Ctx::eval(&tape, store);
        let outs = build(&ctx, &vars)?;
        let proj: Vec<Tensor<f64>> = outs.iter().map(|o| init::uniform(o.shape(), 1.0, &mut rng)).collect();
        (outs, proj)
    };
    let mut loss = tape.scalar(0.0);
    for (o, r) in outs.iter().zip(&proj) {
        loss = tape.add(&loss, &tape.sum_all(&tape.mul(o, &tape.constant(r.clone()))?)?)?;
    }
    let grads = tape.backward(&loss)?;

    // (label, analytic at sampled coords, numeric at sampled coords)
    let mut audited: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let value = store.value(id).clone();
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(value.shape())).to_f64_vec();
        let cs = coords(value.numel(), max_coords, &mut rng);
        let numeric = finite_difference_at(
            |v| {
                store.set_value(id, v.clone()).expect("same shape");
                eval(store, inputs, build, &proj)
            },
            &value,
            FD_STEP,
            &cs,
        );
        store.set_value(id, value).expect("same shape");
        audited.push((store.name(id).to_string(), cs.iter().map(|&c| analytic[c]).collect(), numeric));
    }
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt_or_zero(&vars[k]).to_f64_vec();
        let cs = coords(x.numel(), max_coords, &mut rng);
        let numeric = finite_difference_at(
            |v| {
                let mut xs = inputs.to_vec();
                xs[k] = v.clone();
                eval(store, &xs, build, &proj)
            },
            x,
            FD_STEP,
            &cs,
        );
        audited.push((format!("input{k}"), cs.iter().map(|&c| analytic[c]).collect(), numeric));
    }

    let global = audited.iter().flat_map(|(_, a, _)| a.iter()).map(|v| v * v).sum::<f64>().sqrt();
    // Rounding noise of one central difference is about eps·Σ|terms|/h; a tensor whose gradient is
    // below that resolution (e.g. a key bias, to which attention is invariant) compares on the floor.
    let magnitude: f64 = outs
        .iter()
        .zip(&proj)
        .map(|(o, r)| o.value().data().iter().zip(r.data()).map(|(a, b)| (a * b).abs()).sum::<f64>())
        .sum();
    let sigma = f64::EPSILON * magnitude.max(1.0) / FD_STEP;
    let mut out = GradCheck { worst: 0.0, worst_tensor: String::new(), coords: 0, tensors: audited.len() };
    for (name, a, n) in &audited {
        out.coords += a.len();
        let floor = (1e-6 * global.max(1.0)).max(1e5 * sigma * (a.len() as f64).sqrt());
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nn = n.iter().map(|v| v * v).sum::<f64>().sqrt();
        let e = if n.iter().any(|v| !v.is_finite()) {
            f64::INFINITY
        } else if na.max(nn) < floor {
            a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt() / floor
        } else {
            relative_error(a, n)
        };
        if e > out.worst || out.worst_tensor.is_empty() {
            out.worst = out.worst.max(e);
            out.worst_tensor = name.clone();
        }
    }
    Ok(out)
}

/// Uniform tensor on [lo, hi).
pub fn uniform_in(shape: &[usize], lo: f64, hi: f64, rng: &mut tsnas_tensor::rng::NamedRng) -> Tensor<f64> {
    let u = init::uniform::<f64>(shape, 1.0, rng);
    u.map(|v| lo + (v + 1.0) * 0.5 * (hi - lo))
}
