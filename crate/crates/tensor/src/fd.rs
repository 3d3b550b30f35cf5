//! Central finite differences, the reference for every backward rule.

use crate::element::{cast, Element};
use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Central-difference gradient of `f` at `x`; error is O(h²).
pub fn finite_difference_grad<T: Element>(mut f: impl FnMut(&Tensor<T>) -> f64, x: &Tensor<T>, h: f64) -> Tensor<T> {
    let coords: Vec<usize> = (0..x.numel()).collect();
    let g = finite_difference_at(&mut f, x, h, &coords);
    Tensor::new(x.shape(), g.into_iter().map(cast).collect()).expect("same shape")
}

/// Central differences at selected flat coordinates only.
pub fn finite_difference_at<T: Element>(
    mut f: impl FnMut(&Tensor<T>) -> f64,
    x: &Tensor<T>,
    h: f64,
    coords: &[usize],
) -> Vec<f64> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let base = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let mut v = base.clone();
            let x0 = base[i].to_f64().unwrap();
            v[i] = cast(x0 + h);
            let fp = f(&Tensor::new(x.shape(), v.clone()).unwrap());
            v[i] = cast(x0 - h);
            let fm = f(&Tensor::new(x.shape(), v).unwrap());
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Norm-wise relative error ‖a − b‖ / max(‖a‖, ‖b‖), with an absolute floor
/// so that two vanishing gradients compare equal.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-10)
}

/// Compares tape gradients of a scalar-valued graph against central
/// differences, w.r.t. every input. Returns the worst relative error.
///
/// `build` is invoked once on a recording tape and then repeatedly on
/// no-grad tapes, so it must be deterministic.
pub fn check_gradients(
    build: impl Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
    inputs: &[Tensor<f64>],
    h: f64,
) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&tape, &vars)?;
    let grads = tape.backward(&loss)?;
    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt_or_zero(&vars[k]).to_f64_vec();
        let numeric = finite_difference_at(
            |xk| {
                let t = Tape::no_grad();
                let vs: Vec<Var<f64>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, v)| t.constant(if j == k { xk.clone() } else { v.clone() }))
                    .collect();
                build(&t, &vs).map(|l| l.value().item()).unwrap_or(f64::NAN)
            },
            x,
            h,
            &(0..x.numel()).collect::<Vec<_>>(),
        );
        let e = relative_error(&analytic, &numeric);
        worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
    }
    Ok(worst)
}
