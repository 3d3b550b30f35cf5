use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsnas_tensor::fd::{check_gradients, finite_difference_grad};
use tsnas_tensor::{inject_backward_sign_fault, Primitive, Result, Tape, Tensor, TensorError, Var};

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Weighted sum so every output element carries a distinct gradient.
fn probe(tape: &Tape<f64>, y: &Var<f64>) -> Result<Var<f64>> {
    let n = y.value().numel();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect();
    let w = tape.constant(Tensor::new(y.shape(), w)?);
    tape.sum_all(&tape.mul(y, &w)?)
}

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn assert_grad(name: &str, inputs: Vec<Tensor<f64>>, f: impl Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>) {
    let err = check_gradients(|tape, v| probe(tape, &f(tape, v)?), &inputs, H).unwrap();
    assert!(err <= TOL, "{name}: relative error {err:e}");
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let tape = Tape::<f64>::new();
    let y = tape.softmax(&tape.constant(t(&[2], &[0.0, 0.0])), 0).unwrap();
    assert_eq!(y.value().data(), &[0.5, 0.5]);
}

#[test]
fn layer_norm_of_constant_row_is_zero() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(t(&[3], &[1.0, 1.0, 1.0]));
    let y = tape
        .layer_norm(&x, &tape.constant(Tensor::ones(&[3])), &tape.constant(Tensor::zeros(&[3])), 1e-5)
        .unwrap();
    assert!(y.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn dilated_causal_conv_example() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 4, 1], &[1.0, 2.0, 3.0, 4.0]));
    let w = tape.constant(t(&[2, 1, 1], &[1.0, 1.0]));
    let y = tape.causal_conv1d(&x, &w, 2).unwrap();
    // oracle: y_t = x_t + x_{t-2}, zero left padding
    let xs = [1.0, 2.0, 3.0, 4.0];
    let oracle: Vec<f64> = (0..4).map(|i| xs[i] + if i >= 2 { xs[i - 2] } else { 0.0 }).collect();
    assert_eq!(y.value().data(), oracle.as_slice());
}

#[test]
fn backward_of_sum_of_squares() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]));
    let loss = tape.sum_all(&tape.mul(&x, &x).unwrap()).unwrap();
    let g = tape.backward(&loss).unwrap();
    assert_eq!(g.wrt(&x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_of_softmax_component() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[2], &[0.0, 0.0]));
    let s = tape.softmax(&x, 0).unwrap();
    let loss = tape.select(&s, 0, 0).unwrap();
    let g = tape.backward(&loss).unwrap();
    let g = g.wrt(&x).unwrap();
    assert!((g.data()[0] - 0.25).abs() < 1e-12 && (g.data()[1] + 0.25).abs() < 1e-12);
    let fd = finite_difference_grad(
        |v| {
            let e0 = v.data()[0].exp();
            e0 / (e0 + v.data()[1].exp())
        },
        &t(&[2], &[0.0, 0.0]),
        1e-5,
    );
    assert!(g.max_abs_diff(&fd) < 1e-9);
}

#[test]
fn two_paths_accumulate() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[1], &[3.0]));
    let a = tape.scale(&x, 2.0).unwrap();
    let b = tape.scale(&x, 5.0).unwrap();
    let loss = tape.sum_all(&tape.add(&a, &b).unwrap()).unwrap();
    assert_eq!(tape.backward(&loss).unwrap().wrt(&x).unwrap().data(), &[7.0]);
}

#[test]
fn non_scalar_loss_and_reuse_are_contract_errors() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]));
    assert!(matches!(tape.backward(&x), Err(TensorError::Contract(_))));
    let l = tape.sum_all(&x).unwrap();
    tape.backward(&l).unwrap();
    assert!(matches!(tape.backward(&l), Err(TensorError::Contract(_))));
    assert!(matches!(tape.exp(&x), Err(TensorError::Contract(_))));
}

#[test]
fn shape_errors_name_the_primitive() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 2]));
    match tape.matmul(&a, &b) {
        Err(TensorError::Shape { primitive, detail }) => {
            assert_eq!(primitive, "matmul");
            assert!(detail.contains("3") && detail.contains("4"), "{detail}");
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    assert!(matches!(tape.add(&a, &b), Err(TensorError::Shape { primitive: "add", .. })));
}

#[test]
fn non_finite_output_is_a_fault() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1], &[0.0]));
    assert_eq!(tape.log(&x).unwrap_err(), TensorError::NumericFault { primitive: "log" });
    let y = tape.constant(t(&[1], &[1000.0]));
    assert!(matches!(tape.exp(&y), Err(TensorError::NumericFault { .. })));
}

#[test]
fn eval_dropout_is_bit_identity() {
    let tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::from_f64(&[4], &[0.1, -2.0, 3.5, 1e-7]).unwrap());
    let y = tape.dropout(&x, 0.5, 99, false).unwrap();
    assert!(y.value().bit_eq(x.value()));
    assert!(y.value().shares_storage(x.value()));
    let z = tape.dropout(&x, 0.0, 99, true).unwrap();
    assert!(z.value().bit_eq(x.value()));
}

#[test]
fn train_dropout_uses_inverted_scaling() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::ones(&[1000]));
    let y = tape.dropout(&x, 0.25, 5, true).unwrap();
    let kept = y.value().data().iter().filter(|&&v| v != 0.0).count();
    assert!(y.value().data().iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12));
    assert!((650..850).contains(&kept), "kept {kept}");
    // same seed, same mask
    let y2 = tape.dropout(&x, 0.25, 5, true).unwrap();
    assert!(y.value().bit_eq(y2.value()));
}

#[test]
fn gradients_of_every_primitive() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = &mut rng;
    assert_grad("add/broadcast", vec![rand_t(&[2, 3, 4], r), rand_t(&[3, 1], r)], |tp, v| tp.add(&v[0], &v[1]));
    assert_grad("sub/broadcast", vec![rand_t(&[2, 3], r), rand_t(&[3], r)], |tp, v| tp.sub(&v[0], &v[1]));
    assert_grad("mul/broadcast", vec![rand_t(&[2, 1, 4], r), rand_t(&[3, 4], r)], |tp, v| tp.mul(&v[0], &v[1]));
    let den = rand_t(&[4], r).map(|x| x.abs() + 0.5);
    assert_grad("div", vec![rand_t(&[3, 4], r), den], |tp, v| tp.div(&v[0], &v[1]));
    let pos = rand_t(&[5], r).map(|x| x.abs() + 0.3);
    assert_grad("log", vec![pos.clone()], |tp, v| tp.log(&v[0]));
    assert_grad("sqrt", vec![pos], |tp, v| tp.sqrt(&v[0]));
    let away = rand_t(&[6], r).map(|x| if x.abs() < 0.05 { 0.3 } else { x });
    assert_grad("abs", vec![away.clone()], |tp, v| tp.abs(&v[0]));
    assert_grad("relu", vec![away], |tp, v| tp.relu(&v[0]));
    for (name, f) in [
        ("neg", Tape::neg as fn(&Tape<f64>, &Var<f64>) -> Result<Var<f64>>),
        ("exp", Tape::exp),
        ("square", Tape::square),
        ("gelu", Tape::gelu),
        ("sigmoid", Tape::sigmoid),
        ("tanh", Tape::tanh),
    ] {
        assert_grad(name, vec![rand_t(&[2, 3], r)], move |tp, v| f(tp, &v[0]));
    }
    assert_grad("scale", vec![rand_t(&[3], r)], |tp, v| tp.scale(&v[0], -1.7));
    assert_grad("add_scalar", vec![rand_t(&[3], r)], |tp, v| tp.square(&tp.add_scalar(&v[0], 0.4)?));
    assert_grad("matmul/batched", vec![rand_t(&[2, 3, 4], r), rand_t(&[2, 4, 5], r)], |tp, v| tp.matmul(&v[0], &v[1]));
    assert_grad("matmul/shared", vec![rand_t(&[2, 3, 4], r), rand_t(&[4, 2], r)], |tp, v| tp.matmul(&v[0], &v[1]));
    assert_grad("transpose", vec![rand_t(&[2, 3, 4], r)], |tp, v| tp.transpose(&v[0], 0, 2));
    assert_grad("permute", vec![rand_t(&[2, 3, 4], r)], |tp, v| tp.permute(&v[0], &[1, 2, 0]));
    assert_grad("concat", vec![rand_t(&[2, 3], r), rand_t(&[2, 1], r)], |tp, v| tp.concat(&[&v[0], &v[1]], 1));
    assert_grad("slice", vec![rand_t(&[2, 5, 2], r)], |tp, v| tp.slice(&v[0], 1, 1, 4));
    assert_grad("reshape", vec![rand_t(&[2, 6], r)], |tp, v| tp.reshape(&v[0], &[3, 4]));
    assert_grad("gather", vec![rand_t(&[2, 4], r)], |tp, v| tp.gather(&v[0], 1, vec![0, 0, 3, 2, 3]));
    assert_grad("pad", vec![rand_t(&[2, 3], r)], |tp, v| tp.pad(&v[0], 1, 2, 1));
    assert_grad("softmax/axis0", vec![rand_t(&[3, 4], r)], |tp, v| tp.softmax(&v[0], 0));
    assert_grad("softmax/axis1", vec![rand_t(&[2, 3, 4], r)], |tp, v| tp.softmax(&v[0], 1));
    assert_grad("sum", vec![rand_t(&[2, 3, 4], r)], |tp, v| tp.sum(&v[0], 1, false));
    assert_grad("mean", vec![rand_t(&[2, 3, 4], r)], |tp, v| tp.mean(&v[0], 2, true));
    assert_grad("mean_all", vec![rand_t(&[2, 3], r)], |tp, v| tp.mean_all(&v[0]));
    assert_grad("layer_norm", vec![rand_t(&[3, 5], r), rand_t(&[5], r), rand_t(&[5], r)], |tp, v| {
        tp.layer_norm(&v[0], &v[1], &v[2], 1e-5)
    });
    assert_grad("dropout/train", vec![rand_t(&[4, 4], r)], |tp, v| tp.dropout(&v[0], 0.3, 17, true));
    assert_grad("causal_conv1d", vec![rand_t(&[2, 6, 3], r), rand_t(&[3, 3, 2], r)], |tp, v| {
        tp.causal_conv1d(&v[0], &v[1], 2)
    });
    assert_grad("depthwise_conv1d", vec![rand_t(&[2, 7, 3], r), rand_t(&[5, 3], r)], |tp, v| {
        tp.depthwise_conv1d(&v[0], &v[1], 1)
    });
    assert_grad("attention", vec![rand_t(&[2, 4, 3], r), rand_t(&[2, 5, 3], r), rand_t(&[2, 5, 3], r)], |tp, v| {
        tp.attention(&v[0], &v[1], &v[2], false)
    });
    assert_grad("attention/causal", vec![rand_t(&[1, 4, 2], r), rand_t(&[1, 4, 2], r), rand_t(&[1, 4, 2], r)], |tp, v| {
        tp.apply(&Primitive::Attention { causal: true }, &[&v[0], &v[1], &v[2]])
    });
    let (b, tt, i, h) = (2, 4, 3, 2);
    assert_grad(
        "lstm",
        vec![
            rand_t(&[b, tt, i], r),
            rand_t(&[b, h], r),
            rand_t(&[b, h], r),
            rand_t(&[i, 4 * h], r),
            rand_t(&[h, 4 * h], r),
            rand_t(&[4 * h], r),
        ],
        |tp, v| {
            let (hs, c) = tp.lstm(&v[0], &v[1], &v[2], &v[3], &v[4], &v[5])?;
            tp.concat(&[&tp.reshape(&hs, &[b, tt * h])?, &c], 1)
        },
    );
    assert_grad(
        "gru",
        vec![
            rand_t(&[b, tt, i], r),
            rand_t(&[b, h], r),
            rand_t(&[i, 3 * h], r),
            rand_t(&[h, 3 * h], r),
            rand_t(&[3 * h], r),
            rand_t(&[3 * h], r),
        ],
        |tp, v| tp.gru(&v[0], &v[1], &v[2], &v[3], &v[4], &v[5]),
    );
}

/// A random expression over a fixed menu of shape-preserving and reducing steps.
fn random_composition(seed: u64, tape: &Tape<f64>, v: &[Var<f64>]) -> Result<Var<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = v[0].clone();
    let w = &v[1];
    for _ in 0..rng.random_range(2..6) {
        x = match rng.random_range(0..12) {
            0 => tape.tanh(&x)?,
            1 => tape.sigmoid(&x)?,
            2 => tape.gelu(&x)?,
            3 => tape.mul(&x, w)?,
            4 => tape.add(&x, &tape.scale(w, 0.5)?)?,
            5 => tape.softmax(&x, rng.random_range(0..2))?,
            6 => tape.transpose(&tape.matmul(&tape.transpose(&x, 0, 1)?, &tape.constant(Tensor::eye(3)))?, 0, 1)?,
            7 => tape.layer_norm(&x, &tape.constant(Tensor::ones(&[4])), &tape.constant(Tensor::zeros(&[4])), 1e-5)?,
            8 => tape.square(&x)?,
            9 => tape.sub(&x, &tape.mean(&x, 1, true)?)?,
            10 => tape.concat(&[&tape.slice(&x, 1, 2, 4)?, &tape.slice(&x, 1, 0, 2)?], 1)?,
            _ => tape.exp(&tape.scale(&x, 0.3)?)?,
        };
    }
    Ok(x)
}

#[test]
fn two_hundred_random_compositions_match_finite_differences() {
    let mut worst = 0.0f64;
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let inputs = vec![rand_t(&[3, 4], &mut rng), rand_t(&[3, 4], &mut rng)];
        let e = check_gradients(|tp, v| probe(tp, &random_composition(seed, tp, v)?), &inputs, H).unwrap();
        worst = worst.max(e);
        assert!(e <= TOL, "composition {seed}: relative error {e:e}");
    }
    eprintln!("worst relative error over 200 compositions: {worst:e}");
}

#[test]
fn injected_sign_fault_is_detected() {
    let inputs = vec![Tensor::from_f64(&[3], &[0.2, -0.5, 0.9]).unwrap()];
    let build = |tp: &Tape<f64>, v: &[Var<f64>]| probe(tp, &tp.tanh(&v[0])?);
    assert!(check_gradients(build, &inputs, H).unwrap() <= TOL);
    let _g = inject_backward_sign_fault("tanh");
    assert!(check_gradients(build, &inputs, H).unwrap() > 1.0);
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(v in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
        let tape = Tape::<f64>::no_grad();
        let n = v.len();
        let y = tape.softmax(&tape.constant(Tensor::new(&[n], v).unwrap()), 0).unwrap();
        prop_assert!(y.value().data().iter().all(|&p| p >= 0.0));
        prop_assert!((y.value().sum_all() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn f32_softmax_rows_sum_to_one(v in proptest::collection::vec(-20.0f32..20.0, 6)) {
        let tape = Tape::<f32>::no_grad();
        let y = tape.softmax(&tape.constant(Tensor::new(&[2, 3], v).unwrap()), 1).unwrap();
        for row in y.value().data().chunks(3) {
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
        }
    }
}
