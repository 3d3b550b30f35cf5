use std::cell::RefCell;
use std::collections::BTreeMap;

use tsnas_core::arch::{Point, PointState};
use tsnas_core::data::{make_synthetic, SyntheticKind};
use tsnas_core::genotype::Provenance;
use tsnas_core::nn::Ctx;
use tsnas_core::ops::DecoderKind;
use tsnas_core::prune::Pruner;
use tsnas_core::search::{SearchConfig, SearchData, SearchState};
use tsnas_core::{Batch, MacroMode, Network, NetworkConfig};
use tsnas_suite::gradcheck::check;
use tsnas_tensor::fd::{finite_difference_grad, relative_error};
use tsnas_tensor::optim::{clip_grad_norm, Adam, AdamConfig};
use tsnas_tensor::rng::seeded;
use tsnas_tensor::{init, ParamRole, Tape, Tensor};

fn batch(cfg: &NetworkConfig, b: usize, seed: u64) -> Batch<f64> {
    let mut rng = seeded(seed);
    Batch {
        past: init::uniform(&[b, cfg.lookback, cfg.n_targets], 1.0, &mut rng),
        future: init::uniform(&[b, cfg.horizon, cfg.n_targets], 1.0, &mut rng),
        past_feats: None,
        future_feats: None,
        starts: (0..b).collect(),
    }
}

fn tiny(mode: MacroMode) -> NetworkConfig {
    let mut c = NetworkConfig::tiny(8, 4, 2);
    c.mode = mode;
    c
}

fn point(net: &Network<f64>, b: &Batch<f64>) -> Tensor<f64> {
    let tape = Tape::no_grad();
    net.forward(&Ctx::eval(&tape, &net.store), b).unwrap().point.value().clone()
}

#[test]
fn whole_network_gradients_match_finite_differences() {
    // one cell per family keeps every candidate kind while bounding the FD cost
    for (i, mode) in [MacroMode::Mixed, MacroMode::Parallel].into_iter().enumerate() {
        let mut cfg = tiny(mode);
        cfg.n_seq_cells = 1;
        cfg.n_flat_cells = 1;
        cfg.n_intermediate = 1;
        let net = Network::<f64>::supernet(&cfg, i as u64).unwrap();
        let b = batch(&cfg, 2, 7 + i as u64);
        let mut store = net.store.clone();
        let build = |ctx: &Ctx<f64>, _: &[tsnas_tensor::Var<f64>]| {
            let f = net.forward(ctx, &b)?;
            Ok(vec![f.loss, f.point])
        };
        let c = check(&mut store, &[], &build, 2, 11).unwrap();
        println!("{mode:?}: {} tensors, worst {:.2e} at {}", c.tensors, c.worst, c.worst_tensor);
        assert!(c.tensors >= store.len(), "every parameter audited");
        assert!(c.worst <= 1e-3, "{mode:?}: {} at {}", c.worst, c.worst_tensor);
    }
}

#[test]
fn flat_only_ignores_seq_parameters_and_vice_versa() {
    for (mode, other) in [(MacroMode::FlatOnly, "seq"), (MacroMode::SeqOnly, "flat")] {
        let cfg = tiny(mode);
        let mut net = Network::<f64>::supernet(&cfg, 3).unwrap();
        let b = batch(&cfg, 2, 4);
        let before = point(&net, &b);
        let ids = if other == "seq" { net.seq_params() } else { net.flat_params() };
        for id in ids {
            let v = net.store.value(id);
            let bumped = Tensor::new(v.shape(), v.data().iter().map(|x| x + 0.5).collect()).unwrap();
            net.store.set_value(id, bumped).unwrap();
        }
        assert!(point(&net, &b).bit_eq(&before), "{mode:?} depends on {other} parameters");
    }
}

#[test]
fn linear_decoder_choice_zeroes_seq_decoder_gradients() {
    let cfg = tiny(MacroMode::Mixed);
    let mut net = Network::<f64>::supernet(&cfg, 5).unwrap();
    let lin = net.plan.decoders.iter().position(|&d| d == DecoderKind::LinearDecoder).unwrap();
    net.arch.set(Point::Decoder, Some(PointState::Forced(lin)));
    let dec = net.params_with_prefix(&["dec."]);
    assert!(!dec.is_empty());
    let tape = Tape::new();
    let loss = net.forward(&Ctx::eval(&tape, &net.store), &batch(&cfg, 2, 6)).unwrap().loss;
    let grads = tape.backward(&loss).unwrap();
    for id in dec {
        if let Some(g) = grads.param(id) {
            assert!(g.data().iter().all(|&x| x == 0.0), "{}", net.store.name(id));
        }
    }
    // the linear path itself is live
    let lindec = net.params_with_prefix(&["lindec"]);
    assert!(lindec.iter().any(|&id| grads.param(id).is_some_and(|g| g.data().iter().any(|&x| x != 0.0))));
}

#[test]
fn arch_step_is_a_first_order_step_on_the_validation_loss() {
    let cfg = tiny(MacroMode::Mixed);
    let scfg = SearchConfig { batch_size: 4, stride: 4, ..Default::default() };
    let ds = make_synthetic(SyntheticKind::SineMixture, 80, 2, 0.1, 0);
    let data = SearchData::new(&ds, 80, &cfg, 4).unwrap();
    let mut st = SearchState::<f64>::new(&cfg, &scfg).unwrap();
    // a few weight steps so the arch gradient is not the initial one
    for k in 0..2 {
        st.weight_step(&data.train.batch(&data.train.starts[k * 2..k * 2 + 2])).unwrap();
    }
    let b = data.val.batch::<f64>(&data.val.starts[..2]);
    let arch = st.net.store.ids_with_role(ParamRole::Architecture);
    let weights = st.net.store.ids_with_role(ParamRole::Weight);
    assert!(!arch.is_empty() && arch.iter().all(|a| !weights.contains(a)));
    assert_eq!(arch.len() + weights.len(), st.net.store.len(), "every tensor has exactly one role");

    let tape = Tape::new();
    let loss = st.net.forward(&Ctx::new(&tape, &st.net.store, false, Some(ParamRole::Weight), 0), &b).unwrap().loss;
    let grads = tape.backward(&loss).unwrap();
    assert!(st.net.store.ids_with_role(ParamRole::Weight).iter().all(|&id| grads.param(id).is_none()));

    let mut probe = st.net.clone();
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for &id in &arch {
        let v = probe.store.value(id).clone();
        let g = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(v.shape()));
        analytic.extend(g.to_f64_vec());
        let fd = finite_difference_grad(
            |x| {
                probe.store.set_value(id, x.clone()).unwrap();
                let t = Tape::no_grad();
                probe.forward(&Ctx::eval(&t, &probe.store), &b).unwrap().loss.value().item()
            },
            &v,
            1e-5,
        );
        probe.store.set_value(id, v).unwrap();
        numeric.extend(fd.to_f64_vec());
    }
    let err = relative_error(&analytic, &numeric);
    assert!(err <= 1e-3, "relative error {err:.2e}");

    // the step itself: clip, then Adam on exactly those gradients, nothing else
    let mut expected = st.net.store.clone();
    for &id in &arch {
        expected.set_grad(id, grads.param(id).cloned());
    }
    let with_grad = expected.ids_with_grad(Some(ParamRole::Architecture));
    clip_grad_norm(&mut expected, &with_grad, scfg.grad_clip);
    let acfg = AdamConfig { lr: scfg.arch_lr, beta1: scfg.arch_beta1, beta2: scfg.arch_beta2, eps: 1e-8, weight_decay: scfg.arch_weight_decay };
    Adam::new(acfg).step(&mut expected, &with_grad).unwrap();
    st.arch_step(&b).unwrap();
    for id in expected.ids() {
        let d = expected.value(id).max_abs_diff(st.net.store.value(id));
        assert!(d <= 1e-12, "{}: {d:.2e}", expected.name(id));
    }
}

#[test]
fn softmax_groups_stay_normalised_through_search_steps() {
    let cfg = tiny(MacroMode::Mixed);
    let scfg = SearchConfig { batch_size: 4, stride: 4, arch_lr: 0.5, ..Default::default() };
    let ds = make_synthetic(SyntheticKind::Sine, 80, 2, 0.1, 1);
    let data = SearchData::new(&ds, 80, &cfg, 4).unwrap();
    let mut st = SearchState::<f32>::new(&cfg, &scfg).unwrap();
    for k in 0..4 {
        st.weight_step(&data.train.batch(&data.train.starts[k..k + 2])).unwrap();
        st.arch_step(&data.val.batch(&data.val.starts[k..k + 2])).unwrap();
        for &p in st.net.arch.logits.keys() {
            let w = st.net.arch.softmax(&st.net.store, p).unwrap();
            let s: f64 = w.iter().sum();
            assert!((s - 1.0).abs() <= 1e-6 && w.iter().all(|&x| x >= 0.0), "{p} after step {k}: {s}");
        }
    }
}

#[test]
fn committed_choices_are_never_revisited() {
    let mut cfg = tiny(MacroMode::Mixed);
    cfg.n_seq_cells = 1;
    cfg.n_flat_cells = 1;
    let mut net = Network::<f64>::supernet(&cfg, 9).unwrap();
    let batches = vec![batch(&cfg, 3, 1), batch(&cfg, 3, 2)];
    let store_before = net.store.clone();
    let history: RefCell<Vec<BTreeMap<Point, PointState>>> = RefCell::new(vec![net.arch.overrides.clone()]);
    let mut pruner = Pruner::new(&mut net, &batches);
    pruner.finetune = Some(Box::new(|n: &mut Network<f64>| {
        history.borrow_mut().push(n.arch.overrides.clone());
        Ok(())
    }));
    pruner.run(Provenance::default()).unwrap();

    let h = history.borrow();
    assert!(h.len() > 3);
    for w in h.windows(2) {
        let (prev, next) = (&w[0], &w[1]);
        // macro weights are fixed from the learned softmax, outside the commit hook
        let changed: Vec<_> = next.iter().filter(|(p, s)| **p != Point::Macro && prev.get(p) != Some(s)).collect();
        assert_eq!(changed.len(), 1, "one commit at a time");
        for (p, s) in prev {
            match (s, next.get(p)) {
                (a, Some(b)) if a == b => {}
                // dropping an edge in the edge stage keeps its op decision moot, not revised
                (PointState::Forced(_), Some(PointState::Masked)) if matches!(p, Point::Edge { .. }) => {}
                (a, b) => panic!("{p} changed from {a:?} to {b:?}"),
            }
        }
    }
    // no commit ever touches a stored tensor
    for id in store_before.ids() {
        assert!(store_before.value(id).bit_eq(net.store.value(id)), "{}", store_before.name(id));
    }
}

#[test]
fn validation_windows_follow_every_training_window() {
    let cfg = tiny(MacroMode::Mixed);
    let ds = make_synthetic(SyntheticKind::Sine, 123, 2, 0.0, 0);
    let data = SearchData::new(&ds, 123, &cfg, 1).unwrap();
    let last_train = data.train.starts.iter().map(|s| s + cfg.lookback + cfg.horizon).max().unwrap();
    let first_val = *data.val.starts.iter().min().unwrap();
    assert!(first_val >= last_train, "val starts at {first_val}, train reaches {last_train}");
}
