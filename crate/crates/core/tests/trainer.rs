use rand::SeedableRng;
use tsnas_core::data::{make_synthetic, SyntheticKind, TimeSeriesDataset, FINAL_RATIOS};
use tsnas_core::genotype::Genotype;
use tsnas_core::train::{evaluate, profile, train_genotype, FinalData, TrainConfig};
use tsnas_core::{MacroMode, Network, NetworkConfig};
use tsnas_tensor::rng::NamedRng;

fn mixed_genotype(seed: u64) -> (NetworkConfig, Genotype) {
    let mut cfg = NetworkConfig::tiny(16, 4, 2);
    cfg.mode = MacroMode::Mixed;
    cfg.n_seq_cells = 1;
    cfg.n_flat_cells = 1;
    cfg.dropout = 0.3;
    let g = Genotype::random(&cfg, &mut NamedRng::seed_from_u64(seed)).unwrap();
    (cfg, g)
}

fn short() -> TrainConfig {
    TrainConfig { epochs: 4, patience: 2, batch_size: 8, stride: 2, max_steps_per_epoch: Some(4), ..Default::default() }
}

#[test]
fn zero_epochs_reports_the_untrained_model() {
    let (_, g) = mixed_genotype(0);
    let data = FinalData::new(&make_synthetic(SyntheticKind::Sine, 300, 2, 0.1, 0), FINAL_RATIOS, 16, 4).unwrap();
    let (r, _) = train_genotype::<f64>(&g, &data, &TrainConfig { epochs: 0, ..short() }, 0, "sine").unwrap();
    assert!(r.epochs.is_empty() && r.best_epoch.is_none());
    assert!(r.test_mse.is_finite() && r.test_mae.is_finite());
}

#[test]
fn restored_model_is_the_best_validation_epoch() {
    for seed in 0..3 {
        let (_, g) = mixed_genotype(seed);
        let data = FinalData::new(&make_synthetic(SyntheticKind::SineMixture, 400, 2, 0.2, seed), FINAL_RATIOS, 16, 4).unwrap();
        let tc = short();
        let (r, net) = train_genotype::<f64>(&g, &data, &tc, seed, "sine_mixture").unwrap();
        assert!(r.epochs.iter().all(|e| e.val_mse >= r.best_val_mse), "{:?}", r.epochs);
        if let Some(b) = r.best_epoch {
            assert_eq!(r.epochs[b - 1].val_mse, r.best_val_mse);
        }
        let val = data.windows(data.val.clone(), 16, 4, tc.eval_stride).unwrap();
        let again = evaluate(&net, &val, tc.batch_size).unwrap().mse;
        assert_eq!(again.to_bits(), r.best_val_mse.to_bits(), "seed {seed}");
    }
}

#[test]
fn evaluation_is_bit_reproducible() {
    let (_, g) = mixed_genotype(4);
    let data = FinalData::new(&make_synthetic(SyntheticKind::SineMixture, 300, 2, 0.1, 4), FINAL_RATIOS, 16, 4).unwrap();
    let (_, net) = train_genotype::<f32>(&g, &data, &short(), 4, "sine_mixture").unwrap();
    let test = data.windows(data.test.clone(), 16, 4, 1).unwrap();
    let a = evaluate(&net, &test, 8).unwrap();
    let b = evaluate(&net, &test, 8).unwrap();
    assert_eq!((a.mse.to_bits(), a.mae.to_bits()), (b.mse.to_bits(), b.mae.to_bits()));
    assert!(a.mae * a.mae <= a.mse + 1e-12);
}

#[test]
fn same_seed_same_report() {
    let (_, g) = mixed_genotype(5);
    let data = FinalData::new(&make_synthetic(SyntheticKind::SineMixture, 300, 2, 0.1, 5), FINAL_RATIOS, 16, 4).unwrap();
    let (a, _) = train_genotype::<f32>(&g, &data, &short(), 9, "x").unwrap();
    let (b, _) = train_genotype::<f32>(&g, &data, &short(), 9, "x").unwrap();
    assert!((a.test_mse - b.test_mse).abs() <= 1e-7 && (a.test_mae - b.test_mae).abs() <= 1e-7);
    assert_eq!(a.epochs, b.epochs);
}

#[test]
fn constant_series_is_learned_exactly() {
    let t = 400;
    let ds = TimeSeriesDataset::new(vec![3.25; t * 2], vec!["a".into(), "b".into()]).unwrap();
    let mut cfg = NetworkConfig::tiny(16, 4, 2);
    cfg.mode = MacroMode::FlatOnly;
    let g = Genotype::dlinear(&cfg).unwrap();
    let data = FinalData::new(&ds, FINAL_RATIOS, 16, 4).unwrap();
    let (r, _) = train_genotype::<f64>(&g, &data, &short(), 0, "constant").unwrap();
    assert!(r.test_mse <= 1e-6, "{}", r.test_mse);
}

#[test]
fn parameter_count_is_the_sum_of_registered_tensors() {
    let (cfg, g) = mixed_genotype(6);
    for net in [Network::<f32>::from_genotype(&g, 0).unwrap(), Network::<f32>::supernet(&cfg, 0).unwrap()] {
        let manual: usize = net.store.ids().map(|id| net.store.value(id).data().len()).sum();
        let rep = profile(&net, 4, 3).unwrap();
        assert_eq!(rep.params, manual);
    }
}

#[test]
fn skip_flat_cells_are_cheaper_than_linear_ones() {
    let mut cfg = NetworkConfig::tiny(16, 4, 2);
    cfg.mode = MacroMode::FlatOnly;
    let skip = Genotype::dlinear(&cfg).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&skip.to_json()).unwrap();
    for cell in v["flat"].as_array_mut().unwrap() {
        for node in cell["nodes"].as_array_mut().unwrap() {
            for input in node["inputs"].as_array_mut().unwrap() {
                input["op"] = "Linear".into();
            }
        }
    }
    let linear = Genotype::from_json(&v.to_string()).unwrap();
    let count = |g: &Genotype| Network::<f32>::from_genotype(g, 0).unwrap().param_count();
    assert!(count(&skip) < count(&linear), "{} vs {}", count(&skip), count(&linear));
}
