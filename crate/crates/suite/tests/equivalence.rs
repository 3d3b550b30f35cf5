use tsnas_suite::equivalence::{compare, run_equivalence_suite, tiny_space, MODES};
use tsnas_core::genotype::Genotype;
use tsnas_tensor::rng::seeded;

#[test]
fn ten_random_genotypes_match() {
    let r = run_equivalence_suite(10, 7);
    eprintln!("{}", r.to_json());
    assert!(r.passed, "{}", r.summary());
}

#[test]
fn every_mode_matches_across_seeds() {
    for (i, mode) in MODES.iter().enumerate() {
        let mut rng = seeded(100 + i as u64);
        for s in 0..3 {
            let g = Genotype::random(&tiny_space(*mode), &mut rng).unwrap();
            let c = compare(&g, s).unwrap();
            assert!(c.max_diff <= 1e-5 && c.uncopied == 0, "{mode:?} {c:?}\n{}", g.describe());
        }
    }
}

#[test]
fn mismatched_genotype_is_detected() {
    use tsnas_suite::equivalence::{encode_genotype, random_batch};
    use tsnas_core::nn::Ctx;
    use tsnas_core::Network;
    use tsnas_tensor::Tape;
    let cfg = tiny_space(tsnas_core::MacroMode::Mixed);
    let mut rng = seeded(3);
    let g = Genotype::random(&cfg, &mut rng).unwrap();
    let mut other = Genotype::random(&cfg, &mut rng).unwrap();
    while other.hash() == g.hash() {
        other = Genotype::random(&cfg, &mut rng).unwrap();
    }
    let mut sup = Network::<f64>::supernet(&cfg, 1).unwrap();
    encode_genotype(&mut sup, &g).unwrap();
    let mut disc = Network::<f64>::from_genotype(&other, 2).unwrap();
    disc.store.copy_matching_from(&sup.store);
    let batch = random_batch(&cfg, 3, &mut rng);
    let tape = Tape::no_grad();
    let a = sup.forward(&Ctx::eval(&tape, &sup.store), &batch).unwrap().point.value().clone();
    let b = disc.forward(&Ctx::eval(&tape, &disc.store), &batch).unwrap().point.value().clone();
    assert!(a.max_abs_diff(&b) > 1e-3, "{}", a.max_abs_diff(&b));
}
