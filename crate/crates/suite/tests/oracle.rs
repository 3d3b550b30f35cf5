use tsnas_suite::oracle::{oracle_run, run_pruning_oracle_suite, MicroBenchSpec};

#[test]
fn micro_space_has_eight_architectures() {
    let run = oracle_run(&MicroBenchSpec::default(), 0).unwrap();
    assert_eq!(run.ranking.len(), 8);
    assert!(run.ranking.windows(2).all(|w| w[0].1 <= w[1].1));
}

#[test]
fn pick_lands_in_top_two() {
    let r = run_pruning_oracle_suite(&MicroBenchSpec::default(), &[0, 1, 2, 3, 4], 4);
    eprintln!("{}", r.to_json());
    assert!(r.passed, "{}", r.summary());
    let runs = r.extra["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 5);
    assert!(runs.iter().all(|x| x["ranking"].as_array().unwrap().len() == 8 && x["pick"].is_string()));
}

#[test]
#[ignore]
fn wider_seed_band() {
    let r = run_pruning_oracle_suite(&MicroBenchSpec::default(), &(5..25).collect::<Vec<_>>(), 16);
    let ranks: Vec<f64> = r.checks.iter().map(|c| c.measured).collect();
    eprintln!("ranks {ranks:?}");
    assert!(r.passed, "{}", r.summary());
}
