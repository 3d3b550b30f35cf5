use tsnas_suite::e2e::{e2e_run, run_dlinear_reduction, E2eConfig};

#[test]
fn short_budget_pipeline_beats_repeat_last() {
    let mut cfg = E2eConfig::default();
    cfg.search.epochs = 2;
    cfg.train.epochs = 8;
    let run = e2e_run(&cfg, 3).unwrap();
    assert!(run.improvement >= cfg.margin, "{run:#?}");
    assert!(run.epochs <= 8);
}

#[test]
fn dlinear_reduction_report() {
    let r = run_dlinear_reduction(0);
    assert!(r.passed, "{}", r.summary());
    assert!(r.extra["test_mse"].as_f64().unwrap() <= 1e-3);
}
