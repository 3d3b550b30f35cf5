use tsnas_suite::protocol::{run_determinism_suite, run_eval_mode_suite, run_profiling_suite};

#[test]
fn same_seed_same_pipeline() {
    let r = run_determinism_suite(5);
    assert!(r.passed, "{}", r.summary());
}

#[test]
fn arch_steps_run_in_inference_mode() {
    let r = run_eval_mode_suite(2);
    assert!(r.passed, "{}", r.summary());
}

#[test]
fn profiling_is_sane() {
    let r = run_profiling_suite(1, 5);
    eprintln!("{}", r.to_json());
    assert!(r.passed, "{}", r.summary());
}
