use tsnas_suite::gradient::run_gradient_suite;
use tsnas_tensor::inject_backward_sign_fault;

#[test]
fn quick_gradient_pass() {
    let r = run_gradient_suite(3, 11);
    println!("{}", r.to_json());
    assert!(r.passed, "{}", r.summary());
}

#[test]
fn sign_faults_are_caught() {
    for prim in ["lstm", "gru", "attention", "gelu", "layer_norm", "causal_conv1d", "softmax", "matmul", "mul", "div"] {
        let _g = inject_backward_sign_fault(prim);
        let r = run_gradient_suite(2, 11);
        let failed: Vec<_> = r.failures().iter().map(|c| c.name.clone()).collect();
        println!("{prim}: {failed:?}");
        assert!(!r.passed, "{prim}");
    }
}

#[test]
#[ignore]
fn full_margins() {
    let r = run_gradient_suite(20, 1);
    for c in r.checks.iter().filter(|c| c.measured > 1e-7 && c.tolerance < 1.0) {
        println!("{} {:.2e} {}", c.name, c.measured, c.detail);
    }
    println!("{}", r.summary());
}
