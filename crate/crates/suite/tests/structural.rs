use tsnas_core::cells::{CellTopology, Family};
use tsnas_core::genotype::{CellGenotype, EdgeChoice, NodeGenotype};
use tsnas_core::ops::FlatOpKind;
use tsnas_core::prune::AuditRecord;
use tsnas_suite::structural::{decoder_scored_last, in_edge_violations, run_structural_suite};

#[test]
fn random_runs_hold_every_shape_invariant() {
    // the acceptance gate runs fifty
    let r = run_structural_suite(10, 11);
    assert!(r.passed, "{}", r.summary());
}

#[test]
fn three_in_edges_are_flagged() {
    let topo = CellTopology::new(Family::Flat, 2).unwrap();
    let e = |s| EdgeChoice { source: s, op: FlatOpKind::Skip };
    let cell = CellGenotype {
        nodes: vec![
            NodeGenotype { node: 1, inputs: vec![e(0)] },
            NodeGenotype { node: 2, inputs: vec![e(0), e(1)] },
            NodeGenotype { node: 3, inputs: vec![e(0), e(1), e(2)] },
        ],
    };
    let v = in_edge_violations("flat.c0", &cell, &topo);
    assert_eq!(v.len(), 1, "{v:?}");
    assert!(v[0].contains("node 3"));
}

#[test]
fn decoder_before_dec_ops_is_flagged() {
    let rec = |stage: &str, cp: &str| AuditRecord {
        stage: stage.into(),
        choice_point: cp.into(),
        candidate: "x".into(),
        score: 0.0,
        committed: true,
    };
    assert!(decoder_scored_last(&[rec("op", "enc.c0.e0"), rec("op", "dec.c0.e1"), rec("decoder", "decoder")]));
    assert!(!decoder_scored_last(&[rec("op", "enc.c0.e0"), rec("decoder", "decoder"), rec("op", "dec.c0.e1")]));
}
