//! One PASS/FAIL line per acceptance criterion, plus a JSON artifact with every measured value.

use std::path::PathBuf;
use std::time::Instant;

use tsnas_suite::e2e::{run_dlinear_reduction, run_e2e_smoke, E2eConfig};
use tsnas_suite::equivalence::run_equivalence_suite;
use tsnas_suite::gradient::run_gradient_suite;
use tsnas_suite::oracle::{run_pruning_oracle_suite, MicroBenchSpec};
use tsnas_suite::protocol::{run_determinism_suite, run_eval_mode_suite, run_profiling_suite};
use tsnas_suite::structural::run_structural_suite;
use tsnas_suite::SuiteReport;

struct Criterion {
    id: usize,
    title: &'static str,
    /// `None` when the criterion sets no runtime bound.
    budget_s: Option<f64>,
    run: fn() -> Vec<SuiteReport>,
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn criteria() -> Vec<Criterion> {
    vec![
        Criterion { id: 1, title: "gradient correctness", budget_s: Some(300.0), run: || vec![run_gradient_suite(20, 0)] },
        Criterion { id: 2, title: "discretization equivalence", budget_s: None, run: || vec![run_equivalence_suite(10, 0)] },
        Criterion { id: 3, title: "DLinear reduction", budget_s: Some(180.0), run: || vec![run_dlinear_reduction(0)] },
        Criterion {
            id: 4,
            title: "pruning vs brute-force oracle",
            budget_s: Some(600.0),
            run: || vec![run_pruning_oracle_suite(&MicroBenchSpec::default(), &SEEDS, 4)],
        },
        Criterion { id: 5, title: "structural invariants", budget_s: None, run: || vec![run_structural_suite(50, 0)] },
        Criterion {
            id: 6,
            title: "end-to-end smoke",
            budget_s: Some(900.0),
            run: || vec![run_e2e_smoke(&E2eConfig::default(), &SEEDS, 4)],
        },
        Criterion { id: 7, title: "determinism", budget_s: None, run: || vec![run_determinism_suite(0)] },
        Criterion { id: 8, title: "eval-mode protocol", budget_s: None, run: || vec![run_eval_mode_suite(0)] },
        Criterion { id: 9, title: "profiling sanity", budget_s: None, run: || vec![run_profiling_suite(0, 5)] },
    ]
}

fn artifact_path() -> PathBuf {
    std::env::var_os("TSNAS_ACCEPTANCE_JSON")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance.json"))
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("TSNAS_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut all_ok = true;
    let mut artifact = Vec::new();
    for c in criteria() {
        if only.as_ref().is_some_and(|o| !o.contains(&c.id)) {
            continue;
        }
        let t = Instant::now();
        let reports = (c.run)();
        let secs = t.elapsed().as_secs_f64();
        let within = c.budget_s.is_none_or(|b| secs < b);
        let ok = within && reports.iter().all(|r| r.passed);
        all_ok &= ok;
        let mut why: Vec<String> = reports.iter().map(|r| r.summary()).collect();
        if !within {
            why.push(format!("runtime {secs:.1}s exceeds {:.0}s", c.budget_s.unwrap_or_default()));
        }
        println!("{} criterion {}: {} ({secs:.1}s) — {}", if ok { "PASS" } else { "FAIL" }, c.id, c.title, why.join("; "));
        artifact.push(serde_json::json!({
            "criterion": c.id,
            "title": c.title,
            "passed": ok,
            "seconds": secs,
            "budget_seconds": c.budget_s,
            "reports": reports,
        }));
    }
    let path = artifact_path();
    match std::fs::write(&path, serde_json::to_string_pretty(&artifact).expect("serializes")) {
        Ok(()) => println!("report: {}", path.display()),
        Err(e) => println!("report not written to {}: {e}", path.display()),
    }
    if !all_ok {
        std::process::exit(1);
    }
}
