use graphsh::suites::{run_module, MODULES, TOLERANCE};

fn check(module: &str) {
    for seed in 0..10 {
        for r in run_module(module, seed).unwrap() {
            assert!(
                r.report.max_rel_error < TOLERANCE,
                "{module}::{} seed {seed}: {:?}",
                r.name,
                r.report
            );
            assert!(r.report.checked > 0);
        }
    }
}

#[test]
fn tensor_ops_match_finite_differences() {
    check("tensor");
}

#[test]
fn layers_match_finite_differences() {
    check("layers");
}

#[test]
fn hourglass_matches_finite_differences() {
    check("hourglass");
}

#[test]
fn networks_match_finite_differences() {
    check("network");
}

#[test]
fn module_list_is_complete() {
    assert_eq!(MODULES, ["tensor", "layers", "hourglass", "network"]);
}
