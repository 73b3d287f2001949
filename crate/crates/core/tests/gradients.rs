mod common;

use common::{model_gradient_check, op_gradient_checks, ACTIVATION_MAX_REL_ERROR, MAX_REL_ERROR};
use gfcn::tensor::NormKind;

#[test]
fn every_op_matches_central_differences() {
    let checks = op_gradient_checks();
    let failures: Vec<String> = checks
        .iter()
        .filter(|(_, c)| !c.passed())
        .map(|(name, c)| format!("{name}: max rel {:.3e} at {}", c.max_rel, c.worst))
        .collect();
    assert!(failures.is_empty(), "tolerance {MAX_REL_ERROR:e}:\n{}", failures.join("\n"));
    assert!(checks.len() >= 20);
    for (name, c) in checks.iter().filter(|(n, _)| ["relu", "tanh", "sigmoid"].contains(&n.as_str())) {
        assert!(c.max_rel < ACTIVATION_MAX_REL_ERROR, "{name}: {:.3e}", c.max_rel);
    }
}

#[test]
fn composed_model_matches_central_differences() {
    for kind in [NormKind::Instance, NormKind::Batch] {
        let check = model_gradient_check(kind);
        assert!(check.passed(), "{}: max rel {:.3e} at {}", kind.label(), check.max_rel, check.worst);
    }
}
