//! Analytic gradients against central finite differences, at f64.

use pcp_core::gradcheck::{check_model_suite, check_op_suite, relative_error, LOSSES, OPS};
use pcp_core::ModelConfig;

const TOLERANCE: f64 = 1e-3;

#[test]
fn every_tape_op_matches_finite_differences() {
    let results = check_op_suite(20, 0x5eed).unwrap();
    assert_eq!(results.len(), OPS.len());
    for (op, r) in results {
        assert!(r.checked >= 20, "{op}: only {} coordinates", r.checked);
        assert!(r.max_rel_error < TOLERANCE, "{op}: {r:?}");
    }
}

#[test]
fn full_losses_match_finite_differences_on_tiny_model() {
    let cfg = ModelConfig::tiny(50);
    assert_eq!((cfg.hidden_dim, cfg.num_layers, cfg.num_heads, cfg.max_sequence_length), (16, 2, 2, 16));
    let results = check_model_suite(&cfg, 20, 2, 7).unwrap();
    assert_eq!(results.len(), LOSSES.len());
    for (loss, r) in results {
        assert!(r.max_rel_error < TOLERANCE, "{loss}: {r:?}");
    }
}

#[test]
fn relative_error_is_symmetric() {
    for (a, b) in [(1.0, 2.0), (-3.0, 3.5), (1e-3, 1.1e-3)] {
        assert_eq!(relative_error(a, b), relative_error(b, a));
    }
}
