use std::time::Instant;

use peftlab::gradcheck::{gradcheck, tiny_config, TOLERANCE};
use peftlab::model::TaskKind;
use peftlab::tensor::OpKind;

#[test]
fn full_objective_matches_finite_differences() {
    let t = Instant::now();
    let report = gradcheck(&tiny_config(), None).unwrap();
    for p in &report.params {
        eprintln!("{:<28} {:>5} rel {:.2e} abs {:.2e}", p.name, p.elements, p.max_rel_error, p.max_abs_error);
    }
    eprintln!("{} elements, {} kinks, {:?}", report.elements(), report.kinks(), t.elapsed());
    assert!(report.kinks() * 100 < report.elements());
    assert!(report.passed(), "max relative error {:.3e}", report.max_rel_error);
    assert!(report.max_rel_error < TOLERANCE);
}

#[test]
fn span_objective_matches_finite_differences() {
    let mut cfg = tiny_config();
    cfg.data.kind = TaskKind::Span;
    let report = gradcheck(&cfg, None).unwrap();
    assert!(report.passed(), "max relative error {:.3e}", report.max_rel_error);
}

#[test]
fn injected_backward_fault_is_detected() {
    for kind in [OpKind::LayerNorm, OpKind::SoftmaxRows, OpKind::MatMulBt] {
        let report = gradcheck(&tiny_config(), Some((kind, 1.01))).unwrap();
        assert!(!report.passed(), "{kind:?} fault went unnoticed");
        assert!(report.failures().count() > 0);
        assert!(report.into_result().unwrap_err().is_numerical());
    }
}
