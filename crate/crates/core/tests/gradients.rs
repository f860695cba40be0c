use mma_core::tape::Fault;
use mma_core::verification::{
    mma_block_grad_check, primitive_grad_checks, run_property_suite, GradCheck,
};

#[test]
fn every_primitive_passes() {
    let reports = primitive_grad_checks(1, &GradCheck::default()).unwrap();
    for r in &reports {
        println!("{r}");
    }
    assert!(reports.len() >= 30);
    assert!(reports.iter().all(|r| r.passed()));
}

#[test]
fn full_block_passes() {
    for seed in [1, 2, 3] {
        let r = mma_block_grad_check(seed, &GradCheck::default()).unwrap();
        println!("{r}");
        assert!(r.passed(), "{r}");
    }
}

#[test]
fn broken_abs_rule_is_detected() {
    let check = GradCheck {
        fault: Some(Fault::AbsGradient),
        ..GradCheck::default()
    };
    let prims = primitive_grad_checks(1, &check).unwrap();
    let abs = prims.iter().find(|r| r.name == "abs").unwrap();
    assert!(!abs.passed());
    assert!(abs.failing_index().is_some());
    assert!(prims
        .iter()
        .filter(|r| r.name == "matmul" || r.name == "softmax_rows")
        .all(|r| r.passed()));
    assert!(!mma_block_grad_check(1, &check).unwrap().passed());
}

#[test]
fn property_suite_passes_and_detects_fault() {
    let start = std::time::Instant::now();
    let clean = run_property_suite(42, None).unwrap();
    println!("{clean}");
    assert!(clean.passed());
    assert!(start.elapsed().as_secs() < 60);

    let broken = run_property_suite(42, Some(Fault::AbsGradient)).unwrap();
    let failed: Vec<_> = broken.failures().map(|r| r.name).collect();
    assert!(failed.contains(&"gradient_primitives"), "{failed:?}");
    assert!(failed.contains(&"gradient_mma_block"), "{failed:?}");
}
