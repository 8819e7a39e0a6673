mod common;

use cyclereg::autodiff::TOL_DOUBLE;

#[test]
fn every_objective_passes_gradient_check() {
    let reports = common::objective_gradient_checks().unwrap();
    assert_eq!(reports.len(), 8);
    for (name, r) in &reports {
        assert!(r.probes.len() >= 100, "{name}");
        assert!(r.loss.is_finite(), "{name}");
        // A check where every probe sits at a zero derivative proves nothing.
        let nonzero = r.probes.iter().filter(|p| p.analytic.abs() > 1e-9).count();
        assert!(nonzero >= 50, "{name}: only {nonzero} informative probes");
        assert!(r.passes(TOL_DOUBLE), "{name}: max rel error {:e}", r.max_rel_error);
    }
}
