//! Verify analytic gradients against central finite differences: every
//! primitive exhaustively, then each of the four architectures end to end at
//! sampled parameter coordinates. Run with `cargo run --example gradient_check`.

use uadkit::verify::{model_suite, primitive_suite};

fn main() {
    let primitives = primitive_suite(0);
    let models = model_suite(0, 4);
    let mut failed = 0;
    for (label, report) in [("primitive", &primitives), ("model", &models)] {
        for e in &report.entries {
            let ok = e.passed(report.tol);
            failed += usize::from(!ok);
            println!(
                "{} {label:>9} {:<18} max rel error {:.3e} ({} coords, tol {:.0e})",
                if ok { "PASS" } else { "FAIL" },
                e.name,
                e.max_rel_error,
                e.coords_checked,
                report.tol
            );
        }
    }
    assert_eq!(failed, 0, "{failed} gradient checks failed");
    println!("all gradient checks passed");
}
