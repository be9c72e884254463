//! Finite-difference checks of every layer's backward pass.

mod support;

use support::gradcheck::{cases, worst_error, INSTANCES};

/// Coordinates skipped as kinks must stay rare.
const MAX_KINK_FRACTION: f64 = 0.05;

#[test]
fn every_layer_matches_finite_differences() {
    let mut failures = Vec::new();
    for (name, shape, build) in cases() {
        match worst_error(shape, &build) {
            Ok(s) => {
                println!(
                    "{name}: worst relative error {:.2e} over {INSTANCES} instances, {} of {} probes at kinks",
                    s.worst, s.kinks, s.probed
                );
                if s.kinks as f64 > MAX_KINK_FRACTION * s.probed as f64 {
                    failures.push(format!(
                        "{name}: {} of {} probes at kinks",
                        s.kinks, s.probed
                    ));
                }
            }
            Err((seed, e)) => failures.push(format!("{name} (instance {seed}): {e:e}")),
        }
    }
    assert!(failures.is_empty(), "gradient mismatches: {failures:?}");
}
