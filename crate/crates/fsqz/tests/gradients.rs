//! Analytic gradients against a central finite-difference oracle.

mod common;

/// Twenty seeded random cases; every parameter's gradient must agree with
/// the finite-difference estimate to a relative error below 1e-4.
#[test]
fn gradients_match_finite_differences() {
    for seed in 0..20u64 {
        let worst = common::fd_worst_relative_error(seed);
        assert!(
            worst < 1e-4,
            "seed {seed}: worst relative gradient error {worst:.3e}"
        );
    }
}
