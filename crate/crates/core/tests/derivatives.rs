mod common;

use common::*;

#[test]
fn objective_and_jacobians_match_finite_differences() {
    for (k, re) in [intercept(1.2), slopes()].into_iter().enumerate() {
        let e = derivative_errors(re, 40 + k as u64);
        println!("{re:?}: {e:?}");
        assert!(e.gradient <= 1e-5, "gradient {e:?}");
        assert!(e.hessian <= 1e-5, "hessian {e:?}");
        assert!(e.d_joint <= 1e-5, "D_joint {e:?}");
        assert!(e.d_outer <= 1e-3, "D_outer {e:?}");
    }
}
