use proptest::prelude::*;

use stripe_impurity::bloch::lambda2_from_jet;
use stripe_impurity::cli::format_float;
use stripe_impurity::farfield::PartitionGeometry;
use stripe_impurity::fredholmlab::{
    borderline_range_test, discrete_weighted_operator, forbidden_weights, kernel_cokernel_dims, predicted_dims,
    OperatorKind, WeightSpec,
};
use stripe_impurity::response::{phase_sweep, ImpuritySpec};
use stripe_impurity::stripes::{partial_k, solve_stripe};

/// Weights inside the regime where the counts are resolved at `N = 64`:
/// anything 1/4 away from the forbidden set for `ell = 1`, interval
/// midpoints otherwise.
fn resolved_weight(ell: usize) -> BoxedStrategy<f64> {
    if ell == 1 {
        (-1.0f64..2.0).prop_filter("borderline", |g| (g - 0.5).abs() > 0.25).boxed()
    } else {
        (-1i32..=ell as i32 + 1).prop_map(f64::from).boxed()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn stripes_are_even_and_periodic(mu in 0.05f64..0.3, k in 0.95f64..1.05, x in -10.0f64..10.0) {
        let s = solve_stripe(mu, k, 32, 1e-10).unwrap();
        let t = s.period();
        prop_assert!(s.residual_norm < 1e-9);
        prop_assert!((s.eval_x(x, 0.0)[0] - s.eval_x(-x, 0.0)[0]).abs() < 1e-13);
        prop_assert!((s.eval_x(x + t, 0.0)[0] - s.eval_x(x, 0.0)[0]).abs() < 1e-12);
        let d = partial_k(&s).unwrap();
        prop_assert!((d.eval_dk_xi(k * x, 0) - d.eval_dk_xi(-k * x, 0)).abs() < 1e-11);
    }

    #[test]
    fn partition_of_unity(width in 0.05f64..0.5, x in -2.0f64..2.0) {
        let g = PartitionGeometry::new(width).unwrap();
        prop_assert!((g.chi_plus(x) + g.chi_minus(x) - 1.0).abs() < 1e-15);
        prop_assert!((g.theta(x) + g.theta(-x)).abs() < 1e-15);
        prop_assert!((-1.0..=1.0).contains(&g.theta(x)));
    }

    #[test]
    fn weights_positive_and_duality_is_an_involution(gm in -12.0f64..12.0, gp in -12.0f64..12.0, x in -4096.0f64..4096.0) {
        let w = WeightSpec::new(gm, gp);
        let v = w.weight(x);
        prop_assert!(v > 0.0 && v.is_finite());
        prop_assert_eq!(w.dual().dual(), w);
        prop_assert!((w.weight(x) * w.dual().weight(x) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn float_export_round_trips(v in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
        prop_assert_eq!(format_float(v).parse::<f64>().unwrap(), v);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn dims_follow_the_weight_intervals((ell, i, gm, gp) in (1usize..=2).prop_flat_map(|ell| {
        (Just(ell), 0..=ell, resolved_weight(ell), resolved_weight(ell))
    })) {
        let w = WeightSpec::new(gm, gp);
        let op = discrete_weighted_operator(OperatorKind::Difference { ell, i }, 64, w, false).unwrap();
        let d = kernel_cokernel_dims(&op, 1e4).unwrap();
        prop_assert_eq!((d.dim_ker, d.dim_coker), predicted_dims(ell, &w));
        // index = ell minus the forbidden values crossed on each side
        let crossed = |g: f64| forbidden_weights(ell, 2.0).iter().filter(|&&b| g > b).count() as i64;
        prop_assert_eq!(d.index(), ell as i64 - crossed(gm) - crossed(gp));
        let a = kernel_cokernel_dims(&op.adjoint(), 1e4).unwrap();
        prop_assert_eq!((a.dim_ker, a.dim_coker), (d.dim_coker, d.dim_ker));
    }

    #[test]
    fn gradient_impurities_have_zero_mean(width in 0.5f64..3.0, alpha in -2.0f64..2.0, beta in -2.0f64..2.0, center in -2.0f64..2.0) {
        let s = solve_stripe(0.1, 1.0, 32, 1e-10).unwrap();
        let d = partial_k(&s).unwrap();
        let l2 = lambda2_from_jet(&s, &d).lambda2;
        let g = ImpuritySpec::Gradient { width, alpha, beta, center };
        let c = phase_sweep(&s, &d, l2, &g, 64).unwrap();
        let scale = c.mk.iter().fold(1e-3f64, |m, v| m.max(v.abs()));
        prop_assert!(c.mk_integral().abs() < 1e-8 * scale, "{} vs {}", c.mk_integral(), scale);
    }
}

#[test]
fn single_bump_ratio_is_finite() {
    let t = borderline_range_test(OperatorKind::Difference { ell: 1, i: 0 }, 0.5, &[1]).unwrap();
    assert!(t.rows[0].ratio.is_finite() && t.rows[0].ratio > 0.0);
}

#[test]
fn off_borderline_ratio_stays_bounded() {
    let t = borderline_range_test(OperatorKind::Difference { ell: 1, i: 0 }, 0.4, &[8, 16, 32, 64]).unwrap();
    let lo = t.rows.iter().map(|r| r.ratio).fold(f64::INFINITY, f64::min);
    assert!(lo > 0.1, "{:?}", t.rows);
}
