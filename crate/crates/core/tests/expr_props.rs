//! Property tests for the expression language: symbolic derivatives against
//! central finite differences, idempotent simplification, and the
//! print/reparse round trip.

use proptest::prelude::*;

use symsde_core::expr::{parse, simplify, Expr, UnaryOp, VarSet};

fn vars() -> VarSet {
    VarSet::spatial_and_time(&["x", "y"], "t").unwrap()
}

fn leaf() -> BoxedStrategy<Expr> {
    prop_oneof![
        (-3.0f64..3.0).prop_map(Expr::constant),
        Just(Expr::var("x")),
        Just(Expr::var("y")),
    ]
    .boxed()
}

fn arb_expr() -> BoxedStrategy<Expr> {
    leaf().prop_recursive(3, 24, 6, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::add(a, b)),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::sub(a, b)),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::mul(a, b)),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::div(a, b)),
            inner.clone().prop_map(Expr::neg),
            inner.clone().prop_map(|a| Expr::func(UnaryOp::Sin, a)),
            inner.clone().prop_map(|a| Expr::func(UnaryOp::Cos, a)),
            inner.clone().prop_map(|a| Expr::func(UnaryOp::Tanh, a)),
            inner.clone().prop_map(|a| Expr::func(UnaryOp::Exp, a)),
            inner.clone().prop_map(|a| Expr::func(UnaryOp::Ln, a)),
            inner.clone().prop_map(|a| Expr::func(UnaryOp::Sqrt, a)),
            (inner, prop_oneof![Just(2.0), Just(3.0), Just(0.5)])
                .prop_map(|(a, e)| Expr::pow(a, e)),
        ]
    })
    .boxed()
}

fn eval_at(e: &Expr, x: f64, y: f64) -> Option<f64> {
    e.eval_with(&|name| match name {
        "x" => Some(x),
        "y" => Some(y),
        _ => None,
    })
    .ok()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    /// |eval(diff(e,x), p) − central difference (step 1e-5)| ≤ 1e-6·(1+|value|)
    /// wherever the expression and its shifted evaluations are defined and
    /// tame enough for the difference quotient to be meaningful.
    #[test]
    fn derivative_matches_finite_difference(e in arb_expr(), x in 0.2f64..1.8, y in 0.2f64..1.8) {
        let h = 1e-5;
        let d = e.diff("x");
        let (fp, fm) = match (eval_at(&e, x + h, y), eval_at(&e, x - h, y)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Ok(()),
        };
        let exact = match eval_at(&d, x, y) {
            Some(v) => v,
            None => return Ok(()),
        };
        // Skip scales where f64 cancellation swamps the quotient.
        prop_assume!(fp.abs() < 1e6 && fm.abs() < 1e6 && exact.abs() < 1e6);
        let fd = (fp - fm) / (2.0 * h);
        prop_assert!(
            (exact - fd).abs() <= 1e-6 * (1.0 + exact.abs()) + 1e-4 * h * (fp.abs() + fm.abs()),
            "diff {exact} vs fd {fd} for {e}"
        );
    }

    #[test]
    fn simplify_is_idempotent(e in arb_expr()) {
        let once = simplify(&e);
        let twice = simplify(&once);
        prop_assert_eq!(&once, &twice);
    }

    #[test]
    fn simplify_preserves_semantics(e in arb_expr(), x in 0.2f64..1.8, y in 0.2f64..1.8) {
        if let Some(orig) = eval_at(&e, x, y) {
            if let Some(simp) = eval_at(&simplify(&e), x, y) {
                prop_assert!(
                    (orig - simp).abs() <= 1e-12 * (1.0 + orig.abs()),
                    "{e} simplifies inconsistently: {orig} vs {simp}"
                );
            }
        }
    }

    /// Printing then reparsing is eval-equivalent at 1e-12.
    #[test]
    fn print_parse_round_trip(e in arb_expr(), x in 0.2f64..1.8, y in 0.2f64..1.8) {
        let printed = e.to_string();
        let reparsed = parse(&printed, &vars()).unwrap_or_else(|err| {
            panic!("printed form `{printed}` failed to reparse: {err}")
        });
        if let Some(orig) = eval_at(&e, x, y) {
            prop_assume!(orig.abs() < 1e9);
            let back = eval_at(&reparsed, x, y)
                .unwrap_or_else(|| panic!("reparse of `{printed}` lost the domain"));
            prop_assert!(
                (orig - back).abs() <= 1e-12 * (1.0 + orig.abs()),
                "round trip of `{printed}`: {orig} vs {back}"
            );
        }
    }
}
