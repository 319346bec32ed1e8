//! Property tests for the small, self-contained invariants.

use proptest::prelude::*;

use ecoreg::inference::{Clause, SubgroupQuery};
use ecoreg::solver::softmax;

fn finite_eta() -> impl Strategy<Value = [f64; 3]> {
    [-30.0..30.0f64, -30.0..30.0f64, -30.0..30.0f64]
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(eta in finite_eta()) {
        let p = softmax(eta);
        let sum: f64 = p.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| *v > 0.0 && *v <= 1.0));
    }

    #[test]
    fn softmax_is_shift_invariant(eta in finite_eta(), c in -20.0..20.0f64) {
        let p = softmax(eta);
        let q = softmax([eta[0] + c, eta[1] + c, eta[2] + c]);
        for k in 0..3 {
            prop_assert!((p[k] - q[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn query_clause_syntax_round_trips(
        var in "[a-z][a-z0-9_]{0,7}",
        levels in proptest::collection::vec("[a-z0-9]{1,6}", 1..4),
        lo in -100.0..100.0f64,
        span in 0.0..50.0f64,
    ) {
        let text = format!("{var}={}; {var}=[{lo},{hi}]", levels.join("|"), hi = lo + span);
        let q = SubgroupQuery::parse("g", &text).unwrap();
        prop_assert_eq!(q.clauses.len(), 2);
        match &q.clauses[0] {
            Clause::Levels { var: v, levels: l } => {
                prop_assert_eq!(v, &var);
                prop_assert_eq!(l, &levels);
            }
            other => prop_assert!(false, "expected levels clause, got {:?}", other),
        }
        match &q.clauses[1] {
            Clause::Range { var: v, lo: l, hi: h } => {
                prop_assert_eq!(v, &var);
                // Bounds survive the decimal round trip within print precision.
                prop_assert!((l - lo).abs() < 1e-9);
                prop_assert!((h - (lo + span)).abs() < 1e-9);
            }
            other => prop_assert!(false, "expected range clause, got {:?}", other),
        }
    }

    #[test]
    fn malformed_queries_error_not_panic(text in ".{0,40}") {
        let _ = SubgroupQuery::parse("g", &text);
    }
}
