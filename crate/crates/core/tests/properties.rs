use std::collections::BTreeMap;

use proptest::prelude::*;
use riskverify::contour::{build_contour, SafetyConstraint};
use riskverify::polyalg::{Monomial, Polynomial, VarId};
use riskverify::scenario::{FixtureKind, FIXTURES};
use riskverify::uncertainty::{Distribution, UncertaintyModel};

const VARS: [VarId; 4] = [VarId::Time, VarId::State(0), VarId::State(1), VarId::Uncertain(0)];

fn poly() -> impl Strategy<Value = Polynomial> {
    let term = (prop::collection::vec(0u32..3, VARS.len()), -3.0f64..3.0);
    prop::collection::vec(term, 0..6).prop_map(|terms| {
        Polynomial::from_terms(terms.into_iter().map(|(exps, c)| {
            (Monomial::from_powers(VARS.iter().copied().zip(exps)), c)
        }))
    })
}

fn point() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.5f64..1.5, VARS.len())
}

fn eval(p: &Polynomial, x: &[f64]) -> f64 {
    p.evaluate_with(|v| VARS.iter().position(|w| *w == v).map(|i| x[i])).unwrap()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

fn same(a: &Polynomial, b: &Polynomial) -> bool {
    (a - b).max_abs_coeff() <= 1e-10 * (1.0 + a.max_abs_coeff().max(b.max_abs_coeff()))
}

fn uniform_model() -> UncertaintyModel {
    UncertaintyModel::new(
        [(VarId::Uncertain(0), Distribution::Uniform { lower: -0.5, upper: 1.5 })].into(),
    )
    .unwrap()
}

proptest! {
    #[test]
    fn ring_axioms(a in poly(), b in poly(), c in poly()) {
        prop_assert!(same(&(&a + &b), &(&b + &a)));
        prop_assert!(same(&(&a * &b), &(&b * &a)));
        prop_assert!(same(&(&(&a + &b) + &c), &(&a + &(&b + &c))));
        prop_assert!(same(&(&(&a * &b) * &c), &(&a * &(&b * &c))));
        prop_assert!(same(&(&a * &(&b + &c)), &(&(&a * &b) + &(&a * &c))));
        prop_assert!((&a - &a).is_zero());
        prop_assert!(same(&(&a * &Polynomial::constant(1.0)), &a));
    }

    #[test]
    fn evaluation_is_a_homomorphism(a in poly(), b in poly(), x in point()) {
        prop_assert!(close(eval(&(&a * &b), &x), eval(&a, &x) * eval(&b, &x)));
        prop_assert!(close(eval(&(&a + &b), &x), eval(&a, &x) + eval(&b, &x)));
        prop_assert!(close(eval(&a.pow(3), &x), eval(&a, &x).powi(3)));
    }

    #[test]
    fn substitution_matches_evaluation(a in poly(), s in poly(), x in point()) {
        // replace x1 by s, then evaluate, versus evaluate s first
        let bound: BTreeMap<VarId, Polynomial> = [(VarId::State(0), s.clone())].into();
        let mut y = x.clone();
        y[1] = eval(&s, &x);
        prop_assert!(close(eval(&a.substitute(&bound), &x), eval(&a, &y)));
    }

    #[test]
    fn print_parse_round_trip(a in poly()) {
        let back: Polynomial = a.to_string().parse().unwrap();
        prop_assert_eq!(back, a);
    }

    #[test]
    fn expectation_is_linear(a in poly(), b in poly(), k in -2.0f64..2.0) {
        let m = uniform_model();
        let lhs = m.apply_expectation(&(&a.scale(k) + &b)).unwrap();
        let rhs = &m.apply_expectation(&a).unwrap().scale(k) + &m.apply_expectation(&b).unwrap();
        prop_assert!(same(&lhs, &rhs));
        prop_assert!(m.apply_expectation(&lhs).unwrap() == lhs);
    }

    #[test]
    fn jensen_gap_is_nonnegative(g in poly(), x in point()) {
        let g = &g + &Polynomial::var(VarId::State(0));
        let c = SafetyConstraint::new("g", g, uniform_model()).unwrap();
        let rc = build_contour(&c).unwrap();
        let (p1, p2) = rc.moments_at(&x[1..3], x[0]).unwrap();
        prop_assert!(p1 - p2 * p2 >= -1e-9 * (1.0 + p1.abs()), "{} {}", p1, p2);
    }

    #[test]
    fn risk_membership_is_monotone_in_delta(x in -1.0f64..1.0, y in -1.0f64..1.0, d1 in 0.0f64..1.0, d2 in 0.0f64..1.0) {
        let f = FIXTURES.iter().find(|f| f.kind == FixtureKind::Contour).unwrap().load();
        let rc = &f.scenario.contours().unwrap()[0];
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        if rc.member(&[x, y], 0.0, lo).unwrap() {
            prop_assert!(rc.member(&[x, y], 0.0, hi).unwrap());
        }
    }
}

#[test]
fn moments_match_sampling() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(4);
    let dists = [
        Distribution::Uniform { lower: 0.3, upper: 0.4 },
        Distribution::Gaussian { mean: 0.5, variance: 0.04 },
        Distribution::Beta { alpha: 2.0, beta: 5.0 },
    ];
    let n = 400_000;
    for d in &dists {
        for k in 1..=4 {
            let xs: Vec<f64> = (0..n)
                .map(|_| riskverify::montecarlo::sample(d, &mut rng).unwrap().powi(k as i32))
                .collect();
            let m = xs.iter().sum::<f64>() / n as f64;
            let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
            let exact = d.raw_moment(k).unwrap();
            assert!((m - exact).abs() <= 4.0 * sd / (n as f64).sqrt() + 1e-12, "{d:?} k={k}: {m} vs {exact}");
        }
    }
}
