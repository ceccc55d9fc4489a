use minmax_cert::attack_set::dual_norm;
use minmax_cert::certify::{certify, prune_redundant, CertStatus, CertifyOptions};
use minmax_cert::conic::SolveOptions;
use minmax_cert::{AttackSet, ConstraintFn, ExtReal, MinMaxModel, Norm};
use proptest::prelude::*;

fn norm_strategy() -> impl Strategy<Value = Norm> {
    prop_oneof![Just(Norm::L1), Just(Norm::L2), Just(Norm::LInf)]
}

fn vec_of(d: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, d)
}

fn constraint(d: usize) -> impl Strategy<Value = ConstraintFn> {
    prop_oneof![
        (norm_strategy(), vec_of(d, -3.0, 3.0), 0.1f64..3.0)
            .prop_map(|(n, c, r)| ConstraintFn::norm_ball(n, c, r).unwrap()),
        (vec_of(d, -2.0, 2.0), -2.0f64..2.0)
            .prop_filter("nonzero normal", |(psi, _)| psi.iter().any(|v| v.abs() > 1e-3))
            .prop_map(|(psi, w)| ConstraintFn::half_space(psi, w).unwrap()),
    ]
}

fn model(d: usize) -> impl Strategy<Value = MinMaxModel> {
    (1usize..4, 1usize..4).prop_flat_map(move |(m, n)| {
        (vec_of(m * n * d, -2.0, 2.0), vec_of(m * n, -2.0, 2.0))
            .prop_map(move |(a, b)| MinMaxModel::from_flat(d, m, n, a, b).unwrap())
    })
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn perspective_is_positively_homogeneous(
        (c, x) in (1usize..4).prop_flat_map(|d| (constraint(d), vec_of(d, -5.0, 5.0))),
        t in 0.0f64..3.0,
        s in 0.01f64..10.0,
    ) {
        let xs: Vec<f64> = x.iter().map(|v| v * s).collect();
        let lhs = c.perspective(&xs, s * t).unwrap();
        let rhs = s * c.perspective(&x, t).unwrap();
        prop_assert!(close(lhs, rhs, 1e-12), "{lhs} vs {rhs}");
    }

    #[test]
    fn perspective_at_one_is_the_constraint(
        (c, x) in (1usize..4).prop_flat_map(|d| (constraint(d), vec_of(d, -5.0, 5.0))),
    ) {
        prop_assert_eq!(c.perspective(&x, 1.0).unwrap(), c.value(&x).unwrap());
    }

    #[test]
    fn conjugate_perspective_is_homogeneous(
        (c, z) in (1usize..4).prop_flat_map(|d| (constraint(d), vec_of(d, -2.0, 2.0))),
        t in 0.01f64..3.0,
        s in 0.1f64..10.0,
    ) {
        let zs: Vec<f64> = z.iter().map(|v| v * s).collect();
        match (c.perspective_conjugate(&zs, s * t).unwrap(), c.perspective_conjugate(&z, t).unwrap()) {
            (ExtReal::Finite(a), ExtReal::Finite(b)) => prop_assert!(close(a, s * b, 1e-9)),
            (ExtReal::PosInf, ExtReal::PosInf) => {}
            // Domain membership sits on a boundary that scaling can move by an ulp.
            (a, b) => {
                if let ConstraintFn::NormBall { norm, .. } = &c {
                    prop_assert!((dual_norm(*norm, &z) - t).abs() < 1e-9 * (1.0 + t), "{a:?} vs {b:?}");
                } else {
                    prop_assert!(false, "{a:?} vs {b:?}");
                }
            }
        }
    }

    #[test]
    fn fenchel_young(
        (c, x, z) in (1usize..4).prop_flat_map(|d| (constraint(d), vec_of(d, -5.0, 5.0), vec_of(d, -2.0, 2.0))),
    ) {
        if let ExtReal::Finite(cz) = c.conjugate(&z).unwrap() {
            let zx: f64 = z.iter().zip(&x).map(|(a, b)| a * b).sum();
            prop_assert!(c.value(&x).unwrap() + cz >= zx - 1e-12 * (1.0 + zx.abs()));
        }
    }

    #[test]
    fn contains_matches_direct_evaluation(
        (cs, x) in (1usize..4).prop_flat_map(|d| (prop::collection::vec(constraint(d), 1..4), vec_of(d, -5.0, 5.0))),
        tol in 0.0f64..0.1,
    ) {
        let direct = cs.iter().all(|c| c.value(&x).unwrap() <= tol);
        let set = AttackSet::new(cs).unwrap();
        prop_assert_eq!(set.contains(&x, tol).unwrap(), direct);
    }

    #[test]
    fn component_perspective_is_homogeneous(
        (g, x) in (1usize..4).prop_flat_map(|d| (model(d), vec_of(d, -5.0, 5.0))),
        t in 0.01f64..3.0,
        s in 0.01f64..10.0,
    ) {
        let xs: Vec<f64> = x.iter().map(|v| v * s).collect();
        for i in 0..g.num_components() {
            let lhs = g.component_perspective(i, &xs, s * t).unwrap();
            let rhs = s * g.component_perspective(i, &x, t).unwrap();
            prop_assert!(close(lhs, rhs, 1e-12));
            let direct = t * g.component(i, &x.iter().map(|v| v / t).collect::<Vec<_>>());
            prop_assert!(close(g.component_perspective(i, &x, t).unwrap(), direct, 1e-12));
        }
    }

    #[test]
    fn model_json_round_trip(g in (1usize..4).prop_flat_map(model)) {
        let back = MinMaxModel::from_json(&g.to_json()).unwrap();
        prop_assert_eq!(back, g);
    }
}

proptest! {
    // Each case runs conic solves.
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pruning_preserves_values(
        (g, xs) in (1usize..3).prop_flat_map(|d| (model(d), prop::collection::vec(vec_of(d, -20.0, 20.0), 50))),
    ) {
        let (p, _) = prune_redundant(&g, &SolveOptions::default()).unwrap();
        for x in &xs {
            prop_assert!(close(p.evaluate(x).unwrap(), g.evaluate(x).unwrap(), 1e-12));
        }
    }

    #[test]
    fn nested_balls_give_ordered_optima(
        (g, c) in (1usize..4).prop_flat_map(|d| (model(d), vec_of(d, -1.0, 1.0))),
        norm in norm_strategy(),
        r in 0.05f64..1.0,
        grow in 1.0f64..3.0,
    ) {
        let opts = CertifyOptions::default();
        let small = certify(&g, &AttackSet::ball(norm, c.clone(), r).unwrap(), &opts).unwrap();
        let large = certify(&g, &AttackSet::ball(norm, c, r * grow).unwrap(), &opts).unwrap();
        prop_assume!(small.status != CertStatus::Indeterminate && large.status != CertStatus::Indeterminate);
        prop_assert!(small.p_star >= large.p_star - 1e-6, "{} < {}", small.p_star, large.p_star);
    }
}
