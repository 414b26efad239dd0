use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use resonance::bandit_model::{
    argmax, encode_context, feature_slot, fnv1a64, selection_probability, LinearPolicy,
};
use resonance::feature::{Context, FeatureKey, FeatureValue};
use resonance::{Policy, PolicyF32};

fn feature_value() -> impl Strategy<Value = FeatureValue> {
    prop_oneof![
        any::<bool>().prop_map(FeatureValue::Bool),
        (-1000i64..1000).prop_map(FeatureValue::Int),
        (-100.0f64..100.0).prop_map(FeatureValue::Real),
        "[a-z0-9]{1,6}".prop_map(FeatureValue::Categorical),
    ]
}

fn context() -> impl Strategy<Value = Context> {
    proptest::collection::btree_map(("[a-c]", "[a-f]{1,3}"), feature_value(), 0..8).prop_map(|m| {
        Context::new(
            m.into_iter()
                .map(|((ns, name), v)| (FeatureKey::new(ns, name).unwrap(), v))
                .collect(),
        )
        .unwrap()
    })
}

fn policy(k: usize, bits: u32) -> impl Strategy<Value = Policy> {
    let slots = 1u64 << bits;
    (
        proptest::collection::vec(
            proptest::collection::btree_map(0..slots, -5.0f64..5.0, 0..20),
            k,
        ),
        0.0f64..=1.0,
    )
        .prop_map(move |(ws, eps)| {
            let labels = (0..k).map(|i| format!("a{i}")).collect();
            let mut p = Policy::new("prop", labels, bits, eps).unwrap();
            for (a, m) in ws.into_iter().enumerate() {
                for (s, w) in m {
                    p.set_weight(a, s, w).unwrap();
                }
            }
            p
        })
}

proptest! {
    #[test]
    fn probability_law(eps in 0.0f64..=1.0, k in 2usize..12, seed in any::<u64>(), p in policy(4, 6), ctx in context()) {
        let greedy = (seed as usize) % k;
        let total: f64 = (0..k).map(|a| selection_probability(eps, k, a, greedy)).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        for a in 0..k {
            let pr = selection_probability(eps, k, a, greedy);
            prop_assert!(pr > 0.0 || (eps == 0.0 && a != greedy));
        }
        let p = p.with_epsilon(eps).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = p.select_action(&p.encode(&ctx), &mut rng).unwrap();
        let g = p.greedy_action(&ctx);
        prop_assert_eq!(pred.probability, selection_probability(eps, 4, pred.action_index, g));
        prop_assert_eq!(&pred.action, &p.actions()[pred.action_index]);
    }

    #[test]
    fn argmax_invariant_under_positive_scaling(scores in proptest::collection::vec(-10.0f64..10.0, 1..10), c in 0.01f64..100.0) {
        let scaled: Vec<f64> = scores.iter().map(|s| s * c).collect();
        let shifted: Vec<f64> = scores.iter().map(|s| s + 3.0).collect();
        prop_assert_eq!(argmax(&scores), argmax(&scaled));
        prop_assert_eq!(argmax(&scores), argmax(&shifted));
    }

    #[test]
    fn scores_match_dense_dot_product(p in policy(3, 6), ctx in context()) {
        let x = encode_context::<f64>(&ctx, 6);
        let mut dense = vec![0.0; 64];
        for (&s, &v) in x.entries() {
            dense[s as usize] += v;
        }
        let scores = p.score_actions(&x).unwrap();
        for (a, &got) in scores.iter().enumerate() {
            let want: f64 = (0..64u64).map(|s| p.weight(a, s) * dense[s as usize]).sum();
            prop_assert!((got - want).abs() <= 1e-9 * (1.0 + want.abs()), "{} vs {}", got, want);
        }
    }

    #[test]
    fn encoding_is_linear_in_numeric_values(v in -50.0f64..50.0, c in -4.0f64..4.0) {
        let k = FeatureKey::new("n", "x").unwrap();
        let (slot, m1) = feature_slot::<f64>(&k, &FeatureValue::Real(v), 10);
        let (slot2, m2) = feature_slot::<f64>(&k, &FeatureValue::Real(c * v), 10);
        prop_assert_eq!(slot, slot2);
        prop_assert!((m2 - c * m1).abs() <= 1e-12 * (1.0 + m2.abs()));
        prop_assert_eq!(slot, fnv1a64(b"n|x") % 1024);
    }

    #[test]
    fn encoding_ignores_feature_order(ctx in context()) {
        let mut rev = ctx.features().to_vec();
        rev.reverse();
        let rev = Context::new(rev).unwrap();
        prop_assert_eq!(encode_context::<f64>(&ctx, 12), encode_context::<f64>(&rev, 12));
    }

    #[test]
    fn round_trip_is_bit_exact(p in policy(5, 10)) {
        let bytes = p.to_bytes();
        let back = Policy::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back.to_bytes(), &bytes);
        for a in 0..5 {
            let w: BTreeMap<u64, u64> = p.weights(a).iter().map(|(&s, w)| (s, w.to_bits())).collect();
            let b: BTreeMap<u64, u64> = back.weights(a).iter().map(|(&s, w)| (s, w.to_bits())).collect();
            prop_assert_eq!(w, b);
        }
        prop_assert_eq!(back.epsilon().to_bits(), p.epsilon().to_bits());
    }

    #[test]
    fn f32_round_trip_is_bit_exact(ws in proptest::collection::btree_map(0..1024u64, any::<f32>().prop_filter("finite nonzero", |w| w.is_finite() && *w != 0.0), 0..50)) {
        let mut p = PolicyF32::new("f32", vec!["x".into(), "y".into()], 10, 0.2).unwrap();
        for (&s, &w) in &ws {
            p.set_weight(1, s, w).unwrap();
        }
        let back = LinearPolicy::<f32>::from_bytes(&p.to_bytes()).unwrap();
        for (&s, &w) in &ws {
            prop_assert_eq!(back.weight(1, s).to_bits(), w.to_bits());
        }
    }
}
