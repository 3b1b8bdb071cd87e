use proptest::prelude::*;

use shieldlab::engine::{self, PolicyDistribution, ShieldError, ShieldSource};
use shieldlab::shields::{ShieldCatalogEntry, ShieldName};

fn policy(weights: Vec<f64>) -> PolicyDistribution {
    let s: f64 = weights.iter().sum();
    let mut p: Vec<f64> = weights.iter().map(|w| w / s).collect();
    p[0] += 1.0 - p.iter().sum::<f64>();
    PolicyDistribution::new(p).unwrap()
}

fn shield_strategy() -> impl Strategy<Value = ShieldName> {
    proptest::sample::select(ShieldName::ALL.to_vec())
}

fn binding() -> impl Strategy<Value = (ShieldName, Vec<f64>, Vec<f64>)> {
    shield_strategy().prop_flat_map(|name| {
        let p = name.program();
        (
            Just(name),
            proptest::collection::vec(1e-3..1.0f64, p.num_actions()),
            proptest::collection::vec(0.0..=1.0f64, p.num_sensors()),
        )
    })
}

proptest! {
    #[test]
    fn queries_are_probabilities((name, w, s) in binding()) {
        let b = engine::bind(name.program(), policy(w), &s).unwrap();
        for q in b.action_safeties() {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&q));
        }
        let ps = b.policy_safety();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ps));
    }

    #[test]
    fn shielding_is_at_least_as_safe((name, w, s) in binding()) {
        let b = engine::bind(name.program(), policy(w), &s).unwrap();
        let q = b.action_safeties();
        match b.shielded_policy() {
            Ok(plus) => {
                prop_assert!((plus.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(engine::policy_safety_from(&q, plus.probs()) >= b.policy_safety() - 1e-9);
            }
            Err(e) => prop_assert!(matches!(e, ShieldError::ZeroSafety(_))),
        }
    }

    #[test]
    fn unsafe_actions_lose_mass((name, w, s) in binding()) {
        let pi = policy(w);
        let b = engine::bind(name.program(), pi.clone(), &s).unwrap();
        let q = b.action_safeties();
        let ps = b.policy_safety();
        if let Ok(plus) = b.shielded_policy() {
            for (a, (&p, &pp)) in pi.probs().iter().zip(plus.probs()).enumerate() {
                if q[a] < ps - 1e-12 {
                    prop_assert!(pp <= p + 1e-12);
                }
            }
        }
    }

    #[test]
    fn catalog_entries_agree_with_the_engine((name, w, s) in binding()) {
        let pi = policy(w);
        let out = shieldlab::shields::evaluate(name.program(), &pi, s.clone()).unwrap();
        let b = engine::bind(name.program(), pi, &s).unwrap();
        prop_assert_eq!(out.action_safety, b.action_safeties());
        prop_assert_eq!(out.base_safety, b.policy_safety());
    }
}

#[test]
fn sensor_out_of_range_is_rejected() {
    let p = ShieldName::Mixed.program();
    let err = engine::bind(p, PolicyDistribution::uniform(2), &[1.5, 0.0]).unwrap_err();
    assert_eq!(err, ShieldError::InvalidProbability(1.5));
}

#[test]
fn file_program_matches_catalog() {
    let text = include_str!("fixtures/mixed_inline.pl");
    let program = engine::parse(&ShieldSource::infer(text).unwrap()).unwrap();
    let catalog = ShieldCatalogEntry::new(ShieldName::Mixed);
    for s in [[0.0, 0.0], [0.2, 0.1], [1.0, 0.3]] {
        let pi = PolicyDistribution::new(vec![0.5, 0.5]).unwrap();
        let a = engine::bind(&program, pi.clone(), &s).unwrap();
        let b = engine::bind(catalog.program, pi, &s).unwrap();
        assert_eq!(a.action_safeties(), b.action_safeties());
    }
}
