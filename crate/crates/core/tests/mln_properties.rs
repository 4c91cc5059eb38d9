mod common;

use std::collections::{BTreeMap, BTreeSet};

use aspm::mln::{
    closed_form_margin, decide, example_bits, hinge_loss, loss_gradient, margin_from_scores, score_from_bits,
    train_from, train_weights, CircuitView, ExampleBits, SafetyConfig, TrainConfig,
};
use common::{
    auth_rule, circuit_rule, direct_margin, fd_gradient, rng, separable_dataset, separable_rules, RandomCircuit,
    CIRCUIT_ACTION,
};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn closed_form_matches_direct_enumeration() {
    let mut r = rng(3);
    for _ in 0..1000 {
        let c = RandomCircuit::generate(&mut r, 6);
        let view = c.view();
        let s1 = view.world_score(&view.world(&c.state, true)).unwrap();
        let s0 = view.world_score(&view.world(&c.state, false)).unwrap();
        let got = view.safety_margin(&c.state).unwrap();
        assert!((got - direct_margin(s1, s0)).abs() <= 1e-12);
        assert!((closed_form_margin(s1, s0) - direct_margin(s1, s0)).abs() <= 1e-12);
    }
}

#[test]
fn empty_marginalization_is_bitwise_two_world() {
    let mut r = rng(4);
    let config = SafetyConfig {
        marginalize_uncertain: true,
        ..SafetyConfig::default()
    };
    for _ in 0..200 {
        let c = RandomCircuit::generate(&mut r, 6);
        let view = c.view();
        let a = view.marginal_margin(&c.state, &BTreeSet::new(), &config).unwrap();
        let b = view.safety_margin(&c.state).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn marginalization_sums_over_completions() {
    let mut r = rng(5);
    let config = SafetyConfig::default();
    for _ in 0..200 {
        let c = RandomCircuit::generate(&mut r, 6);
        let view = c.view();
        let uncertain: BTreeSet<String> = view
            .state_predicates()
            .filter(|_| r.random_bool(0.5))
            .map(String::from)
            .collect();
        let names: Vec<&String> = uncertain.iter().collect();
        let (mut z1, mut z0) = (0.0, 0.0);
        for mask in 0..1u32 << names.len() {
            let mut s = c.state.clone();
            for (i, n) in names.iter().enumerate() {
                s.insert((*n).clone(), mask >> i & 1 == 1);
            }
            z1 += view.world_score(&view.world(&s, true)).unwrap().exp();
            z0 += view.world_score(&view.world(&s, false)).unwrap().exp();
        }
        let got = view.marginal_margin(&c.state, &uncertain, &config).unwrap();
        assert!((got - (z1 - z0) / (z1 + z0)).abs() <= 1e-12);
    }
}

fn random_bits(r: &mut impl Rng, n: usize) -> ExampleBits {
    ExampleBits {
        taken: (0..n).map(|_| r.random_bool(0.5)).collect(),
        not_taken: (0..n).map(|_| r.random_bool(0.5)).collect(),
        label: if r.random_bool(0.5) { 1.0 } else { -1.0 },
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let mut r = rng(6);
    let mut draws = 0;
    while draws < 200 {
        let n = r.random_range(1..=6);
        let w: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..=3.0)).collect();
        let ex = random_bits(&mut r, n);
        let gamma = r.random_range(0.0..=1.0);
        let s1 = score_from_bits(&w, &ex.taken);
        let s0 = score_from_bits(&w, &ex.not_taken);
        // Stay clear of the kink so the difference quotient is not straddling it.
        if gamma - ex.label * margin_from_scores(s1, s0) < 1e-3 {
            continue;
        }
        draws += 1;
        let examples = [ex];
        let analytic = loss_gradient(&w, &examples, gamma).unwrap();
        let numeric = fd_gradient(|w| hinge_loss(w, &examples, gamma).unwrap(), &w, 1e-5);
        let scale = analytic.iter().fold(1e-8_f64, |m, g| m.max(g.abs()));
        let err = analytic
            .iter()
            .zip(&numeric)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err / scale <= 1e-6, "{analytic:?} vs {numeric:?}");
    }
}

#[test]
fn hand_derived_step() {
    let rule = auth_rule();
    let view = CircuitView::new("delete_data", vec![&rule], vec![0.0], |n| {
        Some(if n == "delete_data" {
            aspm::model::PredicateKind::Action
        } else {
            aspm::model::PredicateKind::State
        })
    });
    let state: BTreeMap<String, bool> = [("is_user_authorized".to_string(), false)].into();
    let ex = example_bits(
        &view,
        &aspm::mln::TrainingExample {
            action: "delete_data".into(),
            state: state.clone(),
            label: 1,
        },
    )
    .unwrap();
    assert_eq!(loss_gradient(&[0.0], std::slice::from_ref(&ex), 0.0).unwrap(), [0.5]);
    let config = TrainConfig {
        learning_rate: 0.5,
        epochs: 1,
        gamma: 0.0,
        ..TrainConfig::default()
    };
    let out = train_from(vec![0.0], &[ex], &config).unwrap();
    assert!((out.weights[0] + 0.25).abs() <= 1e-9);
    let trained = CircuitView::new("delete_data", vec![&rule], out.weights.clone(), |n| {
        view.universe.get(n).copied()
    });
    let m = trained.safety_margin(&state).unwrap();
    assert!((m - 0.125_f64.tanh()).abs() <= 1e-9);
    assert!(decide(m, 0.0));
}

#[test]
fn separable_set_is_learned() {
    let rules = separable_rules();
    let data = separable_dataset();
    let view = CircuitView::new(CIRCUIT_ACTION, rules.iter().collect(), vec![0.0; 2], |n| {
        Some(if n == CIRCUIT_ACTION {
            aspm::model::PredicateKind::Action
        } else {
            aspm::model::PredicateKind::State
        })
    });
    let config = TrainConfig {
        learning_rate: 0.5,
        epochs: 200,
        gamma: 0.01,
        ..TrainConfig::default()
    };
    let out = train_weights(&view, &data, &config).unwrap();
    for pair in out.losses.windows(2) {
        assert!(pair[1] <= pair[0], "loss rose: {:?}", pair);
    }
    let trained = CircuitView::new(CIRCUIT_ACTION, rules.iter().collect(), out.weights.clone(), |n| {
        view.universe.get(n).copied()
    });
    for ex in &data {
        let m = trained.safety_margin(&ex.state).unwrap();
        assert!(f64::from(ex.label) * m > 0.0, "{ex:?} margin {m}");
    }
}

#[test]
fn zero_epochs_keep_init() {
    let ex = random_bits(&mut rng(1), 3);
    let config = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let out = train_from(vec![0.3, -0.2, 1.0], &[ex], &config).unwrap();
    assert_eq!(out.weights, [0.3, -0.2, 1.0]);
}

proptest! {
    #[test]
    fn margin_is_bounded(seed in any::<u64>()) {
        let c = RandomCircuit::generate(&mut rng(seed), 6);
        let m = c.view().safety_margin(&c.state).unwrap();
        prop_assert!(m > -1.0 && m < 1.0);
    }

    #[test]
    fn state_only_rules_do_not_move_the_margin(seed in any::<u64>(), w in -3.0..3.0f64) {
        let c = RandomCircuit::generate(&mut rng(seed), 5);
        let before = c.view().safety_margin(&c.state).unwrap();
        let mut more = c.clone();
        more.rules.push(circuit_rule("is_p IMPLIES (is_q OR is_r)"));
        more.weights.push(w);
        let after = more.view().safety_margin(&more.state).unwrap();
        prop_assert!((before - after).abs() <= 1e-12);
        prop_assert_eq!(decide(before, 0.0), decide(after, 0.0));
    }

    #[test]
    fn loss_is_non_negative(seed in any::<u64>(), gamma in 0.0..1.0f64) {
        let mut r = rng(seed);
        let n = r.random_range(1..=6);
        let w: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..=3.0)).collect();
        let ex: Vec<ExampleBits> = (0..4).map(|_| random_bits(&mut r, n)).collect();
        prop_assert!(hinge_loss(&w, &ex, gamma).unwrap() >= 0.0);
    }
}
