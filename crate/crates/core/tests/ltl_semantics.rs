mod common;

use aspm::ltl::{evaluate, evaluate_all, parse_formula, split_top_level_conjunction, Formula, Trace};
use common::{oracle, random_formula, random_steps, rng, ATOMS};
use proptest::prelude::*;

fn trace(cols: &[(&str, &[bool])]) -> Trace {
    let cols: Vec<(&str, Vec<bool>)> = cols.iter().map(|(n, v)| (*n, v.to_vec())).collect();
    Trace::from_columns(&cols).unwrap()
}

#[test]
fn until_requires_lhs_at_the_witness() {
    let f = parse_formula("p UNTIL q").unwrap();
    assert!(evaluate(&f, &trace(&[("p", &[true, true, false]), ("q", &[false, true, false])])).unwrap());
    assert!(!evaluate(&f, &trace(&[("p", &[true, false]), ("q", &[false, true])])).unwrap());
    assert!(!evaluate(&f, &trace(&[("p", &[true, true]), ("q", &[false, false])])).unwrap());
}

#[test]
fn next_is_strong() {
    let f = parse_formula("NEXT p").unwrap();
    assert!(!evaluate(&f, &trace(&[("p", &[true])])).unwrap());
    assert!(evaluate(&f, &trace(&[("p", &[false, true])])).unwrap());
}

#[test]
fn evaluator_matches_oracle_at_every_position() {
    let mut r = rng(41);
    for _ in 0..2000 {
        let f = random_formula(&mut r, &ATOMS, 4);
        let len = rand::Rng::random_range(&mut r, 1..=6);
        let steps = random_steps(&mut r, &ATOMS, len);
        let got = evaluate_all(&f, &Trace::new(steps.clone()).unwrap()).unwrap();
        for (i, v) in got.iter().enumerate() {
            assert_eq!(*v, oracle(&f, &steps, i), "{f} at {i} on {steps:?}");
        }
    }
}

fn case() -> impl Strategy<Value = (Formula, Vec<std::collections::BTreeMap<String, bool>>)> {
    (any::<u64>(), 1usize..=6).prop_map(|(seed, len)| {
        let mut r = rng(seed);
        let f = random_formula(&mut r, &ATOMS, 4);
        let steps = random_steps(&mut r, &ATOMS, len);
        (f, steps)
    })
}

proptest! {
    #[test]
    fn render_parse_round_trip((f, _) in case()) {
        prop_assert_eq!(parse_formula(&f.render()).unwrap(), f);
    }

    #[test]
    fn always_and_eventually_are_dual((f, steps) in case()) {
        let t = Trace::new(steps).unwrap();
        let lhs = evaluate_all(&Formula::not(Formula::always(f.clone())), &t).unwrap();
        let rhs = evaluate_all(&Formula::eventually(Formula::not(f)), &t).unwrap();
        prop_assert_eq!(lhs, rhs);
    }

    #[test]
    fn always_holds_on_every_suffix((f, steps) in case()) {
        let col = evaluate_all(&Formula::always(f), &Trace::new(steps).unwrap()).unwrap();
        for i in 0..col.len() - 1 {
            prop_assert!(!col[i] || col[i + 1]);
        }
    }

    #[test]
    fn conjunction_split_preserves_meaning((f, steps) in case(), (g, _) in case()) {
        let both = Formula::and(f, g);
        let t = Trace::new(steps).unwrap();
        let parts = split_top_level_conjunction(&both);
        prop_assert!(parts.len() >= 2);
        let mut all = vec![true; t.len()];
        for p in &parts {
            for (acc, v) in all.iter_mut().zip(evaluate_all(p, &t).unwrap()) {
                *acc &= v;
            }
        }
        prop_assert_eq!(all, evaluate_all(&both, &t).unwrap());
    }
}
