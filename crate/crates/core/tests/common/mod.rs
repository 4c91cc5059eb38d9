//! Generators, oracles and fixture paths shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use aspm::circuit::{assemble, AssembleConfig};
use aspm::embedding::FixtureEmbedder;
use aspm::ingest::{build_model, IngestConfig, IngestReport};
use aspm::ltl::{Formula, Trace};
use aspm::mln::{CircuitView, TrainingExample};
use aspm::model::{validate_rule, PolicyModel, Predicate, PredicateKind, RawPredicate, RawRule, Rule};
use aspm::provider::FixtureProvider;
use aspm::shield::{read_trajectory, FixtureTools, TrajectoryStep};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gitlab_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/gitlab")
}

pub const ATOMS: [&str; 4] = ["p", "q", "r", "s"];

/// Random formula of depth at most `depth` over `atoms`.
pub fn random_formula(rng: &mut impl Rng, atoms: &[&str], depth: usize) -> Formula {
    if depth == 0 || rng.random_bool(0.25) {
        return Formula::atom(atoms[rng.random_range(0..atoms.len())]);
    }
    let op = rng.random_range(0..9);
    let a = random_formula(rng, atoms, depth - 1);
    let mut b = || random_formula(rng, atoms, depth - 1);
    match op {
        0 => Formula::not(a),
        1 => Formula::next(a),
        2 => Formula::always(a),
        3 => Formula::eventually(a),
        4 => Formula::and(a, b()),
        5 => Formula::or(a, b()),
        6 => Formula::xor(a, b()),
        7 => Formula::implies(a, b()),
        _ => Formula::until(a, b()),
    }
}

pub fn random_steps(rng: &mut impl Rng, atoms: &[&str], len: usize) -> Vec<BTreeMap<String, bool>> {
    (0..len)
        .map(|_| atoms.iter().map(|a| (a.to_string(), rng.random_bool(0.5))).collect())
        .collect()
}

pub fn random_trace(rng: &mut impl Rng, atoms: &[&str], max_len: usize) -> Trace {
    let len = rng.random_range(1..=max_len);
    Trace::new(random_steps(rng, atoms, len)).unwrap()
}

/// Direct transcription of the finite-trace satisfaction clauses, evaluated
/// recursively at position `i` with explicit quantifiers.
pub fn oracle(f: &Formula, steps: &[BTreeMap<String, bool>], i: usize) -> bool {
    let n = steps.len();
    match f {
        Formula::Atom(name) => steps[i][name],
        Formula::Not(g) => !oracle(g, steps, i),
        Formula::And(a, b) => oracle(a, steps, i) && oracle(b, steps, i),
        Formula::Or(a, b) => oracle(a, steps, i) || oracle(b, steps, i),
        Formula::Xor(a, b) => oracle(a, steps, i) != oracle(b, steps, i),
        Formula::Implies(a, b) => !oracle(a, steps, i) || oracle(b, steps, i),
        Formula::Next(g) => i + 1 < n && oracle(g, steps, i + 1),
        Formula::Always(g) => (i..n).all(|j| oracle(g, steps, j)),
        Formula::Eventually(g) => (i..n).any(|j| oracle(g, steps, j)),
        Formula::Until(a, b) => (i..n).any(|j| oracle(b, steps, j) && (i..=j).all(|k| oracle(a, steps, k))),
    }
}

pub fn unit_vector(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-3 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

pub fn raw_rule(names: &[&str], logic: &str, text: &str) -> RawRule {
    RawRule {
        predicates: names
            .iter()
            .map(|n| RawPredicate {
                name: n.to_string(),
                description: String::new(),
                keywords: vec![],
                kind: None,
            })
            .collect(),
        logic: logic.to_string(),
        text: Some(text.to_string()),
        reference: vec![],
        weight: None,
    }
}

/// Random unassembled model with embedded predicates. Action rules forbid
/// one or two actions under a conjunction of states; physical rules relate
/// two or three states.
pub fn random_model(rng: &mut impl Rng, max_states: usize, max_actions: usize, max_rules: usize) -> PolicyModel {
    let n_states = rng.random_range(2..=max_states);
    let n_actions = rng.random_range(1..=max_actions);
    let n_rules = rng.random_range(1..=max_rules);
    let dim = 6;
    let mut table = IndexMap::new();
    for i in 0..n_states {
        let p = Predicate::new(format!("is_s{i}"), PredicateKind::State, format!("State {i}."))
            .with_embedding(unit_vector(rng, dim));
        table.insert(p.name.clone(), p);
    }
    for i in 0..n_actions {
        let p = Predicate::new(format!("act{i}"), PredicateKind::Action, format!("Action {i}."))
            .with_keywords([format!("act{i}")])
            .with_embedding(unit_vector(rng, dim));
        table.insert(p.name.clone(), p);
    }
    let mut rules = IndexMap::new();
    for _ in 0..n_rules {
        let k = rng.random_range(1..=3.min(n_states));
        let mut states: Vec<String> = Vec::new();
        while states.len() < k {
            let s = format!("is_s{}", rng.random_range(0..n_states));
            if !states.contains(&s) {
                states.push(s);
            }
        }
        let conj = states.join(" AND ");
        let (names, logic) = if rng.random_bool(0.6) {
            let mut acts = vec![format!("act{}", rng.random_range(0..n_actions))];
            let extra = format!("act{}", rng.random_range(0..n_actions));
            if rng.random_bool(0.3) && !acts.contains(&extra) {
                acts.push(extra);
            }
            let forbidden: Vec<String> = acts.iter().map(|a| format!("NOT {a}")).collect();
            let mut names = states.clone();
            names.extend(acts);
            (
                names,
                format!("ALWAYS (({conj}) IMPLIES ({}))", forbidden.join(" AND ")),
            )
        } else if states.len() >= 2 {
            let (last, rest) = states.split_last().unwrap();
            (states.clone(), format!("({}) IMPLIES {last}", rest.join(" AND ")))
        } else {
            (states.clone(), format!("EVENTUALLY {}", states[0]))
        };
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let rule = validate_rule(&raw_rule(&refs, &logic, "Generated rule."), &table).unwrap();
        rules.insert(rule.id.clone(), rule);
    }
    PolicyModel::from_parts(
        table.into_values().collect(),
        rules.into_values().collect(),
        vec![],
        None,
    )
    .unwrap()
}

pub fn privacy_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/privacy")
}

pub fn privacy_embedder() -> FixtureEmbedder {
    FixtureEmbedder::from_json(&std::fs::read_to_string(privacy_dir().join("embeddings.json")).unwrap()).unwrap()
}

/// Four privacy rules: two gated on a vague legal state with vague or
/// specific actions, and two near-duplicates differing only in synonyms.
pub fn privacy_model() -> PolicyModel {
    use PredicateKind::{Action, State};
    let preds = [
        ("process_content", Action, "Process the content."),
        ("collect_personal_data", Action, "Collect or record personal data."),
        ("publish_personal_data", Action, "Publish personal data."),
        (
            "disclose_personal_data",
            Action,
            "Disclose personal data to third parties.",
        ),
        ("comply_with_laws", State, "The handling complies with applicable laws."),
        (
            "has_user_consent",
            State,
            "The user has consented to the handling of their data.",
        ),
        ("has_consent", State, "Consent was given."),
        ("is_personal_data", State, "The content contains personal data."),
    ];
    let table: IndexMap<String, Predicate> = preds
        .iter()
        .map(|(n, k, d)| (n.to_string(), Predicate::new(*n, *k, *d)))
        .collect();
    let rules = [
        (
            &["comply_with_laws", "process_content"][..],
            "ALWAYS (NOT comply_with_laws IMPLIES NOT process_content)",
            "Do not process content in violation of the law.",
        ),
        (
            &["comply_with_laws", "collect_personal_data"][..],
            "ALWAYS (NOT comply_with_laws IMPLIES NOT collect_personal_data)",
            "Do not collect personal data in violation of the law.",
        ),
        (
            &["is_personal_data", "has_user_consent", "publish_personal_data"][..],
            "ALWAYS ((is_personal_data AND NOT has_user_consent) IMPLIES NOT publish_personal_data)",
            "Do not publish personal data without consent.",
        ),
        (
            &["is_personal_data", "has_consent", "disclose_personal_data"][..],
            "ALWAYS ((is_personal_data AND NOT has_consent) IMPLIES NOT disclose_personal_data)",
            "Do not disclose personal data without consent.",
        ),
    ];
    let rules = rules
        .iter()
        .map(|(names, logic, text)| validate_rule(&raw_rule(names, logic, text), &table).unwrap())
        .collect();
    PolicyModel::from_parts(table.into_values().collect(), rules, vec![], None).unwrap()
}

pub const CIRCUIT_ACTION: &str = "act";
pub const CIRCUIT_STATES: [&str; 3] = ["is_p", "is_q", "is_r"];

fn circuit_table() -> IndexMap<String, Predicate> {
    let mut table = IndexMap::new();
    table.insert(
        CIRCUIT_ACTION.to_string(),
        Predicate::new(CIRCUIT_ACTION, PredicateKind::Action, "Act."),
    );
    for s in CIRCUIT_STATES {
        table.insert(s.to_string(), Predicate::new(s, PredicateKind::State, "State."));
    }
    table
}

pub fn circuit_rule(logic: &str) -> Rule {
    let mut names = vec![CIRCUIT_ACTION];
    names.extend(CIRCUIT_STATES);
    validate_rule(&raw_rule(&names, logic, "Rule."), &circuit_table()).unwrap()
}

/// Rules over one action and three states, with weights and a total state.
#[derive(Debug, Clone)]
pub struct RandomCircuit {
    pub rules: Vec<Rule>,
    pub weights: Vec<f64>,
    pub state: BTreeMap<String, bool>,
}

impl RandomCircuit {
    pub fn generate(rng: &mut impl Rng, max_rules: usize) -> Self {
        let mut atoms = vec![CIRCUIT_ACTION];
        atoms.extend(CIRCUIT_STATES);
        let n = rng.random_range(1..=max_rules);
        let rules = (0..n)
            .map(|_| circuit_rule(&random_formula(rng, &atoms, 3).render()))
            .collect();
        let weights = (0..n).map(|_| rng.random_range(-3.0..=3.0)).collect();
        let state = CIRCUIT_STATES
            .iter()
            .map(|s| (s.to_string(), rng.random_bool(0.5)))
            .collect();
        RandomCircuit { rules, weights, state }
    }

    pub fn view(&self) -> CircuitView<'_> {
        let table = circuit_table();
        CircuitView::new(CIRCUIT_ACTION, self.rules.iter().collect(), self.weights.clone(), |n| {
            table.get(n).map(|p| p.kind)
        })
    }
}

/// Margin from the two world probabilities with unshifted exponentials.
pub fn direct_margin(s1: f64, s0: f64) -> f64 {
    let z = s1.exp() + s0.exp();
    s1.exp() / z - s0.exp() / z
}

/// Central finite-difference gradient of `f` at `w`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, w: &[f64], h: f64) -> Vec<f64> {
    (0..w.len())
        .map(|i| {
            let mut plus = w.to_vec();
            let mut minus = w.to_vec();
            plus[i] += h;
            minus[i] -= h;
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
        .collect()
}

/// Rules of the separable set. With the action taken the first is
/// satisfied iff `is_p`; the second separates only the `is_p` states, so
/// each label group moves its own weight.
pub fn separable_rules() -> Vec<Rule> {
    vec![
        circuit_rule("ALWAYS (NOT is_p IMPLIES NOT act)"),
        circuit_rule("ALWAYS (is_p IMPLIES act)"),
    ]
}

/// 64 distinct states over `is_p`, `is_q`, `is_r` and three noise
/// predicates; the label is +1 iff `is_p`.
pub fn separable_dataset() -> Vec<TrainingExample> {
    (0u32..64)
        .map(|m| {
            let mut state: BTreeMap<String, bool> = CIRCUIT_STATES
                .iter()
                .enumerate()
                .map(|(i, s)| (s.to_string(), m >> i & 1 == 1))
                .collect();
            for i in 0..3 {
                state.insert(format!("is_noise{i}"), m >> (3 + i) & 1 == 1);
            }
            let label = if state["is_p"] { 1 } else { -1 };
            TrainingExample {
                action: CIRCUIT_ACTION.to_string(),
                state,
                label,
            }
        })
        .collect()
}

pub fn auth_rule() -> Rule {
    let mut table = IndexMap::new();
    table.insert(
        "delete_data".to_string(),
        Predicate::new("delete_data", PredicateKind::Action, "Delete data."),
    );
    table.insert(
        "is_user_authorized".to_string(),
        Predicate::new("is_user_authorized", PredicateKind::State, "The user is authorized."),
    );
    validate_rule(
        &raw_rule(
            &["is_user_authorized", "delete_data"],
            "ALWAYS (NOT is_user_authorized IMPLIES NOT delete_data)",
            "Only authorized users may delete data.",
        ),
        &table,
    )
    .unwrap()
}

/// Model whose spectral assignment is pinned in `fixtures/golden_assignment.json`.
pub fn golden_model() -> PolicyModel {
    random_model(&mut rng(2024), 40, 8, 60)
}

pub fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/golden_assignment.json")
}

pub fn gitlab_embedder() -> FixtureEmbedder {
    FixtureEmbedder::from_json(&std::fs::read_to_string(gitlab_dir().join("embeddings.json")).unwrap()).unwrap()
}

/// The two-rule handbook model built from canned completions.
pub fn gitlab_built() -> (PolicyModel, IngestReport) {
    let dir = gitlab_dir();
    let doc = std::fs::read_to_string(dir.join("handbook/access.md")).unwrap();
    let provider = FixtureProvider::from_dir(dir.join("completions"));
    let config = IngestConfig {
        organization: "GitLab".into(),
        ..IngestConfig::default()
    };
    build_model(&[doc], &provider, Some(&gitlab_embedder()), &config).unwrap()
}

/// The handbook model with every rule in the `delete_data` circuit.
pub fn gitlab_assembled() -> PolicyModel {
    let config = AssembleConfig {
        k: Some(1),
        seed: 7,
        ..AssembleConfig::default()
    };
    assemble(&gitlab_built().0, Some(&gitlab_embedder()), &config)
        .unwrap()
        .0
}

pub fn gitlab_tools(name: &str) -> FixtureTools {
    FixtureTools::from_json(&std::fs::read_to_string(gitlab_dir().join(name)).unwrap()).unwrap()
}

pub fn gitlab_steps(name: &str) -> Vec<TrajectoryStep> {
    read_trajectory(std::io::BufReader::new(
        std::fs::File::open(gitlab_dir().join(name)).unwrap(),
    ))
    .unwrap()
}

pub const AUTH_RULE: &str = "r37cd4a6f8b3f82b8";
pub const RED_RULE: &str = "rf01b912e22708ea4";
