//! The policy model: predicates, weighted LTL_f rules and per-action circuits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ltl::{self, parse_formula, Formula, ParseError};

/// Version tag written into every model document.
pub const MODEL_VERSION: u32 = 1;

const NORM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredicateKind {
    Action,
    State,
}

impl fmt::Display for PredicateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PredicateKind::Action => "action",
            PredicateKind::State => "state",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleKind {
    Action,
    Physical,
}

impl fmt::Display for RuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RuleKind::Action => "action",
            RuleKind::Physical => "physical",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub name: String,
    pub kind: PredicateKind,
    pub description: String,
    #[serde(default)]
    pub keywords: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

impl Predicate {
    pub fn new(name: impl Into<String>, kind: PredicateKind, description: impl Into<String>) -> Self {
        Predicate {
            name: name.into(),
            kind,
            description: description.into(),
            keywords: Vec::new(),
            embedding: None,
        }
    }

    pub fn with_keywords<I, S>(mut self, keywords: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.keywords = keywords.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_embedding(mut self, embedding: Vec<f64>) -> Self {
        self.embedding = Some(embedding);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub id: String,
    /// Predicate names the rule ranges over, sorted.
    pub predicates: Vec<String>,
    pub text: String,
    #[serde(rename = "logic")]
    pub formula: Formula,
    pub kind: RuleKind,
    pub weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vagueness: Option<f64>,
    #[serde(default)]
    pub reference: Vec<String>,
}

/// Content hash of a rule: canonical formula text plus sorted predicate names.
pub fn rule_id(formula: &Formula, predicates: &[String]) -> String {
    let mut sorted: Vec<&str> = predicates.iter().map(String::as_str).collect();
    sorted.sort_unstable();
    sorted.dedup();
    let mut hasher = Sha256::new();
    hasher.update(formula.render().as_bytes());
    hasher.update(b"\n");
    hasher.update(sorted.join(",").as_bytes());
    let digest = hasher.finalize();
    format!("r{}", &hex::encode(digest)[..16])
}

impl Rule {
    /// Action predicates this rule mentions, in formula order.
    pub fn actions<'a>(&'a self, model: &'a PolicyModel) -> impl Iterator<Item = String> + 'a {
        self.formula
            .free_predicates()
            .into_iter()
            .filter(move |p| model.kind_of(p) == Some(PredicateKind::Action))
    }

    /// State predicates in the rule's predicate set.
    pub fn state_predicates<'a>(&'a self, model: &'a PolicyModel) -> impl Iterator<Item = &'a str> + 'a {
        self.predicates
            .iter()
            .map(String::as_str)
            .filter(move |p| model.kind_of(p) == Some(PredicateKind::State))
    }
}

/// One extracted policy, mirroring the extraction output schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredPolicy {
    #[serde(default, deserialize_with = "list_or_none")]
    pub definition: Vec<String>,
    #[serde(default)]
    pub scope: Option<String>,
    pub policy_description: String,
    #[serde(default, deserialize_with = "list_or_none")]
    pub reference: Vec<String>,
}

/// Accepts a list, `null`, or the literal string "None" (read as empty).
fn list_or_none<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Vec<String>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        List(Vec<String>),
        Text(String),
    }
    Ok(match Option::<Repr>::deserialize(d)? {
        None => Vec::new(),
        Some(Repr::List(v)) => v,
        Some(Repr::Text(t)) if t.trim().is_empty() || t.trim() == "None" => Vec::new(),
        Some(Repr::Text(t)) => vec![t],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Circuit {
    pub action: String,
    pub rule_ids: Vec<String>,
    pub weights: Vec<f64>,
}

impl Circuit {
    pub fn weight_of(&self, rule_id: &str) -> Option<f64> {
        self.rule_ids.iter().position(|r| r == rule_id).map(|i| self.weights[i])
    }
}

/// Raw predicate declaration as produced by rule extraction.
///
/// Accepts either the positional `[name, description, [keywords]]` form
/// (optionally followed by a kind) or an object with the same fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RawPredicate {
    pub name: String,
    pub description: String,
    pub keywords: Vec<String>,
    pub kind: Option<PredicateKind>,
}

impl<'de> Deserialize<'de> for RawPredicate {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Full(String, String, Vec<String>, PredicateKind),
            Short(String, String, Vec<String>),
            Object {
                name: String,
                #[serde(default)]
                description: String,
                #[serde(default)]
                keywords: Vec<String>,
                #[serde(default)]
                kind: Option<PredicateKind>,
            },
        }
        Ok(match Repr::deserialize(deserializer)? {
            Repr::Full(name, description, keywords, kind) => RawPredicate {
                name,
                description,
                keywords,
                kind: Some(kind),
            },
            Repr::Short(name, description, keywords) => RawPredicate {
                name,
                description,
                keywords,
                kind: None,
            },
            Repr::Object {
                name,
                description,
                keywords,
                kind,
            } => RawPredicate {
                name,
                description,
                keywords,
                kind,
            },
        })
    }
}

impl RawPredicate {
    /// Declared kind, or one inferred from the name.
    pub fn resolved_kind(&self) -> PredicateKind {
        self.kind.unwrap_or_else(|| infer_kind(&self.name))
    }

    pub fn to_predicate(&self) -> Predicate {
        Predicate {
            name: self.name.clone(),
            kind: self.resolved_kind(),
            description: self.description.clone(),
            keywords: self.keywords.clone(),
            embedding: None,
        }
    }
}

const STATE_MARKERS: [&str; 12] = [
    "is", "has", "have", "was", "were", "are", "been", "can", "contains", "exists", "requires", "within",
];

/// Guesses a predicate's kind from its name when extraction omitted it.
///
/// Names containing a copula or possessive token (`is_private`,
/// `data_is_harmful`, `has_consent`) describe state; everything else is
/// read as an action verb phrase (`delete_data`).
pub fn infer_kind(name: &str) -> PredicateKind {
    let lower = name.to_ascii_lowercase();
    if lower.split('_').any(|tok| STATE_MARKERS.contains(&tok)) {
        PredicateKind::State
    } else {
        PredicateKind::Action
    }
}

/// Raw rule record in the extraction output schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRule {
    pub predicates: Vec<RawPredicate>,
    pub logic: String,
    #[serde(default, alias = "description", skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reference: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown predicate '{0}'")]
    UnknownPredicate(String),
    #[error("formula mentions '{0}' which is not among the rule's predicates")]
    PredicateOutsideRule(String),
    #[error("rule text is empty")]
    EmptyText,
    #[error("invalid predicate name '{0}'")]
    InvalidName(String),
    #[error("duplicate predicate '{0}'")]
    DuplicatePredicate(String),
    #[error("predicate '{name}' embedding has norm {norm}, expected 1")]
    EmbeddingNorm { name: String, norm: f64 },
    #[error("rule logic: {0}")]
    Logic(#[from] ParseError),
    #[error("rule '{id}': {reason}")]
    InvalidRule { id: String, reason: String },
    #[error("'{0}' is not an action predicate")]
    NotAnAction(String),
    #[error("action '{0}' has no circuit; assemble the model first")]
    NoCircuit(String),
    #[error("circuit '{action}': {reason}")]
    InvalidCircuit { action: String, reason: String },
    #[error("model document has no version tag")]
    MissingVersion,
    #[error("model document version {found} is not supported (expected {expected})")]
    VersionMismatch { found: String, expected: u32 },
    #[error("malformed model document: {0}")]
    Document(#[from] serde_json::Error),
}

/// Checks a raw rule record against the predicate table and builds a [`Rule`].
pub fn validate_rule(raw: &RawRule, table: &IndexMap<String, Predicate>) -> Result<Rule, ModelError> {
    let text = raw.text.as_deref().map(str::trim).unwrap_or("");
    if text.is_empty() {
        return Err(ModelError::EmptyText);
    }
    let mut names: Vec<String> = Vec::with_capacity(raw.predicates.len());
    for p in &raw.predicates {
        if !table.contains_key(&p.name) {
            return Err(ModelError::UnknownPredicate(p.name.clone()));
        }
        names.push(p.name.clone());
    }
    let formula = parse_formula(&raw.logic)?;
    for atom in formula.free_predicates() {
        if !names.contains(&atom) {
            return Err(ModelError::PredicateOutsideRule(atom));
        }
    }
    names.sort();
    names.dedup();
    let weight = raw.weight.unwrap_or(1.0);
    if !weight.is_finite() {
        return Err(ModelError::InvalidRule {
            id: rule_id(&formula, &names),
            reason: format!("non-finite weight {weight}"),
        });
    }
    let kind = classify_formula(&formula, |n| table.get(n).map(|p| p.kind));
    Ok(Rule {
        id: rule_id(&formula, &names),
        predicates: names,
        text: text.to_string(),
        formula,
        kind,
        weight,
        vagueness: None,
        reference: raw.reference.clone(),
    })
}

/// Action iff some atom of the formula is an action predicate.
pub fn classify_formula(formula: &Formula, kind_of: impl Fn(&str) -> Option<PredicateKind>) -> RuleKind {
    if formula
        .free_predicates()
        .iter()
        .any(|p| kind_of(p) == Some(PredicateKind::Action))
    {
        RuleKind::Action
    } else {
        RuleKind::Physical
    }
}

/// The assembled policy model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PolicyModel {
    predicates: IndexMap<String, Predicate>,
    rules: BTreeMap<String, Rule>,
    circuits: BTreeMap<String, Circuit>,
    provenance: Option<Vec<StructuredPolicy>>,
    epsilon: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    version: u32,
    predicates: Vec<Predicate>,
    rules: Vec<Rule>,
    circuits: Vec<Circuit>,
    provenance: Option<Vec<StructuredPolicy>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    epsilon: Option<f64>,
}

impl PolicyModel {
    /// Builds and validates a model. Circuits may be empty (not yet assembled).
    pub fn from_parts(
        predicates: Vec<Predicate>,
        rules: Vec<Rule>,
        circuits: Vec<Circuit>,
        provenance: Option<Vec<StructuredPolicy>>,
    ) -> Result<Self, ModelError> {
        let mut table = IndexMap::new();
        for p in predicates {
            if table.contains_key(&p.name) {
                return Err(ModelError::DuplicatePredicate(p.name));
            }
            table.insert(p.name.clone(), p);
        }
        let model = PolicyModel {
            predicates: table,
            rules: rules.into_iter().map(|r| (r.id.clone(), r)).collect(),
            circuits: circuits.into_iter().map(|c| (c.action.clone(), c)).collect(),
            provenance,
            epsilon: None,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn predicates(&self) -> impl Iterator<Item = &Predicate> {
        self.predicates.values()
    }

    pub fn predicate_table(&self) -> &IndexMap<String, Predicate> {
        &self.predicates
    }

    pub fn predicate(&self, name: &str) -> Option<&Predicate> {
        self.predicates.get(name)
    }

    pub fn kind_of(&self, name: &str) -> Option<PredicateKind> {
        self.predicates.get(name).map(|p| p.kind)
    }

    /// Action predicates in declaration order.
    pub fn action_predicates(&self) -> impl Iterator<Item = &Predicate> {
        self.predicates.values().filter(|p| p.kind == PredicateKind::Action)
    }

    /// State predicates in declaration order.
    pub fn state_predicates(&self) -> impl Iterator<Item = &Predicate> {
        self.predicates.values().filter(|p| p.kind == PredicateKind::State)
    }

    /// Rules in id order.
    pub fn rules(&self) -> impl Iterator<Item = &Rule> {
        self.rules.values()
    }

    pub fn rule(&self, id: &str) -> Option<&Rule> {
        self.rules.get(id)
    }

    pub fn rule_count(&self) -> usize {
        self.rules.len()
    }

    pub fn predicate_count(&self) -> usize {
        self.predicates.len()
    }

    pub fn circuits(&self) -> impl Iterator<Item = &Circuit> {
        self.circuits.values()
    }

    pub fn is_assembled(&self) -> bool {
        !self.circuits.is_empty()
    }

    pub fn provenance(&self) -> Option<&[StructuredPolicy]> {
        self.provenance.as_deref()
    }

    /// Decision threshold stored by training, if any.
    pub fn epsilon(&self) -> Option<f64> {
        self.epsilon
    }

    pub fn set_epsilon(&mut self, epsilon: Option<f64>) {
        self.epsilon = epsilon;
    }

    pub fn classify_rule(&self, rule: &Rule) -> RuleKind {
        classify_formula(&rule.formula, |n| self.kind_of(n))
    }

    /// Action predicates constrained by at least one rule.
    pub fn constrained_actions(&self) -> BTreeSet<String> {
        self.rules
            .values()
            .flat_map(|r| r.actions(self).collect::<Vec<_>>())
            .collect()
    }

    /// The circuit verifying `action`.
    pub fn lookup_circuit(&self, action: &str) -> Result<&Circuit, ModelError> {
        match self.kind_of(action) {
            None => Err(ModelError::UnknownPredicate(action.to_string())),
            Some(PredicateKind::State) => Err(ModelError::NotAnAction(action.to_string())),
            Some(PredicateKind::Action) => self
                .circuits
                .get(action)
                .ok_or_else(|| ModelError::NoCircuit(action.to_string())),
        }
    }

    /// Checks every structural invariant of the model.
    pub fn validate(&self) -> Result<(), ModelError> {
        for (key, p) in &self.predicates {
            if key != &p.name || !ltl::is_valid_atom(&p.name) {
                return Err(ModelError::InvalidName(p.name.clone()));
            }
            if let Some(e) = &p.embedding {
                let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
                if !norm.is_finite() || (norm - 1.0).abs() > NORM_TOLERANCE {
                    return Err(ModelError::EmbeddingNorm {
                        name: p.name.clone(),
                        norm,
                    });
                }
            }
        }
        for (key, r) in &self.rules {
            let bad = |reason: String| ModelError::InvalidRule {
                id: r.id.clone(),
                reason,
            };
            if key != &r.id {
                return Err(bad(format!("stored under key '{key}'")));
            }
            if r.text.trim().is_empty() {
                return Err(bad("empty text".into()));
            }
            for p in &r.predicates {
                if !self.predicates.contains_key(p) {
                    return Err(bad(format!("references undeclared predicate '{p}'")));
                }
            }
            if r.predicates.windows(2).any(|w| w[0] >= w[1]) {
                return Err(bad("predicate list must be sorted and unique".into()));
            }
            for atom in r.formula.free_predicates() {
                if !r.predicates.contains(&atom) {
                    return Err(bad(format!("formula mentions '{atom}' outside its predicates")));
                }
            }
            let expected = rule_id(&r.formula, &r.predicates);
            if expected != r.id {
                return Err(bad(format!("content hash is {expected}")));
            }
            if self.classify_rule(r) != r.kind {
                return Err(bad(format!("kind {} contradicts its predicates", r.kind)));
            }
            if !r.weight.is_finite() {
                return Err(bad(format!("non-finite weight {}", r.weight)));
            }
            if let Some(v) = r.vagueness {
                if !(-1.0 - NORM_TOLERANCE..=1.0 + NORM_TOLERANCE).contains(&v) {
                    return Err(bad(format!("vagueness {v} outside [-1, 1]")));
                }
            }
        }
        for (key, c) in &self.circuits {
            let bad = |reason: String| ModelError::InvalidCircuit {
                action: c.action.clone(),
                reason,
            };
            if key != &c.action {
                return Err(bad(format!("stored under key '{key}'")));
            }
            if self.kind_of(&c.action) != Some(PredicateKind::Action) {
                return Err(bad("not a declared action predicate".into()));
            }
            if c.rule_ids.len() != c.weights.len() {
                return Err(bad("weights not aligned with rule ids".into()));
            }
            let mut seen = BTreeSet::new();
            for (id, w) in c.rule_ids.iter().zip(&c.weights) {
                if !self.rules.contains_key(id) {
                    return Err(bad(format!("unknown rule '{id}'")));
                }
                if !seen.insert(id) {
                    return Err(bad(format!("rule '{id}' listed twice")));
                }
                if !w.is_finite() {
                    return Err(bad(format!("non-finite weight for '{id}'")));
                }
            }
        }
        if self.is_assembled() {
            for r in self.rules.values() {
                for action in r.actions(self) {
                    let covered = self.circuits.get(&action).is_some_and(|c| c.rule_ids.contains(&r.id));
                    if !covered {
                        return Err(ModelError::InvalidCircuit {
                            action,
                            reason: format!("missing action rule '{}'", r.id),
                        });
                    }
                }
            }
        }
        if let Some(eps) = self.epsilon {
            if !eps.is_finite() {
                return Err(ModelError::InvalidRule {
                    id: "<model>".into(),
                    reason: "non-finite epsilon".into(),
                });
            }
        }
        Ok(())
    }

    // Draft mutation used by the optimizer, circuit builder and trainer.
    // Callers re-run `validate` before handing the model out.

    pub(crate) fn insert_predicate(&mut self, p: Predicate) {
        self.predicates.insert(p.name.clone(), p);
    }

    pub(crate) fn predicate_mut(&mut self, name: &str) -> Option<&mut Predicate> {
        self.predicates.get_mut(name)
    }

    pub(crate) fn remove_predicate(&mut self, name: &str) -> Option<Predicate> {
        self.predicates.shift_remove(name)
    }

    pub(crate) fn insert_rule(&mut self, r: Rule) {
        self.rules.insert(r.id.clone(), r);
    }

    pub(crate) fn remove_rule(&mut self, id: &str) -> Option<Rule> {
        self.rules.remove(id)
    }

    pub(crate) fn rule_mut(&mut self, id: &str) -> Option<&mut Rule> {
        self.rules.get_mut(id)
    }

    pub(crate) fn set_circuits(&mut self, circuits: Vec<Circuit>) {
        self.circuits = circuits.into_iter().map(|c| (c.action.clone(), c)).collect();
    }

    pub(crate) fn circuit_mut(&mut self, action: &str) -> Option<&mut Circuit> {
        self.circuits.get_mut(action)
    }

    /// Whether any rule references `name`.
    pub fn is_referenced(&self, name: &str) -> bool {
        self.rules.values().any(|r| r.predicates.iter().any(|p| p == name))
    }
}

/// Serializes a model into its JSON document form.
pub fn save_model(model: &PolicyModel) -> String {
    let doc = ModelDocument {
        version: MODEL_VERSION,
        predicates: model.predicates.values().cloned().collect(),
        rules: model.rules.values().cloned().collect(),
        circuits: model.circuits.values().cloned().collect(),
        provenance: model.provenance.clone(),
        epsilon: model.epsilon,
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("model document serializes");
    text.push('\n');
    text
}

/// Parses and validates a model document.
pub fn load_model(text: &str) -> Result<PolicyModel, ModelError> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    match value.get("version") {
        None | Some(serde_json::Value::Null) => return Err(ModelError::MissingVersion),
        Some(v) if v.as_u64() != Some(MODEL_VERSION as u64) => {
            return Err(ModelError::VersionMismatch {
                found: v.to_string(),
                expected: MODEL_VERSION,
            })
        }
        Some(_) => {}
    }
    let doc: ModelDocument = serde_json::from_value(value)?;
    let mut model = PolicyModel::from_parts(doc.predicates, doc.rules, doc.circuits, doc.provenance)?;
    model.epsilon = doc.epsilon;
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn demo_table() -> IndexMap<String, Predicate> {
        let mut t = IndexMap::new();
        for p in [
            Predicate::new("is_user_authorized", PredicateKind::State, "The user is authorized."),
            Predicate::new("delete_data", PredicateKind::Action, "Delete data.")
                .with_keywords(["delete", "remove", "erase"]),
            Predicate::new("is_private", PredicateKind::State, "The data is private."),
            Predicate::new("is_red_data", PredicateKind::State, "The data is red data."),
        ] {
            t.insert(p.name.clone(), p);
        }
        t
    }

    fn raw(preds: &[&str], logic: &str) -> RawRule {
        RawRule {
            predicates: preds
                .iter()
                .map(|n| RawPredicate {
                    name: n.to_string(),
                    description: String::new(),
                    keywords: vec![],
                    kind: None,
                })
                .collect(),
            logic: logic.into(),
            text: Some("some constraint".into()),
            reference: vec![],
            weight: None,
        }
    }

    fn demo_model() -> PolicyModel {
        let t = demo_table();
        let r1 = validate_rule(
            &raw(
                &["is_user_authorized", "delete_data"],
                "ALWAYS (NOT is_user_authorized IMPLIES NOT delete_data)",
            ),
            &t,
        )
        .unwrap();
        let r2 = validate_rule(
            &raw(&["is_private", "is_red_data"], "is_private IMPLIES is_red_data"),
            &t,
        )
        .unwrap();
        let circuit = Circuit {
            action: "delete_data".into(),
            rule_ids: vec![r1.id.clone(), r2.id.clone()],
            weights: vec![1.0, 1.0],
        };
        PolicyModel::from_parts(t.into_values().collect(), vec![r1, r2], vec![circuit], None).unwrap()
    }

    #[test]
    fn authorization_rule_is_action_rule() {
        let r = validate_rule(
            &raw(
                &["is_user_authorized", "delete_data"],
                "ALWAYS (NOT is_user_authorized IMPLIES NOT delete_data)",
            ),
            &demo_table(),
        )
        .unwrap();
        assert_eq!(r.kind, RuleKind::Action);
        assert_eq!(r.predicates, ["delete_data", "is_user_authorized"]);
    }

    #[test]
    fn red_data_rule_is_physical() {
        let r = validate_rule(
            &raw(&["is_private", "is_red_data"], "is_private IMPLIES is_red_data"),
            &demo_table(),
        )
        .unwrap();
        assert_eq!(r.kind, RuleKind::Physical);
    }

    #[test]
    fn undeclared_atom_is_named() {
        let err = validate_rule(&raw(&["is_private"], "is_private IMPLIES foo"), &demo_table()).unwrap_err();
        assert!(err.to_string().contains("foo"), "{err}");
        let err = validate_rule(&raw(&["foo"], "foo"), &demo_table()).unwrap_err();
        assert!(matches!(err, ModelError::UnknownPredicate(ref n) if n == "foo"));
    }

    #[test]
    fn empty_text_rejected() {
        let mut r = raw(&["is_private"], "is_private");
        r.text = Some("   ".into());
        assert!(matches!(validate_rule(&r, &demo_table()), Err(ModelError::EmptyText)));
    }

    #[test]
    fn rule_id_is_content_hash() {
        let f = parse_formula("a IMPLIES b").unwrap();
        let id1 = rule_id(&f, &["b".into(), "a".into()]);
        let id2 = rule_id(&f, &["a".into(), "b".into()]);
        assert_eq!(id1, id2);
        assert_ne!(
            id1,
            rule_id(&parse_formula("b IMPLIES a").unwrap(), &["a".into(), "b".into()])
        );
    }

    #[test]
    fn lookup_circuit_errors() {
        let m = demo_model();
        assert_eq!(m.lookup_circuit("delete_data").unwrap().rule_ids.len(), 2);
        assert!(matches!(
            m.lookup_circuit("is_private"),
            Err(ModelError::NotAnAction(_))
        ));
        assert!(matches!(m.lookup_circuit("nope"), Err(ModelError::UnknownPredicate(_))));
        let unassembled = PolicyModel::from_parts(
            m.predicates().cloned().collect(),
            m.rules().cloned().collect(),
            vec![],
            None,
        )
        .unwrap();
        assert!(matches!(
            unassembled.lookup_circuit("delete_data"),
            Err(ModelError::NoCircuit(_))
        ));
    }

    #[test]
    fn save_load_round_trip() {
        let mut m = demo_model();
        m.predicate_mut("is_private").unwrap().embedding = Some(vec![0.6, 0.8]);
        m.circuit_mut("delete_data").unwrap().weights = vec![0.1 + 0.2, -1.0 / 3.0];
        m.provenance = Some(vec![StructuredPolicy {
            definition: vec!["red data: most sensitive".into()],
            scope: None,
            policy_description: "Only authorized users may delete data.".into(),
            reference: vec!["handbook/security".into()],
        }]);
        m.epsilon = Some(0.05);
        let text = save_model(&m);
        let back = load_model(&text).unwrap();
        assert_eq!(back, m);
        let w = back.lookup_circuit("delete_data").unwrap().weights.clone();
        assert_eq!(w[0].to_bits(), (0.1f64 + 0.2).to_bits());
        assert_eq!(w[1].to_bits(), (-1.0f64 / 3.0).to_bits());
        assert_eq!(save_model(&back), text);
    }

    #[test]
    fn missing_version_rejected() {
        let text = save_model(&demo_model());
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v.as_object_mut().unwrap().remove("version");
        assert!(matches!(load_model(&v.to_string()), Err(ModelError::MissingVersion)));
        v["version"] = serde_json::json!(99);
        assert!(matches!(
            load_model(&v.to_string()),
            Err(ModelError::VersionMismatch { .. })
        ));
    }

    #[test]
    fn tampered_weight_rejected() {
        let text = save_model(&demo_model());
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["rules"][0]["weight"] = serde_json::json!("NaN");
        assert!(load_model(&v.to_string()).is_err());
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["circuits"][0]["weights"][0] = serde_json::json!("NaN");
        assert!(load_model(&v.to_string()).is_err());
    }

    #[test]
    fn tampered_logic_breaks_content_hash() {
        let text = save_model(&demo_model());
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let rules = v["rules"].as_array_mut().unwrap();
        let idx = rules
            .iter()
            .position(|r| r["logic"] == "(is_private IMPLIES is_red_data)")
            .unwrap();
        rules[idx]["logic"] = serde_json::json!("(is_red_data IMPLIES is_private)");
        assert!(matches!(
            load_model(&v.to_string()),
            Err(ModelError::InvalidRule { .. })
        ));
    }

    #[test]
    fn assembled_model_must_cover_action_rules() {
        let m = demo_model();
        let r = m.rules().cloned().collect::<Vec<_>>();
        let physical = r.iter().find(|r| r.kind == RuleKind::Physical).unwrap();
        let circuit = Circuit {
            action: "delete_data".into(),
            rule_ids: vec![physical.id.clone()],
            weights: vec![1.0],
        };
        let err = PolicyModel::from_parts(m.predicates().cloned().collect(), r, vec![circuit], None).unwrap_err();
        assert!(matches!(err, ModelError::InvalidCircuit { .. }));
    }

    #[test]
    fn embedding_norm_checked() {
        let mut t = demo_table();
        t.get_mut("is_private").unwrap().embedding = Some(vec![1.0, 1.0]);
        let err = PolicyModel::from_parts(t.into_values().collect(), vec![], vec![], None).unwrap_err();
        assert!(matches!(err, ModelError::EmbeddingNorm { .. }));
    }

    #[test]
    fn raw_predicate_forms() {
        let short: RawPredicate = serde_json::from_str(r#"["delete_data", "Delete data.", ["delete"]]"#).unwrap();
        assert_eq!(short.kind, None);
        assert_eq!(short.resolved_kind(), PredicateKind::Action);
        let full: RawPredicate = serde_json::from_str(r#"["data_is_harmful", "d", [], "state"]"#).unwrap();
        assert_eq!(full.kind, Some(PredicateKind::State));
        let obj: RawPredicate = serde_json::from_str(r#"{"name": "is_private", "description": "d"}"#).unwrap();
        assert_eq!(obj.resolved_kind(), PredicateKind::State);
    }

    #[test]
    fn kind_inference() {
        assert_eq!(infer_kind("is_user_authorized"), PredicateKind::State);
        assert_eq!(infer_kind("data_is_harmful"), PredicateKind::State);
        assert_eq!(infer_kind("has_consent"), PredicateKind::State);
        assert_eq!(infer_kind("delete_data"), PredicateKind::Action);
        assert_eq!(infer_kind("publish_content"), PredicateKind::Action);
    }

    proptest! {
        // Classification depends only on the kinds of the formula's atoms.
        #[test]
        fn classify_depends_only_on_atom_kinds(kinds in proptest::collection::vec(any::<bool>(), 4), perm in Just(vec![0usize,1,2,3]).prop_shuffle()) {
            let names = ["p0", "p1", "p2", "p3"];
            let kind = |i: usize| if kinds[i] { PredicateKind::Action } else { PredicateKind::State };
            let f = parse_formula("ALWAYS ((p0 AND p1) IMPLIES (p2 UNTIL p3))").unwrap();
            let direct = classify_formula(&f, |n| names.iter().position(|m| *m == n).map(kind));
            // Relabel atoms by a permutation and permute the kinds the same way.
            let g = f.map_atoms(&|n| {
                let i = names.iter().position(|m| *m == n).unwrap();
                names[perm[i]].to_string()
            });
            let permuted = classify_formula(&g, |n| {
                let j = names.iter().position(|m| *m == n)?;
                let i = perm.iter().position(|&x| x == j).unwrap();
                Some(kind(i))
            });
            prop_assert_eq!(direct, permuted);
            let expected = if kinds.iter().any(|&k| k) { RuleKind::Action } else { RuleKind::Physical };
            prop_assert_eq!(direct, expected);
        }
    }
}
