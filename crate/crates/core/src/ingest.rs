//! Two-stage extraction: documents to structured policies, policies to rules.

use std::cell::Cell;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbeddingError, EmbeddingProvider};
use crate::ltl::{is_valid_atom, parse_formula};
use crate::model::{validate_rule, ModelError, PolicyModel, Predicate, RawRule, Rule, StructuredPolicy};
use crate::prompts;
use crate::provider::{GenerationProvider, ProviderError};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("empty input")]
    EmptyInput,
    #[error("provider call budget of {0} exhausted")]
    BudgetExhausted(usize),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    /// Organization name substituted into the extraction prompt.
    pub organization: String,
    /// Maximum characters per document chunk sent to the provider.
    pub chunk_chars: usize,
    /// Re-prompts allowed after an unparseable completion.
    pub repair_retries: usize,
    /// Maximum provider calls for one run.
    pub budget: usize,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            organization: "the organization".to_string(),
            chunk_chars: 6000,
            repair_retries: 2,
            budget: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejected {
    pub stage: String,
    pub raw: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub policies: usize,
    pub rules: usize,
    /// Records returned by the provider, accepted or not.
    pub records: usize,
    pub rejected: Vec<Rejected>,
    pub provider_calls: usize,
}

impl IngestReport {
    pub fn accepted(&self) -> usize {
        self.records - self.rejected.len()
    }

    fn reject(&mut self, stage: &str, raw: impl Into<String>, error: impl ToString) {
        self.records += 1;
        self.rejected.push(Rejected {
            stage: stage.to_string(),
            raw: raw.into(),
            error: error.to_string(),
        });
    }

    /// Moves an already-counted rule record into the rejected list.
    fn demote(&mut self, raw: impl Into<String>, error: impl ToString) {
        self.rules = self.rules.saturating_sub(1);
        self.rejected.push(Rejected {
            stage: "rule".to_string(),
            raw: raw.into(),
            error: error.to_string(),
        });
    }

    pub fn absorb(&mut self, other: IngestReport) {
        self.policies += other.policies;
        self.rules += other.rules;
        self.records += other.records;
        self.rejected.extend(other.rejected);
        self.provider_calls += other.provider_calls;
    }
}

/// Counts calls against the configured budget.
struct Calls<'a> {
    provider: &'a dyn GenerationProvider,
    budget: usize,
    used: Cell<usize>,
}

impl Calls<'_> {
    fn complete(&self, system: &str, user: &str) -> Result<String, IngestError> {
        if self.used.get() >= self.budget {
            return Err(IngestError::BudgetExhausted(self.budget));
        }
        self.used.set(self.used.get() + 1);
        Ok(self.provider.complete(system, user)?)
    }
}

/// Asks for a JSON array, re-prompting with the parse error on failure.
///
/// Returns the array elements, or the last completion and error once the
/// repair budget is spent.
fn request_array(
    calls: &Calls<'_>,
    system: &str,
    user: &str,
    retries: usize,
) -> Result<Result<Vec<serde_json::Value>, (String, String)>, IngestError> {
    let mut prompt = user.to_string();
    let mut last = (String::new(), String::new());
    for _ in 0..=retries {
        let completion = calls.complete(system, &prompt)?;
        match parse_array(&completion) {
            Ok(items) => return Ok(Ok(items)),
            Err(e) => {
                prompt = prompts::repair(user, &e);
                last = (completion, e);
            }
        }
    }
    Ok(Err(last))
}

fn parse_array(completion: &str) -> Result<Vec<serde_json::Value>, String> {
    let json = prompts::extract_json(completion).ok_or("no JSON found")?;
    match serde_json::from_str::<serde_json::Value>(json) {
        Ok(serde_json::Value::Array(items)) => Ok(items),
        Ok(_) => Err("expected a JSON array".to_string()),
        Err(e) => Err(format!("invalid JSON: {e}")),
    }
}

/// Splits text into chunks of at most `max_chars` on paragraph boundaries.
///
/// A single paragraph longer than the limit is cut at character boundaries.
pub fn chunk_document(text: &str, max_chars: usize) -> Vec<String> {
    let max_chars = max_chars.max(1);
    let mut chunks = Vec::new();
    let mut current = String::new();
    for para in text.split("\n\n").map(str::trim).filter(|p| !p.is_empty()) {
        let para_len = para.chars().count();
        if !current.is_empty() && current.chars().count() + 2 + para_len > max_chars {
            chunks.push(std::mem::take(&mut current));
        }
        if para_len > max_chars {
            let chars: Vec<char> = para.chars().collect();
            for piece in chars.chunks(max_chars) {
                chunks.push(piece.iter().collect());
            }
            continue;
        }
        if !current.is_empty() {
            current.push_str("\n\n");
        }
        current.push_str(para);
    }
    if !current.is_empty() {
        chunks.push(current);
    }
    chunks
}

fn check_policy(value: &serde_json::Value) -> Result<StructuredPolicy, String> {
    let obj = value.as_object().ok_or("policy record is not an object")?;
    for key in obj.keys() {
        if !["definition", "scope", "policy_description", "reference"].contains(&key.as_str()) {
            return Err(format!("unexpected field '{key}'"));
        }
    }
    let policy: StructuredPolicy = serde_json::from_value(value.clone()).map_err(|e| e.to_string())?;
    if policy.policy_description.trim().is_empty() {
        return Err("policy_description is empty".to_string());
    }
    Ok(StructuredPolicy {
        scope: policy.scope.filter(|s| !s.trim().is_empty() && s.trim() != "None"),
        ..policy
    })
}

/// Extracts structured policies from one document.
pub fn extract_policies(
    document: &str,
    provider: &dyn GenerationProvider,
    config: &IngestConfig,
) -> Result<(Vec<StructuredPolicy>, IngestReport), IngestError> {
    let calls = Calls {
        provider,
        budget: config.budget,
        used: Cell::new(0),
    };
    let out = policies_with(&calls, document, config);
    finish(out, &calls)
}

fn finish<T>(out: Result<(T, IngestReport), IngestError>, calls: &Calls<'_>) -> Result<(T, IngestReport), IngestError> {
    let (value, mut report) = out?;
    report.provider_calls = calls.used.get();
    Ok((value, report))
}

fn policies_with(
    calls: &Calls<'_>,
    document: &str,
    config: &IngestConfig,
) -> Result<(Vec<StructuredPolicy>, IngestReport), IngestError> {
    if document.trim().is_empty() {
        return Err(IngestError::EmptyInput);
    }
    let mut report = IngestReport::default();
    let mut policies = Vec::new();
    for chunk in chunk_document(document, config.chunk_chars) {
        let user = prompts::policy_extraction(&config.organization, &chunk);
        match request_array(calls, prompts::POLICY_EXTRACTION_SYSTEM, &user, config.repair_retries)? {
            Ok(items) => {
                for item in items {
                    match check_policy(&item) {
                        Ok(p) => {
                            report.records += 1;
                            policies.push(p);
                        }
                        Err(e) => report.reject("policy", item.to_string(), e),
                    }
                }
            }
            Err((raw, e)) => report.reject("policy", raw, e),
        }
    }
    report.policies = policies.len();
    Ok((policies, report))
}

/// Checks one extracted rule record on its own terms: names, logic and
/// that the logic only mentions declared predicates.
fn check_rule_record(value: &serde_json::Value, policy: &StructuredPolicy) -> Result<RawRule, String> {
    let mut raw: RawRule = serde_json::from_value(value.clone()).map_err(|e| e.to_string())?;
    if raw.predicates.is_empty() {
        return Err("rule declares no predicates".to_string());
    }
    for p in &raw.predicates {
        if !is_valid_atom(&p.name) {
            return Err(format!("invalid predicate name '{}'", p.name));
        }
    }
    let formula = parse_formula(&raw.logic).map_err(|e| e.to_string())?;
    for atom in formula.free_predicates() {
        if !raw.predicates.iter().any(|p| p.name == atom) {
            return Err(format!("logic mentions undeclared predicate '{atom}'"));
        }
    }
    if raw.text.as_deref().is_none_or(|t| t.trim().is_empty()) {
        raw.text = Some(policy.policy_description.clone());
    }
    if raw.reference.is_empty() {
        raw.reference = policy.reference.clone();
    }
    Ok(raw)
}

/// Translates one policy into raw rule records.
pub fn extract_rules(
    policy: &StructuredPolicy,
    provider: &dyn GenerationProvider,
    config: &IngestConfig,
) -> Result<(Vec<RawRule>, IngestReport), IngestError> {
    let calls = Calls {
        provider,
        budget: config.budget,
        used: Cell::new(0),
    };
    let out = rules_with(&calls, policy, config);
    finish(out, &calls)
}

fn rules_with(
    calls: &Calls<'_>,
    policy: &StructuredPolicy,
    config: &IngestConfig,
) -> Result<(Vec<RawRule>, IngestReport), IngestError> {
    let mut report = IngestReport::default();
    let mut rules = Vec::new();
    let user = prompts::policy_to_ltl(policy);
    match request_array(calls, prompts::POLICY_TO_LTL_SYSTEM, &user, config.repair_retries)? {
        Ok(items) => {
            for item in items {
                match check_rule_record(&item, policy) {
                    Ok(r) => {
                        report.records += 1;
                        rules.push(r);
                    }
                    Err(e) => report.reject("rule", item.to_string(), e),
                }
            }
        }
        Err((raw, e)) => report.reject("rule", raw, e),
    }
    report.rules = rules.len();
    Ok((rules, report))
}

/// Adds raw rules to a draft, declaring new predicates on first sight.
///
/// A record whose predicates clash with an existing declaration of a
/// different kind is rejected. Rules with an id already present merge their
/// references into the existing rule.
pub fn add_raw_rules(
    predicates: &mut IndexMap<String, Predicate>,
    rules: &mut IndexMap<String, Rule>,
    raw_rules: &[RawRule],
    report: &mut IngestReport,
) {
    for raw in raw_rules {
        let mut staged = predicates.clone();
        let mut conflict = None;
        for rp in &raw.predicates {
            let p = rp.to_predicate();
            match staged.get(&p.name) {
                Some(existing) if existing.kind != p.kind => {
                    conflict = Some(format!(
                        "predicate '{}' declared as {} but already {}",
                        p.name, p.kind, existing.kind
                    ));
                    break;
                }
                Some(_) => {}
                None => {
                    staged.insert(p.name.clone(), p);
                }
            }
        }
        if let Some(e) = conflict {
            report.demote(serde_json::to_string(raw).unwrap_or_default(), e);
            continue;
        }
        match validate_rule(raw, &staged) {
            Ok(rule) => {
                *predicates = staged;
                match rules.get_mut(&rule.id) {
                    Some(existing) => {
                        for r in rule.reference {
                            if !existing.reference.contains(&r) {
                                existing.reference.push(r);
                            }
                        }
                    }
                    None => {
                        rules.insert(rule.id.clone(), rule);
                    }
                }
            }
            Err(e) => {
                report.demote(serde_json::to_string(raw).unwrap_or_default(), e);
            }
        }
    }
}

/// Runs both extraction stages over `documents` and builds an unoptimized
/// model. Predicate embeddings are attached when an embedder is given.
pub fn build_model(
    documents: &[String],
    provider: &dyn GenerationProvider,
    embedder: Option<&dyn EmbeddingProvider>,
    config: &IngestConfig,
) -> Result<(PolicyModel, IngestReport), IngestError> {
    if documents.is_empty() || documents.iter().all(|d| d.trim().is_empty()) {
        return Err(IngestError::EmptyInput);
    }
    let calls = Calls {
        provider,
        budget: config.budget,
        used: Cell::new(0),
    };
    let mut report = IngestReport::default();
    let mut all_policies = Vec::new();
    for doc in documents {
        if doc.trim().is_empty() {
            continue;
        }
        let (policies, r) = policies_with(&calls, doc, config)?;
        report.absorb(r);
        all_policies.extend(policies);
    }
    let mut predicates = IndexMap::new();
    let mut rules = IndexMap::new();
    for policy in &all_policies {
        let (raw_rules, r) = rules_with(&calls, policy, config)?;
        report.absorb(r);
        add_raw_rules(&mut predicates, &mut rules, &raw_rules, &mut report);
    }
    if let Some(embedder) = embedder {
        for p in predicates.values_mut() {
            p.embedding = Some(embedder.embed_predicate(p)?);
        }
    }
    report.provider_calls = calls.used.get();
    let model = PolicyModel::from_parts(
        predicates.into_values().collect(),
        rules.into_values().collect(),
        Vec::new(),
        Some(all_policies),
    )?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::FixtureProvider;

    fn policy() -> StructuredPolicy {
        StructuredPolicy {
            definition: vec![],
            scope: None,
            policy_description: "Only authorized users may delete data.".into(),
            reference: vec!["Handbook: Access".into()],
        }
    }

    #[test]
    fn empty_document_is_rejected() {
        let p = FixtureProvider::new();
        assert!(matches!(
            extract_policies("  \n", &p, &IngestConfig::default()),
            Err(IngestError::EmptyInput)
        ));
    }

    #[test]
    fn chunking_respects_paragraphs() {
        let text = "aaaa\n\nbbbb\n\ncccc";
        assert_eq!(chunk_document(text, 10), vec!["aaaa\n\nbbbb", "cccc"]);
        assert_eq!(chunk_document("abcdefgh", 3), vec!["abc", "def", "gh"]);
        assert_eq!(chunk_document(text, 100).len(), 1);
    }

    #[test]
    fn non_schema_output_is_rejected_after_repairs() {
        let doc = "Only authorized users may delete data.";
        let config = IngestConfig {
            repair_retries: 1,
            ..IngestConfig::default()
        };
        let mut p = FixtureProvider::new();
        let user = prompts::policy_extraction(&config.organization, doc);
        p.insert(prompts::POLICY_EXTRACTION_SYSTEM, &user, "I cannot help.");
        let repaired = prompts::repair(&user, "no JSON found");
        p.insert(prompts::POLICY_EXTRACTION_SYSTEM, &repaired, "Still no.");
        let (policies, report) = extract_policies(doc, &p, &config).unwrap();
        assert!(policies.is_empty());
        assert_eq!(report.rejected.len(), 1);
        assert_eq!(report.provider_calls, 2);
        assert_eq!(report.accepted() + report.rejected.len(), report.records);
    }

    #[test]
    fn repair_prompt_recovers() {
        let doc = "Only authorized users may delete data.";
        let config = IngestConfig::default();
        let mut p = FixtureProvider::new();
        let user = prompts::policy_extraction(&config.organization, doc);
        p.insert(prompts::POLICY_EXTRACTION_SYSTEM, &user, "oops");
        let repaired = prompts::repair(&user, "no JSON found");
        p.insert(
            prompts::POLICY_EXTRACTION_SYSTEM,
            &repaired,
            r#"[{"definition": null, "scope": "None", "policy_description": "Only authorized users may delete data.", "reference": []}]"#,
        );
        let (policies, report) = extract_policies(doc, &p, &config).unwrap();
        assert_eq!(policies.len(), 1);
        assert_eq!(policies[0].scope, None);
        assert_eq!(report.provider_calls, 2);
    }

    #[test]
    fn malformed_logic_is_rejected_with_offset() {
        let config = IngestConfig::default();
        let mut p = FixtureProvider::new();
        let completion = r#"```json
[
  {"predicates": [["is_user_authorized", "User is authorized.", ["authorized"]], ["delete_data", "Delete data.", ["delete"]]],
   "logic": "ALWAYS (NOT is_user_authorized IMPLIES NOT delete_data)"},
  {"predicates": [["delete_data", "Delete data.", ["delete"]]],
   "logic": "delete_data AND"}
]
```"#;
        p.insert(
            prompts::POLICY_TO_LTL_SYSTEM,
            &prompts::policy_to_ltl(&policy()),
            completion,
        );
        let (rules, report) = extract_rules(&policy(), &p, &config).unwrap();
        assert_eq!(rules.len(), 1);
        assert_eq!(report.rejected.len(), 1);
        assert!(
            report.rejected[0].error.contains("offset 15"),
            "{}",
            report.rejected[0].error
        );
        assert_eq!(rules[0].text.as_deref(), Some("Only authorized users may delete data."));
        assert_eq!(rules[0].reference, vec!["Handbook: Access".to_string()]);
    }

    #[test]
    fn budget_is_never_exceeded() {
        let config = IngestConfig {
            budget: 1,
            repair_retries: 3,
            ..IngestConfig::default()
        };
        let doc = "text";
        let mut p = FixtureProvider::new();
        let user = prompts::policy_extraction(&config.organization, doc);
        p.insert(prompts::POLICY_EXTRACTION_SYSTEM, &user, "bad");
        assert!(matches!(
            extract_policies(doc, &p, &config),
            Err(IngestError::BudgetExhausted(1))
        ));
    }

    #[test]
    fn kind_conflicts_are_rejected() {
        let mut preds = IndexMap::new();
        let mut rules = IndexMap::new();
        let mut report = IngestReport::default();
        let first: RawRule = serde_json::from_str(
            r#"{"predicates": [["delete_data", "d", []]], "logic": "NOT delete_data", "text": "t"}"#,
        )
        .unwrap();
        let second: RawRule = serde_json::from_str(
            r#"{"predicates": [["delete_data", "d", [], "state"]], "logic": "delete_data", "text": "t"}"#,
        )
        .unwrap();
        report.records = 2;
        report.rules = 2;
        add_raw_rules(&mut preds, &mut rules, &[first, second], &mut report);
        assert_eq!(rules.len(), 1);
        assert_eq!(report.rejected.len(), 1);
        assert_eq!(report.records, 2);
        assert_eq!(report.rules, 1);
    }
}
