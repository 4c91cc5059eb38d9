//! Runtime guardrail: checks one agent step against the circuits of the
//! actions it invokes and produces a [`Verdict`].
//!
//! Per invoked action the shield retrieves the circuit, assigns the circuit's
//! state predicates through tool calls (at most two planning passes), checks
//! every rule over the whole trace and compares the proposed world with the
//! one where the action is withheld at the final step. A predicate that stays
//! unassigned makes the action unsafe.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ltl::{evaluate, EvalError, Trace};
use crate::mln::{decide, margin_from_score_sets, score_from_bits, MlnError, SafetyConfig};
use crate::model::{ModelError, PolicyModel, Predicate, PredicateKind, Rule};

#[derive(Debug, Error)]
pub enum ShieldError {
    #[error("trajectory line {line}: {message}")]
    Trajectory { line: usize, message: String },
    #[error("predicate '{0}' has no description and cannot be verified")]
    Unverifiable(String),
    #[error("rule {rule}: {source}")]
    Eval {
        rule: String,
        #[source]
        source: EvalError,
    },
    #[error(transparent)]
    Mln(#[from] MlnError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One observation/action pair of an agent trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub observation: String,
    pub action: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub assignments: BTreeMap<String, bool>,
}

impl TrajectoryStep {
    pub fn new(observation: impl Into<String>, action: impl Into<String>) -> Self {
        TrajectoryStep {
            observation: observation.into(),
            action: action.into(),
            assignments: BTreeMap::new(),
        }
    }
}

/// Parses line-delimited trajectory steps, skipping blank lines.
pub fn read_trajectory(reader: impl BufRead) -> Result<Vec<TrajectoryStep>, ShieldError> {
    let mut steps = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let err = |message: String| ShieldError::Trajectory { line: i + 1, message };
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let step: TrajectoryStep = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        if step.action.trim().is_empty() {
            return Err(err("action text is empty".into()));
        }
        steps.push(step);
    }
    if steps.is_empty() {
        return Err(ShieldError::Trajectory {
            line: 0,
            message: "trajectory has no steps".into(),
        });
    }
    Ok(steps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operation {
    Search,
    BinaryCheck,
    Detect,
    FormalVerify,
}

impl std::fmt::Display for Operation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Operation::Search => "search",
            Operation::BinaryCheck => "binary_check",
            Operation::Detect => "detect",
            Operation::FormalVerify => "formal_verify",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub operation: Operation,
    pub query: String,
    pub targets: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShieldingPlan {
    pub steps: Vec<PlanStep>,
}

impl ShieldingPlan {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn targets(&self) -> BTreeSet<&str> {
        self.steps
            .iter()
            .flat_map(|s| s.targets.iter().map(String::as_str))
            .collect()
    }
}

/// A plan that completed a verification, kept for reuse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workflow {
    pub key: String,
    pub action: String,
    pub plan: ShieldingPlan,
    pub success_count: u64,
    /// Logical clock value of the last commit.
    pub last_used: u64,
}

/// Memory key of an action with a given set of circuit rules.
pub fn workflow_key(action: &str, rule_ids: &[String]) -> String {
    let mut ids: Vec<&str> = rule_ids.iter().map(String::as_str).collect();
    ids.sort_unstable();
    ids.dedup();
    let digest = Sha256::digest(ids.join(",").as_bytes());
    format!("{action}:{}", &hex::encode(digest)[..16])
}

/// What the shield remembers about an already verified step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub observation: String,
    pub action: String,
    pub actions: Vec<String>,
    pub assignments: BTreeMap<String, bool>,
}

fn default_capacity() -> usize {
    256
}

/// Short-term cache per trajectory plus a capped long-term workflow store.
/// Only the long-term part is serialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Memory {
    #[serde(default = "default_capacity")]
    pub capacity: usize,
    #[serde(default)]
    clock: u64,
    #[serde(default)]
    workflows: IndexMap<String, Workflow>,
    #[serde(skip)]
    short_term: BTreeMap<String, Vec<StepRecord>>,
    #[serde(skip)]
    committed: BTreeSet<(String, String)>,
}

impl Default for Memory {
    fn default() -> Self {
        Memory::new(default_capacity())
    }
}

impl Memory {
    pub fn new(capacity: usize) -> Self {
        Memory {
            capacity: capacity.max(1),
            clock: 0,
            workflows: IndexMap::new(),
            short_term: BTreeMap::new(),
            committed: BTreeSet::new(),
        }
    }

    pub fn workflows(&self) -> impl Iterator<Item = &Workflow> {
        self.workflows.values()
    }

    pub fn workflow(&self, key: &str) -> Option<&Workflow> {
        self.workflows.get(key)
    }

    /// Exact key first, else the most successful workflow for the same
    /// action (ties: most recently used).
    pub fn retrieve_workflow(&self, action: &str, rule_ids: &[String]) -> Option<&Workflow> {
        let key = workflow_key(action, rule_ids);
        self.workflows.get(&key).or_else(|| {
            self.workflows
                .values()
                .filter(|w| w.action == action)
                .max_by_key(|w| (w.success_count, w.last_used))
        })
    }

    /// Records a successful verification. Repeated commits of the same key
    /// within one trajectory count once. Returns whether anything changed.
    pub fn commit(&mut self, action: &str, rule_ids: &[String], plan: &ShieldingPlan, trajectory: &str) -> bool {
        let key = workflow_key(action, rule_ids);
        if !self.committed.insert((key.clone(), trajectory.to_string())) {
            return false;
        }
        self.clock += 1;
        let clock = self.clock;
        let entry = self.workflows.entry(key.clone()).or_insert_with(|| Workflow {
            key,
            action: action.to_string(),
            plan: plan.clone(),
            success_count: 0,
            last_used: clock,
        });
        entry.success_count += 1;
        entry.last_used = clock;
        if !plan.is_empty() {
            entry.plan = plan.clone();
        }
        while self.workflows.len() > self.capacity {
            let oldest = self
                .workflows
                .values()
                .min_by_key(|w| w.last_used)
                .map(|w| w.key.clone())
                .expect("non-empty store");
            self.workflows.shift_remove(&oldest);
        }
        true
    }

    pub fn short_term(&self, trajectory: &str) -> &[StepRecord] {
        self.short_term.get(trajectory).map_or(&[], Vec::as_slice)
    }

    pub fn remember(&mut self, trajectory: &str, record: StepRecord) {
        self.short_term.entry(trajectory.to_string()).or_default().push(record);
    }

    /// Ends a trajectory: drops its short-term entries. Long-term workflows
    /// are kept.
    pub fn gc(&mut self, trajectory: &str) {
        self.short_term.remove(trajectory);
        self.committed.retain(|(_, t)| t != trajectory);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ToolError {
    #[error("{0} is not supported by this tool provider")]
    Unsupported(Operation),
    #[error("no {operation} answer for '{predicate}'")]
    NoAnswer { operation: Operation, predicate: String },
    #[error("{operation} failed for '{predicate}': {message}")]
    Failed {
        operation: Operation,
        predicate: String,
        message: String,
    },
}

/// Context handed to every tool call.
#[derive(Debug, Clone, Copy)]
pub struct ToolRequest<'a> {
    pub predicate: &'a str,
    pub query: &'a str,
    pub observation: &'a str,
    pub action: &'a str,
    pub history: &'a [TrajectoryStep],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckAnswer {
    pub value: bool,
    pub confidence: f64,
}

/// Verification tools used to assign state predicates.
pub trait ToolProvider {
    fn search(&self, request: &ToolRequest<'_>) -> Result<Vec<String>, ToolError>;
    fn binary_check(&self, request: &ToolRequest<'_>) -> Result<CheckAnswer, ToolError>;
    /// Risk categories flagged in `content`.
    fn detect(&self, request: &ToolRequest<'_>, content: &str) -> Result<Vec<String>, ToolError>;
}

impl<T: ToolProvider + ?Sized> ToolProvider for &T {
    fn search(&self, request: &ToolRequest<'_>) -> Result<Vec<String>, ToolError> {
        (**self).search(request)
    }
    fn binary_check(&self, request: &ToolRequest<'_>) -> Result<CheckAnswer, ToolError> {
        (**self).binary_check(request)
    }
    fn detect(&self, request: &ToolRequest<'_>, content: &str) -> Result<Vec<String>, ToolError> {
        (**self).detect(request, content)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRule {
    pub predicate: String,
    /// Answer when `contains` is absent or found in the step context.
    #[serde(default)]
    pub value: bool,
    /// Case-insensitive substring looked up in the observation and action.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    /// Answer when `contains` is given but not found.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub otherwise: Option<bool>,
    #[serde(default = "full_confidence")]
    pub confidence: f64,
}

fn full_confidence() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchRule {
    pub predicate: String,
    /// Case-insensitive substring matched against past observations and
    /// actions; every matching entry is returned.
    pub contains: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectedFailure {
    pub operation: Operation,
    /// Restricts the failure to one predicate; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicate: Option<String>,
}

/// Deterministic tools driven by a JSON description.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureTools {
    pub binary_check: Vec<CheckRule>,
    pub search: Vec<SearchRule>,
    /// Category name to trigger words.
    pub detect: BTreeMap<String, Vec<String>>,
    pub failures: Vec<InjectedFailure>,
}

impl FixtureTools {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    fn injected(&self, operation: Operation, predicate: &str) -> Result<(), ToolError> {
        let hit = self
            .failures
            .iter()
            .any(|f| f.operation == operation && f.predicate.as_deref().is_none_or(|p| p == predicate));
        if hit {
            return Err(ToolError::Failed {
                operation,
                predicate: predicate.to_string(),
                message: "injected failure".into(),
            });
        }
        Ok(())
    }
}

fn contains_ci(haystack: &str, needle: &str) -> bool {
    haystack.to_lowercase().contains(&needle.to_lowercase())
}

impl ToolProvider for FixtureTools {
    fn search(&self, request: &ToolRequest<'_>) -> Result<Vec<String>, ToolError> {
        self.injected(Operation::Search, request.predicate)?;
        let rule = self
            .search
            .iter()
            .find(|r| r.predicate == request.predicate)
            .ok_or_else(|| ToolError::NoAnswer {
                operation: Operation::Search,
                predicate: request.predicate.to_string(),
            })?;
        Ok(request
            .history
            .iter()
            .flat_map(|s| [&s.observation, &s.action])
            .filter(|text| contains_ci(text, &rule.contains))
            .cloned()
            .collect())
    }

    fn binary_check(&self, request: &ToolRequest<'_>) -> Result<CheckAnswer, ToolError> {
        self.injected(Operation::BinaryCheck, request.predicate)?;
        let rule = self
            .binary_check
            .iter()
            .find(|r| r.predicate == request.predicate)
            .ok_or_else(|| ToolError::NoAnswer {
                operation: Operation::BinaryCheck,
                predicate: request.predicate.to_string(),
            })?;
        let value = match &rule.contains {
            None => rule.value,
            Some(needle) => {
                if contains_ci(request.observation, needle) || contains_ci(request.action, needle) {
                    rule.value
                } else {
                    rule.otherwise.unwrap_or(!rule.value)
                }
            }
        };
        Ok(CheckAnswer {
            value,
            confidence: rule.confidence,
        })
    }

    fn detect(&self, request: &ToolRequest<'_>, content: &str) -> Result<Vec<String>, ToolError> {
        self.injected(Operation::Detect, request.predicate)?;
        Ok(self
            .detect
            .iter()
            .filter(|(_, words)| words.iter().any(|w| contains_ci(content, w)))
            .map(|(category, _)| category.clone())
            .collect())
    }
}

/// The executable part of an action text: its last non-empty line.
pub fn executable_part(action_text: &str) -> &str {
    action_text
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or("")
}

fn keyword_matches(keyword: &str, words: &BTreeSet<String>) -> bool {
    let parts: Vec<String> = keyword
        .split(|c: char| !c.is_alphanumeric())
        .filter(|p| !p.is_empty())
        .map(str::to_lowercase)
        .collect();
    !parts.is_empty()
        && parts.iter().all(|part| {
            words
                .iter()
                .any(|w| w == part || (part.len() >= 4 && w.starts_with(part.as_str())))
        })
}

/// Action predicates invoked by an action text, in model declaration order.
///
/// The executable line is split into identifiers and words; a predicate
/// matches on its own name or on any keyword (every word of a multi-word
/// keyword must occur; keywords of four or more letters also match as
/// prefixes, so `delete` matches `deleted`).
pub fn extract_action_predicates(action_text: &str, model: &PolicyModel) -> Vec<String> {
    let exec = executable_part(action_text);
    let identifiers: BTreeSet<String> = exec
        .split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect();
    let words: BTreeSet<String> = exec
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect();
    model
        .action_predicates()
        .filter(|p| {
            identifiers.contains(&p.name.to_lowercase()) || p.keywords.iter().any(|k| keyword_matches(k, &words))
        })
        .map(|p| p.name.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    /// Risk categories a Detect call can flag. Predicates with a keyword
    /// among them are assigned by Detect.
    pub risk_categories: Vec<String>,
    /// Description words that make a predicate depend on history, assigned
    /// by Search.
    pub history_markers: Vec<String>,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            risk_categories: [
                "harm",
                "hate",
                "violence",
                "sexual",
                "self_harm",
                "malware",
                "harassment",
            ]
            .map(String::from)
            .to_vec(),
            history_markers: ["previous", "prior", "has the user", "earlier", "history", "already"]
                .map(String::from)
                .to_vec(),
        }
    }
}

fn template_step(p: &Predicate, config: &PlannerConfig) -> Result<PlanStep, ShieldError> {
    let description = p.description.trim();
    if description.is_empty() {
        return Err(ShieldError::Unverifiable(p.name.clone()));
    }
    let lower = description.to_lowercase();
    let (operation, query) = if config.history_markers.iter().any(|m| lower.contains(&m.to_lowercase())) {
        (Operation::Search, description.to_string())
    } else if p
        .keywords
        .iter()
        .any(|k| config.risk_categories.iter().any(|c| c.eq_ignore_ascii_case(k)))
    {
        (Operation::Detect, description.to_string())
    } else {
        (
            Operation::BinaryCheck,
            format!("Does the context satisfy: {description}?"),
        )
    };
    Ok(PlanStep {
        operation,
        query,
        targets: vec![p.name.clone()],
    })
}

/// Plan assigning every predicate in `unassigned`.
///
/// Steps of a retrieved workflow are reused (restricted to the unassigned
/// targets); remaining predicates get one templated step each.
pub fn plan(
    hint: Option<&Workflow>,
    unassigned: &[&Predicate],
    config: &PlannerConfig,
) -> Result<ShieldingPlan, ShieldError> {
    let wanted: BTreeSet<&str> = unassigned.iter().map(|p| p.name.as_str()).collect();
    let mut covered = BTreeSet::new();
    let mut steps = Vec::new();
    for step in hint.into_iter().flat_map(|w| &w.plan.steps) {
        if step.operation == Operation::FormalVerify {
            continue;
        }
        let targets: Vec<String> = step
            .targets
            .iter()
            .filter(|t| wanted.contains(t.as_str()) && !covered.contains(t.as_str()))
            .cloned()
            .collect();
        if targets.is_empty() {
            continue;
        }
        covered.extend(targets.iter().cloned());
        steps.push(PlanStep {
            operation: step.operation,
            query: step.query.clone(),
            targets,
        });
    }
    for p in unassigned {
        if !covered.contains(&p.name) {
            steps.push(template_step(p, config)?);
        }
    }
    Ok(ShieldingPlan { steps })
}

/// Inputs of one step shared by all tool calls.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub observation: &'a str,
    pub action: &'a str,
    pub history: &'a [TrajectoryStep],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Execution {
    pub assignments: BTreeMap<String, bool>,
    /// Predicates assigned from answers below the confidence threshold.
    pub uncertain: BTreeSet<String>,
    /// Search items and Detect categories behind each assignment.
    pub findings: BTreeMap<String, Vec<String>>,
    /// Last tool error per predicate that is still unassigned.
    pub failures: BTreeMap<String, String>,
}

/// Runs `plan` once, in order. Failed calls leave their targets unassigned.
pub fn execute_plan(
    plan: &ShieldingPlan,
    context: &StepContext<'_>,
    model: &PolicyModel,
    tools: &dyn ToolProvider,
    min_confidence: f64,
) -> Execution {
    let mut out = Execution::default();
    for step in &plan.steps {
        for target in &step.targets {
            if out.assignments.contains_key(target) {
                continue;
            }
            let request = ToolRequest {
                predicate: target,
                query: &step.query,
                observation: context.observation,
                action: context.action,
                history: context.history,
            };
            let result = match step.operation {
                Operation::BinaryCheck => tools.binary_check(&request).map(|a| {
                    if a.confidence < min_confidence {
                        out.uncertain.insert(target.clone());
                    }
                    a.value
                }),
                Operation::Detect => {
                    let content = format!("{}\n{}", context.observation, context.action);
                    tools.detect(&request, &content).map(|flagged| {
                        let keywords: BTreeSet<String> = model
                            .predicate(target)
                            .map(|p| p.keywords.iter().map(|k| k.to_lowercase()).collect())
                            .unwrap_or_default();
                        let hits: Vec<String> = flagged
                            .into_iter()
                            .filter(|c| keywords.contains(&c.to_lowercase()))
                            .collect();
                        let value = !hits.is_empty();
                        out.findings.insert(target.clone(), hits);
                        value
                    })
                }
                Operation::Search => tools.search(&request).map(|items| {
                    let value = !items.is_empty();
                    out.findings.insert(target.clone(), items);
                    value
                }),
                Operation::FormalVerify => Err(ToolError::Unsupported(Operation::FormalVerify)),
            };
            match result {
                Ok(value) => {
                    out.failures.remove(target);
                    out.assignments.insert(target.clone(), value);
                }
                Err(e) => {
                    out.failures.insert(target.clone(), e.to_string());
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flag {
    Satisfied,
    Violated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleCheck {
    pub id: String,
    pub text: String,
    pub flag: Flag,
    pub explanation: String,
    pub reference: Vec<String>,
}

fn render_values(rule: &Rule, step: &BTreeMap<String, bool>) -> String {
    rule.formula
        .free_predicates()
        .iter()
        .map(|p| match step.get(p) {
            Some(v) => format!("{p}={v}"),
            None => format!("{p}=?"),
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// Evaluates a rule over `trace` and explains the outcome.
pub fn verify_rule(rule: &Rule, trace: &Trace) -> Result<RuleCheck, ShieldError> {
    let ok = evaluate(&rule.formula, trace).map_err(|source| ShieldError::Eval {
        rule: rule.id.clone(),
        source,
    })?;
    let last = trace.len() - 1;
    let values = render_values(rule, &trace.steps()[last]);
    let reference = if rule.reference.is_empty() {
        String::new()
    } else {
        format!(" [reference: {}]", rule.reference.join("; "))
    };
    let explanation = if ok {
        format!("Satisfied: {}{reference}", rule.text)
    } else {
        format!("Violated: {}{reference}; values at step {last}: {values}", rule.text)
    };
    Ok(RuleCheck {
        id: rule.id.clone(),
        text: rule.text.clone(),
        flag: if ok { Flag::Satisfied } else { Flag::Violated },
        explanation,
        reference: rule.reference.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Safe,
    Unsafe,
}

impl Label {
    pub fn from_safe(safe: bool) -> Self {
        if safe {
            Label::Safe
        } else {
            Label::Unsafe
        }
    }

    pub fn is_safe(self) -> bool {
        self == Label::Safe
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Label::Safe => "safe",
            Label::Unsafe => "unsafe",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionVerdict {
    pub action: String,
    pub label: Label,
    /// Absent when the action could not be scored (empty circuit or
    /// unassignable predicates).
    pub margin: Option<f64>,
    pub rules: Vec<RuleCheck>,
    /// Predicate values per trace step that the rules were checked on.
    pub evidence: Vec<BTreeMap<String, bool>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub uncertain: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub findings: BTreeMap<String, Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workflow: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub action: String,
    pub id: String,
    pub text: String,
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub label: Label,
    /// Smallest margin over the invoked actions.
    pub margin: Option<f64>,
    pub epsilon: f64,
    pub actions: Vec<ActionVerdict>,
    pub violated: Vec<Violation>,
    pub explanation: String,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShieldConfig {
    pub safety: SafetyConfig,
    pub planner: PlannerConfig,
    /// BinaryCheck answers below this confidence mark their predicate
    /// uncertain.
    pub min_confidence: f64,
}

impl Default for ShieldConfig {
    fn default() -> Self {
        ShieldConfig {
            safety: SafetyConfig::default(),
            planner: PlannerConfig::default(),
            min_confidence: 0.5,
        }
    }
}

/// Assigns `unassigned` with at most two plan/execute passes.
fn assign(
    unassigned: &[&Predicate],
    hint: Option<&Workflow>,
    context: &StepContext<'_>,
    model: &PolicyModel,
    tools: &dyn ToolProvider,
    config: &ShieldConfig,
) -> Result<(Execution, ShieldingPlan), ShieldError> {
    let first = plan(hint, unassigned, &config.planner)?;
    let mut exec = execute_plan(&first, context, model, tools, config.min_confidence);
    let mut used = first;
    let remaining: Vec<&Predicate> = unassigned
        .iter()
        .copied()
        .filter(|p| !exec.assignments.contains_key(&p.name))
        .collect();
    if !remaining.is_empty() {
        let second = plan(None, &remaining, &config.planner)?;
        let retry = execute_plan(&second, context, model, tools, config.min_confidence);
        for name in retry.assignments.keys() {
            exec.failures.remove(name);
        }
        exec.assignments.extend(retry.assignments);
        exec.uncertain.extend(retry.uncertain);
        exec.findings.extend(retry.findings);
        exec.failures.extend(retry.failures);
        used.steps.extend(second.steps);
    }
    used.steps
        .retain(|s| s.targets.iter().any(|t| exec.assignments.contains_key(t)));
    Ok((exec, used))
}

/// History cell `(step, predicate)` with no recorded value.
type Gap = (usize, String);

/// Trace over `universe` for the history plus the current step. Returns
/// the steps and the history cells that had to be defaulted.
fn build_trace(
    history: &[TrajectoryStep],
    records: &[StepRecord],
    universe: &BTreeMap<String, PredicateKind>,
    current: &BTreeMap<String, bool>,
) -> (Vec<BTreeMap<String, bool>>, Vec<Gap>) {
    let mut steps = Vec::with_capacity(history.len() + 1);
    let mut gaps = Vec::new();
    for (i, step) in history.iter().enumerate() {
        let mut values = BTreeMap::new();
        for (name, kind) in universe {
            let known = step
                .assignments
                .get(name)
                .or_else(|| records.get(i).and_then(|r| r.assignments.get(name)))
                .copied();
            let value = match (known, kind) {
                (Some(v), _) => v,
                (None, PredicateKind::Action) => records.get(i).is_some_and(|r| r.actions.contains(name)),
                (None, PredicateKind::State) => {
                    gaps.push((i, name.clone()));
                    false
                }
            };
            values.insert(name.clone(), value);
        }
        steps.push(values);
    }
    steps.push(
        universe
            .keys()
            .map(|n| (n.clone(), current.get(n).copied().unwrap_or(false)))
            .collect(),
    );
    (steps, gaps)
}

fn rule_bits(rules: &[&Rule], trace: &Trace) -> Result<Vec<bool>, ShieldError> {
    rules
        .iter()
        .map(|r| {
            evaluate(&r.formula, trace).map_err(|source| ShieldError::Eval {
                rule: r.id.clone(),
                source,
            })
        })
        .collect()
}

/// Margin over trace completions of the `cells` (step, predicate); with no
/// cells this is the two-world margin of the trace itself.
fn trace_margin(
    rules: &[&Rule],
    weights: &[f64],
    steps: &[BTreeMap<String, bool>],
    action: &str,
    cells: &[(usize, String)],
    safety: &SafetyConfig,
) -> Result<f64, ShieldError> {
    if cells.len() > safety.max_uncertain {
        return Err(MlnError::EnumerationCap {
            count: cells.len(),
            cap: safety.max_uncertain,
        }
        .into());
    }
    let last = steps.len() - 1;
    let mut taken = Vec::new();
    let mut not_taken = Vec::new();
    for mask in 0u64..(1u64 << cells.len()) {
        let mut trace = Trace::new(steps.to_vec()).expect("non-empty trace");
        for (i, (step, name)) in cells.iter().enumerate() {
            trace.set(*step, name, mask >> i & 1 == 1);
        }
        trace.set(last, action, true);
        taken.push(score_from_bits(weights, &rule_bits(rules, &trace)?));
        trace.set(last, action, false);
        not_taken.push(score_from_bits(weights, &rule_bits(rules, &trace)?));
    }
    Ok(margin_from_score_sets(&taken, &not_taken))
}

/// Everything the shield needs besides the step itself.
pub struct Shield<'a> {
    pub model: &'a PolicyModel,
    pub config: &'a ShieldConfig,
    pub tools: &'a dyn ToolProvider,
}

impl Shield<'_> {
    /// Verifies `step` given the earlier steps of the same trajectory.
    pub fn check(
        &self,
        history: &[TrajectoryStep],
        step: &TrajectoryStep,
        memory: &mut Memory,
        trajectory: &str,
    ) -> Result<Verdict, ShieldError> {
        let epsilon = self.config.safety.epsilon;
        let actions = extract_action_predicates(&step.action, self.model);
        let mut current = step.assignments.clone();
        for p in self.model.action_predicates() {
            current.insert(p.name.clone(), actions.contains(&p.name));
        }
        let mut warnings = Vec::new();
        let mut verdicts = Vec::new();
        if actions.is_empty() {
            warnings.push("no-op action, no circuit applies".to_string());
        }
        let context = StepContext {
            observation: &step.observation,
            action: &step.action,
            history,
        };
        for action in &actions {
            let verdict = self.check_action(
                action,
                history,
                &context,
                &mut current,
                memory,
                trajectory,
                &mut warnings,
            )?;
            verdicts.push(verdict);
        }
        memory.remember(
            trajectory,
            StepRecord {
                observation: step.observation.clone(),
                action: step.action.clone(),
                actions: actions.clone(),
                assignments: current,
            },
        );
        Ok(assemble_verdict(epsilon, verdicts, warnings))
    }

    #[allow(clippy::too_many_arguments)]
    fn check_action(
        &self,
        action: &str,
        history: &[TrajectoryStep],
        context: &StepContext<'_>,
        current: &mut BTreeMap<String, bool>,
        memory: &mut Memory,
        trajectory: &str,
        warnings: &mut Vec<String>,
    ) -> Result<ActionVerdict, ShieldError> {
        let circuit = self.model.lookup_circuit(action)?;
        let mut verdict = ActionVerdict {
            action: action.to_string(),
            label: Label::Safe,
            margin: None,
            rules: Vec::new(),
            evidence: Vec::new(),
            uncertain: Vec::new(),
            findings: BTreeMap::new(),
            workflow: None,
            error: None,
        };
        if circuit.rule_ids.is_empty() {
            warnings.push(format!("uncovered action: no rule constrains '{action}'"));
            return Ok(verdict);
        }
        let rules: Vec<&Rule> = circuit
            .rule_ids
            .iter()
            .map(|id| self.model.rule(id).expect("validated circuit"))
            .collect();
        let mut universe = BTreeMap::new();
        for r in &rules {
            for p in r.formula.free_predicates() {
                let kind = self.model.kind_of(&p).unwrap_or(PredicateKind::State);
                universe.insert(p, kind);
            }
        }
        let unassigned: Vec<&Predicate> = universe
            .iter()
            .filter(|(n, k)| **k == PredicateKind::State && !current.contains_key(*n))
            .filter_map(|(n, _)| self.model.predicate(n))
            .collect();

        let hint = memory.retrieve_workflow(action, &circuit.rule_ids).cloned();
        verdict.workflow = hint.as_ref().map(|w| w.key.clone());
        let (exec, used) = match assign(&unassigned, hint.as_ref(), context, self.model, self.tools, self.config) {
            Ok(done) => done,
            Err(ShieldError::Unverifiable(name)) => {
                verdict.label = Label::Unsafe;
                verdict.error = Some(format!("predicate '{name}' has no description and cannot be verified"));
                return Ok(verdict);
            }
            Err(e) => return Err(e),
        };
        current.extend(exec.assignments.clone());
        verdict.findings = exec.findings;
        let missing: Vec<&str> = unassigned
            .iter()
            .map(|p| p.name.as_str())
            .filter(|n| !current.contains_key(*n))
            .collect();
        if !missing.is_empty() {
            let reasons: Vec<String> = missing
                .iter()
                .map(|n| match exec.failures.get(*n) {
                    Some(e) => format!("'{n}' ({e})"),
                    None => format!("'{n}'"),
                })
                .collect();
            verdict.label = Label::Unsafe;
            verdict.error = Some(format!("unverifiable predicates: {}", reasons.join(", ")));
            return Ok(verdict);
        }

        let records = memory.short_term(trajectory);
        let (steps, gaps) = build_trace(history, records, &universe, current);
        for (i, name) in &gaps {
            warnings.push(format!("'{name}' not recorded at step {i}; assumed false"));
        }
        let trace = Trace::new(steps.clone()).expect("non-empty trace");
        for r in &rules {
            verdict.rules.push(verify_rule(r, &trace)?);
        }
        let last = steps.len() - 1;
        let uncertain: BTreeSet<String> = exec
            .uncertain
            .iter()
            .filter(|n| universe.contains_key(*n))
            .cloned()
            .collect();
        let cells: Vec<Gap> = if self.config.safety.marginalize_uncertain {
            gaps.iter()
                .cloned()
                .chain(uncertain.iter().map(|n| (last, n.clone())))
                .collect()
        } else {
            Vec::new()
        };
        let margin = match trace_margin(&rules, &circuit.weights, &steps, action, &cells, &self.config.safety) {
            Ok(m) => m,
            Err(ShieldError::Mln(e @ MlnError::EnumerationCap { .. })) => {
                verdict.label = Label::Unsafe;
                verdict.error = Some(e.to_string());
                verdict.evidence = steps;
                return Ok(verdict);
            }
            Err(e) => return Err(e),
        };
        verdict.margin = Some(margin);
        verdict.label = Label::from_safe(decide(margin, self.config.safety.epsilon));
        verdict.uncertain = uncertain.into_iter().collect();
        verdict.evidence = steps;
        memory.commit(action, &circuit.rule_ids, &used, trajectory);
        Ok(verdict)
    }
}

fn assemble_verdict(epsilon: f64, actions: Vec<ActionVerdict>, warnings: Vec<String>) -> Verdict {
    let label = Label::from_safe(actions.iter().all(|a| a.label.is_safe()));
    let margin = actions
        .iter()
        .filter_map(|a| a.margin)
        .fold(None, |acc: Option<f64>, m| Some(acc.map_or(m, |a| a.min(m))));
    let violated: Vec<Violation> = actions
        .iter()
        .flat_map(|a| {
            a.rules.iter().filter(|r| r.flag == Flag::Violated).map(|r| Violation {
                action: a.action.clone(),
                id: r.id.clone(),
                text: r.text.clone(),
                explanation: r.explanation.clone(),
            })
        })
        .collect();
    let explanation = if actions.is_empty() {
        "No action predicate matched; no circuit applies.".to_string()
    } else {
        actions
            .iter()
            .map(|a| {
                let mut line = match a.margin {
                    Some(m) => format!("{}: {} (margin {m:.4}, epsilon {epsilon}).", a.action, a.label),
                    None => format!("{}: {}.", a.action, a.label),
                };
                if let Some(e) = &a.error {
                    line.push_str(&format!(" Could not verify: {e}."));
                }
                for r in a.rules.iter().filter(|r| r.flag == Flag::Violated) {
                    line.push(' ');
                    line.push_str(&r.explanation);
                    line.push('.');
                }
                line
            })
            .collect::<Vec<_>>()
            .join("\n")
    };
    Verdict {
        label,
        margin,
        epsilon,
        actions,
        violated,
        explanation,
        warnings,
    }
}
