//! Vagueness scoring and the refine/prune structure optimization loop.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::path::Path;

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine, predicate_embedding, EmbeddingError, EmbeddingProvider};
use crate::model::{classify_formula, rule_id, ModelError, PolicyModel, Predicate, RawPredicate, RawRule, Rule};
use crate::prompts;
use crate::provider::{GenerationProvider, ProviderError};

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid optimizer configuration: {0}")]
    Config(String),
}

/// Failure of a refiner or merger; never fatal to the optimization run.
#[derive(Debug, Error)]
pub enum EditError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("unusable output: {0}")]
    Output(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// Number of nearest peers averaged into a predicate's vagueness.
    pub k: usize,
    /// Maximum refinements applied over the whole run.
    pub budget: usize,
    pub max_iterations: usize,
    /// Cosine similarity at or above which same-kind predicates are
    /// considered for merging.
    pub similarity_threshold: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            k: 3,
            budget: 50,
            max_iterations: 10,
            similarity_threshold: 0.85,
        }
    }
}

impl OptimizerConfig {
    fn check(&self) -> Result<(), OptimizeError> {
        if self.k == 0 {
            return Err(OptimizeError::Config("k must be at least 1".into()));
        }
        if !(-1.0..=1.0).contains(&self.similarity_threshold) {
            return Err(OptimizeError::Config(format!(
                "similarity threshold {} outside [-1, 1]",
                self.similarity_threshold
            )));
        }
        Ok(())
    }
}

/// Mean of the `k` largest cosine similarities between `embedding` and
/// `peers`. With fewer than `k` peers all are averaged; with none the
/// score is 0.
pub fn predicate_vagueness(embedding: &[f64], peers: &[&[f64]], k: usize) -> f64 {
    if peers.is_empty() || k == 0 {
        return 0.0;
    }
    let mut sims: Vec<f64> = peers.iter().map(|p| cosine(embedding, p)).collect();
    sims.sort_by(|a, b| b.total_cmp(a));
    let take = k.min(sims.len());
    sims[..take].iter().sum::<f64>() / take as f64
}

/// Largest score among the rule's predicates.
pub fn rule_vagueness(rule: &Rule, scores: &HashMap<String, f64>) -> f64 {
    rule.predicates
        .iter()
        .filter_map(|p| scores.get(p).copied())
        .fold(f64::NEG_INFINITY, f64::max)
        .max(-1.0)
}

fn embeddings(
    model: &PolicyModel,
    embedder: Option<&dyn EmbeddingProvider>,
) -> Result<HashMap<String, Vec<f64>>, EmbeddingError> {
    model
        .predicates()
        .map(|p| Ok((p.name.clone(), predicate_embedding(p, embedder)?)))
        .collect()
}

/// Vagueness of every predicate against its same-kind peers.
pub fn score_predicates(
    model: &PolicyModel,
    embedder: Option<&dyn EmbeddingProvider>,
    k: usize,
) -> Result<HashMap<String, f64>, EmbeddingError> {
    let emb = embeddings(model, embedder)?;
    let mut scores = HashMap::new();
    for p in model.predicates() {
        let peers: Vec<&[f64]> = model
            .predicates()
            .filter(|q| q.kind == p.kind && q.name != p.name)
            .map(|q| emb[&q.name].as_slice())
            .collect();
        scores.insert(p.name.clone(), predicate_vagueness(&emb[&p.name], &peers, k));
    }
    Ok(scores)
}

fn store_rule_scores(model: &mut PolicyModel, scores: &HashMap<String, f64>) {
    let ids: Vec<String> = model.rules().map(|r| r.id.clone()).collect();
    for id in ids {
        let v = rule_vagueness(model.rule(&id).expect("rule exists"), scores);
        model.rule_mut(&id).expect("rule exists").vagueness = Some(v);
    }
}

/// Decides whether a rule is verifiable and, if not, proposes replacements.
pub trait Refiner {
    /// `None` keeps the rule; `Some(rules)` replaces it.
    fn refine(&self, rule: &Rule, model: &PolicyModel) -> Result<Option<Vec<RawRule>>, EditError>;
}

/// A proposed merge of a predicate cluster into one surviving predicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergePlan {
    pub survivor: RawPredicate,
    /// Cluster members to be replaced by the survivor.
    pub absorbed: Vec<String>,
}

/// Decides whether a cluster of similar predicates should be merged.
pub trait Merger {
    fn merge(&self, cluster: &[&Predicate], model: &PolicyModel) -> Result<Option<MergePlan>, EditError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementEntry {
    /// The entry applies to rules whose predicate set contains this name.
    pub predicate: String,
    pub rules: Vec<RawRule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeEntry {
    /// The entry applies when all of these are in one cluster.
    pub cluster: Vec<String>,
    pub survivor: String,
    #[serde(default)]
    pub description: Option<String>,
    #[serde(default)]
    pub keywords: Option<Vec<String>>,
}

/// Canned refinements and merges, e.g. loaded from a JSON file.
///
/// An empty fixture keeps every rule and merges nothing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EditFixture {
    #[serde(default)]
    pub refinements: Vec<RefinementEntry>,
    #[serde(default)]
    pub merges: Vec<MergeEntry>,
}

impl EditFixture {
    pub fn load(path: &Path) -> Result<Self, std::io::Error> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }
}

impl Refiner for EditFixture {
    fn refine(&self, rule: &Rule, _model: &PolicyModel) -> Result<Option<Vec<RawRule>>, EditError> {
        Ok(self
            .refinements
            .iter()
            .find(|e| rule.predicates.contains(&e.predicate))
            .map(|e| e.rules.clone()))
    }
}

impl Merger for EditFixture {
    fn merge(&self, cluster: &[&Predicate], model: &PolicyModel) -> Result<Option<MergePlan>, EditError> {
        let names: BTreeSet<&str> = cluster.iter().map(|p| p.name.as_str()).collect();
        let Some(entry) = self
            .merges
            .iter()
            .find(|e| e.cluster.len() >= 2 && e.cluster.iter().all(|n| names.contains(n.as_str())))
        else {
            return Ok(None);
        };
        let base = model.predicate(&entry.survivor);
        let kind = base.map(|p| p.kind).or_else(|| cluster.first().map(|p| p.kind));
        Ok(Some(MergePlan {
            survivor: RawPredicate {
                name: entry.survivor.clone(),
                description: entry
                    .description
                    .clone()
                    .or_else(|| base.map(|p| p.description.clone()))
                    .unwrap_or_default(),
                keywords: entry
                    .keywords
                    .clone()
                    .or_else(|| base.map(|p| p.keywords.clone()))
                    .unwrap_or_default(),
                kind,
            },
            absorbed: entry
                .cluster
                .iter()
                .filter(|n| **n != entry.survivor)
                .cloned()
                .collect(),
        }))
    }
}

fn raw_predicate(p: &Predicate) -> RawPredicate {
    RawPredicate {
        name: p.name.clone(),
        description: p.description.clone(),
        keywords: p.keywords.clone(),
        kind: Some(p.kind),
    }
}

fn raw_rule(rule: &Rule, model: &PolicyModel) -> RawRule {
    RawRule {
        predicates: rule
            .predicates
            .iter()
            .filter_map(|n| model.predicate(n))
            .map(raw_predicate)
            .collect(),
        logic: rule.formula.render(),
        text: Some(rule.text.clone()),
        reference: rule.reference.clone(),
        weight: None,
    }
}

#[derive(Deserialize)]
struct RulesPayload {
    rules: Vec<RawRule>,
}

fn parse_rules_payload(completion: &str) -> Result<Vec<RawRule>, EditError> {
    let json = prompts::extract_json(completion).ok_or_else(|| EditError::Output("no JSON found".into()))?;
    let payload: RulesPayload = serde_json::from_str(json).map_err(|e| EditError::Output(e.to_string()))?;
    Ok(payload.rules)
}

/// Refiner backed by a text-generation provider and the refinement prompt.
///
/// The rule's most vague predicate is sent for review together with the rule.
pub struct ProviderRefiner<'a> {
    pub provider: &'a dyn GenerationProvider,
    pub few_shot: String,
    pub scores: HashMap<String, f64>,
}

impl Refiner for ProviderRefiner<'_> {
    fn refine(&self, rule: &Rule, model: &PolicyModel) -> Result<Option<Vec<RawRule>>, EditError> {
        let focus = rule
            .predicates
            .iter()
            .max_by(|a, b| {
                let sa = self.scores.get(*a).copied().unwrap_or(0.0);
                let sb = self.scores.get(*b).copied().unwrap_or(0.0);
                sa.total_cmp(&sb).then_with(|| b.cmp(a))
            })
            .and_then(|n| model.predicate(n))
            .ok_or_else(|| EditError::Output("rule has no declared predicates".into()))?;
        let user = prompts::predicate_refinement(&self.few_shot, &raw_predicate(focus), &[raw_rule(rule, model)]);
        let completion = self.provider.complete(prompts::REFINEMENT_SYSTEM, &user)?;
        match prompts::decision(&completion) {
            Some(false) => Ok(None),
            Some(true) => parse_rules_payload(&completion).map(Some),
            None => Err(EditError::Output("missing 'Decision:' line".into())),
        }
    }
}

/// Merger backed by a text-generation provider and the merging prompt.
///
/// The survivor is the one predicate in the returned rules that is either a
/// cluster member or new to the model; cluster members missing from the
/// returned rules are absorbed into it.
pub struct ProviderMerger<'a> {
    pub provider: &'a dyn GenerationProvider,
    pub few_shot: String,
}

impl Merger for ProviderMerger<'_> {
    fn merge(&self, cluster: &[&Predicate], model: &PolicyModel) -> Result<Option<MergePlan>, EditError> {
        let names: BTreeSet<&str> = cluster.iter().map(|p| p.name.as_str()).collect();
        let rules: Vec<RawRule> = model
            .rules()
            .filter(|r| r.predicates.iter().any(|p| names.contains(p.as_str())))
            .map(|r| raw_rule(r, model))
            .collect();
        let preds: Vec<RawPredicate> = cluster.iter().map(|p| raw_predicate(p)).collect();
        let user = prompts::predicate_merging(&self.few_shot, &preds, &rules);
        let completion = self.provider.complete(prompts::MERGING_SYSTEM, &user)?;
        match prompts::decision(&completion) {
            Some(false) => return Ok(None),
            None => return Err(EditError::Output("missing 'Decision:' line".into())),
            Some(true) => {}
        }
        let out = parse_rules_payload(&completion)?;
        let mut mentioned: BTreeMap<String, RawPredicate> = BTreeMap::new();
        for r in &out {
            for p in &r.predicates {
                mentioned.entry(p.name.clone()).or_insert_with(|| p.clone());
            }
        }
        let candidates: Vec<&RawPredicate> = mentioned
            .values()
            .filter(|p| names.contains(p.name.as_str()) || model.predicate(&p.name).is_none())
            .collect();
        let [survivor] = candidates.as_slice() else {
            return Err(EditError::Output(format!(
                "expected one surviving predicate, found {}",
                candidates.len()
            )));
        };
        let absorbed: Vec<String> = names
            .iter()
            .filter(|n| !mentioned.contains_key(**n))
            .map(|n| n.to_string())
            .collect();
        if absorbed.is_empty() {
            return Ok(None);
        }
        let mut survivor = (*survivor).clone();
        if survivor.kind.is_none() {
            survivor.kind = cluster.first().map(|p| p.kind);
        }
        Ok(Some(MergePlan { survivor, absorbed }))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub rules_before: usize,
    pub predicates_before: usize,
    pub rules_after_refinement: usize,
    pub predicates_after_refinement: usize,
    pub rules_after_pruning: usize,
    pub predicates_after_pruning: usize,
    pub refinements: usize,
    pub merges: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pop {
    pub rule: String,
    pub vagueness: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizationReport {
    pub initial_rules: usize,
    pub initial_predicates: usize,
    pub final_rules: usize,
    pub final_predicates: usize,
    pub iterations: Vec<IterationReport>,
    pub refinements: usize,
    pub merges: usize,
    /// True when an iteration made no change and no rule was left unreviewed.
    pub converged: bool,
    /// Rules reviewed by the refiner, in pop order.
    pub pops: Vec<Pop>,
    /// Removed action predicates and the actions that replaced them.
    pub lineage: BTreeMap<String, Vec<String>>,
    /// Edits that were proposed but rejected.
    pub incidents: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
struct HeapEntry {
    score: f64,
    id: String,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Max-heap on score; ties pop the lexicographically smallest id.
        self.score.total_cmp(&other.score).then_with(|| other.id.cmp(&self.id))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Embeddings<'a> {
    embedder: Option<&'a dyn EmbeddingProvider>,
}

impl Embeddings<'_> {
    fn attach(&self, p: &mut Predicate) -> Result<(), EmbeddingError> {
        if p.embedding.is_none() {
            if let Some(e) = self.embedder {
                p.embedding = Some(e.embed_predicate(p)?);
            }
        }
        Ok(())
    }
}

struct Run<'a> {
    model: PolicyModel,
    config: &'a OptimizerConfig,
    emb: Embeddings<'a>,
    heap: BinaryHeap<HeapEntry>,
    scores: HashMap<String, f64>,
    refinements_used: usize,
    report: OptimizationReport,
}

impl<'a> Run<'a> {
    fn new(
        model: &PolicyModel,
        embedder: Option<&'a dyn EmbeddingProvider>,
        config: &'a OptimizerConfig,
    ) -> Result<Self, OptimizeError> {
        config.check()?;
        model.validate()?;
        let mut run = Run {
            model: model.clone(),
            config,
            emb: Embeddings { embedder },
            heap: BinaryHeap::new(),
            scores: HashMap::new(),
            refinements_used: 0,
            report: OptimizationReport {
                initial_rules: model.rule_count(),
                initial_predicates: model.predicate_count(),
                ..OptimizationReport::default()
            },
        };
        run.rescore()?;
        let entries: Vec<HeapEntry> = run.model.rules().map(|r| run.entry(&r.id)).collect();
        run.heap.extend(entries);
        Ok(run)
    }

    fn rescore(&mut self) -> Result<(), OptimizeError> {
        self.scores = score_predicates(&self.model, self.emb.embedder, self.config.k)?;
        store_rule_scores(&mut self.model, &self.scores);
        Ok(())
    }

    fn entry(&self, id: &str) -> HeapEntry {
        let rule = self.model.rule(id).expect("rule exists");
        HeapEntry {
            score: rule.vagueness.unwrap_or(0.0),
            id: id.to_string(),
        }
    }

    fn incident(&mut self, msg: String) {
        warn!("{msg}");
        self.report.incidents.push(msg);
    }

    /// Pops rules in descending vagueness until the heap drains or the
    /// refinement budget runs out. Returns the number of refinements.
    fn refine_pass(&mut self, refiner: &dyn Refiner) -> Result<usize, OptimizeError> {
        let mut applied = 0;
        while self.refinements_used < self.config.budget {
            let Some(top) = self.heap.pop() else { break };
            let Some(rule) = self.model.rule(&top.id).cloned() else {
                continue;
            };
            let current = rule.vagueness.unwrap_or(0.0);
            if current.to_bits() != top.score.to_bits() {
                // Score changed since the push; requeue at its current value.
                self.heap.push(HeapEntry {
                    score: current,
                    id: top.id,
                });
                continue;
            }
            self.report.pops.push(Pop {
                rule: rule.id.clone(),
                vagueness: current,
            });
            let replacement = match refiner.refine(&rule, &self.model) {
                Ok(None) => continue,
                Ok(Some(rules)) => rules,
                Err(e) => {
                    self.incident(format!("refining rule {}: {e}", rule.id));
                    continue;
                }
            };
            match self.apply_refinement(&rule, &replacement)? {
                Ok(new_ids) => {
                    debug!("refined {} into {:?}", rule.id, new_ids);
                    self.rescore()?;
                    for id in new_ids {
                        let e = self.entry(&id);
                        self.heap.push(e);
                    }
                    self.refinements_used += 1;
                    applied += 1;
                }
                Err(reason) => self.incident(format!("refinement of rule {} rejected: {reason}", rule.id)),
            }
        }
        Ok(applied)
    }

    /// Replaces `rule` with `replacement`. The outer error is fatal; the
    /// inner one rejects the edit and leaves the model untouched.
    fn apply_refinement(
        &mut self,
        rule: &Rule,
        replacement: &[RawRule],
    ) -> Result<Result<Vec<String>, String>, OptimizeError> {
        if replacement.is_empty() {
            return Ok(Err("refiner returned no rules".into()));
        }
        let mut draft = self.model.clone();
        draft.remove_rule(&rule.id);
        let mut new_ids = Vec::new();
        let mut introduced_actions = BTreeSet::new();
        for raw in replacement {
            for rp in &raw.predicates {
                let p = rp.to_predicate();
                match draft.predicate(&p.name) {
                    Some(existing) if existing.kind != p.kind => {
                        return Ok(Err(format!(
                            "predicate '{}' is {} but was declared {}",
                            p.name, existing.kind, p.kind
                        )))
                    }
                    Some(_) => {}
                    None => {
                        if p.description.trim().is_empty() {
                            return Ok(Err(format!("new predicate '{}' has no description", p.name)));
                        }
                        let mut p = p;
                        if let Err(e) = self.emb.attach(&mut p) {
                            return Ok(Err(e.to_string()));
                        }
                        draft.insert_predicate(p);
                    }
                }
            }
            let mut raw = raw.clone();
            if raw.text.as_deref().is_none_or(|t| t.trim().is_empty()) {
                raw.text = Some(rule.text.clone());
            }
            if raw.reference.is_empty() {
                raw.reference = rule.reference.clone();
            }
            raw.weight = Some(rule.weight);
            let new_rule = match crate::model::validate_rule(&raw, draft.predicate_table()) {
                Ok(r) => r,
                Err(e) => return Ok(Err(e.to_string())),
            };
            introduced_actions.extend(new_rule.actions(&draft).collect::<Vec<_>>());
            if draft.rule(&new_rule.id).is_none() {
                new_ids.push(new_rule.id.clone());
                draft.insert_rule(new_rule);
            }
        }
        // Drop predicates the edit orphaned.
        for name in &rule.predicates {
            if !draft.is_referenced(name) {
                draft.remove_predicate(name);
            }
        }
        // Every action the original constrained must stay constrained, or
        // be succeeded by the actions the replacement introduces.
        let constrained = draft.constrained_actions();
        let mut lineage = Vec::new();
        for action in rule.actions(&self.model) {
            if constrained.contains(&action) {
                continue;
            }
            if introduced_actions.is_empty() {
                return Ok(Err(format!("would leave action '{action}' unconstrained")));
            }
            lineage.push((action, introduced_actions.iter().cloned().collect::<Vec<_>>()));
        }
        if let Err(e) = draft.validate() {
            return Ok(Err(e.to_string()));
        }
        self.model = draft;
        for (action, successors) in lineage {
            self.report.lineage.insert(action, successors);
        }
        Ok(Ok(new_ids))
    }

    /// Same-kind clusters of predicates connected by similarity at or above
    /// the threshold, in declaration order, singletons omitted.
    fn similarity_clusters(&self) -> Result<Vec<Vec<String>>, OptimizeError> {
        let emb = embeddings(&self.model, self.emb.embedder)?;
        let names: Vec<&Predicate> = self.model.predicates().collect();
        let n = names.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for i in 0..n {
            for j in i + 1..n {
                if names[i].kind == names[j].kind
                    && cosine(&emb[&names[i].name], &emb[&names[j].name]) >= self.config.similarity_threshold
                {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
        let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for (i, p) in names.iter().enumerate() {
            let root = find(&mut parent, i);
            groups.entry(root).or_default().push(p.name.clone());
        }
        Ok(groups.into_values().filter(|g| g.len() > 1).collect())
    }

    fn prune_pass(&mut self, merger: &dyn Merger) -> Result<usize, OptimizeError> {
        let mut merges = 0;
        for cluster in self.similarity_clusters()? {
            // Earlier merges in this pass may have removed members.
            let members: Vec<&Predicate> = cluster.iter().filter_map(|n| self.model.predicate(n)).collect();
            if members.len() < 2 {
                continue;
            }
            let plan = match merger.merge(&members, &self.model) {
                Ok(None) => continue,
                Ok(Some(plan)) => plan,
                Err(e) => {
                    let msg = format!("merging {cluster:?}: {e}");
                    self.incident(msg);
                    continue;
                }
            };
            match self.apply_merge(&cluster, &plan)? {
                Ok(touched) => {
                    debug!("merged {:?} into {}", plan.absorbed, plan.survivor.name);
                    self.rescore()?;
                    for id in touched {
                        let e = self.entry(&id);
                        self.heap.push(e);
                    }
                    merges += 1;
                }
                Err(reason) => self.incident(format!("merge of {cluster:?} rejected: {reason}")),
            }
        }
        Ok(merges)
    }

    fn apply_merge(
        &mut self,
        cluster: &[String],
        plan: &MergePlan,
    ) -> Result<Result<Vec<String>, String>, OptimizeError> {
        let survivor = &plan.survivor.name;
        if plan.absorbed.is_empty() {
            return Ok(Err("nothing to absorb".into()));
        }
        for a in &plan.absorbed {
            if !cluster.contains(a) || a == survivor {
                return Ok(Err(format!("'{a}' cannot be absorbed")));
            }
        }
        if !crate::ltl::is_valid_atom(survivor) {
            return Ok(Err(format!("invalid survivor name '{survivor}'")));
        }
        let kind = self
            .model
            .predicate(&cluster[0])
            .map(|p| p.kind)
            .expect("cluster member");
        let mut draft = self.model.clone();
        match draft.predicate(survivor) {
            Some(p) if p.kind != kind => return Ok(Err(format!("survivor '{survivor}' has kind {}", p.kind))),
            Some(_) if !cluster.contains(survivor) => {
                return Ok(Err(format!("survivor '{survivor}' is outside the cluster")))
            }
            Some(_) => {
                let p = draft.predicate_mut(survivor).expect("present");
                if !plan.survivor.description.trim().is_empty() && plan.survivor.description != p.description {
                    p.description = plan.survivor.description.clone();
                    p.keywords = plan.survivor.keywords.clone();
                    p.embedding = None;
                }
                let mut p = p.clone();
                if let Err(e) = self.emb.attach(&mut p) {
                    return Ok(Err(e.to_string()));
                }
                draft.insert_predicate(p);
            }
            None => {
                if plan.survivor.kind.is_some_and(|k| k != kind) {
                    return Ok(Err("survivor kind differs from the cluster".into()));
                }
                let mut p = plan.survivor.to_predicate();
                p.kind = kind;
                if p.description.trim().is_empty() {
                    return Ok(Err(format!("new predicate '{}' has no description", p.name)));
                }
                if let Err(e) = self.emb.attach(&mut p) {
                    return Ok(Err(e.to_string()));
                }
                draft.insert_predicate(p);
            }
        }
        let absorbed: BTreeSet<&str> = plan.absorbed.iter().map(String::as_str).collect();
        let rename = |n: &str| -> String {
            if absorbed.contains(n) {
                survivor.clone()
            } else {
                n.to_string()
            }
        };
        let affected: Vec<Rule> = draft
            .rules()
            .filter(|r| r.predicates.iter().any(|p| absorbed.contains(p.as_str())))
            .cloned()
            .collect();
        let mut touched = Vec::new();
        for old in affected {
            draft.remove_rule(&old.id);
            let formula = old.formula.map_atoms(&rename);
            let mut preds: Vec<String> = old.predicates.iter().map(|p| rename(p)).collect();
            preds.sort();
            preds.dedup();
            let id = rule_id(&formula, &preds);
            let kind = classify_formula(&formula, |n| draft.kind_of(n));
            let rewritten = Rule {
                id: id.clone(),
                predicates: preds,
                text: old.text.clone(),
                formula,
                kind,
                weight: old.weight,
                vagueness: None,
                reference: old.reference.clone(),
            };
            match draft.rule_mut(&id) {
                Some(existing) => {
                    // Duplicate after renaming: keep the heavier copy's weight
                    // and both sets of references.
                    existing.weight = existing.weight.max(rewritten.weight);
                    for r in rewritten.reference {
                        if !existing.reference.contains(&r) {
                            existing.reference.push(r);
                        }
                    }
                }
                None => draft.insert_rule(rewritten),
            }
            if !touched.contains(&id) {
                touched.push(id);
            }
        }
        for a in &plan.absorbed {
            draft.remove_predicate(a);
        }
        if let Err(e) = draft.validate() {
            return Ok(Err(e.to_string()));
        }
        self.model = draft;
        Ok(Ok(touched))
    }
}

/// Runs only the refinement stage once over every rule.
pub fn verifiability_refinement(
    model: &PolicyModel,
    refiner: &dyn Refiner,
    embedder: Option<&dyn EmbeddingProvider>,
    config: &OptimizerConfig,
) -> Result<(PolicyModel, OptimizationReport), OptimizeError> {
    let mut run = Run::new(model, embedder, config)?;
    run.report.refinements = run.refine_pass(refiner)?;
    Ok(run.finish())
}

/// Runs only the pruning stage once.
pub fn redundancy_pruning(
    model: &PolicyModel,
    merger: &dyn Merger,
    embedder: Option<&dyn EmbeddingProvider>,
    config: &OptimizerConfig,
) -> Result<(PolicyModel, OptimizationReport), OptimizeError> {
    let mut run = Run::new(model, embedder, config)?;
    run.report.merges = run.prune_pass(merger)?;
    Ok(run.finish())
}

impl Run<'_> {
    fn finish(mut self) -> (PolicyModel, OptimizationReport) {
        self.report.final_rules = self.model.rule_count();
        self.report.final_predicates = self.model.predicate_count();
        (self.model, self.report)
    }
}

/// Alternates refinement and pruning until an iteration changes nothing or
/// `max_iterations` is reached.
pub fn optimize(
    model: &PolicyModel,
    refiner: &dyn Refiner,
    merger: &dyn Merger,
    embedder: Option<&dyn EmbeddingProvider>,
    config: &OptimizerConfig,
) -> Result<(PolicyModel, OptimizationReport), OptimizeError> {
    let mut run = Run::new(model, embedder, config)?;
    for iteration in 1..=config.max_iterations {
        let mut it = IterationReport {
            iteration,
            rules_before: run.model.rule_count(),
            predicates_before: run.model.predicate_count(),
            ..IterationReport::default()
        };
        it.refinements = run.refine_pass(refiner)?;
        it.rules_after_refinement = run.model.rule_count();
        it.predicates_after_refinement = run.model.predicate_count();
        it.merges = run.prune_pass(merger)?;
        it.rules_after_pruning = run.model.rule_count();
        it.predicates_after_pruning = run.model.predicate_count();
        run.report.refinements += it.refinements;
        run.report.merges += it.merges;
        let changed = it.refinements + it.merges > 0;
        run.report.iterations.push(it);
        if !changed {
            run.report.converged = run.heap.is_empty();
            break;
        }
    }
    Ok(run.finish())
}
