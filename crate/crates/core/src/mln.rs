//! Weighted-rule inference over a circuit, the relative safety decision and
//! hinge-loss weight learning.
//!
//! A world's score is the sum of weights of the rules it satisfies. The
//! safety margin compares the world where the action is taken with the one
//! where it is not, normalizing over just those two:
//!
//! ```text
//! margin = (e^s1 - e^s0) / (e^s1 + e^s0) = tanh((s1 - s0) / 2)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ltl::{evaluate, EvalError, Trace};
use crate::model::{ModelError, PolicyModel, PredicateKind, Rule};

#[derive(Debug, Error)]
pub enum MlnError {
    #[error("rule {rule} cannot be decided: predicate '{predicate}' is unassigned")]
    Undecidable { rule: String, predicate: String },
    #[error("enumeration cap exceeded: {count} uncertain predicates, cap {cap}")]
    EnumerationCap { count: usize, cap: usize },
    #[error("'{0}' is not an uncertain state predicate of the circuit")]
    NotUncertain(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("dataset line {line}: {message}")]
    Dataset { line: usize, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SafetyConfig {
    pub epsilon: f64,
    pub marginalize_uncertain: bool,
    pub max_uncertain: usize,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        SafetyConfig {
            epsilon: 0.0,
            marginalize_uncertain: false,
            max_uncertain: 16,
        }
    }
}

/// Truth value of a rule in a single world, read as a one-step trace.
pub fn satisfied(rule: &Rule, world: &BTreeMap<String, bool>) -> Result<bool, MlnError> {
    evaluate(&rule.formula, &Trace::single(world.clone())).map_err(|e| match e {
        EvalError::Unassigned { predicate, .. } => MlnError::Undecidable {
            rule: rule.id.clone(),
            predicate,
        },
        EvalError::IndexOutOfRange { .. } => unreachable!("step 0 of a one-step trace"),
    })
}

/// Sum of the weights of satisfied rules.
pub fn score_from_bits(weights: &[f64], bits: &[bool]) -> f64 {
    weights.iter().zip(bits).filter(|(_, b)| **b).map(|(w, _)| *w).sum()
}

/// Two-world margin computed through max-subtracted exponentials.
pub fn margin_from_scores(s1: f64, s0: f64) -> f64 {
    let m = s1.max(s0);
    let e1 = (s1 - m).exp();
    let e0 = (s0 - m).exp();
    (e1 - e0) / (e1 + e0)
}

/// Margin when each action value has several weighted completions:
/// `(Z1 - Z0) / (Z1 + Z0)` with `Z_b` the sum of `e^s` over `b`'s scores.
/// With one score per side this is exactly [`margin_from_scores`].
pub fn margin_from_score_sets(taken: &[f64], not_taken: &[f64]) -> f64 {
    let m = taken.iter().chain(not_taken).copied().fold(f64::NEG_INFINITY, f64::max);
    let z1: f64 = taken.iter().map(|s| (s - m).exp()).sum();
    let z0: f64 = not_taken.iter().map(|s| (s - m).exp()).sum();
    (z1 - z0) / (z1 + z0)
}

/// The same margin in closed form.
pub fn closed_form_margin(s1: f64, s0: f64) -> f64 {
    ((s1 - s0) / 2.0).tanh()
}

/// Safe iff `margin >= epsilon`.
pub fn decide(margin: f64, epsilon: f64) -> bool {
    margin >= epsilon
}

/// A circuit with its rules resolved from the model.
#[derive(Debug, Clone)]
pub struct CircuitView<'a> {
    pub action: String,
    pub rules: Vec<&'a Rule>,
    pub weights: Vec<f64>,
    /// Every predicate the circuit's rules mention, with its kind.
    pub universe: BTreeMap<String, PredicateKind>,
}

impl<'a> CircuitView<'a> {
    pub fn from_model(model: &'a PolicyModel, action: &str) -> Result<Self, MlnError> {
        let circuit = model.lookup_circuit(action)?;
        let rules: Vec<&Rule> = circuit
            .rule_ids
            .iter()
            .map(|id| model.rule(id).expect("validated circuit"))
            .collect();
        Ok(Self::new(action, rules, circuit.weights.clone(), |n| model.kind_of(n)))
    }

    pub fn new(
        action: &str,
        rules: Vec<&'a Rule>,
        weights: Vec<f64>,
        kind_of: impl Fn(&str) -> Option<PredicateKind>,
    ) -> Self {
        let mut universe = BTreeMap::new();
        universe.insert(action.to_string(), PredicateKind::Action);
        for r in &rules {
            for p in r.formula.free_predicates() {
                let kind = kind_of(&p).unwrap_or(PredicateKind::State);
                universe.insert(p, kind);
            }
        }
        CircuitView {
            action: action.to_string(),
            rules,
            weights,
            universe,
        }
    }

    /// State predicates of the circuit, sorted.
    pub fn state_predicates(&self) -> impl Iterator<Item = &str> {
        self.universe
            .iter()
            .filter(|(_, k)| **k == PredicateKind::State)
            .map(|(n, _)| n.as_str())
    }

    /// World with the action set to `taken`. Other action predicates not in
    /// `state` default to false (not invoked).
    pub fn world(&self, state: &BTreeMap<String, bool>, taken: bool) -> BTreeMap<String, bool> {
        let mut world = state.clone();
        for (name, kind) in &self.universe {
            if *kind == PredicateKind::Action {
                world.entry(name.clone()).or_insert(false);
            }
        }
        world.insert(self.action.clone(), taken);
        world
    }

    pub fn bits(&self, world: &BTreeMap<String, bool>) -> Result<Vec<bool>, MlnError> {
        self.rules.iter().map(|r| satisfied(r, world)).collect()
    }

    pub fn world_score(&self, world: &BTreeMap<String, bool>) -> Result<f64, MlnError> {
        Ok(score_from_bits(&self.weights, &self.bits(world)?))
    }

    /// Satisfaction bits with the action taken and not taken.
    pub fn bit_pair(&self, state: &BTreeMap<String, bool>) -> Result<(Vec<bool>, Vec<bool>), MlnError> {
        Ok((
            self.bits(&self.world(state, true))?,
            self.bits(&self.world(state, false))?,
        ))
    }

    /// Margin with `state` as fixed evidence.
    pub fn safety_margin(&self, state: &BTreeMap<String, bool>) -> Result<f64, MlnError> {
        let (b1, b0) = self.bit_pair(state)?;
        Ok(margin_from_scores(
            score_from_bits(&self.weights, &b1),
            score_from_bits(&self.weights, &b0),
        ))
    }

    /// Margin summing over every completion of the `uncertain` state
    /// predicates; values for them in `state` are ignored.
    pub fn marginal_margin(
        &self,
        state: &BTreeMap<String, bool>,
        uncertain: &BTreeSet<String>,
        config: &SafetyConfig,
    ) -> Result<f64, MlnError> {
        if uncertain.len() > config.max_uncertain {
            return Err(MlnError::EnumerationCap {
                count: uncertain.len(),
                cap: config.max_uncertain,
            });
        }
        for u in uncertain {
            if self.universe.get(u) != Some(&PredicateKind::State) {
                return Err(MlnError::NotUncertain(u.clone()));
            }
        }
        let names: Vec<&String> = uncertain.iter().collect();
        let mut scores = [Vec::new(), Vec::new()];
        for mask in 0u64..(1u64 << names.len()) {
            let mut completion = state.clone();
            for (i, n) in names.iter().enumerate() {
                completion.insert((*n).clone(), mask >> i & 1 == 1);
            }
            for (slot, taken) in [(0, false), (1, true)] {
                scores[slot].push(self.world_score(&self.world(&completion, taken))?);
            }
        }
        Ok(margin_from_score_sets(&scores[1], &scores[0]))
    }

    /// Margin according to `config`: marginalized when enabled and there
    /// are uncertain predicates, two-world otherwise.
    pub fn margin(
        &self,
        state: &BTreeMap<String, bool>,
        uncertain: &BTreeSet<String>,
        config: &SafetyConfig,
    ) -> Result<f64, MlnError> {
        if config.marginalize_uncertain && !uncertain.is_empty() {
            self.marginal_margin(state, uncertain, config)
        } else {
            self.safety_margin(state)
        }
    }
}

/// One labeled state for an action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub action: String,
    pub state: BTreeMap<String, bool>,
    /// +1 when taking the action in this state is safe, -1 otherwise.
    pub label: i8,
}

/// Parses line-delimited training examples, skipping blank lines.
pub fn read_dataset(reader: impl BufRead) -> Result<Vec<TrainingExample>, MlnError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| MlnError::Dataset {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: TrainingExample = serde_json::from_str(&line).map_err(|e| MlnError::Dataset {
            line: i + 1,
            message: e.to_string(),
        })?;
        if ex.label != 1 && ex.label != -1 {
            return Err(MlnError::Dataset {
                line: i + 1,
                message: format!("label must be 1 or -1, got {}", ex.label),
            });
        }
        out.push(ex);
    }
    Ok(out)
}

/// Satisfaction bits of a training example in both worlds, fixed for the
/// whole run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleBits {
    pub taken: Vec<bool>,
    pub not_taken: Vec<bool>,
    pub label: f64,
}

pub fn example_bits(view: &CircuitView<'_>, ex: &TrainingExample) -> Result<ExampleBits, MlnError> {
    let (taken, not_taken) = view.bit_pair(&ex.state)?;
    Ok(ExampleBits {
        taken,
        not_taken,
        label: f64::from(ex.label),
    })
}

fn example_margin(weights: &[f64], ex: &ExampleBits) -> f64 {
    margin_from_scores(
        score_from_bits(weights, &ex.taken),
        score_from_bits(weights, &ex.not_taken),
    )
}

/// Mean of `max(0, gamma - y * margin)`.
pub fn hinge_loss(weights: &[f64], examples: &[ExampleBits], gamma: f64) -> Result<f64, MlnError> {
    if examples.is_empty() {
        return Err(MlnError::EmptyDataset);
    }
    let total: f64 = examples
        .iter()
        .map(|ex| (gamma - ex.label * example_margin(weights, ex)).max(0.0))
        .sum();
    Ok(total / examples.len() as f64)
}

/// Gradient of [`hinge_loss`] with respect to the weights.
///
/// An example contributes while `gamma - y * margin >= 0`, so the boundary
/// itself (such as every example at all-zero weights with `gamma = 0`)
/// still produces a descent direction.
pub fn loss_gradient(weights: &[f64], examples: &[ExampleBits], gamma: f64) -> Result<Vec<f64>, MlnError> {
    if examples.is_empty() {
        return Err(MlnError::EmptyDataset);
    }
    let mut grad = vec![0.0; weights.len()];
    for ex in examples {
        let s1 = score_from_bits(weights, &ex.taken);
        let s0 = score_from_bits(weights, &ex.not_taken);
        let margin = margin_from_scores(s1, s0);
        if gamma - ex.label * margin < 0.0 {
            continue;
        }
        let sech = 1.0 / ((s1 - s0) / 2.0).cosh();
        let scale = 0.5 * sech * sech;
        for (r, g) in grad.iter_mut().enumerate() {
            let diff = f64::from(u8::from(ex.taken[r])) - f64::from(u8::from(ex.not_taken[r]));
            *g -= ex.label * scale * diff;
        }
    }
    let n = examples.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub gamma: f64,
    /// Initial weights are drawn uniformly from `[-init_scale, init_scale]`.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.5,
            epochs: 200,
            gamma: 0.0,
            init_scale: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn check(&self) -> Result<(), MlnError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(MlnError::Config("learning rate must be positive".into()));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(MlnError::Config("gamma must be non-negative".into()));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(MlnError::Config("init scale must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub initial_weights: Vec<f64>,
    pub weights: Vec<f64>,
    /// Loss before training followed by the loss after each epoch.
    pub losses: Vec<f64>,
}

/// Seeded uniform initial weights.
pub fn initial_weights(count: usize, config: &TrainConfig) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..count)
        .map(|_| {
            if config.init_scale == 0.0 {
                0.0
            } else {
                rng.random_range(-config.init_scale..=config.init_scale)
            }
        })
        .collect()
}

/// Full-batch gradient descent from `init`.
pub fn train_from(init: Vec<f64>, examples: &[ExampleBits], config: &TrainConfig) -> Result<TrainOutcome, MlnError> {
    config.check()?;
    let mut weights = init.clone();
    let mut losses = vec![hinge_loss(&weights, examples, config.gamma)?];
    for epoch in 1..=config.epochs {
        let grad = loss_gradient(&weights, examples, config.gamma)?;
        for (w, g) in weights.iter_mut().zip(&grad) {
            *w -= config.learning_rate * g;
        }
        let loss = hinge_loss(&weights, examples, config.gamma)?;
        if !loss.is_finite() || weights.iter().any(|w| !w.is_finite()) {
            return Err(MlnError::Diverged { epoch, loss });
        }
        losses.push(loss);
    }
    Ok(TrainOutcome {
        initial_weights: init,
        weights,
        losses,
    })
}

/// Trains a circuit's weights from seeded random initial values.
pub fn train_weights(
    view: &CircuitView<'_>,
    dataset: &[TrainingExample],
    config: &TrainConfig,
) -> Result<TrainOutcome, MlnError> {
    let examples: Vec<ExampleBits> = dataset
        .iter()
        .map(|ex| example_bits(view, ex))
        .collect::<Result<_, _>>()?;
    train_from(initial_weights(view.rules.len(), config), &examples, config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitTraining {
    pub action: String,
    pub examples: usize,
    pub rule_ids: Vec<String>,
    pub outcome: TrainOutcome,
    /// Fraction of examples classified correctly after training at the
    /// model's threshold.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epsilon: f64,
    pub circuits: Vec<CircuitTraining>,
    /// Actions in the dataset that have no non-empty circuit.
    pub skipped: Vec<String>,
}

/// Trains every circuit with examples in `dataset` and stores the learned
/// weights and `epsilon` in a copy of the model. Each circuit draws its
/// initial weights from a seed offset by its position in action order.
pub fn train_model(
    model: &PolicyModel,
    dataset: &[TrainingExample],
    config: &TrainConfig,
    epsilon: f64,
) -> Result<(PolicyModel, TrainReport), MlnError> {
    if dataset.is_empty() {
        return Err(MlnError::EmptyDataset);
    }
    let mut by_action: BTreeMap<&str, Vec<&TrainingExample>> = BTreeMap::new();
    for ex in dataset {
        by_action.entry(ex.action.as_str()).or_default().push(ex);
    }
    let mut out = model.clone();
    let mut report = TrainReport {
        epsilon,
        circuits: Vec::new(),
        skipped: Vec::new(),
    };
    for (offset, (action, examples)) in by_action.into_iter().enumerate() {
        let view = CircuitView::from_model(model, action)?;
        if view.rules.is_empty() {
            report.skipped.push(action.to_string());
            continue;
        }
        let owned: Vec<TrainingExample> = examples.into_iter().cloned().collect();
        let cfg = TrainConfig {
            seed: config.seed.wrapping_add(offset as u64),
            ..config.clone()
        };
        let outcome = train_weights(&view, &owned, &cfg)?;
        let mut correct = 0usize;
        for ex in &owned {
            let bits = example_bits(&view, ex)?;
            let safe = decide(example_margin(&outcome.weights, &bits), epsilon);
            if safe == (ex.label == 1) {
                correct += 1;
            }
        }
        out.circuit_mut(action)
            .expect("circuit exists")
            .weights
            .clone_from(&outcome.weights);
        report.circuits.push(CircuitTraining {
            action: action.to_string(),
            examples: owned.len(),
            rule_ids: view.rules.iter().map(|r| r.id.clone()).collect(),
            outcome,
            accuracy: correct as f64 / owned.len() as f64,
        });
    }
    out.set_epsilon(Some(epsilon));
    out.validate()?;
    Ok((out, report))
}
