//! Per-action rule circuits from clustered state predicates.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine, predicate_embedding, EmbeddingError, EmbeddingProvider};
use crate::model::{Circuit, ModelError, PolicyModel, Predicate, Rule};

#[derive(Debug, Error)]
pub enum CircuitError {
    #[error("cluster count {k} out of range for {n} predicates")]
    ClusterCount { k: usize, n: usize },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Symmetric co-occurrence/similarity graph over state predicates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredicateAdjacency {
    pub names: Vec<String>,
    pub matrix: Vec<Vec<bool>>,
}

impl PredicateAdjacency {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.matrix[i].iter().filter(|e| **e).count()
    }

    /// Builds an adjacency from an edge list over `names`.
    pub fn from_edges(names: Vec<String>, edges: &[(usize, usize)]) -> Self {
        let n = names.len();
        let mut matrix = vec![vec![false; n]; n];
        for &(i, j) in edges {
            if i != j {
                matrix[i][j] = true;
                matrix[j][i] = true;
            }
        }
        PredicateAdjacency { names, matrix }
    }
}

/// Cluster label per state predicate.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub names: Vec<String>,
    pub labels: Vec<usize>,
}

impl ClusterAssignment {
    pub fn label_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name).map(|i| self.labels[i])
    }

    pub fn cluster_count(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Members of each cluster, by label.
    pub fn clusters(&self) -> Vec<Vec<String>> {
        let mut out = vec![Vec::new(); self.cluster_count()];
        for (n, l) in self.names.iter().zip(&self.labels) {
            out[*l].push(n.clone());
        }
        out
    }

    /// Renumbers labels in order of first appearance.
    fn compact(mut self) -> Self {
        let mut map = BTreeMap::new();
        for l in self.labels.iter_mut() {
            let next = map.len();
            *l = *map.entry(*l).or_insert(next);
        }
        self
    }
}

/// Edge between two state predicates when they appear together in a rule's
/// predicate set or their embeddings have cosine similarity of at least
/// `threshold`.
pub fn build_adjacency<'a>(
    states: &[&Predicate],
    rules: impl IntoIterator<Item = &'a Rule>,
    embedder: Option<&dyn EmbeddingProvider>,
    threshold: f64,
) -> Result<PredicateAdjacency, CircuitError> {
    let names: Vec<String> = states.iter().map(|p| p.name.clone()).collect();
    let index: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let emb: Vec<Vec<f64>> = states
        .iter()
        .map(|p| predicate_embedding(p, embedder))
        .collect::<Result<_, _>>()?;
    let n = names.len();
    let mut edges = Vec::new();
    for rule in rules {
        let members: Vec<usize> = rule
            .predicates
            .iter()
            .filter_map(|p| index.get(p.as_str()).copied())
            .collect();
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                edges.push((i, j));
            }
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            if cosine(&emb[i], &emb[j]) >= threshold {
                edges.push((i, j));
            }
        }
    }
    Ok(PredicateAdjacency::from_edges(names, &edges))
}

/// Spectral clustering on the symmetric normalized Laplacian followed by
/// seeded k-means++ on the row-normalized spectral embedding.
///
/// Vertices without edges become singleton clusters first and count
/// towards `k`; the remaining vertices share the rest (at least one).
pub fn spectral_cluster(
    adjacency: &PredicateAdjacency,
    k: usize,
    seed: u64,
) -> Result<ClusterAssignment, CircuitError> {
    let n = adjacency.len();
    if k == 0 || k > n {
        return Err(CircuitError::ClusterCount { k, n });
    }
    let mut labels = vec![usize::MAX; n];
    let mut next = 0;
    let connected: Vec<usize> = (0..n).filter(|&i| adjacency.degree(i) > 0).collect();
    for (i, label) in labels.iter_mut().enumerate() {
        if adjacency.degree(i) == 0 {
            *label = next;
            next += 1;
        }
    }
    if !connected.is_empty() {
        let k_rest = k.saturating_sub(next).clamp(1, connected.len());
        let points = spectral_embedding(adjacency, &connected, k_rest);
        let assign = kmeans(&points, k_rest, seed);
        for (pos, &i) in connected.iter().enumerate() {
            labels[i] = next + assign[pos];
        }
    }
    Ok(ClusterAssignment {
        names: adjacency.names.clone(),
        labels,
    }
    .compact())
}

/// Rows of the first `k` eigenvectors of `I - D^-1/2 A D^-1/2` restricted
/// to `vertices`, each scaled to unit length.
fn spectral_embedding(adjacency: &PredicateAdjacency, vertices: &[usize], k: usize) -> Vec<Vec<f64>> {
    let m = vertices.len();
    let deg: Vec<f64> = vertices.iter().map(|&i| adjacency.degree(i) as f64).collect();
    let mut lap = DMatrix::<f64>::identity(m, m);
    for (a, &i) in vertices.iter().enumerate() {
        for (b, &j) in vertices.iter().enumerate() {
            if adjacency.matrix[i][j] {
                lap[(a, b)] -= 1.0 / (deg[a] * deg[b]).sqrt();
            }
        }
    }
    let eig = SymmetricEigen::new(lap);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    (0..m)
        .map(|row| {
            let mut v: Vec<f64> = order[..k].iter().map(|&c| eig.eigenvectors[(row, c)]).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                v.iter_mut().for_each(|x| *x /= norm);
            }
            v
        })
        .collect()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest center; ties go to the lowest index.
fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = dist2(p, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's k-means with k-means++ seeding from a ChaCha8 stream.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<usize> {
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    let k = k.clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].clone()];
    while centers.len() < k {
        let d: Vec<f64> = points.iter().map(|p| nearest(p, &centers).1).collect();
        let total: f64 = d.iter().sum();
        let pick = if total <= 0.0 {
            // All points coincide with a center; take the first unused index.
            (0..n).find(|i| !centers.contains(&points[*i])).unwrap_or(0)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, di) in d.iter().enumerate() {
                if *di > 0.0 && target < *di {
                    chosen = i;
                    break;
                }
                target -= di;
            }
            chosen
        };
        centers.push(points[pick].clone());
    }
    let dim = points[0].len();
    let mut labels = vec![0usize; n];
    for _ in 0..100 {
        let new: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
        let stable = new == labels;
        labels = new;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Reseed an empty cluster at the point farthest from its center.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = dist2(&points[a], &centers[labels[a]]);
                        let db = dist2(&points[b], &centers[labels[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("non-empty");
                centers[c] = points[far].clone();
            } else {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if stable && counts.iter().all(|c| *c > 0) {
            break;
        }
    }
    labels
}

/// Joins clusters so that each rule's state predicates share one label.
pub fn merge_cooccurring<'a>(
    assignment: &ClusterAssignment,
    rule_predicates: impl IntoIterator<Item = &'a [String]>,
) -> ClusterAssignment {
    let count = assignment.cluster_count();
    let mut parent: Vec<usize> = (0..count).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for preds in rule_predicates {
        let labels: Vec<usize> = preds.iter().filter_map(|p| assignment.label_of(p)).collect();
        for w in labels.windows(2) {
            let (a, b) = (find(&mut parent, w[0]), find(&mut parent, w[1]));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    ClusterAssignment {
        names: assignment.names.clone(),
        labels: assignment.labels.iter().map(|&l| find(&mut parent, l)).collect(),
    }
    .compact()
}

/// Rule groups: one per predicate cluster holding the rules whose state
/// predicates fall in it, then one singleton per rule with no state
/// predicate. Groups are ordered by cluster label, singletons by rule id.
pub fn group_rules<'a>(assignment: &ClusterAssignment, rules: impl IntoIterator<Item = &'a Rule>) -> Vec<Vec<String>> {
    let mut by_label: BTreeMap<usize, BTreeSet<String>> = BTreeMap::new();
    let mut singles = BTreeSet::new();
    for rule in rules {
        let labels: BTreeSet<usize> = rule.predicates.iter().filter_map(|p| assignment.label_of(p)).collect();
        if labels.is_empty() {
            singles.insert(rule.id.clone());
        }
        for l in labels {
            by_label.entry(l).or_default().insert(rule.id.clone());
        }
    }
    by_label
        .into_values()
        .map(|s| s.into_iter().collect())
        .chain(singles.into_iter().map(|id| vec![id]))
        .collect()
}

/// For each action, the union of every group holding a rule that mentions
/// it. Actions no rule mentions get an empty circuit.
pub fn assemble_circuits(actions: &[String], groups: &[Vec<String>], model: &PolicyModel) -> Vec<Circuit> {
    actions
        .iter()
        .map(|action| {
            let mut ids = BTreeSet::new();
            for g in groups {
                let relevant = g
                    .iter()
                    .filter_map(|id| model.rule(id))
                    .any(|r| r.formula.mentions(action));
                if relevant {
                    ids.extend(g.iter().cloned());
                }
            }
            let rule_ids: Vec<String> = ids.into_iter().collect();
            let weights = rule_ids
                .iter()
                .map(|id| model.rule(id).map_or(1.0, |r| r.weight))
                .collect();
            Circuit {
                action: action.clone(),
                rule_ids,
                weights,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssembleConfig {
    /// Cluster count; defaults to the ceiling of the square root of the
    /// number of state predicates.
    pub k: Option<usize>,
    pub similarity_threshold: f64,
    pub seed: u64,
}

impl Default for AssembleConfig {
    fn default() -> Self {
        AssembleConfig {
            k: None,
            similarity_threshold: 0.85,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssemblyReport {
    pub k: usize,
    pub spectral: ClusterAssignment,
    pub merged: ClusterAssignment,
    pub rule_groups: Vec<Vec<String>>,
    pub circuits: BTreeMap<String, usize>,
}

/// Clusters the model's state predicates and attaches a circuit to every
/// action predicate.
pub fn assemble(
    model: &PolicyModel,
    embedder: Option<&dyn EmbeddingProvider>,
    config: &AssembleConfig,
) -> Result<(PolicyModel, AssemblyReport), CircuitError> {
    let states: Vec<&Predicate> = model.state_predicates().collect();
    let n = states.len();
    let k = config.k.unwrap_or_else(|| (n as f64).sqrt().ceil() as usize).min(n);
    let adjacency = build_adjacency(&states, model.rules(), embedder, config.similarity_threshold)?;
    let spectral = if n == 0 {
        ClusterAssignment {
            names: vec![],
            labels: vec![],
        }
    } else {
        spectral_cluster(&adjacency, k.max(1), config.seed)?
    };
    let merged = merge_cooccurring(&spectral, model.rules().map(|r| r.predicates.as_slice()));
    let groups = group_rules(&merged, model.rules());
    let actions: Vec<String> = model.action_predicates().map(|p| p.name.clone()).collect();
    let circuits = assemble_circuits(&actions, &groups, model);
    let mut out = model.clone();
    out.set_circuits(circuits);
    out.validate()?;
    let report = AssemblyReport {
        k,
        spectral,
        merged,
        rule_groups: groups,
        circuits: out.circuits().map(|c| (c.action.clone(), c.rule_ids.len())).collect(),
    };
    Ok((out, report))
}
