//! Text embeddings for predicates.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use serde::Deserialize;
use thiserror::Error;

use crate::model::Predicate;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmbeddingError {
    #[error("no embedding available for '{0}'")]
    Missing(String),
    #[error("embedding for '{name}' has dimension {got}, expected {expected}")]
    Dimension { name: String, got: usize, expected: usize },
    #[error("embedding for '{0}' is the zero vector")]
    Degenerate(String),
}

/// Maps text to a unit-norm vector of fixed dimension.
pub trait EmbeddingProvider {
    fn dimension(&self) -> usize;

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbeddingError>;

    /// Embeds a predicate from its name, description and keywords.
    fn embed_predicate(&self, predicate: &Predicate) -> Result<Vec<f64>, EmbeddingError> {
        self.embed(&predicate_text(predicate))
    }
}

/// The text a predicate is embedded from.
pub fn predicate_text(p: &Predicate) -> String {
    let mut text = p.name.replace('_', " ");
    if !p.description.is_empty() {
        text.push_str(": ");
        text.push_str(&p.description);
    }
    if !p.keywords.is_empty() {
        text.push_str(" [");
        text.push_str(&p.keywords.join(", "));
        text.push(']');
    }
    text
}

/// Stored embedding if present, otherwise one from `embedder`.
pub fn predicate_embedding(
    p: &Predicate,
    embedder: Option<&dyn EmbeddingProvider>,
) -> Result<Vec<f64>, EmbeddingError> {
    match (&p.embedding, embedder) {
        (Some(e), _) => Ok(e.clone()),
        (None, Some(embedder)) => embedder.embed_predicate(p),
        (None, None) => Err(EmbeddingError::Missing(p.name.clone())),
    }
}

pub fn normalize(mut v: Vec<f64>, name: &str) -> Result<Vec<f64>, EmbeddingError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(EmbeddingError::Degenerate(name.to_string()));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

/// Cosine similarity. Inputs need not be normalized.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

const STOPWORDS: [&str; 24] = [
    "a", "an", "the", "of", "to", "in", "on", "for", "and", "or", "is", "are", "be", "by", "with", "that", "this",
    "it", "as", "at", "from", "whether", "any", "has",
];

/// Offline bag-of-words embedder using signed feature hashing.
///
/// Lowercased word tokens (minus stopwords) are hashed with FNV-1a into a
/// fixed number of buckets. Texts sharing vocabulary get high cosine
/// similarity; the mapping is stable across platforms and runs.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub const DEFAULT_DIMENSION: usize = 256;

    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashingEmbedder { dim }
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder::new(Self::DEFAULT_DIMENSION)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl EmbeddingProvider for HashingEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbeddingError> {
        let mut v = vec![0.0; self.dim];
        let lower = text.to_lowercase();
        for tok in lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty() && !STOPWORDS.contains(t))
        {
            let h = fnv1a(tok.as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            let sign = if (h >> 63) & 1 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
        normalize(v, text)
    }
}

/// Embeddings supplied up front, keyed by predicate name or exact text.
#[derive(Debug, Clone, Default)]
pub struct FixtureEmbedder {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl FixtureEmbedder {
    pub fn new(dim: usize) -> Self {
        FixtureEmbedder {
            dim,
            vectors: HashMap::new(),
        }
    }

    /// Registers a vector (normalized on insert).
    pub fn insert(&mut self, key: impl Into<String>, vector: Vec<f64>) -> Result<(), EmbeddingError> {
        let key = key.into();
        if vector.len() != self.dim {
            return Err(EmbeddingError::Dimension {
                name: key,
                got: vector.len(),
                expected: self.dim,
            });
        }
        let v = normalize(vector, &key)?;
        self.vectors.insert(key, v);
        Ok(())
    }

    pub fn from_vectors(
        dim: usize,
        vectors: impl IntoIterator<Item = (String, Vec<f64>)>,
    ) -> Result<Self, EmbeddingError> {
        let mut e = FixtureEmbedder::new(dim);
        for (k, v) in vectors {
            e.insert(k, v)?;
        }
        Ok(e)
    }

    pub fn with(mut self, key: impl Into<String>, vector: Vec<f64>) -> Self {
        self.insert(key, vector).expect("valid fixture embedding");
        self
    }

    /// Reads `{"dimension": d, "vectors": {key: [..]}}`.
    pub fn from_json(text: &str) -> Result<Self, FixtureFileError> {
        #[derive(Deserialize)]
        struct Doc {
            dimension: usize,
            vectors: BTreeMap<String, Vec<f64>>,
        }
        let doc: Doc = serde_json::from_str(text)?;
        Ok(FixtureEmbedder::from_vectors(doc.dimension, doc.vectors)?)
    }
}

#[derive(Debug, Error)]
pub enum FixtureFileError {
    #[error("invalid embedding fixture: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

impl EmbeddingProvider for FixtureEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbeddingError> {
        self.vectors
            .get(text)
            .cloned()
            .ok_or_else(|| EmbeddingError::Missing(text.to_string()))
    }

    fn embed_predicate(&self, predicate: &Predicate) -> Result<Vec<f64>, EmbeddingError> {
        self.vectors
            .get(&predicate.name)
            .or_else(|| self.vectors.get(&predicate_text(predicate)))
            .cloned()
            .ok_or_else(|| EmbeddingError::Missing(predicate.name.clone()))
    }
}

/// Tries `primary` first and falls back to `fallback` when it has no
/// vector. Both must share a dimension.
pub struct FallbackEmbedder<P, F> {
    primary: P,
    fallback: F,
}

impl<P: EmbeddingProvider, F: EmbeddingProvider> FallbackEmbedder<P, F> {
    pub fn new(primary: P, fallback: F) -> Result<Self, EmbeddingError> {
        if primary.dimension() != fallback.dimension() {
            return Err(EmbeddingError::Dimension {
                name: "fallback embedder".into(),
                got: fallback.dimension(),
                expected: primary.dimension(),
            });
        }
        Ok(FallbackEmbedder { primary, fallback })
    }
}

impl<P: EmbeddingProvider, F: EmbeddingProvider> EmbeddingProvider for FallbackEmbedder<P, F> {
    fn dimension(&self) -> usize {
        self.primary.dimension()
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbeddingError> {
        match self.primary.embed(text) {
            Err(EmbeddingError::Missing(_)) => self.fallback.embed(text),
            other => other,
        }
    }

    fn embed_predicate(&self, predicate: &Predicate) -> Result<Vec<f64>, EmbeddingError> {
        match self.primary.embed_predicate(predicate) {
            Err(EmbeddingError::Missing(_)) => self.fallback.embed_predicate(predicate),
            other => other,
        }
    }
}

/// Memoizes another provider by input text.
pub struct CachedEmbedder<E> {
    inner: E,
    cache: Mutex<HashMap<String, Vec<f64>>>,
}

impl<E: EmbeddingProvider> CachedEmbedder<E> {
    pub fn new(inner: E) -> Self {
        CachedEmbedder {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }
}

impl<E: EmbeddingProvider> EmbeddingProvider for CachedEmbedder<E> {
    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbeddingError> {
        if let Some(v) = self.cache.lock().expect("embedding cache poisoned").get(text) {
            return Ok(v.clone());
        }
        let v = self.inner.embed(text)?;
        self.cache
            .lock()
            .expect("embedding cache poisoned")
            .insert(text.to_string(), v.clone());
        Ok(v)
    }
}
