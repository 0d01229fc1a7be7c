//! Text embeddings, field matching and fact relevance.
//!
//! Providers implement [`EmbeddingProvider`]. [`MockEmbedder`] hashes tokens
//! into a fixed-size bag of words and needs no network; [`RemoteEmbedder`]
//! talks to an OpenAI-style `/embeddings` endpoint. [`CachedEmbedder`] adds
//! a shared read-through cache in front of either.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{EmbeddingConfig, EmbeddingProviderKind};
use crate::dataset::{Dataset, DatasetStore, FieldDescriptor};
use crate::gate::Gate;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EmbeddingError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("provider returned {found} dimensions, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("the field catalog is empty")]
    EmptyCatalog,
}

impl EmbeddingError {
    pub fn code(&self) -> &'static str {
        match self {
            EmbeddingError::EmptyText => "EMPTY_TEXT",
            EmbeddingError::ProviderUnavailable(_) | EmbeddingError::DimensionMismatch { .. } => {
                "PROVIDER_UNAVAILABLE"
            }
            EmbeddingError::EmptyCatalog => "EMPTY_CATALOG",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub values: Vec<f64>,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub trait EmbeddingProvider: Send + Sync {
    /// Stable identity used in cache keys.
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Embedding, EmbeddingError>;
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &Embedding, b: &Embedding) -> f64 {
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    let na: f64 = a.values.iter().map(|v| v * v).sum();
    let nb: f64 = b.values.iter().map(|v| v * v).sum();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
}

const STOP_WORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "between", "by", "did", "do", "does", "for", "from", "has",
    "have", "how", "in", "is", "it", "its", "of", "on", "or", "than", "that", "the", "their", "this", "to",
    "was", "were", "what", "which", "with",
];

/// Lowercase alphanumeric tokens without stop words; the trimmed text
/// itself when nothing else is left.
pub fn tokens(text: &str) -> Vec<String> {
    let toks: Vec<String> = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .filter(|t| !STOP_WORDS.contains(&t.as_str()))
        .collect();
    if toks.is_empty() && !text.trim().is_empty() {
        vec![text.trim().to_lowercase()]
    } else {
        toks
    }
}

/// Deterministic hashed bag-of-words embedder.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    dim: usize,
    seed: u64,
}

impl MockEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "dimension must be positive");
        Self { dim, seed }
    }

    pub fn bucket(&self, token: &str) -> usize {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(token.as_bytes());
        let d = h.finalize();
        let n = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
        (n % self.dim as u64) as usize
    }
}

impl Default for MockEmbedder {
    fn default() -> Self {
        let c = EmbeddingConfig::default();
        Self::new(c.dim, c.seed)
    }
}

impl EmbeddingProvider for MockEmbedder {
    fn id(&self) -> String {
        format!("mock:{}:{}", self.dim, self.seed)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding, EmbeddingError> {
        if text.trim().is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        let mut values = vec![0.0; self.dim];
        for t in tokens(text) {
            values[self.bucket(&t)] += 1.0;
        }
        Ok(Embedding { values })
    }
}

/// Client for an OpenAI-compatible embeddings endpoint.
pub struct RemoteEmbedder {
    client: reqwest::blocking::Client,
    url: String,
    model: String,
    api_key: Option<String>,
    dim: usize,
    max_retries: u32,
    cache_dir: Option<PathBuf>,
    gate: Gate,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl RemoteEmbedder {
    pub fn from_config(c: &EmbeddingConfig) -> Result<Self, EmbeddingError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(c.timeout_secs))
            .build()
            .map_err(|e| EmbeddingError::ProviderUnavailable(e.to_string()))?;
        if let Some(dir) = &c.cache_dir {
            std::fs::create_dir_all(dir).map_err(|e| EmbeddingError::ProviderUnavailable(e.to_string()))?;
        }
        Ok(Self {
            client,
            url: format!("{}/embeddings", c.base_url.trim_end_matches('/')),
            model: c.model.clone(),
            api_key: std::env::var(&c.api_key_env).ok(),
            dim: c.dim,
            max_retries: c.max_retries,
            cache_dir: c.cache_dir.clone(),
            gate: Gate::new(c.concurrency),
        })
    }

    fn cache_path(&self, text: &str) -> Option<PathBuf> {
        let dir = self.cache_dir.as_ref()?;
        let mut h = Sha256::new();
        h.update(self.model.as_bytes());
        h.update([0]);
        h.update(text.as_bytes());
        Some(dir.join(format!("{}.json", hex::encode(h.finalize()))))
    }

    fn request(&self, text: &str) -> Result<Vec<f64>, String> {
        let _permit = self.gate.acquire();
        let mut req = self
            .client
            .post(&self.url)
            .json(&serde_json::json!({ "model": self.model, "input": text }));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        if !resp.status().is_success() {
            return Err(format!("HTTP {}", resp.status()));
        }
        let body: EmbeddingResponse = resp.json().map_err(|e| e.to_string())?;
        body.data
            .into_iter()
            .next()
            .map(|d| d.embedding)
            .ok_or_else(|| "response without data".to_string())
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn id(&self) -> String {
        format!("remote:{}", self.model)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding, EmbeddingError> {
        if text.trim().is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        let path = self.cache_path(text);
        if let Some(p) = &path {
            if let Ok(bytes) = std::fs::read(p) {
                if let Ok(e) = serde_json::from_slice::<Embedding>(&bytes) {
                    return Ok(e);
                }
            }
        }
        let mut last = String::new();
        for attempt in 0..=self.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(200 << attempt.min(5)));
            }
            match self.request(text) {
                Ok(values) => {
                    if values.len() != self.dim {
                        return Err(EmbeddingError::DimensionMismatch { expected: self.dim, found: values.len() });
                    }
                    let e = Embedding { values };
                    if let Some(p) = &path {
                        if let Err(err) = std::fs::write(p, serde_json::to_vec(&e).expect("serializes")) {
                            tracing::warn!("embedding cache write failed: {err}");
                        }
                    }
                    return Ok(e);
                }
                Err(e) => {
                    tracing::warn!(attempt, "embedding request failed: {e}");
                    last = e;
                }
            }
        }
        Err(EmbeddingError::ProviderUnavailable(last))
    }
}

/// Read-through cache keyed by (provider, text).
pub struct CachedEmbedder {
    inner: Arc<dyn EmbeddingProvider>,
    cache: RwLock<HashMap<(String, String), Embedding>>,
}

impl CachedEmbedder {
    pub fn new(inner: Arc<dyn EmbeddingProvider>) -> Self {
        Self { inner, cache: RwLock::new(HashMap::new()) }
    }

    pub fn len(&self) -> usize {
        self.cache.read().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl EmbeddingProvider for CachedEmbedder {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed(&self, text: &str) -> Result<Embedding, EmbeddingError> {
        let key = (self.inner.id(), text.to_string());
        if let Some(e) = self.cache.read().unwrap_or_else(|e| e.into_inner()).get(&key) {
            return Ok(e.clone());
        }
        let e = self.inner.embed(text)?;
        self.cache
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(key, e.clone());
        Ok(e)
    }
}

/// Builds the provider named in the configuration, wrapped in a cache.
pub fn provider_from_config(c: &EmbeddingConfig) -> Result<Arc<dyn EmbeddingProvider>, EmbeddingError> {
    let inner: Arc<dyn EmbeddingProvider> = match c.provider {
        EmbeddingProviderKind::Mock => Arc::new(MockEmbedder::new(c.dim, c.seed)),
        EmbeddingProviderKind::Remote => Arc::new(RemoteEmbedder::from_config(c)?),
    };
    Ok(Arc::new(CachedEmbedder::new(inner)))
}

/// Mean of the two cosines, each clamped to `[0, 1]`.
pub fn combine_relevance(cos_statement: f64, cos_query: f64) -> f64 {
    (cos_statement.clamp(0.0, 1.0) + cos_query.clamp(0.0, 1.0)) / 2.0
}

/// Relevance of a fact description to the statement and the query.
pub fn relevance(
    provider: &dyn EmbeddingProvider,
    description: &str,
    statement: &str,
    query: &str,
) -> Result<f64, EmbeddingError> {
    let d = provider.embed(description)?;
    let s = provider.embed(statement)?;
    let q = provider.embed(query)?;
    Ok(combine_relevance(cosine(&d, &s), cosine(&d, &q)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldMatch {
    pub field: FieldDescriptor,
    pub similarity: f64,
}

/// Text embedded for a field: dataset name, field name and samples.
pub fn field_text(dataset_name: &str, field: &FieldDescriptor) -> String {
    let samples: Vec<String> = field.sample_values.iter().map(|c| c.render()).collect();
    if samples.is_empty() {
        format!("{dataset_name}: {}", field.name)
    } else {
        format!("{dataset_name}: {} ({})", field.name, samples.join(", "))
    }
}

/// Embeddings of one field: its descriptive text and its bare name.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldEmbedding {
    pub field: FieldDescriptor,
    pub text: Embedding,
    pub name: Embedding,
}

impl FieldEmbedding {
    /// Similarity of a query: the better of the two cosines.
    pub fn similarity(&self, q: &Embedding) -> f64 {
        cosine(q, &self.text).max(cosine(q, &self.name))
    }
}

/// Precomputed embeddings of every field in a store.
#[derive(Debug, Clone, Default)]
pub struct FieldIndex {
    entries: Vec<FieldEmbedding>,
}

impl FieldIndex {
    pub fn build(store: &DatasetStore, provider: &dyn EmbeddingProvider) -> Result<Self, EmbeddingError> {
        let mut entries = Vec::new();
        for d in store.datasets() {
            entries.extend(Self::embed_dataset(d, provider)?);
        }
        Ok(Self { entries })
    }

    fn embed_dataset(
        d: &Dataset,
        provider: &dyn EmbeddingProvider,
    ) -> Result<Vec<FieldEmbedding>, EmbeddingError> {
        d.fields
            .iter()
            .map(|f| {
                Ok(FieldEmbedding {
                    field: f.clone(),
                    text: provider.embed(&field_text(&d.name, f))?,
                    name: provider.embed(&f.name)?,
                })
            })
            .collect()
    }

    /// Adds or replaces the fields of one dataset.
    pub fn upsert(&mut self, d: &Dataset, provider: &dyn EmbeddingProvider) -> Result<(), EmbeddingError> {
        let fresh = Self::embed_dataset(d, provider)?;
        self.entries.retain(|e| e.field.dataset_id != d.id);
        self.entries.extend(fresh);
        Ok(())
    }

    pub fn from_entries(entries: Vec<FieldEmbedding>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The `k` most similar fields, ties broken by (dataset id, field name).
    pub fn top_k_fields(
        &self,
        provider: &dyn EmbeddingProvider,
        query: &str,
        k: usize,
    ) -> Result<Vec<FieldMatch>, EmbeddingError> {
        if self.entries.is_empty() {
            return Err(EmbeddingError::EmptyCatalog);
        }
        let q = provider.embed(query)?;
        let mut all: Vec<FieldMatch> = self
            .entries
            .iter()
            .map(|e| FieldMatch { field: e.field.clone(), similarity: e.similarity(&q) })
            .collect();
        all.sort_by(|a, b| {
            b.similarity
                .total_cmp(&a.similarity)
                .then_with(|| a.field.dataset_id.cmp(&b.field.dataset_id))
                .then_with(|| a.field.name.cmp(&b.field.name))
        });
        all.truncate(k);
        Ok(all)
    }
}

/// The `n` distinct `series` values of a dataset closest to the query.
pub fn relevant_series(
    d: &Dataset,
    provider: &dyn EmbeddingProvider,
    query: &str,
    n: usize,
) -> Result<Vec<String>, EmbeddingError> {
    let q = provider.embed(query)?;
    let mut scored: Vec<(f64, String)> = Vec::new();
    for v in d.distinct_values("series") {
        let text = v.render();
        let s = cosine(&q, &provider.embed(&text)?);
        scored.push((s, text));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(n).map(|(_, t)| t).collect())
}
