use std::collections::{BTreeSet, HashMap};
use std::sync::Mutex;

use serde_json::{json, Value};

use super::http::{post_json, HttpSettings};
use super::ProviderError;

pub trait EmbeddingProvider: Send + Sync {
    /// A score in `[0, 1]`; symmetric, and 1 for identical nonempty inputs.
    fn similarity(&self, a: &str, b: &str) -> Result<f64, ProviderError>;
}

fn tokens(s: &str) -> BTreeSet<String> {
    s.split(|c: char| c.is_whitespace() || matches!(c, '.' | '_' | '-'))
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Jaccard similarity of case-folded token sets, splitting on whitespace,
/// `.`, `_` and `-`. Two token-free inputs score 0.
pub fn token_overlap_similarity(a: &str, b: &str) -> f64 {
    let (ta, tb) = (tokens(a), tokens(b));
    let union = ta.union(&tb).count();
    if union == 0 {
        return 0.0;
    }
    ta.intersection(&tb).count() as f64 / union as f64
}

/// Deterministic embedder backed by [`token_overlap_similarity`].
#[derive(Debug, Clone, Copy, Default)]
pub struct TokenOverlap;

impl EmbeddingProvider for TokenOverlap {
    fn similarity(&self, a: &str, b: &str) -> Result<f64, ProviderError> {
        Ok(token_overlap_similarity(a, b))
    }
}

/// Embedding endpoint client (`POST {base_url}/embeddings`). Cosine scores
/// are mapped to `[0, 1]` by `(s + 1) / 2`; vectors are cached per text.
pub struct HttpEmbedder {
    settings: HttpSettings,
    key: String,
    cache: Mutex<HashMap<String, Vec<f64>>>,
}

impl HttpEmbedder {
    pub fn new(settings: HttpSettings, key: String) -> Self {
        HttpEmbedder { settings, key, cache: Mutex::new(HashMap::new()) }
    }

    pub fn from_env(settings: HttpSettings) -> Result<Self, ProviderError> {
        let key = settings.read_key()?;
        Ok(Self::new(settings, key))
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        if let Some(v) = self.cache.lock().expect("embedding cache lock").get(text) {
            return Ok(v.clone());
        }
        let body = json!({ "model": self.settings.model, "input": [text] });
        let reply = post_json(&self.settings, &self.key, "embeddings", &body)?;
        let vector: Vec<f64> = reply
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| ProviderError::MalformedResponse("missing data[0].embedding".into()))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| ProviderError::MalformedResponse("non-numeric embedding".into())))
            .collect::<Result<_, _>>()?;
        self.cache.lock().expect("embedding cache lock").insert(text.to_string(), vector.clone());
        Ok(vector)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn similarity(&self, a: &str, b: &str) -> Result<f64, ProviderError> {
        if a == b && !a.trim().is_empty() {
            return Ok(1.0);
        }
        let (va, vb) = (self.embed(a)?, self.embed(b)?);
        Ok((cosine(&va, &vb) + 1.0) / 2.0)
    }
}
