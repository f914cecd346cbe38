//! Text embedding providers and query context assembly.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use anyhow::{Context, Result};
use lerf_core::provider::{EmbeddingFile, StaticEmbedder, TextEmbedder};
use lerf_core::pyramid::normalize_in_place;
use lerf_core::query::{QueryContext, CANONICAL_PHRASES};
use serde::{Deserialize, Serialize};

use crate::InputError;

pub const DEFAULT_PROVIDER: &str = "http://127.0.0.1:8765";

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
}

/// Client for a provider exposing `POST /embed {texts} -> {embeddings}`.
#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    pub url: String,
    pub timeout: Duration,
}

impl HttpEmbedder {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            timeout: Duration::from_secs(30),
        }
    }
}

impl TextEmbedder for HttpEmbedder {
    fn embed(&self, texts: &[String]) -> lerf_core::Result<Vec<Vec<f64>>> {
        use lerf_core::Error::Provider;
        let endpoint = format!("{}/embed", self.url.trim_end_matches('/'));
        // The blocking client owns a runtime, so it is built per call on the
        // calling (non-async) thread.
        let client = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| Provider(e.to_string()))?;
        let resp = client
            .post(&endpoint)
            .json(&EmbedRequest { texts })
            .send()
            .map_err(|e| {
                Provider(format!(
                    "{endpoint} is unreachable ({e}); pass --embedding-file to query with a precomputed embedding"
                ))
            })?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().unwrap_or_default();
            return Err(Provider(format!("{endpoint} returned {status}: {body}")));
        }
        let body: EmbedResponse = resp
            .json()
            .map_err(|e| Provider(format!("{endpoint} sent a malformed response: {e}")))?;
        if body.embeddings.len() != texts.len() {
            return Err(Provider(format!(
                "{endpoint} returned {} embeddings for {} texts",
                body.embeddings.len(),
                texts.len()
            )));
        }
        Ok(body.embeddings)
    }
}

/// Loads a JSON object mapping text to embedding.
pub fn load_text_table(path: &Path) -> Result<StaticEmbedder> {
    crate::session::require_file(path, "text embedding table")?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let entries: BTreeMap<String, Vec<f64>> =
        serde_json::from_str(&text).with_context(|| format!("{}: expected {{\"text\": [floats]}}", path.display()))?;
    Ok(StaticEmbedder { entries })
}

/// A static table when given, otherwise the HTTP provider.
pub fn make_embedder(table: Option<&Path>, provider: Option<&str>) -> Result<Box<dyn TextEmbedder>> {
    Ok(match table {
        Some(p) => Box::new(load_text_table(p)?),
        None => Box::new(HttpEmbedder::new(provider.unwrap_or(DEFAULT_PROVIDER))),
    })
}

pub fn default_canonical_phrases() -> Vec<String> {
    CANONICAL_PHRASES.iter().map(|s| s.to_string()).collect()
}

/// Where the query embedding comes from.
pub enum QuerySource {
    Text(String),
    Embedding { label: String, vector: Vec<f64> },
    File(EmbeddingFile),
}

/// Builds a query context, asking `embedder` only for what the inputs do
/// not already carry. Every vector is normalized exactly once here, so a
/// text query and its embedding give bit-identical scores.
pub fn build_context(
    source: QuerySource,
    canonical_phrases: &[String],
    embedder: &dyn TextEmbedder,
    temperature: f64,
) -> Result<QueryContext> {
    let (label, query, canonicals) = match source {
        QuerySource::Text(text) => {
            let mut texts = vec![text.clone()];
            texts.extend(canonical_phrases.iter().cloned());
            let mut all = embedder.embed(&texts)?;
            let query = all.remove(0);
            (text, query, Some((all, canonical_phrases.to_vec())))
        }
        QuerySource::Embedding { label, vector } => (label, vector, None),
        QuerySource::File(f) => {
            let canon = match (f.canonicals, f.canonical_labels) {
                (Some(c), labels) => {
                    let labels = labels.unwrap_or_else(|| {
                        (0..c.len())
                            .map(|i| canonical_phrases.get(i).cloned().unwrap_or_else(|| format!("canonical{i}")))
                            .collect()
                    });
                    Some((c, labels))
                }
                (None, _) => None,
            };
            (f.label.unwrap_or_else(|| "embedding".into()), f.embedding, canon)
        }
    };
    let (canonicals, labels) = match canonicals {
        Some(c) => c,
        None => (embedder.embed(canonical_phrases)?, canonical_phrases.to_vec()),
    };
    let query = unit(query, &label)?;
    let canonicals = canonicals
        .into_iter()
        .zip(&labels)
        .map(|(c, l)| unit(c, l))
        .collect::<Result<Vec<_>>>()?;
    Ok(QueryContext::with_labels(query, label, canonicals, labels, temperature)?)
}

fn unit(mut v: Vec<f64>, label: &str) -> Result<Vec<f64>> {
    if !(normalize_in_place(&mut v) > 0.0) || v.iter().any(|x| !x.is_finite()) {
        return Err(InputError(format!("embedding for '{label}' is zero or not finite")).into());
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> StaticEmbedder {
        let mut entries = BTreeMap::new();
        entries.insert("mug".to_string(), vec![0.3, 0.4, 1.2]);
        for (i, p) in CANONICAL_PHRASES.iter().enumerate() {
            let mut v = vec![0.1; 3];
            v[i % 3] = 2.0 + i as f64;
            entries.insert(p.to_string(), v);
        }
        StaticEmbedder { entries }
    }

    #[test]
    fn text_and_raw_vector_give_identical_contexts() {
        let t = table();
        let phrases = default_canonical_phrases();
        let by_text = build_context(QuerySource::Text("mug".into()), &phrases, &t, 10.0).unwrap();
        let by_vector = build_context(
            QuerySource::Embedding {
                label: "mug".into(),
                vector: t.entries["mug"].clone(),
            },
            &phrases,
            &t,
            10.0,
        )
        .unwrap();
        assert_eq!(by_text, by_vector);
        let n: f64 = by_text.query.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_embedding_is_rejected() {
        let t = table();
        let err = build_context(
            QuerySource::Embedding {
                label: "blank".into(),
                vector: vec![0.0; 3],
            },
            &default_canonical_phrases(),
            &t,
            10.0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("blank"));
    }
}
