//! Sources of query and canonical text embeddings.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maps text to unit embeddings in the same space as the feature pyramid.
pub trait TextEmbedder: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

/// Fixed lookup table; unknown text is an error.
#[derive(Debug, Clone, Default)]
pub struct StaticEmbedder {
    pub entries: BTreeMap<String, Vec<f64>>,
}

impl TextEmbedder for StaticEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        texts
            .iter()
            .map(|t| {
                self.entries
                    .get(t)
                    .cloned()
                    .ok_or_else(|| Error::InvalidArgument(format!("no embedding for text '{t}'")))
            })
            .collect()
    }
}

/// One query embedding plus, optionally, the canonicals to score it against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingFile {
    #[serde(default)]
    pub label: Option<String>,
    pub embedding: Vec<f64>,
    #[serde(default)]
    pub canonicals: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub canonical_labels: Option<Vec<String>>,
}

impl EmbeddingFile {
    /// Accepts either this object or a bare JSON array of floats.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if let Ok(v) = serde_json::from_str::<Vec<f64>>(&text) {
            return Ok(Self {
                label: None,
                embedding: v,
                canonicals: None,
                canonical_labels: None,
            });
        }
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidArgument(format!("{}: not an embedding file: {e}", path.display())))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}
