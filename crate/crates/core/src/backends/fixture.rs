//! Closed-world search over a local corpus directory.
//!
//! Layout: `<corpus>/<fingerprint>/manifest.json` plus one text file per
//! document. The manifest lists documents in rank order:
//! `{"query": "...", "documents": [{"doc_id", "title", "file"}]}`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendError, SearchBackend, SearchResultSet};
use crate::trajectory::RetrievedDocument;

/// Normalized query digest: lowercase, whitespace collapsed, first 16 hex chars of SHA-256.
pub fn query_fingerprint(query: &str) -> String {
    let normalized = query
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    let digest = Sha256::digest(normalized.as_bytes());
    hex::encode(&digest[..8])
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    query: String,
    documents: Vec<ManifestDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestDoc {
    doc_id: String,
    #[serde(default)]
    title: String,
    file: String,
}

#[derive(Debug, Clone, Default)]
pub struct FixtureSearch {
    entries: HashMap<String, Vec<RetrievedDocument>>,
}

impl FixtureSearch {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register documents for a query in memory. Ranks are reassigned 1..n.
    pub fn add(&mut self, query: &str, documents: Vec<RetrievedDocument>) {
        let docs = documents
            .into_iter()
            .enumerate()
            .map(|(i, d)| RetrievedDocument {
                rank: i as u32 + 1,
                ..d
            })
            .collect();
        self.entries.insert(query_fingerprint(query), docs);
    }

    pub fn load(corpus: &Path) -> Result<Self, BackendError> {
        let io = |p: &Path, e: std::io::Error| {
            BackendError::InvalidRequest(format!("fixture corpus {}: {e}", p.display()))
        };
        let mut search = Self::new();
        let mut dirs: Vec<_> = std::fs::read_dir(corpus)
            .map_err(|e| io(corpus, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.join("manifest.json").is_file())
            .collect();
        dirs.sort();
        for dir in dirs {
            let manifest_path = dir.join("manifest.json");
            let text = std::fs::read_to_string(&manifest_path).map_err(|e| io(&manifest_path, e))?;
            let manifest: Manifest = serde_json::from_str(&text).map_err(|e| {
                BackendError::InvalidRequest(format!("{}: {e}", manifest_path.display()))
            })?;
            let mut docs = Vec::with_capacity(manifest.documents.len());
            for d in manifest.documents {
                let path = dir.join(&d.file);
                let content = std::fs::read_to_string(&path).map_err(|e| io(&path, e))?;
                docs.push(RetrievedDocument {
                    doc_id: d.doc_id,
                    title: d.title,
                    content,
                    rank: 0,
                });
            }
            search.add(&manifest.query, docs);
        }
        Ok(search)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl SearchBackend for FixtureSearch {
    fn search(&self, query: &str, top_k: usize) -> Result<SearchResultSet, BackendError> {
        if query.trim().is_empty() {
            return Err(BackendError::InvalidRequest("empty search query".into()));
        }
        let documents = self
            .entries
            .get(&query_fingerprint(query))
            .map(|docs| docs.iter().take(top_k).cloned().collect())
            .unwrap_or_default();
        Ok(SearchResultSet {
            query_string: query.to_string(),
            documents,
        })
    }
}

/// Write one query's documents into a corpus directory in the fixture layout.
pub fn write_corpus_entry(
    corpus: &Path,
    query: &str,
    documents: &[RetrievedDocument],
) -> std::io::Result<()> {
    let dir = corpus.join(query_fingerprint(query));
    std::fs::create_dir_all(&dir)?;
    let mut manifest = Manifest {
        query: query.to_string(),
        documents: Vec::new(),
    };
    for (i, d) in documents.iter().enumerate() {
        let file = format!("{:02}.txt", i + 1);
        std::fs::write(dir.join(&file), &d.content)?;
        manifest.documents.push(ManifestDoc {
            doc_id: d.doc_id.clone(),
            title: d.title.clone(),
            file,
        });
    }
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str) -> RetrievedDocument {
        RetrievedDocument {
            doc_id: id.into(),
            title: format!("title {id}"),
            content: format!("content of {id}"),
            rank: 0,
        }
    }

    #[test]
    fn corpus_on_disk_serves_ranked_documents() {
        let dir = tempfile::tempdir().unwrap();
        let docs: Vec<_> = (1..=5).map(|i| doc(&format!("d{i}"))).collect();
        write_corpus_entry(dir.path(), "Eiffel Tower year", &docs).unwrap();
        let search = FixtureSearch::load(dir.path()).unwrap();
        let res = search.search("  eiffel   tower YEAR ", 5).unwrap();
        assert_eq!(res.documents.len(), 5);
        let ranks: Vec<u32> = res.documents.iter().map(|d| d.rank).collect();
        assert_eq!(ranks, vec![1, 2, 3, 4, 5]);
        assert_eq!(res.documents[2].content, "content of d3");
        assert_eq!(search.search("eiffel tower year", 2).unwrap().documents.len(), 2);
    }

    #[test]
    fn unknown_query_is_empty() {
        let search = FixtureSearch::new();
        assert!(search.search("nothing here", 5).unwrap().documents.is_empty());
    }
}
