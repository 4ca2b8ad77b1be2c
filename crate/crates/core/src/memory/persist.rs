//! Memory store file: a header line
//! `{schema_version, embed_dim, tau_dup, embedding_model_id}` followed by one
//! JSON entry per line, success pool first. Embeddings are written as
//! shortest round-trip decimals, so save/load is bit-exact.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MemoryEntry, MemoryError, MemoryStore};

pub const STORE_SCHEMA_VERSION: &str = "1";

#[derive(Serialize, Deserialize)]
struct StoreHeader {
    schema_version: String,
    embed_dim: usize,
    tau_dup: f64,
    embedding_model_id: String,
}

pub fn render_store(store: &MemoryStore) -> String {
    let header = StoreHeader {
        schema_version: STORE_SCHEMA_VERSION.into(),
        embed_dim: store.embed_dim,
        tau_dup: store.tau_dup,
        embedding_model_id: store.embedding_model_id.clone(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for entry in store.entries() {
        out.push_str(&serde_json::to_string(entry).expect("entry serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_store(text: &str) -> Result<MemoryStore, MemoryError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or(MemoryError::ParseError {
        line: 1,
        message: "missing header".into(),
    })?;
    let header: StoreHeader = serde_json::from_str(first).map_err(|e| MemoryError::ParseError {
        line: 1,
        message: e.to_string(),
    })?;
    if header.schema_version != STORE_SCHEMA_VERSION {
        return Err(MemoryError::UnsupportedVersion(header.schema_version));
    }
    if !(header.tau_dup > 0.0 && header.tau_dup <= 1.0) {
        return Err(MemoryError::ParseError {
            line: 1,
            message: format!("tau_dup {} outside (0, 1]", header.tau_dup),
        });
    }
    let mut store = MemoryStore::new(header.embed_dim, header.tau_dup, header.embedding_model_id);
    let mut ids = HashSet::new();
    for (i, line) in lines {
        let entry: MemoryEntry =
            serde_json::from_str(line).map_err(|e| MemoryError::ParseError {
                line: i + 1,
                message: e.to_string(),
            })?;
        store.check_entry(&entry)?;
        if !ids.insert(entry.entry_id.clone()) {
            return Err(MemoryError::DuplicateEntryId(entry.entry_id));
        }
        store.push_unchecked(entry);
    }
    Ok(store)
}

pub fn save_store(store: &MemoryStore, path: &Path) -> Result<(), MemoryError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| MemoryError::Io(e.to_string()))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, render_store(store)).map_err(|e| MemoryError::Io(e.to_string()))?;
    std::fs::rename(&tmp, path).map_err(|e| MemoryError::Io(e.to_string()))
}

pub fn load_store(path: &Path) -> Result<MemoryStore, MemoryError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| MemoryError::Io(format!("{}: {e}", path.display())))?;
    parse_store(&text)
}
