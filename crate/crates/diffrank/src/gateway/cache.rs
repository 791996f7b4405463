//! Content-addressed response cache. Entries are written once, atomically,
//! and never rewritten.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ChatRequest, GatewayError, Result};
use crate::digest::sha256_parts;
use crate::io::{to_json_document, write_atomic};

#[derive(Debug, Clone)]
pub struct Cache {
    dir: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct ChatEntry {
    model_id: String,
    sample_index: u32,
    prompt: String,
    response: String,
}

#[derive(Serialize, Deserialize)]
struct EmbedEntry {
    model_id: String,
    input: String,
    embedding: Vec<f64>,
}

impl Cache {
    pub fn new(dir: PathBuf) -> Self {
        Self { dir }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn chat_key(model_id: &str, request: &ChatRequest) -> String {
        sha256_parts(&[
            b"chat",
            model_id.as_bytes(),
            &request.sample_index.to_le_bytes(),
            request.prompt.as_bytes(),
        ])
    }

    pub fn embed_key(model_id: &str, text: &str) -> String {
        sha256_parts(&[b"embed", model_id.as_bytes(), text.as_bytes()])
    }

    fn path(&self, kind: &str, key: &str) -> PathBuf {
        self.dir.join(kind).join(&key[..2]).join(format!("{key}.json"))
    }

    fn read<T: for<'de> Deserialize<'de>>(&self, kind: &str, key: &str) -> Option<T> {
        let bytes = std::fs::read(self.path(kind, key)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    fn write<T: Serialize>(&self, kind: &str, key: &str, entry: &T) -> Result<()> {
        let path = self.path(kind, key);
        if path.exists() {
            return Ok(());
        }
        write_atomic(&path, &to_json_document(entry)).map_err(|e| GatewayError::Cache(e.to_string()))
    }

    pub fn get_chat(&self, key: &str) -> Option<String> {
        self.read::<ChatEntry>("chat", key).map(|e| e.response)
    }

    pub fn put_chat(&self, key: &str, model_id: &str, request: &ChatRequest, response: &str) -> Result<()> {
        self.write(
            "chat",
            key,
            &ChatEntry {
                model_id: model_id.into(),
                sample_index: request.sample_index,
                prompt: request.prompt.clone(),
                response: response.into(),
            },
        )
    }

    pub fn get_embedding(&self, key: &str) -> Option<Vec<f64>> {
        self.read::<EmbedEntry>("embed", key).map(|e| e.embedding)
    }

    pub fn put_embedding(&self, key: &str, model_id: &str, text: &str, v: &[f64]) -> Result<()> {
        self.write(
            "embed",
            key,
            &EmbedEntry {
                model_id: model_id.into(),
                input: text.into(),
                embedding: v.to_vec(),
            },
        )
    }
}
