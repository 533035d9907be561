//! Text embedders behind one pluggable contract.
//!
//! The seeded feature-hash embedder is the deterministic test embedder; an
//! HTTP client covers external embedding services, cached by content hash.

use std::cell::RefCell;
use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::math::fnv1a;

pub trait Embedder {
    fn dim(&self) -> usize;
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>>;
    fn id(&self) -> String;
}

// ---------------------------------------------------------------------------
// Seeded feature-hash embedder
// ---------------------------------------------------------------------------

/// Deterministic bag-of-words embedder: each lowercase alphanumeric token
/// hashes to a signed bucket; vectors are L2-normalized.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dim: 64, seed: 0 }
    }
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedder dimension must be positive");
        Self { dim, seed }
    }

    fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0f64; self.dim];
        for token in text
            .to_lowercase()
            .split(|c: char| !c.is_ascii_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            let mut bytes = self.seed.to_le_bytes().to_vec();
            bytes.extend_from_slice(token.as_bytes());
            let h = fnv1a(&bytes);
            let bucket = (h % self.dim as u64) as usize;
            let sign = if (h >> 32) & 1 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            v[0] = 1.0;
        } else {
            for x in &mut v {
                *x /= norm;
            }
        }
        v
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        if texts.is_empty() {
            return Err(Error::EmptyInput("texts to embed".into()));
        }
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }

    fn id(&self) -> String {
        format!("hash:{}:{}", self.dim, self.seed)
    }
}

// ---------------------------------------------------------------------------
// HTTP embedder
// ---------------------------------------------------------------------------

pub const EMBED_ENDPOINT_ENV: &str = "FACTSTEER_EMBED_ENDPOINT";
pub const EMBED_TOKEN_ENV: &str = "FACTSTEER_EMBED_TOKEN";
pub const EMBED_MODEL_ENV: &str = "FACTSTEER_EMBED_MODEL";

/// Posts `{"model", "input": [texts]}` and reads `data[i].embedding`;
/// responses are cached by sha256 of (model, text). Failed ids are named in
/// the error after one retry.
pub struct HttpEmbedder {
    endpoint: String,
    token: Option<String>,
    model: String,
    dim: usize,
    cache_dir: Option<PathBuf>,
    memory: RefCell<HashMap<String, Vec<f64>>>,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: Vec<&'a str>,
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedRow>,
}

#[derive(Deserialize)]
struct EmbedRow {
    embedding: Vec<f64>,
}

impl HttpEmbedder {
    pub fn new(
        endpoint: String,
        token: Option<String>,
        model: String,
        dim: usize,
        cache_dir: Option<PathBuf>,
    ) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| Error::Client(e.to_string()))?;
        Ok(Self {
            endpoint,
            token,
            model,
            dim,
            cache_dir,
            memory: RefCell::new(HashMap::new()),
            client,
        })
    }

    pub fn from_env(dim: usize, cache_dir: Option<PathBuf>) -> Result<Self> {
        let endpoint = std::env::var(EMBED_ENDPOINT_ENV)
            .map_err(|_| Error::Client(format!("{EMBED_ENDPOINT_ENV} not set")))?;
        let token = std::env::var(EMBED_TOKEN_ENV).ok();
        let model = std::env::var(EMBED_MODEL_ENV).unwrap_or_else(|_| "default".into());
        Self::new(endpoint, token, model, dim, cache_dir)
    }

    fn cache_key(&self, text: &str) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.model.as_bytes());
        hasher.update([0u8]);
        hasher.update(text.as_bytes());
        hex::encode(hasher.finalize())
    }

    fn lookup(&self, key: &str) -> Option<Vec<f64>> {
        if let Some(hit) = self.memory.borrow().get(key) {
            return Some(hit.clone());
        }
        let dir = self.cache_dir.as_ref()?;
        let text = std::fs::read_to_string(dir.join(key)).ok()?;
        let v: Vec<f64> = serde_json::from_str(&text).ok()?;
        self.memory.borrow_mut().insert(key.to_string(), v.clone());
        Some(v)
    }

    fn store(&self, key: &str, v: &[f64]) -> Result<()> {
        if let Some(dir) = &self.cache_dir {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join(key), serde_json::to_string(v)?)?;
        }
        self.memory
            .borrow_mut()
            .insert(key.to_string(), v.to_vec());
        Ok(())
    }

    fn request(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        let body = EmbedRequest {
            model: &self.model,
            input: texts.to_vec(),
        };
        let mut req = self.client.post(&self.endpoint).json(&body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| Error::Client(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(Error::Client(format!("endpoint status {}", resp.status())));
        }
        let parsed: EmbedResponse = resp.json().map_err(|e| Error::Client(e.to_string()))?;
        if parsed.data.len() != texts.len() {
            return Err(Error::Client(format!(
                "embedding service returned {} rows for {} texts",
                parsed.data.len(),
                texts.len()
            )));
        }
        Ok(parsed.data.into_iter().map(|r| r.embedding).collect())
    }
}

impl Embedder for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        if texts.is_empty() {
            return Err(Error::EmptyInput("texts to embed".into()));
        }
        let keys: Vec<String> = texts.iter().map(|t| self.cache_key(t)).collect();
        let mut out: Vec<Option<Vec<f64>>> = keys.iter().map(|k| self.lookup(k)).collect();
        let missing: Vec<usize> = (0..texts.len()).filter(|&i| out[i].is_none()).collect();
        if !missing.is_empty() {
            let batch: Vec<&str> = missing.iter().map(|&i| texts[i]).collect();
            let fetched = self.request(&batch).or_else(|_| self.request(&batch));
            match fetched {
                Ok(rows) => {
                    for (&i, row) in missing.iter().zip(rows) {
                        self.store(&keys[i], &row)?;
                        out[i] = Some(row);
                    }
                }
                Err(e) => {
                    return Err(Error::Client(format!(
                        "embedding failed for {} texts (first index {}): {e}",
                        missing.len(),
                        missing[0]
                    )));
                }
            }
        }
        Ok(out.into_iter().map(|v| v.unwrap()).collect())
    }

    fn id(&self) -> String {
        format!("http:{}:{}", self.endpoint, self.model)
    }
}
