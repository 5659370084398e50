//! Interfaces to the external models: embedder, LLM and web image search.
//!
//! Every agent talks to models through these traits. The mocks are pure
//! functions of their inputs so whole pipelines replay bit-identically
//! offline; the HTTP clients are meant to be wrapped in [`Cached`] (and
//! usually [`Retrying`]) for the same reason.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ClientError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("unavailable: {0}")]
    Unavailable(String),
}

impl ClientError {
    pub fn transport(message: impl Into<String>) -> Self {
        ClientError::Transport { attempts: 1, message: message.into() }
    }
}

/// Reference to an image: a URL or a local fixture path.
pub type ImageRef = String;

pub trait EmbeddingClient: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed_text(&self, text: &str) -> Result<Vec<f32>, ClientError>;
    fn embed_image(&self, image: &str) -> Result<Vec<f32>, ClientError>;
}

pub trait LlmClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, ClientError>;
}

pub trait ImageSearchClient: Send + Sync {
    fn search_images(&self, query: &str, n: usize) -> Result<Vec<ImageRef>, ClientError>;
}

impl<T: EmbeddingClient + ?Sized> EmbeddingClient for Arc<T> {
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn embed_text(&self, text: &str) -> Result<Vec<f32>, ClientError> {
        (**self).embed_text(text)
    }
    fn embed_image(&self, image: &str) -> Result<Vec<f32>, ClientError> {
        (**self).embed_image(image)
    }
}

impl<T: LlmClient + ?Sized> LlmClient for Arc<T> {
    fn complete(&self, prompt: &str) -> Result<String, ClientError> {
        (**self).complete(prompt)
    }
}

impl<T: ImageSearchClient + ?Sized> ImageSearchClient for Arc<T> {
    fn search_images(&self, query: &str, n: usize) -> Result<Vec<ImageRef>, ClientError> {
        (**self).search_images(query, n)
    }
}

/// Deterministic unit vector derived from SHA-256 of `seed || input`.
///
/// Components are drawn uniformly from [-1, 1) using successive hash blocks
/// in counter mode, then L2-normalized.
pub fn mock_embed(input: &str, dimension: usize, seed: u64) -> Vec<f32> {
    assert!(dimension >= 2, "mock embeddings need dimension >= 2");
    let mut base = Sha256::new();
    base.update(seed.to_le_bytes());
    base.update((input.len() as u64).to_le_bytes());
    base.update(input.as_bytes());
    let mut out = Vec::with_capacity(dimension);
    let mut counter = 0u64;
    while out.len() < dimension {
        let mut h = base.clone();
        h.update(counter.to_le_bytes());
        let block = h.finalize();
        for chunk in block.chunks_exact(4) {
            if out.len() == dimension {
                break;
            }
            let bits = u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            // 24 high bits -> [0,1) exactly representable in f64
            let unit = (bits >> 8) as f64 / (1u64 << 24) as f64;
            out.push(2.0 * unit - 1.0);
        }
        counter += 1;
    }
    let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
    out.into_iter().map(|x| (x / norm) as f32).collect()
}

/// Hash-based embedder. Images are embedded from their reference string, so
/// fixtures can place keyframes near a given reference.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    dimension: usize,
    seed: u64,
}

impl MockEmbedder {
    pub fn new(dimension: usize, seed: u64) -> Self {
        assert!(dimension >= 2, "mock embeddings need dimension >= 2");
        Self { dimension, seed }
    }
}

impl EmbeddingClient for MockEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>, ClientError> {
        Ok(mock_embed(text, self.dimension, self.seed))
    }

    fn embed_image(&self, image: &str) -> Result<Vec<f32>, ClientError> {
        Ok(mock_embed(&format!("image:{image}"), self.dimension, self.seed))
    }
}

/// Replies with the numbered lines of the prompt unchanged, or with the last
/// non-empty line when there are none. Used for OCR refinement in mock mode.
#[derive(Debug, Clone, Default)]
pub struct EchoLlm;

impl LlmClient for EchoLlm {
    fn complete(&self, prompt: &str) -> Result<String, ClientError> {
        let numbered: Vec<&str> = prompt
            .lines()
            .filter(|l| crate::ocr_refine::parse_numbered_line(l).is_some())
            .collect();
        if !numbered.is_empty() {
            return Ok(numbered.join("\n"));
        }
        Ok(prompt.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("ok").to_string())
    }
}

/// Adapts a closure into an [`LlmClient`]; handy for scripted replies.
pub struct FnLlm<F>(pub F);

impl<F> LlmClient for FnLlm<F>
where
    F: Fn(&str) -> Result<String, ClientError> + Send + Sync,
{
    fn complete(&self, prompt: &str) -> Result<String, ClientError> {
        (self.0)(prompt)
    }
}

/// Exact-match table from query to image references.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(transparent)]
pub struct FixtureImageSearch {
    table: BTreeMap<String, Vec<ImageRef>>,
}

impl FixtureImageSearch {
    pub fn new(table: BTreeMap<String, Vec<ImageRef>>) -> Self {
        Self { table }
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ClientError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ClientError::Unavailable(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ClientError::Malformed(format!("{}: {e}", path.display())))
    }
}

impl ImageSearchClient for FixtureImageSearch {
    fn search_images(&self, query: &str, n: usize) -> Result<Vec<ImageRef>, ClientError> {
        let mut out: Vec<ImageRef> = Vec::new();
        for r in self.table.get(query).into_iter().flatten() {
            if out.len() == n {
                break;
            }
            if !out.contains(r) {
                out.push(r.clone());
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { retries: 2, base_delay: Duration::from_millis(200) }
    }
}

impl RetryPolicy {
    fn run<T>(&self, mut op: impl FnMut() -> Result<T, ClientError>) -> Result<T, ClientError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            match op() {
                Err(ClientError::Transport { message, .. }) => {
                    if attempt > self.retries {
                        return Err(ClientError::Transport { attempts: attempt, message });
                    }
                    std::thread::sleep(self.base_delay * 2u32.pow(attempt - 1));
                }
                other => return other,
            }
        }
    }
}

/// Retries transport errors with exponential backoff.
pub struct Retrying<C> {
    inner: C,
    policy: RetryPolicy,
}

impl<C> Retrying<C> {
    pub fn new(inner: C, policy: RetryPolicy) -> Self {
        Self { inner, policy }
    }
}

impl<C: LlmClient> LlmClient for Retrying<C> {
    fn complete(&self, prompt: &str) -> Result<String, ClientError> {
        self.policy.run(|| self.inner.complete(prompt))
    }
}

impl<C: EmbeddingClient> EmbeddingClient for Retrying<C> {
    fn dimension(&self) -> usize {
        self.inner.dimension()
    }
    fn embed_text(&self, text: &str) -> Result<Vec<f32>, ClientError> {
        self.policy.run(|| self.inner.embed_text(text))
    }
    fn embed_image(&self, image: &str) -> Result<Vec<f32>, ClientError> {
        self.policy.run(|| self.inner.embed_image(image))
    }
}

impl<C: ImageSearchClient> ImageSearchClient for Retrying<C> {
    fn search_images(&self, query: &str, n: usize) -> Result<Vec<ImageRef>, ClientError> {
        self.policy.run(|| self.inner.search_images(query, n))
    }
}

/// Memoizes successful responses keyed by request content.
pub struct Cached<C> {
    inner: C,
    cache: Mutex<HashMap<String, String>>,
}

impl<C> Cached<C> {
    pub fn new(inner: C) -> Self {
        Self { inner, cache: Mutex::new(HashMap::new()) }
    }

    pub fn len(&self) -> usize {
        self.cache.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get_or<T>(
        &self,
        key: String,
        fetch: impl FnOnce() -> Result<T, ClientError>,
        encode: impl FnOnce(&T) -> String,
        decode: impl FnOnce(&str) -> Option<T>,
    ) -> Result<T, ClientError> {
        if let Some(hit) = self.cache.lock().unwrap().get(&key).and_then(|s| decode(s)) {
            return Ok(hit);
        }
        let value = fetch()?;
        self.cache.lock().unwrap().entry(key).or_insert_with(|| encode(&value));
        Ok(value)
    }
}

impl<C: LlmClient> LlmClient for Cached<C> {
    fn complete(&self, prompt: &str) -> Result<String, ClientError> {
        self.get_or(
            format!("llm\0{prompt}"),
            || self.inner.complete(prompt),
            String::clone,
            |s| Some(s.to_string()),
        )
    }
}

impl<C: EmbeddingClient> EmbeddingClient for Cached<C> {
    fn dimension(&self) -> usize {
        self.inner.dimension()
    }
    fn embed_text(&self, text: &str) -> Result<Vec<f32>, ClientError> {
        self.get_or(
            format!("text\0{text}"),
            || self.inner.embed_text(text),
            |v| serde_json::to_string(v).unwrap_or_default(),
            |s| serde_json::from_str(s).ok(),
        )
    }
    fn embed_image(&self, image: &str) -> Result<Vec<f32>, ClientError> {
        self.get_or(
            format!("image\0{image}"),
            || self.inner.embed_image(image),
            |v| serde_json::to_string(v).unwrap_or_default(),
            |s| serde_json::from_str(s).ok(),
        )
    }
}

impl<C: ImageSearchClient> ImageSearchClient for Cached<C> {
    fn search_images(&self, query: &str, n: usize) -> Result<Vec<ImageRef>, ClientError> {
        self.get_or(
            format!("img\0{n}\0{query}"),
            || self.inner.search_images(query, n),
            |v| serde_json::to_string(v).unwrap_or_default(),
            |s| serde_json::from_str(s).ok(),
        )
    }
}

fn http_client(timeout: Duration) -> Result<reqwest::blocking::Client, ClientError> {
    reqwest::blocking::Client::builder()
        .timeout(timeout)
        .build()
        .map_err(|e| ClientError::Unavailable(e.to_string()))
}

fn send_json(req: reqwest::blocking::RequestBuilder) -> Result<serde_json::Value, ClientError> {
    let resp = req.send().map_err(|e| ClientError::transport(e.to_string()))?;
    let status = resp.status();
    if status.is_server_error() || status.as_u16() == 429 {
        return Err(ClientError::transport(format!("HTTP {status}")));
    }
    if !status.is_success() {
        return Err(ClientError::Unavailable(format!("HTTP {status}")));
    }
    resp.json().map_err(|e| ClientError::Malformed(e.to_string()))
}

/// Gemini-style `generateContent` client.
pub struct HttpLlm {
    endpoint: String,
    api_key: String,
    client: reqwest::blocking::Client,
}

impl HttpLlm {
    pub fn new(endpoint: impl Into<String>, api_key: impl Into<String>) -> Result<Self, ClientError> {
        Ok(Self { endpoint: endpoint.into(), api_key: api_key.into(), client: http_client(Duration::from_secs(60))? })
    }
}

impl LlmClient for HttpLlm {
    fn complete(&self, prompt: &str) -> Result<String, ClientError> {
        let body = serde_json::json!({
            "contents": [{ "parts": [{ "text": prompt }] }],
            "generationConfig": { "temperature": 0.0 }
        });
        let value = send_json(
            self.client.post(&self.endpoint).header("x-goog-api-key", &self.api_key).json(&body),
        )?;
        let text = value["candidates"][0]["content"]["parts"]
            .as_array()
            .map(|parts| parts.iter().filter_map(|p| p["text"].as_str()).collect::<String>())
            .unwrap_or_default();
        if text.trim().is_empty() {
            return Err(ClientError::Malformed("empty completion".into()));
        }
        Ok(text)
    }
}

/// Custom-Search-style image search (`items[].link`).
pub struct HttpImageSearch {
    endpoint: String,
    api_key: String,
    engine_id: String,
    client: reqwest::blocking::Client,
}

impl HttpImageSearch {
    pub fn new(
        endpoint: impl Into<String>,
        api_key: impl Into<String>,
        engine_id: impl Into<String>,
    ) -> Result<Self, ClientError> {
        Ok(Self {
            endpoint: endpoint.into(),
            api_key: api_key.into(),
            engine_id: engine_id.into(),
            client: http_client(Duration::from_secs(30))?,
        })
    }
}

impl ImageSearchClient for HttpImageSearch {
    fn search_images(&self, query: &str, n: usize) -> Result<Vec<ImageRef>, ClientError> {
        if n == 0 {
            return Ok(Vec::new());
        }
        let num = n.min(10).to_string();
        let value = send_json(self.client.get(&self.endpoint).query(&[
            ("key", self.api_key.as_str()),
            ("cx", self.engine_id.as_str()),
            ("q", query),
            ("searchType", "image"),
            ("num", num.as_str()),
        ]))?;
        let mut out: Vec<ImageRef> = Vec::new();
        for link in value["items"].as_array().into_iter().flatten().filter_map(|i| i["link"].as_str()) {
            if out.len() < n && !out.iter().any(|r| r == link) {
                out.push(link.to_string());
            }
        }
        Ok(out)
    }
}

/// Embedding server speaking `{"text": ..}` / `{"image": ..}` -> `{"embedding": [..]}`.
pub struct HttpEmbedder {
    endpoint: String,
    dimension: usize,
    client: reqwest::blocking::Client,
}

impl HttpEmbedder {
    pub fn new(endpoint: impl Into<String>, dimension: usize) -> Result<Self, ClientError> {
        Ok(Self { endpoint: endpoint.into(), dimension, client: http_client(Duration::from_secs(30))? })
    }

    fn embed(&self, body: serde_json::Value) -> Result<Vec<f32>, ClientError> {
        let value = send_json(self.client.post(&self.endpoint).json(&body))?;
        let v: Vec<f32> = serde_json::from_value(value["embedding"].clone())
            .map_err(|e| ClientError::Malformed(e.to_string()))?;
        if v.len() != self.dimension || v.iter().any(|x| !x.is_finite()) {
            return Err(ClientError::Malformed(format!(
                "expected {} finite components, got {}",
                self.dimension,
                v.len()
            )));
        }
        Ok(v)
    }
}

impl EmbeddingClient for HttpEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }
    fn embed_text(&self, text: &str) -> Result<Vec<f32>, ClientError> {
        self.embed(serde_json::json!({ "text": text }))
    }
    fn embed_image(&self, image: &str) -> Result<Vec<f32>, ClientError> {
        self.embed(serde_json::json!({ "image": image }))
    }
}
