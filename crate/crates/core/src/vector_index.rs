//! Exact cosine top-k index over keyframe embeddings.
//!
//! Vectors are L2-normalized on insert, so a query is scored with one dot
//! product per stored vector. [`VectorIndexBuilder::freeze`] sorts entries by
//! key; ties in score therefore resolve by key without extra work, and the
//! ranking never depends on insertion order.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::io::{BufRead, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{FrameKey, VideoRef};

pub const MAGIC: &[u8; 8] = b"VSEMBED1";

#[derive(Debug, Error)]
pub enum VectorError {
    #[error("dimension mismatch: index has {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("vector for {0} has non-finite components")]
    NonFinite(String),
    #[error("zero vector for {0} cannot be normalized")]
    ZeroVector(String),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("dimension must be at least 1")]
    ZeroDimension,
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub key: FrameKey,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VectorHit {
    pub key: FrameKey,
    pub score: f32,
}

/// Predicate restricting which keys a search may return.
pub type ScopeFilter<'a> = &'a (dyn Fn(&FrameKey) -> bool + Sync);

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut sum: f32 = acc.iter().sum();
    for (x, y) in ra.iter().zip(rb) {
        sum += x * y;
    }
    sum
}

fn normalized(label: &dyn Fn() -> String, v: &[f32]) -> Result<Vec<f32>, VectorError> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(VectorError::NonFinite(label()));
    }
    let norm = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(VectorError::ZeroVector(label()));
    }
    Ok(v.iter().map(|x| (*x as f64 / norm) as f32).collect())
}

#[derive(Debug, Clone)]
pub struct VectorIndexBuilder {
    dimension: usize,
    entries: BTreeMap<FrameKey, Vec<f32>>,
}

impl VectorIndexBuilder {
    pub fn new(dimension: usize) -> Result<Self, VectorError> {
        if dimension == 0 {
            return Err(VectorError::ZeroDimension);
        }
        Ok(Self { dimension, entries: BTreeMap::new() })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Normalizes and stores a vector. A repeated key replaces the old vector.
    pub fn add_embedding(&mut self, e: Embedding) -> Result<(), VectorError> {
        if e.vector.len() != self.dimension {
            return Err(VectorError::Dimension { expected: self.dimension, actual: e.vector.len() });
        }
        let v = normalized(&|| e.key.render(), &e.vector)?;
        self.entries.insert(e.key, v);
        Ok(())
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&FrameKey) -> bool) {
        self.entries.retain(|k, _| keep(k));
    }

    pub fn freeze(self) -> VectorIndex {
        let mut keys = Vec::with_capacity(self.entries.len());
        let mut data = Vec::with_capacity(self.entries.len() * self.dimension);
        for (k, v) in self.entries {
            keys.push(k);
            data.extend_from_slice(&v);
        }
        VectorIndex { dimension: self.dimension, keys, data }
    }
}

/// Frozen, read-only index. `Sync`, so any number of searches may run at once.
#[derive(Debug, Clone)]
pub struct VectorIndex {
    dimension: usize,
    keys: Vec<FrameKey>,
    data: Vec<f32>,
}

#[derive(PartialEq)]
struct Candidate {
    score: f32,
    idx: usize,
}

impl Eq for Candidate {}

// "Greater" means ranked earlier: higher score, then lower index (key order).
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score.total_cmp(&other.score).then_with(|| other.idx.cmp(&self.idx))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Keeps the `k` best candidates seen so far.
struct TopK {
    k: usize,
    heap: BinaryHeap<std::cmp::Reverse<Candidate>>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self { k, heap: BinaryHeap::with_capacity(k + 1) }
    }

    fn push(&mut self, c: Candidate) {
        if self.heap.len() < self.k {
            self.heap.push(std::cmp::Reverse(c));
        } else if let Some(worst) = self.heap.peek() {
            if c > worst.0 {
                self.heap.pop();
                self.heap.push(std::cmp::Reverse(c));
            }
        }
    }

    fn into_sorted(self) -> Vec<Candidate> {
        let mut v: Vec<Candidate> = self.heap.into_iter().map(|r| r.0).collect();
        v.sort_by(|a, b| b.cmp(a));
        v
    }
}

impl VectorIndex {
    pub fn empty(dimension: usize) -> Self {
        Self { dimension, keys: Vec::new(), data: Vec::new() }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[FrameKey] {
        &self.keys
    }

    pub fn get(&self, key: &FrameKey) -> Option<&[f32]> {
        self.keys.binary_search(key).ok().map(|i| self.row(i))
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dimension..(i + 1) * self.dimension]
    }

    fn prepare_query(&self, query: &[f32], k: usize) -> Result<Option<Vec<f32>>, VectorError> {
        if query.len() != self.dimension {
            return Err(VectorError::Dimension { expected: self.dimension, actual: query.len() });
        }
        if k == 0 {
            return Err(VectorError::ZeroK);
        }
        match normalized(&|| "query".to_string(), query) {
            Ok(q) => Ok(Some(q)),
            // a zero query is orthogonal to everything
            Err(VectorError::ZeroVector(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn score(&self, q: Option<&[f32]>, i: usize) -> f32 {
        q.map_or(0.0, |q| dot(q, self.row(i)).clamp(-1.0, 1.0))
    }

    /// Exact cosine top-k, ties broken by canonical key text.
    pub fn search(
        &self,
        query: &[f32],
        k: usize,
        scope: Option<ScopeFilter<'_>>,
    ) -> Result<Vec<VectorHit>, VectorError> {
        let q = self.prepare_query(query, k)?;
        let mut top = TopK::new(k);
        for (i, key) in self.keys.iter().enumerate() {
            if scope.is_some_and(|f| !f(key)) {
                continue;
            }
            top.push(Candidate { score: self.score(q.as_deref(), i), idx: i });
        }
        Ok(top
            .into_sorted()
            .into_iter()
            .map(|c| VectorHit { key: self.keys[c.idx].clone(), score: c.score })
            .collect())
    }

    /// Best `k` videos by their maximum keyframe similarity; ties by video.
    pub fn search_videos(
        &self,
        query: &[f32],
        k: usize,
        scope: Option<ScopeFilter<'_>>,
    ) -> Result<Vec<(VideoRef, f32)>, VectorError> {
        let q = self.prepare_query(query, k)?;
        // keys are sorted, so each video is a contiguous run
        let mut best: Vec<(usize, f32)> = Vec::new();
        let mut current: Option<(&VideoRef, usize, f32)> = None;
        for (i, key) in self.keys.iter().enumerate() {
            if scope.is_some_and(|f| !f(key)) {
                continue;
            }
            let s = self.score(q.as_deref(), i);
            match current {
                Some((v, first, m)) if *v == key.video => current = Some((v, first, m.max(s))),
                _ => {
                    if let Some((_, first, m)) = current {
                        best.push((first, m));
                    }
                    current = Some((&key.video, i, s));
                }
            }
        }
        if let Some((_, first, m)) = current {
            best.push((first, m));
        }
        let mut top = TopK::new(k);
        for (ordinal, (_, m)) in best.iter().enumerate() {
            top.push(Candidate { score: *m, idx: ordinal });
        }
        Ok(top
            .into_sorted()
            .into_iter()
            .map(|c| (self.keys[best[c.idx].0].video.clone(), c.score))
            .collect())
    }

    /// Writes the binary vector file and its `.keys` sidecar.
    pub fn save(&self, path: &Path) -> Result<(), VectorError> {
        let io = |p: &Path| {
            let path = p.display().to_string();
            move |source| VectorError::Io { path: path.clone(), source }
        };
        let mut w = BufWriter::new(std::fs::File::create(path).map_err(io(path))?);
        w.write_all(MAGIC).map_err(io(path))?;
        w.write_all(&(self.dimension as u32).to_le_bytes()).map_err(io(path))?;
        w.write_all(&(self.keys.len() as u64).to_le_bytes()).map_err(io(path))?;
        for x in &self.data {
            w.write_all(&x.to_le_bytes()).map_err(io(path))?;
        }
        w.flush().map_err(io(path))?;
        let sidecar = keys_path(path);
        let mut w = BufWriter::new(std::fs::File::create(&sidecar).map_err(io(&sidecar))?);
        for k in &self.keys {
            writeln!(w, "{k}").map_err(io(&sidecar))?;
        }
        w.flush().map_err(io(&sidecar))
    }
}

/// Sidecar key list path: `<file>.keys`.
pub fn keys_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".keys");
    PathBuf::from(s)
}

/// Reads embeddings from the binary format (header + little-endian f32 rows
/// + `.keys` sidecar).
pub fn read_binary(path: &Path) -> Result<(usize, Vec<Embedding>), VectorError> {
    let display = path.display().to_string();
    let fmt_err = |message: String| VectorError::Format { path: display.clone(), message };
    let bytes = std::fs::read(path).map_err(|source| VectorError::Io { path: display.clone(), source })?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(fmt_err("missing VSEMBED1 header".into()));
    }
    let dimension = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if dimension == 0 || body.len() != count * dimension * 4 {
        return Err(fmt_err(format!(
            "body has {} bytes, header promises {count} x {dimension} f32",
            body.len()
        )));
    }
    let sidecar = keys_path(path);
    let mut text = String::new();
    std::fs::File::open(&sidecar)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|source| VectorError::Io { path: sidecar.display().to_string(), source })?;
    let keys: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if keys.len() != count {
        return Err(fmt_err(format!("{} keys in sidecar, {count} vectors", keys.len())));
    }
    let mut out = Vec::with_capacity(count);
    for (i, (key, row)) in keys.iter().zip(body.chunks_exact(dimension * 4)).enumerate() {
        let key = FrameKey::parse(key.trim()).map_err(|e| fmt_err(format!("key line {}: {e}", i + 1)))?;
        let vector = row.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        out.push(Embedding { key, vector });
    }
    Ok((dimension, out))
}

/// Reads line-delimited `{"key": .., "vector": [..]}` records.
pub fn read_jsonl(path: &Path) -> Result<Vec<Embedding>, VectorError> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| VectorError::Io { path: display.clone(), source })?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| VectorError::Io { path: display.clone(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let e: Embedding = serde_json::from_str(&line)
            .map_err(|e| VectorError::Format { path: display.clone(), message: format!("line {}: {e}", i + 1) })?;
        out.push(e);
    }
    Ok(out)
}
