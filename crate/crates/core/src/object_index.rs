//! Per-keyframe object detections with AND/OR label filtering.
//!
//! Detections live in one JSON document keyed by canonical frame key. The
//! file is parsed on first use only; concurrent first users share a single
//! parse.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::FrameKey;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ObjectError {
    #[error("cannot read detections file {path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed detections file {path} at line {line}, column {column}: {message}")]
    Parse { path: String, line: usize, column: usize, message: String },
    #[error("invalid detection for {key}: {message}")]
    Invalid { key: String, message: String },
    #[error("object query needs at least one label")]
    EmptyQuery,
    #[error("min_score {0} outside [0,1]")]
    MinScore(f32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    pub score: f32,
    /// (x, y, w, h), normalized to [0, 1].
    pub bbox: [f32; 4],
}

impl Detection {
    fn validate(&self) -> Result<(), String> {
        if self.label.trim().is_empty() {
            return Err("empty label".into());
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(format!("score {} outside [0,1]", self.score));
        }
        let [x, y, w, h] = self.bbox;
        if [x, y, w, h].iter().any(|c| !(0.0..=1.0).contains(c)) || w <= 0.0 || h <= 0.0 {
            return Err(format!("bbox {:?} not normalized", self.bbox));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "UPPERCASE")]
pub enum MatchMode {
    And,
    #[default]
    Or,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectQuery {
    pub labels: Vec<String>,
    pub mode: MatchMode,
    #[serde(default)]
    pub min_score: f32,
}

impl ObjectQuery {
    /// Builds a query with labels deduplicated in first-seen order.
    pub fn new(labels: impl IntoIterator<Item = impl Into<String>>, mode: MatchMode, min_score: f32) -> Result<Self, ObjectError> {
        let mut seen = BTreeSet::new();
        let labels: Vec<String> = labels
            .into_iter()
            .map(Into::into)
            .map(|l: String| l.trim().to_lowercase())
            .filter(|l| !l.is_empty() && seen.insert(l.clone()))
            .collect();
        if labels.is_empty() {
            return Err(ObjectError::EmptyQuery);
        }
        if !(0.0..=1.0).contains(&min_score) {
            return Err(ObjectError::MinScore(min_score));
        }
        Ok(Self { labels, mode, min_score })
    }

    /// Re-applies the constructor invariants to a deserialized query.
    pub fn normalized(&self) -> Result<Self, ObjectError> {
        Self::new(self.labels.clone(), self.mode, self.min_score)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectHit {
    pub key: FrameKey,
    pub matched_count: usize,
}

#[derive(Debug, Default)]
pub struct DetectionStore {
    frames: BTreeMap<FrameKey, Vec<Detection>>,
}

impl DetectionStore {
    pub fn from_map(frames: BTreeMap<FrameKey, Vec<Detection>>) -> Self {
        Self { frames }
    }

    pub fn parse(path_label: &str, text: &str) -> Result<Self, ObjectError> {
        let raw: BTreeMap<String, Vec<Detection>> = serde_json::from_str(text).map_err(|e| ObjectError::Parse {
            path: path_label.to_string(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        let mut frames = BTreeMap::new();
        for (key, dets) in raw {
            let k = FrameKey::parse(&key).map_err(|e| ObjectError::Invalid { key: key.clone(), message: e.to_string() })?;
            let dets: Vec<Detection> = dets
                .into_iter()
                .map(|mut d| {
                    d.label = d.label.trim().to_lowercase();
                    d
                })
                .collect();
            for d in &dets {
                d.validate().map_err(|message| ObjectError::Invalid { key: key.clone(), message })?;
            }
            frames.insert(k, dets);
        }
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn detection_count(&self) -> usize {
        self.frames.values().map(Vec::len).sum()
    }

    pub fn detections(&self, key: &FrameKey) -> &[Detection] {
        self.frames.get(key).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&FrameKey) -> bool) {
        self.frames.retain(|k, _| keep(k));
    }

    pub fn filter_frames(&self, q: &ObjectQuery, k: usize) -> Vec<ObjectHit> {
        let wanted: HashMap<&str, usize> = q.labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let mut hits: Vec<ObjectHit> = Vec::new();
        let mut present = vec![false; q.labels.len()];
        for (key, dets) in &self.frames {
            present.iter_mut().for_each(|p| *p = false);
            let mut matched = 0;
            for d in dets.iter().filter(|d| d.score >= q.min_score) {
                if let Some(&i) = wanted.get(d.label.as_str()) {
                    present[i] = true;
                    matched += 1;
                }
            }
            let keep = match q.mode {
                MatchMode::And => present.iter().all(|p| *p),
                MatchMode::Or => matched > 0,
            };
            if keep {
                hits.push(ObjectHit { key: key.clone(), matched_count: matched });
            }
        }
        // frames iterate in key order, so a stable sort keeps the key tie-break
        hits.sort_by_key(|h| std::cmp::Reverse(h.matched_count));
        hits.truncate(k);
        hits
    }
}

enum Source {
    File(PathBuf),
    Loaded,
}

type KeepFn = Box<dyn Fn(&FrameKey) -> bool + Send + Sync>;

/// Lazily loaded detection store.
pub struct ObjectIndex {
    source: Source,
    store: OnceLock<Result<Arc<DetectionStore>, ObjectError>>,
    loads: AtomicUsize,
    retain: Option<KeepFn>,
}

impl std::fmt::Debug for ObjectIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ObjectIndex").field("loads", &self.loads.load(Ordering::Relaxed)).finish()
    }
}

impl ObjectIndex {
    /// Registers a detections file; nothing is read until the first query.
    pub fn load_store(path: impl Into<PathBuf>) -> Self {
        Self { source: Source::File(path.into()), store: OnceLock::new(), loads: AtomicUsize::new(0), retain: None }
    }

    pub fn from_store(store: DetectionStore) -> Self {
        let cell = OnceLock::new();
        let _ = cell.set(Ok(Arc::new(store)));
        Self { source: Source::Loaded, store: cell, loads: AtomicUsize::new(0), retain: None }
    }

    /// Restricts the store to keys accepted by `keep` once it is loaded.
    pub fn with_scope(mut self, keep: impl Fn(&FrameKey) -> bool + Send + Sync + 'static) -> Self {
        self.retain = Some(Box::new(keep));
        self
    }

    /// Number of times the backing file has been parsed.
    pub fn load_count(&self) -> usize {
        self.loads.load(Ordering::SeqCst)
    }

    pub fn is_loaded(&self) -> bool {
        self.store.get().is_some()
    }

    pub fn store(&self) -> Result<Arc<DetectionStore>, ObjectError> {
        self.store
            .get_or_init(|| {
                let Source::File(path) = &self.source else {
                    unreachable!("preloaded stores are initialized at construction")
                };
                self.loads.fetch_add(1, Ordering::SeqCst);
                let label = path.display().to_string();
                let text = std::fs::read_to_string(path)
                    .map_err(|e| ObjectError::Io { path: label.clone(), message: e.to_string() })?;
                let mut store = DetectionStore::parse(&label, &text)?;
                if let Some(keep) = &self.retain {
                    store.retain(|k| keep(k));
                }
                Ok(Arc::new(store))
            })
            .clone()
    }

    pub fn filter_frames(&self, q: &ObjectQuery, k: usize) -> Result<Vec<ObjectHit>, ObjectError> {
        Ok(self.store()?.filter_frames(q, k))
    }

    /// Distinct labels detected on a frame, sorted.
    pub fn labels(&self, key: &FrameKey) -> Result<Vec<String>, ObjectError> {
        let store = self.store()?;
        let set: BTreeSet<String> = store.detections(key).iter().map(|d| d.label.clone()).collect();
        Ok(set.into_iter().collect())
    }
}
