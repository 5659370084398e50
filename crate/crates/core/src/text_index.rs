//! BM25 inverted index over ASR segments and OCR entries.
//!
//! Every document is indexed twice: the display text as written, and a
//! folded (diacritic-free, lowercase) field, so `Bến Thành` and `ben thanh`
//! find each other. A document scores the better of its two fields.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::char::is_combining_mark;

use crate::catalog::{read_jsonl, CatalogError, FrameKey, VideoRef};
use crate::ocr_refine::{fold, strip_diacritics, OcrRecord};

pub const K1: f64 = 1.2;
pub const B: f64 = 0.75;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("document {0} has no text")]
    EmptyText(String),
    #[error("document {doc_id}: frame span [{start}, {end}] is inverted")]
    BadSpan { doc_id: String, start: u64, end: u64 },
    #[error("OCR document {0} must cover a single frame")]
    OcrSpan(String),
    #[error("document {doc_id}: confidence {value} outside [0,1]")]
    Confidence { doc_id: String, value: f32 },
    #[error(transparent)]
    File(#[from] CatalogError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Asr,
    Ocr,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TextDoc {
    pub doc_id: String,
    pub video: VideoRef,
    pub frame_span: (u64, u64),
    pub channel: Channel,
    pub text: String,
    /// Alternate spelling indexed into the folded field (e.g. the non-accent
    /// OCR output); defaults to folding `text`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text_nonaccent: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f32>,
}

impl TextDoc {
    pub fn asr(doc_id: impl Into<String>, video: VideoRef, start: u64, end: u64, text: impl Into<String>) -> Self {
        Self {
            doc_id: doc_id.into(),
            video,
            frame_span: (start, end),
            channel: Channel::Asr,
            text: text.into(),
            text_nonaccent: None,
            confidence: None,
        }
    }

    pub fn ocr(key: &FrameKey, text: impl Into<String>, confidence: Option<f32>) -> Self {
        Self {
            doc_id: format!("ocr:{key}"),
            video: key.video.clone(),
            frame_span: (key.frame_id, key.frame_id),
            channel: Channel::Ocr,
            text: text.into(),
            text_nonaccent: None,
            confidence,
        }
    }

    fn validate(&self) -> Result<(), TextError> {
        if self.text.trim().is_empty() {
            return Err(TextError::EmptyText(self.doc_id.clone()));
        }
        let (start, end) = self.frame_span;
        if start > end {
            return Err(TextError::BadSpan { doc_id: self.doc_id.clone(), start, end });
        }
        if self.channel == Channel::Ocr && start != end {
            return Err(TextError::OcrSpan(self.doc_id.clone()));
        }
        if let Some(c) = self.confidence {
            if !(0.0..=1.0).contains(&c) {
                return Err(TextError::Confidence { doc_id: self.doc_id.clone(), value: c });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TextHit {
    pub doc: TextDoc,
    pub score: f64,
    /// Character (not byte) ranges `[start, end)` into `doc.text`.
    pub highlights: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub term: String,
    pub start: usize,
    pub end: usize,
}

fn is_token_char(c: char) -> bool {
    c.is_alphanumeric() || is_combining_mark(c)
}

/// Lowercased tokens split on whitespace and punctuation, with character
/// offsets into the input.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut current: Option<(usize, String)> = None;
    let mut pos = 0;
    for c in text.chars() {
        if is_token_char(c) {
            current.get_or_insert_with(|| (pos, String::new())).1.extend(c.to_lowercase());
        } else if let Some((start, term)) = current.take() {
            out.push(Token { term, start, end: pos });
        }
        pos += 1;
    }
    if let Some((start, term)) = current {
        out.push(Token { term, start, end: pos });
    }
    out
}

/// Okapi BM25 IDF with +0.5 smoothing, clamped at zero.
pub fn idf(doc_count: usize, doc_freq: usize) -> f64 {
    let n = doc_count as f64;
    let df = doc_freq as f64;
    ((n - df + 0.5) / (df + 0.5)).ln().max(0.0)
}

pub fn term_score(idf: f64, tf: u32, doc_len: u32, avg_len: f64) -> f64 {
    let tf = tf as f64;
    let norm = if avg_len > 0.0 { doc_len as f64 / avg_len } else { 1.0 };
    idf * tf * (K1 + 1.0) / (tf + K1 * (1.0 - B + B * norm))
}

#[derive(Debug, Clone, Default)]
pub struct TextIndexBuilder {
    docs: BTreeMap<String, TextDoc>,
}

impl TextIndexBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces a document.
    pub fn index_document(&mut self, doc: TextDoc) -> Result<(), TextError> {
        doc.validate()?;
        self.docs.insert(doc.doc_id.clone(), doc);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&TextDoc) -> bool) {
        self.docs.retain(|_, d| keep(d));
    }

    pub fn load_asr(&mut self, path: &Path) -> Result<usize, TextError> {
        #[derive(Deserialize)]
        struct AsrRecord {
            group_id: String,
            video_id: String,
            start_frame: u64,
            end_frame: u64,
            text: String,
        }
        let mut ordinal = 0usize;
        let docs = read_jsonl(path, |r: AsrRecord| -> Result<TextDoc, Box<dyn std::error::Error>> {
            let video = VideoRef::new(r.group_id, r.video_id)?;
            let id = format!("asr:{video}/{}-{}#{ordinal}", r.start_frame, r.end_frame);
            ordinal += 1;
            let doc = TextDoc::asr(id, video, r.start_frame, r.end_frame, r.text);
            doc.validate()?;
            Ok(doc)
        })?;
        let n = docs.len();
        for d in docs {
            self.index_document(d)?;
        }
        Ok(n)
    }

    pub fn load_ocr(&mut self, path: &Path) -> Result<usize, TextError> {
        let docs = read_jsonl(path, |r: OcrRecord| -> Result<TextDoc, Box<dyn std::error::Error>> {
            let key = FrameKey::new(&r.group_id, &r.video_id, r.frame_id)?;
            let display = r.text_refined.clone().unwrap_or_else(|| r.text_raw.clone());
            let mut doc = TextDoc::ocr(&key, display, Some(r.confidence));
            doc.text_nonaccent = Some(strip_diacritics(&r.text_raw));
            doc.validate()?;
            Ok(doc)
        })?;
        let n = docs.len();
        for d in docs {
            self.index_document(d)?;
        }
        Ok(n)
    }

    pub fn freeze(self) -> TextIndex {
        let mut index = TextIndex::default();
        for doc in self.docs.into_values() {
            let tokens = tokenize(&doc.text);
            let folded: Vec<String> = match &doc.text_nonaccent {
                Some(alt) => tokenize(alt).into_iter().map(|t| fold(&t.term)).collect(),
                None => tokens.iter().map(|t| fold(&t.term)).collect(),
            };
            let id = index.docs.len() as u32;
            index.fields[0].add(id, tokens.iter().map(|t| t.term.clone()));
            index.fields[1].add(id, folded.into_iter());
            let stats = index.channel_stats.entry(doc.channel).or_default();
            stats.0 += 1;
            index.docs.push(doc);
        }
        for (ch, stats) in index.channel_stats.iter_mut() {
            for (f, field) in index.fields.iter().enumerate() {
                let total: u64 = index
                    .docs
                    .iter()
                    .zip(&field.lengths)
                    .filter(|(d, _)| d.channel == *ch)
                    .map(|(_, l)| *l as u64)
                    .sum();
                stats.1[f] = total as f64 / stats.0.max(1) as f64;
            }
        }
        for (f, field) in index.fields.iter().enumerate() {
            let total: u64 = field.lengths.iter().map(|l| *l as u64).sum();
            index.all_avg[f] = total as f64 / index.docs.len().max(1) as f64;
        }
        index
    }
}

#[derive(Debug, Clone, Default)]
struct Field {
    postings: HashMap<String, Vec<(u32, u32)>>,
    lengths: Vec<u32>,
}

impl Field {
    fn add(&mut self, doc: u32, terms: impl Iterator<Item = String>) {
        let mut counts: BTreeMap<String, u32> = BTreeMap::new();
        let mut len = 0;
        for t in terms {
            *counts.entry(t).or_default() += 1;
            len += 1;
        }
        for (t, tf) in counts {
            self.postings.entry(t).or_default().push((doc, tf));
        }
        self.lengths.push(len);
    }
}

/// Frozen BM25 index. Field 0 is the display text, field 1 the folded text.
#[derive(Debug, Clone, Default)]
pub struct TextIndex {
    docs: Vec<TextDoc>,
    fields: [Field; 2],
    // per channel: (doc count, average length per field)
    channel_stats: BTreeMap<Channel, (usize, [f64; 2])>,
    all_avg: [f64; 2],
}

impl TextIndex {
    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn doc_count(&self, channel: Channel) -> usize {
        self.channel_stats.get(&channel).map_or(0, |s| s.0)
    }

    /// Number of (term, document) pairs in the display-text field.
    pub fn posting_count(&self) -> usize {
        self.fields[0].postings.values().map(Vec::len).sum()
    }

    pub fn docs(&self) -> &[TextDoc] {
        &self.docs
    }

    /// Documents of `video` whose span overlaps `[start, end]`.
    pub fn docs_overlapping<'a>(
        &'a self,
        video: &'a VideoRef,
        start: u64,
        end: u64,
        channel: Channel,
    ) -> impl Iterator<Item = &'a TextDoc> + 'a {
        self.docs.iter().filter(move |d| {
            d.channel == channel && &d.video == video && d.frame_span.0 <= end && d.frame_span.1 >= start
        })
    }

    fn stats(&self, channel: Option<Channel>) -> (usize, [f64; 2]) {
        match channel {
            Some(ch) => self.channel_stats.get(&ch).copied().unwrap_or((0, [0.0; 2])),
            None => (self.docs.len(), self.all_avg),
        }
    }

    fn field_scores(&self, f: usize, terms: &BTreeSet<String>, channel: Option<Channel>, out: &mut HashMap<u32, [f64; 2]>) {
        let (n, avg) = self.stats(channel);
        let field = &self.fields[f];
        for term in terms {
            let Some(postings) = field.postings.get(term) else { continue };
            let in_scope = |d: &u32| channel.is_none_or(|ch| self.docs[*d as usize].channel == ch);
            let df = postings.iter().filter(|(d, _)| in_scope(d)).count();
            let w = idf(n, df);
            for (d, tf) in postings.iter().filter(|(d, _)| in_scope(d)) {
                let s = term_score(w, *tf, field.lengths[*d as usize], avg[f]);
                out.entry(*d).or_insert([0.0; 2])[f] += s;
            }
        }
    }

    /// BM25 search; results by score descending, then doc id ascending.
    pub fn search_text(&self, query: &str, channel: Option<Channel>, k: usize) -> Vec<TextHit> {
        let raw: BTreeSet<String> = tokenize(query).into_iter().map(|t| t.term).collect();
        let folded: BTreeSet<String> = raw.iter().map(|t| fold(t)).collect();
        let mut scores: HashMap<u32, [f64; 2]> = HashMap::new();
        self.field_scores(0, &raw, channel, &mut scores);
        self.field_scores(1, &folded, channel, &mut scores);
        let mut hits: Vec<(u32, f64)> = scores.into_iter().map(|(d, s)| (d, s[0].max(s[1]))).collect();
        hits.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.docs[a.0 as usize].doc_id.cmp(&self.docs[b.0 as usize].doc_id))
        });
        hits.truncate(k);
        hits.into_iter()
            .map(|(d, score)| {
                let doc = self.docs[d as usize].clone();
                let highlights = highlight(&doc.text, &raw, &folded);
                TextHit { doc, score, highlights }
            })
            .collect()
    }
}

fn highlight(text: &str, raw: &BTreeSet<String>, folded: &BTreeSet<String>) -> Vec<(usize, usize)> {
    tokenize(text)
        .into_iter()
        .filter(|t| raw.contains(&t.term) || folded.contains(&fold(&t.term)))
        .map(|t| (t.start, t.end))
        .collect()
}
