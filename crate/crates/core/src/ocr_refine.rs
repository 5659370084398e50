//! Vietnamese OCR normalization and batched LLM refinement.
//!
//! Raw OCR output is first reduced to a non-accent form, which is stable
//! under the recognizer's frequent diacritic mistakes. An LLM then restores
//! diacritics and fixes spelling in numbered batches.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::char::{decompose_canonical, is_combining_mark};

use crate::catalog::FrameKey;
use crate::model_clients::{ClientError, LlmClient};

/// Removes every combining mark after canonical decomposition and maps
/// `đ`/`Đ` to `d`/`D`. Characters whose decomposition has no combining
/// mark are left untouched.
pub fn strip_diacritics(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut parts: Vec<char> = Vec::with_capacity(4);
    for c in text.chars() {
        match c {
            'đ' => out.push('d'),
            'Đ' => out.push('D'),
            _ => {
                parts.clear();
                decompose_canonical(c, |d| parts.push(d));
                if parts.iter().any(|d| is_combining_mark(*d)) {
                    out.extend(parts.iter().filter(|d| !is_combining_mark(**d)));
                } else {
                    out.push(c);
                }
            }
        }
    }
    out
}

/// Accent- and case-insensitive matching form of `text`.
pub fn fold(text: &str) -> String {
    strip_diacritics(text).to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrEntry {
    pub key: FrameKey,
    pub text_raw: String,
    pub text_nonaccent: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_refined: Option<String>,
    pub confidence: f32,
}

impl OcrEntry {
    pub fn new(key: FrameKey, text_raw: impl Into<String>, confidence: f32) -> Self {
        let text_raw = text_raw.into();
        let text_nonaccent = strip_diacritics(&text_raw);
        Self { key, text_raw, text_nonaccent, text_refined: None, confidence }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchFailure {
    pub batch_index: usize,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub entries: Vec<OcrEntry>,
    pub failures: Vec<BatchFailure>,
    pub llm_calls: usize,
}

pub const DEFAULT_BATCH_SIZE: usize = 20;

const REFINE_INSTRUCTIONS: &str = "\
### task: refine_ocr
The numbered lines below are Vietnamese OCR output with diacritics removed.
For every line, restore the Vietnamese diacritics, correct spelling, and drop
OCR noise. Reply with exactly one line per input, keeping the number:
N. <corrected text>";

pub fn batch_prompt(texts: &[&str]) -> String {
    let mut prompt = String::from(REFINE_INSTRUCTIONS);
    prompt.push_str("\n\n");
    for (i, t) in texts.iter().enumerate() {
        // line structure is the protocol, so embedded newlines are flattened
        let flat = t.split_whitespace().collect::<Vec<_>>().join(" ");
        prompt.push_str(&format!("{}. {}\n", i + 1, flat));
    }
    prompt
}

/// Parses `N. text` (also `N) text`), returning the 1-based number and text.
pub fn parse_numbered_line(line: &str) -> Option<(usize, &str)> {
    let line = line.trim_start();
    let digits = line.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 {
        return None;
    }
    let n = line[..digits].parse().ok()?;
    let rest = line[digits..].strip_prefix(['.', ')'])?;
    Some((n, rest.trim()))
}

/// Maps a reply back onto `count` slots by line number; later duplicates of
/// a number are ignored.
pub fn parse_batch_reply(reply: &str, count: usize) -> Vec<Option<String>> {
    let mut out = vec![None; count];
    for (n, text) in reply.lines().filter_map(parse_numbered_line) {
        if (1..=count).contains(&n) && out[n - 1].is_none() && !text.is_empty() {
            out[n - 1] = Some(text.to_string());
        }
    }
    out
}

/// Refines entries in batches of `batch_size`, running up to `parallelism`
/// batches at a time. Output order equals input order. A failed batch falls
/// back to the non-accent text and is reported once.
pub fn refine_batch(
    entries: Vec<OcrEntry>,
    llm: &dyn LlmClient,
    batch_size: usize,
    parallelism: usize,
) -> RefineOutcome {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let batches: Vec<&[OcrEntry]> = entries.chunks(batch_size).collect();
    let replies: Vec<Result<String, ClientError>> = {
        let mut replies = Vec::with_capacity(batches.len());
        for wave in batches.chunks(parallelism.max(1)) {
            let results: Vec<_> = std::thread::scope(|s| {
                let handles: Vec<_> = wave
                    .iter()
                    .map(|batch| {
                        let texts: Vec<&str> = batch.iter().map(|e| e.text_nonaccent.as_str()).collect();
                        let prompt = batch_prompt(&texts);
                        s.spawn(move || llm.complete(&prompt))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err(ClientError::transport("refinement worker panicked"))))
                    .collect()
            });
            replies.extend(results);
        }
        replies
    };

    let llm_calls = batches.len();
    let mut failures = Vec::new();
    let mut refined_texts: Vec<Option<String>> = Vec::with_capacity(entries.len());
    for (batch_index, (batch, reply)) in batches.iter().zip(replies).enumerate() {
        match reply {
            Ok(text) => refined_texts.extend(parse_batch_reply(&text, batch.len())),
            Err(e) => {
                failures.push(BatchFailure { batch_index, error: e.to_string() });
                refined_texts.extend(std::iter::repeat_n(None, batch.len()));
            }
        }
    }
    let entries = entries
        .into_iter()
        .zip(refined_texts)
        .map(|(mut e, refined)| {
            e.text_refined = Some(refined.unwrap_or_else(|| e.text_nonaccent.clone()));
            e
        })
        .collect();
    RefineOutcome { entries, failures, llm_calls }
}

#[derive(Debug, Error)]
pub enum OcrFileError {
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// One line of the OCR ingestion file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrRecord {
    pub group_id: String,
    pub video_id: String,
    pub frame_id: u64,
    pub text_raw: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_refined: Option<String>,
    #[serde(default = "full_confidence")]
    pub confidence: f32,
}

fn full_confidence() -> f32 {
    1.0
}

impl OcrRecord {
    pub fn to_entry(&self) -> Result<OcrEntry, crate::catalog::KeyError> {
        let key = FrameKey::new(&self.group_id, &self.video_id, self.frame_id)?;
        let mut e = OcrEntry::new(key, self.text_raw.clone(), self.confidence);
        e.text_refined = self.text_refined.clone();
        Ok(e)
    }

    pub fn from_entry(e: &OcrEntry) -> Self {
        Self {
            group_id: e.key.group_id().to_string(),
            video_id: e.key.video_id().to_string(),
            frame_id: e.key.frame_id,
            text_raw: e.text_raw.clone(),
            text_refined: e.text_refined.clone(),
            confidence: e.confidence,
        }
    }
}

pub fn read_ocr_file(path: &Path) -> Result<Vec<OcrRecord>, OcrFileError> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| OcrFileError::Io { path: display.clone(), source })?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| OcrFileError::Io { path: display.clone(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: OcrRecord = serde_json::from_str(&line)
            .map_err(|e| OcrFileError::Parse { path: display.clone(), line: i + 1, message: e.to_string() })?;
        if !(0.0..=1.0).contains(&rec.confidence) {
            return Err(OcrFileError::Parse {
                path: display,
                line: i + 1,
                message: format!("confidence {} outside [0,1]", rec.confidence),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_ocr_file(path: &Path, records: &[OcrRecord]) -> Result<(), OcrFileError> {
    let display = path.display().to_string();
    let io = |source| OcrFileError::Io { path: display.clone(), source };
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for r in records {
        let line = serde_json::to_string(r).expect("OCR records serialize");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_clients::{EchoLlm, FnLlm};
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn entries(n: usize) -> Vec<OcrEntry> {
        (0..n)
            .map(|i| OcrEntry::new(FrameKey::new("L01", "V001", i as u64).unwrap(), format!("Bến số {i}"), 0.5))
            .collect()
    }

    #[test]
    fn strips_vietnamese() {
        assert_eq!(strip_diacritics("Bến Thành"), "Ben Thanh");
        assert_eq!(strip_diacritics("hello 123"), "hello 123");
        assert_eq!(strip_diacritics("đường Đà Nẵng"), "duong Da Nang");
        // decomposed input and lone combining marks
        assert_eq!(strip_diacritics("e\u{0301}"), "e");
        // Hangul decomposes without combining marks and must survive
        assert_eq!(strip_diacritics("한국"), "한국");
    }

    #[test]
    fn numbered_lines() {
        assert_eq!(parse_numbered_line("12. abc "), Some((12, "abc")));
        assert_eq!(parse_numbered_line("  3) x"), Some((3, "x")));
        assert_eq!(parse_numbered_line("Here you go:"), None);
        assert_eq!(parse_numbered_line("3 x"), None);
        let parsed = parse_batch_reply("Sure!\n2. hai\n1. mot\n2. again\n9. out", 3);
        assert_eq!(parsed, vec![Some("mot".into()), Some("hai".into()), None]);
    }

    #[test]
    fn empty_input_makes_no_calls() {
        let calls = AtomicUsize::new(0);
        let llm = FnLlm(|_: &str| {
            calls.fetch_add(1, Ordering::SeqCst);
            Ok(String::new())
        });
        let out = refine_batch(vec![], &llm, 2, 4);
        assert!(out.entries.is_empty());
        assert_eq!(calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn five_entries_batch_two_calls_three_times() {
        let calls = AtomicUsize::new(0);
        let llm = FnLlm(|p: &str| {
            calls.fetch_add(1, Ordering::SeqCst);
            EchoLlm.complete(p)
        });
        let out = refine_batch(entries(5), &llm, 2, 2);
        assert_eq!(calls.load(Ordering::SeqCst), 3);
        assert_eq!(out.llm_calls, 3);
        assert_eq!(out.entries.len(), 5);
    }

    #[test]
    fn echo_keeps_nonaccent_text() {
        let out = refine_batch(entries(7), &EchoLlm, 3, 3);
        for e in &out.entries {
            assert_eq!(e.text_refined.as_deref(), Some(e.text_nonaccent.as_str()));
        }
    }

    #[test]
    fn restores_by_line_number_and_degrades() {
        // reply out of order, missing line 2
        let llm = FnLlm(|_: &str| Ok("OK:\n3. Bến số 2\n1. Bến số 0".to_string()));
        let out = refine_batch(entries(3), &llm, 3, 1);
        let refined: Vec<_> = out.entries.iter().map(|e| e.text_refined.clone().unwrap()).collect();
        assert_eq!(refined, vec!["Bến số 0", "Ben so 1", "Bến số 2"]);
    }

    #[test]
    fn transport_failure_is_per_batch() {
        let llm = FnLlm(|p: &str| {
            if p.contains("Ben so 2") {
                Err(ClientError::transport("boom"))
            } else {
                EchoLlm.complete(p)
            }
        });
        let out = refine_batch(entries(4), &llm, 2, 2);
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].batch_index, 1);
        assert!(out.entries.iter().all(|e| e.text_refined.is_some()));
    }
}
