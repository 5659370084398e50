//! Challenge scoring: per-prediction R-scores, the mean of top-k R-scores,
//! and submission / ground-truth file parsing.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::catalog::VideoRef;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("ks must be non-empty, strictly increasing and >= 1, got {0:?}")]
    BadKs(Vec<usize>),
    #[error("invalid ground truth for `{query}`: {message}")]
    GroundTruth { query: String, message: String },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("prediction at rank {rank} has no frames")]
    EmptyPrediction { rank: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Task {
    Kis,
    Qa,
    Trake,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroundTruthItem {
    pub query_id: String,
    pub task: Task,
    pub video_name: String,
    /// One inclusive range for KIS and QA, the ordered segments for TRAKE.
    pub frame_ranges: Vec<(u64, u64)>,
    pub answer: Option<String>,
    pub tolerance: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GroundTruthRecord {
    query_id: String,
    task: Task,
    video_name: String,
    #[serde(default)]
    frame_range: Option<(u64, u64)>,
    #[serde(default)]
    segments: Option<Vec<(u64, u64)>>,
    #[serde(default)]
    answer: Option<String>,
    #[serde(default)]
    tolerance: Option<u64>,
}

impl GroundTruthItem {
    pub fn kis(query_id: &str, video_name: &str, lo: u64, hi: u64) -> Self {
        Self {
            query_id: query_id.into(),
            task: Task::Kis,
            video_name: video_name.into(),
            frame_ranges: vec![(lo, hi)],
            answer: None,
            tolerance: 0,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |message: &str| EvalError::GroundTruth { query: self.query_id.clone(), message: message.into() };
        if self.frame_ranges.is_empty() {
            return Err(bad("no frame range"));
        }
        if self.frame_ranges.iter().any(|(lo, hi)| lo > hi) {
            return Err(bad("range with lo > hi"));
        }
        match self.task {
            Task::Kis | Task::Qa if self.frame_ranges.len() != 1 => Err(bad("KIS and QA take exactly one range")),
            Task::Qa if self.answer.is_none() => Err(bad("QA item without an answer")),
            Task::Trake if self.frame_ranges.windows(2).any(|w| w[1].0 <= w[0].1) => {
                Err(bad("TRAKE segments must be ordered and non-overlapping"))
            }
            _ => Ok(()),
        }
    }

    fn from_record(r: GroundTruthRecord) -> Result<Self, String> {
        let frame_ranges = match (r.task, r.frame_range, r.segments) {
            (Task::Trake, None, Some(s)) => s,
            (Task::Kis | Task::Qa, Some(range), None) => vec![range],
            (Task::Trake, _, _) => return Err("TRAKE items take `segments`".into()),
            _ => return Err("KIS and QA items take `frame_range`".into()),
        };
        let tolerance = match (r.task, r.tolerance) {
            (Task::Trake, None) => return Err("TRAKE items need an explicit `tolerance`".into()),
            (_, t) => t.unwrap_or(0),
        };
        let item = Self {
            query_id: r.query_id,
            task: r.task,
            video_name: r.video_name,
            frame_ranges,
            answer: r.answer,
            tolerance,
        };
        item.validate().map_err(|e| e.to_string())?;
        Ok(item)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub rank: usize,
    pub video_name: String,
    pub frames: Vec<u64>,
    pub answer: Option<String>,
}

impl Prediction {
    pub fn new(rank: usize, video_name: &str, frames: Vec<u64>) -> Self {
        Self { rank, video_name: video_name.into(), frames, answer: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KSet(Vec<usize>);

impl KSet {
    pub fn new(ks: Vec<usize>) -> Result<Self, EvalError> {
        if ks.is_empty() || ks[0] == 0 || ks.windows(2).any(|w| w[1] <= w[0]) {
            return Err(EvalError::BadKs(ks));
        }
        Ok(Self(ks))
    }

    pub fn ks(&self) -> &[usize] {
        &self.0
    }
}

impl Default for KSet {
    fn default() -> Self {
        Self(vec![1, 5, 20, 50, 100])
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum AnswerMatch {
    /// trim, canonical composition, lowercase
    #[default]
    Normalized,
    Strict,
}

pub fn normalize_answer(text: &str) -> String {
    text.trim().nfc().collect::<String>().to_lowercase()
}

/// Maps a submission video name `group_video` to its catalog reference,
/// splitting at the first underscore.
pub fn video_ref_from_name(name: &str) -> Option<VideoRef> {
    let (group, video) = name.split_once('_')?;
    VideoRef::new(group, video).ok()
}

pub fn r_score(p: &Prediction, gt: &GroundTruthItem) -> Result<f64, EvalError> {
    r_score_with(p, gt, AnswerMatch::Normalized)
}

pub fn r_score_with(p: &Prediction, gt: &GroundTruthItem, answers: AnswerMatch) -> Result<f64, EvalError> {
    gt.validate()?;
    if p.frames.is_empty() {
        return Err(EvalError::EmptyPrediction { rank: p.rank });
    }
    if p.video_name != gt.video_name {
        return Ok(0.0);
    }
    let in_range = |f: u64, (lo, hi): (u64, u64), tol: u64| lo.saturating_sub(tol) <= f && f <= hi.saturating_add(tol);
    let located = p.frames.iter().any(|f| in_range(*f, gt.frame_ranges[0], 0));
    Ok(match gt.task {
        Task::Kis => f64::from(u8::from(located)),
        Task::Qa => {
            let expected = gt.answer.as_deref().unwrap_or_default();
            let same = match (&p.answer, answers) {
                (None, _) => false,
                (Some(a), AnswerMatch::Strict) => a == expected,
                (Some(a), AnswerMatch::Normalized) => normalize_answer(a) == normalize_answer(expected),
            };
            f64::from(u8::from(located && same))
        }
        Task::Trake => {
            let hit = gt
                .frame_ranges
                .iter()
                .zip(&p.frames)
                .filter(|(seg, f)| in_range(**f, **seg, gt.tolerance))
                .count();
            hit as f64 / gt.frame_ranges.len() as f64
        }
    })
}

/// Mean over `ks` of the best R-score among the first k predictions.
pub fn final_score(predictions: &[Prediction], gt: &GroundTruthItem, ks: &KSet) -> Result<f64, EvalError> {
    let scores = predictions.iter().map(|p| r_score(p, gt)).collect::<Result<Vec<_>, _>>()?;
    Ok(final_score_from_r(&scores, ks))
}

/// Same reduction over precomputed R-scores in rank order.
pub fn final_score_from_r(scores: &[f64], ks: &KSet) -> f64 {
    let mut prefix_max = Vec::with_capacity(scores.len());
    let mut best = 0.0f64;
    for s in scores {
        best = best.max(*s);
        prefix_max.push(best);
    }
    let total: f64 = ks
        .ks()
        .iter()
        .map(|k| match (*k).min(prefix_max.len()) {
            0 => 0.0,
            n => prefix_max[n - 1],
        })
        .sum();
    total / ks.ks().len() as f64
}

pub type Submission = Vec<(String, Vec<Prediction>)>;

fn read_lines(path: &Path) -> Result<Vec<String>, EvalError> {
    let io = |e: std::io::Error| EvalError::Io { path: path.display().to_string(), message: e.to_string() };
    let file = std::fs::File::open(path).map_err(io)?;
    std::io::BufReader::new(file).lines().collect::<Result<_, _>>().map_err(io)
}

pub fn parse_submission(path: &Path) -> Result<Submission, EvalError> {
    parse_submission_str(&path.display().to_string(), &read_lines(path)?.join("\n"))
}

/// Parses `query_id, video_name, f1[;f2...][, answer]` lines. Rank is the
/// line order within each query.
pub fn parse_submission_str(label: &str, text: &str) -> Result<Submission, EvalError> {
    let mut out: Submission = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| EvalError::Parse { path: label.to_string(), line: i + 1, message };
        let fields: Vec<&str> = line.splitn(4, ',').map(str::trim).collect();
        if fields.len() < 3 {
            return Err(err(format!("expected `query_id, video_name, frames[, answer]`, got {} field(s)", fields.len())));
        }
        let (qid, video) = (fields[0], fields[1]);
        if qid.is_empty() || video.is_empty() {
            return Err(err("empty query id or video name".into()));
        }
        let frames = fields[2]
            .split(';')
            .map(|f| f.trim().parse::<u64>().map_err(|_| err(format!("bad frame index `{}`", f.trim()))))
            .collect::<Result<Vec<_>, _>>()?;
        if !seen.insert((qid.to_string(), video.to_string(), frames.clone())) {
            return Err(err(format!("duplicate prediction for query `{qid}`")));
        }
        let answer = fields.get(3).map(|a| a.to_string());
        let preds = match out.iter_mut().find(|(q, _)| q == qid) {
            Some((_, preds)) => preds,
            None => {
                out.push((qid.to_string(), Vec::new()));
                &mut out.last_mut().expect("just pushed").1
            }
        };
        preds.push(Prediction { rank: preds.len() + 1, video_name: video.to_string(), frames, answer });
    }
    Ok(out)
}

/// Ground-truth file: one JSON record per line, e.g.
/// `{"query_id":"q1","task":"KIS","video_name":"L01_V003","frame_range":[40,60]}`.
pub fn parse_ground_truth(path: &Path) -> Result<BTreeMap<String, GroundTruthItem>, EvalError> {
    parse_ground_truth_str(&path.display().to_string(), &read_lines(path)?.join("\n"))
}

pub fn parse_ground_truth_str(label: &str, text: &str) -> Result<BTreeMap<String, GroundTruthItem>, EvalError> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| EvalError::Parse { path: label.to_string(), line: i + 1, message };
        let record: GroundTruthRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let item = GroundTruthItem::from_record(record).map_err(err)?;
        if out.contains_key(&item.query_id) {
            return Err(err(format!("duplicate query `{}`", item.query_id)));
        }
        out.insert(item.query_id.clone(), item);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryScore {
    pub query_id: String,
    pub score: f64,
    pub predictions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    pub per_query: Vec<QueryScore>,
    pub mean: f64,
    pub warnings: Vec<String>,
}

/// Scores every ground-truth query; queries without predictions score 0.
pub fn evaluate(
    submission: &Submission,
    truth: &BTreeMap<String, GroundTruthItem>,
    ks: &KSet,
) -> Result<EvalReport, EvalError> {
    let by_query: BTreeMap<&str, &Vec<Prediction>> = submission.iter().map(|(q, p)| (q.as_str(), p)).collect();
    let mut warnings: Vec<String> = by_query
        .keys()
        .filter(|q| !truth.contains_key(**q))
        .map(|q| format!("query `{q}` has no ground truth; ignored"))
        .collect();
    let mut per_query = Vec::with_capacity(truth.len());
    for (qid, gt) in truth {
        let preds = by_query.get(qid.as_str()).map_or(&[][..], |p| p.as_slice());
        if preds.is_empty() {
            warnings.push(format!("query `{qid}` has no predictions"));
        }
        per_query.push(QueryScore { query_id: qid.clone(), score: final_score(preds, gt, ks)?, predictions: preds.len() });
    }
    let mean = if per_query.is_empty() {
        0.0
    } else {
        per_query.iter().map(|q| q.score).sum::<f64>() / per_query.len() as f64
    };
    Ok(EvalReport { ks: ks.ks().to_vec(), per_query, mean, warnings })
}
