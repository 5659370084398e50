//! Plan execution, score fusion, temporal sequence retrieval, evidence
//! grouping and answer synthesis.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::catalog::{Catalog, FrameKey, VideoRef};
use crate::model_clients::{EmbeddingClient, LlmClient};
use crate::object_index::{ObjectHit, ObjectIndex};
use crate::planner::{Modality, ModalityWeights, SearchPlan};
use crate::text_index::{Channel, TextHit, TextIndex};
use crate::vector_index::{ScopeFilter, VectorHit, VectorIndex};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("every modality failed: {0:?}")]
    AllModalitiesFailed(Vec<String>),
    #[error("temporal search needs at least one query")]
    NoTemporalSteps,
    #[error("temporal step {step} failed: {message}")]
    TemporalStep { step: usize, message: String },
    #[error("semantic index unavailable")]
    NoVectorIndex,
}

/// The indices a plan can run against. Missing ones disable their modality.
#[derive(Clone, Copy)]
pub struct SearchIndices<'a> {
    pub catalog: &'a Catalog,
    pub vectors: Option<&'a VectorIndex>,
    pub text: Option<&'a TextIndex>,
    pub objects: Option<&'a ObjectIndex>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", content = "hits", rename_all = "lowercase")]
pub enum ModalityResults {
    Semantic(Vec<VectorHit>),
    Text(Vec<TextHit>),
    Object(Vec<ObjectHit>),
}

impl ModalityResults {
    pub fn len(&self) -> usize {
        match self {
            ModalityResults::Semantic(v) => v.len(),
            ModalityResults::Text(v) => v.len(),
            ModalityResults::Object(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanExecution {
    pub results: BTreeMap<Modality, ModalityResults>,
    pub warnings: Vec<String>,
}

impl PlanExecution {
    fn text_hits(&self, m: Modality) -> &[TextHit] {
        match self.results.get(&m) {
            Some(ModalityResults::Text(h)) => h,
            _ => &[],
        }
    }
}

fn run_modality(
    m: Modality,
    plan: &SearchPlan,
    indices: &SearchIndices<'_>,
    embedder: &dyn EmbeddingClient,
    scope: Option<ScopeFilter<'_>>,
) -> Result<ModalityResults, String> {
    let k = plan.top_k_per_modality;
    match m {
        Modality::Semantic => {
            let index = indices.vectors.ok_or("semantic index unavailable")?;
            let v = embedder.embed_text(&plan.semantic_query).map_err(|e| e.to_string())?;
            Ok(ModalityResults::Semantic(index.search(&v, k, scope).map_err(|e| e.to_string())?))
        }
        Modality::Asr | Modality::Ocr => {
            let index = indices.text.ok_or("text index unavailable")?;
            let (channel, keywords) = if m == Modality::Asr {
                (Channel::Asr, &plan.asr_keywords)
            } else {
                (Channel::Ocr, &plan.ocr_keywords)
            };
            let mut hits = index.search_text(&keywords.join(" "), Some(channel), usize::MAX);
            if let Some(f) = scope {
                hits.retain(|h| f(&h.doc.video.frame(h.doc.frame_span.0)));
            }
            hits.truncate(k);
            Ok(ModalityResults::Text(hits))
        }
        Modality::Object => {
            let index = indices.objects.ok_or("object index unavailable")?;
            let q = plan.object_query.as_ref().ok_or("plan has no object query")?;
            let mut hits = index.filter_frames(q, usize::MAX).map_err(|e| e.to_string())?;
            if let Some(f) = scope {
                hits.retain(|h| f(&h.key));
            }
            hits.truncate(k);
            Ok(ModalityResults::Object(hits))
        }
    }
}

/// Runs every positively weighted modality of the plan concurrently. A
/// failing modality yields an empty list and a warning.
pub fn execute_plan(
    plan: &SearchPlan,
    indices: &SearchIndices<'_>,
    embedder: &dyn EmbeddingClient,
    scope: Option<ScopeFilter<'_>>,
) -> Result<PlanExecution, OrchestratorError> {
    let active: Vec<Modality> = Modality::ALL.into_iter().filter(|m| plan.weights.get(*m) > 0.0).collect();
    let outcomes: Vec<(Modality, Result<ModalityResults, String>)> = active
        .par_iter()
        .map(|m| (*m, run_modality(*m, plan, indices, embedder, scope)))
        .collect();
    let mut results = BTreeMap::new();
    let mut warnings = Vec::new();
    let mut failures = Vec::new();
    for (m, outcome) in outcomes {
        match outcome {
            Ok(r) => {
                results.insert(m, r);
            }
            Err(e) => {
                let msg = format!("{} search failed: {e}", m.as_str());
                warnings.push(msg.clone());
                failures.push(msg);
                let empty = match m {
                    Modality::Semantic => ModalityResults::Semantic(Vec::new()),
                    Modality::Asr | Modality::Ocr => ModalityResults::Text(Vec::new()),
                    Modality::Object => ModalityResults::Object(Vec::new()),
                };
                results.insert(m, empty);
            }
        }
    }
    if !active.is_empty() && failures.len() == active.len() {
        return Err(OrchestratorError::AllModalitiesFailed(failures));
    }
    Ok(PlanExecution { results, warnings })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredFrame {
    pub key: FrameKey,
    pub per_modality: BTreeMap<Modality, f64>,
    pub fused: f64,
}

/// Min-max normalizes into [0, 1]; a constant list maps to 1.0.
pub fn min_max_normalize(scores: &[f64]) -> Vec<f64> {
    let (lo, hi) = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(*s), hi.max(*s)));
    if scores.is_empty() || hi - lo <= 0.0 {
        return vec![1.0; scores.len()];
    }
    scores.iter().map(|s| ((s - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
}

// Error-free transformations for a compensated weighted mean.
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

fn dd_add(x: (f64, f64), y: (f64, f64)) -> (f64, f64) {
    let (s, mut e) = two_sum(x.0, y.0);
    e += x.1 + y.1;
    let hi = s + e;
    (hi, e - (hi - s))
}

/// `sum(w * s) / sum(w)` in double-double precision, so results such as
/// `(2 * 0.9 + 0.3) / 3` come out as the nearest double to the true value.
pub fn weighted_mean(pairs: &[(f64, f64)]) -> f64 {
    let mut num = (0.0, 0.0);
    let mut den = (0.0, 0.0);
    for &(w, s) in pairs {
        num = dd_add(num, two_prod(w, s));
        den = dd_add(den, (w, 0.0));
    }
    let q1 = num.0 / den.0;
    let (p, pe) = two_prod(q1, den.0);
    let r = dd_add(dd_add(num, (-p, -pe)), (-q1 * den.1, 0.0));
    q1 + (r.0 + r.1) / den.0
}

/// Fuses already normalized per-modality scores. Each frame is averaged over
/// the positively weighted modalities it appears in; a frame listed twice in
/// one modality keeps its best score.
pub fn fuse_normalized(
    lists: impl IntoIterator<Item = (Modality, Vec<(FrameKey, f64)>)>,
    weights: &ModalityWeights,
) -> Vec<ScoredFrame> {
    let mut frames: BTreeMap<FrameKey, BTreeMap<Modality, f64>> = BTreeMap::new();
    for (m, list) in lists {
        if weights.get(m) <= 0.0 {
            continue;
        }
        for (key, s) in list {
            frames
                .entry(key)
                .or_default()
                .entry(m)
                .and_modify(|v| *v = v.max(s))
                .or_insert(s);
        }
    }
    let mut out: Vec<ScoredFrame> = frames
        .into_iter()
        .map(|(key, per_modality)| {
            let pairs: Vec<(f64, f64)> = per_modality.iter().map(|(m, s)| (weights.get(*m), *s)).collect();
            let fused = weighted_mean(&pairs).clamp(0.0, 1.0);
            ScoredFrame { key, per_modality, fused }
        })
        .collect();
    out.sort_by(|a, b| b.fused.total_cmp(&a.fused).then_with(|| a.key.cmp(&b.key)));
    out
}

/// Normalizes each modality's raw scores, projects ASR segments onto the
/// cataloged keyframes they span, and fuses.
pub fn fuse(execution: &PlanExecution, weights: &ModalityWeights, catalog: &Catalog) -> Vec<ScoredFrame> {
    let mut lists = Vec::new();
    for (m, results) in &execution.results {
        let (keys, raw): (Vec<Vec<FrameKey>>, Vec<f64>) = match results {
            ModalityResults::Semantic(hits) => hits.iter().map(|h| (vec![h.key.clone()], h.score as f64)).unzip(),
            ModalityResults::Object(hits) => {
                hits.iter().map(|h| (vec![h.key.clone()], h.matched_count as f64)).unzip()
            }
            ModalityResults::Text(hits) => hits
                .iter()
                .map(|h| {
                    let (start, end) = h.doc.frame_span;
                    let keys = match h.doc.channel {
                        Channel::Ocr => vec![h.doc.video.frame(start)],
                        Channel::Asr => catalog.keyframes_in_span(&h.doc.video, start, end).collect(),
                    };
                    (keys, h.score)
                })
                .unzip(),
        };
        let normalized = min_max_normalize(&raw);
        let list: Vec<(FrameKey, f64)> = keys
            .into_iter()
            .zip(normalized)
            .flat_map(|(ks, s)| ks.into_iter().map(move |k| (k, s)))
            .collect();
        lists.push((*m, list));
    }
    fuse_normalized(lists, weights)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TemporalStepResult {
    pub step_index: usize,
    pub query: String,
    pub per_video: BTreeMap<VideoRef, f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TemporalResult {
    pub steps: Vec<TemporalStepResult>,
    pub ranking: Vec<(VideoRef, f32)>,
    pub k_per_step: usize,
}

pub const DEFAULT_K_PER_STEP: usize = 200;

/// Intersects the per-step video sets and scores each surviving video by its
/// weakest step.
pub fn aggregate_temporal(steps: &[TemporalStepResult]) -> Vec<(VideoRef, f32)> {
    let Some(first) = steps.first() else { return Vec::new() };
    let mut ranking: Vec<(VideoRef, f32)> = first
        .per_video
        .keys()
        .filter_map(|v| {
            steps
                .iter()
                .map(|s| s.per_video.get(v).copied())
                .try_fold(f32::INFINITY, |acc, s| s.map(|s| acc.min(s)))
                .map(|score| (v.clone(), score))
        })
        .collect();
    ranking.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranking
}

/// Ordered event-sequence retrieval over videos.
pub fn temporal_search(
    queries: &[String],
    embedder: &dyn EmbeddingClient,
    index: &VectorIndex,
    k_per_step: usize,
    scope: Option<ScopeFilter<'_>>,
) -> Result<TemporalResult, OrchestratorError> {
    if queries.is_empty() {
        return Err(OrchestratorError::NoTemporalSteps);
    }
    let steps: Vec<TemporalStepResult> = queries
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            let fail = |message: String| OrchestratorError::TemporalStep { step: i, message };
            let v = embedder.embed_text(q).map_err(|e| fail(e.to_string()))?;
            let videos = index.search_videos(&v, k_per_step, scope).map_err(|e| fail(e.to_string()))?;
            Ok(TemporalStepResult { step_index: i, query: q.clone(), per_video: videos.into_iter().collect() })
        })
        .collect::<Result<_, _>>()?;
    let ranking = aggregate_temporal(&steps);
    Ok(TemporalResult { steps, ranking, k_per_step })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameObjects {
    pub key: FrameKey,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvidencePackage {
    pub video: VideoRef,
    pub frames: Vec<ScoredFrame>,
    pub asr_snippets: Vec<TextHit>,
    pub ocr_texts: Vec<TextHit>,
    pub objects: Vec<FrameObjects>,
}

impl EvidencePackage {
    pub fn best_score(&self) -> f64 {
        self.frames.iter().map(|f| f.fused).fold(f64::NEG_INFINITY, f64::max)
    }
}

fn context_hits(
    video: &VideoRef,
    frames: &[u64],
    retrieved: &[TextHit],
    index: Option<&TextIndex>,
    channel: Channel,
) -> Vec<TextHit> {
    let covers = |span: (u64, u64)| frames.iter().any(|f| span.0 <= *f && *f <= span.1);
    let mut out: Vec<TextHit> = retrieved
        .iter()
        .filter(|h| &h.doc.video == video && covers(h.doc.frame_span))
        .cloned()
        .collect();
    let mut seen: BTreeSet<String> = out.iter().map(|h| h.doc.doc_id.clone()).collect();
    if let Some(index) = index {
        for f in frames {
            for doc in index.docs_overlapping(video, *f, *f, channel) {
                if seen.insert(doc.doc_id.clone()) {
                    out.push(TextHit { doc: doc.clone(), score: 0.0, highlights: Vec::new() });
                }
            }
        }
    }
    out
}

/// Groups ranked frames by video, best video first, and attaches the
/// transcript, on-screen text and object labels around each video's frames.
pub fn group_by_video(
    frames: &[ScoredFrame],
    execution: Option<&PlanExecution>,
    indices: &SearchIndices<'_>,
) -> Vec<EvidencePackage> {
    let mut by_video: BTreeMap<VideoRef, Vec<ScoredFrame>> = BTreeMap::new();
    for f in frames {
        by_video.entry(f.key.video.clone()).or_default().push(f.clone());
    }
    let mut packages: Vec<EvidencePackage> = by_video
        .into_iter()
        .map(|(video, frames)| {
            let ids: Vec<u64> = frames.iter().map(|f| f.key.frame_id).collect();
            let asr = execution.map_or(&[][..], |e| e.text_hits(Modality::Asr));
            let ocr = execution.map_or(&[][..], |e| e.text_hits(Modality::Ocr));
            let objects = indices
                .objects
                .map(|idx| {
                    frames
                        .iter()
                        .filter_map(|f| idx.labels(&f.key).ok().map(|labels| (f, labels)))
                        .filter(|(_, labels)| !labels.is_empty())
                        .map(|(f, labels)| FrameObjects { key: f.key.clone(), labels })
                        .collect()
                })
                .unwrap_or_default();
            EvidencePackage {
                asr_snippets: context_hits(&video, &ids, asr, indices.text, Channel::Asr),
                ocr_texts: context_hits(&video, &ids, ocr, indices.text, Channel::Ocr),
                objects,
                video,
                frames,
            }
        })
        .collect();
    packages.sort_by(|a, b| b.best_score().total_cmp(&a.best_score()).then_with(|| a.video.cmp(&b.video)));
    packages
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Answer {
    pub answer: String,
    pub cited_frames: Vec<FrameKey>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Error)]
pub enum AnswerError {
    #[error("answer synthesis needs at least one evidence package")]
    NoEvidence,
    #[error("answer synthesis failed: {message}")]
    Llm { message: String, evidence: Vec<EvidencePackage> },
}

pub fn answer_prompt(packages: &[EvidencePackage], question: &str) -> String {
    let mut p = String::from("### task: answer\n");
    p.push_str("Answer the question using only the evidence below. Cite the frames you rely on by their keys.\n");
    p.push_str("Reply format:\nANSWER: <answer>\nCITATIONS: <key>, <key>\n\n");
    p.push_str(&format!("Question: {question}\n\nEvidence:\n"));
    for pkg in packages {
        p.push_str(&format!("[video {}]\n", pkg.video));
        for f in &pkg.frames {
            p.push_str(&format!("- frame {} score {:.3}", f.key, f.fused));
            if let Some(o) = pkg.objects.iter().find(|o| o.key == f.key) {
                p.push_str(&format!(" objects: {}", o.labels.join(", ")));
            }
            p.push('\n');
        }
        for h in &pkg.ocr_texts {
            p.push_str(&format!("  on-screen text @{}: {}\n", h.doc.frame_span.0, h.doc.text));
        }
        for h in &pkg.asr_snippets {
            p.push_str(&format!("  speech @{}-{}: {}\n", h.doc.frame_span.0, h.doc.frame_span.1, h.doc.text));
        }
    }
    p
}

/// Splits a reply into answer text and frame citations.
fn parse_answer(reply: &str) -> (String, Vec<FrameKey>) {
    let mut answer_lines = Vec::new();
    let mut citations = Vec::new();
    for line in reply.lines() {
        let trimmed = line.trim();
        if let Some(rest) = trimmed.strip_prefix("CITATIONS:") {
            citations.extend(
                rest.split([',', ' ', ';'])
                    .map(|t| t.trim_matches(|c: char| matches!(c, '[' | ']' | '`' | '.' | '"')))
                    .filter_map(|t| FrameKey::parse(t).ok()),
            );
        } else if let Some(rest) = trimmed.strip_prefix("ANSWER:") {
            answer_lines.push(rest.trim().to_string());
        } else if !trimmed.is_empty() {
            answer_lines.push(trimmed.to_string());
        }
    }
    (answer_lines.join(" "), citations)
}

/// Produces a grounded answer. Without an LLM a template answer citing the
/// top frame is returned. Citations of frames outside the evidence are
/// dropped with a warning.
pub fn synthesize_answer(
    packages: &[EvidencePackage],
    question: &str,
    llm: Option<&dyn LlmClient>,
) -> Result<Answer, AnswerError> {
    let top = packages.first().and_then(|p| p.frames.first()).ok_or(AnswerError::NoEvidence)?;
    let Some(llm) = llm else {
        return Ok(Answer {
            answer: format!(
                "The best matching evidence is frame {} of video {} (score {:.3}).",
                top.key.frame_id, top.key.video, top.fused
            ),
            cited_frames: vec![top.key.clone()],
            warnings: Vec::new(),
        });
    };
    let reply = llm
        .complete(&answer_prompt(packages, question))
        .map_err(|e| AnswerError::Llm { message: e.to_string(), evidence: packages.to_vec() })?;
    let (answer, cited) = parse_answer(&reply);
    let known: BTreeSet<&FrameKey> = packages.iter().flat_map(|p| p.frames.iter().map(|f| &f.key)).collect();
    let mut warnings = Vec::new();
    let mut cited_frames = Vec::new();
    for key in cited {
        if !known.contains(&key) {
            warnings.push(format!("dropped citation of {key}: not in the evidence"));
        } else if !cited_frames.contains(&key) {
            cited_frames.push(key);
        }
    }
    Ok(Answer { answer, cited_frames, warnings })
}
