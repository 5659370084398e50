//! Landmark knowledge base, landmark-aware query reformulation, and the
//! LLM-assisted image-to-image pipeline.
//!
//! The image-to-image pipeline runs in four steps:
//!
//! 1. find landmarks in the query and produce web image-search strings,
//! 2. fetch a few reference images per landmark,
//! 3. embed each reference and search the keyframe index with it,
//! 4. merge all candidates, keeping each frame's best score.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::FrameKey;
use crate::matching::{fold_phrase, FoldedText};
use crate::model_clients::{ClientError, EmbeddingClient, ImageRef, ImageSearchClient, LlmClient};
use crate::planner::SearchPlan;
use crate::vector_index::{ScopeFilter, VectorHit, VectorIndex};

pub const BUILTIN_KB: &str = include_str!("../../../data/landmarks.json");

#[derive(Debug, Error)]
pub enum KbError {
    #[error("cannot read landmark KB {path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed landmark KB: {0}")]
    Parse(String),
    #[error("unsupported landmark KB version {0}")]
    Version(u32),
    #[error("invalid landmark KB: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkEntry {
    pub name: String,
    #[serde(default)]
    pub aliases: Vec<String>,
    pub visual_description: String,
    #[serde(default)]
    pub city: Option<String>,
}

impl LandmarkEntry {
    /// Name followed by aliases.
    pub fn surface_forms(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.name.as_str()).chain(self.aliases.iter().map(String::as_str))
    }
}

#[derive(Debug, Deserialize)]
struct KbFile {
    version: u32,
    landmarks: Vec<LandmarkEntry>,
}

/// A landmark occurrence in some text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LandmarkMatch {
    pub name: String,
    /// Byte range of the occurrence in the searched text.
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Default)]
pub struct LandmarkKb {
    entries: Vec<LandmarkEntry>,
    // folded surface form -> entry index, longest forms first
    forms: Vec<(String, usize)>,
}

impl LandmarkKb {
    pub fn new(entries: Vec<LandmarkEntry>) -> Result<Self, KbError> {
        let mut names = HashSet::new();
        let mut owner: BTreeMap<String, usize> = BTreeMap::new();
        for (i, e) in entries.iter().enumerate() {
            if e.name.trim().is_empty() {
                return Err(KbError::Invalid(format!("entry {i} has an empty name")));
            }
            if !names.insert(e.name.clone()) {
                return Err(KbError::Invalid(format!("duplicate landmark name `{}`", e.name)));
            }
            if e.visual_description.trim().is_empty() {
                return Err(KbError::Invalid(format!("`{}` has an empty visual description", e.name)));
            }
            for form in e.surface_forms() {
                let folded = fold_phrase(form);
                if folded.is_empty() {
                    return Err(KbError::Invalid(format!("`{}` has an empty alias", e.name)));
                }
                if let Some(&other) = owner.get(&folded) {
                    if other != i {
                        return Err(KbError::Invalid(format!(
                            "alias `{form}` of `{}` collides with `{}`",
                            e.name, entries[other].name
                        )));
                    }
                }
                owner.insert(folded, i);
            }
        }
        let mut forms: Vec<(String, usize)> = owner.into_iter().collect();
        forms.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        let kb = Self { entries, forms };
        // reformulation must be idempotent, so descriptions may not name landmarks
        for e in &kb.entries {
            if let Some(m) = kb.find(&e.visual_description).first() {
                return Err(KbError::Invalid(format!(
                    "description of `{}` mentions landmark `{}`",
                    e.name, m.name
                )));
            }
        }
        Ok(kb)
    }

    pub fn from_json(text: &str) -> Result<Self, KbError> {
        let file: KbFile = serde_json::from_str(text).map_err(|e| KbError::Parse(e.to_string()))?;
        if file.version != 1 {
            return Err(KbError::Version(file.version));
        }
        Self::new(file.landmarks)
    }

    pub fn load(path: &Path) -> Result<Self, KbError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| KbError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_json(&text)
    }

    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_KB).expect("bundled landmark KB is valid")
    }

    pub fn entries(&self) -> &[LandmarkEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&LandmarkEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Canonical entry for a name or alias, compared in folded form.
    pub fn resolve(&self, form: &str) -> Option<&LandmarkEntry> {
        let folded = fold_phrase(form);
        self.forms.iter().find(|(f, _)| *f == folded).map(|(_, i)| &self.entries[*i])
    }

    /// All non-overlapping landmark occurrences, longest match winning on
    /// overlap, in text order.
    pub fn find(&self, text: &str) -> Vec<LandmarkMatch> {
        let folded = FoldedText::new(text);
        let mut candidates: Vec<(usize, usize, usize)> = Vec::new();
        for (form, entry) in &self.forms {
            for (s, e) in folded.find_all(form) {
                candidates.push((s, e, *entry));
            }
        }
        candidates.sort_by(|a, b| (b.1 - b.0).cmp(&(a.1 - a.0)).then(a.0.cmp(&b.0)));
        let mut chosen: Vec<(usize, usize, usize)> = Vec::new();
        for c in candidates {
            if chosen.iter().all(|o| c.1 <= o.0 || c.0 >= o.1) {
                chosen.push(c);
            }
        }
        chosen.sort_by_key(|c| c.0);
        chosen
            .into_iter()
            .map(|(start, end, i)| LandmarkMatch { name: self.entries[i].name.clone(), start, end })
            .collect()
    }
}

/// Canonical names of the landmarks in `query`, in query order, deduplicated.
pub fn detect_landmarks(query: &str, kb: &LandmarkKb) -> Vec<String> {
    let mut seen = HashSet::new();
    kb.find(query).into_iter().map(|m| m.name).filter(|n| seen.insert(n.clone())).collect()
}

/// Swaps detected landmark names in the semantic query for their visual
/// descriptions. Keyword lists are left alone. Returns warnings for
/// landmarks that could not be applied.
pub fn enhance_plan(plan: &SearchPlan, kb: &LandmarkKb) -> (SearchPlan, Vec<String>) {
    let mut out = plan.clone();
    let mut warnings = Vec::new();
    for name in &plan.detected_landmarks {
        if kb.get(name).is_none() {
            warnings.push(format!("landmark `{name}` is not in the knowledge base"));
        }
    }
    let mut text = out.semantic_query.clone();
    // replace right to left so earlier byte ranges stay valid
    for m in kb.find(&text).into_iter().rev() {
        if !plan.detected_landmarks.contains(&m.name) {
            continue;
        }
        let entry = kb.get(&m.name).expect("matches come from the KB");
        text.replace_range(m.start..m.end, &entry.visual_description);
    }
    out.semantic_query = text;
    (out, warnings)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct I2IParams {
    pub per_reference_top_k: usize,
    pub max_landmarks: usize,
    pub images_per_landmark: usize,
}

impl Default for I2IParams {
    fn default() -> Self {
        Self { per_reference_top_k: 50, max_landmarks: 2, images_per_landmark: 3 }
    }
}

impl I2IParams {
    pub fn validate(&self) -> Result<(), I2IError> {
        if self.per_reference_top_k == 0 || self.max_landmarks == 0 || self.images_per_landmark == 0 {
            return Err(I2IError::Params(*self));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LandmarkQueries {
    pub landmark: String,
    pub queries: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryGenPath {
    Llm,
    Rule,
    RuleFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageQueryPlan {
    pub landmarks: Vec<LandmarkQueries>,
    pub path: QueryGenPath,
    pub warnings: Vec<String>,
}

/// Template search strings used when no LLM is available.
pub fn template_queries(entry: &LandmarkEntry) -> Vec<String> {
    let mut q = vec![entry.name.clone()];
    if let Some(city) = &entry.city {
        q.push(format!("{} {}", entry.name, city));
    }
    q.push(format!("{} from above", entry.name));
    q
}

fn mentions_landmark(query: &str, entry: &LandmarkEntry) -> bool {
    let folded = FoldedText::new(query);
    entry.surface_forms().any(|f| !folded.find_all(&fold_phrase(f)).is_empty())
}

fn image_query_prompt(query: &str, kb: &LandmarkKb, max_landmarks: usize) -> String {
    let mut p = String::from("### task: landmark_image_queries\n");
    p.push_str("Identify the landmarks mentioned in the user query and write descriptive web image-search queries for each.\n");
    p.push_str(&format!("Return at most {max_landmarks} landmarks, using names from this list:\n"));
    for e in kb.entries() {
        p.push_str(&format!("- {}", e.name));
        if let Some(c) = &e.city {
            p.push_str(&format!(" ({c})"));
        }
        p.push('\n');
    }
    p.push_str("Every query must contain the landmark name. Reply with JSON only:\n");
    p.push_str(r#"{"landmarks": [{"name": "...", "queries": ["...", "..."]}]}"#);
    p.push_str(&format!("\nUser query: {query}\n"));
    p
}

/// Extracts the outermost JSON object from a possibly chatty reply.
pub(crate) fn extract_json_object(reply: &str) -> Option<&str> {
    let start = reply.find('{')?;
    let end = reply.rfind('}')?;
    (end > start).then(|| &reply[start..=end])
}

fn parse_image_query_reply(reply: &str, query: &str, kb: &LandmarkKb, max: usize) -> Result<Vec<LandmarkQueries>, String> {
    #[derive(Deserialize)]
    struct Item {
        name: String,
        #[serde(default)]
        queries: Vec<String>,
    }
    #[derive(Deserialize)]
    struct Reply {
        landmarks: Vec<Item>,
    }
    let json = extract_json_object(reply).ok_or("reply has no JSON object")?;
    let parsed: Reply = serde_json::from_str(json).map_err(|e| e.to_string())?;
    let order: Vec<String> = detect_landmarks(query, kb);
    let mut out: Vec<LandmarkQueries> = Vec::new();
    for item in parsed.landmarks {
        let entry = kb.resolve(&item.name).ok_or_else(|| format!("unknown landmark `{}`", item.name))?;
        if out.iter().any(|l| l.landmark == entry.name) {
            continue;
        }
        let mut queries: Vec<String> = Vec::new();
        for q in item.queries.into_iter().map(|q| q.trim().to_string()) {
            if !q.is_empty() && mentions_landmark(&q, entry) && !queries.contains(&q) {
                queries.push(q);
            }
        }
        if queries.is_empty() {
            queries = template_queries(entry);
        }
        out.push(LandmarkQueries { landmark: entry.name.clone(), queries });
    }
    if out.is_empty() {
        return Err("no landmarks in reply".into());
    }
    // query order first; landmarks the query text does not show keep LLM order
    out.sort_by_key(|l| order.iter().position(|n| *n == l.landmark).unwrap_or(usize::MAX));
    out.truncate(max);
    Ok(out)
}

/// Landmarks in `query` with web image-search strings for each, capped at
/// `max_landmarks`. An empty result means no landmark was found.
pub fn generate_image_queries(
    query: &str,
    kb: &LandmarkKb,
    llm: Option<&dyn LlmClient>,
    max_landmarks: usize,
) -> Result<ImageQueryPlan, I2IError> {
    if query.trim().is_empty() {
        return Err(I2IError::EmptyQuery);
    }
    let mut warnings = Vec::new();
    if let Some(llm) = llm {
        let outcome = llm
            .complete(&image_query_prompt(query, kb, max_landmarks))
            .map_err(|e| e.to_string())
            .and_then(|reply| parse_image_query_reply(&reply, query, kb, max_landmarks));
        match outcome {
            Ok(landmarks) => return Ok(ImageQueryPlan { landmarks, path: QueryGenPath::Llm, warnings }),
            Err(e) => warnings.push(format!("LLM landmark query generation failed ({e}); using rules")),
        }
    }
    let landmarks = detect_landmarks(query, kb)
        .into_iter()
        .take(max_landmarks)
        .map(|name| {
            let entry = kb.get(&name).expect("detected names are canonical");
            LandmarkQueries { landmark: name, queries: template_queries(entry) }
        })
        .collect();
    let path = if llm.is_some() { QueryGenPath::RuleFallback } else { QueryGenPath::Rule };
    Ok(ImageQueryPlan { landmarks, path, warnings })
}

#[derive(Debug, Error)]
pub enum I2IError {
    #[error("empty query")]
    EmptyQuery,
    #[error("i2i parameters must all be >= 1: {0:?}")]
    Params(I2IParams),
    #[error("no landmark detected in query; use text search instead")]
    NoLandmark,
    #[error("every reference image failed ({failures} failures); use text search instead")]
    AllFetchesFailed { failures: usize },
    #[error("vector search failed: {0}")]
    Search(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceImage {
    pub landmark: String,
    pub query: String,
    pub image: ImageRef,
    pub hits: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct I2IResult {
    pub queries: ImageQueryPlan,
    pub references: Vec<ReferenceImage>,
    pub hits: Vec<VectorHit>,
    pub warnings: Vec<String>,
}

pub struct I2IClients<'a> {
    pub llm: Option<&'a dyn LlmClient>,
    pub image_search: &'a dyn ImageSearchClient,
    pub embedder: &'a dyn EmbeddingClient,
}

/// Collapses candidate lists, keeping each key's highest score, and sorts by
/// score descending then key.
pub fn merge_max(lists: impl IntoIterator<Item = Vec<VectorHit>>) -> Vec<VectorHit> {
    let mut best: BTreeMap<FrameKey, f32> = BTreeMap::new();
    for hit in lists.into_iter().flatten() {
        best.entry(hit.key).and_modify(|s| *s = s.max(hit.score)).or_insert(hit.score);
    }
    let mut out: Vec<VectorHit> = best.into_iter().map(|(key, score)| VectorHit { key, score }).collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.key.cmp(&b.key)));
    out
}

fn fetch_references(
    plan: &ImageQueryPlan,
    params: &I2IParams,
    search: &dyn ImageSearchClient,
    warnings: &mut Vec<String>,
) -> (Vec<(String, String, ImageRef)>, usize) {
    let mut refs = Vec::new();
    let mut failures = 0;
    for lq in &plan.landmarks {
        let mut got: Vec<ImageRef> = Vec::new();
        for q in &lq.queries {
            let want = params.images_per_landmark - got.len();
            if want == 0 {
                break;
            }
            match search.search_images(q, want) {
                Ok(images) => {
                    for img in images {
                        if got.len() < params.images_per_landmark && !got.contains(&img) {
                            got.push(img.clone());
                            refs.push((lq.landmark.clone(), q.clone(), img));
                        }
                    }
                }
                Err(e) => {
                    failures += 1;
                    warnings.push(format!("image search for `{q}` failed: {e}"));
                }
            }
        }
        if got.is_empty() {
            warnings.push(format!("no reference images found for `{}`", lq.landmark));
        }
    }
    (refs, failures)
}

/// Landmark-grounded image-to-image retrieval.
pub fn i2i_search(
    query: &str,
    params: &I2IParams,
    kb: &LandmarkKb,
    clients: &I2IClients<'_>,
    index: &VectorIndex,
    scope: Option<ScopeFilter<'_>>,
) -> Result<I2IResult, I2IError> {
    params.validate()?;
    let queries = generate_image_queries(query, kb, clients.llm, params.max_landmarks)?;
    if queries.landmarks.is_empty() {
        return Err(I2IError::NoLandmark);
    }
    let mut warnings = queries.warnings.clone();
    let (refs, search_failures) = fetch_references(&queries, params, clients.image_search, &mut warnings);

    let per_reference: Vec<Result<Vec<VectorHit>, String>> = refs
        .par_iter()
        .map(|(_, _, image)| {
            let v = clients.embedder.embed_image(image).map_err(|e: ClientError| e.to_string())?;
            index.search(&v, params.per_reference_top_k, scope).map_err(|e| e.to_string())
        })
        .collect();

    let mut references = Vec::with_capacity(refs.len());
    let mut lists = Vec::new();
    let mut embed_failures = 0;
    for ((landmark, q, image), result) in refs.into_iter().zip(per_reference) {
        let (hits, error) = match result {
            Ok(h) => (h.len(), {
                lists.push(h);
                None
            }),
            Err(e) => {
                embed_failures += 1;
                warnings.push(format!("reference `{image}` failed: {e}"));
                (0, Some(e))
            }
        };
        references.push(ReferenceImage { landmark, query: q, image, hits, error });
    }
    if lists.is_empty() {
        return Err(I2IError::AllFetchesFailed { failures: search_failures + embed_failures });
    }
    Ok(I2IResult { queries, references, hits: merge_max(lists), warnings })
}
