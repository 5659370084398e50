//! Query parsing and planning: natural-language query -> weighted SearchPlan.
//!
//! Two paths produce a plan. With an LLM, the model fills the plan fields
//! from a structured prompt and the reply is checked against the plan
//! invariants. Without one (or when the reply is unusable) a rule path
//! builds the plan from landmark detection, quoted phrases and a label
//! lexicon.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::landmark::{detect_landmarks, extract_json_object, LandmarkKb};
use crate::matching::{normalize_whitespace, FoldedText};
use crate::model_clients::LlmClient;
use crate::object_index::{MatchMode, ObjectQuery};

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("empty query")]
    EmptyQuery,
    #[error("invalid modality weights: {0}")]
    Weights(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalityWeights {
    pub semantic: f64,
    pub asr: f64,
    pub ocr: f64,
    pub object: f64,
}

impl Default for ModalityWeights {
    fn default() -> Self {
        Self { semantic: 0.5, asr: 0.2, ocr: 0.2, object: 0.1 }
    }
}

impl ModalityWeights {
    pub fn validate(&self) -> Result<(), PlanError> {
        let all = [self.semantic, self.asr, self.ocr, self.object];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(PlanError::Weights(format!("weights must be finite and >= 0: {self:?}")));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(PlanError::Weights("at least one weight must be positive".into()));
        }
        Ok(())
    }

    pub fn get(&self, m: Modality) -> f64 {
        match m {
            Modality::Semantic => self.semantic,
            Modality::Asr => self.asr,
            Modality::Ocr => self.ocr,
            Modality::Object => self.object,
        }
    }

    pub fn set(&mut self, m: Modality, w: f64) {
        match m {
            Modality::Semantic => self.semantic = w,
            Modality::Asr => self.asr = w,
            Modality::Ocr => self.ocr = w,
            Modality::Object => self.object = w,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Semantic,
    Asr,
    Ocr,
    Object,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Semantic, Modality::Asr, Modality::Ocr, Modality::Object];

    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Semantic => "semantic",
            Modality::Asr => "asr",
            Modality::Ocr => "ocr",
            Modality::Object => "object",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanPath {
    Llm,
    Rule,
    RuleFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchPlan {
    pub original_query: String,
    pub semantic_query: String,
    pub asr_keywords: Vec<String>,
    pub ocr_keywords: Vec<String>,
    pub object_query: Option<ObjectQuery>,
    pub weights: ModalityWeights,
    pub detected_landmarks: Vec<String>,
    pub top_k_per_modality: usize,
    pub path: PlanPath,
    pub warnings: Vec<String>,
}

impl SearchPlan {
    /// Checks the plan invariants against the knowledge base.
    pub fn check(&self, kb: &LandmarkKb) -> Result<(), String> {
        self.weights.validate().map_err(|e| e.to_string())?;
        if self.semantic_query.trim().is_empty() {
            return Err("empty semantic query".into());
        }
        if self.top_k_per_modality == 0 {
            return Err("top_k_per_modality must be >= 1".into());
        }
        let normalized = normalize_whitespace(&self.original_query);
        for kw in self.asr_keywords.iter().chain(&self.ocr_keywords) {
            let kw = normalize_whitespace(kw);
            if kw.is_empty() || !normalized.contains(&kw) {
                return Err(format!("keyword `{kw}` is not verbatim from the query"));
            }
        }
        for name in &self.detected_landmarks {
            if kb.resolve(name).is_none() {
                return Err(format!("landmark `{name}` is not in the knowledge base"));
            }
        }
        Ok(())
    }
}

/// COCO detector labels.
pub const COCO_LABELS: [&str; 80] = [
    "person", "bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck", "boat", "traffic light",
    "fire hydrant", "stop sign", "parking meter", "bench", "bird", "cat", "dog", "horse", "sheep", "cow",
    "elephant", "bear", "zebra", "giraffe", "backpack", "umbrella", "handbag", "tie", "suitcase", "frisbee",
    "skis", "snowboard", "sports ball", "kite", "baseball bat", "baseball glove", "skateboard", "surfboard",
    "tennis racket", "bottle", "wine glass", "cup", "fork", "knife", "spoon", "bowl", "banana", "apple",
    "sandwich", "orange", "broccoli", "carrot", "hot dog", "pizza", "donut", "cake", "chair", "couch",
    "potted plant", "bed", "dining table", "toilet", "tv", "laptop", "mouse", "remote", "keyboard",
    "cell phone", "microwave", "oven", "toaster", "sink", "refrigerator", "book", "clock", "vase", "scissors",
    "teddy bear", "hair drier", "toothbrush",
];

/// Everyday words that name a detector label.
const LABEL_SYNONYMS: [(&str, &str); 20] = [
    ("people", "person"),
    ("man", "person"),
    ("men", "person"),
    ("woman", "person"),
    ("women", "person"),
    ("boy", "person"),
    ("girl", "person"),
    ("child", "person"),
    ("children", "person"),
    ("motorbike", "motorcycle"),
    ("scooter", "motorcycle"),
    ("bike", "bicycle"),
    ("plane", "airplane"),
    ("ship", "boat"),
    ("television", "tv"),
    ("phone", "cell phone"),
    ("sofa", "couch"),
    ("table", "dining table"),
    ("fridge", "refrigerator"),
    ("ball", "sports ball"),
];

/// Detector labels mentioned in `query` (plurals and a few synonyms
/// included), in first-mention order.
pub fn lexicon_labels(query: &str) -> Vec<String> {
    let folded = FoldedText::new(query);
    let mut found: Vec<(usize, &str)> = Vec::new();
    let mut push = |pos: Option<usize>, label: &'static str| {
        if let Some(p) = pos {
            match found.iter_mut().find(|(_, l)| *l == label) {
                Some(entry) => entry.0 = entry.0.min(p),
                None => found.push((p, label)),
            }
        }
    };
    let first = |word: &str| -> Option<usize> {
        [word.to_string(), format!("{word}s"), format!("{word}es")]
            .iter()
            .filter_map(|w| folded.find_all(w).first().map(|m| m.0))
            .min()
    };
    for label in COCO_LABELS {
        push(first(label), label);
    }
    for (word, label) in LABEL_SYNONYMS {
        let label: &'static str = COCO_LABELS.iter().find(|l| **l == label).expect("synonym targets a label");
        push(first(word), label);
    }
    found.sort_by_key(|(p, _)| *p);
    found.into_iter().map(|(_, l)| l.to_string()).collect()
}

/// Phrases between straight or curly double quotes.
pub fn quoted_phrases(query: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current: Option<String> = None;
    for c in query.chars() {
        match (c, current.as_mut()) {
            ('"' | '\u{201C}' | '\u{201D}', Some(_)) => {
                let phrase = normalize_whitespace(&current.take().unwrap());
                if !phrase.is_empty() && !out.contains(&phrase) {
                    out.push(phrase);
                }
            }
            ('"' | '\u{201C}' | '\u{201D}', None) => current = Some(String::new()),
            (c, Some(buf)) => buf.push(c),
            (_, None) => {}
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct PlannerConfig {
    pub weights: ModalityWeights,
    pub top_k_per_modality: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self { weights: ModalityWeights::default(), top_k_per_modality: 100 }
    }
}

/// Zeroes weights of modalities that have nothing to search for; falls back
/// to semantic-only when nothing else remains.
pub(crate) fn settle_weights(plan: &mut SearchPlan) {
    if plan.asr_keywords.is_empty() {
        plan.weights.asr = 0.0;
    }
    if plan.ocr_keywords.is_empty() {
        plan.weights.ocr = 0.0;
    }
    if plan.object_query.is_none() {
        plan.weights.object = 0.0;
    }
    if plan.weights.validate().is_err() {
        plan.weights = ModalityWeights { semantic: 1.0, asr: 0.0, ocr: 0.0, object: 0.0 };
        plan.warnings.push("no weighted modality had a query; searching semantically only".into());
    }
}

fn rule_plan(query: &str, kb: &LandmarkKb, cfg: &PlannerConfig) -> SearchPlan {
    let normalized = normalize_whitespace(query);
    let mut keywords: Vec<String> = Vec::new();
    for m in kb.find(&normalized) {
        let surface = normalized[m.start..m.end].to_string();
        if !keywords.contains(&surface) {
            keywords.push(surface);
        }
    }
    for phrase in quoted_phrases(&normalized) {
        if !keywords.contains(&phrase) {
            keywords.push(phrase);
        }
    }
    let labels = lexicon_labels(&normalized);
    let object_query = (!labels.is_empty())
        .then(|| ObjectQuery::new(labels, MatchMode::Or, 0.0).expect("lexicon labels are non-empty"));
    let mut plan = SearchPlan {
        original_query: query.to_string(),
        semantic_query: normalized,
        asr_keywords: keywords.clone(),
        ocr_keywords: keywords,
        object_query,
        weights: cfg.weights,
        detected_landmarks: detect_landmarks(query, kb),
        top_k_per_modality: cfg.top_k_per_modality,
        path: PlanPath::Rule,
        warnings: Vec::new(),
    };
    settle_weights(&mut plan);
    plan
}

fn plan_prompt(query: &str, kb: &LandmarkKb, cfg: &PlannerConfig) -> String {
    let names: Vec<&str> = kb.entries().iter().map(|e| e.name.as_str()).collect();
    format!(
        "### task: search_plan\n\
         Plan a keyframe search for the user query below. Reply with one JSON object with exactly these fields:\n\
         semantic_query: descriptive English sentence of what is visible (translate if needed);\n\
         asr_keywords, ocr_keywords: phrases copied verbatim from the query (names, Vietnamese terms) likely to be spoken or written on screen;\n\
         object_query: null or {{\"labels\": [COCO labels], \"mode\": \"AND\" or \"OR\"}};\n\
         weights: {{\"semantic\", \"asr\", \"ocr\", \"object\"}} non-negative numbers (defaults {}, {}, {}, {});\n\
         detected_landmarks: names from this list that the query mentions: {}.\n\
         User query: {query}\n",
        cfg.weights.semantic,
        cfg.weights.asr,
        cfg.weights.ocr,
        cfg.weights.object,
        names.join("; "),
    )
}

fn llm_plan(query: &str, kb: &LandmarkKb, cfg: &PlannerConfig, reply: &str) -> Result<SearchPlan, String> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Reply {
        semantic_query: String,
        #[serde(default)]
        asr_keywords: Vec<String>,
        #[serde(default)]
        ocr_keywords: Vec<String>,
        #[serde(default)]
        object_query: Option<ObjectQuery>,
        #[serde(default)]
        weights: Option<ModalityWeights>,
        #[serde(default)]
        detected_landmarks: Vec<String>,
    }
    let json = extract_json_object(reply).ok_or("reply has no JSON object")?;
    let r: Reply = serde_json::from_str(json).map_err(|e| e.to_string())?;
    let object_query = r.object_query.map(|q| q.normalized()).transpose().map_err(|e| e.to_string())?;
    let mut landmarks = Vec::new();
    for name in &r.detected_landmarks {
        let entry = kb.resolve(name).ok_or_else(|| format!("unknown landmark `{name}`"))?;
        if !landmarks.contains(&entry.name) {
            landmarks.push(entry.name.clone());
        }
    }
    let clean = |kws: Vec<String>| {
        let mut out: Vec<String> = Vec::new();
        for k in kws.iter().map(|k| normalize_whitespace(k)) {
            if !out.contains(&k) {
                out.push(k);
            }
        }
        out
    };
    let mut plan = SearchPlan {
        original_query: query.to_string(),
        semantic_query: normalize_whitespace(&r.semantic_query),
        asr_keywords: clean(r.asr_keywords),
        ocr_keywords: clean(r.ocr_keywords),
        object_query,
        weights: r.weights.unwrap_or(cfg.weights),
        detected_landmarks: landmarks,
        top_k_per_modality: cfg.top_k_per_modality,
        path: PlanPath::Llm,
        warnings: Vec::new(),
    };
    plan.weights.validate().map_err(|e| e.to_string())?;
    settle_weights(&mut plan);
    plan.check(kb)?;
    Ok(plan)
}

/// Builds a SearchPlan for `query`.
pub fn build_plan(
    query: &str,
    kb: &LandmarkKb,
    llm: Option<&dyn LlmClient>,
    cfg: &PlannerConfig,
) -> Result<SearchPlan, PlanError> {
    if query.trim().is_empty() {
        return Err(PlanError::EmptyQuery);
    }
    cfg.weights.validate()?;
    let Some(llm) = llm else {
        return Ok(rule_plan(query, kb, cfg));
    };
    let outcome = llm
        .complete(&plan_prompt(query, kb, cfg))
        .map_err(|e| format!("LLM unavailable: {e}"))
        .and_then(|reply| llm_plan(query, kb, cfg, &reply));
    match outcome {
        Ok(plan) => Ok(plan),
        Err(reason) => {
            let mut plan = rule_plan(query, kb, cfg);
            plan.path = PlanPath::RuleFallback;
            plan.warnings.insert(0, format!("planner fell back to rules: {reason}"));
            Ok(plan)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_clients::{ClientError, FnLlm};

    fn kb() -> LandmarkKb {
        LandmarkKb::builtin()
    }

    #[test]
    fn landmark_query_rule_plan() {
        let plan = build_plan("The clip shows Ben Thanh Market", &kb(), None, &PlannerConfig::default()).unwrap();
        assert_eq!(plan.detected_landmarks, vec!["Ben Thanh Market"]);
        assert!(plan.asr_keywords.contains(&"Ben Thanh Market".to_string()));
        assert!(plan.ocr_keywords.contains(&"Ben Thanh Market".to_string()));
        assert_eq!(plan.path, PlanPath::Rule);
        assert_eq!(plan.semantic_query, "The clip shows Ben Thanh Market");
        plan.check(&kb()).unwrap();
    }

    #[test]
    fn object_query_from_lexicon() {
        let plan = build_plan("a red car on a street", &kb(), None, &PlannerConfig::default()).unwrap();
        let q = plan.object_query.clone().unwrap();
        assert_eq!(q.labels, vec!["car"]);
        assert_eq!(q.mode, MatchMode::Or);
        assert!(plan.detected_landmarks.is_empty());
        assert_eq!(plan.weights.asr, 0.0);
        assert!(plan.weights.object > 0.0);
    }

    #[test]
    fn empty_query_rejected() {
        assert_eq!(build_plan("", &kb(), None, &PlannerConfig::default()), Err(PlanError::EmptyQuery));
        assert_eq!(build_plan("  ", &kb(), None, &PlannerConfig::default()), Err(PlanError::EmptyQuery));
    }

    #[test]
    fn quoted_phrases_become_keywords() {
        let plan = build_plan(r#"a banner reading "xin chào"  near Tháp Rùa"#, &kb(), None, &PlannerConfig::default())
            .unwrap();
        assert_eq!(plan.asr_keywords, vec!["Tháp Rùa", "xin chào"]);
        assert_eq!(plan.detected_landmarks, vec!["Turtle Tower"]);
        plan.check(&kb()).unwrap();
    }

    #[test]
    fn lexicon_handles_plurals_and_synonyms() {
        assert_eq!(lexicon_labels("two dogs chase motorbikes past a man"), vec!["dog", "motorcycle", "person"]);
        assert_eq!(lexicon_labels("a traffic light"), vec!["traffic light"]);
        assert!(lexicon_labels("scarecrow").is_empty());
    }

    #[test]
    fn llm_plan_accepted_when_valid() {
        let llm = FnLlm(|_: &str| {
            Ok(r#"```json
{"semantic_query": "people walking in front of a colonial market hall",
 "asr_keywords": ["Chợ Bến Thành"], "ocr_keywords": ["Chợ Bến Thành"],
 "object_query": {"labels": ["person"], "mode": "OR"},
 "weights": {"semantic": 0.6, "asr": 0.1, "ocr": 0.2, "object": 0.1},
 "detected_landmarks": ["Chợ Bến Thành"]}
```"#
                .to_string())
        });
        let plan = build_plan("Người đi bộ trước Chợ Bến Thành", &kb(), Some(&llm), &PlannerConfig::default()).unwrap();
        assert_eq!(plan.path, PlanPath::Llm);
        assert_eq!(plan.detected_landmarks, vec!["Ben Thanh Market"]);
        assert_eq!(plan.weights.semantic, 0.6);
    }

    #[test]
    fn llm_plan_falls_back() {
        // keyword not verbatim
        let llm = FnLlm(|_: &str| Ok(r#"{"semantic_query": "x", "asr_keywords": ["invented"]}"#.to_string()));
        let plan = build_plan("near Turtle Tower", &kb(), Some(&llm), &PlannerConfig::default()).unwrap();
        assert_eq!(plan.path, PlanPath::RuleFallback);
        assert_eq!(plan.detected_landmarks, vec!["Turtle Tower"]);
        assert!(!plan.warnings.is_empty());

        let down = FnLlm(|_: &str| Err(ClientError::transport("offline")));
        let plan = build_plan("near Turtle Tower", &kb(), Some(&down), &PlannerConfig::default()).unwrap();
        assert_eq!(plan.path, PlanPath::RuleFallback);
    }

    #[test]
    fn weights_validation() {
        assert!(ModalityWeights { semantic: 0.0, asr: 0.0, ocr: 0.0, object: 0.0 }.validate().is_err());
        assert!(ModalityWeights { semantic: -1.0, asr: 1.0, ocr: 0.0, object: 0.0 }.validate().is_err());
        let cfg = PlannerConfig {
            weights: ModalityWeights { semantic: 0.0, asr: 1.0, ocr: 0.0, object: 0.0 },
            top_k_per_modality: 10,
        };
        // asr has nothing to search, so semantic takes over
        let plan = build_plan("a quiet beach", &kb(), None, &cfg).unwrap();
        assert_eq!(plan.weights.semantic, 1.0);
        assert_eq!(plan.warnings.len(), 1);
    }
}
