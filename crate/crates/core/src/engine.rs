//! Engine configuration, ingestion and request dispatch. The HTTP server and
//! the command line both drive an [`Engine`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, FrameKey, KeyframePolicy, VideoRef};
use crate::eval_harness::{self, EvalReport, KSet};
use crate::landmark::{enhance_plan, i2i_search, I2IClients, I2IError, I2IParams, I2IResult, LandmarkKb};
use crate::model_clients::{
    Cached, EmbeddingClient, FixtureImageSearch, HttpEmbedder, HttpImageSearch, HttpLlm, ImageSearchClient, LlmClient,
    MockEmbedder, RetryPolicy, Retrying,
};
use crate::object_index::{MatchMode, ObjectIndex, ObjectQuery};
use crate::orchestrator::{
    execute_plan, fuse, group_by_video, synthesize_answer, temporal_search, Answer, AnswerError, EvidencePackage,
    ModalityResults, ScoredFrame, SearchIndices, TemporalResult,
};
use crate::planner::{build_plan, lexicon_labels, settle_weights, Modality, ModalityWeights, PlannerConfig, SearchPlan};
use crate::text_index::{Channel, TextIndex, TextIndexBuilder};
use crate::vector_index::{self, VectorIndex, VectorIndexBuilder};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("config: {0}")]
    Config(String),
    #[error("ingest: {0}")]
    Ingest(String),
    #[error("unknown mode `{mode}`; allowed modes: {}", allowed.join(", "))]
    UnknownMode { mode: String, allowed: Vec<&'static str> },
    #[error("mode `{mode}` is disabled: {reason}")]
    Disabled { mode: Mode, reason: String, capabilities: Box<Capabilities> },
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("search failed: {0}")]
    Search(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub shots: Option<PathBuf>,
    pub video_meta: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub asr: Option<PathBuf>,
    pub ocr: Option<PathBuf>,
    pub objects: Option<PathBuf>,
    pub landmarks: Option<PathBuf>,
    /// JSON map from image-search query to image references, used in mock mode.
    pub image_table: Option<PathBuf>,
    /// Directory of `group/video/frame.jpg` thumbnails.
    pub frames_dir: Option<PathBuf>,
}

impl DataPaths {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.shots,
            &mut self.video_meta,
            &mut self.embeddings,
            &mut self.asr,
            &mut self.ocr,
            &mut self.objects,
            &mut self.landmarks,
            &mut self.image_table,
            &mut self.frames_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientConfig {
    pub llm_endpoint: Option<String>,
    #[serde(skip_serializing)]
    pub llm_api_key: Option<String>,
    pub img_search_endpoint: Option<String>,
    #[serde(skip_serializing)]
    pub img_search_key: Option<String>,
    pub img_search_engine_id: Option<String>,
    pub embed_endpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub data: DataPaths,
    pub weights: ModalityWeights,
    pub top_k_per_modality: usize,
    pub default_k: usize,
    pub temporal_k_per_step: usize,
    /// Fused frames grouped into evidence for answer synthesis.
    pub evidence_frames: usize,
    pub keyframe_percentiles: Vec<f64>,
    pub i2i: I2IParams,
    pub clients: ClientConfig,
    pub mock_mode: bool,
    pub mock_seed: u64,
    /// Embedding size of the mock embedder when no embeddings are loaded.
    pub mock_dimension: usize,
    pub fps_fallback: Option<f64>,
    pub include: Vec<String>,
    pub exclude: Vec<String>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            data: DataPaths::default(),
            weights: ModalityWeights::default(),
            top_k_per_modality: 100,
            default_k: 20,
            temporal_k_per_step: crate::orchestrator::DEFAULT_K_PER_STEP,
            evidence_frames: 20,
            keyframe_percentiles: KeyframePolicy::default().percentiles().to_vec(),
            i2i: I2IParams::default(),
            clients: ClientConfig::default(),
            mock_mode: false,
            mock_seed: 0,
            mock_dimension: 64,
            fps_fallback: None,
            include: Vec::new(),
            exclude: Vec::new(),
        }
    }
}

fn parse_flag(name: &str, value: &str) -> Result<bool, EngineError> {
    match value.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" | "" => Ok(false),
        other => Err(EngineError::Config(format!("{name}: expected a boolean, got `{other}`"))),
    }
}

impl EngineConfig {
    /// Parses TOML; relative data paths resolve against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, EngineError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| EngineError::Config(e.to_string()))?;
        cfg.data.resolve(base);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, EngineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EngineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// File (explicit path, else `ENGINE_CONFIG`, else defaults) overlaid with
    /// environment variables.
    pub fn layered(path: Option<&Path>, env: impl Fn(&str) -> Option<String>) -> Result<Self, EngineError> {
        let from_env = env("ENGINE_CONFIG").map(PathBuf::from);
        let mut cfg = match path.or(from_env.as_deref()) {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply_env(env)?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, env: impl Fn(&str) -> Option<String>) -> Result<(), EngineError> {
        if let Some(v) = env("MOCK_MODE") {
            self.mock_mode = parse_flag("MOCK_MODE", &v)?;
        }
        let c = &mut self.clients;
        for (name, slot) in [
            ("LLM_ENDPOINT", &mut c.llm_endpoint),
            ("LLM_API_KEY", &mut c.llm_api_key),
            ("IMG_SEARCH_ENDPOINT", &mut c.img_search_endpoint),
            ("IMG_SEARCH_KEY", &mut c.img_search_key),
            ("IMG_SEARCH_ENGINE_ID", &mut c.img_search_engine_id),
            ("EMBED_ENDPOINT", &mut c.embed_endpoint),
        ] {
            if let Some(v) = env(name).filter(|v| !v.is_empty()) {
                *slot = Some(v);
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::Config(m));
        if let Err(e) = self.weights.validate() {
            return bad(e.to_string());
        }
        if let Err(e) = self.i2i.validate() {
            return bad(e.to_string());
        }
        if let Err(e) = KeyframePolicy::new(self.keyframe_percentiles.clone()) {
            return bad(e.to_string());
        }
        for (name, v) in [
            ("top_k_per_modality", self.top_k_per_modality),
            ("default_k", self.default_k),
            ("temporal_k_per_step", self.temporal_k_per_step),
            ("evidence_frames", self.evidence_frames),
            ("mock_dimension", self.mock_dimension),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.fps_fallback.is_some_and(|f| f.is_nan() || f <= 0.0) {
            return bad("fps_fallback must be positive".into());
        }
        Ok(())
    }
}

/// Include/exclude lists. An entry without `/` names a group, `group/video`
/// names one video.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Scope {
    include: Vec<(String, Option<String>)>,
    exclude: Vec<(String, Option<String>)>,
}

impl Scope {
    pub fn new(include: &[String], exclude: &[String]) -> Result<Self, EngineError> {
        let parse = |e: &String| -> Result<(String, Option<String>), EngineError> {
            let e = e.trim();
            let bad = || EngineError::BadRequest(format!("bad scope entry `{e}`"));
            match e.split('/').collect::<Vec<_>>()[..] {
                [g] if !g.is_empty() => Ok((g.to_string(), None)),
                [g, v] if !g.is_empty() && !v.is_empty() => Ok((g.to_string(), Some(v.to_string()))),
                _ => Err(bad()),
            }
        };
        Ok(Self {
            include: include.iter().map(parse).collect::<Result<_, _>>()?,
            exclude: exclude.iter().map(parse).collect::<Result<_, _>>()?,
        })
    }

    pub fn is_unrestricted(&self) -> bool {
        self.include.is_empty() && self.exclude.is_empty()
    }

    pub fn keeps(&self, video: &VideoRef) -> bool {
        let hit = |(g, v): &(String, Option<String>)| {
            *g == video.group_id && v.as_ref().is_none_or(|v| *v == video.video_id)
        };
        (self.include.is_empty() || self.include.iter().any(hit)) && !self.exclude.iter().any(hit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Semantic,
    Ocr,
    Asr,
    Object,
    Llandmark,
    I2i,
    Temporal,
}

impl Mode {
    pub const ALL: [Mode; 7] =
        [Mode::Semantic, Mode::Ocr, Mode::Asr, Mode::Object, Mode::Llandmark, Mode::I2i, Mode::Temporal];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Semantic => "semantic",
            Mode::Ocr => "ocr",
            Mode::Asr => "asr",
            Mode::Object => "object",
            Mode::Llandmark => "llandmark",
            Mode::I2i => "i2i",
            Mode::Temporal => "temporal",
        }
    }

    pub fn parse(text: &str) -> Result<Self, EngineError> {
        Mode::ALL.into_iter().find(|m| m.as_str() == text.trim().to_ascii_lowercase()).ok_or_else(|| {
            EngineError::UnknownMode { mode: text.to_string(), allowed: Mode::ALL.iter().map(Mode::as_str).collect() }
        })
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeStatus {
    pub enabled: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Capabilities {
    pub modes: BTreeMap<Mode, ModeStatus>,
    pub mock_mode: bool,
    pub llm: bool,
    pub image_search: bool,
    pub reingest: bool,
}

impl Capabilities {
    pub fn enabled(&self, mode: Mode) -> bool {
        self.modes.get(&mode).is_some_and(|s| s.enabled)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IngestReport {
    pub videos: usize,
    pub shots: usize,
    pub keyframes: usize,
    pub embeddings: usize,
    pub dimension: Option<usize>,
    pub asr_docs: usize,
    pub ocr_docs: usize,
    pub text_postings: usize,
    pub detection_frames: usize,
    pub detections: usize,
    pub landmarks: usize,
    pub warnings: Vec<String>,
}

pub struct Engine {
    config: EngineConfig,
    catalog: Catalog,
    vectors: Option<VectorIndex>,
    text: Option<TextIndex>,
    objects: Option<ObjectIndex>,
    kb: LandmarkKb,
    embedder: Option<Arc<dyn EmbeddingClient>>,
    llm: Option<Arc<dyn LlmClient>>,
    image_search: Option<Arc<dyn ImageSearchClient>>,
    report: IngestReport,
    capabilities: Capabilities,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine").field("report", &self.report).finish_non_exhaustive()
    }
}

/// `Some(path)` when configured and present; a warning otherwise.
fn present<'a>(what: &str, path: &'a Option<PathBuf>, warnings: &mut Vec<String>) -> Option<&'a Path> {
    match path {
        None => {
            warnings.push(format!("no {what} file configured"));
            None
        }
        Some(p) if !p.exists() => {
            warnings.push(format!("{what} file {} not found", p.display()));
            None
        }
        Some(p) => Some(p),
    }
}

fn ingest_err(e: impl std::fmt::Display) -> EngineError {
    EngineError::Ingest(e.to_string())
}

impl Engine {
    /// Loads every configured artifact, applies the include/exclude lists and
    /// freezes the indices. Missing files disable their modes; unreadable or
    /// malformed files are errors.
    pub fn ingest(config: EngineConfig) -> Result<Self, EngineError> {
        config.validate()?;
        let scope = Scope::new(&config.include, &config.exclude).map_err(|e| EngineError::Config(e.to_string()))?;
        let mut report = IngestReport::default();
        let w = &mut report.warnings;

        let policy = KeyframePolicy::new(config.keyframe_percentiles.clone()).map_err(ingest_err)?;
        let mut catalog = match present("shots", &config.data.shots, w) {
            Some(p) => {
                let meta = present("video metadata", &config.data.video_meta, w);
                Catalog::load(p, meta, &policy).map_err(ingest_err)?
            }
            None => Catalog::default(),
        };
        catalog.retain(|v| scope.keeps(v));

        let vectors = match present("embeddings", &config.data.embeddings, w) {
            Some(p) => {
                let (dim, rows) = if p.extension().is_some_and(|e| e == "jsonl") {
                    let rows = vector_index::read_jsonl(p).map_err(ingest_err)?;
                    (rows.first().map_or(config.mock_dimension, |r| r.vector.len()), rows)
                } else {
                    vector_index::read_binary(p).map_err(ingest_err)?
                };
                let mut b = VectorIndexBuilder::new(dim).map_err(ingest_err)?;
                for row in rows {
                    b.add_embedding(row).map_err(ingest_err)?;
                }
                b.retain(|k| scope.keeps(&k.video));
                let index = b.freeze();
                if catalog.shot_count() > 0 {
                    let stray = index.keys().iter().filter(|k| !catalog.contains_keyframe(k)).count();
                    if stray > 0 {
                        w.push(format!("{stray} embedding(s) are not cataloged keyframes"));
                    }
                }
                Some(index)
            }
            None => None,
        };

        let asr = present("ASR", &config.data.asr, w);
        let ocr = present("OCR", &config.data.ocr, w);
        let text = if asr.is_some() || ocr.is_some() {
            let mut b = TextIndexBuilder::new();
            if let Some(p) = asr {
                b.load_asr(p).map_err(ingest_err)?;
            }
            if let Some(p) = ocr {
                b.load_ocr(p).map_err(ingest_err)?;
            }
            b.retain(|d| scope.keeps(&d.video));
            Some(b.freeze())
        } else {
            None
        };

        let objects = match present("objects", &config.data.objects, w) {
            Some(p) => {
                let keep = scope.clone();
                let index = ObjectIndex::load_store(p).with_scope(move |k| keep.keeps(&k.video));
                // ingestion validates the store up front so schema errors surface here
                let store = index.store().map_err(ingest_err)?;
                report.detection_frames = store.len();
                report.detections = store.detection_count();
                Some(index)
            }
            None => None,
        };

        let kb = match &config.data.landmarks {
            Some(p) => LandmarkKb::load(p).map_err(ingest_err)?,
            None => LandmarkKb::builtin(),
        };

        let (embedder, llm, image_search) = build_clients(&config, vectors.as_ref(), &mut report.warnings)?;

        report.videos = catalog.videos().count();
        report.shots = catalog.shot_count();
        report.keyframes = catalog.keyframe_count();
        report.embeddings = vectors.as_ref().map_or(0, VectorIndex::len);
        report.dimension = vectors.as_ref().map(VectorIndex::dimension);
        if let Some(t) = &text {
            report.asr_docs = t.doc_count(Channel::Asr);
            report.ocr_docs = t.doc_count(Channel::Ocr);
            report.text_postings = t.posting_count();
        }
        report.landmarks = kb.len();

        let mut engine = Self {
            capabilities: Capabilities {
                modes: BTreeMap::new(),
                mock_mode: config.mock_mode,
                llm: llm.is_some(),
                image_search: image_search.is_some(),
                reingest: false,
            },
            config,
            catalog,
            vectors,
            text,
            objects,
            kb,
            embedder,
            llm,
            image_search,
            report,
        };
        engine.capabilities.modes = engine.mode_table();
        for (mode, status) in &engine.capabilities.modes {
            if let Some(r) = &status.reason {
                tracing::info!(mode = mode.as_str(), reason = r.as_str(), "mode disabled");
            }
        }
        Ok(engine)
    }

    fn mode_table(&self) -> BTreeMap<Mode, ModeStatus> {
        let semantic = match (&self.vectors, &self.embedder) {
            (None, _) => Err("no embeddings loaded"),
            (_, None) => Err("no embedding client configured"),
            _ => Ok(()),
        };
        let channel = |c: Channel, what: &'static str| match &self.text {
            Some(t) if t.doc_count(c) > 0 => Ok(()),
            _ => Err(what),
        };
        let asr = channel(Channel::Asr, "no ASR transcripts loaded");
        let ocr = channel(Channel::Ocr, "no OCR text loaded");
        let object = self.objects.as_ref().map(|_| ()).ok_or("no object detections loaded");
        let llandmark = if [semantic, asr, ocr, object].iter().any(Result::is_ok) {
            Ok(())
        } else {
            Err("no modality is available")
        };
        let i2i = semantic.and(self.image_search.as_ref().map(|_| ()).ok_or("no image search client configured"));
        [
            (Mode::Semantic, semantic),
            (Mode::Ocr, ocr),
            (Mode::Asr, asr),
            (Mode::Object, object),
            (Mode::Llandmark, llandmark),
            (Mode::I2i, i2i),
            (Mode::Temporal, semantic),
        ]
        .into_iter()
        .map(|(m, r)| (m, ModeStatus { enabled: r.is_ok(), reason: r.err().map(String::from) }))
        .collect()
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn report(&self) -> &IngestReport {
        &self.report
    }

    pub fn capabilities(&self) -> &Capabilities {
        &self.capabilities
    }

    pub fn set_reingest(&mut self, allowed: bool) {
        self.capabilities.reingest = allowed;
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn vectors(&self) -> Option<&VectorIndex> {
        self.vectors.as_ref()
    }

    pub fn text(&self) -> Option<&TextIndex> {
        self.text.as_ref()
    }

    pub fn objects(&self) -> Option<&ObjectIndex> {
        self.objects.as_ref()
    }

    pub fn kb(&self) -> &LandmarkKb {
        &self.kb
    }

    fn indices(&self) -> SearchIndices<'_> {
        SearchIndices {
            catalog: &self.catalog,
            vectors: self.vectors.as_ref(),
            text: self.text.as_ref(),
            objects: self.objects.as_ref(),
        }
    }

    fn require(&self, mode: Mode) -> Result<(), EngineError> {
        match self.capabilities.modes.get(&mode) {
            Some(s) if s.enabled => Ok(()),
            status => Err(EngineError::Disabled {
                mode,
                reason: status.and_then(|s| s.reason.clone()).unwrap_or_default(),
                capabilities: Box::new(self.capabilities.clone()),
            }),
        }
    }

    fn time_of(&self, key: &FrameKey) -> Option<f64> {
        self.catalog.time_of(key, self.config.fps_fallback).ok()
    }

    fn item(&self, key: FrameKey, score: f64) -> ResultItem {
        ResultItem {
            time_seconds: self.time_of(&key),
            key,
            score,
            span: None,
            text: None,
            highlights: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn search(&self, req: &SearchRequest) -> Result<SearchResponse, EngineError> {
        let started = Instant::now();
        let mode = Mode::parse(&req.mode)?;
        self.require(mode)?;
        let k = req.k.unwrap_or(self.config.default_k);
        if k == 0 {
            return Err(EngineError::BadRequest("k must be >= 1".into()));
        }
        let o = &req.overrides;
        let scope = Scope::new(&o.include, &o.exclude)?;
        let filter = |key: &FrameKey| scope.keeps(&key.video);
        let scope_filter: Option<vector_index::ScopeFilter<'_>> =
            if scope.is_unrestricted() { None } else { Some(&filter) };

        let mut resp = SearchResponse {
            mode,
            query: None,
            queries: Vec::new(),
            k,
            results: Vec::new(),
            videos: Vec::new(),
            llandmark: None,
            i2i: None,
            temporal: None,
            warnings: Vec::new(),
            capabilities: self.capabilities.clone(),
            timing: Timing::default(),
        };

        if mode == Mode::Temporal {
            let queries: Vec<String> = match (&req.queries, &req.query) {
                (Some(q), _) if !q.is_empty() => q.clone(),
                (_, Some(q)) => q.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect(),
                _ => Vec::new(),
            };
            if queries.is_empty() || queries.iter().any(|q| q.trim().is_empty()) {
                return Err(EngineError::BadRequest("temporal mode needs a non-empty list of queries".into()));
            }
            let embedder = self.embedder.as_deref().expect("temporal mode requires an embedder");
            let index = self.vectors.as_ref().expect("temporal mode requires embeddings");
            let depth = o.k_per_step.unwrap_or(self.config.temporal_k_per_step);
            if depth == 0 {
                return Err(EngineError::BadRequest("k_per_step must be >= 1".into()));
            }
            let mut result =
                temporal_search(&queries, embedder, index, depth, scope_filter).map_err(search_err)?;
            result.ranking.truncate(k);
            resp.videos = result.ranking.iter().map(|(v, s)| VideoScore { video: v.clone(), score: *s }).collect();
            resp.queries = queries;
            resp.temporal = Some(result);
            resp.timing.total_ms = elapsed_ms(started);
            return Ok(resp);
        }

        let raw = req.query.as_deref().map(str::trim).unwrap_or_default();
        if raw.is_empty() {
            return Err(EngineError::BadRequest(format!("{mode} mode needs a non-empty query")));
        }
        let query = if o.translate { self.translate(raw, &mut resp.warnings) } else { raw.to_string() };

        match mode {
            Mode::Semantic => {
                let embedder = self.embedder.as_deref().expect("semantic mode requires an embedder");
                let index = self.vectors.as_ref().expect("semantic mode requires embeddings");
                let v = embedder.embed_text(&query).map_err(search_err)?;
                let hits = index.search(&v, k, scope_filter).map_err(search_err)?;
                resp.results = hits.into_iter().map(|h| self.item(h.key, h.score as f64)).collect();
            }
            Mode::Asr | Mode::Ocr => {
                let channel = if mode == Mode::Asr { Channel::Asr } else { Channel::Ocr };
                let index = self.text.as_ref().expect("text modes require a text index");
                let mut hits = index.search_text(&query, Some(channel), usize::MAX);
                hits.retain(|h| scope.keeps(&h.doc.video));
                hits.truncate(k);
                resp.results = hits
                    .into_iter()
                    .map(|h| {
                        let key = h.doc.video.frame(h.doc.frame_span.0);
                        ResultItem {
                            span: (channel == Channel::Asr).then_some(h.doc.frame_span),
                            text: Some(h.doc.text.clone()),
                            highlights: h.highlights.clone(),
                            ..self.item(key, h.score)
                        }
                    })
                    .collect();
            }
            Mode::Object => {
                let labels = match &o.object_labels {
                    Some(l) => l.clone(),
                    None => lexicon_labels(&query),
                };
                if labels.is_empty() {
                    return Err(EngineError::BadRequest(format!("no object labels recognized in `{query}`")));
                }
                let q = ObjectQuery::new(labels, o.object_mode.unwrap_or_default(), o.min_score.unwrap_or(0.0))
                    .map_err(|e| EngineError::BadRequest(e.to_string()))?;
                let index = self.objects.as_ref().expect("object mode requires detections");
                let mut hits = index.filter_frames(&q, usize::MAX).map_err(search_err)?;
                hits.retain(|h| scope.keeps(&h.key.video));
                hits.truncate(k);
                resp.results = hits
                    .into_iter()
                    .map(|h| ResultItem {
                        labels: index.labels(&h.key).unwrap_or_default(),
                        ..self.item(h.key, h.matched_count as f64)
                    })
                    .collect();
            }
            Mode::Llandmark => {
                let details = self.llandmark(&query, k, o, scope_filter, &mut resp.warnings)?;
                resp.results = details.fused.iter().map(|f| self.item(f.key.clone(), f.fused)).collect();
                resp.llandmark = Some(details);
            }
            Mode::I2i => {
                let params = o.i2i.unwrap_or(self.config.i2i);
                let clients = I2IClients {
                    llm: self.llm.as_deref(),
                    image_search: self.image_search.as_deref().expect("i2i mode requires image search"),
                    embedder: self.embedder.as_deref().expect("i2i mode requires an embedder"),
                };
                let index = self.vectors.as_ref().expect("i2i mode requires embeddings");
                match i2i_search(&query, &params, &self.kb, &clients, index, scope_filter) {
                    Ok(mut r) => {
                        r.hits.truncate(k);
                        resp.results = r.hits.iter().map(|h| self.item(h.key.clone(), h.score as f64)).collect();
                        resp.warnings.extend(r.warnings.iter().cloned());
                        resp.i2i = Some(r);
                    }
                    Err(e @ (I2IError::NoLandmark | I2IError::AllFetchesFailed { .. })) => {
                        resp.warnings.push(format!("{e}; fell back to semantic search"));
                        let v = clients.embedder.embed_text(&query).map_err(search_err)?;
                        let hits = index.search(&v, k, scope_filter).map_err(search_err)?;
                        resp.results = hits.into_iter().map(|h| self.item(h.key, h.score as f64)).collect();
                    }
                    Err(e @ (I2IError::EmptyQuery | I2IError::Params(_))) => {
                        return Err(EngineError::BadRequest(e.to_string()))
                    }
                    Err(e) => return Err(search_err(e)),
                }
            }
            Mode::Temporal => unreachable!("handled above"),
        }
        resp.query = Some(query);
        resp.timing.total_ms = elapsed_ms(started);
        Ok(resp)
    }

    fn llandmark(
        &self,
        query: &str,
        k: usize,
        o: &Overrides,
        scope: Option<vector_index::ScopeFilter<'_>>,
        warnings: &mut Vec<String>,
    ) -> Result<LlandmarkDetails, EngineError> {
        let cfg = PlannerConfig {
            weights: self.config.weights,
            top_k_per_modality: o.top_k_per_modality.unwrap_or(self.config.top_k_per_modality),
        };
        let mut plan = build_plan(query, &self.kb, self.llm.as_deref(), &cfg).map_err(|e| {
            EngineError::BadRequest(e.to_string())
        })?;
        if let Some(w) = o.weights {
            w.validate().map_err(|e| EngineError::BadRequest(e.to_string()))?;
            plan.weights = w;
            settle_weights(&mut plan);
        }
        warnings.extend(plan.warnings.iter().cloned());
        let (enhanced, enhancement_warnings) = enhance_plan(&plan, &self.kb);
        warnings.extend(enhancement_warnings.iter().cloned());

        let indices = self.indices();
        let mut enhanced = enhanced;
        for m in Modality::ALL {
            let status = match m {
                Modality::Semantic => Mode::Semantic,
                Modality::Asr => Mode::Asr,
                Modality::Ocr => Mode::Ocr,
                Modality::Object => Mode::Object,
            };
            if enhanced.weights.get(m) > 0.0 && !self.capabilities.enabled(status) {
                warnings.push(format!("{} modality unavailable; its weight was set to 0", m.as_str()));
                enhanced.weights.set(m, 0.0);
            }
        }
        if enhanced.weights.validate().is_err() {
            return Err(EngineError::Search("no weighted modality is available for this query".into()));
        }
        let embedder = self.embedder.clone().unwrap_or_else(|| Arc::new(MockEmbedder::new(1, 0)));
        let execution = execute_plan(&enhanced, &indices, embedder.as_ref(), scope).map_err(search_err)?;
        warnings.extend(execution.warnings.iter().cloned());
        let mut fused = fuse(&execution, &enhanced.weights, &self.catalog);
        let evidence_len = self.config.evidence_frames.min(fused.len());
        let evidence = group_by_video(&fused[..evidence_len], Some(&execution), &indices);
        let (answer, answer_error) = if !o.answer.unwrap_or(true) {
            (None, None)
        } else {
            match synthesize_answer(&evidence, query, self.llm.as_deref()) {
                Ok(a) => {
                    warnings.extend(a.warnings.iter().cloned());
                    (Some(a), None)
                }
                Err(AnswerError::NoEvidence) => (None, None),
                Err(e) => {
                    warnings.push(e.to_string());
                    (None, Some(e.to_string()))
                }
            }
        };
        fused.truncate(k);
        Ok(LlandmarkDetails {
            refined_query: enhanced.semantic_query.clone(),
            weights: enhanced.weights,
            per_modality: execution.results,
            plan,
            enhanced_plan: enhanced,
            fused,
            evidence,
            answer,
            answer_error,
        })
    }

    fn translate(&self, query: &str, warnings: &mut Vec<String>) -> String {
        let Some(llm) = &self.llm else {
            warnings.push("translation requested but no LLM is configured; query left as is".into());
            return query.to_string();
        };
        let prompt = format!(
            "### task: translate\nTranslate this video search query into English. Reply with the translation only.\n\n{query}"
        );
        match llm.complete(&prompt) {
            Ok(t) if !t.trim().is_empty() => t.trim().to_string(),
            Ok(_) => {
                warnings.push("translation came back empty; query left as is".into());
                query.to_string()
            }
            Err(e) => {
                warnings.push(format!("translation failed ({e}); query left as is"));
                query.to_string()
            }
        }
    }

    pub fn frame_info(&self, key: &FrameKey) -> FrameInfo {
        let shot = self
            .catalog
            .shots(&key.video)
            .iter()
            .find(|s| s.start_frame <= key.frame_id && key.frame_id <= s.end_frame)
            .map(|s| (s.start_frame, s.end_frame));
        let texts = |c: Channel| -> Vec<String> {
            self.text.as_ref().map_or_else(Vec::new, |t| {
                t.docs_overlapping(&key.video, key.frame_id, key.frame_id, c).map(|d| d.text.clone()).collect()
            })
        };
        let thumbnail = self.config.data.frames_dir.as_ref().and_then(|dir| {
            let p = dir.join(key.group_id()).join(key.video_id()).join(format!("{}.jpg", key.frame_id));
            p.exists().then(|| p.display().to_string())
        });
        FrameInfo {
            key: key.clone(),
            is_keyframe: self.catalog.contains_keyframe(key),
            shot,
            fps: self.catalog.meta(&key.video).map(|m| m.fps).or(self.config.fps_fallback),
            time_seconds: self.time_of(key),
            time_error: self.catalog.time_of(key, self.config.fps_fallback).err().map(|e| e.to_string()),
            asr: texts(Channel::Asr),
            ocr: texts(Channel::Ocr),
            objects: self.objects.as_ref().and_then(|o| o.labels(key).ok()).unwrap_or_default(),
            thumbnail,
        }
    }

    pub fn evaluate(&self, submission: &str, ground_truth: &str, ks: Option<Vec<usize>>) -> Result<EvalReport, EngineError> {
        let bad = |e: eval_harness::EvalError| EngineError::BadRequest(e.to_string());
        let ks = match ks {
            Some(ks) => KSet::new(ks).map_err(bad)?,
            None => KSet::default(),
        };
        let sub = eval_harness::parse_submission_str("submission", submission).map_err(bad)?;
        let truth = eval_harness::parse_ground_truth_str("ground_truth", ground_truth).map_err(bad)?;
        eval_harness::evaluate(&sub, &truth, &ks).map_err(bad)
    }
}

type Clients = (Option<Arc<dyn EmbeddingClient>>, Option<Arc<dyn LlmClient>>, Option<Arc<dyn ImageSearchClient>>);

fn build_clients(
    config: &EngineConfig,
    vectors: Option<&VectorIndex>,
    warnings: &mut Vec<String>,
) -> Result<Clients, EngineError> {
    let dim = vectors.map_or(config.mock_dimension, VectorIndex::dimension);
    let client_err = |e: crate::model_clients::ClientError| EngineError::Config(e.to_string());
    if config.mock_mode {
        let embedder: Arc<dyn EmbeddingClient> = Arc::new(MockEmbedder::new(dim, config.mock_seed));
        let image_search: Option<Arc<dyn ImageSearchClient>> = match &config.data.image_table {
            Some(p) if p.exists() => Some(Arc::new(FixtureImageSearch::load(p).map_err(client_err)?)),
            _ => {
                warnings.push("mock mode without an image table; i2i disabled".into());
                None
            }
        };
        // agents take their rule-based paths in mock mode
        return Ok((Some(embedder), None, image_search));
    }
    let c = &config.clients;
    let embedder: Option<Arc<dyn EmbeddingClient>> = match &c.embed_endpoint {
        Some(url) => Some(Arc::new(Cached::new(Retrying::new(
            HttpEmbedder::new(url.clone(), dim).map_err(client_err)?,
            RetryPolicy::default(),
        )))),
        None => {
            warnings.push("no embedding endpoint configured".into());
            None
        }
    };
    let llm: Option<Arc<dyn LlmClient>> = match (&c.llm_endpoint, &c.llm_api_key) {
        (Some(url), key) => Some(Arc::new(Cached::new(Retrying::new(
            HttpLlm::new(url.clone(), key.clone().unwrap_or_default()).map_err(client_err)?,
            RetryPolicy::default(),
        )))),
        (None, _) => {
            warnings.push("no LLM endpoint configured; planner and answers use rules".into());
            None
        }
    };
    let image_search: Option<Arc<dyn ImageSearchClient>> =
        match (&c.img_search_endpoint, &c.img_search_key, &c.img_search_engine_id) {
            (Some(url), Some(key), Some(cx)) => Some(Arc::new(Cached::new(Retrying::new(
                HttpImageSearch::new(url.clone(), key.clone(), cx.clone()).map_err(client_err)?,
                RetryPolicy::default(),
            )))),
            _ => match &config.data.image_table {
                Some(p) if p.exists() => Some(Arc::new(FixtureImageSearch::load(p).map_err(client_err)?)),
                _ => {
                    warnings.push("image search not fully configured; i2i disabled".into());
                    None
                }
            },
        };
    Ok((embedder, llm, image_search))
}

fn search_err(e: impl std::fmt::Display) -> EngineError {
    EngineError::Search(e.to_string())
}

fn elapsed_ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1000.0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Overrides {
    pub weights: Option<ModalityWeights>,
    pub top_k_per_modality: Option<usize>,
    pub i2i: Option<I2IParams>,
    pub k_per_step: Option<usize>,
    pub object_labels: Option<Vec<String>>,
    pub object_mode: Option<MatchMode>,
    pub min_score: Option<f32>,
    pub include: Vec<String>,
    pub exclude: Vec<String>,
    /// Translate the query to English through the LLM before searching.
    pub translate: bool,
    /// Synthesize an answer in llandmark mode (default on).
    pub answer: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchRequest {
    pub mode: String,
    #[serde(default)]
    pub query: Option<String>,
    #[serde(default)]
    pub queries: Option<Vec<String>>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub overrides: Overrides,
}

impl SearchRequest {
    pub fn new(mode: Mode, query: impl Into<String>, k: usize) -> Self {
        Self {
            mode: mode.as_str().into(),
            query: Some(query.into()),
            queries: None,
            k: Some(k),
            overrides: Overrides::default(),
        }
    }

    pub fn temporal(queries: Vec<String>, k: usize) -> Self {
        Self { mode: "temporal".into(), query: None, queries: Some(queries), k: Some(k), overrides: Overrides::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultItem {
    pub key: FrameKey,
    pub score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_seconds: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub span: Option<(u64, u64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub highlights: Vec<(usize, usize)>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VideoScore {
    pub video: VideoRef,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LlandmarkDetails {
    pub plan: SearchPlan,
    pub enhanced_plan: SearchPlan,
    pub refined_query: String,
    pub weights: ModalityWeights,
    pub per_modality: BTreeMap<Modality, ModalityResults>,
    pub fused: Vec<ScoredFrame>,
    pub evidence: Vec<EvidencePackage>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer: Option<Answer>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer_error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Timing {
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchResponse {
    pub mode: Mode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub queries: Vec<String>,
    pub k: usize,
    pub results: Vec<ResultItem>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub videos: Vec<VideoScore>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub llandmark: Option<LlandmarkDetails>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub i2i: Option<I2IResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temporal: Option<TemporalResult>,
    pub warnings: Vec<String>,
    pub capabilities: Capabilities,
    pub timing: Timing,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameInfo {
    pub key: FrameKey,
    pub is_keyframe: bool,
    pub shot: Option<(u64, u64)>,
    pub fps: Option<f64>,
    pub time_seconds: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_error: Option<String>,
    pub asr: Vec<String>,
    pub ocr: Vec<String>,
    pub objects: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub thumbnail: Option<String>,
}
