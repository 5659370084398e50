//! Multimodal keyframe retrieval over news video collections: dense
//! embedding search, BM25 over speech and on-screen text, object filters,
//! landmark-aware query planning, late fusion and temporal search.

pub mod catalog;
pub mod engine;
pub mod eval_harness;
pub mod fixture;
pub mod landmark;
pub mod matching;
pub mod model_clients;
pub mod object_index;
pub mod ocr_refine;
pub mod orchestrator;
pub mod planner;
pub mod text_index;
pub mod vector_index;

pub use catalog::{Catalog, FrameKey, KeyframePolicy, Shot, VideoMeta, VideoRef};
pub use engine::{Engine, EngineConfig, EngineError, Mode, SearchRequest, SearchResponse};
pub use landmark::{I2IParams, LandmarkKb};
pub use model_clients::{ClientError, EmbeddingClient, ImageSearchClient, LlmClient};
pub use object_index::{MatchMode, ObjectIndex, ObjectQuery};
pub use orchestrator::ScoredFrame;
pub use planner::{Modality, ModalityWeights, SearchPlan};
pub use text_index::{Channel, TextIndex};
pub use vector_index::VectorIndex;
