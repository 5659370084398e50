use std::collections::BTreeSet;
use std::path::Path;

use serde_json::Value;

use vidsearch_core::engine::{Engine, EngineConfig, EngineError, Mode, SearchRequest};
use vidsearch_core::fixture::{self, write_fixture, FixtureInfo};

fn setup() -> (tempfile::TempDir, FixtureInfo, EngineConfig) {
    let dir = tempfile::tempdir().unwrap();
    let info = write_fixture(dir.path()).unwrap();
    let cfg = EngineConfig::load(&info.config_path).unwrap();
    (dir, info, cfg)
}

fn jsonl(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

/// Keyframes at 15/50/85 percent with halves rounded down, in integers.
fn expected_keyframes(start: u64, end: u64) -> BTreeSet<u64> {
    if end - start < 3 {
        return (start..=end).collect();
    }
    [15, 50, 85]
        .iter()
        .map(|p| {
            let n = 100 * start + p * (end - start);
            n / 100 + u64::from(n % 100 > 50)
        })
        .collect()
}

#[test]
fn ingest_report_matches_the_files() {
    let (dir, info, cfg) = setup();
    let engine = Engine::ingest(cfg).unwrap();
    let report = engine.report();

    let shots = jsonl(&dir.path().join("shots.jsonl"));
    let videos: BTreeSet<(String, String)> = shots
        .iter()
        .map(|s| (s["group_id"].as_str().unwrap().to_string(), s["video_id"].as_str().unwrap().to_string()))
        .collect();
    let keyframes: usize = shots
        .iter()
        .map(|s| expected_keyframes(s["start_frame"].as_u64().unwrap(), s["end_frame"].as_u64().unwrap()).len())
        .sum();
    let objects: serde_json::Map<String, Value> =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("objects.json")).unwrap()).unwrap();

    assert_eq!(report.videos, videos.len());
    assert_eq!(report.shots, shots.len());
    assert_eq!(report.shots, info.shots);
    assert_eq!(report.keyframes, keyframes);
    assert_eq!(report.keyframes, info.keyframes);
    assert_eq!(report.embeddings, jsonl(&dir.path().join("embeddings.jsonl")).len());
    assert_eq!(report.dimension, Some(fixture::DIMENSION));
    assert_eq!(report.asr_docs, jsonl(&dir.path().join("asr.jsonl")).len());
    assert_eq!(report.ocr_docs, jsonl(&dir.path().join("ocr.jsonl")).len());
    assert_eq!(report.detection_frames, objects.len());
    assert_eq!(report.detections, objects.values().map(|d| d.as_array().unwrap().len()).sum::<usize>());
    assert!(report.warnings.is_empty(), "{:?}", report.warnings);
    let caps = engine.capabilities();
    assert!(Mode::ALL.iter().all(|m| caps.enabled(*m)), "{caps:?}");
}

#[test]
fn every_embedded_frame_is_a_cataloged_keyframe() {
    let (_dir, _info, cfg) = setup();
    let engine = Engine::ingest(cfg).unwrap();
    let vectors = engine.vectors().unwrap();
    assert!(vectors.keys().iter().all(|k| engine.catalog().contains_keyframe(k)));
}

#[test]
fn landmark_mode_beats_plain_semantic_on_the_planted_target() {
    let (_dir, info, cfg) = setup();
    let engine = Engine::ingest(cfg).unwrap();
    let semantic = engine.search(&SearchRequest::new(Mode::Semantic, fixture::LANDMARK_QUERY, 10)).unwrap();
    assert_eq!(semantic.results[0].key, info.decoy);

    let resp = engine.search(&SearchRequest::new(Mode::Llandmark, fixture::LANDMARK_QUERY, 10)).unwrap();
    assert_eq!(resp.results[0].key, info.target);
    assert!(resp.results.len() <= 10);
    assert!(resp.results.windows(2).all(|w| w[0].score >= w[1].score));
    let details = resp.llandmark.as_ref().unwrap();
    assert_eq!(details.plan.detected_landmarks, vec![fixture::LANDMARK.to_string()]);
    assert_eq!(details.refined_query, info.enhanced_query);
    assert!(!details.refined_query.contains(fixture::LANDMARK));
    assert!(details.evidence.iter().any(|p| p.video == info.target.video));
    let answer = details.answer.as_ref().expect("template answer without an LLM");
    assert!(!answer.cited_frames.is_empty());
}

#[test]
fn temporal_mode_keeps_only_videos_matching_every_step() {
    let (_dir, info, cfg) = setup();
    let engine = Engine::ingest(cfg).unwrap();
    let queries = fixture::TEMPORAL_QUERIES.map(String::from).to_vec();
    let mut req = SearchRequest::temporal(queries, 5);
    req.overrides.k_per_step = Some(2);
    let resp = engine.search(&req).unwrap();
    assert_eq!(resp.videos[0].video, info.temporal_target);
    assert!(resp.videos.iter().all(|v| v.video != info.temporal_partial));
    let t = resp.temporal.as_ref().unwrap();
    assert_eq!(t.steps.len(), 2);
    assert!(t.steps[0].per_video.contains_key(&info.temporal_partial));
}

#[test]
fn i2i_mode_surfaces_frames_near_reference_images() {
    let (_dir, info, cfg) = setup();
    let engine = Engine::ingest(cfg).unwrap();
    let resp = engine.search(&SearchRequest::new(Mode::I2i, fixture::LANDMARK_QUERY, 10)).unwrap();
    let top: BTreeSet<_> = resp.results.iter().take(info.image_matches.len()).map(|r| r.key.clone()).collect();
    let want: BTreeSet<_> = info.image_matches.iter().cloned().collect();
    assert_eq!(top, want);
    let keys: BTreeSet<_> = resp.results.iter().map(|r| &r.key).collect();
    assert_eq!(keys.len(), resp.results.len());
}

#[test]
fn ocr_and_asr_find_the_landmark_shot() {
    let (_dir, info, cfg) = setup();
    let engine = Engine::ingest(cfg).unwrap();
    for (mode, query) in [(Mode::Ocr, "nha tho lon"), (Mode::Asr, "Joseph Cathedral")] {
        let resp = engine.search(&SearchRequest::new(mode, query, 5)).unwrap();
        assert!(!resp.results.is_empty(), "{mode} found nothing");
        assert!(resp.results.iter().all(|r| r.key.video == info.target.video), "{mode}: {:?}", resp.results);
    }
}

#[test]
fn excluded_groups_never_appear() {
    let (_dir, info, mut cfg) = setup();
    cfg.exclude = vec!["L01".into()];
    let engine = Engine::ingest(cfg).unwrap();
    assert_eq!(engine.report().videos, 4);
    for mode in [Mode::Semantic, Mode::Llandmark, Mode::I2i, Mode::Ocr] {
        let resp = engine.search(&SearchRequest::new(mode, fixture::LANDMARK_QUERY, 50)).unwrap();
        assert!(resp.results.iter().all(|r| r.key.group_id() != "L01"), "{mode} leaked L01");
        assert!(resp.results.iter().all(|r| r.key != info.target));
    }
}

#[test]
fn include_limits_search_to_one_video() {
    let (_dir, info, mut cfg) = setup();
    cfg.include = vec![format!("{}/{}", info.decoy.group_id(), info.decoy.video_id())];
    let engine = Engine::ingest(cfg).unwrap();
    assert_eq!(engine.report().videos, 1);
    let resp = engine.search(&SearchRequest::new(Mode::Semantic, "anything at all", 100)).unwrap();
    assert!(!resp.results.is_empty());
    assert!(resp.results.iter().all(|r| r.key.video == info.decoy.video));
}

#[test]
fn missing_object_file_disables_only_object_mode() {
    let (dir, _info, cfg) = setup();
    std::fs::remove_file(dir.path().join("objects.json")).unwrap();
    let engine = Engine::ingest(cfg).unwrap();
    let caps = engine.capabilities();
    assert!(!caps.enabled(Mode::Object));
    assert!(Mode::ALL.iter().filter(|m| **m != Mode::Object).all(|m| caps.enabled(*m)));
    assert!(!engine.report().warnings.is_empty());
    match engine.search(&SearchRequest::new(Mode::Object, "boat", 5)) {
        Err(EngineError::Disabled { mode, .. }) => assert_eq!(mode, Mode::Object),
        other => panic!("expected Disabled, got {other:?}"),
    }
    // the fused modes still run, with the object weight zeroed
    let resp = engine.search(&SearchRequest::new(Mode::Llandmark, fixture::LANDMARK_QUERY, 5)).unwrap();
    assert_eq!(resp.llandmark.unwrap().weights.object, 0.0);
}

#[test]
fn malformed_shot_file_is_an_ingest_error() {
    let (dir, _info, cfg) = setup();
    std::fs::write(dir.path().join("shots.jsonl"), "{\"group_id\": \"L01\"\n").unwrap();
    assert!(matches!(Engine::ingest(cfg), Err(EngineError::Ingest(_))));
}

#[test]
fn unknown_mode_lists_the_allowed_modes() {
    let (_dir, _info, cfg) = setup();
    let engine = Engine::ingest(cfg).unwrap();
    let req = SearchRequest { mode: "fuzzy".into(), ..SearchRequest::new(Mode::Semantic, "x", 5) };
    match engine.search(&req) {
        Err(EngineError::UnknownMode { mode, allowed }) => {
            assert_eq!(mode, "fuzzy");
            assert_eq!(allowed.len(), Mode::ALL.len());
        }
        other => panic!("expected UnknownMode, got {other:?}"),
    }
}

#[test]
fn frame_info_reports_shot_and_time() {
    let (_dir, info, cfg) = setup();
    let engine = Engine::ingest(cfg).unwrap();
    let f = engine.frame_info(&info.target);
    assert!(f.is_keyframe);
    let (start, end) = f.shot.unwrap();
    assert!(start <= info.target.frame_id && info.target.frame_id <= end);
    assert_eq!(f.time_seconds, Some(info.target.frame_id as f64 / fixture::FPS));
}
