use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use vidsearch_cli::server::{router, AppState};
use vidsearch_core::engine::{Engine, EngineConfig};
use vidsearch_core::fixture::{self, write_fixture, FixtureInfo};

struct Api {
    _dir: tempfile::TempDir,
    info: FixtureInfo,
    state: Arc<AppState>,
}

fn api_with(allow_reingest: bool, prepare: impl FnOnce(&std::path::Path)) -> Api {
    let dir = tempfile::tempdir().unwrap();
    let info = write_fixture(dir.path()).unwrap();
    prepare(dir.path());
    let engine = Engine::ingest(EngineConfig::load(&info.config_path).unwrap()).unwrap();
    Api { _dir: dir, info, state: AppState::new(engine, allow_reingest) }
}

fn api() -> Api {
    api_with(false, |_| {})
}

impl Api {
    async fn call(&self, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, Value) {
        let req = Request::builder()
            .method(method)
            .uri(uri)
            .header("content-type", "application/json")
            .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
            .unwrap();
        let resp = router(self.state.clone()).oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        (status, serde_json::from_slice(&bytes).unwrap())
    }

    async fn post(&self, uri: &str, body: Value) -> (StatusCode, Value) {
        self.call("POST", uri, Some(&body.to_string())).await
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn semantic_search_respects_k() {
    let api = api();
    let (status, body) = api.post("/api/search", json!({"mode": "semantic", "query": "boats in a storm", "k": 5})).await;
    assert_eq!(status, StatusCode::OK);
    let results = body["results"].as_array().unwrap();
    assert!(!results.is_empty() && results.len() <= 5);
    assert!(results.iter().all(|r| r["key"].is_string() && r["score"].is_number()));
}

#[tokio::test(flavor = "multi_thread")]
async fn llandmark_response_carries_plan_details() {
    let api = api();
    let (status, body) = api.post("/api/search", json!({"mode": "llandmark", "query": fixture::LANDMARK_QUERY, "k": 10})).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["results"][0]["key"], api.info.target.render());
    let details = &body["llandmark"];
    assert_eq!(details["refined_query"], api.info.enhanced_query);
    for m in ["semantic", "asr", "ocr", "object"] {
        assert!(details["weights"][m].is_number(), "weight {m} missing: {}", details["weights"]);
    }
    assert!(!details["evidence"].as_array().unwrap().is_empty());
}

#[tokio::test(flavor = "multi_thread")]
async fn temporal_endpoint_ranks_videos() {
    let api = api();
    let (status, body) =
        api.post("/api/temporal", json!({"queries": fixture::TEMPORAL_QUERIES, "k": 3, "k_per_step": 2})).await;
    assert_eq!(status, StatusCode::OK);
    let target = &api.info.temporal_target;
    assert_eq!(body["videos"][0]["video"], target.to_string());
}

#[tokio::test(flavor = "multi_thread")]
async fn i2i_endpoint_accepts_params() {
    let api = api();
    let params = json!({"per_reference_top_k": 5, "max_landmarks": 1, "images_per_landmark": 2});
    let (status, body) = api.post("/api/i2i", json!({"query": fixture::LANDMARK_QUERY, "k": 10, "params": params})).await;
    assert_eq!(status, StatusCode::OK);
    let results = body["results"].as_array().unwrap();
    assert!(!results.is_empty() && results.len() <= 10);
    assert!(body["i2i"]["references"].as_array().unwrap().len() <= 2);
}

#[tokio::test(flavor = "multi_thread")]
async fn unknown_mode_is_a_400_with_the_allowed_list() {
    let api = api();
    let (status, body) = api.post("/api/search", json!({"mode": "fuzzy", "query": "x"})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"]["kind"], "unknown_mode");
    let allowed: Vec<&str> = body["error"]["allowed_modes"].as_array().unwrap().iter().map(|m| m.as_str().unwrap()).collect();
    assert!(allowed.contains(&"llandmark") && allowed.contains(&"temporal"));
}

#[tokio::test(flavor = "multi_thread")]
async fn disabled_mode_is_a_409_with_capabilities() {
    let api = api_with(false, |dir| std::fs::remove_file(dir.join("objects.json")).unwrap());
    let (status, body) = api.post("/api/search", json!({"mode": "object", "query": "boat"})).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"]["kind"], "mode_disabled");
    assert_eq!(body["error"]["capabilities"]["modes"]["object"]["enabled"], false);
    assert_eq!(body["error"]["capabilities"]["modes"]["semantic"]["enabled"], true);
}

#[tokio::test(flavor = "multi_thread")]
async fn malformed_json_is_a_structured_400() {
    let api = api();
    let (status, body) = api.call("POST", "/api/search", Some("{\"mode\": ")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"]["kind"], "bad_request");
    assert!(body["error"]["message"].as_str().unwrap().len() > 5);
}

#[tokio::test(flavor = "multi_thread")]
async fn unknown_route_is_a_json_404() {
    let api = api();
    let (status, body) = api.call("GET", "/api/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"]["kind"], "not_found");
}

#[tokio::test(flavor = "multi_thread")]
async fn ingest_is_refused_on_a_frozen_server() {
    let api = api();
    let (status, body) = api.post("/api/ingest", json!({})).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"]["kind"], "reingest_disabled");
}

#[tokio::test(flavor = "multi_thread")]
async fn ingest_swaps_in_a_rebuilt_engine() {
    let api = api_with(true, |_| {});
    let (status, report) = api.post("/api/ingest", json!({"exclude": ["L01"]})).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(report["videos"], 4);
    let (_, caps) = api.call("GET", "/api/capabilities", None).await;
    assert_eq!(caps["report"]["videos"], 4);
    assert_eq!(caps["capabilities"]["reingest"], true);
    let (_, body) = api.post("/api/search", json!({"mode": "semantic", "query": fixture::LANDMARK_QUERY, "k": 50})).await;
    assert!(body["results"].as_array().unwrap().iter().all(|r| !r["key"].as_str().unwrap().starts_with("L01/")));
}

#[tokio::test(flavor = "multi_thread")]
async fn eval_endpoint_scores_a_submission() {
    let api = api();
    let gt = r#"{"query_id": "q1", "task": "KIS", "video_name": "L01_V002", "frame_range": [480, 490]}"#;
    let submission = "q1,L01_V002,100\nq1,L01_V002,485\n";
    let (status, body) = api.post("/api/eval", json!({"submission": submission, "ground_truth": gt, "ks": [1, 2]})).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["per_query"][0]["score"], 0.5);
    assert_eq!(body["mean"], 0.5);
}

#[tokio::test(flavor = "multi_thread")]
async fn capabilities_and_frame_endpoints() {
    let api = api();
    let (status, body) = api.call("GET", "/api/capabilities", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["capabilities"]["mock_mode"], true);
    assert_eq!(body["report"]["keyframes"], api.info.keyframes);

    let t = &api.info.target;
    let (status, body) = api.call("GET", &format!("/api/frame/{}", t.render()), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["is_keyframe"], true);
    assert!(body["ocr"].as_array().unwrap().iter().any(|o| o.as_str().unwrap().contains("CATHEDRAL")));

    let (status, _) = api.call("GET", "/api/frame/L01/V001/abc", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}
