//! Deterministic synthetic corpus for demos and end-to-end tests.
//!
//! Frame embeddings are planted relative to the mock embedder so that the
//! landmark query's raw text lands on a decoy frame while its description
//! rewrite lands on the target frame.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::catalog::{select_keyframes, FrameKey, KeyframePolicy, Shot, VideoRef};
use crate::landmark::{enhance_plan, template_queries, LandmarkKb};
use crate::model_clients::mock_embed;
use crate::planner::{build_plan, PlannerConfig};

pub const DIMENSION: usize = 64;
pub const SEED: u64 = 7;
pub const FPS: f64 = 25.0;
pub const LANDMARK_QUERY: &str = "A drone shot of St. Joseph's Cathedral at dusk";
pub const LANDMARK: &str = "St. Joseph's Cathedral";
pub const TEMPORAL_QUERIES: [&str; 2] = ["fireworks bursting over the river at night", "a crowd cheering in a public square"];

const GROUPS: [&str; 2] = ["L01", "L02"];
const VIDEOS: [&str; 4] = ["V001", "V002", "V003", "V004"];
const SHOTS_PER_VIDEO: u64 = 5;
const FRAMES_PER_VIDEO: u64 = 1000;

const ASR_LINES: [&str; 10] = [
    "Good evening and welcome to the news at seven.",
    "Heavy rain is expected across the northern provinces tomorrow.",
    "Farmers in the delta are preparing for the rice harvest.",
    "The city council approved a new metro line this morning.",
    "Students returned to school after the long holiday.",
    "Fishing boats stayed in port as the storm approached.",
    "A new bridge opened to traffic on the outskirts of the city.",
    "Prices at the wholesale market rose slightly this week.",
    "Volunteers cleaned the beach early on Sunday morning.",
    "The football team celebrated its victory with fans.",
];

const OCR_LINES: [&str; 6] = [
    "TIN TỨC THỜI SỰ",
    "BẢN TIN 19H",
    "Dự báo thời tiết",
    "Giao thông đô thị",
    "Thị trường hôm nay",
    "THỂ THAO",
];

const LABELS: [&str; 7] = ["person", "car", "motorcycle", "boat", "bus", "bicycle", "umbrella"];

/// What the fixture planted, for assertions.
#[derive(Debug, Clone)]
pub struct FixtureInfo {
    pub dir: PathBuf,
    pub config_path: PathBuf,
    /// Frame planted near the description-rewritten landmark query.
    pub target: FrameKey,
    /// Frame planted near the raw landmark query.
    pub decoy: FrameKey,
    /// Frames planted near the landmark's reference images.
    pub image_matches: Vec<FrameKey>,
    pub enhanced_query: String,
    /// Video matching every temporal step.
    pub temporal_target: VideoRef,
    /// Video matching only the first temporal step.
    pub temporal_partial: VideoRef,
    pub shots: usize,
    pub keyframes: usize,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn normalize(v: Vec<f32>) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// `a * anchor + b * noise`, normalized.
fn plant(anchor: &[f32], a: f32, noise: &[f32], b: f32) -> Vec<f32> {
    normalize(anchor.iter().zip(noise).map(|(x, n)| a * x + b * n).collect())
}

fn embed(text: &str) -> Vec<f32> {
    mock_embed(text, DIMENSION, SEED)
}

fn image_embed(image: &str) -> Vec<f32> {
    embed(&format!("image:{image}"))
}

/// The semantic query the landmark pipeline produces for [`LANDMARK_QUERY`].
pub fn enhanced_landmark_query(kb: &LandmarkKb) -> String {
    let plan = build_plan(LANDMARK_QUERY, kb, None, &PlannerConfig::default()).expect("fixture query plans");
    enhance_plan(&plan, kb).0.semantic_query
}

fn shot_bounds(video_index: u64, shot: u64) -> (u64, u64) {
    let start = shot * 200;
    // two very short shots exercise the take-all rule
    let len = match (video_index, shot) {
        (1, 4) => 3,
        (6, 4) => 2,
        _ => 120 + splitmix(video_index * 31 + shot) % 80,
    };
    (start, start + len - 1)
}

fn write_lines(path: &Path, lines: &[serde_json::Value]) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for l in lines {
        writeln!(w, "{l}")?;
    }
    w.flush()
}

/// Writes the corpus and an `engine.toml` (mock mode) into `dir`.
pub fn write_fixture(dir: &Path) -> std::io::Result<FixtureInfo> {
    std::fs::create_dir_all(dir)?;
    let kb = LandmarkKb::builtin();
    let enhanced_query = enhanced_landmark_query(&kb);
    let policy = KeyframePolicy::default();

    let videos: Vec<VideoRef> = GROUPS
        .iter()
        .flat_map(|g| VIDEOS.iter().map(move |v| VideoRef::new(*g, *v).expect("fixture ids are valid")))
        .collect();
    let target_video = videos[1].clone(); // L01/V002
    let decoy_video = videos[6].clone(); // L02/V003
    let temporal_target = videos[7].clone(); // L02/V004
    let temporal_partial = videos[3].clone(); // L01/V004

    let entry = kb.get(LANDMARK).expect("fixture landmark is in the KB");
    let mut image_table: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (i, q) in template_queries(entry).into_iter().enumerate() {
        image_table.insert(q, vec![format!("fixture://st-joseph/{i}a.jpg"), format!("fixture://st-joseph/{i}b.jpg")]);
    }
    let reference_image = "fixture://st-joseph/0a.jpg";

    let mut shots = Vec::new();
    let mut metas = Vec::new();
    let mut embeddings = Vec::new();
    let mut asr = Vec::new();
    let mut ocr = Vec::new();
    let mut objects = serde_json::Map::new();
    let mut target = None;
    let mut decoy = None;
    let mut image_matches = Vec::new();
    let mut keyframe_total = 0;

    for (vi, video) in videos.iter().enumerate() {
        let vi = vi as u64;
        metas.push(json!({"group_id": video.group_id, "video_id": video.video_id, "fps": FPS, "frame_count": FRAMES_PER_VIDEO}));
        for s in 0..SHOTS_PER_VIDEO {
            let (start, end) = shot_bounds(vi, s);
            shots.push(json!({"group_id": video.group_id, "video_id": video.video_id, "start_frame": start, "end_frame": end}));
            let shot = Shot::new(video.clone(), start, end).expect("fixture shots are valid");
            let keyframes = select_keyframes(&shot, &policy);
            keyframe_total += keyframes.len();

            let landmark_shot = *video == target_video && s == 2;
            let text = if landmark_shot {
                "Tourists gather in front of St. Joseph's Cathedral as evening falls over Hanoi.".to_string()
            } else {
                ASR_LINES[(splitmix(vi * 7 + s) % ASR_LINES.len() as u64) as usize].to_string()
            };
            asr.push(json!({"group_id": video.group_id, "video_id": video.video_id, "start_frame": start, "end_frame": end, "text": text}));

            let middle = keyframes[keyframes.len() / 2];
            for (ki, &f) in keyframes.iter().enumerate() {
                let key = video.frame(f);
                let noise = embed(&format!("frame-noise:{key}"));
                let vector = if landmark_shot && f == middle {
                    target = Some(key.clone());
                    plant(&embed(&enhanced_query), 0.9, &noise, 0.44)
                } else if landmark_shot {
                    // same scene: close to the reference photo, loosely related to the description
                    image_matches.push(key.clone());
                    let mixed: Vec<f32> = image_embed(reference_image)
                        .iter()
                        .zip(embed(&enhanced_query))
                        .map(|(a, b)| 0.8 * a + 0.4 * b)
                        .collect();
                    plant(&normalize(mixed), 0.9, &noise, 0.44)
                } else if *video == decoy_video && s == 1 && f == middle {
                    decoy = Some(key.clone());
                    plant(&embed(LANDMARK_QUERY), 0.9, &noise, 0.44)
                } else if *video == temporal_target && s == 0 && ki == 0 {
                    plant(&embed(TEMPORAL_QUERIES[0]), 0.8, &noise, 0.6)
                } else if *video == temporal_target && s == 3 && ki == 0 {
                    plant(&embed(TEMPORAL_QUERIES[1]), 0.8, &noise, 0.6)
                } else if *video == temporal_partial && s == 1 && ki == 0 {
                    plant(&embed(TEMPORAL_QUERIES[0]), 0.9, &noise, 0.44)
                } else {
                    noise
                };
                embeddings.push(json!({"key": key.render(), "vector": vector}));

                let h = splitmix(vi * 1000 + f);
                let dets: Vec<serde_json::Value> = (0..h % 4)
                    .map(|j| {
                        let hj = splitmix(h + j);
                        json!({
                            "label": LABELS[(hj % LABELS.len() as u64) as usize],
                            "score": 0.5 + (hj % 50) as f64 / 100.0,
                            "bbox": [0.1 * (j as f64), 0.2, 0.3, 0.4],
                        })
                    })
                    .collect();
                if !dets.is_empty() {
                    objects.insert(key.render(), serde_json::Value::Array(dets));
                }
            }

            let ocr_text = if landmark_shot {
                "NHÀ THỜ LỚN HÀ NỘI - ST. JOSEPH'S CATHEDRAL".to_string()
            } else {
                OCR_LINES[(splitmix(vi * 13 + s) % OCR_LINES.len() as u64) as usize].to_string()
            };
            ocr.push(json!({
                "group_id": video.group_id, "video_id": video.video_id, "frame_id": middle,
                "text_raw": ocr_text, "confidence": 0.9,
            }));
        }
    }

    write_lines(&dir.join("shots.jsonl"), &shots)?;
    write_lines(&dir.join("video_meta.jsonl"), &metas)?;
    write_lines(&dir.join("embeddings.jsonl"), &embeddings)?;
    write_lines(&dir.join("asr.jsonl"), &asr)?;
    write_lines(&dir.join("ocr.jsonl"), &ocr)?;
    std::fs::write(dir.join("objects.json"), serde_json::to_string_pretty(&objects)?)?;
    std::fs::write(dir.join("image_table.json"), serde_json::to_string_pretty(&image_table)?)?;
    let config_path = dir.join("engine.toml");
    std::fs::write(
        &config_path,
        format!(
            "mock_mode = true\nmock_seed = {SEED}\nmock_dimension = {DIMENSION}\n\n[data]\n\
             shots = \"shots.jsonl\"\nvideo_meta = \"video_meta.jsonl\"\nembeddings = \"embeddings.jsonl\"\n\
             asr = \"asr.jsonl\"\nocr = \"ocr.jsonl\"\nobjects = \"objects.json\"\nimage_table = \"image_table.json\"\n"
        ),
    )?;

    Ok(FixtureInfo {
        dir: dir.to_path_buf(),
        config_path,
        target: target.expect("target planted"),
        decoy: decoy.expect("decoy planted"),
        image_matches,
        enhanced_query,
        temporal_target,
        temporal_partial,
        shots: shots.len(),
        keyframes: keyframe_total,
    })
}
