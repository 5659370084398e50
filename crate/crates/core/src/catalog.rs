//! Frame identity, shots, keyframe selection and frame-to-time mapping.
//!
//! Every index in the crate refers to keyframes through [`FrameKey`], whose
//! canonical text form is `group_id/video_id/frame_id`.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KeyError {
    #[error("frame key `{text}` has {count} segments, expected group/video/frame")]
    SegmentCount { text: String, count: usize },
    #[error("frame key `{text}`: empty {segment} segment")]
    EmptySegment { text: String, segment: &'static str },
    #[error("frame key `{text}`: frame segment `{value}` is not a non-negative integer")]
    BadFrame { text: String, value: String },
    #[error("{segment} id `{value}` must be non-empty and must not contain '/'")]
    BadId { segment: &'static str, value: String },
}

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("invalid shot {video} [{start}, {end}]: start after end")]
    InvertedShot { video: VideoRef, start: u64, end: u64 },
    #[error("shots of {video} overlap at frames {first_end} / {second_start}")]
    OverlappingShots { video: VideoRef, first_end: u64, second_start: u64 },
    #[error("invalid keyframe policy: {0}")]
    Policy(String),
    #[error("invalid video metadata for {video}: {reason}")]
    BadMeta { video: VideoRef, reason: String },
    #[error("unknown video {0}")]
    UnknownVideo(VideoRef),
    #[error("frame {frame} out of range for {video} ({frame_count} frames)")]
    FrameOutOfRange { video: VideoRef, frame: u64, frame_count: u64 },
    #[error(transparent)]
    Key(#[from] KeyError),
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn check_id(segment: &'static str, value: &str) -> Result<(), KeyError> {
    if value.is_empty() || value.contains('/') {
        return Err(KeyError::BadId { segment, value: value.to_string() });
    }
    Ok(())
}

/// A video inside a group: the `group_id/video_id` prefix of a frame key.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VideoRef {
    pub group_id: String,
    pub video_id: String,
}

impl VideoRef {
    pub fn new(group_id: impl Into<String>, video_id: impl Into<String>) -> Result<Self, KeyError> {
        let v = Self { group_id: group_id.into(), video_id: video_id.into() };
        check_id("group", &v.group_id)?;
        check_id("video", &v.video_id)?;
        Ok(v)
    }

    pub fn frame(&self, frame_id: u64) -> FrameKey {
        FrameKey { video: self.clone(), frame_id }
    }

    /// Submission-style name, `group_video`.
    pub fn submission_name(&self) -> String {
        format!("{}_{}", self.group_id, self.video_id)
    }
}

impl fmt::Display for VideoRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.group_id, self.video_id)
    }
}

impl Serialize for VideoRef {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// Hierarchical identity of one keyframe.
///
/// Ordering follows the canonical text form byte-wise, so sorting keys and
/// sorting their rendered strings agree.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FrameKey {
    pub video: VideoRef,
    pub frame_id: u64,
}

impl FrameKey {
    pub fn new(group_id: &str, video_id: &str, frame_id: u64) -> Result<Self, KeyError> {
        Ok(VideoRef::new(group_id, video_id)?.frame(frame_id))
    }

    pub fn group_id(&self) -> &str {
        &self.video.group_id
    }

    pub fn video_id(&self) -> &str {
        &self.video.video_id
    }

    pub fn parse(text: &str) -> Result<Self, KeyError> {
        let parts: Vec<&str> = text.split('/').collect();
        if parts.len() != 3 {
            return Err(KeyError::SegmentCount { text: text.to_string(), count: parts.len() });
        }
        for (segment, value) in ["group", "video", "frame"].iter().zip(&parts) {
            if value.is_empty() {
                return Err(KeyError::EmptySegment { text: text.to_string(), segment });
            }
        }
        let frame = parts[2];
        if !frame.bytes().all(|b| b.is_ascii_digit()) {
            return Err(KeyError::BadFrame { text: text.to_string(), value: frame.to_string() });
        }
        let frame_id = frame
            .parse::<u64>()
            .map_err(|_| KeyError::BadFrame { text: text.to_string(), value: frame.to_string() })?;
        Ok(Self {
            video: VideoRef { group_id: parts[0].to_string(), video_id: parts[1].to_string() },
            frame_id,
        })
    }

    pub fn render(&self) -> String {
        self.to_string()
    }

    fn canonical_bytes<'a>(&'a self, frame_buf: &'a [u8]) -> impl Iterator<Item = u8> + 'a {
        self.video
            .group_id
            .bytes()
            .chain(std::iter::once(b'/'))
            .chain(self.video.video_id.bytes())
            .chain(std::iter::once(b'/'))
            .chain(frame_buf.iter().copied())
    }
}

fn decimal(mut n: u64, buf: &mut [u8; 20]) -> &[u8] {
    let mut i = buf.len();
    loop {
        i -= 1;
        buf[i] = b'0' + (n % 10) as u8;
        n /= 10;
        if n == 0 {
            break;
        }
    }
    &buf[i..]
}

impl Ord for FrameKey {
    fn cmp(&self, other: &Self) -> Ordering {
        let (mut a, mut b) = ([0u8; 20], [0u8; 20]);
        let fa = decimal(self.frame_id, &mut a);
        let fb = decimal(other.frame_id, &mut b);
        self.canonical_bytes(fa).cmp(other.canonical_bytes(fb))
    }
}

impl PartialOrd for FrameKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for FrameKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.video, self.frame_id)
    }
}

impl FromStr for FrameKey {
    type Err = KeyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl Serialize for FrameKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FrameKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        FrameKey::parse(&text).map_err(serde::de::Error::custom)
    }
}

/// A shot with inclusive frame bounds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shot {
    pub video: VideoRef,
    pub start_frame: u64,
    pub end_frame: u64,
}

impl Shot {
    pub fn new(video: VideoRef, start_frame: u64, end_frame: u64) -> Result<Self, CatalogError> {
        if start_frame > end_frame {
            return Err(CatalogError::InvertedShot { video, start: start_frame, end: end_frame });
        }
        Ok(Self { video, start_frame, end_frame })
    }

    pub fn frame_count(&self) -> u64 {
        self.end_frame - self.start_frame + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyframePolicy {
    percentiles: Vec<f64>,
    // each percentile as the exact decimal fraction it was written as
    ratios: Vec<(u128, u128)>,
}

/// Shortest decimal representation of `p` as `numerator / 10^digits`.
fn decimal_ratio(p: f64) -> (u128, u128) {
    let text = format!("{p}");
    let (int, frac) = text.split_once('.').unwrap_or((&text, ""));
    let den = 10u128.pow(frac.len() as u32);
    let num = int.parse::<u128>().unwrap_or(0) * den + frac.parse::<u128>().unwrap_or(0);
    (num, den)
}

impl KeyframePolicy {
    pub fn new(percentiles: Vec<f64>) -> Result<Self, CatalogError> {
        if percentiles.is_empty() {
            return Err(CatalogError::Policy("no percentiles".into()));
        }
        if percentiles.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(CatalogError::Policy(format!("percentiles outside [0,1]: {percentiles:?}")));
        }
        if percentiles.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CatalogError::Policy(format!("percentiles not strictly increasing: {percentiles:?}")));
        }
        let ratios = percentiles.iter().map(|p| decimal_ratio(*p)).collect();
        Ok(Self { percentiles, ratios })
    }

    pub fn percentiles(&self) -> &[f64] {
        &self.percentiles
    }
}

impl Default for KeyframePolicy {
    fn default() -> Self {
        Self::new(vec![0.15, 0.5, 0.85]).expect("default percentiles are valid")
    }
}

/// `num * span / den` rounded to the nearest integer, exact halves down.
fn scaled_round_half_down(num: u128, den: u128, span: u64) -> u64 {
    let q = num * span as u128;
    let (floor, rem) = (q / den, q % den);
    (if 2 * rem > den { floor + 1 } else { floor }) as u64
}

/// Picks representative frames of a shot.
///
/// Shots with no more frames than the policy has percentiles contribute every
/// frame; otherwise each percentile maps to `start + p * (end - start)`,
/// rounded half-down, deduplicated. Percentiles are evaluated as the exact
/// decimal fractions they print as, so `0.15 * 10` rounds from exactly 1.5.
pub fn select_keyframes(shot: &Shot, policy: &KeyframePolicy) -> Vec<u64> {
    let (start, end) = (shot.start_frame, shot.end_frame);
    if shot.frame_count() <= policy.percentiles.len() as u64 {
        return (start..=end).collect();
    }
    let span = end - start;
    let mut frames: Vec<u64> = policy
        .ratios
        .iter()
        .map(|&(num, den)| start + scaled_round_half_down(num, den, span))
        .collect();
    frames.sort_unstable();
    frames.dedup();
    frames
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VideoMeta {
    pub video: VideoRef,
    pub fps: f64,
    pub frame_count: u64,
}

impl VideoMeta {
    pub fn new(video: VideoRef, fps: f64, frame_count: u64) -> Result<Self, CatalogError> {
        if !(fps.is_finite() && fps > 0.0) {
            return Err(CatalogError::BadMeta { video, reason: format!("fps {fps} must be positive") });
        }
        if frame_count == 0 {
            return Err(CatalogError::BadMeta { video, reason: "frame_count must be >= 1".into() });
        }
        Ok(Self { video, fps, frame_count })
    }
}

pub fn index_to_time(key: &FrameKey, meta: &VideoMeta) -> Result<f64, CatalogError> {
    if key.video != meta.video {
        return Err(CatalogError::UnknownVideo(key.video.clone()));
    }
    if key.frame_id >= meta.frame_count {
        return Err(CatalogError::FrameOutOfRange {
            video: key.video.clone(),
            frame: key.frame_id,
            frame_count: meta.frame_count,
        });
    }
    Ok(key.frame_id as f64 / meta.fps)
}

#[derive(Debug, Deserialize)]
struct ShotRecord {
    group_id: String,
    video_id: String,
    start_frame: u64,
    end_frame: u64,
}

#[derive(Debug, Deserialize)]
struct MetaRecord {
    group_id: String,
    video_id: String,
    fps: f64,
    frame_count: u64,
}

/// Reads a line-delimited JSON file, skipping blank lines, and converts every
/// record with `convert`. Errors carry the 1-based line number.
pub(crate) fn read_jsonl<T, R, E>(
    path: &Path,
    mut convert: impl FnMut(R) -> Result<T, E>,
) -> Result<Vec<T>, CatalogError>
where
    R: serde::de::DeserializeOwned,
    E: fmt::Display,
{
    let display = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| CatalogError::Io { path: display.clone(), source })?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| CatalogError::Io { path: display.clone(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| CatalogError::Parse { path: display.clone(), line: i + 1, message };
        let record: R = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        out.push(convert(record).map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(out)
}

/// Shots, their keyframes and per-video metadata. Immutable once built.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    shots: BTreeMap<VideoRef, Vec<Shot>>,
    keyframes: BTreeMap<VideoRef, Vec<u64>>,
    metas: BTreeMap<VideoRef, VideoMeta>,
}

impl Catalog {
    /// Builds a catalog, validating shot ordering and selecting keyframes.
    pub fn build(
        shots: Vec<Shot>,
        metas: Vec<VideoMeta>,
        policy: &KeyframePolicy,
    ) -> Result<Self, CatalogError> {
        let mut by_video: BTreeMap<VideoRef, Vec<Shot>> = BTreeMap::new();
        for shot in shots {
            by_video.entry(shot.video.clone()).or_default().push(shot);
        }
        let mut keyframes = BTreeMap::new();
        for (video, list) in by_video.iter_mut() {
            list.sort_by_key(|s| s.start_frame);
            for w in list.windows(2) {
                if w[1].start_frame <= w[0].end_frame {
                    return Err(CatalogError::OverlappingShots {
                        video: video.clone(),
                        first_end: w[0].end_frame,
                        second_start: w[1].start_frame,
                    });
                }
            }
            let frames: Vec<u64> = list.iter().flat_map(|s| select_keyframes(s, policy)).collect();
            keyframes.insert(video.clone(), frames);
        }
        let metas = metas.into_iter().map(|m| (m.video.clone(), m)).collect();
        Ok(Self { shots: by_video, keyframes, metas })
    }

    pub fn load(shots_path: &Path, meta_path: Option<&Path>, policy: &KeyframePolicy) -> Result<Self, CatalogError> {
        let shots = read_jsonl(shots_path, |r: ShotRecord| {
            Shot::new(VideoRef::new(r.group_id, r.video_id)?, r.start_frame, r.end_frame)
        })?;
        let metas = match meta_path {
            Some(p) => read_jsonl(p, |r: MetaRecord| {
                VideoMeta::new(VideoRef::new(r.group_id, r.video_id)?, r.fps, r.frame_count)
            })?,
            None => Vec::new(),
        };
        Self::build(shots, metas, policy)
    }

    /// Drops every video the predicate rejects.
    pub fn retain(&mut self, mut keep: impl FnMut(&VideoRef) -> bool) {
        self.shots.retain(|v, _| keep(v));
        self.keyframes.retain(|v, _| keep(v));
        self.metas.retain(|v, _| keep(v));
    }

    pub fn shot_count(&self) -> usize {
        self.shots.values().map(Vec::len).sum()
    }

    pub fn keyframe_count(&self) -> usize {
        self.keyframes.values().map(Vec::len).sum()
    }

    pub fn videos(&self) -> impl Iterator<Item = &VideoRef> {
        self.shots.keys()
    }

    pub fn shots(&self, video: &VideoRef) -> &[Shot] {
        self.shots.get(video).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn keyframes(&self, video: &VideoRef) -> &[u64] {
        self.keyframes.get(video).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn all_keyframes(&self) -> impl Iterator<Item = FrameKey> + '_ {
        self.keyframes.iter().flat_map(|(v, frames)| frames.iter().map(move |f| v.frame(*f)))
    }

    pub fn contains_keyframe(&self, key: &FrameKey) -> bool {
        self.keyframes(&key.video).binary_search(&key.frame_id).is_ok()
    }

    /// Cataloged keyframes of `video` inside `[start, end]`.
    pub fn keyframes_in_span(&self, video: &VideoRef, start: u64, end: u64) -> impl Iterator<Item = FrameKey> + '_ {
        let frames = self.keyframes(video);
        let lo = frames.partition_point(|f| *f < start);
        let hi = frames.partition_point(|f| *f <= end);
        let video = video.clone();
        frames[lo..hi].iter().map(move |f| video.frame(*f))
    }

    pub fn meta(&self, video: &VideoRef) -> Option<&VideoMeta> {
        self.metas.get(video)
    }

    /// Timestamp of a frame; falls back to `fallback_fps` when no metadata is
    /// recorded for the video.
    pub fn time_of(&self, key: &FrameKey, fallback_fps: Option<f64>) -> Result<f64, CatalogError> {
        match (self.metas.get(&key.video), fallback_fps) {
            (Some(meta), _) => index_to_time(key, meta),
            (None, Some(fps)) if fps > 0.0 => Ok(key.frame_id as f64 / fps),
            _ => Err(CatalogError::UnknownVideo(key.video.clone())),
        }
    }
}
