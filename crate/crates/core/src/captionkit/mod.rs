//! Video captions from frame captions: frame-level descriptions are joined
//! into a fixed summarization prompt and completed by a language backend.
//! A deterministic stub stands in for both the frame captioner and the
//! language model; an HTTP chat-completion client is available behind the
//! `service` feature.

#[cfg(feature = "service")]
mod service;

#[cfg(feature = "service")]
pub use service::ServiceBackend;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::datagen::{FrameMeta, Pattern, Shape};
use crate::weightspace::format::write_atomic;
use crate::{Error, Result};

pub const SYSTEM_PROMPT: &str = "Always answer in one sentence.";
const USER_PREFIX: &str = "Input: These are captions of the frames in a sequential order within the same video: ";
const USER_SUFFIX: &str =
    ". Please summarize the whole video according to the frame captions in short. Output: The video shows";
pub const CAPTION_PREFIX: &str = "The video shows";

/// Frame captions in frame order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameCaptionSet {
    entries: Vec<(usize, String)>,
}

impl FrameCaptionSet {
    pub fn new(entries: Vec<(usize, String)>) -> Result<Self> {
        for w in entries.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::invalid("frame indices must be strictly increasing"));
            }
        }
        if entries.iter().any(|(_, c)| c.trim().is_empty()) {
            return Err(Error::invalid("frame captions must be non-empty"));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(usize, String)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackendTag {
    Stub,
    Service,
}

impl BackendTag {
    pub fn name(self) -> &'static str {
        match self {
            BackendTag::Stub => "stub",
            BackendTag::Service => "service",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VideoCaption {
    pub video_id: String,
    pub caption: String,
    pub backend: BackendTag,
}

/// A language model answering a (system, user) prompt pair.
pub trait CaptionBackend: Sync {
    fn tag(&self) -> BackendTag;
    fn complete(&self, system: &str, user: &str) -> Result<String>;
}

/// The fixed summarization prompts; captions are joined with `", "`.
pub fn build_prompts(frames: &FrameCaptionSet) -> Result<(String, String)> {
    if frames.is_empty() {
        return Err(Error::invalid("no frame captions to summarize"));
    }
    let joined = frames.entries.iter().map(|(_, c)| c.as_str()).collect::<Vec<_>>().join(", ");
    Ok((SYSTEM_PROMPT.to_string(), format!("{USER_PREFIX}{joined}{USER_SUFFIX}")))
}

/// `a <shape> at row <r> column <c>` for each frame.
pub fn stub_frame_captioner(meta: &[FrameMeta]) -> FrameCaptionSet {
    FrameCaptionSet {
        entries: meta
            .iter()
            .enumerate()
            .map(|(i, m)| (i, format!("a {} at row {} column {}", m.shape.word(), m.cell.row, m.cell.col)))
            .collect(),
    }
}

/// Keeps `count` evenly spaced frames (all of them when `count` is 0 or
/// not smaller than the clip).
pub fn sample_frames(meta: &[FrameMeta], count: usize) -> Vec<(usize, FrameMeta)> {
    let t = meta.len();
    if count == 0 || count >= t {
        return meta.iter().copied().enumerate().collect();
    }
    (0..count).map(|i| i * t / count).map(|k| (k, meta[k])).collect()
}

/// Deterministic stand-in for the language model. It reads the frame
/// captions back out of the prompt and names the motion pattern.
#[derive(Clone, Copy, Debug, Default)]
pub struct StubBackend;

fn parse_frame_caption(c: &str) -> Option<(Shape, usize, usize)> {
    let w: Vec<&str> = c.split_whitespace().collect();
    match w.as_slice() {
        ["a", shape, "at", "row", r, "column", col] => Some((Shape::from_word(shape)?, r.parse().ok()?, col.parse().ok()?)),
        _ => None,
    }
}

fn describe(frames: &[(Shape, usize, usize)]) -> Option<String> {
    let shape = frames.first()?.0;
    if frames.iter().any(|f| f.0 != shape) {
        return None;
    }
    let coords: Vec<usize> = if frames.iter().all(|f| f.1 == frames[0].1) {
        frames.iter().map(|f| f.2).collect()
    } else if frames.iter().all(|f| f.2 == frames[0].2) {
        frames.iter().map(|f| f.1).collect()
    } else {
        return Some(format!("a {} moving across the grid", shape.word()));
    };
    let steps: Vec<usize> = coords.windows(2).map(|w| w[0].abs_diff(w[1])).collect();
    match steps.as_slice().try_into().ok().and_then(Pattern::from_steps) {
        Some(p) => Some(format!("a {} moving in a {} manner across the grid", shape.word(), p.word())),
        None => Some(format!("a {} moving across the grid", shape.word())),
    }
}

impl CaptionBackend for StubBackend {
    fn tag(&self) -> BackendTag {
        BackendTag::Stub
    }

    fn complete(&self, _system: &str, user: &str) -> Result<String> {
        let body = user
            .strip_prefix(USER_PREFIX)
            .and_then(|s| s.strip_suffix(USER_SUFFIX))
            .ok_or_else(|| Error::invalid("stub backend only understands the summarization prompt"))?;
        let frames: Option<Vec<_>> = body.split(", ").map(parse_frame_caption).collect();
        Ok(frames.and_then(|f| describe(&f)).unwrap_or_else(|| "a scene on a grid".to_string()))
    }
}

/// Summarizes frame captions into one caption starting with
/// `The video shows`.
pub fn aggregate(video_id: &str, frames: &FrameCaptionSet, backend: &dyn CaptionBackend) -> Result<VideoCaption> {
    let (system, user) = build_prompts(frames)?;
    let raw = backend.complete(&system, &user)?;
    let mut text = raw.trim();
    if let Some(rest) = text.strip_prefix(CAPTION_PREFIX) {
        text = rest.trim_start();
    }
    let text = text.split(['\n', '\t']).next().unwrap_or("").trim();
    if text.is_empty() {
        return Err(Error::EmptyCompletion);
    }
    Ok(VideoCaption { video_id: video_id.to_string(), caption: format!("{CAPTION_PREFIX} {text}"), backend: backend.tag() })
}

/// `video_id TAB caption` rows in dataset order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CaptionStore {
    rows: Vec<(String, String)>,
}

impl CaptionStore {
    pub fn new(rows: Vec<(String, String)>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for (id, cap) in &rows {
            if id.is_empty() || id.contains(['\t', '\n', '\r']) {
                return Err(Error::invalid(format!("video id {id:?} cannot be stored")));
            }
            if cap.is_empty() || cap.contains(['\t', '\n', '\r']) {
                return Err(Error::invalid(format!("caption for {id} contains a tab or line break or is empty")));
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::invalid(format!("duplicate video id {id}")));
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[(String, String)] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_map(&self) -> BTreeMap<&str, &str> {
        self.rows.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect()
    }

    pub fn get(&self, id: &str) -> Option<&str> {
        self.rows.iter().find(|(v, _)| v == id).map(|(_, c)| c.as_str())
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (id, cap) in &self.rows {
            out.push_str(id);
            out.push('\t');
            out.push_str(cap);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let rows = text
            .lines()
            .enumerate()
            .map(|(i, line)| {
                let (id, cap) = line
                    .split_once('\t')
                    .ok_or_else(|| Error::invalid(format!("caption store line {} has no tab", i + 1)))?;
                Ok((id.to_string(), cap.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(rows)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.serialize().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CaptionOptions {
    /// Frames sampled per video for captioning; 0 means all.
    pub frames: usize,
    pub max_in_flight: usize,
}

impl Default for CaptionOptions {
    fn default() -> Self {
        Self { frames: 0, max_in_flight: 4 }
    }
}

/// Captions every video and writes the store atomically. On the first
/// failing video (in dataset order) nothing is written and the error names
/// that video.
pub fn caption_dataset(
    videos: &[(String, Vec<FrameMeta>)],
    backend: &dyn CaptionBackend,
    out_path: Option<&Path>,
    opts: CaptionOptions,
) -> Result<CaptionStore> {
    let work = |i: usize| -> Result<VideoCaption> {
        let (id, meta) = &videos[i];
        let sampled = sample_frames(meta, opts.frames);
        let frames = stub_frame_captioner(&sampled.iter().map(|(_, m)| *m).collect::<Vec<_>>());
        let frames = FrameCaptionSet::new(
            sampled.iter().zip(frames.entries).map(|((k, _), (_, c))| (*k, c)).collect(),
        )?;
        aggregate(id, &frames, backend)
    };
    let results: Vec<Result<VideoCaption>> = if backend.tag() == BackendTag::Stub || opts.max_in_flight <= 1 {
        (0..videos.len()).map(work).collect()
    } else {
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<VideoCaption>>>> = Mutex::new((0..videos.len()).map(|_| None).collect());
        std::thread::scope(|s| {
            for _ in 0..opts.max_in_flight.min(videos.len()) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= videos.len() {
                        break;
                    }
                    let r = work(i);
                    slots.lock().expect("caption worker panicked")[i] = Some(r);
                });
            }
        });
        slots.into_inner().expect("caption worker panicked").into_iter().map(|r| r.expect("every video visited")).collect()
    };
    let mut rows = Vec::with_capacity(videos.len());
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(c) => rows.push((c.video_id, c.caption)),
            Err(e) => return Err(Error::CaptionFailed { video_id: videos[i].0.clone(), source: Box::new(e) }),
        }
    }
    let store = CaptionStore::new(rows)?;
    if let Some(path) = out_path {
        store.save(path)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_video, Cell, ClassSpec};

    fn set(caps: &[&str]) -> FrameCaptionSet {
        FrameCaptionSet::new(caps.iter().enumerate().map(|(i, c)| (i, c.to_string())).collect()).unwrap()
    }

    #[test]
    fn golden_prompts() {
        let (sys, user) = build_prompts(&set(&["a dog runs"])).unwrap();
        assert_eq!(sys, "Always answer in one sentence.");
        assert_eq!(
            user,
            "Input: These are captions of the frames in a sequential order within the same video: a dog runs. \
             Please summarize the whole video according to the frame captions in short. Output: The video shows"
        );
        let (_, user) = build_prompts(&set(&["c1", "c2"])).unwrap();
        assert!(user.find("c1").unwrap() < user.find("c2").unwrap());
        assert!(user.contains("c1, c2"));
        assert!(build_prompts(&FrameCaptionSet::new(vec![]).unwrap()).is_err());
    }

    #[test]
    fn frame_captioner_template() {
        let meta = [FrameMeta { shape: Shape::Square, cell: Cell { row: 1, col: 2 } }];
        assert_eq!(stub_frame_captioner(&meta).entries(), &[(0, "a square at row 1 column 2".to_string())]);
    }

    #[test]
    fn stub_names_every_pattern() {
        for spec in ClassSpec::all() {
            for seed in 0..8 {
                let (_, meta) = gen_video(spec, seed, 0.05).unwrap();
                let c = aggregate("v", &stub_frame_captioner(&meta), &StubBackend).unwrap();
                assert_eq!(
                    c.caption,
                    format!(
                        "The video shows a {} moving in a {} manner across the grid",
                        spec.shape.word(),
                        spec.pattern.word()
                    )
                );
                assert_eq!(c.backend, BackendTag::Stub);
            }
        }
    }

    struct Fixed(&'static str);

    impl CaptionBackend for Fixed {
        fn tag(&self) -> BackendTag {
            BackendTag::Service
        }
        fn complete(&self, _: &str, _: &str) -> Result<String> {
            Ok(self.0.to_string())
        }
    }

    #[test]
    fn completion_is_prefixed() {
        let c = aggregate("v", &set(&["x"]), &Fixed("a girl riding a horse in a field")).unwrap();
        assert_eq!(c.caption, "The video shows a girl riding a horse in a field");
        assert!(matches!(aggregate("v", &set(&["x"]), &Fixed("  ")), Err(Error::EmptyCompletion)));
    }

    #[test]
    fn store_round_trip() {
        let s = CaptionStore::new(vec![
            ("v1".into(), "The video shows a, b, and c".into()),
            ("v2".into(), "x".into()),
        ])
        .unwrap();
        assert_eq!(CaptionStore::parse(&s.serialize()).unwrap(), s);
        assert!(CaptionStore::new(vec![("v".into(), "a\tb".into())]).is_err());
    }
}
