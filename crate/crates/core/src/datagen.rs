//! Synthetic corpus: static glyph images with captions for pretraining, and
//! short clips of a glyph moving along a 4-cell track for video fine-tuning.
//!
//! Frames are 16×16, single channel, on a 4×4 grid of 4×4-pixel cells. A
//! clip visits the cells of a straight track in the order given by its
//! trajectory pattern. LINEAR/ZIGZAG visit the same cells (likewise
//! HOLD-JUMP/ALTERNATE), so only the temporal order tells them apart.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{TextSequence, VideoClip};
use crate::numkit::Tensor;
use crate::{Error, Result};

pub const FRAME_SIZE: usize = 16;
pub const CELL_SIZE: usize = 4;
pub const GRID_CELLS: usize = FRAME_SIZE / CELL_SIZE;
pub const TRACK_LEN: usize = 4;
pub const DEFAULT_NOISE: f32 = 0.05;
pub const MAX_TEXT_LEN: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Square,
    Triangle,
    Cross,
    Ring,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Square, Shape::Triangle, Shape::Cross, Shape::Ring];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
            Shape::Ring => "ring",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.word() == w)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    fn glyph(self) -> [[u8; CELL_SIZE]; CELL_SIZE] {
        match self {
            Shape::Square => [[1, 1, 1, 1], [1, 0, 0, 1], [1, 0, 0, 1], [1, 1, 1, 1]],
            Shape::Triangle => [[1, 0, 0, 0], [1, 1, 0, 0], [1, 1, 1, 0], [1, 1, 1, 1]],
            Shape::Cross => [[1, 0, 0, 1], [0, 1, 1, 0], [0, 1, 1, 0], [1, 0, 0, 1]],
            Shape::Ring => [[0, 1, 1, 0], [1, 0, 0, 1], [1, 0, 0, 1], [0, 1, 1, 0]],
        }
    }
}

/// Order in which a clip visits the four track cells `p0..p3`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pattern {
    Linear,
    Zigzag,
    HoldJump,
    Alternate,
}

impl Pattern {
    pub const ALL: [Pattern; 4] = [Pattern::Linear, Pattern::Zigzag, Pattern::HoldJump, Pattern::Alternate];

    pub fn word(self) -> &'static str {
        match self {
            Pattern::Linear => "linear",
            Pattern::Zigzag => "zigzag",
            Pattern::HoldJump => "holdjump",
            Pattern::Alternate => "alternate",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.word() == w)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Track indices visited at frames 0..4.
    pub fn order(self) -> [usize; TRACK_LEN] {
        match self {
            Pattern::Linear => [0, 1, 2, 3],
            Pattern::Zigzag => [0, 2, 1, 3],
            Pattern::HoldJump => [0, 0, 3, 3],
            Pattern::Alternate => [0, 3, 0, 3],
        }
    }

    /// The pattern that visits the same multiset of track cells.
    pub fn confusable(self) -> Pattern {
        match self {
            Pattern::Linear => Pattern::Zigzag,
            Pattern::Zigzag => Pattern::Linear,
            Pattern::HoldJump => Pattern::Alternate,
            Pattern::Alternate => Pattern::HoldJump,
        }
    }

    /// Recognizes a pattern from the step lengths between consecutive
    /// frames along a straight track.
    pub fn from_steps(steps: [usize; TRACK_LEN - 1]) -> Option<Pattern> {
        match steps {
            [1, 1, 1] => Some(Pattern::Linear),
            [2, 1, 2] => Some(Pattern::Zigzag),
            [0, 3, 0] => Some(Pattern::HoldJump),
            [3, 3, 3] => Some(Pattern::Alternate),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClassSpec {
    pub shape: Shape,
    pub pattern: Pattern,
}

impl ClassSpec {
    pub fn new(shape: Shape, pattern: Pattern) -> Self {
        Self { shape, pattern }
    }

    /// Class id in `0..16`, shape-major.
    pub fn id(self) -> usize {
        self.shape.index() * 4 + self.pattern.index()
    }

    pub fn from_id(id: usize) -> Result<Self> {
        if id >= 16 {
            return Err(Error::invalid(format!("class id {id} out of range")));
        }
        Ok(Self { shape: Shape::ALL[id / 4], pattern: Pattern::ALL[id % 4] })
    }

    pub fn label(self) -> String {
        format!("{} {}", self.shape.word(), self.pattern.word())
    }

    pub fn all() -> Vec<ClassSpec> {
        (0..16).map(|i| ClassSpec::from_id(i).unwrap()).collect()
    }
}

/// A cell of the 4×4 grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

/// Ground truth for one rendered frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameMeta {
    pub shape: Shape,
    pub cell: Cell,
}

/// Draws `shape` into `cell` with additive uniform noise in
/// `[-amplitude, amplitude]`, clamped to `[0, 1]`. Returns a 16×16 tensor.
pub fn render_frame(shape: Shape, cell: Cell, noise_seed: u64, amplitude: f32) -> Result<Tensor> {
    if cell.row >= GRID_CELLS || cell.col >= GRID_CELLS {
        return Err(Error::invalid(format!("cell {cell:?} is off the {GRID_CELLS}x{GRID_CELLS} grid")));
    }
    if !(0.0..=1.0).contains(&amplitude) {
        return Err(Error::invalid(format!("noise amplitude {amplitude} outside [0, 1]")));
    }
    let mut px = vec![0.0f32; FRAME_SIZE * FRAME_SIZE];
    let glyph = shape.glyph();
    for (r, line) in glyph.iter().enumerate() {
        for (c, &on) in line.iter().enumerate() {
            px[(cell.row * CELL_SIZE + r) * FRAME_SIZE + cell.col * CELL_SIZE + c] = on as f32;
        }
    }
    if amplitude > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        for p in px.iter_mut() {
            let n: f32 = rng.random_range(-amplitude..=amplitude);
            *p = (*p + n).clamp(0.0, 1.0);
        }
    }
    Tensor::new(vec![FRAME_SIZE, FRAME_SIZE], px)
}

/// A straight run of four cells along one row or column, in either direction.
pub fn random_track(rng: &mut impl Rng) -> [Cell; TRACK_LEN] {
    let line = rng.random_range(0..GRID_CELLS);
    let vertical = rng.random_bool(0.5);
    let reverse = rng.random_bool(0.5);
    std::array::from_fn(|i| {
        let k = if reverse { TRACK_LEN - 1 - i } else { i };
        if vertical {
            Cell { row: k, col: line }
        } else {
            Cell { row: line, col: k }
        }
    })
}

pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Renders a `frames`-long clip of `spec`. The track and the per-cell noise
/// depend only on `seed`, so confusable patterns rendered with the same seed
/// produce identical frame multisets.
pub fn gen_video(spec: ClassSpec, seed: u64, noise: f32) -> Result<(VideoClip, Vec<FrameMeta>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x7472_6163_6b]));
    let track = random_track(&mut rng);
    let mut data = Vec::with_capacity(TRACK_LEN * FRAME_SIZE * FRAME_SIZE);
    let mut meta = Vec::with_capacity(TRACK_LEN);
    for &k in spec.pattern.order().iter() {
        let frame = render_frame(spec.shape, track[k], mix_seed(&[seed, k as u64]), noise)?;
        data.extend_from_slice(frame.data());
        meta.push(FrameMeta { shape: spec.shape, cell: track[k] });
    }
    let clip = VideoClip::new(Tensor::new(vec![TRACK_LEN, FRAME_SIZE, FRAME_SIZE], data)?)?;
    Ok((clip, meta))
}

/// Repeats one frame `t` times.
pub fn make_static_video(frame: &Tensor, t: usize) -> Result<VideoClip> {
    if t == 0 {
        return Err(Error::invalid("static video needs at least one frame"));
    }
    if frame.rank() != 2 {
        return Err(Error::invalid(format!("frame must be rank 2, got {:?}", frame.shape())));
    }
    let mut data = Vec::with_capacity(frame.len() * t);
    for _ in 0..t {
        data.extend_from_slice(frame.data());
    }
    let mut shape = vec![t];
    shape.extend_from_slice(frame.shape());
    VideoClip::new(Tensor::new(shape, data)?)
}

/// Word-level vocabulary. Id 0 is padding, id 1 stands in for unknown words
/// in free-form captions.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
}

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

const BASE_WORDS: &[&str] = &[
    "a", "video", "of", "the", "image", "shows", "at", "row", "column", "in", "grid", "moving", "manner",
    "across", "0", "1", "2", "3",
];

impl Default for Vocab {
    fn default() -> Self {
        let mut words: Vec<String> = vec![PAD.into(), UNK.into()];
        words.extend(BASE_WORDS.iter().map(|w| w.to_string()));
        words.extend(Shape::ALL.iter().map(|s| s.word().to_string()));
        words.extend(Pattern::ALL.iter().map(|p| p.word().to_string()));
        Self { words }
    }
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.id(word).is_some()
    }

    fn normalize(raw: &str) -> String {
        raw.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
    }

    /// Strict tokenization; an out-of-vocabulary word is an error naming it.
    pub fn encode(&self, text: &str) -> Result<TextSequence> {
        let mut ids = Vec::new();
        for raw in text.split_whitespace() {
            let w = Self::normalize(raw);
            if w.is_empty() {
                continue;
            }
            ids.push(self.id(&w).ok_or_else(|| Error::invalid(format!("out-of-vocabulary word {w:?}")))?);
        }
        TextSequence::new(ids, MAX_TEXT_LEN, self.len())
    }

    /// Tokenization for free-form text: unknown words map to `<unk>` and
    /// over-long text is truncated.
    pub fn encode_lossy(&self, text: &str) -> Result<TextSequence> {
        let unk = self.id(UNK).expect("vocab has <unk>");
        let ids: Vec<usize> = text
            .split_whitespace()
            .map(Self::normalize)
            .filter(|w| !w.is_empty())
            .map(|w| self.id(&w).unwrap_or(unk))
            .take(MAX_TEXT_LEN)
            .collect();
        TextSequence::new(ids, MAX_TEXT_LEN, self.len())
    }
}

/// Tokens of `a video of <label>`.
pub fn label_prompt(vocab: &Vocab, label: &str) -> Result<TextSequence> {
    vocab.encode(&format!("a video of {label}"))
}

/// The three caption templates of a pretraining image.
pub fn image_captions(shape: Shape, cell: Cell) -> [String; 3] {
    let s = shape.word();
    [
        format!("a {s} at row {} column {}", cell.row, cell.col),
        format!("the image shows a {s} in the grid"),
        format!("a video of {s}"),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    /// Single-frame clip.
    pub image: VideoClip,
    pub shape: Shape,
    pub cell: Cell,
    pub captions: [String; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub clip: VideoClip,
    pub class: ClassSpec,
    pub frames: Vec<FrameMeta>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Pretrain,
    PretrainTest,
    Train,
    TestSeen,
    TestHeldout,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::PretrainTest => "pretrain_test",
            Split::Train => "train",
            Split::TestSeen => "test_seen",
            Split::TestHeldout => "test_heldout",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub pretrain_per_shape: usize,
    pub pretrain_test_per_shape: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub heldout_test_per_class: usize,
    pub noise: f32,
    pub heldout: Vec<ClassSpec>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            pretrain_per_shape: 64,
            pretrain_test_per_shape: 16,
            train_per_class: 40,
            test_per_class: 20,
            heldout_test_per_class: 20,
            noise: DEFAULT_NOISE,
            heldout: default_heldout(),
        }
    }
}

/// One held-out class per shape and per pattern.
pub fn default_heldout() -> Vec<ClassSpec> {
    vec![
        ClassSpec::new(Shape::Square, Pattern::Linear),
        ClassSpec::new(Shape::Triangle, Pattern::Zigzag),
        ClassSpec::new(Shape::Cross, Pattern::HoldJump),
        ClassSpec::new(Shape::Ring, Pattern::Alternate),
    ]
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("pretrain_per_shape", self.pretrain_per_shape),
            ("pretrain_test_per_shape", self.pretrain_test_per_shape),
            ("train_per_class", self.train_per_class),
            ("test_per_class", self.test_per_class),
            ("heldout_test_per_class", self.heldout_test_per_class),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, n)| *n == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::InvalidConfig(format!("noise {} outside [0, 1]", self.noise)));
        }
        let held: BTreeSet<_> = self.heldout.iter().copied().collect();
        if held.len() != self.heldout.len() {
            return Err(Error::InvalidConfig("duplicate held-out class".into()));
        }
        if held.is_empty() || held.len() >= 16 {
            return Err(Error::InvalidConfig("need at least one held-out and one seen class".into()));
        }
        let seen: Vec<ClassSpec> = ClassSpec::all().into_iter().filter(|c| !held.contains(c)).collect();
        for h in &self.heldout {
            if !seen.iter().any(|s| s.shape == h.shape) {
                return Err(Error::InvalidConfig(format!(
                    "held-out class {:?} uses shape {:?} absent from seen labels",
                    h.label(),
                    h.shape.word()
                )));
            }
            if !seen.iter().any(|s| s.pattern == h.pattern) {
                return Err(Error::InvalidConfig(format!(
                    "held-out class {:?} uses pattern {:?} absent from seen labels",
                    h.label(),
                    h.pattern.word()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: CorpusConfig,
    pub seed: u64,
    pub vocab: Vocab,
    /// All 16 classes, indexed by class id.
    pub classes: Vec<ClassSpec>,
    pub seen: Vec<ClassSpec>,
    pub heldout: Vec<ClassSpec>,
    pub pretrain: Vec<ImageSample>,
    pub pretrain_test: Vec<ImageSample>,
    pub train: Vec<VideoSample>,
    pub test_seen: Vec<VideoSample>,
    pub test_heldout: Vec<VideoSample>,
}

fn gen_images(split: Split, per_shape: usize, seed: u64, noise: f32) -> Result<Vec<ImageSample>> {
    let mut out = Vec::with_capacity(per_shape * 4);
    for shape in Shape::ALL {
        for i in 0..per_shape {
            let s = mix_seed(&[seed, split.tag(), shape.index() as u64, i as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let cell = Cell { row: rng.random_range(0..GRID_CELLS), col: rng.random_range(0..GRID_CELLS) };
            let frame = render_frame(shape, cell, mix_seed(&[s, 1]), noise)?;
            out.push(ImageSample {
                id: format!("{}-{:05}", split.name(), out.len()),
                image: make_static_video(&frame, 1)?,
                shape,
                cell,
                captions: image_captions(shape, cell),
            });
        }
    }
    Ok(out)
}

/// Clip seeds depend on (split, shape, index) but not on the pattern, so
/// confusable classes of one shape get frame-multiset-matched clips.
fn gen_videos(split: Split, classes: &[ClassSpec], per_class: usize, seed: u64, noise: f32) -> Result<Vec<VideoSample>> {
    let mut out = Vec::with_capacity(classes.len() * per_class);
    for &class in classes {
        for i in 0..per_class {
            let s = mix_seed(&[seed, split.tag(), class.shape.index() as u64, i as u64]);
            let (clip, frames) = gen_video(class, s, noise)?;
            out.push(VideoSample { id: format!("{}-{:05}", split.name(), out.len()), clip, class, frames });
        }
    }
    Ok(out)
}

/// Generates every split. A pure function of `(cfg, seed)`.
pub fn build_corpus(cfg: &CorpusConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let classes = ClassSpec::all();
    let held: BTreeSet<_> = cfg.heldout.iter().copied().collect();
    let seen: Vec<_> = classes.iter().copied().filter(|c| !held.contains(c)).collect();
    let mut heldout = cfg.heldout.clone();
    heldout.sort();
    let vocab = Vocab::default();
    Ok(Dataset {
        pretrain: gen_images(Split::Pretrain, cfg.pretrain_per_shape, seed, cfg.noise)?,
        pretrain_test: gen_images(Split::PretrainTest, cfg.pretrain_test_per_shape, seed, cfg.noise)?,
        train: gen_videos(Split::Train, &seen, cfg.train_per_class, seed, cfg.noise)?,
        test_seen: gen_videos(Split::TestSeen, &seen, cfg.test_per_class, seed, cfg.noise)?,
        test_heldout: gen_videos(Split::TestHeldout, &heldout, cfg.heldout_test_per_class, seed, cfg.noise)?,
        config: cfg.clone(),
        seed,
        vocab,
        classes,
        seen,
        heldout,
    })
}

impl Dataset {
    pub fn videos(&self) -> impl Iterator<Item = &VideoSample> {
        self.train.iter().chain(&self.test_seen).chain(&self.test_heldout)
    }

    /// Pairs of seen classes that share a frame multiset.
    pub fn confusable_seen_pairs(&self) -> Vec<(ClassSpec, ClassSpec)> {
        let mut pairs = Vec::new();
        for &c in &self.seen {
            let other = ClassSpec::new(c.shape, c.pattern.confusable());
            if c.pattern < other.pattern && self.seen.contains(&other) {
                pairs.push((c, other));
            }
        }
        pairs
    }

    /// `sample_id TAB split TAB class_id TAB label` rows for every sample.
    /// Image samples use the shape index as class id and the shape word as label.
    pub fn manifest_tsv(&self) -> String {
        let mut out = String::new();
        for (split, imgs) in [(Split::Pretrain, &self.pretrain), (Split::PretrainTest, &self.pretrain_test)] {
            for s in imgs {
                out.push_str(&format!("{}\t{}\t{}\t{}\n", s.id, split.name(), s.shape.index(), s.shape.word()));
            }
        }
        for (split, vids) in
            [(Split::Train, &self.train), (Split::TestSeen, &self.test_seen), (Split::TestHeldout, &self.test_heldout)]
        {
            for s in vids {
                out.push_str(&format!("{}\t{}\t{}\t{}\n", s.id, split.name(), s.class.id(), s.class.label()));
            }
        }
        out
    }
}
